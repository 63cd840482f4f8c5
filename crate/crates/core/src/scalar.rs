//! Scalar-generic numeric kernels shared by every module: vector similarity,
//! normalization, kernel density estimation and greedy bipartite matching.
//!
//! Everything here is written against [`num_traits::Float`] so the same code
//! serves `f32` embeddings from the gateway and `f64` statistics.

use num_traits::{Float, FromPrimitive};

/// Dot product of two equally sized slices.
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn l2_norm<T: Float>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Scales `v` in place to unit length. Returns `false` and leaves the input
/// untouched when the norm is zero or not finite.
pub fn l2_normalize<T: Float>(v: &mut [T]) -> bool {
    let norm = l2_norm(v);
    if norm <= T::zero() || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x = *x / norm;
    }
    true
}

/// Cosine similarity. Zero vectors compare as 0.
pub fn cosine<T: Float>(a: &[T], b: &[T]) -> T {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na <= T::zero() || nb <= T::zero() {
        return T::zero();
    }
    dot(a, b) / (na * nb)
}

pub fn mean<T: Float + FromPrimitive>(xs: &[T]) -> Option<T> {
    if xs.is_empty() {
        return None;
    }
    let sum = xs.iter().fold(T::zero(), |acc, &x| acc + x);
    Some(sum / T::from_usize(xs.len())?)
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_std<T: Float + FromPrimitive>(xs: &[T]) -> Option<T> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    let ss = xs.iter().fold(T::zero(), |acc, &x| acc + (x - m) * (x - m));
    Some((ss / T::from_usize(xs.len() - 1)?).sqrt())
}

/// Linear-interpolated quantile of already sorted data, `q` in [0, 1].
pub fn quantile_sorted<T: Float + FromPrimitive>(sorted: &[T], q: T) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    let last = T::from_usize(sorted.len() - 1)?;
    let pos = q * last;
    let lo = pos.floor().to_usize()?;
    let hi = pos.ceil().to_usize()?.min(sorted.len() - 1);
    let frac = pos - pos.floor();
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Silverman's rule-of-thumb bandwidth: `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`.
///
/// When the spread estimate collapses to zero (all samples equal) the larger
/// of the two spread measures is used, and if that is also zero `floor` is
/// returned.
pub fn silverman_bandwidth<T: Float + FromPrimitive>(samples: &[T], floor: T) -> T {
    let n = samples.len();
    let Some(sd) = sample_std(samples) else {
        return floor;
    };
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let c = |v: f64| T::from_f64(v).expect("representable constant");
    let iqr = quantile_sorted(&sorted, c(0.75)).unwrap_or(T::zero())
        - quantile_sorted(&sorted, c(0.25)).unwrap_or(T::zero());
    let iqr_scaled = iqr / c(1.34);
    let mut spread = sd.min(iqr_scaled);
    if spread <= T::zero() {
        spread = sd.max(iqr_scaled);
    }
    if spread <= T::zero() {
        return floor;
    }
    let n = T::from_usize(n).expect("sample count");
    c(0.9) * spread * n.powf(c(-0.2))
}

/// Gaussian kernel density estimate evaluated at `x`.
pub fn gaussian_kde_at<T: Float + FromPrimitive>(samples: &[T], bandwidth: T, x: T) -> T {
    let n = T::from_usize(samples.len()).expect("sample count");
    let norm = T::from_f64((2.0 * std::f64::consts::PI).sqrt()).expect("constant");
    let two = T::from_f64(2.0).expect("constant");
    let sum = samples.iter().fold(T::zero(), |acc, &s| {
        let z = (x - s) / bandwidth;
        acc + (-(z * z) / two).exp()
    });
    sum / (n * bandwidth * norm)
}

/// `points` evenly spaced values covering `[lo, hi]` inclusive.
pub fn uniform_grid<T: Float + FromPrimitive>(lo: T, hi: T, points: usize) -> Vec<T> {
    assert!(points >= 2, "a grid needs at least two points");
    let step = (hi - lo) / T::from_usize(points - 1).expect("grid size");
    (0..points)
        .map(|i| lo + step * T::from_usize(i).expect("grid index"))
        .collect()
}

/// One edge chosen by [`greedy_matching`]: indices into the left and right
/// item lists and the edge weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair<T> {
    pub left: usize,
    pub right: usize,
    pub weight: T,
}

/// Global-maximum greedy bipartite matching.
///
/// Repeatedly picks the heaviest remaining edge, removes both endpoints and
/// continues until one side is exhausted. `tie_key(i, j)` orders edges of
/// equal weight; the smallest key wins.
pub fn greedy_matching<T, K, F>(weights: &[Vec<T>], mut tie_key: F) -> Vec<MatchedPair<T>>
where
    T: Float,
    K: Ord,
    F: FnMut(usize, usize) -> K,
{
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let mut edges: Vec<(T, K, usize, usize)> = Vec::with_capacity(rows * cols);
    for (i, row) in weights.iter().enumerate() {
        debug_assert_eq!(row.len(), cols);
        for (j, &w) in row.iter().enumerate() {
            edges.push((w, tie_key(i, j), i, j));
        }
    }
    // Heaviest first; equal weights fall back to the tie key ascending.
    edges.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.1.cmp(&b.1))
    });
    let mut used_left = vec![false; rows];
    let mut used_right = vec![false; cols];
    let mut out = Vec::with_capacity(rows.min(cols));
    for (w, _, i, j) in edges {
        if used_left[i] || used_right[j] {
            continue;
        }
        used_left[i] = true;
        used_right[j] = true;
        out.push(MatchedPair {
            left: i,
            right: j,
            weight: w,
        });
        if out.len() == rows.min(cols) {
            break;
        }
    }
    out
}
