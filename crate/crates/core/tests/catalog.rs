use std::collections::HashSet;
use std::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use metonymy_core::annotation::Label;
use metonymy_core::catalog::{concreteness_crossover, load_lexicon, Supersense};

/// Deterministic quantile samples of N(mu, sigma).
fn quantiles(mu: f64, sigma: f64, n: usize) -> Vec<f64> {
    let d = Normal::new(mu, sigma).unwrap();
    (0..n).map(|i| d.inverse_cdf((i as f64 + 0.5) / n as f64)).collect()
}

/// Where the two equally weighted densities cross between their means.
fn analytic_crossing(a: &Normal, b: &Normal, lo: f64, hi: f64) -> f64 {
    let f = |x: f64| a.pdf(x) - b.pdf(x);
    let (mut lo, mut hi) = (lo, hi);
    assert!(f(lo) > 0.0 && f(hi) < 0.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn crossover_matches_gaussian_mixture() {
    for &(m_mu, m_sd, n_mu, n_sd) in &[(3.0, 0.5, 4.0, 0.5), (2.4, 0.45, 4.1, 0.55), (2.8, 0.6, 4.3, 0.4)] {
        let n = 2000;
        let mut data: Vec<(f64, Label)> = quantiles(m_mu, m_sd, n).into_iter().map(|x| (x, Label::Metonymic)).collect();
        data.extend(quantiles(n_mu, n_sd, n).into_iter().map(|x| (x, Label::NonMetonymic)));
        let want = analytic_crossing(
            &Normal::new(m_mu, m_sd).unwrap(),
            &Normal::new(n_mu, n_sd).unwrap(),
            m_mu,
            n_mu,
        );
        let report = concreteness_crossover(&data).unwrap();
        let got = report.crossover.expect("crossover exists");
        assert!((got - want).abs() < 0.1, "N({m_mu},{m_sd}) vs N({n_mu},{n_sd}): got {got}, analytic {want}");

        // Same answer at single precision, up to a grid step.
        let data32: Vec<(f32, Label)> = data.iter().map(|&(x, l)| (x as f32, l)).collect();
        let got32 = concreteness_crossover(&data32).unwrap().crossover.unwrap();
        assert!((got32 as f64 - got).abs() <= report.grid_spacing + 1e-6);
    }
    // The symmetric case crosses at the midpoint.
    let sym = analytic_crossing(&Normal::new(3.0, 0.5).unwrap(), &Normal::new(4.0, 0.5).unwrap(), 3.0, 4.0);
    assert!((sym - 3.5).abs() < 1e-9);
}

#[test]
fn large_join_count_matches_set_intersection() {
    let mut rng = ChaCha8Rng::seed_from_u64(19_056);
    let vocab: Vec<String> = (0..25_000).map(|i| format!("noun{i:05}")).collect();
    let mut ratings = String::from("Word\tBigram\tConc.M\tConc.SD\n");
    let mut rated = HashSet::new();
    for w in vocab.iter().take(19_056) {
        let c: f64 = rng.random_range(1.0..=5.0);
        writeln!(ratings, "{w}\t0\t{c:.2}\t0.9").unwrap();
        rated.insert(w.clone());
    }
    let mut senses = String::from("lemma,lexname\n");
    let mut sensed = HashSet::new();
    for w in vocab.iter().skip(6_000) {
        if rng.random_bool(0.7) {
            let s = Supersense::ALL[rng.random_range(0..Supersense::ALL.len())];
            writeln!(senses, "{w},noun.{s}").unwrap();
            sensed.insert(w.clone());
        }
    }
    let expected = rated.intersection(&sensed).count();
    let load = load_lexicon(&ratings, &senses).unwrap();
    assert_eq!(load.concepts.len(), expected);
    assert!(load.warnings.is_empty());
    assert!(load.concepts.iter().all(|c| sensed.contains(c.lemma.as_str())));
}
