//! Published reference numbers, shown next to local results for context.
//! Nothing here is reproduced by this code.

/// `(model, naturalistic %, stylistic %, overall %)`.
pub const MODEL_ACCURACY: &[(&str, f64, f64, f64)] = &[
    ("Llama 3.2 11B", 61.5, 60.8, 61.2),
    ("Llama 3.2 90B", 61.5, 63.9, 62.7),
    ("Llama 4 Scout", 62.8, 63.5, 63.2),
    ("InternVL3 8B", 62.2, 63.6, 62.9),
    ("InternVL3 78B", 65.4, 66.4, 65.9),
    ("Qwen2.5-VL 7B", 64.8, 62.6, 63.7),
    ("Qwen2.5-VL 72B", 66.4, 64.4, 65.4),
    ("Gemini 2.5 Flash", 62.3, 62.9, 62.6),
    ("Gemini 2.5 Pro", 66.2, 64.2, 65.2),
    ("Human", 85.6, 88.1, 86.9),
];

/// `(group, cultural %, contextual %, symbolic %)`.
pub const ASSOCIATION_ACCURACY: &[(&str, f64, f64, f64)] = &[("VLMs", 66.6, 54.5, 76.3), ("Humans", 88.3, 75.2, 92.1)];

pub const REFERENCE_NOTE: &str = "reference, not reproduced";
