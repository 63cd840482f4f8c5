use std::fmt::Write;

use serde_json::{json, Value};

use crate::annotation::AssociationType;
use crate::pipeline::Style;

use super::reference::{ASSOCIATION_ACCURACY, MODEL_ACCURACY, REFERENCE_NOTE};
use super::{EvalResult, Slice};

fn pct(s: Option<&Slice>) -> String {
    match s.and_then(Slice::percent) {
        Some(p) => format!("{p:.1}"),
        None => "no data".into(),
    }
}

pub fn render_markdown(results: &[EvalResult]) -> String {
    let mut out = String::from("# Benchmark results\n\n");
    out.push_str("| Model | Nat. | Styl. | Overall | Answered | Unparsed | Errored |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
    for r in results {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.model,
            pct(r.by_style.get(&Style::Naturalistic)),
            pct(r.by_style.get(&Style::Stylistic)),
            pct(Some(&r.overall)),
            r.overall.answered,
            r.unparsed,
            r.errored,
        );
    }
    out.push_str("\n## By association type\n\n| Model | Cultural | Contextual | Symbolic |\n|---|---:|---:|---:|\n");
    for r in results {
        let a = |t| pct(r.by_association.get(&t));
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} |",
            r.model,
            a(AssociationType::Cultural),
            a(AssociationType::Contextual),
            a(AssociationType::Symbolic)
        );
    }
    let _ = write!(
        out,
        "\n## Published accuracies ({REFERENCE_NOTE})\n\n| Model | Nat. | Styl. | Overall |\n|---|---:|---:|---:|\n"
    );
    for (m, n, s, o) in MODEL_ACCURACY {
        let _ = writeln!(out, "| {m} | {n:.1} | {s:.1} | {o:.1} |");
    }
    let _ = write!(
        out,
        "\n| Group | Cultural | Contextual | Symbolic |\n|---|---:|---:|---:|\n"
    );
    for (g, c, x, s) in ASSOCIATION_ACCURACY {
        let _ = writeln!(out, "| {g} | {c:.1} | {x:.1} | {s:.1} |");
    }
    out
}

pub fn render_json(results: &[EvalResult]) -> Value {
    let slice = |s: Option<&Slice>| match s {
        Some(s) => json!({"correct": s.correct, "answered": s.answered, "accuracy_pct": s.percent()}),
        None => json!("no data"),
    };
    let models: Vec<Value> = results
        .iter()
        .map(|r| {
            let assoc: serde_json::Map<String, Value> = [
                AssociationType::Cultural,
                AssociationType::Contextual,
                AssociationType::Symbolic,
            ]
            .iter()
            .map(|t| {
                let key = serde_json::to_value(t).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                (key, slice(r.by_association.get(t)))
            })
            .collect();
            json!({
                "model": r.model,
                "items": r.items,
                "overall": slice(Some(&r.overall)),
                "naturalistic": slice(r.by_style.get(&Style::Naturalistic)),
                "stylistic": slice(r.by_style.get(&Style::Stylistic)),
                "by_association": assoc,
                "unparsed": r.unparsed,
                "errored": r.errored,
                "missing": r.missing,
            })
        })
        .collect();
    json!({
        "results": models,
        "reference": {
            "note": REFERENCE_NOTE,
            "model_accuracy": MODEL_ACCURACY.iter().map(|(m, n, s, o)| json!({"model": m, "naturalistic": n, "stylistic": s, "overall": o})).collect::<Vec<_>>(),
            "association_accuracy": ASSOCIATION_ACCURACY.iter().map(|(g, c, x, s)| json!({"group": g, "cultural": c, "contextual": x, "symbolic": s})).collect::<Vec<_>>(),
        }
    })
}
