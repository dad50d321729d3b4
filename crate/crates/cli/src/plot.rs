//! Turns evaluation reports and epoch logs into trend-chart points.

use std::collections::BTreeMap;
use std::path::Path;

use albert_core::metrics::render::TrendPoint;
use albert_core::{Error, Result};
use serde_json::Value;

/// Bookkeeping fields that are not plotted.
const SKIP: [&str; 9] = [
    "epoch",
    "step",
    "lr",
    "grad_norm",
    "num_samples",
    "num_predictions",
    "num_matched",
    "num_gt",
    "correct",
];

/// Numeric fields of `value`, nested objects flattened with `.`; `counts` tables are skipped.
fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, f64>) {
    let Value::Object(map) = value else { return };
    for (k, v) in map {
        if SKIP.contains(&k.as_str()) || k == "counts" {
            continue;
        }
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Number(n) => {
                if let Some(x) = n.as_f64() {
                    out.insert(key, x);
                }
            }
            Value::Object(_) => flatten(&key, v, out),
            _ => {}
        }
    }
}

/// One point per JSON document: a whole-file report, or every line of a JSON-lines log.
pub fn load_points(path: &Path) -> Result<Vec<TrendPoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::File {
        path: path.display().to_string(),
        source: e,
    })?;
    let stem = path
        .file_stem()
        .map_or_else(|| "log".to_string(), |s| s.to_string_lossy().into_owned());
    let bad = |e: serde_json::Error| Error::Dataset(format!("{}: {e}", path.display()));
    let docs: Vec<Value> = match serde_json::from_str::<Value>(&text) {
        Ok(v) => vec![v],
        Err(_) => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(bad))
            .collect::<Result<_>>()?,
    };
    let single = docs.len() == 1;
    Ok(docs
        .iter()
        .enumerate()
        .map(|(i, doc)| {
            let mut metrics = BTreeMap::new();
            flatten("", doc, &mut metrics);
            let label = match doc.get("epoch").and_then(Value::as_u64) {
                Some(e) => format!("{stem}:{e}"),
                None if single => stem.clone(),
                None => format!("{stem}:{}", i + 1),
            };
            TrendPoint { label, metrics }
        })
        .collect())
}
