// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("report is not valid JSON: {0}")]
    Parse(String),
    #[error("schema version {a} vs {b}")]
    SchemaMismatch { a: String, b: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffRow {
    pub metric: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// b - a, when both sides have the metric.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportDiff {
    /// Same seed on both sides.
    pub paired: bool,
    pub same_config: bool,
    pub rows: Vec<DiffRow>,
}

impl ReportDiff {
    pub fn changed(&self) -> impl Iterator<Item = &DiffRow> {
        self.rows.iter().filter(|r| r.delta != Some(0.0))
    }

    pub fn get(&self, metric: &str) -> Option<&DiffRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, f64>) {
    match v {
        Value::Number(n) => {
            if let Some(x) = n.as_f64() {
                out.insert(prefix.to_string(), x);
            }
        }
        Value::Bool(b) => {
            out.insert(prefix.to_string(), f64::from(u8::from(*b)));
        }
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        // CDF point lists are summarized elsewhere in the report
        Value::Array(items) if items.iter().all(|i| !i.is_object() && !i.is_array()) => {
            for (i, x) in items.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), x, out);
            }
        }
        _ => {}
    }
}

/// Compares two reports metric by metric; `a` and `b` are report JSON.
pub fn diff_reports(a: &str, b: &str) -> Result<ReportDiff, DiffError> {
    let parse = |s: &str| serde_json::from_str::<Value>(s).map_err(|e| DiffError::Parse(e.to_string()));
    let (va, vb) = (parse(a)?, parse(b)?);
    let version = |v: &Value| v.get("schema_version").map(|x| x.to_string()).unwrap_or_else(|| "missing".into());
    if version(&va) != version(&vb) || version(&va) == "missing" {
        return Err(DiffError::SchemaMismatch {
            a: version(&va),
            b: version(&vb),
        });
    }
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    flatten("", &va, &mut fa);
    flatten("", &vb, &mut fb);
    let mut keys: Vec<&String> = fa.keys().chain(fb.keys()).collect();
    keys.sort();
    keys.dedup();
    let rows = keys
        .into_iter()
        .filter(|k| k.as_str() != "schema_version" && k.as_str() != "seed")
        .map(|k| {
            let (x, y) = (fa.get(k).copied(), fb.get(k).copied());
            DiffRow {
                metric: k.clone(),
                a: x,
                b: y,
                delta: x.zip(y).map(|(x, y)| y - x),
            }
        })
        .collect();
    Ok(ReportDiff {
        paired: va.get("seed") == vb.get("seed"),
        same_config: va.get("config_hash") == vb.get("config_hash"),
        rows,
    })
}
