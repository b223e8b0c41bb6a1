//! Result files: per-sample evaluation CSVs, model/attack accuracy tables,
//! and a run summary JSON. Every encoder is deterministic (fixed float
//! formats, no timestamps), so regenerating a run reproduces files byte for
//! byte, and every write is atomic.

use crate::checkpoint::write_atomic;
use crate::classifier::SampleRecord;
use crate::dataset::fmt_float;
use crate::error::{Error, Result};
use crate::lora::hex_string;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// One line of the headline accuracy table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    /// Attack the accuracy was measured under; "none" for clean accuracy.
    pub attack: String,
    pub accuracy: f64,
}

/// Short stable identifier for a run: SHA-256 of the canonical JSON of its
/// config, truncated to 12 hex chars. Key order does not matter because
/// JSON objects serialize with sorted keys.
pub fn run_id(config: &serde_json::Value) -> Result<String> {
    let canonical = serde_json::to_vec(config)?;
    let mut hasher = Sha256::new();
    hasher.update(&canonical);
    Ok(hex_string(&hasher.finalize())[..12].to_string())
}

/// Pretty-printed JSON written atomically, with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Per-sample evaluation records. Labels a staged run never priced show up
/// as empty cells.
pub fn write_eval_csv(path: &Path, records: &[SampleRecord], num_classes: usize) -> Result<()> {
    let mut out = String::from("sample_id,true_label,predicted");
    for c in 0..num_classes {
        out.push_str(&format!(",loss_{}", c));
    }
    for c in 0..num_classes {
        out.push_str(&format!(",post_{}", c));
    }
    out.push('\n');
    for r in records {
        if r.losses.len() != num_classes || r.posterior.len() != num_classes {
            return Err(Error::invalid(
                "eval_csv",
                format!(
                    "record {} has {} losses for {} classes",
                    r.sample_id,
                    r.losses.len(),
                    num_classes
                ),
            ));
        }
        out.push_str(&format!("{},{},{}", r.sample_id, r.true_label, r.predicted));
        for cell in r.losses.iter().chain(r.posterior.iter()) {
            out.push(',');
            if let Some(v) = cell {
                out.push_str(&fmt_float(*v));
            }
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Inverse of `write_eval_csv`; returns the records and the class count.
pub fn read_eval_csv(path: &Path) -> Result<(Vec<SampleRecord>, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let bad = |detail: String| Error::CsvFormat {
        path: path.display().to_string(),
        detail,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".to_string()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 5 || cols[..3] != ["sample_id", "true_label", "predicted"] {
        return Err(bad(format!("unexpected header {}", header)));
    }
    let rest = cols.len() - 3;
    if rest % 2 != 0 {
        return Err(bad("uneven loss/posterior columns".to_string()));
    }
    let num_classes = rest / 2;
    for c in 0..num_classes {
        if cols[3 + c] != format!("loss_{}", c) || cols[3 + num_classes + c] != format!("post_{}", c) {
            return Err(bad(format!("unexpected header {}", header)));
        }
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(bad(format!("row {} has {} fields", lineno + 2, fields.len())));
        }
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(format!("row {}: bad {} {:?}", lineno + 2, what, s)))
        };
        let cell = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| bad(format!("row {}: bad float {:?}", lineno + 2, s)))
        };
        let mut losses = Vec::with_capacity(num_classes);
        let mut posterior = Vec::with_capacity(num_classes);
        for c in 0..num_classes {
            losses.push(cell(fields[3 + c])?);
            posterior.push(cell(fields[3 + num_classes + c])?);
        }
        records.push(SampleRecord {
            sample_id: parse_usize(fields[0], "sample_id")?,
            true_label: parse_usize(fields[1], "true_label")?,
            predicted: parse_usize(fields[2], "predicted")?,
            losses,
            posterior,
        });
    }
    Ok((records, num_classes))
}

/// Headline accuracy table as CSV.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::from("model,attack,accuracy\n");
    for r in rows {
        if r.model.contains(',') || r.attack.contains(',') {
            return Err(Error::invalid("metrics_csv", "commas in names"));
        }
        out.push_str(&format!("{},{},{:.6}\n", r.model, r.attack, r.accuracy));
    }
    write_atomic(path, out.as_bytes())
}

/// The reduced attack ensemble is not the reference implementation it is
/// named after; this note rides along wherever its numbers are reported.
pub const AUTOATTACK_LITE_NOTE: &str = "autoattack_lite is a reduced in-house ensemble \
(restart PGD with step halving, plus FGSM); its numbers are not comparable to the \
reference AutoAttack suite.";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub config: serde_json::Value,
    pub metrics: Vec<MetricRow>,
    pub notes: Vec<String>,
}

/// Assemble the summary report, attaching the ensemble disclaimer whenever
/// any row was measured under it.
pub fn build_report(config: serde_json::Value, metrics: Vec<MetricRow>) -> Result<RunReport> {
    let id = run_id(&config)?;
    let mut notes = Vec::new();
    if metrics.iter().any(|r| r.attack == "autoattack_lite") {
        notes.push(AUTOATTACK_LITE_NOTE.to_string());
    }
    Ok(RunReport {
        run_id: id,
        config,
        metrics,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use tempfile::tempdir;

    fn sample_records() -> Vec<SampleRecord> {
        vec![
            SampleRecord {
                sample_id: 0,
                true_label: 1,
                predicted: 1,
                losses: vec![Some(0.25), Some(0.125), None],
                posterior: vec![Some(0.5), Some(0.5), None],
            },
            SampleRecord {
                sample_id: 1,
                true_label: 2,
                predicted: 0,
                losses: vec![Some(1.0), None, Some(2.0)],
                posterior: vec![Some(0.75), None, Some(0.25)],
            },
        ]
    }

    #[test]
    fn eval_csv_round_trips_including_empty_cells() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("eval.csv");
        let records = sample_records();
        write_eval_csv(&path, &records, 3).unwrap();
        let (back, classes) = read_eval_csv(&path).unwrap();
        assert_eq!(classes, 3);
        assert_eq!(back.len(), 2);
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.true_label, b.true_label);
            assert_eq!(a.predicted, b.predicted);
            assert_eq!(a.losses, b.losses);
            assert_eq!(a.posterior, b.posterior);
        }
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("sample_id,true_label,predicted,loss_0,loss_1,loss_2,post_0,post_1,post_2\n"));
        // The eliminated label leaves a genuinely empty cell.
        assert!(text.lines().nth(1).unwrap().ends_with(","));
    }

    #[test]
    fn eval_csv_rejects_malformed_rows() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("eval.csv");
        fs::write(&path, "sample_id,true_label,predicted,loss_0,post_0\n0,0,0,1.0\n").unwrap();
        assert!(read_eval_csv(&path).is_err());
        fs::write(&path, "nope\n").unwrap();
        assert!(read_eval_csv(&path).is_err());
        fs::write(&path, "sample_id,true_label,predicted,loss_0,post_0\n0,0,x,1.0,0.5\n").unwrap();
        assert!(read_eval_csv(&path).is_err());
    }

    #[test]
    fn rewrites_are_byte_identical() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("m1.csv");
        let p2 = dir.path().join("m2.csv");
        let rows = vec![
            MetricRow {
                model: "diffusion".to_string(),
                attack: "none".to_string(),
                accuracy: 0.93,
            },
            MetricRow {
                model: "diffusion".to_string(),
                attack: "transfer_pgd".to_string(),
                accuracy: 0.412,
            },
        ];
        write_metrics_csv(&p1, &rows).unwrap();
        write_metrics_csv(&p2, &rows).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let text = fs::read_to_string(&p1).unwrap();
        assert_eq!(
            text,
            "model,attack,accuracy\ndiffusion,none,0.930000\ndiffusion,transfer_pgd,0.412000\n"
        );

        let records = sample_records();
        let e1 = dir.path().join("e1.csv");
        let e2 = dir.path().join("e2.csv");
        write_eval_csv(&e1, &records, 3).unwrap();
        write_eval_csv(&e2, &records, 3).unwrap();
        assert_eq!(fs::read(&e1).unwrap(), fs::read(&e2).unwrap());
    }

    #[test]
    fn run_id_ignores_key_order_but_sees_values() {
        let a: serde_json::Value = serde_json::from_str(r#"{"seed": 1, "radius": 0.15}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"radius": 0.15, "seed": 1}"#).unwrap();
        let c: serde_json::Value = serde_json::from_str(r#"{"radius": 0.15, "seed": 2}"#).unwrap();
        assert_eq!(run_id(&a).unwrap(), run_id(&b).unwrap());
        assert_ne!(run_id(&a).unwrap(), run_id(&c).unwrap());
        assert_eq!(run_id(&a).unwrap().len(), 12);
    }

    #[test]
    fn report_carries_the_ensemble_disclaimer_only_when_used() {
        let config = serde_json::json!({"seed": 5});
        let plain = build_report(
            config.clone(),
            vec![MetricRow {
                model: "surrogate".to_string(),
                attack: "transfer_pgd".to_string(),
                accuracy: 0.1,
            }],
        )
        .unwrap();
        assert!(plain.notes.is_empty());
        let ensemble = build_report(
            config,
            vec![MetricRow {
                model: "diffusion_tm".to_string(),
                attack: "autoattack_lite".to_string(),
                accuracy: 0.4,
            }],
        )
        .unwrap();
        assert_eq!(ensemble.notes.len(), 1);
        assert!(ensemble.notes[0].contains("not comparable"));
    }

    #[test]
    fn json_report_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("report.json");
        let report = build_report(
            serde_json::json!({"seed": 3}),
            vec![MetricRow {
                model: "m".to_string(),
                attack: "none".to_string(),
                accuracy: 1.0,
            }],
        )
        .unwrap();
        write_json(&path, &report).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let back: RunReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.run_id, report.run_id);
        assert_eq!(back.metrics, report.metrics);
        assert!(text.ends_with('\n'));
    }
}
