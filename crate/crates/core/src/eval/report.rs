use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use super::{evaluate_scores, EvalReport};
use crate::error::{DataError, Result, VimError};
use crate::fsutil::write_atomic;

pub const METRICS_HEADER: &str =
    "model,strategy,accuracy,precision,recall,f1,specificity,sensitivity,auc,params,flops";
pub const COMPLEXITY_HEADER: &str = "model,flops,params,accuracy";

const ROW_SUM_TOLERANCE: f64 = 1e-3;

/// Reads `sample_id,p_0,...,p_{K-1}` rows, comma- or tab-separated, with an
/// optional header line. Each row must sum to 1 within 1e-3.
pub fn read_predictions(path: &Path, k: usize) -> Result<Vec<(String, Vec<f64>)>> {
    let text = fs::read_to_string(path).map_err(|e| VimError::io(path, e))?;
    let err = |line: usize, message: String| VimError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rows = Vec::new();
    let mut first = true;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sep = if line.contains('\t') { '\t' } else { ',' };
        let mut fields = line.split(sep);
        let id = fields.next().unwrap_or_default().trim().to_string();
        let parsed = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>();
        let probs = match parsed {
            Ok(p) => p,
            Err(_) if first => {
                first = false;
                continue;
            }
            Err(e) => return Err(err(i + 1, format!("bad probability: {e}"))),
        };
        first = false;
        if probs.len() != k {
            return Err(err(
                i + 1,
                format!("expected {k} probabilities, got {}", probs.len()),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > ROW_SUM_TOLERANCE
        {
            return Err(err(
                i + 1,
                format!("probabilities sum to {sum}, expected 1"),
            ));
        }
        rows.push((id, probs));
    }
    Ok(rows)
}

/// Scores an external predictions file against `expected` `(sample_id, label)` pairs.
/// Rows for samples outside `expected` are ignored.
pub fn score_predictions_file(
    path: &Path,
    expected: &[(String, usize)],
    class_names: &[String],
    model: &str,
    strategy: &str,
    params: u64,
    flops: u64,
) -> Result<EvalReport> {
    let k = class_names.len();
    let rows = read_predictions(path, k)?;
    let mut by_id: HashMap<&str, &[f64]> = HashMap::with_capacity(rows.len());
    for (id, probs) in &rows {
        if by_id.insert(id.as_str(), probs).is_some() {
            return Err(VimError::invalid(format!(
                "duplicate prediction for `{id}`"
            )));
        }
    }
    let mut scores = Vec::with_capacity(expected.len() * k);
    let mut labels = Vec::with_capacity(expected.len());
    for (id, label) in expected {
        let probs = by_id
            .get(id.as_str())
            .ok_or_else(|| DataError::MissingSample(id.clone()))?;
        scores.extend_from_slice(probs);
        labels.push(*label);
    }
    let ignored = rows.len() - expected.len();
    if ignored > 0 {
        log::info!("{ignored} prediction rows are outside the evaluated partition");
    }
    evaluate_scores(
        model,
        strategy,
        &scores,
        &labels,
        class_names,
        params,
        flops,
    )
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn metrics_row(r: &EvalReport) -> String {
    let m = &r.metrics;
    let auc = r
        .auc
        .as_ref()
        .map_or_else(|| "nan".to_string(), |a| format!("{:.6}", a.macro_auc));
    format!(
        "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
        csv_field(&r.model),
        csv_field(&r.strategy),
        m.accuracy,
        m.precision,
        m.recall,
        m.f1,
        m.specificity,
        m.sensitivity,
        auc,
        r.params,
        r.flops
    )
}

fn complexity_row(r: &EvalReport) -> String {
    format!(
        "{},{},{},{:.6}",
        csv_field(&r.model),
        r.flops,
        r.params,
        r.metrics.accuracy
    )
}

fn confusion_csv(r: &EvalReport) -> String {
    let names: Vec<String> = r
        .confusion
        .class_names
        .iter()
        .map(|n| csv_field(n))
        .collect();
    let mut out = format!("true\\pred,{}\n", names.join(","));
    for (name, row) in names.iter().zip(&r.confusion.counts) {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        out.push_str(&format!("{name},{}\n", cells.join(",")));
    }
    out
}

fn confusion_path(dir: &Path, model: &str) -> PathBuf {
    dir.join(format!("confusion_{}.csv", sanitize(model)))
}

fn write_table(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Writes `metrics.csv`, `complexity.csv` and one confusion matrix per report.
pub fn emit_report(reports: &[EvalReport], dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(VimError::invalid("no reports to emit"));
    }
    fs::create_dir_all(dir).map_err(|e| VimError::io(dir, e))?;
    let metrics = dir.join("metrics.csv");
    let complexity = dir.join("complexity.csv");
    write_table(
        &metrics,
        METRICS_HEADER,
        &reports.iter().map(metrics_row).collect::<Vec<_>>(),
    )?;
    write_table(
        &complexity,
        COMPLEXITY_HEADER,
        &reports.iter().map(complexity_row).collect::<Vec<_>>(),
    )?;
    let mut written = vec![metrics, complexity];
    for r in reports {
        let p = confusion_path(dir, &r.model);
        write_atomic(&p, confusion_csv(r).as_bytes())?;
        written.push(p);
    }
    Ok(written)
}

/// Existing data rows whose leading `key_fields` do not collide with `replace`.
fn surviving_rows(
    path: &Path,
    header: &str,
    key_fields: usize,
    replace: &HashSet<String>,
) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| VimError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(VimError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `{header}`"),
        });
    }
    Ok(lines
        .filter(|l| !l.is_empty())
        .filter(|l| !replace.contains(&row_key(l, key_fields)))
        .map(str::to_string)
        .collect())
}

fn row_key(line: &str, fields: usize) -> String {
    line.splitn(fields + 1, ',')
        .take(fields)
        .collect::<Vec<_>>()
        .join(",")
}

/// Like [`emit_report`], but keeps rows already in `dir` unless a new report
/// has the same model (and strategy, for `metrics.csv`).
pub fn merge_report(reports: &[EvalReport], dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(VimError::invalid("no reports to emit"));
    }
    fs::create_dir_all(dir).map_err(|e| VimError::io(dir, e))?;
    let new_metrics: Vec<String> = reports.iter().map(metrics_row).collect();
    let new_complexity: Vec<String> = reports.iter().map(complexity_row).collect();

    let metrics = dir.join("metrics.csv");
    let keys = new_metrics.iter().map(|l| row_key(l, 2)).collect();
    let mut rows = surviving_rows(&metrics, METRICS_HEADER, 2, &keys)?;
    rows.extend(new_metrics);
    write_table(&metrics, METRICS_HEADER, &rows)?;

    let complexity = dir.join("complexity.csv");
    let keys = new_complexity.iter().map(|l| row_key(l, 1)).collect();
    let mut rows = surviving_rows(&complexity, COMPLEXITY_HEADER, 1, &keys)?;
    rows.extend(new_complexity);
    write_table(&complexity, COMPLEXITY_HEADER, &rows)?;

    let mut written = vec![metrics, complexity];
    for r in reports {
        let p = confusion_path(dir, &r.model);
        write_atomic(&p, confusion_csv(r).as_bytes())?;
        written.push(p);
    }
    Ok(written)
}
