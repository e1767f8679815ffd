//! Output files. Every file is written to a temporary sibling and renamed
//! into place, so readers never see a partial report.

use std::io::Write;
use std::path::{Path, PathBuf};

use kobt::bayes_opt::TuneResult;
use kobt::data::format_f64;
use kobt::knockoff_filter::SelectionResult;
use kobt::sim_harness::ExperimentOutput;
use kobt::{KobtError, Result};
use serde::Serialize;

pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map_err(|e| KobtError::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn tsv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = header.join("\t");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    out
}

const FEATURE_HEADER: [&str; 5] = ["feature", "index", "mean_abs_orig", "mean_abs_knock", "t"];

fn feature_rows(result: &SelectionResult, features: &[usize]) -> Vec<Vec<String>> {
    let s = &result.stats;
    let mut order = features.to_vec();
    order.sort_by(|&a, &b| s.t[b].total_cmp(&s.t[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .map(|j| {
            vec![
                s.names[j].clone(),
                j.to_string(),
                format_f64(s.mean_abs_orig[j]),
                format_f64(s.mean_abs_knock[j]),
                format_f64(s.t[j]),
            ]
        })
        .collect()
}

/// `selected.tsv` (selected features by descending T), `features.tsv`
/// (every feature, same order) and `selection.json` (the full result).
pub fn write_selection(result: &SelectionResult, dir: &Path) -> Result<Vec<PathBuf>> {
    let all: Vec<usize> = (0..result.stats.t.len()).collect();
    let files = [
        ("selected.tsv", tsv(&FEATURE_HEADER, feature_rows(result, &result.selected))),
        ("features.tsv", tsv(&FEATURE_HEADER, feature_rows(result, &all))),
        ("selection.json", to_json(result)?),
    ];
    write_all(dir, &files)
}

#[cfg(test)]
pub fn read_selection(path: &Path) -> Result<SelectionResult> {
    let text = std::fs::read_to_string(path).map_err(|e| KobtError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_tuning(result: &TuneResult, dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = result.history.iter().map(|e| {
        vec![
            e.timestamp.to_string(),
            format!("{:?}", e.stage).to_lowercase(),
            format_f64(e.point.gamma),
            format_f64(e.point.lambda),
            format_f64(e.point.alpha),
            format_f64(e.cvte),
        ]
    });
    let files = [
        ("tune_history.tsv", tsv(&["step", "stage", "gamma", "lambda", "alpha", "cvte"], rows)),
        ("tune.json", to_json(result)?),
    ];
    write_all(dir, &files)
}

/// `table.tsv` (one row per cell and metric), `long.tsv` (per-replicate
/// values for plotting) and `table.json`.
pub fn write_experiment(output: &ExperimentOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    let table = output.rows.iter().map(|r| {
        vec![r.cell.clone(), r.metric.clone(), format_f64(r.mean), format_f64(r.se), r.reps.to_string()]
    });
    let long = output.long.iter().map(|r| {
        vec![r.cell.clone(), r.metric.clone(), r.rep.to_string(), r.draw.to_string(), format_f64(r.value)]
    });
    let files = [
        ("table.tsv", tsv(&["cell", "metric", "mean", "se", "reps"], table)),
        ("long.tsv", tsv(&["cell", "metric", "rep", "draw", "value"], long)),
        ("table.json", to_json(output)?),
    ];
    write_all(dir, &files)
}

pub fn write_all(dir: &Path, files: &[(&str, String)]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| KobtError::io(dir, e))?;
    files
        .iter()
        .map(|(name, body)| {
            let path = dir.join(name);
            write_atomic(&path, body.as_bytes())?;
            Ok(path)
        })
        .collect()
}
