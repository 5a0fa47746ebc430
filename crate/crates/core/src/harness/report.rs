use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::experiment::{ArmReport, ExperimentReport, StageMetrics, RAR_ARM};

/// Population mean and standard deviation, summed in input order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn stage_count(arms: &[&ArmReport]) -> usize {
    arms.iter()
        .flat_map(|a| a.shuffles.iter().map(Vec::len))
        .max()
        .unwrap_or(0)
}

/// Value at stage `t` for every shuffle that reached it.
fn column(series: &[Vec<u64>], t: usize) -> Vec<f64> {
    series.iter().filter_map(|s| s.get(t)).map(|&v| v as f64).collect()
}

fn cumulative_csv(report: &ExperimentReport, series: fn(&ArmReport) -> &Vec<Vec<u64>>) -> String {
    let arms: Vec<&ArmReport> = report.arms.iter().collect();
    let mut out = String::from("stage");
    for arm in &arms {
        write!(out, ",{0}_mean,{0}_std", arm.name).unwrap();
    }
    out.push('\n');
    for t in 0..stage_count(&arms) {
        write!(out, "{}", t + 1).unwrap();
        for arm in &arms {
            let (mean, std) = mean_std(&column(series(arm), t));
            write!(out, ",{mean},{std}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn guide_source_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("stage,fresh_mean,fresh_std,from_memory_mean,from_memory_std\n");
    let Some(rar) = report.arm(RAR_ARM) else {
        return out;
    };
    let per_stage = |f: fn(&StageMetrics) -> u64| -> Vec<Vec<u64>> {
        rar.shuffles.iter().map(|s| s.iter().map(f).collect()).collect()
    };
    let fresh = per_stage(|m| m.guides_fresh);
    let memory = per_stage(|m| m.guides_from_memory);
    for t in 0..stage_count(&[rar]) {
        let (fm, fs) = mean_std(&column(&fresh, t));
        let (mm, ms) = mean_std(&column(&memory, t));
        writeln!(out, "{},{fm},{fs},{mm},{ms}", t + 1).unwrap();
    }
    out
}

/// Writes `report.json` and the per-figure CSVs into `dir`, creating it if
/// needed. Returns the written paths.
pub fn emit_report(report: &ExperimentReport, dir: impl AsRef<Path>) -> std::io::Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(report).map_err(std::io::Error::other)?;
    json.push('\n');
    let files = [
        ("report.json", json),
        (
            "cumulative_aligned.csv",
            cumulative_csv(report, |a| &a.cumulative_aligned),
        ),
        (
            "cumulative_strong_calls.csv",
            cumulative_csv(report, |a| &a.cumulative_strong_calls),
        ),
        ("guide_source_per_stage.csv", guide_source_csv(report)),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}
