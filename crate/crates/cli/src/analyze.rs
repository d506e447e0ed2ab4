//! Turns run directories into histogram and trace CSVs for external plotting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lfme_core::analysis::{negative_fraction_after_warmup, ratio_series, HARD_FRACTION};
use lfme_core::train::ProbeRecord;

use crate::error::{CliError, Result};
use crate::runs::{read_metrics, read_probe, read_rescale, write_atomic, MetricsRow};
use crate::tables::{run_stats, Cell};

pub const HIST_BINS: usize = 20;

/// Counts of `values` in `bins` equal-width bins over `[lo, hi]`; out-of-range values clamp.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = ((v - lo) / width).floor();
        let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(bins - 1) };
        counts[b] += 1;
    }
    counts
}

/// Ground-truth and non-ground-truth entries of the last probe step.
fn split_gt(rows: &lfme_core::autodiff::Tensor, labels: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut gt = Vec::new();
    let mut other = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        for (c, &v) in rows.row(i).iter().enumerate() {
            if c == y {
                gt.push(v);
            } else {
                other.push(v);
            }
        }
    }
    (gt, other)
}

fn hist_csv(gt: &[f64], other: &[f64], lo: f64, hi: f64) -> String {
    let mut out = String::from("series,bin,lo,hi,count\n");
    let width = (hi - lo) / HIST_BINS as f64;
    for (name, vals) in [("gt", gt), ("non_gt", other)] {
        for (b, n) in histogram(vals, lo, hi, HIST_BINS).into_iter().enumerate() {
            let a = lo + width * b as f64;
            let _ = writeln!(out, "{name},{b},{:?},{:?},{n}", a, a + width);
        }
    }
    out
}

/// Whether a directory holds a finished run.
pub fn is_run_dir(dir: &Path) -> bool {
    dir.join("metrics.csv").is_file() && dir.join("probe.csv").is_file()
}

/// Run directories at or below `root`, sorted.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if is_run_dir(&dir) {
            found.push(dir);
            continue;
        }
        let entries = fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| CliError::io(&dir, e))?;
            let path = entry.path();
            let hidden = entry.file_name().to_string_lossy().starts_with('.');
            if path.is_dir() && !hidden {
                stack.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Expert losses defining hard samples: the run's own, else an LFME sibling's.
fn split_source(run: &Path, probe: &ProbeRecord) -> Result<Option<ProbeRecord>> {
    if !probe.expert_losses.is_empty() {
        return Ok(None);
    }
    // <output>/runs/<tag>/seed-s/heldout-d
    let (Some(heldout), Some(seed)) = (run.file_name(), run.parent().and_then(|p| p.file_name())) else {
        return Ok(None);
    };
    let Some(runs_root) = run.ancestors().nth(3) else {
        return Ok(None);
    };
    let Ok(entries) = fs::read_dir(runs_root) else {
        return Ok(None);
    };
    let mut tags: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("lfme-a")))
        .collect();
    tags.sort();
    for tag in tags {
        let p = tag.join(seed).join(heldout).join("probe.csv");
        if p.is_file() {
            let other = read_probe(&p)?;
            if !other.expert_losses.is_empty() && other.labels == probe.labels && other.steps == probe.steps {
                return Ok(Some(other));
            }
        }
    }
    Ok(None)
}

/// What one run's analysis produced.
#[derive(Clone, Debug, PartialEq)]
pub struct RunAnalysis {
    pub dir: PathBuf,
    pub tag: String,
    pub entropy: f64,
    pub logit_sum: Option<f64>,
    pub negative_f_fraction: Option<f64>,
    pub mean_r_hard: Option<f64>,
    pub mean_r_easy: Option<f64>,
    pub notices: Vec<String>,
}

fn mean_finite(v: &[f64]) -> Option<f64> {
    let f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    (!f.is_empty()).then(|| f.iter().sum::<f64>() / f.len() as f64)
}

/// Writes `<run>/analysis/*.csv` for one run directory.
pub fn analyze_run(dir: &Path) -> Result<RunAnalysis> {
    let metrics_path = dir.join("metrics.csv");
    let rows: Vec<MetricsRow> = read_metrics(&metrics_path)?;
    let stats = run_stats(&rows, &[]).ok_or_else(|| CliError::data(&metrics_path, "no selected checkpoint row"))?;
    let total_steps = rows.iter().map(|r| r.step).max().unwrap_or(0);
    let probe = read_probe(&dir.join("probe.csv"))?;
    let out = dir.join("analysis");
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let mut notices = Vec::new();

    let last = probe.steps.len().checked_sub(1).ok_or_else(|| CliError::data(dir, "empty probe record"))?;
    let (gt, other) = split_gt(&probe.probs[last], &probe.labels);
    write_atomic(&out.join("prob_hist.csv"), hist_csv(&gt, &other, 0.0, 1.0).as_bytes())?;
    if let Some(z) = probe.logits.get(last) {
        let (gt, other) = split_gt(z, &probe.labels);
        let lo = gt.iter().chain(&other).copied().fold(f64::INFINITY, f64::min);
        let hi = gt.iter().chain(&other).copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        write_atomic(&out.join("logit_hist.csv"), hist_csv(&gt, &other, lo, hi).as_bytes())?;
    } else {
        notices.push("no target logits (aggregation method); logit histogram skipped".into());
    }

    let rescale_path = dir.join("rescale.csv");
    let negative_f_fraction = if rescale_path.is_file() {
        let traces = read_rescale(&rescale_path)?;
        let mut s = String::from("step,alpha,samples,mean_f,mean_f_prime,mean_abs_gap\n");
        for t in &traces {
            let _ = writeln!(
                s,
                "{},{:?},{},{:?},{:?},{:?}",
                t.step,
                t.alpha,
                t.f.len(),
                t.mean_f,
                t.mean_f_prime,
                t.mean_abs_gap()
            );
        }
        write_atomic(&out.join("f_trace.csv"), s.as_bytes())?;
        negative_fraction_after_warmup(&traces, total_steps)
    } else {
        notices.push("no rescale traces (alpha is 0 or the method has no LFME guidance)".into());
        None
    };

    let sibling = split_source(dir, &probe)?;
    let splits = sibling.as_ref().or((!probe.expert_losses.is_empty()).then_some(&probe));
    let (mut mean_r_hard, mut mean_r_easy) = (None, None);
    match splits {
        Some(s) => {
            let (hard, easy) = ratio_series(&probe, s, HARD_FRACTION)?;
            let mut text = String::from("step,r_hard,r_easy\n");
            for ((step, h), e) in probe.steps.iter().zip(&hard).zip(&easy) {
                let _ = writeln!(text, "{step},{h:?},{e:?}");
            }
            write_atomic(&out.join("ratio_trace.csv"), text.as_bytes())?;
            mean_r_hard = mean_finite(&hard);
            mean_r_easy = mean_finite(&easy);
        }
        None => notices.push("no expert losses for this probe batch; ratio trace skipped".into()),
    }

    Ok(RunAnalysis {
        dir: dir.to_path_buf(),
        tag: stats.tag,
        entropy: stats.entropy,
        logit_sum: stats.logit_sum,
        negative_f_fraction,
        mean_r_hard,
        mean_r_easy,
        notices,
    })
}

fn cell_fields(values: &[f64]) -> String {
    match Cell::of(values) {
        Some(c) => format!("{:?},{:?}", c.mean, c.std),
        None => ",".into(),
    }
}

/// Per-method summary rows (entropy, logit sum, F negativity, R) over all analyzed runs.
pub fn summary_csv(runs: &[RunAnalysis]) -> String {
    let mut by_tag: BTreeMap<&str, Vec<&RunAnalysis>> = BTreeMap::new();
    for r in runs {
        by_tag.entry(&r.tag).or_default().push(r);
    }
    let mut out = String::from(
        "method,runs,entropy_mean,entropy_std,logit_sum_mean,logit_sum_std,neg_f_fraction_mean,neg_f_fraction_std,r_hard_mean,r_hard_std,r_easy_mean,r_easy_std\n",
    );
    for (tag, rs) in by_tag {
        let pick = |f: &dyn Fn(&RunAnalysis) -> Option<f64>| -> Vec<f64> { rs.iter().filter_map(|r| f(r)).collect() };
        let _ = writeln!(
            out,
            "{tag},{},{},{},{},{},{}",
            rs.len(),
            cell_fields(&pick(&|r| Some(r.entropy))),
            cell_fields(&pick(&|r| r.logit_sum)),
            cell_fields(&pick(&|r| r.negative_f_fraction)),
            cell_fields(&pick(&|r| r.mean_r_hard)),
            cell_fields(&pick(&|r| r.mean_r_easy)),
        );
    }
    out
}

/// Analyzes every run under `root` and writes `<root>/analysis_summary.csv`.
pub fn analyze(root: &Path) -> Result<Vec<RunAnalysis>> {
    let runs = find_runs(root)?;
    if runs.is_empty() {
        return Err(CliError::Validation(format!("no run directories under {}", root.display())));
    }
    let results = runs.iter().map(|d| analyze_run(d)).collect::<Result<Vec<_>>>()?;
    write_atomic(&root.join("analysis_summary.csv"), summary_csv(&results).as_bytes())?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_every_value() {
        let v = [0.0, 0.05, 0.5, 0.99, 1.0, 1.5, -0.2];
        let h = histogram(&v, 0.0, 1.0, 20);
        assert_eq!(h.iter().sum::<usize>(), v.len());
        assert_eq!(h[0], 2);
        assert_eq!(h[1], 1);
        assert_eq!(h[10], 1);
        assert_eq!(h[19], 3);
    }
}
