//! Job planning, execution and the on-disk layout of one run.
//!
//! A run lives in `<output>/runs/<method tag>/seed-<s>/heldout-<d>/` and holds
//! `metrics.csv` (target predictor, long format), `experts.csv` when experts
//! were trained, `rescale.csv` for LFME with α > 0, `probe.csv` and the
//! selected checkpoints under `checkpoints/`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lfme_core::analysis::RescaleTrace;
use lfme_core::autodiff::Tensor;
use lfme_core::models::{Checkpoint, ModelRole};
use lfme_core::train::{train_method, MethodSpec, ProbeRecord, RunResult};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Job {
    pub method: MethodSpec,
    pub seed: u64,
    pub held_out: usize,
}

impl Job {
    pub fn dir(&self, output: &Path) -> PathBuf {
        run_dir(output, &self.method.tag(), self.seed, self.held_out)
    }
}

pub fn run_dir(output: &Path, tag: &str, seed: u64, held_out: usize) -> PathBuf {
    output
        .join("runs")
        .join(tag)
        .join(format!("seed-{seed}"))
        .join(format!("heldout-{held_out}"))
}

/// Every (method, seed, held-out domain) of the config, in that nesting order.
pub fn plan(config: &ExperimentConfig) -> Result<Vec<Job>> {
    let mut jobs = Vec::new();
    let mut held: Vec<Vec<usize>> = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let suite = config.load_suite(seed)?;
        held.push(config.held_out_ids(&suite)?);
    }
    for method in &config.methods {
        for (&seed, ids) in config.seeds.iter().zip(&held) {
            for &held_out in ids {
                jobs.push(Job {
                    method: method.clone(),
                    seed,
                    held_out,
                });
            }
        }
    }
    Ok(jobs)
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub jobs: usize,
    /// Skip jobs whose run directory already exists.
    pub resume: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { jobs: 1, resume: false }
    }
}

/// Trains one job and returns the full result.
pub fn execute(config: &ExperimentConfig, job: &Job) -> Result<RunResult> {
    let suite = config.load_suite(job.seed)?;
    let split = suite.leave_out(job.held_out)?;
    let cfg = config.train.to_config(job.method.clone(), job.seed);
    Ok(train_method(&suite, &split, &cfg)?)
}

/// Runs every job, writing each run directory atomically. Progress goes to stderr.
pub fn run_all(config: &ExperimentConfig, jobs: &[Job], opts: RunOptions) -> Result<()> {
    fs::create_dir_all(&config.output).map_err(|e| CliError::io(&config.output, e))?;
    let cfg_path = config.output.join("config.json");
    write_atomic(&cfg_path, config.to_json().as_bytes())?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| CliError::Validation(format!("--jobs: {e}")))?;
    let total = jobs.len();
    let failed: usize = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let dir = job.dir(&config.output);
                if opts.resume && dir.join("metrics.csv").is_file() {
                    return 0;
                }
                let t = Instant::now();
                let outcome = execute(config, job).and_then(|run| {
                    write_run(&dir, &run)?;
                    Ok(run)
                });
                match outcome {
                    Ok(run) => {
                        eprintln!(
                            "{} seed {} held-out {}: ood {:.4}, val {:.4} ({:.1}s)",
                            job.method.tag(),
                            job.seed,
                            job.held_out,
                            run.ood_acc().unwrap_or(f64::NAN),
                            run.in_domain_acc(),
                            t.elapsed().as_secs_f64()
                        );
                        0
                    }
                    Err(e) => {
                        eprintln!("{} seed {} held-out {}: {e}", job.method.tag(), job.seed, job.held_out);
                        1
                    }
                }
            })
            .sum()
    });
    if failed > 0 {
        return Err(CliError::Runs { failed, total });
    }
    Ok(())
}

/// One row of the long-format metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub seed: u64,
    pub held_out_domain: Option<usize>,
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

/// Marks the checkpoint picked by validation; its value is always 1.
pub const SELECTED: &str = "selected";

fn rows_from(run: &RunResult, expert: bool) -> Vec<MetricsRow> {
    let tag = run.method.tag();
    let mut rows = Vec::new();
    let mut push = |step: usize, metric: String, value: f64| {
        rows.push(MetricsRow {
            method: tag.clone(),
            seed: run.seed,
            held_out_domain: run.split.target,
            step,
            metric,
            value,
        })
    };
    for e in &run.evals {
        if expert {
            for (&id, &acc) in run.split.sources.iter().zip(&e.expert_val_acc) {
                push(e.step, format!("expert_val_acc_d{id}"), acc);
            }
            continue;
        }
        push(e.step, "train_loss".into(), e.train_loss);
        for (&id, &acc) in run.split.sources.iter().zip(&e.source_train_acc) {
            push(e.step, format!("train_acc_d{id}"), acc);
        }
        for (&id, &acc) in run.split.sources.iter().zip(&e.source_val_acc) {
            push(e.step, format!("val_acc_d{id}"), acc);
        }
        push(e.step, "mean_val_acc".into(), e.mean_val_acc);
        if let Some(acc) = e.ood_acc {
            push(e.step, "ood_acc".into(), acc);
        }
        push(e.step, "val_entropy".into(), e.val_entropy);
        if let Some(s) = e.probe_logit_sum {
            push(e.step, "logit_sum".into(), s);
        }
    }
    if !expert {
        push(run.selected_step(), SELECTED.into(), 1.0);
    }
    rows
}

/// Deployed-predictor metrics of a run.
pub fn metrics_rows(run: &RunResult) -> Vec<MetricsRow> {
    rows_from(run, false)
}

/// Expert validation accuracies of a run; empty without experts.
pub fn expert_rows(run: &RunResult) -> Vec<MetricsRow> {
    rows_from(run, true)
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::data(path, e.to_string())
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if let Some(r) = rows.iter().find(|r| !r.value.is_finite()) {
        return Err(CliError::data(path, format!("non-finite {} at step {}", r.metric, r.step)));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    if rows.is_empty() {
        w.write_record(["method", "seed", "held_out_domain", "step", "metric", "value"])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn write_rescale(path: &Path, traces: &[RescaleTrace]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["step", "alpha", "row", "f", "f_prime"])
        .map_err(|e| csv_err(path, e))?;
    for t in traces {
        for ((row, f), fp) in t.rows.iter().zip(&t.f).zip(&t.f_prime) {
            w.write_record([
                t.step.to_string(),
                format!("{:?}", t.alpha),
                row.to_string(),
                format!("{f:?}"),
                format!("{fp:?}"),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_rescale(path: &Path) -> Result<Vec<RescaleTrace>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out: Vec<RescaleTrace> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CliError::data(path, format!("row {}: bad field {j}", i + 2)))
        };
        let step = num(0)? as usize;
        if out.last().is_none_or(|t| t.step != step) {
            out.push(RescaleTrace {
                step,
                alpha: num(1)?,
                rows: Vec::new(),
                f: Vec::new(),
                f_prime: Vec::new(),
                mean_f: 0.0,
                mean_f_prime: 0.0,
            });
        }
        let last = out.last_mut().unwrap();
        last.rows.push(num(2)? as usize);
        last.f.push(num(3)?);
        last.f_prime.push(num(4)?);
    }
    for t in &mut out {
        let n = t.f.len() as f64;
        t.mean_f = t.f.iter().sum::<f64>() / n;
        t.mean_f_prime = t.f_prime.iter().sum::<f64>() / n;
    }
    Ok(out)
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

/// Writes the probe record; one row per (evaluation point, probe sample).
pub fn write_probe(path: &Path, probe: &ProbeRecord) -> Result<()> {
    let k = probe.probs.first().map_or(0, |p| p.last_dim());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = ["step", "row", "domain", "label", "expert_loss"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..k).map(|c| format!("p{c}")));
    header.extend((0..k).map(|c| format!("z{c}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (t, &step) in probe.steps.iter().enumerate() {
        for (i, (&label, &domain)) in probe.labels.iter().zip(&probe.domain_ids).enumerate() {
            let mut rec = vec![step.to_string(), i.to_string(), domain.to_string(), label.to_string()];
            rec.push(probe.expert_losses.get(t).map_or(String::new(), |l| fmt_f(l[i])));
            rec.extend(probe.probs[t].row(i).iter().map(|&v| fmt_f(v)));
            match probe.logits.get(t) {
                Some(z) => rec.extend(z.row(i).iter().map(|&v| fmt_f(v))),
                None => rec.extend((0..k).map(|_| String::new())),
            }
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_probe(path: &Path) -> Result<ProbeRecord> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let k = header.iter().filter(|h| h.starts_with('p')).count();
    if header.len() != 5 + 2 * k {
        return Err(CliError::data(path, "unexpected probe header"));
    }
    let mut rec_out = ProbeRecord::default();
    let (mut probs, mut logits, mut losses): (Vec<f64>, Vec<f64>, Vec<f64>) = Default::default();
    let mut current: Option<usize> = None;
    let flush = |rec_out: &mut ProbeRecord, probs: &mut Vec<f64>, logits: &mut Vec<f64>, losses: &mut Vec<f64>| -> Result<()> {
        let n = probs.len() / k.max(1);
        rec_out.probs.push(Tensor::new(vec![n, k], std::mem::take(probs))?);
        if !logits.is_empty() {
            rec_out.logits.push(Tensor::new(vec![n, k], std::mem::take(logits))?);
        }
        if !losses.is_empty() {
            rec_out.expert_losses.push(std::mem::take(losses));
        }
        Ok(())
    };
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |j: usize| CliError::data(path, format!("row {}: bad field {}", line + 2, &header[j]));
        let int = |j: usize| rec[j].parse::<usize>().map_err(|_| bad(j));
        let float = |j: usize| rec[j].parse::<f64>().map_err(|_| bad(j));
        let step = int(0)?;
        if current != Some(step) {
            if current.is_some() {
                flush(&mut rec_out, &mut probs, &mut logits, &mut losses)?;
            }
            current = Some(step);
            rec_out.steps.push(step);
        }
        if rec_out.steps.len() == 1 {
            rec_out.domain_ids.push(int(2)?);
            rec_out.labels.push(int(3)?);
        }
        if !rec[4].is_empty() {
            losses.push(float(4)?);
        }
        for c in 0..k {
            probs.push(float(5 + c)?);
            if !rec[5 + k + c].is_empty() {
                logits.push(float(5 + k + c)?);
            }
        }
    }
    if current.is_some() {
        flush(&mut rec_out, &mut probs, &mut logits, &mut losses)?;
    }
    Ok(rec_out)
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Writes a full run directory under a private name, then renames it into place.
pub fn write_run(dir: &Path, run: &RunResult) -> Result<()> {
    let parent = dir.parent().expect("run dirs are nested");
    fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    let name = dir.file_name().unwrap().to_string_lossy();
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    }
    let ckpt = tmp.join("checkpoints");
    fs::create_dir_all(&ckpt).map_err(|e| CliError::io(&ckpt, e))?;

    write_metrics(&tmp.join("metrics.csv"), &metrics_rows(run))?;
    if !run.selected_eval().expert_val_acc.is_empty() {
        write_metrics(&tmp.join("experts.csv"), &expert_rows(run))?;
    }
    if !run.rescale.is_empty() {
        write_rescale(&tmp.join("rescale.csv"), &run.rescale)?;
    }
    write_probe(&tmp.join("probe.csv"), &run.probe)?;

    let models = &run.selected_models;
    let step = models.step as u64;
    let save = |role: ModelRole, model: &lfme_core::models::MlpModel| -> Result<()> {
        let path = ckpt.join(format!("{}.ckpt", role.file_stem()));
        Ok(Checkpoint {
            role,
            step,
            seed: run.seed,
            model: model.clone(),
        }
        .save(&path)?)
    };
    if let Some(t) = &models.target {
        save(ModelRole::Target, t)?;
    }
    for (i, e) in models.experts.iter().enumerate() {
        save(ModelRole::Expert(i as u32), e)?;
    }
    if let Some(w) = &models.weighting {
        save(ModelRole::Weighting, w)?;
    }

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| CliError::io(dir, e))
}
