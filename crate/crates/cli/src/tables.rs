//! Mean ± std summaries over seeds, one column per held-out domain plus Avg.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::{ExperimentConfig, ReportFormat};
use crate::error::{CliError, Result};
use crate::runs::{read_metrics, write_atomic, Job, MetricsRow, SELECTED};

/// Selected-checkpoint numbers of one finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunStats {
    pub tag: String,
    pub seed: u64,
    pub held_out: usize,
    pub selected_step: usize,
    pub ood_acc: Option<f64>,
    pub val_acc: f64,
    pub expert_val_acc: Option<f64>,
    pub entropy: f64,
    /// Σ_c z_c on the probe batch at the last evaluation point.
    pub logit_sum: Option<f64>,
}

fn at(rows: &[MetricsRow], step: usize, metric: &str) -> Option<f64> {
    rows.iter().find(|r| r.step == step && r.metric == metric).map(|r| r.value)
}

/// Reads the numbers of a run from its `metrics.csv` rows.
pub fn run_stats(rows: &[MetricsRow], experts: &[MetricsRow]) -> Option<RunStats> {
    let sel = rows.iter().find(|r| r.metric == SELECTED)?;
    let step = sel.step;
    let last = rows.iter().filter(|r| r.metric == "logit_sum").map(|r| r.step).max();
    let ev: Vec<f64> = experts
        .iter()
        .filter(|r| r.step == step && r.metric.starts_with("expert_val_acc_d"))
        .map(|r| r.value)
        .collect();
    Some(RunStats {
        tag: sel.method.clone(),
        seed: sel.seed,
        held_out: sel.held_out_domain?,
        selected_step: step,
        ood_acc: at(rows, step, "ood_acc"),
        val_acc: at(rows, step, "mean_val_acc")?,
        expert_val_acc: (!ev.is_empty()).then(|| ev.iter().sum::<f64>() / ev.len() as f64),
        entropy: at(rows, step, "val_entropy")?,
        logit_sum: last.and_then(|s| at(rows, s, "logit_sum")),
    })
}

/// Loads every planned run; jobs without a complete metrics file come back as missing.
pub fn collect(output: &Path, jobs: &[Job]) -> Result<(Vec<RunStats>, Vec<Job>)> {
    let mut found = Vec::new();
    let mut missing = Vec::new();
    for job in jobs {
        let dir = job.dir(output);
        let path = dir.join("metrics.csv");
        if !path.is_file() {
            missing.push(job.clone());
            continue;
        }
        let rows = read_metrics(&path)?;
        let experts = if dir.join("experts.csv").is_file() {
            read_metrics(&dir.join("experts.csv"))?
        } else {
            Vec::new()
        };
        match run_stats(&rows, &experts) {
            Some(s) => found.push(s),
            None => missing.push(job.clone()),
        }
    }
    Ok((found, missing))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Cell {
    pub fn of(values: &[f64]) -> Option<Cell> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some(Cell { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub cells: Vec<Option<Cell>>,
    /// Mean of the column means; its std is over seeds of the per-seed average.
    pub avg: Option<Cell>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub title: String,
    pub domains: Vec<usize>,
    pub rows: Vec<TableRow>,
}

/// One row per label; `value` picks the number of a run, `None` to skip it.
pub fn build_table<F>(title: &str, labels: &[String], domains: &[usize], stats: &[RunStats], value: F) -> Table
where
    F: Fn(&RunStats) -> Option<f64>,
{
    let mut rows = Vec::new();
    for label in labels {
        // seed -> domain -> value
        let mut by_seed: BTreeMap<u64, BTreeMap<usize, f64>> = BTreeMap::new();
        for s in stats.iter().filter(|s| &s.tag == label) {
            if let Some(v) = value(s) {
                by_seed.entry(s.seed).or_default().insert(s.held_out, v);
            }
        }
        if by_seed.is_empty() {
            continue;
        }
        let cells: Vec<Option<Cell>> = domains
            .iter()
            .map(|d| Cell::of(&by_seed.values().filter_map(|m| m.get(d).copied()).collect::<Vec<_>>()))
            .collect();
        let avg = if cells.iter().all(Option::is_some) {
            let per_seed: Vec<f64> = by_seed
                .values()
                .filter(|m| domains.iter().all(|d| m.contains_key(d)))
                .map(|m| domains.iter().map(|d| m[d]).sum::<f64>() / domains.len() as f64)
                .collect();
            Cell::of(&per_seed).map(|c| Cell {
                mean: cells.iter().map(|c| c.unwrap().mean).sum::<f64>() / cells.len() as f64,
                ..c
            })
        } else {
            None
        };
        rows.push(TableRow {
            label: label.clone(),
            cells,
            avg,
        });
    }
    Table {
        title: title.into(),
        domains: domains.to_vec(),
        rows,
    }
}

fn pct(c: &Option<Cell>) -> String {
    match c {
        Some(c) => format!("{:.2} ± {:.2}", 100.0 * c.mean, 100.0 * c.std),
        None => "n/a".into(),
    }
}

pub fn markdown(tables: &[Table], missing: &[Job]) -> String {
    let mut out = String::new();
    for t in tables {
        let _ = writeln!(out, "## {}\n", t.title);
        let mut head = String::from("| Method |");
        let mut rule = String::from("|---|");
        for d in &t.domains {
            let _ = write!(head, " {d} |");
            rule.push_str("---:|");
        }
        head.push_str(" Avg. |");
        rule.push_str("---:|");
        let _ = writeln!(out, "{head}\n{rule}");
        for r in &t.rows {
            let mut line = format!("| {} |", r.label);
            for c in &r.cells {
                let _ = write!(line, " {} |", pct(c));
            }
            let _ = write!(line, " {} |", pct(&r.avg));
            let _ = writeln!(out, "{line}");
        }
        out.push('\n');
    }
    out.push_str("## Missing runs\n\n");
    if missing.is_empty() {
        out.push_str("none\n");
    } else {
        for j in missing {
            let _ = writeln!(out, "- {} seed {} held-out {}", j.method.tag(), j.seed, j.held_out);
        }
    }
    out
}

/// Wide CSV: `table, method, <d>_mean, <d>_std, <d>_n, …, avg_mean, avg_std, avg_n`.
pub fn csv_summary(tables: &[Table]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let domains = tables.first().map_or(&[][..], |t| &t.domains[..]);
    let mut header = vec!["table".to_string(), "method".to_string()];
    for d in domains.iter().map(|d| d.to_string()).chain(["avg".to_string()]) {
        header.extend([format!("{d}_mean"), format!("{d}_std"), format!("{d}_n")]);
    }
    let csv_err = |e: csv::Error| CliError::Validation(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for t in tables {
        for r in &t.rows {
            let mut rec = vec![t.title.clone(), r.label.clone()];
            for c in r.cells.iter().chain([&r.avg]) {
                match c {
                    Some(c) => rec.extend([format!("{:?}", c.mean), format!("{:?}", c.std), c.n.to_string()]),
                    None => rec.extend([String::new(), String::new(), "0".into()]),
                }
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| CliError::Validation(e.to_string()))?).unwrap())
}

pub fn missing_csv(missing: &[Job]) -> String {
    let mut out = String::from("method,seed,held_out_domain\n");
    for j in missing {
        let _ = writeln!(out, "{},{},{}", j.method.tag(), j.seed, j.held_out);
    }
    out
}

pub const OOD_TITLE: &str = "Out-of-domain accuracy (%)";
pub const IN_DOMAIN_TITLE: &str = "In-domain validation accuracy (%)";

/// Accuracy tables of the planned runs; expert rows follow their method in the in-domain table.
pub fn summary_tables(config: &ExperimentConfig, jobs: &[Job]) -> Result<(Vec<Table>, Vec<Job>)> {
    let (stats, missing) = collect(&config.output, jobs)?;
    let mut domains: Vec<usize> = jobs.iter().map(|j| j.held_out).collect();
    domains.sort_unstable();
    domains.dedup();
    let labels: Vec<String> = config.methods.iter().map(|m| m.tag()).collect();
    let ood = build_table(OOD_TITLE, &labels, &domains, &stats, |s| s.ood_acc);
    let mut in_dom = build_table(IN_DOMAIN_TITLE, &labels, &domains, &stats, |s| Some(s.val_acc));
    let experts = build_table(IN_DOMAIN_TITLE, &labels, &domains, &stats, |s| s.expert_val_acc);
    let mut merged = Vec::new();
    for row in in_dom.rows.drain(..) {
        let label = row.label.clone();
        merged.push(row);
        if let Some(e) = experts.rows.iter().find(|r| r.label == label) {
            merged.push(TableRow {
                label: format!("{label} experts"),
                ..e.clone()
            });
        }
    }
    in_dom.rows = merged;
    Ok((vec![ood, in_dom], missing))
}

/// Writes `<stem>.md`, `<stem>.csv` (per the config formats) and `missing.csv`.
pub fn write_summary(config: &ExperimentConfig, stem: &str, tables: &[Table], missing: &[Job]) -> Result<()> {
    let out = &config.output;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    if config.formats.contains(&ReportFormat::Markdown) {
        write_atomic(&out.join(format!("{stem}.md")), markdown(tables, missing).as_bytes())?;
    }
    if config.formats.contains(&ReportFormat::Csv) {
        write_atomic(&out.join(format!("{stem}.csv")), csv_summary(tables)?.as_bytes())?;
    }
    write_atomic(&out.join("missing.csv"), missing_csv(missing).as_bytes())
}
