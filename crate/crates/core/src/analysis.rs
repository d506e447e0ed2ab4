//! Rescaling factors, distribution statistics, the hard-sample
//! classification ratio and the leave-one-domain-out harness.

use crate::autodiff::Tensor;
use crate::domains::Suite;
use crate::error::{Error, Result};
use crate::train::{train_method, MethodKind, ProbeRecord, RunResult, TrainConfig};

/// Largest `q_*` for which the rescaling factors are evaluated.
pub const Q_STAR_LIMIT: f64 = 1.0 - 1e-9;

/// Fraction of the run excluded from the sign check on F.
pub const WARMUP_FRACTION: f64 = 0.1;

/// Default share of a batch treated as hard samples.
pub const HARD_FRACTION: f64 = 1.0 / 3.0;

fn guard(q_star: f64) -> Result<()> {
    if !(q_star < Q_STAR_LIMIT) {
        return Err(Error::UndefinedFactor { q_star });
    }
    Ok(())
}

/// F = 1 − α(z_* − q^E_*)/(1 − q_*)
pub fn rescale_gt(q_star: f64, qe_star: f64, z_star: f64, alpha: f64) -> Result<f64> {
    guard(q_star)?;
    Ok(1.0 - alpha * (z_star - qe_star) / (1.0 - q_star))
}

/// F′ = 1 − α(1 − Σ_{c≠*} z_c − q^E_*)/(1 − q_*)
pub fn rescale_nongt(q_star: f64, qe_star: f64, sum_z_nongt: f64, alpha: f64) -> Result<f64> {
    guard(q_star)?;
    Ok(1.0 - alpha * (1.0 - sum_z_nongt - qe_star) / (1.0 - q_star))
}

/// F and F′ for every probe sample at one evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct RescaleTrace {
    pub step: usize,
    pub alpha: f64,
    /// Probe rows with q_* below the guard; the factors are indexed alike.
    pub rows: Vec<usize>,
    pub f: Vec<f64>,
    pub f_prime: Vec<f64>,
    pub mean_f: f64,
    pub mean_f_prime: f64,
}

impl RescaleTrace {
    pub fn mean_abs_gap(&self) -> f64 {
        if self.f.is_empty() {
            return f64::NAN;
        }
        let s: f64 = self.f.iter().zip(&self.f_prime).map(|(a, b)| (a - b).abs()).sum();
        s / self.f.len() as f64
    }
}

/// Evaluates F and F′ for target logits `z` against expert probabilities `qe`.
///
/// `alpha` is the full weight α (twice `alpha_half`). Rows whose `q_*` fails
/// the guard are left out of the trace.
pub fn rescale_trace(
    step: usize,
    alpha: f64,
    z: &Tensor,
    qe: &Tensor,
    labels: &[usize],
) -> Result<RescaleTrace> {
    if z.shape() != qe.shape() || z.shape().len() != 2 || z.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "rescale_trace",
            left: z.shape().to_vec(),
            right: qe.shape().to_vec(),
        });
    }
    if !(alpha > 0.0) {
        return Err(Error::Invalid(format!(
            "rescale traces need alpha > 0, got {alpha}"
        )));
    }
    let q = crate::autodiff::softmax_values(z)?;
    let mut trace = RescaleTrace {
        step,
        alpha,
        rows: Vec::new(),
        f: Vec::new(),
        f_prime: Vec::new(),
        mean_f: f64::NAN,
        mean_f_prime: f64::NAN,
    };
    for (i, &y) in labels.iter().enumerate() {
        let q_star = q.row(i)[y];
        if !(q_star < Q_STAR_LIMIT) {
            continue;
        }
        let zr = z.row(i);
        let qe_star = qe.row(i)[y];
        let sum_nongt: f64 = zr
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != y)
            .map(|(_, v)| v)
            .sum();
        trace.rows.push(i);
        trace.f.push(rescale_gt(q_star, qe_star, zr[y], alpha)?);
        trace.f_prime.push(rescale_nongt(q_star, qe_star, sum_nongt, alpha)?);
    }
    if !trace.f.is_empty() {
        let n = trace.f.len() as f64;
        trace.mean_f = trace.f.iter().sum::<f64>() / n;
        trace.mean_f_prime = trace.f_prime.iter().sum::<f64>() / n;
    }
    Ok(trace)
}

/// Share of trace points past the warmup window whose batch-mean F is negative.
///
/// Returns `None` when no point lies past the window.
pub fn negative_fraction_after_warmup(traces: &[RescaleTrace], total_steps: usize) -> Option<f64> {
    let warmup = (total_steps as f64 * WARMUP_FRACTION).ceil() as usize;
    let post: Vec<&RescaleTrace> = traces
        .iter()
        .filter(|t| t.step > warmup && t.mean_f.is_finite())
        .collect();
    if post.is_empty() {
        return None;
    }
    let neg = post.iter().filter(|t| t.mean_f < 0.0).count();
    Some(neg as f64 / post.len() as f64)
}

/// Shannon entropy in nats; zero entries contribute nothing.
pub fn entropy(q: &[f64]) -> f64 {
    -q.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

pub fn entropy_rows(q: &Tensor) -> Vec<f64> {
    (0..q.rows()).map(|i| entropy(q.row(i))).collect()
}

/// R = p̄_*/max(p̄) with p̄ the min-max normalized probabilities.
pub fn classification_ratio(p: &[f64], star: usize) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::Invalid(format!(
            "classification ratio needs at least 2 classes, got {}",
            p.len()
        )));
    }
    if star >= p.len() {
        return Err(Error::LabelRange {
            label: star,
            classes: p.len(),
        });
    }
    let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Degenerate(
            "all probabilities are equal, the ratio is undefined".into(),
        ));
    }
    // max(p̄) is 1 after normalization.
    Ok((p[star] - lo) / (hi - lo))
}

/// Splits sample indices into the `⌈fraction·B⌉` largest losses and the rest.
///
/// Ties keep index order, so equal losses put the lowest indices in `hard`.
/// Both lists come back in ascending index order.
pub fn split_hard_easy(losses: &[f64], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n_hard = ((fraction * losses.len() as f64).ceil() as usize).min(losses.len());
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    let mut hard = order[..n_hard].to_vec();
    let mut easy = order[n_hard..].to_vec();
    hard.sort_unstable();
    easy.sort_unstable();
    (hard, easy)
}

/// Mean R per evaluation point on expert-hard and expert-easy probe rows.
///
/// `splits` supplies the expert losses that define the split; it must share
/// the probe batch of `probe` (same seed and split). Rows with all-equal
/// probabilities are skipped.
pub fn ratio_series(probe: &ProbeRecord, splits: &ProbeRecord, fraction: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if probe.labels != splits.labels || probe.steps != splits.steps {
        return Err(Error::Contract(
            "ratio series needs records over the same probe batch and steps".into(),
        ));
    }
    if splits.expert_losses.len() != probe.probs.len() {
        return Err(Error::Contract(
            "the split record carries no expert losses".into(),
        ));
    }
    let mut hard_series = Vec::with_capacity(probe.probs.len());
    let mut easy_series = Vec::with_capacity(probe.probs.len());
    for (probs, losses) in probe.probs.iter().zip(&splits.expert_losses) {
        let (hard, easy) = split_hard_easy(losses, fraction);
        hard_series.push(mean_ratio(probs, &probe.labels, &hard));
        easy_series.push(mean_ratio(probs, &probe.labels, &easy));
    }
    Ok((hard_series, easy_series))
}

fn mean_ratio(probs: &Tensor, labels: &[usize], rows: &[usize]) -> f64 {
    let vals: Vec<f64> = rows
        .iter()
        .filter_map(|&i| classification_ratio(probs.row(i), labels[i]).ok())
        .collect();
    if vals.is_empty() {
        return f64::NAN;
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Mean of the finite entries; NaN when there are none.
pub fn finite_mean(v: &[f64]) -> f64 {
    let f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if f.is_empty() {
        f64::NAN
    } else {
        f.iter().sum::<f64>() / f.len() as f64
    }
}

/// Summary of one trained method with one domain held out.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub kind: MethodKind,
    pub seed: u64,
    pub held_out: Option<usize>,
    /// Step of the checkpoint picked by training-domain validation.
    pub selected_step: usize,
    pub ood_acc: Option<f64>,
    /// (source domain id, validation accuracy) of the selected checkpoint.
    pub val_acc: Vec<(usize, f64)>,
    pub mean_val_acc: f64,
    /// Experts on their own validation splits, same checkpoint.
    pub expert_val_acc: Vec<(usize, f64)>,
    pub mean_entropy: f64,
    /// Batch-mean Σ_c z_c on the probe batch at the last evaluation point.
    pub mean_logit_sum: Option<f64>,
    /// Mean R on expert-hard / expert-easy probe rows per evaluation point.
    pub r_hard: Vec<f64>,
    pub r_easy: Vec<f64>,
}

impl EvalReport {
    /// Builds the report; `splits` names the run whose experts define hard samples.
    pub fn from_run(run: &RunResult, splits: Option<&ProbeRecord>) -> Result<Self> {
        let sel = run.selected_eval();
        let sources = &run.split.sources;
        let splits = splits.or(if run.probe.expert_losses.is_empty() {
            None
        } else {
            Some(&run.probe)
        });
        let (r_hard, r_easy) = match splits {
            Some(s) => ratio_series(&run.probe, s, HARD_FRACTION)?,
            None => (Vec::new(), Vec::new()),
        };
        Ok(EvalReport {
            method: run.method.tag(),
            kind: run.method.kind,
            seed: run.seed,
            held_out: run.split.target,
            selected_step: sel.step,
            ood_acc: sel.ood_acc,
            val_acc: sources.iter().copied().zip(sel.source_val_acc.iter().copied()).collect(),
            mean_val_acc: sel.mean_val_acc,
            expert_val_acc: sources.iter().copied().zip(sel.expert_val_acc.iter().copied()).collect(),
            mean_entropy: sel.val_entropy,
            mean_logit_sum: run.evals.last().and_then(|e| e.probe_logit_sum),
            r_hard,
            r_easy,
        })
    }

    pub fn mean_expert_val_acc(&self) -> Option<f64> {
        if self.expert_val_acc.is_empty() {
            return None;
        }
        Some(self.expert_val_acc.iter().map(|(_, a)| a).sum::<f64>() / self.expert_val_acc.len() as f64)
    }
}

/// Trains each method with each domain held out in turn.
///
/// Reports come back ordered by held-out domain id, then by `methods` order.
/// `config.method` is ignored in favour of each entry of `methods`.
pub fn evaluate_leave_one_out(
    suite: &Suite,
    config: &TrainConfig,
    methods: &[crate::train::MethodSpec],
) -> Result<Vec<EvalReport>> {
    if methods.is_empty() {
        return Err(Error::Invalid("no methods requested".into()));
    }
    let mut ids: Vec<usize> = suite.domains.iter().map(|d| d.domain_id).collect();
    ids.sort_unstable();
    let mut reports = Vec::with_capacity(ids.len() * methods.len());
    for held_out in ids {
        let split = suite.leave_out(held_out)?;
        for m in methods {
            let mut cfg = config.clone();
            cfg.method = m.clone();
            let run = train_method(suite, &split, &cfg)?;
            reports.push(EvalReport::from_run(&run, None)?);
        }
    }
    Ok(reports)
}

/// One α/2 value of a sweep with its leave-one-out results.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha_half: f64,
    pub reports: Vec<EvalReport>,
}

impl SweepRow {
    /// Held-out accuracies in ascending domain order.
    pub fn ood_accs(&self) -> Vec<(usize, f64)> {
        self.reports
            .iter()
            .filter_map(|r| Some((r.held_out?, r.ood_acc?)))
            .collect()
    }

    pub fn mean_ood(&self) -> f64 {
        let a = self.ood_accs();
        a.iter().map(|(_, v)| v).sum::<f64>() / a.len().max(1) as f64
    }
}

/// `evaluate_leave_one_out` of `config.method` at each α/2 of `grid`.
pub fn sweep_alpha(suite: &Suite, config: &TrainConfig, grid: &[f64]) -> Result<Vec<SweepRow>> {
    grid.iter()
        .map(|&a| {
            let method = config.method.clone().with_alpha_half(a);
            Ok(SweepRow {
                alpha_half: a,
                reports: evaluate_leave_one_out(suite, config, &[method])?,
            })
        })
        .collect()
}

/// Default α/2 grid for sweeps.
pub const DEFAULT_ALPHA_GRID: [f64; 7] = [0.0, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0];
