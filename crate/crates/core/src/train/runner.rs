//! The training loop shared by every method.
//!
//! One step: each expert fits its own domain's minibatch, the optional
//! weighting network fits domain labels, and the target fits the
//! concatenated batch under the method's objective. All losses are summed
//! and a single optimizer updates every model together.

use crate::analysis::{entropy_rows, rescale_trace, RescaleTrace};
use crate::autodiff::{softmax_values, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domains::{derive_seed, Batch, BatchPart, Batcher, DomainSplit, Suite};
use crate::error::{Error, Result};
use crate::models::{default_dims, BoundParams, MlpModel};

use super::aggregate::aggregate_predict;
use super::losses::{
    hard_weights, kd_ce_weight, loss_erm_plus, loss_expert, loss_kd_variant, loss_lfme,
    loss_lfme_guid, loss_ls, loss_self_guid, KdKind,
};
use super::optim::Optimizer;
use super::{MethodKind, MethodSpec, TrainConfig};

const BATCH_STREAM: u64 = 1;
const PROBE_STREAM: u64 = 2;
const TARGET_STREAM: u64 = 1000;
const EXPERT_STREAM: u64 = 2000;
const WEIGHTING_STREAM: u64 = 3000;

/// Metrics recorded at one evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    /// Number of optimizer steps taken.
    pub step: usize,
    /// Mean training loss of the deployed predictor since the previous point.
    pub train_loss: f64,
    pub source_train_acc: Vec<f64>,
    pub source_val_acc: Vec<f64>,
    pub mean_val_acc: f64,
    /// Each expert on its own domain's validation split.
    pub expert_val_acc: Vec<f64>,
    pub ood_acc: Option<f64>,
    /// Mean predictive entropy (nats) over the pooled source validation rows.
    pub val_entropy: f64,
    /// Batch mean of Σ_c z_c on the probe batch (target models only).
    pub probe_logit_sum: Option<f64>,
}

/// Predictor outputs on the fixed probe batch at each evaluation point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbeRecord {
    pub labels: Vec<usize>,
    pub domain_ids: Vec<usize>,
    pub steps: Vec<usize>,
    pub probs: Vec<Tensor>,
    /// Target logits; empty for aggregation methods.
    pub logits: Vec<Tensor>,
    /// Per-sample loss of each sample's own-domain expert; empty without experts.
    pub expert_losses: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunModels {
    pub step: usize,
    pub target: Option<MlpModel>,
    pub experts: Vec<MlpModel>,
    pub weighting: Option<MlpModel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub method: MethodSpec,
    pub seed: u64,
    pub split: DomainSplit,
    /// Predictor loss at every step.
    pub loss_trace: Vec<f64>,
    /// Σ_i L_i at every step; empty without experts.
    pub expert_loss_trace: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    /// Index into `evals` chosen by training-domain validation.
    pub selected: usize,
    pub rescale: Vec<RescaleTrace>,
    pub probe: ProbeRecord,
    pub selected_models: RunModels,
    pub final_models: RunModels,
}

impl RunResult {
    pub fn selected_eval(&self) -> &EvalPoint {
        &self.evals[self.selected]
    }

    pub fn selected_step(&self) -> usize {
        self.selected_eval().step
    }

    pub fn ood_acc(&self) -> Option<f64> {
        self.selected_eval().ood_acc
    }

    pub fn in_domain_acc(&self) -> f64 {
        self.selected_eval().mean_val_acc
    }
}

/// Which losses drive the per-sample weights of the weighted ERM+ variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightSource {
    Expert,
    SelfLoss,
}

/// Fraction of rows whose argmax (lowest class on ties) equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(probs.row(*i)) == y)
        .count();
    correct as f64 / labels.len() as f64
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// The fixed probe batch used for rescale, logit-sum and hard-sample traces.
///
/// Up to `batch_per_domain` rows per source, drawn without replacement from
/// the validation splits. Training rows are avoided because after a few
/// hundred epochs they are memorized by ERM and by the experts alike.
pub fn probe_batch(suite: &Suite, split: &DomainSplit, batch_per_domain: usize, seed: u64) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, PROBE_STREAM));
    let mut parts = Vec::with_capacity(split.sources.len());
    for &id in &split.sources {
        let ds = suite.domain(id);
        let mut idx = ds.val_indices().to_vec();
        idx.shuffle(&mut rng);
        idx.truncate(batch_per_domain);
        idx.sort_unstable();
        let (x, labels) = ds.subset(&idx);
        parts.push(BatchPart {
            domain_id: id,
            sample_idx: idx,
            x,
            labels,
        });
    }
    let xs: Vec<&Tensor> = parts.iter().map(|p| &p.x).collect();
    let x = Tensor::concat_rows(&xs)?;
    let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
    let domain_ids = parts
        .iter()
        .flat_map(|p| std::iter::repeat_n(p.domain_id, p.labels.len()))
        .collect();
    Ok(Batch {
        parts,
        x,
        labels,
        domain_ids,
    })
}

pub fn train_erm(suite: &Suite, split: &DomainSplit, config: &TrainConfig) -> Result<RunResult> {
    let mut cfg = config.clone();
    cfg.method.kind = MethodKind::Erm;
    train_method(suite, split, &cfg)
}

pub fn train_lfme(suite: &Suite, split: &DomainSplit, config: &TrainConfig) -> Result<RunResult> {
    let mut cfg = config.clone();
    cfg.method.kind = MethodKind::Lfme;
    train_method(suite, split, &cfg)
}

pub fn train_weighted(
    suite: &Suite,
    split: &DomainSplit,
    config: &TrainConfig,
    source: WeightSource,
) -> Result<RunResult> {
    let mut cfg = config.clone();
    cfg.method.kind = match source {
        WeightSource::Expert => MethodKind::ErmpWExpt,
        WeightSource::SelfLoss => MethodKind::ErmpWSelf,
    };
    train_method(suite, split, &cfg)
}

/// Trains any registered method on `split.sources`.
///
/// `LFME_GUID` first trains an LFME run with the same configuration and uses
/// its selected target as the frozen reference.
pub fn train_method(suite: &Suite, split: &DomainSplit, config: &TrainConfig) -> Result<RunResult> {
    config.validate()?;
    if split.sources.len() < 2 {
        return Err(Error::Invalid(format!(
            "training needs at least 2 source domains, got {}",
            split.sources.len()
        )));
    }
    if config.method.kind == MethodKind::LfmeGuid {
        let reference = train_lfme(suite, split, config)?;
        let model = reference
            .selected_models
            .target
            .expect("LFME trains a target model");
        return Trainer::new(suite, split, config, Some(model))?.run();
    }
    Trainer::new(suite, split, config, None)?.run()
}

struct Trainer<'a> {
    suite: &'a Suite,
    split: &'a DomainSplit,
    config: &'a TrainConfig,
    target: Option<MlpModel>,
    experts: Vec<MlpModel>,
    weighting: Option<MlpModel>,
    reference: Option<MlpModel>,
}

struct StepOutput {
    predictor_loss: f64,
    expert_loss: f64,
}

impl<'a> Trainer<'a> {
    fn new(
        suite: &'a Suite,
        split: &'a DomainSplit,
        config: &'a TrainConfig,
        reference: Option<MlpModel>,
    ) -> Result<Self> {
        let kind = config.method.kind;
        let dims = default_dims(suite.dim, suite.num_classes);
        let seed = config.seed;
        let target = if kind.trains_target() {
            Some(MlpModel::init(&dims, derive_seed(seed, TARGET_STREAM))?)
        } else {
            None
        };
        let experts = if kind.uses_experts() {
            (0..split.sources.len())
                .map(|i| MlpModel::init(&dims, derive_seed(seed, EXPERT_STREAM + i as u64)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let weighting = if kind == MethodKind::AggDyn {
            Some(MlpModel::init(
                &default_dims(suite.dim, split.sources.len()),
                derive_seed(seed, WEIGHTING_STREAM),
            )?)
        } else {
            None
        };
        Ok(Trainer {
            suite,
            split,
            config,
            target,
            experts,
            weighting,
            reference,
        })
    }

    fn snapshot(&self, step: usize) -> RunModels {
        RunModels {
            step,
            target: self.target.clone(),
            experts: self.experts.clone(),
            weighting: self.weighting.clone(),
        }
    }

    fn run(mut self) -> Result<RunResult> {
        let cfg = self.config;
        let mut batcher = Batcher::new(
            self.suite,
            &self.split.sources,
            cfg.batch_per_domain,
            derive_seed(cfg.seed, BATCH_STREAM),
        )?;
        let probe = probe_batch(self.suite, self.split, cfg.batch_per_domain, cfg.seed)?;
        let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay);

        let mut loss_trace = Vec::with_capacity(cfg.steps);
        let mut expert_loss_trace = Vec::new();
        let mut evals = Vec::with_capacity(cfg.num_evals());
        let mut rescale = Vec::new();
        let mut record = ProbeRecord {
            labels: probe.labels.clone(),
            domain_ids: probe.domain_ids.clone(),
            ..ProbeRecord::default()
        };
        let mut best: Option<(usize, f64)> = None;
        let mut selected_models = self.snapshot(0);
        let mut window_start = 0;

        for step in 0..cfg.steps {
            let batch = batcher.batch(step);
            let out = self.step(step, &batch, &mut optimizer)?;
            loss_trace.push(out.predictor_loss);
            if !self.experts.is_empty() {
                expert_loss_trace.push(out.expert_loss);
            }
            let done = step + 1;
            if done % cfg.eval_every == 0 || done == cfg.steps {
                let window = &loss_trace[window_start..];
                let train_loss = window.iter().sum::<f64>() / window.len() as f64;
                window_start = loss_trace.len();
                let point = self.evaluate(done, train_loss, &probe, &mut record, &mut rescale)?;
                if best.is_none_or(|(_, acc)| point.mean_val_acc > acc) {
                    best = Some((evals.len(), point.mean_val_acc));
                    selected_models = self.snapshot(done);
                }
                evals.push(point);
            }
        }

        let final_models = self.snapshot(cfg.steps);
        Ok(RunResult {
            method: cfg.method.clone(),
            seed: cfg.seed,
            split: self.split.clone(),
            loss_trace,
            expert_loss_trace,
            evals,
            selected: best.map(|b| b.0).unwrap_or(0),
            rescale,
            probe: record,
            selected_models,
            final_models,
        })
    }

    fn step(&mut self, step: usize, batch: &Batch, optimizer: &mut Optimizer) -> Result<StepOutput> {
        let method = &self.config.method;
        let kind = method.kind;
        let k = self.suite.num_classes;
        let mut tape = Tape::new();
        let mut bound: Vec<BoundParams> = Vec::new();
        let mut terms: Vec<Var> = Vec::new();

        let mut expert_probs = Vec::with_capacity(self.experts.len());
        let mut expert_logits = Vec::with_capacity(self.experts.len());
        let mut expert_rows: Vec<f64> = Vec::with_capacity(batch.labels.len());
        let mut expert_loss = 0.0;
        for (expert, part) in self.experts.iter().zip(&batch.parts) {
            let x = tape.constant(part.x.clone());
            let (z, params) = expert.forward(&mut tape, x)?;
            let y = tape.constant(Tensor::one_hot(&part.labels, k)?);
            let q = tape.softmax(z)?;
            let rows = tape.cross_entropy_rows(q, y)?;
            let loss = tape.mean(rows)?;
            expert_rows.extend_from_slice(tape.value(rows).data());
            expert_loss += tape.value(loss).data()[0];
            expert_probs.push(tape.value(q).clone());
            expert_logits.push(tape.value(z).clone());
            terms.push(loss);
            bound.push(params);
        }

        if let Some(w) = &self.weighting {
            let x = tape.constant(batch.x.clone());
            let (z, params) = w.forward(&mut tape, x)?;
            let positions: Vec<usize> = batch
                .parts
                .iter()
                .enumerate()
                .flat_map(|(i, p)| std::iter::repeat_n(i, p.labels.len()))
                .collect();
            let y = tape.constant(Tensor::one_hot(&positions, self.split.sources.len())?);
            let loss = loss_expert(&mut tape, z, y)?;
            terms.push(loss);
            bound.push(params);
        }

        let mut predictor_loss = expert_loss;
        if let Some(target) = &self.target {
            let x = tape.constant(batch.x.clone());
            let (z, params) = target.forward(&mut tape, x)?;
            let y = tape.constant(Tensor::one_hot(&batch.labels, k)?);
            let a = method.alpha_half;
            let expert_q = || -> Result<Tensor> {
                let parts: Vec<&Tensor> = expert_probs.iter().collect();
                Tensor::concat_rows(&parts)
            };
            let expert_z = || -> Result<Tensor> {
                let parts: Vec<&Tensor> = expert_logits.iter().collect();
                Tensor::concat_rows(&parts)
            };
            let loss = match kind {
                MethodKind::Erm => loss_expert(&mut tape, z, y)?,
                MethodKind::Lfme => {
                    let qe = tape.constant(expert_q()?);
                    loss_lfme(&mut tape, z, y, qe, a)?
                }
                MethodKind::ErmPlus => loss_erm_plus(&mut tape, z, y, a)?,
                MethodKind::Ls => loss_ls(&mut tape, z, &batch.labels, method.ls_epsilon)?,
                MethodKind::KdZz | MethodKind::KdQz | MethodKind::KdQq | MethodKind::KdCe => {
                    let ze = tape.constant(expert_z()?);
                    let qe = tape.constant(expert_q()?);
                    let (variant, weight) = match kind {
                        MethodKind::KdZz => (KdKind::LogitLogit, a),
                        MethodKind::KdQz => (KdKind::ProbLogit, a),
                        MethodKind::KdQq => (KdKind::ProbProb, a),
                        _ => (
                            KdKind::CrossEntropy,
                            kd_ce_weight(a, step, self.config.ramp_steps()),
                        ),
                    };
                    loss_kd_variant(&mut tape, variant, z, y, ze, qe, weight)?
                }
                MethodKind::SelfGuid => {
                    let cla = loss_expert(&mut tape, z, y)?;
                    let guid = loss_self_guid(&mut tape, z)?;
                    let scaled = tape.scale(guid, a);
                    tape.add(cla, scaled)?
                }
                MethodKind::LfmeGuid => {
                    let reference = self
                        .reference
                        .as_ref()
                        .ok_or_else(|| Error::Contract("LFME_GUID needs a reference model".into()))?;
                    let q_ref = tape.constant(softmax_values(&reference.logits(&batch.x)?)?);
                    let q = tape.softmax(z)?;
                    let cla = tape.cross_entropy(q, y)?;
                    let guid = loss_lfme_guid(&mut tape, q, q_ref)?;
                    let scaled = tape.scale(guid, a);
                    tape.add(cla, scaled)?
                }
                MethodKind::ErmpWExpt | MethodKind::ErmpWSelf => {
                    // w·L_all per sample; with w ≡ 1 this is exactly the ERM+ objective.
                    let q = tape.softmax(z)?;
                    let ce_rows = tape.cross_entropy_rows(q, y)?;
                    let sq_rows = tape.sq_dist_rows(z, y)?;
                    let weights = if kind == MethodKind::ErmpWExpt {
                        hard_weights(&expert_rows, method.hard_weight_beta)?
                    } else {
                        let own: Vec<f64> = tape
                            .value(ce_rows)
                            .data()
                            .iter()
                            .zip(tape.value(sq_rows).data())
                            .map(|(c, s)| c + a * s)
                            .collect();
                        hard_weights(&own, method.hard_weight_beta)?
                    };
                    let cla = tape.weighted_mean(ce_rows, weights.clone())?;
                    let guid = tape.weighted_mean(sq_rows, weights)?;
                    let scaled = tape.scale(guid, a);
                    tape.add(cla, scaled)?
                }
                MethodKind::AggAvg | MethodKind::AggMs | MethodKind::AggConf | MethodKind::AggDyn => {
                    unreachable!("aggregation methods have no target")
                }
            };
            predictor_loss = tape.value(loss).data()[0];
            terms.push(loss);
            bound.push(params);
        }

        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        tape.backward(total)?;

        let grads: Vec<Vec<f64>> = bound
            .iter()
            .flat_map(|b| b.vars.iter())
            .map(|&v| {
                let len = tape.value(v).len();
                tape.take_grad(v).unwrap_or_else(|| vec![0.0; len])
            })
            .collect();
        let mut params: Vec<&mut Tensor> = Vec::with_capacity(grads.len());
        for e in self.experts.iter_mut() {
            params.extend(e.params_mut());
        }
        if let Some(w) = self.weighting.as_mut() {
            params.extend(w.params_mut());
        }
        if let Some(t) = self.target.as_mut() {
            params.extend(t.params_mut());
        }
        optimizer.step(&mut params, &grads)?;
        Ok(StepOutput {
            predictor_loss,
            expert_loss,
        })
    }

    /// Probabilities of the deployed predictor, plus logits when it is a single model.
    fn predict(&self, x: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        if let Some(t) = &self.target {
            let z = t.logits(x)?;
            return Ok((softmax_values(&z)?, Some(z)));
        }
        let agg = self
            .config
            .method
            .kind
            .aggregate()
            .expect("non-target methods aggregate experts");
        Ok((aggregate_predict(agg, &self.experts, self.weighting.as_ref(), x)?, None))
    }

    fn evaluate(
        &self,
        step: usize,
        train_loss: f64,
        probe: &Batch,
        record: &mut ProbeRecord,
        rescale: &mut Vec<RescaleTrace>,
    ) -> Result<EvalPoint> {
        let mut source_train_acc = Vec::new();
        let mut source_val_acc = Vec::new();
        let mut expert_val_acc = Vec::new();
        let mut entropy_sum = 0.0;
        let mut entropy_n = 0usize;
        for (i, &id) in self.split.sources.iter().enumerate() {
            let ds = self.suite.domain(id);
            let (xt, yt) = ds.subset(ds.train_indices());
            source_train_acc.push(accuracy(&self.predict(&xt)?.0, &yt));
            let (xv, yv) = ds.val_set();
            let (pv, _) = self.predict(&xv)?;
            source_val_acc.push(accuracy(&pv, &yv));
            let ent = entropy_rows(&pv);
            entropy_sum += ent.iter().sum::<f64>();
            entropy_n += ent.len();
            if let Some(e) = self.experts.get(i) {
                expert_val_acc.push(accuracy(&softmax_values(&e.logits(&xv)?)?, &yv));
            }
        }
        let mean_val_acc = source_val_acc.iter().sum::<f64>() / source_val_acc.len() as f64;
        let ood_acc = match self.split.target {
            Some(id) => {
                let (x, y) = self.suite.domain(id).all();
                Some(accuracy(&self.predict(&x)?.0, &y))
            }
            None => None,
        };

        let (probs, logits) = self.predict(&probe.x)?;
        let k = self.suite.num_classes;
        let probe_logit_sum = logits.as_ref().map(|z| {
            z.data().iter().sum::<f64>() / (z.len() / k).max(1) as f64
        });
        record.steps.push(step);
        record.probs.push(probs);
        if let Some(z) = &logits {
            record.logits.push(z.clone());
        }
        if !self.experts.is_empty() {
            let mut losses = Vec::with_capacity(probe.labels.len());
            let mut q_expert = Vec::with_capacity(self.experts.len());
            for (expert, part) in self.experts.iter().zip(&probe.parts) {
                let q = softmax_values(&expert.logits(&part.x)?)?;
                for (i, &y) in part.labels.iter().enumerate() {
                    losses.push(-q.row(i)[y].max(crate::autodiff::LOG_FLOOR).ln());
                }
                q_expert.push(q);
            }
            record.expert_losses.push(losses);
            let method = &self.config.method;
            if method.kind == MethodKind::Lfme && method.alpha_half > 0.0 {
                let parts: Vec<&Tensor> = q_expert.iter().collect();
                let qe = Tensor::concat_rows(&parts)?;
                let z = logits.as_ref().expect("LFME has a target");
                rescale.push(rescale_trace(step, 2.0 * method.alpha_half, z, &qe, &probe.labels)?);
            }
        }

        Ok(EvalPoint {
            step,
            train_loss,
            source_train_acc,
            source_val_acc,
            mean_val_acc,
            expert_val_acc,
            ood_acc,
            val_entropy: entropy_sum / entropy_n.max(1) as f64,
            probe_logit_sum,
        })
    }
}
