//! Method registry, optimizers and training loops.

mod aggregate;
mod losses;
mod optim;
mod runner;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use aggregate::{aggregate_predict, AggregateKind};
pub use losses::{
    hard_weights, kd_ce_weight, loss_erm_plus, loss_expert, loss_kd_variant, loss_lfme,
    loss_lfme_guid, loss_ls, loss_self_guid, smoothed_targets, KdKind, HARD_WEIGHT_MAX,
    HARD_WEIGHT_MIN,
};
pub use optim::{Optimizer, OptimizerKind};
pub use runner::{
    accuracy, probe_batch, train_erm, train_lfme, train_method, train_weighted, EvalPoint,
    ProbeRecord, RunModels, RunResult, WeightSource,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MethodKind {
    Erm,
    Lfme,
    ErmPlus,
    Ls,
    KdZz,
    KdQz,
    KdQq,
    KdCe,
    LfmeGuid,
    SelfGuid,
    ErmpWExpt,
    ErmpWSelf,
    AggAvg,
    AggMs,
    AggConf,
    AggDyn,
}

impl MethodKind {
    pub const ALL: [MethodKind; 16] = [
        MethodKind::Erm,
        MethodKind::Lfme,
        MethodKind::ErmPlus,
        MethodKind::Ls,
        MethodKind::KdZz,
        MethodKind::KdQz,
        MethodKind::KdQq,
        MethodKind::KdCe,
        MethodKind::LfmeGuid,
        MethodKind::SelfGuid,
        MethodKind::ErmpWExpt,
        MethodKind::ErmpWSelf,
        MethodKind::AggAvg,
        MethodKind::AggMs,
        MethodKind::AggConf,
        MethodKind::AggDyn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Erm => "ERM",
            MethodKind::Lfme => "LFME",
            MethodKind::ErmPlus => "ERM_PLUS",
            MethodKind::Ls => "LS",
            MethodKind::KdZz => "KD_ZZ",
            MethodKind::KdQz => "KD_QZ",
            MethodKind::KdQq => "KD_QQ",
            MethodKind::KdCe => "KD_CE",
            MethodKind::LfmeGuid => "LFME_GUID",
            MethodKind::SelfGuid => "SELF_GUID",
            MethodKind::ErmpWExpt => "ERMP_W_EXPT",
            MethodKind::ErmpWSelf => "ERMP_W_SELF",
            MethodKind::AggAvg => "AGG_AVG",
            MethodKind::AggMs => "AGG_MS",
            MethodKind::AggConf => "AGG_CONF",
            MethodKind::AggDyn => "AGG_DYN",
        }
    }

    /// Trains per-domain experts during the run.
    pub fn uses_experts(self) -> bool {
        matches!(
            self,
            MethodKind::Lfme
                | MethodKind::KdZz
                | MethodKind::KdQz
                | MethodKind::KdQq
                | MethodKind::KdCe
                | MethodKind::ErmpWExpt
        ) || self.aggregate().is_some()
    }

    /// Trains a single deployable target model.
    pub fn trains_target(self) -> bool {
        self.aggregate().is_none()
    }

    pub fn aggregate(self) -> Option<AggregateKind> {
        match self {
            MethodKind::AggAvg => Some(AggregateKind::Avg),
            MethodKind::AggMs => Some(AggregateKind::Ms),
            MethodKind::AggConf => Some(AggregateKind::Conf),
            MethodKind::AggDyn => Some(AggregateKind::Dyn),
            _ => None,
        }
    }

    /// Whether `alpha_half` changes the objective.
    pub fn uses_alpha(self) -> bool {
        matches!(
            self,
            MethodKind::Lfme
                | MethodKind::ErmPlus
                | MethodKind::KdZz
                | MethodKind::KdQz
                | MethodKind::KdQq
                | MethodKind::KdCe
                | MethodKind::LfmeGuid
                | MethodKind::SelfGuid
                | MethodKind::ErmpWExpt
                | MethodKind::ErmpWSelf
        )
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace(['-', '+'], "_");
        let norm = match norm.as_str() {
            "ERM_" | "ERMP" | "ERMPLUS" => "ERM_PLUS".to_string(),
            _ => norm,
        };
        MethodKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Invalid(format!("unknown method {s:?}")))
    }
}

fn default_alpha_half() -> f64 {
    1.0
}

fn default_ls_epsilon() -> f64 {
    0.1
}

fn default_beta() -> f64 {
    1.0
}

/// One training method with its hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Weight of the guidance term (α/2).
    #[serde(default = "default_alpha_half")]
    pub alpha_half: f64,
    #[serde(default = "default_ls_epsilon")]
    pub ls_epsilon: f64,
    /// Ramp length for KD_CE; half the run when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp_steps: Option<usize>,
    #[serde(default = "default_beta")]
    pub hard_weight_beta: f64,
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> Self {
        MethodSpec {
            kind,
            alpha_half: default_alpha_half(),
            ls_epsilon: default_ls_epsilon(),
            ramp_steps: None,
            hard_weight_beta: default_beta(),
        }
    }

    pub fn with_alpha_half(mut self, alpha_half: f64) -> Self {
        self.alpha_half = alpha_half;
        self
    }

    pub fn with_epsilon(mut self, eps: f64) -> Self {
        self.ls_epsilon = eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_half >= 0.0) || !self.alpha_half.is_finite() {
            return Err(Error::Invalid(format!(
                "alpha_half must be finite and non-negative, got {}",
                self.alpha_half
            )));
        }
        if !(0.0..1.0).contains(&self.ls_epsilon) {
            return Err(Error::Invalid(format!(
                "ls_epsilon must lie in [0, 1), got {}",
                self.ls_epsilon
            )));
        }
        if !(self.hard_weight_beta >= 0.0) || !self.hard_weight_beta.is_finite() {
            return Err(Error::Invalid(format!(
                "hard_weight_beta must be finite and non-negative, got {}",
                self.hard_weight_beta
            )));
        }
        if self.ramp_steps == Some(0) {
            return Err(Error::Invalid("ramp_steps must be positive".into()));
        }
        Ok(())
    }

    /// Short label unique per kind and relevant hyper-parameters, e.g. `lfme-a1`.
    pub fn tag(&self) -> String {
        let base = self.kind.name().to_ascii_lowercase().replace('_', "-");
        match self.kind {
            MethodKind::Ls => format!("{base}-e{}", self.ls_epsilon),
            MethodKind::ErmpWExpt | MethodKind::ErmpWSelf => {
                format!("{base}-a{}-b{}", self.alpha_half, self.hard_weight_beta)
            }
            k if k.uses_alpha() => format!("{base}-a{}", self.alpha_half),
            _ => base,
        }
    }
}

/// Hyper-parameters shared by every method of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: MethodSpec,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_per_domain: usize,
    #[serde(default)]
    pub seed: u64,
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn new(method: MethodSpec) -> Self {
        TrainConfig {
            method,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            weight_decay: 0.0,
            steps: 5000,
            batch_per_domain: 32,
            seed: 0,
            eval_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Invalid(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.steps == 0 || self.batch_per_domain == 0 || self.eval_every == 0 {
            return Err(Error::Invalid(
                "steps, batch_per_domain and eval_every must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Number of evaluation points: `ceil(steps / eval_every)`.
    pub fn num_evals(&self) -> usize {
        self.steps.div_ceil(self.eval_every)
    }

    pub fn ramp_steps(&self) -> usize {
        self.method.ramp_steps.unwrap_or((self.steps / 2).max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_parse_loosely() {
        assert_eq!("erm".parse::<MethodKind>().unwrap(), MethodKind::Erm);
        assert_eq!("ERM+".parse::<MethodKind>().unwrap(), MethodKind::ErmPlus);
        assert_eq!("kd-ce".parse::<MethodKind>().unwrap(), MethodKind::KdCe);
        assert_eq!("agg_dyn".parse::<MethodKind>().unwrap(), MethodKind::AggDyn);
        assert!("nope".parse::<MethodKind>().is_err());
        for k in MethodKind::ALL {
            assert_eq!(k.name().parse::<MethodKind>().unwrap(), k);
        }
    }

    #[test]
    fn validation_catches_bad_values() {
        assert!(MethodSpec::new(MethodKind::Lfme).with_alpha_half(-1.0).validate().is_err());
        assert!(MethodSpec::new(MethodKind::Ls).with_epsilon(1.0).validate().is_err());
        let mut cfg = TrainConfig::new(MethodSpec::new(MethodKind::Erm));
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tags_are_distinct() {
        let a = MethodSpec::new(MethodKind::Lfme).with_alpha_half(0.01).tag();
        let b = MethodSpec::new(MethodKind::Lfme).with_alpha_half(10.0).tag();
        assert_eq!(a, "lfme-a0.01");
        assert_ne!(a, b);
        assert_eq!(MethodSpec::new(MethodKind::Erm).tag(), "erm");
    }

    #[test]
    fn eval_count_rounds_up() {
        let mut cfg = TrainConfig::new(MethodSpec::new(MethodKind::Erm));
        cfg.steps = 250;
        cfg.eval_every = 100;
        assert_eq!(cfg.num_evals(), 3);
    }
}
