//! Inference-time combinations of the per-domain experts.

use crate::analysis::entropy_rows;
use crate::autodiff::{softmax_values, Tensor};
use crate::error::{Error, Result};
use crate::models::MlpModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregateKind {
    /// Mean of expert probabilities.
    Avg,
    /// Softmax of a uniformly parameter-averaged expert.
    Ms,
    /// Per sample, the expert with the lowest predictive entropy.
    Conf,
    /// Expert probabilities weighted by a domain classifier's softmax.
    Dyn,
}

pub fn aggregate_predict(
    kind: AggregateKind,
    experts: &[MlpModel],
    weighting: Option<&MlpModel>,
    x: &Tensor,
) -> Result<Tensor> {
    if experts.is_empty() {
        return Err(Error::Invalid("aggregation needs at least one expert".into()));
    }
    if kind == AggregateKind::Ms {
        let refs: Vec<&MlpModel> = experts.iter().collect();
        return softmax_values(&MlpModel::average(&refs)?.logits(x)?);
    }
    let probs = experts
        .iter()
        .map(|e| softmax_values(&e.logits(x)?))
        .collect::<Result<Vec<_>>>()?;
    let (rows, k) = (x.shape()[0], experts[0].output_dim());
    let mut out = Tensor::zeros(vec![rows, k]);
    match kind {
        AggregateKind::Avg => {
            let scale = 1.0 / experts.len() as f64;
            for p in &probs {
                for (o, v) in out.data_mut().iter_mut().zip(p.data()) {
                    *o += v * scale;
                }
            }
        }
        AggregateKind::Conf => {
            let entropies: Vec<Vec<f64>> = probs.iter().map(entropy_rows).collect();
            for i in 0..rows {
                let mut best = 0;
                for e in 1..experts.len() {
                    if entropies[e][i] < entropies[best][i] {
                        best = e;
                    }
                }
                out.data_mut()[i * k..(i + 1) * k].copy_from_slice(probs[best].row(i));
            }
        }
        AggregateKind::Dyn => {
            let w = weighting.ok_or_else(|| {
                Error::Invalid("dynamic aggregation needs a weighting network".into())
            })?;
            if w.output_dim() != experts.len() {
                return Err(Error::Dimension {
                    op: "aggregate_dyn",
                    left: vec![w.output_dim()],
                    right: vec![experts.len()],
                });
            }
            let gate = softmax_values(&w.logits(x)?)?;
            for i in 0..rows {
                for (e, p) in probs.iter().enumerate() {
                    let g = gate.row(i)[e];
                    for c in 0..k {
                        out.data_mut()[i * k + c] += g * p.row(i)[c];
                    }
                }
            }
        }
        AggregateKind::Ms => unreachable!(),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(weights: [f64; 4], bias: [f64; 2]) -> MlpModel {
        let mut m = MlpModel::init(&[2, 2], 0).unwrap();
        let mut p = m.params_mut();
        p[0].data_mut().copy_from_slice(&weights);
        p[1].data_mut().copy_from_slice(&bias);
        m
    }

    #[test]
    fn identical_experts_collapse_to_one() {
        let e = MlpModel::init(&[3, 6, 4], 2).unwrap();
        let w = MlpModel::init(&[3, 6, 3], 5).unwrap();
        let x = Tensor::from_rows(&[[0.2, -1.0, 0.4], [1.5, 0.3, -0.2]]).unwrap();
        let single = softmax_values(&e.logits(&x).unwrap()).unwrap();
        let experts = vec![e.clone(), e.clone(), e];
        for kind in [AggregateKind::Avg, AggregateKind::Ms, AggregateKind::Conf, AggregateKind::Dyn] {
            let out = aggregate_predict(kind, &experts, Some(&w), &x).unwrap();
            for (a, b) in out.data().iter().zip(single.data()) {
                assert!((a - b).abs() < 1e-12, "{kind:?}");
            }
        }
    }

    #[test]
    fn opposite_confident_experts_average_to_half() {
        let a = linear([0.0; 4], [40.0, -40.0]);
        let b = linear([0.0; 4], [-40.0, 40.0]);
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let out = aggregate_predict(AggregateKind::Avg, &[a, b], None, &x).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-12);
        assert!((out.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn conf_picks_the_lowest_entropy_expert() {
        // Two-class entropies: p = 0.98 → ≈ 0.098 nats; p = 0.7 → ≈ 0.611 nats.
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let sharp = linear([0.0; 4], [logit(0.98), 0.0]);
        let soft = linear([0.0; 4], [0.0, logit(0.7)]);
        let x = Tensor::from_rows(&[[0.0, 0.0]]).unwrap();
        let out = aggregate_predict(AggregateKind::Conf, &[soft.clone(), sharp], None, &x).unwrap();
        assert!((out.data()[0] - 0.98).abs() < 1e-12);
        // Tie goes to the lower index.
        let out = aggregate_predict(AggregateKind::Conf, &[soft.clone(), soft], None, &x).unwrap();
        assert!((out.data()[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn dyn_requires_matching_weighting_network() {
        let e = MlpModel::init(&[2, 2], 1).unwrap();
        let x = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        assert!(aggregate_predict(AggregateKind::Dyn, &[e.clone(), e.clone()], None, &x).is_err());
        let w = MlpModel::init(&[2, 3], 1).unwrap();
        assert!(aggregate_predict(AggregateKind::Dyn, &[e.clone(), e], Some(&w), &x).is_err());
    }

    #[test]
    fn ms_rejects_mixed_architectures() {
        let a = MlpModel::init(&[2, 4, 2], 1).unwrap();
        let b = MlpModel::init(&[2, 5, 2], 1).unwrap();
        let x = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        assert!(aggregate_predict(AggregateKind::Ms, &[a, b], None, &x).is_err());
    }
}
