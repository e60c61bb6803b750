//! Client-side personalization of a sparse global model: only the pruned
//! positions are trained, every surviving weight stays frozen.

use crate::error::{FamError, Result};
use crate::eval::{compute_metrics, Averaging, MetricsReport};
use crate::model::{Model, Objective, ParameterSet};
use crate::sparsity::PruneMask;
use crate::tasks::Episode;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PersonalizationConfig {
    pub alpha: f64,
    /// Passes over the episode list.
    pub epochs: usize,
    /// Number of adaptation episodes.
    pub episodes: usize,
    pub shot: usize,
}

impl Default for PersonalizationConfig {
    fn default() -> Self {
        PersonalizationConfig {
            alpha: 0.2,
            epochs: 5,
            episodes: 1,
            shot: 5,
        }
    }
}

impl PersonalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(FamError::Config(format!("personalization alpha must be > 0, got {}", self.alpha)));
        }
        if self.epochs == 0 || self.episodes == 0 || self.shot == 0 {
            return Err(FamError::Config("personalization epochs, episodes and shot must be positive".into()));
        }
        Ok(())
    }
}

/// Gradient descent on each episode's support set, touching only positions
/// where `trainable` is set.
fn descend(
    obj: &dyn Objective,
    start: &ParameterSet,
    trainable: impl Fn(usize, usize) -> bool,
    episodes: &[Episode],
    cfg: &PersonalizationConfig,
) -> Result<ParameterSet> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(FamError::Input("personalization needs at least one episode".into()));
    }
    let mut theta = start.clone();
    for _ in 0..cfg.epochs {
        for (i, ep) in episodes.iter().enumerate() {
            let (loss, grad) = obj.loss_and_grad(&theta, &ep.support).map_err(|e| e.at_task(i))?;
            if !loss.is_finite() {
                return Err(FamError::numeric("personalization loss").at_task(i));
            }
            for (t, (p, g)) in theta.entries_mut().iter_mut().zip(grad.iter()).enumerate() {
                for (j, (v, &d)) in p.tensor.data_mut().iter_mut().zip(g.tensor.data()).enumerate() {
                    if trainable(t, j) {
                        *v -= cfg.alpha * d;
                    }
                }
            }
        }
    }
    if !theta.is_finite() {
        return Err(FamError::numeric("personalized parameters"));
    }
    Ok(theta)
}

/// Trains the positions where `mask` is 0, starting from `global`; positions
/// where `mask` is 1 are returned bit for bit unchanged.
pub fn personalize(
    obj: &dyn Objective,
    global: &ParameterSet,
    mask: &PruneMask,
    episodes: &[Episode],
    cfg: &PersonalizationConfig,
) -> Result<ParameterSet> {
    mask.check_congruent(global, "personalize")?;
    if !mask.covers_zeros_of(global) {
        return Err(FamError::Contract("global parameters are nonzero at masked positions".into()));
    }
    let entries = mask.entries();
    descend(obj, global, |t, j| !entries[t].bits[j], episodes, cfg)
}

/// Dense adaptation of every parameter; the comparison path for unpruned
/// models.
pub fn fine_tune(
    obj: &dyn Objective,
    global: &ParameterSet,
    episodes: &[Episode],
    cfg: &PersonalizationConfig,
) -> Result<ParameterSet> {
    descend(obj, global, |_, _| true, episodes, cfg)
}

/// Metrics over the query sets of `episodes`, pooled, with `predict`
/// answering each episode's query inputs.
pub fn evaluate_queries(
    episodes: &[Episode],
    mut predict: impl FnMut(&Episode) -> Result<Vec<usize>>,
) -> Result<MetricsReport> {
    let Some(first) = episodes.first() else {
        return Err(FamError::Input("no episodes to evaluate".into()));
    };
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    for ep in episodes {
        if ep.way != first.way {
            return Err(FamError::Input("episodes of different way cannot be pooled".into()));
        }
        preds.extend(predict(ep)?);
        labels.extend_from_slice(&ep.query.labels);
    }
    compute_metrics(&preds, &labels, first.way, Averaging::Weighted)
}

/// Predictions for an episode's query set. A model with one output per
/// episode label predicts directly; a model with an output per source class
/// is restricted to the episode's classes.
pub fn predict_query(model: &Model, params: &ParameterSet, ep: &Episode) -> Result<Vec<usize>> {
    predict_labels(model, params, &ep.query.inputs, &ep.classes)
}

/// Episode-label predictions for `inputs` drawn from source `classes`.
pub fn predict_labels(model: &Model, params: &ParameterSet, inputs: &Tensor, classes: &[usize]) -> Result<Vec<usize>> {
    if model.spec().num_classes == classes.len() {
        model.predict(params, inputs)
    } else {
        model.predict_among(params, inputs, classes)
    }
}

/// Metrics of the unadapted model on the query sets.
pub fn zero_shot_eval(model: &Model, global: &ParameterSet, episodes: &[Episode]) -> Result<MetricsReport> {
    evaluate_queries(episodes, |ep| predict_query(model, global, ep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Batch, Param, Role};

    /// Gradient fixed at 0.5 everywhere.
    struct Frozen;

    impl Objective for Frozen {
        fn loss_and_grad(&self, p: &ParameterSet, _: &Batch) -> Result<(f64, ParameterSet)> {
            Ok((1.0, p.map(|_| 0.5)))
        }
    }

    fn ps(v: &[f64]) -> ParameterSet {
        ParameterSet::new(vec![Param {
            name: "w".into(),
            role: Role::Weight,
            tensor: Tensor::from_vec(&[v.len()], v.to_vec()).unwrap(),
        }])
        .unwrap()
    }

    fn episode() -> Episode {
        let b = Batch::new(Tensor::zeros(&[1, 1]), vec![0]).unwrap();
        Episode {
            way: 2,
            classes: vec![0, 1],
            support: b.clone(),
            query: b,
            support_ids: vec![],
            query_ids: vec![],
        }
    }

    fn cfg(alpha: f64) -> PersonalizationConfig {
        PersonalizationConfig {
            alpha,
            epochs: 1,
            episodes: 1,
            shot: 1,
        }
    }

    #[test]
    fn frozen_slot_and_grown_slot() {
        let g = ps(&[1.0, 0.0]);
        let mask = PruneMask::from_bits(&g, &[true, false]).unwrap();
        let out = personalize(&Frozen, &g, &mask, &[episode()], &cfg(1.0)).unwrap();
        assert_eq!(out.flatten(), vec![1.0, -0.5]);
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let g = ps(&[0.3, -0.7]);
        let out = personalize(&Frozen, &g, &PruneMask::all_ones(&g), &[episode()], &cfg(1.0)).unwrap();
        assert_eq!(out.to_bits(), g.to_bits());
    }

    #[test]
    fn linear_in_alpha() {
        let g = ps(&[0.0, 0.0]);
        let mask = PruneMask::all_zeros(&g);
        let a = personalize(&Frozen, &g, &mask, &[episode()], &cfg(0.5)).unwrap();
        let b = personalize(&Frozen, &g, &mask, &[episode()], &cfg(1.5)).unwrap();
        for (x, y) in a.flatten().iter().zip(b.flatten()) {
            assert!((3.0 * x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_empty_and_uncovered() {
        let g = ps(&[1.0, 2.0]);
        let mask = PruneMask::from_bits(&g, &[true, false]).unwrap();
        assert!(matches!(personalize(&Frozen, &g, &mask, &[episode()], &cfg(1.0)), Err(FamError::Contract(_))));
        let g = ps(&[1.0, 0.0]);
        assert!(matches!(personalize(&Frozen, &g, &mask, &[], &cfg(1.0)), Err(FamError::Input(_))));
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let eps = vec![episode(), episode()];
        let r = evaluate_queries(&eps, |ep| Ok(ep.query.labels.clone())).unwrap();
        assert_eq!((r.accuracy, r.f1, r.n_examples), (1.0, 1.0, 2));
    }
}
