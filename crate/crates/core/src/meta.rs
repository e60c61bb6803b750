//! Inner adaptation and the outer meta-update, optionally restricted to a
//! prune mask.

use crate::error::{FamError, Result};
use crate::model::{Batch, Objective, ParameterSet};
use crate::sparsity::{apply_mask, PruneMask};
use crate::tasks::Episode;

/// How the outer gradient treats the dependence of adapted parameters on the
/// starting point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Order {
    /// Adapted parameters are treated as constants.
    #[default]
    First,
    /// Exact derivative through every inner step (Hessian-vector products).
    Second,
}

impl Order {
    pub fn as_str(self) -> &'static str {
        match self {
            Order::First => "first",
            Order::Second => "second",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Order::First),
            "second" => Ok(Order::Second),
            other => Err(FamError::Config(format!("unknown order `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    /// Inner learning rate.
    pub alpha: f64,
    /// Outer (meta) step size.
    pub beta: f64,
    pub inner_steps: usize,
    pub tasks_per_batch: usize,
    pub order: Order,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 0.1,
            beta: 0.01,
            inner_steps: 1,
            tasks_per_batch: 10,
            order: Order::First,
        }
    }
}

impl MetaConfig {
    /// Zero step sizes are accepted: they make the corresponding loop a no-op,
    /// which the fixed-point checks rely on.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(FamError::Config(format!("alpha must be finite and ≥ 0, got {}", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(FamError::Config(format!("beta must be finite and ≥ 0, got {}", self.beta)));
        }
        if self.inner_steps == 0 {
            return Err(FamError::Config("inner_steps must be at least 1".into()));
        }
        if self.tasks_per_batch == 0 {
            return Err(FamError::Config("tasks_per_batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// Every point visited by the inner loop, starting with `params` itself.
fn inner_trajectory(
    obj: &dyn Objective,
    params: &ParameterSet,
    support: &Batch,
    cfg: &MetaConfig,
) -> Result<Vec<ParameterSet>> {
    if support.is_empty() {
        return Err(FamError::Input("support set is empty".into()));
    }
    let mut path = Vec::with_capacity(cfg.inner_steps + 1);
    path.push(params.clone());
    for _ in 0..cfg.inner_steps {
        let current = path.last().unwrap();
        let (loss, grad) = obj.loss_and_grad(current, support)?;
        if !loss.is_finite() {
            return Err(FamError::numeric("support loss"));
        }
        let mut next = current.clone();
        next.axpy(-cfg.alpha, &grad)?;
        if !next.is_finite() {
            return Err(FamError::numeric("adapted parameters"));
        }
        path.push(next);
    }
    Ok(path)
}

/// `inner_steps` plain gradient-descent steps on the support set. The input
/// is left untouched.
pub fn inner_adapt(
    obj: &dyn Objective,
    params: &ParameterSet,
    support: &Batch,
    cfg: &MetaConfig,
) -> Result<ParameterSet> {
    Ok(inner_trajectory(obj, params, support, cfg)?.pop().unwrap())
}

/// Query loss after adaptation and its gradient with respect to the
/// pre-adaptation parameters.
pub fn meta_gradient(
    obj: &dyn Objective,
    params: &ParameterSet,
    episode: &Episode,
    cfg: &MetaConfig,
) -> Result<(f64, ParameterSet)> {
    let path = inner_trajectory(obj, params, &episode.support, cfg)?;
    let (loss, mut v) = obj.loss_and_grad(path.last().unwrap(), &episode.query)?;
    if !loss.is_finite() {
        return Err(FamError::numeric("query loss"));
    }
    if cfg.order == Order::Second {
        // d θ_{j+1} / d θ_j = I − α H(θ_j), applied right to left.
        for theta in path[..cfg.inner_steps].iter().rev() {
            let hv = obj.hessian_vector(theta, &episode.support, &v)?;
            v.axpy(-cfg.alpha, &hv)?;
        }
    }
    if !v.is_finite() {
        return Err(FamError::numeric("meta-gradient"));
    }
    Ok((loss, v))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OuterStep {
    pub params: ParameterSet,
    /// Post-adaptation query loss of each task, in task order.
    pub query_losses: Vec<f64>,
}

impl OuterStep {
    pub fn mean_query_loss(&self) -> f64 {
        self.query_losses.iter().sum::<f64>() / self.query_losses.len().max(1) as f64
    }
}

/// `θ − β·Σ_i ∇L_i`, summed over tasks in order, then multiplied by `mask`
/// when one is given.
pub fn meta_outer_step(
    obj: &dyn Objective,
    params: &ParameterSet,
    tasks: &[Episode],
    cfg: &MetaConfig,
    mask: Option<&PruneMask>,
) -> Result<OuterStep> {
    if tasks.is_empty() {
        return Err(FamError::Input("outer step needs at least one task".into()));
    }
    if let Some(m) = mask {
        m.check_congruent(params, "meta_outer_step")?;
    }
    let mut total = params.zeros_like();
    let mut query_losses = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let (loss, grad) = meta_gradient(obj, params, task, cfg).map_err(|e| e.at_task(i))?;
        total.axpy(1.0, &grad)?;
        query_losses.push(loss);
    }
    let mut next = params.clone();
    next.axpy(-cfg.beta, &total)?;
    if !next.is_finite() {
        return Err(FamError::numeric("outer update"));
    }
    let params = match mask {
        Some(m) => apply_mask(&next, m)?,
        None => next,
    };
    Ok(OuterStep { params, query_losses })
}
