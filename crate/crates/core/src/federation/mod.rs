//! The server state machine, client rounds, client selection, aggregation
//! and the simulated round loop.
//!
//! The server moves through three phases: dense training (flag 0), a single
//! pruning step that computes the mask and rewinds survivors to their initial
//! values (flag 1), and masked training for the rest of the run (flag 2).

mod config;
mod run;

pub use config::{DataConfig, Mode, RunConfig};
pub use run::{build_clients, run_federated, save_log, write_log_csv, RoundEvent, RoundLog, RunOutput};

use rand::seq::index;
use rand::seq::SliceRandom;

use crate::error::{FamError, Result};
use crate::meta::{meta_outer_step, MetaConfig};
use crate::model::{Batch, Objective, ParameterSet};
use crate::rng::{derive_seed, rng_for, tag};
use crate::sparsity::{apply_mask, sparsify, PruneMask};
use crate::tasks::{sample_episode, ClientDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Flag {
    Dense = 0,
    Pruning = 1,
    Masked = 2,
}

impl Flag {
    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Weighting {
    /// Plain mean of the selected clients' parameters.
    #[default]
    Uniform,
    /// Mean weighted by each client's local example count.
    ByExamples,
}

impl Weighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::Uniform => "uniform",
            Weighting::ByExamples => "by_examples",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Weighting::Uniform),
            "by_examples" => Ok(Weighting::ByExamples),
            other => Err(FamError::Config(format!("unknown weighting `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub round: usize,
    pub params: ParameterSet,
    /// Local example count, used by [`Weighting::ByExamples`].
    pub num_examples: usize,
    pub task_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub round: usize,
    pub flag: Flag,
    pub global: ParameterSet,
    pub initial: ParameterSet,
    pub mask: Option<PruneMask>,
    /// Server step at which pruning happens; `None` never prunes.
    pub lth_round: Option<usize>,
    pub k: usize,
    pub prune_rate: f64,
    pub weighting: Weighting,
}

impl ServerState {
    pub fn new(
        initial: ParameterSet,
        lth_round: Option<usize>,
        k: usize,
        prune_rate: f64,
        weighting: Weighting,
    ) -> Result<Self> {
        if k == 0 {
            return Err(FamError::Config("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&prune_rate) {
            return Err(FamError::Config(format!("prune_rate {prune_rate} outside [0, 1]")));
        }
        Ok(ServerState {
            round: 0,
            flag: Flag::Dense,
            global: initial.clone(),
            initial,
            mask: None,
            lth_round,
            k,
            prune_rate,
            weighting,
        })
    }
}

/// What the server sends back after one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Broadcast {
    /// The round whose updates produced this broadcast.
    pub round: usize,
    /// Flag in effect during the step (`Pruning` at the pruning step).
    pub flag: Flag,
    pub params: ParameterSet,
    /// Present only at the pruning step.
    pub mask: Option<PruneMask>,
}

/// `k` distinct ids drawn uniformly without replacement, returned ascending.
pub fn select_clients(pool: &[usize], k: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if k > pool.len() {
        return Err(FamError::Config(format!(
            "cannot select {k} clients from a pool of {}",
            pool.len()
        )));
    }
    let mut rng = rng_for(seed, &[tag::SELECT, round as u64]);
    let mut ids: Vec<usize> = index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Combines updates in ascending client order.
pub fn aggregate(updates: &[ClientUpdate], weighting: Weighting) -> Result<ParameterSet> {
    let Some(first) = updates.first() else {
        return Err(FamError::Protocol("no updates to aggregate".into()));
    };
    if let Some(u) = updates.iter().find(|u| u.round != first.round) {
        return Err(FamError::Protocol(format!(
            "mixed rounds: client {} answered round {}, client {} round {}",
            first.client_id, first.round, u.client_id, u.round
        )));
    }
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    let mut sum = first.params.zeros_like();
    match weighting {
        Weighting::Uniform => {
            for u in &order {
                sum.axpy(1.0, &u.params)?;
            }
            let k = order.len() as f64;
            Ok(sum.map(|v| v / k))
        }
        Weighting::ByExamples => {
            let m: usize = order.iter().map(|u| u.num_examples).sum();
            if m == 0 {
                return Err(FamError::Protocol("example-weighted aggregation with zero examples".into()));
            }
            for u in &order {
                sum.axpy(u.num_examples as f64 / m as f64, &u.params)?;
            }
            Ok(sum)
        }
    }
}

/// One server step: aggregate, then prune-and-rewind or mask as the flag
/// dictates, and advance the round.
pub fn server_step(state: &ServerState, updates: &[ClientUpdate]) -> Result<(ServerState, Broadcast)> {
    if (state.flag == Flag::Dense) != state.mask.is_none() || state.flag == Flag::Pruning {
        return Err(FamError::Protocol(format!(
            "inconsistent server state: flag {:?} with mask {}",
            state.flag,
            if state.mask.is_some() { "present" } else { "absent" }
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for u in updates {
        if u.round != state.round {
            return Err(FamError::Protocol(format!(
                "client {} answered round {} during round {}",
                u.client_id, u.round, state.round
            )));
        }
        if !seen.insert(u.client_id) {
            return Err(FamError::Protocol(format!("duplicate update from client {}", u.client_id)));
        }
        state.global.check_congruent(&u.params, "server_step")?;
        if let Some(mask) = &state.mask {
            if !mask.covers_zeros_of(&u.params) {
                return Err(FamError::Protocol(format!(
                    "client {} sent nonzero values at masked positions",
                    u.client_id
                )));
            }
        }
    }
    let aggregated = aggregate(updates, state.weighting)?;

    let mut flag = state.flag;
    if flag == Flag::Dense && state.lth_round == Some(state.round) {
        flag = Flag::Pruning;
    }
    let mut next = state.clone();
    next.round += 1;
    let broadcast_mask;
    match flag {
        Flag::Dense => {
            next.global = aggregated;
            broadcast_mask = None;
        }
        Flag::Pruning => {
            let mask = sparsify(&aggregated, state.prune_rate)?;
            next.global = apply_mask(&state.initial, &mask)?;
            next.flag = Flag::Masked;
            next.mask = Some(mask.clone());
            broadcast_mask = Some(mask);
        }
        Flag::Masked => {
            next.global = apply_mask(&aggregated, state.mask.as_ref().unwrap())?;
            broadcast_mask = None;
        }
    }
    let broadcast = Broadcast {
        round: state.round,
        flag,
        params: next.global.clone(),
        mask: broadcast_mask,
    };
    Ok((next, broadcast))
}

/// Episode shape and local schedule for meta-learning clients.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientConfig {
    pub meta: MetaConfig,
    pub local_epochs: usize,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

/// Copies the global parameters and runs one outer step per local epoch,
/// each on `tasks_per_batch` freshly sampled episodes. The mask is applied
/// after every outer step when present.
pub fn client_round(
    obj: &dyn Objective,
    global: &ParameterSet,
    mask: Option<&PruneMask>,
    ds: &ClientDataset,
    cfg: &ClientConfig,
    round: usize,
    seed: u64,
) -> Result<ClientUpdate> {
    let tag_err = |e: FamError| e.in_client(ds.client_id, round);
    let mut params = global.clone();
    if let Some(m) = mask {
        params = apply_mask(&params, m).map_err(tag_err)?;
    }
    let mut task_losses = Vec::new();
    for epoch in 0..cfg.local_epochs {
        let tasks = (0..cfg.meta.tasks_per_batch)
            .map(|t| {
                let s = derive_seed(seed, &[tag::EPISODE, epoch as u64, t as u64]);
                sample_episode(ds, cfg.way, cfg.shot, cfg.query, s)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(tag_err)?;
        let step = meta_outer_step(obj, &params, &tasks, &cfg.meta, mask).map_err(tag_err)?;
        task_losses.extend_from_slice(&step.query_losses);
        params = step.params;
    }
    Ok(ClientUpdate {
        client_id: ds.client_id,
        round,
        params,
        num_examples: ds.num_examples(),
        task_losses,
    })
}

/// Plain minibatch schedule for the supervised baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

/// Supervised SGD over shuffled minibatches of the whole local dataset,
/// labels being the dataset's own class indices.
pub fn vanilla_client_round(
    obj: &dyn Objective,
    global: &ParameterSet,
    ds: &ClientDataset,
    cfg: &SgdConfig,
    round: usize,
    seed: u64,
) -> Result<ClientUpdate> {
    let tag_err = |e: FamError| e.in_client(ds.client_id, round);
    if cfg.batch_size == 0 {
        return Err(tag_err(FamError::Config("batch_size must be at least 1".into())));
    }
    let mut order: Vec<(usize, usize)> = ds
        .examples
        .iter()
        .enumerate()
        .flat_map(|(c, ex)| (0..ex.len()).map(move |i| (c, i)))
        .collect();
    let mut params = global.clone();
    let mut task_losses = Vec::new();
    for epoch in 0..cfg.local_epochs {
        order.shuffle(&mut rng_for(seed, &[tag::SHUFFLE, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::stack(chunk.iter().map(|&(c, i)| (&ds.examples[c][i], c))).map_err(tag_err)?;
            let (loss, grad) = obj.loss_and_grad(&params, &batch).map_err(tag_err)?;
            params.axpy(-cfg.lr, &grad).map_err(tag_err)?;
            task_losses.push(loss);
        }
    }
    if !params.is_finite() {
        return Err(tag_err(FamError::numeric("local SGD parameters")));
    }
    Ok(ClientUpdate {
        client_id: ds.client_id,
        round,
        params,
        num_examples: ds.num_examples(),
        task_losses,
    })
}
