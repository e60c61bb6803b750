//! The simulated round loop and its per-round log.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{
    client_round, select_clients, server_step, vanilla_client_round, Broadcast, ClientUpdate, Mode, RunConfig,
    ServerState,
};
use crate::error::{FamError, Result};
use crate::model::{count_prunable, init_params, Model, ModelSpec, ParameterSet};
use crate::rng::{derive_seed, tag};
use crate::sparsity::PruneMask;
use crate::tasks::{load_directory, make_synthetic_clients, ClientDataset, SyntheticParams};
use crate::wire::{
    encode_dense, encode_mask, encode_sparse, Envelope, RoundTraffic, WireMessage, HEADER_LEN, SERVER_ID,
};

/// Training clients `0..n_clients` followed by `extra` held-out clients.
pub fn build_clients(cfg: &RunConfig, extra: usize) -> Result<Vec<ClientDataset>> {
    let n = cfg.n_clients + extra;
    match &cfg.data.dir {
        Some(root) => {
            let mut dirs: Vec<_> = std::fs::read_dir(root)
                .map_err(|e| FamError::Ingestion {
                    path: root.clone(),
                    reason: e.to_string(),
                })?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            dirs.retain(|p| p.is_dir());
            dirs.sort();
            if dirs.len() < n {
                return Err(FamError::Config(format!(
                    "{} holds {} client directories, {n} needed",
                    root.display(),
                    dirs.len()
                )));
            }
            let first = load_directory(&dirs[0], None, 0)?;
            let shape = first.input_shape.clone();
            let mut out = vec![first];
            for (id, dir) in dirs.iter().enumerate().take(n).skip(1) {
                out.push(load_directory(dir, Some(&shape), id)?);
            }
            Ok(out)
        }
        None => {
            let mut p = SyntheticParams::preset(&cfg.data.family, cfg.seed)?;
            p.examples_per_class = cfg.data.examples_per_class;
            p.shift_spread = cfg.data.shift_spread;
            p.intra_class = cfg.data.intra_class.unwrap_or(p.intra_class);
            p.base_noise = cfg.data.base_noise.unwrap_or(p.base_noise);
            p.max_rotation_deg = cfg.data.max_rotation_deg.unwrap_or(p.max_rotation_deg);
            make_synthetic_clients(&p, n)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    /// Server flag during this round's step.
    pub flag: u8,
    pub selected: Vec<usize>,
    pub mean_query_loss: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// What the same messages would cost as dense parameter payloads.
    pub dense_up: u64,
    pub dense_down: u64,
    /// Prunable-weight sparsity of the parameters broadcast this round.
    pub sparsity: f64,
}

impl RoundLog {
    pub fn traffic(&self) -> RoundTraffic {
        RoundTraffic {
            round: self.round,
            bytes_up: self.bytes_up,
            bytes_down: self.bytes_down,
            dense_up: self.dense_up,
            dense_down: self.dense_down,
        }
    }
}

#[derive(Serialize)]
struct LogRow<'a> {
    round: usize,
    flag: u8,
    selected_ids: &'a str,
    mean_query_loss: f64,
    bytes_up: u64,
    bytes_down: u64,
    sparsity: f64,
}

pub fn write_log_csv<W: Write>(log: &[RoundLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in log {
        let ids = r.selected.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        w.serialize(LogRow {
            round: r.round,
            flag: r.flag,
            selected_ids: &ids,
            mean_query_loss: r.mean_query_loss,
            bytes_up: r.bytes_up,
            bytes_down: r.bytes_down,
            sparsity: r.sparsity,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Everything observable about one completed round.
pub struct RoundEvent<'a> {
    pub round: usize,
    pub selected: &'a [usize],
    pub updates: &'a [ClientUpdate],
    pub broadcast: &'a Broadcast,
    /// Encoding of `broadcast.params` as sent to clients.
    pub broadcast_msg: &'a WireMessage,
    pub mask_msg: Option<&'a WireMessage>,
    pub state: &'a ServerState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub spec: ModelSpec,
    pub initial: ParameterSet,
    pub params: ParameterSet,
    pub mask: Option<PruneMask>,
    pub log: Vec<RoundLog>,
}

fn encode_params(params: &ParameterSet, mask: Option<&PruneMask>, envelope: Envelope) -> Result<WireMessage> {
    match mask {
        Some(m) => encode_sparse(params, m, envelope),
        None => Ok(encode_dense(params, envelope)),
    }
}

/// Runs the protocol selected by `cfg.mode` over `clients[..n_clients]`.
///
/// Round `r` is charged the global parameters its selected clients receive,
/// their uploads, and the mask sent to every client if pruning happens in
/// that round.
pub fn run_federated(
    cfg: &RunConfig,
    clients: &[ClientDataset],
    mut observer: impl FnMut(&RoundEvent) -> Result<()>,
) -> Result<RunOutput> {
    cfg.validate()?;
    if clients.len() < cfg.n_clients {
        return Err(FamError::Config(format!(
            "{} client datasets supplied, n_clients = {}",
            clients.len(),
            cfg.n_clients
        )));
    }
    let clients = &clients[..cfg.n_clients];
    let num_classes = match cfg.mode {
        Mode::Vanilla => clients[0].num_classes(),
        Mode::Fam | Mode::Meta => cfg.way,
    };
    let spec = cfg.model_spec(&clients[0].input_shape, num_classes)?;
    let model = Model::new(spec.clone())?;
    let initial = init_params(&spec, derive_seed(cfg.seed, &[tag::INIT]))?;
    let mut state = ServerState::new(
        initial.clone(),
        cfg.effective_lth_round(),
        cfg.k,
        cfg.prune_rate,
        cfg.weighting,
    )?;
    let client_cfg = cfg.client_config();
    let sgd_cfg = cfg.sgd_config();
    let pool: Vec<usize> = (0..cfg.n_clients).collect();
    let dense_len = (HEADER_LEN + 4 * initial.total_count()) as u64;

    let mut downlink = encode_dense(
        &initial,
        Envelope {
            round: 0,
            flag: 0,
            sender: SERVER_ID,
        },
    );
    let mut log = Vec::with_capacity(cfg.rounds);
    for r in 0..cfg.rounds {
        let selected = select_clients(&pool, cfg.k, r, cfg.seed)?;
        let seeds: Vec<u64> = selected
            .iter()
            .map(|&id| derive_seed(cfg.seed, &[tag::CLIENT, r as u64, id as u64]))
            .collect();
        let global = &state.global;
        let mask = state.mask.as_ref();
        let results: Vec<Result<ClientUpdate>> = std::thread::scope(|s| {
            let handles: Vec<_> = selected
                .iter()
                .zip(&seeds)
                .map(|(&id, &seed)| {
                    let ds = &clients[id];
                    let (model, client_cfg, sgd_cfg) = (&model, &client_cfg, &sgd_cfg);
                    s.spawn(move || match cfg.mode {
                        Mode::Vanilla => vanilla_client_round(model, global, ds, sgd_cfg, r, seed),
                        Mode::Fam | Mode::Meta => client_round(model, global, mask, ds, client_cfg, r, seed),
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("client thread panicked")).collect()
        });
        let updates = results.into_iter().collect::<Result<Vec<_>>>()?;

        let mut bytes_up = 0u64;
        for u in &updates {
            let env = Envelope {
                round: r as u32,
                flag: state.flag.as_u8(),
                sender: u.client_id as u32,
            };
            bytes_up += encode_params(&u.params, mask, env)
                .map_err(|e| e.in_client(u.client_id, r))?
                .len() as u64;
        }
        let mut bytes_down = cfg.k as u64 * downlink.len() as u64;

        let (next, broadcast) = server_step(&state, &updates)?;
        let env = Envelope {
            round: r as u32,
            flag: broadcast.flag.as_u8(),
            sender: SERVER_ID,
        };
        let mask_msg = broadcast.mask.as_ref().map(|m| encode_mask(m, env));
        if let Some(m) = &mask_msg {
            bytes_down += cfg.n_clients as u64 * m.len() as u64;
        }
        downlink = encode_params(&next.global, next.mask.as_ref(), env)?;

        let losses: Vec<f64> = updates.iter().flat_map(|u| u.task_losses.iter().copied()).collect();
        log.push(RoundLog {
            round: r,
            flag: broadcast.flag.as_u8(),
            selected: selected.clone(),
            mean_query_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            bytes_up,
            bytes_down,
            dense_up: cfg.k as u64 * dense_len,
            dense_down: cfg.k as u64 * dense_len,
            sparsity: count_prunable(&next.global).sparsity(),
        });
        observer(&RoundEvent {
            round: r,
            selected: &selected,
            updates: &updates,
            broadcast: &broadcast,
            broadcast_msg: &downlink,
            mask_msg: mask_msg.as_ref(),
            state: &next,
        })?;
        state = next;
    }
    Ok(RunOutput {
        spec,
        initial,
        params: state.global,
        mask: state.mask,
        log,
    })
}

/// Writes the log as CSV to `path`.
pub fn save_log(log: &[RoundLog], path: &Path) -> Result<()> {
    write_log_csv(log, std::fs::File::create(path)?)
}
