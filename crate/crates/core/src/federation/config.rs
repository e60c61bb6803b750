//! Run configuration and its `key=value` text format.
//!
//! One assignment per line; blank lines and text after `#` are ignored.
//! Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use super::{ClientConfig, SgdConfig, Weighting};
use crate::error::{FamError, Result};
use crate::eval::ExperimentConfig;
use crate::meta::{MetaConfig, Order};
use crate::model::{ModelKind, ModelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    /// Federated meta-learning with pruning and rewind.
    #[default]
    Fam,
    /// Federated meta-learning without pruning.
    Meta,
    /// Federated supervised training.
    Vanilla,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fam => "fam",
            Mode::Meta => "meta",
            Mode::Vanilla => "vanilla",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fam" => Ok(Mode::Fam),
            "meta" => Ok(Mode::Meta),
            "vanilla" => Ok(Mode::Vanilla),
            other => Err(FamError::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Where client data comes from.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Synthetic preset (`mri-like` or `cifar-like`).
    pub family: String,
    pub examples_per_class: usize,
    pub shift_spread: f64,
    /// Preset overrides; `None` keeps the family's value.
    pub intra_class: Option<f64>,
    pub base_noise: Option<f64>,
    pub max_rotation_deg: Option<f64>,
    /// One subdirectory per client, each in class-directory layout. Replaces
    /// the synthetic generator when set.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            family: "mri-like".into(),
            examples_per_class: 60,
            shift_spread: 1.0,
            intra_class: None,
            base_noise: None,
            max_rotation_deg: None,
            dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub rounds: usize,
    pub n_clients: usize,
    pub k: usize,
    /// Pruning step; `None` means `floor(rounds / 2)`. Ignored outside `fam` mode.
    pub lth_round: Option<usize>,
    pub prune_rate: f64,
    pub weighting: Weighting,
    pub seed: u64,
    pub meta: MetaConfig,
    pub local_epochs: usize,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    /// Learning rate and batch size of the supervised baseline.
    pub lr: f64,
    pub batch_size: usize,
    pub model: ModelKind,
    pub hidden: Vec<usize>,
    pub filters: usize,
    pub data: DataConfig,
    /// Held-out clients for evaluation, generated after the training clients.
    pub eval_clients: usize,
    /// Test examples per class held out from each evaluation client.
    pub test_per_class: usize,
    /// Learning rate and passes of client-side adaptation.
    pub adapt_alpha: f64,
    pub adapt_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Fam,
            rounds: 200,
            n_clients: 20,
            k: 2,
            lth_round: None,
            prune_rate: 0.7,
            weighting: Weighting::Uniform,
            seed: 0,
            meta: MetaConfig::default(),
            local_epochs: 10,
            way: 2,
            shot: 5,
            query: 10,
            lr: 0.05,
            batch_size: 10,
            model: ModelKind::Mlp,
            hidden: vec![32],
            filters: 8,
            data: DataConfig::default(),
            eval_clients: 5,
            test_per_class: 40,
            adapt_alpha: 0.2,
            adapt_epochs: 5,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| FamError::Config(format!("invalid value `{raw}` for `{key}`")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, raw)) = line.split_once('=') else {
                return Err(FamError::Config(format!("line {}: expected key=value, got `{line}`", n + 1)));
            };
            cfg.set(key.trim(), raw.trim())
                .map_err(|e| FamError::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assigns one key.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "mode" => self.mode = Mode::parse(raw)?,
            "rounds" => self.rounds = value(key, raw)?,
            "n_clients" => self.n_clients = value(key, raw)?,
            "k" => self.k = value(key, raw)?,
            "lth_round" => self.lth_round = Some(value(key, raw)?),
            "prune_rate" => self.prune_rate = value(key, raw)?,
            "weighting" => self.weighting = Weighting::parse(raw)?,
            "seed" => self.seed = value(key, raw)?,
            "alpha" => self.meta.alpha = value(key, raw)?,
            "beta" => self.meta.beta = value(key, raw)?,
            "inner_steps" => self.meta.inner_steps = value(key, raw)?,
            "tasks_per_batch" => self.meta.tasks_per_batch = value(key, raw)?,
            "order" => self.meta.order = Order::parse(raw)?,
            "local_epochs" => self.local_epochs = value(key, raw)?,
            "way" => self.way = value(key, raw)?,
            "shot" => self.shot = value(key, raw)?,
            "query" => self.query = value(key, raw)?,
            "lr" => self.lr = value(key, raw)?,
            "batch_size" => self.batch_size = value(key, raw)?,
            "model" => self.model = ModelKind::parse(raw)?,
            "hidden" => {
                self.hidden = raw
                    .split(',')
                    .map(|s| value(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "filters" => self.filters = value(key, raw)?,
            "family" => self.data.family = raw.to_string(),
            "examples_per_class" => self.data.examples_per_class = value(key, raw)?,
            "shift_spread" => self.data.shift_spread = value(key, raw)?,
            "intra_class" => self.data.intra_class = Some(value(key, raw)?),
            "base_noise" => self.data.base_noise = Some(value(key, raw)?),
            "max_rotation_deg" => self.data.max_rotation_deg = Some(value(key, raw)?),
            "data_dir" => self.data.dir = Some(PathBuf::from(raw)),
            "eval_clients" => self.eval_clients = value(key, raw)?,
            "test_per_class" => self.test_per_class = value(key, raw)?,
            "adapt_alpha" => self.adapt_alpha = value(key, raw)?,
            "adapt_epochs" => self.adapt_epochs = value(key, raw)?,
            other => return Err(FamError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rounds", self.rounds),
            ("n_clients", self.n_clients),
            ("k", self.k),
            ("local_epochs", self.local_epochs),
            ("way", self.way),
            ("shot", self.shot),
            ("query", self.query),
            ("batch_size", self.batch_size),
            ("filters", self.filters),
            ("examples_per_class", self.data.examples_per_class),
            ("eval_clients", self.eval_clients),
            ("test_per_class", self.test_per_class),
            ("adapt_epochs", self.adapt_epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(FamError::Config(format!("`{name}` must be positive")));
            }
        }
        if self.k > self.n_clients {
            return Err(FamError::Config(format!(
                "k = {} exceeds n_clients = {}",
                self.k, self.n_clients
            )));
        }
        if self.way < 2 {
            return Err(FamError::Config("`way` must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.prune_rate) {
            return Err(FamError::Config(format!("prune_rate {} outside [0, 1]", self.prune_rate)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(FamError::Config(format!("lr must be finite and ≥ 0, got {}", self.lr)));
        }
        if !(self.adapt_alpha.is_finite() && self.adapt_alpha > 0.0) {
            return Err(FamError::Config(format!("adapt_alpha must be > 0, got {}", self.adapt_alpha)));
        }
        if !(self.data.shift_spread.is_finite() && self.data.shift_spread >= 0.0) {
            return Err(FamError::Config("shift_spread must be finite and ≥ 0".into()));
        }
        for (name, v) in [
            ("intra_class", self.data.intra_class),
            ("base_noise", self.data.base_noise),
            ("max_rotation_deg", self.data.max_rotation_deg),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(FamError::Config(format!("{name} must be finite and ≥ 0, got {v}")));
                }
            }
        }
        self.meta.validate()
    }

    /// Server step at which pruning happens, if this mode prunes at all.
    pub fn effective_lth_round(&self) -> Option<usize> {
        match self.mode {
            Mode::Fam => Some(self.lth_round.unwrap_or(self.rounds / 2)),
            Mode::Meta | Mode::Vanilla => None,
        }
    }

    pub fn model_spec(&self, input_shape: &[usize], num_classes: usize) -> Result<ModelSpec> {
        match self.model {
            ModelKind::Mlp => ModelSpec::mlp(input_shape, &self.hidden, num_classes),
            ModelKind::Conv4 => ModelSpec::conv4(input_shape, self.filters, num_classes),
        }
    }

    pub fn client_config(&self) -> ClientConfig {
        ClientConfig {
            meta: self.meta.clone(),
            local_epochs: self.local_epochs,
            way: self.way,
            shot: self.shot,
            query: self.query,
        }
    }

    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            local_epochs: self.local_epochs,
        }
    }

    /// Evaluation grid settings; `trials` and `seed` vary per invocation.
    pub fn experiment_config(&self, trials: usize, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            trials,
            seed,
            way: self.way,
            test_per_class: self.test_per_class,
            alpha: self.adapt_alpha,
            epochs: self.adapt_epochs,
            ..ExperimentConfig::default()
        }
    }

    /// Canonical text form; [`RunConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        put("mode", self.mode.as_str().into());
        put("rounds", self.rounds.to_string());
        put("n_clients", self.n_clients.to_string());
        put("k", self.k.to_string());
        if let Some(r) = self.lth_round {
            put("lth_round", r.to_string());
        }
        put("prune_rate", self.prune_rate.to_string());
        put("weighting", self.weighting.as_str().into());
        put("seed", self.seed.to_string());
        put("alpha", self.meta.alpha.to_string());
        put("beta", self.meta.beta.to_string());
        put("inner_steps", self.meta.inner_steps.to_string());
        put("tasks_per_batch", self.meta.tasks_per_batch.to_string());
        put("order", self.meta.order.as_str().into());
        put("local_epochs", self.local_epochs.to_string());
        put("way", self.way.to_string());
        put("shot", self.shot.to_string());
        put("query", self.query.to_string());
        put("lr", self.lr.to_string());
        put("batch_size", self.batch_size.to_string());
        put("model", self.model.as_str().into());
        put(
            "hidden",
            self.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        put("filters", self.filters.to_string());
        put("family", self.data.family.clone());
        put("examples_per_class", self.data.examples_per_class.to_string());
        put("shift_spread", self.data.shift_spread.to_string());
        for (name, v) in [
            ("intra_class", self.data.intra_class),
            ("base_noise", self.data.base_noise),
            ("max_rotation_deg", self.data.max_rotation_deg),
        ] {
            if let Some(v) = v {
                put(name, v.to_string());
            }
        }
        if let Some(d) = &self.data.dir {
            put("data_dir", d.display().to_string());
        }
        put("eval_clients", self.eval_clients.to_string());
        put("test_per_class", self.test_per_class.to_string());
        put("adapt_alpha", self.adapt_alpha.to_string());
        put("adapt_epochs", self.adapt_epochs.to_string());
        s
    }
}
