//! Command-line driver: training, personalization, evaluation tables,
//! message inspection and dataset export.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use fam_core::eval::{compute_metrics, run_experiment_table, Adapter, Averaging, ExperimentTable};
use fam_core::federation::{build_clients, run_federated, save_log, Mode, RunConfig};
use fam_core::model::{read_checkpoint, write_checkpoint, Model, ModelSpec, ParameterSet};
use fam_core::personalization::{fine_tune, personalize, predict_query, PersonalizationConfig};
use fam_core::rng::derive_seed;
use fam_core::sparsity::PruneMask;
use fam_core::tasks::{sample_episode, save_directory, ClientDataset};
use fam_core::wire::{
    decode_mask, dense_payload_len, mask_payload_len, sparse_payload_len, PayloadKind, WireMessage, HEADER_LEN,
    SERVER_ID,
};

#[derive(Parser, Debug)]
#[command(name = "fam", version, about = "Federated meta-learning with lottery-ticket pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AdapterArg {
    Grow,
    Finetune,
    None,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the federated protocol and write the log, checkpoint and messages.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set rounds=10`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Skip the per-round broadcast files.
        #[arg(long)]
        no_messages: bool,
    },
    /// Adapt the trained model to one held-out client and save it.
    Personalize {
        #[arg(long)]
        run: PathBuf,
        /// Index among the held-out evaluation clients.
        #[arg(long, default_value_t = 0)]
        client: usize,
        #[arg(long, default_value_t = 5)]
        episodes: usize,
        #[arg(long, default_value_t = 5)]
        shot: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        adapter: Option<AdapterArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on query episodes of the held-out clients.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the run's final checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Restrict to one held-out client.
        #[arg(long)]
        client: Option<usize>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "weighted")]
        averaging: String,
    },
    /// Zero-shot and personalized metrics over the episode/shot grid.
    Table {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        adapter: Option<AdapterArg>,
        /// Also print the fixed-width table to stdout.
        #[arg(long)]
        text: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the header and payload size of a message file.
    WireDump { file: PathBuf },
    /// Write the synthetic client datasets as raster directories.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            overrides,
            out,
            no_messages,
        } => train(&load_config(&config, &overrides)?, &out, !no_messages),
        Command::Personalize {
            run,
            client,
            episodes,
            shot,
            seed,
            adapter,
            out,
        } => personalize_cmd(&run, client, episodes, shot, seed, adapter, &out),
        Command::Eval {
            run,
            checkpoint,
            client,
            episodes,
            seed,
            averaging,
        } => eval_cmd(&run, checkpoint.as_deref(), client, episodes, seed, &averaging),
        Command::Table {
            run,
            trials,
            seed,
            adapter,
            text,
            out,
        } => table_cmd(&run, trials, seed, adapter, text, out.as_deref()),
        Command::WireDump { file } => wire_dump(&file),
        Command::GenData { config, overrides, out } => gen_data(&load_config(&config, &overrides)?, &out),
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = RunConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!("override `{o}` is not KEY=VALUE");
        };
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(cfg: &RunConfig, out: &Path, messages: bool) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let clients = build_clients(cfg, 0)?;
    let output = run_federated(cfg, &clients, |ev| {
        if messages {
            ev.broadcast_msg.write_file(&out.join(format!("round_{}.msg", ev.round)))?;
        }
        if let Some(m) = ev.mask_msg {
            m.write_file(&out.join("mask.msg"))?;
        }
        Ok(())
    })?;
    fs::write(out.join("config.cfg"), cfg.to_text())?;
    save_log(&output.log, &out.join("log.csv"))?;
    write_checkpoint(BufWriter::new(File::create(out.join("final.ckpt"))?), &output.spec, &output.params)?;

    let traffic: Vec<_> = output.log.iter().map(|r| r.traffic()).collect();
    let acc = fam_core::wire::account(&traffic);
    println!("model: {}", output.spec.describe());
    println!("rounds: {}", output.log.len());
    if let Some(last) = output.log.last() {
        println!("final mean query loss: {:.4}", last.mean_query_loss);
        println!("final sparsity: {:.4}", last.sparsity);
    }
    println!(
        "bytes up/down: {}/{} (all-dense {}; reduction {:.2}%)",
        acc.total_up,
        acc.total_down,
        acc.dense_total,
        100.0 * acc.reduction_ratio
    );
    Ok(())
}

struct LoadedRun {
    cfg: RunConfig,
    model: Model,
    params: ParameterSet,
    mask: Option<PruneMask>,
    eval_clients: Vec<ClientDataset>,
}

fn load_run(dir: &Path, checkpoint: Option<&Path>) -> Result<LoadedRun> {
    let cfg_path = dir.join("config.cfg");
    let text = fs::read_to_string(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
    let cfg = RunConfig::parse(&text)?;
    let mut clients = build_clients(&cfg, cfg.eval_clients)?;
    let eval_clients = clients.split_off(cfg.n_clients);
    let num_classes = match cfg.mode {
        Mode::Vanilla => clients[0].num_classes(),
        Mode::Fam | Mode::Meta => cfg.way,
    };
    let spec: ModelSpec = cfg.model_spec(&clients[0].input_shape, num_classes)?;
    let ckpt_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| dir.join("final.ckpt"));
    let file = File::open(&ckpt_path).with_context(|| format!("opening {}", ckpt_path.display()))?;
    let params = read_checkpoint(BufReader::new(file), Some(&spec))
        .with_context(|| format!("reading {}", ckpt_path.display()))?
        .params;
    let mask_path = dir.join("mask.msg");
    let mask = if mask_path.exists() {
        Some(decode_mask(&WireMessage::read_file(&mask_path)?, &params)?)
    } else {
        None
    };
    Ok(LoadedRun {
        cfg,
        model: Model::new(spec)?,
        params,
        mask,
        eval_clients,
    })
}

fn choose_adapter<'a>(run: &'a LoadedRun, arg: Option<AdapterArg>) -> Result<Adapter<'a>> {
    let arg = arg.unwrap_or(match run.cfg.mode {
        Mode::Fam => AdapterArg::Grow,
        Mode::Meta => AdapterArg::Finetune,
        Mode::Vanilla => AdapterArg::None,
    });
    Ok(match arg {
        AdapterArg::Grow => match &run.mask {
            Some(m) => Adapter::Grow(m),
            None => bail!("grow adaptation needs a mask, and this run has none"),
        },
        AdapterArg::Finetune => Adapter::FineTune,
        AdapterArg::None => Adapter::None,
    })
}

fn eval_client(run: &LoadedRun, index: usize) -> Result<&ClientDataset> {
    run.eval_clients.get(index).with_context(|| {
        format!(
            "client {index} out of range: the run has {} evaluation clients",
            run.eval_clients.len()
        )
    })
}

fn personalize_cmd(
    dir: &Path,
    client: usize,
    episodes: usize,
    shot: usize,
    seed: u64,
    adapter: Option<AdapterArg>,
    out: &Path,
) -> Result<()> {
    let run = load_run(dir, None)?;
    let ds = eval_client(&run, client)?;
    let (adapt_pool, _) = ds.split(run.cfg.test_per_class)?;
    let eps = (0..episodes)
        .map(|e| sample_episode(&adapt_pool, run.cfg.way, shot, 1, derive_seed(seed, &[e as u64])))
        .collect::<fam_core::Result<Vec<_>>>()?;
    let pcfg = PersonalizationConfig {
        alpha: run.cfg.adapt_alpha,
        epochs: run.cfg.adapt_epochs,
        episodes,
        shot,
    };
    let adapted = match choose_adapter(&run, adapter)? {
        Adapter::Grow(mask) => personalize(&run.model, &run.params, mask, &eps, &pcfg)?,
        Adapter::FineTune => fine_tune(&run.model, &run.params, &eps, &pcfg)?,
        Adapter::None => run.params.clone(),
    };
    write_checkpoint(BufWriter::new(File::create(out)?), run.model.spec(), &adapted)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn eval_cmd(
    dir: &Path,
    checkpoint: Option<&Path>,
    client: Option<usize>,
    episodes: usize,
    seed: u64,
    averaging: &str,
) -> Result<()> {
    let averaging = Averaging::parse(averaging)?;
    let run = load_run(dir, checkpoint)?;
    let indices: Vec<usize> = match client {
        Some(i) => vec![i],
        None => (0..run.eval_clients.len()).collect(),
    };
    let query = run.cfg.query.min(run.cfg.test_per_class.saturating_sub(1)).max(1);
    let mut eps = Vec::new();
    for &i in &indices {
        let (_, test_pool) = eval_client(&run, i)?.split(run.cfg.test_per_class)?;
        for e in 0..episodes {
            eps.push(sample_episode(
                &test_pool,
                run.cfg.way,
                1,
                query,
                derive_seed(seed, &[i as u64, e as u64]),
            )?);
        }
    }
    let preds: Vec<usize> = eps
        .iter()
        .map(|ep| predict_query(&run.model, &run.params, ep))
        .collect::<fam_core::Result<Vec<_>>>()?
        .concat();
    let labels: Vec<usize> = eps.iter().flat_map(|ep| ep.query.labels.iter().copied()).collect();
    let report = compute_metrics(&preds, &labels, run.cfg.way, averaging)?;
    println!("accuracy,precision,recall,f1,n_examples");
    println!(
        "{},{},{},{},{}",
        report.accuracy, report.precision, report.recall, report.f1, report.n_examples
    );
    Ok(())
}

fn table_cmd(
    dir: &Path,
    trials: usize,
    seed: u64,
    adapter: Option<AdapterArg>,
    text: bool,
    out: Option<&Path>,
) -> Result<()> {
    let run = load_run(dir, None)?;
    let adapter = choose_adapter(&run, adapter)?;
    let table: ExperimentTable = run_experiment_table(
        &run.model,
        &run.params,
        adapter,
        &run.eval_clients,
        &run.cfg.experiment_config(trials, seed),
    )?;
    let csv = table.to_csv()?;
    match out {
        Some(path) => fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    if text {
        print!("{}", table.to_text());
        println!("trials where the row's accuracy is strictly above column's:");
        let n = table.rows.len();
        println!("   {}", (1..=n).map(|c| format!("{c:>4}")).collect::<String>());
        for r in 0..n {
            let wins: String = (0..n).map(|c| format!("{:>4}", table.strictly_better(c, r))).collect();
            println!("{:>3}{wins}", r + 1);
        }
    }
    Ok(())
}

fn wire_dump(path: &Path) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let msg = WireMessage::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    let env = msg.header.envelope;
    let n = msg.element_count()?;
    let (unit, expected) = match msg.header.kind {
        PayloadKind::Dense => ("values", dense_payload_len(n)),
        PayloadKind::Sparse => ("values", sparse_payload_len(n)),
        PayloadKind::Mask => ("bits", mask_payload_len(n)),
    };
    let sender = if env.sender == SERVER_ID {
        "server".to_string()
    } else {
        format!("client {}", env.sender)
    };
    println!("round: {}", env.round);
    println!("flag: {}", env.flag);
    println!("sender: {sender}");
    println!("kind: {}", msg.header.kind.as_str());
    println!("{unit}: {n}");
    println!("payload_bytes: {}", msg.payload.len());
    println!("expected_payload_bytes: {expected}");
    println!("total_bytes: {}", HEADER_LEN + msg.payload.len());
    if expected != msg.payload.len() {
        bail!("payload size {} disagrees with the codec ({expected})", msg.payload.len());
    }
    Ok(())
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let clients = build_clients(cfg, cfg.eval_clients)?;
    for ds in &clients {
        let dir = out.join(format!("client_{:03}", ds.client_id));
        save_directory(ds, &dir).with_context(|| format!("writing {}", dir.display()))?;
    }
    println!("wrote {} clients to {}", clients.len(), out.display());
    Ok(())
}
