//! Command-line drivers for synthesis, training, evaluation, diagnostics and
//! benchmarking.

pub mod bench;
pub mod config;
pub mod errormap;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bicd::auxobj::AuxHeads;
use bicd::miplane::{trace_info_plane, write_info_csv, BinningConfig};
use bicd::model::ChangeNet;
use bicd::netpbm;
use bicd::objective::{f1_score, Confusion, LossWeights};
use bicd::synthdata::{generate, load_named_pair_dir, pair_stem, save_pair_dir, stack_batch, ChangePair};
use bicd::threads::pool_from_env;
use bicd::trainer::{evaluate, model_stats, run_ablation, train, Checkpoint};
use bicd::{BicdError, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use crate::bench::{bench_csv, bench_shape};
use crate::config::RunConfig;
use crate::errormap::error_map;

#[derive(Debug, Parser)]
#[command(name = "bicd", version, about = "Binarized change detection toolkit")]
pub struct Cli {
    /// `key = value` config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "bicd-out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct DataArgs {
    /// Pair directory with `t0/`, `t1/` and `mask/`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub val_pairs: Option<usize>,
}

#[derive(Debug, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub train_dir: Option<PathBuf>,
    #[arg(long)]
    pub val_dir: Option<PathBuf>,
    /// Also keep one checkpoint per epoch.
    #[arg(long)]
    pub every_epoch: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic pair directory.
    Synth(DataArgs),
    /// Train a model; writes checkpoints, metrics.csv and report.txt.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// F1 and confusion counts of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Information-plane coordinates of every `epoch_*.ckpt` in a directory.
    Infoplane {
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        #[arg(long)]
        probe_layer: Option<String>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Parameter and operation counts.
    Stats {
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Packed binary convolution against the naive real convolution.
    Bench {
        #[arg(long)]
        iters: Option<usize>,
        /// Comma-separated `cin:cout:kernel:size` list.
        #[arg(long)]
        shapes: Option<String>,
    },
    /// Colour-coded error maps: TP white, FP red, FN blue, TN black.
    Errormap {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train with and without the separability terms over several seeds.
    Ablate {
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: Option<String>,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
}

fn set<T: ToString>(cfg: &mut RunConfig, key: &str, value: &Option<T>) -> Result<()> {
    match value {
        Some(v) => cfg.apply(key, &v.to_string()),
        None => Ok(()),
    }
}

fn set_path(cfg: &mut RunConfig, key: &str, value: &Option<PathBuf>) -> Result<()> {
    set(cfg, key, &value.as_ref().map(|p| p.display().to_string()))
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        set_path(cfg, "data_dir", &self.data)?;
        set(cfg, "image_size", &self.image_size)?;
        set(cfg, "pairs", &self.pairs)?;
        set(cfg, "val_pairs", &self.val_pairs)
    }
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        set(cfg, "epochs", &self.epochs)?;
        set(cfg, "batch_size", &self.batch_size)?;
        set(cfg, "beta1", &self.beta1)?;
        set(cfg, "beta2", &self.beta2)?;
        set_path(cfg, "train_dir", &self.train_dir)?;
        set_path(cfg, "val_dir", &self.val_dir)?;
        if self.every_epoch {
            cfg.checkpoint_every_epoch = true;
        }
        Ok(())
    }
}

impl Cli {
    /// Defaults, then the config file, then `--set`, then typed flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| BicdError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.apply(k, v)?;
        }
        match &self.command {
            Command::Synth(d) => d.apply(&mut cfg)?,
            Command::Train { data, train } => {
                data.apply(&mut cfg)?;
                train.apply(&mut cfg)?;
            }
            Command::Eval { checkpoint, data } | Command::Errormap { checkpoint, data } => {
                set_path(&mut cfg, "checkpoint", checkpoint)?;
                data.apply(&mut cfg)?;
            }
            Command::Infoplane {
                checkpoint_dir,
                probe_layer,
                data,
            } => {
                set_path(&mut cfg, "checkpoint_dir", checkpoint_dir)?;
                set(&mut cfg, "probe_layer", probe_layer)?;
                data.apply(&mut cfg)?;
            }
            Command::Stats { image_size } => set(&mut cfg, "image_size", image_size)?,
            Command::Bench { iters, shapes } => {
                set(&mut cfg, "bench_iters", iters)?;
                set(&mut cfg, "bench_shapes", shapes)?;
            }
            Command::Ablate { seeds, data, train } => {
                set(&mut cfg, "seeds", seeds)?;
                data.apply(&mut cfg)?;
                train.apply(&mut cfg)?;
            }
        }
        set(&mut cfg, "seed", &self.seed)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Machine-parsable one-line error.
pub fn error_line(err: &BicdError) -> String {
    let msg = err.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    format!("error: kind={} msg=\"{msg}\"", err.kind())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| BicdError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| BicdError::io(path, e))
}

/// Synthetic train and validation splits drawn from one generator run.
pub fn synthetic_splits(cfg: &RunConfig) -> Result<(Vec<ChangePair>, Vec<ChangePair>)> {
    let mut all = generate(&cfg.synth_config(cfg.pairs + cfg.val_pairs))?;
    let val = all.split_off(cfg.pairs);
    Ok((all, val))
}

fn training_data(cfg: &RunConfig) -> Result<(Vec<ChangePair>, Vec<ChangePair>)> {
    match (&cfg.train_dir, &cfg.val_dir) {
        (Some(t), Some(v)) => Ok((
            bicd::synthdata::load_pair_dir(t)?,
            bicd::synthdata::load_pair_dir(v)?,
        )),
        (None, None) => synthetic_splits(cfg),
        _ => Err(BicdError::Config("train_dir and val_dir must be given together".into())),
    }
}

/// Named evaluation pairs: `data_dir` when set, otherwise the synthetic
/// validation split that `train` would use.
fn eval_data(cfg: &RunConfig) -> Result<Vec<(String, ChangePair)>> {
    match &cfg.data_dir {
        Some(dir) => load_named_pair_dir(dir),
        None => Ok(synthetic_splits(cfg)?
            .1
            .into_iter()
            .enumerate()
            .map(|(i, p)| (pair_stem(cfg.pairs + i), p))
            .collect()),
    }
}

fn load_net(cfg: &RunConfig) -> Result<ChangeNet<f32>> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| BicdError::Config("a checkpoint is required".into()))?;
    let mut net = ChangeNet::new(0);
    Checkpoint::load(path)?.restore_net(&mut net)?;
    Ok(net)
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let pairs = generate(&cfg.synth_config(cfg.pairs))?;
    save_pair_dir(out, &pairs)?;
    info!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train_set, val_set) = training_data(cfg)?;
    let mut net = ChangeNet::new(cfg.seed);
    let mut aux = AuxHeads::new(cfg.seed.wrapping_add(1));
    let report = train(&cfg.train_config(Some(out.to_path_buf()))?, &train_set, &val_set, &mut net, &mut aux)?;
    let text = format!(
        "best_epoch = {}\nbest_f1 = {}\ninitial_f1 = {}\n",
        report.best_epoch, report.best_f1, report.initial_f1
    );
    write_text(&out.join("report.txt"), &text)?;
    println!("best F1 {:.4} at epoch {}", report.best_f1, report.best_epoch);
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let net = load_net(cfg)?;
    let pairs: Vec<ChangePair> = eval_data(cfg)?.into_iter().map(|(_, p)| p).collect();
    let (c, f1) = evaluate(&net, &pairs, cfg.batch_size)?;
    let text = format!(
        "f1 = {}\ndegenerate = {}\ntp = {}\nfp = {}\nfn = {}\ntn = {}\n",
        f1.value, f1.degenerate, c.tp, c.fp, c.fn_, c.tn
    );
    write_text(&out.join("eval.txt"), &text)?;
    println!("F1 {:.4} over {} pairs", f1.value, pairs.len());
    Ok(())
}

/// Every `epoch_*.ckpt` under `dir`, sorted by name.
pub fn epoch_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| BicdError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("epoch_") && name.ends_with(".ckpt")
        })
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(BicdError::Empty(format!("no epoch_*.ckpt in {}", dir.display())));
    }
    Ok(found)
}

pub fn cmd_infoplane(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dir = cfg
        .checkpoint_dir
        .as_ref()
        .ok_or_else(|| BicdError::Config("checkpoint_dir is required".into()))?;
    let checkpoints = epoch_checkpoints(dir)?;
    let pairs: Vec<ChangePair> = eval_data(cfg)?.into_iter().map(|(_, p)| p).collect();
    let binning = BinningConfig {
        n_bins: cfg.n_bins,
        seed: cfg.seed,
        ..BinningConfig::default()
    };
    let rows = trace_info_plane(&checkpoints, &cfg.probe_layer, &pairs, &binning)?;
    write_info_csv(&rows, &out.join("info_plane.csv"))?;
    println!("{} info-plane rows", rows.len());
    Ok(())
}

pub fn stats_report(cfg: &RunConfig) -> Result<String> {
    let net = ChangeNet::<f32>::new(cfg.seed);
    let stats = model_stats(&net, cfg.image_size, cfg.image_size)?;
    let mut out = format!("input {0}x{0}\nlayer,binary,real_params,latent_params,macs,ops\n", cfg.image_size);
    for l in &stats.layers {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            l.name,
            l.binary,
            l.real_params,
            l.latent_params,
            l.macs,
            l.ops()
        );
    }
    let _ = writeln!(out, "params = {} ({:.6} M)", stats.params, stats.params_m());
    let _ = writeln!(out, "ops = {} ({:.6} G)", stats.ops, stats.ops_g());
    Ok(out)
}

pub fn cmd_stats(cfg: &RunConfig, out: &Path) -> Result<()> {
    let text = stats_report(cfg)?;
    write_text(&out.join("stats.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| BicdError::Config(format!("thread pool: {e}")))?;
    let rows = pool.install(|| {
        cfg.bench_shapes
            .iter()
            .map(|&s| bench_shape(s, cfg.bench_iters, cfg.seed))
            .collect::<Result<Vec<_>>>()
    })?;
    let csv = bench_csv(&rows);
    write_text(&out.join("bench.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn cmd_errormap(cfg: &RunConfig, out: &Path) -> Result<()> {
    let net = load_net(cfg)?;
    let dir = out.join("errormap");
    create_dir(&dir)?;
    let mut total = Confusion::default();
    let mut csv = String::from("stem,tp,fp,fn,tn\n");
    for (stem, pair) in eval_data(cfg)? {
        let (x0, x1, y) = stack_batch(std::slice::from_ref(&pair))?;
        let (img, c) = error_map(&net.infer(&x0, &x1)?, &y)?;
        netpbm::write(&dir.join(format!("{stem}.ppm")), &img)?;
        let _ = writeln!(csv, "{stem},{},{},{},{}", c.tp, c.fp, c.fn_, c.tn);
        total.merge(&c);
    }
    write_text(&out.join("errormap_counts.csv"), &csv)?;
    println!("F1 {:.4}", f1_score(&total).value);
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train_set, val_set) = training_data(cfg)?;
    let with = cfg.weights()?;
    let without = LossWeights::new(cfg.beta1, 0.0)?;
    let rows = run_ablation(&cfg.train_config(None)?, &train_set, &val_set, &[with, without], &cfg.seeds)?;
    let mut csv = String::from("seed,beta2_f1,baseline_f1\n");
    let f1_of = |w: LossWeights, seed: u64| {
        rows.iter()
            .find(|r| r.weights == w && r.seed == seed)
            .map(|r| r.report.best_f1)
            .unwrap_or(f64::NAN)
    };
    for &seed in &cfg.seeds {
        let _ = writeln!(csv, "{seed},{},{}", f1_of(with, seed), f1_of(without, seed));
    }
    let mean = |w| bicd::trainer::mean_best_f1(&rows, w).unwrap_or(f64::NAN);
    let _ = writeln!(csv, "mean,{},{}", mean(with), mean(without));
    write_text(&out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Resolve the configuration, snapshot it and run the command.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve()?;
    let out = cli.out.as_path();
    create_dir(out)?;
    cfg.write_snapshot(out)?;
    pool_from_env()?.install(|| match &cli.command {
        Command::Synth(_) => cmd_synth(&cfg, out),
        Command::Train { .. } => cmd_train(&cfg, out),
        Command::Eval { .. } => cmd_eval(&cfg, out),
        Command::Infoplane { .. } => cmd_infoplane(&cfg, out),
        Command::Stats { .. } => cmd_stats(&cfg, out),
        Command::Errormap { .. } => cmd_errormap(&cfg, out),
        Command::Ablate { .. } => cmd_ablate(&cfg, out),
        Command::Bench { .. } => cmd_bench(&cfg, out),
    })
}
