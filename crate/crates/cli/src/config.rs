//! Line-based `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bicd::objective::LossWeights;
use bicd::synthdata::SynthConfig;
use bicd::trainer::TrainConfig;
use bicd::{BicdError, Result};

/// File name of the resolved-config snapshot written next to every output.
pub const SNAPSHOT_NAME: &str = "config.resolved";

/// Kernel shape for the benchmark: `cin:cout:kernel:size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub size: usize,
}

impl FromStr for BenchShape {
    type Err = BicdError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(':')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| BicdError::Config(format!("bench shape `{s}` is not cin:cout:kernel:size")))?;
        match parts[..] {
            [cin, cout, kernel, size] if cin > 0 && cout > 0 && kernel > 0 && size >= kernel => Ok(BenchShape {
                cin,
                cout,
                kernel,
                size,
            }),
            _ => Err(BicdError::Config(format!("bench shape `{s}` is not cin:cout:kernel:size"))),
        }
    }
}

impl std::fmt::Display for BenchShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}:{}", self.cin, self.cout, self.kernel, self.size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub base_lr: f64,
    pub aux_lr: f64,
    pub warmup_frac: f64,
    pub hflip: bool,
    pub checkpoint_every_epoch: bool,
    pub image_size: usize,
    /// Training pairs to synthesize when no `train_dir` is given.
    pub pairs: usize,
    /// Validation pairs to synthesize when no `val_dir` is given.
    pub val_pairs: usize,
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    /// Pair directory used by `eval`, `infoplane` and `errormap`.
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Directory scanned for `epoch_*.ckpt` by `infoplane`.
    pub checkpoint_dir: Option<PathBuf>,
    pub probe_layer: String,
    pub n_bins: usize,
    pub seeds: Vec<u64>,
    pub bench_iters: usize,
    pub bench_shapes: Vec<BenchShape>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            seed: 0,
            epochs: train.epochs,
            batch_size: train.batch_size,
            beta1: train.weights.beta1,
            beta2: train.weights.beta2,
            base_lr: train.base_lr,
            aux_lr: train.aux_lr,
            warmup_frac: train.warmup_frac,
            hflip: train.hflip,
            checkpoint_every_epoch: false,
            image_size: 64,
            pairs: 200,
            val_pairs: 50,
            train_dir: None,
            val_dir: None,
            data_dir: None,
            checkpoint: None,
            checkpoint_dir: None,
            probe_layer: "stage2".into(),
            n_bins: 30,
            seeds: vec![0, 1, 2],
            bench_iters: 50,
            bench_shapes: vec![
                BenchShape { cin: 64, cout: 64, kernel: 3, size: 64 },
                BenchShape { cin: 16, cout: 16, kernel: 3, size: 64 },
                BenchShape { cin: 128, cout: 128, kernel: 3, size: 32 },
                BenchShape { cin: 1, cout: 1, kernel: 1, size: 64 },
            ],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| BicdError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Set one key. Unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "aux_lr" => self.aux_lr = parse(key, value)?,
            "warmup_frac" => self.warmup_frac = parse(key, value)?,
            "hflip" => self.hflip = parse(key, value)?,
            "checkpoint_every_epoch" => self.checkpoint_every_epoch = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "pairs" => self.pairs = parse(key, value)?,
            "val_pairs" => self.val_pairs = parse(key, value)?,
            "train_dir" => self.train_dir = parse_path(value),
            "val_dir" => self.val_dir = parse_path(value),
            "data_dir" => self.data_dir = parse_path(value),
            "checkpoint" => self.checkpoint = parse_path(value),
            "checkpoint_dir" => self.checkpoint_dir = parse_path(value),
            "probe_layer" => self.probe_layer = value.to_string(),
            "n_bins" => self.n_bins = parse(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "bench_iters" => self.bench_iters = parse(key, value)?,
            "bench_shapes" => self.bench_shapes = parse_list(key, value)?,
            other => return Err(BicdError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Apply every `key = value` line of `text`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                BicdError::Config(format!("{}:{}: expected `key = value`", origin.display(), i + 1))
            })?;
            self.apply(key, value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BicdError::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        LossWeights::new(self.beta1, self.beta2)?;
        let bad = |m: &str| Err(BicdError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.image_size < 16 || !self.image_size.is_multiple_of(4) {
            return bad("image_size must be a multiple of 4 and at least 16");
        }
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed");
        }
        if self.bench_iters == 0 {
            return bad("bench_iters must be positive");
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn snapshot(&self) -> String {
        let rows: [(&str, String); 23] = [
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("aux_lr", self.aux_lr.to_string()),
            ("warmup_frac", self.warmup_frac.to_string()),
            ("hflip", self.hflip.to_string()),
            ("checkpoint_every_epoch", self.checkpoint_every_epoch.to_string()),
            ("image_size", self.image_size.to_string()),
            ("pairs", self.pairs.to_string()),
            ("val_pairs", self.val_pairs.to_string()),
            ("train_dir", show_path(&self.train_dir)),
            ("val_dir", show_path(&self.val_dir)),
            ("data_dir", show_path(&self.data_dir)),
            ("checkpoint", show_path(&self.checkpoint)),
            ("checkpoint_dir", show_path(&self.checkpoint_dir)),
            ("probe_layer", self.probe_layer.clone()),
            ("n_bins", self.n_bins.to_string()),
            ("seeds", join(&self.seeds)),
            ("bench_iters", self.bench_iters.to_string()),
            ("bench_shapes", join(&self.bench_shapes)),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        let path = dir.join(SNAPSHOT_NAME);
        std::fs::write(&path, self.snapshot()).map_err(|e| BicdError::io(&path, e))
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.beta1, self.beta2)
    }

    pub fn train_config(&self, out_dir: Option<PathBuf>) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            aux_lr: self.aux_lr,
            warmup_frac: self.warmup_frac,
            weights: self.weights()?,
            seed: self.seed,
            hflip: self.hflip,
            out_dir,
            checkpoint_every_epoch: self.checkpoint_every_epoch,
            ..TrainConfig::default()
        })
    }

    pub fn synth_config(&self, n_pairs: usize) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            height: self.image_size,
            width: self.image_size,
            n_pairs,
            ..SynthConfig::default()
        }
    }
}
