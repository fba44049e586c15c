//! Joint optimisation of the network and the auxiliary modules.

pub mod adam;
pub mod checkpoint;
pub mod schedule;
pub mod stats;

use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::auxobj::{
    l1_mean, l1_mean_grad, separability_grad, split_by_mask, delta_x, delta_x_in, AuxHeads,
    AuxTape,
};
use crate::error::{BicdError, Result};
use crate::model::{ChangeNet, NetTape, ZGrads};
use crate::objective::{
    f1_score, l2_compression, l2_compression_grad, l_cd, l_cd_grad, total_objective, Confusion,
    LossWeights, F1,
};
use crate::params::Grads;
use crate::synthdata::{stack_batch, ChangePair};
use crate::tensor::{Real, Tensor};

pub use adam::{adam_step, AdamConfig, OptimState, LATENT_CLAMP};
pub use checkpoint::Checkpoint;
pub use schedule::Schedule;
pub use stats::{model_stats, ModelStats};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub aux_lr: f64,
    pub warmup_frac: f64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Seeds shuffling and flip augmentation.
    pub seed: u64,
    pub hflip: bool,
    /// Where metrics and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Also write `epoch_NNN.ckpt` after every epoch.
    pub checkpoint_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 4,
            base_lr: 5e-4,
            aux_lr: 5e-3,
            warmup_frac: 0.05,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            seed: 0,
            hflip: true,
            out_dir: None,
            checkpoint_every_epoch: false,
        }
    }
}

/// Scalar loss terms of one step or averaged over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub l_cd: f64,
    pub l2: f64,
    pub l_noise: f64,
    pub l_interest: f64,
    pub l_recon: f64,
    pub total: f64,
}

impl LossTerms {
    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("l_cd", self.l_cd),
            ("l2", self.l2),
            ("l_noise", self.l_noise),
            ("l_interest", self.l_interest),
            ("l_recon", self.l_recon),
            ("total", self.total),
        ]
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        self.named().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }

    fn add_scaled(&mut self, o: &LossTerms, s: f64) {
        self.l_cd += o.l_cd * s;
        self.l2 += o.l2 * s;
        self.l_noise += o.l_noise * s;
        self.l_interest += o.l_interest * s;
        self.l_recon += o.l_recon * s;
        self.total += o.total * s;
    }
}

/// Gradients of one step for the network and auxiliary parameters.
pub struct StepOutput<T> {
    pub losses: LossTerms,
    pub theta: Grads<T>,
    pub eta: Grads<T>,
    pub logits: Tensor<T>,
}

fn total_with(terms: &LossTerms, w: LossWeights) -> Result<f64> {
    // Non-finite terms are reported by the caller with their name.
    if terms.first_non_finite().is_some() {
        return Ok(f64::NAN);
    }
    total_objective(
        terms.l_cd,
        terms.l2,
        (terms.l_noise, terms.l_interest, terms.l_recon),
        w,
    )
}

/// Forward, loss and backward for one batch. Gradients are those of the
/// weighted total objective.
pub fn train_step<T: Real>(
    net: &ChangeNet<T>,
    aux: &AuxHeads<T>,
    x0: &Tensor<T>,
    x1: &Tensor<T>,
    y: &Tensor<T>,
    w: LossWeights,
) -> Result<StepOutput<T>> {
    w.validate()?;
    let (_, _, h, wd) = x0.nchw()?;
    let mut tape = NetTape::default();
    let (logits, z) = net.forward_full(x0, x1, Some(&mut tape))?;

    let l_cd_v = l_cd(&logits, y)?;
    let g_logits = l_cd_grad(&logits, y)?;
    let l2_v = l2_compression(&z.generated)?;
    let beta1 = T::of(w.beta1);
    let beta2 = T::of(w.beta2);
    let mut z_gen: Vec<Tensor<T>> = l2_compression_grad(&z.generated)?;
    z_gen.iter_mut().for_each(|g| g.scale(beta1));

    let mut eta = Grads::zeros_like(&aux.params);
    let dx_in = delta_x_in(&delta_x(x0, x1)?, y)?;
    let sites = aux.generators.len() as f64;
    let (mut l_noise, mut l_interest) = (0.0, 0.0);
    for (i, module) in aux.generators.iter().enumerate() {
        let mut at = AuxTape::default();
        let aligned = module.align(&aux.params, &z.generated[i], h, wd, Some(&mut at))?;
        let split = split_by_mask(&aligned, y)?;
        let zero = Tensor::zeros_like(&split.z_n);
        l_noise += l1_mean(&split.z_n, &zero)?.as_f64() / sites;
        l_interest += l1_mean(&split.z_in, &dx_in)?.as_f64() / sites;
        if w.beta2 > 0.0 {
            let mut g = separability_grad(&split, y, &dx_in)?;
            g.scale(beta2 / T::of(sites));
            let gz = module.backward(&aux.params, &g, &mut at, &mut eta)?;
            z_gen[i].add_assign(&gz)?;
        }
    }
    let mut l_recon = 0.0;
    let mut z_bb: [Option<Tensor<T>>; 2] = [None, None];
    for (b, x) in [x0, x1].into_iter().enumerate() {
        let mut at = AuxTape::default();
        let aligned = aux.backbone.align(&aux.params, &z.backbone[b], h, wd, Some(&mut at))?;
        l_recon += l1_mean(&aligned, x)?.as_f64() / 2.0;
        if w.beta2 > 0.0 {
            let mut g = l1_mean_grad(&aligned, x)?;
            g.scale(beta2 / T::of(2.0));
            z_bb[b] = Some(aux.backbone.backward(&aux.params, &g, &mut at, &mut eta)?);
        }
    }

    let mut theta = Grads::zeros_like(&net.params);
    let zg = ZGrads {
        generated: z_gen.into_iter().map(Some).collect(),
        backbone: z_bb,
    };
    net.backward_full(&g_logits, &zg, &mut tape, &mut theta)?;

    let mut losses = LossTerms {
        l_cd: l_cd_v.as_f64(),
        l2: l2_v.as_f64(),
        l_noise,
        l_interest,
        l_recon,
        total: 0.0,
    };
    losses.total = total_with(&losses, w)?;
    Ok(StepOutput {
        losses,
        theta,
        eta,
        logits,
    })
}

/// Pooled-pixel confusion and F1 of `net` on `pairs`.
pub fn evaluate<T: Real>(net: &ChangeNet<T>, pairs: &[ChangePair], batch_size: usize) -> Result<(Confusion, F1)> {
    let mut c = Confusion::default();
    for chunk in pairs.chunks(batch_size.max(1)) {
        let (x0, x1, y) = stack_batch(chunk)?;
        let logits = net.infer(&x0.cast(), &x1.cast())?;
        c.merge(&Confusion::from_logits(&logits, &y.cast())?);
    }
    Ok((c, f1_score(&c)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossTerms,
    pub val_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    /// 1-based epoch with the highest validation F1.
    pub best_epoch: usize,
    pub best_f1: f64,
    /// Validation F1 before the first update.
    pub initial_f1: f64,
    pub epochs: Vec<EpochLog>,
}

pub const METRICS_HEADER: &str = "epoch,lr,l_cd,l2,l_noise,l_interest,l_recon,total,val_f1";

pub fn metrics_csv(logs: &[EpochLog]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for e in logs {
        let l = &e.losses;
        out.push_str(&format!(
            "{},{:e},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.6}\n",
            e.epoch, e.lr, l.l_cd, l.l2, l.l_noise, l.l_interest, l.l_recon, l.total, e.val_f1
        ));
    }
    out
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(contents))
        .map_err(|e| BicdError::io(path, e))
}

/// Train `net` and `aux` in place on `train_set`, selecting by F1 on `val_set`.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[ChangePair],
    val_set: &[ChangePair],
    net: &mut ChangeNet<f32>,
    aux: &mut AuxHeads<f32>,
) -> Result<RunReport> {
    if train_set.is_empty() {
        return Err(BicdError::Empty("training set".into()));
    }
    if val_set.is_empty() {
        return Err(BicdError::Empty("validation set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(BicdError::Config("batch_size must be positive".into()));
    }
    cfg.weights.validate()?;
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let mut schedule = Schedule::new(cfg.base_lr, cfg.aux_lr, cfg.epochs, steps_per_epoch)?;
    schedule.warmup_frac = cfg.warmup_frac;
    schedule.validate()?;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| BicdError::io(dir, e))?;
    }

    let mut opt_theta = OptimState::new(&net.params, cfg.adam);
    let mut opt_eta = OptimState::new(&aux.params, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (_, init) = evaluate(net, val_set, cfg.batch_size)?;
    let mut report = RunReport {
        best_epoch: 0,
        best_f1: f64::NEG_INFINITY,
        initial_f1: init.value,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = schedule.theta_lr(step);
        let mut sums = LossTerms::default();
        let mut seen = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<ChangePair> = idx
                .iter()
                .map(|&i| {
                    let flip = cfg.hflip && rng.gen_bool(0.5);
                    if flip {
                        train_set[i].hflip()
                    } else {
                        train_set[i].clone()
                    }
                })
                .collect();
            let (x0, x1, y) = stack_batch(&batch)?;
            let out = train_step(net, aux, &x0, &x1, &y, cfg.weights)?;
            if let Some(term) = out.losses.first_non_finite() {
                return Err(BicdError::NonFiniteLoss { term, epoch, step: b });
            }
            if !out.theta.all_finite() || !out.eta.all_finite() {
                return Err(BicdError::NonFiniteLoss {
                    term: "gradient",
                    epoch,
                    step: b,
                });
            }
            adam_step(&mut net.params, &out.theta, &mut opt_theta, schedule.theta_lr(step))?;
            adam_step(&mut aux.params, &out.eta, &mut opt_eta, schedule.eta_lr(step))?;
            sums.add_scaled(&out.losses, idx.len() as f64);
            seen += idx.len();
            step += 1;
        }
        let mut mean = LossTerms::default();
        mean.add_scaled(&sums, 1.0 / seen as f64);
        let (_, f1) = evaluate(net, val_set, cfg.batch_size)?;
        let log = EpochLog {
            epoch,
            lr,
            losses: mean,
            val_f1: f1.value,
        };
        info!(
            "epoch {epoch}/{}: total {:.5} l_cd {:.5} val_f1 {:.4}",
            cfg.epochs, mean.total, mean.l_cd, f1.value
        );
        report.epochs.push(log);
        let improved = f1.value > report.best_f1;
        if improved {
            report.best_f1 = f1.value;
            report.best_epoch = epoch;
        }
        if let Some(dir) = &cfg.out_dir {
            let meta = [
                ("epoch", epoch as f64),
                ("val_f1", f1.value),
                ("seed", cfg.seed as f64),
            ];
            let ckpt = Checkpoint::from_parts(net, Some(aux), &meta);
            let bytes = ckpt.to_bytes();
            write_file(&dir.join("last.ckpt"), &bytes)?;
            if improved {
                write_file(&dir.join("best.ckpt"), &bytes)?;
            }
            if cfg.checkpoint_every_epoch {
                write_file(&dir.join(format!("epoch_{epoch:03}.ckpt")), &bytes)?;
            }
            write_file(&dir.join("metrics.csv"), metrics_csv(&report.epochs).as_bytes())?;
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub weights: LossWeights,
    pub report: RunReport,
}

/// Train one fresh model per `(weights, seed)` combination.
pub fn run_ablation(
    base: &TrainConfig,
    train_set: &[ChangePair],
    val_set: &[ChangePair],
    settings: &[LossWeights],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &weights in settings {
        for &seed in seeds {
            let cfg = TrainConfig {
                weights,
                seed,
                out_dir: None,
                ..base.clone()
            };
            let mut net = ChangeNet::new(seed);
            let mut aux = AuxHeads::new(seed.wrapping_add(1));
            let report = train(&cfg, train_set, val_set, &mut net, &mut aux)?;
            info!(
                "ablation beta1={} beta2={} seed={seed}: best F1 {:.4} at epoch {}",
                weights.beta1, weights.beta2, report.best_f1, report.best_epoch
            );
            rows.push(AblationRow {
                seed,
                weights,
                report,
            });
        }
    }
    Ok(rows)
}

/// Mean best-epoch F1 of the rows trained with `weights`.
pub fn mean_best_f1(rows: &[AblationRow], weights: LossWeights) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.weights == weights)
        .map(|r| r.report.best_f1)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
