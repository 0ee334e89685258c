//! Training loop, evaluation, checkpoints and gradient checking.

mod checkpoint;
mod grad_check;
mod optimizer;

pub use checkpoint::Checkpoint;
pub use grad_check::{grad_check, quadratic_self_test, GradCheckConfig, GradCheckReport, TensorReport};
pub use optimizer::{cosine_lr, AdamW, BETA1, BETA2, EPS};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datagen::DatasetManifest;
use crate::embedding::ModulatedEmbedding;
use crate::error::{Error, Result};
use crate::features::{Branch, ModelConfig};
use crate::imaging::{layout_simulate, polar_transform, semantic_augment, AugmentConfig, Image, View};
use crate::losses::{LossBreakdown, LossConfig};
use crate::model::{forward_branch, loss_and_grads, ModelParams, Objective, TrainingBatch};
use crate::retrieval::{distance_matrix, Recalls};
use crate::rng;

pub const METRICS_HEADER: &str = "step,triplet,cf_g,cf_a,total,lr";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps; the schedule spans the capped total.
    pub max_steps: Option<usize>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub alpha: f64,
    pub beta_ground: f64,
    pub beta_aerial: f64,
    pub cf_enabled: bool,
    pub use_polar_transform: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        TrainConfig {
            batch_size: 32,
            epochs: 200,
            max_steps: None,
            learning_rate: 1e-4,
            weight_decay: 0.03,
            schedule: Schedule::Cosine,
            alpha: loss.alpha,
            beta_ground: loss.beta_ground,
            beta_aerial: loss.beta_aerial,
            cf_enabled: loss.cf_enabled,
            use_polar_transform: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig { alpha: self.alpha, beta_ground: self.beta_ground, beta_aerial: self.beta_aerial, cf_enabled: self.cf_enabled }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss().validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 || self.max_steps == Some(0) {
            return Err(Error::Config("epochs and max_steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate must be positive and weight_decay nonnegative".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset: usize) -> usize {
        dataset / self.batch_size
    }

    pub fn total_steps(&self, dataset: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(dataset);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Runs `f` on a local pool: one thread when `deterministic`, otherwise
/// `GEODTR_THREADS` threads if set, else the rayon default. Results do not
/// depend on the thread count; this only bounds resource use.
pub fn with_pool<T: Send>(deterministic: bool, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if deterministic {
        builder = builder.num_threads(1);
    } else if let Ok(v) = std::env::var("GEODTR_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("GEODTR_THREADS must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// One `(aerial, ground)` pair as stored: square aerial and ground panorama.
pub type Pair = (Image, Image);

/// The image fed to the aerial branch.
pub fn aerial_input(aerial: &Image, model: &ModelConfig, use_polar: bool) -> Result<Image> {
    if use_polar {
        let (h, w) = model.aerial_size;
        polar_transform(aerial, h, w)
    } else {
        Ok(aerial.clone())
    }
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_IMAGINARY: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

/// Builds the augmented batch for `(epoch, batch)` from the listed pair indices.
/// Every random draw comes from a stream keyed by `(seed, epoch, batch, item)`.
pub fn prepare_batch(
    cfg: &RunConfig,
    pairs: &[Pair],
    indices: &[usize],
    epoch: usize,
    batch: usize,
) -> Result<TrainingBatch> {
    let seed = cfg.train.seed;
    let (e, b) = (epoch as u64, batch as u64);
    let items: Vec<(Image, Image)> = indices
        .par_iter()
        .enumerate()
        .map(|(i, &idx)| {
            let (aerial, ground) = &pairs[idx];
            let base = rng::derive_seed(seed, &[STREAM_AUGMENT, cfg.augment.seed, e, b, i as u64]);
            let (a, g) = augment_pair(&cfg.augment, aerial, ground, base)?;
            Ok((g, aerial_input(&a, &cfg.model, cfg.train.use_polar_transform)?))
        })
        .collect::<Result<_>>()?;
    let (ground, aerial): (Vec<_>, Vec<_>) = items.into_iter().unzip();
    let dropout_seeds = (0..indices.len())
        .map(|i| {
            let s = |v: u64| rng::derive_seed(seed, &[STREAM_DROPOUT, e, b, i as u64, v]);
            [s(0), s(1)]
        })
        .collect();
    let mut out = TrainingBatch { ground, aerial, imaginary_ground: vec![], imaginary_aerial: vec![], dropout_seeds: Some(dropout_seeds) };
    if cfg.train.cf_enabled {
        out.sample_imaginary(&cfg.model, rng::derive_seed(seed, &[STREAM_IMAGINARY, e, b]));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

pub fn metrics_csv(log: &[StepRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in log {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.loss.triplet, r.loss.cf_ground, r.loss.cf_aerial, r.loss.total(), r.lr);
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
    /// Validation recalls after each epoch, when a validation set was given.
    pub val_history: Vec<Recalls>,
}

impl TrainRun {
    /// Mean total loss of the first and last epoch.
    pub fn first_last_epoch_loss(&self) -> (f64, f64) {
        let mean = |epoch: usize| {
            let v: Vec<f64> = self.log.iter().filter(|r| r.epoch == epoch).map(|r| r.loss.total()).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let last = self.log.last().map_or(0, |r| r.epoch);
        (mean(0), mean(last))
    }
}

fn check_pairs(cfg: &RunConfig, pairs: &[Pair], what: &str) -> Result<()> {
    let (gh, gw) = cfg.model.ground_size;
    for (i, (a, g)) in pairs.iter().enumerate() {
        if (g.height, g.width) != (gh, gw) {
            return Err(Error::shape(format!(
                "{what} pair {i}: ground image is {}x{}, model ground_size is {gh}x{gw}",
                g.height, g.width
            )));
        }
        if !cfg.train.use_polar_transform && (a.height, a.width) != cfg.model.aerial_size {
            return Err(Error::shape(format!(
                "{what} pair {i}: aerial image is {}x{} but the polar transform is off and model aerial_size is {:?}",
                a.height, a.width, cfg.model.aerial_size
            )));
        }
    }
    Ok(())
}

/// Trains from scratch on in-memory pairs. With `out_dir` set, writes
/// `metrics.csv`, `final.gdtr` and `best.gdtr` (each with a `.json` config).
pub fn train_pairs(cfg: &RunConfig, pairs: &[Pair], val: Option<&[Pair]>, out_dir: Option<&Path>) -> Result<TrainRun> {
    cfg.validate()?;
    check_pairs(cfg, pairs, "training")?;
    if let Some(v) = val {
        check_pairs(cfg, v, "validation")?;
    }
    let tc = &cfg.train;
    if pairs.len() < tc.batch_size {
        return Err(Error::invalid(format!("batch_size {} exceeds the {} training pairs", tc.batch_size, pairs.len())));
    }
    let loss_cfg = tc.loss();
    let total = tc.total_steps(pairs.len());
    let per_epoch = tc.steps_per_epoch(pairs.len());
    let mut params = ModelParams::init(&cfg.model, tc.seed);
    let mut opt = AdamW::new(tc.weight_decay);
    let mut log = Vec::with_capacity(total);
    let mut val_history = Vec::new();
    let mut best: Option<(f64, ModelParams, AdamW)> = None;
    let mut step = 0;

    'epochs: for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng::derived(tc.seed, &[STREAM_SHUFFLE, epoch as u64]));
        for b in 0..per_epoch {
            if step >= total {
                break 'epochs;
            }
            let idx = &order[b * tc.batch_size..(b + 1) * tc.batch_size];
            let batch = prepare_batch(cfg, pairs, idx, epoch, b)?;
            let (parts, grads) = loss_and_grads(&batch, &params, &cfg.model, &loss_cfg, Objective::Total)?;
            if !parts.total().is_finite() {
                return Err(Error::invalid(format!("loss became non-finite at step {step}")));
            }
            let lr = cosine_lr(tc.learning_rate, step, total);
            opt.step(&mut params, &grads, lr)?;
            log.push(StepRecord { step, epoch, loss: parts, lr });
            step += 1;
        }
        log::info!(
            "epoch {epoch}: mean loss {:.5}",
            log.iter().filter(|r| r.epoch == epoch).map(|r| r.loss.total()).sum::<f64>() / per_epoch.max(1) as f64
        );
        if let Some(v) = val {
            let rec = evaluate_pairs(&params, &cfg.model, tc.use_polar_transform, v)?;
            log::info!("epoch {epoch}: validation R@1 {:.4}", rec.r1);
            if best.as_ref().is_none_or(|(r1, _, _)| rec.r1 > *r1) {
                best = Some((rec.r1, params.clone(), opt.clone()));
            }
            val_history.push(rec);
        }
    }

    let final_checkpoint = Checkpoint { config: cfg.clone(), params, optimizer: opt };
    let best_checkpoint = match best {
        Some((_, p, o)) => Checkpoint { config: cfg.clone(), params: p, optimizer: o },
        None => final_checkpoint.clone(),
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let metrics = dir.join("metrics.csv");
        fs::write(&metrics, metrics_csv(&log)).map_err(|e| Error::io(&metrics, e))?;
        final_checkpoint.save(&dir.join("final.gdtr"))?;
        best_checkpoint.save(&dir.join("best.gdtr"))?;
    }
    Ok(TrainRun { final_checkpoint, best_checkpoint, log, val_history })
}

/// Loads the manifests and trains. See [`train_pairs`].
pub fn train(cfg: &RunConfig, manifest: &DatasetManifest, val: Option<&DatasetManifest>, out_dir: Option<&Path>) -> Result<TrainRun> {
    let pairs = manifest.load_all()?;
    let val_pairs = val.map(DatasetManifest::load_all).transpose()?;
    train_pairs(cfg, &pairs, val_pairs.as_deref(), out_dir)
}

/// Evaluation-mode embeddings of every pair, `(ground, aerial)`.
pub fn embed_pairs(params: &ModelParams, model: &ModelConfig, use_polar: bool, pairs: &[Pair]) -> Result<(Vec<ModulatedEmbedding>, Vec<ModulatedEmbedding>)> {
    let jobs: Vec<(usize, Branch)> = (0..pairs.len()).flat_map(|i| Branch::BOTH.map(|b| (i, b))).collect();
    let embs: Vec<ModulatedEmbedding> = jobs
        .par_iter()
        .map(|&(i, b)| {
            let (aerial, ground) = &pairs[i];
            let img = match b {
                Branch::Ground => ground.clone(),
                Branch::Aerial => aerial_input(aerial, model, use_polar)?,
            };
            Ok(forward_branch(params.branch(b), params.prefix(b), model, b, &img, None, None)?.embedding())
        })
        .collect::<Result<_>>()?;
    let mut it = embs.into_iter();
    let mut g = Vec::with_capacity(pairs.len());
    let mut a = Vec::with_capacity(pairs.len());
    while let (Some(x), Some(y)) = (it.next(), it.next()) {
        g.push(x);
        a.push(y);
    }
    Ok((g, a))
}

pub fn evaluate_pairs(params: &ModelParams, model: &ModelConfig, use_polar: bool, pairs: &[Pair]) -> Result<Recalls> {
    let (g, a) = embed_pairs(params, model, use_polar, pairs)?;
    Recalls::compute(&distance_matrix(&g, &a)?)
}

/// R@1, R@5, R@10 and R@1% of a checkpoint on a manifest.
pub fn evaluate(checkpoint: &Checkpoint, manifest: &DatasetManifest) -> Result<Recalls> {
    let pairs = manifest.load_all()?;
    check_pairs(&checkpoint.config, &pairs, "evaluation")?;
    evaluate_pairs(&checkpoint.params, &checkpoint.config.model, checkpoint.config.train.use_polar_transform, &pairs)
}

/// Recalls of a fixed embedding function, e.g. flattened polar pixels.
pub fn evaluate_embedder(pairs: &[Pair], embed: impl Fn(&Image, View) -> Result<ModulatedEmbedding> + Sync) -> Result<Recalls> {
    let g: Vec<_> = pairs.par_iter().map(|(_, g)| embed(g, View::Panorama)).collect::<Result<_>>()?;
    let a: Vec<_> = pairs.par_iter().map(|(a, _)| embed(a, View::Aerial)).collect::<Result<_>>()?;
    Recalls::compute(&distance_matrix(&g, &a)?)
}

/// Layout simulation then per-view semantic augmentation of one pair, drawn
/// from streams derived from `seed`. No polar transform.
pub fn augment_pair(aug: &AugmentConfig, aerial: &Image, ground: &Image, seed: u64) -> Result<Pair> {
    let (a, g) = layout_simulate(aerial, ground, aug, &mut rng::derived(seed, &[0]))?;
    Ok((semantic_augment(&a, aug, &mut rng::derived(seed, &[2])), semantic_augment(&g, aug, &mut rng::derived(seed, &[1]))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_scene, item_seed, SceneConfig};

    pub(crate) fn tiny_run_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            channels: 4,
            descriptors: 2,
            ground_size: (32, 64),
            aerial_size: (32, 64),
            heads: 2,
            layers: 1,
            ff_dim: 8,
            dropout: 0.1,
            share_weights: false,
            normalize_embeddings: true,
        };
        cfg.train.batch_size = 4;
        cfg.train.epochs = 1;
        cfg.train.learning_rate = 1e-3;
        cfg
    }

    fn pairs(n: usize) -> Vec<Pair> {
        let scene = SceneConfig { aerial_size: 32, ground_size: (32, 64), ..SceneConfig::default() };
        (0..n as u64).map(|i| generate_scene(i, item_seed(3, i), &scene).map(|p| (p.aerial, p.ground)).unwrap()).collect()
    }

    #[test]
    fn one_epoch_logs_and_roundtrips() {
        let cfg = tiny_run_config();
        let data = pairs(8);
        let dir = tempfile::tempdir().unwrap();
        let run = train_pairs(&cfg, &data, Some(&data[..4]), Some(dir.path())).unwrap();
        assert_eq!(run.log.len(), 2);
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
        assert_eq!(csv.lines().count(), 3);
        let loaded = Checkpoint::load(&dir.path().join("final.gdtr"), None).unwrap();
        assert_eq!(loaded.params, run.final_checkpoint.params);
        assert_eq!(loaded.optimizer, run.final_checkpoint.optimizer);
        assert_eq!(loaded.config, cfg);
        assert_eq!(run.val_history.len(), 1);
        let r = run.val_history[0];
        assert!(0.0 <= r.r1 && r.r1 <= r.r5 && r.r5 <= r.r10 && r.r10 <= 1.0);
    }

    #[test]
    fn seeded_runs_are_identical_across_thread_counts() {
        let mut cfg = tiny_run_config();
        cfg.train.epochs = 2;
        let data = pairs(8);
        let a = with_pool(true, || train_pairs(&cfg, &data, None, None)).unwrap().unwrap();
        let b = with_pool(false, || train_pairs(&cfg, &data, None, None)).unwrap().unwrap();
        assert_eq!(metrics_csv(&a.log), metrics_csv(&b.log));
        assert_eq!(a.final_checkpoint.params, b.final_checkpoint.params);
    }

    #[test]
    fn cf_toggle_keeps_augmentation_stream() {
        let cfg = tiny_run_config();
        let mut off = cfg.clone();
        off.train.cf_enabled = false;
        let data = pairs(4);
        let a = prepare_batch(&cfg, &data, &[0, 1, 2, 3], 1, 0).unwrap();
        let b = prepare_batch(&off, &data, &[0, 1, 2, 3], 1, 0).unwrap();
        assert_eq!(a.ground, b.ground);
        assert_eq!(a.aerial, b.aerial);
        assert!(b.imaginary_ground.is_empty() && a.imaginary_ground.len() == 4);
    }

    #[test]
    fn rejects_oversized_batch_and_wrong_sizes() {
        let cfg = tiny_run_config();
        assert!(train_pairs(&cfg, &pairs(3), None, None).is_err());
        let mut bad = cfg.clone();
        bad.model.ground_size = (64, 64);
        bad.model.aerial_size = (64, 64);
        let err = train_pairs(&bad, &pairs(4), None, None).unwrap_err().to_string();
        assert!(err.contains("ground_size"), "{err}");
    }
}
