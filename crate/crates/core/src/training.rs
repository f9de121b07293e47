//! Joint reconstruction loss, Adam optimization, and the training loop.
//!
//! The loss has a local part (per-scale Chamfer between each reconstructed
//! area and its source neighborhood, averaged over regions and summed over
//! scales) and a global part (Chamfer between the reconstructed and input
//! clouds), combined as `local + gamma * global`.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Mat, NodeId, Tape};
use crate::dataset::{Dataset, Sample, Split};
use crate::decoder::{self, InterpolationConfig};
use crate::encoder;
use crate::error::{Error, Result};
use crate::geometry::{chamfer_points, farthest_point_sample, knn_group, PointCloud, RegionPyramid};
use crate::model::{save_checkpoint, Model, ModelConfig};
use crate::parallel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub local: f64,
    pub global_: f64,
    pub gamma: f64,
    /// Always `local + gamma * global_`, bitwise.
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(local: f64, global_: f64, gamma: f64) -> LossBreakdown {
        LossBreakdown {
            local,
            global_,
            gamma,
            total: local + gamma * global_,
        }
    }
}

/// Chamfer sum over aligned (region, scale) point-set grids, mean-reduced
/// over regions before the sum over scales. Outer index is the region.
pub fn local_loss(original: &[Vec<Vec<[f64; 3]>>], recon: &[Vec<Vec<[f64; 3]>>]) -> Result<f64> {
    if original.len() != recon.len() || original.is_empty() {
        return Err(Error::invalid(format!(
            "region counts differ: {} vs {}",
            original.len(),
            recon.len()
        )));
    }
    let scales = original[0].len();
    for (a, b) in original.iter().zip(recon) {
        if a.len() != scales || b.len() != scales {
            return Err(Error::invalid("ragged scale counts across regions"));
        }
    }
    let m = original.len() as f64;
    let mut total = 0.0;
    for t in 0..scales {
        let mut per_scale = 0.0;
        for (a, b) in original.iter().zip(recon) {
            if a[t].is_empty() || b[t].is_empty() {
                return Err(Error::invalid("empty point set in loss"));
            }
            per_scale += chamfer_points(&a[t], &b[t]);
        }
        total += per_scale / m;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy)]
pub struct LossOptions {
    pub gamma: f64,
    pub use_local: bool,
    pub use_global: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            gamma: 1.0,
            use_local: true,
            use_global: true,
        }
    }
}

pub struct SampleLoss {
    /// Scalar node holding the sample's total loss.
    pub node: NodeId,
    pub breakdown: LossBreakdown,
}

/// Build the full forward pass and loss for one cloud on the given tape.
pub fn sample_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &crate::model::Bound,
    cloud: &PointCloud,
    pyramid: &RegionPyramid,
    options: LossOptions,
) -> Result<SampleLoss> {
    if !options.use_local && !options.use_global {
        return Err(Error::invalid("both loss terms disabled"));
    }
    let enc = encoder::encode(model, tape, bound, cloud, pyramid, false)?;
    let centroids: Vec<[f64; 3]> = pyramid
        .centroid_indices
        .iter()
        .map(|&i| cloud.points[i])
        .collect();
    let dec = decoder::decode(
        model,
        tape,
        bound,
        enc.global,
        &enc.region_features,
        &centroids,
        InterpolationConfig::default(),
    )?;

    let local_node = if options.use_local {
        let inv_m = 1.0 / model.config.num_regions as f64;
        let mut acc: Option<NodeId> = None;
        for t in 0..model.config.num_scales() {
            let mut scale_acc: Option<NodeId> = None;
            for m in 0..model.config.num_regions {
                let target = Arc::new(pyramid.gather(cloud, m, t));
                let term = tape.chamfer_vs_fixed(dec.areas[m][t], target)?;
                scale_acc = Some(match scale_acc {
                    Some(prev) => tape.add(prev, term),
                    None => term,
                });
            }
            let mean = tape.scale(scale_acc.expect("at least one region"), inv_m);
            acc = Some(match acc {
                Some(prev) => tape.add(prev, mean),
                None => mean,
            });
        }
        acc
    } else {
        None
    };

    let global_node = if options.use_global {
        let target = Arc::new(cloud.points.clone());
        Some(tape.chamfer_vs_fixed(dec.cloud, target)?)
    } else {
        None
    };

    let (node, local, global_) = match (local_node, global_node) {
        (Some(l), Some(g)) => {
            let scaled = tape.scale(g, options.gamma);
            let total = tape.add(l, scaled);
            (total, tape.value(l)[(0, 0)], tape.value(g)[(0, 0)])
        }
        (Some(l), None) => (l, tape.value(l)[(0, 0)], 0.0),
        (None, Some(g)) => {
            let scaled = tape.scale(g, options.gamma);
            (scaled, 0.0, tape.value(g)[(0, 0)])
        }
        (None, None) => unreachable!(),
    };
    Ok(SampleLoss {
        node,
        breakdown: LossBreakdown::new(local, global_, options.gamma),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Standard Adam with bias correction. Moment layout mirrors the parameter
/// store; a missing gradient counts as zero.
pub struct Adam {
    pub config: AdamConfig,
    step_count: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &crate::autodiff::ParamStore, config: AdamConfig) -> Adam {
        let shapes: Vec<(usize, usize)> = (0..store.len()).map(|i| store.mat(i).shape()).collect();
        Adam {
            config,
            step_count: 0,
            m: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn step(
        &mut self,
        store: &mut crate::autodiff::ParamStore,
        grads: &Gradients,
        lr: f64,
    ) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for i in 0..store.len() {
            let theta = store.mat(i).clone();
            let (rows, cols) = theta.shape();
            let mut next = Mat::zeros(rows, cols);
            let zero = Mat::zeros(rows, cols);
            let g = grads.get(i).unwrap_or(&zero);
            for r in 0..rows {
                for c in 0..cols {
                    let gv = g[(r, c)];
                    let m = b1 * self.m[i][(r, c)] + (1.0 - b1) * gv;
                    let v = b2 * self.v[i][(r, c)] + (1.0 - b2) * gv * gv;
                    self.m[i][(r, c)] = m;
                    self.v[i][(r, c)] = v;
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    next[(r, c)] = theta[(r, c)] - lr * mhat / (vhat.sqrt() + self.config.epsilon);
                }
            }
            store.set_mat(i, next);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
    pub epochs: usize,
    pub seed: u64,
    pub gamma: f64,
    pub use_local_loss: bool,
    pub use_global_loss: bool,
    /// Write a checkpoint every this many epochs; 0 disables periodic saves.
    pub save_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 8,
            lr_decay_factor: 0.3,
            lr_decay_every_epochs: 20,
            epochs: 100,
            seed: 0,
            gamma: 1.0,
            use_local_loss: true,
            use_global_loss: true,
            save_every: 0,
        }
    }
}

impl TrainConfig {
    /// Zero learning rate is allowed as an explicit no-op configuration.
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid("learning_rate must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::invalid("lr_decay_factor must be in (0, 1]"));
        }
        if self.lr_decay_every_epochs == 0 {
            return Err(Error::invalid("lr_decay_every_epochs must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::invalid("gamma must be finite and >= 0"));
        }
        if !self.use_local_loss && !self.use_global_loss {
            return Err(Error::invalid("both loss terms disabled"));
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            gamma: self.gamma,
            use_local: self.use_local_loss,
            use_global: self.use_global_loss,
        }
    }

    /// Learning rate in force during a 1-based epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = (epoch - 1) / self.lr_decay_every_epochs;
        self.learning_rate * self.lr_decay_factor.powi(decays as i32)
    }
}

/// Model shape plus loop hyperparameters, as read from one config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(0),
            train: TrainConfig::default(),
        }
    }
}

/// Parse `key = value` lines over the given defaults. `#` starts a comment;
/// unknown keys and bad values are errors naming the line.
pub fn parse_config(text: &str, origin: &Path, defaults: RunConfig) -> Result<RunConfig> {
    let mut cfg = defaults;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let Some((key, value)) = line.split_once('=') else {
            return Err(err("expected key = value".into()));
        };
        let key = key.trim();
        let value = value.trim();
        macro_rules! parse_as {
            ($ty:ty) => {
                value
                    .parse::<$ty>()
                    .map_err(|_| err(format!("bad value {value:?} for {key}")))?
            };
        }
        match key {
            "learning_rate" => cfg.train.learning_rate = parse_as!(f64),
            "batch_size" => cfg.train.batch_size = parse_as!(usize),
            "lr_decay_factor" => cfg.train.lr_decay_factor = parse_as!(f64),
            "lr_decay_every_epochs" => cfg.train.lr_decay_every_epochs = parse_as!(usize),
            "epochs" => cfg.train.epochs = parse_as!(usize),
            "seed" => cfg.train.seed = parse_as!(u64),
            "gamma" => cfg.train.gamma = parse_as!(f64),
            "local_loss" => cfg.train.use_local_loss = parse_as!(bool),
            "global_loss" => cfg.train.use_global_loss = parse_as!(bool),
            "save_every" => cfg.train.save_every = parse_as!(usize),
            "point_attention" => cfg.model.point_attention = parse_as!(bool),
            "scale_attention" => cfg.model.scale_attention = parse_as!(bool),
            "region_attention" => cfg.model.region_attention = parse_as!(bool),
            "centroid_relative" => cfg.model.centroid_relative = parse_as!(bool),
            "points_per_cloud" => cfg.model.points_per_cloud = parse_as!(usize),
            "num_regions" => cfg.model.num_regions = parse_as!(usize),
            "feature_dim" => cfg.model.feature_dim = parse_as!(usize),
            "global_dim" => cfg.model.global_dim = parse_as!(usize),
            "model_seed" => cfg.model.seed = parse_as!(u64),
            "scales" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    value.split(',').map(|v| v.trim().parse::<usize>()).collect();
                cfg.model.scales =
                    parsed.map_err(|_| err(format!("bad scales list {value:?}")))?;
            }
            other => return Err(err(format!("unknown key {other:?}"))),
        }
    }
    cfg.train.validate()?;
    cfg.model.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub local: f64,
    pub global_: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,local,global,total,lr\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.local, r.global_, r.total, r.lr);
    }
    out
}

/// Region pyramid plus either source of a sample's loss targets.
struct SamplePlan<'a> {
    sample: &'a Sample,
    pyramid: RegionPyramid,
}

fn plan_samples<'a>(
    model: &Model,
    samples: &[&'a Sample],
    seed: u64,
) -> Result<Vec<SamplePlan<'a>>> {
    let plans: Vec<Result<SamplePlan>> = parallel::map_indices(samples.len(), |idx| {
        let sample = samples[idx];
        let fps_seed = seed ^ (idx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let centroids = farthest_point_sample(&sample.cloud, model.config.num_regions, fps_seed)?;
        let pyramid = knn_group(&sample.cloud, &centroids, &model.config.scales)?;
        Ok(SamplePlan { sample, pyramid })
    });
    plans.into_iter().collect()
}

/// Forward/backward one sample on a fresh tape.
fn sample_pass(
    model: &Model,
    plan: &SamplePlan,
    options: LossOptions,
) -> Result<(LossBreakdown, Gradients)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let loss = sample_loss(model, &mut tape, &bound, &plan.sample.cloud, &plan.pyramid, options)?;
    let grads = tape.backward(loss.node, &model.store)?;
    Ok((loss.breakdown, grads))
}

/// Mini-batch Adam over the train split. Batch members run concurrently;
/// gradients are reduced in sample order, so results do not depend on the
/// thread count.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    config.validate()?;
    if dataset.points_per_cloud != model.config.points_per_cloud {
        return Err(Error::Checkpoint(format!(
            "model expects {} points per cloud, dataset has {}",
            model.config.points_per_cloud, dataset.points_per_cloud
        )));
    }
    let samples: Vec<&Sample> = dataset.split(Split::Train).collect();
    if samples.is_empty() {
        return Err(Error::invalid("dataset has no training samples"));
    }
    let plans = plan_samples(model, &samples, config.seed)?;
    let options = config.loss_options();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model.store, AdamConfig::default());
    let mut order: Vec<usize> = (0..plans.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let lr = config.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let results: Vec<Result<(LossBreakdown, Gradients)>> =
                parallel::map_slice(batch, |&i| sample_pass(model, &plans[i], options));
            let mut batch_grads = Gradients::zeros(model.store.len());
            for (&i, result) in batch.iter().zip(results) {
                let (breakdown, grads) = result?;
                if !breakdown.total.is_finite() || !grads.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        sample_id: plans[i].sample.cloud.id.clone(),
                    });
                }
                sums.0 += breakdown.local;
                sums.1 += breakdown.global_;
                sums.2 += breakdown.total;
                batch_grads.accumulate(&grads);
            }
            batch_grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut model.store, &batch_grads, lr);
        }
        let n = plans.len() as f64;
        history.push(EpochRecord {
            epoch,
            local: sums.0 / n,
            global_: sums.1 / n,
            total: sums.2 / n,
            lr,
        });
        if let (Some(dir), true) = (checkpoint_dir, config.save_every > 0) {
            if epoch % config.save_every == 0 {
                std::fs::create_dir_all(dir)?;
                save_checkpoint(&dir.join(format!("checkpoint-{epoch:04}.pcae")), model)?;
            }
        }
    }
    Ok(TrainReport { history })
}
