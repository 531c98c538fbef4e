//! Optimization: SGD with momentum, learning-rate schedules, data
//! augmentation, cross-entropy, the training loop, and the voting
//! evaluation protocol.
//!
//! Every source of randomness flows from one run seed: epoch
//! shuffling and dropout draw from a single stream, and each
//! augmentation gets a seed derived from that stream (or, for voting,
//! from the sample's content), so a rerun with the same seed
//! reproduces the metrics log byte for byte.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::{downsample, DownsampleMode, LabeledCloud};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::network::{Network, ParamStore, Task};
use crate::tensor::{NodeId, Tape, Tensor};

/// Momentum buffers for SGD. Buffers appear on first use and always
/// mirror their parameter's length.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(momentum: f64) -> OptimizerState {
        OptimizerState {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// One update: `v <- momentum*v + g`, `w <- w - lr*v`.
    pub fn sgd_step(
        &mut self,
        params: &mut ParamStore,
        grads: &[(String, Vec<f64>)],
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let w = params.get_mut(name)?;
            if w.len() != g.len() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("{}: gradient length {} for {} weights", name, g.len(), w.len()),
                ));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            if v.len() != g.len() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("{}: stale momentum buffer of length {}", name, v.len()),
                ));
            }
            let wd = w.data_mut();
            for i in 0..g.len() {
                v[i] = self.momentum * v[i] + g[i];
                wd[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

/// Learning-rate decay over epochs.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    /// `floor + 0.5*(initial-floor)*(1+cos(pi*epoch/total))`.
    Cosine {
        initial: f64,
        floor: f64,
        total_epochs: usize,
    },
    /// `max(floor, initial*decay^(epoch div every))`.
    Step {
        initial: f64,
        floor: f64,
        decay: f64,
        every: usize,
    },
}

impl Schedule {
    pub fn cosine(initial: f64, floor: f64, total_epochs: usize) -> Result<Schedule> {
        if floor > initial {
            return Err(Error::invalid(
                "schedule",
                format!("floor {} above initial {}", floor, initial),
            ));
        }
        Ok(Schedule::Cosine {
            initial,
            floor,
            total_epochs,
        })
    }

    /// The standard stepping: times 0.7 every 10 epochs.
    pub fn step(initial: f64, floor: f64) -> Result<Schedule> {
        if floor > initial {
            return Err(Error::invalid(
                "schedule",
                format!("floor {} above initial {}", floor, initial),
            ));
        }
        Ok(Schedule::Step {
            initial,
            floor,
            decay: 0.7,
            every: 10,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match *self {
            Schedule::Cosine {
                initial,
                floor,
                total_epochs,
            } => {
                if total_epochs == 0 {
                    return initial;
                }
                let t = epoch as f64 / total_epochs as f64;
                floor + 0.5 * (initial - floor) * (1.0 + (std::f64::consts::PI * t).cos())
            }
            Schedule::Step {
                initial,
                floor,
                decay,
                every,
            } => {
                let steps = if every == 0 { 0 } else { epoch / every };
                floor.max(initial * decay.powi(steps as i32))
            }
        }
    }
}

/// Which random transforms [`augment`] applies, in order: isotropic
/// scale, per-axis translation, rotation about one axis, clipped
/// Gaussian jitter, point shuffle. Transforms act on coordinates;
/// attribute blocks and labels ride along (reordered by the shuffle).
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub scale: (f64, f64),
    /// Per-axis uniform offset in `[-translation, translation]`.
    pub translation: f64,
    pub rotation_axis: usize,
    /// Angle range in radians.
    pub rotation: (f64, f64),
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    pub shuffle: bool,
}

impl AugmentationConfig {
    /// No transform at all; [`augment`] returns the input bit-exact.
    pub fn none() -> AugmentationConfig {
        AugmentationConfig {
            scale: (1.0, 1.0),
            translation: 0.0,
            rotation_axis: 2,
            rotation: (0.0, 0.0),
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
            shuffle: false,
        }
    }

    /// The training-time recipe: scale in [0.67, 1.5], translation in
    /// [-0.2, 0.2], shuffled point order, no rotation.
    pub fn training() -> AugmentationConfig {
        AugmentationConfig {
            scale: (0.67, 1.5),
            translation: 0.2,
            shuffle: true,
            ..AugmentationConfig::none()
        }
    }

    /// Scaling only, for voting and robustness sweeps.
    pub fn scaling(lo: f64, hi: f64) -> AugmentationConfig {
        AugmentationConfig {
            scale: (lo, hi),
            ..AugmentationConfig::none()
        }
    }

    /// A fixed rotation about the given axis.
    pub fn fixed_rotation(axis: usize, radians: f64) -> AugmentationConfig {
        AugmentationConfig {
            rotation_axis: axis,
            rotation: (radians, radians),
            ..AugmentationConfig::none()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.scale.0 > 0.0) || self.scale.1 < self.scale.0 {
            return Err(Error::invalid(
                "augment",
                format!("scale range ({}, {}) not positive", self.scale.0, self.scale.1),
            ));
        }
        if self.translation < 0.0 || self.jitter_sigma < 0.0 || self.jitter_clip < 0.0 {
            return Err(Error::invalid("augment", "negative range"));
        }
        if self.rotation.1 < self.rotation.0 {
            return Err(Error::invalid("augment", "empty rotation range"));
        }
        if self.rotation_axis > 2 {
            return Err(Error::invalid(
                "augment",
                format!("rotation axis {} outside 0..=2", self.rotation_axis),
            ));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..=range.1)
    }
}

/// Applies the configured random transforms, all drawn from `seed`.
pub fn augment(cloud: &PointCloud, cfg: &AugmentationConfig, seed: u64) -> Result<PointCloud> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let s = draw(&mut rng, cfg.scale);
    let mut shift = [0.0; 3];
    if cfg.translation > 0.0 {
        for v in &mut shift {
            *v = rng.random_range(-cfg.translation..=cfg.translation);
        }
    }
    let angle = draw(&mut rng, cfg.rotation);
    let (sin, cos) = angle.sin_cos();
    // the two coordinates moved by a rotation about rotation_axis
    let (a, b) = match cfg.rotation_axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    let jitter = if cfg.jitter_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.jitter_sigma).map_err(|e| {
            Error::invalid("augment", format!("bad jitter sigma: {}", e))
        })?)
    } else {
        None
    };

    let positions: Vec<[f64; 3]> = cloud
        .positions()
        .iter()
        .map(|&p| {
            let mut q = [p[0] * s + shift[0], p[1] * s + shift[1], p[2] * s + shift[2]];
            if angle != 0.0 {
                let (qa, qb) = (q[a], q[b]);
                q[a] = cos * qa - sin * qb;
                q[b] = sin * qa + cos * qb;
            }
            if let Some(dist) = &jitter {
                for v in q.iter_mut() {
                    let d: f64 = dist.sample(&mut rng);
                    *v += d.clamp(-cfg.jitter_clip, cfg.jitter_clip);
                }
            }
            q
        })
        .collect();

    let mut out = PointCloud::new(positions)?;
    if let Some(attrs) = cloud.attributes() {
        out = out.with_attributes(attrs.clone())?;
    }
    if let Some(labels) = cloud.labels() {
        out = out.with_labels(labels.to_vec())?;
    }
    if cfg.shuffle {
        let mut order: Vec<usize> = (0..out.len()).collect();
        order.shuffle(&mut rng);
        out = out.select(&order)?;
    }
    Ok(out)
}

/// Mean cross-entropy of `logits` (`[rows, classes]` or
/// `[batch, points, classes]`) against integer labels, one per row.
pub fn cross_entropy_loss(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let shape = tape.shape(logits).to_vec();
    let (rows, classes, flat) = match shape.len() {
        2 => (shape[0], shape[1], logits),
        3 => (
            shape[0] * shape[1],
            shape[2],
            tape.reshape(logits, &[shape[0] * shape[1], shape[2]])?,
        ),
        _ => {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits rank {} unsupported", shape.len()),
            ))
        }
    };
    if labels.len() != rows {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {} rows", labels.len(), rows),
        ));
    }
    let mut mask = vec![0.0; rows * classes];
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {} with {} classes", label, classes),
            ));
        }
        mask[r * classes + label] = -1.0 / rows as f64;
    }
    let lsm = tape.log_softmax(flat, 1)?;
    let mask = tape.leaf(Tensor::from_vec(&[rows, classes], mask)?);
    let picked = tape.mul(lsm, mask)?;
    tape.sum_all(picked)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax matches the label. Rank-3 logits are
/// treated per point.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let shape = logits.shape();
    let (rows, classes) = match shape.len() {
        2 => (shape[0], shape[1]),
        3 => (shape[0] * shape[1], shape[2]),
        _ => {
            return Err(Error::shape(
                "accuracy",
                format!("logits rank {} unsupported", shape.len()),
            ))
        }
    };
    if labels.len() != rows || rows == 0 {
        return Err(Error::shape(
            "accuracy",
            format!("{} labels for {} rows", labels.len(), rows),
        ));
    }
    let data = logits.data();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(r, &label)| argmax(&data[r * classes..(r + 1) * classes]) == label)
        .count();
    Ok(correct as f64 / rows as f64)
}

/// Groups consecutive same-size samples into batches of at most 16.
fn batched<'a>(data: &'a [LabeledCloud]) -> Vec<&'a [LabeledCloud]> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < data.len() {
        let n = data[i].cloud.len();
        let mut j = i + 1;
        while j < data.len() && j - i < 16 && data[j].cloud.len() == n {
            j += 1;
        }
        out.push(&data[i..j]);
        i = j;
    }
    out
}

/// Plain eval-mode classification accuracy, as a fraction.
pub fn evaluate(net: &Network, data: &[LabeledCloud]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate", "no samples"));
    }
    let mut correct = 0usize;
    for chunk in batched(data) {
        let batch: Vec<PointCloud> = chunk.iter().map(|s| s.cloud.clone()).collect();
        let logits = net.forward_eval(&batch)?;
        let classes = *logits.shape().last().unwrap();
        for (r, sample) in chunk.iter().enumerate() {
            if argmax(&logits.data()[r * classes..(r + 1) * classes]) == sample.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Seed for one sample's votes: the run seed folded with the cloud's
/// coordinate bits, so a duplicated sample votes identically.
fn content_seed(seed: u64, cloud: &PointCloud) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed;
    for p in cloud.positions() {
        for v in p {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Voting evaluation: each sample is classified by the average of its
/// logits over `votes` augmented copies.
pub fn evaluate_with_voting(
    net: &Network,
    data: &[LabeledCloud],
    votes: usize,
    cfg: &AugmentationConfig,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() || votes == 0 {
        return Err(Error::invalid("evaluate_with_voting", "no samples or no votes"));
    }
    if net.spec().task != Task::Classification {
        return Err(Error::invalid(
            "evaluate_with_voting",
            "voting averages per-sample class logits; the network is not a classifier",
        ));
    }
    let mut correct = 0usize;
    for sample in data {
        let base = content_seed(seed, &sample.cloud);
        let copies: Vec<PointCloud> = (0..votes)
            .map(|v| augment(&sample.cloud, cfg, base.wrapping_add(v as u64)))
            .collect::<Result<_>>()?;
        let logits = net.forward_eval(&copies)?;
        let classes = logits.shape()[1];
        let mut mean = vec![0.0; classes];
        for v in 0..votes {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += logits.at(&[v, c]);
            }
        }
        if argmax(&mean) == sample.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub augmentation: AugmentationConfig,
    /// When set, each training batch is downsampled to one point count
    /// drawn uniformly from this list (random subsets; samples already
    /// at or below the drawn budget pass through). Evaluation always
    /// sees full resolution.
    pub point_budget: Option<Vec<usize>>,
    pub momentum: f64,
    pub seed: u64,
    /// Written after training when set.
    pub checkpoint_path: Option<PathBuf>,
    /// Rewritten after every epoch when set.
    pub metrics_path: Option<PathBuf>,
}

impl TrainConfig {
    /// The standard recipe: batch 16, cosine 0.1 -> 0.001 over the
    /// run, training augmentation, momentum 0.9.
    pub fn new(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            schedule: Schedule::Cosine {
                initial: 0.1,
                floor: 0.001,
                total_epochs: epochs,
            },
            augmentation: AugmentationConfig::training(),
            point_budget: None,
            momentum: 0.9,
            seed,
            checkpoint_path: None,
            metrics_path: None,
        }
    }
}

/// One epoch's row of the metrics log. Accuracies are percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Renders the metrics log: a seed comment, a header, one row per
/// epoch. Values print as shortest exact decimals, so equal runs give
/// byte-equal logs.
pub fn metrics_to_csv(seed: u64, rows: &[EpochMetrics]) -> String {
    let mut out = format!("# seed={}\nepoch,lr,train_loss,train_acc,val_acc\n", seed);
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.lr, r.train_loss, r.train_acc, r.val_acc
        ));
    }
    out
}

/// Trains in place. Classification reads each sample's class label;
/// segmentation tasks read per-point labels off the clouds. Returns
/// the per-epoch metrics; see [`TrainConfig`] for the artifacts.
pub fn train(
    net: &mut Network,
    train_set: &[LabeledCloud],
    val_set: &[LabeledCloud],
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    if train_set.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("train", "zero epochs or batch size"));
    }
    cfg.augmentation.validate()?;
    if let Some(budgets) = &cfg.point_budget {
        if budgets.is_empty() || budgets.contains(&0) {
            return Err(Error::invalid(
                "train",
                "point budgets must be a nonempty list of positive counts",
            ));
        }
    }
    let classification = net.spec().task == Task::Classification;
    let classes = net.spec().num_classes();
    if classification {
        for s in train_set.iter().chain(val_set) {
            if s.label >= classes {
                return Err(Error::invalid(
                    "train",
                    format!("label {} with {} classes", s.label, classes),
                ));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.momentum);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut row_count = 0usize;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let budget = cfg
                .point_budget
                .as_ref()
                .map(|b| b[rng.random_range(0..b.len())]);
            let mut batch = Vec::with_capacity(chunk.len());
            let mut labels = Vec::new();
            for &idx in chunk {
                let sample = &train_set[idx];
                let shrunk = match budget {
                    Some(n) if n < sample.cloud.len() => {
                        let sub_seed: u64 = rng.random();
                        downsample(&sample.cloud, n, DownsampleMode::Random, sub_seed)?
                    }
                    _ => sample.cloud.clone(),
                };
                let aug_seed: u64 = rng.random();
                let cloud = augment(&shrunk, &cfg.augmentation, aug_seed)?;
                if classification {
                    labels.push(sample.label);
                } else {
                    let point_labels = cloud.labels().ok_or_else(|| {
                        Error::invalid("train", "segmentation sample without point labels")
                    })?;
                    labels.extend_from_slice(point_labels);
                }
                batch.push(cloud);
            }

            let mut fwd = net.forward_train(&batch, &mut rng)?;
            let loss = cross_entropy_loss(&mut fwd.tape, fwd.logits, &labels)?;
            fwd.tape.backward(loss)?;

            let mut grads = Vec::with_capacity(fwd.param_nodes.len());
            for (name, id) in &fwd.param_nodes {
                let g = fwd.tape.grad(*id).ok_or_else(|| {
                    Error::invalid("train", format!("no gradient for {}", name))
                })?;
                grads.push((name.clone(), g.to_vec()));
            }
            opt.sgd_step(net.params_mut(), &grads, lr)?;

            let loss_val = fwd.tape.value(loss).data()[0];
            if !loss_val.is_finite() {
                return Err(Error::invalid(
                    "train",
                    format!("loss diverged at epoch {}", epoch + 1),
                ));
            }
            loss_sum += loss_val * labels.len() as f64;
            row_count += labels.len();
            let batch_acc = accuracy(fwd.tape.value(fwd.logits), &labels)?;
            correct += (batch_acc * labels.len() as f64).round() as usize;
            seen += labels.len();
        }

        let val_acc = if val_set.is_empty() {
            f64::NAN
        } else {
            evaluate(net, val_set)? * 100.0
        };
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / row_count as f64,
            train_acc: correct as f64 / seen as f64 * 100.0,
            val_acc,
        });
        if let Some(path) = &cfg.metrics_path {
            std::fs::write(path, metrics_to_csv(cfg.seed, &metrics))?;
        }
    }

    if let Some(path) = &cfg.checkpoint_path {
        net.save(path)?;
    }
    Ok(metrics)
}
