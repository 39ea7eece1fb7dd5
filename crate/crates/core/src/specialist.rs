//! Per-voxel specialist model and its round training.
//!
//! The specialist is a linear softmax classifier over the enclosing cell's
//! feature vector plus the voxel's z-scored intensity. Each round trains it
//! from zero with SGD (momentum, weight decay, polynomial learning-rate
//! decay) on
//!
//! ```text
//! L = L_sup + lambda * L_unsup + alpha * L_pseudo
//! ```
//!
//! where `L_sup` and `L_pseudo` are `(CE + soft Dice) / 2` on template and
//! pseudo-labeled voxels, and `L_unsup` is the mean squared difference
//! between the student on perturbed features and an EMA teacher on clean
//! features. Gradients are analytic.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::FeatureGrid;
use crate::math::{argmax, exp, ln, powf, softmax_in_place};
use crate::metrics::foreground_dice;
use crate::volume::{axis_tables, IntensityVolume, LabelVolume, ProbVolume, Shape3};
use crate::{Error, Result};

/// Smoothing constant of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Weights (`C x F`, row-major) and biases of the linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecialistParams {
    num_classes: usize,
    num_features: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl SpecialistParams {
    pub fn zeros(num_classes: usize, num_features: usize) -> Result<Self> {
        crate::volume::check_num_classes(num_classes)?;
        if num_features == 0 {
            return Err(Error::InvalidParameter("feature count must be positive"));
        }
        Ok(SpecialistParams {
            num_classes,
            num_features,
            weights: vec![0.0; num_classes * num_features],
            bias: vec![0.0; num_classes],
        })
    }

    pub fn from_parts(
        num_classes: usize,
        num_features: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let mut p = Self::zeros(num_classes, num_features)?;
        if weights.len() != p.weights.len() {
            return Err(Error::PayloadMismatch {
                expected: p.weights.len(),
                found: weights.len(),
            });
        }
        if bias.len() != num_classes {
            return Err(Error::PayloadMismatch {
                expected: num_classes,
                found: bias.len(),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        p.weights = weights;
        p.bias = bias;
        Ok(p)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Number of scalar parameters.
    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weights followed by biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn from_flat(num_classes: usize, num_features: usize, flat: &[f64]) -> Result<Self> {
        let nw = num_classes * num_features;
        if flat.len() != nw + num_classes {
            return Err(Error::PayloadMismatch {
                expected: nw + num_classes,
                found: flat.len(),
            });
        }
        Self::from_parts(
            num_classes,
            num_features,
            flat[..nw].to_vec(),
            flat[nw..].to_vec(),
        )
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }

    #[inline]
    fn logits(&self, f: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.weights[c * self.num_features..(c + 1) * self.num_features];
            *o = self.bias[c] + row.iter().zip(f).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    #[inline]
    fn probs_into(&self, f: &[f64], out: &mut [f64]) {
        self.logits(f, out);
        softmax_in_place(out);
    }

    #[inline]
    fn accumulate(&mut self, dz: &[f64], f: &[f64]) {
        for (c, &d) in dz.iter().enumerate() {
            let row = &mut self.weights[c * self.num_features..(c + 1) * self.num_features];
            for (w, x) in row.iter_mut().zip(f) {
                *w += d * x;
            }
            self.bias[c] += d;
        }
    }
}

/// `softmax(W f + b)`.
pub fn forward(params: &SpecialistParams, features: &[f64]) -> Result<Vec<f64>> {
    if features.len() != params.num_features {
        return Err(Error::ChannelMismatch {
            expected: params.num_features,
            found: features.len(),
        });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut out = vec![0.0; params.num_classes];
    params.probs_into(features, &mut out);
    Ok(out)
}

/// Per-voxel feature lookup for one volume: the enclosing grid cell's
/// features followed by the voxel's z-scored intensity.
#[derive(Clone, Debug)]
pub struct VoxelFeatures<'a> {
    vol: &'a IntensityVolume,
    channels: usize,
    cells: Vec<f64>,
    cell_of_voxel: [Vec<usize>; 3],
    grid_shape: Shape3,
    mean: f64,
    std: f64,
}

impl<'a> VoxelFeatures<'a> {
    pub fn new(vol: &'a IntensityVolume, grid: &'a FeatureGrid) -> Result<Self> {
        let shape = vol.shape();
        let grid_shape = grid.grid_shape();
        if !shape.contains(&grid_shape) {
            return Err(Error::GridLargerThanVolume {
                grid: grid_shape,
                volume: shape,
            });
        }
        let channels = grid.channels();
        let n = grid_shape.len();
        let mut cells = vec![0.0; n * channels];
        for cell in 0..n {
            grid.cell_vector(cell, &mut cells[cell * channels..(cell + 1) * channels]);
        }
        let (mean, std) = vol.mean_std();
        Ok(VoxelFeatures {
            vol,
            channels,
            cells,
            cell_of_voxel: axis_tables(grid_shape, shape),
            grid_shape,
            mean,
            std,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.vol.shape()
    }

    pub fn num_features(&self) -> usize {
        self.channels + 1
    }

    /// Writes the features of flat voxel `voxel` into `out[..num_features]`.
    #[inline]
    pub fn fill(&self, voxel: usize, out: &mut [f64]) {
        let [i, j, k] = self.vol.shape().coords(voxel);
        let cell = self.grid_shape.index(
            self.cell_of_voxel[0][i],
            self.cell_of_voxel[1][j],
            self.cell_of_voxel[2][k],
        );
        out[..self.channels]
            .copy_from_slice(&self.cells[cell * self.channels..(cell + 1) * self.channels]);
        out[self.channels] = if self.std > 0.0 {
            (self.vol.data()[voxel] as f64 - self.mean) / self.std
        } else {
            0.0
        };
    }
}

/// Feature vector of voxel `(i, j, k)`; length is always grid channels + 1.
pub fn per_voxel_features(
    vol: &IntensityVolume,
    grid: &FeatureGrid,
    index: [usize; 3],
) -> Result<Vec<f64>> {
    let shape = vol.shape();
    if index[0] >= shape.d || index[1] >= shape.h || index[2] >= shape.w {
        return Err(Error::VoxelOutOfRange { index, shape });
    }
    let feats = VoxelFeatures::new(vol, grid)?;
    let mut out = vec![0.0; feats.num_features()];
    feats.fill(shape.index(index[0], index[1], index[2]), &mut out);
    Ok(out)
}

/// Linear ramp from 0 to 1 over the first `fraction` of `total` iterations.
pub fn ramp_up_alpha(iter: usize, total: usize, fraction: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidParameter("total iterations must be positive"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParameter("ramp fraction must be in (0, 1]"));
    }
    let ramp = fraction * total as f64;
    Ok((iter as f64 / ramp).clamp(0.0, 1.0))
}

/// `base * (1 - t / t_max)^power`; zero at `t = t_max`.
pub fn poly_lr(base: f64, t: usize, t_max: usize, power: f64) -> f64 {
    if t >= t_max {
        return 0.0;
    }
    base * powf(1.0 - t as f64 / t_max as f64, power)
}

/// One optimization batch. Feature rows are flattened with stride `num_features`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub num_features: usize,
    pub labeled: Vec<f64>,
    pub labeled_targets: Vec<u8>,
    pub pseudo: Vec<f64>,
    /// `pseudo` plus the Gaussian perturbation fed to the student for consistency.
    pub pseudo_perturbed: Vec<f64>,
    pub pseudo_targets: Vec<u8>,
}

impl Batch {
    fn validate(&self, params: &SpecialistParams) -> Result<()> {
        let f = self.num_features;
        if f != params.num_features {
            return Err(Error::ChannelMismatch {
                expected: params.num_features,
                found: f,
            });
        }
        if self.labeled_targets.is_empty() || self.pseudo_targets.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let check = |rows: &[f64], n: usize| {
            if rows.len() != n * f {
                Err(Error::PayloadMismatch {
                    expected: n * f,
                    found: rows.len(),
                })
            } else {
                Ok(())
            }
        };
        check(&self.labeled, self.labeled_targets.len())?;
        check(&self.pseudo, self.pseudo_targets.len())?;
        check(&self.pseudo_perturbed, self.pseudo_targets.len())?;
        for &t in self.labeled_targets.iter().chain(&self.pseudo_targets) {
            if t as usize >= params.num_classes {
                return Err(Error::LabelOutOfRange {
                    value: t,
                    num_classes: params.num_classes,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub total: f64,
    pub sup: f64,
    pub unsup: f64,
    pub pseudo: f64,
}

/// `(CE + soft Dice) / 2`; adds `weight * d(loss)/d(params)` into `grad`.
fn segmentation_loss(
    params: &SpecialistParams,
    rows: &[f64],
    targets: &[u8],
    weight: f64,
    grad: &mut SpecialistParams,
) -> f64 {
    let f = params.num_features;
    let c = params.num_classes;
    let n = targets.len();
    let mut probs = vec![0.0; n * c];
    let mut z = vec![0.0; c];
    let mut ce = 0.0;
    let mut inter = vec![0.0; c];
    let mut union = vec![0.0; c];
    for (v, &y) in targets.iter().enumerate() {
        params.logits(&rows[v * f..(v + 1) * f], &mut z);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|&x| exp(x - max)).sum();
        let lse = max + ln(sum);
        ce += lse - z[y as usize];
        let p = &mut probs[v * c..(v + 1) * c];
        for (k, pk) in p.iter_mut().enumerate() {
            *pk = exp(z[k] - lse);
            union[k] += *pk;
        }
        inter[y as usize] += p[y as usize];
        union[y as usize] += 1.0;
    }
    let ce = ce / n as f64;
    let dice_mean = (0..c)
        .map(|k| (2.0 * inter[k] + DICE_SMOOTH) / (union[k] + DICE_SMOOTH))
        .sum::<f64>()
        / c as f64;
    let loss = 0.5 * (ce + (1.0 - dice_mean));

    if weight != 0.0 {
        let mut g = vec![0.0; c];
        let mut dz = vec![0.0; c];
        for (v, &y) in targets.iter().enumerate() {
            let p = &probs[v * c..(v + 1) * c];
            for k in 0..c {
                let onehot = if k == y as usize { 1.0 } else { 0.0 };
                let u = union[k] + DICE_SMOOTH;
                g[k] = -(2.0 * onehot * u - (2.0 * inter[k] + DICE_SMOOTH)) / (u * u * c as f64);
            }
            let gp: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
            for k in 0..c {
                let onehot = if k == y as usize { 1.0 } else { 0.0 };
                let d_ce = (p[k] - onehot) / n as f64;
                let d_dice = p[k] * (g[k] - gp);
                dz[k] = 0.5 * weight * (d_ce + d_dice);
            }
            grad.accumulate(&dz, &rows[v * f..(v + 1) * f]);
        }
    }
    loss
}

/// Mean squared student/teacher probability gap; adds `weight * gradient`.
fn consistency_loss(
    params: &SpecialistParams,
    teacher: &SpecialistParams,
    clean: &[f64],
    perturbed: &[f64],
    weight: f64,
    grad: &mut SpecialistParams,
) -> f64 {
    let f = params.num_features;
    let c = params.num_classes;
    let n = clean.len() / f;
    let scale = (n * c) as f64;
    let mut ps = vec![0.0; c];
    let mut pt = vec![0.0; c];
    let mut g = vec![0.0; c];
    let mut dz = vec![0.0; c];
    let mut loss = 0.0;
    for v in 0..n {
        let row = &perturbed[v * f..(v + 1) * f];
        params.probs_into(row, &mut ps);
        teacher.probs_into(&clean[v * f..(v + 1) * f], &mut pt);
        for k in 0..c {
            let d = ps[k] - pt[k];
            loss += d * d;
            g[k] = 2.0 * d / scale;
        }
        if weight != 0.0 {
            let gp: f64 = g.iter().zip(&ps).map(|(a, b)| a * b).sum();
            for k in 0..c {
                dz[k] = weight * ps[k] * (g[k] - gp);
            }
            grad.accumulate(&dz, row);
        }
    }
    loss / scale
}

/// Loss of one batch and its analytic gradient with respect to `params`.
/// The teacher is treated as a constant.
pub fn loss_and_grad(
    params: &SpecialistParams,
    teacher: &SpecialistParams,
    batch: &Batch,
    alpha: f64,
    lambda: f64,
) -> Result<(LossBreakdown, SpecialistParams)> {
    batch.validate(params)?;
    if teacher.num_classes != params.num_classes || teacher.num_features != params.num_features {
        return Err(Error::ChannelMismatch {
            expected: params.num_features,
            found: teacher.num_features,
        });
    }
    let mut grad = SpecialistParams::zeros(params.num_classes, params.num_features)?;
    let sup = segmentation_loss(params, &batch.labeled, &batch.labeled_targets, 1.0, &mut grad);
    let pseudo = segmentation_loss(
        params,
        &batch.pseudo,
        &batch.pseudo_targets,
        alpha,
        &mut grad,
    );
    let unsup = consistency_loss(
        params,
        teacher,
        &batch.pseudo,
        &batch.pseudo_perturbed,
        lambda,
        &mut grad,
    );
    let total = sup + lambda * unsup + alpha * pseudo;
    Ok((
        LossBreakdown {
            total,
            sup,
            unsup,
            pseudo,
        },
        grad,
    ))
}

/// Exponential moving average of the student's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaTeacher {
    pub shadow: SpecialistParams,
    pub decay: f64,
}

impl EmaTeacher {
    pub fn new(shadow: SpecialistParams, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidParameter("EMA decay must be in [0, 1)"));
        }
        Ok(EmaTeacher { shadow, decay })
    }

    pub fn update(&mut self, student: &SpecialistParams) {
        let d = self.decay;
        for (s, p) in self.shadow.values_mut().zip(student.values()) {
            *s = d * *s + (1.0 - d) * p;
        }
    }
}

/// SGD with momentum and L2 weight decay (decay folded into the gradient).
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, num_params: usize) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut SpecialistParams, grad: &SpecialistParams, lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((p, g), v) in params
            .values_mut()
            .zip(grad.values())
            .zip(self.velocity.iter_mut())
        {
            let g = g + wd * *p;
            *v = mu * *v + g;
            *p -= lr * *v;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub iterations: usize,
    pub base_lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Voxels per step, split evenly between template and one pseudo-labeled volume.
    pub batch_voxels: usize,
    pub lambda_max: f64,
    pub ramp_fraction: f64,
    pub ema_decay: f64,
    pub noise_sigma: f64,
    /// Validation cadence in iterations when a validation set is present.
    pub validate_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            base_lr: 0.01,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_voxels: 4096,
            lambda_max: 0.1,
            ramp_fraction: 0.3,
            ema_decay: 0.99,
            noise_sigma: 0.1,
            validate_every: 250,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be at least 1"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidParameter("learning rate must be finite and >= 0"));
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0) {
            return Err(Error::InvalidParameter("ramp fraction must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidParameter("EMA decay must be in [0, 1)"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidParameter("noise sigma must be finite and >= 0"));
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(Error::InvalidParameter("lambda must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::InvalidParameter("momentum or weight decay out of range"));
        }
        if self.batch_voxels < 2 {
            return Err(Error::InvalidParameter("batch must hold at least 2 voxels"));
        }
        Ok(())
    }
}

/// A volume's features together with its (pseudo-)labels.
#[derive(Clone, Debug)]
pub struct LabeledVolume<'a> {
    pub features: VoxelFeatures<'a>,
    pub labels: &'a LabelVolume,
}

impl<'a> LabeledVolume<'a> {
    pub fn new(features: VoxelFeatures<'a>, labels: &'a LabelVolume) -> Result<Self> {
        if features.shape() != labels.shape() {
            return Err(Error::ShapeMismatch {
                expected: features.shape(),
                found: labels.shape(),
            });
        }
        Ok(LabeledVolume { features, labels })
    }
}

#[derive(Clone, Debug)]
pub struct TrainingSet<'a> {
    pub template: LabeledVolume<'a>,
    pub pool: Vec<LabeledVolume<'a>>,
    pub validation: Vec<LabeledVolume<'a>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LogEntry {
    pub iter: usize,
    pub lr: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub loss: f64,
    pub l_sup: f64,
    pub l_unsup: f64,
    pub l_pseudo: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation checkpoint, or the final student without validation data.
    pub params: SpecialistParams,
    pub final_params: SpecialistParams,
    pub teacher: EmaTeacher,
    pub log: Vec<LogEntry>,
    /// Iteration count after which `params` was captured.
    pub selected_iteration: usize,
    pub best_validation_dice: Option<f64>,
}

fn sample_rows(
    rng: &mut ChaCha8Rng,
    vol: &LabeledVolume<'_>,
    count: usize,
    rows: &mut Vec<f64>,
    targets: &mut Vec<u8>,
) {
    let n = vol.features.shape().len();
    let f = vol.features.num_features();
    rows.clear();
    targets.clear();
    rows.resize(count * f, 0.0);
    for r in 0..count {
        let voxel = rng.random_range(0..n);
        vol.features.fill(voxel, &mut rows[r * f..(r + 1) * f]);
        targets.push(vol.labels.data()[voxel]);
    }
}

fn mean_validation_dice(params: &SpecialistParams, set: &[LabeledVolume<'_>]) -> Result<f64> {
    let mut total = 0.0;
    for v in set {
        let (pred, _) = predict_volume(params, &v.features)?;
        total += foreground_dice(&pred, v.labels)?;
    }
    Ok(total / set.len() as f64)
}

/// Trains a freshly zero-initialized specialist for one round.
pub fn train_round(data: &TrainingSet<'_>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let num_features = data.template.features.num_features();
    let num_classes = data.template.labels.num_classes();
    for v in data.pool.iter().chain(&data.validation) {
        if v.features.num_features() != num_features {
            return Err(Error::ChannelMismatch {
                expected: num_features,
                found: v.features.num_features(),
            });
        }
        if v.labels.num_classes() != num_classes {
            return Err(Error::ClassMismatch {
                expected: num_classes,
                found: v.labels.num_classes(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = if config.noise_sigma > 0.0 {
        Some(
            Normal::new(0.0, config.noise_sigma)
                .map_err(|_| Error::InvalidParameter("noise sigma"))?,
        )
    } else {
        None
    };

    let mut student = SpecialistParams::zeros(num_classes, num_features)?;
    let mut teacher = EmaTeacher::new(student.clone(), config.ema_decay)?;
    let mut sgd = Sgd::new(config.momentum, config.weight_decay, student.len());
    let total = config.iterations;
    let n_labeled = config.batch_voxels / 2;
    let n_pseudo = config.batch_voxels - n_labeled;

    let mut batch = Batch {
        num_features,
        ..Batch::default()
    };
    let mut log = Vec::with_capacity(total);
    let mut best: Option<(f64, usize, SpecialistParams)> = None;

    for t in 0..total {
        let lr = poly_lr(config.base_lr, t, total, config.lr_power);
        let alpha = ramp_up_alpha(t, total, config.ramp_fraction)?;
        let lambda = config.lambda_max * alpha;

        sample_rows(
            &mut rng,
            &data.template,
            n_labeled,
            &mut batch.labeled,
            &mut batch.labeled_targets,
        );
        let pick = rng.random_range(0..data.pool.len());
        sample_rows(
            &mut rng,
            &data.pool[pick],
            n_pseudo,
            &mut batch.pseudo,
            &mut batch.pseudo_targets,
        );
        batch.pseudo_perturbed.clear();
        match &noise {
            Some(dist) => batch
                .pseudo_perturbed
                .extend(batch.pseudo.iter().map(|&x| x + dist.sample(&mut rng))),
            None => batch.pseudo_perturbed.extend_from_slice(&batch.pseudo),
        }

        let (loss, grad) = loss_and_grad(&student, &teacher.shadow, &batch, alpha, lambda)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite);
        }
        sgd.step(&mut student, &grad, lr);
        teacher.update(&student);
        log.push(LogEntry {
            iter: t,
            lr,
            alpha,
            lambda,
            loss: loss.total,
            l_sup: loss.sup,
            l_unsup: loss.unsup,
            l_pseudo: loss.pseudo,
        });

        let done = t + 1;
        let due = config.validate_every > 0 && done % config.validate_every == 0;
        if !data.validation.is_empty() && (due || done == total) {
            let dice = mean_validation_dice(&student, &data.validation)?;
            if best.as_ref().is_none_or(|(b, _, _)| dice > *b) {
                best = Some((dice, done, student.clone()));
            }
        }
    }

    let (params, selected_iteration, best_validation_dice) = match best {
        Some((dice, iter, p)) => (p, iter, Some(dice)),
        None => (student.clone(), total, None),
    };
    Ok(TrainOutcome {
        params,
        final_params: student,
        teacher,
        log,
        selected_iteration,
        best_validation_dice,
    })
}

/// Voxel-wise prediction over the whole volume.
pub fn predict_volume(
    params: &SpecialistParams,
    features: &VoxelFeatures<'_>,
) -> Result<(LabelVolume, ProbVolume)> {
    let shape = features.shape();
    infer(params, features, shape, shape.d.max(shape.h).max(shape.w))
}

fn window_starts(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let window = window.min(extent);
    // a step longer than the window would leave voxels without a prediction
    let step = stride.min(window);
    let mut starts = Vec::new();
    let mut s = 0;
    while s + window < extent {
        starts.push(s);
        s += step;
    }
    starts.push(extent - window);
    starts.dedup();
    starts
}

/// Sliding-window inference. Overlapping windows are averaged in probability
/// space (fixed window order) and renormalized; argmax ties go to the lowest class.
/// Strides longer than the window are shortened to the window so every voxel
/// is covered.
pub fn infer(
    params: &SpecialistParams,
    features: &VoxelFeatures<'_>,
    window: Shape3,
    stride: usize,
) -> Result<(LabelVolume, ProbVolume)> {
    if stride == 0 {
        return Err(Error::InvalidParameter("stride must be positive"));
    }
    window.validate()?;
    if features.num_features() != params.num_features {
        return Err(Error::ChannelMismatch {
            expected: params.num_features,
            found: features.num_features(),
        });
    }
    let shape = features.shape();
    let n = shape.len();
    let c = params.num_classes;
    let starts = [
        window_starts(shape.d, window.d, stride),
        window_starts(shape.h, window.h, stride),
        window_starts(shape.w, window.w, stride),
    ];
    let extent = [
        window.d.min(shape.d),
        window.h.min(shape.h),
        window.w.min(shape.w),
    ];

    let mut sum = vec![0.0; n * c];
    let mut count = vec![0u32; n];
    let mut f = vec![0.0; params.num_features];
    let mut p = vec![0.0; c];
    for &sd in &starts[0] {
        for &sh in &starts[1] {
            for &sw in &starts[2] {
                for i in sd..sd + extent[0] {
                    for j in sh..sh + extent[1] {
                        for k in sw..sw + extent[2] {
                            let v = shape.index(i, j, k);
                            features.fill(v, &mut f);
                            params.probs_into(&f, &mut p);
                            for (ci, pc) in p.iter().enumerate() {
                                sum[v * c + ci] += pc;
                            }
                            count[v] += 1;
                        }
                    }
                }
            }
        }
    }

    let mut probs = vec![0.0; n * c];
    let mut labels = Vec::with_capacity(n);
    for v in 0..n {
        let row = &mut sum[v * c..(v + 1) * c];
        let k = count[v] as f64;
        if count[v] > 1 {
            row.iter_mut().for_each(|x| *x /= k);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        labels.push(argmax(row) as u8);
        for (ci, x) in row.iter().enumerate() {
            probs[ci * n + v] = *x;
        }
    }
    Ok((
        LabelVolume::new(shape, c, labels)?,
        ProbVolume::new(shape, c, probs)?,
    ))
}
