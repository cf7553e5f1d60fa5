//! Rate-distortion training of a static scene: loss and gradients through
//! entropy model, prediction and rasterizer, Adam updates and anchor
//! density control.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{parse_value, CodecConfig};
use crate::entropy_model::{grid_rate, training_backward, training_forward, AnchorNoise, AnchorRate, EntropyNetworks, GridRateModel};
use crate::error::{Error, Result};
use crate::feature_grid::{GridGrad, GridSample};
use crate::math::{self, Vec3};
use crate::nn::standard_normal;
use crate::primitives::{AnchorPrimitive, FactoredCovariance, Gaussian3D, SceneModel, REF_DIM, RES_DIM};
use crate::renderer::{backprop_with_state, distortion_backward, psnr, rasterize_with_state, Camera, Image};
use crate::scalar::Real;
use crate::spatial_prediction::{derive_backward, derive_from_inputs, derive_gaussians, AnchorInputs, AnchorInputsGrad, PredictionNetworks};

/// Anchors per parallel work item; fixed so reductions are order-stable.
const CHUNK: usize = 32;

/// Named rate-distortion trade-offs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LambdaPreset {
    Low,
    Middle,
    High,
}

impl LambdaPreset {
    /// Low rate means a large lambda.
    pub fn lambda(self) -> f64 {
        match self {
            LambdaPreset::Low => 1e-3,
            LambdaPreset::Middle => 5e-4,
            LambdaPreset::High => 1e-4,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "low" => Ok(Self::Low),
            "middle" | "mid" => Ok(Self::Middle),
            "high" => Ok(Self::High),
            _ => Err(Error::parse("lambda preset", format!("'{s}' is not one of low, middle, high"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearningRates {
    /// Initial anchor-location rate, relative to the scene extent.
    pub location: f64,
    pub covariance: f64,
    pub embedding: f64,
    pub network: f64,
    pub grid: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lambda: f64,
    pub lr: LearningRates,
    /// Final location rate as a fraction of the initial one.
    pub location_lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub densify_interval: usize,
    /// Fraction of the iterations after which density control stops.
    pub densify_until: f64,
    /// Mean screen-space (NDC) gradient norm that triggers growth.
    pub densify_grad_threshold: f64,
    pub prune_opacity: f64,
    pub max_anchors: usize,
    /// Initialization voxel size as a fraction of the scene extent.
    pub voxel_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            lambda: LambdaPreset::Middle.lambda(),
            lr: LearningRates { location: 1.6e-4, covariance: 5e-3, embedding: 2.5e-3, network: 2e-3, grid: 1e-2 },
            location_lr_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-15,
            densify_interval: 100,
            densify_until: 0.6,
            densify_grad_threshold: 2e-4,
            prune_opacity: 0.005,
            max_anchors: 20_000,
            voxel_fraction: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "iterations" => self.iterations = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "lambda_preset" => self.lambda = LambdaPreset::parse(value)?.lambda(),
            "lr.location" => self.lr.location = parse_value(key, value)?,
            "lr.covariance" => self.lr.covariance = parse_value(key, value)?,
            "lr.embedding" => self.lr.embedding = parse_value(key, value)?,
            "lr.network" => self.lr.network = parse_value(key, value)?,
            "lr.grid" => self.lr.grid = parse_value(key, value)?,
            "lr.location_decay" => self.location_lr_decay = parse_value(key, value)?,
            "adam.beta1" => self.beta1 = parse_value(key, value)?,
            "adam.beta2" => self.beta2 = parse_value(key, value)?,
            "adam.eps" => self.adam_eps = parse_value(key, value)?,
            "densify.interval" => self.densify_interval = parse_value(key, value)?,
            "densify.until" => self.densify_until = parse_value(key, value)?,
            "densify.grad_threshold" => self.densify_grad_threshold = parse_value(key, value)?,
            "prune.opacity" => self.prune_opacity = parse_value(key, value)?,
            "max_anchors" => self.max_anchors = parse_value(key, value)?,
            "voxel_fraction" => self.voxel_fraction = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let lr = &self.lr;
        let rates = [lr.location, lr.covariance, lr.embedding, lr.network, lr.grid];
        if rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::InvalidArgument("learning rates must be finite and nonnegative".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument("lambda must be finite and nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if !(self.location_lr_decay > 0.0) || !(0.0..=1.0).contains(&self.densify_until) {
            return Err(Error::InvalidArgument("invalid schedule fractions".into()));
        }
        if !(self.voxel_fraction > 0.0) || self.max_anchors == 0 {
            return Err(Error::InvalidArgument("voxel fraction and anchor cap must be positive".into()));
        }
        Ok(())
    }
}

/// One training view.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub camera: Camera<f64>,
    pub image: Image<f64>,
}

/// Gradients of every trainable parameter of a scene model.
#[derive(Clone, Debug)]
pub struct SceneGrad<T> {
    /// Per anchor; the context entry is unused.
    pub anchors: Vec<AnchorInputsGrad<T>>,
    pub grid: GridGrad<T>,
    pub prediction: PredictionNetworks<T>,
    pub entropy: EntropyNetworks<T>,
    pub grid_rate: GridRateModel<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub distortion: f64,
    /// Embedding, covariance and latent bits of all anchors.
    pub primitive_bits: f64,
    pub grid_bits: f64,
    pub loss: f64,
    pub psnr: f64,
}

impl LossBreakdown {
    pub fn rate_bits(&self) -> f64 {
        self.primitive_bits + self.grid_bits
    }
}

pub struct RdEval<T> {
    pub breakdown: LossBreakdown,
    pub grad: Option<SceneGrad<T>>,
    /// Per derived Gaussian, gradient of the loss with respect to its pixel
    /// center.
    pub screen_grad: Vec<[T; 2]>,
    pub render: Image<T>,
}

struct AnchorForward<T> {
    sample: GridSample<T>,
    inputs: AnchorInputs<T>,
    rate: AnchorRate<T>,
}

/// `D + lambda * R / N` for one view, with `R` the training-mode bits of all
/// anchors and grid entries and `N` the number of derived Gaussians. Noise is
/// given per anchor; grid noise is drawn from `grid_rng` when present.
pub fn rd_loss<T: Real>(
    model: &SceneModel<T>,
    camera: &Camera<T>,
    target: &Image<T>,
    lambda: f64,
    noise: &[AnchorNoise<T>],
    grid_rng: Option<&mut dyn RngCore>,
    with_grad: bool,
) -> Result<RdEval<T>> {
    let k = model.k();
    let n_anchor = model.anchors.len();
    if noise.len() != n_anchor {
        return Err(Error::DimensionMismatch { expected: n_anchor, got: noise.len() });
    }
    let center = camera.center();
    let fwd: Vec<(AnchorForward<T>, Vec<Gaussian3D<T>>)> = (0..n_anchor)
        .into_par_iter()
        .map(|i| {
            let a = &model.anchors[i];
            let sample = model.grid.sample(&a.location)?;
            let prior = model.grid.gather(&sample);
            let (inputs, rate) = training_forward(&model.entropy, a, &model.coupled[i * k..(i + 1) * k], prior, &noise[i])?;
            let gs = derive_from_inputs(&model.prediction, &inputs, &center)?;
            Ok((AnchorForward { sample, inputs, rate }, gs))
        })
        .collect::<Result<_>>()?;
    let mut gaussians = Vec::with_capacity(n_anchor * k);
    let mut anchors_fwd = Vec::with_capacity(n_anchor);
    for (f, gs) in fwd {
        gaussians.extend(gs);
        anchors_fwd.push(f);
    }
    let (render, state) = rasterize_with_state(&gaussians, camera);
    let (distortion, image_grad) = distortion_backward(&render, target)?;
    let primitive_bits: f64 = anchors_fwd.iter().map(|f| f.rate.total().as_f64()).sum();
    let n = (model.coupled.len()).max(1) as f64;
    let rate_weight = T::lit(lambda / n);
    let step = T::lit(model.config.grid_step);

    let mut grad = None;
    let mut screen_grad = Vec::new();
    let grid_bits;
    if with_grad {
        let rg = backprop_with_state(&gaussians, camera, &state, &image_grad);
        let parts: Vec<(PredictionNetworks<T>, EntropyNetworks<T>, Vec<AnchorInputsGrad<T>>)> = (0..n_anchor)
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|idx| {
                let mut pg = model.prediction.zero_like();
                let mut eg = model.entropy.zero_like();
                let mut out = Vec::with_capacity(idx.len());
                for &i in idx {
                    let f = &anchors_fwd[i];
                    let g_in = derive_backward(&model.prediction, &f.inputs, &center, &rg.gaussians[i * k..(i + 1) * k], &mut pg);
                    let g = training_backward(
                        &model.entropy,
                        &model.anchors[i],
                        &model.coupled[i * k..(i + 1) * k],
                        &f.inputs.context,
                        &noise[i],
                        &g_in,
                        rate_weight,
                        &mut eg,
                    );
                    out.push(g);
                }
                (pg, eg, out)
            })
            .collect();
        let mut prediction = model.prediction.zero_like();
        let mut entropy = model.entropy.zero_like();
        let mut anchors = Vec::with_capacity(n_anchor);
        for (pg, eg, out) in parts {
            add_prediction(&mut prediction, &pg);
            add_entropy(&mut entropy, &eg);
            anchors.extend(out);
        }
        let mut grid = model.grid.zero_grad();
        for (g, f) in anchors.iter_mut().zip(&anchors_fwd) {
            let dpos = model.grid.backprop(&f.sample, &g.context, &mut grid);
            for a in 0..3 {
                g.location[a] += dpos[a];
            }
        }
        let mut gr = model.grid_rate.zero_like();
        grid_bits = grid_rate(&model.grid, &model.grid_rate, step, grid_rng, rate_weight, Some((&mut grid, &mut gr)))?.as_f64();
        screen_grad = rg.screen;
        grad = Some(SceneGrad { anchors, grid, prediction, entropy, grid_rate: gr });
    } else {
        grid_bits = grid_rate(&model.grid, &model.grid_rate, step, grid_rng, rate_weight, None)?.as_f64();
    }
    let loss = distortion + lambda * (primitive_bits + grid_bits) / n;
    let breakdown = LossBreakdown { distortion, primitive_bits, grid_bits, loss, psnr: psnr(&render, target)? };
    Ok(RdEval { breakdown, grad, screen_grad, render })
}

fn add_linear<T: Real>(a: &mut crate::nn::Linear<T>, b: &crate::nn::Linear<T>) {
    for (x, y) in a.params_mut().zip(b.params()) {
        *x += *y;
    }
}

fn add_prediction<T: Real>(a: &mut PredictionNetworks<T>, b: &PredictionNetworks<T>) {
    for (x, y) in a.layers_mut().into_iter().zip(b.layers()) {
        add_linear(x, y);
    }
}

fn add_entropy<T: Real>(a: &mut EntropyNetworks<T>, b: &EntropyNetworks<T>) {
    for (x, y) in a.layers_mut().into_iter().zip(b.layers()) {
        add_linear(x, y);
    }
    for (x, y) in a.bottleneck_anchor.logits.iter_mut().zip(&b.bottleneck_anchor.logits) {
        for (p, q) in x.iter_mut().zip(y) {
            *p += *q;
        }
    }
    for (x, y) in a.bottleneck_coupled.logits.iter_mut().zip(&b.bottleneck_coupled.logits) {
        for (p, q) in x.iter_mut().zip(y) {
            *p += *q;
        }
    }
}

/// Optimizer groups with separate learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Location,
    Covariance,
    Embedding,
    Network,
    Grid,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Location => "anchor locations",
            ParamGroup::Covariance => "anchor covariances",
            ParamGroup::Embedding => "embeddings",
            ParamGroup::Network => "networks",
            ParamGroup::Grid => "feature grid",
        }
    }
}

/// Shared (non-anchor) parameters as slices, in a fixed order.
fn shared_params_mut<T: Real>(m: &mut SceneModel<T>) -> Vec<(ParamGroup, &mut [T])> {
    let mut out: Vec<(ParamGroup, &mut [T])> = Vec::new();
    for l in m.prediction.layers_mut() {
        out.push((ParamGroup::Network, &mut l.weight[..]));
        out.push((ParamGroup::Network, &mut l.bias[..]));
    }
    let e = &mut m.entropy;
    for l in [&mut e.steps, &mut e.hyper_anchor, &mut e.hyper_coupled, &mut e.embedding, &mut e.coupled, &mut e.covariance] {
        out.push((ParamGroup::Network, &mut l.weight[..]));
        out.push((ParamGroup::Network, &mut l.bias[..]));
    }
    out.push((ParamGroup::Network, e.bottleneck_anchor.logits.as_flattened_mut()));
    out.push((ParamGroup::Network, e.bottleneck_coupled.logits.as_flattened_mut()));
    for t in &mut m.grid.tables {
        out.push((ParamGroup::Grid, &mut t[..]));
    }
    out.push((ParamGroup::Network, &mut m.grid_rate.log_scales[..]));
    out
}

fn shared_grads<T: Real>(g: &SceneGrad<T>) -> Vec<&[T]> {
    let mut out: Vec<&[T]> = Vec::new();
    for l in g.prediction.layers() {
        out.push(&l.weight);
        out.push(&l.bias);
    }
    for l in g.entropy.layers() {
        out.push(&l.weight);
        out.push(&l.bias);
    }
    out.push(g.entropy.bottleneck_anchor.logits.as_flattened());
    out.push(g.entropy.bottleneck_coupled.logits.as_flattened());
    for t in &g.grid {
        out.push(t);
    }
    out.push(&g.grid_rate.log_scales);
    out
}

/// Length of an anchor's parameter block: location, log-scales, rotation,
/// reference embedding and K residual embeddings.
pub fn anchor_block_len(k: usize) -> usize {
    3 + 3 + 4 + REF_DIM + RES_DIM * k
}

fn anchor_block<T: Real>(a: &AnchorPrimitive<T>, res: &[[T; RES_DIM]]) -> Vec<T> {
    let mut v = Vec::with_capacity(anchor_block_len(res.len()));
    v.extend_from_slice(&a.location);
    v.extend_from_slice(&a.covariance.log_scales);
    v.extend_from_slice(&a.covariance.rotation);
    v.extend_from_slice(&a.ref_embedding);
    for r in res {
        v.extend_from_slice(r);
    }
    v
}

fn anchor_grad_block<T: Real>(g: &AnchorInputsGrad<T>) -> Vec<T> {
    let mut v = Vec::with_capacity(anchor_block_len(g.res_embeddings.len()));
    v.extend_from_slice(&g.location);
    v.extend_from_slice(&g.log_scales);
    v.extend_from_slice(&g.rotation);
    v.extend_from_slice(&g.ref_embedding);
    for r in &g.res_embeddings {
        v.extend_from_slice(r);
    }
    v
}

fn block_group(i: usize) -> ParamGroup {
    match i {
        0..=2 => ParamGroup::Location,
        3..=9 => ParamGroup::Covariance,
        _ => ParamGroup::Embedding,
    }
}

#[derive(Clone, Debug, Default)]
pub struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> Moments<T> {
    pub fn zeros(n: usize) -> Self {
        Self { m: vec![T::zero(); n], v: vec![T::zero(); n] }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed steps.
    pub t: u64,
}

impl Adam {
    /// Bias-corrected step size for the current step.
    fn corrected(&self, lr: f64) -> f64 {
        let t = (self.t + 1) as i32;
        lr * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t))
    }

    pub(crate) fn update<T: Real>(&self, p: &mut [T], g: &[T], st: &mut Moments<T>, lr: f64) {
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let lr_t = T::lit(self.corrected(lr));
        let eps = T::lit(self.eps);
        for i in 0..p.len() {
            let gi = g[i];
            st.m[i] = b1 * st.m[i] + c1 * gi;
            st.v[i] = b2 * st.v[i] + c2 * gi * gi;
            if st.m[i] != T::zero() {
                p[i] -= lr_t * st.m[i] / (st.v[i].sqrt() + eps);
            }
        }
    }
}

/// Optimizer state and densification statistics.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub adam: Adam,
    pub anchor_moments: Vec<Moments<T>>,
    pub shared_moments: Vec<Moments<T>>,
    pub step: usize,
    /// Scene extent scaling the location learning rate.
    pub extent: f64,
    /// Per derived Gaussian: summed NDC gradient norms and visible steps.
    pub grad_sum: Vec<f64>,
    pub grad_count: Vec<u32>,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: &mut SceneModel<T>, cfg: &TrainConfig, extent: f64) -> Self {
        let shared_moments = shared_params_mut(model).iter().map(|(_, s)| Moments::zeros(s.len())).collect();
        let bl = anchor_block_len(model.k());
        Self {
            adam: Adam { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, t: 0 },
            anchor_moments: (0..model.anchors.len()).map(|_| Moments::zeros(bl)).collect(),
            shared_moments,
            step: 0,
            extent,
            grad_sum: vec![0.0; model.coupled.len()],
            grad_count: vec![0; model.coupled.len()],
        }
    }

    fn reset_stats(&mut self, n: usize) {
        self.grad_sum = vec![0.0; n];
        self.grad_count = vec![0; n];
    }
}

fn lr_of(group: ParamGroup, cfg: &TrainConfig, location_lr: f64) -> f64 {
    match group {
        ParamGroup::Location => location_lr,
        ParamGroup::Covariance => cfg.lr.covariance,
        ParamGroup::Embedding => cfg.lr.embedding,
        ParamGroup::Network => cfg.lr.network,
        ParamGroup::Grid => cfg.lr.grid,
    }
}

/// Location learning rate at `step`: log-linear decay over the run, scaled
/// by the scene extent.
pub fn location_lr(cfg: &TrainConfig, step: usize, extent: f64) -> f64 {
    let frac = if cfg.iterations > 1 { (step as f64 / (cfg.iterations - 1) as f64).min(1.0) } else { 0.0 };
    cfg.lr.location * extent * cfg.location_lr_decay.powf(frac)
}

/// First group whose gradient is not finite.
pub fn nonfinite_group<T: Real>(g: &SceneGrad<T>) -> Option<ParamGroup> {
    for a in &g.anchors {
        let b = anchor_grad_block(a);
        if let Some(i) = b.iter().position(|x| !x.is_finite()) {
            return Some(block_group(i));
        }
    }
    let grads = shared_grads(g);
    let n_grid = g.grid.len();
    let first_grid = grads.len() - 1 - n_grid;
    for (j, s) in grads.iter().enumerate() {
        if s.iter().any(|x| !x.is_finite()) {
            let grid = j >= first_grid && j < first_grid + n_grid;
            return Some(if grid { ParamGroup::Grid } else { ParamGroup::Network });
        }
    }
    None
}

/// Applies one Adam step with the given gradient.
pub fn apply_gradients<T: Real>(model: &mut SceneModel<T>, state: &mut TrainState<T>, grad: &SceneGrad<T>, cfg: &TrainConfig) {
    let k = model.k();
    let loc_lr = location_lr(cfg, state.step, state.extent);
    let adam = state.adam;
    for (i, (g, st)) in grad.anchors.iter().zip(&mut state.anchor_moments).enumerate() {
        let res: Vec<[T; RES_DIM]> = model.coupled[i * k..(i + 1) * k].iter().map(|c| c.res_embedding).collect();
        let a = &mut model.anchors[i];
        let mut p = anchor_block(a, &res);
        let gb = anchor_grad_block(g);
        // Groups are contiguous ranges of the block.
        for (lo, hi, group) in [(0, 3, ParamGroup::Location), (3, 10, ParamGroup::Covariance), (10, p.len(), ParamGroup::Embedding)] {
            let mut sub = Moments { m: st.m[lo..hi].to_vec(), v: st.v[lo..hi].to_vec() };
            adam.update(&mut p[lo..hi], &gb[lo..hi], &mut sub, lr_of(group, cfg, loc_lr));
            st.m[lo..hi].copy_from_slice(&sub.m);
            st.v[lo..hi].copy_from_slice(&sub.v);
        }
        a.location.copy_from_slice(&p[0..3]);
        a.covariance.log_scales.copy_from_slice(&p[3..6]);
        a.covariance.rotation.copy_from_slice(&p[6..10]);
        a.ref_embedding.copy_from_slice(&p[10..10 + REF_DIM]);
        for (j, c) in model.coupled[i * k..(i + 1) * k].iter_mut().enumerate() {
            let o = 10 + REF_DIM + j * RES_DIM;
            c.res_embedding.copy_from_slice(&p[o..o + RES_DIM]);
        }
    }
    let grads = shared_grads(grad);
    for (((group, p), g), st) in shared_params_mut(model).into_iter().zip(grads).zip(&mut state.shared_moments) {
        adam.update(p, g, st, lr_of(group, cfg, loc_lr));
    }
    model.latents = None;
    state.adam.t += 1;
    state.step += 1;
}

/// One optimization step on one view. Returns the loss terms before the
/// update. A non-finite loss or gradient aborts with the offending group.
pub fn train_step<T: Real>(
    model: &mut SceneModel<T>,
    state: &mut TrainState<T>,
    view: &TrainView,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let k = model.k();
    let noise: Vec<AnchorNoise<T>> = (0..model.anchors.len()).map(|_| AnchorNoise::sample(k, rng)).collect();
    let camera = view.camera.cast::<T>();
    let target = view.image.cast::<T>();
    let eval = rd_loss(model, &camera, &target, cfg.lambda, &noise, Some(rng as &mut dyn RngCore), true)?;
    let b = eval.breakdown;
    if !b.loss.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {} (distortion {}, rate {} bits)", state.step, b.distortion, b.rate_bits())));
    }
    let grad = eval.grad.expect("gradient requested");
    if let Some(g) = nonfinite_group(&grad) {
        return Err(Error::NonFinite(format!("gradient of {} at step {}", g.name(), state.step)));
    }
    // Pixel to NDC gradient scaling.
    let (sx, sy) = (camera.width as f64 / 2.0, camera.height as f64 / 2.0);
    for (i, s) in eval.screen_grad.iter().enumerate() {
        let (gx, gy) = (s[0].as_f64() * sx, s[1].as_f64() * sy);
        let n = (gx * gx + gy * gy).sqrt();
        if n > 0.0 && i < state.grad_sum.len() {
            state.grad_sum[i] += n;
            state.grad_count[i] += 1;
        }
    }
    apply_gradients(model, state, &grad, cfg);
    Ok(b)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensityReport {
    pub added: usize,
    pub pruned: usize,
}

/// Grows anchors at the offset location of the highest-gradient derived
/// Gaussian of every anchor whose mean screen gradient exceeds the
/// threshold, then prunes anchors whose derived Gaussians are nearly
/// transparent in every given view. Optimizer moments follow the anchors.
pub fn anchor_density_control<T: Real>(
    model: &mut SceneModel<T>,
    state: &mut TrainState<T>,
    cameras: &[Camera<T>],
    cfg: &TrainConfig,
) -> Result<DensityReport> {
    let k = model.k();
    let n = model.anchors.len();
    let probe_cam = cameras.first().cloned();
    let mut report = DensityReport::default();
    let mut new_anchors = Vec::new();
    if state.grad_sum.len() == n * k {
        for i in 0..n {
            let range = i * k..(i + 1) * k;
            let count: u32 = state.grad_count[range.clone()].iter().sum();
            if count == 0 {
                continue;
            }
            let mean = state.grad_sum[range.clone()].iter().sum::<f64>() / count as f64;
            if mean <= cfg.densify_grad_threshold {
                continue;
            }
            let best = range
                .clone()
                .filter(|j| state.grad_count[*j] > 0)
                .max_by(|a, b| {
                    let ga = state.grad_sum[*a] / state.grad_count[*a] as f64;
                    let gb = state.grad_sum[*b] / state.grad_count[*b] as f64;
                    ga.total_cmp(&gb).then(b.cmp(a))
                })
                .expect("count is positive");
            let Some(cam) = probe_cam.as_ref() else { break };
            let gs = derive_gaussians(model, i, cam)?;
            let loc = gs[best - i * k].mean;
            let far = math::norm3(&math::sub3(&loc, &model.anchors[i].location)).as_f64() > model.config.location_step;
            if far && loc.iter().all(|x| x.is_finite()) {
                let mut a = model.anchors[i].clone();
                a.location = loc;
                let res: Vec<[T; RES_DIM]> = model.coupled[i * k..(i + 1) * k].iter().map(|c| c.res_embedding).collect();
                new_anchors.push((a, res));
            }
        }
    }
    let room = cfg.max_anchors.saturating_sub(n);
    new_anchors.truncate(room);
    let bl = anchor_block_len(k);
    for (a, res) in new_anchors {
        model.push_anchor(a, &res)?;
        state.anchor_moments.push(Moments::zeros(bl));
        report.added += 1;
    }

    if !cameras.is_empty() {
        let opacities: Vec<f64> = (0..model.anchors.len())
            .into_par_iter()
            .map(|i| {
                let mut best = 0.0f64;
                for c in cameras {
                    for g in derive_gaussians(model, i, c)? {
                        best = best.max(g.opacity.as_f64());
                    }
                }
                Ok(best)
            })
            .collect::<Result<_>>()?;
        let mut keep: Vec<bool> = opacities.iter().map(|o| *o >= cfg.prune_opacity).collect();
        if !keep.iter().any(|x| *x) && !keep.is_empty() {
            let top = (0..opacities.len()).max_by(|a, b| opacities[*a].total_cmp(&opacities[*b]).then(b.cmp(a))).unwrap();
            keep[top] = true;
        }
        report.pruned = keep.iter().filter(|x| !**x).count();
        if report.pruned > 0 {
            model.retain_anchors(&keep);
            let moments = std::mem::take(&mut state.anchor_moments);
            state.anchor_moments = moments.into_iter().zip(&keep).filter(|(_, k)| **k).map(|(m, _)| m).collect();
        }
    }
    state.reset_stats(model.coupled.len());
    Ok(report)
}

/// Centroids of the points falling in each occupied voxel, ordered by voxel.
pub fn voxel_downsample(points: &[Vec3<f64>], voxel: f64) -> Result<Vec<Vec3<f64>>> {
    if !(voxel > 0.0 && voxel.is_finite()) {
        return Err(Error::InvalidArgument(format!("voxel size must be positive, got {voxel}")));
    }
    let mut cells: BTreeMap<[i64; 3], ([f64; 3], usize)> = BTreeMap::new();
    for p in points {
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("input point".into()));
        }
        let key = [(p[0] / voxel).floor() as i64, (p[1] / voxel).floor() as i64, (p[2] / voxel).floor() as i64];
        let e = cells.entry(key).or_insert(([0.0; 3], 0));
        for a in 0..3 {
            e.0[a] += p[a];
        }
        e.1 += 1;
    }
    Ok(cells.values().map(|(s, n)| [s[0] / *n as f64, s[1] / *n as f64, s[2] / *n as f64]).collect())
}

/// Axis-aligned bounds of the points and the length of their diagonal.
pub fn point_bounds(points: &[Vec3<f64>]) -> Result<(Vec3<f64>, Vec3<f64>, f64)> {
    let first = points.first().ok_or_else(|| Error::InvalidArgument("empty point cloud".into()))?;
    let (mut lo, mut hi) = (*first, *first);
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = math::norm3(&math::sub3(&hi, &lo));
    Ok((lo, hi, extent))
}

/// Anchors at voxel centroids of the point cloud with isotropic scales from
/// the mean distance to the three nearest neighbors.
pub fn initial_model(points: &[Vec3<f64>], codec: &CodecConfig, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<(SceneModel<f64>, f64)> {
    let (lo, hi, extent) = point_bounds(points)?;
    let extent = if extent > 1e-6 { extent } else { 1.0 };
    let pad = 0.1 * extent;
    let bmin = [lo[0] - pad, lo[1] - pad, lo[2] - pad];
    let bmax = [hi[0] + pad, hi[1] + pad, hi[2] + pad];
    let voxel = cfg.voxel_fraction * extent;
    let centers = voxel_downsample(points, voxel)?;
    let mut model = SceneModel::empty(codec.clone(), bmin, bmax, rng)?;
    let scales = neighbor_scales(&centers, voxel);
    for (c, s) in centers.iter().zip(scales) {
        let anchor = AnchorPrimitive {
            location: *c,
            covariance: FactoredCovariance::isotropic(s),
            ref_embedding: std::array::from_fn(|_| 0.1 * standard_normal(rng)),
        };
        let res: Vec<[f64; RES_DIM]> = (0..codec.k).map(|_| std::array::from_fn(|_| 0.5 * standard_normal(rng))).collect();
        model.push_anchor(anchor, &res)?;
    }
    Ok((model, extent))
}

fn neighbor_scales(centers: &[Vec3<f64>], voxel: f64) -> Vec<f64> {
    centers
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut d: Vec<f64> = centers.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, o)| math::norm3(&math::sub3(c, o))).collect();
            d.sort_by(f64::total_cmp);
            let near = &d[..d.len().min(3)];
            if near.is_empty() {
                return voxel.max(1e-6);
            }
            (near.iter().sum::<f64>() / near.len() as f64).max(0.5 * voxel).max(1e-6)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub anchors: usize,
    pub losses: LossBreakdown,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = String::from("step,anchors,distortion,primitive_bits,grid_bits,loss,psnr\n");
    for r in rows {
        let l = &r.losses;
        body.push_str(&format!(
            "{},{},{:.6},{:.1},{:.1},{:.6},{:.3}\n",
            r.step, r.anchors, l.distortion, l.primitive_bits, l.grid_bits, l.loss, l.psnr
        ));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    pub model: SceneModel<f64>,
    pub log: Vec<LogRow>,
}

/// Runs `cfg.iterations` steps from `model`, cycling through shuffled views
/// and applying density control on schedule.
pub fn train_model(model: SceneModel<f64>, views: &[TrainView], extent: f64, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::InvalidArgument("no training views".into()));
    }
    let mut model = model;
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a11);
    let mut state = TrainState::new(&mut model, cfg, extent);
    let cameras: Vec<Camera<f64>> = views.iter().map(|v| v.camera.clone()).collect();
    let densify_end = (cfg.densify_until * cfg.iterations as f64) as usize;
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        if order.is_empty() {
            order = (0..views.len()).collect();
            order.shuffle(&mut rng);
        }
        let v = order.pop().expect("refilled");
        let losses = train_step(&mut model, &mut state, &views[v], cfg, &mut rng)?;
        log.push(LogRow { step: it, anchors: model.anchors.len(), losses });
        let done = it + 1;
        if cfg.densify_interval > 0 && done % cfg.densify_interval == 0 && done < densify_end {
            let r = anchor_density_control(&mut model, &mut state, &cameras, cfg)?;
            log::debug!("step {done}: {} anchors added, {} pruned, {} total", r.added, r.pruned, model.anchors.len());
        }
        if done % 100 == 0 || done == cfg.iterations {
            log::info!(
                "step {done}/{}: loss {:.5} D {:.5} rate {:.0} bits psnr {:.2} anchors {}",
                cfg.iterations,
                losses.loss,
                losses.distortion,
                losses.rate_bits(),
                losses.psnr,
                model.anchors.len()
            );
        }
    }
    Ok(TrainOutcome { model, log })
}

/// Initializes from the point cloud and trains.
pub fn train_static(views: &[TrainView], points: &[Vec3<f64>], codec: &CodecConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (model, extent) = initial_model(points, codec, cfg, &mut rng)?;
    log::info!("initialized {} anchors from {} points", model.anchors.len(), points.len());
    train_model(model, views, extent, cfg)
}

/// One evaluated rate-distortion point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    /// Unknown for models read back from a bare bitstream.
    pub lambda: Option<f64>,
    pub bytes: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// CSV with columns lambda, bytes, psnr, ssim; one row per point sorted by
/// size (ties by lambda).
pub fn rd_csv(points: &[RdPoint]) -> Result<String> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument(format!("a rate-distortion table needs at least 2 points, got {}", points.len())));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.bytes.cmp(&b.bytes).then(a.lambda.unwrap_or(f64::NAN).total_cmp(&b.lambda.unwrap_or(f64::NAN))));
    let mut s = String::from("lambda,bytes,psnr,ssim\n");
    for p in sorted {
        let l = p.lambda.map(|l| l.to_string()).unwrap_or_default();
        s.push_str(&format!("{l},{},{:.4},{:.6}\n", p.bytes, p.psnr, p.ssim));
    }
    Ok(s)
}

/// Address of one scalar parameter, for gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRef {
    Location(usize, usize),
    LogScale(usize, usize),
    Rotation(usize, usize),
    RefEmbedding(usize, usize),
    /// Coupled primitive index and dimension.
    ResEmbedding(usize, usize),
    Grid(usize, usize),
    Prediction(usize, usize),
    Entropy(usize, usize),
    BottleneckAnchor(usize, usize),
    BottleneckCoupled(usize, usize),
    GridRate(usize),
}

fn linear_param<T>(l: &mut crate::nn::Linear<T>, i: usize) -> Option<&mut T> {
    let nw = l.weight.len();
    if i < nw {
        l.weight.get_mut(i)
    } else {
        l.bias.get_mut(i - nw)
    }
}

fn linear_grad<T: Copy>(l: &crate::nn::Linear<T>, i: usize) -> Option<T> {
    let nw = l.weight.len();
    if i < nw {
        l.weight.get(i).copied()
    } else {
        l.bias.get(i - nw).copied()
    }
}

impl ParamRef {
    /// Whether the parameter influences the rendered image (and not only
    /// the rate).
    pub fn through_renderer(&self) -> bool {
        match self {
            ParamRef::Entropy(l, _) => *l == 0,
            ParamRef::BottleneckAnchor(..) | ParamRef::BottleneckCoupled(..) | ParamRef::GridRate(_) => false,
            _ => true,
        }
    }

    pub fn get_mut<'a, T: Real>(&self, m: &'a mut SceneModel<T>) -> Option<&'a mut T> {
        match *self {
            ParamRef::Location(i, a) => m.anchors.get_mut(i)?.location.get_mut(a),
            ParamRef::LogScale(i, a) => m.anchors.get_mut(i)?.covariance.log_scales.get_mut(a),
            ParamRef::Rotation(i, a) => m.anchors.get_mut(i)?.covariance.rotation.get_mut(a),
            ParamRef::RefEmbedding(i, d) => m.anchors.get_mut(i)?.ref_embedding.get_mut(d),
            ParamRef::ResEmbedding(c, d) => m.coupled.get_mut(c)?.res_embedding.get_mut(d),
            ParamRef::Grid(l, e) => m.grid.tables.get_mut(l)?.get_mut(e),
            ParamRef::Prediction(l, i) => linear_param(m.prediction.layers_mut().into_iter().nth(l)?, i),
            ParamRef::Entropy(l, i) => linear_param(m.entropy.layers_mut().into_iter().nth(l)?, i),
            ParamRef::BottleneckAnchor(d, b) => m.entropy.bottleneck_anchor.logits.get_mut(d)?.get_mut(b),
            ParamRef::BottleneckCoupled(d, b) => m.entropy.bottleneck_coupled.logits.get_mut(d)?.get_mut(b),
            ParamRef::GridRate(l) => m.grid_rate.log_scales.get_mut(l),
        }
    }

    pub fn grad<T: Real>(&self, g: &SceneGrad<T>, k: usize) -> Option<T> {
        match *self {
            ParamRef::Location(i, a) => g.anchors.get(i)?.location.get(a).copied(),
            ParamRef::LogScale(i, a) => g.anchors.get(i)?.log_scales.get(a).copied(),
            ParamRef::Rotation(i, a) => g.anchors.get(i)?.rotation.get(a).copied(),
            ParamRef::RefEmbedding(i, d) => g.anchors.get(i)?.ref_embedding.get(d).copied(),
            ParamRef::ResEmbedding(c, d) => g.anchors.get(c / k)?.res_embeddings.get(c % k)?.get(d).copied(),
            ParamRef::Grid(l, e) => g.grid.get(l)?.get(e).copied(),
            ParamRef::Prediction(l, i) => linear_grad(g.prediction.layers().into_iter().nth(l)?, i),
            ParamRef::Entropy(l, i) => linear_grad(g.entropy.layers().into_iter().nth(l)?, i),
            ParamRef::BottleneckAnchor(d, b) => g.entropy.bottleneck_anchor.logits.get(d)?.get(b).copied(),
            ParamRef::BottleneckCoupled(d, b) => g.entropy.bottleneck_coupled.logits.get(d)?.get(b).copied(),
            ParamRef::GridRate(l) => g.grid_rate.log_scales.get(l).copied(),
        }
    }
}

/// `n` parameters per group drawn at random; grid entries are drawn among
/// those touched by some anchor.
pub fn sample_params<T: Real>(model: &SceneModel<T>, n: usize, rng: &mut impl Rng) -> Result<Vec<ParamRef>> {
    let na = model.anchors.len();
    if na == 0 {
        return Err(Error::InvalidArgument("gradient check needs anchors".into()));
    }
    let fd = model.grid.config.feature_dim;
    let mut out = Vec::new();
    for _ in 0..n {
        let i = rng.gen_range(0..na);
        out.push(ParamRef::Location(i, rng.gen_range(0..3)));
        out.push(ParamRef::LogScale(rng.gen_range(0..na), rng.gen_range(0..3)));
        out.push(ParamRef::Rotation(rng.gen_range(0..na), rng.gen_range(0..4)));
        out.push(ParamRef::RefEmbedding(rng.gen_range(0..na), rng.gen_range(0..REF_DIM)));
        out.push(ParamRef::ResEmbedding(rng.gen_range(0..model.coupled.len()), rng.gen_range(0..RES_DIM)));
        let s = model.grid.sample(&model.anchors[rng.gen_range(0..na)].location)?;
        let l = rng.gen_range(0..s.slots.len());
        let slot = s.slots[l][rng.gen_range(0..8)];
        out.push(ParamRef::Grid(l, slot * fd + rng.gen_range(0..fd)));
        let pl = rng.gen_range(0..5);
        out.push(ParamRef::Prediction(pl, rng.gen_range(0..model.prediction.layers()[pl].param_count())));
        let el = rng.gen_range(0..6);
        out.push(ParamRef::Entropy(el, rng.gen_range(0..model.entropy.layers()[el].param_count())));
        let bins = crate::entropy_model::BOTTLENECK_BINS;
        out.push(ParamRef::BottleneckAnchor(rng.gen_range(0..model.entropy.bottleneck_anchor.dims()), rng.gen_range(0..bins)));
        out.push(ParamRef::BottleneckCoupled(rng.gen_range(0..model.entropy.bottleneck_coupled.dims()), rng.gen_range(0..bins)));
        out.push(ParamRef::GridRate(rng.gen_range(0..model.grid_rate.log_scales.len())));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub param: ParamRef,
    pub analytic: f64,
    pub numeric: f64,
    /// Gradient magnitude below which rounding in the loss dominates the
    /// difference quotient (taken as 1e4 rounding units of the loss over h).
    pub resolution: f64,
}

impl GradCheck {
    /// Relative error, with the denominator floored at the resolution.
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(self.resolution)
    }
}

/// Central finite differences of [`rd_loss`] with frozen noise (and no grid
/// noise) against its analytic gradient.
pub fn gradient_check(
    model: &SceneModel<f64>,
    camera: &Camera<f64>,
    target: &Image<f64>,
    lambda: f64,
    noise: &[AnchorNoise<f64>],
    params: &[ParamRef],
    h: f64,
) -> Result<Vec<GradCheck>> {
    let eval = rd_loss(model, camera, target, lambda, noise, None, true)?;
    let grad = eval.grad.expect("gradient requested");
    let k = model.k();
    let resolution = 1e4 * f64::EPSILON * eval.breakdown.loss.abs().max(1.0) / h;
    params
        .par_iter()
        .map(|p| {
            let analytic = p.grad(&grad, k).ok_or_else(|| Error::InvalidArgument(format!("no parameter {p:?}")))?;
            let mut m = model.clone();
            let at = |m: &mut SceneModel<f64>, v: f64| -> Result<f64> {
                *p.get_mut(m).expect("checked above") = v;
                Ok(rd_loss(m, camera, target, lambda, noise, None, false)?.breakdown.loss)
            };
            let x = *p.get_mut(&mut m).ok_or_else(|| Error::InvalidArgument(format!("no parameter {p:?}")))?;
            let numeric = (at(&mut m, x + h)? - at(&mut m, x - h)?) / (2.0 * h);
            Ok(GradCheck { param: *p, analytic, numeric, resolution })
        })
        .collect()
}
