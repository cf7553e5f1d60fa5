//! Rate estimation for quantized primitive parameters.
//!
//! Each anchor's reference embedding, covariance factors and the residual
//! embeddings of its coupled primitives are modeled as discretized Gaussians
//! whose parameters come from the spatial prior (a grid lookup at the anchor
//! location) and, for embeddings, a quantized hyperprior latent. The latents
//! themselves are coded with a factorized, per-dimension bottleneck.
//!
//! Training uses the additive-uniform-noise surrogate of quantization; exact
//! mode evaluates the same distributions on quantized values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_grid::{FeatureGrid, GridGrad};
use crate::nn::Linear;
use crate::primitives::{AnchorPrimitive, CoupledPrimitive, SceneModel, COV_DIM, HYPER_DIM, REF_DIM, RES_DIM};
use crate::scalar::Real;
use crate::spatial_prediction::{AnchorInputs, AnchorInputsGrad};

/// Smallest probability any coded bin may take.
pub const PROB_FLOOR: f64 = 5.960_464_477_539_063e-8; // 2^-24
pub const STEP_FLOOR: f64 = 1e-4;
pub const SCALE_FLOOR: f64 = 1e-6;
/// Hyperprior latents live on the integers of `[-LATENT_BOUND, LATENT_BOUND]`.
pub const LATENT_BOUND: i32 = 8;
/// Unit bins centered on the latent integers.
pub const BOTTLENECK_BINS: usize = 2 * LATENT_BOUND as usize + 1;
const BOTTLENECK_LOW: f64 = -(LATENT_BOUND as f64) - 0.5;

/// Per-anchor quantization steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizationSteps<T> {
    pub embedding: T,
    pub residual: T,
    pub covariance: T,
}

/// Discretized-Gaussian parameters, one pair per coded element.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyParams<T> {
    pub mean: Vec<T>,
    pub scale: Vec<T>,
}

/// Per-dimension piecewise-linear CDF with knots at the integers of
/// `[-8, 8]`; bin masses are the softmax of learnable logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizedBottleneck<T> {
    pub logits: Vec<[T; BOTTLENECK_BINS]>,
}

impl<T: Real> FactorizedBottleneck<T> {
    pub fn uniform(dims: usize) -> Self {
        Self { logits: vec![[T::zero(); BOTTLENECK_BINS]; dims] }
    }

    /// Mass concentrated around zero.
    pub fn peaked(dims: usize) -> Self {
        let row = std::array::from_fn(|b| {
            let center = b as f64 - LATENT_BOUND as f64;
            T::lit(-1.5 * center.abs())
        });
        Self { logits: vec![row; dims] }
    }

    pub fn dims(&self) -> usize {
        self.logits.len()
    }

    pub fn masses(&self, dim: usize) -> [T; BOTTLENECK_BINS] {
        let l = &self.logits[dim];
        let m = l.iter().fold(T::neg_infinity(), |a, b| a.max(*b));
        let e: [T; BOTTLENECK_BINS] = std::array::from_fn(|i| (l[i] - m).exp());
        let s: T = e.iter().copied().sum();
        std::array::from_fn(|i| e[i] / s)
    }

    pub fn cdf(&self, dim: usize, x: T) -> T {
        cdf_from_masses(&self.masses(dim), x)
    }

    /// Unclamped probability of the unit interval centered at `y`.
    pub fn interval_prob(&self, dim: usize, y: T) -> T {
        let m = self.masses(dim);
        let half = T::lit(0.5);
        cdf_from_masses(&m, y + half) - cdf_from_masses(&m, y - half)
    }

    /// Clamped bits of one latent value.
    pub fn bits(&self, dim: usize, y: T) -> T {
        -(self.interval_prob(dim, y).max(T::lit(PROB_FLOOR))).log2()
    }

    /// Bits of a quantized latent vector.
    pub fn bottleneck_bits(&self, q: &[i8]) -> T {
        q.iter().enumerate().map(|(d, v)| self.bits(d, T::lit(*v as f64))).sum()
    }

    /// Accumulates logit gradients for `g` on the bits of `y`, returns `d bits/dy`.
    pub fn bits_backward(&self, dim: usize, y: T, g: T, grad: &mut FactorizedBottleneck<T>) -> T {
        let m = self.masses(dim);
        let half = T::lit(0.5);
        let p = cdf_from_masses(&m, y + half) - cdf_from_masses(&m, y - half);
        if p < T::lit(PROB_FLOOR) {
            return T::zero();
        }
        let dbits_dp = -g / (p * T::LN_2());
        let (hi_d, hi_bin) = cdf_mass_partials(y + half);
        let (lo_d, lo_bin) = cdf_mass_partials(y - half);
        let mut dm = [T::zero(); BOTTLENECK_BINS];
        for b in 0..BOTTLENECK_BINS {
            dm[b] = (hi_d(b) - lo_d(b)) * dbits_dp;
        }
        // Softmax backward.
        let dot: T = (0..BOTTLENECK_BINS).map(|b| dm[b] * m[b]).sum();
        for b in 0..BOTTLENECK_BINS {
            grad.logits[dim][b] += m[b] * (dm[b] - dot);
        }
        let dens = |bin: Option<usize>| bin.map(|b| m[b]).unwrap_or(T::zero());
        (dens(hi_bin) - dens(lo_bin)) * dbits_dp
    }

    pub fn zero_like(&self) -> Self {
        Self::uniform(self.dims())
    }

    pub fn cast<U: Real>(&self) -> FactorizedBottleneck<U> {
        FactorizedBottleneck { logits: self.logits.iter().map(crate::scalar::cast_arr).collect() }
    }
}

fn cdf_from_masses<T: Real>(m: &[T; BOTTLENECK_BINS], x: T) -> T {
    let u = x - T::lit(BOTTLENECK_LOW);
    if u <= T::zero() {
        return T::zero();
    }
    if u >= T::lit(BOTTLENECK_BINS as f64) {
        return T::one();
    }
    let b = u.floor().to_usize().unwrap_or(0).min(BOTTLENECK_BINS - 1);
    let mut c: T = m[..b].iter().copied().sum();
    c += (u - T::lit(b as f64)) * m[b];
    c
}

/// `dCDF(x)/dm_b` as a closure, plus the bin containing `x` (if inside).
fn cdf_mass_partials<T: Real>(x: T) -> (impl Fn(usize) -> T, Option<usize>) {
    let u = x - T::lit(BOTTLENECK_LOW);
    let n = BOTTLENECK_BINS;
    let (full, frac, bin) = if u <= T::zero() {
        (0, T::zero(), None)
    } else if u >= T::lit(n as f64) {
        (n, T::zero(), None)
    } else {
        let b = u.floor().to_usize().unwrap_or(0).min(n - 1);
        (b, u - T::lit(b as f64), Some(b))
    };
    (
        move |j: usize| {
            if j < full {
                T::one()
            } else if j == full && bin.is_some() {
                frac
            } else {
                T::zero()
            }
        },
        bin,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyNetworks<T> {
    /// Prior -> raw (embedding, residual, covariance) steps.
    pub steps: Linear<T>,
    /// Reference embedding -> anchor latent.
    pub hyper_anchor: Linear<T>,
    /// Residual embedding -> coupled latent.
    pub hyper_coupled: Linear<T>,
    /// `latent ⊕ prior` -> (means, raw scales) of the reference embedding.
    pub embedding: Linear<T>,
    /// `latent ⊕ prior` -> (means, raw scales) of a residual embedding.
    pub coupled: Linear<T>,
    /// Prior -> (means, raw scales) of the covariance factors.
    pub covariance: Linear<T>,
    pub bottleneck_anchor: FactorizedBottleneck<T>,
    pub bottleneck_coupled: FactorizedBottleneck<T>,
}

/// Inverse of softplus, for bias initialization.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl<T: Real> EntropyNetworks<T> {
    pub fn zeros(prior_dim: usize) -> Self {
        Self {
            steps: Linear::zeros(prior_dim, 3),
            hyper_anchor: Linear::zeros(REF_DIM, HYPER_DIM),
            hyper_coupled: Linear::zeros(RES_DIM, HYPER_DIM),
            embedding: Linear::zeros(HYPER_DIM + prior_dim, 2 * REF_DIM),
            coupled: Linear::zeros(HYPER_DIM + prior_dim, 2 * RES_DIM),
            covariance: Linear::zeros(prior_dim, 2 * COV_DIM),
            bottleneck_anchor: FactorizedBottleneck::uniform(HYPER_DIM),
            bottleneck_coupled: FactorizedBottleneck::uniform(HYPER_DIM),
        }
    }

    /// Training initialization with the given initial steps and scales.
    pub fn init(prior_dim: usize, steps: [f64; 3], scale: f64, rng: &mut impl Rng) -> Self {
        let sb: Vec<f64> = steps.iter().map(|s| softplus_inverse(*s)).collect();
        let beta = softplus_inverse(scale);
        let half = |n: usize| -> Vec<f64> { (0..2 * n).map(|i| if i < n { 0.0 } else { beta }).collect() };
        Self {
            steps: Linear::random(prior_dim, 3, 0.01, rng).with_bias(&sb),
            hyper_anchor: Linear::random(REF_DIM, HYPER_DIM, 0.05, rng),
            hyper_coupled: Linear::random(RES_DIM, HYPER_DIM, 0.05, rng),
            embedding: Linear::random(HYPER_DIM + prior_dim, 2 * REF_DIM, 0.01, rng).with_bias(&half(REF_DIM)),
            coupled: Linear::random(HYPER_DIM + prior_dim, 2 * RES_DIM, 0.01, rng).with_bias(&half(RES_DIM)),
            covariance: Linear::random(prior_dim, 2 * COV_DIM, 0.01, rng).with_bias(&half(COV_DIM)),
            bottleneck_anchor: FactorizedBottleneck::peaked(HYPER_DIM),
            bottleneck_coupled: FactorizedBottleneck::peaked(HYPER_DIM),
        }
    }

    pub fn prior_dim(&self) -> usize {
        self.steps.inputs
    }

    pub fn layers(&self) -> [&Linear<T>; 6] {
        [&self.steps, &self.hyper_anchor, &self.hyper_coupled, &self.embedding, &self.coupled, &self.covariance]
    }

    pub fn layers_mut(&mut self) -> [&mut Linear<T>; 6] {
        [&mut self.steps, &mut self.hyper_anchor, &mut self.hyper_coupled, &mut self.embedding, &mut self.coupled, &mut self.covariance]
    }

    pub fn zero_like(&self) -> Self {
        Self {
            steps: self.steps.zero_like(),
            hyper_anchor: self.hyper_anchor.zero_like(),
            hyper_coupled: self.hyper_coupled.zero_like(),
            embedding: self.embedding.zero_like(),
            coupled: self.coupled.zero_like(),
            covariance: self.covariance.zero_like(),
            bottleneck_anchor: self.bottleneck_anchor.zero_like(),
            bottleneck_coupled: self.bottleneck_coupled.zero_like(),
        }
    }

    pub fn cast<U: Real>(&self) -> EntropyNetworks<U> {
        EntropyNetworks {
            steps: self.steps.cast(),
            hyper_anchor: self.hyper_anchor.cast(),
            hyper_coupled: self.hyper_coupled.cast(),
            embedding: self.embedding.cast(),
            coupled: self.coupled.cast(),
            covariance: self.covariance.cast(),
            bottleneck_anchor: self.bottleneck_anchor.cast(),
            bottleneck_coupled: self.bottleneck_coupled.cast(),
        }
    }
}

/// `(round(value/step), round(value/step)*step)` with ties to even.
pub fn quantize<T: Real>(value: T, step: T) -> Result<(i64, T)> {
    if !(step > T::zero()) {
        return Err(Error::InvalidArgument(format!("quantization step must be positive, got {step}")));
    }
    let q = (value / step).round_ties_even();
    let i = q.to_i64().ok_or_else(|| Error::NonFinite("quantization index".into()))?;
    Ok((i, q * step))
}

/// Additive uniform-noise stand-in for quantization; `noise` is in `[-1/2, 1/2)`.
pub fn noisy_surrogate<T: Real>(value: T, step: T, noise: T) -> T {
    value + step * noise
}

fn bin_bounds<T: Real>(value: T, mean: T, scale: T, step: T) -> (T, T) {
    let half = step * T::lit(0.5);
    ((value - mean - half) / scale, (value - mean + half) / scale)
}

/// Probability of the bin `[a, b]` in standard-normal units, computed on the
/// tail side that avoids cancellation.
fn normal_interval<T: Real>(a: T, b: T) -> T {
    if a > T::zero() {
        (-a).normal_cdf() - (-b).normal_cdf()
    } else {
        b.normal_cdf() - a.normal_cdf()
    }
}

fn normal_pdf<T: Real>(x: T) -> T {
    (-(x * x) * T::lit(0.5)).exp() / (T::lit(2.0) * T::PI()).sqrt()
}

/// Unclamped probability mass of the quantization bin around `value`.
pub fn discrete_gaussian_prob<T: Real>(value: T, mean: T, scale: T, step: T) -> T {
    let (a, b) = bin_bounds(value, mean, scale, step);
    normal_interval(a, b)
}

/// `-log2 max(p, 2^-24)` for the bin of width `step` centered on `value`.
pub fn discrete_gaussian_bits<T: Real>(value: T, mean: T, scale: T, step: T) -> T {
    -(discrete_gaussian_prob(value, mean, scale, step).max(T::lit(PROB_FLOOR))).log2()
}

/// Partial derivatives of [`discrete_gaussian_bits`] with respect to
/// `(value, mean, scale, step)`; zero where the probability is clamped.
pub fn discrete_gaussian_bits_grad<T: Real>(value: T, mean: T, scale: T, step: T) -> [T; 4] {
    let (a, b) = bin_bounds(value, mean, scale, step);
    let p = normal_interval(a, b);
    if !(p >= T::lit(PROB_FLOOR)) {
        return [T::zero(); 4];
    }
    let (pa, pb) = (normal_pdf(a), normal_pdf(b));
    let k = -T::one() / (p * T::LN_2());
    let dv = (pb - pa) / scale;
    let dstep = (pb + pa) / (T::lit(2.0) * scale);
    let dscale = (pa * a - pb * b) / scale;
    [k * dv, -k * dv, k * dscale, k * dstep]
}

fn floored_softplus<T: Real>(raw: T, floor: f64) -> (T, T) {
    let s = raw.softplus();
    if s > T::lit(floor) {
        (s, raw.sigmoid())
    } else {
        (T::lit(floor), T::zero())
    }
}

pub fn predict_steps<T: Real>(nets: &EntropyNetworks<T>, prior: &[T]) -> Result<QuantizationSteps<T>> {
    let r = nets.steps.forward(prior)?;
    Ok(QuantizationSteps {
        embedding: floored_softplus(r[0], STEP_FLOOR).0,
        residual: floored_softplus(r[1], STEP_FLOOR).0,
        covariance: floored_softplus(r[2], STEP_FLOOR).0,
    })
}

fn split_params<T: Real>(raw: &[T]) -> EntropyParams<T> {
    let n = raw.len() / 2;
    EntropyParams { mean: raw[..n].to_vec(), scale: raw[n..].iter().map(|r| floored_softplus(*r, SCALE_FLOOR).0).collect() }
}

fn concat<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// Reference-embedding parameters from `latent ⊕ prior`.
pub fn predict_embedding_entropy_params<T: Real>(latent: &[T], prior: &[T], nets: &EntropyNetworks<T>) -> Result<EntropyParams<T>> {
    Ok(split_params(&nets.embedding.forward(&concat(latent, prior))?))
}

/// Residual-embedding parameters from `latent ⊕ prior`.
pub fn predict_coupled_entropy_params<T: Real>(latent: &[T], prior: &[T], nets: &EntropyNetworks<T>) -> Result<EntropyParams<T>> {
    Ok(split_params(&nets.coupled.forward(&concat(latent, prior))?))
}

/// Covariance parameters from the prior alone.
pub fn predict_covariance_entropy_params<T: Real>(prior: &[T], nets: &EntropyNetworks<T>) -> Result<EntropyParams<T>> {
    Ok(split_params(&nets.covariance.forward(prior)?))
}

/// Backward of a (means, floored-softplus scales) head for gradients on the
/// split parameters; returns the input gradient.
fn params_backward<T: Real>(head: &Linear<T>, x: &[T], g_mean: &[T], g_scale: &[T], grad: &mut Linear<T>) -> Vec<T> {
    let raw = head.forward_unchecked(x);
    let n = raw.len() / 2;
    let mut gy = vec![T::zero(); 2 * n];
    for i in 0..n {
        gy[i] = g_mean[i];
        gy[n + i] = g_scale[i] * floored_softplus(raw[n + i], SCALE_FLOOR).1;
    }
    head.backward(x, &gy, grad)
}

/// Continuous latent before rounding, clamped to the bottleneck support.
pub fn hyper_latent<T: Real>(head: &Linear<T>, signal: &[T]) -> Vec<T> {
    let b = T::lit(LATENT_BOUND as f64);
    head.forward_unchecked(signal).into_iter().map(|v| v.max(-b).min(b)).collect()
}

/// Quantized latent used at coding time.
pub fn quantize_latent<T: Real>(head: &Linear<T>, signal: &[T]) -> [i8; HYPER_DIM] {
    let l = hyper_latent(head, signal);
    std::array::from_fn(|i| l[i].round_ties_even().to_i8().unwrap_or(0))
}

/// Uniform noise for one anchor and its coupled primitives.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorNoise<T> {
    pub ref_embedding: [T; REF_DIM],
    pub res_embeddings: Vec<[T; RES_DIM]>,
    pub covariance: [T; COV_DIM],
    pub latent_anchor: [T; HYPER_DIM],
    pub latent_coupled: Vec<[T; HYPER_DIM]>,
}

impl<T: Real> AnchorNoise<T> {
    pub fn zeros(k: usize) -> Self {
        Self {
            ref_embedding: [T::zero(); REF_DIM],
            res_embeddings: vec![[T::zero(); RES_DIM]; k],
            covariance: [T::zero(); COV_DIM],
            latent_anchor: [T::zero(); HYPER_DIM],
            latent_coupled: vec![[T::zero(); HYPER_DIM]; k],
        }
    }

    pub fn sample(k: usize, rng: &mut impl Rng) -> Self {
        let mut u = || T::lit(rng.gen::<f64>() - 0.5);
        Self {
            ref_embedding: std::array::from_fn(|_| u()),
            res_embeddings: (0..k).map(|_| std::array::from_fn(|_| u())).collect(),
            covariance: std::array::from_fn(|_| u()),
            latent_anchor: std::array::from_fn(|_| u()),
            latent_coupled: (0..k).map(|_| std::array::from_fn(|_| u())).collect(),
        }
    }
}

/// Bits attributed to one anchor group.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AnchorRate<T> {
    pub embedding: T,
    pub covariance: T,
    pub coupled: T,
    pub latents: T,
}

impl<T: Real> AnchorRate<T> {
    pub fn total(&self) -> T {
        self.embedding + self.covariance + self.coupled + self.latents
    }

    pub fn add(&mut self, o: &Self) {
        self.embedding += o.embedding;
        self.covariance += o.covariance;
        self.coupled += o.coupled;
        self.latents += o.latents;
    }
}

fn gaussian_bits_sum<T: Real>(values: &[T], p: &EntropyParams<T>, step: T) -> T {
    values.iter().enumerate().map(|(i, v)| discrete_gaussian_bits(*v, p.mean[i], p.scale[i], step)).sum()
}

/// Noisy inputs for prediction and the rate of one anchor group.
pub fn training_forward<T: Real>(
    nets: &EntropyNetworks<T>,
    anchor: &AnchorPrimitive<T>,
    coupled: &[CoupledPrimitive<T>],
    prior: Vec<T>,
    noise: &AnchorNoise<T>,
) -> Result<(AnchorInputs<T>, AnchorRate<T>)> {
    let steps = predict_steps(nets, &prior)?;
    let f_hat: [T; REF_DIM] = std::array::from_fn(|i| noisy_surrogate(anchor.ref_embedding[i], steps.embedding, noise.ref_embedding[i]));
    let cov = anchor.covariance.to_params();
    let cov_hat: [T; COV_DIM] = std::array::from_fn(|i| noisy_surrogate(cov[i], steps.covariance, noise.covariance[i]));
    let res_hat: Vec<[T; RES_DIM]> = coupled
        .iter()
        .zip(&noise.res_embeddings)
        .map(|(c, u)| std::array::from_fn(|i| noisy_surrogate(c.res_embedding[i], steps.residual, u[i])))
        .collect();

    let mut rate = AnchorRate::default();
    let eta: Vec<T> = hyper_latent(&nets.hyper_anchor, &anchor.ref_embedding).iter().zip(&noise.latent_anchor).map(|(e, u)| *e + *u).collect();
    rate.latents += eta.iter().enumerate().map(|(d, y)| nets.bottleneck_anchor.bits(d, *y)).sum();
    let pf = predict_embedding_entropy_params(&eta, &prior, nets)?;
    rate.embedding = gaussian_bits_sum(&f_hat, &pf, steps.embedding);
    let pc = predict_covariance_entropy_params(&prior, nets)?;
    rate.covariance = gaussian_bits_sum(&cov_hat, &pc, steps.covariance);
    for (j, c) in coupled.iter().enumerate() {
        let eta: Vec<T> = hyper_latent(&nets.hyper_coupled, &c.res_embedding).iter().zip(&noise.latent_coupled[j]).map(|(e, u)| *e + *u).collect();
        rate.latents += eta.iter().enumerate().map(|(d, y)| nets.bottleneck_coupled.bits(d, *y)).sum();
        let pg = predict_coupled_entropy_params(&eta, &prior, nets)?;
        rate.coupled += gaussian_bits_sum(&res_hat[j], &pg, steps.residual);
    }
    let inputs = AnchorInputs {
        location: anchor.location,
        covariance: crate::primitives::FactoredCovariance::from_params(&cov_hat),
        ref_embedding: f_hat,
        res_embeddings: res_hat,
        context: prior,
    };
    Ok((inputs, rate))
}

/// Backward of [`training_forward`].
///
/// `g_noisy` holds the gradient of the loss with respect to the noisy inputs
/// (from prediction); `rate_weight` scales the rate. Returns the gradient
/// with respect to the stored anchor group parameters and the prior.
pub fn training_backward<T: Real>(
    nets: &EntropyNetworks<T>,
    anchor: &AnchorPrimitive<T>,
    coupled: &[CoupledPrimitive<T>],
    prior: &[T],
    noise: &AnchorNoise<T>,
    g_noisy: &AnchorInputsGrad<T>,
    rate_weight: T,
    grad: &mut EntropyNetworks<T>,
) -> AnchorInputsGrad<T> {
    let k = coupled.len();
    let pdim = prior.len();
    let mut out = AnchorInputsGrad::zeros(k, pdim);
    out.location = g_noisy.location;
    for i in 0..pdim {
        out.context[i] = g_noisy.context[i];
    }
    let raw_steps = nets.steps.forward_unchecked(prior);
    let (se, de) = floored_softplus(raw_steps[0], STEP_FLOOR);
    let (sr, dr) = floored_softplus(raw_steps[1], STEP_FLOOR);
    let (sc, dc) = floored_softplus(raw_steps[2], STEP_FLOOR);
    let mut g_step = [T::zero(); 3];
    let mut g_prior = vec![T::zero(); pdim];

    // Reference embedding and its latent.
    let f_hat: Vec<T> = (0..REF_DIM).map(|i| noisy_surrogate(anchor.ref_embedding[i], se, noise.ref_embedding[i])).collect();
    let eta_c = hyper_latent(&nets.hyper_anchor, &anchor.ref_embedding);
    let eta: Vec<T> = eta_c.iter().zip(&noise.latent_anchor).map(|(e, u)| *e + *u).collect();
    let x = concat(&eta, prior);
    let pf = split_params(&nets.embedding.forward_unchecked(&x));
    let mut g_fhat: Vec<T> = g_noisy.ref_embedding.to_vec();
    let mut gm = vec![T::zero(); REF_DIM];
    let mut gs = vec![T::zero(); REF_DIM];
    for i in 0..REF_DIM {
        let d = discrete_gaussian_bits_grad(f_hat[i], pf.mean[i], pf.scale[i], se);
        g_fhat[i] += rate_weight * d[0];
        gm[i] = rate_weight * d[1];
        gs[i] = rate_weight * d[2];
        g_step[0] += rate_weight * d[3];
    }
    let gx = params_backward(&nets.embedding, &x, &gm, &gs, &mut grad.embedding);
    let mut g_eta: Vec<T> = gx[..HYPER_DIM].to_vec();
    for i in 0..pdim {
        g_prior[i] += gx[HYPER_DIM + i];
    }
    for d in 0..HYPER_DIM {
        g_eta[d] += nets.bottleneck_anchor.bits_backward(d, eta[d], rate_weight, &mut grad.bottleneck_anchor);
    }
    let mut g_f: Vec<T> = g_fhat.clone();
    for i in 0..REF_DIM {
        g_step[0] += g_fhat[i] * noise.ref_embedding[i];
    }
    latent_backward(&nets.hyper_anchor, &anchor.ref_embedding, &g_eta, &mut grad.hyper_anchor, &mut g_f);
    out.ref_embedding.copy_from_slice(&g_f[..REF_DIM]);

    // Covariance factors.
    let cov = anchor.covariance.to_params();
    let pc = split_params(&nets.covariance.forward_unchecked(prior));
    let mut g_cov_hat = [T::zero(); COV_DIM];
    g_cov_hat[..3].copy_from_slice(&g_noisy.log_scales);
    g_cov_hat[3..].copy_from_slice(&g_noisy.rotation);
    let mut gm = vec![T::zero(); COV_DIM];
    let mut gs = vec![T::zero(); COV_DIM];
    for i in 0..COV_DIM {
        let v = noisy_surrogate(cov[i], sc, noise.covariance[i]);
        let d = discrete_gaussian_bits_grad(v, pc.mean[i], pc.scale[i], sc);
        g_cov_hat[i] += rate_weight * d[0];
        gm[i] = rate_weight * d[1];
        gs[i] = rate_weight * d[2];
        g_step[2] += rate_weight * d[3] + g_cov_hat[i] * noise.covariance[i];
    }
    let gx = params_backward(&nets.covariance, prior, &gm, &gs, &mut grad.covariance);
    for i in 0..pdim {
        g_prior[i] += gx[i];
    }
    out.log_scales.copy_from_slice(&g_cov_hat[..3]);
    out.rotation.copy_from_slice(&g_cov_hat[3..]);

    // Coupled primitives.
    for (j, c) in coupled.iter().enumerate() {
        let eta_c = hyper_latent(&nets.hyper_coupled, &c.res_embedding);
        let eta: Vec<T> = eta_c.iter().zip(&noise.latent_coupled[j]).map(|(e, u)| *e + *u).collect();
        let x = concat(&eta, prior);
        let pg = split_params(&nets.coupled.forward_unchecked(&x));
        let mut g_hat = g_noisy.res_embeddings[j].to_vec();
        let mut gm = vec![T::zero(); RES_DIM];
        let mut gs = vec![T::zero(); RES_DIM];
        for i in 0..RES_DIM {
            let v = noisy_surrogate(c.res_embedding[i], sr, noise.res_embeddings[j][i]);
            let d = discrete_gaussian_bits_grad(v, pg.mean[i], pg.scale[i], sr);
            g_hat[i] += rate_weight * d[0];
            gm[i] = rate_weight * d[1];
            gs[i] = rate_weight * d[2];
            g_step[1] += rate_weight * d[3] + g_hat[i] * noise.res_embeddings[j][i];
        }
        let gx = params_backward(&nets.coupled, &x, &gm, &gs, &mut grad.coupled);
        let mut g_eta: Vec<T> = gx[..HYPER_DIM].to_vec();
        for i in 0..pdim {
            g_prior[i] += gx[HYPER_DIM + i];
        }
        for d in 0..HYPER_DIM {
            g_eta[d] += nets.bottleneck_coupled.bits_backward(d, eta[d], rate_weight, &mut grad.bottleneck_coupled);
        }
        latent_backward(&nets.hyper_coupled, &c.res_embedding, &g_eta, &mut grad.hyper_coupled, &mut g_hat);
        out.res_embeddings[j].copy_from_slice(&g_hat[..RES_DIM]);
    }

    // Steps head.
    let g_raw = [g_step[0] * de, g_step[1] * dr, g_step[2] * dc];
    let gx = nets.steps.backward(prior, &g_raw, &mut grad.steps);
    for i in 0..pdim {
        out.context[i] += g_prior[i] + gx[i];
    }
    out
}

/// Chains a latent gradient through the clamp and the encoder head into the
/// signal gradient.
fn latent_backward<T: Real>(head: &Linear<T>, signal: &[T], g_eta: &[T], grad: &mut Linear<T>, g_signal: &mut [T]) {
    let raw = head.forward_unchecked(signal);
    let b = T::lit(LATENT_BOUND as f64);
    let gy: Vec<T> = raw.iter().zip(g_eta).map(|(r, g)| if r.abs() < b { *g } else { T::zero() }).collect();
    let gx = head.backward(signal, &gy, grad);
    for (s, g) in g_signal.iter_mut().zip(gx) {
        *s += g;
    }
}

/// Exact-mode bits of one anchor group from quantized values and quantized
/// latents. Parameters are derived exactly as the coder derives them.
pub fn anchor_rate_exact<T: Real>(
    nets: &EntropyNetworks<T>,
    anchor: &AnchorPrimitive<T>,
    coupled: &[CoupledPrimitive<T>],
    prior: &[T],
    latent_anchor: &[i8; HYPER_DIM],
    latent_coupled: &[[i8; HYPER_DIM]],
) -> Result<AnchorRate<f64>> {
    let steps = predict_steps(nets, prior)?;
    let to64 = |v: T| v.as_f64();
    let bits = |v: T, m: T, s: T, st: T| discrete_gaussian_bits(to64(v), to64(m), to64(s), to64(st));
    let mut rate = AnchorRate::default();
    let eta: Vec<T> = latent_anchor.iter().map(|q| T::lit(*q as f64)).collect();
    rate.latents += nets.bottleneck_anchor.cast::<f64>().bottleneck_bits(latent_anchor);
    let pf = predict_embedding_entropy_params(&eta, prior, nets)?;
    for i in 0..REF_DIM {
        rate.embedding += bits(anchor.ref_embedding[i], pf.mean[i], pf.scale[i], steps.embedding);
    }
    let pc = predict_covariance_entropy_params(prior, nets)?;
    let cov = anchor.covariance.to_params();
    for i in 0..COV_DIM {
        rate.covariance += bits(cov[i], pc.mean[i], pc.scale[i], steps.covariance);
    }
    let bc = nets.bottleneck_coupled.cast::<f64>();
    for (c, l) in coupled.iter().zip(latent_coupled) {
        rate.latents += bc.bottleneck_bits(l);
        let eta: Vec<T> = l.iter().map(|q| T::lit(*q as f64)).collect();
        let pg = predict_coupled_entropy_params(&eta, prior, nets)?;
        for i in 0..RES_DIM {
            rate.coupled += bits(c.res_embedding[i], pg.mean[i], pg.scale[i], steps.residual);
        }
    }
    Ok(rate)
}

/// Rate mode for [`model_rate`].
#[derive(Clone, Copy, Debug)]
pub enum RateMode<'a, T> {
    /// Noisy surrogate with the given per-anchor noise (zero noise if `None`).
    Training(Option<&'a [AnchorNoise<T>]>),
    /// Quantized values and latents of a frozen model; latents are derived
    /// on the fly when the model carries none.
    Exact,
}

/// Total rate of the embeddings, covariances and latents of a model.
pub fn model_rate<T: Real>(model: &SceneModel<T>, mode: RateMode<'_, T>) -> Result<AnchorRate<f64>> {
    let k = model.k();
    let mut total = AnchorRate::default();
    for (i, a) in model.anchors.iter().enumerate() {
        let coupled = &model.coupled[i * k..(i + 1) * k];
        let prior = model.grid.query(&a.location)?;
        let r = match mode {
            RateMode::Training(noise) => {
                let zero;
                let n = match noise {
                    Some(n) => &n[i],
                    None => {
                        zero = AnchorNoise::zeros(k);
                        &zero
                    }
                };
                let (_, r) = training_forward(&model.entropy, a, coupled, prior, n)?;
                AnchorRate {
                    embedding: r.embedding.as_f64(),
                    covariance: r.covariance.as_f64(),
                    coupled: r.coupled.as_f64(),
                    latents: r.latents.as_f64(),
                }
            }
            RateMode::Exact => {
                let (la, lc) = match &model.latents {
                    Some(l) => (l.anchor[i], l.coupled[i * k..(i + 1) * k].to_vec()),
                    None => (
                        quantize_latent(&model.entropy.hyper_anchor, &a.ref_embedding),
                        coupled.iter().map(|c| quantize_latent(&model.entropy.hyper_coupled, &c.res_embedding)).collect(),
                    ),
                };
                anchor_rate_exact(&model.entropy, a, coupled, &prior, &la, &lc)?
            }
        };
        total.add(&r);
    }
    Ok(total)
}

/// Zero-mean discretized Gaussian per grid level, the rate model of coded
/// feature-grid table entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRateModel<T> {
    pub log_scales: Vec<T>,
}

impl<T: Real> GridRateModel<T> {
    pub fn new(levels: usize, scale: f64) -> Self {
        Self { log_scales: vec![T::lit(scale.ln()); levels] }
    }

    pub fn scale(&self, level: usize) -> T {
        self.log_scales[level].exp()
    }

    pub fn zero_like(&self) -> Self {
        Self { log_scales: vec![T::zero(); self.log_scales.len()] }
    }

    pub fn cast<U: Real>(&self) -> GridRateModel<U> {
        GridRateModel { log_scales: crate::scalar::cast_vec(&self.log_scales) }
    }
}

/// Training-mode bits of all grid table entries; accumulates `weight` times
/// the gradient into the table and scale gradients.
///
/// Nonzero entries use the noisy surrogate (noise drawn from `rng` when
/// given). Entries that are exactly zero were never touched by training;
/// the coder sends them as cheap adaptive zero flags, so they cost nothing
/// here.
pub fn grid_rate<T: Real>(
    grid: &FeatureGrid<T>,
    model: &GridRateModel<T>,
    step: T,
    mut rng: Option<&mut dyn rand::RngCore>,
    weight: T,
    grads: Option<(&mut GridGrad<T>, &mut GridRateModel<T>)>,
) -> Result<T> {
    if model.log_scales.len() != grid.tables.len() {
        return Err(Error::DimensionMismatch { expected: grid.tables.len(), got: model.log_scales.len() });
    }
    let mut total = T::zero();
    let mut grads = grads;
    for (l, table) in grid.tables.iter().enumerate() {
        let beta = model.scale(l);
        let mut g_beta = T::zero();
        for (i, v) in table.iter().enumerate() {
            if *v == T::zero() {
                continue;
            }
            let u = match rng.as_deref_mut() {
                Some(r) => T::lit(r.gen::<f64>() - 0.5),
                None => T::zero(),
            };
            let x = noisy_surrogate(*v, step, u);
            total += discrete_gaussian_bits(x, T::zero(), beta, step);
            if let Some((gt, _)) = grads.as_mut() {
                let d = discrete_gaussian_bits_grad(x, T::zero(), beta, step);
                gt[l][i] += weight * d[0];
                g_beta += weight * d[2];
            }
        }
        if let Some((_, gm)) = grads.as_mut() {
            gm.log_scales[l] += g_beta * beta;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CodecConfig;
    use crate::primitives::FactoredCovariance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent normal CDF: composite Simpson integration of the density.
    fn phi_oracle(x: f64) -> f64 {
        let n = 20_000;
        let (a, b) = (0.0, x);
        let h = (b - a) / n as f64;
        let f = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        0.5 + s * h / 3.0
    }

    #[test]
    fn quantize_cases() {
        assert_eq!(quantize(0.7f64, 0.5).unwrap(), (1, 0.5));
        assert_eq!(quantize(0.0f64, 0.3).unwrap(), (0, 0.0));
        let (i, r) = quantize(-0.26f64, 0.1).unwrap();
        assert_eq!(i, -3);
        assert!((r + 0.3).abs() < 1e-15);
        assert_eq!(quantize(0.25f64, 0.5).unwrap().0, 0);
        assert_eq!(quantize(0.75f64, 0.5).unwrap().0, 2);
        assert!(quantize(1.0f64, 0.0).is_err());
        assert!(quantize(1.0f64, -1.0).is_err());
    }

    #[test]
    fn noisy_surrogate_cases() {
        assert_eq!(noisy_surrogate(0.3f64, 0.1, 0.0), 0.3);
        assert_eq!(noisy_surrogate(0.0f64, 1.0, -0.5), -0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let (v, step) = (0.37, 0.2);
        let mean: f64 = (0..n).map(|_| noisy_surrogate(v, step, rng.gen::<f64>() - 0.5)).sum::<f64>() / n as f64;
        assert!((mean - v).abs() <= 3.0 * step / (12.0 * n as f64).sqrt());
    }

    #[test]
    fn gaussian_bits_match_numerical_oracle() {
        let want = -(2.0 * phi_oracle(0.5) - 1.0).log2();
        let got = discrete_gaussian_bits(0.0f64, 0.0, 1.0, 1.0);
        assert!((got - want).abs() < 1e-9);
        assert!((got - 1.385).abs() < 1e-3);
        let want = -(phi_oracle(3.5) - phi_oracle(2.5)).log2();
        let got = discrete_gaussian_bits(3.0f64, 0.0, 1.0, 1.0);
        assert!((got - want).abs() < 1e-8);
        assert!((got - 7.39).abs() < 0.01);
    }

    #[test]
    fn gaussian_bins_sum_to_one() {
        for (mean, scale) in [(0.0, 1.0), (0.3, 0.2), (-2.7, 5.0), (11.4, 0.05)] {
            let s: f64 = (-2000..=2000).map(|i| discrete_gaussian_prob(i as f64, mean, scale, 1.0)).sum();
            assert!((s - 1.0).abs() < 1e-6, "{mean} {scale}: {s}");
        }
    }

    #[test]
    fn gaussian_bits_grow_with_distance() {
        let mut prev = 0.0;
        for i in 0..200 {
            let d = i as f64 * 0.05;
            let b = discrete_gaussian_bits(d, 0.0, 0.7, 0.3);
            assert!(b >= prev - 1e-12 && b >= 0.0);
            let bn = discrete_gaussian_bits(-d, 0.0, 0.7, 0.3);
            assert!((b - bn).abs() < 1e-9);
            prev = b;
        }
        assert_eq!(discrete_gaussian_bits(1e3f64, 0.0, 1.0, 1.0), 24.0);
    }

    #[test]
    fn gaussian_bits_grad_matches_finite_differences() {
        let f = |x: [f64; 4]| discrete_gaussian_bits(x[0], x[1], x[2], x[3]);
        for x in [[0.3, 0.1, 0.4, 0.2], [1.2, -0.3, 0.5, 0.05], [-0.05, 0.0, 2.0, 1.0], [2.0, 0.0, 1.0, 0.5]] {
            let g = discrete_gaussian_bits_grad(x[0], x[1], x[2], x[3]);
            for a in 0..4 {
                let h = 1e-6;
                let mut p = x;
                let mut m = x;
                p[a] += h;
                m[a] -= h;
                let fd = (f(p) - f(m)) / (2.0 * h);
                assert!((g[a] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{a}: {} vs {fd}", g[a]);
            }
        }
    }

    #[test]
    fn bottleneck_uniform_and_normalization() {
        let b = FactorizedBottleneck::<f64>::uniform(2);
        assert!((b.bottleneck_bits(&[0]) - 17f64.log2()).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = FactorizedBottleneck::<f64>::uniform(3);
        for row in &mut r.logits {
            for l in row.iter_mut() {
                *l = rng.gen_range(-3.0..3.0);
            }
        }
        let p = FactorizedBottleneck::<f64>::peaked(1);
        for (m, dims) in [(&b, 2), (&r, 3), (&p, 1)] {
            for d in 0..dims {
                assert!(m.cdf(d, -100.0).abs() < 1e-12);
                assert!((m.cdf(d, 100.0) - 1.0).abs() < 1e-12);
                let s: f64 = (-8..=8).map(|q| m.interval_prob(d, q as f64)).sum();
                assert!((s - 1.0).abs() < 1e-6);
                let mut prev = 0.0;
                for i in 0..400 {
                    let c = m.cdf(d, -10.0 + i as f64 * 0.05);
                    assert!(c >= prev);
                    prev = c;
                }
                for q in -8..=8 {
                    assert!(m.bits(d, q as f64) >= 0.0);
                }
            }
        }
        assert!(p.bits(0, 0.0) < 1.0);
    }

    #[test]
    fn bottleneck_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = FactorizedBottleneck::<f64>::uniform(1);
        for l in b.logits[0].iter_mut() {
            *l = rng.gen_range(-1.0..1.0);
        }
        for y in [-7.3, -0.2, 0.45, 3.9] {
            let mut g = b.zero_like();
            let dy = b.bits_backward(0, y, 1.0, &mut g);
            let h = 1e-6;
            let fd = (b.bits(0, y + h) - b.bits(0, y - h)) / (2.0 * h);
            assert!((dy - fd).abs() < 1e-5 * fd.abs().max(1.0));
            for j in [0, 5, 8, 15] {
                let mut p = b.clone();
                let mut m = b.clone();
                p.logits[0][j] += h;
                m.logits[0][j] -= h;
                let fd = (p.bits(0, y) - m.bits(0, y)) / (2.0 * h);
                assert!((g.logits[0][j] - fd).abs() < 1e-5 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn entropy_params_zero_weights_and_oracle() {
        let mut nets = EntropyNetworks::<f64>::zeros(16);
        for (i, b) in nets.embedding.bias.iter_mut().enumerate() {
            *b = i as f64 * 0.1 - 3.0;
        }
        let p = predict_embedding_entropy_params(&[0.0; 8], &[0.0; 16], &nets).unwrap();
        for i in 0..32 {
            assert_eq!(p.mean[i], nets.embedding.bias[i]);
            assert_eq!(p.scale[i], nets.embedding.bias[32 + i].softplus());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nets = EntropyNetworks::<f64>::init(16, [0.02, 0.02, 0.01], 0.3, &mut rng);
        let eta: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let rho: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = predict_embedding_entropy_params(&eta, &rho, &nets).unwrap();
        let x: Vec<f64> = eta.iter().chain(&rho).copied().collect();
        for o in 0..64 {
            let mut acc = nets.embedding.bias[o];
            for i in 0..24 {
                acc += nets.embedding.weight[o * 24 + i] * x[i];
            }
            if o < 32 {
                assert!((p.mean[o] - acc).abs() < 1e-9);
            } else {
                assert!((p.scale[o - 32] - (1.0 + acc.exp()).ln()).abs() < 1e-9);
                assert!(p.scale[o - 32] > 0.0);
            }
        }
        assert!(predict_embedding_entropy_params(&eta, &rho[..15], &nets).is_err());
        let pc = predict_covariance_entropy_params(&rho, &nets).unwrap();
        for o in 0..14 {
            let mut acc = nets.covariance.bias[o];
            for i in 0..16 {
                acc += nets.covariance.weight[o * 16 + i] * rho[i];
            }
            let got = if o < 7 { pc.mean[o] } else { pc.scale[o - 7] };
            let want = if o < 7 { acc } else { (1.0 + acc.exp()).ln() };
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn scale_floor_applies() {
        let mut nets = EntropyNetworks::<f64>::zeros(1);
        nets.covariance.bias = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -100.0, -100.0, -100.0, -100.0, -100.0, -100.0, -100.0];
        let p = predict_covariance_entropy_params(&[0.0], &nets).unwrap();
        assert!(p.scale.iter().all(|s| *s == SCALE_FLOOR));
        nets.steps.bias = vec![-100.0; 3];
        let s = predict_steps(&nets, &[0.0]).unwrap();
        assert_eq!(s.embedding, STEP_FLOOR);
    }

    fn toy_model(rng: &mut ChaCha8Rng, anchors: usize) -> SceneModel<f64> {
        let mut cfg = CodecConfig { k: 3, ..CodecConfig::default() };
        cfg.grid.log2_table_size = 8;
        let mut m = SceneModel::empty(cfg, [-1.0; 3], [1.0; 3], rng).unwrap();
        for t in m.grid.tables.iter_mut() {
            for v in t.iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        for _ in 0..anchors {
            let mut g = || rng.gen_range(-0.5..0.5);
            let a = AnchorPrimitive {
                location: [g(), g(), g()],
                covariance: FactoredCovariance { log_scales: [g() - 3.0, g() - 3.0, g() - 3.0], rotation: [1.0, g(), g(), g()] },
                ref_embedding: std::array::from_fn(|_| g() * 0.4),
            };
            let res: Vec<[f64; 4]> = (0..3).map(|_| [g(), g(), g(), g()]).collect();
            m.push_anchor(a, &res).unwrap();
        }
        m
    }

    #[test]
    fn model_rate_empty_and_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = toy_model(&mut rng, 0);
        assert_eq!(model_rate(&m, RateMode::Exact).unwrap().total(), 0.0);
        assert_eq!(model_rate(&m, RateMode::Training(None)).unwrap().total(), 0.0);
        let one = toy_model(&mut rng, 1);
        let mut two = one.clone();
        let (a, res) = (two.anchors[0].clone(), two.coupled.iter().map(|c| c.res_embedding).collect::<Vec<_>>());
        two.push_anchor(a, &res).unwrap();
        for mode in [RateMode::Exact, RateMode::Training(None)] {
            let r1 = model_rate(&one, mode).unwrap().total();
            let r2 = model_rate(&two, mode).unwrap().total();
            assert!(r1 > 0.0);
            assert_eq!(r2, 2.0 * r1);
        }
    }

    #[test]
    fn model_rate_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = toy_model(&mut rng, 4);
        let got = model_rate(&m, RateMode::Training(None)).unwrap().total();
        let e = &m.entropy;
        let mut want = 0.0;
        for (i, a) in m.anchors.iter().enumerate() {
            let rho = m.grid.query(&a.location).unwrap();
            let st = e.steps.forward(&rho).unwrap();
            let sp = |r: f64, fl: f64| ((1.0 + r.exp()).ln()).max(fl);
            let (se, sr, sc) = (sp(st[0], 1e-4), sp(st[1], 1e-4), sp(st[2], 1e-4));
            let eta: Vec<f64> = e.hyper_anchor.forward(&a.ref_embedding).unwrap().iter().map(|v| v.clamp(-8.0, 8.0)).collect();
            for (d, y) in eta.iter().enumerate() {
                want += e.bottleneck_anchor.bits(d, *y);
            }
            let x: Vec<f64> = eta.iter().chain(&rho).copied().collect();
            let o = e.embedding.forward(&x).unwrap();
            for j in 0..32 {
                want += discrete_gaussian_bits(a.ref_embedding[j], o[j], sp(o[32 + j], 1e-6), se);
            }
            let o = e.covariance.forward(&rho).unwrap();
            let cp = a.covariance.to_params();
            for j in 0..7 {
                want += discrete_gaussian_bits(cp[j], o[j], sp(o[7 + j], 1e-6), sc);
            }
            for c in &m.coupled[i * 3..i * 3 + 3] {
                let eta: Vec<f64> = e.hyper_coupled.forward(&c.res_embedding).unwrap().iter().map(|v| v.clamp(-8.0, 8.0)).collect();
                for (d, y) in eta.iter().enumerate() {
                    want += e.bottleneck_coupled.bits(d, *y);
                }
                let x: Vec<f64> = eta.iter().chain(&rho).copied().collect();
                let o = e.coupled.forward(&x).unwrap();
                for j in 0..4 {
                    want += discrete_gaussian_bits(c.res_embedding[j], o[j], sp(o[4 + j], 1e-6), sr);
                }
            }
        }
        assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn covariance_params_ignore_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let nets = EntropyNetworks::<f64>::init(16, [0.02, 0.02, 0.01], 0.3, &mut rng);
        let rho: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = AnchorPrimitive { location: [0.0; 3], covariance: FactoredCovariance::isotropic(0.1), ref_embedding: [0.1; 32] };
        let la = [0i8; 8];
        let lb = [3i8, -2, 1, 0, 5, -8, 8, 1];
        let ra = anchor_rate_exact(&nets, &a, &[], &rho, &la, &[]).unwrap();
        let rb = anchor_rate_exact(&nets, &a, &[], &rho, &lb, &[]).unwrap();
        assert_eq!(ra.covariance, rb.covariance);
        assert_ne!(ra.embedding, rb.embedding);
    }

    #[test]
    fn training_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = toy_model(&mut rng, 1);
        let mut nets = m.entropy.clone();
        for l in nets.layers_mut() {
            for w in l.weight.iter_mut() {
                *w += rng.gen_range(-0.05..0.05);
            }
        }
        for row in nets.bottleneck_anchor.logits.iter_mut().chain(nets.bottleneck_coupled.logits.iter_mut()) {
            for l in row.iter_mut() {
                *l += rng.gen_range(-0.5..0.5);
            }
        }
        let a = m.anchors[0].clone();
        let coupled = m.coupled.clone();
        let prior = m.grid.query(&a.location).unwrap();
        let noise = AnchorNoise::sample(3, &mut rng);
        // Random linear functional of the noisy inputs plus weighted rate.
        let mut up = AnchorInputsGrad::zeros(3, prior.len());
        for v in up.ref_embedding.iter_mut().chain(up.log_scales.iter_mut()).chain(up.rotation.iter_mut()) {
            *v = rng.gen_range(-1.0..1.0);
        }
        for r in up.res_embeddings.iter_mut() {
            for v in r.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        for v in up.context.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let w = 0.3;
        let loss = |a: &AnchorPrimitive<f64>, c: &[CoupledPrimitive<f64>], p: &[f64], n: &EntropyNetworks<f64>| -> f64 {
            let (inp, r) = training_forward(n, a, c, p.to_vec(), &noise).unwrap();
            let mut s = w * r.total();
            for i in 0..32 {
                s += inp.ref_embedding[i] * up.ref_embedding[i];
            }
            for i in 0..3 {
                s += inp.covariance.log_scales[i] * up.log_scales[i];
            }
            for i in 0..4 {
                s += inp.covariance.rotation[i] * up.rotation[i];
            }
            for j in 0..3 {
                for i in 0..4 {
                    s += inp.res_embeddings[j][i] * up.res_embeddings[j][i];
                }
            }
            for i in 0..p.len() {
                s += inp.context[i] * up.context[i];
            }
            s
        };
        let mut ng = nets.zero_like();
        let g = training_backward(&nets, &a, &coupled, &prior, &noise, &up, w, &mut ng);
        let h = 1e-6;
        let check = |an: f64, fd: f64, what: &str| {
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "{what}: analytic {an} vs fd {fd}");
        };
        for i in [0, 9, 31] {
            let mut p = a.clone();
            let mut q = a.clone();
            p.ref_embedding[i] += h;
            q.ref_embedding[i] -= h;
            check(g.ref_embedding[i], (loss(&p, &coupled, &prior, &nets) - loss(&q, &coupled, &prior, &nets)) / (2.0 * h), "f");
        }
        for i in 0..3 {
            let mut p = a.clone();
            let mut q = a.clone();
            p.covariance.log_scales[i] += h;
            q.covariance.log_scales[i] -= h;
            check(g.log_scales[i], (loss(&p, &coupled, &prior, &nets) - loss(&q, &coupled, &prior, &nets)) / (2.0 * h), "s");
        }
        for i in 0..4 {
            let mut p = a.clone();
            let mut q = a.clone();
            p.covariance.rotation[i] += h;
            q.covariance.rotation[i] -= h;
            check(g.rotation[i], (loss(&p, &coupled, &prior, &nets) - loss(&q, &coupled, &prior, &nets)) / (2.0 * h), "q");
        }
        for j in 0..3 {
            for i in 0..4 {
                let mut p = coupled.clone();
                let mut q = coupled.clone();
                p[j].res_embedding[i] += h;
                q[j].res_embedding[i] -= h;
                check(g.res_embeddings[j][i], (loss(&a, &p, &prior, &nets) - loss(&a, &q, &prior, &nets)) / (2.0 * h), "res");
            }
        }
        for i in 0..prior.len() {
            let mut p = prior.clone();
            let mut q = prior.clone();
            p[i] += h;
            q[i] -= h;
            check(g.context[i], (loss(&a, &coupled, &p, &nets) - loss(&a, &coupled, &q, &nets)) / (2.0 * h), "prior");
        }
        for li in 0..6 {
            for idx in [0usize, 7, 20] {
                let mut p = nets.clone();
                let mut q = nets.clone();
                p.layers_mut()[li].weight[idx] += h;
                q.layers_mut()[li].weight[idx] -= h;
                check(ng.layers()[li].weight[idx], (loss(&a, &coupled, &prior, &p) - loss(&a, &coupled, &prior, &q)) / (2.0 * h), "w");
            }
        }
        for b in [3usize, 7, 8, 12] {
            let mut p = nets.clone();
            let mut q = nets.clone();
            p.bottleneck_coupled.logits[2][b] += h;
            q.bottleneck_coupled.logits[2][b] -= h;
            check(ng.bottleneck_coupled.logits[2][b], (loss(&a, &coupled, &prior, &p) - loss(&a, &coupled, &prior, &q)) / (2.0 * h), "logit");
        }
    }

    #[test]
    fn grid_rate_matches_elementwise_sum_and_gradients() {
        let cfg = crate::feature_grid::GridConfig {
            levels: 2,
            base_resolution: 2,
            growth: 2.0,
            log2_table_size: 4,
            feature_dim: 2,
            primes: crate::feature_grid::DEFAULT_PRIMES,
        };
        let mut g = FeatureGrid::<f64>::zeros(cfg, [-1.0; 3], [1.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for t in g.tables.iter_mut() {
            for v in t.iter_mut().step_by(3) {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
        let m = GridRateModel { log_scales: vec![(0.05f64).ln(), (0.1f64).ln()] };
        let step = 1.0 / 64.0;
        let oracle = |g: &FeatureGrid<f64>, m: &GridRateModel<f64>| -> f64 {
            let mut s = 0.0;
            for (l, t) in g.tables.iter().enumerate() {
                for v in t.iter().filter(|v| **v != 0.0) {
                    s += discrete_gaussian_bits(*v, 0.0, m.log_scales[l].exp(), step);
                }
            }
            s
        };
        let got = grid_rate(&g, &m, step, None, 1.0, None).unwrap();
        assert!((got - oracle(&g, &m)).abs() < 1e-9 * got);
        let mut gt = g.zero_grad();
        let mut gm = m.zero_like();
        grid_rate(&g, &m, step, None, 1.0, Some((&mut gt, &mut gm))).unwrap();
        let h = 1e-6;
        for l in 0..2 {
            assert_eq!(gt[l][1], 0.0);
            for i in [0usize, 3, 6, 9] {
                let mut a = g.clone();
                let mut b = g.clone();
                a.tables[l][i] += h;
                b.tables[l][i] -= h;
                let fd = (oracle(&a, &m) - oracle(&b, &m)) / (2.0 * h);
                assert!((fd - gt[l][i]).abs() <= 1e-4 * fd.abs().max(1e-3), "{fd} {}", gt[l][i]);
            }
            let mut a = m.clone();
            let mut b = m.clone();
            a.log_scales[l] += h;
            b.log_scales[l] -= h;
            let fd = (oracle(&g, &a) - oracle(&g, &b)) / (2.0 * h);
            assert!((fd - gm.log_scales[l]).abs() <= 1e-4 * fd.abs().max(1e-3));
        }
        assert!(grid_rate(&g, &GridRateModel::new(1, 0.1), step, None, 1.0, None).is_err());
    }
}
