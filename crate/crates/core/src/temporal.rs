//! Streamable sequences: motion-aware disentanglement, residue-grid
//! deformation of dynamic primitives, compensation of static ones and
//! closed-loop predicted frames.
//!
//! A frame state is the intra-frame model (plus anchors created later), the
//! geometry of every derived Gaussian at the previous and the current frame,
//! the dynamic/static partition and the residues of the current frame.
//! Appearance offsets are always relative to the intra-frame prediction.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::container::round_f16;
use crate::codec::range_coder::ExpGolombContexts;
use crate::codec::{
    decode_anchor_streams, decode_grid, encode_anchor_streams, encode_grid, encode_model_as, freeze_anchor_set, freeze_grid, AnchorStreams,
    Bitstream, ByteReader, ByteWriter, Decoder, Encoder, FrameKind, Header, SectionId,
};
use crate::config::{parse_value, CodecConfig};
use crate::entropy_model::{grid_rate, GridRateModel};
use crate::error::{Error, Result};
use crate::feature_grid::{FeatureGrid, GridConfig, GridGrad, GridSample};
use crate::math::{self, Quat, Vec3};
use crate::nn::Linear;
use crate::primitives::{AnchorPrimitive, FactoredCovariance, Gaussian3D, GaussianGrad, SceneModel, TemporalState, INIT_GRID_SCALE, RES_DIM};
use crate::rd_optimizer::{train_static, Adam, LossBreakdown, Moments, TrainConfig, TrainView};
use crate::renderer::{backprop_with_state, distortion_backward, psnr, rasterize, rasterize_with_state, Camera, Image};
use crate::scalar::Real;
use crate::spatial_prediction::{derive_backward, derive_from_inputs, AnchorInputs, AnchorInputsGrad, ViewEmbedding, VIEW_DIM};

pub const OPACITY_FLOOR: f64 = 1e-4;
const BACKWARD_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalConfig {
    pub iterations: usize,
    pub lambda: f64,
    pub lr_grid: f64,
    pub lr_network: f64,
    pub lr_anchor: f64,
    /// Motion-confidence threshold for the initial dynamic set.
    pub tau_motion: f64,
    /// Accumulated gradient above which a static primitive turns dynamic.
    pub tau_static_to_dynamic: f64,
    /// Deformation significance below which a dynamic primitive turns static.
    pub tau_dynamic_to_static: f64,
    /// Accumulated gradient that triggers anchor creation.
    pub tau_create: f64,
    pub control_interval: usize,
    /// Cap on anchors created per frame.
    pub max_created: usize,
    /// Per-channel absolute frame difference marking a pixel as moving.
    pub mask_threshold: f64,
    pub mask_dilation: usize,
    pub seed: u64,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            lambda: 5e-4,
            lr_grid: 1e-2,
            lr_network: 2e-3,
            lr_anchor: 2.5e-3,
            tau_motion: 0.25,
            tau_static_to_dynamic: 2e-4,
            tau_dynamic_to_static: 1e-3,
            tau_create: 4e-4,
            control_interval: 50,
            max_created: 32,
            mask_threshold: 0.05,
            mask_dilation: 2,
            seed: 0,
        }
    }
}

impl TemporalConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "temporal.iterations" => self.iterations = parse_value(key, value)?,
            "temporal.lambda" => self.lambda = parse_value(key, value)?,
            "temporal.lr.grid" => self.lr_grid = parse_value(key, value)?,
            "temporal.lr.network" => self.lr_network = parse_value(key, value)?,
            "temporal.lr.anchor" => self.lr_anchor = parse_value(key, value)?,
            "temporal.tau_motion" => self.tau_motion = parse_value(key, value)?,
            "temporal.tau_static_to_dynamic" => self.tau_static_to_dynamic = parse_value(key, value)?,
            "temporal.tau_dynamic_to_static" => self.tau_dynamic_to_static = parse_value(key, value)?,
            "temporal.tau_create" => self.tau_create = parse_value(key, value)?,
            "temporal.control_interval" => self.control_interval = parse_value(key, value)?,
            "temporal.max_created" => self.max_created = parse_value(key, value)?,
            "temporal.mask_threshold" => self.mask_threshold = parse_value(key, value)?,
            "temporal.mask_dilation" => self.mask_dilation = parse_value(key, value)?,
            "temporal.seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.lambda,
            self.lr_grid,
            self.lr_network,
            self.lr_anchor,
            self.tau_motion,
            self.tau_static_to_dynamic,
            self.tau_dynamic_to_static,
            self.tau_create,
            self.mask_threshold,
        ];
        if vals.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("temporal rates and thresholds must be finite and nonnegative".into()));
        }
        self.thresholds().validate()
    }

    pub fn thresholds(&self) -> TemporalThresholds {
        TemporalThresholds {
            motion: self.tau_motion,
            static_to_dynamic: self.tau_static_to_dynamic,
            dynamic_to_static: self.tau_dynamic_to_static,
            create: self.tau_create,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalThresholds {
    pub motion: f64,
    pub static_to_dynamic: f64,
    pub dynamic_to_static: f64,
    pub create: f64,
}

impl TemporalThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.create > self.static_to_dynamic) {
            return Err(Error::InvalidArgument(format!(
                "creation threshold {} must exceed the static-to-dynamic threshold {}",
                self.create, self.static_to_dynamic
            )));
        }
        Ok(())
    }
}

/// Binary per-pixel motion map of one view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl MotionMask {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|m| **m).count()
    }
}

/// Frame differencing: pixels whose largest channel difference exceeds
/// `threshold`, dilated by a square of half-width `radius`.
pub fn motion_mask(prev: &Image<f64>, curr: &Image<f64>, threshold: f64, radius: usize) -> Result<MotionMask> {
    if prev.width != curr.width || prev.height != curr.height || prev.data.len() != curr.data.len() {
        return Err(Error::DimensionMismatch { expected: prev.data.len(), got: curr.data.len() });
    }
    let (w, h) = (curr.width, curr.height);
    let raw: Vec<bool> =
        prev.data.chunks(3).zip(curr.data.chunks(3)).map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0, f64::max) > threshold).collect();
    // Separable max filter.
    let mut rows = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            rows[y * w + x] = (lo..=hi).any(|xx| raw[y * w + xx]);
        }
    }
    let mut data = vec![false; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        for x in 0..w {
            data[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
        }
    }
    Ok(MotionMask { width: w, height: h, data })
}

pub fn compute_motion_masks(prev: &[Image<f64>], curr: &[Image<f64>], threshold: f64, radius: usize) -> Result<Vec<MotionMask>> {
    if prev.len() != curr.len() {
        return Err(Error::DimensionMismatch { expected: prev.len(), got: curr.len() });
    }
    prev.iter().zip(curr).map(|(a, b)| motion_mask(a, b, threshold, radius)).collect()
}

/// Whether the 3-sigma box of any of an anchor's Gaussians touches a moving
/// pixel of the view.
pub fn view_motion_confidence<T: Real>(gaussians: &[Gaussian3D<T>], mask: &MotionMask, camera: &Camera<T>) -> Result<bool> {
    if mask.width != camera.width || mask.height != camera.height {
        return Err(Error::DimensionMismatch { expected: camera.width * camera.height, got: mask.width * mask.height });
    }
    for g in gaussians {
        let Some(p) = crate::renderer::project_gaussian(g, camera) else { continue };
        let Some([x0, x1, y0, y1]) = p.pixel_range(camera.width, camera.height) else { continue };
        for y in y0..=y1 {
            if (x0..=x1).any(|x| mask.get(x, y)) {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Motion confidence of every anchor (mean over views) and the initial
/// partition. `gaussians` is anchor-major with `k` per anchor.
pub fn disentangle<T: Real>(
    gaussians: &[Gaussian3D<T>],
    k: usize,
    masks: &[MotionMask],
    cameras: &[Camera<T>],
    tau_motion: f64,
) -> Result<TemporalState<T>> {
    if masks.is_empty() || masks.len() != cameras.len() {
        return Err(Error::InvalidArgument(format!("need one mask per view, got {} masks for {} views", masks.len(), cameras.len())));
    }
    if k == 0 || !gaussians.len().is_multiple_of(k) {
        return Err(Error::DimensionMismatch { expected: k, got: gaussians.len() });
    }
    let n = gaussians.len() / k;
    let conf: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let gs = &gaussians[i * k..(i + 1) * k];
            let mut hits = 0usize;
            for (m, c) in masks.iter().zip(cameras) {
                hits += view_motion_confidence(gs, m, c)? as usize;
            }
            Ok(hits as f64 / masks.len() as f64)
        })
        .collect::<Result<_>>()?;
    let mut state = TemporalState::new(0, n);
    for (i, c) in conf.iter().enumerate() {
        state.motion_confidence[i] = T::lit(*c);
        state.dynamic[i] = *c >= tau_motion;
    }
    Ok(state)
}

/// Prediction heads of a predicted frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalHeads<T> {
    pub translation: Linear<T>,
    pub scaling: Linear<T>,
    pub rotation: Linear<T>,
    pub color: Linear<T>,
    pub opacity: Linear<T>,
    pub static_color: Linear<T>,
}

impl<T: Real> TemporalHeads<T> {
    /// All-zero heads: neutral deformation, no appearance offsets.
    pub fn neutral(motion_dim: usize, compensation_dim: usize) -> Self {
        let z = RES_DIM + motion_dim;
        Self {
            translation: Linear::zeros(z, 3),
            scaling: Linear::zeros(z, 3),
            rotation: Linear::zeros(z, 4),
            color: Linear::zeros(VIEW_DIM + z, 3),
            opacity: Linear::zeros(VIEW_DIM + z, 1),
            static_color: Linear::zeros(VIEW_DIM + compensation_dim, 3),
        }
    }

    pub fn layers(&self) -> [&Linear<T>; 6] {
        [&self.translation, &self.scaling, &self.rotation, &self.color, &self.opacity, &self.static_color]
    }

    pub fn layers_mut(&mut self) -> [&mut Linear<T>; 6] {
        [&mut self.translation, &mut self.scaling, &mut self.rotation, &mut self.color, &mut self.opacity, &mut self.static_color]
    }

    pub fn zero_like(&self) -> Self {
        let mut z = self.clone();
        for l in z.layers_mut() {
            *l = l.zero_like();
        }
        z
    }

    pub fn cast<U: Real>(&self) -> TemporalHeads<U> {
        TemporalHeads {
            translation: self.translation.cast(),
            scaling: self.scaling.cast(),
            rotation: self.rotation.cast(),
            color: self.color.cast(),
            opacity: self.opacity.cast(),
            static_color: self.static_color.cast(),
        }
    }

    fn add(&mut self, o: &Self) {
        for (a, b) in self.layers_mut().into_iter().zip(o.layers()) {
            for (x, y) in a.params_mut().zip(b.params()) {
                *x += *y;
            }
        }
    }
}

/// Motion grid, compensation grid, heads and the grid rate models.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalResidues<T> {
    pub motion: FeatureGrid<T>,
    pub compensation: FeatureGrid<T>,
    pub heads: TemporalHeads<T>,
    pub motion_rate: GridRateModel<T>,
    pub compensation_rate: GridRateModel<T>,
}

impl<T: Real> TemporalResidues<T> {
    pub fn neutral(config: &GridConfig, bounds_min: Vec3<T>, bounds_max: Vec3<T>) -> Result<Self> {
        let motion = FeatureGrid::zeros(config.clone(), bounds_min, bounds_max)?;
        let compensation = FeatureGrid::zeros(config.clone(), bounds_min, bounds_max)?;
        Ok(Self {
            heads: TemporalHeads::neutral(motion.output_dim(), compensation.output_dim()),
            motion_rate: GridRateModel::new(config.levels, INIT_GRID_SCALE),
            compensation_rate: GridRateModel::new(config.levels, INIT_GRID_SCALE),
            motion,
            compensation,
        })
    }

    pub fn cast<U: Real>(&self) -> TemporalResidues<U> {
        TemporalResidues {
            motion: self.motion.cast(),
            compensation: self.compensation.cast(),
            heads: self.heads.cast(),
            motion_rate: self.motion_rate.cast(),
            compensation_rate: self.compensation_rate.cast(),
        }
    }
}

/// Per-primitive deformation field: translation, positive per-axis scaling
/// and a unit rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Deformation<T> {
    pub translation: Vec3<T>,
    pub scaling: Vec3<T>,
    pub rotation: Quat<T>,
}

impl<T: Real> Deformation<T> {
    pub fn neutral() -> Self {
        Self { translation: [T::zero(); 3], scaling: [T::one(); 3], rotation: math::identity_quat() }
    }
}

/// `ζ^d = f_γ ⊕ ρ^d` from a residual embedding and motion-grid features.
fn motion_features<T: Real>(res: &[T; RES_DIM], rho: &[T]) -> Vec<T> {
    let mut z = Vec::with_capacity(RES_DIM + rho.len());
    z.extend_from_slice(res);
    z.extend_from_slice(rho);
    z
}

fn view_concat<T: Real>(view: &ViewEmbedding<T>, z: &[T]) -> Vec<T> {
    let mut x = Vec::with_capacity(VIEW_DIM + z.len());
    x.extend_from_slice(&view.to_array());
    x.extend_from_slice(z);
    x
}

fn rotation_preimage<T: Real>(heads: &TemporalHeads<T>, z: &[T]) -> Quat<T> {
    let r = heads.rotation.forward_unchecked(z);
    [r[0] + T::one(), r[1], r[2], r[3]]
}

fn deformation_from<T: Real>(heads: &TemporalHeads<T>, z: &[T]) -> Deformation<T> {
    let t = heads.translation.forward_unchecked(z);
    let s = heads.scaling.forward_unchecked(z);
    Deformation {
        translation: [t[0], t[1], t[2]],
        scaling: [s[0].exp(), s[1].exp(), s[2].exp()],
        rotation: math::quat_normalize(&rotation_preimage(heads, z)),
    }
}

/// Deformation of one dynamic Gaussian from its residual embedding and the
/// motion grid at its previous-frame mean. Returns ψ and `ζ^d`.
pub fn predict_deformation<T: Real>(
    res_embedding: &[T; RES_DIM],
    prior_mean: &Vec3<T>,
    residues: &TemporalResidues<T>,
) -> Result<(Deformation<T>, Vec<T>)> {
    let rho = residues.motion.query(prior_mean)?;
    let z = motion_features(res_embedding, &rho);
    if z.len() != residues.heads.translation.inputs {
        return Err(Error::DimensionMismatch { expected: residues.heads.translation.inputs, got: z.len() });
    }
    Ok((deformation_from(&residues.heads, &z), z))
}

fn clamp<T: Real>(v: T, lo: T, hi: T) -> T {
    v.max(lo).min(hi)
}

/// Applies ψ to the geometry and the appearance offsets of `ϰ ⊕ ζ^d`.
pub fn deform_dynamic<T: Real>(
    g: &Gaussian3D<T>,
    psi: &Deformation<T>,
    zeta: &[T],
    view: &ViewEmbedding<T>,
    heads: &TemporalHeads<T>,
) -> Gaussian3D<T> {
    let x = view_concat(view, zeta);
    let dc = heads.color.forward_unchecked(&x);
    let da = heads.opacity.forward_unchecked(&x);
    let lo = T::lit(OPACITY_FLOOR);
    Gaussian3D {
        mean: math::add3(&g.mean, &psi.translation),
        covariance: FactoredCovariance {
            log_scales: std::array::from_fn(|i| g.covariance.log_scales[i] + psi.scaling[i].ln()),
            rotation: math::quat_mul(&psi.rotation, &g.covariance.unit_rotation()),
        },
        color: std::array::from_fn(|i| clamp(g.color[i] + dc[i], T::zero(), T::one())),
        opacity: clamp(g.opacity + da[0], lo, T::one() - lo),
    }
}

/// Color offset of a static Gaussian from `ϰ ⊕ ρ^s`; geometry and opacity
/// pass through untouched.
pub fn compensate_static<T: Real>(g: &Gaussian3D<T>, rho_s: &[T], view: &ViewEmbedding<T>, heads: &TemporalHeads<T>) -> Gaussian3D<T> {
    let dc = heads.static_color.forward_unchecked(&view_concat(view, rho_s));
    Gaussian3D { color: std::array::from_fn(|i| clamp(g.color[i] + dc[i], T::zero(), T::one())), ..*g }
}

/// `‖ψ^t‖₁ + ‖log ψ^s‖₁ + 1 − cos(q(ψ^R), q_identity)`, with the quaternion
/// sign fixed so that `w ≥ 0`.
pub fn deformation_significance<T: Real>(psi: &Deformation<T>) -> T {
    let t: T = psi.translation.iter().map(|v| v.abs()).fold(T::zero(), |a, b| a + b);
    let s: T = psi.scaling.iter().map(|v| v.ln().abs()).fold(T::zero(), |a, b| a + b);
    t + s + rotation_significance(&psi.rotation)
}

/// `1 − cos` between a (canonicalized) quaternion and the identity.
pub fn rotation_significance<T: Real>(q: &Quat<T>) -> T {
    let q = math::quat_canonical(q);
    let n = math::quat_norm(&q);
    if !(n > T::zero()) {
        return T::one();
    }
    T::one() - q[0] / n
}

/// Geometry of one derived Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianGeometry<T> {
    pub mean: Vec3<T>,
    pub covariance: FactoredCovariance<T>,
}

impl<T: Real> GaussianGeometry<T> {
    pub fn of(g: &Gaussian3D<T>) -> Self {
        Self { mean: g.mean, covariance: g.covariance }
    }

    pub fn cast<U: Real>(&self) -> GaussianGeometry<U> {
        GaussianGeometry { mean: crate::scalar::cast_arr(&self.mean), covariance: self.covariance.cast() }
    }
}

fn anchor_inputs<T: Real>(model: &SceneModel<T>, i: usize) -> Result<AnchorInputs<T>> {
    let k = model.k();
    let a = &model.anchors[i];
    Ok(AnchorInputs::from_model(a, &model.coupled[i * k..(i + 1) * k], model.grid.query(&a.location)?))
}

/// Intra-frame prediction of the Gaussians of anchors `range`.
pub fn base_gaussians<T: Real>(model: &SceneModel<T>, range: std::ops::Range<usize>, center: &Vec3<T>) -> Result<Vec<Gaussian3D<T>>> {
    let parts: Vec<Vec<Gaussian3D<T>>> =
        range.into_par_iter().map(|i| derive_from_inputs(&model.prediction, &anchor_inputs(model, i)?, center)).collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Geometry at the current frame given the previous one: dynamic Gaussians
/// are deformed, static ones copied.
pub fn advance_geometry<T: Real>(
    model: &SceneModel<T>,
    prior: &[GaussianGeometry<T>],
    dynamic: &[bool],
    residues: &TemporalResidues<T>,
) -> Result<Vec<GaussianGeometry<T>>> {
    let k = model.k();
    check_partition(model, prior, dynamic)?;
    let parts: Vec<Vec<GaussianGeometry<T>>> = (0..model.anchors.len())
        .into_par_iter()
        .map(|i| {
            let mut out = Vec::with_capacity(k);
            for j in i * k..(i + 1) * k {
                let p = &prior[j];
                if !dynamic[i] {
                    out.push(*p);
                    continue;
                }
                let (psi, _) = predict_deformation(&model.coupled[j].res_embedding, &p.mean, residues)?;
                out.push(GaussianGeometry {
                    mean: math::add3(&p.mean, &psi.translation),
                    covariance: FactoredCovariance {
                        log_scales: std::array::from_fn(|a| p.covariance.log_scales[a] + psi.scaling[a].ln()),
                        rotation: math::quat_mul(&psi.rotation, &p.covariance.unit_rotation()),
                    },
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

fn check_partition<T: Real>(model: &SceneModel<T>, prior: &[GaussianGeometry<T>], dynamic: &[bool]) -> Result<()> {
    if dynamic.len() != model.anchors.len() {
        return Err(Error::DimensionMismatch { expected: model.anchors.len(), got: dynamic.len() });
    }
    if prior.len() != model.coupled.len() {
        return Err(Error::DimensionMismatch { expected: model.coupled.len(), got: prior.len() });
    }
    Ok(())
}

/// Renderable Gaussians of a frame for one camera.
pub fn frame_gaussians<T: Real>(
    model: &SceneModel<T>,
    prior: &[GaussianGeometry<T>],
    dynamic: &[bool],
    residues: Option<&TemporalResidues<T>>,
    camera: &Camera<T>,
) -> Result<Vec<Gaussian3D<T>>> {
    check_partition(model, prior, dynamic)?;
    let k = model.k();
    let center = camera.center();
    let parts: Vec<Vec<Gaussian3D<T>>> = (0..model.anchors.len())
        .into_par_iter()
        .map(|i| {
            let base = derive_from_inputs(&model.prediction, &anchor_inputs(model, i)?, &center)?;
            let view = ViewEmbedding::new(&center, &model.anchors[i].location);
            base.iter()
                .enumerate()
                .map(|(jj, b)| {
                    let j = i * k + jj;
                    let g = Gaussian3D { mean: prior[j].mean, covariance: prior[j].covariance, ..*b };
                    let Some(r) = residues else { return Ok(g) };
                    if dynamic[i] {
                        let (psi, z) = predict_deformation(&model.coupled[j].res_embedding, &g.mean, r)?;
                        Ok(deform_dynamic(&g, &psi, &z, &view, &r.heads))
                    } else {
                        Ok(compensate_static(&g, &r.compensation.query(&g.mean)?, &view, &r.heads))
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Decoder-side state after a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameState {
    pub frame_index: u32,
    /// Intra-frame model plus every anchor created since.
    pub model: SceneModel<f32>,
    /// Geometry at the previous frame (intra geometry for new anchors).
    pub prior: Vec<GaussianGeometry<f32>>,
    /// Geometry at this frame.
    pub geometry: Vec<GaussianGeometry<f32>>,
    pub dynamic: Vec<bool>,
    /// Residues of this frame; `None` for the intra frame.
    pub residues: Option<TemporalResidues<f32>>,
}

impl FrameState {
    pub fn from_intra(model: SceneModel<f32>, frame_index: u32) -> Result<Self> {
        model.validate()?;
        let geometry: Vec<GaussianGeometry<f32>> =
            base_gaussians(&model, 0..model.anchors.len(), &[0.0; 3])?.iter().map(GaussianGeometry::of).collect();
        Ok(Self { frame_index, dynamic: vec![false; model.anchors.len()], prior: geometry.clone(), geometry, model, residues: None })
    }

    pub fn gaussians(&self, camera: &Camera<f32>) -> Result<Vec<Gaussian3D<f32>>> {
        frame_gaussians(&self.model, &self.prior, &self.dynamic, self.residues.as_ref(), camera)
    }

    pub fn render(&self, camera: &Camera<f64>) -> Result<Image<f32>> {
        let c = camera.cast::<f32>();
        Ok(rasterize(&self.gaussians(&c)?, &c))
    }

    pub fn num_dynamic(&self) -> usize {
        self.dynamic.iter().filter(|d| **d).count()
    }
}

/// Rounds heads and rate scales to half precision and quantizes the grids.
pub fn freeze_residues<T: Real>(r: &TemporalResidues<T>, step: f64) -> Result<TemporalResidues<f32>> {
    let mut out = TemporalResidues {
        motion: freeze_grid(&r.motion, step)?,
        compensation: freeze_grid(&r.compensation, step)?,
        heads: r.heads.cast::<f32>(),
        motion_rate: r.motion_rate.cast::<f32>(),
        compensation_rate: r.compensation_rate.cast::<f32>(),
    };
    visit_residue_params(&mut out, &mut |v| {
        *v = round_f16(*v);
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("residue head weight outside half-precision range".into()))
        }
    })?;
    Ok(out)
}

fn visit_residue_params(r: &mut TemporalResidues<f32>, f: &mut dyn FnMut(&mut f32) -> Result<()>) -> Result<()> {
    for l in r.heads.layers_mut() {
        l.params_mut().try_for_each(&mut *f)?;
    }
    r.motion_rate.log_scales.iter_mut().try_for_each(&mut *f)?;
    r.compensation_rate.log_scales.iter_mut().try_for_each(f)
}

/// Builds the state of a predicted frame from the previous state, frozen
/// residues, the model with any created anchors appended and the partition.
pub fn apply_p_frame(
    prev: &FrameState,
    model: SceneModel<f32>,
    residues: TemporalResidues<f32>,
    dynamic: Vec<bool>,
    frame_index: u32,
) -> Result<FrameState> {
    let n_prev = prev.model.anchors.len();
    if model.anchors.len() < n_prev || prev.geometry.len() != prev.model.coupled.len() {
        return Err(Error::InvalidArgument("frame model does not extend the previous one".into()));
    }
    let mut prior = prev.geometry.clone();
    prior.extend(base_gaussians(&model, n_prev..model.anchors.len(), &[0.0; 3])?.iter().map(GaussianGeometry::of));
    let geometry = advance_geometry(&model, &prior, &dynamic, &residues)?;
    Ok(FrameState { frame_index, model, prior, geometry, dynamic, residues: Some(residues) })
}

fn encode_flags(enc: &mut Encoder, flags: &[bool]) {
    let Some(first) = flags.first() else { return };
    enc.encode_bypass(*first as u64, 1);
    let mut eg = ExpGolombContexts::default();
    let mut run = 0u128;
    let mut cur = *first;
    for f in flags {
        if *f == cur {
            run += 1;
        } else {
            eg.encode(enc, run - 1);
            cur = *f;
            run = 1;
        }
    }
    eg.encode(enc, run - 1);
}

fn decode_flags(dec: &mut Decoder<'_>, n: usize) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok(out);
    }
    let mut cur = dec.decode_bypass(1)? == 1;
    let mut eg = ExpGolombContexts::default();
    while out.len() < n {
        let run = eg.decode(dec)?.checked_add(1).filter(|r| *r <= (n - out.len()) as u128);
        let run = run.ok_or_else(|| Error::Corrupt("partition run overflows the anchor count".into()))?;
        out.extend(std::iter::repeat_n(cur, run as usize));
        cur = !cur;
    }
    Ok(out)
}

/// Residue section: half-precision heads and rate scales, then one range
/// coded stream with both grids and the run-length-coded partition.
fn encode_residue_section(r: &TemporalResidues<f32>, flags: &[bool], step: f64) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    let mut copy = r.clone();
    visit_residue_params(&mut copy, &mut |v| {
        w.f16(*v);
        Ok(())
    })?;
    let mut enc = Encoder::new();
    encode_grid(&mut enc, &r.motion, &r.motion_rate, step)?;
    encode_grid(&mut enc, &r.compensation, &r.compensation_rate, step)?;
    encode_flags(&mut enc, flags);
    w.buf.extend(enc.finish());
    Ok(w.buf)
}

fn decode_residue_section(bytes: &[u8], template: TemporalResidues<f32>, n_flags: usize, step: f64) -> Result<(TemporalResidues<f32>, Vec<bool>)> {
    let mut r = template;
    let mut reader = ByteReader::new(bytes);
    visit_residue_params(&mut r, &mut |v| {
        *v = reader.f16()?;
        Ok(())
    })?;
    let rest = reader.bytes(reader.remaining())?;
    let mut dec = Decoder::new(rest)?;
    let (mr, cr) = (r.motion_rate.clone(), r.compensation_rate.clone());
    decode_grid(&mut dec, &mut r.motion, &mr, step)?;
    decode_grid(&mut dec, &mut r.compensation, &cr, step)?;
    let flags = decode_flags(&mut dec, n_flags)?;
    Ok((r, flags))
}

fn p_frame_bitstream(state: &FrameState, n_prev: usize) -> Result<Bitstream> {
    let m = &state.model;
    let residues = state.residues.as_ref().ok_or_else(|| Error::InvalidArgument("predicted frame without residues".into()))?;
    let created = m.anchors.len() - n_prev;
    let mut sections = Vec::new();
    if created > 0 {
        let s = encode_anchor_streams(m, n_prev..m.anchors.len())?;
        sections.extend([
            (SectionId::Locations, s.locations),
            (SectionId::Covariances, s.covariances),
            (SectionId::Hyperpriors, s.hyperpriors),
            (SectionId::Embeddings, s.embeddings),
            (SectionId::CoupledEmbeddings, s.coupled),
        ]);
    }
    sections.push((SectionId::TemporalResidues, encode_residue_section(residues, &state.dynamic, m.config.residue_step)?));
    Ok(Bitstream {
        header: Header {
            kind: FrameKind::Predicted,
            frame_index: state.frame_index,
            config: m.config.clone(),
            bounds_min: m.grid.bounds_min,
            bounds_max: m.grid.bounds_max,
            anchors: created as u32,
        },
        sections,
    })
}

/// Rebuilds the state of a predicted frame on top of the previous state.
pub fn decode_p_frame(prev: &FrameState, bytes: &[u8]) -> Result<FrameState> {
    let bs = Bitstream::from_bytes(bytes)?;
    let h = &bs.header;
    if h.kind != FrameKind::Predicted {
        return Err(Error::InvalidArgument(format!("expected a predicted frame, got {}", h.kind.name())));
    }
    if h.config != prev.model.config || h.bounds_min != prev.model.grid.bounds_min || h.bounds_max != prev.model.grid.bounds_max {
        return Err(Error::Corrupt("predicted frame does not match the previous frame's configuration".into()));
    }
    let mut model = prev.model.clone();
    let created = h.anchors as usize;
    if created > 0 {
        let streams = AnchorStreams {
            locations: bs.section(SectionId::Locations)?.to_vec(),
            covariances: bs.section(SectionId::Covariances)?.to_vec(),
            hyperpriors: bs.section(SectionId::Hyperpriors)?.to_vec(),
            embeddings: bs.section(SectionId::Embeddings)?.to_vec(),
            coupled: bs.section(SectionId::CoupledEmbeddings)?.to_vec(),
        };
        decode_anchor_streams(&mut model, created, &streams)?;
    }
    let template = TemporalResidues::neutral(&h.config.temporal_grid, h.bounds_min, h.bounds_max)?;
    let n = model.anchors.len();
    let (residues, flags) = decode_residue_section(bs.section(SectionId::TemporalResidues)?, template, n, h.config.residue_step)?;
    apply_p_frame(prev, model, residues, flags, h.frame_index)
}

/// Decodes an intra or static stream into the first frame state.
pub fn decode_i_frame(bytes: &[u8]) -> Result<FrameState> {
    let bs = Bitstream::from_bytes(bytes)?;
    let model = crate::codec::decode_bitstream(&bs)?;
    FrameState::from_intra(model, bs.header.frame_index)
}

/// Per-Gaussian forward values reused by the backward pass.
struct GaussCache<T> {
    prior: Gaussian3D<T>,
    sample: GridSample<T>,
    /// `ζ^d` for dynamic Gaussians, `ρ^s` for static ones.
    zeta: Vec<T>,
    x: Vec<T>,
    dynamic: bool,
    color_pre: Vec3<T>,
    opacity_pre: T,
    scaling_raw: Vec3<T>,
    rotation_raw: Quat<T>,
}

/// Gradients of a predicted-frame loss.
#[derive(Clone, Debug)]
pub struct PGrad<T> {
    pub heads: TemporalHeads<T>,
    pub motion: GridGrad<T>,
    pub compensation: GridGrad<T>,
    pub motion_rate: GridRateModel<T>,
    pub compensation_rate: GridRateModel<T>,
    /// One entry per created anchor.
    pub created: Vec<AnchorInputsGrad<T>>,
}

pub struct PEval<T> {
    pub breakdown: LossBreakdown,
    pub grad: Option<PGrad<T>>,
    /// Pixel-space gradient of every projected center.
    pub screen_grad: Vec<[T; 2]>,
    /// Mean deformation significance of each anchor's Gaussians (zero for
    /// static anchors).
    pub significance: Vec<f64>,
    pub render: Image<T>,
}

/// Working state of a predicted frame under optimization.
#[derive(Clone, Debug)]
pub struct PFrameProblem<T> {
    /// Intra-frame model with created anchors appended.
    pub model: SceneModel<T>,
    /// Anchors inherited from the previous frame.
    pub inherited: usize,
    /// Previous-frame geometry of the inherited Gaussians.
    pub prior: Vec<GaussianGeometry<T>>,
    pub dynamic: Vec<bool>,
    pub residues: TemporalResidues<T>,
}

struct GaussBackward<T> {
    prior: GaussianGrad<T>,
    res: [T; RES_DIM],
    rho: Vec<T>,
}

fn gauss_backward<T: Real>(c: &GaussCache<T>, g: &GaussianGrad<T>, heads: &TemporalHeads<T>, hg: &mut TemporalHeads<T>) -> GaussBackward<T> {
    let lo = T::lit(OPACITY_FLOOR);
    let inside = |v: T, a: T, b: T| v > a && v < b;
    let gc: Vec<T> = (0..3).map(|i| if inside(c.color_pre[i], T::zero(), T::one()) { g.color[i] } else { T::zero() }).collect();
    let mut out = GaussBackward { prior: GaussianGrad::zero(), res: [T::zero(); RES_DIM], rho: Vec::new() };
    out.prior.color = [gc[0], gc[1], gc[2]];
    if !c.dynamic {
        out.prior.mean = g.mean;
        out.prior.scales = g.scales;
        out.prior.rotation = g.rotation;
        out.prior.opacity = g.opacity;
        let gx = heads.static_color.backward(&c.x, &gc, &mut hg.static_color);
        out.rho = gx[VIEW_DIM..].to_vec();
        return out;
    }
    let ga = if inside(c.opacity_pre, lo, T::one() - lo) { g.opacity } else { T::zero() };
    out.prior.opacity = ga;
    let mut gx = heads.color.backward(&c.x, &gc, &mut hg.color);
    for (a, b) in gx.iter_mut().zip(heads.opacity.backward(&c.x, &[ga], &mut hg.opacity)) {
        *a += b;
    }
    // Translation.
    out.prior.mean = g.mean;
    let mut gz = heads.translation.backward(&c.zeta, &g.mean, &mut hg.translation);
    // Scaling: out scale = prior scale * exp(raw).
    let prior_scales = c.prior.covariance.scales();
    let gl: [T; 3] = std::array::from_fn(|i| g.scales[i] * prior_scales[i] * c.scaling_raw[i].exp());
    out.prior.scales = std::array::from_fn(|i| g.scales[i] * c.scaling_raw[i].exp());
    for (a, b) in gz.iter_mut().zip(heads.scaling.backward(&c.zeta, &gl, &mut hg.scaling)) {
        *a += b;
    }
    // Rotation: out = normalize(raw) * normalize(prior).
    let q = math::quat_normalize(&c.rotation_raw);
    let pu = c.prior.covariance.unit_rotation();
    let (g_q, g_pu) = math::quat_mul_backward(&q, &pu, &g.rotation);
    out.prior.rotation = math::quat_normalize_backward(&c.prior.covariance.rotation, &g_pu);
    let g_raw = math::quat_normalize_backward(&c.rotation_raw, &g_q);
    for (a, b) in gz.iter_mut().zip(heads.rotation.backward(&c.zeta, &g_raw, &mut hg.rotation)) {
        *a += b;
    }
    for (a, b) in gz.iter_mut().zip(&gx[VIEW_DIM..]) {
        *a += *b;
    }
    out.res.copy_from_slice(&gz[..RES_DIM]);
    out.rho = gz[RES_DIM..].to_vec();
    out
}

impl<T: Real> PFrameProblem<T> {
    pub fn num_created(&self) -> usize {
        self.model.anchors.len() - self.inherited
    }

    /// Loss `D + λ R / N` with `R` the bits of both residue grids and `N`
    /// the number of Gaussians; gradients on request.
    pub fn loss(&self, camera: &Camera<T>, target: &Image<T>, lambda: f64, grid_rng: Option<&mut dyn RngCore>, with_grad: bool) -> Result<PEval<T>> {
        let m = &self.model;
        let k = m.k();
        let n_anchor = m.anchors.len();
        if self.prior.len() != self.inherited * k || self.dynamic.len() != n_anchor {
            return Err(Error::DimensionMismatch { expected: self.inherited * k, got: self.prior.len() });
        }
        let center = camera.center();
        let r = &self.residues;
        type Fwd<T> = (Option<AnchorInputs<T>>, Vec<GaussCache<T>>, Vec<Gaussian3D<T>>, f64);
        let fwd: Vec<Fwd<T>> = (0..n_anchor)
            .into_par_iter()
            .map(|i| {
                let inputs = anchor_inputs(m, i)?;
                let base = derive_from_inputs(&m.prediction, &inputs, &center)?;
                let view = ViewEmbedding::new(&center, &m.anchors[i].location);
                let mut caches = Vec::with_capacity(k);
                let mut out = Vec::with_capacity(k);
                let mut sig = 0.0;
                for (jj, b) in base.iter().enumerate() {
                    let j = i * k + jj;
                    let prior =
                        if i < self.inherited { Gaussian3D { mean: self.prior[j].mean, covariance: self.prior[j].covariance, ..*b } } else { *b };
                    let dynamic = self.dynamic[i];
                    let grid = if dynamic { &r.motion } else { &r.compensation };
                    let sample = grid.sample(&prior.mean)?;
                    let rho = grid.gather(&sample);
                    let zeta = if dynamic { motion_features(&m.coupled[j].res_embedding, &rho) } else { rho };
                    let x = view_concat(&view, &zeta);
                    let (g, color_pre, opacity_pre, scaling_raw, rotation_raw);
                    if dynamic {
                        let psi = deformation_from(&r.heads, &zeta);
                        sig += deformation_significance(&psi).as_f64();
                        g = deform_dynamic(&prior, &psi, &zeta, &view, &r.heads);
                        let dc = r.heads.color.forward_unchecked(&x);
                        color_pre = std::array::from_fn(|c| prior.color[c] + dc[c]);
                        opacity_pre = prior.opacity + r.heads.opacity.forward_unchecked(&x)[0];
                        let s = r.heads.scaling.forward_unchecked(&zeta);
                        scaling_raw = [s[0], s[1], s[2]];
                        rotation_raw = rotation_preimage(&r.heads, &zeta);
                    } else {
                        g = compensate_static(&prior, &zeta, &view, &r.heads);
                        let dc = r.heads.static_color.forward_unchecked(&x);
                        color_pre = std::array::from_fn(|c| prior.color[c] + dc[c]);
                        opacity_pre = prior.opacity;
                        scaling_raw = [T::zero(); 3];
                        rotation_raw = math::identity_quat();
                    }
                    out.push(g);
                    caches.push(GaussCache { prior, sample, zeta, x, dynamic, color_pre, opacity_pre, scaling_raw, rotation_raw });
                }
                let created = if i >= self.inherited { Some(inputs) } else { None };
                Ok((created, caches, out, sig / k as f64))
            })
            .collect::<Result<_>>()?;
        let mut gaussians = Vec::with_capacity(n_anchor * k);
        let mut caches = Vec::with_capacity(n_anchor);
        let mut created_inputs = Vec::new();
        let mut significance = Vec::with_capacity(n_anchor);
        for (inp, c, g, s) in fwd {
            gaussians.extend(g);
            caches.push(c);
            if let Some(inp) = inp {
                created_inputs.push(inp);
            }
            significance.push(s);
        }
        let (render, state) = rasterize_with_state(&gaussians, camera);
        let (distortion, image_grad) = distortion_backward(&render, target)?;
        let n = m.coupled.len().max(1) as f64;
        let rate_weight = T::lit(lambda / n);
        let step = T::lit(m.config.residue_step);
        // A local generator lets both grids draw noise from one stream.
        let mut noise = grid_rng.map(|r| ChaCha8Rng::seed_from_u64(r.next_u64()));

        let mut grad = None;
        let mut screen_grad = Vec::new();
        let grid_bits;
        if with_grad {
            let rg = backprop_with_state(&gaussians, camera, &state, &image_grad);
            let idx: Vec<usize> = (0..n_anchor).collect();
            let parts: Vec<(TemporalHeads<T>, Vec<Vec<GaussBackward<T>>>)> = idx
                .par_chunks(BACKWARD_CHUNK)
                .map(|chunk| {
                    let mut hg = r.heads.zero_like();
                    let out = chunk
                        .iter()
                        .map(|&i| {
                            caches[i].iter().enumerate().map(|(jj, c)| gauss_backward(c, &rg.gaussians[i * k + jj], &r.heads, &mut hg)).collect()
                        })
                        .collect();
                    (hg, out)
                })
                .collect();
            let mut heads = r.heads.zero_like();
            let mut per_anchor = Vec::with_capacity(n_anchor);
            for (hg, out) in parts {
                heads.add(&hg);
                per_anchor.extend(out);
            }
            let mut motion = r.motion.zero_grad();
            let mut compensation = r.compensation.zero_grad();
            let mut created = Vec::with_capacity(created_inputs.len());
            for (i, gb) in per_anchor.iter_mut().enumerate() {
                for (jj, b) in gb.iter_mut().enumerate() {
                    let c = &caches[i][jj];
                    let dpos = if c.dynamic {
                        r.motion.backprop(&c.sample, &b.rho, &mut motion)
                    } else {
                        r.compensation.backprop(&c.sample, &b.rho, &mut compensation)
                    };
                    for a in 0..3 {
                        b.prior.mean[a] += dpos[a];
                    }
                }
                if i >= self.inherited {
                    let inputs = &created_inputs[i - self.inherited];
                    let g_gauss: Vec<GaussianGrad<T>> = gb.iter().map(|b| b.prior).collect();
                    let mut scratch = m.prediction.zero_like();
                    let mut g = derive_backward(&m.prediction, inputs, &center, &g_gauss, &mut scratch);
                    for (jj, b) in gb.iter().enumerate() {
                        for d in 0..RES_DIM {
                            g.res_embeddings[jj][d] += b.res[d];
                        }
                    }
                    created.push(g);
                }
            }
            let mut mr = r.motion_rate.zero_like();
            let mut cr = r.compensation_rate.zero_like();
            let bm =
                grid_rate(&r.motion, &r.motion_rate, step, noise.as_mut().map(|r| r as &mut dyn RngCore), rate_weight, Some((&mut motion, &mut mr)))?;
            let bc = grid_rate(
                &r.compensation,
                &r.compensation_rate,
                step,
                noise.as_mut().map(|r| r as &mut dyn RngCore),
                rate_weight,
                Some((&mut compensation, &mut cr)),
            )?;
            grid_bits = bm.as_f64() + bc.as_f64();
            screen_grad = rg.screen;
            grad = Some(PGrad { heads, motion, compensation, motion_rate: mr, compensation_rate: cr, created });
        } else {
            let bm = grid_rate(&r.motion, &r.motion_rate, step, noise.as_mut().map(|r| r as &mut dyn RngCore), rate_weight, None)?;
            let bc = grid_rate(&r.compensation, &r.compensation_rate, step, noise.as_mut().map(|r| r as &mut dyn RngCore), rate_weight, None)?;
            grid_bits = bm.as_f64() + bc.as_f64();
        }
        let loss = distortion + lambda * grid_bits / n;
        let breakdown = LossBreakdown { distortion, primitive_bits: 0.0, grid_bits, loss, psnr: psnr(&render, target)? };
        Ok(PEval { breakdown, grad, screen_grad, significance, render })
    }
}

/// Trainable parameter slices of a predicted frame, in a fixed order:
/// heads, grid tables, rate scales, then per created anchor its covariance
/// and embeddings (created locations stay where they were spawned).
fn p_params_mut<T: Real>(p: &mut PFrameProblem<T>) -> Vec<(PGroup, Vec<&mut [T]>)> {
    let mut heads = Vec::new();
    for l in p.residues.heads.layers_mut() {
        heads.push(&mut l.weight[..]);
        heads.push(&mut l.bias[..]);
    }
    let mut grids = Vec::new();
    for t in p.residues.motion.tables.iter_mut().chain(p.residues.compensation.tables.iter_mut()) {
        grids.push(&mut t[..]);
    }
    let rates = vec![&mut p.residues.motion_rate.log_scales[..], &mut p.residues.compensation_rate.log_scales[..]];
    let k = p.model.k();
    let mut anchors = Vec::new();
    let (anchor_list, coupled) = (&mut p.model.anchors, &mut p.model.coupled);
    for a in anchor_list.iter_mut().skip(p.inherited) {
        anchors.push(&mut a.covariance.log_scales[..]);
        anchors.push(&mut a.covariance.rotation[..]);
        anchors.push(&mut a.ref_embedding[..]);
    }
    for c in coupled.iter_mut().skip(p.inherited * k) {
        anchors.push(&mut c.res_embedding[..]);
    }
    vec![(PGroup::Heads, heads), (PGroup::Grid, grids), (PGroup::Heads, rates), (PGroup::Anchor, anchors)]
}

fn p_grads<T: Real>(g: &PGrad<T>) -> Vec<Vec<&[T]>> {
    let mut heads: Vec<&[T]> = Vec::new();
    for l in g.heads.layers() {
        heads.push(&l.weight);
        heads.push(&l.bias);
    }
    let grids: Vec<&[T]> = g.motion.iter().chain(&g.compensation).map(|t| &t[..]).collect();
    let rates: Vec<&[T]> = vec![&g.motion_rate.log_scales, &g.compensation_rate.log_scales];
    let mut anchors: Vec<&[T]> = Vec::new();
    for a in &g.created {
        anchors.push(&a.log_scales);
        anchors.push(&a.rotation);
        anchors.push(&a.ref_embedding);
    }
    for a in &g.created {
        for r in &a.res_embeddings {
            anchors.push(r);
        }
    }
    vec![heads, grids, rates, anchors]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PGroup {
    Heads,
    Grid,
    Anchor,
}

/// Optimizer and adaptive-control statistics of a predicted frame.
#[derive(Clone, Debug)]
pub struct PFrameTrainer {
    adam: Adam,
    moments: Vec<Vec<Moments<f64>>>,
    pub state: TemporalState<f64>,
    /// Per Gaussian: accumulated NDC gradient norm over the interval.
    pub gauss_grad: Vec<f64>,
    pub created: usize,
    pub step: usize,
}

impl PFrameTrainer {
    pub fn new(problem: &mut PFrameProblem<f64>, state: TemporalState<f64>) -> Self {
        let moments = p_params_mut(problem).iter().map(|(_, v)| v.iter().map(|s| Moments::zeros(s.len())).collect()).collect();
        Self {
            adam: Adam { beta1: 0.9, beta2: 0.999, eps: 1e-15, t: 0 },
            moments,
            gauss_grad: vec![0.0; problem.model.coupled.len()],
            state,
            created: 0,
            step: 0,
        }
    }

    fn apply(&mut self, problem: &mut PFrameProblem<f64>, grad: &PGrad<f64>, cfg: &TemporalConfig) {
        let adam = self.adam;
        let grads = p_grads(grad);
        for (((group, params), g), st) in p_params_mut(problem).into_iter().zip(grads).zip(&mut self.moments) {
            let lr = match group {
                PGroup::Heads => cfg.lr_network,
                PGroup::Grid => cfg.lr_grid,
                PGroup::Anchor => cfg.lr_anchor,
            };
            for ((p, g), m) in params.into_iter().zip(g).zip(st.iter_mut()) {
                adam.update(p, g, m, lr);
            }
        }
        self.adam.t += 1;
        self.step += 1;
    }

    /// Rebuilds the moment layout after anchors were created.
    fn grow(&mut self, problem: &mut PFrameProblem<f64>) {
        let shapes: Vec<Vec<usize>> = p_params_mut(problem).iter().map(|(_, v)| v.iter().map(|s| s.len()).collect()).collect();
        let old = std::mem::take(&mut self.moments);
        // The anchor group gains slices in the middle (covariances before
        // residual embeddings), so its moments restart.
        self.moments = shapes
            .iter()
            .zip(old)
            .enumerate()
            .map(|(gi, (lens, prev))| if gi == 3 { lens.iter().map(|n| Moments::zeros(*n)).collect() } else { prev })
            .collect();
        self.gauss_grad.resize(problem.model.coupled.len(), 0.0);
    }
}

/// Outcome of one adaptive-control call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ControlReport {
    pub static_to_dynamic: usize,
    pub dynamic_to_static: usize,
    pub created: usize,
}

/// Static→dynamic for accumulated gradients above `τ_{s→d}`, then
/// dynamic→static for accumulated significance below `τ_{d→s}` (anchors
/// converted in this call are skipped), then creation of a new dynamic
/// anchor at the highest-gradient Gaussian of every anchor whose
/// accumulated gradient exceeds `τ_c`. Accumulators are reset.
///
/// Returns the new anchors (with their residual embeddings); the caller
/// appends them.
pub fn adaptive_control<T: Real>(
    state: &mut TemporalState<T>,
    model: &SceneModel<T>,
    gaussian_means: &[Vec3<T>],
    gauss_grad: &[f64],
    thresholds: &TemporalThresholds,
    max_new: usize,
) -> Result<(ControlReport, Vec<(AnchorPrimitive<T>, Vec<[T; RES_DIM]>)>)> {
    let n = model.anchors.len();
    let k = model.k();
    if state.dynamic.len() != n || gaussian_means.len() != n * k || gauss_grad.len() != n * k {
        return Err(Error::DimensionMismatch { expected: n, got: state.dynamic.len() });
    }
    let mut report = ControlReport::default();
    let mut converted = vec![false; n];
    for i in 0..n {
        if !state.dynamic[i] && state.grad_accum[i].as_f64() > thresholds.static_to_dynamic {
            state.dynamic[i] = true;
            converted[i] = true;
            report.static_to_dynamic += 1;
        }
    }
    for i in 0..n {
        if state.dynamic[i] && !converted[i] && state.significance_accum[i].as_f64() < thresholds.dynamic_to_static {
            state.dynamic[i] = false;
            report.dynamic_to_static += 1;
        }
    }
    let mut new = Vec::new();
    for i in 0..n {
        if new.len() >= max_new {
            break;
        }
        if state.grad_accum[i].as_f64() <= thresholds.create {
            continue;
        }
        let best = (i * k..(i + 1) * k).max_by(|a, b| gauss_grad[*a].total_cmp(&gauss_grad[*b]).then(b.cmp(a))).expect("k > 0");
        let loc = gaussian_means[best];
        let far = math::norm3(&math::sub3(&loc, &model.anchors[i].location)).as_f64() > model.config.location_step;
        if far && loc.iter().all(|x| x.is_finite()) {
            let mut a = model.anchors[i].clone();
            a.location = loc;
            let res = model.coupled[i * k..(i + 1) * k].iter().map(|c| c.res_embedding).collect();
            new.push((a, res));
        }
    }
    report.created = new.len();
    state.reset_accumulators();
    Ok((report, new))
}

/// Result of encoding one predicted frame.
#[derive(Clone, Debug)]
pub struct PFrameOutcome {
    pub bytes: Vec<u8>,
    /// Decoder-identical state after this frame.
    pub state: FrameState,
    pub log: Vec<LossBreakdown>,
    pub controls: Vec<ControlReport>,
    /// Partition right after motion disentanglement.
    pub initial_dynamic: Vec<bool>,
}

/// Encodes frame `frame_index` against the decoded previous state.
/// `prev_images` are the previous frame's views, used for motion masks.
pub fn encode_p_frame(
    prev: &FrameState,
    prev_images: &[Image<f64>],
    views: &[TrainView],
    cfg: &TemporalConfig,
    frame_index: u32,
) -> Result<PFrameOutcome> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::InvalidArgument("a predicted frame needs at least one view".into()));
    }
    if prev.geometry.len() != prev.model.coupled.len() {
        return Err(Error::InvalidArgument("previous frame state is incomplete".into()));
    }
    let curr: Vec<Image<f64>> = views.iter().map(|v| v.image.clone()).collect();
    let masks = compute_motion_masks(prev_images, &curr, cfg.mask_threshold, cfg.mask_dilation)?;
    let k = prev.model.k();
    let n_prev = prev.model.anchors.len();

    // Disentangle on the previous frame's decoded Gaussians.
    let prev_gauss: Vec<Gaussian3D<f64>> = prev
        .geometry
        .iter()
        .map(|g| {
            let g = g.cast::<f64>();
            Gaussian3D { mean: g.mean, covariance: g.covariance, color: [0.0; 3], opacity: 1.0 }
        })
        .collect();
    let cams: Vec<Camera<f64>> = views.iter().map(|v| v.camera.clone()).collect();
    let mut state = disentangle(&prev_gauss, k, &masks, &cams, cfg.tau_motion)?;
    state.frame_index = frame_index as usize;
    let initial_dynamic = state.dynamic.clone();
    log::info!("frame {frame_index}: {} of {} anchors dynamic after disentanglement", state.num_dynamic(), n_prev);

    let model64 = prev.model.cast::<f64>();
    let g = &model64.grid;
    let mut problem = PFrameProblem {
        residues: TemporalResidues::neutral(&model64.config.temporal_grid, g.bounds_min, g.bounds_max)?,
        inherited: n_prev,
        prior: prev.geometry.iter().map(|g| g.cast()).collect(),
        dynamic: state.dynamic.clone(),
        model: model64,
    };
    let mut trainer = PFrameTrainer::new(&mut problem, state);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (frame_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut controls = Vec::new();
    let thresholds = cfg.thresholds();
    for it in 0..cfg.iterations {
        if order.is_empty() {
            order = (0..views.len()).collect();
            order.shuffle(&mut rng);
        }
        let v = &views[order.pop().expect("nonempty")];
        let eval = problem.loss(&v.camera, &v.image, cfg.lambda, Some(&mut rng as &mut dyn RngCore), true)?;
        if !eval.breakdown.loss.is_finite() {
            return Err(Error::NonFinite(format!("predicted-frame loss at step {it}")));
        }
        let grad = eval.grad.expect("gradient requested");
        accumulate_stats(&mut trainer, &problem, &eval.screen_grad, &eval.significance, &v.camera);
        trainer.apply(&mut problem, &grad, cfg);
        log.push(eval.breakdown);
        let done = it + 1;
        if cfg.control_interval > 0 && done % cfg.control_interval == 0 && done < cfg.iterations {
            if log::log_enabled!(log::Level::Debug) {
                let q = |v: &[f64]| {
                    let mut v = v.to_vec();
                    v.sort_by(f64::total_cmp);
                    let at = |f: f64| v.get(((v.len() as f64 - 1.0) * f).round() as usize).copied().unwrap_or(0.0);
                    format!("p10 {:.2e} p50 {:.2e} p90 {:.2e} max {:.2e}", at(0.1), at(0.5), at(0.9), at(1.0))
                };
                log::debug!("frame {frame_index} step {done}: gradient {}", q(&trainer.state.grad_accum));
                log::debug!("frame {frame_index} step {done}: significance {}", q(&trainer.state.significance_accum));
            }
            let means = current_means(&problem)?;
            let room = cfg.max_created.saturating_sub(trainer.created);
            let (report, new) = adaptive_control(&mut trainer.state, &problem.model, &means, &trainer.gauss_grad, &thresholds, room)?;
            let added = new.len();
            for (a, res) in new {
                problem.model.push_anchor(a, &res)?;
            }
            trainer.state.extend(added, true);
            trainer.created += added;
            problem.dynamic = trainer.state.dynamic.clone();
            trainer.gauss_grad = vec![0.0; problem.model.coupled.len()];
            if added > 0 {
                trainer.grow(&mut problem);
            }
            log::debug!("frame {frame_index} step {done}: {report:?}");
            controls.push(report);
        }
    }

    // Freeze: residues, created anchors (Morton-sorted), partition.
    let residues = freeze_residues(&problem.residues, problem.model.config.residue_step)?;
    let mut model = prev.model.clone();
    let hyper = prev.model.entropy.cast::<f64>();
    let order = freeze_anchor_set(&mut model, &problem.model.anchors[n_prev..], &problem.model.coupled[n_prev * k..], None, &hyper)?;
    let mut dynamic = problem.dynamic[..n_prev].to_vec();
    dynamic.extend(order.iter().map(|i| problem.dynamic[n_prev + i]));
    let state = apply_p_frame(prev, model, residues, dynamic, frame_index)?;
    let bytes = p_frame_bitstream(&state, n_prev)?.to_bytes()?;
    Ok(PFrameOutcome { bytes, state, log, controls, initial_dynamic })
}

/// Means of the Gaussians of every anchor at the current frame, used as
/// spawn locations.
fn current_means(p: &PFrameProblem<f64>) -> Result<Vec<Vec3<f64>>> {
    let mut prior = p.prior.clone();
    prior.extend(base_gaussians(&p.model, p.inherited..p.model.anchors.len(), &[0.0; 3])?.iter().map(GaussianGeometry::of));
    Ok(advance_geometry(&p.model, &prior, &p.dynamic, &p.residues)?.iter().map(|g| g.mean).collect())
}

/// Folds one step into the control accumulators: per anchor the mean NDC
/// gradient norm of its visible Gaussians, and the mean significance of
/// dynamic anchors.
fn accumulate_stats(t: &mut PFrameTrainer, p: &PFrameProblem<f64>, screen: &[[f64; 2]], significance: &[f64], cam: &Camera<f64>) {
    let k = p.model.k();
    let (sx, sy) = (cam.width as f64 / 2.0, cam.height as f64 / 2.0);
    for i in 0..p.model.anchors.len() {
        let mut sum = 0.0;
        let mut count = 0;
        for j in i * k..(i + 1) * k {
            let Some(s) = screen.get(j) else { continue };
            let (gx, gy) = (s[0] * sx, s[1] * sy);
            let nrm = (gx * gx + gy * gy).sqrt();
            if nrm > 0.0 {
                t.gauss_grad[j] += nrm;
                sum += nrm;
                count += 1;
            }
        }
        if count > 0 {
            t.state.grad_accum[i] += sum / count as f64;
        }
        if p.dynamic[i] {
            t.state.significance_accum[i] += significance[i];
        }
    }
    t.state.significance_steps += 1;
}

/// Per-frame summary of an encoded sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameReport {
    pub frame: u32,
    pub kind: FrameKind,
    pub bytes: usize,
    /// Mean PSNR of the decoder-side render over the frame's views.
    pub psnr: f64,
    pub anchors: usize,
    pub dynamic: usize,
}

#[derive(Clone, Debug)]
pub struct SequenceOutcome {
    pub streams: Vec<Vec<u8>>,
    pub states: Vec<FrameState>,
    pub reports: Vec<FrameReport>,
    pub p_frames: Vec<PFrameOutcome>,
}

pub fn mean_psnr(state: &FrameState, views: &[TrainView]) -> Result<f64> {
    let mut total = 0.0;
    for v in views {
        total += psnr(&state.render(&v.camera)?.cast::<f64>(), &v.image)?;
    }
    Ok(total / views.len().max(1) as f64)
}

/// Intra frame from the first timestamp, then one predicted frame per
/// following timestamp, each coded against the decoded previous state.
pub fn encode_sequence(
    frames: &[Vec<TrainView>],
    points: &[Vec3<f64>],
    codec: &CodecConfig,
    train: &TrainConfig,
    cfg: &TemporalConfig,
) -> Result<SequenceOutcome> {
    let first = frames.first().ok_or_else(|| Error::InvalidArgument("empty sequence".into()))?;
    let out = train_static(first, points, codec, train)?;
    let enc = encode_model_as(&out.model, FrameKind::Intra, 0)?;
    let mut state = FrameState::from_intra(enc.frozen, 0)?;
    let mut reports = vec![FrameReport {
        frame: 0,
        kind: FrameKind::Intra,
        bytes: enc.bytes.len(),
        psnr: mean_psnr(&state, first)?,
        anchors: state.model.anchors.len(),
        dynamic: 0,
    }];
    let mut streams = vec![enc.bytes];
    let mut states = vec![state.clone()];
    let mut p_frames = Vec::new();
    for (t, views) in frames.iter().enumerate().skip(1) {
        let prev_images: Vec<Image<f64>> = frames[t - 1].iter().map(|v| v.image.clone()).collect();
        let p = encode_p_frame(&state, &prev_images, views, cfg, t as u32)?;
        state = p.state.clone();
        reports.push(FrameReport {
            frame: t as u32,
            kind: FrameKind::Predicted,
            bytes: p.bytes.len(),
            psnr: mean_psnr(&state, views)?,
            anchors: state.model.anchors.len(),
            dynamic: state.num_dynamic(),
        });
        log::info!("frame {t}: {} bytes, {:.2} dB, {} dynamic", p.bytes.len(), reports[t].psnr, reports[t].dynamic);
        streams.push(p.bytes.clone());
        states.push(state.clone());
        p_frames.push(p);
    }
    Ok(SequenceOutcome { streams, states, reports, p_frames })
}

/// Decodes an intra stream followed by predicted streams.
pub fn decode_sequence(streams: &[Vec<u8>]) -> Result<Vec<FrameState>> {
    let first = streams.first().ok_or_else(|| Error::InvalidArgument("empty sequence".into()))?;
    let mut out = vec![decode_i_frame(first)?];
    for s in &streams[1..] {
        let next = decode_p_frame(out.last().expect("nonempty"), s)?;
        out.push(next);
    }
    Ok(out)
}

/// Per-frame CSV: frame, kind, bytes, psnr, anchors, dynamic.
pub fn write_frame_csv(path: &std::path::Path, reports: &[FrameReport]) -> Result<()> {
    let mut s = String::from("frame,kind,bytes,psnr,anchors,dynamic\n");
    for r in reports {
        s.push_str(&format!("{},{},{},{:.4},{},{}\n", r.frame, r.kind.name(), r.bytes, r.psnr, r.anchors, r.dynamic));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
