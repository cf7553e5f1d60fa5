//! Hybrid primitive structure: anchors, coupled primitives, derived Gaussians
//! and the scene container tying them to the learned networks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::CodecConfig;
use crate::entropy_model::{EntropyNetworks, GridRateModel};
use crate::error::{Error, Result};
use crate::feature_grid::FeatureGrid;
use crate::math::{self, Mat3, Quat, Vec3};
use crate::scalar::{cast_arr, Real};
use crate::spatial_prediction::PredictionNetworks;

/// Reference embedding width of an anchor.
pub const REF_DIM: usize = 32;
/// Residual embedding width of a coupled primitive.
pub const RES_DIM: usize = 4;
/// Coupled primitives per anchor.
pub const DEFAULT_K: usize = 10;
/// Hyperprior latent width.
pub const HYPER_DIM: usize = 8;
/// Coded covariance parameters: three log-scales then the quaternion.
pub const COV_DIM: usize = 7;
/// Initial scale of the grid-table rate model.
pub const INIT_GRID_SCALE: f64 = 0.1;

/// Covariance kept as scale and rotation factors.
///
/// Scales are stored as logarithms so they stay positive under gradient
/// descent. The rotation is a quaternion `[w, x, y, z]` that is renormalized
/// whenever it is used.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactoredCovariance<T> {
    pub log_scales: Vec3<T>,
    pub rotation: Quat<T>,
}

impl<T: Real> FactoredCovariance<T> {
    pub fn from_scales(scales: Vec3<T>, rotation: Quat<T>) -> Result<Self> {
        if scales.iter().any(|s| !(*s > T::zero()) || !s.is_finite()) {
            return Err(Error::InvalidArgument("covariance scales must be positive and finite".into()));
        }
        if math::quat_norm(&rotation) <= T::zero() {
            return Err(Error::InvalidArgument("zero rotation quaternion".into()));
        }
        Ok(Self { log_scales: scales.map(|s| s.ln()), rotation })
    }

    pub fn isotropic(scale: T) -> Self {
        Self { log_scales: [scale.ln(); 3], rotation: math::identity_quat() }
    }

    pub fn scales(&self) -> Vec3<T> {
        self.log_scales.map(|l| l.exp())
    }

    pub fn unit_rotation(&self) -> Quat<T> {
        math::quat_normalize(&self.rotation)
    }

    /// The seven coded values: log-scales then raw quaternion.
    pub fn to_params(&self) -> [T; COV_DIM] {
        let l = self.log_scales;
        let q = self.rotation;
        [l[0], l[1], l[2], q[0], q[1], q[2], q[3]]
    }

    pub fn from_params(p: &[T; COV_DIM]) -> Self {
        Self { log_scales: [p[0], p[1], p[2]], rotation: [p[3], p[4], p[5], p[6]] }
    }

    pub fn cast<U: Real>(&self) -> FactoredCovariance<U> {
        FactoredCovariance { log_scales: cast_arr(&self.log_scales), rotation: cast_arr(&self.rotation) }
    }
}

/// `R diag(s^2) R^T` with the rotation renormalized first.
pub fn densify_covariance<T: Real>(cov: &FactoredCovariance<T>) -> Mat3<T> {
    let r = math::quat_to_mat(&cov.unit_rotation());
    let s = cov.scales();
    let m: Mat3<T> = std::array::from_fn(|i| std::array::from_fn(|j| r[i][j] * s[j]));
    math::matmul3(&m, &math::transpose3(&m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorPrimitive<T> {
    pub location: Vec3<T>,
    pub covariance: FactoredCovariance<T>,
    pub ref_embedding: [T; REF_DIM],
}

impl<T: Real> AnchorPrimitive<T> {
    pub fn cast<U: Real>(&self) -> AnchorPrimitive<U> {
        AnchorPrimitive { location: cast_arr(&self.location), covariance: self.covariance.cast(), ref_embedding: cast_arr(&self.ref_embedding) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledPrimitive<T> {
    pub res_embedding: [T; RES_DIM],
    pub anchor_index: usize,
}

/// Renderable Gaussian produced by prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D<T> {
    pub mean: Vec3<T>,
    pub covariance: FactoredCovariance<T>,
    pub color: Vec3<T>,
    pub opacity: T,
}

/// Gradient of a loss with respect to one [`Gaussian3D`].
///
/// `scales` is taken with respect to the scale lengths and `rotation` with
/// respect to the unit quaternion as fed to the rotation matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianGrad<T> {
    pub mean: Vec3<T>,
    pub scales: Vec3<T>,
    pub rotation: Quat<T>,
    pub color: Vec3<T>,
    pub opacity: T,
}

impl<T: Real> GaussianGrad<T> {
    pub fn zero() -> Self {
        Self { mean: [T::zero(); 3], scales: [T::zero(); 3], rotation: [T::zero(); 4], color: [T::zero(); 3], opacity: T::zero() }
    }
}

/// Quantized hyperprior latents fixed when a model is frozen for coding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latents {
    pub anchor: Vec<[i8; HYPER_DIM]>,
    pub coupled: Vec<[i8; HYPER_DIM]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneModel<T> {
    pub config: CodecConfig,
    pub anchors: Vec<AnchorPrimitive<T>>,
    /// Grouped contiguously: coupled `[i*K, (i+1)*K)` belong to anchor `i`.
    pub coupled: Vec<CoupledPrimitive<T>>,
    pub grid: FeatureGrid<T>,
    pub prediction: PredictionNetworks<T>,
    pub entropy: EntropyNetworks<T>,
    /// Rate model of the coded grid tables.
    pub grid_rate: GridRateModel<T>,
    /// Present once the model has been frozen for coding.
    pub latents: Option<Latents>,
}

impl<T: Real> SceneModel<T> {
    /// Model with no anchors, a zero grid over the given domain and freshly
    /// initialized networks.
    pub fn empty(config: CodecConfig, bounds_min: Vec3<T>, bounds_max: Vec3<T>, rng: &mut impl rand::Rng) -> Result<Self> {
        config.validate()?;
        let grid = FeatureGrid::zeros(config.grid.clone(), bounds_min, bounds_max)?;
        let dim = grid.output_dim();
        Ok(Self {
            prediction: PredictionNetworks::init(dim, rng),
            entropy: EntropyNetworks::init(dim, config.init_steps, config.init_entropy_scale, rng),
            grid_rate: GridRateModel::new(config.grid.levels, INIT_GRID_SCALE),
            config,
            anchors: Vec::new(),
            coupled: Vec::new(),
            grid,
            latents: None,
        })
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(Error::InvalidArgument("K must be positive".into()));
        }
        if self.coupled.len() != k * self.anchors.len() {
            return Err(Error::InvalidArgument(format!("{} coupled primitives for {} anchors with K={k}", self.coupled.len(), self.anchors.len())));
        }
        for (i, c) in self.coupled.iter().enumerate() {
            if c.anchor_index != i / k {
                return Err(Error::InvalidArgument(format!("coupled {i} links to anchor {}", c.anchor_index)));
            }
            if c.res_embedding.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("coupled {i} embedding")));
            }
        }
        for (i, a) in self.anchors.iter().enumerate() {
            let finite = a.location.iter().chain(&a.ref_embedding).chain(&a.covariance.log_scales).all(|x| x.is_finite())
                && a.covariance.rotation.iter().all(|x| x.is_finite());
            if !finite {
                return Err(Error::NonFinite(format!("anchor {i}")));
            }
        }
        if let Some(l) = &self.latents {
            if l.anchor.len() != self.anchors.len() || l.coupled.len() != self.coupled.len() {
                return Err(Error::InvalidArgument("latent counts do not match primitives".into()));
            }
        }
        Ok(())
    }

    /// Appends an anchor with its K coupled primitives.
    pub fn push_anchor(&mut self, anchor: AnchorPrimitive<T>, res: &[[T; RES_DIM]]) -> Result<()> {
        if res.len() != self.k() {
            return Err(Error::DimensionMismatch { expected: self.k(), got: res.len() });
        }
        let idx = self.anchors.len();
        self.anchors.push(anchor);
        self.coupled.extend(res.iter().map(|r| CoupledPrimitive { res_embedding: *r, anchor_index: idx }));
        self.latents = None;
        Ok(())
    }

    /// Keeps the anchors whose flag is set, re-indexing coupled groups.
    pub fn retain_anchors(&mut self, keep: &[bool]) {
        let k = self.k();
        let mut anchors = Vec::new();
        let mut coupled = Vec::new();
        for (i, a) in self.anchors.iter().enumerate() {
            if keep[i] {
                let idx = anchors.len();
                anchors.push(a.clone());
                for c in &self.coupled[i * k..(i + 1) * k] {
                    coupled.push(CoupledPrimitive { res_embedding: c.res_embedding, anchor_index: idx });
                }
            }
        }
        self.anchors = anchors;
        self.coupled = coupled;
        self.latents = None;
    }

    pub fn cast<U: Real>(&self) -> SceneModel<U> {
        SceneModel {
            config: self.config.clone(),
            anchors: self.anchors.iter().map(|a| a.cast()).collect(),
            coupled: self
                .coupled
                .iter()
                .map(|c| CoupledPrimitive { res_embedding: cast_arr(&c.res_embedding), anchor_index: c.anchor_index })
                .collect(),
            grid: self.grid.cast(),
            prediction: self.prediction.cast(),
            entropy: self.entropy.cast(),
            grid_rate: self.grid_rate.cast(),
            latents: self.latents.clone(),
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()>
    where
        T: Serialize,
    {
        let s = serde_json::to_string(self).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self>
    where
        T: for<'de> Deserialize<'de>,
    {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&s).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

/// The K coupled primitives of one anchor, in stored order.
pub fn group_coupled<T: Real>(model: &SceneModel<T>, anchor_index: usize) -> Result<&[CoupledPrimitive<T>]> {
    if anchor_index >= model.anchors.len() {
        return Err(Error::IndexOutOfRange { index: anchor_index, len: model.anchors.len() });
    }
    let k = model.k();
    Ok(&model.coupled[anchor_index * k..(anchor_index + 1) * k])
}

/// Per-frame bookkeeping of the streaming pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalState<T> {
    pub frame_index: usize,
    pub dynamic: Vec<bool>,
    /// Accumulated screen-space positional gradient per anchor.
    pub grad_accum: Vec<T>,
    /// Accumulated deformation significance per anchor.
    pub significance_accum: Vec<T>,
    /// Number of steps folded into `significance_accum`.
    pub significance_steps: usize,
    pub motion_confidence: Vec<T>,
}

impl<T: Real> TemporalState<T> {
    pub fn new(frame_index: usize, anchors: usize) -> Self {
        Self {
            frame_index,
            dynamic: vec![false; anchors],
            grad_accum: vec![T::zero(); anchors],
            significance_accum: vec![T::zero(); anchors],
            significance_steps: 0,
            motion_confidence: vec![T::zero(); anchors],
        }
    }

    pub fn num_dynamic(&self) -> usize {
        self.dynamic.iter().filter(|d| **d).count()
    }

    pub fn reset_accumulators(&mut self) {
        self.grad_accum.iter_mut().for_each(|x| *x = T::zero());
        self.significance_accum.iter_mut().for_each(|x| *x = T::zero());
        self.significance_steps = 0;
    }

    /// Grows the per-anchor vectors for newly created anchors.
    pub fn extend(&mut self, n: usize, dynamic: bool) {
        self.dynamic.extend(std::iter::repeat_n(dynamic, n));
        self.grad_accum.extend(std::iter::repeat_n(T::zero(), n));
        self.significance_accum.extend(std::iter::repeat_n(T::zero(), n));
        self.motion_confidence.extend(std::iter::repeat_n(T::zero(), n));
    }
}

/// Reads an ASCII point table with one `x y z` row per line.
pub fn read_points(path: &Path) -> Result<Vec<Vec3<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_points(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}

pub fn parse_points(text: &str) -> Result<Vec<Vec3<f64>>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse("points", format!("line {}: {e}", n + 1)))?;
        if vals.len() != 3 || vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse("points", format!("line {}: expected three finite numbers", n + 1)));
        }
        out.push([vals[0], vals[1], vals[2]]);
    }
    Ok(out)
}

pub fn write_points(path: &Path, points: &[Vec3<f64>]) -> Result<()> {
    let mut s = String::new();
    for p in points {
        s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
