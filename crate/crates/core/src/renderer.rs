//! Software splatting rasterizer with an analytic backward pass, plus image
//! metrics and image/camera file formats.
//!
//! Gaussians are projected with the local affine (EWA) approximation, sorted
//! by view depth and alpha-composited front to back over a black background.
//! Work is split into fixed 16x16 tiles so that per-primitive gradient merges
//! happen in tile order regardless of the thread count.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};
use crate::primitives::{Gaussian3D, GaussianGrad};
use crate::scalar::Real;

pub const NEAR_PLANE: f64 = 0.01;
pub const COV2D_EPS: f64 = 1e-6;
pub const MAX_WEIGHT: f64 = 0.999;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
const TILE: usize = 16;

/// Pinhole camera with a world-to-camera rigid transform. Camera axes: x
/// right, y down, z forward.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> Camera<T> {
    /// Camera at `eye` looking at `target`, principal point at the image center.
    pub fn look_at(eye: Vec3<T>, target: Vec3<T>, up: Vec3<T>, focal: T, width: usize, height: usize) -> Self {
        let f = math::sub3(&target, &eye);
        let f = math::scale3(&f, T::one() / math::norm3(&f));
        let cross = |a: &Vec3<T>, b: &Vec3<T>| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
        // Image y points down, so "down" is -up projected off the forward axis.
        let mut r = cross(&f, &up);
        let rn = math::norm3(&r);
        r = math::scale3(&r, T::one() / rn);
        let d = cross(&f, &r);
        let rotation = [r, d, f];
        let translation = math::scale3(&math::matvec3(&rotation, &eye), -T::one());
        let half = T::lit(0.5);
        Self { rotation, translation, fx: focal, fy: focal, cx: T::lit(width as f64) * half, cy: T::lit(height as f64) * half, width, height }
    }

    pub fn center(&self) -> Vec3<T> {
        let rt = math::transpose3(&self.rotation);
        math::scale3(&math::matvec3(&rt, &self.translation), -T::one())
    }

    pub fn to_camera(&self, p: &Vec3<T>) -> Vec3<T> {
        math::add3(&math::matvec3(&self.rotation, p), &self.translation)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("image size must be positive".into()));
        }
        let rrt = math::matmul3(&self.rotation, &math::transpose3(&self.rotation));
        let id = math::identity3::<T>();
        for i in 0..3 {
            for j in 0..3 {
                if (rrt[i][j] - id[i][j]).abs() > T::lit(1e-4) {
                    return Err(Error::InvalidArgument("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Camera<U> {
        Camera {
            rotation: self.rotation.map(|r| crate::scalar::cast_arr(&r)),
            translation: crate::scalar::cast_arr(&self.translation),
            fx: self.fx.cast(),
            fy: self.fy.cast(),
            cx: self.cx.cast(),
            cy: self.cy.cast(),
            width: self.width,
            height: self.height,
        }
    }
}

/// RGB image, interleaved, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![T::zero(); width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [T; 3]) -> Self {
        let mut im = Self::new(width, height);
        for p in im.data.chunks_mut(3) {
            p.copy_from_slice(&rgb);
        }
        im
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image { width: self.width, height: self.height, data: crate::scalar::cast_vec(&self.data) }
    }

    fn check_same(&self, o: &Self) -> Result<()> {
        if self.width != o.width || self.height != o.height || self.data.len() != o.data.len() {
            return Err(Error::InvalidArgument(format!("image sizes differ: {}x{} vs {}x{}", self.width, self.height, o.width, o.height)));
        }
        Ok(())
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected<T> {
    pub mean2d: [T; 2],
    /// `(xx, xy, yy)` of the regularized 2D covariance.
    pub cov2d: [T; 3],
    /// `(xx, xy, yy)` of its inverse.
    pub conic: [T; 3],
    pub depth: T,
    /// 3-sigma half extents of the axis-aligned box.
    pub radius: [T; 2],
}

impl<T: Real> Projected<T> {
    /// Whether the center of pixel `(x, y)` is inside the 3-sigma box.
    #[inline]
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let px = T::lit(x as f64 + 0.5);
        let py = T::lit(y as f64 + 0.5);
        (px - self.mean2d[0]).abs() <= self.radius[0] && (py - self.mean2d[1]).abs() <= self.radius[1]
    }

    /// Inclusive pixel ranges of the box clipped to the image, if nonempty.
    pub fn pixel_range(&self, width: usize, height: usize) -> Option<[usize; 4]> {
        let lo = |m: T, r: T| (m - r - T::lit(0.5)).ceil();
        let hi = |m: T, r: T| (m + r - T::lit(0.5)).floor();
        let x0 = lo(self.mean2d[0], self.radius[0]).max(T::zero());
        let x1 = hi(self.mean2d[0], self.radius[0]).min(T::lit(width as f64 - 1.0));
        let y0 = lo(self.mean2d[1], self.radius[1]).max(T::zero());
        let y1 = hi(self.mean2d[1], self.radius[1]).min(T::lit(height as f64 - 1.0));
        if !(x0 <= x1 && y0 <= y1) {
            return None;
        }
        Some([x0.to_usize()?, x1.to_usize()?, y0.to_usize()?, y1.to_usize()?])
    }
}

/// Projection of one Gaussian; `None` when it lies behind the near plane or
/// its footprint is degenerate.
pub fn project_gaussian<T: Real>(g: &Gaussian3D<T>, cam: &Camera<T>) -> Option<Projected<T>> {
    let p = cam.to_camera(&g.mean);
    let z = p[2];
    if !(z > T::lit(NEAR_PLANE)) {
        return None;
    }
    let tm = jacobian_and_transform(cam, &p);
    let sigma = covariance3(g);
    let c = project_cov(&tm, &sigma);
    let eps = T::lit(COV2D_EPS);
    let cov2d = [c[0] + eps, c[1], c[2] + eps];
    let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
    if !(det > T::zero()) || !det.is_finite() {
        return None;
    }
    let conic = [cov2d[2] / det, -cov2d[1] / det, cov2d[0] / det];
    let three = T::lit(3.0);
    Some(Projected {
        mean2d: [cam.fx * p[0] / z + cam.cx, cam.fy * p[1] / z + cam.cy],
        cov2d,
        conic,
        depth: z,
        radius: [three * cov2d[0].sqrt(), three * cov2d[2].sqrt()],
    })
}

/// `T = J W` (2x3) with `J` the projection Jacobian at camera-space point `p`.
fn jacobian_and_transform<T: Real>(cam: &Camera<T>, p: &Vec3<T>) -> [[T; 3]; 2] {
    let z = p[2];
    let z2 = z * z;
    let j = [[cam.fx / z, T::zero(), -cam.fx * p[0] / z2], [T::zero(), cam.fy / z, -cam.fy * p[1] / z2]];
    let w = &cam.rotation;
    std::array::from_fn(|r| std::array::from_fn(|c| j[r][0] * w[0][c] + j[r][1] * w[1][c] + j[r][2] * w[2][c]))
}

/// World covariance from scales and the quaternion as stored.
fn covariance3<T: Real>(g: &Gaussian3D<T>) -> Mat3<T> {
    let r = math::quat_to_mat(&g.covariance.rotation);
    let s = g.covariance.scales();
    let m: Mat3<T> = std::array::from_fn(|i| std::array::from_fn(|j| r[i][j] * s[j]));
    math::matmul3(&m, &math::transpose3(&m))
}

fn project_cov<T: Real>(t: &[[T; 3]; 2], s: &Mat3<T>) -> [T; 3] {
    let ts: [[T; 3]; 2] = std::array::from_fn(|r| std::array::from_fn(|c| t[r][0] * s[0][c] + t[r][1] * s[1][c] + t[r][2] * s[2][c]));
    let dot = |a: &[T; 3], b: &[T; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    [dot(&ts[0], &t[0]), dot(&ts[0], &t[1]), dot(&ts[1], &t[1])]
}

/// Forward bookkeeping reused by the backward pass.
#[derive(Clone, Debug)]
pub struct RenderState<T> {
    pub projected: Vec<Option<Projected<T>>>,
    /// Per tile: primitive indices overlapping it, in compositing order.
    tiles: Vec<Vec<usize>>,
    tiles_x: usize,
    /// Per pixel: transmittance after compositing.
    final_t: Vec<T>,
    /// Per pixel: number of tile-list entries visited.
    visited: Vec<u32>,
}

fn depth_order<T: Real>(projected: &[Option<Projected<T>>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..projected.len()).filter(|i| projected[*i].is_some()).collect();
    order.sort_by(|a, b| {
        let (da, db) = (projected[*a].unwrap().depth, projected[*b].unwrap().depth);
        da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b))
    });
    order
}

fn bin_tiles<T: Real>(projected: &[Option<Projected<T>>], order: &[usize], cam: &Camera<T>) -> (Vec<Vec<usize>>, usize) {
    let tx = cam.width.div_ceil(TILE);
    let ty = cam.height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tx * ty];
    for &i in order {
        let p = projected[i].as_ref().expect("ordered primitives are projected");
        if let Some([x0, x1, y0, y1]) = p.pixel_range(cam.width, cam.height) {
            for ty_i in y0 / TILE..=y1 / TILE {
                for tx_i in x0 / TILE..=x1 / TILE {
                    tiles[ty_i * tx + tx_i].push(i);
                }
            }
        }
    }
    (tiles, tx)
}

/// Gaussian falloff at the 3-sigma ellipse; the weight is shifted down by it so
/// that it vanishes continuously at the cutoff.
const FALLOFF_CUT: f64 = 0.011108996538242306;

/// Returns the blending weight, the normalized falloff, its derivative with
/// respect to the exponent and the pixel offset. Nonpositive weights mean the
/// pixel is outside the footprint.
#[inline]
fn pixel_weight<T: Real>(p: &Projected<T>, opacity: T, x: usize, y: usize) -> (T, T, T, [T; 2]) {
    let dx = T::lit(x as f64 + 0.5) - p.mean2d[0];
    let dy = T::lit(y as f64 + 0.5) - p.mean2d[1];
    let power = -T::lit(0.5) * (p.conic[0] * dx * dx + T::lit(2.0) * p.conic[1] * dx * dy + p.conic[2] * dy * dy);
    let e = power.exp();
    let cut = T::lit(FALLOFF_CUT);
    let norm = T::one() / (T::one() - cut);
    let f = (e - cut) * norm;
    (opacity * f, f, e * norm, [dx, dy])
}

struct TileOut<T> {
    pixels: Vec<(usize, [T; 3], T, u32)>,
}

/// Renders and keeps the state needed by [`backprop_with_state`].
pub fn rasterize_with_state<T: Real>(gaussians: &[Gaussian3D<T>], cam: &Camera<T>) -> (Image<T>, RenderState<T>) {
    let projected: Vec<Option<Projected<T>>> = gaussians.par_iter().map(|g| project_gaussian(g, cam)).collect();
    let order = depth_order(&projected);
    let (tiles, tiles_x) = bin_tiles(&projected, &order, cam);
    let (w, h) = (cam.width, cam.height);
    let max_w = T::lit(MAX_WEIGHT);
    let min_t = T::lit(MIN_TRANSMITTANCE);
    let outs: Vec<TileOut<T>> = tiles
        .par_iter()
        .enumerate()
        .map(|(ti, list)| {
            let (tx, ty) = (ti % tiles_x, ti / tiles_x);
            let mut pixels = Vec::with_capacity(TILE * TILE);
            for y in ty * TILE..((ty + 1) * TILE).min(h) {
                for x in tx * TILE..((tx + 1) * TILE).min(w) {
                    let mut t = T::one();
                    let mut c = [T::zero(); 3];
                    let mut visited = 0u32;
                    for &i in list {
                        if t < min_t {
                            break;
                        }
                        visited += 1;
                        let p = projected[i].as_ref().expect("binned primitives are projected");
                        if !p.covers(x, y) {
                            continue;
                        }
                        let (wt, _, _, _) = pixel_weight(p, gaussians[i].opacity, x, y);
                        if !(wt > T::zero()) {
                            continue;
                        }
                        let wt = wt.min(max_w);
                        for k in 0..3 {
                            c[k] += t * wt * gaussians[i].color[k];
                        }
                        t *= T::one() - wt;
                    }
                    pixels.push((y * w + x, c, t, visited));
                }
            }
            TileOut { pixels }
        })
        .collect();
    let mut img = Image::new(w, h);
    let mut final_t = vec![T::one(); w * h];
    let mut visited = vec![0u32; w * h];
    for o in outs {
        for (pix, c, t, v) in o.pixels {
            for k in 0..3 {
                img.data[pix * 3 + k] = c[k].max(T::zero()).min(T::one());
            }
            final_t[pix] = t;
            visited[pix] = v;
        }
    }
    (img, RenderState { projected, tiles, tiles_x, final_t, visited })
}

pub fn rasterize<T: Real>(gaussians: &[Gaussian3D<T>], cam: &Camera<T>) -> Image<T> {
    rasterize_with_state(gaussians, cam).0
}

/// Per-primitive gradients of one backward pass.
#[derive(Clone, Debug)]
pub struct RenderGrad<T> {
    pub gaussians: Vec<GaussianGrad<T>>,
    /// Gradient with respect to the projected center, in pixels.
    pub screen: Vec<[T; 2]>,
}

#[derive(Clone, Copy)]
struct Grad2d<T> {
    mean2d: [T; 2],
    conic: [T; 3],
    color: [T; 3],
    opacity: T,
}

impl<T: Real> Grad2d<T> {
    fn zero() -> Self {
        Self { mean2d: [T::zero(); 2], conic: [T::zero(); 3], color: [T::zero(); 3], opacity: T::zero() }
    }
}

/// Backward of [`rasterize`] for an upstream image gradient.
pub fn backprop_rasterize<T: Real>(gaussians: &[Gaussian3D<T>], cam: &Camera<T>, image_grad: &Image<T>) -> RenderGrad<T> {
    let (_, state) = rasterize_with_state(gaussians, cam);
    backprop_with_state(gaussians, cam, &state, image_grad)
}

pub fn backprop_with_state<T: Real>(gaussians: &[Gaussian3D<T>], cam: &Camera<T>, state: &RenderState<T>, image_grad: &Image<T>) -> RenderGrad<T> {
    let (w, h) = (cam.width, cam.height);
    let max_w = T::lit(MAX_WEIGHT);
    let partials: Vec<Vec<(usize, Grad2d<T>)>> = state
        .tiles
        .par_iter()
        .enumerate()
        .map(|(ti, list)| {
            let (tx, ty) = (ti % state.tiles_x, ti / state.tiles_x);
            let mut acc: Vec<Grad2d<T>> = vec![Grad2d::zero(); list.len()];
            for y in ty * TILE..((ty + 1) * TILE).min(h) {
                for x in tx * TILE..((tx + 1) * TILE).min(w) {
                    let pix = y * w + x;
                    let g: [T; 3] = std::array::from_fn(|k| image_grad.data[pix * 3 + k]);
                    if g.iter().all(|v| *v == T::zero()) {
                        continue;
                    }
                    let mut t = state.final_t[pix];
                    // Color accumulated behind the current primitive.
                    let mut behind = [T::zero(); 3];
                    for li in (0..state.visited[pix] as usize).rev() {
                        let i = list[li];
                        let p = state.projected[i].as_ref().expect("binned primitives are projected");
                        if !p.covers(x, y) {
                            continue;
                        }
                        let gs = &gaussians[i];
                        let (raw, falloff, dfalloff, d) = pixel_weight(p, gs.opacity, x, y);
                        if !(raw > T::zero()) {
                            continue;
                        }
                        let clamped = raw > max_w;
                        let wt = raw.min(max_w);
                        t /= T::one() - wt;
                        let a = &mut acc[li];
                        let mut dl_dw = T::zero();
                        for k in 0..3 {
                            a.color[k] += wt * t * g[k];
                            dl_dw += (t * gs.color[k] - behind[k] / (T::one() - wt)) * g[k];
                        }
                        for k in 0..3 {
                            behind[k] += t * wt * gs.color[k];
                        }
                        if clamped {
                            continue;
                        }
                        a.opacity += dl_dw * falloff;
                        let dl_dpow = dl_dw * gs.opacity * dfalloff;
                        let (dx, dy) = (d[0], d[1]);
                        a.mean2d[0] += dl_dpow * (p.conic[0] * dx + p.conic[1] * dy);
                        a.mean2d[1] += dl_dpow * (p.conic[1] * dx + p.conic[2] * dy);
                        let half = T::lit(0.5);
                        a.conic[0] += -half * dx * dx * dl_dpow;
                        a.conic[1] += -dx * dy * dl_dpow;
                        a.conic[2] += -half * dy * dy * dl_dpow;
                    }
                }
            }
            list.iter().copied().zip(acc).collect()
        })
        .collect();
    let n = gaussians.len();
    let mut g2 = vec![Grad2d::zero(); n];
    for part in partials {
        for (i, g) in part {
            let a = &mut g2[i];
            for k in 0..2 {
                a.mean2d[k] += g.mean2d[k];
            }
            for k in 0..3 {
                a.conic[k] += g.conic[k];
                a.color[k] += g.color[k];
            }
            a.opacity += g.opacity;
        }
    }
    let gaussian_grads: Vec<GaussianGrad<T>> = (0..n)
        .into_par_iter()
        .map(|i| match &state.projected[i] {
            Some(p) => chain_to_3d(&gaussians[i], p, cam, &g2[i]),
            None => GaussianGrad::zero(),
        })
        .collect();
    RenderGrad { gaussians: gaussian_grads, screen: g2.iter().map(|g| g.mean2d).collect() }
}

fn chain_to_3d<T: Real>(g: &Gaussian3D<T>, p: &Projected<T>, cam: &Camera<T>, g2: &Grad2d<T>) -> GaussianGrad<T> {
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    // Conic -> 2D covariance: dL/dS = -Q G Q with G the symmetric conic gradient.
    let q = [[p.conic[0], p.conic[1]], [p.conic[1], p.conic[2]]];
    let gq = [[g2.conic[0], g2.conic[1] * half], [g2.conic[1] * half, g2.conic[2]]];
    let m2 =
        |a: &[[T; 2]; 2], b: &[[T; 2]; 2]| -> [[T; 2]; 2] { std::array::from_fn(|i| std::array::from_fn(|j| a[i][0] * b[0][j] + a[i][1] * b[1][j])) };
    let qgq = m2(&m2(&q, &gq), &q);
    // Symmetric gradient on the 2D covariance matrix entries.
    let gc = [[-qgq[0][0], -qgq[0][1]], [-qgq[1][0], -qgq[1][1]]];

    let pc = cam.to_camera(&g.mean);
    let tm = jacobian_and_transform(cam, &pc);
    let sigma = covariance3(g);
    // dL/dSigma = T^T Gc T.
    let gct: [[T; 3]; 2] = std::array::from_fn(|r| std::array::from_fn(|c| gc[r][0] * tm[0][c] + gc[r][1] * tm[1][c]));
    let g_sigma: Mat3<T> = std::array::from_fn(|i| std::array::from_fn(|j| tm[0][i] * gct[0][j] + tm[1][i] * gct[1][j]));
    // dL/dT = 2 Gc T Sigma.
    let g_t: [[T; 3]; 2] =
        std::array::from_fn(|r| std::array::from_fn(|c| two * (gct[r][0] * sigma[0][c] + gct[r][1] * sigma[1][c] + gct[r][2] * sigma[2][c])));
    // T = J W, so dL/dJ = dL/dT W^T.
    let w = &cam.rotation;
    let g_j: [[T; 3]; 2] = std::array::from_fn(|r| std::array::from_fn(|c| g_t[r][0] * w[c][0] + g_t[r][1] * w[c][1] + g_t[r][2] * w[c][2]));
    let (x, y, z) = (pc[0], pc[1], pc[2]);
    let (z2, z3) = (z * z, z * z * z);
    let mut g_pc = [T::zero(); 3];
    // Jacobian entries as functions of the camera-space point.
    g_pc[2] += g_j[0][0] * (-cam.fx / z2) + g_j[1][1] * (-cam.fy / z2);
    g_pc[0] += g_j[0][2] * (-cam.fx / z2);
    g_pc[2] += g_j[0][2] * (two * cam.fx * x / z3);
    g_pc[1] += g_j[1][2] * (-cam.fy / z2);
    g_pc[2] += g_j[1][2] * (two * cam.fy * y / z3);
    // Projected center.
    g_pc[0] += g2.mean2d[0] * cam.fx / z;
    g_pc[2] += -g2.mean2d[0] * cam.fx * x / z2;
    g_pc[1] += g2.mean2d[1] * cam.fy / z;
    g_pc[2] += -g2.mean2d[1] * cam.fy * y / z2;
    let mean = math::matvec3(&math::transpose3(w), &g_pc);

    // Sigma = M M^T with M = R diag(s).
    let r = math::quat_to_mat(&g.covariance.rotation);
    let s = g.covariance.scales();
    let m: Mat3<T> = std::array::from_fn(|i| std::array::from_fn(|j| r[i][j] * s[j]));
    let gsym: Mat3<T> = std::array::from_fn(|i| std::array::from_fn(|j| half * (g_sigma[i][j] + g_sigma[j][i])));
    let g_m = math::matmul3(&gsym, &m).map(|row| row.map(|v| two * v));
    let scales = std::array::from_fn(|j| g_m[0][j] * r[0][j] + g_m[1][j] * r[1][j] + g_m[2][j] * r[2][j]);
    let g_r: Mat3<T> = std::array::from_fn(|i| std::array::from_fn(|j| g_m[i][j] * s[j]));
    let rotation = math::quat_to_mat_backward(&g.covariance.rotation, &g_r);
    GaussianGrad { mean, scales, rotation, color: g2.color, opacity: g2.opacity }
}

/// `10 log10(1/MSE)`, capped at 100 dB.
pub fn psnr<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    a.check_same(b)?;
    let mse: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>() / a.data.len() as f64;
    if mse < 1e-10 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let raw: [f64; SSIM_WINDOW] = std::array::from_fn(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = raw.iter().sum();
    raw.map(|v| v / s)
}

/// Separable 'valid' filtering of one channel plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let n = SSIM_WINDOW;
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for k in 0..n {
                s += taps[k] * plane[y * w + x + k];
            }
            tmp[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for k in 0..n {
                s += taps[k] * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Transpose of [`filter_valid`]: spreads window values back to pixels.
fn filter_full(win: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let n = SSIM_WINDOW;
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = win[y * ow + x];
            for k in 0..n {
                tmp[(y + k) * ow + x] += taps[k] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for k in 0..n {
                out[y * w + x + k] += taps[k] * v;
            }
        }
    }
    out
}

fn planes<T: Real>(im: &Image<T>) -> [Vec<f64>; 3] {
    std::array::from_fn(|c| im.data.iter().skip(c).step_by(3).map(|v| v.as_f64()).collect())
}

struct SsimMaps {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    sxx: Vec<f64>,
    syy: Vec<f64>,
    sxy: Vec<f64>,
}

fn ssim_maps(x: &[f64], y: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> SsimMaps {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, w, h, taps);
    let mu_y = filter_valid(y, w, h, taps);
    let mut sxx = filter_valid(&xx, w, h, taps);
    let mut syy = filter_valid(&yy, w, h, taps);
    let mut sxy = filter_valid(&xy, w, h, taps);
    for i in 0..mu_x.len() {
        sxx[i] -= mu_x[i] * mu_x[i];
        syy[i] -= mu_y[i] * mu_y[i];
        sxy[i] -= mu_x[i] * mu_y[i];
    }
    SsimMaps { mu_x, mu_y, sxx, syy, sxy }
}

fn check_ssim_size<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<()> {
    a.check_same(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    Ok(())
}

/// Mean structural similarity over valid 11x11 Gaussian windows and channels.
pub fn ssim<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    check_ssim_size(a, b)?;
    let taps = ssim_taps();
    let (pa, pb) = (planes(a), planes(b));
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let m = ssim_maps(&pa[c], &pb[c], a.width, a.height, &taps);
        for i in 0..m.mu_x.len() {
            let n = (2.0 * m.mu_x[i] * m.mu_y[i] + SSIM_C1) * (2.0 * m.sxy[i] + SSIM_C2);
            let d = (m.mu_x[i].powi(2) + m.mu_y[i].powi(2) + SSIM_C1) * (m.sxx[i] + m.syy[i] + SSIM_C2);
            total += n / d;
        }
        count += m.mu_x.len();
    }
    Ok(total / count as f64)
}

/// SSIM and its gradient with respect to the first image.
pub fn ssim_backward<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<(f64, Image<T>)> {
    check_ssim_size(a, b)?;
    let (w, h) = (a.width, a.height);
    let taps = ssim_taps();
    let (pa, pb) = (planes(a), planes(b));
    let windows = (w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW);
    let norm = 1.0 / (3 * windows) as f64;
    let mut total = 0.0;
    let mut grad = Image::new(w, h);
    for c in 0..3 {
        let m = ssim_maps(&pa[c], &pb[c], w, h, &taps);
        let mut ca = vec![0.0; windows];
        let mut cb = vec![0.0; windows];
        let mut cc = vec![0.0; windows];
        for i in 0..windows {
            let (mx, my) = (m.mu_x[i], m.mu_y[i]);
            let n1 = 2.0 * mx * my + SSIM_C1;
            let n2 = 2.0 * m.sxy[i] + SSIM_C2;
            let d1 = mx * mx + my * my + SSIM_C1;
            let d2 = m.sxx[i] + m.syy[i] + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            let ds_dmx = 2.0 * my * n2 / (d1 * d2) - s * 2.0 * mx / d1;
            let ds_dsxx = -s / d2;
            let ds_dsxy = 2.0 * n1 / (d1 * d2);
            ca[i] = norm * (ds_dmx - 2.0 * ds_dsxx * mx - ds_dsxy * my);
            cb[i] = norm * 2.0 * ds_dsxx;
            cc[i] = norm * ds_dsxy;
        }
        let fa = filter_full(&ca, w, h, &taps);
        let fb = filter_full(&cb, w, h, &taps);
        let fc = filter_full(&cc, w, h, &taps);
        for p in 0..w * h {
            grad.data[p * 3 + c] = T::lit(fa[p] + fb[p] * pa[c][p] + fc[p] * pb[c][p]);
        }
    }
    Ok((total / (3 * windows) as f64, grad))
}

pub const L1_WEIGHT: f64 = 0.8;
pub const SSIM_WEIGHT: f64 = 0.2;

/// `0.8 L1 + 0.2 (1 - SSIM)`.
pub fn distortion<T: Real>(render: &Image<T>, target: &Image<T>) -> Result<f64> {
    let l1 = mean_abs(render, target)?;
    Ok(L1_WEIGHT * l1 + SSIM_WEIGHT * (1.0 - ssim(render, target)?))
}

fn mean_abs<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    a.check_same(b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum::<f64>() / a.data.len() as f64)
}

/// Distortion and its gradient with respect to `render`.
pub fn distortion_backward<T: Real>(render: &Image<T>, target: &Image<T>) -> Result<(f64, Image<T>)> {
    let l1 = mean_abs(render, target)?;
    let (s, gs) = ssim_backward(render, target)?;
    let n = render.data.len() as f64;
    let mut g = Image::new(render.width, render.height);
    for i in 0..render.data.len() {
        let d = render.data[i].as_f64() - target.data[i].as_f64();
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        g.data[i] = T::lit(L1_WEIGHT * sign / n - SSIM_WEIGHT * gs.data[i].as_f64());
    }
    Ok((L1_WEIGHT * l1 + SSIM_WEIGHT * (1.0 - s), g))
}

/// Writes a binary PPM (P6), 8 bits per channel.
pub fn write_ppm<T: Real>(path: &Path, im: &Image<T>) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", im.width, im.height).into_bytes();
    buf.extend(im.data.iter().map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}

pub fn parse_ppm(bytes: &[u8]) -> Result<Image<f64>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse("ppm", "unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(Error::parse("ppm", "not a binary P6 file"));
    }
    let w: usize = token()?.parse().map_err(|_| Error::parse("ppm", "bad width"))?;
    let h: usize = token()?.parse().map_err(|_| Error::parse("ppm", "bad height"))?;
    let maxval: usize = token()?.parse().map_err(|_| Error::parse("ppm", "bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::parse("ppm", "only 8-bit PPM is supported"));
    }
    let start = pos + 1;
    let n = w * h * 3;
    if bytes.len() < start + n {
        return Err(Error::parse("ppm", "pixel data truncated"));
    }
    let data = bytes[start..start + n].iter().map(|b| *b as f64 / maxval as f64).collect();
    Ok(Image { width: w, height: h, data })
}

#[derive(Serialize, Deserialize)]
struct RawSidecar {
    width: usize,
    height: usize,
    channels: usize,
    layout: String,
    dtype: String,
}

/// Writes 32-bit float planar data to `path` and a JSON sidecar next to it.
pub fn write_raw<T: Real>(path: &Path, im: &Image<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(im.data.len() * 4);
    for c in 0..3 {
        for p in 0..im.width * im.height {
            buf.extend_from_slice(&(im.data[p * 3 + c].as_f64() as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    let side = RawSidecar { width: im.width, height: im.height, channels: 3, layout: "planar".into(), dtype: "f32le".into() };
    let sp = path.with_extension("json");
    std::fs::write(&sp, serde_json::to_string_pretty(&side).expect("sidecar serializes")).map_err(|e| Error::io(&sp, e))
}

pub fn read_raw(path: &Path) -> Result<Image<f64>> {
    let sp = path.with_extension("json");
    let side: RawSidecar = serde_json::from_str(&std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?)
        .map_err(|e| Error::parse(sp.display().to_string(), e.to_string()))?;
    if side.channels != 3 || side.layout != "planar" || side.dtype != "f32le" {
        return Err(Error::parse(sp.display().to_string(), "unsupported raw layout"));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = side.width * side.height;
    if bytes.len() != n * 12 {
        return Err(Error::parse(path.display().to_string(), "raw size does not match sidecar"));
    }
    let mut im = Image::new(side.width, side.height);
    for c in 0..3 {
        for p in 0..n {
            let o = (c * n + p) * 4;
            im.data[p * 3 + c] = f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as f64;
        }
    }
    Ok(im)
}

/// Camera file entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraJson {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl From<&Camera<f64>> for CameraJson {
    fn from(c: &Camera<f64>) -> Self {
        let r = c.rotation;
        Self {
            r: [r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]],
            t: c.translation,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        }
    }
}

impl CameraJson {
    pub fn to_camera(&self) -> Result<Camera<f64>> {
        let r = self.r;
        let cam = Camera {
            rotation: [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            translation: self.t,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        };
        cam.validate()?;
        Ok(cam)
    }
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let list: Vec<CameraJson> = serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    list.iter().map(|c| c.to_camera()).collect()
}

pub fn write_cameras(path: &Path, cams: &[Camera<f64>]) -> Result<()> {
    let list: Vec<CameraJson> = cams.iter().map(CameraJson::from).collect();
    std::fs::write(path, serde_json::to_string_pretty(&list).expect("cameras serialize")).map_err(|e| Error::io(path, e))
}
