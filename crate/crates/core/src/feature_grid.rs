//! Multiresolution hashed feature field with trilinear interpolation.
//!
//! One instance supplies the spatial context / entropy prior features for
//! anchors; smaller instances hold the per-frame motion and compensation
//! residues of the streaming pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::scalar::Real;

/// Hash multipliers per axis.
pub const DEFAULT_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub levels: usize,
    pub base_resolution: u32,
    pub growth: f64,
    pub log2_table_size: u32,
    pub feature_dim: usize,
    pub primes: [u32; 3],
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { levels: 4, base_resolution: 16, growth: 2.0, log2_table_size: 14, feature_dim: 4, primes: DEFAULT_PRIMES }
    }
}

impl GridConfig {
    /// Small residue grids used by the streaming pipeline.
    pub fn temporal_default() -> Self {
        Self { levels: 2, base_resolution: 8, growth: 2.0, log2_table_size: 12, feature_dim: 2, primes: DEFAULT_PRIMES }
    }

    pub fn table_size(&self) -> usize {
        1usize << self.log2_table_size
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.feature_dim
    }

    pub fn resolution(&self, level: usize) -> u32 {
        (self.base_resolution as f64 * self.growth.powi(level as i32)).floor() as u32
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidArgument("feature grid must have at least one level and feature".into()));
        }
        if self.log2_table_size == 0 || self.log2_table_size > 24 {
            return Err(Error::InvalidArgument(format!("table size 2^{} out of range", self.log2_table_size)));
        }
        if self.base_resolution == 0 {
            return Err(Error::InvalidArgument("base resolution must be positive".into()));
        }
        for l in 1..self.levels {
            if self.resolution(l) <= self.resolution(l - 1) {
                return Err(Error::InvalidArgument("grid resolutions must increase strictly across levels".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid<T> {
    pub config: GridConfig,
    pub bounds_min: Vec3<T>,
    pub bounds_max: Vec3<T>,
    /// One table per level, `table_size * feature_dim` entries, slot-major.
    pub tables: Vec<Vec<T>>,
}

/// Corner slots and interpolation weights of one query; reused by backprop.
#[derive(Clone, Debug)]
pub struct GridSample<T> {
    pub slots: Vec<[usize; 8]>,
    pub weights: Vec<[T; 8]>,
    /// Derivative of each corner weight with respect to the world position.
    pub dweights: Vec<[Vec3<T>; 8]>,
}

/// Dense gradient buffer shaped like [`FeatureGrid::tables`].
pub type GridGrad<T> = Vec<Vec<T>>;

impl<T: Real> FeatureGrid<T> {
    /// Zero-initialized grid over the given domain.
    pub fn zeros(config: GridConfig, bounds_min: Vec3<T>, bounds_max: Vec3<T>) -> Result<Self> {
        config.validate()?;
        for a in 0..3 {
            if !(bounds_max[a] > bounds_min[a]) {
                return Err(Error::InvalidArgument("grid domain must have positive extent".into()));
            }
        }
        let tables = (0..config.levels).map(|_| vec![T::zero(); config.table_size() * config.feature_dim]).collect();
        Ok(Self { config, bounds_min, bounds_max, tables })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn zero_grad(&self) -> GridGrad<T> {
        self.tables.iter().map(|t| vec![T::zero(); t.len()]).collect()
    }

    /// Table slot of an integer lattice vertex.
    pub fn hash(&self, v: [u32; 3]) -> usize {
        let p = self.config.primes;
        let h = v[0].wrapping_mul(p[0]) ^ v[1].wrapping_mul(p[1]) ^ v[2].wrapping_mul(p[2]);
        (h as usize) & (self.config.table_size() - 1)
    }

    pub fn sample(&self, position: &Vec3<T>) -> Result<GridSample<T>> {
        if self.tables.is_empty() {
            return Err(Error::InvalidArgument("empty feature grid".into()));
        }
        if position.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("grid query position".into()));
        }
        let levels = self.config.levels;
        let mut out = GridSample { slots: Vec::with_capacity(levels), weights: Vec::with_capacity(levels), dweights: Vec::with_capacity(levels) };
        for l in 0..levels {
            let res = self.config.resolution(l);
            let rf = T::lit(res as f64);
            let mut cell = [0u32; 3];
            let mut frac = [T::zero(); 3];
            let mut dfrac = [T::zero(); 3];
            for a in 0..3 {
                let ext = self.bounds_max[a] - self.bounds_min[a];
                let u = (position[a] - self.bounds_min[a]) / ext;
                let inside = u >= T::zero() && u <= T::one();
                let x = u.max(T::zero()).min(T::one()) * rf;
                let i = x.floor().to_u32().unwrap_or(0).min(res - 1);
                cell[a] = i;
                frac[a] = x - T::lit(i as f64);
                dfrac[a] = if inside { rf / ext } else { T::zero() };
            }
            let mut slots = [0usize; 8];
            let mut w = [T::zero(); 8];
            let mut dw = [[T::zero(); 3]; 8];
            for c in 0..8 {
                let bit = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
                let v = [cell[0] + bit[0] as u32, cell[1] + bit[1] as u32, cell[2] + bit[2] as u32];
                slots[c] = self.hash(v);
                let f: [T; 3] = std::array::from_fn(|a| if bit[a] == 1 { frac[a] } else { T::one() - frac[a] });
                let s: [T; 3] = std::array::from_fn(|a| if bit[a] == 1 { T::one() } else { -T::one() });
                w[c] = f[0] * f[1] * f[2];
                dw[c] = [s[0] * f[1] * f[2] * dfrac[0], f[0] * s[1] * f[2] * dfrac[1], f[0] * f[1] * s[2] * dfrac[2]];
            }
            out.slots.push(slots);
            out.weights.push(w);
            out.dweights.push(dw);
        }
        Ok(out)
    }

    /// Interpolated features for a prepared sample, concatenated coarse to fine.
    pub fn gather(&self, s: &GridSample<T>) -> Vec<T> {
        let fd = self.config.feature_dim;
        let mut out = vec![T::zero(); self.output_dim()];
        for (l, table) in self.tables.iter().enumerate() {
            let o = &mut out[l * fd..(l + 1) * fd];
            for c in 0..8 {
                let w = s.weights[l][c];
                if w == T::zero() {
                    continue;
                }
                let base = s.slots[l][c] * fd;
                for k in 0..fd {
                    o[k] += w * table[base + k];
                }
            }
        }
        out
    }

    /// Trilinear feature lookup; positions outside the domain are clamped.
    pub fn query(&self, position: &Vec3<T>) -> Result<Vec<T>> {
        Ok(self.gather(&self.sample(position)?))
    }

    /// Accumulates table gradients for `upstream` and returns the gradient
    /// with respect to the query position.
    pub fn backprop(&self, s: &GridSample<T>, upstream: &[T], grad: &mut GridGrad<T>) -> Vec3<T> {
        let fd = self.config.feature_dim;
        let mut dpos = [T::zero(); 3];
        for (l, table) in self.tables.iter().enumerate() {
            let g = &upstream[l * fd..(l + 1) * fd];
            if g.iter().all(|x| *x == T::zero()) {
                continue;
            }
            let gl = &mut grad[l];
            for c in 0..8 {
                let base = s.slots[l][c] * fd;
                let w = s.weights[l][c];
                let mut fg = T::zero();
                for k in 0..fd {
                    gl[base + k] += w * g[k];
                    fg += table[base + k] * g[k];
                }
                for a in 0..3 {
                    dpos[a] += s.dweights[l][c][a] * fg;
                }
            }
        }
        dpos
    }

    /// Convenience wrapper: query + backprop for one position.
    pub fn backprop_query(&self, position: &Vec3<T>, upstream: &[T], grad: &mut GridGrad<T>) -> Result<Vec3<T>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch { expected: self.output_dim(), got: upstream.len() });
        }
        let s = self.sample(position)?;
        Ok(self.backprop(&s, upstream, grad))
    }

    pub fn is_finite(&self) -> bool {
        self.tables.iter().flatten().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> FeatureGrid<U> {
        FeatureGrid {
            config: self.config.clone(),
            bounds_min: crate::scalar::cast_arr(&self.bounds_min),
            bounds_max: crate::scalar::cast_arr(&self.bounds_max),
            tables: self.tables.iter().map(|t| crate::scalar::cast_vec(t)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(cfg: GridConfig, seed: u64) -> FeatureGrid<f64> {
        let mut g = FeatureGrid::zeros(cfg, [-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut g.tables {
            for v in t.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        g
    }

    fn small_cfg() -> GridConfig {
        GridConfig { levels: 2, base_resolution: 2, growth: 2.0, log2_table_size: 6, feature_dim: 3, primes: DEFAULT_PRIMES }
    }

    #[test]
    fn zero_tables_give_zero_features() {
        let g = FeatureGrid::<f64>::zeros(GridConfig::default(), [0.0; 3], [1.0; 3]).unwrap();
        let f = g.query(&[0.3, 0.7, 0.1]).unwrap();
        assert_eq!(f.len(), 16);
        assert!(f.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn vertex_query_returns_hashed_entry_verbatim() {
        let g = random_grid(small_cfg(), 1);
        // level 0 resolution 2 over [-1,1]: vertex (1,2,0) sits at (0, 1, -1).
        let f = g.query(&[0.0, 1.0, -1.0]).unwrap();
        let slot = g.hash([1, 2, 0]);
        assert_eq!(&f[0..3], &g.tables[0][slot * 3..slot * 3 + 3]);
        // level 1 resolution 4: same point is vertex (2,4,0).
        let slot = g.hash([2, 4, 0]);
        assert_eq!(&f[3..6], &g.tables[1][slot * 3..slot * 3 + 3]);
    }

    #[test]
    fn cell_center_is_mean_of_corners() {
        let cfg = GridConfig { levels: 1, base_resolution: 1, growth: 2.0, log2_table_size: 8, feature_dim: 2, primes: DEFAULT_PRIMES };
        let g = random_grid(cfg, 2);
        let f = g.query(&[0.0, 0.0, 0.0]).unwrap();
        // Explicit 8-corner weighted sum with weights 1/8.
        let mut mean = [0.0; 2];
        for x in 0..2u32 {
            for y in 0..2u32 {
                for z in 0..2u32 {
                    let s = g.hash([x, y, z]);
                    for k in 0..2 {
                        mean[k] += g.tables[0][s * 2 + k] / 8.0;
                    }
                }
            }
        }
        for k in 0..2 {
            assert!((f[k] - mean[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn nan_position_and_empty_grid_are_errors() {
        let g = random_grid(small_cfg(), 3);
        assert!(g.query(&[f64::NAN, 0.0, 0.0]).is_err());
        let mut e = g.clone();
        e.tables.clear();
        assert!(e.query(&[0.0; 3]).is_err());
    }

    #[test]
    fn out_of_bounds_positions_clamp() {
        let g = random_grid(small_cfg(), 4);
        assert_eq!(g.query(&[5.0, 0.2, -0.3]).unwrap(), g.query(&[1.0, 0.2, -0.3]).unwrap());
    }

    #[test]
    fn resolutions_must_increase() {
        let cfg = GridConfig { growth: 1.0, ..GridConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut g = random_grid(small_cfg(), 5);
        let pos = [0.137, -0.42, 0.61];
        let up = [0.3, -0.8, 0.5, 1.2, -0.1, 0.7];
        let loss = |g: &FeatureGrid<f64>, p: &Vec3<f64>| -> f64 { g.query(p).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum() };
        let mut grad = g.zero_grad();
        let dpos = g.backprop_query(&pos, &up, &mut grad).unwrap();
        let h = 1e-4;
        for l in 0..2 {
            for i in 0..g.tables[l].len() {
                let orig = g.tables[l][i];
                g.tables[l][i] = orig + h;
                let a = loss(&g, &pos);
                g.tables[l][i] = orig - h;
                let b = loss(&g, &pos);
                g.tables[l][i] = orig;
                let fd = (a - b) / (2.0 * h);
                let an = grad[l][i];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-8), "{fd} {an}");
            }
        }
        for a in 0..3 {
            let mut p1 = pos;
            let mut p2 = pos;
            p1[a] += h;
            p2[a] -= h;
            let fd = (loss(&g, &p1) - loss(&g, &p2)) / (2.0 * h);
            assert!((fd - dpos[a]).abs() <= 1e-4 * fd.abs().max(1e-8), "{fd} {}", dpos[a]);
        }
    }

    #[test]
    fn zero_upstream_and_vertex_aligned_gradients() {
        let g = random_grid(small_cfg(), 6);
        let mut grad = g.zero_grad();
        g.backprop_query(&[0.2, 0.1, 0.3], &[0.0; 6], &mut grad).unwrap();
        assert!(grad.iter().flatten().all(|x| *x == 0.0));

        let mut grad = g.zero_grad();
        g.backprop_query(&[0.0, 1.0, -1.0], &[1.0; 6], &mut grad).unwrap();
        for l in 0..2 {
            let touched = grad[l].chunks(3).filter(|c| c.iter().any(|x| *x != 0.0)).count();
            assert_eq!(touched, 1);
        }
    }

    #[test]
    fn piecewise_trilinear_is_affine_along_axes_within_a_cell() {
        let g = random_grid(small_cfg(), 7);
        // Stay within one level-1 cell: [0, 0.5]^3.
        let base = [0.1, 0.2, 0.3];
        for a in 0..3 {
            let at = |t: f64| {
                let mut p = base;
                p[a] = t;
                g.query(&p).unwrap()
            };
            let (f0, f1, f2) = (at(0.05), at(0.2), at(0.35));
            for k in 0..6 {
                let mid = 0.5 * (f0[k] + f2[k]);
                assert!((mid - f1[k]).abs() < 1e-7);
            }
        }
    }
}
