//! Procedural scenes and sequences for tests and demos.
//!
//! Ground-truth images are rendered from explicit Gaussians with the same
//! rasterizer that training uses, so a perfect fit is representable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::math::{self, Vec3};
use crate::nn::standard_normal;
use crate::primitives::{FactoredCovariance, Gaussian3D};
use crate::rd_optimizer::TrainView;
use crate::renderer::{rasterize, Camera};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub gaussians: usize,
    pub views: usize,
    /// Every `holdout_every`-th view is held out (0 keeps all for training).
    pub holdout_every: usize,
    pub size: usize,
    pub points_per_gaussian: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { gaussians: 100, views: 25, holdout_every: 5, size: 64, points_per_gaussian: 5, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub gaussians: Vec<Gaussian3D<f64>>,
    pub train: Vec<TrainView>,
    pub test: Vec<TrainView>,
    pub points: Vec<Vec3<f64>>,
}

/// Cameras on a Fibonacci sphere of radius `radius` around the origin.
pub fn orbit_cameras(n: usize, radius: f64, size: usize) -> Vec<Camera<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            // Stay off the poles so the up vector is never parallel.
            let y = 0.85 - 1.7 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let a = golden * i as f64;
            let eye = [radius * r * a.cos(), radius * y, radius * r * a.sin()];
            Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], 1.1 * size as f64, size, size)
        })
        .collect()
}

fn random_gaussian(rng: &mut ChaCha8Rng, center: Vec3<f64>, spread: f64, scale: (f64, f64)) -> Gaussian3D<f64> {
    let mean = std::array::from_fn(|a| center[a] + spread * rng.gen_range(-1.0..1.0));
    let scales = std::array::from_fn(|_| rng.gen_range(scale.0..scale.1));
    let q = [standard_normal(rng), standard_normal(rng), standard_normal(rng), standard_normal(rng)];
    Gaussian3D {
        mean,
        covariance: FactoredCovariance::from_scales(scales, math::quat_normalize(&q)).expect("positive scales"),
        color: std::array::from_fn(|_| rng.gen_range(0.1..0.95)),
        opacity: rng.gen_range(0.6..0.95),
    }
}

/// Points drawn around each Gaussian, one standard deviation per axis.
pub fn sample_points(gaussians: &[Gaussian3D<f64>], per: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3<f64>> {
    let mut pts = Vec::with_capacity(gaussians.len() * per);
    for g in gaussians {
        let s = g.covariance.scales();
        let r = math::quat_to_mat(&g.covariance.unit_rotation());
        for _ in 0..per {
            let local: Vec3<f64> = std::array::from_fn(|a| s[a] * standard_normal(rng));
            pts.push(math::add3(&g.mean, &math::matvec3(&r, &local)));
        }
    }
    pts
}

pub fn render_views(gaussians: &[Gaussian3D<f64>], cameras: &[Camera<f64>]) -> Vec<TrainView> {
    cameras.iter().map(|c| TrainView { camera: c.clone(), image: rasterize(gaussians, c) }).collect()
}

fn split(views: Vec<TrainView>, every: usize) -> (Vec<TrainView>, Vec<TrainView>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, v) in views.into_iter().enumerate() {
        if every > 0 && i % every == every - 1 {
            test.push(v);
        } else {
            train.push(v);
        }
    }
    (train, test)
}

/// Random Gaussians in a unit ball seen from an orbit.
pub fn static_scene(spec: &SceneSpec) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gaussians: Vec<Gaussian3D<f64>> = (0..spec.gaussians).map(|_| random_gaussian(&mut rng, [0.0; 3], 0.8, (0.05, 0.18))).collect();
    let points = sample_points(&gaussians, spec.points_per_gaussian, &mut rng);
    let (train, test) = split(render_views(&gaussians, &orbit_cameras(spec.views, 4.0, spec.size)), spec.holdout_every);
    SyntheticScene { gaussians, train, test, points }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSpec {
    pub frames: usize,
    pub views: usize,
    pub size: usize,
    pub background: usize,
    pub blob: usize,
    pub blob_radius: f64,
    /// Blob displacement per frame; zero gives a static sequence.
    pub velocity: Vec3<f64>,
    pub points_per_gaussian: usize,
    pub seed: u64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        Self {
            frames: 8,
            views: 12,
            size: 48,
            background: 60,
            blob: 12,
            blob_radius: 0.2,
            velocity: [0.04, 0.015, 0.0],
            points_per_gaussian: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    /// Views per frame; cameras are shared across frames.
    pub frames: Vec<Vec<TrainView>>,
    pub points: Vec<Vec3<f64>>,
    /// Blob center at every frame.
    pub blob_centers: Vec<Vec3<f64>>,
    /// Radius around the first-frame blob center that holds every blob
    /// sample point.
    pub blob_extent: f64,
    pub background: Vec<Gaussian3D<f64>>,
    pub blob: Vec<Gaussian3D<f64>>,
}

impl SyntheticSequence {
    /// Ground-truth motion label of a first-frame location.
    pub fn is_moving(&self, p: &Vec3<f64>) -> bool {
        math::norm3(&math::sub3(p, &self.blob_centers[0])) <= self.blob_extent
    }

    pub fn is_static(&self) -> bool {
        self.blob_centers.windows(2).all(|w| w[0] == w[1])
    }
}

/// Static background plus a rigid blob translating at constant velocity.
/// Background Gaussians keep clear of the blob's whole path.
pub fn moving_blob_sequence(spec: &SequenceSpec) -> Result<SyntheticSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c0: Vec3<f64> = [-0.15, 0.0, 0.0];
    let centers: Vec<Vec3<f64>> = (0..spec.frames).map(|t| math::add3(&c0, &math::scale3(&spec.velocity, t as f64))).collect();
    let blob: Vec<Gaussian3D<f64>> = (0..spec.blob)
        .map(|_| {
            let mut g = random_gaussian(&mut rng, [0.0; 3], 0.0, (0.04, 0.09));
            // Uniform in the ball.
            loop {
                let d: Vec3<f64> = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                if math::norm3(&d) <= 1.0 {
                    g.mean = math::scale3(&d, spec.blob_radius);
                    break;
                }
            }
            g
        })
        .collect();
    let clearance = spec.blob_radius + 0.35;
    let path_distance = |p: &Vec3<f64>| centers.iter().map(|c| math::norm3(&math::sub3(p, c))).fold(f64::INFINITY, f64::min);
    let mut background = Vec::with_capacity(spec.background);
    while background.len() < spec.background {
        let g = random_gaussian(&mut rng, [0.0; 3], 1.0, (0.06, 0.16));
        if path_distance(&g.mean) > clearance {
            background.push(g);
        }
    }
    let placed = |t: usize| -> Vec<Gaussian3D<f64>> {
        let mut all = background.clone();
        all.extend(blob.iter().map(|g| Gaussian3D { mean: math::add3(&g.mean, &centers[t]), ..*g }));
        all
    };
    let mut points = sample_points(&background, spec.points_per_gaussian, &mut rng);
    let blob0: Vec<Gaussian3D<f64>> = placed(0)[background.len()..].to_vec();
    let blob_points = sample_points(&blob0, spec.points_per_gaussian, &mut rng);
    let blob_extent = blob_points.iter().map(|p| math::norm3(&math::sub3(p, &centers[0]))).fold(0.0, f64::max) + 1e-9;
    points.extend(blob_points);
    let cams = orbit_cameras(spec.views, 4.0, spec.size);
    let frames = (0..spec.frames).map(|t| render_views(&placed(t), &cams)).collect();
    Ok(SyntheticSequence { frames, points, blob_centers: centers, blob_extent, background, blob })
}

/// The moving-blob layout with zero velocity: every frame is identical.
pub fn static_sequence(spec: &SequenceSpec) -> Result<SyntheticSequence> {
    moving_blob_sequence(&SequenceSpec { velocity: [0.0; 3], ..spec.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_scene_has_the_requested_shape() {
        let s = static_scene(&SceneSpec::default());
        assert_eq!(s.gaussians.len(), 100);
        assert_eq!((s.train.len(), s.test.len()), (20, 5));
        assert_eq!(s.points.len(), 500);
        for v in s.train.iter().chain(&s.test) {
            assert_eq!((v.image.width, v.image.height), (64, 64));
            assert!(v.image.data.iter().all(|x| (0.0..=1.0).contains(x)));
            // Every view sees some of the scene.
            assert!(v.image.data.iter().filter(|x| **x > 0.05).count() > 500);
        }
    }

    #[test]
    fn scenes_are_seeded() {
        let spec = SceneSpec { gaussians: 10, views: 3, size: 16, ..SceneSpec::default() };
        let (a, b) = (static_scene(&spec), static_scene(&spec));
        assert_eq!(a.points, b.points);
        assert_eq!(a.train[0].image.data, b.train[0].image.data);
        let c = static_scene(&SceneSpec { seed: 1, ..spec });
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn blob_moves_and_background_stays() {
        let spec = SequenceSpec { frames: 3, views: 4, size: 24, ..SequenceSpec::default() };
        let s = moving_blob_sequence(&spec).unwrap();
        assert_eq!(s.frames.len(), 3);
        assert!(!s.is_static());
        assert!(s.is_moving(&s.blob_centers[0]));
        let moving = s.points.iter().filter(|p| s.is_moving(p)).count();
        assert_eq!(moving, spec.blob * spec.points_per_gaussian);
        assert_ne!(s.frames[0][0].image.data, s.frames[1][0].image.data);
        let st = static_sequence(&spec).unwrap();
        assert!(st.is_static());
        assert_eq!(st.frames[0][1].image.data, st.frames[2][1].image.data);
    }
}
