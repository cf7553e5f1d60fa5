//! Derives renderable Gaussians from an anchor, its coupled primitives and a
//! spatial context vector.
//!
//! Geometry is an affine transform of the anchor (translation, per-axis
//! scaling, rotation composed on the left). Appearance is predicted from the
//! prediction features concatenated with a view embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Quat, Vec3};
use crate::nn::Linear;
use crate::primitives::{
    group_coupled, AnchorPrimitive, CoupledPrimitive, FactoredCovariance, Gaussian3D, GaussianGrad, SceneModel, REF_DIM, RES_DIM,
};
use crate::renderer::Camera;
use crate::scalar::Real;

pub const VIEW_DIM: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionNetworks<T> {
    pub translation: Linear<T>,
    pub scaling: Linear<T>,
    pub rotation: Linear<T>,
    pub color: Linear<T>,
    pub opacity: Linear<T>,
}

impl<T: Real> PredictionNetworks<T> {
    pub fn feature_dim(context_dim: usize) -> usize {
        REF_DIM + RES_DIM + context_dim
    }

    /// All weights and biases zero: neutral geometry, grey half-transparent
    /// appearance.
    pub fn neutral(context_dim: usize) -> Self {
        let z = Self::feature_dim(context_dim);
        Self {
            translation: Linear::zeros(z, 3),
            scaling: Linear::zeros(z, 3),
            rotation: Linear::zeros(z, 4),
            color: Linear::zeros(VIEW_DIM + z, 3),
            opacity: Linear::zeros(VIEW_DIM + z, 1),
        }
    }

    /// Training initialization: small random weights, opacity biased low.
    pub fn init(context_dim: usize, rng: &mut impl Rng) -> Self {
        let z = Self::feature_dim(context_dim);
        Self {
            translation: Linear::random(z, 3, 0.02, rng),
            scaling: Linear::random(z, 3, 0.02, rng),
            rotation: Linear::random(z, 4, 0.02, rng),
            color: Linear::random(VIEW_DIM + z, 3, 0.05, rng),
            opacity: Linear::random(VIEW_DIM + z, 1, 0.02, rng).with_bias(&[-2.0]),
        }
    }

    pub fn zero_like(&self) -> Self {
        Self {
            translation: self.translation.zero_like(),
            scaling: self.scaling.zero_like(),
            rotation: self.rotation.zero_like(),
            color: self.color.zero_like(),
            opacity: self.opacity.zero_like(),
        }
    }

    pub fn layers(&self) -> [&Linear<T>; 5] {
        [&self.translation, &self.scaling, &self.rotation, &self.color, &self.opacity]
    }

    pub fn layers_mut(&mut self) -> [&mut Linear<T>; 5] {
        [&mut self.translation, &mut self.scaling, &mut self.rotation, &mut self.color, &mut self.opacity]
    }

    pub fn cast<U: Real>(&self) -> PredictionNetworks<U> {
        PredictionNetworks {
            translation: self.translation.cast(),
            scaling: self.scaling.cast(),
            rotation: self.rotation.cast(),
            color: self.color.cast(),
            opacity: self.opacity.cast(),
        }
    }
}

/// Unit view direction from the camera center to a point, plus inverse distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewEmbedding<T> {
    pub direction: Vec3<T>,
    pub inverse_distance: T,
}

impl<T: Real> ViewEmbedding<T> {
    pub fn new(camera_center: &Vec3<T>, point: &Vec3<T>) -> Self {
        let d = math::sub3(point, camera_center);
        let dist = math::norm3(&d).max(T::lit(1e-12));
        Self { direction: math::scale3(&d, T::one() / dist), inverse_distance: T::one() / dist }
    }

    pub fn to_array(&self) -> [T; VIEW_DIM] {
        [self.direction[0], self.direction[1], self.direction[2], self.inverse_distance]
    }

    /// Gradient with respect to `point` for an upstream gradient on the array.
    pub fn backward(camera_center: &Vec3<T>, point: &Vec3<T>, g: &[T]) -> Vec3<T> {
        let d = math::sub3(point, camera_center);
        let dist = math::norm3(&d).max(T::lit(1e-12));
        let u = math::scale3(&d, T::one() / dist);
        let gd = [g[0], g[1], g[2]];
        let proj = math::dot3(&u, &gd);
        std::array::from_fn(|i| (gd[i] - u[i] * proj) / dist - g[3] * u[i] / (dist * dist))
    }
}

/// Affine offsets for one coupled primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineOffsets<T> {
    pub translation: Vec3<T>,
    /// Positive per-axis ratios.
    pub scaling: Vec3<T>,
    /// Unit quaternion.
    pub rotation: Quat<T>,
}

impl<T: Real> AffineOffsets<T> {
    pub fn neutral() -> Self {
        Self { translation: [T::zero(); 3], scaling: [T::one(); 3], rotation: math::identity_quat() }
    }
}

/// `ref ⊕ res ⊕ context`.
pub fn assemble_prediction_features<T: Real>(ref_embedding: &[T], res_embedding: &[T], context: &[T]) -> Result<Vec<T>> {
    if ref_embedding.len() != REF_DIM {
        return Err(Error::DimensionMismatch { expected: REF_DIM, got: ref_embedding.len() });
    }
    if res_embedding.len() != RES_DIM {
        return Err(Error::DimensionMismatch { expected: RES_DIM, got: res_embedding.len() });
    }
    let mut z = Vec::with_capacity(REF_DIM + RES_DIM + context.len());
    z.extend_from_slice(ref_embedding);
    z.extend_from_slice(res_embedding);
    z.extend_from_slice(context);
    Ok(z)
}

/// Raw rotation head output plus the identity offset, before normalization.
fn rotation_preimage<T: Real>(nets: &PredictionNetworks<T>, z: &[T]) -> Quat<T> {
    let r = nets.rotation.forward_unchecked(z);
    [r[0] + T::one(), r[1], r[2], r[3]]
}

pub fn predict_affine_offsets<T: Real>(z: &[T], nets: &PredictionNetworks<T>) -> Result<AffineOffsets<T>> {
    if z.len() != nets.translation.inputs {
        return Err(Error::DimensionMismatch { expected: nets.translation.inputs, got: z.len() });
    }
    let t = nets.translation.forward_unchecked(z);
    let s = nets.scaling.forward_unchecked(z);
    Ok(AffineOffsets {
        translation: [t[0], t[1], t[2]],
        scaling: [s[0].exp(), s[1].exp(), s[2].exp()],
        rotation: math::quat_normalize(&rotation_preimage(nets, z)),
    })
}

/// Applies offsets to anchor geometry: translate the mean, scale the axes,
/// compose the rotation on the left.
pub fn apply_affine<T: Real>(location: &Vec3<T>, covariance: &FactoredCovariance<T>, nu: &AffineOffsets<T>) -> (Vec3<T>, FactoredCovariance<T>) {
    let mean = math::add3(location, &nu.translation);
    let log_scales = std::array::from_fn(|i| covariance.log_scales[i] + nu.scaling[i].ln());
    let rotation = math::quat_mul(&nu.rotation, &covariance.unit_rotation());
    (mean, FactoredCovariance { log_scales, rotation })
}

/// Sigmoid color and opacity from `view ⊕ ζ`.
pub fn predict_appearance<T: Real>(z: &[T], view: &ViewEmbedding<T>, nets: &PredictionNetworks<T>) -> Result<(Vec3<T>, T)> {
    if z.len() + VIEW_DIM != nets.color.inputs {
        return Err(Error::DimensionMismatch { expected: nets.color.inputs - VIEW_DIM, got: z.len() });
    }
    let x = view_concat(view, z);
    let c = nets.color.forward_unchecked(&x);
    let a = nets.opacity.forward_unchecked(&x);
    Ok(([c[0].sigmoid(), c[1].sigmoid(), c[2].sigmoid()], a[0].sigmoid()))
}

fn view_concat<T: Real>(view: &ViewEmbedding<T>, z: &[T]) -> Vec<T> {
    let mut x = Vec::with_capacity(VIEW_DIM + z.len());
    x.extend_from_slice(&view.to_array());
    x.extend_from_slice(z);
    x
}

/// Everything prediction needs for one anchor. During training the
/// embeddings and covariance factors are the noisy surrogates.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorInputs<T> {
    pub location: Vec3<T>,
    pub covariance: FactoredCovariance<T>,
    pub ref_embedding: [T; REF_DIM],
    pub res_embeddings: Vec<[T; RES_DIM]>,
    pub context: Vec<T>,
}

impl<T: Real> AnchorInputs<T> {
    pub fn from_model(anchor: &AnchorPrimitive<T>, coupled: &[CoupledPrimitive<T>], context: Vec<T>) -> Self {
        Self {
            location: anchor.location,
            covariance: anchor.covariance,
            ref_embedding: anchor.ref_embedding,
            res_embeddings: coupled.iter().map(|c| c.res_embedding).collect(),
            context,
        }
    }
}

/// Gradient with respect to [`AnchorInputs`]; `rotation` is taken with
/// respect to the raw (unnormalized) stored quaternion.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorInputsGrad<T> {
    pub location: Vec3<T>,
    pub log_scales: Vec3<T>,
    pub rotation: Quat<T>,
    pub ref_embedding: [T; REF_DIM],
    pub res_embeddings: Vec<[T; RES_DIM]>,
    pub context: Vec<T>,
}

impl<T: Real> AnchorInputsGrad<T> {
    pub fn zeros(k: usize, context_dim: usize) -> Self {
        Self {
            location: [T::zero(); 3],
            log_scales: [T::zero(); 3],
            rotation: [T::zero(); 4],
            ref_embedding: [T::zero(); REF_DIM],
            res_embeddings: vec![[T::zero(); RES_DIM]; k],
            context: vec![T::zero(); context_dim],
        }
    }
}

/// Forward prediction of the K Gaussians of one anchor.
pub fn derive_from_inputs<T: Real>(nets: &PredictionNetworks<T>, inputs: &AnchorInputs<T>, camera_center: &Vec3<T>) -> Result<Vec<Gaussian3D<T>>> {
    let view = ViewEmbedding::new(camera_center, &inputs.location);
    inputs
        .res_embeddings
        .iter()
        .map(|res| {
            let z = assemble_prediction_features(&inputs.ref_embedding, res, &inputs.context)?;
            let nu = predict_affine_offsets(&z, nets)?;
            let (mean, covariance) = apply_affine(&inputs.location, &inputs.covariance, &nu);
            let (color, opacity) = predict_appearance(&z, &view, nets)?;
            Ok(Gaussian3D { mean, covariance, color, opacity })
        })
        .collect()
}

/// Backward of [`derive_from_inputs`]; recomputes the forward intermediates.
pub fn derive_backward<T: Real>(
    nets: &PredictionNetworks<T>,
    inputs: &AnchorInputs<T>,
    camera_center: &Vec3<T>,
    grads: &[GaussianGrad<T>],
    net_grad: &mut PredictionNetworks<T>,
) -> AnchorInputsGrad<T> {
    let k = inputs.res_embeddings.len();
    let cdim = inputs.context.len();
    let mut out = AnchorInputsGrad::zeros(k, cdim);
    let view = ViewEmbedding::new(camera_center, &inputs.location);
    let qa_raw = inputs.covariance.rotation;
    let qa = math::quat_normalize(&qa_raw);
    let mut g_view = [T::zero(); VIEW_DIM];
    let mut g_qa = [T::zero(); 4];
    for (j, (res, g)) in inputs.res_embeddings.iter().zip(grads).enumerate() {
        let z = assemble_prediction_features(&inputs.ref_embedding, res, &inputs.context).expect("validated dims");
        let x = view_concat(&view, &z);
        let mut gz = vec![T::zero(); z.len()];

        // Translation.
        for i in 0..3 {
            out.location[i] += g.mean[i];
        }
        let gt = nets.translation.backward(&z, &g.mean, &mut net_grad.translation);
        // Scaling: scale = exp(raw) * anchor scale, so dL/draw = dL/dscale * scale.
        let sraw = nets.scaling.forward_unchecked(&z);
        let scale: [T; 3] = std::array::from_fn(|i| (sraw[i] + inputs.covariance.log_scales[i]).exp());
        let gs: [T; 3] = std::array::from_fn(|i| g.scales[i] * scale[i]);
        for i in 0..3 {
            out.log_scales[i] += gs[i];
        }
        let gsz = nets.scaling.backward(&z, &gs, &mut net_grad.scaling);
        // Rotation.
        let qraw = rotation_preimage(nets, &z);
        let nu_r = math::quat_normalize(&qraw);
        let (g_nu, g_anchor_q) = math::quat_mul_backward(&nu_r, &qa, &g.rotation);
        for i in 0..4 {
            g_qa[i] += g_anchor_q[i];
        }
        let g_qraw = math::quat_normalize_backward(&qraw, &g_nu);
        let grz = nets.rotation.backward(&z, &g_qraw, &mut net_grad.rotation);
        // Appearance.
        let cpre = nets.color.forward_unchecked(&x);
        let apre = nets.opacity.forward_unchecked(&x);
        let gc: Vec<T> = (0..3)
            .map(|i| {
                let s = cpre[i].sigmoid();
                g.color[i] * s * (T::one() - s)
            })
            .collect();
        let a = apre[0].sigmoid();
        let ga = [g.opacity * a * (T::one() - a)];
        let gxc = nets.color.backward(&x, &gc, &mut net_grad.color);
        let gxa = nets.opacity.backward(&x, &ga, &mut net_grad.opacity);
        for i in 0..VIEW_DIM {
            g_view[i] += gxc[i] + gxa[i];
        }
        for i in 0..z.len() {
            gz[i] = gt[i] + gsz[i] + grz[i] + gxc[VIEW_DIM + i] + gxa[VIEW_DIM + i];
        }
        for i in 0..REF_DIM {
            out.ref_embedding[i] += gz[i];
        }
        for i in 0..RES_DIM {
            out.res_embeddings[j][i] += gz[REF_DIM + i];
        }
        for i in 0..cdim {
            out.context[i] += gz[REF_DIM + RES_DIM + i];
        }
    }
    out.rotation = math::quat_normalize_backward(&qa_raw, &g_qa);
    let gl = ViewEmbedding::backward(camera_center, &inputs.location, &g_view);
    for i in 0..3 {
        out.location[i] += gl[i];
    }
    out
}

/// The K Gaussians of one anchor of a model, in coupled order.
pub fn derive_gaussians<T: Real>(model: &SceneModel<T>, anchor_index: usize, camera: &Camera<T>) -> Result<Vec<Gaussian3D<T>>> {
    let coupled = group_coupled(model, anchor_index)?;
    let anchor = &model.anchors[anchor_index];
    let context = model.grid.query(&anchor.location)?;
    let inputs = AnchorInputs::from_model(anchor, coupled, context);
    derive_from_inputs(&model.prediction, &inputs, &camera.center())
}

/// All Gaussians of a model, anchor-major.
pub fn derive_all<T: Real>(model: &SceneModel<T>, camera: &Camera<T>) -> Result<Vec<Gaussian3D<T>>> {
    let mut out = Vec::with_capacity(model.coupled.len());
    for i in 0..model.anchors.len() {
        out.extend(derive_gaussians(model, i, camera)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CodecConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(rng: &mut ChaCha8Rng, k: usize, cdim: usize) -> AnchorInputs<f64> {
        let mut g = || rng.gen_range(-0.5..0.5);
        AnchorInputs {
            location: [g(), g(), g()],
            covariance: FactoredCovariance { log_scales: [g() - 2.0, g() - 2.0, g() - 2.0], rotation: [1.0 + g(), g(), g(), g()] },
            ref_embedding: std::array::from_fn(|_| g()),
            res_embeddings: (0..k).map(|_| [g(), g(), g(), g()]).collect(),
            context: (0..cdim).map(|_| g()).collect(),
        }
    }

    fn random_nets(rng: &mut ChaCha8Rng, cdim: usize) -> PredictionNetworks<f64> {
        let mut n = PredictionNetworks::init(cdim, rng);
        for l in n.layers_mut() {
            for b in &mut l.bias {
                *b = rng.gen_range(-0.3..0.3);
            }
        }
        n
    }

    #[test]
    fn zero_features_have_expected_width() {
        let z = assemble_prediction_features(&[0.0f64; 32], &[0.0; 4], &[0.0; 16]).unwrap();
        assert_eq!(z.len(), 52);
        assert!(z.iter().all(|x| *x == 0.0));
        assert!(assemble_prediction_features(&[0.0f64; 31], &[0.0; 4], &[]).is_err());
    }

    #[test]
    fn feature_segments_are_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r: Vec<f64> = (0..32).map(|_| rng.gen()).collect();
        let s: Vec<f64> = (0..4).map(|_| rng.gen()).collect();
        let c: Vec<f64> = (0..16).map(|_| rng.gen()).collect();
        let z = assemble_prediction_features(&r, &s, &c).unwrap();
        assert_eq!(&z[0..32], &r[..]);
        assert_eq!(&z[32..36], &s[..]);
        assert_eq!(&z[36..], &c[..]);
    }

    #[test]
    fn neutral_networks_give_neutral_offsets_and_grey() {
        let nets = PredictionNetworks::<f64>::neutral(16);
        let z = vec![0.3; 52];
        let nu = predict_affine_offsets(&z, &nets).unwrap();
        assert_eq!(nu, AffineOffsets::neutral());
        let view = ViewEmbedding::new(&[0.0, 0.0, -3.0], &[0.1, 0.2, 0.3]);
        let (c, a) = predict_appearance(&z, &view, &nets).unwrap();
        assert_eq!(c, [0.5; 3]);
        assert_eq!(a, 0.5);
    }

    #[test]
    fn offsets_are_valid_for_random_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let nets = random_nets(&mut rng, 16);
        for _ in 0..100 {
            let z: Vec<f64> = (0..52).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let nu = predict_affine_offsets(&z, &nets).unwrap();
            assert!(nu.scaling.iter().all(|s| *s > 0.0));
            assert!((math::quat_norm(&nu.rotation) - 1.0).abs() < 1e-6);
            let view = ViewEmbedding::new(&[0.0, 0.0, -3.0], &[rng.gen(), rng.gen(), rng.gen()]);
            let (_, a) = predict_appearance(&z, &view, &nets).unwrap();
            assert!(a > 0.0 && a < 1.0);
        }
    }

    #[test]
    fn zero_norm_rotation_falls_back_to_identity() {
        let mut nets = PredictionNetworks::<f64>::neutral(0);
        nets.rotation.bias = vec![-1.0, 0.0, 0.0, 0.0];
        let nu = predict_affine_offsets(&vec![0.0; 36], &nets).unwrap();
        assert_eq!(nu.rotation, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn affine_identity_translation_and_scaling() {
        let cov = FactoredCovariance::from_scales([0.1f64, 0.2, 0.3], math::quat_normalize(&[0.9, 0.1, -0.2, 0.3])).unwrap();
        let loc = [0.4, -0.2, 1.0];
        let (m, c) = apply_affine(&loc, &cov, &AffineOffsets::neutral());
        assert_eq!(m, loc);
        let (d0, d1) = (crate::primitives::densify_covariance(&cov), crate::primitives::densify_covariance(&c));
        for i in 0..3 {
            for j in 0..3 {
                assert!((d0[i][j] - d1[i][j]).abs() < 1e-15);
            }
        }
        let nu = AffineOffsets { translation: [0.5, -1.0, 2.0], ..AffineOffsets::neutral() };
        let (m, _) = apply_affine(&[0.0; 3], &cov, &nu);
        assert_eq!(m, [0.5, -1.0, 2.0]);

        let nu = AffineOffsets { scaling: [2.0; 3], ..AffineOffsets::neutral() };
        let (_, c) = apply_affine(&loc, &cov, &nu);
        let d2 = crate::primitives::densify_covariance(&c);
        for i in 0..3 {
            for j in 0..3 {
                assert!((d2[i][j] - 4.0 * d0[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn view_dependent_color() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nets = random_nets(&mut rng, 16);
        let z: Vec<f64> = (0..52).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = [0.0, 0.0, 0.0];
        let v1 = ViewEmbedding::new(&[0.0, 0.0, -3.0], &p);
        let v2 = ViewEmbedding::new(&[3.0, 0.0, 0.0], &p);
        let (c1, _) = predict_appearance(&z, &v1, &nets).unwrap();
        let (c2, _) = predict_appearance(&z, &v2, &nets).unwrap();
        assert_ne!(c1, c2);
        // Direct evaluation oracle.
        let x: Vec<f64> = v1.to_array().iter().chain(&z).copied().collect();
        for o in 0..3 {
            let pre: f64 = (0..x.len()).map(|i| nets.color.weight[o * x.len() + i] * x[i]).sum::<f64>() + nets.color.bias[o];
            assert!((c1[o] - 1.0 / (1.0 + (-pre).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn derive_matches_sub_operations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let nets = random_nets(&mut rng, 16);
        let inputs = random_inputs(&mut rng, 10, 16);
        let cam = [0.3, -0.2, -4.0];
        let gs = derive_from_inputs(&nets, &inputs, &cam).unwrap();
        assert_eq!(gs.len(), 10);
        let view = ViewEmbedding::new(&cam, &inputs.location);
        for (k, g) in gs.iter().enumerate() {
            let z = assemble_prediction_features(&inputs.ref_embedding, &inputs.res_embeddings[k], &inputs.context).unwrap();
            let nu = predict_affine_offsets(&z, &nets).unwrap();
            let (m, c) = apply_affine(&inputs.location, &inputs.covariance, &nu);
            let (col, op) = predict_appearance(&z, &view, &nets).unwrap();
            assert_eq!(g.mean, m);
            assert_eq!(g.covariance, c);
            assert_eq!(g.color, col);
            assert_eq!(g.opacity, op);
        }
    }

    #[test]
    fn neutral_networks_reproduce_anchor_geometry_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nets = PredictionNetworks::neutral(16);
        let inputs = random_inputs(&mut rng, 10, 16);
        let gs = derive_from_inputs(&nets, &inputs, &[0.0, 0.0, -3.0]).unwrap();
        for g in gs {
            assert_eq!(g.mean, inputs.location);
            assert_eq!(g.covariance.log_scales, inputs.covariance.log_scales);
            assert_eq!(g.covariance.rotation, inputs.covariance.unit_rotation());
            assert_eq!(g.color, [0.5; 3]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let nets = random_nets(&mut rng, 6);
        let inputs = random_inputs(&mut rng, 3, 6);
        let cam = [0.5, 0.2, -3.0];
        let up: Vec<GaussianGrad<f64>> = (0..3)
            .map(|_| {
                let mut r = || rng.gen_range(-1.0..1.0);
                GaussianGrad { mean: [r(), r(), r()], scales: [r(), r(), r()], rotation: [r(), r(), r(), r()], color: [r(), r(), r()], opacity: r() }
            })
            .collect();
        let loss = |inp: &AnchorInputs<f64>, n: &PredictionNetworks<f64>| -> f64 {
            let gs = derive_from_inputs(n, inp, &cam).unwrap();
            gs.iter()
                .zip(&up)
                .map(|(g, u)| {
                    let s = g.covariance.scales();
                    let q = g.covariance.rotation;
                    (0..3).map(|i| g.mean[i] * u.mean[i] + s[i] * u.scales[i] + g.color[i] * u.color[i]).sum::<f64>()
                        + (0..4).map(|i| q[i] * u.rotation[i]).sum::<f64>()
                        + g.opacity * u.opacity
                })
                .sum()
        };
        let mut ng = nets.zero_like();
        let g = derive_backward(&nets, &inputs, &cam, &up, &mut ng);
        let h = 1e-5;
        let check = |an: f64, fd: f64| {
            assert!((an - fd).abs() <= 1e-6 * an.abs().max(fd.abs()).max(1e-3), "analytic {an} vs fd {fd}");
        };
        for a in 0..3 {
            let mut p = inputs.clone();
            let mut m = inputs.clone();
            p.location[a] += h;
            m.location[a] -= h;
            check(g.location[a], (loss(&p, &nets) - loss(&m, &nets)) / (2.0 * h));
            let mut p = inputs.clone();
            let mut m = inputs.clone();
            p.covariance.log_scales[a] += h;
            m.covariance.log_scales[a] -= h;
            check(g.log_scales[a], (loss(&p, &nets) - loss(&m, &nets)) / (2.0 * h));
        }
        for a in 0..4 {
            let mut p = inputs.clone();
            let mut m = inputs.clone();
            p.covariance.rotation[a] += h;
            m.covariance.rotation[a] -= h;
            check(g.rotation[a], (loss(&p, &nets) - loss(&m, &nets)) / (2.0 * h));
        }
        for a in [0, 7, 31] {
            let mut p = inputs.clone();
            let mut m = inputs.clone();
            p.ref_embedding[a] += h;
            m.ref_embedding[a] -= h;
            check(g.ref_embedding[a], (loss(&p, &nets) - loss(&m, &nets)) / (2.0 * h));
        }
        for j in 0..3 {
            for a in 0..4 {
                let mut p = inputs.clone();
                let mut m = inputs.clone();
                p.res_embeddings[j][a] += h;
                m.res_embeddings[j][a] -= h;
                check(g.res_embeddings[j][a], (loss(&p, &nets) - loss(&m, &nets)) / (2.0 * h));
            }
        }
        for a in 0..6 {
            let mut p = inputs.clone();
            let mut m = inputs.clone();
            p.context[a] += h;
            m.context[a] -= h;
            check(g.context[a], (loss(&p, &nets) - loss(&m, &nets)) / (2.0 * h));
        }
        // A few weights of every head.
        for (li, idx) in [(0usize, 5usize), (1, 17), (2, 40), (3, 3), (4, 44), (3, 0)] {
            let mut p = nets.clone();
            let mut m = nets.clone();
            p.layers_mut()[li].weight[idx] += h;
            m.layers_mut()[li].weight[idx] -= h;
            check(ng.layers()[li].weight[idx], (loss(&inputs, &p) - loss(&inputs, &m)) / (2.0 * h));
        }
    }

    #[test]
    fn derive_gaussians_from_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = SceneModel::<f64>::empty(CodecConfig::default(), [-1.0; 3], [1.0; 3], &mut rng).unwrap();
        for _ in 0..2 {
            let inp = random_inputs(&mut rng, 10, 16);
            let a = AnchorPrimitive { location: inp.location, covariance: inp.covariance, ref_embedding: inp.ref_embedding };
            model.push_anchor(a, &inp.res_embeddings).unwrap();
        }
        let cam = Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, 1.0, 0.0], 64.0, 64, 64);
        assert_eq!(derive_gaussians(&model, 1, &cam).unwrap().len(), 10);
        assert_eq!(derive_all(&model, &cam).unwrap().len(), 20);
        assert!(derive_gaussians(&model, 2, &cam).is_err());
    }

    fn two_anchor_model(seed: u64) -> SceneModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = CodecConfig { k: 3, ..CodecConfig::default() };
        cfg.grid.log2_table_size = 6;
        cfg.grid.levels = 2;
        let mut model = SceneModel::<f64>::empty(cfg, [-1.0; 3], [1.0; 3], &mut rng).unwrap();
        model.prediction = random_nets(&mut rng, model.grid.output_dim());
        for t in &mut model.grid.tables {
            for v in t.iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        for _ in 0..2 {
            let inp = random_inputs(&mut rng, 3, 0);
            let a = AnchorPrimitive { location: inp.location, covariance: inp.covariance, ref_embedding: inp.ref_embedding };
            model.push_anchor(a, &inp.res_embeddings).unwrap();
        }
        model
    }

    fn flat(g: &Gaussian3D<f64>) -> Vec<f64> {
        let s = g.covariance.scales();
        let q = g.covariance.rotation;
        let mut v = g.mean.to_vec();
        v.extend(s);
        v.extend(q);
        v.extend(g.color);
        v.push(g.opacity);
        v
    }

    #[test]
    fn full_chain_matches_finite_differences_on_two_anchors() {
        let model = two_anchor_model(11);
        let cam = Camera::look_at([0.4, -0.3, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 50.0, 32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let weights: Vec<Vec<f64>> = (0..6).map(|_| (0..14).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let loss = |m: &SceneModel<f64>| -> f64 {
            derive_all(m, &cam).unwrap().iter().zip(&weights).map(|(g, w)| flat(g).iter().zip(w).map(|(a, b)| a * b).sum::<f64>()).sum()
        };
        // Analytic: per-anchor backward, then the context gradient into the grid.
        let mut net_grad = model.prediction.zero_like();
        let mut grid_grad = model.grid.zero_grad();
        let mut anchor_grads = Vec::new();
        for i in 0..2 {
            let a = &model.anchors[i];
            let sample = model.grid.sample(&a.location).unwrap();
            let inputs = AnchorInputs::from_model(a, group_coupled(&model, i).unwrap(), model.grid.gather(&sample));
            let up: Vec<GaussianGrad<f64>> = weights[i * 3..i * 3 + 3]
                .iter()
                .map(|w| GaussianGrad {
                    mean: [w[0], w[1], w[2]],
                    scales: [w[3], w[4], w[5]],
                    rotation: [w[6], w[7], w[8], w[9]],
                    color: [w[10], w[11], w[12]],
                    opacity: w[13],
                })
                .collect();
            let mut g = derive_backward(&model.prediction, &inputs, &cam.center(), &up, &mut net_grad);
            let dpos = model.grid.backprop(&sample, &g.context, &mut grid_grad);
            for d in 0..3 {
                g.location[d] += dpos[d];
            }
            anchor_grads.push(g);
        }
        let h = 1e-5;
        let fd = |set: &dyn Fn(&mut SceneModel<f64>, f64)| -> f64 {
            let mut p = model.clone();
            set(&mut p, h);
            let mut m = model.clone();
            set(&mut m, -h);
            (loss(&p) - loss(&m)) / (2.0 * h)
        };
        let mut checked = 0;
        let mut check = |an: f64, num: f64, what: &str| {
            assert!((an - num).abs() <= 1e-4 * an.abs().max(num.abs()).max(1e-4), "{what}: analytic {an} vs fd {num}");
            checked += 1;
        };
        for i in 0..2 {
            let g = &anchor_grads[i];
            for d in 0..3 {
                check(g.location[d], fd(&|m, e| m.anchors[i].location[d] += e), "location");
                check(g.log_scales[d], fd(&|m, e| m.anchors[i].covariance.log_scales[d] += e), "log scale");
            }
            for d in 0..4 {
                check(g.rotation[d], fd(&|m, e| m.anchors[i].covariance.rotation[d] += e), "rotation");
            }
            for d in (0..REF_DIM).step_by(5) {
                check(g.ref_embedding[d], fd(&|m, e| m.anchors[i].ref_embedding[d] += e), "ref embedding");
            }
            for j in 0..3 {
                for d in 0..RES_DIM {
                    check(g.res_embeddings[j][d], fd(&|m, e| m.coupled[i * 3 + j].res_embedding[d] += e), "res embedding");
                }
            }
        }
        for (l, t) in grid_grad.iter().enumerate() {
            for (idx, an) in t.iter().enumerate().filter(|(_, v)| **v != 0.0).take(6) {
                check(*an, fd(&|m, e| m.grid.tables[l][idx] += e), "grid entry");
            }
        }
        for (li, (layer, lg)) in model.prediction.layers().iter().zip(net_grad.layers()).enumerate() {
            for idx in (0..layer.weight.len()).step_by(layer.weight.len() / 5 + 1) {
                check(lg.weight[idx], fd(&|m, e| m.prediction.layers_mut()[li].weight[idx] += e), "network weight");
            }
            for idx in 0..layer.bias.len() {
                check(lg.bias[idx], fd(&|m, e| m.prediction.layers_mut()[li].bias[idx] += e), "network bias");
            }
        }
        assert!(checked > 100, "{checked}");
    }

    mod equivariance {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn translating_scene_and_camera_shifts_means(v in prop::array::uniform3(-2.0f64..2.0), seed in 0u64..1000) {
                let model = two_anchor_model(seed);
                let cam = Camera::look_at([0.3, 0.2, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 50.0, 32, 32);
                let mut moved = model.clone();
                for a in &mut moved.anchors {
                    a.location = math::add3(&a.location, &v);
                }
                moved.grid.bounds_min = math::add3(&moved.grid.bounds_min, &v);
                moved.grid.bounds_max = math::add3(&moved.grid.bounds_max, &v);
                let cam2 = Camera::look_at(math::add3(&[0.3, 0.2, -3.0], &v), v, [0.0, 1.0, 0.0], 50.0, 32, 32);
                let a = derive_all(&model, &cam).unwrap();
                let b = derive_all(&moved, &cam2).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    for d in 0..3 {
                        prop_assert!((x.mean[d] + v[d] - y.mean[d]).abs() < 1e-9);
                        prop_assert!((x.covariance.log_scales[d] - y.covariance.log_scales[d]).abs() < 1e-9);
                        prop_assert!((x.color[d] - y.color[d]).abs() < 1e-9);
                    }
                    for d in 0..4 {
                        prop_assert!((x.covariance.rotation[d] - y.covariance.rotation[d]).abs() < 1e-9);
                    }
                    prop_assert!((x.opacity - y.opacity).abs() < 1e-9);
                }
            }
        }
    }
}
