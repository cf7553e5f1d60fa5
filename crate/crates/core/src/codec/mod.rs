//! Bit-exact serialization of scene models.
//!
//! A model is first frozen: weights rounded to half precision, grid tables
//! and primitive parameters quantized, anchors put in Morton order and
//! hyperprior latents fixed. The frozen model is exactly what the decoder
//! reconstructs, so encoder-side renders of it match decoder-side renders.

pub mod container;
pub mod location;
pub mod range_coder;
pub mod symbols;

use std::path::Path;

use crate::config::CodecConfig;
use crate::entropy_model::{
    predict_coupled_entropy_params, predict_covariance_entropy_params, predict_embedding_entropy_params, predict_steps, quantize, quantize_latent,
    EntropyNetworks, GridRateModel, QuantizationSteps,
};
use crate::error::{Error, Result};
use crate::feature_grid::FeatureGrid;
use crate::nn::Linear;
use crate::primitives::{AnchorPrimitive, CoupledPrimitive, FactoredCovariance, Latents, SceneModel, COV_DIM, HYPER_DIM, REF_DIM, RES_DIM};
use crate::scalar::Real;
use crate::spatial_prediction::PredictionNetworks;

pub use container::{Bitstream, ByteReader, ByteWriter, FrameKind, Header, SectionId};
pub use location::{decode_anchor_locations, encode_anchor_locations};
pub use range_coder::{ac_decode, ac_encode, BitContext, CodedCdf, Decoder, Encoder};
pub use symbols::GaussianWindow;

use container::round_f16;
use location::{decode_lattice, encode_lattice, lattice_position, morton_order};
use range_coder::SymbolModel;
use symbols::{latent_symbol, latent_tables, symbol_latent};

fn visit_linear(l: &mut Linear<f32>, f: &mut dyn FnMut(&mut f32) -> Result<()>) -> Result<()> {
    l.params_mut().try_for_each(f)
}

/// Visits every stored network parameter in bitstream order. The hyperprior
/// encoders are not part of the stream.
fn visit_network_params(
    prediction: &mut PredictionNetworks<f32>,
    entropy: &mut EntropyNetworks<f32>,
    grid_rate: &mut GridRateModel<f32>,
    f: &mut dyn FnMut(&mut f32) -> Result<()>,
) -> Result<()> {
    for l in prediction.layers_mut() {
        visit_linear(l, f)?;
    }
    for l in [&mut entropy.steps, &mut entropy.embedding, &mut entropy.coupled, &mut entropy.covariance] {
        visit_linear(l, f)?;
    }
    for b in [&mut entropy.bottleneck_anchor, &mut entropy.bottleneck_coupled] {
        for row in &mut b.logits {
            row.iter_mut().try_for_each(&mut *f)?;
        }
    }
    grid_rate.log_scales.iter_mut().try_for_each(f)
}

/// Quantizes a grid in place to multiples of `step`.
pub fn freeze_grid<T: Real>(grid: &FeatureGrid<T>, step: f64) -> Result<FeatureGrid<f32>> {
    let mut out: FeatureGrid<f32> = grid.cast();
    for (dst, src) in out.tables.iter_mut().zip(&grid.tables) {
        for (d, s) in dst.iter_mut().zip(src) {
            let q = (s.as_f64() / step).round_ties_even();
            if !(q.abs() < 2.0e9) {
                return Err(Error::NonFinite("grid table entry".into()));
            }
            *d = (q * step) as f32;
        }
    }
    Ok(out)
}

/// Shared part of a frozen model: configuration, half-precision networks,
/// quantized grid; no anchors.
pub fn freeze_shared<T: Real>(model: &SceneModel<T>) -> Result<SceneModel<f32>> {
    model.config.validate()?;
    let mut prediction = model.prediction.cast::<f32>();
    let mut entropy = model.entropy.cast::<f32>();
    let mut grid_rate = model.grid_rate.cast::<f32>();
    visit_network_params(&mut prediction, &mut entropy, &mut grid_rate, &mut |w| {
        *w = round_f16(*w);
        if w.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("network weight outside half-precision range".into()))
        }
    })?;
    entropy.hyper_anchor = entropy.hyper_anchor.zero_like();
    entropy.hyper_coupled = entropy.hyper_coupled.zero_like();
    if entropy.prior_dim() != model.grid.output_dim() || grid_rate.log_scales.len() != model.grid.tables.len() {
        return Err(Error::InvalidArgument("network shapes do not match the grid".into()));
    }
    Ok(SceneModel {
        config: model.config.clone(),
        anchors: Vec::new(),
        coupled: Vec::new(),
        grid: freeze_grid(&model.grid, model.config.grid_step)?,
        prediction,
        entropy,
        grid_rate,
        latents: Some(Latents { anchor: Vec::new(), coupled: Vec::new() }),
    })
}

/// Prior features and quantization steps of an anchor at `location`.
pub fn anchor_prior(model: &SceneModel<f32>, location: &[f32; 3]) -> Result<(Vec<f32>, QuantizationSteps<f32>)> {
    let prior = model.grid.query(location)?;
    let steps = predict_steps(&model.entropy, &prior)?;
    Ok((prior, steps))
}

fn quantized<const N: usize>(v: &[f32; N], step: f32) -> Result<[f32; N]> {
    let mut out = [0.0f32; N];
    for i in 0..N {
        out[i] = quantize(v[i], step)?.1;
    }
    Ok(out)
}

/// Freezes `anchors`/`coupled` against an already frozen `shared` model and
/// appends them (Morton-sorted) to it. Latents are taken from `latents` when
/// given and otherwise computed with `hyper` on the unquantized values.
/// Returns the input index of every appended anchor.
pub fn freeze_anchor_set<T: Real>(
    shared: &mut SceneModel<f32>,
    anchors: &[AnchorPrimitive<T>],
    coupled: &[CoupledPrimitive<T>],
    latents: Option<&Latents>,
    hyper: &EntropyNetworks<T>,
) -> Result<Vec<usize>> {
    let k = shared.k();
    if coupled.len() != k * anchors.len() {
        return Err(Error::DimensionMismatch { expected: k * anchors.len(), got: coupled.len() });
    }
    let step = shared.config.location_step;
    let positions: Vec<[f64; 3]> = anchors.iter().map(|a| a.location.map(|x| x.as_f64())).collect();
    let lattice = location::quantize_positions(&positions, step)?;
    let order = morton_order(&lattice)?;
    let base = shared.anchors.len();
    let mut new_latents = Latents { anchor: Vec::new(), coupled: Vec::new() };
    for (slot, &i) in order.iter().enumerate() {
        let a = &anchors[i];
        let group = &coupled[i * k..(i + 1) * k];
        let (la, lc): ([i8; HYPER_DIM], Vec<[i8; HYPER_DIM]>) = match latents {
            Some(l) => (l.anchor[i], l.coupled[i * k..(i + 1) * k].to_vec()),
            None => (
                quantize_latent(&hyper.hyper_anchor, &a.ref_embedding),
                group.iter().map(|c| quantize_latent(&hyper.hyper_coupled, &c.res_embedding)).collect(),
            ),
        };
        let p = lattice_position(&lattice[i], step);
        let loc = [p[0] as f32, p[1] as f32, p[2] as f32];
        let (_, steps) = anchor_prior(shared, &loc)?;
        let cov = a.covariance.cast::<f32>().to_params();
        let frozen = AnchorPrimitive {
            location: loc,
            covariance: FactoredCovariance::from_params(&quantized(&cov, steps.covariance)?),
            ref_embedding: quantized(&a.ref_embedding.map(|x| x.cast::<f32>()), steps.embedding)?,
        };
        shared.anchors.push(frozen);
        for c in group {
            let r = c.res_embedding.map(|x| x.cast::<f32>());
            shared.coupled.push(CoupledPrimitive { res_embedding: quantized(&r, steps.residual)?, anchor_index: base + slot });
        }
        new_latents.anchor.push(la);
        new_latents.coupled.extend(lc);
    }
    let l = shared.latents.get_or_insert_with(|| Latents { anchor: Vec::new(), coupled: Vec::new() });
    l.anchor.extend(new_latents.anchor);
    l.coupled.extend(new_latents.coupled);
    Ok(order)
}

/// The canonical quantized model that a decoder reconstructs.
pub fn freeze_model<T: Real>(model: &SceneModel<T>) -> Result<SceneModel<f32>> {
    model.validate()?;
    let mut shared = freeze_shared(model)?;
    freeze_anchor_set(&mut shared, &model.anchors, &model.coupled, model.latents.as_ref(), &model.entropy)?;
    Ok(shared)
}

/// Empty frozen model with the shapes implied by a configuration.
pub fn model_template(config: CodecConfig, bounds_min: [f32; 3], bounds_max: [f32; 3]) -> Result<SceneModel<f32>> {
    config.validate()?;
    let grid = FeatureGrid::zeros(config.grid.clone(), bounds_min, bounds_max)?;
    let dim = grid.output_dim();
    Ok(SceneModel {
        grid_rate: GridRateModel::new(config.grid.levels, 1.0),
        config,
        anchors: Vec::new(),
        coupled: Vec::new(),
        grid,
        prediction: PredictionNetworks::neutral(dim),
        entropy: EntropyNetworks::zeros(dim),
        latents: Some(Latents { anchor: Vec::new(), coupled: Vec::new() }),
    })
}

pub fn encode_weights(model: &SceneModel<f32>) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    let (mut p, mut e, mut g) = (model.prediction.clone(), model.entropy.clone(), model.grid_rate.clone());
    visit_network_params(&mut p, &mut e, &mut g, &mut |v| {
        w.f16(*v);
        Ok(())
    })?;
    Ok(w.buf)
}

pub fn decode_weights(bytes: &[u8], model: &mut SceneModel<f32>) -> Result<()> {
    let mut r = ByteReader::new(bytes);
    let SceneModel { prediction, entropy, grid_rate, .. } = model;
    visit_network_params(prediction, entropy, grid_rate, &mut |v| {
        *v = r.f16()?;
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::Corrupt("non-finite network weight".into()))
        }
    })?;
    if r.remaining() != 0 {
        return Err(Error::Corrupt("trailing bytes in weight section".into()));
    }
    Ok(())
}

fn grid_index(v: f32, step: f64) -> Result<i64> {
    let q = (v as f64 / step).round_ties_even();
    if (q * step) as f32 != v {
        return Err(Error::InvalidArgument("grid entry is not on the quantization lattice".into()));
    }
    Ok(q as i64)
}

/// Codes quantized grid tables: an adaptive zero flag per entry (context:
/// level and whether the previous entry was zero), then nonzero indices
/// under the level's zero-mean Gaussian.
pub fn encode_grid(enc: &mut Encoder, grid: &FeatureGrid<f32>, rate: &GridRateModel<f32>, step: f64) -> Result<()> {
    if rate.log_scales.len() != grid.tables.len() {
        return Err(Error::DimensionMismatch { expected: grid.tables.len(), got: rate.log_scales.len() });
    }
    for (l, table) in grid.tables.iter().enumerate() {
        let window = GaussianWindow::new(0.0, rate.scale(l), step as f32, true)?;
        let mut ctx = [BitContext::default(); 2];
        let mut prev_zero = true;
        for v in table {
            let q = grid_index(*v, step)?;
            enc.encode_bit(&mut ctx[prev_zero as usize], q != 0);
            if q != 0 {
                window.encode(enc, q)?;
            }
            prev_zero = q == 0;
        }
    }
    Ok(())
}

pub fn decode_grid(dec: &mut Decoder<'_>, grid: &mut FeatureGrid<f32>, rate: &GridRateModel<f32>, step: f64) -> Result<()> {
    for (l, table) in grid.tables.iter_mut().enumerate() {
        let window = GaussianWindow::new(0.0, rate.scale(l), step as f32, true)?;
        let mut ctx = [BitContext::default(); 2];
        let mut prev_zero = true;
        for v in table.iter_mut() {
            let nz = dec.decode_bit(&mut ctx[prev_zero as usize])?;
            let q = if nz { window.decode(dec)? } else { 0 };
            if q.abs() > 1 << 31 {
                return Err(Error::Corrupt("grid entry out of range".into()));
            }
            *v = (q as f64 * step) as f32;
            prev_zero = q == 0;
        }
    }
    Ok(())
}

fn index_of(v: f32, step: f32) -> Result<i64> {
    let (q, r) = quantize(v, step)?;
    if r != v {
        return Err(Error::InvalidArgument("parameter is not on its quantization lattice; freeze the model first".into()));
    }
    Ok(q)
}

/// The five range-coded anchor streams.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorStreams {
    pub locations: Vec<u8>,
    pub covariances: Vec<u8>,
    pub hyperpriors: Vec<u8>,
    pub embeddings: Vec<u8>,
    pub coupled: Vec<u8>,
}

impl AnchorStreams {
    pub fn total_len(&self) -> usize {
        self.locations.len() + self.covariances.len() + self.hyperpriors.len() + self.embeddings.len() + self.coupled.len()
    }
}

/// Codes anchors `range` of a frozen model with its own networks and grid.
pub fn encode_anchor_streams(model: &SceneModel<f32>, range: std::ops::Range<usize>) -> Result<AnchorStreams> {
    let k = model.k();
    let latents = model.latents.as_ref().ok_or_else(|| Error::InvalidArgument("model has no latents; freeze it first".into()))?;
    let step = model.config.location_step;
    let lattice: Vec<[i64; 3]> = model.anchors[range.clone()]
        .iter()
        .map(|a| {
            let l = location::quantize_positions(&[a.location.map(|x| x as f64)], step)?[0];
            let p = lattice_position(&l, step);
            if [p[0] as f32, p[1] as f32, p[2] as f32] != a.location {
                return Err(Error::InvalidArgument("anchor location is not on the lattice; freeze the model first".into()));
            }
            Ok(l)
        })
        .collect::<Result<_>>()?;
    let mut loc = Encoder::new();
    encode_lattice(&mut loc, &lattice)?;

    let ta = latent_tables(&model.entropy.bottleneck_anchor)?;
    let tc = latent_tables(&model.entropy.bottleneck_coupled)?;
    let mut cov = Encoder::new();
    let mut hyp = Encoder::new();
    let mut emb = Encoder::new();
    let mut cpl = Encoder::new();
    for i in range {
        let a = &model.anchors[i];
        let (prior, steps) = anchor_prior(model, &a.location)?;
        let pc = predict_covariance_entropy_params(&prior, &model.entropy)?;
        for (j, v) in a.covariance.to_params().iter().enumerate() {
            GaussianWindow::new(pc.mean[j], pc.scale[j], steps.covariance, false)?.encode(&mut cov, index_of(*v, steps.covariance)?)?;
        }
        let la = latents.anchor[i];
        for d in 0..HYPER_DIM {
            hyp.encode(&ta[d], latent_symbol(la[d])?)?;
        }
        for lc in &latents.coupled[i * k..(i + 1) * k] {
            for d in 0..HYPER_DIM {
                hyp.encode(&tc[d], latent_symbol(lc[d])?)?;
            }
        }
        let eta: Vec<f32> = la.iter().map(|x| *x as f32).collect();
        let pf = predict_embedding_entropy_params(&eta, &prior, &model.entropy)?;
        for (j, v) in a.ref_embedding.iter().enumerate() {
            GaussianWindow::new(pf.mean[j], pf.scale[j], steps.embedding, false)?.encode(&mut emb, index_of(*v, steps.embedding)?)?;
        }
        for (c, lc) in model.coupled[i * k..(i + 1) * k].iter().zip(&latents.coupled[i * k..(i + 1) * k]) {
            let eta: Vec<f32> = lc.iter().map(|x| *x as f32).collect();
            let pg = predict_coupled_entropy_params(&eta, &prior, &model.entropy)?;
            for (j, v) in c.res_embedding.iter().enumerate() {
                GaussianWindow::new(pg.mean[j], pg.scale[j], steps.residual, false)?.encode(&mut cpl, index_of(*v, steps.residual)?)?;
            }
        }
    }
    Ok(AnchorStreams {
        locations: loc.finish(),
        covariances: cov.finish(),
        hyperpriors: hyp.finish(),
        embeddings: emb.finish(),
        coupled: cpl.finish(),
    })
}

/// Decodes `count` anchors and appends them to `model`, whose networks and
/// grid must already be in place.
pub fn decode_anchor_streams(model: &mut SceneModel<f32>, count: usize, s: &AnchorStreams) -> Result<()> {
    let k = model.k();
    let step = model.config.location_step;
    let mut loc = Decoder::new(&s.locations)?;
    let lattice = decode_lattice(&mut loc, count)?;
    let ta = latent_tables(&model.entropy.bottleneck_anchor)?;
    let tc = latent_tables(&model.entropy.bottleneck_coupled)?;
    let mut cov = Decoder::new(&s.covariances)?;
    let mut hyp = Decoder::new(&s.hyperpriors)?;
    let mut emb = Decoder::new(&s.embeddings)?;
    let mut cpl = Decoder::new(&s.coupled)?;
    let mut la_all = Vec::with_capacity(count);
    let mut lc_all = Vec::new();
    for _ in 0..count {
        let mut la = [0i8; HYPER_DIM];
        for (d, v) in la.iter_mut().enumerate() {
            *v = symbol_latent(hyp.decode(&ta[d])?);
        }
        la_all.push(la);
        for _ in 0..k {
            let mut lc = [0i8; HYPER_DIM];
            for (d, v) in lc.iter_mut().enumerate() {
                *v = symbol_latent(hyp.decode(&tc[d])?);
            }
            lc_all.push(lc);
        }
    }
    let base = model.anchors.len();
    let value = |q: i64, step: f32| q as f32 * step;
    for i in 0..count {
        let p = lattice_position(&lattice[i], step);
        let location = [p[0] as f32, p[1] as f32, p[2] as f32];
        let (prior, steps) = anchor_prior(model, &location)?;
        let pc = predict_covariance_entropy_params(&prior, &model.entropy)?;
        let mut c = [0.0f32; COV_DIM];
        for (j, v) in c.iter_mut().enumerate() {
            *v = value(GaussianWindow::new(pc.mean[j], pc.scale[j], steps.covariance, false)?.decode(&mut cov)?, steps.covariance);
        }
        let eta: Vec<f32> = la_all[i].iter().map(|x| *x as f32).collect();
        let pf = predict_embedding_entropy_params(&eta, &prior, &model.entropy)?;
        let mut f = [0.0f32; REF_DIM];
        for (j, v) in f.iter_mut().enumerate() {
            *v = value(GaussianWindow::new(pf.mean[j], pf.scale[j], steps.embedding, false)?.decode(&mut emb)?, steps.embedding);
        }
        model.anchors.push(AnchorPrimitive { location, covariance: FactoredCovariance::from_params(&c), ref_embedding: f });
        for lc in &lc_all[i * k..(i + 1) * k] {
            let eta: Vec<f32> = lc.iter().map(|x| *x as f32).collect();
            let pg = predict_coupled_entropy_params(&eta, &prior, &model.entropy)?;
            let mut r = [0.0f32; RES_DIM];
            for (j, v) in r.iter_mut().enumerate() {
                *v = value(GaussianWindow::new(pg.mean[j], pg.scale[j], steps.residual, false)?.decode(&mut cpl)?, steps.residual);
            }
            model.coupled.push(CoupledPrimitive { res_embedding: r, anchor_index: base + i });
        }
    }
    let l = model.latents.get_or_insert_with(|| Latents { anchor: Vec::new(), coupled: Vec::new() });
    l.anchor.extend(la_all);
    l.coupled.extend(lc_all);
    Ok(())
}

/// Container for a frozen model.
pub fn encode_frozen(model: &SceneModel<f32>, kind: FrameKind, frame_index: u32) -> Result<Bitstream> {
    model.validate()?;
    let mut grids = Encoder::new();
    encode_grid(&mut grids, &model.grid, &model.grid_rate, model.config.grid_step)?;
    let s = encode_anchor_streams(model, 0..model.anchors.len())?;
    Ok(Bitstream {
        header: Header {
            kind,
            frame_index,
            config: model.config.clone(),
            bounds_min: model.grid.bounds_min,
            bounds_max: model.grid.bounds_max,
            anchors: u32::try_from(model.anchors.len()).map_err(|_| Error::InvalidArgument("too many anchors".into()))?,
        },
        sections: vec![
            (SectionId::Weights, encode_weights(model)?),
            (SectionId::Grids, grids.finish()),
            (SectionId::Locations, s.locations),
            (SectionId::Covariances, s.covariances),
            (SectionId::Hyperpriors, s.hyperpriors),
            (SectionId::Embeddings, s.embeddings),
            (SectionId::CoupledEmbeddings, s.coupled),
        ],
    })
}

/// Encoded static model plus the frozen model the decoder will reproduce.
#[derive(Clone, Debug)]
pub struct EncodedModel {
    pub bytes: Vec<u8>,
    pub frozen: SceneModel<f32>,
}

pub fn encode_model<T: Real>(model: &SceneModel<T>) -> Result<EncodedModel> {
    encode_model_as(model, FrameKind::Static, 0)
}

pub fn encode_model_as<T: Real>(model: &SceneModel<T>, kind: FrameKind, frame_index: u32) -> Result<EncodedModel> {
    let frozen = freeze_model(model)?;
    let bytes = encode_frozen(&frozen, kind, frame_index)?.to_bytes()?;
    Ok(EncodedModel { bytes, frozen })
}

/// Rebuilds the model of a static or intra-frame stream.
pub fn decode_bitstream(bs: &Bitstream) -> Result<SceneModel<f32>> {
    if bs.header.kind == FrameKind::Predicted {
        return Err(Error::InvalidArgument("predicted frames need the previous frame state".into()));
    }
    let h = &bs.header;
    let mut model = model_template(h.config.clone(), h.bounds_min, h.bounds_max)?;
    decode_weights(bs.section(SectionId::Weights)?, &mut model)?;
    let mut grids = Decoder::new(bs.section(SectionId::Grids)?)?;
    let rate = model.grid_rate.clone();
    decode_grid(&mut grids, &mut model.grid, &rate, h.config.grid_step)?;
    let streams = AnchorStreams {
        locations: bs.section(SectionId::Locations)?.to_vec(),
        covariances: bs.section(SectionId::Covariances)?.to_vec(),
        hyperpriors: bs.section(SectionId::Hyperpriors)?.to_vec(),
        embeddings: bs.section(SectionId::Embeddings)?.to_vec(),
        coupled: bs.section(SectionId::CoupledEmbeddings)?.to_vec(),
    };
    decode_anchor_streams(&mut model, h.anchors as usize, &streams)?;
    model.validate()?;
    Ok(model)
}

pub fn decode_model(bytes: &[u8]) -> Result<SceneModel<f32>> {
    decode_bitstream(&Bitstream::from_bytes(bytes)?)
}

/// Bytes of the entropy-modeled parameter sections (covariances,
/// hyperpriors, embeddings, coupled embeddings).
pub fn parameter_payload_bytes(bs: &Bitstream) -> usize {
    bs.sections
        .iter()
        .filter(|(id, _)| matches!(id, SectionId::Covariances | SectionId::Hyperpriors | SectionId::Embeddings | SectionId::CoupledEmbeddings))
        .map(|(_, b)| b.len())
        .sum()
}

pub fn write_bitstream(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bitstream(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Human-readable header and section dump.
pub fn describe(bs: &Bitstream) -> String {
    let h = &bs.header;
    let c = &h.config;
    let mut s = String::new();
    s.push_str(&format!("kind: {}\nframe: {}\nK: {}\nanchors: {}\n", h.kind.name(), h.frame_index, c.k, h.anchors));
    for (name, g) in [("grid", &c.grid), ("temporal_grid", &c.temporal_grid)] {
        s.push_str(&format!(
            "{name}: levels {} base {} growth {} table 2^{} dim {}\n",
            g.levels, g.base_resolution, g.growth, g.log2_table_size, g.feature_dim
        ));
    }
    s.push_str(&format!("steps: location {} grid {} residue {}\n", c.location_step, c.grid_step, c.residue_step));
    s.push_str(&format!("bounds: {:?} .. {:?}\n", h.bounds_min, h.bounds_max));
    let mut total = 0;
    for (id, len) in bs.section_sizes() {
        s.push_str(&format!("section {:<20} {len} bytes\n", id.name()));
        total += len;
    }
    s.push_str(&format!("payload: {total} bytes\n"));
    s
}

/// Sum of ideal costs under the coding tables; equals the stream size up to
/// coder overhead.
pub fn table_cost<M: SymbolModel>(models: &[M], symbols: &[usize]) -> f64 {
    models.iter().zip(symbols).map(|(m, s)| (range_coder::TOTAL as f64 / (m.cum(s + 1) - m.cum(*s)) as f64).log2()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy_model::{model_rate, RateMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_model(seed: u64, anchors: usize) -> SceneModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = CodecConfig { k: 4, ..CodecConfig::default() };
        cfg.grid.log2_table_size = 8;
        let mut m = SceneModel::empty(cfg, [-1.0; 3], [1.0; 3], &mut rng).unwrap();
        for t in m.grid.tables.iter_mut() {
            for v in t.iter_mut() {
                if rng.gen_bool(0.3) {
                    *v = rng.gen_range(-0.3..0.3);
                }
            }
        }
        for _ in 0..anchors {
            let mut g = |s: f64| rng.gen_range(-s..s);
            let a = AnchorPrimitive {
                location: [g(0.9), g(0.9), g(0.9)],
                covariance: FactoredCovariance { log_scales: [g(0.3) - 3.0, g(0.3) - 3.0, g(0.3) - 3.0], rotation: [1.0, g(0.2), g(0.2), g(0.2)] },
                ref_embedding: std::array::from_fn(|_| g(0.5)),
            };
            let res: Vec<[f64; RES_DIM]> = (0..4).map(|_| std::array::from_fn(|_| g(0.5))).collect();
            m.push_anchor(a, &res).unwrap();
        }
        m
    }

    #[test]
    fn round_trip_is_exact_and_idempotent() {
        let m = random_model(1, 40);
        let e = encode_model(&m).unwrap();
        let d = decode_model(&e.bytes).unwrap();
        assert_eq!(d, e.frozen);
        let again = encode_model(&d).unwrap();
        assert_eq!(again.bytes, e.bytes);
        assert_eq!(encode_model(&m).unwrap().bytes, e.bytes);
    }

    #[test]
    fn freezing_is_idempotent_and_morton_sorted() {
        let m = random_model(2, 25);
        let f = freeze_model(&m).unwrap();
        assert_eq!(freeze_model(&f).unwrap(), f);
        let lat: Vec<[i64; 3]> =
            f.anchors.iter().map(|a| location::quantize_positions(&[a.location.map(|x| x as f64)], f.config.location_step).unwrap()[0]).collect();
        let order = morton_order(&lat).unwrap();
        assert_eq!(order, (0..lat.len()).collect::<Vec<_>>());
        for a in &f.anchors {
            let (_, st) = anchor_prior(&f, &a.location).unwrap();
            for v in a.ref_embedding {
                assert_eq!(quantize(v, st.embedding).unwrap().1, v);
            }
        }
    }

    #[test]
    fn empty_model_round_trips() {
        let m = random_model(3, 0);
        let e = encode_model(&m).unwrap();
        assert_eq!(decode_model(&e.bytes).unwrap(), e.frozen);
    }

    #[test]
    fn truncated_and_corrupted_streams_fail_cleanly() {
        let m = random_model(4, 10);
        let bytes = encode_model(&m).unwrap().bytes;
        for cut in (0..bytes.len()).step_by(7) {
            assert!(decode_model(&bytes[..cut]).is_err());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mut v = bytes.clone();
            let i = rng.gen_range(0..v.len());
            v[i] ^= 1 << rng.gen_range(0..8);
            let _ = decode_model(&v);
        }
    }

    #[test]
    fn payload_tracks_exact_rate() {
        let mut m = random_model(6, 100);
        // Covariance means near the data: log-scales around -3, w around 1.
        for (i, mean) in [-3.0, -3.0, -3.0, 1.0].into_iter().enumerate() {
            m.entropy.covariance.bias[i] = mean;
        }
        let e = encode_model(&m).unwrap();
        let bs = Bitstream::from_bytes(&e.bytes).unwrap();
        let est = model_rate(&e.frozen, RateMode::Exact).unwrap().total();
        let actual = 8.0 * parameter_payload_bytes(&bs) as f64;
        assert!((est - actual).abs() <= 0.005 * est + 128.0 * 8.0, "{est} vs {actual}");
    }

    #[test]
    fn unfrozen_models_are_rejected_by_the_raw_encoder() {
        let m = random_model(7, 3).cast::<f32>();
        assert!(encode_frozen(&m, FrameKind::Static, 0).is_err());
    }

    #[test]
    fn describe_lists_sections() {
        let e = encode_model(&random_model(8, 2)).unwrap();
        let text = describe(&Bitstream::from_bytes(&e.bytes).unwrap());
        assert!(text.contains("anchor_embeddings"));
        assert!(text.contains("anchors: 2"));
    }
}
