//! Codes the moving-blob sequence and prints per-frame sizes, PSNR and the
//! share of ground-truth moving anchors flagged dynamic.
//! Usage: blob_sequence [intra iterations] [predicted iterations] [static] [temporal.key=value ...]

use cgs_core::rd_optimizer::TrainConfig;
use cgs_core::synthetic::{moving_blob_sequence, static_sequence, SequenceSpec};
use cgs_core::temporal::{decode_sequence, encode_sequence, TemporalConfig};
use cgs_core::CodecConfig;

fn main() -> cgs_core::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("CGS_LOG", "info")).init();
    let (overrides, args): (Vec<String>, Vec<String>) = std::env::args().skip(1).partition(|a| a.contains('='));
    let intra = args.first().map_or(1500, |s| s.parse().expect("integer"));
    let predicted = args.get(1).map_or(300, |s| s.parse().expect("integer"));
    let spec = SequenceSpec::default();
    let seq = if args.get(2).is_some_and(|s| s == "static") { static_sequence(&spec)? } else { moving_blob_sequence(&spec)? };
    let train = TrainConfig { iterations: intra, ..TrainConfig::default() };
    let mut cfg = TemporalConfig { iterations: predicted, ..TemporalConfig::default() };
    for o in &overrides {
        let (k, v) = o.split_once('=').expect("contains '='");
        if !cfg.set(k, v)? {
            return Err(cgs_core::Error::InvalidArgument(format!("unknown key {k}")));
        }
    }
    let out = encode_sequence(&seq.frames, &seq.points, &CodecConfig::default(), &train, &cfg)?;
    let moving: Vec<usize> =
        (0..out.states[0].model.anchors.len()).filter(|i| seq.is_moving(&out.states[0].model.anchors[*i].location.map(f64::from))).collect();
    for (r, s) in out.reports.iter().zip(&out.states) {
        let hit = moving.iter().filter(|i| s.dynamic[**i]).count();
        println!(
            "frame {} {:?}: {} bytes, {:.2} dB, {} anchors, {} dynamic, {}/{} moving flagged",
            r.frame,
            r.kind,
            r.bytes,
            r.psnr,
            r.anchors,
            r.dynamic,
            hit,
            moving.len()
        );
    }
    let dec = decode_sequence(&out.streams)?;
    println!("closed loop exact: {}", dec == out.states);
    Ok(())
}
