//! Trains the 100-Gaussian toy scene, encodes it and reports held-out PSNR
//! and size. Usage: toy_scene [iterations] [lambda] [seed]

use std::time::Instant;

use cgs_core::codec::{decode_model, encode_model};
use cgs_core::rd_optimizer::{train_static, TrainConfig};
use cgs_core::renderer::psnr;
use cgs_core::synthetic::{static_scene, SceneSpec};
use cgs_core::CodecConfig;

fn main() -> cgs_core::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("CGS_LOG", "info")).init();
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map_or(Ok(5000), |s| s.parse()).expect("iterations must be an integer");
    let lambda = args.next().map_or(Ok(5e-4), |s| s.parse()).expect("lambda must be a number");
    let seed = args.next().map_or(Ok(0), |s| s.parse()).expect("seed must be an integer");
    let scene = static_scene(&SceneSpec::default());
    let cfg = TrainConfig { iterations, lambda, seed, ..TrainConfig::default() };
    let t = Instant::now();
    let out = train_static(&scene.train, &scene.points, &CodecConfig::default(), &cfg)?;
    let train_secs = t.elapsed().as_secs_f64();
    let enc = encode_model(&out.model)?;
    let dec = decode_model(&enc.bytes)?;
    let mean_psnr = |views: &[cgs_core::rd_optimizer::TrainView]| -> cgs_core::Result<f64> {
        let mut total = 0.0;
        for v in views {
            let c = v.camera.cast::<f32>();
            let gs = cgs_core::spatial_prediction::derive_all(&dec, &c)?;
            total += psnr(&cgs_core::renderer::rasterize(&gs, &c).cast::<f64>(), &v.image)?;
        }
        Ok(total / views.len() as f64)
    };
    let raw = dec.coupled.len() * 14 * 4;
    println!(
        "iterations {iterations} lambda {lambda}: {} anchors, held-out PSNR {:.2} dB, train PSNR {:.2} dB, {} bytes ({:.1}% of {} raw), {:.1}s",
        dec.anchors.len(),
        mean_psnr(&scene.test)?,
        mean_psnr(&scene.train)?,
        enc.bytes.len(),
        100.0 * enc.bytes.len() as f64 / raw as f64,
        raw,
        train_secs
    );
    Ok(())
}
