//! `cgs`: train, code, render and evaluate compressed Gaussian-splatting
//! scenes and sequences.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cgs_core::codec::{decode_bitstream, describe, encode_model, Bitstream, FrameKind};
use cgs_core::dataset::{load_scene, Scene};
use cgs_core::rd_optimizer::{rd_csv, train_static, write_log_csv, LambdaPreset, RdPoint};
use cgs_core::renderer::{psnr, rasterize, read_cameras, ssim, write_ppm};
use cgs_core::spatial_prediction::derive_all;
use cgs_core::temporal::{decode_sequence, encode_sequence, write_frame_csv, FrameState};
use cgs_core::{Camera, Settings};
use clap::{Args, Parser, Subcommand};

const MODEL_FILE: &str = "model.json";
const META_FILE: &str = "meta.json";

#[derive(Parser, Debug)]
#[command(name = "cgs", version, about = "Compressed anchor-based Gaussian splatting codec")]
struct Cli {
    /// Worker threads; defaults to the number of logical cores. Use 1 for
    /// bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct TrainOpts {
    /// key = value settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Rate weight: low, middle, high or a number.
    #[arg(long, value_parser = parse_lambda)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training iterations (intra frame for sequences).
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a static model from frame 0 of a scene directory.
    TrainStatic {
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Train and code a sequence: one intra stream, then one predicted
    /// stream per following frame.
    TrainSequence {
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainOpts,
        /// Iterations per predicted frame.
        #[arg(long)]
        p_iters: Option<usize>,
    },
    /// Encode a model directory into <out>/model.cgs.
    Encode {
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a .cgs stream into a model directory.
    Decode {
        stream: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a model directory, a .cgs stream, or an intra stream followed
    /// by predicted streams (one subdirectory per frame).
    Render {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR, SSIM and size of models against a scene's views; with two or
    /// more models and --out also writes rd.csv.
    Eval {
        #[arg(required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the header and section table of a .cgs stream.
    Info { stream: PathBuf },
}

fn parse_lambda(s: &str) -> Result<f64, String> {
    if let Ok(p) = LambdaPreset::parse(s) {
        return Ok(p.lambda());
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected low, middle, high or a nonnegative number, got '{s}'")),
    }
}

/// A failure tied to an input or output path.
#[derive(Debug)]
struct DataError(String);

type Res<T> = Result<T, DataError>;

trait Context<T> {
    fn at(self, path: &Path) -> Res<T>;
}

impl<T> Context<T> for cgs_core::Result<T> {
    fn at(self, path: &Path) -> Res<T> {
        self.map_err(|e| {
            let msg = e.to_string();
            let shown = path.display().to_string();
            if msg.contains(&shown) {
                DataError(msg)
            } else {
                DataError(format!("{shown}: {msg}"))
            }
        })
    }
}

fn io<T>(r: std::io::Result<T>, path: &Path) -> Res<T> {
    r.map_err(|e| DataError(format!("{}: {e}", path.display())))
}

fn settings(opts: &TrainOpts) -> Res<Settings> {
    let mut s = match &opts.config {
        Some(p) => Settings::load(p).at(p)?,
        None => Settings::default(),
    };
    if let Some(l) = opts.lambda {
        s.train.lambda = l;
        s.temporal.lambda = l;
    }
    if let Some(seed) = opts.seed {
        s.train.seed = seed;
        s.temporal.seed = seed;
    }
    if let Some(n) = opts.iters {
        s.train.iterations = n;
    }
    s.validate().map_err(|e| DataError(format!("invalid settings: {e}")))?;
    Ok(s)
}

fn create_dir(dir: &Path) -> Res<()> {
    io(std::fs::create_dir_all(dir), dir)
}

fn is_stream(p: &Path) -> bool {
    p.is_file()
}

fn load_model_dir(dir: &Path) -> Res<cgs_core::SceneModelF64> {
    let path = dir.join(MODEL_FILE);
    cgs_core::SceneModelF64::load_json(&path).at(&path)
}

fn read_stream(path: &Path) -> Res<(Vec<u8>, Bitstream)> {
    let bytes = io(std::fs::read(path), path)?;
    let bs = Bitstream::from_bytes(&bytes).at(path)?;
    Ok((bytes, bs))
}

/// Model ready for rendering, with its coded size when it came from a
/// stream and its training rate weight when known.
struct Loaded {
    model: cgs_core::SceneModelF32,
    stream_bytes: Option<usize>,
    lambda: Option<f64>,
}

fn load_static(path: &Path) -> Res<Loaded> {
    if is_stream(path) {
        let (bytes, bs) = read_stream(path)?;
        if bs.header.kind == FrameKind::Predicted {
            return Err(DataError(format!("{}: a predicted frame needs its preceding streams", path.display())));
        }
        let model = decode_bitstream(&bs).at(path)?;
        return Ok(Loaded { model, stream_bytes: Some(bytes.len()), lambda: None });
    }
    let model = load_model_dir(path)?.cast::<f32>();
    let meta = path.join(META_FILE);
    let lambda = std::fs::read_to_string(&meta)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v.get("lambda").and_then(|l| l.as_f64()));
    Ok(Loaded { model, stream_bytes: None, lambda })
}

fn render_model(model: &cgs_core::SceneModelF32, cam: &Camera<f64>) -> cgs_core::Result<cgs_core::ImageF32> {
    let c = cam.cast::<f32>();
    Ok(rasterize(&derive_all(model, &c)?, &c))
}

fn write_views(dir: &Path, images: &[cgs_core::ImageF32]) -> Res<()> {
    create_dir(dir)?;
    for (i, im) in images.iter().enumerate() {
        let p = dir.join(format!("view_{i:03}.ppm"));
        write_ppm(&p, im).at(&p)?;
    }
    Ok(())
}

fn train_static_cmd(scene_dir: &Path, out: &Path, opts: &TrainOpts) -> Res<()> {
    let s = settings(opts)?;
    let scene = load_scene(scene_dir).at(scene_dir)?;
    let outcome = train_static(&scene.views(0), &scene.points, &s.codec, &s.train).at(scene_dir)?;
    create_dir(out)?;
    let model_path = out.join(MODEL_FILE);
    outcome.model.save_json(&model_path).at(&model_path)?;
    let csv = out.join("metrics.csv");
    write_log_csv(&csv, &outcome.log).at(&csv)?;
    let meta = serde_json::json!({ "lambda": s.train.lambda, "seed": s.train.seed, "iterations": s.train.iterations });
    let meta_path = out.join(META_FILE);
    io(std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("json")), &meta_path)?;
    println!("trained {} anchors; wrote {}", outcome.model.anchors.len(), out.display());
    Ok(())
}

fn train_sequence_cmd(scene_dir: &Path, out: &Path, opts: &TrainOpts, p_iters: Option<usize>) -> Res<()> {
    let mut s = settings(opts)?;
    if let Some(n) = p_iters {
        s.temporal.iterations = n;
    }
    let scene = load_scene(scene_dir).at(scene_dir)?;
    let outcome = encode_sequence(&scene.all_views(), &scene.points, &s.codec, &s.train, &s.temporal).at(scene_dir)?;
    create_dir(out)?;
    for (t, bytes) in outcome.streams.iter().enumerate() {
        let p = out.join(format!("frame_{t:04}.cgs"));
        io(std::fs::write(&p, bytes), &p)?;
    }
    let csv = out.join("frames.csv");
    write_frame_csv(&csv, &outcome.reports).at(&csv)?;
    for r in &outcome.reports {
        println!("frame {}: {} {} bytes, {:.2} dB, {} dynamic", r.frame, r.kind.name(), r.bytes, r.psnr, r.dynamic);
    }
    Ok(())
}

fn encode_cmd(model_dir: &Path, out: &Path) -> Res<()> {
    let model = load_model_dir(model_dir)?;
    let enc = encode_model(&model).at(model_dir)?;
    create_dir(out)?;
    let p = out.join("model.cgs");
    io(std::fs::write(&p, &enc.bytes), &p)?;
    println!("{} bytes -> {}", enc.bytes.len(), p.display());
    Ok(())
}

fn decode_cmd(stream: &Path, out: &Path) -> Res<()> {
    let loaded = load_static(stream)?;
    create_dir(out)?;
    let p = out.join(MODEL_FILE);
    loaded.model.cast::<f64>().save_json(&p).at(&p)?;
    println!("decoded {} anchors -> {}", loaded.model.anchors.len(), out.display());
    Ok(())
}

fn decode_chain(paths: &[PathBuf]) -> Res<Vec<FrameState>> {
    let mut streams = Vec::with_capacity(paths.len());
    for p in paths {
        streams.push(read_stream(p)?.0);
    }
    let first = &paths[0];
    decode_sequence(&streams).at(first)
}

fn render_cmd(inputs: &[PathBuf], cameras: &Path, out: &Path) -> Res<()> {
    let cams = read_cameras(cameras).at(cameras)?;
    if inputs.len() == 1 {
        let loaded = load_static(&inputs[0])?;
        let images: Vec<_> = cams.iter().map(|c| render_model(&loaded.model, c)).collect::<cgs_core::Result<_>>().at(&inputs[0])?;
        return write_views(out, &images);
    }
    if let Some(p) = inputs.iter().find(|p| !is_stream(p)) {
        return Err(DataError(format!("{}: a frame series must consist of .cgs streams", p.display())));
    }
    let states = decode_chain(inputs)?;
    for (t, st) in states.iter().enumerate() {
        let images: Vec<_> = cams.iter().map(|c| st.render(c)).collect::<cgs_core::Result<_>>().at(&inputs[t])?;
        write_views(&out.join(format!("frame_{t:04}")), &images)?;
    }
    Ok(())
}

fn evaluate(model: &Path, scene: &Scene, frame: usize) -> Res<RdPoint> {
    let loaded = load_static(model)?;
    let bytes = match loaded.stream_bytes {
        Some(b) => b,
        None => encode_model(&loaded.model).at(model)?.bytes.len(),
    };
    let (mut p, mut s) = (0.0, 0.0);
    for (cam, target) in scene.cameras.iter().zip(&scene.frames[frame]) {
        let im = render_model(&loaded.model, cam).at(model)?.cast::<f64>();
        p += psnr(&im, target).at(model)?;
        s += ssim(&im, target).at(model)?;
    }
    let n = scene.cameras.len() as f64;
    Ok(RdPoint { lambda: loaded.lambda, bytes, psnr: p / n, ssim: s / n })
}

fn eval_cmd(models: &[PathBuf], scene_dir: &Path, frame: usize, out: Option<&Path>) -> Res<()> {
    let scene = load_scene(scene_dir).at(scene_dir)?;
    if frame >= scene.frames.len() {
        return Err(DataError(format!("{}: frame {frame} out of range ({} frames)", scene_dir.display(), scene.frames.len())));
    }
    let points: Vec<RdPoint> = models.iter().map(|m| evaluate(m, &scene, frame)).collect::<Res<_>>()?;
    let json: Vec<serde_json::Value> = models
        .iter()
        .zip(&points)
        .map(|(m, p)| serde_json::json!({ "model": m.display().to_string(), "psnr": p.psnr, "ssim": p.ssim, "size_bytes": p.bytes }))
        .collect();
    let text = if json.len() == 1 { serde_json::to_string_pretty(&json[0]) } else { serde_json::to_string_pretty(&json) }.expect("json");
    println!("{text}");
    if let Some(out) = out {
        create_dir(out)?;
        let p = out.join("eval.json");
        io(std::fs::write(&p, &text), &p)?;
        if points.len() >= 2 {
            let csv = rd_csv(&points).map_err(|e| DataError(e.to_string()))?;
            let p = out.join("rd.csv");
            io(std::fs::write(&p, csv), &p)?;
        }
    }
    Ok(())
}

fn info_cmd(stream: &Path) -> Res<()> {
    let (bytes, bs) = read_stream(stream)?;
    println!("file: {} ({} bytes)", stream.display(), bytes.len());
    print!("{}", describe(&bs));
    Ok(())
}

fn run(cli: Cli) -> Res<()> {
    match &cli.command {
        Command::TrainStatic { scene, out, train } => train_static_cmd(scene, out, train),
        Command::TrainSequence { scene, out, train, p_iters } => train_sequence_cmd(scene, out, train, *p_iters),
        Command::Encode { model, out } => encode_cmd(model, out),
        Command::Decode { stream, out } => decode_cmd(stream, out),
        Command::Render { inputs, cameras, out } => render_cmd(inputs, cameras, out),
        Command::Eval { models, scene, frame, out } => eval_cmd(models, scene, *frame, out.as_deref()),
        Command::Info { stream } => info_cmd(stream),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("CGS_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(DataError(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
