use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use vanishnet::ablate::{run_ablation, AblationAxis, AblationSpec};
use vanishnet::config::{DeviceKind, Needs, RunConfig};
use vanishnet::data::{load_dataset, read_annotations, resize_with_annotation, save_dataset, synth_dataset, to_original, SynthConfig};
use vanishnet::evaluation::{
    compare_report, draw_overlay, evaluate_with_predictions, histogram_svg, load_baselines, shipped_baselines, EvalReport,
};
use vanishnet::training::{load_model, write_loss_csv, Trainer};
use vanishnet::{Detector, Error, ImageSample, Point, VpNet};

#[derive(Parser)]
#[command(name = "vanishnet", version, about = "Road vanishing-point detection: train, evaluate, predict, ablate")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    device: Option<Device>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Device {
    Cpu,
    Gpu,
}

#[derive(Subcommand)]
enum Command {
    /// Train on `data.train`; writes checkpoint, loss CSV and resolved config.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        /// Training annotations; overrides `data.train`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Start from the built-in desk-scale preset instead of the full model.
        #[arg(long)]
        desk: bool,
    },
    /// Evaluate a checkpoint on `data.eval` (or `--data`).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write one overlay image per sample.
        #[arg(long)]
        overlays: bool,
    },
    /// Predict the vanishing point of individual images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image files.
        images: Vec<PathBuf>,
        /// Annotation file; its images are predicted and ground truth is drawn.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Run one ablation axis.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        epochs: Option<usize>,
        /// Use N synthetic images for training and evaluation instead of the config data.
        #[arg(long)]
        synth: Option<usize>,
        #[arg(long)]
        desk: bool,
    },
    /// Print the comparison table for an evaluation report.
    Report {
        #[arg(long)]
        report: PathBuf,
        /// Reference rows; defaults to the shipped baselines.
        #[arg(long)]
        baselines: Option<PathBuf>,
        #[arg(long, default_value = "Proposed (this run)")]
        label: String,
    },
    /// Generate a synthetic road dataset.
    Synth {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 160)]
        width: u32,
        #[arg(long, default_value_t = 120)]
        height: u32,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 2,
                _ => 3,
            };
        }
    }
    3
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve_config(cli: &Cli, desk: bool) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if desk => RunConfig::desk(),
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(d) = cli.device {
        cfg.device = match d {
            Device::Cpu => DeviceKind::Cpu,
            Device::Gpu => DeviceKind::Gpu,
        };
    }
    Ok(cfg)
}

/// The resolved config with absolute data paths, so it loads from any directory.
fn frozen(cfg: &RunConfig) -> anyhow::Result<String> {
    let mut cfg = cfg.clone();
    for p in [&mut cfg.data.train, &mut cfg.data.eval].into_iter().flatten() {
        *p = std::path::absolute(&*p)?;
    }
    Ok(cfg.to_toml())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Train { epochs, data, resume, desk } => {
            let mut cfg = resolve_config(&cli, *desk)?;
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(d) = data {
                cfg.data.train = Some(d.clone());
            }
            cfg.validate(Needs { train: true, eval: false })?;
            let train_path = cfg.data.train.clone().expect("validated");
            let dataset = load_dataset(&train_path)?;
            let mut trainer = match resume {
                Some(ckpt) => {
                    let mut t = Trainer::load(ckpt)?;
                    if t.model().config() != &cfg.model {
                        return Err(Error::config("checkpoint model does not match model config").into());
                    }
                    t.set_epochs(cfg.train.epochs);
                    t
                }
                None => {
                    let net = VpNet::seeded(&cfg.model, vanishnet::candle_core::DType::F32, cfg.seed)?;
                    Trainer::new(net, cfg.train.clone(), cfg.loss)?
                }
            };
            create_dir(&cfg.out_dir)?;
            fs::write(cfg.out_dir.join("config.toml"), frozen(&cfg)?)?;
            trainer.fit(&dataset)?;
            let ckpt = cfg.out_dir.join("checkpoint.safetensors");
            trainer.save(&ckpt)?;
            write_loss_csv(&cfg.out_dir.join("loss.csv"), trainer.history())?;
            println!("{}", ckpt.display());
        }
        Command::Eval { checkpoint, data, overlays } => {
            let mut cfg = resolve_config(&cli, false)?;
            if let Some(d) = data {
                cfg.data.eval = Some(d.clone());
            }
            cfg.validate(Needs { train: false, eval: true })?;
            let (net, _) = load_model(checkpoint)?;
            let dataset = load_dataset(cfg.data.eval.as_ref().expect("validated"))?;
            let device = net.store().device().clone();
            let (report, _) = evaluate_with_predictions(&net, &dataset, &device)?;
            create_dir(&cfg.out_dir)?;
            report.write_json(&cfg.out_dir.join("report.json"))?;
            report.write_csv(&cfg.out_dir.join("report.csv"))?;
            fs::write(cfg.out_dir.join("histogram.svg"), histogram_svg(&report.histogram, "NormDist histogram"))?;
            if *overlays {
                let dir = cfg.out_dir.join("overlays");
                create_dir(&dir)?;
                for (s, r) in dataset.iter().zip(&report.records) {
                    draw_overlay(&s.image, r.pred, Some(r.truth)).save(dir.join(format!("{}.png", s.id)))?;
                }
            }
            println!(
                "n={} mean_error={:.6} below_0.01={} failed={} fps={:.2}",
                report.n, report.mean_error, report.count_below_001, report.count_failed, report.fps
            );
            print!("{}", compare_report(&report, "Proposed (this run)", &shipped_baselines()));
        }
        Command::Predict { checkpoint, images, annotations } => {
            let cfg = resolve_config(&cli, false)?;
            cfg.validate(Needs { train: false, eval: false })?;
            let (net, _) = load_model(checkpoint)?;
            let mut jobs: Vec<(String, PathBuf, Option<Point>)> = images
                .iter()
                .map(|p| {
                    let id = p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
                    (id, p.clone(), None)
                })
                .collect();
            if let Some(ann) = annotations {
                let base = ann.parent().unwrap_or(Path::new(""));
                for r in read_annotations(ann)? {
                    jobs.push((r.id, base.join(r.path), Some(r.vp)));
                }
            }
            if jobs.is_empty() {
                return Err(Error::config("predict needs at least one image or --annotations").into());
            }
            create_dir(&cfg.out_dir)?;
            for (id, path, truth) in jobs {
                let image = image::open(&path)
                    .map_err(|source| Error::Image { path: path.clone(), source })?
                    .to_rgb8();
                let (w, h) = image.dimensions();
                let p = predict_one(&net, &id, image.clone())?;
                let vp = to_original(Point::new(p.x, p.y), net.input_size() as u32, w, h);
                println!("{id} {:.2} {:.2} {:.4}", vp.x, vp.y, p.confidence);
                draw_overlay(&image, vp, truth).save(cfg.out_dir.join(format!("{id}_overlay.png")))?;
            }
        }
        Command::Ablate { axis, epochs, synth, desk } => {
            let axis: AblationAxis = axis.parse()?;
            let mut cfg = resolve_config(&cli, *desk)?;
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            let (train, eval) = match synth {
                Some(n) => {
                    cfg.validate(Needs { train: false, eval: false })?;
                    let set: Vec<ImageSample> = synth_dataset(*n, cfg.seed, SynthConfig::default())?
                        .into_iter()
                        .map(|s| s.sample)
                        .collect();
                    (set.clone(), set)
                }
                None => {
                    cfg.validate(Needs { train: true, eval: true })?;
                    (
                        load_dataset(cfg.data.train.as_ref().expect("validated"))?,
                        load_dataset(cfg.data.eval.as_ref().expect("validated"))?,
                    )
                }
            };
            let spec = AblationSpec::for_axis(axis, &cfg.model);
            create_dir(&cfg.out_dir)?;
            let (table, dir) = run_ablation(&spec, &train, &eval, &cfg.train, &cfg.loss, &cfg.out_dir)?;
            fs::write(dir.join("config.toml"), frozen(&cfg)?)?;
            print!("{}", table.to_csv());
            println!("{}", dir.display());
        }
        Command::Report { report, baselines, label } => {
            let text = fs::read_to_string(report).with_context(|| format!("reading {}", report.display()))?;
            let ours: EvalReport = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", report.display())))?;
            let rows = match baselines {
                Some(p) => load_baselines(p)?,
                None => shipped_baselines(),
            };
            print!("{}", compare_report(&ours, label, &rows));
        }
        Command::Synth { n, width, height } => {
            let cfg = resolve_config(&cli, false)?;
            let set = synth_dataset(*n, cfg.seed, SynthConfig { width: *width, height: *height })?;
            let samples: Vec<ImageSample> = set.into_iter().map(|s| s.sample).collect();
            let ann = save_dataset(&cfg.out_dir, &samples)?;
            println!("{}", ann.display());
        }
    }
    Ok(())
}

fn predict_one(net: &VpNet, id: &str, image: image::RgbImage) -> anyhow::Result<vanishnet::VpPrediction> {
    let (w, h) = image.dimensions();
    // any in-frame annotation works; only the resized image is used
    let sample = ImageSample::new(id, image, Point::new(0.0, 0.0))?;
    let resized = resize_with_annotation(&sample, net.input_size() as u32)?;
    let x = vanishnet::data::image_to_tensor(&resized.image, net.store().device())?.unsqueeze(0)?;
    let pred = net.detect(&x)?.into_iter().next().ok_or_else(|| anyhow!("no prediction for {id} ({w}x{h})"))?;
    Ok(pred)
}
