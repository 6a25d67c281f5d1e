//! Command-line entry point: synthetic data generation, training,
//! inference, evaluation, and feature dumps.
//!
//! Exit codes: 0 success, 1 argument/validation error, 2 I/O error.

use clap::{Args, Parser, Subcommand};
use rppg::error::{Error, Result};
use rppg::models::{load_checkpoint, save_checkpoint, CheckpointMeta, ModelConfig, PulseNet, VariantKind, VideoClip};
use rppg::pulse::PulseSignal;
use rppg::synth::{make_dataset, DatasetSpec, MaskKind, SynthSpec};
use rppg::tensor::Tensor;
use rppg::train::{train, LossKind, TrainConfig, TrainExample};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "rppg", about = "Remote photoplethysmography from video", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pulse-video dataset
    SynthGen(SynthGenArgs),
    /// Train a model on a dataset manifest
    Train(TrainArgs),
    /// Recover the pulse signal from one clip
    Infer(InferArgs),
    /// Evaluate a checkpoint against ground truth
    Eval(EvalArgs),
    /// Dump an intermediate feature map
    DumpFeatures(DumpArgs),
}

#[derive(Args)]
struct SynthGenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    clips: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 60.0)]
    hr_min: f64,
    #[arg(long, default_value_t = 120.0)]
    hr_max: f64,
    #[arg(long, default_value_t = 64)]
    frames: usize,
    /// Frame size as HxW, e.g. 64x64
    #[arg(long, default_value = "64x64")]
    size: String,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    /// Fractional pulse color modulation
    #[arg(long, default_value_t = 0.01)]
    amp: f64,
    /// Per-clip amplitude spread as a fraction of --amp (in [0,1))
    #[arg(long, default_value_t = 0.0)]
    amp_jitter: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    illum: f64,
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Skin mask: ellipse or half-frame
    #[arg(long, default_value = "ellipse")]
    mask: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest JSON
    #[arg(long)]
    data: PathBuf,
    /// 2dcnn | 3dcnn | 3dcnn-ed | lstm | bilstm | convlstm
    #[arg(long, default_value = "3dcnn")]
    variant: String,
    /// Trunk width override (all four blocks at this channel count)
    #[arg(long)]
    width: Option<usize>,
    /// Truncate training clips to this many frames
    #[arg(long)]
    clip_len: Option<usize>,
    /// Optional JSON file of training defaults (flags override it)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// negpea | mse
    #[arg(long)]
    loss: Option<String>,
    /// Train only on this manifest split (train | test); default all clips
    #[arg(long)]
    split: Option<String>,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Loss CSV path (default: <out>.loss.csv)
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Directory for per-epoch checkpoints (default: none)
    #[arg(long)]
    epoch_dir: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Clip tensor file [3,T,H,W]
    #[arg(long)]
    clip: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    /// Output signal CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate only this split (train | test); default all clips
    #[arg(long)]
    split: Option<String>,
    /// Output report JSON
    #[arg(long)]
    out: PathBuf,
    /// Optional per-clip CSV
    #[arg(long)]
    per_clip_csv: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    clip: PathBuf,
    /// Stage index (0-based; trunk blocks then decoder stages)
    #[arg(long)]
    stage: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| Error::invalid(format!("size '{s}' is not HxW")))?;
    Ok((
        h.parse().map_err(|_| Error::invalid(format!("bad height '{h}'")))?,
        w.parse().map_err(|_| Error::invalid(format!("bad width '{w}'")))?,
    ))
}

fn run_synth_gen(a: SynthGenArgs) -> Result<()> {
    if a.clips == 0 {
        return Err(Error::invalid("--clips must be >= 1"));
    }
    let (height, width) = parse_size(&a.size)?;
    let mask = match a.mask.as_str() {
        "ellipse" => MaskKind::Ellipse,
        "half-frame" => MaskKind::HalfFrame,
        other => return Err(Error::invalid(format!("unknown mask '{other}'"))),
    };
    let spec = DatasetSpec {
        clips: a.clips,
        hr_min: a.hr_min,
        hr_max: a.hr_max,
        seed: a.seed,
        amp_jitter: a.amp_jitter,
        base: SynthSpec {
            seed: a.seed,
            frames: a.frames,
            height,
            width,
            fps: a.fps,
            amp: a.amp,
            noise_sigma: a.noise,
            illum_amp: a.illum,
            jitter_amp: a.jitter,
            mask,
            ..SynthSpec::default()
        },
    };
    let manifest = make_dataset(&spec, &a.out)?;
    eprintln!(
        "wrote {} clips ({} train / {} test) to {}",
        manifest.clips.len(),
        manifest.clips.iter().filter(|c| c.split == "train").count(),
        manifest.clips.iter().filter(|c| c.split == "test").count(),
        a.out.display()
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let kind: VariantKind = a.variant.parse()?;
    let mut cfg: TrainConfig = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.display().to_string(),
                reason: format!("bad train config: {e}"),
            })?
        }
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(b) = a.batch {
        cfg.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(l) = &a.loss {
        cfg.loss = l.parse::<LossKind>()?;
    }
    if cfg.lr <= 0.0 {
        return Err(Error::invalid("learning rate must be positive"));
    }

    let clips = rppg::synth::load_dataset(&a.data, a.split.as_deref())?;
    let mut data = Vec::with_capacity(clips.len());
    for c in clips {
        let (frames, signal) = match a.clip_len {
            Some(t) => {
                let s = c.clip.frames.shape();
                if t == 0 || t > s[1] {
                    return Err(Error::invalid(format!(
                        "--clip-len {t} invalid for clips of {} frames",
                        s[1]
                    )));
                }
                let hw = s[2] * s[3];
                let mut out = Vec::with_capacity(3 * t * hw);
                for ch in 0..3 {
                    let base = ch * s[1] * hw;
                    out.extend_from_slice(&c.clip.frames.data()[base..base + t * hw]);
                }
                (
                    Tensor::new(vec![3, t, s[2], s[3]], out)?,
                    PulseSignal::new(c.signal.samples[..t].to_vec(), c.signal.rate)?,
                )
            }
            None => (c.clip.frames.clone(), c.signal.clone()),
        };
        data.push(TrainExample {
            clip: VideoClip::new(frames, c.clip.fps)?,
            target: signal,
        });
    }

    let config = match a.width {
        Some(w) => ModelConfig::with_width(kind, w),
        None => ModelConfig::new(kind),
    };
    let mut model = PulseNet::<f32>::new(config, cfg.seed);
    eprintln!(
        "training {kind} ({} params) on {} clips: {} epochs, lr {}, batch {}",
        model.param_count(),
        data.len(),
        cfg.epochs,
        cfg.lr,
        cfg.batch_size
    );
    let report = train(
        &mut model,
        &data,
        &cfg,
        a.epoch_dir.as_deref(),
        |epoch, loss| eprintln!("epoch {:3}  mean loss {loss:.6}", epoch + 1),
    )?;
    save_checkpoint(
        &model,
        CheckpointMeta {
            seed: cfg.seed,
            epoch: cfg.epochs,
        },
        &a.out,
    )?;
    let csv_path = a
        .loss_csv
        .unwrap_or_else(|| a.out.with_extension("loss.csv"));
    report.save_csv(&csv_path)?;
    eprintln!("checkpoint: {}; losses: {}", a.out.display(), csv_path.display());
    Ok(())
}

fn run_infer(a: InferArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.ckpt)?;
    let frames = Tensor::load(&a.clip)?;
    let clip = VideoClip::new(frames, a.fps)?;
    let signal = model.forward(&clip)?;
    signal.save_csv(&a.out)?;
    eprintln!("wrote {} samples to {}", signal.len(), a.out.display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.ckpt)?;
    let clips = rppg::synth::load_dataset(&a.data, a.split.as_deref())?;
    let pairs: Vec<(VideoClip, PulseSignal)> = clips
        .into_iter()
        .map(|c| (c.clip, c.signal))
        .collect();
    let report = rppg::eval::evaluate(&model, &pairs, |msg| eprintln!("{msg}"))?;
    std::fs::write(&a.out, report.to_json()?)?;
    if let Some(csv) = &a.per_clip_csv {
        let mut f = std::io::BufWriter::new(std::fs::File::create(csv)?);
        report.write_per_clip_csv(&mut f)?;
    }
    eprintln!(
        "evaluated {} clips ({} excluded): HR MAE {:.3} bpm, R {:.3} -> {}",
        report.clip_count,
        report.excluded.len(),
        report.hr.mae,
        report.hr.r,
        a.out.display()
    );
    Ok(())
}

fn run_dump(a: DumpArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.ckpt)?;
    let frames = Tensor::load(&a.clip)?;
    let features = model.dump_features(&frames, a.stage)?;
    features.save(&a.out)?;
    eprintln!(
        "stage {} features {:?} -> {}",
        a.stage,
        features.shape(),
        a.out.display()
    );
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit(); // exit 0
            }
            eprintln!("{e}");
            std::process::exit(1);
        }
    };
    let result = match cli.command {
        Command::SynthGen(a) => run_synth_gen(a),
        Command::Train(a) => run_train(a),
        Command::Infer(a) => run_infer(a),
        Command::Eval(a) => run_eval(a),
        Command::DumpFeatures(a) => run_dump(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
