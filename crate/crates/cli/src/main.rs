use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use bimii_core::ccnn::scalar_trajectory;
use bimii_core::checkpoint::{config_sidecar, Checkpoint};
use bimii_core::config::RunConfig;
use bimii_core::data::{
    colorize, label_image, read_image_pair, read_image_pair_sized, resize_labels, write_synthetic_dataset, SceneSample,
    SynthConfig,
};
use bimii_core::gradsuite::{self, CheckModule, TOLERANCE_F32, TOLERANCE_F64};
use bimii_core::supervision::LabelMap;
use bimii_core::train::{eval_t_steps, evaluate, load_model, load_split, predict, train, THREADS_ENV};
use bimii_core::CcnnConfig;

#[derive(Parser)]
#[command(name = "bimii", version, about = "RGB-thermal semantic segmentation with coupled neural dynamics")]
#[command(after_help = "Set BIMII_THREADS to cap worker threads.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-stage training; checkpoints go to `train.out_dir`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `train.out_dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Per-class accuracy and IoU of a checkpoint on one split, as CSV.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the time steps of the last trained stage.
        #[arg(long)]
        t_steps: Option<usize>,
    },
    /// Segments one RGB-thermal pair into a palette PNG and a label-id PNG.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        thermal: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the config written next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of the network modules.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, value_enum, default_value = "64")]
        precision: Precision,
    },
    /// Writes a synthetic directory dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Takes image size, class count and night fraction from a run config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Dumps the trajectory of a single CCNN neuron under constant drive.
    Dynamics {
        #[arg(long, default_value_t = 20)]
        t_steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        drive: f64,
        /// Self-feedback weight.
        #[arg(long, default_value_t = 0.1)]
        feedback: f64,
        /// Self-linking weight.
        #[arg(long, default_value_t = 0.1)]
        linking: f64,
        /// Takes the neuron constants from a run config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(config: &Path, resume: Option<&Path>, out_dir: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    let samples = load_split(&cfg, "train")?;
    let resume = resume.map(load_checkpoint).transpose()?;
    info!("training on {} samples", samples.len());
    let out = train::<f32>(&cfg, &samples, resume.as_ref(), Some(&cfg.out_dir), &mut |l| println!("{}", l.line()))?;
    for p in &out.checkpoints {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

fn cmd_eval(config: &Path, checkpoint: &Path, split: &str, out: &Path, t_steps: Option<usize>) -> Result<()> {
    let cfg = load_config(config)?;
    let (net, store) = load_model::<f32>(&cfg, &load_checkpoint(checkpoint)?)?;
    let samples = load_split(&cfg, split)?;
    let t = t_steps.unwrap_or_else(|| eval_t_steps(&cfg));
    let report = evaluate(&net, &store, &samples, t, cfg.model.n_classes)?;
    write(out, report.to_csv())?;
    println!("{split}: {} samples, T={t}, mAcc {:.4}, mIoU {:.4}", samples.len(), report.macc, report.miou);
    Ok(())
}

/// `out.png` -> `out.labels.png`
fn labels_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("prediction");
    out.with_file_name(format!("{stem}.labels.png"))
}

fn cmd_infer(checkpoint: &Path, rgb: &Path, thermal: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let config = config.map_or_else(|| config_sidecar(checkpoint), Path::to_path_buf);
    let cfg = load_config(&config)?;
    let (net, store) = load_model::<f32>(&cfg, &load_checkpoint(checkpoint)?)?;
    let (h0, w0, _, _) = read_image_pair(rgb, thermal)?;
    let (h, w) = (cfg.model.height, cfg.model.width);
    let (_, _, rgb_px, th_px) = read_image_pair_sized(rgb, thermal, Some((h, w)))?;
    let sample = SceneSample {
        height: h,
        width: w,
        rgb: rgb_px,
        thermal: th_px,
        labels: LabelMap::filled(h, w, 0),
        night: false,
    };
    let labels = resize_labels(&predict(&net, &store, &sample, eval_t_steps(&cfg))?, h0, w0)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    colorize(&labels).save(out).with_context(|| format!("writing {}", out.display()))?;
    let raw = labels_path(out);
    label_image(&labels).save(&raw).with_context(|| format!("writing {}", raw.display()))?;
    println!("wrote {} and {}", out.display(), raw.display());
    Ok(())
}

fn cmd_gradcheck(module: &str, precision: Precision) -> Result<bool> {
    let modules = if module == "all" {
        CheckModule::ALL.to_vec()
    } else {
        vec![module.parse::<CheckModule>()?]
    };
    let (checks, tol) = match precision {
        Precision::F64 => (gradsuite::run::<f64>(&modules)?, TOLERANCE_F64),
        Precision::F32 => (gradsuite::run::<f32>(&modules)?, TOLERANCE_F32),
    };
    let mut ok = true;
    for c in &checks {
        let pass = c.report.passes(tol);
        ok &= pass;
        let worst = c
            .report
            .worst
            .as_ref()
            .map_or_else(String::new, |(n, i)| format!(" worst {n}[{i}]"));
        println!(
            "{:<6} {} max rel err {:.3e} over {} coordinates{worst} ({:.1}s)",
            c.module,
            if pass { "PASS" } else { "FAIL" },
            c.report.max_rel_error,
            c.report.coordinates,
            c.seconds
        );
    }
    println!("tolerance {tol:e}: {}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn cmd_synth(out: &Path, count: usize, seed: u64, config: Option<&Path>) -> Result<()> {
    let synth = match config {
        Some(p) => load_config(p)?.synth(),
        None => SynthConfig::default(),
    };
    let names = write_synthetic_dataset(out, count, seed, &synth)?;
    println!("wrote {} samples to {}", names.len(), out.display());
    Ok(())
}

fn cmd_dynamics(t_steps: usize, out: &Path, drive: f64, feedback: f64, linking: f64, config: Option<&Path>) -> Result<()> {
    if t_steps == 0 {
        bail!("--t-steps must be positive");
    }
    let ccnn = match config {
        Some(p) => load_config(p)?.model.ccnn,
        None => CcnnConfig::default(),
    };
    let mut csv = String::from("n,f,l,u,e,y\n");
    for p in scalar_trajectory(&ccnn, drive, feedback, linking, t_steps)? {
        csv.push_str(&format!("{},{:.9},{:.9},{:.9},{:.9},{:.9}\n", p.n, p.f, p.l, p.u, p.e, p.y));
    }
    write(out, csv)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, resume, out_dir } => cmd_train(&config, resume.as_deref(), out_dir)?,
        Command::Eval {
            config,
            checkpoint,
            split,
            out,
            t_steps,
        } => cmd_eval(&config, &checkpoint, &split, &out, t_steps)?,
        Command::Infer {
            checkpoint,
            rgb,
            thermal,
            out,
            config,
        } => cmd_infer(&checkpoint, &rgb, &thermal, &out, config.as_deref())?,
        Command::Gradcheck { module, precision } => return cmd_gradcheck(&module, precision),
        Command::Synth { out, count, seed, config } => cmd_synth(&out, count, seed, config.as_deref())?,
        Command::Dynamics {
            t_steps,
            out,
            drive,
            feedback,
            linking,
            config,
        } => cmd_dynamics(t_steps, &out, drive, feedback, linking, config.as_deref())?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        info!("{THREADS_ENV}={v}");
    }
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
