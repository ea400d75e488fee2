//! `swinpg`: train, enhance, evaluate, simulate and gradcheck workflows.
//!
//! Machine-readable output goes to stdout as JSON lines; diagnostics go to
//! stderr. Exit codes: 1 usage, 2 config, 3 IO, 4 numerical or contract.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use swinpg::data::image::{resize_bilinear, rgb8_to_unit, signed_to_unit, unit_to_rgb8, unit_to_signed};
use swinpg::data::ppm::{read_ppm, write_ppm};
use swinpg::metrics::report::{evaluate_dataset, Baseline, Enhancer};
use swinpg::tensor::gradcheck::{gradcheck, OPS};
use swinpg::train::{train_epoch, TrainingState};
use swinpg::{Error, Result};

use config::{architecture_mismatch, RunConfig, Source};

#[derive(Parser)]
#[command(
    name = "swinpg",
    version,
    about = "Underwater image enhancement with a Swin-UNet generator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, writing a checkpoint and one JSON line per epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Enhance one PPM image.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Reject the checkpoint unless its architecture matches this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a checkpoint or a baseline on the held-out pairs.
    Evaluate {
        /// Required unless a baseline is given.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        /// Defaults to `output.report_path`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write the simulated training pairs as `<id>_A.ppm` / `<id>_B.ppm`.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks, three seeds per op.
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Identity,
    Histeq,
}

const SEEDS: u64 = 3;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Lookup { .. } => 2,
        Error::Io { .. } | Error::Ppm { .. } | Error::Checkpoint(_) | Error::Pairing(_) | Error::Json(_) => 3,
        Error::Dimension(_) | Error::Contract(_) | Error::DegenerateBatch(_) | Error::MissingGradient(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("swinpg: {}", line.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Train { config, resume } => train(&config, resume.as_deref()),
        Command::Enhance {
            ckpt,
            input,
            output,
            config,
        } => enhance(&ckpt, &input, &output, config.as_deref()),
        Command::Evaluate {
            ckpt,
            config,
            baseline,
            report,
        } => evaluate(ckpt.as_deref(), &config, baseline, report.as_deref()),
        Command::Simulate { config, out } => simulate(&config, &out),
        Command::Gradcheck { op } => match op.as_deref() {
            Some(op) if !OPS.contains(&op) => {
                eprintln!("swinpg: unknown op `{op}` (known: {})", OPS.join(", "));
                return ExitCode::from(1);
            }
            op => run_gradcheck(op),
        },
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("swinpg: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_checked(ckpt: &Path, cfg: Option<&RunConfig>) -> Result<TrainingState> {
    let state = TrainingState::load(ckpt)?;
    if let Some(cfg) = cfg {
        let diffs = architecture_mismatch(&cfg.model, &state.config);
        if !diffs.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint {} does not match the config: {}",
                ckpt.display(),
                diffs.join("; ")
            )));
        }
    }
    Ok(state)
}

fn train(config: &Path, resume: Option<&Path>) -> Result<u8> {
    let cfg = RunConfig::load(config)?;
    let mut state = match resume {
        Some(path) => {
            let state = load_checked(path, Some(&cfg))?;
            if state.config.use_discriminator != cfg.model.use_discriminator {
                return Err(Error::Config(format!(
                    "checkpoint {} has use_discriminator {} but the config says {}",
                    path.display(),
                    state.config.use_discriminator,
                    cfg.model.use_discriminator
                )));
            }
            state
        }
        None => TrainingState::new(&cfg.model, cfg.adam())?,
    };
    let pairs = cfg.training_pairs()?;
    let path = &cfg.output.checkpoint_path;
    while state.epoch < cfg.training.epochs {
        let summary = train_epoch(&mut state, &pairs, cfg.training.batch_size)?;
        let finite = summary.loss_g.is_finite() && summary.l1.is_finite() && summary.loss_d.is_none_or(f32::is_finite);
        if !finite {
            return Err(Error::Contract(format!("non-finite loss in epoch {}", summary.epoch)));
        }
        state.save(path)?;
        println!("{}", serde_json::to_string(&summary)?);
    }
    Ok(0)
}

fn enhance(ckpt: &Path, input: &Path, output: &Path, config: Option<&Path>) -> Result<u8> {
    let cfg = config.map(RunConfig::load).transpose()?;
    let mut state = load_checked(ckpt, cfg.as_ref())?;
    let size = state.config.input_size;
    let image = rgb8_to_unit(&read_ppm(input)?);
    let x = unit_to_signed(&resize_bilinear(&image, size, size)?).reshape([1, 3, size, size])?;
    let y = state.generator.enhance(&x)?.reshape([3, size, size])?;
    write_ppm(&unit_to_rgb8(&signed_to_unit(&y))?, output)?;
    println!("{}", json!({ "input": input, "output": output, "size": size }));
    Ok(0)
}

fn evaluate(ckpt: Option<&Path>, config: &Path, baseline: Option<BaselineArg>, report: Option<&Path>) -> Result<u8> {
    let cfg = RunConfig::load(config)?;
    let pairs = cfg.evaluation_pairs()?;
    let mut state;
    let enhancer = match (baseline, ckpt) {
        (Some(BaselineArg::Identity), _) => Enhancer::Baseline(Baseline::Identity),
        (Some(BaselineArg::Histeq), _) => Enhancer::Baseline(Baseline::Histeq),
        (None, Some(ckpt)) => {
            state = load_checked(ckpt, Some(&cfg))?;
            Enhancer::Model(&mut state.generator)
        }
        (None, None) => return Err(Error::Config("evaluate needs --ckpt or --baseline".into())),
    };
    let result = evaluate_dataset(enhancer, &pairs, &cfg.digest())?;
    let path = report.unwrap_or(&cfg.output.report_path);
    let text = serde_json::to_string_pretty(&result)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    let mut line = serde_json::to_value(&result.aggregate)?;
    line["baseline"] = serde_json::to_value(result.baseline)?;
    line["images"] = result.images.len().into();
    println!("{line}");
    Ok(0)
}

fn simulate(config: &Path, out: &Path) -> Result<u8> {
    let cfg = RunConfig::load(config)?;
    if cfg.data.source != Source::Simulated {
        return Err(Error::Config("simulate needs data.source = \"simulated\"".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_owned(),
        source: e,
    })?;
    let pairs = cfg.training_pairs()?;
    let mut manifest = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let (a, b) = (format!("{}_A.ppm", p.id), format!("{}_B.ppm", p.id));
        write_ppm(&unit_to_rgb8(&signed_to_unit(&p.degraded))?, &out.join(&a))?;
        write_ppm(&unit_to_rgb8(&signed_to_unit(&p.reference))?, &out.join(&b))?;
        manifest.push(json!({ "a": a, "b": b }));
    }
    // lets the folder be read back as a paired dataset
    let path = out.join(swinpg::data::euvp::MANIFEST);
    let text = serde_json::to_string_pretty(&json!({ "pairs": manifest }))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::Io { path, source: e })?;
    println!("{}", json!({ "out": out, "pairs": pairs.len() }));
    Ok(0)
}

fn run_gradcheck(only: Option<&str>) -> Result<u8> {
    let mut all = true;
    for &op in OPS.iter().filter(|o| only.is_none_or(|x| x == **o)) {
        let mut worst = None;
        for seed in 0..SEEDS {
            let r = gradcheck(op, seed)?;
            if worst
                .as_ref()
                .is_none_or(|w: &swinpg::tensor::gradcheck::GradCheckReport| r.max_rel_error > w.max_rel_error)
            {
                worst = Some(r);
            }
        }
        let r = worst.expect("at least one seed");
        all &= r.passed;
        println!("{}", serde_json::to_string(&r)?);
    }
    Ok(if all { 0 } else { 4 })
}
