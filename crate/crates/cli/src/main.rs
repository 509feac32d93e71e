mod config;
mod frames;
mod report;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use uadt_core::container::canonical_json;
use uadt_core::dit::{lora_apply, lora_merge, Model};
use uadt_core::flow_match::{probe_loss, train, SampleConfig, TrainConfig, TrainExample};
use uadt_core::grad_suite::{run_suite, GRAD_TOLERANCE};
use uadt_core::long_video::{animate_long, plan_windows, DEFAULT_DISCARD};
use uadt_core::latent_codec::temporal_layout;
use uadt_core::media::load_ppm;
use uadt_core::pose_kit::{load_pose_sequence, Dataset, PoseSequence};
use uadt_core::{Error, Result};

use config::RunConfig;
use report::{build_report, ReportOptions};

#[derive(Parser)]
#[command(name = "uadt", version, about = "Pose-driven image animation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of moving-disc clips.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        clips: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Canvas as HxW.
        #[arg(long, default_value = "32x32", value_parser = parse_size)]
        size: [usize; 2],
        #[arg(long, default_value_t = 17)]
        frames: usize,
        #[arg(long, default_value_t = 6.0)]
        radius: f64,
    },
    /// Train from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Animate a reference image with a pose sequence in one window.
    Animate {
        #[command(flatten)]
        args: AnimateArgs,
    },
    /// Animate an arbitrarily long pose sequence with sliding windows.
    AnimateLong {
        #[command(flatten)]
        args: AnimateArgs,
        /// Window length in latent frames.
        #[arg(long)]
        window: usize,
        #[arg(long, default_value_t = DEFAULT_DISCARD)]
        discard: usize,
    },
    /// Run the finite-difference gradient suite.
    CheckGrads {
        /// First seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds.
        #[arg(long, default_value_t = uadt_core::grad_suite::DEFAULT_SEEDS)]
        seeds: u64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print the sliding-window plan for a latent timeline.
    PlanWindows {
        #[arg(long)]
        latent_frames: usize,
        #[arg(long)]
        window: usize,
        #[arg(long, default_value_t = DEFAULT_DISCARD)]
        discard: usize,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset with the measurement oracle.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Only the first N clips.
        #[arg(long)]
        clips: Option<usize>,
        /// Window for the long-video check; defaults to the clip length in latent frames.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_DISCARD)]
        discard: usize,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct AnimateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reference image (binary PPM).
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Driving pose sequence (JSON).
    #[arg(long)]
    poses: PathBuf,
    /// Pose of the reference image; defaults to the first driving pose.
    #[arg(long)]
    ref_pose: Option<PathBuf>,
    /// Required number of driving frames; the pose file must cover it.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<[usize; 2], String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok([parse(h)?, parse(w)?])
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// `UADT_THREADS` caps parallelism; compute runs on one thread, so it is
/// only validated.
fn check_threads_env() -> Result<()> {
    match std::env::var("UADT_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(Error::config(format!("UADT_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(()),
    }
}

fn gen_data(out: &Path, clips: usize, seed: u64, size: [usize; 2], frames: usize, radius: f64) -> Result<()> {
    let ds = Dataset::generate(out, clips, seed, size, frames, radius)?;
    println!(
        "wrote {} clips of {} frames at {}x{} to {}",
        ds.clips.len(),
        frames,
        size[0],
        size[1],
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct StageSummary {
    stage: String,
    steps: usize,
    probe_before: f64,
    probe_after: f64,
    first_loss: Option<f64>,
    last_loss: Option<f64>,
}

#[derive(Serialize)]
struct TrainSummary {
    config: RunConfig,
    stages: Vec<StageSummary>,
    merged_layers: usize,
    checkpoint: String,
}

fn run_train(config_path: &Path) -> Result<()> {
    let written = RunConfig::load_as_written(config_path)?;
    let cfg = written.resolved(config_path);
    let dataset = Dataset::load(&cfg.dataset)?;
    let data = dataset
        .clips
        .iter()
        .map(|c| TrainExample::from_clip(c, &cfg.model))
        .collect::<Result<Vec<_>>>()?;
    let mut model = match &cfg.init {
        Some(path) => {
            let m = Model::load(path)?;
            if m.config != cfg.model {
                return Err(Error::config(format!(
                    "{} was built with a different [model] config",
                    path.display()
                )));
            }
            m
        }
        None => Model::new(cfg.model.clone(), cfg.seed)?,
    };
    let mut csv = String::from("stage,step,loss\n");
    let mut stages = Vec::new();
    let mut run_stage = |model: &mut Model, name: &str, tc: &TrainConfig| -> Result<()> {
        let before = probe_loss(model, &data, cfg.probe_times, cfg.seed, tc.use_pose)?;
        let log = train(model, &data, tc, |step, loss| {
            if (step + 1) % 100 == 0 || step + 1 == tc.steps {
                eprintln!("[{name}] step {}/{} loss {loss:.5}", step + 1, tc.steps);
            }
        })
        .map_err(|e| e.context(format!("stage {name}")))?;
        for (i, l) in log.losses.iter().enumerate() {
            let _ = writeln!(csv, "{name},{i},{l:e}");
        }
        let after = probe_loss(model, &data, cfg.probe_times, cfg.seed, tc.use_pose)?;
        println!("{name}: {} steps, probe loss {before:.5} -> {after:.5}", tc.steps);
        stages.push(StageSummary {
            stage: name.to_string(),
            steps: tc.steps,
            probe_before: before,
            probe_after: after,
            first_loss: log.initial(),
            last_loss: log.final_loss(),
        });
        Ok(())
    };
    if let Some(pre) = &cfg.pretrain {
        let pre = TrainConfig {
            use_pose: false,
            ..pre.clone()
        };
        run_stage(&mut model, "pretrain", &pre)?;
    }
    if let Some(lc) = &cfg.lora {
        let census = lora_apply(&mut model, lc, cfg.seed.wrapping_add(1))?;
        println!(
            "lora: {} adapters, {} adapter params, {} trainable / {} frozen",
            census.adapters.len(),
            census.adapter_params,
            census.trainable_params,
            census.frozen_params
        );
    }
    run_stage(&mut model, "train", &cfg.train)?;
    let merged_layers = if cfg.merge { lora_merge(&mut model)? } else { 0 };
    std::fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    let ckpt = cfg.output.join("model.uadt");
    model.save(&ckpt)?;
    write_text(&cfg.output.join("loss.csv"), &csv)?;
    write_json(
        &cfg.output.join("train.json"),
        &TrainSummary {
            config: written,
            stages,
            merged_layers,
            checkpoint: "model.uadt".to_string(),
        },
    )?;
    println!("saved {}", ckpt.display());
    Ok(())
}

struct AnimateInputs {
    model: Model,
    reference: uadt_core::numerics::Tensor,
    reference_pose: PoseSequence,
    poses: PoseSequence,
}

fn load_animate_inputs(args: &AnimateArgs) -> Result<AnimateInputs> {
    let model = Model::load(&args.checkpoint)?;
    let reference = load_ppm(&args.reference)?;
    let mut poses = load_pose_sequence(&args.poses)?;
    if let Some(need) = args.frames {
        temporal_layout(need)?;
        if poses.len() < need {
            return Err(Error::validation(format!(
                "{}: pose file has {} frames, expected {need}",
                args.poses.display(),
                poses.len()
            )));
        }
        poses = poses.slice(0, need)?;
    } else {
        temporal_layout(poses.len()).map_err(|e| e.context(args.poses.display().to_string()))?;
    }
    let reference_pose = match &args.ref_pose {
        Some(p) => load_pose_sequence(p)?,
        None => poses.slice(0, 1)?,
    };
    Ok(AnimateInputs {
        model,
        reference,
        reference_pose,
        poses,
    })
}

fn run_animate(args: &AnimateArgs, window: Option<(usize, usize)>) -> Result<()> {
    let inp = load_animate_inputs(args)?;
    let total = temporal_layout(inp.poses.len())?;
    let (window, discard) = window.unwrap_or((total, DEFAULT_DISCARD.min(total.saturating_sub(1))));
    let sample = SampleConfig {
        steps: args.steps,
        seed: args.seed,
    };
    let out = animate_long(&inp.model, &inp.reference, &inp.reference_pose, &inp.poses, window, discard, &sample)?;
    out.video.check_finite("generated video")?;
    let written = frames::write_video(&out.video, &args.out)?;
    write_json(&args.out.join("plan.json"), &out.plan)?;
    println!(
        "wrote {} frames ({} windows) to {}",
        out.video.shape()[1],
        out.plan.windows.len(),
        args.out.display()
    );
    if written.is_empty() {
        return Err(Error::validation("no frames written"));
    }
    Ok(())
}

#[derive(Serialize)]
struct GradSummary {
    seeds: Vec<u64>,
    tolerance: f64,
    worst: f64,
    passed: bool,
    seconds: f64,
    cases: Vec<uadt_core::grad_suite::GradCase>,
}

fn run_check_grads(seed: u64, seeds: u64, json: Option<&Path>) -> Result<()> {
    let seed_list: Vec<u64> = (seed..seed + seeds).collect();
    let report = run_suite(seed_list.iter().copied(), |c| {
        if !c.passed {
            eprintln!("FAIL {} seed {}: {:.3e}", c.name, c.seed, c.max_relative_error);
        }
    })?;
    let mut by_case: Vec<(String, f64, bool)> = Vec::new();
    for c in &report.cases {
        match by_case.iter_mut().find(|(n, _, _)| *n == c.name) {
            Some(e) => {
                e.1 = e.1.max(c.max_relative_error);
                e.2 &= c.passed;
            }
            None => by_case.push((c.name.clone(), c.max_relative_error, c.passed)),
        }
    }
    println!("case                  max_rel_err  status");
    for (name, err, ok) in &by_case {
        println!("{name:<20}  {err:>11.3e}  {}", if *ok { "PASS" } else { "FAIL" });
    }
    println!(
        "{} cases x {} seeds, worst {:.3e}, {:.1}s: {}",
        by_case.len(),
        seeds,
        report.worst,
        report.seconds,
        if report.passed { "PASS" } else { "FAIL" }
    );
    if let Some(path) = json {
        write_json(
            path,
            &GradSummary {
                seeds: seed_list,
                tolerance: GRAD_TOLERANCE,
                worst: report.worst,
                passed: report.passed,
                seconds: report.seconds,
                cases: report.cases.clone(),
            },
        )?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(Error::numerical(format!(
            "gradient check failed: worst relative error {:.3e} >= {GRAD_TOLERANCE:e}",
            report.worst
        )))
    }
}

fn run(cli: Cli) -> Result<()> {
    check_threads_env()?;
    match cli.command {
        Command::GenData {
            out,
            clips,
            seed,
            size,
            frames,
            radius,
        } => gen_data(&out, clips, seed, size, frames, radius),
        Command::Train { config } => run_train(&config),
        Command::Animate { args } => run_animate(&args, None),
        Command::AnimateLong { args, window, discard } => run_animate(&args, Some((window, discard))),
        Command::CheckGrads { seed, seeds, json } => run_check_grads(seed, seeds, json.as_deref()),
        Command::PlanWindows {
            latent_frames,
            window,
            discard,
            json,
        } => {
            let plan = plan_windows(latent_frames, window, discard)?;
            print!("{}", plan.table());
            if let Some(path) = json {
                write_json(&path, &plan)?;
            }
            Ok(())
        }
        Command::Report {
            checkpoint,
            dataset,
            clips,
            window,
            discard,
            steps,
            seed,
            out,
        } => {
            let model = Model::load(&checkpoint)?;
            let dataset = Dataset::load(&dataset)?;
            let opts = ReportOptions {
                clips,
                window,
                discard,
                sample: SampleConfig { steps, seed },
            };
            let report = build_report(&model, &dataset, &opts)?;
            print!("{}", report.table());
            write_json(&out, &report)?;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    kind: &'a str,
    message: String,
}

fn kind(e: &Error) -> &'static str {
    match e.root() {
        Error::Shape(_) => "shape",
        Error::Config(_) => "config",
        Error::Validation(_) => "validation",
        Error::Numerical(_) => "numerical",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
        Error::Context { .. } => unreachable!("root skips context"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = ErrorReport {
                error: "uadt",
                kind: kind(&e),
                message: e.to_string(),
            };
            eprintln!("{}", canonical_json(&report).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
