//! Command-line front end: dataset generation, training, sampling,
//! evaluation, ablation grids, and a built-in self-check.
//!
//! Exit codes: 0 success, 1 validation or runtime failure, 2 usage error
//! (including inputs that point at nothing).

mod checks;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vidit_core::datagen::io::{read_dataset, read_record_file, write_dataset, write_record_file};
use vidit_core::datagen::quantize;
use vidit_core::harness::{ablate, checkpoint, config, eval};
use vidit_core::{
    euler_sample, fit, make_sample, Axis, Checkpoint, EvalOptions, GeomParams, ModelConfig, Rng,
    SampleConfig, TaskKind, TrainConfig, TrainSample,
};

#[derive(Parser)]
#[command(
    name = "vidit",
    version,
    about = "Desk-scale unified video generation and editing"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural dataset of task-tagged samples.
    GenData {
        /// Comma-separated task names (default: every task).
        #[arg(long)]
        tasks: Option<String>,
        /// Samples per task.
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
    },
    /// Train on a dataset and write a checkpoint.
    Train {
        /// Dataset directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        /// `key = value` run configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a video from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Build the input unit with this task's generator.
        #[arg(long, conflicts_with = "vcu_file")]
        task: Option<String>,
        /// Read the input unit from a standalone record file.
        #[arg(long)]
        vcu_file: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Euler integration steps.
        #[arg(long, default_value_t = 40)]
        steps: usize,
        /// Guidance scale.
        #[arg(long, default_value_t = 3.0)]
        guide: f64,
        /// Output record file holding the sampled video.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
    },
    /// Evaluate a checkpoint on a dataset and write the report table.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output TSV path.
        #[arg(long)]
        out: PathBuf,
        /// Euler steps for the sampled-output metrics.
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        guide: f64,
    },
    /// Train every arm of one design axis and write the comparison table.
    Ablate {
        /// structure | placement | decouple | shift | pzero
        #[arg(long)]
        axis: String,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "0")]
        seeds: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output TSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant and gradient suite.
    Check,
}

enum Failure {
    Usage(String),
    Run(String),
}

type CliResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn fail(e: vidit_core::Error) -> Failure {
    Failure::Run(e.to_string())
}

fn require_exists(what: &str, path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Cmd) -> CliResult {
    match cmd {
        Cmd::GenData {
            tasks,
            count,
            seed,
            out,
            frames,
            height,
            width,
        } => gen_data(tasks, count, seed, &out, frames, height, width),
        Cmd::Train {
            data,
            config,
            steps,
            out,
        } => train(&data, config.as_deref(), steps, &out),
        Cmd::Sample {
            ckpt,
            task,
            vcu_file,
            seed,
            steps,
            guide,
            out,
            frames,
            height,
            width,
        } => sample(
            &ckpt,
            task,
            vcu_file,
            seed,
            steps,
            guide,
            &out,
            GeomParams {
                frames,
                height,
                width,
            },
        ),
        Cmd::Eval {
            ckpt,
            data,
            out,
            steps,
            guide,
        } => eval_cmd(&ckpt, &data, &out, steps, guide),
        Cmd::Ablate {
            axis,
            seeds,
            data,
            config,
            out,
        } => ablate_cmd(&axis, &seeds, &data, config.as_deref(), &out),
        Cmd::Check => check(),
    }
}

fn parse_tasks(tasks: Option<&str>) -> Result<Vec<TaskKind>, Failure> {
    match tasks {
        None => Ok(TaskKind::ALL.to_vec()),
        Some(list) => list
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<TaskKind>()
                    .map_err(|e| usage(e.to_string()))
            })
            .collect(),
    }
}

fn gen_data(
    tasks: Option<String>,
    count: usize,
    seed: u64,
    out: &Path,
    frames: usize,
    height: usize,
    width: usize,
) -> CliResult {
    let kinds = parse_tasks(tasks.as_deref())?;
    let geom = GeomParams {
        frames,
        height,
        width,
    };
    geom.validate().map_err(|e| usage(e.to_string()))?;
    let root = Rng::new(seed);
    let mut samples = Vec::with_capacity(kinds.len() * count);
    for &kind in &kinds {
        // the stream is keyed by the task's global index, so a subset
        // request reproduces the same samples as a full one
        let index = TaskKind::ALL.iter().position(|&k| k == kind).unwrap();
        let task_rng = root.split(index as u64);
        for i in 0..count {
            let sample_seed = task_rng.split(i as u64).state();
            samples.push(make_sample(kind, sample_seed, &geom).map_err(fail)?);
        }
    }
    write_dataset(&samples, out).map_err(fail)?;
    println!(
        "wrote {} samples ({} tasks x {count}) to {}",
        samples.len(),
        kinds.len(),
        out.display()
    );
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<(ModelConfig, TrainConfig), Failure> {
    match path {
        None => Ok((ModelConfig::default(), TrainConfig::default())),
        Some(p) => {
            require_exists("config file", p)?;
            let text =
                fs::read_to_string(p).map_err(|e| Failure::Run(format!("{}: {e}", p.display())))?;
            config::parse_config(&text).map_err(fail)
        }
    }
}

fn train(data: &Path, config: Option<&Path>, steps: Option<usize>, out: &Path) -> CliResult {
    require_exists("dataset", data)?;
    let (model_cfg, mut train_cfg) = load_config(config)?;
    if let Some(steps) = steps {
        train_cfg.steps = steps;
    }
    let dataset = read_dataset(data).map_err(fail)?;
    if dataset.is_empty() {
        return Err(Failure::Run(format!("dataset {} is empty", data.display())));
    }
    let result = fit(&model_cfg, &train_cfg, &dataset).map_err(fail)?;
    let ckpt = Checkpoint::from_state(&result.state, &model_cfg, &train_cfg);
    checkpoint::save(&ckpt, out).map_err(fail)?;
    println!(
        "trained {} steps on {} samples",
        result.state.step,
        dataset.len()
    );
    if let Some(point) = result.eval.last() {
        for (task, e) in &point.tasks {
            println!("  held-out {task}: {:.6} over {}", e.mean_loss, e.count);
        }
    }
    if !result.skipped.is_empty() {
        println!("  skipped {} invalid samples", result.skipped.len());
    }
    println!("checkpoint written to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample(
    ckpt_path: &Path,
    task: Option<String>,
    vcu_file: Option<PathBuf>,
    seed: u64,
    steps: usize,
    guide: f64,
    out: &Path,
    geom: GeomParams,
) -> CliResult {
    require_exists("checkpoint", ckpt_path)?;
    let ckpt = checkpoint::load(ckpt_path).map_err(fail)?;
    let vcu = match (task, vcu_file) {
        (Some(name), None) => {
            let kind: TaskKind = name.parse().map_err(|e: vidit_core::Error| usage(e.to_string()))?;
            make_sample(kind, seed, &geom).map_err(fail)?.vcu
        }
        (None, Some(path)) => {
            require_exists("unit file", &path)?;
            read_record_file(&path).map_err(fail)?.vcu
        }
        (None, None) => return Err(usage("one of --task or --vcu-file is required")),
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };
    let cfg = SampleConfig {
        steps,
        guide,
        seed,
        ..SampleConfig::default()
    };
    let video = euler_sample(&ckpt.params, &ckpt.model, &vcu, &cfg).map_err(fail)?;
    let tag = vcu.task_tag().to_string();
    let record = TrainSample::new(vcu, quantize(&video), seed).map_err(fail)?;
    write_record_file(&record, out).map_err(fail)?;
    println!(
        "sampled {} frames for {tag}, wrote {}",
        record.target.count(),
        out.display()
    );
    Ok(())
}

fn eval_cmd(ckpt_path: &Path, data: &Path, out: &Path, steps: usize, guide: f64) -> CliResult {
    require_exists("checkpoint", ckpt_path)?;
    require_exists("dataset", data)?;
    let ckpt = checkpoint::load(ckpt_path).map_err(fail)?;
    let valset = read_dataset(data).map_err(fail)?;
    let opts = EvalOptions {
        sampler_steps: steps,
        guide,
    };
    let report = eval::eval(&ckpt, &valset, &opts).map_err(fail)?;
    fs::write(out, eval::render_tsv(&report))
        .map_err(|e| Failure::Run(format!("{}: {e}", out.display())))?;
    print!("{}", eval::render_text(&report));
    println!("table written to {}", out.display());
    Ok(())
}

fn ablate_cmd(
    axis: &str,
    seeds: &str,
    data: &Path,
    config: Option<&Path>,
    out: &Path,
) -> CliResult {
    let axis: Axis = axis
        .parse()
        .map_err(|e: vidit_core::Error| usage(e.to_string()))?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<u64>()
                .map_err(|_| usage(format!("bad seed {t:?}")))
        })
        .collect::<Result<_, _>>()?;
    require_exists("dataset", data)?;
    let dataset = read_dataset(data).map_err(fail)?;
    let (model_cfg, train_cfg) = load_config(config)?;
    let report = ablate::ablate(axis, &seeds, &model_cfg, &train_cfg, &dataset).map_err(fail)?;
    fs::write(out, ablate::render_tsv(&report))
        .map_err(|e| Failure::Run(format!("{}: {e}", out.display())))?;
    print!("{}", ablate::render_text(&report));
    println!("table written to {}", out.display());
    Ok(())
}

fn check() -> CliResult {
    let mut failed = 0usize;
    for (name, run) in checks::all() {
        match run() {
            Ok(()) => println!("ok {name}"),
            Err(msg) => {
                println!("FAILED {name}: {msg}");
                failed += 1;
            }
        }
    }
    if failed == 0 {
        println!("all checks passed");
        Ok(())
    } else {
        Err(Failure::Run(format!("{failed} check(s) failed")))
    }
}
