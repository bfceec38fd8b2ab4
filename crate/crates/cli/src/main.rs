//! `mcoe`: voxelize event streams, train, evaluate and self-check.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcoe::config::TrainConfig;
use mcoe::events::{chunk_sequence, EventStream, SensorGeometry};
use mcoe::io::{load_checkpoint, load_manifest, save_tensor};
use mcoe::mamba::Discretization;
use mcoe::metrics::MetricsReport;
use mcoe::synth::synth_task;
use mcoe::train::{evaluate_samples, Trainer};
use mcoe::verify::{self, VerifyOptions};
use mcoe::Error;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "mcoe",
    version,
    about = "Event/RGB fusion network: preprocessing, training and checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn an event CSV (t,x,y,p) into per-window voxel grids.
    Voxelize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = mcoe::events::DEFAULT_BINS)]
        bins: usize,
        #[arg(long, default_value_t = mcoe::events::DEFAULT_WINDOWS)]
        windows: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Ignore any manifest and train on generated data.
        #[arg(long)]
        synthetic: bool,
    },
    /// Score a checkpoint on a manifest and write a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the built-in oracle and invariant checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Swap in forward-Euler discretization; the suite must then fail.
        #[arg(long, hide = true)]
        mutate_euler: bool,
    },
    /// Print how often each expert is selected over a manifest.
    RouteStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
}

/// Failure carrying its process exit code.
struct Fail(u8, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::NonFinite(_) => 4,
            Error::Data(_) | Error::Io { .. } | Error::Shape { .. } | Error::Contract(_) => 2,
        };
        Fail(code, e.to_string())
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Fail> {
    let text = serde_json::to_string_pretty(value).expect("json value");
    fs::write(path, text + "\n")
        .map_err(|e| Fail(2, format!("cannot write {}: {e}", path.display())))
}

fn voxelize(
    input: &Path,
    geometry: SensorGeometry,
    windows: usize,
    out: &Path,
) -> Result<(), Fail> {
    let text = fs::read_to_string(input)
        .map_err(|e| Fail(2, format!("cannot read {}: {e}", input.display())))?;
    let stream = EventStream::parse_csv(&text)?;
    let (t0, t1) = stream
        .span()
        .ok_or_else(|| Fail(2, "event stream is empty".into()))?;
    let span = (t0, t1.max(t0 + windows as u64));
    let (grids, report) = chunk_sequence::<f32>(stream.events(), windows, span, geometry)?;
    fs::create_dir_all(out)
        .map_err(|e| Fail(2, format!("cannot create {}: {e}", out.display())))?;
    let mut files = Vec::new();
    for (i, g) in grids.iter().enumerate() {
        let name = format!("window_{i}.mcot");
        save_tensor(out.join(&name), &g.data)?;
        files.push(name);
    }
    write_json(
        &out.join("ingest.json"),
        &json!({
            "span": [span.0, span.1],
            "windows": files,
            "accepted": report.accepted,
            "out_of_bounds": report.out_of_bounds,
            "outside_window": report.outside_window,
            "signed_mass": report.signed_mass,
        }),
    )?;
    println!(
        "{} events -> {} grids in {} (signed mass {}, {} out of bounds)",
        stream.len(),
        grids.len(),
        out.display(),
        report.signed_mass,
        report.out_of_bounds
    );
    Ok(())
}

fn train(config: &Path, synthetic: bool) -> Result<(), Fail> {
    let text = fs::read_to_string(config)
        .map_err(|e| Fail(1, format!("cannot read {}: {e}", config.display())))?;
    let mut cfg = TrainConfig::parse(&text)?;
    let data = match (&cfg.manifest, synthetic) {
        (_, true) => synth_task::<f32>(cfg.seed, cfg.synthetic_samples, &cfg.model)?,
        (Some(m), false) => {
            // relative manifest paths are taken from the config's directory
            let m = config.parent().unwrap_or(Path::new(".")).join(m);
            load_manifest::<f32>(&m, &cfg.model)?
        }
        (None, false) => {
            return Err(Fail(
                1,
                "config sets no manifest; pass --synthetic or add `manifest = ...`".into(),
            ))
        }
    };
    let out_dir = cfg
        .out_dir
        .get_or_insert_with(|| PathBuf::from("mcoe-run"))
        .clone();
    let outcome = Trainer::<f32>::new(cfg)?.fit(&data, |e| {
        let held = match (e.heldout_war, e.heldout_uar) {
            (Some(w), Some(u)) => format!(" held-out WAR {w:.3} UAR {u:.3}"),
            _ => String::new(),
        };
        println!(
            "epoch {:>3} step {:>5} loss {:.4} train WAR {:.3}{held}",
            e.epoch, e.steps, e.loss, e.train_war
        );
    })?;
    match outcome.first_perfect_step {
        Some(s) => println!("training accuracy first reached 1.0 at step {s}"),
        None => println!("training accuracy never reached 1.0"),
    }
    println!(
        "{} steps; checkpoints and log in {}",
        outcome.steps,
        out_dir.display()
    );
    Ok(())
}

fn eval(checkpoint: &Path, manifest: &Path, report: &Path) -> Result<(), Fail> {
    let (model, store) = load_checkpoint::<f32>(checkpoint)?;
    let data = load_manifest::<f32>(manifest, model.config())?;
    if data.is_empty() {
        return Err(Fail(2, format!("{} lists no samples", manifest.display())));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let (records, stats) = evaluate_samples(&model, &store, &data, &all, None)?;
    let metrics = MetricsReport::from_records(&records)?;
    let mut value = serde_json::to_value(&metrics).expect("serializable");
    value["samples"] = data.len().into();
    value["expert_utilization"] = stats.to_json();
    write_json(report, &value)?;
    println!(
        "{} samples: WAR {:.4} UAR {:.4}",
        data.len(),
        metrics.war,
        metrics.uar
    );
    println!(
        "{}",
        serde_json::to_string(&stats.to_json()).expect("json value")
    );
    Ok(())
}

fn route_stats(checkpoint: &Path, manifest: &Path) -> Result<(), Fail> {
    let (model, store) = load_checkpoint::<f32>(checkpoint)?;
    let data = load_manifest::<f32>(manifest, model.config())?;
    let all: Vec<usize> = (0..data.len()).collect();
    let (_, stats) = evaluate_samples(&model, &store, &data, &all, None)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&stats.to_json()).expect("json value")
    );
    Ok(())
}

fn run_verify(seed: u64, mutate_euler: bool) -> Result<(), Fail> {
    let opts = VerifyOptions {
        seed,
        discretization: if mutate_euler {
            Discretization::ForwardEuler
        } else {
            Discretization::Exponential
        },
    };
    let report = verify::run(&opts);
    for c in &report.checks {
        let status = if c.passed { "ok  " } else { "FAIL" };
        let extra = c
            .error
            .as_deref()
            .map(|e| format!(" ({e})"))
            .unwrap_or_default();
        println!(
            "{status} {:<40} measured {:.3e} tol {:.1e}{extra}",
            c.name, c.measured, c.tolerance
        );
    }
    let failed = report.failed().count();
    println!(
        "{}/{} checks passed",
        report.checks.len() - failed,
        report.checks.len()
    );
    if report.passed {
        Ok(())
    } else {
        Err(Fail(3, format!("{failed} verification checks failed")))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Voxelize {
            input,
            height,
            width,
            bins,
            windows,
            out,
        } => voxelize(
            &input,
            SensorGeometry::new(height, width, bins),
            windows,
            &out,
        ),
        Command::Train { config, synthetic } => train(&config, synthetic),
        Command::Eval {
            checkpoint,
            manifest,
            report,
        } => eval(&checkpoint, &manifest, &report),
        Command::Verify { seed, mutate_euler } => run_verify(seed, mutate_euler),
        Command::RouteStats {
            checkpoint,
            manifest,
        } => route_stats(&checkpoint, &manifest),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail(code, msg)) => {
            eprintln!("mcoe: {msg}");
            ExitCode::from(code)
        }
    }
}
