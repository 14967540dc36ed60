//! Command-line workbench: dataset generation, training, evaluation,
//! routing diagnostics, and gradient verification, all driven by one
//! structured run-config document for reproducible runs.

mod run_config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use home_moe::arch::{architecture_names, build_model, ARCHITECTURES};
use home_moe::checkpoint;
use home_moe::data::{generate_dataset, read_dataset, write_dataset, Dataset, DatasetSpec};
use home_moe::diagnostics::{
    collect_gate_report, detect_pathologies, write_flags, write_gate_report, PathologyThresholds,
};
use home_moe::train::{evaluate, train, write_history, EvalReport};
use home_moe::verify::grad_check;

use run_config::{Ablation, RunConfig};

#[derive(Parser)]
#[command(
    name = "home",
    about = "Multi-task mixture-of-experts workbench",
    after_help = format!("Architectures: {}", architecture_names().join(", "))
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-task dataset file from a spec document.
    GenData(GenDataArgs),
    /// Train a model on a dataset file; writes a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset (per-task AUC / GAUC).
    Eval(EvalArgs),
    /// Collect gate-weight diagnostics and run the pathology detectors.
    Diagnose(DiagnoseArgs),
    /// Verify reverse-mode gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset spec document (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config document (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Dataset file produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for config echo, history, checkpoint, eval report.
    #[arg(long)]
    out: PathBuf,
    /// Override the architecture from the config.
    #[arg(long)]
    arch: Option<String>,
    /// Override every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation preset mapping onto the feature-gate / self-gate / mask
    /// switches.
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report file (JSON). Defaults to stdout only.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for gate_report.json, pathology_flags.json and the
    /// task × expert weight matrix CSV.
    #[arg(long)]
    out: PathBuf,
    /// Optional run config supplying detector threshold overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Run config document; the model section defines what to check.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Self-test hook: perturb this block's reverse-mode gradient; the
    /// check must then fail.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::GradCheck(args) => cmd_grad_check(args),
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {what} {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {what} {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(path).with_context(|| format!("cannot load dataset {}", path.display()))
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let spec: DatasetSpec = load_json(&args.spec, "dataset spec")?;
    let ds = generate_dataset(&spec).context("dataset generation failed")?;
    write_dataset(&ds, &args.out)
        .with_context(|| format!("cannot write dataset {}", args.out.display()))?;
    println!("wrote {} rows to {}", ds.len(), args.out.display());
    for (task, rate) in ds.positive_rates() {
        let target = spec
            .tasks
            .iter()
            .find(|t| t.name == task)
            .map(|t| t.positive_rate)
            .unwrap_or(f64::NAN);
        println!("task {task}: target rate {target}, realized {rate:.6}");
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut run: RunConfig = load_json(&args.config, "run config")?;
    if let Some(arch) = &args.arch {
        if !ARCHITECTURES.iter().any(|e| e.name == arch.as_str()) {
            bail!(
                "unknown architecture {arch:?}; known: {}",
                architecture_names().join(", ")
            );
        }
        run.model.architecture = arch.clone();
    }
    if let Some(seed) = args.seed {
        run.set_seed(seed);
    }
    if let Some(ablation) = args.ablation {
        ablation.apply(&mut run.model);
    }

    let ds = load_dataset(&args.data)?;
    run.model.input_width = ds.feature_width;
    let mut model = build_model(&run.model, &run.dataset.tasks).context("cannot build model")?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create run directory {}", args.out.display()))?;
    fs::write(
        args.out.join("config_echo.json"),
        serde_json::to_string_pretty(&run)?,
    )?;

    let (train_ds, eval_ds) = if run.train.eval_fraction > 0.0 {
        let (t, e) = ds.split_by_user(1.0 - run.train.eval_fraction);
        (t, Some(e))
    } else {
        (ds, None)
    };

    let outcome = train(model.as_mut(), &train_ds, eval_ds.as_ref(), &run.train)
        .context("training failed")?;
    write_history(&args.out.join("history.csv"), &outcome.history)?;
    checkpoint::save_to_file(model.as_mut(), &args.out.join("checkpoint.json"))
        .context("cannot write checkpoint")?;

    if let Some(eval_ds) = &eval_ds {
        let report = evaluate(model.as_mut(), eval_ds, run.train.batch_size)?;
        fs::write(
            args.out.join("eval_report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        print_eval(&report);
    }
    println!(
        "trained {} for {} steps; run directory {}",
        run.model.architecture,
        outcome.steps,
        args.out.display()
    );
    Ok(())
}

fn print_eval(report: &EvalReport) {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "n/a".into());
    for t in &report.tasks {
        println!("task {}: auc {}, gauc {}", t.task, fmt(t.auc), fmt(t.gauc));
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut model = checkpoint::load_from_file(&args.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", args.checkpoint.display()))?;
    let ds = load_dataset(&args.data)?;
    let report = evaluate(model.as_mut(), &ds, args.batch_size).context("evaluation failed")?;
    print_eval(&report);
    if let Some(out) = &args.out {
        fs::write(out, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("cannot write report {}", out.display()))?;
    }
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<()> {
    let mut model = checkpoint::load_from_file(&args.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", args.checkpoint.display()))?;
    let ds = load_dataset(&args.data)?;
    let thresholds = match &args.config {
        Some(path) => load_json::<RunConfig>(path, "run config")?.thresholds,
        None => PathologyThresholds::default(),
    };

    let indices: Vec<usize> = (0..ds.len()).collect();
    let batches: Vec<_> = indices
        .chunks(args.batch_size.max(1))
        .map(|c| ds.batch(c))
        .collect();
    let report = collect_gate_report(model.as_mut(), &batches).context("diagnostics failed")?;
    let flags = detect_pathologies(&report, &thresholds);

    fs::create_dir_all(&args.out)?;
    write_gate_report(&report, &args.out.join("gate_report.json"))?;
    write_flags(&flags, &args.out.join("pathology_flags.json"))?;
    fs::write(args.out.join("task_expert_weights.csv"), report.to_csv())?;

    println!(
        "diagnosed {} experts over {} rows: {} collapse, {} degradation, {} underfitting",
        report.experts.len(),
        report.rows,
        flags.collapse.len(),
        flags.degradation.len(),
        flags.underfitting.len()
    );
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<()> {
    let run: RunConfig = load_json(&args.config, "run config")?;
    let mut model = build_model(&run.model, &run.dataset.tasks).context("cannot build model")?;
    let report = grad_check(
        model.as_mut(),
        args.batch_size,
        args.tolerance,
        args.h,
        run.model.seed,
        args.corrupt.as_deref(),
    )
    .context("gradient check failed to run")?;

    println!(
        "{:<40} {:>8} {:>14} {:>6}",
        "parameter block", "size", "max rel err", "status"
    );
    for b in &report.blocks {
        println!(
            "{:<40} {:>8} {:>14.3e} {:>6}",
            b.name,
            b.len,
            b.max_rel_err,
            if b.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed = report.blocks.iter().filter(|b| !b.passed).count();
    if failed > 0 {
        bail!("{failed} parameter blocks failed the gradient check");
    }
    println!(
        "all {} parameter blocks passed at tolerance {}",
        report.blocks.len(),
        report.tolerance
    );
    Ok(())
}
