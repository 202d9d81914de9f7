use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ubalance_core::config::{RunConfig, StrategyName};
use ubalance_core::pipeline::{
    evaluate, gradcheck_all, load_data, prepare_out_dir, read_scores, rebalance_training, run_method, run_pipeline,
    score_split, scores_to_csv, sweep, write_manifest, write_relabelled, Evaluation, RunRecord,
};
use ubalance_core::rebalance::RebalanceStrategy;
use ubalance_core::safety::Fusion;
use ubalance_core::synthgen::make_benchmark;
use ubalance_core::telemetry::write_file;
use ubalance_core::uncertainty::{train_uncertainty, UncertaintyModel};
use ubalance_core::{Error, Exec, Result};

#[derive(Parser, Debug)]
#[command(name = "ubalance", version, about = "Uncertainty-guided label rebalancing for UAV safety prediction")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of seeds for evaluate and sweep-tau.
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Flip threshold τ for relabelling.
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true, value_parser = ["none", "plain", "ulnr", "cw", "rus"])]
    strategy: Option<String>,
    #[arg(long, global = true, value_parser = ["plain", "early", "late"])]
    fusion: Option<String>,
    /// Output directory [default: $UBALANCE_OUT/<command>, or runs/<command>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Benchmark directory (overrides `data.dir`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Disable data parallelism.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark.
    Gen,
    /// Train the uncertainty predictor.
    TrainUncertainty,
    /// Score every window with a trained uncertainty predictor.
    Score {
        #[arg(long)]
        model: PathBuf,
    },
    /// Relabel the training split from uncertainty scores.
    Relabel {
        #[arg(long)]
        scores: PathBuf,
    },
    /// Train and test one safety predictor.
    TrainSafety {
        /// Uncertainty scores; needed for ulnr and fusion modes.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Multi-seed comparison of the configured methods.
    Evaluate,
    /// Run every stage for one seed.
    Pipeline,
    /// Relabelling accounting over the configured τ values.
    SweepTau {
        /// Also train and test a safety model per (τ, seed).
        #[arg(long)]
        train_models: bool,
    },
    /// Finite-difference gradient checks on both architectures.
    Gradcheck,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::TrainUncertainty => "train-uncertainty",
            Command::Score { .. } => "score",
            Command::Relabel { .. } => "relabel",
            Command::TrainSafety { .. } => "train-safety",
            Command::Evaluate => "evaluate",
            Command::Pipeline => "pipeline",
            Command::SweepTau { .. } => "sweep-tau",
            Command::Gradcheck => "gradcheck",
        }
    }
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.generator.seed = s;
    }
    if let Some(n) = c.seeds {
        cfg.seeds = n;
    }
    if let Some(t) = c.tau {
        cfg.tau = t;
        cfg.tau_grid.clear();
    }
    if let Some(s) = &c.strategy {
        cfg.strategy = StrategyName::parse(s)?;
    }
    if let Some(f) = &c.fusion {
        cfg.fusion = f.parse::<Fusion>()?;
    }
    if let Some(d) = &c.data {
        cfg.data.dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common, command: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os("UBALANCE_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(command)
    })
}

fn text(path: &Path, s: &str) -> Result<()> {
    write_file(path, s.as_bytes())
}

fn record_from(name: StrategyName, seed: u64, out: &ubalance_core::pipeline::RunOutcome) -> RunRecord {
    RunRecord {
        method: name,
        seed,
        tau: match out.strategy {
            RebalanceStrategy::Ulnr { tau } => Some(tau),
            _ => None,
        },
        metrics: out.metrics.clone(),
        params: out.model.num_params(),
        latency: out.latency,
        labels_flipped: out.report.as_ref().map(|r| r.labels_flipped()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    let exec = if cli.common.sequential { Exec::Sequential } else { Exec::default() };
    let name = cli.command.name();
    let out = out_dir(&cli.common, name);
    let force = cli.common.force;
    match &cli.command {
        Command::Gen => {
            let bench = make_benchmark(&cfg.generator, &out, force, exec)?;
            write_manifest(&out, name, &cfg, cfg.generator.seed, &[])?;
            let (tr, va, te) = bench.split.sizes();
            println!("wrote {} ({tr}/{va}/{te} windows)", out.display());
            print!("{}", bench.report.to_text());
        }
        Command::TrainUncertainty => {
            let split = load_data(&cfg)?;
            prepare_out_dir(&out, force)?;
            let (model, log) = train_uncertainty(&split.train, &split.validation, &cfg.uncertainty, cfg.seed, exec)?;
            model.save(&out.join("uncertainty.model"))?;
            text(&out.join("uncertainty_log.csv"), &log.to_csv())?;
            write_manifest(&out, name, &cfg, cfg.seed, &[("params", model.num_params().to_string())])?;
            println!("wrote {}", out.join("uncertainty.model").display());
        }
        Command::Score { model } => {
            let split = load_data(&cfg)?;
            let m = UncertaintyModel::load(model)?;
            prepare_out_dir(&out, force)?;
            let scores = score_split(&m, &split, exec)?;
            text(&out.join("scores.csv"), &scores_to_csv(&split, &scores))?;
            write_manifest(&out, name, &cfg, cfg.seed, &[("model", model.display().to_string())])?;
            println!("wrote {}", out.join("scores.csv").display());
        }
        Command::Relabel { scores } => {
            let split = load_data(&cfg)?;
            let s = read_scores(scores, &split)?;
            prepare_out_dir(&out, force)?;
            let rb = rebalance_training(&split, &split.train, Some(&s.train), RebalanceStrategy::Ulnr { tau: cfg.tau }, cfg.seed)?;
            let report = rb.report.expect("relabelling always reports");
            write_relabelled(&out, &rb.train, &report)?;
            write_manifest(&out, name, &cfg, cfg.seed, &[("tau", cfg.tau.to_string())])?;
            println!("{}", report.summary());
        }
        Command::TrainSafety { scores } => {
            let split = load_data(&cfg)?;
            let s = scores.as_ref().map(|p| read_scores(p, &split)).transpose()?;
            prepare_out_dir(&out, force)?;
            let outcome = run_method(&split, s.as_ref(), &cfg, cfg.strategy, cfg.seed, exec)?;
            outcome.model.save(&out.join("safety.model"))?;
            text(&out.join("safety_log.csv"), &outcome.log.to_csv())?;
            if let Some(r) = &outcome.report {
                r.write(&out, "relabel")?;
            }
            let eval = Evaluation {
                table: ubalance_core::metrics::ComparisonTable { rows: Vec::new() },
                records: vec![record_from(cfg.strategy, cfg.seed, &outcome)],
            };
            text(&out.join("metrics.csv"), &eval.metrics_csv())?;
            text(
                &out.join("efficiency.csv"),
                &format!(
                    "method,params,latency_s_per_window\n{},{},{:.9}\n",
                    cfg.strategy.as_str(),
                    outcome.model.num_params(),
                    outcome.latency.per_window_s
                ),
            )?;
            write_manifest(&out, name, &cfg, cfg.seed, &[("strategy", cfg.strategy.as_str().to_owned())])?;
            let m = &outcome.metrics;
            println!("precision {:.4} recall {:.4} f1 {:.4}", m.precision, m.recall, m.f1);
            println!("params {} latency_s_per_window {:.6}", outcome.model.num_params(), outcome.latency.per_window_s);
        }
        Command::Evaluate => {
            let split = load_data(&cfg)?;
            prepare_out_dir(&out, force)?;
            let eval = evaluate(&split, &cfg, exec)?;
            let table = eval.table.to_csv();
            text(&out.join("comparison.csv"), &table)?;
            text(&out.join("metrics.csv"), &eval.metrics_csv())?;
            text(&out.join("efficiency.csv"), &eval.efficiency_csv())?;
            write_manifest(&out, name, &cfg, cfg.seed, &[("seeds", cfg.seeds.to_string())])?;
            print!("{table}");
        }
        Command::Pipeline => {
            let paths = run_pipeline(&cfg, &out, force, exec)?;
            print!("{}", std::fs::read_to_string(&paths.metrics).map_err(|e| Error::io(&paths.metrics, e))?);
        }
        Command::SweepTau { train_models } => {
            let split = load_data(&cfg)?;
            prepare_out_dir(&out, force)?;
            let table = sweep(&split, &cfg, *train_models, exec)?;
            let csv = table.to_csv();
            text(&out.join("sweep.csv"), &csv)?;
            write_manifest(&out, name, &cfg, cfg.seed, &[("seeds", cfg.seeds.to_string())])?;
            print!("{csv}");
        }
        Command::Gradcheck => {
            let mut failed = Vec::new();
            for (label, r) in gradcheck_all(cfg.seed)? {
                println!(
                    "{label}: {} entries, max relative error {:.3e} ({})",
                    r.checked,
                    r.max_rel_error,
                    if r.passed() { "pass" } else { "FAIL" }
                );
                if !r.passed() {
                    failed.push(label);
                }
            }
            if !failed.is_empty() {
                return Err(Error::Training(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } => 3,
        Error::Parse { .. } => 4,
        Error::Training(_) => 5,
        Error::AlreadyExists(_) => 6,
        Error::Contract(_) => 7,
        Error::Domain(_) | Error::UndefinedCorrelation(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
