//! End-to-end stages: uncertainty scoring, rebalancing, safety training,
//! multi-seed evaluation and τ sweeps, plus the on-disk artifacts each
//! stage writes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{RunConfig, StrategyName};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::FeatureVector16;
use crate::metrics::{aggregate_runs, evaluate_run, ComparisonTable, MethodRuns, RunMetrics};
use crate::nn::train::{BinaryModel, TrainLog};
use crate::nn::{check_gradients, GradCheckOptions, GradCheckReport};
use crate::rebalance::{class_weights, random_undersample, RebalanceStrategy};
use crate::rng::{derive_seed, mix_seed, rng_from_seed};
use crate::safety::{predict_all, train_safety, Fusion, LatencyReport, SafetyConfig, SafetyInput, SafetyModel, SafetyObjective, SafetyTrainOptions};
use crate::synthgen::load_split;
use crate::telemetry::{write_file, write_windows, DatasetSplit, Window};
use crate::ulnr::{relabel, sweep_tau, RebalanceReport, SweepTable};
use crate::uncertainty::{score_all, train_uncertainty, GatedObjective, UncertaintyConfig, UncertaintyModel};

/// Uncertainty scores for each split, in window order.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
    pub test: Vec<f64>,
}

pub fn score_split(model: &UncertaintyModel, split: &DatasetSplit, exec: Exec) -> Result<Scores> {
    Ok(Scores {
        train: score_all(model, &split.train, exec)?,
        validation: score_all(model, &split.validation, exec)?,
        test: score_all(model, &split.test, exec)?,
    })
}

pub const SCORES_HEADER: &str = "window_id,split,score";

pub fn scores_to_csv(split: &DatasetSplit, scores: &Scores) -> String {
    let mut out = String::from(SCORES_HEADER);
    out.push('\n');
    for (name, ws, ss) in [
        ("train", &split.train, &scores.train),
        ("validation", &split.validation, &scores.validation),
        ("test", &split.test, &scores.test),
    ] {
        for (w, s) in ws.iter().zip(ss) {
            let _ = writeln!(out, "{},{name},{s}", w.window_id);
        }
    }
    out
}

/// Reads a scores file and aligns it with `split`; every window must have
/// exactly one score under the right split name.
pub fn read_scores(path: &Path, split: &DatasetSplit) -> Result<Scores> {
    let file = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(&file, 1, format!("{other:?}")),
    })?;
    let mut map: HashMap<String, (String, f64)> = HashMap::new();
    let header = rdr.headers().map_err(|e| Error::parse(&file, 1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>().join(",") != SCORES_HEADER {
        return Err(Error::parse(&file, 1, format!("expected header {SCORES_HEADER}")));
    }
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| Error::parse(&file, line, e.to_string()))?;
        if rec.len() != 3 {
            return Err(Error::parse(&file, line, "expected 3 fields"));
        }
        let score: f64 = rec[2]
            .parse()
            .map_err(|_| Error::parse(&file, line, format!("bad score {:?}", &rec[2])))?;
        if !score.is_finite() {
            return Err(Error::parse(&file, line, "non-finite score"));
        }
        if map.insert(rec[0].to_owned(), (rec[1].to_owned(), score)).is_some() {
            return Err(Error::parse(&file, line, format!("duplicate window {}", &rec[0])));
        }
    }
    let pick = |name: &str, ws: &[Window]| -> Result<Vec<f64>> {
        ws.iter()
            .map(|w| match map.get(&w.window_id) {
                Some((s, v)) if s == name => Ok(*v),
                Some((s, _)) => Err(Error::Contract(format!(
                    "{file}: window {} scored under split {s}, expected {name}",
                    w.window_id
                ))),
                None => Err(Error::Contract(format!("{file}: no score for window {}", w.window_id))),
            })
            .collect()
    };
    Ok(Scores {
        train: pick("train", &split.train)?,
        validation: pick("validation", &split.validation)?,
        test: pick("test", &split.test)?,
    })
}

pub struct UncertaintyStage {
    pub model: UncertaintyModel,
    pub log: TrainLog,
    pub scores: Scores,
}

pub fn uncertainty_stage(split: &DatasetSplit, config: &UncertaintyConfig, seed: u64, exec: Exec) -> Result<UncertaintyStage> {
    let (model, log) = train_uncertainty(&split.train, &split.validation, config, seed, exec)?;
    let scores = score_split(&model, split, exec)?;
    Ok(UncertaintyStage { model, log, scores })
}

/// A training set after one rebalancing strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct Rebalanced {
    pub train: Vec<Window>,
    /// Scores aligned with `train` (subset for undersampling).
    pub train_scores: Option<Vec<f64>>,
    pub class_weights: (f64, f64),
    pub report: Option<RebalanceReport>,
}

/// Applies `strategy` to `train`, which must contain training windows of
/// `split` only: z-score statistics and class counts are fit on it.
pub fn rebalance_training(
    split: &DatasetSplit,
    train: &[Window],
    train_scores: Option<&[f64]>,
    strategy: RebalanceStrategy,
    seed: u64,
) -> Result<Rebalanced> {
    split.ensure_training_only(train.iter().map(|w| w.window_id.as_str()))?;
    if let Some(s) = train_scores {
        if s.len() != train.len() {
            return Err(Error::Contract(format!("{} scores for {} training windows", s.len(), train.len())));
        }
    }
    let scores = train_scores.map(<[f64]>::to_vec);
    match strategy {
        RebalanceStrategy::None => Ok(Rebalanced {
            train: train.to_vec(),
            train_scores: scores,
            class_weights: (1.0, 1.0),
            report: None,
        }),
        RebalanceStrategy::ClassWeight => {
            let labels: Vec<bool> = train.iter().map(|w| w.is_unsafe).collect();
            Ok(Rebalanced {
                train: train.to_vec(),
                train_scores: scores,
                class_weights: class_weights(&labels)?,
                report: None,
            })
        }
        RebalanceStrategy::RandomUndersample { ratio } => {
            let kept = random_undersample(train, ratio, &mut rng_from_seed(derive_seed(seed, "rus")))?;
            let kept_scores = scores.map(|s| {
                let index: HashMap<&str, usize> =
                    train.iter().enumerate().map(|(i, w)| (w.window_id.as_str(), i)).collect();
                kept.iter().map(|w| s[index[w.window_id.as_str()]]).collect()
            });
            Ok(Rebalanced {
                train: kept,
                train_scores: kept_scores,
                class_weights: (1.0, 1.0),
                report: None,
            })
        }
        RebalanceStrategy::Ulnr { tau } => {
            let s = scores.ok_or_else(|| Error::Contract("relabelling needs uncertainty scores".into()))?;
            let (relabelled, report) = relabel(train, &s, tau, derive_seed(seed, "ulnr"))?;
            Ok(Rebalanced {
                train: relabelled,
                train_scores: Some(s),
                class_weights: (1.0, 1.0),
                report: Some(report),
            })
        }
    }
}

/// Result of training and testing one safety model.
pub struct RunOutcome {
    pub strategy: RebalanceStrategy,
    pub metrics: RunMetrics,
    pub probabilities: Vec<f64>,
    pub latency: LatencyReport,
    pub model: SafetyModel,
    pub log: TrainLog,
    pub report: Option<RebalanceReport>,
    /// `(τ, validation F1)` for every candidate tried.
    pub tau_candidates: Vec<(f64, f64)>,
}

fn selected_val(log: &TrainLog) -> (f64, f64) {
    log.best_epoch
        .map(|e| (log.epochs[e].val_f1, log.epochs[e].val_loss))
        .unwrap_or((0.0, f64::INFINITY))
}

fn train_and_test(
    split: &DatasetSplit,
    scores: Option<&Scores>,
    strategy: RebalanceStrategy,
    safety: &SafetyConfig,
    fusion: Fusion,
    seed: u64,
    exec: Exec,
) -> Result<RunOutcome> {
    let rb = rebalance_training(split, &split.train, scores.map(|s| s.train.as_slice()), strategy, seed)?;
    let fused = |v: &Option<Vec<f64>>| if fusion.uses_score() { v.clone() } else { None };
    let train_scores = fused(&rb.train_scores);
    let val_scores = fused(&scores.map(|s| s.validation.clone()));
    let test_scores = fused(&scores.map(|s| s.test.clone()));
    let opts = SafetyTrainOptions {
        fusion,
        class_weights: rb.class_weights,
        seed,
        exec,
    };
    let (model, log) = train_safety(
        &rb.train,
        &split.validation,
        train_scores.as_deref(),
        val_scores.as_deref(),
        safety,
        &opts,
    )?;
    let (probabilities, latency) = predict_all(&model, &split.test, test_scores.as_deref(), exec)?;
    let predicted: Vec<bool> = probabilities.iter().map(|&p| p >= 0.5).collect();
    let actual: Vec<bool> = split.test.iter().map(|w| w.is_unsafe).collect();
    let metrics = evaluate_run(&predicted, &actual)?;
    Ok(RunOutcome {
        strategy,
        metrics,
        probabilities,
        latency,
        model,
        log,
        report: rb.report,
        tau_candidates: Vec::new(),
    })
}

/// Trains one safety model with `name` under `config`. Relabelling with a
/// non-empty `tau_grid` trains once per τ and keeps the best validation F1
/// (ties: lower validation loss, then the earlier τ).
pub fn run_method(
    split: &DatasetSplit,
    scores: Option<&Scores>,
    config: &RunConfig,
    name: StrategyName,
    seed: u64,
    exec: Exec,
) -> Result<RunOutcome> {
    let needs_scores = name == StrategyName::Ulnr || config.fusion.uses_score();
    if needs_scores && scores.is_none() {
        return Err(Error::Contract(format!(
            "strategy {} with {} fusion needs uncertainty scores",
            name.as_str(),
            config.fusion
        )));
    }
    let run = |strategy| train_and_test(split, scores, strategy, &config.safety, config.fusion, seed, exec);
    if name != StrategyName::Ulnr || config.tau_grid.is_empty() {
        return run(config.strategy_for(name));
    }
    let mut best: Option<RunOutcome> = None;
    let mut candidates = Vec::new();
    for &tau in &config.tau_grid {
        let out = run(RebalanceStrategy::Ulnr { tau })?;
        let (f1, loss) = selected_val(&out.log);
        candidates.push((tau, f1));
        let better = match &best {
            None => true,
            Some(b) => {
                let (bf, bl) = selected_val(&b.log);
                f1 > bf || (f1 == bf && loss < bl)
            }
        };
        if better {
            best = Some(out);
        }
    }
    let mut best = best.expect("non-empty grid");
    best.tau_candidates = candidates;
    Ok(best)
}

/// Seeds used for multi-seed runs, derived from the master seed.
pub fn run_seeds(config: &RunConfig) -> Vec<u64> {
    (0..config.seeds as u64).map(|i| mix_seed(config.seed, i)).collect()
}

pub struct RunRecord {
    pub method: StrategyName,
    pub seed: u64,
    pub tau: Option<f64>,
    pub metrics: RunMetrics,
    pub params: usize,
    pub latency: LatencyReport,
    pub labels_flipped: Option<usize>,
}

pub struct Evaluation {
    pub table: ComparisonTable,
    pub records: Vec<RunRecord>,
}

pub const METRICS_HEADER: &str = "method,seed,tau,labels_flipped,tp,fp,tn,fn,precision,recall,f1";

impl Evaluation {
    /// Per-run metrics; contains no timing, so equal seeds give equal bytes.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            let c = &r.metrics.counts;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6}",
                r.method.as_str(),
                r.seed,
                r.tau.map(|t| t.to_string()).unwrap_or_default(),
                r.labels_flipped.map(|n| n.to_string()).unwrap_or_default(),
                c.tp,
                c.fp,
                c.tn,
                c.fn_,
                r.metrics.precision,
                r.metrics.recall,
                r.metrics.f1
            );
        }
        out
    }

    /// Per-method parameter count and mean per-window inference latency.
    pub fn efficiency_csv(&self) -> String {
        let mut out = String::from("method,params,latency_s_per_window\n");
        for row in &self.table.rows {
            let _ = writeln!(out, "{},{},{:.9}", row.method, row.params, row.latency_s);
        }
        out
    }
}

/// Trains every method in `config.methods` for every derived seed and
/// compares them against the first method. One uncertainty model is
/// trained per seed and shared by all methods of that seed.
pub fn evaluate(split: &DatasetSplit, config: &RunConfig, exec: Exec) -> Result<Evaluation> {
    config.validate()?;
    let needs_scores = config.methods.contains(&StrategyName::Ulnr) || config.fusion.uses_score();
    let mut records = Vec::new();
    for seed in run_seeds(config) {
        let scores = if needs_scores {
            Some(uncertainty_stage(split, &config.uncertainty, seed, exec)?.scores)
        } else {
            None
        };
        for &m in &config.methods {
            let out = run_method(split, scores.as_ref(), config, m, seed, exec)?;
            records.push(RunRecord {
                method: m,
                seed,
                tau: match out.strategy {
                    RebalanceStrategy::Ulnr { tau } => Some(tau),
                    _ => None,
                },
                metrics: out.metrics,
                params: out.model.num_params(),
                latency: out.latency,
                labels_flipped: out.report.as_ref().map(RebalanceReport::labels_flipped),
            });
        }
    }
    let runs: Vec<MethodRuns> = config
        .methods
        .iter()
        .map(|&m| {
            let rs: Vec<&RunRecord> = records.iter().filter(|r| r.method == m).collect();
            MethodRuns {
                method: m.as_str().to_owned(),
                runs: rs.iter().map(|r| r.metrics.clone()).collect(),
                params: rs[0].params,
                latency_s: rs.iter().map(|r| r.latency.per_window_s).sum::<f64>() / rs.len() as f64,
            }
        })
        .collect();
    let table = aggregate_runs(&runs[0], &runs[1..])?;
    Ok(Evaluation { table, records })
}

/// Relabelling accounting for every `(τ, seed)` pair; with `train_models`
/// a safety model is trained on each relabelled set and scored on test.
pub fn sweep(split: &DatasetSplit, config: &RunConfig, train_models: bool, exec: Exec) -> Result<SweepTable> {
    config.validate()?;
    let mut table = SweepTable::default();
    for seed in run_seeds(config) {
        let stage = uncertainty_stage(split, &config.uncertainty, seed, exec)?;
        split.ensure_training_only(split.train.iter().map(|w| w.window_id.as_str()))?;
        let mut part = sweep_tau(&split.train, &stage.scores.train, &config.sweep_taus, &[seed], exec)?;
        if train_models {
            let actual: Vec<bool> = split.test.iter().map(|w| w.is_unsafe).collect();
            for (t, row) in part.rows.iter_mut().enumerate() {
                // Same stream as the accounting pass above.
                let (relabelled, _) = relabel(&split.train, &stage.scores.train, row.tau, mix_seed(seed, t as u64))?;
                let opts = SafetyTrainOptions {
                    fusion: Fusion::Plain,
                    class_weights: (1.0, 1.0),
                    seed,
                    exec,
                };
                let (model, _) = train_safety(&relabelled, &split.validation, None, None, &config.safety, &opts)?;
                let (probs, _) = predict_all(&model, &split.test, None, exec)?;
                let predicted: Vec<bool> = probs.iter().map(|&p| p >= 0.5).collect();
                let m = evaluate_run(&predicted, &actual)?;
                row.prf1 = Some((m.precision, m.recall, m.f1));
            }
        }
        table.rows.extend(part.rows);
    }
    Ok(table)
}

/// Gradient checks on small instances of both architectures.
pub fn gradcheck_all(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    use rand::Rng as _;
    let mut rng = rng_from_seed(derive_seed(seed, "gradcheck"));
    let mut out = Vec::new();

    let ucfg = UncertaintyConfig {
        projection_dim: 6,
        expansion_dim: 10,
        head_dim: 5,
        ..UncertaintyConfig::default()
    };
    let um = UncertaintyModel::new(&ucfg, rng.random())?;
    let feats: Vec<FeatureVector16> = (0..4)
        .map(|_| {
            let mut v = [0.0; crate::features::FEATURES];
            v.iter_mut().for_each(|x| *x = rng.random_range(-2.0..2.0));
            FeatureVector16(v)
        })
        .collect();
    let ys = [1.0, 0.0, 1.0, 0.0];
    for (label, dropout_seed) in [("gatedmlp", None), ("gatedmlp+dropout", Some(rng.random()))] {
        let obj = GatedObjective {
            model: &um,
            inputs: &feats,
            targets: &ys,
            dropout_seed,
        };
        out.push((label.to_owned(), check_gradients(&obj, BinaryModel::params(&um), GradCheckOptions::default())));
    }

    for fusion in [Fusion::Plain, Fusion::Early, Fusion::Late] {
        let scfg = SafetyConfig {
            hidden_dim: 4,
            layers: 2,
            head_dim: 3,
            ..SafetyConfig::default()
        };
        let sm = SafetyModel::new(&scfg, fusion, rng.random())?;
        let width = fusion.input_width();
        let inputs: Vec<SafetyInput> = (0..3)
            .map(|_| {
                let steps = 3;
                let data: Vec<f64> = (0..steps * width).map(|_| rng.random_range(-1.5..1.5)).collect();
                SafetyInput {
                    steps,
                    width,
                    data,
                    u: rng.random_range(-1.0..1.0),
                }
            })
            .collect();
        let obj = SafetyObjective {
            model: &sm,
            inputs: &inputs,
            targets: &ys[..3],
            dropout_seed: Some(rng.random()),
        };
        out.push((format!("bilstm-{fusion}"), check_gradients(&obj, sm.params(), GradCheckOptions::default())));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Artifacts

/// Creates `dir`, refusing a non-empty existing directory unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::AlreadyExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub const RUN_MANIFEST: &str = "run_manifest.txt";

/// Line-oriented `key value` manifest referencing config hash and seed,
/// written with a copy of the resolved config.
pub fn write_manifest(dir: &Path, kind: &str, config: &RunConfig, seed: u64, extra: &[(&str, String)]) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "kind {kind}");
    let _ = writeln!(s, "config_hash {}", config.hash());
    let _ = writeln!(s, "seed {seed}");
    let _ = writeln!(s, "version {}", env!("CARGO_PKG_VERSION"));
    for (k, v) in extra {
        let _ = writeln!(s, "{k} {v}");
    }
    write_file(&dir.join(RUN_MANIFEST), s.as_bytes())?;
    write_file(&dir.join("config.toml"), config.to_toml().as_bytes())
}

pub fn load_data(config: &RunConfig) -> Result<DatasetSplit> {
    load_split(&config.data.dir)
}

/// Files written by [`run_pipeline`].
#[derive(Clone, Debug, PartialEq)]
pub struct PipelinePaths {
    pub data: PathBuf,
    pub uncertainty_model: PathBuf,
    pub scores: PathBuf,
    pub safety_model: PathBuf,
    pub metrics: PathBuf,
    pub efficiency: PathBuf,
}

impl PipelinePaths {
    pub fn new(out: &Path) -> Self {
        PipelinePaths {
            data: out.join("data"),
            uncertainty_model: out.join("uncertainty.model"),
            scores: out.join("scores.csv"),
            safety_model: out.join("safety.model"),
            metrics: out.join("metrics.csv"),
            efficiency: out.join("efficiency.csv"),
        }
    }
}

/// Chains every stage for one seed: generate, train the uncertainty
/// predictor, score, rebalance, train and test the safety predictor.
pub fn run_pipeline(config: &RunConfig, out: &Path, force: bool, exec: Exec) -> Result<PipelinePaths> {
    config.validate()?;
    prepare_out_dir(out, force)?;
    let paths = PipelinePaths::new(out);
    let bench = crate::synthgen::make_benchmark(&config.generator, &paths.data, true, exec)?;
    let split = &bench.split;
    let seed = config.seed;
    let needs_scores = config.strategy == StrategyName::Ulnr || config.fusion.uses_score();
    let stage = if needs_scores {
        let st = uncertainty_stage(split, &config.uncertainty, seed, exec)?;
        st.model.save(&paths.uncertainty_model)?;
        write_file(&paths.scores, scores_to_csv(split, &st.scores).as_bytes())?;
        write_file(&out.join("uncertainty_log.csv"), st.log.to_csv().as_bytes())?;
        Some(st)
    } else {
        None
    };
    let outcome = run_method(split, stage.as_ref().map(|s| &s.scores), config, config.strategy, seed, exec)?;
    if let Some(rep) = &outcome.report {
        rep.write(out, "relabel")?;
    }
    outcome.model.save(&paths.safety_model)?;
    write_file(&out.join("safety_log.csv"), outcome.log.to_csv().as_bytes())?;
    let eval = Evaluation {
        table: ComparisonTable { rows: Vec::new() },
        records: vec![RunRecord {
            method: config.strategy,
            seed,
            tau: match outcome.strategy {
                RebalanceStrategy::Ulnr { tau } => Some(tau),
                _ => None,
            },
            metrics: outcome.metrics.clone(),
            params: outcome.model.num_params(),
            latency: outcome.latency,
            labels_flipped: outcome.report.as_ref().map(RebalanceReport::labels_flipped),
        }],
    };
    write_file(&paths.metrics, eval.metrics_csv().as_bytes())?;
    write_file(
        &paths.efficiency,
        format!(
            "method,params,latency_s_per_window\n{},{},{:.9}\n",
            config.strategy.as_str(),
            outcome.model.num_params(),
            outcome.latency.per_window_s
        )
        .as_bytes(),
    )?;
    write_manifest(
        out,
        "pipeline",
        config,
        seed,
        &[
            ("strategy", config.strategy.as_str().to_owned()),
            ("fusion", config.fusion.to_string()),
            ("f1", format!("{:.6}", outcome.metrics.f1)),
        ],
    )?;
    Ok(paths)
}

/// Writes a relabelled training split next to its report.
pub fn write_relabelled(dir: &Path, windows: &[Window], report: &RebalanceReport) -> Result<()> {
    write_windows(&dir.join("train_relabelled.csv"), windows)?;
    report.write(dir, "relabel")
}
