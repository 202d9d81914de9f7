//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 4`.

use std::fs;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng as _;

use ubalance_core::config::{RunConfig, StrategyName};
use ubalance_core::features::extract_features;
use ubalance_core::metrics::{a12, mann_whitney_u, point_biserial};
use ubalance_core::pipeline::{
    evaluate, gradcheck_all, rebalance_training, run_method, run_pipeline, run_seeds, sweep, uncertainty_stage, Evaluation,
};
use ubalance_core::rebalance::RebalanceStrategy;
use ubalance_core::rng::rng_from_seed;
use ubalance_core::safety::{predict_all, Fusion, SafetyConfig, SafetyModel};
use ubalance_core::synthgen::build_benchmark;
use ubalance_core::telemetry::{fit_channel_stats, DatasetSplit, CHANNELS};
use ubalance_core::ulnr::{draw_flips, flip_probability, zscore, SafeSetStats, SWEEP_HEADER, SWEEP_TAUS};
use ubalance_core::Exec;

const DESK: &str = include_str!("../../../configs/desk.toml");

fn desk() -> RunConfig {
    RunConfig::from_toml(DESK).expect("desk config")
}

fn bench() -> &'static DatasetSplit {
    static SPLIT: OnceLock<DatasetSplit> = OnceLock::new();
    SPLIT.get_or_init(|| build_benchmark(&desk().generator, Exec::default()).expect("benchmark").1.split)
}

/// Shared by criteria 6 and 9.
fn desk_evaluation() -> &'static Evaluation {
    static EVAL: OnceLock<Evaluation> = OnceLock::new();
    EVAL.get_or_init(|| evaluate(bench(), &desk(), Exec::default()).expect("evaluation"))
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// 1 ---------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let reports = gradcheck_all(2024).expect("gradcheck models");
    let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let all = reports.iter().all(|(_, r)| r.passed() && r.max_rel_error < 1e-4);
    let names: Vec<&str> = reports.iter().map(|(n, _)| n.as_str()).collect();
    check(all, format!("max relative error {worst:.2e} over {}", names.join(", ")))
}

// 2 ---------------------------------------------------------------------------

fn feature_oracle(rows: &[[f64; CHANNELS]]) -> [f64; 16] {
    let mut out = [0.0; 16];
    let n = rows.len() as f64;
    for c in 0..CHANNELS {
        let xs: Vec<f64> = rows.iter().map(|r| r[c]).collect();
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        out[c * 4..c * 4 + 4].copy_from_slice(&[mean, var.sqrt(), min, max]);
    }
    out
}

fn equation_suite() -> Outcome {
    let mut rng = rng_from_seed(2);
    let mut failures = Vec::new();
    let tol = 1e-9;
    for trial in 0..200 {
        let mut rows: Vec<[f64; CHANNELS]> = (0..25)
            .map(|_| std::array::from_fn(|_| rng.random_range(-50.0..50.0)))
            .collect();
        let f = extract_features(&rows).unwrap().0;
        let oracle = feature_oracle(&rows);
        if f.iter().zip(&oracle).any(|(a, b)| !close(*a, *b, tol)) {
            failures.push(format!("features≠oracle #{trial}"));
        }
        let (a, b) = (rng.random_range(0.1..4.0), rng.random_range(-10.0..10.0));
        let shifted: Vec<[f64; CHANNELS]> = rows.iter().map(|r| r.map(|v| a * v + b)).collect();
        let g = extract_features(&shifted).unwrap().0;
        for c in 0..CHANNELS {
            let want = [a * f[c * 4] + b, a * f[c * 4 + 1], a * f[c * 4 + 2] + b, a * f[c * 4 + 3] + b];
            if (0..4).any(|k| !close(g[c * 4 + k], want[k], tol * 100.0)) {
                failures.push(format!("affine #{trial}"));
            }
        }
        rows.shuffle(&mut rng);
        let h = extract_features(&rows).unwrap().0;
        if f.iter().zip(&h).any(|(x, y)| !close(*x, *y, tol)) {
            failures.push(format!("order #{trial}"));
        }
    }
    for tau in [0.5, 2.0, 3.0, 3.5] {
        for z in [tau - 2.0, tau - 1e-3, tau] {
            if flip_probability(z, false, tau) != 0.0 {
                failures.push(format!("p(z={z}, τ={tau}) ≠ 0"));
            }
        }
        if !close(flip_probability(tau + 1.0, false, tau), 0.761594, 1e-6)
            || !close(flip_probability(tau + 1.0, false, tau), 1f64.tanh(), tol)
        {
            failures.push(format!("p(τ+1) at τ={tau}"));
        }
        if flip_probability(tau + 5.0, true, tau) != 0.0 {
            failures.push("unsafe window has p > 0".into());
        }
    }
    let p: Vec<f64> = (0..1000).map(|i| (i % 10) as f64 / 10.0 + 0.05).collect();
    let unsafe_: Vec<bool> = (0..1000).map(|i| i % 7 == 0).collect();
    let f1 = draw_flips(&p, &unsafe_, &mut rng_from_seed(9));
    let f2 = draw_flips(&p, &unsafe_, &mut rng_from_seed(9));
    if f1 != f2 {
        failures.push("flips not deterministic".into());
    }
    if f1.iter().zip(&unsafe_).any(|(&f, &u)| f && u) {
        failures.push("unsafe window flipped".into());
    }
    let scores: Vec<f64> = (0..500).map(|_| rng.random_range(-3.0..7.0)).collect();
    let labels: Vec<bool> = (0..500).map(|i| i % 9 == 0).collect();
    let (_, z) = zscore(&scores, &labels).unwrap();
    let safe_z: Vec<f64> = z.iter().zip(&labels).filter(|(_, &u)| !u).map(|(&v, _)| v).collect();
    let mean_z = safe_z.iter().sum::<f64>() / safe_z.len() as f64;
    let var_z = safe_z.iter().map(|v| v * v).sum::<f64>() / safe_z.len() as f64 - mean_z * mean_z;
    if !close(mean_z, 0.0, tol) || !close(var_z, 1.0, 1e-6) {
        failures.push(format!("z not standardized: mean {mean_z}, var {var_z}"));
    }
    let flat = SafeSetStats::fit(&[2.0; 6], &[false; 6]).unwrap();
    if flat.std != 0.0 || flat.z(2.0) != 0.0 || !flat.z(2.0 + 1e-8).is_finite() || !close(flat.z(2.0 + 1e-8), 1.0, 1e-6) {
        failures.push("degenerate σ_S".into());
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "features, flip probability, flips and z-scores match".to_owned()
        } else {
            failures.join("; ")
        },
    )
}

// 3 ---------------------------------------------------------------------------

fn calibration() -> Outcome {
    let mut rng = rng_from_seed(3);
    let p: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..0.3)).collect();
    let safe = vec![false; p.len()];
    let expected: f64 = p.iter().sum();
    let var: f64 = p.iter().map(|q| q * (1.0 - q)).sum();
    let seeds = 100;
    let mean = (0..seeds)
        .map(|s| draw_flips(&p, &safe, &mut rng_from_seed(1000 + s)).iter().filter(|&&f| f).count() as f64)
        .sum::<f64>()
        / seeds as f64;
    let se = (var / seeds as f64).sqrt();
    let k = (mean - expected).abs() / se;
    check(k <= 3.0, format!("mean flips {mean:.2} vs Σp {expected:.2} ({k:.2} SE)"))
}

// 4 ---------------------------------------------------------------------------

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx).powi(2);
        syy += (y[i] - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Two-sided exact p by enumerating every assignment of ranks to `a`.
fn exact_by_enumeration(n1: usize, n2: usize) -> Vec<f64> {
    let n = n1 + n2;
    let mut counts = vec![0u64; n1 * n2 + 1];
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        // U = Σ over a-members of the number of b-members ranked below.
        let mut u = 0;
        let mut below_b = 0;
        for r in 0..n {
            if mask & (1 << r) != 0 {
                u += below_b;
            } else {
                below_b += 1;
            }
        }
        counts[u] += 1;
    }
    let total: u64 = counts.iter().sum();
    (0..counts.len())
        .map(|u| {
            let lo: u64 = counts[..=u].iter().sum();
            let hi: u64 = counts[u..].iter().sum();
            (2.0 * lo.min(hi) as f64 / total as f64).min(1.0)
        })
        .collect()
}

fn metric_oracles() -> Outcome {
    let mut rng = rng_from_seed(4);
    let mut failures = Vec::new();
    let mut worst_r: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.random_range(3..60);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        y[0] = true;
        y[1] = false;
        let yf: Vec<f64> = y.iter().map(|&b| b as u8 as f64).collect();
        let (r, _) = point_biserial(&x, &y).unwrap();
        worst_r = worst_r.max((r - pearson(&x, &yf)).abs());
    }
    if worst_r > 1e-12 {
        failures.push(format!("r_pb off by {worst_r:e}"));
    }
    let mut worst_p: f64 = 0.0;
    let mut cases = 0;
    for n1 in 1..=8 {
        for n2 in 1..=8 {
            let oracle = exact_by_enumeration(n1, n2);
            // Every achievable U, realised by a tie-free arrangement.
            for mask in 0u32..(1 << (n1 + n2)) {
                if mask.count_ones() as usize != n1 {
                    continue;
                }
                let mut a = Vec::new();
                let mut b = Vec::new();
                let mut u = 0;
                for r in 0..n1 + n2 {
                    if mask & (1 << r) != 0 {
                        u += b.len();
                        a.push(r as f64 + 0.5);
                    } else {
                        b.push(r as f64 + 0.5);
                    }
                }
                let t = mann_whitney_u(&a, &b).unwrap();
                worst_p = worst_p.max((t.p_value - oracle[u]).abs());
                cases += 1;
                let sym = a12(&a, &b) + a12(&b, &a);
                if !close(sym, 1.0, 1e-12) || !close(t.a12, a12(&a, &b), 1e-12) {
                    failures.push(format!("Â₁₂ identity for n=({n1},{n2})"));
                }
            }
        }
    }
    if worst_p > 0.02 {
        failures.push(format!("Mann-Whitney p off by {worst_p}"));
    }
    check(
        failures.is_empty(),
        format!("r_pb err {worst_r:.1e}; MWU max |Δp| {worst_p:.1e} over {cases} tie-free inputs; Â₁₂ symmetric {}", failures.join("; ")),
    )
}

// 5 ---------------------------------------------------------------------------

fn correlation() -> Outcome {
    let split = bench();
    let cfg = desk();
    let labels: Vec<bool> = split.test.iter().map(|w| w.is_unsafe).collect();
    let mut rs = Vec::new();
    let mut worst_p: f64 = 0.0;
    let mut ok = true;
    for seed in run_seeds(&cfg) {
        let stage = uncertainty_stage(split, &cfg.uncertainty, seed, Exec::default()).unwrap();
        match point_biserial(&stage.scores.test, &labels) {
            Ok((r, p)) => {
                ok &= r > 0.0 && p < 1e-3;
                worst_p = worst_p.max(p);
                rs.push(r);
            }
            Err(_) => ok = false,
        }
    }
    let lo = rs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = rs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    check(ok, format!("r_pb in [{lo:.3}, {hi:.3}] over {} seeds, max p {worst_p:.1e}", rs.len()))
}

// 6 ---------------------------------------------------------------------------

fn effectiveness() -> Outcome {
    let eval = desk_evaluation();
    let t = &eval.table;
    let f1 = |m: &str| t.row(m).expect("method row").f1.0;
    let plain = t.row("none").expect("plain row").test.expect("test vs reference");
    let (u, c, r, p) = (f1("ulnr"), f1("cw"), f1("rus"), f1("none"));
    let seeds = eval.records.iter().filter(|r| r.method == StrategyName::Ulnr).count();
    let pass = seeds >= 10 && u > p && plain.p_value < 0.05 && plain.a12 > 0.7 && u >= c && u >= r;
    check(
        pass,
        format!(
            "{seeds} seeds; mean F1 ulnr {u:.3}, plain {p:.3}, cw {c:.3}, rus {r:.3}; vs plain p={:.4} Â₁₂={:.3}",
            plain.p_value, plain.a12
        ),
    )
}

// 7 ---------------------------------------------------------------------------

fn sweep_structure() -> Outcome {
    let split = bench();
    let cfg = RunConfig { seeds: 3, ..desk() };
    let table = sweep(split, &cfg, true, Exec::default()).unwrap();
    let means = table.means();
    let flips: Vec<f64> = means.iter().map(|r| r.labels_flipped).collect();
    let monotone = flips.windows(2).all(|w| w[1] <= w[0]);
    let total = split.train.len() as f64;
    let unsafe_before = split.train.iter().filter(|w| w.is_unsafe).count() as f64;
    let identity = table.rows.iter().all(|r| {
        close(r.final_ratio, (unsafe_before + r.labels_flipped) / total, 1e-12)
            && close(r.flip_ratio, r.labels_flipped / total, 1e-12)
    });
    let csv = table.to_csv();
    let mut lines = csv.lines();
    let header_ok = lines.next() == Some(SWEEP_HEADER);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let shape_ok = rows.len() == SWEEP_TAUS.len() * (cfg.seeds + 1)
        && rows.iter().all(|r| r.len() == 8 && r[5..].iter().all(|v| !v.is_empty()))
        && means.iter().map(|r| r.tau).eq(SWEEP_TAUS.iter().copied());
    let summary: Vec<String> = means
        .iter()
        .map(|r| format!("τ={}:{:.1}/F1 {:.2}", r.tau, r.labels_flipped, r.prf1.map_or(f64::NAN, |p| p.2)))
        .collect();
    check(
        monotone && identity && header_ok && shape_ok,
        format!(
            "monotone {monotone}, identity {identity}, columns {}; {}",
            header_ok && shape_ok,
            summary.join(" ")
        ),
    )
}

// 8 ---------------------------------------------------------------------------

fn mask_latency(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_owned())
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism_and_leakage() -> Outcome {
    let split = bench();
    let mut failures = Vec::new();
    let cfg = RunConfig {
        seeds: 2,
        methods: vec![StrategyName::Ulnr, StrategyName::None, StrategyName::Rus],
        ..desk()
    };
    let a = evaluate(split, &cfg, Exec::Parallel).unwrap();
    let b = evaluate(split, &cfg, Exec::Sequential).unwrap();
    if a.metrics_csv() != b.metrics_csv() {
        failures.push("metrics.csv differs between runs".to_owned());
    }
    if mask_latency(&a.table.to_csv()) != mask_latency(&b.table.to_csv()) {
        failures.push("comparison table differs between runs".to_owned());
    }

    let tmp = tempfile::tempdir().unwrap();
    let pcfg = RunConfig { seeds: 1, ..desk() };
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        run_pipeline(&pcfg, &dir, false, Exec::default()).unwrap();
        let read = |f: &str| fs::read(dir.join(f)).unwrap_or_default();
        outputs.push(
            ["metrics.csv", "scores.csv", "safety.model", "uncertainty.model", "relabel.csv", "data/windows/train.csv"]
                .map(read),
        );
    }
    if outputs[0] != outputs[1] || outputs[0].iter().any(|b| b.is_empty()) {
        failures.push("pipeline outputs differ or are missing".to_owned());
    }

    for strategy in [RebalanceStrategy::None, RebalanceStrategy::Ulnr { tau: 3.0 }] {
        let scores = vec![0.0; split.test.len()];
        if rebalance_training(split, &split.test, Some(&scores), strategy, 1).is_ok() {
            failures.push(format!("{strategy} accepted test windows"));
        }
    }
    let stage = uncertainty_stage(split, &pcfg.uncertainty, 5, Exec::default()).unwrap();
    let out = run_method(split, Some(&stage.scores), &pcfg, StrategyName::Ulnr, 5, Exec::default()).unwrap();
    let train_stats = fit_channel_stats(&split.train).unwrap();
    let all: Vec<_> = split.train.iter().chain(&split.validation).chain(&split.test).cloned().collect();
    if out.model.channel_stats != train_stats || out.model.channel_stats == fit_channel_stats(&all).unwrap() {
        failures.push("channel statistics not fit on training split only".to_owned());
    }
    let labels: Vec<bool> = split.train.iter().map(|w| w.is_unsafe).collect();
    let safe_stats = SafeSetStats::fit(&stage.scores.train, &labels).unwrap();
    if out.report.as_ref().map(|r| r.stats) != Some(safe_stats) {
        failures.push("safe-set statistics not fit on training split only".to_owned());
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "metrics and pipeline artifacts byte-identical; held-out windows rejected; stats from training split".to_owned()
        } else {
            failures.join("; ")
        },
    )
}

// 9 ---------------------------------------------------------------------------

fn efficiency() -> Outcome {
    let eval = desk_evaluation();
    let csv = eval.efficiency_csv();
    let has_columns = csv.starts_with("method,params,latency_s_per_window\n");
    let desk_latency = eval.table.rows.iter().map(|r| r.latency_s).fold(0.0, f64::max);
    let params = eval.table.rows[0].params;
    let full = SafetyModel::new(&SafetyConfig::default(), Fusion::Plain, 1).unwrap();
    let mut m = full;
    m.channel_stats = fit_channel_stats(&bench().train).unwrap();
    let sample = &bench().test[..100];
    let (_, lat) = predict_all(&m, sample, None, Exec::Sequential).unwrap();
    let pass = has_columns && params > 0 && desk_latency < 0.05 && lat.per_window_s < 0.05;
    check(
        pass,
        format!(
            "desk model {params} params, {:.3} ms/window; full-size model {} params, {:.3} ms/window",
            desk_latency * 1e3,
            m.num_params(),
            lat.per_window_s * 1e3
        ),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome, Duration);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, "gradient correctness", gradient_correctness, Duration::from_secs(60)),
        (2, "equation-level unit suite", equation_suite, Duration::from_secs(10)),
        (3, "relabelling calibration", calibration, Duration::from_secs(30)),
        (4, "metric oracles", metric_oracles, Duration::from_secs(30)),
        (5, "uncertainty/safety correlation", correlation, Duration::from_secs(600)),
        (6, "directional effectiveness", effectiveness, Duration::from_secs(1800)),
        (7, "τ sweep structure", sweep_structure, Duration::from_secs(600)),
        (8, "determinism and leakage", determinism_and_leakage, Duration::from_secs(600)),
        (9, "efficiency report", efficiency, Duration::from_secs(600)),
    ];
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (id, name, run, budget) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let pass = outcome.pass && took <= budget;
        failed += !pass as u32;
        println!(
            "[{}] {id} {name}: {} ({:.1}s, budget {}s)",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
