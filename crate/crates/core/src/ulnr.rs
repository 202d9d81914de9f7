//! Uncertainty-guided label rebalancing.
//!
//! Safe training windows whose uncertainty score sits far above the safe
//! population get a chance to be relabelled unsafe:
//! `z = (u − μ_S)/(σ_S + ε)`, `p = max(tanh(z − τ), 0)`, flip iff `ξ < p`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{mix_seed, rng_from_seed, Rng};
use crate::telemetry::{write_file, Window};

pub const EPSILON: f64 = 1e-8;
pub const DEFAULT_TAU: f64 = 3.0;
pub const SWEEP_TAUS: [f64; 7] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5];

/// Mean and population std of the scores of safe training windows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SafeSetStats {
    pub mean: f64,
    pub std: f64,
    pub n_safe: usize,
}

impl SafeSetStats {
    pub fn fit(scores: &[f64], is_unsafe: &[bool]) -> Result<Self> {
        if scores.len() != is_unsafe.len() {
            return Err(Error::Contract(format!(
                "{} scores for {} labels",
                scores.len(),
                is_unsafe.len()
            )));
        }
        let safe: Vec<f64> = scores
            .iter()
            .zip(is_unsafe)
            .filter(|(_, &u)| !u)
            .map(|(&s, _)| s)
            .collect();
        if safe.is_empty() {
            return Err(Error::Config("no safe windows to compute safe-set statistics".into()));
        }
        let n = safe.len() as f64;
        let mean = safe.iter().sum::<f64>() / n;
        let var = safe.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        Ok(SafeSetStats {
            mean,
            std: var.sqrt(),
            n_safe: safe.len(),
        })
    }

    pub fn z(&self, score: f64) -> f64 {
        (score - self.mean) / (self.std + EPSILON)
    }
}

/// Safe-set statistics plus a z-score for every window (safe or not).
pub fn zscore(scores: &[f64], is_unsafe: &[bool]) -> Result<(SafeSetStats, Vec<f64>)> {
    let stats = SafeSetStats::fit(scores, is_unsafe)?;
    Ok((stats, scores.iter().map(|&s| stats.z(s)).collect()))
}

pub fn flip_probability(z: f64, is_unsafe: bool, tau: f64) -> f64 {
    if is_unsafe {
        0.0
    } else {
        (z - tau).tanh().max(0.0)
    }
}

/// One Bernoulli draw per safe entry, consumed in order. Entries marked
/// unsafe consume nothing and never flip.
pub fn draw_flips(p_flip: &[f64], is_unsafe: &[bool], rng: &mut Rng) -> Vec<bool> {
    p_flip
        .iter()
        .zip(is_unsafe)
        .map(|(&p, &u)| !u && rng.random::<f64>() < p)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlipRecord {
    pub window_id: String,
    pub orig_unsafe: bool,
    pub z: f64,
    pub p_flip: f64,
    pub flipped: bool,
}

impl FlipRecord {
    pub fn new_unsafe(&self) -> bool {
        self.orig_unsafe || self.flipped
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RebalanceReport {
    pub records: Vec<FlipRecord>,
    pub stats: SafeSetStats,
    pub tau: f64,
    pub seed: u64,
}

pub const REPORT_HEADER: &str = "window_id,orig_label,z,p_flip,flipped,new_label";

impl RebalanceReport {
    pub fn total(&self) -> usize {
        self.records.len()
    }

    pub fn unsafe_before(&self) -> usize {
        self.records.iter().filter(|r| r.orig_unsafe).count()
    }

    pub fn labels_flipped(&self) -> usize {
        self.records.iter().filter(|r| r.flipped).count()
    }

    pub fn expected_flips(&self) -> f64 {
        self.records.iter().map(|r| r.p_flip).sum()
    }

    pub fn flip_ratio(&self) -> f64 {
        self.labels_flipped() as f64 / self.total().max(1) as f64
    }

    /// Unsafe share of the training set after relabelling.
    pub fn final_minority_ratio(&self) -> f64 {
        (self.unsafe_before() + self.labels_flipped()) as f64 / self.total().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.window_id,
                r.orig_unsafe as u8,
                r.z,
                r.p_flip,
                r.flipped as u8,
                r.new_unsafe() as u8
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "{{\n  \"tau\": {},\n  \"seed\": {},\n  \"safe_mean\": {},\n  \"safe_std\": {},\n  \"total_windows\": {},\n  \"unsafe_before\": {},\n  \"labels_flipped\": {},\n  \"expected_flips\": {},\n  \"flip_ratio\": {},\n  \"final_minority_ratio\": {}\n}}\n",
            self.tau,
            self.seed,
            self.stats.mean,
            self.stats.std,
            self.total(),
            self.unsafe_before(),
            self.labels_flipped(),
            self.expected_flips(),
            self.flip_ratio(),
            self.final_minority_ratio()
        )
    }

    /// Writes `<stem>.csv` and `<stem>.summary.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_file(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())?;
        write_file(&dir.join(format!("{stem}.summary.json")), self.summary().as_bytes())
    }
}

/// Relabels `windows` (training split only) and returns the new windows;
/// the input is left untouched.
pub fn relabel(windows: &[Window], scores: &[f64], tau: f64, seed: u64) -> Result<(Vec<Window>, RebalanceReport)> {
    if windows.len() != scores.len() {
        return Err(Error::Contract(format!(
            "{} uncertainty scores for {} windows",
            scores.len(),
            windows.len()
        )));
    }
    if !tau.is_finite() {
        return Err(Error::Config(format!("flip threshold must be finite, got {tau}")));
    }
    let labels: Vec<bool> = windows.iter().map(|w| w.is_unsafe).collect();
    let (stats, z) = zscore(scores, &labels)?;
    let p: Vec<f64> = z
        .iter()
        .zip(&labels)
        .map(|(&z, &u)| flip_probability(z, u, tau))
        .collect();
    let flips = draw_flips(&p, &labels, &mut rng_from_seed(seed));
    let mut out = windows.to_vec();
    let mut records = Vec::with_capacity(windows.len());
    for (i, w) in out.iter_mut().enumerate() {
        records.push(FlipRecord {
            window_id: w.window_id.clone(),
            orig_unsafe: w.is_unsafe,
            z: z[i],
            p_flip: p[i],
            flipped: flips[i],
        });
        w.is_unsafe |= flips[i];
    }
    Ok((
        out,
        RebalanceReport {
            records,
            stats,
            tau,
            seed,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    /// `None` on rows averaged over seeds.
    pub seed: Option<u64>,
    pub labels_flipped: f64,
    pub flip_ratio: f64,
    pub final_ratio: f64,
    /// Safety-model test metrics, when the sweep trained one.
    pub prf1: Option<(f64, f64, f64)>,
}

pub const SWEEP_HEADER: &str = "tau,seed,labels_flipped,flip_ratio,final_ratio,precision,recall,f1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Per-τ averages over the seeded rows, in τ order of first appearance.
    pub fn means(&self) -> Vec<SweepRow> {
        let mut taus: Vec<f64> = Vec::new();
        for r in &self.rows {
            if r.seed.is_some() && !taus.contains(&r.tau) {
                taus.push(r.tau);
            }
        }
        taus.into_iter()
            .map(|tau| {
                let rs: Vec<&SweepRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.tau == tau && r.seed.is_some())
                    .collect();
                let n = rs.len() as f64;
                let avg = |f: fn(&SweepRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
                let prf1 = if rs.iter().all(|r| r.prf1.is_some()) {
                    let m = |k: usize| {
                        rs.iter()
                            .map(|r| {
                                let v = r.prf1.expect("checked");
                                [v.0, v.1, v.2][k]
                            })
                            .sum::<f64>()
                            / n
                    };
                    Some((m(0), m(1), m(2)))
                } else {
                    None
                };
                SweepRow {
                    tau,
                    seed: None,
                    labels_flipped: avg(|r| r.labels_flipped),
                    flip_ratio: avg(|r| r.flip_ratio),
                    final_ratio: avg(|r| r.final_ratio),
                    prf1,
                }
            })
            .collect()
    }

    /// Seeded rows followed by one `mean` row per τ.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_HEADER);
        out.push('\n');
        for r in self.rows.iter().cloned().chain(self.means()) {
            let seed = r.seed.map_or_else(|| "mean".to_owned(), |s| s.to_string());
            let (p, rc, f) = match r.prf1 {
                Some((p, rc, f)) => (format!("{p:.6}"), format!("{rc:.6}"), format!("{f:.6}")),
                None => Default::default(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{},{},{}",
                r.tau, seed, r.labels_flipped, r.flip_ratio, r.final_ratio, p, rc, f
            );
        }
        out
    }
}

/// One relabelling pass per `(τ, seed)` pair. Each pair draws from its own
/// stream `mix_seed(seed, τ index)`, so the table is identical whatever the
/// execution mode.
pub fn sweep_tau(windows: &[Window], scores: &[f64], taus: &[f64], seeds: &[u64], exec: Exec) -> Result<SweepTable> {
    if taus.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one threshold and one seed".into()));
    }
    let pairs: Vec<(usize, u64)> = (0..taus.len())
        .flat_map(|t| seeds.iter().map(move |&s| (t, s)))
        .collect();
    let rows = exec
        .map(&pairs, |&(t, s)| {
            relabel(windows, scores, taus[t], mix_seed(s, t as u64)).map(|(_, rep)| SweepRow {
                tau: taus[t],
                seed: Some(s),
                labels_flipped: rep.labels_flipped() as f64,
                flip_ratio: rep.flip_ratio(),
                final_ratio: rep.final_minority_ratio(),
                prf1: None,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn window(id: &str, is_unsafe: bool) -> Window {
        let mut w = Window::new(id, vec![[0.0; 4]; 25]);
        w.is_unsafe = is_unsafe;
        w
    }

    #[test]
    fn zscore_examples() {
        let (s, z) = zscore(&[1.0, 2.0, 3.0], &[false; 3]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 0.816496580927726).abs() < 1e-12);
        assert_eq!(z[1], 0.0);

        let (s, z) = zscore(&[5.0, 5.0, 9.0], &[false, false, true]).unwrap();
        assert_eq!((s.mean, s.std), (5.0, 0.0));
        assert_eq!(&z[..2], &[0.0, 0.0]);
        assert!(z.iter().all(|v| v.is_finite()));

        // One std above the mean lands within 1e-7 of 1.
        let (s, _) = zscore(&[0.0, 2.0], &[false, false]).unwrap();
        assert!((s.z(s.mean + s.std) - 1.0).abs() < 1e-7);

        assert!(matches!(zscore(&[1.0], &[true]), Err(Error::Config(_))));
    }

    #[test]
    fn unsafe_scores_do_not_move_safe_statistics() {
        let (a, _) = zscore(&[1.0, 2.0, 3.0, 100.0], &[false, false, false, true]).unwrap();
        let (b, _) = zscore(&[1.0, 2.0, 3.0, -50.0], &[false, false, false, true]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flip_probability_examples() {
        assert_eq!(flip_probability(3.0, false, 3.0), 0.0);
        // tanh(1) from the exponential definition.
        let e2 = (2.0f64).exp();
        let tanh1 = (e2 - 1.0) / (e2 + 1.0);
        assert!((tanh1 - 0.761594).abs() < 1e-6);
        assert!((flip_probability(4.0, false, 3.0) - tanh1).abs() < 1e-12);
        assert_eq!(flip_probability(50.0, true, 0.0), 0.0);
        assert_eq!(flip_probability(-2.0, false, 0.5), 0.0);
    }

    #[test]
    fn relabel_zero_and_saturated_regimes() {
        let ws: Vec<Window> = (0..20).map(|i| window(&format!("w{i}"), i == 0)).collect();
        let scores: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let (out, rep) = relabel(&ws, &scores, 3.5, 1).unwrap();
        assert_eq!(rep.labels_flipped(), 0);
        assert_eq!(out, ws);

        let (out, rep) = relabel(&ws, &scores, -1e6, 1).unwrap();
        assert_eq!(rep.labels_flipped(), 19);
        assert!(out.iter().all(|w| w.is_unsafe));
        assert_eq!(rep.final_minority_ratio(), 1.0);
        assert!(ws.iter().filter(|w| w.is_unsafe).count() == 1, "input untouched");

        assert!(matches!(relabel(&ws, &scores[1..], 3.0, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn binomial_flip_count() {
        // 10,000 draws at p = 0.1: mean 1000, sd 30; ±3.29 sd covers 99.9%.
        let p = vec![0.1; 10_000];
        let labels = vec![false; 10_000];
        let flips = draw_flips(&p, &labels, &mut rng_from_seed(17));
        let k = flips.iter().filter(|&&f| f).count() as f64;
        assert!((k - 1000.0).abs() <= 3.29 * 30.0, "{k}");
    }

    #[test]
    fn report_csv_and_summary() {
        let ws = vec![window("a", false), window("b", true), window("c", false)];
        let (_, rep) = relabel(&ws, &[0.0, 1.0, 10.0], 0.0, 3).unwrap();
        let csv = rep.to_csv();
        assert!(csv.starts_with(REPORT_HEADER));
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(2).unwrap().starts_with("b,1,"));
        assert!(rep.summary().contains("\"labels_flipped\""));
    }

    #[test]
    fn sweep_is_monotone_and_mode_independent() {
        let ws: Vec<Window> = (0..400).map(|i| window(&format!("w{i}"), i % 40 == 0)).collect();
        let scores: Vec<f64> = (0..400).map(|i| ((i * 7919) % 400) as f64 / 40.0).collect();
        let seeds: Vec<u64> = (0..8).collect();
        let seq = sweep_tau(&ws, &scores, &SWEEP_TAUS, &seeds, Exec::Sequential).unwrap();
        let par = sweep_tau(&ws, &scores, &SWEEP_TAUS, &seeds, Exec::Parallel).unwrap();
        assert_eq!(seq, par);
        let means = seq.means();
        assert_eq!(means.len(), SWEEP_TAUS.len());
        for pair in means.windows(2) {
            assert!(pair[1].labels_flipped <= pair[0].labels_flipped);
        }
        for r in &seq.rows {
            assert!((r.final_ratio - (10.0 + r.labels_flipped) / 400.0).abs() < 1e-12);
        }
        let csv = seq.to_csv();
        assert!(csv.starts_with(SWEEP_HEADER));
        assert_eq!(csv.lines().count(), 1 + 7 * 8 + 7);
    }

    proptest! {
        #[test]
        fn flip_probability_monotone(z in -10.0f64..10.0, dz in 0.0f64..5.0, tau in -5.0f64..5.0, dt in 0.0f64..5.0) {
            let p = flip_probability(z, false, tau);
            prop_assert!((0.0..1.0).contains(&p));
            prop_assert!(flip_probability(z + dz, false, tau) >= p);
            prop_assert!(flip_probability(z, false, tau + dt) <= p);
            if z <= tau {
                prop_assert_eq!(p, 0.0);
            }
        }

        #[test]
        fn relabel_only_adds_unsafe(labels in proptest::collection::vec(any::<bool>(), 2..80), seed in any::<u64>(), tau in -1.0f64..3.0) {
            prop_assume!(labels.iter().any(|&l| !l));
            let ws: Vec<Window> = labels.iter().enumerate().map(|(i, &l)| window(&format!("w{i}"), l)).collect();
            let scores: Vec<f64> = (0..labels.len()).map(|i| ((i * 31) % 17) as f64).collect();
            let (out, rep) = relabel(&ws, &scores, tau, seed).unwrap();
            let (_, again) = relabel(&ws, &scores, tau, seed).unwrap();
            prop_assert_eq!(&rep, &again);
            for ((a, b), r) in ws.iter().zip(&out).zip(&rep.records) {
                prop_assert!(!a.is_unsafe || b.is_unsafe);
                if r.flipped {
                    prop_assert!(!r.orig_unsafe && b.is_unsafe);
                }
                if r.z <= tau {
                    prop_assert!(!r.flipped);
                }
            }
            prop_assert_eq!(rep.labels_flipped(), rep.records.iter().filter(|r| r.flipped).count());
        }
    }
}
