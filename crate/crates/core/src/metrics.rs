//! Classification metrics and the statistical tests used to compare runs.
//! The positive class is "unsafe" throughout.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_predictions(predicted: &[bool], actual: &[bool]) -> Self {
        let mut c = ConfusionCounts::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// `(precision, recall, f1)`; every 0/0 is taken as 0.
    pub fn prf1(&self) -> (f64, f64, f64) {
        prf1(self)
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn prf1(c: &ConfusionCounts) -> (f64, f64, f64) {
    let tp = c.tp as f64;
    let precision = ratio(tp, tp + c.fp as f64);
    let recall = ratio(tp, tp + c.fn_ as f64);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    (precision, recall, f1)
}

/// Pearson correlation between `scores` and 0/1 `labels`, with a two-sided
/// p-value from Student's t with `n − 2` degrees of freedom.
pub fn point_biserial(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "point-biserial: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n = scores.len();
    if n < 3 {
        return Err(Error::UndefinedCorrelation(format!("need n >= 3, got {n}")));
    }
    let ones = labels.iter().filter(|&&l| l).count();
    if ones == 0 || ones == n {
        return Err(Error::UndefinedCorrelation("labels contain a single class".into()));
    }
    let nf = n as f64;
    let mean_s = scores.iter().sum::<f64>() / nf;
    let mean_l = ones as f64 / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&s, &l) in scores.iter().zip(labels) {
        let ds = s - mean_s;
        let dl = l as u8 as f64 - mean_l;
        sxy += ds * dl;
        sxx += ds * ds;
        syy += dl * dl;
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation("scores have zero variance".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = nf - 2.0;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok((r, p))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StatTestResult {
    /// Mann-Whitney U of the first sample: pairs with `a > b` plus half the ties.
    pub statistic: f64,
    pub p_value: f64,
    /// Vargha-Delaney Â₁₂: probability that a draw from `a` beats one from `b`.
    pub a12: f64,
}

/// Largest combined size for which tie-free inputs get an exact p-value.
pub const EXACT_MAX_TOTAL: usize = 30;

/// Two-sided Mann-Whitney U test. Tie-free inputs with at most
/// [`EXACT_MAX_TOTAL`] observations use the exact null distribution;
/// everything else uses the normal approximation with tie and continuity
/// corrections.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<StatTestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("Mann-Whitney U needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Domain("Mann-Whitney U input contains NaN".into()));
    }
    let na = a.len();
    let nb = b.len();
    let (ranks, tie_groups) = average_ranks(a, b);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u = rank_sum_a - (na * (na + 1)) as f64 / 2.0;
    let nanb = (na * nb) as f64;
    let a12 = u / nanb;

    let p_value = if tie_groups.is_empty() && na + nb <= EXACT_MAX_TOTAL {
        exact_p_value(na, nb, u.round() as usize)
    } else {
        let n = (na + nb) as f64;
        let tie_term: f64 = tie_groups
            .iter()
            .map(|&t| {
                let t = t as f64;
                t * t * t - t
            })
            .sum();
        let var = nanb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
        if var <= 0.0 {
            1.0
        } else {
            let z = ((u - nanb / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            (2.0 * normal.sf(z)).min(1.0)
        }
    };
    Ok(StatTestResult {
        statistic: u,
        p_value,
        a12,
    })
}

/// Average ranks (1-based) of `a ‖ b`, plus the sizes of tie groups (> 1).
fn average_ranks(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut idx: Vec<usize> = (0..all.len()).collect();
    idx.sort_by(|&i, &j| all[i].total_cmp(&all[j]));
    let mut ranks = vec![0.0; all.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && all[idx[j]] == all[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = avg;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

/// Frequencies of U under the null, via the recurrence
/// `f(m, n, u) = f(m−1, n, u−n) + f(m, n−1, u)`.
fn u_frequencies(m: usize, n: usize) -> Vec<f64> {
    // table[j] holds f(i, j, ·) for the current i.
    let mut table: Vec<Vec<f64>> = (0..=n).map(|_| vec![1.0]).collect();
    for i in 1..=m {
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        next.push(vec![1.0]);
        for j in 1..=n {
            let mut f = vec![0.0; i * j + 1];
            // Largest element from the first sample: it beats all j others.
            for (u, &c) in table[j].iter().enumerate() {
                f[u + j] += c;
            }
            // Largest element from the second sample.
            for (u, &c) in next[j - 1].iter().enumerate() {
                f[u] += c;
            }
            next.push(f);
        }
        table = next;
    }
    table.pop().expect("n + 1 rows")
}

fn exact_p_value(m: usize, n: usize, u: usize) -> f64 {
    let freq = u_frequencies(m, n);
    let total: f64 = freq.iter().sum();
    let lower: f64 = freq[..=u.min(freq.len() - 1)].iter().sum();
    let upper: f64 = freq[u.min(freq.len() - 1)..].iter().sum();
    (2.0 * lower.min(upper) / total).min(1.0)
}

/// Â₁₂ by direct pair counting.
pub fn a12(a: &[f64], b: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &x in a {
        for &y in b {
            if x > y {
                wins += 1.0;
            } else if x == y {
                wins += 0.5;
            }
        }
    }
    wins / (a.len() * b.len()) as f64
}

/// Negligible / Small / Medium / Large on `|Â₁₂ − 0.5| + 0.5`.
pub fn effect_label(a12: f64) -> &'static str {
    let m = (a12 - 0.5).abs() + 0.5;
    if m < 0.56 {
        "N"
    } else if m < 0.64 {
        "S"
    } else if m < 0.71 {
        "M"
    } else {
        "L"
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunMetrics {
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn evaluate_run(predicted: &[bool], actual: &[bool]) -> Result<RunMetrics> {
    if predicted.len() != actual.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    let counts = ConfusionCounts::from_predictions(predicted, actual);
    let (precision, recall, f1) = counts.prf1();
    Ok(RunMetrics {
        counts,
        precision,
        recall,
        f1,
    })
}

/// All runs of one method, plus its efficiency figures.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodRuns {
    pub method: String,
    pub runs: Vec<RunMetrics>,
    pub params: usize,
    pub latency_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub precision: (f64, f64),
    pub recall: (f64, f64),
    pub f1: (f64, f64),
    /// Against the reference method; `None` on the reference row.
    pub test: Option<StatTestResult>,
    pub params: usize,
    pub latency_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

pub const COMPARISON_HEADER: &str = "method,precision_mean,precision_std,recall_mean,recall_std,f1_mean,f1_std,p_value,a12,effect_label,params,latency_s";

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(COMPARISON_HEADER);
        out.push('\n');
        for r in &self.rows {
            let (p, a, e) = match &r.test {
                Some(t) => (
                    format!("{:.6}", t.p_value),
                    format!("{:.6}", t.a12),
                    effect_label(t.a12).to_owned(),
                ),
                None => (String::new(), String::new(), String::new()),
            };
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{:.9}\n",
                r.method,
                r.precision.0,
                r.precision.1,
                r.recall.0,
                r.recall.1,
                r.f1.0,
                r.f1.1,
                p,
                a,
                e,
                r.params,
                r.latency_s
            ));
        }
        out
    }

    pub fn row(&self, method: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Mean and sample standard deviation (n − 1).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Builds the comparison table; every non-reference method is tested
/// against `reference` on per-run F1 (Â₁₂ is the reference's win rate).
pub fn aggregate_runs(reference: &MethodRuns, others: &[MethodRuns]) -> Result<ComparisonTable> {
    for m in std::iter::once(reference).chain(others) {
        if m.runs.len() < 2 {
            return Err(Error::Config(format!(
                "method {} has {} run(s); aggregation needs at least 2",
                m.method,
                m.runs.len()
            )));
        }
    }
    let f1s = |m: &MethodRuns| m.runs.iter().map(|r| r.f1).collect::<Vec<_>>();
    let ref_f1 = f1s(reference);
    let row = |m: &MethodRuns, test: Option<StatTestResult>| {
        let col = |f: fn(&RunMetrics) -> f64| mean_std(&m.runs.iter().map(f).collect::<Vec<_>>());
        ComparisonRow {
            method: m.method.clone(),
            precision: col(|r| r.precision),
            recall: col(|r| r.recall),
            f1: col(|r| r.f1),
            test,
            params: m.params,
            latency_s: m.latency_s,
        }
    };
    let mut rows = vec![row(reference, None)];
    for m in others {
        let t = mann_whitney_u(&ref_f1, &f1s(m))?;
        rows.push(row(m, Some(t)));
    }
    Ok(ComparisonTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn prf1_examples() {
        let c = ConfusionCounts { tp: 2, tn: 0, fp: 1, fn_: 1 };
        let (p, r, f) = c.prf1();
        for v in [p, r, f] {
            assert!((v - 2.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(ConfusionCounts::default().prf1(), (0.0, 0.0, 0.0));
        let perfect = ConfusionCounts::from_predictions(&[true, false, true], &[true, false, true]);
        assert_eq!(perfect.prf1(), (1.0, 1.0, 1.0));
        assert_eq!(perfect.total(), 3);
    }

    /// Pearson correlation written directly from covariance sums.
    fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for i in 0..x.len() {
            cov += (x[i] - mx) * (y[i] - my);
            vx += (x[i] - mx).powi(2);
            vy += (y[i] - my).powi(2);
        }
        cov / (vx.sqrt() * vy.sqrt())
    }

    #[test]
    fn point_biserial_examples() {
        let (r, p) = point_biserial(&[0.0, 0.0, 1.0, 1.0], &[false, false, true, true]).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
        assert_eq!(p, 0.0);
        let labels = [false, true, false, true];
        let (r, _) = point_biserial(&[1.0, 2.0, 3.0, 4.0], &labels).unwrap();
        // 1/√5 by hand: cov = 0.25, sd_x = √1.25, sd_y = 0.5.
        assert!((r - 0.4472135954999579).abs() < 1e-12);
        let (rn, _) = point_biserial(&[-1.0, -2.0, -3.0, -4.0], &labels).unwrap();
        assert_eq!(rn, -r);
        assert!(matches!(
            point_biserial(&[1.0, 2.0, 3.0], &[true, true, true]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(matches!(
            point_biserial(&[1.0, 1.0, 1.0], &[true, false, true]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn point_biserial_p_value_reference() {
        // r = 0.4472, n = 4: t = r·√(2/(1−r²)) = 0.7071, two-sided p ≈ 0.5528
        // (Student t, 2 df: p = 1 − t/√(2 + t²)).
        let (_, p) = point_biserial(&[1.0, 2.0, 3.0, 4.0], &[false, true, false, true]).unwrap();
        let t: f64 = 0.5f64.sqrt();
        let expect = 1.0 - t / (2.0 + t * t).sqrt();
        assert!((p - expect).abs() < 1e-9, "{p} vs {expect}");
    }

    #[test]
    fn mwu_examples() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(r.a12, 1.0);
        let same = [1.0, 2.0, 3.0, 4.0];
        let r = mann_whitney_u(&same, &same).unwrap();
        assert_eq!(r.a12, 0.5);
        assert_eq!(r.p_value, 1.0);
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b: Vec<f64> = a.iter().map(|v| v + 10.0).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        assert_eq!(r.a12, 0.0);
        // Exact: only 1 of C(10,5) = 252 arrangements reaches U = 0; two-sided 2/252.
        assert!((r.p_value - 2.0 / 252.0).abs() < 1e-12);
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }

    #[test]
    fn frequencies_sum_to_binomial() {
        let f = u_frequencies(3, 4);
        assert_eq!(f.len(), 13);
        assert_eq!(f.iter().sum::<f64>(), 35.0);
        // Symmetric around m·n/2.
        for u in 0..f.len() {
            assert_eq!(f[u], f[f.len() - 1 - u]);
        }
    }

    #[test]
    fn large_samples_use_normal_approximation() {
        let a: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..40).map(|i| i as f64 + 0.5).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        assert!(r.p_value > 0.5);
        let c: Vec<f64> = (0..40).map(|i| i as f64 + 100.0).collect();
        assert!(mann_whitney_u(&a, &c).unwrap().p_value < 1e-10);
    }

    #[test]
    fn effect_labels() {
        assert_eq!(effect_label(0.5), "N");
        assert_eq!(effect_label(0.6), "S");
        assert_eq!(effect_label(0.3), "M");
        assert_eq!(effect_label(1.0), "L");
        assert_eq!(effect_label(0.0), "L");
    }

    fn runs(f1s: &[f64]) -> Vec<RunMetrics> {
        f1s.iter()
            .map(|&f1| RunMetrics {
                counts: ConfusionCounts::default(),
                precision: f1,
                recall: f1,
                f1,
            })
            .collect()
    }

    #[test]
    fn aggregation() {
        let ours = MethodRuns { method: "ulnr".into(), runs: runs(&[0.8; 30]), params: 10, latency_s: 1e-3 };
        let plain = MethodRuns { method: "plain".into(), runs: runs(&[0.6; 30]), params: 10, latency_s: 1e-3 };
        let t = aggregate_runs(&ours, &[plain]).unwrap();
        assert!((t.rows[0].f1.0 - 0.8).abs() < 1e-12 && t.rows[0].f1.1 < 1e-12);
        let test = t.rows[1].test.unwrap();
        assert_eq!(test.a12, 1.0);
        assert!(test.p_value < 0.001);
        let csv = t.to_csv();
        assert!(csv.starts_with(COMPARISON_HEADER));
        assert!(csv.lines().nth(2).unwrap().contains(",L,"));

        let single = MethodRuns { method: "x".into(), runs: runs(&[0.5]), params: 0, latency_s: 0.0 };
        assert!(aggregate_runs(&single, &[]).is_err());
        assert!(evaluate_run(&[true], &[true, false]).is_err());
    }

    proptest! {
        #[test]
        fn prf1_permutation_invariant(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 0..50), seed in 0u64..100) {
            use rand::seq::SliceRandom;
            let (p, a): (Vec<bool>, Vec<bool>) = pairs.iter().copied().unzip();
            let base = evaluate_run(&p, &a).unwrap();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut crate::rng::rng_from_seed(seed));
            let (p2, a2): (Vec<bool>, Vec<bool>) = shuffled.into_iter().unzip();
            prop_assert_eq!(base, evaluate_run(&p2, &a2).unwrap());
        }

        #[test]
        fn point_biserial_equals_pearson(
            data in proptest::collection::vec((-100.0f64..100.0, any::<bool>()), 3..60)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let (r, p) = point_biserial(&scores, &labels).unwrap();
            let y: Vec<f64> = labels.iter().map(|&l| l as u8 as f64).collect();
            prop_assert!((r - pearson_oracle(&scores, &y)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn a12_symmetry(a in proptest::collection::vec(-50.0f64..50.0, 1..20), b in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
            let r1 = mann_whitney_u(&a, &b).unwrap();
            let r2 = mann_whitney_u(&b, &a).unwrap();
            prop_assert!((r1.a12 + r2.a12 - 1.0).abs() < 1e-12);
            prop_assert!((r1.a12 - a12(&a, &b)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&r1.p_value));
        }
    }
}
