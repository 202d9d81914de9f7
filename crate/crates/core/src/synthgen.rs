//! Deterministic synthetic flights covering the four behaviour archetypes:
//! certain/uncertain × safe/unsafe.
//!
//! Flights are smooth random-walk paths. Unsafe flights slow down on a
//! straight leg that passes a sphere closer than the safety threshold for
//! a planned number of windows; uncertain behaviour is a zigzag yaw
//! oscillation. Labels are always recomputed with the rule functions and
//! any disagreement with the plan is counted in the report.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{derive_seed, mix_seed, rng_from_seed, Rng};
use crate::telemetry::{
    fit_channel_stats, label_safety, label_uncertainty, read_windows, split_sequential, window_flight,
    write_file, write_flight, write_windows, ChannelStats, DatasetSplit, Flight, Obstacle, TelemetrySample,
    UncertaintyRule, Window, CHANNEL_NAMES, SAFETY_THRESHOLD_M, WINDOW_LEN,
};

const CRUISE_SPEED: (f64, f64) = (1.8, 2.4);
const SLOW_SPEED: (f64, f64) = (0.6, 0.9);
const WEAK_AMPLITUDE: (f64, f64) = (0.34, 0.42);
const STRONG_AMPLITUDE: (f64, f64) = (0.55, 0.75);
const MAX_UNSAFE_WINDOWS: usize = 3;
/// Samples between the edge of a planned unsafe window and the unsafe span.
const EDGE_MARGIN: f64 = 4.0;
const SAFE_CLEARANCE_M: f64 = 2.5;
const MAX_HEADING: f64 = 0.9;
const MAX_ATTEMPTS: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchetypeWeights {
    pub certain_safe: f64,
    pub uncertain_safe: f64,
    pub certain_unsafe: f64,
    pub uncertain_unsafe: f64,
}

impl Default for ArchetypeWeights {
    fn default() -> Self {
        ArchetypeWeights {
            certain_safe: 0.9,
            uncertain_safe: 0.1,
            certain_unsafe: 0.25,
            uncertain_unsafe: 0.75,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_flights: usize,
    pub flight_len: usize,
    pub window_stride: usize,
    pub sample_interval_ms: i64,
    /// Target safe:unsafe window ratio.
    pub imbalance_ratio: f64,
    /// Mean number of background obstacles per flight.
    pub obstacle_density: f64,
    /// Probability that a safe flight contains a slow straight segment.
    pub slow_segment_prob: f64,
    pub weights: ArchetypeWeights,
    pub position_noise: f64,
    pub heading_noise: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_flights: 200,
            flight_len: 500,
            window_stride: WINDOW_LEN,
            sample_interval_ms: 100,
            imbalance_ratio: 46.0,
            obstacle_density: 1.0,
            slow_segment_prob: 0.9,
            weights: ArchetypeWeights::default(),
            position_noise: 0.01,
            heading_noise: 0.01,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn windows_per_flight(&self) -> usize {
        if self.flight_len < WINDOW_LEN || self.window_stride == 0 {
            0
        } else {
            (self.flight_len - WINDOW_LEN) / self.window_stride + 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("generator: {m}")));
        if self.n_flights == 0 {
            return bad("n_flights must be >= 1".into());
        }
        if self.window_stride != WINDOW_LEN {
            // Planned labels are per window; overlapping windows would blur them.
            return bad(format!("window_stride must equal the window length ({WINDOW_LEN})"));
        }
        if self.windows_per_flight() == 0 {
            return bad(format!("flight_len must be >= {WINDOW_LEN}"));
        }
        if self.sample_interval_ms <= 0 {
            return bad("sample_interval_ms must be > 0".into());
        }
        if !(self.imbalance_ratio >= 1.0) {
            return bad(format!("imbalance_ratio must be >= 1, got {}", self.imbalance_ratio));
        }
        let w = self.weights;
        let ws = [w.certain_safe, w.uncertain_safe, w.certain_unsafe, w.uncertain_unsafe];
        if ws.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || ws.iter().sum::<f64>() <= 0.0 {
            return bad("archetype weights must be non-negative with a positive sum".into());
        }
        for (name, v) in [
            ("obstacle_density", self.obstacle_density),
            ("position_noise", self.position_noise),
            ("heading_noise", self.heading_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.slow_segment_prob) {
            return bad("slow_segment_prob must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Archetype {
    CertainSafe,
    UncertainSafe,
    CertainUnsafe,
    UncertainUnsafe,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [
        Archetype::CertainSafe,
        Archetype::UncertainSafe,
        Archetype::CertainUnsafe,
        Archetype::UncertainUnsafe,
    ];

    pub fn code(self) -> char {
        match self {
            Archetype::CertainSafe => 'a',
            Archetype::UncertainSafe => 'b',
            Archetype::CertainUnsafe => 'c',
            Archetype::UncertainUnsafe => 'd',
        }
    }

    fn index(self) -> usize {
        self.code() as usize - 'a' as usize
    }

    pub fn is_unsafe(self) -> bool {
        matches!(self, Archetype::CertainUnsafe | Archetype::UncertainUnsafe)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlightPlan {
    pub index: usize,
    pub archetype: Archetype,
    /// Number of windows that should violate the safety threshold.
    pub unsafe_windows: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenReport {
    pub seed: u64,
    pub flights: usize,
    pub windows: usize,
    /// `cells[unsafe][uncertain]` window counts from the rule labellers.
    pub cells: [[usize; 2]; 2],
    pub archetypes: [usize; 4],
    pub planned_unsafe: usize,
    pub planned_uncertain: usize,
    /// Windows whose rule label differs from the generator's intent.
    pub safety_mismatches: usize,
    pub uncertainty_mismatches: usize,
    /// Flight regenerations needed to realise the plan.
    pub retries: usize,
}

impl GenReport {
    pub fn unsafe_windows(&self) -> usize {
        self.cells[1][0] + self.cells[1][1]
    }

    pub fn safe_windows(&self) -> usize {
        self.cells[0][0] + self.cells[0][1]
    }

    /// Safe:unsafe ratio; infinite when no unsafe window exists.
    pub fn realized_ratio(&self) -> f64 {
        self.safe_windows() as f64 / self.unsafe_windows() as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "flights {}", self.flights);
        let _ = writeln!(s, "windows {}", self.windows);
        let _ = writeln!(s, "safe_certain {}", self.cells[0][0]);
        let _ = writeln!(s, "safe_uncertain {}", self.cells[0][1]);
        let _ = writeln!(s, "unsafe_certain {}", self.cells[1][0]);
        let _ = writeln!(s, "unsafe_uncertain {}", self.cells[1][1]);
        let _ = writeln!(s, "realized_ratio {}", self.realized_ratio());
        for a in Archetype::ALL {
            let _ = writeln!(s, "archetype_{} {}", a.code(), self.archetypes[a.index()]);
        }
        let _ = writeln!(s, "planned_unsafe {}", self.planned_unsafe);
        let _ = writeln!(s, "planned_uncertain {}", self.planned_uncertain);
        let _ = writeln!(s, "safety_mismatches {}", self.safety_mismatches);
        let _ = writeln!(s, "uncertainty_mismatches {}", self.uncertainty_mismatches);
        let _ = writeln!(s, "retries {}", self.retries);
        s
    }
}

fn pick_weighted(rng: &mut Rng, a: (Archetype, f64), b: (Archetype, f64)) -> Archetype {
    if rng.random::<f64>() * (a.1 + b.1) < a.1 {
        a.0
    } else {
        b.0
    }
}

/// Decides every flight's archetype and planned unsafe-window count so the
/// dataset hits the target ratio exactly (when realised).
pub fn plan_flights(config: &GenConfig) -> Result<Vec<FlightPlan>> {
    config.validate()?;
    let w = config.weights;
    let per_flight = config.windows_per_flight();
    let total = config.n_flights * per_flight;
    let unsafe_weight = w.certain_unsafe + w.uncertain_unsafe;
    let safe_weight = w.certain_safe + w.uncertain_safe;
    let target_unsafe = if unsafe_weight > 0.0 {
        (total as f64 / (config.imbalance_ratio + 1.0)).round() as usize
    } else {
        0
    };
    let mut rng = rng_from_seed(derive_seed(config.seed, "synthgen-plan"));
    let mut ks: Vec<usize> = Vec::new();
    if target_unsafe > 0 {
        if per_flight < 2 * MAX_UNSAFE_WINDOWS + 4 {
            return Err(Error::Config(format!(
                "generator: flights of {per_flight} windows are too short to host an approach"
            )));
        }
        let m = target_unsafe.div_ceil(2);
        let max_fraction = MAX_UNSAFE_WINDOWS as f64 / per_flight as f64;
        if m > config.n_flights {
            return Err(Error::Config(format!(
                "generator: ratio {}:1 needs {target_unsafe} unsafe windows ({:.3} of the data); at most {max_fraction:.3} is reachable with {} flights",
                config.imbalance_ratio,
                target_unsafe as f64 / total as f64,
                config.n_flights
            )));
        }
        ks = vec![target_unsafe / m; m];
        for k in 0..target_unsafe - ks.iter().sum::<usize>() {
            ks[k] += 1;
        }
        // Spread the sizes without changing the total.
        for _ in 0..m {
            let i = rng.random_range(0..m);
            let j = rng.random_range(0..m);
            if i != j && ks[i] < MAX_UNSAFE_WINDOWS && ks[j] > 1 {
                ks[i] += 1;
                ks[j] -= 1;
            }
        }
    }
    let m = ks.len();
    if m < config.n_flights && safe_weight <= 0.0 {
        return Err(Error::Config(
            "generator: safe flights are needed but both safe archetype weights are zero".into(),
        ));
    }
    // Unsafe flights evenly spaced so every sequential split receives some.
    let mut unsafe_slot = vec![None; config.n_flights];
    for (j, &k) in ks.iter().enumerate() {
        let i = ((j as f64 + 0.5) * config.n_flights as f64 / m as f64) as usize;
        unsafe_slot[i.min(config.n_flights - 1)] = Some(k);
    }
    Ok((0..config.n_flights)
        .map(|index| match unsafe_slot[index] {
            Some(k) => FlightPlan {
                index,
                archetype: pick_weighted(
                    &mut rng,
                    (Archetype::CertainUnsafe, w.certain_unsafe),
                    (Archetype::UncertainUnsafe, w.uncertain_unsafe),
                ),
                unsafe_windows: k,
            },
            None => FlightPlan {
                index,
                archetype: pick_weighted(
                    &mut rng,
                    (Archetype::CertainSafe, w.certain_safe),
                    (Archetype::UncertainSafe, w.uncertain_safe),
                ),
                unsafe_windows: 0,
            },
        })
        .collect())
}

fn uniform(rng: &mut Rng, range: (f64, f64)) -> f64 {
    rng.random_range(range.0..range.1)
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Per-sample controls of one flight.
struct Profile {
    speed: Vec<f64>,
    straight: Vec<bool>,
    yaw_amplitude: Vec<f64>,
    planned_unsafe: Vec<bool>,
    planned_uncertain: Vec<bool>,
    /// `(first unsafe window, count)` for unsafe flights.
    approach: Option<(usize, usize)>,
}

fn mark(v: &mut [bool], windows: std::ops::Range<usize>) {
    for w in windows {
        v[w] = true;
    }
}

fn build_profile(config: &GenConfig, plan: &FlightPlan, rng: &mut Rng) -> Profile {
    let n = config.flight_len;
    let nw = config.windows_per_flight();
    let cruise = uniform(rng, CRUISE_SPEED);
    let mut p = Profile {
        speed: vec![cruise; n],
        straight: vec![false; n],
        yaw_amplitude: vec![0.0; n],
        planned_unsafe: vec![false; nw],
        planned_uncertain: vec![false; nw],
        approach: None,
    };
    let slow = uniform(rng, SLOW_SPEED);
    let set_slow = |p: &mut Profile, windows: std::ops::Range<usize>| {
        let (a, b) = (windows.start * WINDOW_LEN, (windows.end * WINDOW_LEN).min(n));
        // Ramp down over the preceding half window, back up after.
        let ramp = WINDOW_LEN / 2;
        for k in a.saturating_sub(ramp)..a {
            let f = (a - k) as f64 / ramp as f64;
            p.speed[k] = slow + (cruise - slow) * f;
            p.straight[k] = true;
        }
        for k in a..b {
            p.speed[k] = slow;
            p.straight[k] = true;
        }
        for k in b..(b + ramp).min(n) {
            let f = (k - b + 1) as f64 / ramp as f64;
            p.speed[k] = slow + (cruise - slow) * f;
        }
    };
    let set_yaw = |p: &mut Profile, windows: std::ops::Range<usize>, amp: f64| {
        for k in windows.start * WINDOW_LEN..(windows.end * WINDOW_LEN).min(n) {
            p.yaw_amplitude[k] = amp;
        }
        mark(&mut p.planned_uncertain, windows);
    };

    match plan.archetype {
        Archetype::CertainSafe | Archetype::UncertainSafe => {
            if rng.random::<f64>() < config.slow_segment_prob {
                let len = rng.random_range(1..=MAX_UNSAFE_WINDOWS + 2).min(nw - 1);
                let start = rng.random_range(1..=nw - len);
                set_slow(&mut p, start..start + len);
            }
            if plan.archetype == Archetype::UncertainSafe {
                let len = rng.random_range(1..=2).min(nw);
                let start = rng.random_range(0..=nw - len);
                let amp = uniform(rng, WEAK_AMPLITUDE);
                set_yaw(&mut p, start..start + len, amp);
            }
        }
        Archetype::CertainUnsafe | Archetype::UncertainUnsafe => {
            let k = plan.unsafe_windows;
            let before = rng.random_range(1..=2);
            let after = rng.random_range(1..=2);
            let first = rng.random_range(before + 1..=nw - k - after - 1);
            set_slow(&mut p, first - before..first + k + after);
            mark(&mut p.planned_unsafe, first..first + k);
            if plan.archetype == Archetype::UncertainUnsafe {
                let amp = uniform(rng, STRONG_AMPLITUDE);
                set_yaw(&mut p, first - before..first + k + after, amp);
            }
            p.approach = Some((first, k));
        }
    }
    p
}

/// Noise-free path: positions and base heading per sample.
fn integrate_path(config: &GenConfig, profile: &Profile, rng: &mut Rng) -> (Vec<[f64; 3]>, Vec<f64>) {
    let n = config.flight_len;
    let dt = config.sample_interval_ms as f64 / 1000.0;
    let mut pos = [uniform(rng, (-15.0, 15.0)), uniform(rng, (-15.0, 15.0)), uniform(rng, (4.0, 12.0))];
    let mut psi = uniform(rng, (-MAX_HEADING, MAX_HEADING));
    let mut omega = 0.0;
    let mut vz = 0.0;
    let mut path = Vec::with_capacity(n);
    let mut heading = Vec::with_capacity(n);
    for k in 0..n {
        path.push(pos);
        heading.push(psi);
        if profile.straight[k] {
            omega = 0.0;
            vz = 0.0;
        } else {
            omega += -0.5 * omega * dt + 0.15 * dt.sqrt() * normal(rng);
            omega = omega.clamp(-0.5, 0.5);
            vz += -0.5 * vz * dt + 0.05 * dt.sqrt() * normal(rng);
            vz = vz.clamp(-0.3, 0.3);
        }
        psi += omega * dt;
        if psi.abs() > MAX_HEADING {
            psi = psi.signum() * MAX_HEADING;
            omega = -omega;
        }
        let v = profile.speed[k];
        pos[0] += v * dt * psi.cos();
        pos[1] += v * dt * psi.sin();
        pos[2] = (pos[2] + vz * dt).max(2.0);
    }
    (path, heading)
}

fn min_surface_distance(path: &[[f64; 3]], o: &Obstacle) -> f64 {
    path.iter()
        .map(|&p| o.surface_distance(p))
        .fold(f64::INFINITY, f64::min)
}

/// Sphere beside the straight leg so that the path is strictly inside the
/// safety threshold exactly while `|k − centre| < half` samples.
fn approach_obstacle(path: &[[f64; 3]], heading: &[f64], first: usize, k: usize, rng: &mut Rng) -> Obstacle {
    let a = first * WINDOW_LEN;
    let b = (first + k) * WINDOW_LEN;
    let centre = (a + b - 1) as f64 / 2.0;
    let half_samples = (b - a - 1) as f64 / 2.0 - EDGE_MARGIN;
    let i0 = centre.floor() as usize;
    let frac = centre - i0 as f64;
    let p0 = path[i0];
    let p1 = path[i0 + 1];
    let mid = [
        p0[0] + frac * (p1[0] - p0[0]),
        p0[1] + frac * (p1[1] - p0[1]),
        p0[2],
    ];
    let step = ((p1[0] - p0[0]).powi(2) + (p1[1] - p0[1]).powi(2)).sqrt();
    let h = step * half_samples;
    let t = SAFETY_THRESHOLD_M;
    // Need h² < (R + t)² − R², i.e. R > (h² − t²) / 2t.
    let r_min = ((h * h - t * t) / (2.0 * t) + 0.2).max(0.5);
    let radius = uniform(rng, (r_min, r_min + 1.5));
    // Closest surface distance d solves (R + t)² − (R + d)² = h².
    let d_min = ((radius + t).powi(2) - h * h).sqrt() - radius;
    let psi = heading[i0];
    let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let normal = [-psi.sin() * side, psi.cos() * side];
    let off = radius + d_min;
    Obstacle::Sphere {
        center: [mid[0] + normal[0] * off, mid[1] + normal[1] * off, mid[2]],
        radius,
    }
}

/// Background obstacles kept at least the safe clearance from the path.
fn background_obstacles(config: &GenConfig, path: &[[f64; 3]], rng: &mut Rng) -> Vec<Obstacle> {
    let count = (config.obstacle_density + rng.random::<f64>()).floor() as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..8 {
            let anchor = path[rng.random_range(0..path.len())];
            let radius = uniform(rng, (0.5, 2.5));
            let angle = uniform(rng, (-PI, PI));
            let dist = radius + SAFE_CLEARANCE_M + uniform(rng, (0.5, 6.0));
            let o = if rng.random::<bool>() {
                Obstacle::Sphere {
                    center: [anchor[0] + dist * angle.cos(), anchor[1] + dist * angle.sin(), anchor[2]],
                    radius,
                }
            } else {
                let hx = uniform(rng, (0.3, radius));
                let hy = uniform(rng, (0.3, radius));
                Obstacle::Box {
                    center: [anchor[0] + dist * angle.cos(), anchor[1] + dist * angle.sin(), anchor[2]],
                    half_extents: [hx, hy, uniform(rng, (1.0, 4.0))],
                }
            };
            if min_surface_distance(path, &o) >= SAFE_CLEARANCE_M + 0.1 {
                out.push(o);
                break;
            }
        }
    }
    out
}

struct FlightOutcome {
    flight: Flight,
    planned_unsafe: Vec<bool>,
    planned_uncertain: Vec<bool>,
    retries: usize,
}

fn flight_id(index: usize) -> String {
    format!("f{index:04}")
}

fn synth_attempt(config: &GenConfig, plan: &FlightPlan, seed: u64) -> (Flight, Vec<bool>, Vec<bool>) {
    let mut rng = rng_from_seed(seed);
    let profile = build_profile(config, plan, &mut rng);
    let (path, heading) = integrate_path(config, &profile, &mut rng);
    let mut obstacles = Vec::new();
    if let Some((first, k)) = profile.approach {
        obstacles.push(approach_obstacle(&path, &heading, first, k, &mut rng));
    }
    obstacles.extend(background_obstacles(config, &path, &mut rng));

    let dt_ms = config.sample_interval_ms;
    let mut samples = Vec::with_capacity(path.len());
    for (k, (p, &psi)) in path.iter().zip(&heading).enumerate() {
        let amp = profile.yaw_amplitude[k];
        // Zigzag 0, +A, 0, −A, ... with a small matching sideways wobble.
        let wave = [0.0, 1.0, 0.0, -1.0][k % 4];
        let yaw = psi + amp * wave + config.heading_noise * normal(&mut rng);
        let lateral = 0.02 * amp * wave;
        samples.push(TelemetrySample {
            t: k as i64 * dt_ms,
            r: crate::telemetry::wrap_angle(yaw),
            x: p[0] - lateral * psi.sin() + config.position_noise * normal(&mut rng),
            y: p[1] + lateral * psi.cos() + config.position_noise * normal(&mut rng),
            z: p[2] + config.position_noise * normal(&mut rng),
        });
    }
    (
        Flight {
            flight_id: flight_id(plan.index),
            samples,
            obstacles,
        },
        profile.planned_unsafe,
        profile.planned_uncertain,
    )
}

fn realised_safety(flight: &Flight) -> Vec<bool> {
    flight
        .samples
        .chunks_exact(WINDOW_LEN)
        .map(|c| {
            let rows: Vec<[f64; 4]> = c.iter().map(TelemetrySample::row).collect();
            label_safety(&rows, &flight.obstacles, SAFETY_THRESHOLD_M)
        })
        .collect()
}

fn synth_flight(config: &GenConfig, plan: &FlightPlan, seed: u64) -> FlightOutcome {
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        let (flight, pu, pc) = synth_attempt(config, plan, mix_seed(seed, attempt));
        if realised_safety(&flight) == pu {
            return FlightOutcome {
                flight,
                planned_unsafe: pu,
                planned_uncertain: pc,
                retries: attempt as usize,
            };
        }
        last = Some((flight, pu, pc));
    }
    let (flight, pu, pc) = last.expect("at least one attempt");
    FlightOutcome {
        flight,
        planned_unsafe: pu,
        planned_uncertain: pc,
        retries: MAX_ATTEMPTS as usize,
    }
}

/// Windows every flight and labels each window with the rule functions.
pub fn label_windows(flights: &[Flight], stride: usize, exec: Exec) -> Result<Vec<Window>> {
    let rule = UncertaintyRule::default();
    let per_flight = exec.map(flights, |f| -> Result<Vec<Window>> {
        let mut ws = window_flight(f, WINDOW_LEN, stride)?;
        for w in &mut ws {
            w.is_unsafe = label_safety(&w.values, &f.obstacles, SAFETY_THRESHOLD_M);
            w.is_uncertain = label_uncertainty(&w.values, rule);
        }
        Ok(ws)
    });
    let mut out = Vec::new();
    for ws in per_flight {
        out.extend(ws?);
    }
    Ok(out)
}

/// Generates all flights; the report's counts come from the rule labellers.
pub fn generate(config: &GenConfig, exec: Exec) -> Result<(Vec<Flight>, GenReport)> {
    let plans = plan_flights(config)?;
    let base = derive_seed(config.seed, "synthgen-flight");
    let outcomes = exec.map(&plans, |p| synth_flight(config, p, mix_seed(base, p.index as u64)));
    let mut report = GenReport {
        seed: config.seed,
        flights: plans.len(),
        ..GenReport::default()
    };
    for p in &plans {
        report.archetypes[p.archetype.index()] += 1;
        report.planned_unsafe += p.unsafe_windows;
    }
    let mut flights = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let windows = label_windows(std::slice::from_ref(&o.flight), config.window_stride, Exec::Sequential)?;
        for (i, w) in windows.iter().enumerate() {
            report.windows += 1;
            report.cells[w.is_unsafe as usize][w.is_uncertain as usize] += 1;
            report.safety_mismatches += (w.is_unsafe != o.planned_unsafe[i]) as usize;
            report.uncertainty_mismatches += (w.is_uncertain != o.planned_uncertain[i]) as usize;
        }
        report.planned_uncertain += o.planned_uncertain.iter().filter(|&&u| u).count();
        report.retries += o.retries;
        flights.push(o.flight);
    }
    Ok((flights, report))
}

/// An on-disk benchmark: split windows plus training channel statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub split: DatasetSplit,
    pub channel_stats: ChannelStats,
    pub report: GenReport,
}

pub const SPLIT_RATIOS: (u32, u32, u32) = (8, 1, 1);

/// Generates, windows, labels and splits in memory.
pub fn build_benchmark(config: &GenConfig, exec: Exec) -> Result<(Vec<Flight>, Benchmark)> {
    let (flights, report) = generate(config, exec)?;
    let windows = label_windows(&flights, config.window_stride, exec)?;
    let split = split_sequential(windows, SPLIT_RATIOS)?;
    let channel_stats = fit_channel_stats(&split.train)?;
    Ok((
        flights,
        Benchmark {
            split,
            channel_stats,
            report,
        },
    ))
}

fn channel_stats_csv(stats: &ChannelStats) -> String {
    let mut s = String::from("channel,mean,std\n");
    for (c, name) in CHANNEL_NAMES.iter().enumerate() {
        let _ = writeln!(s, "{name},{},{}", stats.mean[c], stats.std[c]);
    }
    s
}

pub fn split_paths(dir: &Path) -> [PathBuf; 3] {
    let w = dir.join("windows");
    [w.join("train.csv"), w.join("validation.csv"), w.join("test.csv")]
}

/// Writes `flights/`, `windows/{train,validation,test}.csv`,
/// `channel_stats.csv`, `gen_report.txt` and `manifest.txt` under `dir`.
/// An existing non-empty directory is refused unless `force` is set.
pub fn make_benchmark(config: &GenConfig, dir: &Path, force: bool, exec: Exec) -> Result<Benchmark> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::AlreadyExists(dir.to_path_buf()));
        }
        for sub in ["flights", "windows"] {
            let p = dir.join(sub);
            if p.exists() {
                fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let (flights, bench) = build_benchmark(config, exec)?;
    let flight_dir = dir.join("flights");
    fs::create_dir_all(&flight_dir).map_err(|e| Error::io(&flight_dir, e))?;
    fs::create_dir_all(dir.join("windows")).map_err(|e| Error::io(dir.join("windows"), e))?;
    for f in &flights {
        write_flight(&flight_dir, f)?;
    }
    let [tr, va, te] = split_paths(dir);
    write_windows(&tr, &bench.split.train)?;
    write_windows(&va, &bench.split.validation)?;
    write_windows(&te, &bench.split.test)?;
    write_file(&dir.join("channel_stats.csv"), channel_stats_csv(&bench.channel_stats).as_bytes())?;
    write_file(&dir.join("gen_report.txt"), bench.report.to_text().as_bytes())?;
    let (n_tr, n_va, n_te) = bench.split.sizes();
    let mut manifest = String::new();
    let _ = writeln!(manifest, "kind benchmark");
    let _ = writeln!(manifest, "seed {}", config.seed);
    let _ = writeln!(manifest, "train_windows {n_tr}");
    let _ = writeln!(manifest, "validation_windows {n_va}");
    let _ = writeln!(manifest, "test_windows {n_te}");
    let _ = writeln!(manifest, "[config]");
    manifest.push_str(
        &toml::to_string(config).map_err(|e| Error::Config(format!("cannot serialize generator config: {e}")))?,
    );
    write_file(&dir.join("manifest.txt"), manifest.as_bytes())?;
    Ok(bench)
}

/// Reads the split written by [`make_benchmark`].
pub fn load_split(dir: &Path) -> Result<DatasetSplit> {
    let [tr, va, te] = split_paths(dir);
    Ok(DatasetSplit {
        train: read_windows(&tr)?,
        validation: read_windows(&va)?,
        test: read_windows(&te)?,
    })
}
