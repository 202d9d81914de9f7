//! Flight telemetry: on-disk formats, windowing, rule-based labels,
//! sequential splitting and per-channel standardization.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Channel order of every window matrix: heading, then position.
pub const CHANNELS: usize = 4;
pub const CHANNEL_NAMES: [&str; CHANNELS] = ["r", "x", "y", "z"];
pub const WINDOW_LEN: usize = 25;
pub const SAFETY_THRESHOLD_M: f64 = 1.5;

const FLIGHT_HEADER: [&str; 5] = ["t", "r", "x", "y", "z"];
const OBSTACLE_HEADER: [&str; 7] = ["shape", "cx", "cy", "cz", "p1", "p2", "p3"];
const OBSTACLE_SUFFIX: &str = ".obstacles.csv";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TelemetrySample {
    pub t: i64,
    pub r: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl TelemetrySample {
    pub fn row(&self) -> [f64; CHANNELS] {
        [self.r, self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.row().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Obstacle {
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box.
    Box { center: [f64; 3], half_extents: [f64; 3] },
}

impl Obstacle {
    /// Euclidean distance from `p` to the obstacle surface; zero inside.
    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        match *self {
            Obstacle::Sphere { center, radius } => {
                let d = dist3(p, center);
                (d - radius).max(0.0)
            }
            Obstacle::Box {
                center,
                half_extents,
            } => {
                let mut acc = 0.0;
                for k in 0..3 {
                    let gap = ((p[k] - center[k]).abs() - half_extents[k]).max(0.0);
                    acc += gap * gap;
                }
                acc.sqrt()
            }
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Obstacle::Sphere { center, radius } => {
                center.iter().all(|v| v.is_finite()) && radius.is_finite()
            }
            Obstacle::Box {
                center,
                half_extents,
            } => center.iter().chain(half_extents).all(|v| v.is_finite()),
        }
    }
}

pub(crate) fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Flight {
    pub flight_id: String,
    pub samples: Vec<TelemetrySample>,
    pub obstacles: Vec<Obstacle>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub window_id: String,
    /// Row-major `len × CHANNELS`, channel order `(r, x, y, z)`.
    pub values: Vec<[f64; CHANNELS]>,
    pub is_unsafe: bool,
    pub is_uncertain: bool,
}

impl Window {
    pub fn new(window_id: impl Into<String>, values: Vec<[f64; CHANNELS]>) -> Self {
        Window {
            window_id: window_id.into(),
            values,
            is_unsafe: false,
            is_uncertain: false,
        }
    }

    pub fn safety_label(&self) -> u8 {
        self.is_unsafe as u8
    }

    pub fn uncertainty_label(&self) -> u8 {
        self.is_uncertain as u8
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != WINDOW_LEN {
            return Err(Error::Contract(format!(
                "window {} has {} rows, expected {WINDOW_LEN}",
                self.window_id,
                self.values.len()
            )));
        }
        if !self.values.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Domain(format!(
                "window {} contains non-finite values",
                self.window_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Window>,
    pub validation: Vec<Window>,
    pub test: Vec<Window>,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }

    /// Errors if any id in `ids` belongs to the validation or test split.
    /// Statistics that feed training (channel scaling, safe-set z-scores)
    /// must only ever be fit on training windows.
    pub fn ensure_training_only<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let held_out: HashSet<&str> = self
            .validation
            .iter()
            .chain(&self.test)
            .map(|w| w.window_id.as_str())
            .collect();
        for id in ids {
            if held_out.contains(id) {
                return Err(Error::Contract(format!(
                    "leakage: held-out window {id} used to fit training statistics"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Flight files

/// Loads every `*.csv` flight in `dir` (sidecar obstacle files excluded),
/// sorted by file name. A missing sidecar means no obstacles.
pub fn load_flights(dir: impl AsRef<Path>) -> Result<Vec<Flight>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if path.is_file() && name.ends_with(".csv") && !name.ends_with(OBSTACLE_SUFFIX) {
            paths.push(path);
        }
    }
    paths.sort();
    paths.iter().map(|p| load_flight(p)).collect()
}

pub fn load_flight(path: &Path) -> Result<Flight> {
    let file_name = path.display().to_string();
    let flight_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let rows = read_rows(path, &FLIGHT_HEADER)?;
    let mut samples = Vec::with_capacity(rows.len());
    for (line, fields) in rows {
        let t: i64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(&file_name, line, format!("bad timestep {:?}", fields[0])))?;
        let mut vals = [0.0; 4];
        for (k, v) in vals.iter_mut().enumerate() {
            *v = parse_finite(&fields[k + 1], &file_name, line)?;
        }
        samples.push(TelemetrySample {
            t,
            r: vals[0],
            x: vals[1],
            y: vals[2],
            z: vals[3],
        });
    }
    samples.sort_by_key(|s| s.t);
    if let Some(w) = samples.windows(2).find(|w| w[0].t == w[1].t) {
        return Err(Error::parse(
            &file_name,
            0,
            format!("duplicate timestep {}", w[0].t),
        ));
    }

    let sidecar = path.with_file_name(format!("{flight_id}{OBSTACLE_SUFFIX}"));
    let obstacles = if sidecar.exists() {
        load_obstacles(&sidecar)?
    } else {
        Vec::new()
    };
    Ok(Flight {
        flight_id,
        samples,
        obstacles,
    })
}

fn load_obstacles(path: &Path) -> Result<Vec<Obstacle>> {
    let file_name = path.display().to_string();
    let rows = read_rows(path, &OBSTACLE_HEADER)?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, fields) in rows {
        let mut p = [0.0; 6];
        for (k, v) in p.iter_mut().enumerate() {
            *v = parse_finite(&fields[k + 1], &file_name, line)?;
        }
        let center = [p[0], p[1], p[2]];
        let obstacle = match fields[0].trim() {
            "sphere" => Obstacle::Sphere {
                center,
                radius: p[3],
            },
            "box" => Obstacle::Box {
                center,
                half_extents: [p[3], p[4], p[5]],
            },
            other => {
                return Err(Error::parse(
                    &file_name,
                    line,
                    format!("unknown obstacle shape {other:?}"),
                ))
            }
        };
        out.push(obstacle);
    }
    Ok(out)
}

/// Reads a headed CSV, checking the header and the column count of every
/// row. Returns `(line number, fields)` pairs.
fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<(u64, Vec<String>)>> {
    let file_name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::parse(&file_name, 0, format!("{other:?}")),
        })?;
    let mut rows = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut first = true;
    loop {
        let more = reader
            .read_record(&mut record)
            .map_err(|e| Error::parse(&file_name, 0, e.to_string()))?;
        if !more {
            break;
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if first {
            first = false;
            let got: Vec<&str> = record.iter().map(str::trim).collect();
            if got != header {
                return Err(Error::parse(
                    &file_name,
                    line,
                    format!("expected header {}, found {}", header.join(","), got.join(",")),
                ));
            }
            continue;
        }
        if record.len() != header.len() {
            return Err(Error::parse(
                &file_name,
                line,
                format!("expected {} columns, found {}", header.len(), record.len()),
            ));
        }
        rows.push((line, record.iter().map(str::to_owned).collect()));
    }
    if first {
        return Err(Error::parse(&file_name, 1, "missing header"));
    }
    Ok(rows)
}

fn parse_finite(field: &str, file: &str, line: u64) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::parse(file, line, format!("not a number: {field:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(file, line, format!("non-finite value {field:?}")));
    }
    Ok(v)
}

/// Writes `<flight_id>.csv` and, when obstacles exist, the sidecar file.
pub fn write_flight(dir: &Path, flight: &Flight) -> Result<()> {
    let path = dir.join(format!("{}.csv", flight.flight_id));
    let mut out = String::with_capacity(flight.samples.len() * 48);
    out.push_str("t,r,x,y,z\n");
    for s in &flight.samples {
        out.push_str(&format!("{},{},{},{},{}\n", s.t, s.r, s.x, s.y, s.z));
    }
    write_file(&path, out.as_bytes())?;
    if !flight.obstacles.is_empty() {
        let mut out = String::from("shape,cx,cy,cz,p1,p2,p3\n");
        for o in &flight.obstacles {
            match o {
                Obstacle::Sphere { center, radius } => out.push_str(&format!(
                    "sphere,{},{},{},{},0,0\n",
                    center[0], center[1], center[2], radius
                )),
                Obstacle::Box {
                    center,
                    half_extents: h,
                } => out.push_str(&format!(
                    "box,{},{},{},{},{},{}\n",
                    center[0], center[1], center[2], h[0], h[1], h[2]
                )),
            }
        }
        let side = dir.join(format!("{}{OBSTACLE_SUFFIX}", flight.flight_id));
        write_file(&side, out.as_bytes())?;
    }
    Ok(())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Windowing and labels

/// Consecutive segments `[k·stride, k·stride + n)` lying fully inside the
/// flight. Trailing partial segments are dropped.
pub fn window_flight(flight: &Flight, n: usize, stride: usize) -> Result<Vec<Window>> {
    if n == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window length and stride must be positive (n={n}, stride={stride})"
        )));
    }
    let len = flight.samples.len();
    if len < n {
        return Ok(Vec::new());
    }
    let count = (len - n) / stride + 1;
    Ok((0..count)
        .map(|k| {
            let start = k * stride;
            let values = flight.samples[start..start + n]
                .iter()
                .map(TelemetrySample::row)
                .collect();
            Window::new(format!("{}_w{k:04}", flight.flight_id), values)
        })
        .collect())
}

/// Unsafe iff some timestep is strictly closer than `threshold_m` to an
/// obstacle surface.
pub fn label_safety(values: &[[f64; CHANNELS]], obstacles: &[Obstacle], threshold_m: f64) -> bool {
    debug_assert!(obstacles.iter().all(Obstacle::is_finite));
    values.iter().any(|row| {
        let p = [row[1], row[2], row[3]];
        obstacles
            .iter()
            .any(|o| o.surface_distance(p) < threshold_m)
    })
}

/// Parameters of the heading-oscillation uncertainty rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UncertaintyRule {
    pub heading_delta_rad: f64,
    pub min_reversals: usize,
}

impl Default for UncertaintyRule {
    fn default() -> Self {
        UncertaintyRule {
            heading_delta_rad: 0.3,
            min_reversals: 3,
        }
    }
}

/// Wraps an angle difference into `(-π, π]`.
pub fn wrap_angle(d: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = d.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}

/// Number of sign alternations among the heading changes whose magnitude
/// exceeds `heading_delta_rad`. Smaller changes are skipped, not treated as
/// breaks in the alternation.
pub fn heading_reversals(values: &[[f64; CHANNELS]], heading_delta_rad: f64) -> usize {
    let mut reversals = 0;
    let mut last_sign = 0.0f64;
    for pair in values.windows(2) {
        let d = wrap_angle(pair[1][0] - pair[0][0]);
        if d.abs() <= heading_delta_rad {
            continue;
        }
        let sign = d.signum();
        if last_sign != 0.0 && sign != last_sign {
            reversals += 1;
        }
        last_sign = sign;
    }
    reversals
}

pub fn label_uncertainty(values: &[[f64; CHANNELS]], rule: UncertaintyRule) -> bool {
    heading_reversals(values, rule.heading_delta_rad) >= rule.min_reversals
}

// ---------------------------------------------------------------------------
// Splitting

/// Splits in the given order: first `⌊a/(a+b+c)·n⌋` to train, the next
/// `⌊b/(a+b+c)·n⌋` to validation, the remainder to test.
pub fn split_sequential(windows: Vec<Window>, ratios: (u32, u32, u32)) -> Result<DatasetSplit> {
    let n = windows.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "need at least 3 windows to split, got {n}"
        )));
    }
    let total = (ratios.0 + ratios.1 + ratios.2) as usize;
    if total == 0 {
        return Err(Error::Config("split ratios sum to zero".into()));
    }
    let n_train = n * ratios.0 as usize / total;
    let n_val = n * ratios.1 as usize / total;
    let mut rest = windows;
    let mut validation = rest.split_off(n_train);
    let test = validation.split_off(n_val);
    Ok(DatasetSplit {
        train: rest,
        validation,
        test,
    })
}

// ---------------------------------------------------------------------------
// Standardization

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; CHANNELS],
    /// Population standard deviation; may be zero.
    pub std: [f64; CHANNELS],
}

impl ChannelStats {
    /// Divisor used for scaling: zero deviations become 1.
    pub fn scale(&self, channel: usize) -> f64 {
        let s = self.std[channel];
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    pub fn standardize_row(&self, row: &[f64; CHANNELS]) -> [f64; CHANNELS] {
        let mut out = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            out[c] = (row[c] - self.mean[c]) / self.scale(c);
        }
        out
    }
}

pub fn fit_channel_stats(train: &[Window]) -> Result<ChannelStats> {
    let count: usize = train.iter().map(|w| w.values.len()).sum();
    if count == 0 {
        return Err(Error::Config(
            "cannot fit channel statistics on an empty training set".into(),
        ));
    }
    let n = count as f64;
    let mut mean = [0.0; CHANNELS];
    for row in train.iter().flat_map(|w| &w.values) {
        for c in 0..CHANNELS {
            mean[c] += row[c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; CHANNELS];
    for row in train.iter().flat_map(|w| &w.values) {
        for c in 0..CHANNELS {
            let d = row[c] - mean[c];
            var[c] += d * d;
        }
    }
    let mut std = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        std[c] = (var[c] / n).sqrt();
    }
    Ok(ChannelStats { mean, std })
}

pub fn standardize(values: &[[f64; CHANNELS]], stats: &ChannelStats) -> Vec<[f64; CHANNELS]> {
    values.iter().map(|r| stats.standardize_row(r)).collect()
}

// ---------------------------------------------------------------------------
// Windowed dataset CSV: window_id,safety,uncertainty,c0..c{len*4-1}

pub fn windows_to_csv(windows: &[Window]) -> String {
    let width = WINDOW_LEN * CHANNELS;
    let mut out = String::with_capacity(64 + windows.len() * width * 12);
    out.push_str("window_id,safety,uncertainty");
    for i in 0..width {
        out.push_str(&format!(",c{i}"));
    }
    out.push('\n');
    for w in windows {
        out.push_str(&format!(
            "{},{},{}",
            w.window_id,
            w.safety_label(),
            w.uncertainty_label()
        ));
        for v in w.values.iter().flatten() {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn write_windows(path: &Path, windows: &[Window]) -> Result<()> {
    for w in windows {
        w.validate()?;
    }
    write_file(path, windows_to_csv(windows).as_bytes())
}

pub fn read_windows(path: &Path) -> Result<Vec<Window>> {
    let file_name = path.display().to_string();
    let width = WINDOW_LEN * CHANNELS;
    let mut header: Vec<String> = vec!["window_id".into(), "safety".into(), "uncertainty".into()];
    header.extend((0..width).map(|i| format!("c{i}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = read_rows(path, &header_refs)?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, fields) in rows {
        let label = |s: &str, what: &str| -> Result<bool> {
            match s.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::parse(
                    &file_name,
                    line,
                    format!("{what} label must be 0 or 1, found {other:?}"),
                )),
            }
        };
        let is_unsafe = label(&fields[1], "safety")?;
        let is_uncertain = label(&fields[2], "uncertainty")?;
        let mut values = Vec::with_capacity(WINDOW_LEN);
        for t in 0..WINDOW_LEN {
            let mut row = [0.0; CHANNELS];
            for c in 0..CHANNELS {
                row[c] = parse_finite(&fields[3 + t * CHANNELS + c], &file_name, line)?;
            }
            values.push(row);
        }
        out.push(Window {
            window_id: fields[0].clone(),
            values,
            is_unsafe,
            is_uncertain,
        });
    }
    Ok(out)
}
