//! Bidirectional LSTM safety classifier with optional uncertainty fusion.
//!
//! Cell (gate order i, f, g, o):
//!
//! ```text
//! a = W x_t + U h_{t-1} + b
//! i = σ(a_i)  f = σ(a_f)  g = tanh(a_g)  o = σ(a_o)
//! c_t = f ⊙ c_{t-1} + i ⊙ g
//! h_t = o ⊙ tanh(c_t)
//! ```
//!
//! Stacked layers feed `[h_fwd ‖ h_bwd]` per timestep to the next layer,
//! with dropout in between. The head sees the last forward state and the
//! first backward state of the top layer: `σ(W2 ReLU(W1 h + b1) + b2)`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::layers::{dense, dense_backward, dot, relu, relu_backward, sigmoid, DropoutMask};
use crate::nn::loss::bce_with_logit;
use crate::nn::optim::AdamWConfig;
use crate::nn::params::{ParamSet, Tensor};
use crate::nn::train::{fit, BinaryModel, TrainLog, TrainSettings};
use crate::nn::ModelFile;
use crate::rng::{derive_seed, mix_seed, rng_from_seed, Rng};
use crate::telemetry::{fit_channel_stats, ChannelStats, Window, CHANNELS};

pub const KIND: &str = "bilstm-safety-v1";
const FORGET_BIAS: f64 = 1.0;

/// How the uncertainty score reaches the classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Plain,
    /// Score broadcast as an extra input channel.
    Early,
    /// Score appended to the encoder output before the head.
    Late,
}

impl Fusion {
    pub fn uses_score(self) -> bool {
        self != Fusion::Plain
    }

    pub fn input_width(self) -> usize {
        CHANNELS + (self == Fusion::Early) as usize
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Plain => "plain",
            Fusion::Early => "early",
            Fusion::Late => "late",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Fusion::Plain),
            "early" => Ok(Fusion::Early),
            "late" => Ok(Fusion::Late),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetyConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub dropout: f64,
    pub head_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        SafetyConfig {
            hidden_dim: 64,
            layers: 3,
            dropout: 0.3,
            head_dim: 32,
            epochs: 50,
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            batch_size: 256,
            grad_clip_norm: 1.0,
        }
    }
}

impl SafetyConfig {
    pub fn optim(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            grad_clip_norm: Some(self.grad_clip_norm),
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.layers == 0 || self.head_dim == 0 {
            return Err(Error::Config("safety: hidden_dim, layers and head_dim must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("safety: dropout must lie in [0, 1)".into()));
        }
        self.optim().validate()
    }
}

/// A standardized window ready for the network: `steps × width` row-major,
/// plus the standardized uncertainty score (0 when unused).
#[derive(Clone, Debug, PartialEq)]
pub struct SafetyInput {
    pub steps: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub u: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SafetyModel {
    params: ParamSet,
    pub fusion: Fusion,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub channel_stats: ChannelStats,
    /// Mean and std of the training uncertainty scores, used to put the
    /// fused score on the same scale as the standardized channels.
    pub score_stats: (f64, f64),
}

#[derive(Clone, Debug)]
struct DirCache {
    /// Post-activation gates per timestep, `T × 4H`.
    gates: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

#[derive(Clone, Debug)]
struct LayerCache {
    /// Layer input after dropout, `T × I`.
    input: Vec<f64>,
    width: usize,
    mask: Option<DropoutMask>,
    dirs: [DirCache; 2],
}

#[derive(Clone, Debug)]
pub struct SafetyCache {
    layers: Vec<LayerCache>,
    final_h: Vec<f64>,
    pre_head: Vec<f64>,
    head: Vec<f64>,
    pub logit: f64,
}

fn cell_index(layer: usize, dir: usize) -> usize {
    (layer * 2 + dir) * 3
}

impl SafetyModel {
    pub fn new(config: &SafetyConfig, fusion: Fusion, seed: u64) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let mut rng = rng_from_seed(seed);
        let mut tensors = Vec::new();
        for l in 0..config.layers {
            let input = if l == 0 { fusion.input_width() } else { 2 * h };
            for dir in ["fwd", "bwd"] {
                tensors.push(Tensor::uniform(format!("l{l}_{dir}_w_ih"), 4 * h, input, h, &mut rng));
                tensors.push(Tensor::uniform(format!("l{l}_{dir}_w_hh"), 4 * h, h, h, &mut rng));
                let mut b = Tensor::zeros(format!("l{l}_{dir}_b"), 4 * h, 1);
                b.data[h..2 * h].fill(FORGET_BIAS);
                tensors.push(b);
            }
        }
        let enc = 2 * h + (fusion == Fusion::Late) as usize;
        tensors.push(Tensor::uniform("head_w1", config.head_dim, enc, enc, &mut rng));
        tensors.push(Tensor::zeros("head_b1", config.head_dim, 1));
        tensors.push(Tensor::uniform("head_w2", 1, config.head_dim, config.head_dim, &mut rng));
        tensors.push(Tensor::zeros("head_b2", 1, 1));
        Ok(SafetyModel {
            params: ParamSet::new(tensors),
            fusion,
            hidden: h,
            layers: config.layers,
            dropout: config.dropout,
            channel_stats: ChannelStats {
                mean: [0.0; CHANNELS],
                std: [1.0; CHANNELS],
            },
            score_stats: (0.0, 1.0),
        })
    }

    fn check_layout(&self) -> Result<()> {
        let h = self.hidden;
        let mut want = Vec::new();
        for l in 0..self.layers {
            let input = if l == 0 { self.fusion.input_width() } else { 2 * h };
            for _ in 0..2 {
                want.extend([(4 * h, input), (4 * h, h), (4 * h, 1)]);
            }
        }
        let m = self.params.tensors.get(self.head_index() + 2).map_or(0, |t| t.cols);
        let enc = 2 * h + (self.fusion == Fusion::Late) as usize;
        want.extend([(m, enc), (m, 1), (1, m), (1, 1)]);
        let got: Vec<(usize, usize)> = self.params.tensors.iter().map(|t| (t.rows, t.cols)).collect();
        if got != want {
            return Err(Error::Contract(format!(
                "BiLSTM parameter layout does not match {} layers, hidden {h}, fusion {}",
                self.layers, self.fusion
            )));
        }
        if !self.params.is_finite() {
            return Err(Error::Contract("BiLSTM parameters are not finite".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn head_index(&self) -> usize {
        cell_index(self.layers, 0)
    }

    /// Standardizes `window` and attaches the score as the fusion mode requires.
    pub fn prepare(&self, values: &[[f64; CHANNELS]], score: Option<f64>) -> Result<SafetyInput> {
        let u = match (self.fusion.uses_score(), score) {
            (false, _) => 0.0,
            (true, Some(s)) => (s - self.score_stats.0) / self.score_stats.1,
            (true, None) => {
                return Err(Error::Contract(format!(
                    "{} fusion needs an uncertainty score per window",
                    self.fusion
                )))
            }
        };
        let width = self.fusion.input_width();
        let mut data = Vec::with_capacity(values.len() * width);
        for row in values {
            data.extend_from_slice(&self.channel_stats.standardize_row(row));
            if self.fusion == Fusion::Early {
                data.push(u);
            }
        }
        Ok(SafetyInput {
            steps: values.len(),
            width,
            data,
            u,
        })
    }

    fn check_input(&self, x: &SafetyInput) -> Result<()> {
        if x.width != self.fusion.input_width() || x.data.len() != x.steps * x.width || x.steps == 0 {
            return Err(Error::Contract(format!(
                "{} model expects {} input channels, got {} ({} values over {} steps)",
                self.fusion,
                self.fusion.input_width(),
                x.width,
                x.data.len(),
                x.steps
            )));
        }
        Ok(())
    }

    /// Probability of "unsafe" for an arbitrary `steps × width` sequence.
    pub fn predict_sequence(&self, x: &SafetyInput) -> Result<f64> {
        self.check_input(x)?;
        Ok(sigmoid(self.forward_with(&self.params, x, None).logit))
    }

    pub fn forward(&self, x: &SafetyInput, rng: Option<&mut Rng>) -> SafetyCache {
        self.forward_with(&self.params, x, rng)
    }

    fn forward_with(&self, ps: &ParamSet, x: &SafetyInput, mut rng: Option<&mut Rng>) -> SafetyCache {
        let t_len = x.steps;
        let h = self.hidden;
        let mut layers: Vec<LayerCache> = Vec::with_capacity(self.layers);
        let mut input = x.data.clone();
        let mut width = x.width;
        for l in 0..self.layers {
            let mask = if l > 0 {
                rng.as_deref_mut()
                    .map(|r| DropoutMask::sample(self.dropout, input.len(), r))
            } else {
                None
            };
            if let Some(m) = &mask {
                m.apply(&mut input);
            }
            let run = |dir: usize| {
                let k = cell_index(l, dir);
                run_direction(&ps.tensors[k], &ps.tensors[k + 1], &ps.tensors[k + 2], &input, t_len, width, h, dir == 1)
            };
            let dirs = [run(0), run(1)];
            let mut out = vec![0.0; t_len * 2 * h];
            for t in 0..t_len {
                out[t * 2 * h..t * 2 * h + h].copy_from_slice(&dirs[0].h[t * h..(t + 1) * h]);
                out[t * 2 * h + h..(t + 1) * 2 * h].copy_from_slice(&dirs[1].h[t * h..(t + 1) * h]);
            }
            layers.push(LayerCache {
                input: std::mem::replace(&mut input, out),
                width,
                mask,
                dirs,
            });
            width = 2 * h;
        }
        let top = layers.last().expect("at least one layer");
        let mut final_h = Vec::with_capacity(2 * h + 1);
        final_h.extend_from_slice(&top.dirs[0].h[(t_len - 1) * h..t_len * h]);
        final_h.extend_from_slice(&top.dirs[1].h[..h]);
        if self.fusion == Fusion::Late {
            final_h.push(x.u);
        }
        let hi = self.head_index();
        let pre_head = dense(&ps.tensors[hi], &ps.tensors[hi + 1], &final_h);
        let head = relu(&pre_head);
        let logit = dense(&ps.tensors[hi + 2], &ps.tensors[hi + 3], &head)[0];
        SafetyCache {
            layers,
            final_h,
            pre_head,
            head,
            logit,
        }
    }

    /// Adds `dlogit · ∂logit/∂θ` into `grads` (backprop through time).
    pub fn backward(&self, cache: &SafetyCache, dlogit: f64, grads: &mut ParamSet) {
        backward_with(self, &self.params, cache, dlogit, grads);
    }

    pub fn to_model_file(&self) -> ModelFile {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        ModelFile::new(KIND, self.params.clone())
            .with_meta("fusion", self.fusion)
            .with_meta("hidden", self.hidden)
            .with_meta("layers", self.layers)
            .with_meta("dropout", self.dropout)
            .with_meta("channel_mean", join(&self.channel_stats.mean))
            .with_meta("channel_std", join(&self.channel_stats.std))
            .with_meta("score_mean", self.score_stats.0)
            .with_meta("score_std", self.score_stats.1)
    }

    pub fn from_model_file(file: ModelFile) -> Result<Self> {
        file.expect_kind(KIND)?;
        let channels = |key: &str| -> Result<[f64; CHANNELS]> {
            let raw = file.meta(key).unwrap_or("");
            let vals: Vec<f64> = raw
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Contract(format!("model file: bad {key}")))?;
            vals.try_into()
                .map_err(|_| Error::Contract(format!("model file: {key} needs {CHANNELS} values")))
        };
        let model = SafetyModel {
            fusion: file
                .meta("fusion")
                .ok_or_else(|| Error::Contract("model file: missing fusion".into()))?
                .parse()?,
            hidden: file.meta_parse("hidden")?,
            layers: file.meta_parse("layers")?,
            dropout: file.meta_parse("dropout")?,
            channel_stats: ChannelStats {
                mean: channels("channel_mean")?,
                std: channels("channel_std")?,
            },
            score_stats: (file.meta_parse("score_mean")?, file.meta_parse("score_std")?),
            params: file.params,
        };
        model.check_layout()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_model_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_model_file(ModelFile::load(path)?)
    }
}

#[allow(clippy::too_many_arguments)]
fn run_direction(
    w_ih: &Tensor,
    w_hh: &Tensor,
    b: &Tensor,
    input: &[f64],
    t_len: usize,
    width: usize,
    h: usize,
    reverse: bool,
) -> DirCache {
    let mut gates = vec![0.0; t_len * 4 * h];
    let mut c_all = vec![0.0; t_len * h];
    let mut h_all = vec![0.0; t_len * h];
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    for k in 0..t_len {
        let t = if reverse { t_len - 1 - k } else { k };
        let x = &input[t * width..(t + 1) * width];
        let a = &mut gates[t * 4 * h..(t + 1) * 4 * h];
        for r in 0..4 * h {
            let z = b.data[r] + dot(w_ih.row(r), x) + dot(w_hh.row(r), &h_prev);
            a[r] = if (2 * h..3 * h).contains(&r) { z.tanh() } else { sigmoid(z) };
        }
        for j in 0..h {
            let c = a[h + j] * c_prev[j] + a[j] * a[2 * h + j];
            c_all[t * h + j] = c;
            h_all[t * h + j] = a[3 * h + j] * c.tanh();
        }
        c_prev.copy_from_slice(&c_all[t * h..(t + 1) * h]);
        h_prev.copy_from_slice(&h_all[t * h..(t + 1) * h]);
    }
    DirCache {
        gates,
        c: c_all,
        h: h_all,
    }
}

/// BPTT for one direction. `d_out` is `∂L/∂h_t` from above (`T × H`);
/// input gradients are added into `d_input` (`T × width`).
#[allow(clippy::too_many_arguments)]
fn backward_direction(
    ps: &ParamSet,
    grads: &mut ParamSet,
    k: usize,
    cache: &DirCache,
    input: &[f64],
    width: usize,
    d_out: &[f64],
    d_input: &mut [f64],
    h: usize,
    reverse: bool,
) {
    let t_len = input.len() / width;
    let (w_ih, w_hh) = (&ps.tensors[k], &ps.tensors[k + 1]);
    let [g_ih, g_hh, g_b] = &mut grads.tensors[k..k + 3] else {
        unreachable!("three tensors per direction")
    };
    let zeros = vec![0.0; h];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut da = vec![0.0; 4 * h];
    for step in (0..t_len).rev() {
        let t = if reverse { t_len - 1 - step } else { step };
        let (h_prev, c_prev) = if step == 0 {
            (&zeros[..], &zeros[..])
        } else {
            let tp = if reverse { t + 1 } else { t - 1 };
            (&cache.h[tp * h..(tp + 1) * h], &cache.c[tp * h..(tp + 1) * h])
        };
        let a = &cache.gates[t * 4 * h..(t + 1) * 4 * h];
        for j in 0..h {
            let (i, f, g, o) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
            let tc = cache.c[t * h + j].tanh();
            let dh = d_out[t * h + j] + dh_next[j];
            let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
            da[j] = dc * g * i * (1.0 - i);
            da[h + j] = dc * c_prev[j] * f * (1.0 - f);
            da[2 * h + j] = dc * i * (1.0 - g * g);
            da[3 * h + j] = dh * tc * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        let x = &input[t * width..(t + 1) * width];
        let dx = &mut d_input[t * width..(t + 1) * width];
        dh_next.fill(0.0);
        for (r, &g) in da.iter().enumerate() {
            g_b.data[r] += g;
            if g == 0.0 {
                continue;
            }
            for (gw, &xv) in g_ih.data[r * width..(r + 1) * width].iter_mut().zip(x) {
                *gw += g * xv;
            }
            for (gw, &hv) in g_hh.data[r * h..(r + 1) * h].iter_mut().zip(h_prev) {
                *gw += g * hv;
            }
            for (d, &w) in dx.iter_mut().zip(w_ih.row(r)) {
                *d += g * w;
            }
            for (d, &w) in dh_next.iter_mut().zip(w_hh.row(r)) {
                *d += g * w;
            }
        }
    }
}

fn backward_with(model: &SafetyModel, ps: &ParamSet, cache: &SafetyCache, dlogit: f64, grads: &mut ParamSet) {
    const SHAPES: &str = "shapes validated at construction";
    let h = model.hidden;
    let hi = model.head_index();
    let mut dhead = vec![0.0; cache.head.len()];
    let (gw, gb) = grads.pair_mut(hi + 2);
    dense_backward(&ps.tensors[hi + 2], &cache.head, &[dlogit], gw, gb, Some(&mut dhead)).expect(SHAPES);
    let dpre = relu_backward(&cache.pre_head, &dhead);
    let mut dfinal = vec![0.0; cache.final_h.len()];
    let (gw, gb) = grads.pair_mut(hi);
    dense_backward(&ps.tensors[hi], &cache.final_h, &dpre, gw, gb, Some(&mut dfinal)).expect(SHAPES);

    let t_len = cache.layers[0].input.len() / cache.layers[0].width;
    let mut d_out = [vec![0.0; t_len * h], vec![0.0; t_len * h]];
    d_out[0][(t_len - 1) * h..].copy_from_slice(&dfinal[..h]);
    d_out[1][..h].copy_from_slice(&dfinal[h..2 * h]);

    for l in (0..model.layers).rev() {
        let lc = &cache.layers[l];
        let mut d_input = vec![0.0; lc.input.len()];
        for dir in 0..2 {
            backward_direction(
                ps,
                grads,
                cell_index(l, dir),
                &lc.dirs[dir],
                &lc.input,
                lc.width,
                &d_out[dir],
                &mut d_input,
                h,
                dir == 1,
            );
        }
        if l == 0 {
            break;
        }
        if let Some(m) = &lc.mask {
            m.apply(&mut d_input);
        }
        for t in 0..t_len {
            let row = &d_input[t * 2 * h..(t + 1) * 2 * h];
            d_out[0][t * h..(t + 1) * h].copy_from_slice(&row[..h]);
            d_out[1][t * h..(t + 1) * h].copy_from_slice(&row[h..]);
        }
    }
}

impl BinaryModel for SafetyModel {
    type Input = SafetyInput;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn accumulate_grad(&self, x: &SafetyInput, target: f64, weight: f64, rng: &mut Rng, grads: &mut ParamSet) -> f64 {
        let cache = self.forward(x, Some(rng));
        let (loss, dlogit) = bce_with_logit(cache.logit, target, weight);
        self.backward(&cache, dlogit, grads);
        loss
    }

    fn logit(&self, x: &SafetyInput) -> f64 {
        self.forward(x, None).logit
    }
}

fn check_scores(windows: &[Window], scores: Option<&[f64]>, fusion: Fusion) -> Result<()> {
    match scores {
        Some(s) if s.len() != windows.len() => Err(Error::Contract(format!(
            "{} uncertainty scores for {} windows",
            s.len(),
            windows.len()
        ))),
        None if fusion.uses_score() => Err(Error::Contract(format!(
            "{fusion} fusion requires uncertainty scores"
        ))),
        _ => Ok(()),
    }
}

pub fn prepare_all(model: &SafetyModel, windows: &[Window], scores: Option<&[f64]>, exec: Exec) -> Result<Vec<SafetyInput>> {
    check_scores(windows, scores, model.fusion)?;
    exec.map_range(windows.len(), |i| {
        model.prepare(&windows[i].values, scores.map(|s| s[i]))
    })
    .into_iter()
    .collect()
}

/// Everything a safety training run needs besides the data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SafetyTrainOptions {
    pub fusion: Fusion,
    /// `(safe, unsafe)` loss weights.
    pub class_weights: (f64, f64),
    pub seed: u64,
    pub exec: Exec,
}

/// Fits channel statistics (and score statistics for fusion modes) on
/// `train`, then trains with best-validation-F1 selection.
pub fn train_safety(
    train: &[Window],
    val: &[Window],
    train_scores: Option<&[f64]>,
    val_scores: Option<&[f64]>,
    config: &SafetyConfig,
    opts: &SafetyTrainOptions,
) -> Result<(SafetyModel, TrainLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("safety predictor: empty training set".into()));
    }
    check_scores(train, train_scores, opts.fusion)?;
    check_scores(val, val_scores, opts.fusion)?;
    let mut model = SafetyModel::new(config, opts.fusion, derive_seed(opts.seed, "safety-init"))?;
    model.channel_stats = fit_channel_stats(train)?;
    if let (true, Some(s)) = (opts.fusion.uses_score(), train_scores) {
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let std = (s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        model.score_stats = (mean, if std > 0.0 { std } else { 1.0 });
    }
    let tx = prepare_all(&model, train, train_scores, opts.exec)?;
    let vx = prepare_all(&model, val, val_scores, opts.exec)?;
    let ty: Vec<bool> = train.iter().map(|w| w.is_unsafe).collect();
    let vy: Vec<bool> = val.iter().map(|w| w.is_unsafe).collect();
    let settings = TrainSettings {
        optim: config.optim(),
        seed: derive_seed(opts.seed, "safety-train"),
        class_weights: opts.class_weights,
        exec: opts.exec,
    };
    let log = fit(&mut model, &tx, &ty, &vx, &vy, &settings)?;
    Ok((model, log))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyReport {
    pub windows: usize,
    pub total_s: f64,
    /// Mean wall-clock seconds per window, including standardization.
    pub per_window_s: f64,
}

/// Probabilities for every window, in order, plus wall-clock latency.
pub fn predict_all(
    model: &SafetyModel,
    windows: &[Window],
    scores: Option<&[f64]>,
    exec: Exec,
) -> Result<(Vec<f64>, LatencyReport)> {
    check_scores(windows, scores, model.fusion)?;
    let start = Instant::now();
    let probs = exec
        .map_range(windows.len(), |i| {
            let x = model.prepare(&windows[i].values, scores.map(|s| s[i]))?;
            model.predict_sequence(&x)
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    let total_s = start.elapsed().as_secs_f64();
    Ok((
        probs,
        LatencyReport {
            windows: windows.len(),
            total_s,
            per_window_s: if windows.is_empty() { 0.0 } else { total_s / windows.len() as f64 },
        },
    ))
}

/// Finite-difference objective over a batch of prepared inputs.
pub struct SafetyObjective<'a> {
    pub model: &'a SafetyModel,
    pub inputs: &'a [SafetyInput],
    pub targets: &'a [f64],
    pub dropout_seed: Option<u64>,
}

impl SafetyObjective<'_> {
    fn run(&self, ps: &ParamSet, mut grads: Option<&mut ParamSet>) -> f64 {
        let mut total = 0.0;
        for (i, (x, &y)) in self.inputs.iter().zip(self.targets).enumerate() {
            let mut rng = self.dropout_seed.map(|s| rng_from_seed(mix_seed(s, i as u64)));
            let cache = self.model.forward_with(ps, x, rng.as_mut());
            let (loss, dlogit) = bce_with_logit(cache.logit, y, 1.0);
            total += loss;
            if let Some(g) = grads.as_deref_mut() {
                backward_with(self.model, ps, &cache, dlogit, g);
            }
        }
        total
    }
}

impl crate::nn::Objective for SafetyObjective<'_> {
    fn loss(&self, params: &ParamSet) -> f64 {
        self.run(params, None)
    }

    fn loss_and_grad(&self, params: &ParamSet) -> (f64, ParamSet) {
        let mut g = params.zeros_like();
        let l = self.run(params, Some(&mut g));
        (l, g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{check_gradients, GradCheckOptions};
    use rand::Rng as _;

    fn mini(fusion: Fusion, layers: usize) -> SafetyModel {
        let cfg = SafetyConfig {
            hidden_dim: 4,
            layers,
            head_dim: 3,
            ..SafetyConfig::default()
        };
        SafetyModel::new(&cfg, fusion, 21).unwrap()
    }

    fn random_input(steps: usize, width: usize, seed: u64) -> SafetyInput {
        let mut rng = rng_from_seed(seed);
        SafetyInput {
            steps,
            width,
            data: (0..steps * width).map(|_| rng.random_range(-1.5..1.5)).collect(),
            u: rng.random_range(-1.0..1.0),
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (fusion, layers, dropout) in [
            (Fusion::Plain, 1, None),
            (Fusion::Plain, 2, Some(3)),
            (Fusion::Early, 2, None),
            (Fusion::Late, 2, Some(4)),
        ] {
            let m = mini(fusion, layers);
            let xs: Vec<SafetyInput> = (0..3).map(|i| random_input(2, fusion.input_width(), i)).collect();
            let ys = [1.0, 0.0, 1.0];
            let obj = SafetyObjective { model: &m, inputs: &xs, targets: &ys, dropout_seed: dropout };
            let report = check_gradients(&obj, m.params(), GradCheckOptions::default());
            assert!(report.passed(), "{fusion} x{layers}: {report:?}");
        }
    }

    #[test]
    fn zero_network_predicts_one_half() {
        let mut m = SafetyModel::new(&SafetyConfig::default(), Fusion::Plain, 0).unwrap();
        m.params_mut().fill(0.0);
        let p = m.predict_sequence(&random_input(25, 4, 1)).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn early_fusion_rejects_four_channels() {
        let m = mini(Fusion::Early, 1);
        assert!(matches!(m.predict_sequence(&random_input(25, 4, 0)), Err(Error::Contract(_))));
        assert!(matches!(m.prepare(&[[0.0; 4]; 25], None), Err(Error::Contract(_))));
        assert_eq!(mini(Fusion::Plain, 1).params().tensors[0].cols, 4);
        assert_eq!(m.params().tensors[0].cols, 5);
    }

    #[test]
    fn mirrored_directions_swap_under_reversal() {
        let mut m = mini(Fusion::Plain, 1);
        for k in 0..3 {
            let fwd = m.params().tensors[k].data.clone();
            m.params_mut().tensors[3 + k].data = fwd;
        }
        let x = random_input(6, 4, 5);
        let mut rev = x.clone();
        for t in 0..6 {
            rev.data[t * 4..(t + 1) * 4].copy_from_slice(&x.data[(5 - t) * 4..(6 - t) * 4]);
        }
        let a = m.forward(&x, None);
        let b = m.forward(&rev, None);
        let h = m.hidden;
        for t in 0..6 {
            let fa = &a.layers[0].dirs[0].h[t * h..(t + 1) * h];
            let bb = &b.layers[0].dirs[1].h[(5 - t) * h..(6 - t) * h];
            for j in 0..h {
                assert!((fa[j] - bb[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn late_fusion_contains_plain_model() {
        let plain = mini(Fusion::Plain, 2);
        let mut late = mini(Fusion::Late, 2);
        let enc = 2 * plain.hidden;
        for (k, t) in plain.params().tensors.iter().enumerate() {
            let dst = &mut late.params_mut().tensors[k];
            if dst.cols == t.cols {
                dst.data = t.data.clone();
            } else {
                // Head input gains one column for the score; zero its weights.
                for r in 0..t.rows {
                    dst.data[r * (enc + 1)..r * (enc + 1) + enc].copy_from_slice(t.row(r));
                    dst.data[r * (enc + 1) + enc] = 0.0;
                }
            }
        }
        for seed in 0..4 {
            let x = random_input(25, 4, seed);
            let mut xl = x.clone();
            xl.u = 0.0;
            assert_eq!(
                plain.predict_sequence(&x).unwrap().to_bits(),
                late.predict_sequence(&xl).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let m = mini(Fusion::Plain, 1);
        let b = &m.params().tensors[2];
        assert!(b.data[4..8].iter().all(|&v| v == 1.0));
        assert!(b.data[..4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn model_file_round_trip() {
        let mut m = mini(Fusion::Early, 2);
        m.channel_stats = ChannelStats { mean: [0.1, -2.0, 3.5, 1e-3], std: [1.0, 0.5, 2.0, 0.0] };
        m.score_stats = (0.25, 1.5);
        let back = SafetyModel::from_model_file(ModelFile::parse(&m.to_model_file().to_text(), "mem").unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn default_configuration_size() {
        let m = SafetyModel::new(&SafetyConfig::default(), Fusion::Plain, 0).unwrap();
        // Per direction: 4H(I + H + 1); layer 0 has I = 4, later layers I = 2H.
        let h = 64;
        let lstm = 2 * 4 * h * (4 + h + 1) + 2 * 2 * 4 * h * (2 * h + h + 1);
        let head = 32 * 2 * h + 32 + 32 + 1;
        assert_eq!(m.num_params(), lstm + head);
    }
}
