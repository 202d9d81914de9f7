//! GatedMLP uncertainty predictor over 16 kinematic features.
//!
//! ```text
//! d = ReLU(Wp f + bp)
//! h = W2 ReLU(W1 d + b1) + b2
//! g = σ(Wg d + bg)
//! o = g ⊙ h + (1 − g) ⊙ d    (evaluated as d + g ⊙ (h − d))
//! u = W4 dropout(ReLU(W3 o + b3)) + b4
//! ```
//!
//! The score passed downstream is the logit `u`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::{extract_features, FeatureVector16, FEATURES};
use crate::nn::layers::{dense, dense_backward, relu, relu_backward, sigmoid, DropoutMask};
use crate::nn::loss::bce_with_logit;
use crate::nn::optim::AdamWConfig;
use crate::nn::params::{ParamSet, Tensor};
use crate::nn::train::{fit, BinaryModel, TrainLog, TrainSettings};
use crate::nn::ModelFile;
use crate::rng::{rng_from_seed, Rng};
use crate::telemetry::Window;

pub const KIND: &str = "gatedmlp-v1";

const PROJ: usize = 0;
const T1: usize = 2;
const T2: usize = 4;
const GATE: usize = 6;
const H1: usize = 8;
const H2: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintyConfig {
    pub projection_dim: usize,
    pub expansion_dim: usize,
    pub head_dim: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            projection_dim: 64,
            expansion_dim: 128,
            head_dim: 32,
            dropout: 0.3,
            epochs: 30,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 256,
        }
    }
}

impl UncertaintyConfig {
    pub fn optim(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            grad_clip_norm: None,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.projection_dim == 0 || self.head_dim == 0 {
            return Err(Error::Config("uncertainty: dimensions must be >= 1".into()));
        }
        if self.expansion_dim <= self.projection_dim {
            return Err(Error::Config(format!(
                "uncertainty: expansion_dim ({}) must exceed projection_dim ({})",
                self.expansion_dim, self.projection_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("uncertainty: dropout must lie in [0, 1)".into()));
        }
        self.optim().validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyModel {
    params: ParamSet,
    pub dropout: f64,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Clone, Debug)]
pub struct GatedCache {
    pub pre_d: Vec<f64>,
    pub d: Vec<f64>,
    pub pre_t: Vec<f64>,
    pub t: Vec<f64>,
    pub h: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub pre_head: Vec<f64>,
    /// Head activation after dropout.
    pub head: Vec<f64>,
    pub mask: Option<DropoutMask>,
    pub logit: f64,
}

impl UncertaintyModel {
    pub fn new(config: &UncertaintyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (p, e, k) = (config.projection_dim, config.expansion_dim, config.head_dim);
        let mut rng = rng_from_seed(seed);
        let tensors = vec![
            Tensor::uniform("w_proj", p, FEATURES, FEATURES, &mut rng),
            Tensor::zeros("b_proj", p, 1),
            Tensor::uniform("w1", e, p, p, &mut rng),
            Tensor::zeros("b1", e, 1),
            Tensor::uniform("w2", p, e, e, &mut rng),
            Tensor::zeros("b2", p, 1),
            Tensor::uniform("w_gate", p, p, p, &mut rng),
            Tensor::zeros("b_gate", p, 1),
            Tensor::uniform("w3", k, p, p, &mut rng),
            Tensor::zeros("b3", k, 1),
            Tensor::uniform("w4", 1, k, k, &mut rng),
            Tensor::zeros("b4", 1, 1),
        ];
        Ok(UncertaintyModel {
            params: ParamSet::new(tensors),
            dropout: config.dropout,
        })
    }

    /// Wraps an explicit parameter set, checking every shape.
    pub fn from_params(params: ParamSet, dropout: f64) -> Result<Self> {
        let bad = |m: String| Err(Error::Contract(format!("gated MLP parameters: {m}")));
        if params.tensors.len() != 12 {
            return bad(format!("expected 12 tensors, got {}", params.tensors.len()));
        }
        let t = &params.tensors;
        let p = t[PROJ].rows;
        let e = t[T1].rows;
        let k = t[H1].rows;
        let want = [
            (p, FEATURES),
            (p, 1),
            (e, p),
            (e, 1),
            (p, e),
            (p, 1),
            (p, p),
            (p, 1),
            (k, p),
            (k, 1),
            (1, k),
            (1, 1),
        ];
        for (tensor, &(r, c)) in t.iter().zip(&want) {
            if (tensor.rows, tensor.cols) != (r, c) {
                return bad(format!(
                    "{} is {}x{}, expected {r}x{c}",
                    tensor.name, tensor.rows, tensor.cols
                ));
            }
        }
        if !params.is_finite() {
            return bad("non-finite values".into());
        }
        if !(0.0..1.0).contains(&dropout) {
            return bad(format!("dropout {dropout} outside [0, 1)"));
        }
        Ok(UncertaintyModel { params, dropout })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let t = &self.params.tensors;
        (t[PROJ].rows, t[T1].rows, t[H1].rows)
    }

    /// Forward pass; a dropout mask is drawn from `rng` only in training mode.
    pub fn forward(&self, f: &FeatureVector16, rng: Option<&mut Rng>) -> GatedCache {
        self.forward_with(&self.params, f, rng)
    }

    fn forward_with(&self, ps: &ParamSet, f: &FeatureVector16, rng: Option<&mut Rng>) -> GatedCache {
        let t = &ps.tensors;
        let pre_d = dense(&t[PROJ], &t[PROJ + 1], f.as_slice());
        let d = relu(&pre_d);
        let pre_t = dense(&t[T1], &t[T1 + 1], &d);
        let tr = relu(&pre_t);
        let h = dense(&t[T2], &t[T2 + 1], &tr);
        let g: Vec<f64> = dense(&t[GATE], &t[GATE + 1], &d)
            .into_iter()
            .map(sigmoid)
            .collect();
        let o: Vec<f64> = (0..d.len())
            .map(|i| d[i] + g[i] * (h[i] - d[i]))
            .collect();
        let pre_head = dense(&t[H1], &t[H1 + 1], &o);
        let mut head = relu(&pre_head);
        let mask = rng.map(|r| DropoutMask::sample(self.dropout, head.len(), r));
        if let Some(m) = &mask {
            m.apply(&mut head);
        }
        let logit = dense(&t[H2], &t[H2 + 1], &head)[0];
        GatedCache {
            pre_d,
            d,
            pre_t,
            t: tr,
            h,
            g,
            o,
            pre_head,
            head,
            mask,
            logit,
        }
    }

    /// Adds `dlogit · ∂u/∂θ` into `grads`.
    pub fn backward(&self, f: &FeatureVector16, cache: &GatedCache, dlogit: f64, grads: &mut ParamSet) {
        backward_with(&self.params, f, cache, dlogit, grads);
    }

    /// Evaluation-mode score.
    pub fn score(&self, f: &FeatureVector16) -> f64 {
        self.forward(f, None).logit
    }

    pub fn to_model_file(&self) -> ModelFile {
        ModelFile::new(KIND, self.params.clone())
            .with_meta("dropout", self.dropout)
            .with_meta("features", "r,x,y,z x mean,std,min,max")
    }

    pub fn from_model_file(file: ModelFile) -> Result<Self> {
        file.expect_kind(KIND)?;
        let dropout = file.meta_parse("dropout")?;
        Self::from_params(file.params, dropout)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_model_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_model_file(ModelFile::load(path)?)
    }
}

fn backward_with(ps: &ParamSet, f: &FeatureVector16, c: &GatedCache, dlogit: f64, grads: &mut ParamSet) {
    let t = &ps.tensors;
    const SHAPES: &str = "shapes validated at construction";
    let p = c.d.len();

    let mut dhead = vec![0.0; c.head.len()];
    let (gw, gb) = grads.pair_mut(H2);
    dense_backward(&t[H2], &c.head, &[dlogit], gw, gb, Some(&mut dhead)).expect(SHAPES);
    if let Some(m) = &c.mask {
        m.apply(&mut dhead);
    }
    let dpre_head = relu_backward(&c.pre_head, &dhead);
    let mut d_o = vec![0.0; p];
    let (gw, gb) = grads.pair_mut(H1);
    dense_backward(&t[H1], &c.o, &dpre_head, gw, gb, Some(&mut d_o)).expect(SHAPES);

    let mut dh = vec![0.0; p];
    let mut dpre_g = vec![0.0; p];
    let mut dd = vec![0.0; p];
    for i in 0..p {
        dh[i] = c.g[i] * d_o[i];
        let dg = (c.h[i] - c.d[i]) * d_o[i];
        dpre_g[i] = dg * c.g[i] * (1.0 - c.g[i]);
        dd[i] = (1.0 - c.g[i]) * d_o[i];
    }
    let (gw, gb) = grads.pair_mut(GATE);
    dense_backward(&t[GATE], &c.d, &dpre_g, gw, gb, Some(&mut dd)).expect(SHAPES);

    let mut dt = vec![0.0; c.t.len()];
    let (gw, gb) = grads.pair_mut(T2);
    dense_backward(&t[T2], &c.t, &dh, gw, gb, Some(&mut dt)).expect(SHAPES);
    let dpre_t = relu_backward(&c.pre_t, &dt);
    let (gw, gb) = grads.pair_mut(T1);
    dense_backward(&t[T1], &c.d, &dpre_t, gw, gb, Some(&mut dd)).expect(SHAPES);

    let dpre_d = relu_backward(&c.pre_d, &dd);
    let (gw, gb) = grads.pair_mut(PROJ);
    dense_backward(&t[PROJ], f.as_slice(), &dpre_d, gw, gb, None).expect(SHAPES);
}

impl BinaryModel for UncertaintyModel {
    type Input = FeatureVector16;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn accumulate_grad(&self, f: &FeatureVector16, target: f64, weight: f64, rng: &mut Rng, grads: &mut ParamSet) -> f64 {
        let cache = self.forward(f, Some(rng));
        let (loss, dlogit) = bce_with_logit(cache.logit, target, weight);
        self.backward(f, &cache, dlogit, grads);
        loss
    }

    fn logit(&self, f: &FeatureVector16) -> f64 {
        self.score(f)
    }
}

pub fn features_of(windows: &[Window], exec: Exec) -> Result<Vec<FeatureVector16>> {
    exec.map(windows, |w| extract_features(&w.values))
        .into_iter()
        .collect()
}

/// Trains on the uncertainty labels of `train`, selecting the epoch with the
/// best validation F1.
pub fn train_uncertainty(
    train: &[Window],
    val: &[Window],
    config: &UncertaintyConfig,
    seed: u64,
    exec: Exec,
) -> Result<(UncertaintyModel, TrainLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("uncertainty predictor: empty training set".into()));
    }
    let mut model = UncertaintyModel::new(config, crate::rng::derive_seed(seed, "uncertainty-init"))?;
    let tx = features_of(train, exec)?;
    let vx = features_of(val, exec)?;
    let ty: Vec<bool> = train.iter().map(|w| w.is_uncertain).collect();
    let vy: Vec<bool> = val.iter().map(|w| w.is_uncertain).collect();
    let settings = TrainSettings {
        optim: config.optim(),
        seed: crate::rng::derive_seed(seed, "uncertainty-train"),
        class_weights: (1.0, 1.0),
        exec,
    };
    let log = fit(&mut model, &tx, &ty, &vx, &vy, &settings)?;
    Ok((model, log))
}

/// One evaluation-mode score per window, in order.
pub fn score_all(model: &UncertaintyModel, windows: &[Window], exec: Exec) -> Result<Vec<f64>> {
    let feats = features_of(windows, exec)?;
    Ok(exec.map(&feats, |f| model.score(f)))
}

/// Finite-difference objective over a small batch, with dropout masks
/// reseeded identically on every evaluation.
pub struct GatedObjective<'a> {
    pub model: &'a UncertaintyModel,
    pub inputs: &'a [FeatureVector16],
    pub targets: &'a [f64],
    pub dropout_seed: Option<u64>,
}

impl GatedObjective<'_> {
    fn run(&self, ps: &ParamSet, grads: Option<&mut ParamSet>) -> f64 {
        let mut total = 0.0;
        let mut grads = grads;
        for (i, (f, &y)) in self.inputs.iter().zip(self.targets).enumerate() {
            let mut rng = self
                .dropout_seed
                .map(|s| rng_from_seed(crate::rng::mix_seed(s, i as u64)));
            let cache = self.model.forward_with(ps, f, rng.as_mut());
            let (loss, dlogit) = bce_with_logit(cache.logit, y, 1.0);
            total += loss;
            if let Some(g) = grads.as_deref_mut() {
                backward_with(ps, f, &cache, dlogit, g);
            }
        }
        total
    }
}

impl crate::nn::Objective for GatedObjective<'_> {
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

    fn random_features(n: usize, seed: u64) -> Vec<FeatureVector16> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| {
                let mut v = [0.0; FEATURES];
                v.iter_mut().for_each(|x| *x = rng.random_range(-2.0..2.0));
                FeatureVector16(v)
            })
            .collect()
    }

    fn small_config() -> UncertaintyConfig {
        UncertaintyConfig {
            projection_dim: 6,
            expansion_dim: 10,
            head_dim: 5,
            ..UncertaintyConfig::default()
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = UncertaintyModel::new(&small_config(), 3).unwrap();
        let xs = random_features(4, 9);
        let ys = [1.0, 0.0, 1.0, 0.0];
        for dropout_seed in [None, Some(5)] {
            let obj = GatedObjective { model: &model, inputs: &xs, targets: &ys, dropout_seed };
            let report = check_gradients(&obj, &model.params, GradCheckOptions::default());
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn default_dims_and_param_count() {
        let m = UncertaintyModel::new(&UncertaintyConfig::default(), 0).unwrap();
        assert_eq!(m.dims(), (64, 128, 32));
        let expect = 64 * 16 + 64 + 128 * 64 + 128 + 64 * 128 + 64 + 64 * 64 + 64 + 32 * 64 + 32 + 32 + 1;
        assert_eq!(m.num_params(), expect);
    }

    #[test]
    fn rejects_non_expanding_block() {
        let cfg = UncertaintyConfig { expansion_dim: 64, ..UncertaintyConfig::default() };
        assert!(matches!(UncertaintyModel::new(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn closed_gate_passes_projection_through() {
        let mut m = UncertaintyModel::new(&small_config(), 1).unwrap();
        m.params.tensors[GATE].data.fill(0.0);
        m.params.tensors[GATE + 1].data.fill(-1000.0);
        for f in random_features(5, 2) {
            let c = m.forward(&f, None);
            for i in 0..c.d.len() {
                assert!((c.o[i] - c.d[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn residual_identity_when_transform_reproduces_input() {
        // W1 = [I; -I], b1 = 0, W2 = [I, -I]: h = ReLU(d) - ReLU(-d) = d for d ≥ 0.
        let cfg = UncertaintyConfig { projection_dim: 4, ..small_config() };
        let mut m = UncertaintyModel::new(&cfg, 4).unwrap();
        let (p, e, _) = m.dims();
        assert!(e >= 2 * p);
        let w1 = &mut m.params.tensors[T1];
        w1.data.fill(0.0);
        for i in 0..p {
            w1.data[i * p + i] = 1.0;
            w1.data[(p + i) * p + i] = -1.0;
        }
        m.params.tensors[T1 + 1].data.fill(0.0);
        let w2 = &mut m.params.tensors[T2];
        w2.data.fill(0.0);
        for i in 0..p {
            w2.data[i * e + i] = 1.0;
            w2.data[i * e + p + i] = -1.0;
        }
        m.params.tensors[T2 + 1].data.fill(0.0);
        for f in random_features(5, 8) {
            let c = m.forward(&f, None);
            assert_eq!(c.h, c.d);
            assert_eq!(c.o, c.d);
            assert!(c.g.iter().all(|&g| g > 0.0 && g < 1.0));
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let m = UncertaintyModel::new(&UncertaintyConfig::default(), 11).unwrap();
        let f = random_features(1, 3)[0];
        assert_eq!(m.score(&f).to_bits(), m.score(&f).to_bits());
        assert!(score_all(&m, &[], Exec::Sequential).unwrap().is_empty());
    }

    #[test]
    fn model_file_round_trip() {
        let m = UncertaintyModel::new(&small_config(), 6).unwrap();
        let back = UncertaintyModel::from_model_file(
            ModelFile::parse(&m.to_model_file().to_text(), "mem").unwrap(),
        )
        .unwrap();
        assert_eq!(back, m);
        let wrong = ModelFile::new("bilstm-safety-v1", m.params.clone()).with_meta("dropout", 0.3);
        assert!(UncertaintyModel::from_model_file(wrong).is_err());
    }
}
