//! Reward estimator: a small fully-convolutional network scoring a depth
//! window with one grasp-success probability per primitive, plus auxiliary
//! regression heads for the lateral angles and the final jaw width.

mod io;
pub mod net;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::heightmap::Heightmap;
use crate::imaging::Window;
use crate::rng::{self, label};
use net::{Act, Layout, Mode, Real};

pub use io::MAGIC;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kernel: usize,
    pub dilation: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// Side of the window the network scores, pixels.
    pub window: usize,
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub n_prim: usize,
    pub n_aux: usize,
    pub leaky_slope: f64,
    /// Heights are multiplied by this before entering the network.
    pub input_scale: f64,
    pub bn_momentum: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let l = |d, c| LayerSpec { kernel: 3, dilation: d, channels: c };
        Self {
            window: 32,
            in_channels: 2,
            layers: vec![l(1, 16), l(2, 24), l(4, 32), l(4, 32), l(4, 48)],
            n_prim: 4,
            n_aux: 3,
            leaky_slope: 0.2,
            input_scale: 10.0,
            bn_momentum: 0.1,
        }
    }
}

impl ModelSpec {
    /// Two hidden layers of 8 channels; small enough for finite differences.
    pub fn tiny() -> Self {
        let l = |d| LayerSpec { kernel: 3, dilation: d, channels: 8 };
        Self { window: 8, layers: vec![l(1), l(2)], ..Self::default() }
    }

    pub fn receptive_field(&self) -> usize {
        1 + self.layers.iter().map(|l| (l.kernel - 1) * l.dilation).sum::<usize>()
    }

    pub fn outputs(&self) -> usize {
        self.n_prim + self.n_aux
    }

    pub fn n_params(&self) -> usize {
        Layout::new(self).n_params
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers.is_empty() {
            return bad("network needs at least one hidden layer".into());
        }
        if self.layers.iter().any(|l| l.kernel == 0 || l.kernel % 2 == 0 || l.dilation == 0 || l.channels == 0) {
            return bad("layers need odd kernels and positive dilation and channels".into());
        }
        if self.in_channels != 2 {
            return bad(format!("input has depth and mask channels, got {}", self.in_channels));
        }
        if self.n_prim == 0 || self.n_aux > 3 {
            return bad(format!("outputs: {} primitives, {} aux", self.n_prim, self.n_aux));
        }
        if self.window != self.receptive_field() + 1 {
            return bad(format!("window {} does not match receptive field {} + 1", self.window, self.receptive_field()));
        }
        let finite = [self.leaky_slope, self.input_scale, self.bn_momentum].iter().all(|v| v.is_finite());
        if !finite || self.input_scale <= 0.0 || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("non-finite or out-of-range scalar in model spec".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub spec: ModelSpec,
    pub params: Vec<f32>,
    /// Per hidden layer: running means followed by running variances.
    pub running: Vec<f32>,
    pub seed: u64,
    pub dropout: f64,
    /// Free-form training metadata carried in the file header.
    pub meta: serde_json::Value,
}

pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<RewardModel> {
    spec.validate()?;
    let layout = Layout::new(spec);
    let mut rng = rng::stream(seed, &[label::INIT]);
    let mut params = vec![0.0f32; layout.n_params];
    let gain = 2.0 / (1.0 + spec.leaky_slope * spec.leaky_slope);
    for blk in &layout.hidden {
        let normal = Normal::new(0.0, (gain / blk.fan_in() as f64).sqrt()).unwrap();
        params[blk.w..blk.b].iter_mut().for_each(|p| *p = normal.sample(&mut rng) as f32);
        params[blk.gamma..blk.beta].fill(1.0);
    }
    let normal = Normal::new(0.0, (1.0 / layout.head_in() as f64).sqrt()).unwrap();
    params[layout.head_w..layout.head_b].iter_mut().for_each(|p| *p = normal.sample(&mut rng) as f32);
    let mut running = vec![0.0f32; layout.n_running];
    for blk in &layout.hidden {
        running[blk.running + blk.out_c..blk.running + 2 * blk.out_c].fill(1.0);
    }
    Ok(RewardModel { spec: spec.clone(), params, running, seed, dropout: 0.2, meta: serde_json::Value::Null })
}

/// Network input for one image: scaled heights, zero where unknown, and a
/// mask channel that is 1 on unknown cells.
fn encode<T: Real>(images: &[&Heightmap], scale: f64) -> Act<T> {
    let (h, w) = (images[0].height(), images[0].width());
    let n = images.len();
    let mut a = Act::zeros(2, n, h, w);
    let plane = n * h * w;
    for (ni, img) in images.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                let i = (ni * h + r) * w + c;
                match img.get(r, c) {
                    Some(v) => a.data[i] = T::lit(v as f64 * scale),
                    None => a.data[plane + i] = T::one(),
                }
            }
        }
    }
    a
}

/// Top-left `rf x rf` part of a window.
fn core(w: &Window, rf: usize) -> Result<Heightmap> {
    let n = w.size();
    if n != rf && n != rf + 1 {
        return arg(format!("window of {n} px does not fit receptive field {rf}"));
    }
    if n == rf {
        return Ok(w.image.clone());
    }
    let img = &w.image;
    let mut values = Vec::with_capacity(rf * rf);
    let mut mask = Vec::with_capacity(rf * rf);
    for r in 0..rf {
        for c in 0..rf {
            values.push(img.values()[img.index(r, c)]);
            mask.push(img.is_masked(r, c));
        }
    }
    Heightmap::from_parts(rf, rf, img.resolution(), img.origin(), values, mask)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutput {
    pub probs: Vec<f64>,
    pub aux: Vec<f64>,
}

impl RewardModel {
    pub fn layout(&self) -> Layout {
        Layout::new(&self.spec)
    }

    fn run(&self, input: Act<f32>, train_seed: Option<u64>) -> Act<f32> {
        let layout = self.layout();
        match train_seed {
            None => net::forward::<f32, rand_chacha::ChaCha8Rng>(&self.spec, &layout, &self.params, &self.running, input, Mode::Eval).0,
            Some(seed) => {
                let mut r = rng::stream(seed, &[label::DROPOUT]);
                let mode = Mode::Train { dropout: self.dropout, rng: &mut r };
                net::forward(&self.spec, &layout, &self.params, &self.running, input, mode).0
            }
        }
    }
}

/// Score one window. A window of `receptive_field + 1` px is scored on its
/// leading `receptive_field` core; train mode uses batch statistics and dropout.
pub fn forward_window(model: &RewardModel, w: &Window, train_mode: bool, seed: u64) -> Result<WindowOutput> {
    let img = core(w, model.spec.receptive_field())?;
    let out = model.run(encode(&[&img], model.spec.input_scale), train_mode.then_some(seed));
    let np = model.spec.n_prim;
    Ok(WindowOutput {
        probs: out.data[..np].iter().map(|&z| sigmoid(z as f64)).collect(),
        aux: out.data[np..].iter().map(|&v| v as f64).collect(),
    })
}

/// Dense output over an image: one score per valid window position.
/// `probs[(p * rows + i) * cols + j]` scores the window whose top-left pixel is `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMap {
    pub rows: usize,
    pub cols: usize,
    pub n_prim: usize,
    pub probs: Vec<f32>,
    pub aux: Vec<f32>,
}

impl DenseMap {
    pub fn prob(&self, p: usize, i: usize, j: usize) -> f32 {
        self.probs[(p * self.rows + i) * self.cols + j]
    }
}

pub fn forward_dense(model: &RewardModel, image: &Heightmap) -> Result<DenseMap> {
    let rf = model.spec.receptive_field();
    if image.width() < rf || image.height() < rf {
        return arg(format!("image {}x{} smaller than receptive field {rf}", image.width(), image.height()));
    }
    let out = model.run(encode(&[image], model.spec.input_scale), None);
    let np = model.spec.n_prim;
    let plane = out.h * out.w;
    Ok(DenseMap {
        rows: out.h,
        cols: out.w,
        n_prim: np,
        probs: out.data[..np * plane].iter().map(|&z| sigmoid(z as f64) as f32).collect(),
        aux: out.data[np * plane..].to_vec(),
    })
}

pub const BCE_EPS: f64 = 1e-7;

pub fn bce(pred: f64, label: f64) -> f64 {
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxTask {
    None,
    FinalWidth,
    Lateral,
    Both,
}

impl AuxTask {
    /// Supervised aux channels, in head order (b, c, d_final).
    pub fn channels(self) -> &'static [usize] {
        match self {
            AuxTask::None => &[],
            AuxTask::FinalWidth => &[2],
            AuxTask::Lateral => &[0, 1],
            AuxTask::Both => &[0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub aux_task: AuxTask,
    pub aux_weight: f64,
    pub val_fraction: f64,
    /// Fixed per-primitive loss weights; derived from mean rewards when absent.
    pub class_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 10,
            dropout: 0.2,
            aux_task: AuxTask::None,
            aux_weight: 0.1,
            val_fraction: 0.2,
            class_weights: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && (0.2..=0.4).contains(&self.dropout)
            && self.aux_weight >= 0.0
            && (0.0..1.0).contains(&self.val_fraction)
            && self.class_weights.as_ref().is_none_or(|w| w.iter().all(|v| v.is_finite() && *v > 0.0));
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }
}

/// One supervised attempt: the window at the executed pose, the executed
/// primitive, its binary reward and the aux targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub window: Heightmap,
    pub m: usize,
    pub reward: u8,
    /// Aux targets in head order: b, c, final width over max stroke.
    pub aux: [f64; 3],
}

/// Weight of primitive `m`: mean reward over all primitives divided by its
/// own mean reward. Primitives never tried or never successful keep weight 1.
pub fn class_weights(samples: &[TrainSample], n_prim: usize) -> Vec<f64> {
    let total = samples.iter().map(|s| s.reward as f64).sum::<f64>() / samples.len().max(1) as f64;
    (0..n_prim)
        .map(|m| {
            let (n, r) = samples.iter().filter(|s| s.m == m).fold((0usize, 0.0), |(n, r), s| (n + 1, r + s.reward as f64));
            if n == 0 || r == 0.0 || total == 0.0 {
                1.0
            } else {
                total / (r / n as f64)
            }
        })
        .collect()
}

struct Batch<'a> {
    samples: Vec<&'a TrainSample>,
}

/// Total weighted loss and its gradient on one batch, in training mode.
fn loss_and_grad<T: Real>(
    spec: &ModelSpec,
    layout: &Layout,
    params: &[T],
    running: &[T],
    batch: &Batch<'_>,
    weights: &[f64],
    aux: AuxTask,
    aux_weight: f64,
    dropout: f64,
    dropout_rng: &mut impl rand::Rng,
) -> (f64, Vec<T>, Vec<(Vec<T>, Vec<T>)>) {
    let imgs: Vec<&Heightmap> = batch.samples.iter().map(|s| &s.window).collect();
    let input = encode::<T>(&imgs, spec.input_scale);
    let (out, cache) = net::forward(spec, layout, params, running, input, Mode::Train { dropout, rng: dropout_rng });
    let cache = cache.expect("train mode caches");
    let b = batch.samples.len();
    let inv_b = 1.0 / b as f64;
    let plane = out.plane();
    debug_assert_eq!(plane, b);
    let mut dout = Act::zeros(out.c, out.n, out.h, out.w);
    let chans = aux.channels();
    let mut loss = 0.0;
    for (i, s) in batch.samples.iter().enumerate() {
        let z = out.data[s.m * plane + i].to_f64().unwrap();
        let p = sigmoid(z);
        let y = s.reward as f64;
        loss += weights[s.m] * bce(p, y) * inv_b;
        if p > BCE_EPS && p < 1.0 - BCE_EPS {
            dout.data[s.m * plane + i] = T::lit(weights[s.m] * (p - y) * inv_b);
        }
        for &k in chans {
            let ch = spec.n_prim + k;
            let e = out.data[ch * plane + i].to_f64().unwrap() - s.aux[k];
            let scale = aux_weight * inv_b / chans.len() as f64;
            loss += scale * e * e;
            dout.data[ch * plane + i] = T::lit(2.0 * scale * e);
        }
    }
    let stats = cache.batch_stats.clone();
    let grad = net::backward(spec, layout, params, cache, &dout);
    (loss, grad, stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(with = "crate::serde_nan")]
    pub val_bce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub class_weights: Vec<f64>,
    /// Validation BCE before the first update.
    #[serde(with = "crate::serde_nan")]
    pub initial_val_bce: f64,
    pub history: Vec<EpochStats>,
    pub n_train: usize,
    pub n_val: usize,
}

impl TrainReport {
    pub fn final_val_bce(&self) -> f64 {
        self.history.last().map_or(self.initial_val_bce, |e| e.val_bce)
    }
}

/// Mean unweighted BCE of the executed primitive, eval mode.
pub fn evaluate_bce(model: &RewardModel, samples: &[&TrainSample]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut total = 0.0;
    for chunk in samples.chunks(64) {
        let imgs: Vec<&Heightmap> = chunk.iter().map(|s| &s.window).collect();
        let out = model.run(encode(&imgs, model.spec.input_scale), None);
        let plane = out.plane();
        for (i, s) in chunk.iter().enumerate() {
            total += bce(sigmoid(out.data[s.m * plane + i] as f64), s.reward as f64);
        }
    }
    total / samples.len() as f64
}

/// Mini-batch Adam on the weighted BCE of the executed primitive plus the
/// aux regression. Continues from the model's current parameters.
pub fn train(model: &mut RewardModel, samples: &[TrainSample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return arg("training set is empty");
    }
    let rf = model.spec.receptive_field();
    if let Some(s) = samples.iter().find(|s| s.window.width() != rf || s.window.height() != rf || s.m >= model.spec.n_prim) {
        return arg(format!("sample window {}x{} or primitive {} does not fit the model", s.window.width(), s.window.height(), s.m));
    }
    let weights = match &cfg.class_weights {
        Some(w) if w.len() == model.spec.n_prim => w.clone(),
        Some(w) => return arg(format!("{} class weights for {} primitives", w.len(), model.spec.n_prim)),
        None => class_weights(samples, model.spec.n_prim),
    };
    model.dropout = cfg.dropout;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, &[label::SHUFFLE, 0]));
    let n_val = if samples.len() >= 2 { ((samples.len() as f64 * cfg.val_fraction).round() as usize).min(samples.len() - 1) } else { 0 };
    let (val_idx, train_idx) = order.split_at(n_val);
    let val: Vec<&TrainSample> = val_idx.iter().map(|&i| &samples[i]).collect();
    let train_set: Vec<usize> = train_idx.to_vec();

    let layout = model.layout();
    let mut adam = Adam::new(layout.n_params, cfg.learning_rate);
    let mom = model.spec.bn_momentum as f32;
    let mut shuffle = rng::stream(cfg.seed, &[label::SHUFFLE, 1]);
    let mut drop_rng = rng::stream(cfg.seed, &[label::DROPOUT]);
    let initial_val_bce = evaluate_bce(model, &val);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut idx = train_set.clone();
        idx.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in idx.chunks(cfg.batch_size) {
            let batch = Batch { samples: chunk.iter().map(|&i| &samples[i]).collect() };
            let (loss, grad, stats) = loss_and_grad(
                &model.spec,
                &layout,
                &model.params,
                &model.running,
                &batch,
                &weights,
                cfg.aux_task,
                cfg.aux_weight,
                cfg.dropout,
                &mut drop_rng,
            );
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!("non-finite loss {loss} at epoch {epoch}, batch {batches}")));
            }
            adam.step(&mut model.params, &grad);
            for (blk, (mean, var)) in layout.hidden.iter().zip(stats) {
                let n = (batch.samples.len() * blk_plane(&model.spec, blk.running, &layout)) as f32;
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                for o in 0..blk.out_c {
                    let rm = &mut model.running[blk.running + o];
                    *rm = (1.0 - mom) * *rm + mom * mean[o];
                    let rv = &mut model.running[blk.running + blk.out_c + o];
                    *rv = (1.0 - mom) * *rv + mom * var[o] * unbias;
                }
            }
            total += loss;
            batches += 1;
        }
        let val_bce = evaluate_bce(model, &val);
        history.push(EpochStats { epoch, train_loss: total / batches.max(1) as f64, val_bce });
    }
    Ok(TrainReport { class_weights: weights, initial_val_bce, history, n_train: train_set.len(), n_val })
}

/// Spatial size of a hidden layer's output for a receptive-field window.
fn blk_plane(spec: &ModelSpec, running_off: usize, layout: &Layout) -> usize {
    let mut side = spec.receptive_field();
    for blk in &layout.hidden {
        side -= (blk.kernel - 1) * blk.dilation;
        if blk.running == running_off {
            return side * side;
        }
    }
    1
}

struct Adam {
    lr: f64,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self { lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f32], grad: &[f32]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let (b1, b2) = (Self::B1 as f32, Self::B2 as f32);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (Self::EPS * c2.sqrt()) as f32;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

/// Finite-difference check of the analytic gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub checked: usize,
    /// Coordinates whose relative error exceeds the tolerance.
    pub failures: usize,
    pub worst_relative: f64,
}

/// Compare the backpropagated gradient of the training loss (both auxiliary
/// heads, dropout with a fixed mask) against central differences on
/// `coords` random parameters, in double precision.
pub fn gradient_check(model: &RewardModel, samples: &[TrainSample], coords: usize, rel_tol: f64, seed: u64) -> Result<GradientCheck> {
    if samples.is_empty() {
        return arg("gradient check needs samples");
    }
    let spec = &model.spec;
    let layout = model.layout();
    let params: Vec<f64> = model.params.iter().map(|&v| v as f64).collect();
    let running: Vec<f64> = model.running.iter().map(|&v| v as f64).collect();
    let batch = Batch { samples: samples.iter().collect() };
    let weights: Vec<f64> = (0..spec.n_prim).map(|m| 0.7 + 0.4 * m as f64).collect();
    let eval = |p: &[f64]| {
        let mut r = rng::stream(seed, &[label::DROPOUT]);
        loss_and_grad(spec, &layout, p, &running, &batch, &weights, AuxTask::Both, 0.1, 0.3, &mut r)
    };
    let (_, grad, _) = eval(&params);
    let mut pick = rng::stream(seed, &[label::SHUFFLE]);
    let mut out = GradientCheck { checked: coords, failures: 0, worst_relative: 0.0 };
    for _ in 0..coords {
        let i = rand::Rng::gen_range(&mut pick, 0..params.len());
        let h = 1e-6 * params[i].abs().max(1.0);
        let mut p = params.clone();
        p[i] += h;
        let up = eval(&p).0;
        p[i] -= 2.0 * h;
        let down = eval(&p).0;
        let numeric = (up - down) / (2.0 * h);
        let err = (grad[i] - numeric).abs();
        let scale = grad[i].abs().max(numeric.abs());
        if err > rel_tol * scale && err > 1e-9 {
            out.failures += 1;
        }
        if scale > 1e-9 {
            out.worst_relative = out.worst_relative.max(err / scale);
        }
    }
    Ok(out)
}
