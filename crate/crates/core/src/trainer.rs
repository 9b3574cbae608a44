//! A constant-width MLP trained with mixup on synthetic Gaussian blobs.
//!
//! Backpropagation is written out by hand; the same code path serves training
//! and the finite-difference checks in the test suite.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::etf::{build_simplex_etf, etf_deviation_metrics, EtfMetrics};
use crate::mixup::{make_mixup_batch, one_hot, BetaSpec, MixKind, MixupSample};
use crate::theory::FeatureRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub num_classes: usize,
    pub input_dim: usize,
    pub class_means: Vec<Vec<f64>>,
    pub noise_scale: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl SyntheticDataset {
    /// Class means evenly spaced on a circle of `radius` in the first two input coordinates.
    pub fn on_circle(
        num_classes: usize,
        input_dim: usize,
        radius: f64,
        noise_scale: f64,
        samples_per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_dim < 2 {
            return Err(Error::InvalidArgument(format!("input dimension {input_dim} is below 2")));
        }
        let class_means = (0..num_classes)
            .map(|k| {
                let angle = std::f64::consts::TAU * k as f64 / num_classes as f64;
                let mut mean = vec![0.0; input_dim];
                mean[0] = radius * angle.cos();
                mean[1] = radius * angle.sin();
                mean
            })
            .collect();
        let spec = Self { num_classes, input_dim, class_means, noise_scale, samples_per_class, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.class_means.len() != self.num_classes {
            return Err(Error::DimensionMismatch { expected: self.num_classes, got: self.class_means.len() });
        }
        if let Some(bad) = self.class_means.iter().find(|m| m.len() != self.input_dim) {
            return Err(Error::DimensionMismatch { expected: self.input_dim, got: bad.len() });
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise scale must be nonnegative, got {}", self.noise_scale)));
        }
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                let dist = self.class_means[a]
                    .iter()
                    .zip(&self.class_means[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if dist < 4.0 * self.noise_scale {
                    return Err(Error::InvalidArgument(format!(
                        "class means {a} and {b} are {dist} apart, below 4 x noise scale"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Inputs with hard labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }
}

/// Gaussian blobs around the class means, class-major order.
pub fn make_synthetic(spec: &SyntheticDataset) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut inputs = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    let mut labels = Vec::with_capacity(inputs.capacity());
    for (class, mean) in spec.class_means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let x = mean
                .iter()
                .map(|&mu| {
                    let z: f64 = rng.sample(StandardNormal);
                    mu + spec.noise_scale * z
                })
                .collect();
            inputs.push(x);
            labels.push(class);
        }
    }
    Ok(Dataset { inputs, labels, num_classes: spec.num_classes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy against mixed soft labels.
    CeMixup,
    /// Squared error between logits and mixed soft labels.
    MseMixup,
    /// Cross-entropy on unmixed examples.
    CeBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    Learned,
    FixedEtf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_layers: usize,
    /// Width of every hidden layer, also the feature dimension.
    pub width: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Mixup is used when positive and the loss is not the baseline.
    pub mixup_alpha: f64,
    pub loss_kind: LossKind,
    pub classifier_mode: ClassifierMode,
    pub etf_multiplier: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 3,
            width: 16,
            activation: Activation::Relu,
            epochs: 200,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-3,
            mixup_alpha: 1.0,
            loss_kind: LossKind::CeMixup,
            classifier_mode: ClassifierMode::Learned,
            etf_multiplier: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.hidden_layers == 0 {
            return bad("need at least one hidden layer".into());
        }
        if self.width == 0 || self.batch_size == 0 {
            return bad("width and batch size must be positive".into());
        }
        let lr_ok = self.learning_rate.is_finite() && self.learning_rate > 0.0;
        let wd_ok = self.weight_decay.is_finite() && self.weight_decay >= 0.0;
        if !lr_ok || !(0.0..1.0).contains(&self.momentum) || !wd_ok {
            return bad(format!(
                "invalid optimizer settings: lr {}, momentum {}, weight decay {}",
                self.learning_rate, self.momentum, self.weight_decay
            ));
        }
        if self.mixup_alpha.is_nan() || self.mixup_alpha < 0.0 {
            return bad(format!("mixup alpha must be nonnegative, got {}", self.mixup_alpha));
        }
        if self.classifier_mode == ClassifierMode::FixedEtf
            && (self.etf_multiplier == 0.0 || !self.etf_multiplier.is_finite())
        {
            return bad(format!("ETF multiplier must be finite and nonzero, got {}", self.etf_multiplier));
        }
        Ok(())
    }

    pub fn uses_mixup(&self) -> bool {
        self.loss_kind != LossKind::CeBaseline && self.mixup_alpha > 0.0
    }
}

/// Affine layer `z = W x + b`, `W` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    fn uniform<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = DMatrix::from_fn(outputs, inputs, |_, _| rng.random_range(-bound..bound));
        let bias = DVector::from_fn(outputs, |_, _| rng.random_range(-bound..bound));
        Self { weight, bias }
    }

    /// Batch rows in, batch rows out.
    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * self.weight.transpose();
        for mut row in z.row_iter_mut() {
            row += self.bias.transpose();
        }
        z
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training objective over the epoch's batches, without weight decay.
    pub loss: f64,
    /// Accuracy on the unmixed training set after the epoch.
    pub accuracy: f64,
    pub classifier: EtfMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub activation: Activation,
    pub classifier_mode: ClassifierMode,
    pub hidden: Vec<Dense>,
    pub classifier: Dense,
    pub history: Vec<EpochStats>,
}

struct ForwardCache {
    /// Layer inputs: the batch followed by every hidden output.
    outputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    logits: DMatrix<f64>,
}

fn batch_matrix(rows: &[Vec<f64>], dim: usize) -> Result<DMatrix<f64>> {
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: bad.len() });
    }
    Ok(DMatrix::from_fn(rows.len(), dim, |r, c| rows[r][c]))
}

impl TrainedModel {
    /// Seeded uniform fan-in initialization.
    pub fn init<R: Rng>(input_dim: usize, num_classes: usize, cfg: &TrainConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut hidden = Vec::with_capacity(cfg.hidden_layers);
        let mut fan_in = input_dim;
        for _ in 0..cfg.hidden_layers {
            hidden.push(Dense::uniform(fan_in, cfg.width, rng));
            fan_in = cfg.width;
        }
        let classifier = match cfg.classifier_mode {
            ClassifierMode::Learned => Dense::uniform(cfg.width, num_classes, rng),
            ClassifierMode::FixedEtf => {
                let etf = build_simplex_etf(num_classes, cfg.width, cfg.etf_multiplier, cfg.seed)?;
                Dense { weight: etf.rows().clone(), bias: DVector::zeros(num_classes) }
            }
        };
        Ok(Self {
            activation: cfg.activation,
            classifier_mode: cfg.classifier_mode,
            hidden,
            classifier,
            history: Vec::new(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.hidden[0].weight.ncols()
    }

    pub fn width(&self) -> usize {
        self.classifier.weight.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.weight.nrows()
    }

    /// Sizes from input to logits.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.hidden.iter().map(|l| l.weight.nrows()));
        sizes.push(self.num_classes());
        sizes
    }

    fn forward(&self, x: DMatrix<f64>) -> ForwardCache {
        let mut outputs = vec![x];
        let mut pre = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let z = layer.forward(outputs.last().expect("nonempty"));
            let act = self.activation;
            outputs.push(z.map(|v| act.apply(v)));
            pre.push(z);
        }
        let logits = self.classifier.forward(outputs.last().expect("nonempty"));
        ForwardCache { outputs, pre, logits }
    }

    pub fn logits(&self, inputs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        Ok(self.forward(batch_matrix(inputs, self.input_dim())?).logits)
    }

    /// Every hidden post-activation for one input.
    pub fn hidden_states(&self, x: &[f64]) -> Result<Vec<DVector<f64>>> {
        let cache = self.forward(batch_matrix(&[x.to_vec()], self.input_dim())?);
        Ok(cache.outputs[1..].iter().map(|m| m.row(0).transpose()).collect())
    }

    pub fn predict(&self, inputs: &[Vec<f64>]) -> Result<Vec<usize>> {
        let logits = self.logits(inputs)?;
        Ok(logits.row_iter().map(|r| argmax(r.iter().copied())).collect())
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let pred = self.predict(&data.inputs)?;
        let correct = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
        Ok(correct as f64 / data.len() as f64)
    }

    fn trainable_classifier(&self) -> bool {
        self.classifier_mode == ClassifierMode::Learned
    }

    /// Trainable parameters flattened: each hidden layer's weight (row-major)
    /// then bias, then the classifier's when it is learned.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut push = |layer: &Dense| {
            for r in 0..layer.weight.nrows() {
                out.extend(layer.weight.row(r).iter());
            }
            out.extend(layer.bias.iter());
        };
        self.hidden.iter().for_each(&mut push);
        if self.trainable_classifier() {
            push(&self.classifier);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        let expected = self.hidden.iter().map(Dense::param_count).sum::<usize>()
            + if self.trainable_classifier() { self.classifier.param_count() } else { 0 };
        if params.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: params.len() });
        }
        let mut offset = 0;
        let mut fill = |layer: &mut Dense| {
            let cols = layer.weight.ncols();
            for r in 0..layer.weight.nrows() {
                for c in 0..cols {
                    layer.weight[(r, c)] = params[offset];
                    offset += 1;
                }
            }
            for b in layer.bias.iter_mut() {
                *b = params[offset];
                offset += 1;
            }
        };
        self.hidden.iter_mut().for_each(&mut fill);
        if self.trainable_classifier() {
            fill(&mut self.classifier);
        }
        Ok(())
    }

    /// Batch objective (mean over the batch plus `wd/2 |θ|²`) and its gradient
    /// in the layout of [`TrainedModel::parameters`].
    pub fn loss_and_gradient(
        &self,
        inputs: &[Vec<f64>],
        targets: &[Vec<f64>],
        loss_kind: LossKind,
        weight_decay: f64,
    ) -> Result<(f64, Vec<f64>)> {
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch { expected: inputs.len(), got: targets.len() });
        }
        if inputs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let x = batch_matrix(inputs, self.input_dim())?;
        let y = batch_matrix(targets, self.num_classes())?;
        let n = inputs.len() as f64;
        let cache = self.forward(x);

        let (data_loss, mut delta) = match loss_kind {
            LossKind::CeMixup | LossKind::CeBaseline => {
                let mut loss = 0.0;
                let mut grad = DMatrix::zeros(cache.logits.nrows(), cache.logits.ncols());
                for r in 0..cache.logits.nrows() {
                    let z = cache.logits.row(r);
                    let max = z.max();
                    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    for k in 0..z.len() {
                        let logp = z[k] - lse;
                        loss -= y[(r, k)] * logp;
                        grad[(r, k)] = (logp.exp() - y[(r, k)]) / n;
                    }
                }
                (loss / n, grad)
            }
            LossKind::MseMixup => {
                let diff = &cache.logits - &y;
                (diff.norm_squared() / n, diff * (2.0 / n))
            }
        };

        let params = self.parameters();
        let param_sq: f64 = params.iter().map(|p| p * p).sum();
        let total = data_loss + 0.5 * weight_decay * param_sq;

        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(self.hidden.len() + 1);
        let last = cache.outputs.last().expect("nonempty");
        let classifier_grad = (delta.transpose() * last, column_sums(&delta));
        delta = &delta * &self.classifier.weight;
        for (l, layer) in self.hidden.iter().enumerate().rev() {
            let act = self.activation;
            let dz = delta.zip_zip_map(&cache.pre[l], &cache.outputs[l + 1], |g, z, a| g * act.derivative(z, a));
            grads.push((dz.transpose() * &cache.outputs[l], column_sums(&dz)));
            delta = &dz * &layer.weight;
        }
        grads.reverse();
        if self.trainable_classifier() {
            grads.push(classifier_grad);
        }

        let mut flat = Vec::with_capacity(params.len());
        for (gw, gb) in &grads {
            for r in 0..gw.nrows() {
                flat.extend(gw.row(r).iter());
            }
            flat.extend(gb.iter());
        }
        if weight_decay > 0.0 {
            for (g, p) in flat.iter_mut().zip(&params) {
                *g += weight_decay * p;
            }
        }
        Ok((total, flat))
    }
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |c, _| m.column(c).sum())
}

fn argmax<I: Iterator<Item = f64>>(values: I) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (k, v) in values.enumerate() {
        if v > best_value {
            best = k;
            best_value = v;
        }
    }
    best
}

/// Minibatch SGD with momentum and weight decay.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= data.num_classes) {
        return Err(Error::ClassOutOfRange { index: bad, num_classes: data.num_classes });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = TrainedModel::init(data.input_dim(), data.num_classes, cfg, &mut rng)?;
    let beta = if cfg.uses_mixup() { Some(BetaSpec::new(cfg.mixup_alpha)?) } else { None };
    let steps = data.len().div_ceil(cfg.batch_size);
    let mut velocity = vec![0.0; model.parameters().len()];
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for step in 0..steps {
            let (inputs, targets): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match &beta {
                Some(spec) => {
                    make_mixup_batch(&data.inputs, &data.labels, data.num_classes, spec, cfg.batch_size, &mut rng)?
                        .into_iter()
                        .map(|s| (s.x, s.y))
                        .unzip()
                }
                None => order[step * cfg.batch_size..((step + 1) * cfg.batch_size).min(data.len())]
                    .iter()
                    .map(|&k| (data.inputs[k].clone(), one_hot(data.labels[k], data.num_classes)))
                    .unzip(),
            };
            let (loss, grad) = model.loss_and_gradient(&inputs, &targets, cfg.loss_kind, cfg.weight_decay)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            loss_sum += loss;
            let mut params = model.parameters();
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v + g;
                *p -= cfg.learning_rate * *v;
            }
            model.set_parameters(&params)?;
        }
        let loss = loss_sum / steps as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        let stats = EpochStats {
            epoch,
            loss,
            accuracy: model.accuracy(data)?,
            classifier: etf_deviation_metrics(&model.classifier.weight)?,
        };
        model.history.push(stats);
    }
    Ok(model)
}

/// Penultimate-layer features of the mixed samples, tagged with their provenance.
pub fn extract_activations(model: &TrainedModel, samples: &[MixupSample]) -> Result<Vec<FeatureRecord>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let inputs: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    let cache = model.forward(batch_matrix(&inputs, model.input_dim())?);
    let features = cache.outputs.last().expect("nonempty");
    Ok(samples
        .iter()
        .enumerate()
        .map(|(r, s)| {
            let mut rec = FeatureRecord::new(s.class_i, s.class_j, s.lambda, features.row(r).transpose(), false);
            rec.kind = s.kind;
            rec
        })
        .collect())
}

/// Hidden representations of one mixed sample, first layer to last.
pub fn layer_trajectory(model: &TrainedModel, sample: &MixupSample) -> Result<Vec<DVector<f64>>> {
    model.hidden_states(&sample.x)
}

/// Mixed samples of `data` for every pair on a coefficient grid, restricted to
/// different-class pairs when `kind` says so.
pub fn mixup_grid(data: &Dataset, pairs: &[(usize, usize)], lambdas: &[f64]) -> Result<Vec<MixupSample>> {
    let c = data.num_classes;
    let mut out = Vec::with_capacity(pairs.len() * lambdas.len());
    for &(a, b) in pairs {
        for idx in [a, b] {
            if idx >= data.len() {
                return Err(Error::InvalidArgument(format!("sample index {idx} out of range")));
            }
        }
        for &lambda in lambdas {
            let mut s = crate::mixup::mix_pair(
                &data.inputs[a],
                &one_hot(data.labels[a], c),
                &data.inputs[b],
                &one_hot(data.labels[b], c),
                lambda,
            )?;
            s.pair = Some((a, b));
            out.push(s);
        }
    }
    Ok(out)
}

/// Samples of a given kind drawn from a mixup batch.
pub fn filter_kind(samples: Vec<MixupSample>, kind: MixKind) -> Vec<MixupSample> {
    samples.into_iter().filter(|s| s.kind == kind).collect()
}
