//! A small multilayer embedding model, first-order optimizers and the
//! training loop.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{gather_rows, inject_noise, BalancedSampler, Dataset, NoiseSpec};
use crate::distributions::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::losses::{train_loss, LinearClassifier, LocalLoss, LossConfig};

/// Added to the norm before dividing, so a zero output maps to zero.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// `out x in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weights.t()) + &self.bias
    }
}

/// One or two affine maps with a rectifier between them, followed by
/// projection onto the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    layers: Vec<Affine>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Output of the last affine map, before normalization.
    raw: Array2<f64>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradient {
    pub layers: Vec<Affine>,
}

impl ModelGradient {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied()).collect()
    }
}

impl EmbeddingModel {
    /// Weights uniform in `[0, 1/sqrt(fan_in))`, biases zero.
    pub fn new(input: usize, hidden: Option<usize>, output: usize, seed: u64) -> Result<Self> {
        if input == 0 || output == 0 || hidden == Some(0) {
            return Err(Error::param("model", "layer widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |fan_out: usize, fan_in: usize| {
            let scale = 1.0 / (fan_in as f64).sqrt();
            Affine {
                weights: Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random::<f64>() * scale),
                bias: Array1::zeros(fan_out),
            }
        };
        let layers = match hidden {
            Some(h) => vec![init(h, input), init(output, h)],
            None => vec![init(output, input)],
        };
        Ok(Self { layers })
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_layers(vec![Affine { weights: Array2::eye(dim), bias: Array1::zeros(dim) }]).unwrap()
    }

    pub fn from_layers(layers: Vec<Affine>) -> Result<Self> {
        if layers.is_empty() || layers.len() > 2 {
            return Err(Error::param("layers", format!("need 1 or 2 layers, got {}", layers.len())));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.nrows() != l.bias.len() || l.weights.is_empty() {
                return Err(Error::ShapeMismatch(l.weights.nrows(), l.weights.ncols(), l.bias.len(), 1));
            }
            if i > 0 && layers[i - 1].weights.nrows() != l.weights.ncols() {
                return Err(Error::DimensionMismatch { expected: layers[i - 1].weights.nrows(), got: l.weights.ncols() });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Affine] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.ncols() });
        }
        let mut inputs = vec![x.to_owned()];
        let mut current = self.layers[0].apply(x);
        for layer in &self.layers[1..] {
            current.mapv_inplace(|v| v.max(0.0));
            let next = layer.apply(current.view());
            inputs.push(current);
            current = next;
        }
        if current.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("activations"));
        }
        let mut output = current.clone();
        for mut row in output.rows_mut() {
            let rho = row.dot(&row).sqrt() + NORM_GUARD;
            row.mapv_inplace(|v| v / rho);
        }
        Ok(ForwardCache { inputs, raw: current, output })
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.output)
    }

    pub fn embed(&self, x: ArrayView2<'_, f64>, labels: Vec<usize>, num_classes: usize) -> Result<EmbeddingBatch> {
        EmbeddingBatch::unnormalized(self.forward(x)?, labels, num_classes)
    }

    /// Parameter gradients given `grad_z = dL/dz` for the normalized outputs.
    pub fn backward(&self, cache: &ForwardCache, grad_z: ArrayView2<'_, f64>) -> Result<ModelGradient> {
        if grad_z.dim() != cache.output.dim() {
            let (a, b) = cache.output.dim();
            return Err(Error::ShapeMismatch(a, b, grad_z.nrows(), grad_z.ncols()));
        }
        // z = y / (|y| + g)  =>  dz/dy = I/rho - y y^T / (rho^2 |y|)
        let mut delta = Array2::zeros(cache.raw.raw_dim());
        for ((y, g), mut d) in cache.raw.rows().into_iter().zip(grad_z.rows()).zip(delta.rows_mut()) {
            let norm = y.dot(&y).sqrt();
            let rho = norm + NORM_GUARD;
            let radial = if norm > 0.0 { y.dot(&g) / (rho * rho * norm) } else { 0.0 };
            Zip::from(&mut d).and(&y).and(&g).for_each(|d, &y, &g| *d = g / rho - y * radial);
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let input = &cache.inputs[i];
            grads.push(Affine { weights: delta.t().dot(input), bias: delta.sum_axis(Axis(0)) });
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weights);
                Zip::from(&mut back).and(input).for_each(|b, &a| {
                    if a <= 0.0 {
                        *b = 0.0;
                    }
                });
                delta = back;
            }
        }
        grads.reverse();
        Ok(ModelGradient { layers: grads })
    }

    /// Weights row-major then bias, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch { expected: self.num_params(), got: params.len() });
        }
        let mut it = params.iter();
        for layer in &mut self.layers {
            for (dst, src) in layer.weights.iter_mut().chain(layer.bias.iter_mut()).zip(&mut it) {
                *dst = *src;
            }
        }
        Ok(())
    }

    /// Text checkpoint: a `layers` count, then per layer its `out in`
    /// shape, `out` weight rows and one bias row.
    pub fn to_text(&self) -> String {
        let mut out = format!("layers {}\n", self.layers.len());
        for l in &self.layers {
            writeln!(out, "{} {}", l.weights.nrows(), l.weights.ncols()).unwrap();
            for row in l.weights.rows() {
                out.push_str(&join(row.iter()));
                out.push('\n');
            }
            out.push_str(&join(l.bias.iter()));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::Parse { line: 0, reason: format!("missing {what}") });
        let (ln, header) = next("header")?;
        let count: usize = header
            .strip_prefix("layers ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Parse { line: ln, reason: "expected `layers <count>`".into() })?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, shape) = next("layer shape")?;
            let dims = parse_row(ln, shape)?;
            let [rows, cols] = dims[..] else {
                return Err(Error::Parse { line: ln, reason: "expected `<out> <in>`".into() });
            };
            let (rows, cols) = (rows as usize, cols as usize);
            let mut weights = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (ln, row) = next("weight row")?;
                let values = parse_row(ln, row)?;
                if values.len() != cols {
                    return Err(Error::Parse { line: ln, reason: format!("expected {cols} values, found {}", values.len()) });
                }
                weights.extend(values);
            }
            let (ln, row) = next("bias row")?;
            let bias = parse_row(ln, row)?;
            if bias.len() != rows {
                return Err(Error::Parse { line: ln, reason: format!("expected {rows} values, found {}", bias.len()) });
            }
            layers.push(Affine {
                weights: Array2::from_shape_vec((rows, cols), weights).expect("row lengths checked"),
                bias: Array1::from(bias),
            });
        }
        Self::from_layers(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn join<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    values.map(f64::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_row(line: usize, text: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Parse { line, reason: format!("bad number `{t}`") }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam()
    }
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 5e-4,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            decay_factor: 0.1,
            decay_every: 50,
            epochs: 100,
            seed: 0,
        }
    }

    pub fn sgd() -> Self {
        Self { kind: OptimizerKind::SgdMomentum, learning_rate: 1e-2, ..Self::adam() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param("learning_rate", "must be finite and nonnegative"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::param("decay_factor", "must lie in (0, 1]"));
        }
        if self.decay_every == 0 {
            return Err(Error::param("decay_every", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::param("momentum", "momentum and betas must lie in [0, 1)"));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::param("adam_epsilon", "must be positive"));
        }
        Ok(())
    }

    /// `lr * decay^floor(epoch / decay_every)`
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// Optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, num_params: usize) -> Self {
        Self { cfg, first: vec![0.0; num_params], second: vec![0.0; num_params], steps: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.first.len());
        self.steps += 1;
        match self.cfg.kind {
            OptimizerKind::SgdMomentum => {
                for ((p, v), g) in params.iter_mut().zip(&mut self.first).zip(grad) {
                    *v = self.cfg.momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                let c1 = 1.0 - b1.powi(self.steps);
                let c2 = 1.0 - b2.powi(self.steps);
                for (((p, m), v), g) in params.iter_mut().zip(&mut self.first).zip(&mut self.second).zip(grad) {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.cfg.adam_epsilon);
                }
            }
        }
    }
}

/// Batching and schedule options that are not part of the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    /// Defaults to the local loss family's value when `None`.
    pub samples_per_class: Option<usize>,
    /// Epochs of cross-entropy only training before the configured loss.
    pub warmup_epochs: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { batch_size: 100, samples_per_class: None, warmup_epochs: 0 }
    }
}

/// Means over the epoch's batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub total: f64,
    pub local: f64,
    pub phi: f64,
    pub xent: f64,
    pub batches: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EmbeddingModel,
    pub classifier: Option<LinearClassifier>,
    pub noisy_labels: Vec<usize>,
    pub noise_mask: Vec<bool>,
    pub log: Vec<EpochLog>,
}

pub fn train(
    dataset: &Dataset,
    model: EmbeddingModel,
    loss: &LossConfig,
    optim: &OptimizerConfig,
    noise: &NoiseSpec,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    train_with(dataset, model, loss, optim, noise, opts, |_, _| Ok(()))
}

/// Like [`train`], calling `on_epoch` with the log entry and the model after
/// every epoch.
pub fn train_with<F>(
    dataset: &Dataset,
    mut model: EmbeddingModel,
    loss: &LossConfig,
    optim: &OptimizerConfig,
    noise: &NoiseSpec,
    opts: &TrainOptions,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLog, &EmbeddingModel) -> Result<()>,
{
    optim.validate()?;
    if dataset.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch { expected: model.input_dim(), got: dataset.dim() });
    }
    let k = dataset.num_classes;
    let (noisy_labels, noise_mask) = inject_noise(&dataset.labels, noise, k)?;
    let per_class = opts.samples_per_class.unwrap_or_else(|| loss.local.default_samples_per_class());
    let sampler = BalancedSampler::new(&noisy_labels, k, opts.batch_size, per_class, optim.seed)?;

    let warmup_loss = LossConfig { local: LocalLoss::None, discrepancy: None, use_xent: true, ..*loss };
    let mut classifier = (loss.use_xent || opts.warmup_epochs > 0).then(|| LinearClassifier::zeros(k, model.output_dim()));
    let model_params = model.num_params();
    let total_params = model_params + classifier.as_ref().map_or(0, |c| c.weights.len() + c.bias.len());
    let mut optimizer = Optimizer::new(*optim, total_params);
    let mut params = model.flatten();
    if let Some(c) = &classifier {
        params.extend(c.weights.iter().chain(c.bias.iter()));
    }

    let mut log = Vec::with_capacity(optim.epochs);
    for epoch in 0..optim.epochs {
        let lr = optim.learning_rate_at(epoch);
        let cfg = if epoch < opts.warmup_epochs { &warmup_loss } else { loss };
        let mut entry = EpochLog { epoch, learning_rate: lr, total: 0.0, local: 0.0, phi: 0.0, xent: 0.0, batches: 0 };
        for indices in sampler.epoch(epoch) {
            let x = gather_rows(&dataset.features, &indices);
            let labels: Vec<usize> = indices.iter().map(|&i| noisy_labels[i]).collect();
            let cache = model.forward_cached(x.view()).map_err(|e| diverged(e, epoch))?;
            let batch = EmbeddingBatch::unnormalized(cache.output.clone(), labels, k).map_err(|e| diverged(e, epoch))?;
            let value = train_loss(&batch, cfg, if cfg.use_xent { classifier.as_ref() } else { None })
                .map_err(|e| diverged(e, epoch))?;
            if !value.total.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let mut grad = model.backward(&cache, value.gradient.view())?.flatten();
            grad.resize(total_params, 0.0);
            if let Some(cg) = &value.classifier_gradient {
                for (dst, src) in grad[model_params..].iter_mut().zip(cg.weights.iter().chain(cg.bias.iter())) {
                    *dst = *src;
                }
            }
            optimizer.step(&mut params, &grad, lr);
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            model.set_params(&params[..model_params])?;
            if let Some(c) = &mut classifier {
                let (w, b) = params[model_params..].split_at(c.weights.len());
                c.weights.iter_mut().zip(w).for_each(|(d, s)| *d = *s);
                c.bias.iter_mut().zip(b).for_each(|(d, s)| *d = *s);
            }
            entry.total += value.total;
            entry.local += value.local_part;
            entry.phi += value.phi_part;
            entry.xent += value.xent_part;
            entry.batches += 1;
        }
        let n = entry.batches.max(1) as f64;
        entry.total /= n;
        entry.local /= n;
        entry.phi /= n;
        entry.xent /= n;
        on_epoch(&entry, &model)?;
        log.push(entry);
    }
    Ok(TrainOutcome { model, classifier, noisy_labels, noise_mask, log })
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { epoch },
        other => other,
    }
}
