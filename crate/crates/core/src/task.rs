//! Synthetic fine-tuning task: a chain of frozen linear layers, each carrying
//! a trainable adapter, plus client data, a trigger set, analytic gradients,
//! and plain SGD.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{self, LoraAdapter, LoraConfig, LoraStack};
use crate::matrix::{norm, Matrix};

/// Minimum distance between a trigger's erroneous output and the clean
/// model's output.
pub const MIN_TRIGGER_OFFSET: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Pure linear chain.
    #[default]
    Linear,
    /// Elementwise tanh between layers (never after the last one).
    Tanh,
}

impl Activation {
    fn apply(self, z: &mut [f64]) {
        if self == Activation::Tanh {
            z.iter_mut().for_each(|v| *v = v.tanh());
        }
    }

    /// Multiplies `delta` by the derivative evaluated at post-activation `h`.
    fn backprop(self, delta: &mut [f64], h: &[f64]) {
        if self == Activation::Tanh {
            for (d, hv) in delta.iter_mut().zip(h) {
                *d *= 1.0 - hv * hv;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    /// Layer widths; layer `l` maps `dims[l] → dims[l + 1]`.
    pub dims: Vec<usize>,
    pub trigger_count: usize,
    pub noise_std: f64,
    /// Std of each client's input-mean shift.
    pub heterogeneity: f64,
    /// RMS magnitude of the ground-truth composite relative to `1/√d_in`.
    pub target_scale: f64,
    /// Norm of the offset separating `y_err` from the clean output.
    pub trigger_offset: f64,
    pub activation: Activation,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            dims: vec![16, 12, 8],
            trigger_count: 8,
            noise_std: 0.05,
            heterogeneity: 0.1,
            target_scale: 1.5,
            trigger_offset: 2.0,
            activation: Activation::Linear,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub config: LoraConfig,
    /// Frozen `W0` per layer, `dims[l+1] × dims[l]`.
    pub backbone: Vec<Matrix>,
    /// Ground-truth benign update, frozen at generation.
    pub benign_target: LoraStack,
    pub trigger_inputs: Vec<Vec<f64>>,
    pub trigger_outputs: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub heterogeneity: f64,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
    pub shift: Vec<f64>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

fn gaussian_vec<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            std * z
        })
        .collect()
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    Matrix::new(rows, cols, gaussian_vec(rows * cols, std, rng)).expect("sized")
}

/// Generates a task. `config`'s layer dims must match `params.dims`.
pub fn gen_task<R: Rng + ?Sized>(
    params: &TaskParams,
    config: &LoraConfig,
    rng: &mut R,
) -> Result<TaskSpec> {
    config.validate()?;
    config.validate_chain()?;
    if params.dims.len() != config.num_layers() + 1 {
        return Err(Error::Config(format!(
            "{} dims for {} layers",
            params.dims.len(),
            config.num_layers()
        )));
    }
    for (l, d) in config.layers.iter().enumerate() {
        if d.d_in != params.dims[l] || d.d_out != params.dims[l + 1] {
            return Err(Error::Config(format!(
                "layer {l} dims ({}, {}) disagree with task dims",
                d.d_in, d.d_out
            )));
        }
    }
    if params.trigger_count == 0 {
        return Err(Error::Config("trigger_count must be at least 1".into()));
    }
    if !(params.noise_std >= 0.0 && params.heterogeneity >= 0.0 && params.target_scale >= 0.0) {
        return Err(Error::Config(
            "noise_std, heterogeneity and target_scale must be non-negative".into(),
        ));
    }
    if !(params.trigger_offset >= MIN_TRIGGER_OFFSET) {
        return Err(Error::Config(format!(
            "trigger_offset must be at least {MIN_TRIGGER_OFFSET}, got {}",
            params.trigger_offset
        )));
    }

    let backbone: Vec<Matrix> = config
        .layers
        .iter()
        .map(|d| gaussian_matrix(d.d_out, d.d_in, 1.0 / (d.d_in as f64).sqrt(), rng))
        .collect();

    let r = config.rank as f64;
    let s = config.scaling();
    let adapters = config
        .layers
        .iter()
        .enumerate()
        .map(|(l, d)| LoraAdapter {
            layer_id: l,
            a: gaussian_matrix(d.d_out, config.rank, 1.0 / r.sqrt(), rng),
            b: gaussian_matrix(
                config.rank,
                d.d_in,
                params.target_scale / ((d.d_in as f64).sqrt() * s),
                rng,
            ),
        })
        .collect();
    let benign_target = LoraStack::new(adapters)?;

    let mut task = TaskSpec {
        config: config.clone(),
        backbone,
        benign_target,
        trigger_inputs: Vec::new(),
        trigger_outputs: Vec::new(),
        noise_std: params.noise_std,
        heterogeneity: params.heterogeneity,
        activation: params.activation,
    };

    let input_dim = params.dims[0];
    let output_dim = *params.dims.last().expect("non-empty");
    let mut offset = gaussian_vec(output_dim, 1.0, rng);
    let n = norm(&offset).max(f64::MIN_POSITIVE);
    offset
        .iter_mut()
        .for_each(|v| *v *= params.trigger_offset / n);

    for _ in 0..params.trigger_count {
        let x = gaussian_vec(input_dim, 1.0, rng);
        let mut y = task.clean_forward(&x)?;
        y.iter_mut().zip(&offset).for_each(|(y, o)| *y += o);
        task.trigger_inputs.push(x);
        task.trigger_outputs.push(y);
    }
    Ok(task)
}

impl TaskSpec {
    pub fn input_dim(&self) -> usize {
        self.config.layers[0].d_in
    }

    pub fn output_dim(&self) -> usize {
        self.config.layers[self.config.num_layers() - 1].d_out
    }

    /// `W0^l + ΔW^l` per layer.
    pub fn effective_weights(&self, stack: &LoraStack) -> Result<Vec<Matrix>> {
        stack.check_dims(&self.config)?;
        self.backbone
            .iter()
            .zip(stack.adapters())
            .map(|(w0, ad)| w0.add(&lora::compose(ad, &self.config)?))
            .collect()
    }

    /// Clean model output: backbone plus the ground-truth benign update.
    pub fn clean_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        forward(self, &self.benign_target, x)
    }

    /// Labelled samples from client `client_id`'s shifted input distribution.
    pub fn gen_dataset<R: Rng + ?Sized>(
        &self,
        client_id: usize,
        n: usize,
        rng: &mut R,
    ) -> Result<ClientDataset> {
        let d = self.input_dim();
        let shift = gaussian_vec(d, self.heterogeneity, rng);
        let weights = self.effective_weights(&self.benign_target)?;
        let mut inputs = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x = gaussian_vec(d, 1.0, rng);
            x.iter_mut().zip(&shift).for_each(|(x, s)| *x += s);
            let mut y = forward_with(&weights, self.activation, &x)?;
            for v in &mut y {
                let z: f64 = rng.sample(StandardNormal);
                *v += self.noise_std * z;
            }
            inputs.push(x);
            labels.push(y);
        }
        Ok(ClientDataset {
            client_id,
            inputs,
            labels,
            shift,
        })
    }
}

fn forward_with(weights: &[Matrix], act: Activation, x: &[f64]) -> Result<Vec<f64>> {
    let last = weights.len() - 1;
    let mut h = x.to_vec();
    for (l, w) in weights.iter().enumerate() {
        h = w.matvec(&h)?;
        if l < last {
            act.apply(&mut h);
        }
    }
    Ok(h)
}

pub fn forward(task: &TaskSpec, stack: &LoraStack, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != task.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} entries, task expects {}",
            x.len(),
            task.input_dim()
        )));
    }
    forward_with(&task.effective_weights(stack)?, task.activation, x)
}

#[derive(Clone, Debug)]
pub struct LossGrads {
    pub loss: f64,
    /// Gradients shaped like the stack (`dA`, `dB` per layer).
    pub grads: LoraStack,
}

/// Mean half squared error of `inputs` against `labels` and its gradient
/// with respect to every adapter factor.
pub fn loss_and_grads(
    task: &TaskSpec,
    stack: &LoraStack,
    inputs: &[Vec<f64>],
    labels: &[Vec<f64>],
) -> Result<LossGrads> {
    if inputs.is_empty() {
        return Err(Error::Usage(
            "loss_and_grads needs a non-empty batch".into(),
        ));
    }
    if inputs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} inputs but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let weights = task.effective_weights(stack)?;
    let nl = weights.len();
    let mut g: Vec<Matrix> = weights
        .iter()
        .map(|w| Matrix::zeros(w.rows(), w.cols()))
        .collect();
    let mut loss = 0.0;
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(nl + 1);

    for (x, y) in inputs.iter().zip(labels) {
        if x.len() != task.input_dim() || y.len() != task.output_dim() {
            return Err(Error::Shape(
                "sample dimensions do not match the task".into(),
            ));
        }
        acts.clear();
        acts.push(x.clone());
        for (l, w) in weights.iter().enumerate() {
            let mut h = w.matvec(&acts[l])?;
            if l + 1 < nl {
                task.activation.apply(&mut h);
            }
            acts.push(h);
        }
        let mut delta: Vec<f64> = acts[nl].iter().zip(y).map(|(f, y)| f - y).collect();
        loss += delta.iter().map(|d| d * d).sum::<f64>();
        for l in (0..nl).rev() {
            g[l].add_outer(1.0, &delta, &acts[l])?;
            if l > 0 {
                delta = weights[l].t_matvec(&delta)?;
                task.activation.backprop(&mut delta, &acts[l]);
            }
        }
    }

    let n = inputs.len() as f64;
    let s = task.config.scaling();
    let adapters = stack
        .adapters()
        .iter()
        .zip(&g)
        .map(|(ad, g)| {
            let g = g.scale(1.0 / n);
            Ok(LoraAdapter {
                layer_id: ad.layer_id,
                a: g.matmul_t(&ad.b)?.scale(s),
                b: ad.a.t_matmul(&g)?.scale(s),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossGrads {
        loss: loss / (2.0 * n),
        grads: LoraStack::new(adapters)?,
    })
}

/// Mean half squared error only.
pub fn loss(
    task: &TaskSpec,
    stack: &LoraStack,
    inputs: &[Vec<f64>],
    labels: &[Vec<f64>],
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Usage("loss needs a non-empty batch".into()));
    }
    let weights = task.effective_weights(stack)?;
    let mut total = 0.0;
    for (x, y) in inputs.iter().zip(labels) {
        let f = forward_with(&weights, task.activation, x)?;
        total += f.iter().zip(y).map(|(f, y)| (f - y) * (f - y)).sum::<f64>();
    }
    Ok(total / (2.0 * inputs.len() as f64))
}

/// `stack -= lr * grads`, factor by factor.
pub fn sgd_update(stack: &mut LoraStack, grads: &LoraStack, lr: f64) -> Result<()> {
    for (ad, g) in stack.adapters_mut().iter_mut().zip(grads.adapters()) {
        ad.a.add_scaled(-lr, &g.a)?;
        ad.b.add_scaled(-lr, &g.b)?;
    }
    Ok(())
}

/// Plain SGD from `start`. Each step samples `batch_size` indices with
/// replacement from `rng`; a `batch_size` of zero or at least the dataset
/// size uses the full dataset instead.
#[allow(clippy::too_many_arguments)]
pub fn local_train<R: Rng + ?Sized>(
    task: &TaskSpec,
    start: &LoraStack,
    dataset: &ClientDataset,
    steps: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<LoraStack> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Usage(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    start.check_dims(&task.config)?;
    let mut stack = start.clone();
    if steps == 0 {
        return Ok(stack);
    }
    if dataset.is_empty() {
        return Err(Error::Usage("local_train on an empty dataset".into()));
    }
    let n = dataset.len();
    let full = batch_size == 0 || batch_size >= n;
    let mut xb = Vec::with_capacity(batch_size.min(n));
    let mut yb = Vec::with_capacity(batch_size.min(n));
    for _ in 0..steps {
        let lg = if full {
            loss_and_grads(task, &stack, &dataset.inputs, &dataset.labels)?
        } else {
            xb.clear();
            yb.clear();
            for _ in 0..batch_size {
                let i = rng.random_range(0..n);
                xb.push(dataset.inputs[i].clone());
                yb.push(dataset.labels[i].clone());
            }
            loss_and_grads(task, &stack, &xb, &yb)?
        };
        sgd_update(&mut stack, &lg.grads, lr)?;
    }
    Ok(stack)
}

/// Analytic multiply-accumulate counts.
pub mod ops {
    use crate::lora::LoraConfig;

    /// Building `W0 + s·A·B` for every layer.
    pub fn effective_weights(config: &LoraConfig) -> u64 {
        config
            .layers
            .iter()
            .map(|d| (d.d_out * config.rank * d.d_in + d.d_out * d.d_in) as u64)
            .sum()
    }

    pub fn forward_sample(config: &LoraConfig) -> u64 {
        config
            .layers
            .iter()
            .map(|d| (d.d_out * d.d_in) as u64)
            .sum()
    }

    /// Forward, error propagation, and gradient outer products for one sample.
    pub fn backprop_sample(config: &LoraConfig) -> u64 {
        let per: Vec<u64> = config
            .layers
            .iter()
            .map(|d| (d.d_out * d.d_in) as u64)
            .collect();
        let fwd: u64 = per.iter().sum();
        let outer: u64 = per.iter().sum();
        let propagate: u64 = per.iter().skip(1).sum();
        fwd + outer + propagate
    }

    /// One SGD step on `batch` samples.
    pub fn sgd_step(config: &LoraConfig, batch: usize) -> u64 {
        let factor_grads: u64 = config
            .layers
            .iter()
            .map(|d| 2 * (d.d_out * d.d_in * config.rank) as u64)
            .sum();
        let update = config.flat_len() as u64;
        effective_weights(config) + batch as u64 * backprop_sample(config) + factor_grads + update
    }

    pub fn local_train(config: &LoraConfig, steps: usize, batch: usize) -> u64 {
        steps as u64 * sgd_step(config, batch)
    }
}
