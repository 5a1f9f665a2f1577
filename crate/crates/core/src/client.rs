//! Low-bitwidth local training.
//!
//! Weights live as `s_k`-bit index tensors against per-layer tanh codebooks.
//! Each step runs a quantized forward pass, backpropagates with quantile
//! quantized gradients at `s_k + g_extra` bits, and re-quantizes the updated
//! weights onto a freshly fitted tanh codebook.

use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::DataShard;
use crate::quantkit::{self, QuantError, QuantizedTensor};
use crate::sslcore::{self, SslError};
use crate::streams::Stream;

pub type ClientId = u32;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("backward state mismatch: {0}")]
    StateMismatch(String),
    #[error("invalid training setup: {0}")]
    InvalidSetup(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Ssl(#[from] SslError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => x.clone(),
            Activation::Relu => x.mapv(|v| v.max(0.0)),
        }
    }

    /// `g ⊙ h'(pre)`.
    fn backprop(self, g: &Array2<f64>, pre: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => g.clone(),
            Activation::Relu => {
                let mut out = g.clone();
                out.zip_mut_with(pre, |o, &p| {
                    if p <= 0.0 {
                        *o = 0.0;
                    }
                });
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrKind {
    Constant,
    InverseSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: LrKind,
    pub base: f64,
    /// Index the schedule by communication round rather than by local step.
    pub constant_within_round: bool,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self { kind: LrKind::Constant, base, constant_within_round: true }
    }

    pub fn inverse_sqrt(base: f64) -> Self {
        Self { kind: LrKind::InverseSqrt, base, constant_within_round: true }
    }

    /// `α_t`; for the inverse-sqrt schedule `α_0 / √(t + 1)`.
    pub fn at(&self, t: u64) -> f64 {
        match self.kind {
            LrKind::Constant => self.base,
            LrKind::InverseSqrt => self.base / ((t + 1) as f64).sqrt(),
        }
    }

    pub fn for_step(&self, round: u64, step: u64) -> f64 {
        if self.constant_within_round {
            self.at(round)
        } else {
            self.at(step)
        }
    }
}

/// One layer's stored weights.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Quantized(QuantizedTensor),
    /// Unquantized storage, used only when quantization is switched off.
    Full(Array2<f64>),
}

impl LayerWeights {
    pub fn dequantize(&self) -> Array2<f64> {
        match self {
            LayerWeights::Quantized(q) => {
                quantkit::dequantize(q).into_dimensionality().expect("weights are stored as matrices")
            }
            LayerWeights::Full(w) => w.clone(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            LayerWeights::Quantized(q) => (q.shape()[0], q.shape()[1]),
            LayerWeights::Full(w) => w.dim(),
        }
    }

    pub fn rate(&self) -> Option<u32> {
        match self {
            LayerWeights::Quantized(q) => Some(q.rate()),
            LayerWeights::Full(_) => None,
        }
    }
}

pub fn dequantize_model(model: &[LayerWeights]) -> Vec<Array2<f64>> {
    model.iter().map(LayerWeights::dequantize).collect()
}

fn sq_dist(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sq_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// Fits a tanh codebook to `w` and stochastically quantizes onto it. Returns
/// the tensor and `‖w − dequantize(q)‖²`.
pub fn quantize_weights(w: &Array2<f64>, bits: u32, rng: &mut Stream) -> Result<(QuantizedTensor, f64), ClientError> {
    let cb = Arc::new(quantkit::fit_tanh(w, bits)?);
    let q = quantkit::stochastic_quantize(w, &cb, rng);
    let back: Array2<f64> = quantkit::dequantize(&q).into_dimensionality().expect("matrix");
    let err = sq_dist(w, &back);
    Ok((q, err))
}

fn quantize_gradient(
    g: &Array2<f64>,
    bits: u32,
    rng: &mut Stream,
) -> Result<(QuantizedTensor, Array2<f64>), ClientError> {
    let cb = Arc::new(quantkit::fit_gradient_quantile(g, bits)?);
    let q = quantkit::stochastic_quantize(g, &cb, rng);
    let back = quantkit::dequantize(&q).into_dimensionality().expect("matrix");
    Ok((q, back))
}

fn quantize_activation(a: &Array2<f64>, bits: u32, rng: &mut Stream) -> Result<Array2<f64>, ClientError> {
    let cb = Arc::new(quantkit::fit_tanh(a, bits)?);
    let q = quantkit::stochastic_quantize(a, &cb, rng);
    Ok(quantkit::dequantize(&q).into_dimensionality().expect("matrix"))
}

/// Regularizer completing the SSL objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `½‖wᵀw‖²` on the weights of a single linear layer; with the alignment
    /// term this is equivalent to `‖X − wᵀw‖²` up to a constant.
    WeightGram,
    /// `½‖(1/B)·AᵀA‖²` on the output embeddings, for deeper encoders.
    OutputCovariance,
}

impl Objective {
    pub fn for_depth(layers: usize) -> Self {
        if layers == 1 {
            Objective::WeightGram
        } else {
            Objective::OutputCovariance
        }
    }

    /// Upstream gradient at the output, a direct gradient on the last layer's
    /// weights (if any) and the minibatch objective value.
    fn head<R: rand::Rng + ?Sized>(
        self,
        outputs: &Array2<f64>,
        last_weights: &Array2<f64>,
        aug_sigma: f64,
        rng: &mut R,
    ) -> (Array2<f64>, Option<Array2<f64>>, f64) {
        let (mut upstream, mut value) = sslcore::alignment_gradient(outputs, aug_sigma, rng);
        match self {
            Objective::WeightGram => {
                let gram = last_weights.t().dot(last_weights);
                value += 0.5 * sq_norm(&gram);
                (upstream, Some(sslcore::gram_regularizer_grad(last_weights)), value)
            }
            Objective::OutputCovariance => {
                let b = outputs.nrows() as f64;
                let cov = outputs.t().dot(outputs) / b;
                value += 0.5 * sq_norm(&cov);
                upstream.scaled_add(2.0 / b, &outputs.dot(&cov));
                (upstream, None, value)
            }
        }
    }

    /// Noiseless objective over a full dataset.
    pub fn evaluate(self, weights: &[Array2<f64>], data: &Array2<f64>, activation: Activation) -> f64 {
        let mut a = data.clone();
        let last = weights.len() - 1;
        for (l, w) in weights.iter().enumerate() {
            let pre = a.dot(&w.t());
            a = if l < last { activation.apply(&pre) } else { pre };
        }
        let b = a.nrows() as f64;
        let align = -a.iter().map(|v| v * v).sum::<f64>() / b;
        let reg = match self {
            Objective::WeightGram => {
                let w = &weights[last];
                0.5 * sq_norm(&w.t().dot(w))
            }
            Objective::OutputCovariance => 0.5 * sq_norm(&(a.t().dot(&a) / b)),
        };
        align + reg
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub input: Array2<f64>,
    /// Dequantized weights used in the pass.
    pub weights: Vec<Array2<f64>>,
    pub pre_activations: Vec<Array2<f64>>,
    pub activations: Vec<Array2<f64>>,
    /// Dequantized `a_l^(Q)`; equal to `activations` when activation
    /// quantization is off.
    pub quantized_activations: Vec<Array2<f64>>,
    pub activation: Activation,
}

impl ForwardState {
    pub fn output(&self) -> &Array2<f64> {
        self.quantized_activations.last().expect("at least one layer")
    }

    fn layer_input(&self, l: usize) -> &Array2<f64> {
        if l == 0 {
            &self.input
        } else {
            &self.quantized_activations[l - 1]
        }
    }
}

/// Forward pass through the stored model. The activation function applies
/// to hidden layers; the output layer is linear. With `act_bits` set, every
/// layer's activations are quantized on a fresh tanh codebook.
pub fn quantized_forward(
    model: &[LayerWeights],
    batch: &Array2<f64>,
    activation: Activation,
    act_bits: Option<u32>,
    rng: &mut Stream,
) -> Result<ForwardState, ClientError> {
    if model.is_empty() {
        return Err(ClientError::InvalidSetup("model has no layers".into()));
    }
    let weights = dequantize_model(model);
    let mut width = batch.ncols();
    for (l, w) in weights.iter().enumerate() {
        if w.ncols() != width {
            return Err(ClientError::DimensionMismatch(format!("layer {l} expects {} inputs, got {width}", w.ncols())));
        }
        width = w.nrows();
    }

    let last = weights.len() - 1;
    let mut pre_activations = Vec::with_capacity(weights.len());
    let mut activations = Vec::with_capacity(weights.len());
    let mut quantized_activations: Vec<Array2<f64>> = Vec::with_capacity(weights.len());
    for (l, w) in weights.iter().enumerate() {
        let input = if l == 0 { batch } else { &quantized_activations[l - 1] };
        let pre = input.dot(&w.t());
        let a = if l < last { activation.apply(&pre) } else { pre.clone() };
        let aq = match act_bits {
            Some(bits) => quantize_activation(&a, bits, rng)?,
            None => a.clone(),
        };
        pre_activations.push(pre);
        activations.push(a);
        quantized_activations.push(aq);
    }
    Ok(ForwardState { input: batch.clone(), weights, pre_activations, activations, quantized_activations, activation })
}

#[derive(Debug, Clone)]
pub struct LayerGradient {
    /// Gradient before quantization.
    pub raw: Array2<f64>,
    pub quantized: Option<QuantizedTensor>,
}

impl LayerGradient {
    /// The gradient the update consumes.
    pub fn value(&self) -> Array2<f64> {
        match &self.quantized {
            Some(q) => quantkit::dequantize(q).into_dimensionality().expect("matrix"),
            None => self.raw.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub weight_grads: Vec<LayerGradient>,
    /// `‖g − dequantize(g^(Q))‖²` summed over layers.
    pub grad_error_sq: f64,
    /// `‖g‖²` summed over layers.
    pub grad_sq: f64,
}

/// Backpropagation from the output to the first layer with quantile-quantized
/// activation and weight gradients at `grad_bits` (no quantization when
/// `None`). `last_layer_extra` is added to the last layer's weight gradient
/// before it is quantized.
pub fn quantized_backward(
    state: &ForwardState,
    upstream: &Array2<f64>,
    last_layer_extra: Option<&Array2<f64>>,
    grad_bits: Option<u32>,
    rng: &mut Stream,
) -> Result<BackwardOutput, ClientError> {
    if upstream.dim() != state.output().dim() {
        return Err(ClientError::StateMismatch(format!(
            "upstream gradient {:?} does not match forward output {:?}",
            upstream.dim(),
            state.output().dim()
        )));
    }
    let layers = state.weights.len();
    let last = layers - 1;

    let mut g_act = match grad_bits {
        Some(bits) => quantize_gradient(upstream, bits, rng)?.1,
        None => upstream.clone(),
    };
    let mut weight_grads: Vec<Option<LayerGradient>> = vec![None; layers];
    let mut grad_error_sq = 0.0;
    let mut grad_sq = 0.0;
    for l in (0..layers).rev() {
        let g_pre = if l < last { state.activation.backprop(&g_act, &state.pre_activations[l]) } else { g_act };
        let mut g_w = g_pre.t().dot(state.layer_input(l));
        if l == last {
            if let Some(extra) = last_layer_extra {
                if extra.dim() != g_w.dim() {
                    return Err(ClientError::StateMismatch(format!(
                        "extra gradient {:?} does not match layer {:?}",
                        extra.dim(),
                        g_w.dim()
                    )));
                }
                g_w += extra;
            }
        }
        if l > 0 {
            let g_prev = g_pre.dot(&state.weights[l]);
            g_act = match grad_bits {
                Some(bits) => quantize_gradient(&g_prev, bits, rng)?.1,
                None => g_prev,
            };
        } else {
            g_act = Array2::zeros((0, 0));
        }
        grad_sq += sq_norm(&g_w);
        let quantized = match grad_bits {
            Some(bits) => {
                let (q, back) = quantize_gradient(&g_w, bits, rng)?;
                grad_error_sq += sq_dist(&g_w, &back);
                Some(q)
            }
            None => None,
        };
        weight_grads[l] = Some(LayerGradient { raw: g_w, quantized });
    }
    Ok(BackwardOutput {
        weight_grads: weight_grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
        grad_error_sq,
        grad_sq,
    })
}

/// Per-client training configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSpec {
    /// `s_k`.
    pub bitwidth: u32,
    /// Gradients use `s_k + grad_extra_bits`.
    pub grad_extra_bits: u32,
    /// When false every quantizer is bypassed and weights stay in full precision.
    pub quantize: bool,
    pub quantize_activations: bool,
    pub activation: Activation,
    pub aug_sigma: f64,
    pub schedule: LrSchedule,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
}

impl TrainingSpec {
    pub fn linear(bitwidth: u32, schedule: LrSchedule) -> Self {
        Self {
            bitwidth,
            grad_extra_bits: 2,
            quantize: true,
            quantize_activations: false,
            activation: Activation::Identity,
            aug_sigma: 0.1,
            schedule,
            batch_size: Some(64),
        }
    }

    pub fn grad_bitwidth(&self) -> u32 {
        self.bitwidth + self.grad_extra_bits
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub alpha: f64,
    pub grad_error_sq: f64,
    pub weight_error_sq: f64,
    pub grad_sq: f64,
    pub objective: f64,
}

/// Per-step error energies `‖ε_g‖²`, `‖ε_w‖²` and gradient energy `‖g‖²`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuantErrorStats {
    pub steps: Vec<StepStats>,
}

impl QuantErrorStats {
    fn mean_of(&self, f: impl Fn(&StepStats) -> f64) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(f).sum::<f64>() / self.steps.len() as f64
    }

    pub fn mean_grad_error(&self) -> f64 {
        self.mean_of(|s| s.grad_error_sq)
    }

    pub fn mean_weight_error(&self) -> f64 {
        self.mean_of(|s| s.weight_error_sq)
    }

    pub fn mean_grad_sq(&self) -> f64 {
        self.mean_of(|s| s.grad_sq)
    }

    pub fn mean_objective(&self) -> f64 {
        self.mean_of(|s| s.objective)
    }

    pub fn max_grad_norm(&self) -> f64 {
        self.steps.iter().map(|s| s.grad_sq.sqrt()).fold(0.0, f64::max)
    }

    pub fn extend(&mut self, other: QuantErrorStats) {
        self.steps.extend(other.steps);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: ClientId,
    pub spec: TrainingSpec,
    pub model: Vec<LayerWeights>,
    /// Local update counter `t`.
    pub step: u64,
    pub epochs: u64,
    pub rng: Stream,
}

impl ClientState {
    /// Quantizes the shared full-precision initialization at this client's bitwidth.
    pub fn new(
        client_id: ClientId,
        spec: TrainingSpec,
        init: &[Array2<f64>],
        mut rng: Stream,
    ) -> Result<Self, ClientError> {
        if init.is_empty() {
            return Err(ClientError::InvalidSetup("model has no layers".into()));
        }
        if spec.bitwidth == 0 {
            return Err(ClientError::InvalidSetup("bitwidth must be at least 1".into()));
        }
        let model = init
            .iter()
            .map(|w| -> Result<LayerWeights, ClientError> {
                if spec.quantize {
                    Ok(LayerWeights::Quantized(quantize_weights(w, spec.bitwidth, &mut rng)?.0))
                } else {
                    Ok(LayerWeights::Full(w.clone()))
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { client_id, spec, model, step: 0, epochs: 0, rng })
    }

    pub fn bitwidth(&self) -> u32 {
        self.spec.bitwidth
    }

    pub fn grad_bitwidth(&self) -> u32 {
        self.spec.grad_bitwidth()
    }

    pub fn objective(&self) -> Objective {
        Objective::for_depth(self.model.len())
    }

    pub fn weights(&self) -> Vec<Array2<f64>> {
        dequantize_model(&self.model)
    }

    /// Replaces the model, e.g. with the server's re-quantized global model.
    pub fn install(&mut self, model: Vec<LayerWeights>) -> Result<(), ClientError> {
        if model.len() != self.model.len() || model.iter().zip(&self.model).any(|(a, b)| a.shape() != b.shape()) {
            return Err(ClientError::DimensionMismatch("installed model has a different layout".into()));
        }
        self.model = model;
        Ok(())
    }

    fn act_bits(&self) -> Option<u32> {
        (self.spec.quantize && self.spec.quantize_activations).then_some(self.spec.bitwidth)
    }

    fn grad_bits(&self) -> Option<u32> {
        self.spec.quantize.then(|| self.spec.grad_bitwidth())
    }
}

/// `w^(Q)_{t+1} = Q(w^(Q)_t − α_t·g^(Q)_t)` per layer, on a fresh tanh
/// codebook. Returns `‖ε_w‖²` summed over layers.
pub fn local_update(state: &mut ClientState, grads: &BackwardOutput, alpha: f64) -> Result<f64, ClientError> {
    if grads.weight_grads.len() != state.model.len() {
        return Err(ClientError::StateMismatch(format!(
            "{} gradients for {} layers",
            grads.weight_grads.len(),
            state.model.len()
        )));
    }
    let mut weight_error_sq = 0.0;
    let mut next = Vec::with_capacity(state.model.len());
    for (layer, g) in state.model.iter().zip(&grads.weight_grads) {
        let g = g.value();
        if g.dim() != layer.shape() {
            return Err(ClientError::StateMismatch(format!(
                "gradient {:?} does not match layer {:?}",
                g.dim(),
                layer.shape()
            )));
        }
        let mut u = layer.dequantize();
        u.scaled_add(-alpha, &g);
        if state.spec.quantize {
            let (q, err) = quantize_weights(&u, state.spec.bitwidth, &mut state.rng)?;
            weight_error_sq += err;
            next.push(LayerWeights::Quantized(q));
        } else {
            next.push(LayerWeights::Full(u));
        }
    }
    state.model = next;
    state.step += 1;
    Ok(weight_error_sq)
}

/// One quantized SGD step on `batch`.
pub fn train_step(state: &mut ClientState, batch: &Array2<f64>, alpha: f64) -> Result<StepStats, ClientError> {
    let act_bits = state.act_bits();
    let grad_bits = state.grad_bits();
    let forward = quantized_forward(&state.model, batch, state.spec.activation, act_bits, &mut state.rng)?;
    let last = forward.weights.last().expect("non-empty model");
    let (upstream, extra, objective) =
        state.objective().head(forward.output(), last, state.spec.aug_sigma, &mut state.rng);
    let backward = quantized_backward(&forward, &upstream, extra.as_ref(), grad_bits, &mut state.rng)?;
    let step = state.step;
    let weight_error_sq = local_update(state, &backward, alpha)?;
    Ok(StepStats {
        step,
        alpha,
        grad_error_sq: backward.grad_error_sq,
        weight_error_sq,
        grad_sq: backward.grad_sq,
        objective,
    })
}

/// `epochs` passes of minibatch SGD over `shard` within communication round
/// `round`. Minibatches come from a per-epoch shuffle drawn from the client
/// stream; full-batch mode skips the shuffle.
pub fn run_local_epochs(
    state: &mut ClientState,
    shard: &DataShard,
    epochs: usize,
    round: u64,
) -> Result<QuantErrorStats, ClientError> {
    if epochs == 0 {
        return Err(ClientError::InvalidSetup("at least one local epoch is required".into()));
    }
    if shard.is_empty() {
        return Err(ClientError::InvalidSetup(format!("client {} has no data", state.client_id)));
    }
    let rows = shard.len();
    let batch = state.spec.batch_size.filter(|&b| b > 0 && b < rows);
    let mut stats = QuantErrorStats::default();
    let mut order: Vec<usize> = (0..rows).collect();
    for _ in 0..epochs {
        match batch {
            None => {
                let alpha = state.spec.schedule.for_step(round, state.step);
                stats.steps.push(train_step(state, &shard.samples, alpha)?);
            }
            Some(size) => {
                order.shuffle(&mut state.rng);
                for chunk in order.chunks(size) {
                    let mb = shard.samples.select(Axis(0), chunk);
                    let alpha = state.spec.schedule.for_step(round, state.step);
                    stats.steps.push(train_step(state, &mb, alpha)?);
                }
            }
        }
        state.epochs += 1;
    }
    Ok(stats)
}
