//! Scalar codebooks and stochastic (de)quantization.
//!
//! A [`Codebook`] holds `2^rate` sorted centers. Three constructions are
//! provided: endpoint-inclusive uniform levels, tanh companding (uniform in
//! the `tanh` domain, mapped back through `atanh`), and empirical quantiles.
//! [`stochastic_quantize`] rounds each element to one of its two neighbouring
//! centers with probabilities that make the rounding unbiased inside the
//! codebook range; values outside the range clamp to the end centers.

use std::sync::Arc;

use ndarray::{ArrayBase, ArrayD, Data, Dimension, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum width of a source range before a codebook is considered degenerate.
pub const RANGE_EPSILON: f64 = 1e-12;

/// Largest supported rate; `2^20` centers is already far past lossless for f64 weights.
pub const MAX_RATE: u32 = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantError {
    #[error("degenerate range [{lo}, {hi}]")]
    DegenerateRange { lo: f64, hi: f64 },
    #[error("invalid rate {0}, expected 1..={max}", max = MAX_RATE)]
    InvalidRate(u32),
    #[error("invalid range: lo {lo} must be below hi {hi}")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("cannot build a codebook from an empty tensor")]
    EmptyInput,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("index {index} out of range for codebook of {len} centers")]
    IndexOutOfRange { index: u32, len: usize },
    #[error("shape {shape:?} holds {expected} elements, got {actual}")]
    ShapeMismatch { shape: Vec<usize>, expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compander {
    Identity,
    Tanh,
    Quantile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    rate: u32,
    centers: Vec<f64>,
    compander: Compander,
    source_range: (f64, f64),
    degenerate: bool,
}

impl Codebook {
    /// Fallback for constant inputs: `2^rate` copies of `value`; every element
    /// quantizes to index 0.
    pub fn constant(value: f64, rate: u32, compander: Compander) -> Result<Self, QuantError> {
        let k = levels(rate)?;
        Ok(Self { rate, centers: vec![value; k], compander, source_range: (value, value), degenerate: true })
    }

    pub fn rate(&self) -> u32 {
        self.rate
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn compander(&self) -> Compander {
        self.compander
    }

    pub fn source_range(&self) -> (f64, f64) {
        self.source_range
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn center(&self, index: u32) -> f64 {
        self.centers[index as usize]
    }

    /// Bracketing for `x`: `(j, p)` where the upper neighbour `j + 1` is chosen
    /// with probability `p`. Clamped inputs return `p = 0`.
    fn bracket(&self, x: f64) -> (u32, f64) {
        let k = self.centers.len();
        if self.degenerate || !(x > self.centers[0]) {
            return (0, 0.0);
        }
        if x >= self.centers[k - 1] {
            return ((k - 1) as u32, 0.0);
        }
        // centers[j] <= x < centers[j + 1]
        let j = self.centers.partition_point(|&c| c <= x) - 1;
        let (lo, hi) = (self.centers[j], self.centers[j + 1]);
        (j as u32, (x - lo) / (hi - lo))
    }

    /// Expected squared rounding error of `x` under stochastic quantization.
    pub fn expected_sq_error(&self, x: f64) -> f64 {
        let (j, p) = self.bracket(x);
        let lo = self.centers[j as usize];
        if p == 0.0 {
            return (x - lo) * (x - lo);
        }
        let hi = self.centers[j as usize + 1];
        (x - lo) * (hi - x)
    }
}

fn levels(rate: u32) -> Result<usize, QuantError> {
    if rate == 0 || rate > MAX_RATE {
        return Err(QuantError::InvalidRate(rate));
    }
    Ok(1usize << rate)
}

fn finite_range<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<(f64, f64), QuantError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut seen = false;
    for &v in values {
        if !v.is_finite() {
            return Err(QuantError::NonFinite);
        }
        lo = lo.min(v);
        hi = hi.max(v);
        seen = true;
    }
    if !seen {
        return Err(QuantError::EmptyInput);
    }
    Ok((lo, hi))
}

/// Restores strict increase inside `[lo, hi]` by moving duplicates up one ulp
/// at a time (and back down from `hi` if the top end overflowed). Returns
/// false when the range has too few representable values.
fn repair_strict_increase(centers: &mut [f64], lo: f64, hi: f64) -> bool {
    let k = centers.len();
    centers[0] = centers[0].clamp(lo, hi);
    for i in 1..k {
        let floor = centers[i - 1].next_up();
        if centers[i] < floor {
            centers[i] = floor;
        }
    }
    if centers[k - 1] > hi {
        centers[k - 1] = hi;
        for i in (0..k - 1).rev() {
            let ceil = centers[i + 1].next_down();
            if centers[i] > ceil {
                centers[i] = ceil;
            }
        }
    }
    centers[0] >= lo && centers.windows(2).all(|w| w[0] < w[1])
}

/// `K = 2^rate` endpoint-inclusive equispaced centers on `[lo, hi]`.
pub fn build_uniform_codebook(lo: f64, hi: f64, rate: u32) -> Result<Codebook, QuantError> {
    let k = levels(rate)?;
    if !lo.is_finite() || !hi.is_finite() {
        return Err(QuantError::NonFinite);
    }
    if !(lo < hi) {
        return Err(QuantError::InvalidRange { lo, hi });
    }
    if hi - lo < RANGE_EPSILON {
        return Err(QuantError::DegenerateRange { lo, hi });
    }
    let last = (k - 1) as f64;
    let mut centers: Vec<f64> = (0..k).map(|i| lo + (hi - lo) * (i as f64) / last).collect();
    centers[k - 1] = hi;
    if !repair_strict_increase(&mut centers, lo, hi) {
        return Err(QuantError::DegenerateRange { lo, hi });
    }
    Ok(Codebook { rate, centers, compander: Compander::Identity, source_range: (lo, hi), degenerate: false })
}

/// Companding codebook: uniform levels over `[tanh(min), tanh(max)]`, mapped
/// back through `atanh`. The end centers are the exact extremes of `values`.
pub fn build_tanh_codebook<S, D>(values: &ArrayBase<S, D>, rate: u32) -> Result<Codebook, QuantError>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    let k = levels(rate)?;
    let (lo, hi) = finite_range(values.iter())?;
    let (ulo, uhi) = (lo.tanh(), hi.tanh());
    if uhi - ulo < RANGE_EPSILON {
        return Err(QuantError::DegenerateRange { lo, hi });
    }
    let last = (k - 1) as f64;
    let mut centers: Vec<f64> = (0..k).map(|i| (ulo + (uhi - ulo) * (i as f64) / last).atanh().clamp(lo, hi)).collect();
    centers[0] = lo;
    centers[k - 1] = hi;
    if !repair_strict_increase(&mut centers, lo, hi) {
        return Err(QuantError::DegenerateRange { lo, hi });
    }
    Ok(Codebook { rate, centers, compander: Compander::Tanh, source_range: (lo, hi), degenerate: false })
}

/// Linear interpolation between order statistics of `sorted` at probability `p`.
fn interpolated_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let below = (h.floor() as usize).min(n - 1);
    let above = (below + 1).min(n - 1);
    let frac = h - below as f64;
    sorted[below] + frac * (sorted[above] - sorted[below])
}

fn quantile_codebook<S, D>(
    values: &ArrayBase<S, D>,
    rate: u32,
    level: impl Fn(usize, usize) -> f64,
) -> Result<Codebook, QuantError>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    let k = levels(rate)?;
    let (lo, hi) = finite_range(values.iter())?;
    if hi - lo < RANGE_EPSILON {
        return Err(QuantError::DegenerateRange { lo, hi });
    }
    let mut sorted: Vec<f64> = values.iter().copied().collect();
    sorted.sort_unstable_by(f64::total_cmp);
    let mut centers: Vec<f64> = (0..k).map(|i| interpolated_quantile(&sorted, level(i, k))).collect();
    if !repair_strict_increase(&mut centers, lo, hi) {
        return Err(QuantError::DegenerateRange { lo, hi });
    }
    Ok(Codebook { rate, centers, compander: Compander::Quantile, source_range: (lo, hi), degenerate: false })
}

/// Empirical quantiles at `p_i = (i + 0.5) / K`.
pub fn build_quantile_codebook<S, D>(values: &ArrayBase<S, D>, rate: u32) -> Result<Codebook, QuantError>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    quantile_codebook(values, rate, |i, k| (i as f64 + 0.5) / k as f64)
}

/// Empirical quantiles at `p_i = i / (K - 1)`, so the end centers are the
/// tensor's minimum and maximum and stochastic rounding stays unbiased for
/// every element. Used for gradients.
pub fn build_anchored_quantile_codebook<S, D>(values: &ArrayBase<S, D>, rate: u32) -> Result<Codebook, QuantError>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    quantile_codebook(values, rate, |i, k| i as f64 / (k - 1) as f64)
}

fn or_constant(built: Result<Codebook, QuantError>, rate: u32, compander: Compander) -> Result<Codebook, QuantError> {
    match built {
        Err(QuantError::DegenerateRange { lo, hi }) => {
            let mut cb = Codebook::constant(0.5 * (lo + hi), rate, compander)?;
            cb.source_range = (lo, hi);
            Ok(cb)
        }
        other => other,
    }
}

/// Tanh codebook with the constant-input fallback applied.
pub fn fit_tanh<S, D>(values: &ArrayBase<S, D>, rate: u32) -> Result<Codebook, QuantError>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    or_constant(build_tanh_codebook(values, rate), rate, Compander::Tanh)
}

/// Anchored quantile codebook with the constant-input fallback applied.
pub fn fit_gradient_quantile<S, D>(values: &ArrayBase<S, D>, rate: u32) -> Result<Codebook, QuantError>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    or_constant(build_anchored_quantile_codebook(values, rate), rate, Compander::Quantile)
}

/// Low-bitwidth tensor: row-major indices into a shared codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    indices: Vec<u32>,
    codebook: Arc<Codebook>,
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, indices: Vec<u32>, codebook: Arc<Codebook>) -> Result<Self, QuantError> {
        let expected: usize = shape.iter().product();
        if expected != indices.len() {
            return Err(QuantError::ShapeMismatch { shape, expected, actual: indices.len() });
        }
        if let Some(&index) = indices.iter().find(|&&i| i as usize >= codebook.len()) {
            return Err(QuantError::IndexOutOfRange { index, len: codebook.len() });
        }
        Ok(Self { shape, indices, codebook })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn codebook(&self) -> &Arc<Codebook> {
        &self.codebook
    }

    pub fn rate(&self) -> u32 {
        self.codebook.rate()
    }
}

/// Stochastic rounding of every element of `x` against `codebook`.
///
/// Exactly one uniform draw is consumed per element, in row-major order, so
/// the result depends only on the stream state.
pub fn stochastic_quantize<S, D, R>(x: &ArrayBase<S, D>, codebook: &Arc<Codebook>, rng: &mut R) -> QuantizedTensor
where
    S: Data<Elem = f64>,
    D: Dimension,
    R: Rng + ?Sized,
{
    let indices = x
        .iter()
        .map(|&v| {
            let (j, p) = codebook.bracket(v);
            let u: f64 = rng.gen();
            if u < p {
                j + 1
            } else {
                j
            }
        })
        .collect();
    QuantizedTensor { shape: x.shape().to_vec(), indices, codebook: Arc::clone(codebook) }
}

/// Exact codebook lookup.
pub fn dequantize(q: &QuantizedTensor) -> ArrayD<f64> {
    let values: Vec<f64> = q.indices.iter().map(|&i| q.codebook.center(i)).collect();
    ArrayD::from_shape_vec(IxDyn(&q.shape), values).expect("shape checked at construction")
}

/// Mean over `samples` of the squared stochastic-rounding error, averaged over
/// `draws` independent quantizations.
pub fn empirical_mse<S, D, R>(codebook: &Codebook, samples: &ArrayBase<S, D>, draws: usize, rng: &mut R) -> f64
where
    S: Data<Elem = f64>,
    D: Dimension,
    R: Rng + ?Sized,
{
    let draws = draws.max(1);
    let n = samples.len();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for _ in 0..draws {
        for &x in samples.iter() {
            let (j, p) = codebook.bracket(x);
            let u: f64 = rng.gen();
            let idx = if u < p { j + 1 } else { j };
            let e = x - codebook.center(idx);
            total += e * e;
        }
    }
    total / (n * draws) as f64
}
