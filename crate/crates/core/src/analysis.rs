//! Numerical diagnostics for the convergence and representability theory:
//! Moreau-envelope stationarity, the round-averaged convergence bound,
//! quantization-error scaling probes and perturbation bounds on
//! representability.

use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::client::{self, ClientError, ClientState, LrSchedule, QuantErrorStats, TrainingSpec};
use crate::datagen::{self, DataError, DataGenParams, DataShard};
use crate::sslcore::{self, FeatureMatrix, SslError};
use crate::streams::{stream, Domain};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("prox solver failed: objective increased {0} times in a row")]
    NoConvergence(usize),
    #[error("coordinate {j} out of range for dimension {d}")]
    InvalidCoordinate { j: usize, d: usize },
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub const POWER_ITERATIONS: usize = 100;
pub const POWER_TOL: f64 = 1e-10;
/// Relative margin added to `4‖X̄‖₂` when setting `ρ`.
pub const RHO_MARGIN: f64 = 0.01;
const MAX_REJECTIONS: usize = 10;

fn frob_sq(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// Largest eigenvalue magnitude of a symmetric matrix by power iteration
/// from a fixed, non-symmetric start vector.
pub fn spectral_norm(x: &Array2<f64>) -> f64 {
    let d = x.nrows();
    if d == 0 {
        return 0.0;
    }
    let mut v = Array1::from_shape_fn(d, |i| 1.0 + (i as f64 + 1.0) / d as f64);
    v /= v.dot(&v).sqrt();
    let mut estimate = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let xv = x.dot(&v);
        let norm = xv.dot(&xv).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = xv / norm;
        let converged = (norm - estimate).abs() <= POWER_TOL * norm;
        estimate = norm;
        if converged {
            break;
        }
    }
    estimate
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryParams {
    /// Weak-convexity modulus `ρ`.
    pub rho: f64,
    /// Envelope parameter `ρ̄ > ρ`.
    pub rho_bar: f64,
    /// Gradient-norm bound `G`.
    pub g: f64,
    /// Quantization-noise scale `G_q`.
    pub g_q: f64,
    /// `λ₁(X̄)`, sets the prox solver step.
    pub lambda_max: f64,
    pub inner_iters: usize,
    pub inner_tol: f64,
}

impl TheoryParams {
    /// `ρ = 4·‖X̄‖₂·(1 + margin)`, `ρ̄ = 2ρ`; `G` and `G_q` start at zero.
    pub fn for_covariance(x: &Array2<f64>) -> Result<Self, AnalysisError> {
        let lambda_max = spectral_norm(x);
        if lambda_max <= 0.0 {
            return Err(AnalysisError::InvalidParams("covariance has zero spectral norm".into()));
        }
        let rho = 4.0 * lambda_max * (1.0 + RHO_MARGIN);
        Ok(Self { rho, rho_bar: 2.0 * rho, g: 0.0, g_q: 0.0, lambda_max, inner_iters: 20_000, inner_tol: 1e-12 })
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let ok = self.rho > 0.0
            && self.rho_bar > self.rho
            && self.g >= 0.0
            && self.g_q >= 0.0
            && self.lambda_max > 0.0
            && self.rho >= 4.0 * self.lambda_max
            && self.inner_iters > 0
            && self.inner_tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(AnalysisError::InvalidParams(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProxSolution {
    pub point: Array2<f64>,
    /// `ℒ(ŷ) + (ρ̄/2)‖ŷ − w‖²`, the envelope value at `w`.
    pub value: f64,
    pub iterations: usize,
}

/// `argmin_y ℒ(y) + (ρ̄/2)‖y − w‖²` by gradient descent from `y = w`. Steps
/// that increase the objective are rejected and the step halved.
pub fn prox(w: &FeatureMatrix, x: &Array2<f64>, tp: &TheoryParams) -> Result<ProxSolution, AnalysisError> {
    tp.validate()?;
    let target = w.as_array();
    let objective = |y: &Array2<f64>| -> Result<f64, AnalysisError> {
        let l = sslcore::loss(&FeatureMatrix::new(y.clone())?, x)?;
        Ok(l + 0.5 * tp.rho_bar * frob_sq(&(y - target)))
    };
    let mut step = 1.0 / (tp.rho_bar + 16.0 * tp.lambda_max);
    let mut y = target.clone();
    let mut value = objective(&y)?;
    let mut rejections = 0;
    let mut iterations = 0;
    while iterations < tp.inner_iters {
        iterations += 1;
        let mut g = sslcore::grad(&FeatureMatrix::new(y.clone())?, x)?;
        g.scaled_add(tp.rho_bar, &(&y - target));
        let update = &g * step;
        let candidate = &y - &update;
        let candidate_value = objective(&candidate)?;
        // increases within a few ulps are roundoff in the objective, not divergence
        let slack = 8.0 * f64::EPSILON * value.abs().max(1.0);
        if candidate_value > value + slack {
            rejections += 1;
            if rejections >= MAX_REJECTIONS {
                return Err(AnalysisError::NoConvergence(rejections));
            }
            step *= 0.5;
            continue;
        }
        rejections = 0;
        y = candidate;
        value = candidate_value;
        if frob_sq(&update).sqrt() < tp.inner_tol * (1.0 + frob_sq(&y).sqrt()) {
            break;
        }
    }
    Ok(ProxSolution { point: y, value, iterations })
}

/// `‖∇φ_{1/ρ̄}(w)‖ = ρ̄·‖w − prox(w)‖`.
pub fn moreau_grad_surrogate(w: &FeatureMatrix, x: &Array2<f64>, tp: &TheoryParams) -> Result<f64, AnalysisError> {
    let p = prox(w, x, tp)?;
    Ok(tp.rho_bar * frob_sq(&(w.as_array() - &p.point)).sqrt())
}

pub fn moreau_envelope(w: &FeatureMatrix, x: &Array2<f64>, tp: &TheoryParams) -> Result<f64, AnalysisError> {
    Ok(prox(w, x, tp)?.value)
}

/// Evaluates
/// `E·ρ̄/(ρ̄−ρ) · [φ₀ − φ_min + ρ̄(G²Σα² + 3G_q²Σα)] / (ρ̄·Σα)`
/// for per-round step sizes `schedule`.
pub fn theorem1_rhs(
    tp: &TheoryParams,
    schedule: &[f64],
    epochs: usize,
    phi0: f64,
    phi_min: f64,
) -> Result<f64, AnalysisError> {
    tp.validate()?;
    if schedule.is_empty() || schedule.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
        return Err(AnalysisError::InvalidParams("step sizes must be positive and finite".into()));
    }
    if epochs == 0 {
        return Err(AnalysisError::InvalidParams("epochs must be at least 1".into()));
    }
    if !(phi0 >= phi_min) {
        return Err(AnalysisError::InvalidParams(format!("phi0 {phi0} is below phi_min {phi_min}")));
    }
    let sum: f64 = schedule.iter().sum();
    let sum_sq: f64 = schedule.iter().map(|a| a * a).sum();
    let rb = tp.rho_bar;
    let noise = rb * (tp.g * tp.g * sum_sq + 3.0 * tp.g_q * tp.g_q * sum);
    Ok(epochs as f64 * rb / (rb - tp.rho) * (phi0 - phi_min + noise) / (rb * sum))
}

/// Running `Σ_{s≤t} w_s·v_s / Σ_{s≤t} w_s`.
pub fn weighted_running_average(values: &[f64], weights: &[f64]) -> Vec<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    values
        .iter()
        .zip(weights)
        .map(|(v, w)| {
            num += w * v;
            den += w;
            num / den
        })
        .collect()
}

/// Least-squares slope of `ys` against `xs`.
pub fn fitted_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len()) as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Slope of `log₂ y` against `log₂ x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.log2()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.log2()).collect();
    fitted_slope(&lx, &ly)
}

fn percentile_99(mut ratios: Vec<f64>) -> f64 {
    if ratios.is_empty() {
        return 0.0;
    }
    ratios.sort_unstable_by(f64::total_cmp);
    let rank = (0.99 * ratios.len() as f64).ceil() as usize;
    ratios[rank.clamp(1, ratios.len()) - 1]
}

/// Smallest `G_q` with `‖ε‖² ≤ α·G_q²` on at least 99% of the recorded
/// weight re-quantization steps and, separately, of the server
/// re-quantizations (`(α, ‖ε_r‖²)` pairs).
pub fn gq_estimate(stats: &QuantErrorStats, requant: &[(f64, f64)]) -> Result<f64, AnalysisError> {
    if stats.is_empty() && requant.is_empty() {
        return Err(AnalysisError::InvalidParams("no quantization error records".into()));
    }
    let ratio = |alpha: f64, err: f64| if alpha > 0.0 { err / alpha } else { 0.0 };
    let w = percentile_99(stats.steps.iter().map(|s| ratio(s.alpha, s.weight_error_sq)).collect());
    let r = percentile_99(requant.iter().map(|&(a, e)| ratio(a, e)).collect());
    Ok(w.max(r).sqrt())
}

/// Lower bound on the representability of `e_j` (0-based) for the subspace
/// spanned by `w* + ε`:
/// `(e_jᵀXe_j + 2⟨w*e_j, εe_j⟩ + ‖εe_j‖²) / (λ₁(X) + ‖2w*ᵀε + εᵀε‖_F)`.
/// It certifies the measured value when `w*` spans all of `X` (`m = d`).
pub fn representability_lower_bound(
    x: &Array2<f64>,
    w_opt: &FeatureMatrix,
    eps: &Array2<f64>,
    j: usize,
) -> Result<f64, AnalysisError> {
    let w = w_opt.as_array();
    let d = x.nrows();
    if x.ncols() != d || w.ncols() != d || eps.dim() != w.dim() {
        return Err(
            SslError::DimensionMismatch(format!("X {:?}, w* {:?}, eps {:?}", x.dim(), w.dim(), eps.dim())).into()
        );
    }
    if j >= d {
        return Err(AnalysisError::InvalidCoordinate { j, d });
    }
    let wc = w.column(j);
    let ec = eps.column(j);
    let numer = x[[j, j]] + 2.0 * wc.dot(&ec) + ec.dot(&ec);
    let shift = 2.0 * w.t().dot(eps) + eps.t().dot(eps);
    let denom = sslcore::sym_eig(x)?.eigenvalues[0] + frob_sq(&shift).sqrt();
    Ok(numer / denom)
}

/// Gaussian perturbation rescaled to Frobenius norm `scale·‖w‖_F`.
pub fn random_perturbation<R: Rng + ?Sized>(w: &Array2<f64>, scale: f64, rng: &mut R) -> Array2<f64> {
    let mut eps = Array2::from_shape_simple_fn(w.dim(), || -> f64 { StandardNormal.sample(rng) });
    let norm = frob_sq(&eps).sqrt();
    if norm > 0.0 {
        eps *= scale * frob_sq(w).sqrt() / norm;
    }
    eps
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepresentabilityRow {
    /// `None` for the global covariance.
    pub client: Option<u32>,
    /// `r_i` of the perturbed optimum for the first `n` coordinates.
    pub representability: Vec<f64>,
    pub lower_bound: Vec<f64>,
}

/// Representability of the (perturbed) optimum of every client's covariance
/// and of the global covariance, on the first `n` coordinates.
pub fn local_vs_global_representability_report<R: Rng + ?Sized>(
    shards: &mut [DataShard],
    m: usize,
    eps_scale: f64,
    rng: &mut R,
) -> Result<Vec<RepresentabilityRow>, AnalysisError> {
    if shards.is_empty() {
        return Err(AnalysisError::InvalidParams("no shards".into()));
    }
    let n = shards.len();
    let mut targets: Vec<(Option<u32>, Array2<f64>)> = Vec::with_capacity(n + 1);
    for s in shards.iter_mut() {
        targets.push((Some(s.client_id), s.covariance()?.clone()));
    }
    targets.push((None, datagen::global_covariance(shards)?));
    let mut rows = Vec::with_capacity(targets.len());
    for (client, x) in targets {
        let w = sslcore::closed_form_optimum(&x, m)?;
        let eps = random_perturbation(w.as_array(), eps_scale, rng);
        let perturbed = FeatureMatrix::new(w.as_array() + &eps)?;
        let r = sslcore::representability(&perturbed)?;
        let coords = n.min(x.nrows());
        let lower_bound =
            (0..coords).map(|j| representability_lower_bound(&x, &w, &eps, j)).collect::<Result<_, _>>()?;
        rows.push(RepresentabilityRow {
            client,
            representability: r.iter().take(coords).copied().collect(),
            lower_bound,
        });
    }
    Ok(rows)
}

pub fn format_representability_report(rows: &[RepresentabilityRow]) -> String {
    let mut out = String::from("source,coordinate,representability,lower_bound\n");
    for row in rows {
        let source = row.client.map_or_else(|| "global".to_string(), |k| format!("client_{k}"));
        for (j, (r, b)) in row.representability.iter().zip(&row.lower_bound).enumerate() {
            let _ = writeln!(out, "{source},{},{r:.6},{b:.6}", j + 1);
        }
    }
    out
}

/// Setup for the single-client quantization-error probes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub d: usize,
    pub m: usize,
    pub frequent_count: usize,
    pub steps: usize,
    pub batch_size: usize,
    /// Constant step size, in units of `1/λ₁(X)`.
    pub alpha: f64,
    pub grad_extra_bits: u32,
    /// Relative size of the perturbation applied to the optimum at start.
    pub init_offset: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            d: 32,
            m: 8,
            frequent_count: 500,
            steps: 200,
            batch_size: 64,
            alpha: 0.05,
            grad_extra_bits: 0,
            init_offset: 0.1,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRow {
    pub rate: u32,
    pub alpha: f64,
    pub grad_error: f64,
    pub weight_error: f64,
    pub grad_sq: f64,
    pub weight_sq: f64,
}

struct ProbeSetup {
    shard: DataShard,
    init: Array2<f64>,
    lambda: f64,
}

fn probe_setup(cfg: &ProbeConfig) -> Result<ProbeSetup, AnalysisError> {
    let params = DataGenParams { frequent_count: cfg.frequent_count, ..DataGenParams::new(2, cfg.d, cfg.seed) };
    let mut shard = datagen::generate_shard(&params, 1, &mut datagen::client_stream(&params, 1))?;
    let x = shard.covariance()?.clone();
    let lambda = spectral_norm(&x);
    let opt = sslcore::closed_form_optimum(&x, cfg.m)?.into_inner();
    let mut rng = stream(cfg.seed, Domain::Init, 0);
    let init = &opt + &random_perturbation(&opt, cfg.init_offset, &mut rng);
    Ok(ProbeSetup { shard, init, lambda })
}

fn probe_once(setup: &ProbeSetup, cfg: &ProbeConfig, rate: u32, alpha: f64) -> Result<ProbeRow, AnalysisError> {
    let spec = TrainingSpec {
        grad_extra_bits: cfg.grad_extra_bits,
        batch_size: Some(cfg.batch_size),
        ..TrainingSpec::linear(rate, LrSchedule::constant(alpha / setup.lambda))
    };
    let mut state = ClientState::new(1, spec, std::slice::from_ref(&setup.init), stream(cfg.seed, Domain::Probe, 1))?;
    let mut stats = QuantErrorStats::default();
    let mut weight_sq = 0.0;
    let mut round = 0;
    while stats.len() < cfg.steps {
        stats.extend(client::run_local_epochs(&mut state, &setup.shard, 1, round)?);
        weight_sq = frob_sq(&state.weights()[0]);
        round += 1;
    }
    stats.steps.truncate(cfg.steps);
    Ok(ProbeRow {
        rate,
        alpha,
        grad_error: stats.mean_grad_error(),
        weight_error: stats.mean_weight_error(),
        grad_sq: stats.mean_grad_sq(),
        weight_sq,
    })
}

/// Short single-client runs at each weight rate with fixed data, start
/// point and seed; gradients use `rate + grad_extra_bits` bits.
pub fn lemma1_probe(rates: &[u32], cfg: &ProbeConfig) -> Result<Vec<ProbeRow>, AnalysisError> {
    if rates.len() < 3 {
        return Err(AnalysisError::InvalidParams("at least three rates are needed for a slope".into()));
    }
    let setup = probe_setup(cfg)?;
    rates.iter().map(|&r| probe_once(&setup, cfg, r, cfg.alpha)).collect()
}

/// Same probe at one rate across step sizes (in units of `1/λ₁`).
pub fn alpha_sweep(rate: u32, alphas: &[f64], cfg: &ProbeConfig) -> Result<Vec<ProbeRow>, AnalysisError> {
    let setup = probe_setup(cfg)?;
    alphas.iter().map(|&a| probe_once(&setup, cfg, rate, a)).collect()
}

/// Slope of `log₂(mean ‖ε_g‖²)` against rate.
pub fn grad_error_rate_slope(rows: &[ProbeRow]) -> f64 {
    let xs: Vec<f64> = rows.iter().map(|r| r.rate as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.grad_error.log2()).collect();
    fitted_slope(&xs, &ys)
}

/// Log-log slope of mean `‖ε_w‖²` against `α`.
pub fn weight_error_alpha_slope(rows: &[ProbeRow]) -> f64 {
    let xs: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.weight_error).collect();
    loglog_slope(&xs, &ys)
}

/// Trajectory diagnostics of a finished run against the convergence bound.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    /// Moreau surrogate² at the start of every round, then at the end of the run.
    pub surrogate_sq: Vec<f64>,
    /// `α` weighting each entry of `surrogate_sq`.
    pub weights: Vec<f64>,
    /// α-weighted running average of `surrogate_sq`.
    pub running_average: Vec<f64>,
    pub g: f64,
    pub g_q: f64,
    pub phi0: f64,
    /// Envelope at the closed-form optimum, standing in for `min φ`.
    pub phi_min: f64,
    /// Approximate bound: evaluated with `phi_min` in place of the true minimum.
    pub rhs: f64,
}

impl ConvergenceReport {
    pub fn initial_average(&self) -> f64 {
        self.running_average[0]
    }

    pub fn final_average(&self) -> f64 {
        *self.running_average.last().expect("non-empty trajectory")
    }

    /// Number of rounds where the running average went up.
    pub fn increases(&self) -> usize {
        self.running_average.windows(2).filter(|p| p[1] > p[0]).count()
    }
}

/// Evaluates the convergence bound on a finished single-layer run, with `G`
/// the largest raw gradient norm seen and `G_q` from [`gq_estimate`].
pub fn convergence_report(summary: &crate::orchestrator::RunSummary) -> Result<ConvergenceReport, AnalysisError> {
    let cfg = &summary.config;
    if summary.global_model.len() != 1 {
        return Err(AnalysisError::InvalidParams("the convergence bound applies to a single linear layer".into()));
    }
    let x = &summary.global_covariance;
    let mut surrogate = vec![summary.initial.moreau_surrogate];
    surrogate.extend(summary.records.iter().map(|r| r.moreau_surrogate));
    let surrogate_sq = surrogate
        .into_iter()
        .map(|s| {
            s.map(|v| v * v).ok_or_else(|| AnalysisError::InvalidParams("run recorded no Moreau surrogate".into()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let schedule = cfg.schedule(spectral_norm(x));
    let weights: Vec<f64> = (0..surrogate_sq.len() as u64).map(|t| schedule.at(t)).collect();
    let running_average = weighted_running_average(&surrogate_sq, &weights);

    let mut tp = TheoryParams::for_covariance(x)?;
    let steps = summary.all_steps();
    tp.g = steps.max_grad_norm();
    tp.g_q = gq_estimate(&steps, &summary.requant)?;
    let init = crate::orchestrator::initial_weights(cfg);
    let phi0 = moreau_envelope(&FeatureMatrix::new(init[0].clone())?, x, &tp)?;
    let opt = sslcore::closed_form_optimum(x, cfg.m())?;
    let phi_min = moreau_envelope(&opt, x, &tp)?.min(phi0);
    let rhs = theorem1_rhs(&tp, &summary.round_alphas, cfg.local_epochs(), phi0, phi_min)?;
    Ok(ConvergenceReport { surrogate_sq, weights, running_average, g: tp.g, g_q: tp.g_q, phi0, phi_min, rhs })
}
