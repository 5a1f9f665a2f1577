//! Aggregation and per-client re-quantization.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use thiserror::Error;

use crate::client::{dequantize_model, ClientId, LayerWeights};
use crate::quantkit::{self, QuantError};
use crate::streams::Stream;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no client models to aggregate")]
    EmptyInput,
    #[error("client {0} did not report this round")]
    MissingClient(ClientId),
    #[error("client {0} is not registered with the server")]
    UnknownClient(ClientId),
    #[error("client {0} reported a sample count of zero")]
    ZeroCount(ClientId),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// What a client uploads at the end of a round.
#[derive(Debug, Clone)]
pub struct ClientReport {
    pub client_id: ClientId,
    pub model: Vec<LayerWeights>,
    pub sample_count: usize,
}

/// What the server sends back: the client's model at its own bitwidth.
#[derive(Debug, Clone)]
pub struct Downlink {
    pub client_id: ClientId,
    pub model: Vec<LayerWeights>,
    /// `‖ε_r‖²` for this client.
    pub requant_error_sq: f64,
}

fn check_layout(reference: &[Array2<f64>], other: &[Array2<f64>], what: &str) -> Result<(), ServerError> {
    if reference.len() != other.len() {
        return Err(ServerError::ShapeMismatch(format!(
            "{what} has {} layers, expected {}",
            other.len(),
            reference.len()
        )));
    }
    for (l, (a, b)) in reference.iter().zip(other).enumerate() {
        if a.dim() != b.dim() {
            return Err(ServerError::ShapeMismatch(format!(
                "{what} layer {l} is {:?}, expected {:?}",
                b.dim(),
                a.dim()
            )));
        }
    }
    Ok(())
}

/// Codebook lookup for every layer of every model.
pub fn dequantize_client_models(models: &[Vec<LayerWeights>]) -> Result<Vec<Vec<Array2<f64>>>, ServerError> {
    let out: Vec<Vec<Array2<f64>>> = models.iter().map(|m| dequantize_model(m)).collect();
    if let Some(first) = out.first() {
        for (k, m) in out.iter().enumerate().skip(1) {
            check_layout(first, m, &format!("model {k}"))?;
        }
    }
    Ok(out)
}

/// `Σ_k (|D_k|/|D|)·w_k`, summed in the order given.
pub fn aggregate(models: &[Vec<Array2<f64>>], counts: &[usize]) -> Result<Vec<Array2<f64>>, ServerError> {
    let first = models.first().ok_or(ServerError::EmptyInput)?;
    if models.len() != counts.len() {
        return Err(ServerError::ShapeMismatch(format!("{} models but {} sample counts", models.len(), counts.len())));
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(ServerError::ZeroCount(k as ClientId));
    }
    for (k, m) in models.iter().enumerate().skip(1) {
        check_layout(first, m, &format!("model {k}"))?;
    }
    let total: usize = counts.iter().sum();
    let mut global: Vec<Array2<f64>> = first.iter().map(|w| Array2::zeros(w.dim())).collect();
    for (model, &count) in models.iter().zip(counts) {
        let p = count as f64 / total as f64;
        for (g, w) in global.iter_mut().zip(model) {
            g.scaled_add(p, w);
        }
    }
    Ok(global)
}

/// Per-layer tanh codebook fitted to the global layer at `bits`, then
/// stochastic quantization. Returns the model and `‖ε_r‖²`.
pub fn requantize_for_client(
    global: &[Array2<f64>],
    bits: u32,
    rng: &mut Stream,
) -> Result<(Vec<LayerWeights>, f64), ServerError> {
    let mut err = 0.0;
    let mut out = Vec::with_capacity(global.len());
    for w in global {
        let cb = Arc::new(quantkit::fit_tanh(w, bits)?);
        let q = quantkit::stochastic_quantize(w, &cb, rng);
        let back = quantkit::dequantize(&q);
        err += w.iter().zip(back.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        out.push(LayerWeights::Quantized(q));
    }
    Ok((out, err))
}

#[derive(Debug, Clone)]
pub struct ServerState {
    /// Full-precision `w_G`, kept between rounds for metrics.
    pub global_model: Vec<Array2<f64>>,
    pub client_bitwidths: BTreeMap<ClientId, u32>,
    pub round: u64,
    /// Per-round `‖ε_r‖²` by client.
    pub requant_error_log: Vec<BTreeMap<ClientId, f64>>,
    /// When false the server forwards the global model without re-quantization.
    pub quantize: bool,
    rng: Stream,
}

impl ServerState {
    pub fn new(
        global_model: Vec<Array2<f64>>,
        client_bitwidths: BTreeMap<ClientId, u32>,
        quantize: bool,
        rng: Stream,
    ) -> Self {
        Self { global_model, client_bitwidths, round: 0, requant_error_log: Vec::new(), quantize, rng }
    }

    /// Dequantize, aggregate in client-id order, then re-quantize for every
    /// client at its bitwidth. Reports may arrive in any order.
    pub fn run_round(&mut self, reports: &[ClientReport]) -> Result<Vec<Downlink>, ServerError> {
        let mut by_id: BTreeMap<ClientId, &ClientReport> = BTreeMap::new();
        for r in reports {
            if !self.client_bitwidths.contains_key(&r.client_id) {
                return Err(ServerError::UnknownClient(r.client_id));
            }
            if r.sample_count == 0 {
                return Err(ServerError::ZeroCount(r.client_id));
            }
            by_id.insert(r.client_id, r);
        }
        if let Some(&missing) = self.client_bitwidths.keys().find(|id| !by_id.contains_key(id)) {
            return Err(ServerError::MissingClient(missing));
        }
        let models: Vec<Vec<LayerWeights>> = by_id.values().map(|r| r.model.clone()).collect();
        let counts: Vec<usize> = by_id.values().map(|r| r.sample_count).collect();
        let full = dequantize_client_models(&models)?;
        let global = aggregate(&full, &counts)?;
        check_layout(&self.global_model, &global, "aggregated model")?;
        self.global_model = global;

        let mut downlinks = Vec::with_capacity(by_id.len());
        let mut log = BTreeMap::new();
        for (&id, &bits) in &self.client_bitwidths {
            let (model, err) = if self.quantize {
                requantize_for_client(&self.global_model, bits, &mut self.rng)?
            } else {
                (self.global_model.iter().cloned().map(LayerWeights::Full).collect(), 0.0)
            };
            log.insert(id, err);
            downlinks.push(Downlink { client_id: id, model, requant_error_sq: err });
        }
        self.requant_error_log.push(log);
        self.round += 1;
        Ok(downlinks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantkit::{Codebook, Compander, QuantizedTensor};
    use crate::streams::{stream, Domain};
    use ndarray::array;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn rng(id: u64) -> Stream {
        stream(5, Domain::Probe, id)
    }

    fn gaussian(rows: usize, cols: usize, r: &mut Stream) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || -> f64 { StandardNormal.sample(r) })
    }

    fn sq(a: &Array2<f64>) -> f64 {
        a.iter().map(|v| v * v).sum()
    }

    fn diff_sq(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        sq(&(a - b))
    }

    #[test]
    fn scalar_aggregation_examples() {
        let m = |v: f64| vec![array![[v]]];
        assert_eq!(aggregate(&[m(0.0), m(2.0)], &[5, 5]).unwrap()[0][[0, 0]], 1.0);
        assert_eq!(aggregate(&[m(0.0), m(4.0)], &[3, 1]).unwrap()[0][[0, 0]], 1.0);
    }

    #[test]
    fn aggregation_errors() {
        assert!(matches!(aggregate(&[], &[]), Err(ServerError::EmptyInput)));
        let a = vec![Array2::zeros((2, 2))];
        let b = vec![Array2::zeros((2, 3))];
        assert!(matches!(aggregate(&[a, b], &[1, 1]), Err(ServerError::ShapeMismatch(_))));
    }

    #[test]
    fn dequantize_uses_each_clients_codebook() {
        let mut r = rng(1);
        let w = gaussian(3, 4, &mut r);
        let (q4, _) = requantize_for_client(&[w.clone()], 4, &mut r).unwrap();
        let (q8, _) = requantize_for_client(&[w], 8, &mut r).unwrap();
        let out = dequantize_client_models(&[q4.clone(), q8.clone()]).unwrap();
        for (model, q) in out.iter().zip([&q4, &q8]) {
            let LayerWeights::Quantized(t) = &q[0] else { panic!() };
            let direct: Array2<f64> = quantkit::dequantize(t).into_dimensionality().unwrap();
            assert_eq!(model[0], direct);
        }
        assert_ne!(out[0][0], out[1][0]);
    }

    #[test]
    fn requantizing_codebook_centers_is_lossless() {
        let mut r = rng(2);
        let (q, _) = requantize_for_client(&[gaussian(4, 4, &mut r)], 4, &mut r).unwrap();
        let centers = dequantize_model(&q);
        let (again, err) = requantize_for_client(&centers, 4, &mut r).unwrap();
        assert_eq!(err, 0.0);
        assert_eq!(dequantize_model(&again), centers);
    }

    #[test]
    fn high_rate_requantization() {
        let mut r = rng(3);
        let w = gaussian(4, 8, &mut r);
        let (_, err) = requantize_for_client(&[w.clone()], 16, &mut r).unwrap();
        assert!(err / sq(&w) < 1e-4);
    }

    #[test]
    fn higher_bitwidth_client_has_smaller_requant_error() {
        let mut r = rng(4);
        let w = vec![gaussian(4, 8, &mut r)];
        let mean = |bits: u32, r: &mut Stream| {
            (0..100).map(|_| requantize_for_client(&w, bits, r).unwrap().1).sum::<f64>() / 100.0
        };
        let e4 = mean(4, &mut r);
        let e8 = mean(8, &mut r);
        assert!(e8 < e4, "{e8} vs {e4}");
    }

    #[test]
    fn requantization_is_unbiased() {
        let mut r = rng(5);
        let w = vec![gaussian(3, 3, &mut r)];
        let n = 10_000;
        let mut sum = Array2::<f64>::zeros((3, 3));
        let mut sumsq = Array2::<f64>::zeros((3, 3));
        for _ in 0..n {
            let d = dequantize_model(&requantize_for_client(&w, 3, &mut r).unwrap().0).remove(0);
            sum += &d;
            sumsq += &(&d * &d);
        }
        for ((s, s2), x) in sum.iter().zip(sumsq.iter()).zip(w[0].iter()) {
            let m = s / n as f64;
            let se = ((s2 / n as f64 - m * m).max(0.0) / n as f64).sqrt();
            assert!((m - x).abs() <= 3.0 * se + 1e-12, "{m} vs {x}");
        }
    }

    fn server(bits: &[(ClientId, u32)], shape: (usize, usize)) -> ServerState {
        ServerState::new(vec![Array2::zeros(shape)], bits.iter().copied().collect(), true, rng(99))
    }

    fn report(id: ClientId, w: Array2<f64>, count: usize) -> ClientReport {
        ClientReport { client_id: id, model: vec![LayerWeights::Full(w)], sample_count: count }
    }

    #[test]
    fn single_client_round_requantizes_its_own_model() {
        let mut r = rng(6);
        let w = gaussian(2, 3, &mut r);
        let mut s = server(&[(1, 16)], (2, 3));
        let down = s.run_round(&[report(1, w.clone(), 10)]).unwrap();
        assert_eq!(s.global_model[0], w);
        assert_eq!(s.round, 1);
        let back = dequantize_model(&down[0].model).remove(0);
        assert!(diff_sq(&back, &w) < 1e-4 * sq(&w));
        assert_eq!(s.requant_error_log[0][&1], down[0].requant_error_sq);
    }

    #[test]
    fn identical_centered_clients_round_trip() {
        let mut r = rng(7);
        let (q, _) = requantize_for_client(&[gaussian(3, 3, &mut r)], 5, &mut r).unwrap();
        let mut s = server(&[(1, 5), (2, 5)], (3, 3));
        let reports: Vec<_> = [1, 2]
            .into_iter()
            .map(|id| ClientReport { client_id: id, model: q.clone(), sample_count: 7 * id as usize })
            .collect();
        let down = s.run_round(&reports).unwrap();
        for d in down {
            assert_eq!(dequantize_model(&d.model), dequantize_model(&q));
            assert_eq!(d.requant_error_sq, 0.0);
        }
    }

    #[test]
    fn missing_and_unknown_clients() {
        let mut s = server(&[(1, 4), (2, 4)], (1, 1));
        assert!(matches!(s.run_round(&[report(1, array![[1.0]], 1)]), Err(ServerError::MissingClient(2))));
        assert!(matches!(s.run_round(&[report(3, array![[1.0]], 1)]), Err(ServerError::UnknownClient(3))));
    }

    #[test]
    fn unquantized_server_forwards_global_model() {
        let mut s =
            ServerState::new(vec![Array2::zeros((1, 1))], [(1, 4), (2, 4)].into_iter().collect(), false, rng(8));
        let down = s.run_round(&[report(1, array![[0.0]], 1), report(2, array![[3.0]], 2)]).unwrap();
        assert_eq!(dequantize_model(&down[0].model)[0], array![[2.0]]);
        assert_eq!(down[1].requant_error_sq, 0.0);
    }

    #[test]
    fn constant_codebook_layers_dequantize() {
        let cb = Arc::new(Codebook::constant(1.5, 3, Compander::Tanh).unwrap());
        let q = QuantizedTensor::new(vec![1, 2], vec![0, 0], cb).unwrap();
        let out = dequantize_client_models(&[vec![LayerWeights::Quantized(q)]]).unwrap();
        assert_eq!(out[0][0], array![[1.5, 1.5]]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn identical_models_are_a_fixed_point(
            vals in proptest::collection::vec(-10.0f64..10.0, 6),
            counts in proptest::collection::vec(1usize..1000, 1..6),
        ) {
            let w = Array2::from_shape_vec((2, 3), vals).unwrap();
            let models = vec![vec![w.clone()]; counts.len()];
            let g = aggregate(&models, &counts).unwrap();
            for (a, b) in g[0].iter().zip(w.iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }

        #[test]
        fn report_order_does_not_change_global_model(seed in 0u64..1000, n in 2usize..6) {
            let mut r = stream(seed, Domain::Probe, 0);
            let reports: Vec<ClientReport> = (0..n)
                .map(|k| report(k as ClientId, gaussian(2, 3, &mut r), 1 + (seed as usize * (k + 1)) % 97))
                .collect();
            let ids: Vec<(ClientId, u32)> = (0..n).map(|k| (k as ClientId, 4)).collect();
            let mut a = server(&ids, (2, 3));
            let mut b = server(&ids, (2, 3));
            a.run_round(&reports).unwrap();
            let mut reversed = reports.clone();
            reversed.reverse();
            reversed.rotate_left(seed as usize % n);
            b.run_round(&reversed).unwrap();
            prop_assert!(diff_sq(&a.global_model[0], &b.global_model[0]).sqrt() <= 1e-12);
        }

        #[test]
        fn requantized_values_are_codebook_centers(seed in 0u64..1000, bits in 1u32..9) {
            let mut r = stream(seed, Domain::Probe, 1);
            let w = vec![gaussian(3, 4, &mut r)];
            let (q, err) = requantize_for_client(&w, bits, &mut r).unwrap();
            prop_assert!(err >= 0.0);
            let LayerWeights::Quantized(t) = &q[0] else { unreachable!() };
            let back = dequantize_model(&q).remove(0);
            for v in back.iter() {
                prop_assert!(t.codebook().centers().contains(v));
            }
        }
    }
}
