//! Heterogeneous client datasets.
//!
//! Client `k` (1-based) mostly holds classes `2k−1` and `2k`:
//!
//! ```text
//! x = ±e_k − Σ_{i≠k, i≤n} q_i·τ·e_i + μ·ξ,   q_i ~ Uniform{0,1},  ξ ~ N(0, I_d)
//! ```
//!
//! plus a handful of samples `x = e_i + μ·ξ` from class `2i−1` of every other
//! client, with `τ = d^{1/5}` and `μ = d^{−1/5}`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::streams::{self, Domain, Stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data parameters: {0}")]
    InvalidParams(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shard has no samples")]
    EmptyShard,
    #[error("malformed shard file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_frequent_count() -> usize {
    2000
}

fn default_infrequent_exponent() -> f64 {
    0.3
}

fn default_noise() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataGenParams {
    pub n: usize,
    pub d: usize,
    #[serde(default = "default_frequent_count")]
    pub frequent_count: usize,
    #[serde(default = "default_infrequent_exponent")]
    pub infrequent_exponent: f64,
    /// When false, `μ·ξ` is dropped; used to audit the noiseless structure.
    #[serde(default = "default_noise")]
    pub noise: bool,
    #[serde(default)]
    pub seed: u64,
}

impl DataGenParams {
    pub fn new(n: usize, d: usize, seed: u64) -> Self {
        Self {
            n,
            d,
            frequent_count: default_frequent_count(),
            infrequent_exponent: default_infrequent_exponent(),
            noise: true,
            seed,
        }
    }

    pub fn tau(&self) -> f64 {
        (self.d as f64).powf(0.2)
    }

    pub fn mu(&self) -> f64 {
        (self.d as f64).powf(-0.2)
    }

    /// Noise scale actually applied to samples.
    pub fn noise_scale(&self) -> f64 {
        if self.noise {
            self.mu()
        } else {
            0.0
        }
    }

    /// `⌈d^β⌉` samples per infrequent class.
    pub fn infrequent_count(&self) -> usize {
        (self.d as f64).powf(self.infrequent_exponent).ceil() as usize
    }

    /// Rows in every client's shard.
    pub fn shard_rows(&self) -> usize {
        2 * self.frequent_count + (self.n - 1) * self.infrequent_count()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |msg: String| Err(DataError::InvalidParams(msg));
        if self.n == 0 || self.d == 0 {
            return fail(format!("n ({}) and d ({}) must be positive", self.n, self.d));
        }
        if self.n > self.d {
            return fail(format!("n ({}) must not exceed d ({})", self.n, self.d));
        }
        if self.frequent_count == 0 {
            return fail("frequent_count must be positive".into());
        }
        if !(self.infrequent_exponent > 0.0 && self.infrequent_exponent < 1.0) {
            return fail(format!("infrequent_exponent {} outside (0, 1)", self.infrequent_exponent));
        }
        if self.n * self.infrequent_count() > self.frequent_count {
            return fail(format!(
                "n * infrequent_count ({}) exceeds frequent_count ({})",
                self.n * self.infrequent_count(),
                self.frequent_count
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataShard {
    pub client_id: u32,
    pub samples: Array2<f64>,
    /// 1-based class ids in `[1, 2n]`.
    pub labels: Vec<u32>,
    covariance_cache: Option<Array2<f64>>,
}

impl DataShard {
    pub fn new(client_id: u32, samples: Array2<f64>, labels: Vec<u32>) -> Result<Self, DataError> {
        if samples.nrows() != labels.len() {
            return Err(DataError::DimensionMismatch(format!("{} rows but {} labels", samples.nrows(), labels.len())));
        }
        Ok(Self { client_id, samples, labels, covariance_cache: None })
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    /// Cached `(1/|D_k|)·Σ x xᵀ`, computed on first use.
    pub fn covariance(&mut self) -> Result<&Array2<f64>, DataError> {
        if self.covariance_cache.is_none() {
            self.covariance_cache = Some(empirical_covariance(self)?);
        }
        Ok(self.covariance_cache.as_ref().expect("filled above"))
    }

    pub fn cached_covariance(&self) -> Option<&Array2<f64>> {
        self.covariance_cache.as_ref()
    }

    pub fn class_count(&self, class: u32) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

/// Per-client data stream: `seed ⊕ hash(client_id)`.
pub fn client_stream(params: &DataGenParams, k: usize) -> Stream {
    streams::stream(params.seed, Domain::Data, k as u64)
}

fn push_sample<R: Rng + ?Sized>(
    row: &mut [f64],
    params: &DataGenParams,
    anchor: usize,
    sign: f64,
    shifts: bool,
    rng: &mut R,
) {
    row.fill(0.0);
    row[anchor - 1] = sign;
    if shifts {
        let tau = params.tau();
        for i in (1..=params.n).filter(|&i| i != anchor) {
            if rng.gen::<bool>() {
                row[i - 1] -= tau;
            }
        }
    }
    let mu = params.noise_scale();
    if mu > 0.0 {
        for v in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += mu * z;
        }
    }
}

/// Shard for client `k ∈ [1, n]`.
pub fn generate_shard<R: Rng + ?Sized>(params: &DataGenParams, k: usize, rng: &mut R) -> Result<DataShard, DataError> {
    params.validate()?;
    if k == 0 || k > params.n {
        return Err(DataError::InvalidParams(format!("client index {k} outside 1..={}", params.n)));
    }
    let d = params.d;
    let rows = params.shard_rows();
    let mut samples = Array2::zeros((rows, d));
    let mut labels = Vec::with_capacity(rows);
    let mut next = 0;

    let frequent = [(2 * k as u32 - 1, 1.0), (2 * k as u32, -1.0)];
    for (class, sign) in frequent {
        for _ in 0..params.frequent_count {
            let mut row = samples.row_mut(next);
            push_sample(row.as_slice_mut().expect("row-major"), params, k, sign, true, rng);
            labels.push(class);
            next += 1;
        }
    }
    for i in (1..=params.n).filter(|&i| i != k) {
        for _ in 0..params.infrequent_count() {
            let mut row = samples.row_mut(next);
            push_sample(row.as_slice_mut().expect("row-major"), params, i, 1.0, false, rng);
            labels.push(2 * i as u32 - 1);
            next += 1;
        }
    }
    debug_assert_eq!(next, rows);
    DataShard::new(k as u32, samples, labels)
}

/// Shards for every client, each from its own stream.
pub fn generate_all(params: &DataGenParams) -> Result<Vec<DataShard>, DataError> {
    (1..=params.n).map(|k| generate_shard(params, k, &mut client_stream(params, k))).collect()
}

/// `(1/|D_k|)·Σ_i x_i x_iᵀ`.
pub fn empirical_covariance(shard: &DataShard) -> Result<Array2<f64>, DataError> {
    if shard.is_empty() {
        return Err(DataError::EmptyShard);
    }
    let x = &shard.samples;
    let cov = x.t().dot(x) / x.nrows() as f64;
    // exact symmetry
    let sym = (&cov + &cov.t()) * 0.5;
    Ok(sym)
}

/// Sample-count weighted mean of the per-shard covariances.
pub fn global_covariance(shards: &[DataShard]) -> Result<Array2<f64>, DataError> {
    let first = shards.first().ok_or(DataError::EmptyShard)?;
    let d = first.dim();
    let mut total = 0usize;
    let mut acc = Array2::<f64>::zeros((d, d));
    for shard in shards {
        if shard.dim() != d {
            return Err(DataError::DimensionMismatch(format!(
                "client {} has dimension {}, expected {d}",
                shard.client_id,
                shard.dim()
            )));
        }
        let cov = match shard.cached_covariance() {
            Some(c) => c.clone(),
            None => empirical_covariance(shard)?,
        };
        acc.scaled_add(shard.len() as f64, &cov);
        total += shard.len();
    }
    Ok(acc / total as f64)
}

pub const SHARD_MAGIC: &[u8; 4] = b"FQDS";
pub const SHARD_VERSION: u32 = 1;

/// Little-endian shard file: magic, version u32, client id u32, rows u64,
/// d u64, row-major f64 samples, then u32 labels.
pub fn write_shard(path: &Path, shard: &DataShard) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(SHARD_MAGIC)?;
    out.write_all(&SHARD_VERSION.to_le_bytes())?;
    out.write_all(&shard.client_id.to_le_bytes())?;
    out.write_all(&(shard.len() as u64).to_le_bytes())?;
    out.write_all(&(shard.dim() as u64).to_le_bytes())?;
    for v in shard.samples.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    for l in &shard.labels {
        out.write_all(&l.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_array<const N: usize>(input: &mut impl Read) -> Result<[u8; N], DataError> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => DataError::Format("truncated file".into()),
        _ => DataError::Io(e),
    })?;
    Ok(buf)
}

pub fn read_shard(path: &Path) -> Result<DataShard, DataError> {
    let mut input = BufReader::new(File::open(path)?);
    if &read_array::<4>(&mut input)? != SHARD_MAGIC {
        return Err(DataError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut input)?);
    if version != SHARD_VERSION {
        return Err(DataError::Format(format!("unsupported version {version}")));
    }
    let client_id = u32::from_le_bytes(read_array(&mut input)?);
    let rows = u64::from_le_bytes(read_array(&mut input)?) as usize;
    let d = u64::from_le_bytes(read_array(&mut input)?) as usize;
    let mut values = Vec::with_capacity(rows * d);
    for _ in 0..rows * d {
        values.push(f64::from_le_bytes(read_array(&mut input)?));
    }
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        labels.push(u32::from_le_bytes(read_array(&mut input)?));
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(DataError::Format(format!("{} trailing bytes", rest.len())));
    }
    let samples = Array2::from_shape_vec((rows, d), values).map_err(|e| DataError::Format(e.to_string()))?;
    DataShard::new(client_id, samples, labels)
}

pub fn shard_file_name(client_id: u32) -> String {
    format!("client_{client_id:04}.fqds")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sslcore::sym_eig;
    use ndarray::array;

    fn small(n: usize, d: usize) -> DataGenParams {
        DataGenParams { frequent_count: 200, ..DataGenParams::new(n, d, 3) }
    }

    #[test]
    fn derived_scales() {
        let p = DataGenParams::new(4, 32, 0);
        assert!((p.tau() - 2.0).abs() < 1e-12);
        assert!((p.mu() - 0.5).abs() < 1e-12);
        assert!((p.tau() * p.mu() - 1.0).abs() < 1e-12);
        assert_eq!(p.infrequent_count(), 3);
    }

    #[test]
    fn validation() {
        assert!(DataGenParams::new(5, 4, 0).validate().is_err());
        let p = DataGenParams { frequent_count: 0, ..DataGenParams::new(2, 8, 0) };
        assert!(p.validate().is_err());
        let p = DataGenParams { frequent_count: 3, ..DataGenParams::new(2, 32, 0) };
        assert!(p.validate().is_err());
        let p = DataGenParams::new(2, 8, 0);
        assert!(matches!(generate_shard(&p, 3, &mut client_stream(&p, 3)), Err(DataError::InvalidParams(_))));
    }

    #[test]
    fn noiseless_structure() {
        let p = DataGenParams { noise: false, ..small(2, 8) };
        let shard = generate_shard(&p, 1, &mut client_stream(&p, 1)).unwrap();
        let tau = p.tau();
        for (row, &label) in shard.samples.outer_iter().zip(&shard.labels) {
            if label == 1 {
                assert_eq!(row[0], 1.0);
                assert!(row[1] == 0.0 || row[1] == -tau);
                assert!(row.iter().skip(2).all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn class_counts() {
        let p = small(3, 16);
        for k in 1..=3u32 {
            let shard = generate_shard(&p, k as usize, &mut client_stream(&p, k as usize)).unwrap();
            assert_eq!(shard.class_count(2 * k - 1), p.frequent_count);
            assert_eq!(shard.class_count(2 * k), p.frequent_count);
            for i in (1..=3u32).filter(|&i| i != k) {
                assert_eq!(shard.class_count(2 * i), 0);
                assert_eq!(shard.class_count(2 * i - 1), p.infrequent_count());
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let p = small(2, 8);
        let a = generate_shard(&p, 2, &mut client_stream(&p, 2)).unwrap();
        let b = generate_shard(&p, 2, &mut client_stream(&p, 2)).unwrap();
        assert_eq!(a, b);
        let c = generate_shard(&p, 1, &mut client_stream(&p, 1)).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn covariance_examples() {
        let one = DataShard::new(1, array![[1.0, 0.0, 0.0]], vec![1]).unwrap();
        let expected = array![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert_eq!(empirical_covariance(&one).unwrap(), expected);
        let two = DataShard::new(1, array![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]], vec![1, 2]).unwrap();
        assert_eq!(empirical_covariance(&two).unwrap(), expected);
        let empty = DataShard::new(1, Array2::zeros((0, 3)), vec![]).unwrap();
        assert!(matches!(empirical_covariance(&empty), Err(DataError::EmptyShard)));
    }

    #[test]
    fn covariance_cache_matches_direct() {
        let p = small(2, 8);
        let mut shard = generate_shard(&p, 1, &mut client_stream(&p, 1)).unwrap();
        let direct = empirical_covariance(&shard).unwrap();
        let cached = shard.covariance().unwrap().clone();
        assert!((&direct - &cached).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn large_sample_diagonal_structure() {
        let p = DataGenParams { frequent_count: 20_000, ..DataGenParams::new(2, 32, 9) };
        let shard = generate_shard(&p, 1, &mut client_stream(&p, 1)).unwrap();
        let cov = empirical_covariance(&shard).unwrap();
        let (tau, mu) = (p.tau(), p.mu());
        let target = tau * tau / 2.0 + mu * mu;
        assert!((cov[[1, 1]] - target).abs() < 0.1 * target, "{} vs {target}", cov[[1, 1]]);
        for j in 2..32 {
            assert!(cov[[j, j]] <= 5.0 * mu * mu);
        }
    }

    #[test]
    fn top_eigenvalues_dominate() {
        let p = DataGenParams { frequent_count: 1000, ..DataGenParams::new(2, 32, 4) };
        let shard = generate_shard(&p, 2, &mut client_stream(&p, 2)).unwrap();
        let eig = sym_eig(&empirical_covariance(&shard).unwrap()).unwrap();
        let tau = p.tau();
        assert!(eig.eigenvalues[p.n - 1] >= tau * tau / 4.0 * eig.eigenvalues[p.n]);
    }

    #[test]
    fn global_covariance_is_pooled() {
        let p = small(3, 6);
        let mut shards = generate_all(&p).unwrap();
        // uneven sizes
        shards[1].samples = shards[1].samples.slice(ndarray::s![..150, ..]).to_owned();
        shards[1].labels.truncate(150);
        let global = global_covariance(&shards).unwrap();
        let pooled =
            ndarray::concatenate(ndarray::Axis(0), &shards.iter().map(|s| s.samples.view()).collect::<Vec<_>>())
                .unwrap();
        let direct = pooled.t().dot(&pooled) / pooled.nrows() as f64;
        assert!((&global - &direct).iter().all(|v| v.abs() < 1e-10));

        let single = global_covariance(&shards[..1]).unwrap();
        assert!((&single - &empirical_covariance(&shards[0]).unwrap()).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn equal_shards_average() {
        let p = small(2, 4);
        let shards = generate_all(&p).unwrap();
        let mean = (empirical_covariance(&shards[0]).unwrap() + empirical_covariance(&shards[1]).unwrap()) * 0.5;
        let global = global_covariance(&shards).unwrap();
        assert!((&global - &mean).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let a = DataShard::new(1, Array2::ones((2, 3)), vec![1, 1]).unwrap();
        let b = DataShard::new(2, Array2::ones((2, 4)), vec![3, 3]).unwrap();
        assert!(matches!(global_covariance(&[a, b]), Err(DataError::DimensionMismatch(_))));
    }

    #[test]
    fn shard_file_round_trip() {
        let p = small(2, 5);
        let shard = generate_shard(&p, 2, &mut client_stream(&p, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(shard_file_name(2));
        write_shard(&path, &shard).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"FQDS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 28 + shard.len() * 5 * 8 + shard.len() * 4);
        assert_eq!(read_shard(&path).unwrap(), shard);

        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_shard(&path), Err(DataError::Format(_))));
    }
}
