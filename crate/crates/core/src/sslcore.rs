//! Linear self-supervised objective `‖X − wᵀw‖²_F` and the linear algebra
//! around it: gradients, a cyclic Jacobi eigensolver, the Eckart–Young
//! optimum and representability vectors.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SslError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("eigensolver did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("selected eigenvalue {0:e} is negative")]
    NegativeEigenvalue(f64),
    #[error("feature matrix spans no directions")]
    ZeroMatrix,
    #[error("invalid feature matrix: {0}")]
    InvalidFeatures(String),
}

/// Feature map `w ∈ ℝ^{m×d}`; its rows span the learned subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(Array2<f64>);

impl FeatureMatrix {
    pub fn new(w: Array2<f64>) -> Result<Self, SslError> {
        let (m, d) = w.dim();
        if m == 0 || m > d {
            return Err(SslError::InvalidFeatures(format!("need 1 <= m <= d, got {m}x{d}")));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(SslError::InvalidFeatures("non-finite entry".into()));
        }
        Ok(Self(w))
    }

    pub fn zeros(m: usize, d: usize) -> Self {
        Self(Array2::zeros((m, d)))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

fn check_square(x: &Array2<f64>, d: usize) -> Result<(), SslError> {
    if x.dim() != (d, d) {
        return Err(SslError::DimensionMismatch(format!("expected {d}x{d} covariance, got {:?}", x.dim())));
    }
    Ok(())
}

/// `‖X − wᵀw‖²_F`.
pub fn loss(w: &FeatureMatrix, x: &Array2<f64>) -> Result<f64, SslError> {
    check_square(x, w.dim())?;
    let gram = w.0.t().dot(&w.0);
    Ok((x - &gram).iter().map(|v| v * v).sum())
}

/// `4·w·(wᵀw − X)`.
pub fn grad(w: &FeatureMatrix, x: &Array2<f64>) -> Result<Array2<f64>, SslError> {
    check_square(x, w.dim())?;
    let residual = w.0.t().dot(&w.0) - x;
    Ok(w.0.dot(&residual) * 4.0)
}

/// Gradient of the augmentation-noise alignment term
/// `−(1/B)·Σ_i (a_i + ξ_i)ᵀ(a_i + ξ'_i)` with respect to the embeddings
/// `a_i` (rows of `outputs`). Returns the gradient and the term's value.
///
/// `ξ, ξ' ~ N(0, sigma²·I)`; per row, `ξ` is drawn before `ξ'`.
pub fn alignment_gradient<R: Rng + ?Sized>(outputs: &Array2<f64>, sigma: f64, rng: &mut R) -> (Array2<f64>, f64) {
    let (b, m) = outputs.dim();
    let scale = 1.0 / b as f64;
    let mut upstream = Array2::zeros((b, m));
    let mut value = 0.0;
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("sigma is positive and finite"));
    let mut xi = vec![0.0; m];
    let mut xi2 = vec![0.0; m];
    for (i, a) in outputs.outer_iter().enumerate() {
        if let Some(noise) = &noise {
            xi.iter_mut().for_each(|v| *v = noise.sample(rng));
            xi2.iter_mut().for_each(|v| *v = noise.sample(rng));
        }
        for j in 0..m {
            let (z, z2) = (a[j] + xi[j], a[j] + xi2[j]);
            value -= scale * z * z2;
            upstream[[i, j]] = -scale * (z + z2);
        }
    }
    (upstream, value)
}

/// Minibatch gradient of `−(1/B)Σ(wx + ξ)ᵀ(wx + ξ′) + ½‖wᵀw‖²` with fresh
/// augmentation noise per sample. With `aug_sigma = 0` and the full dataset
/// this is `2·w·(wᵀw − X)`.
pub fn stochastic_grad<R: Rng + ?Sized>(
    w: &FeatureMatrix,
    batch: &Array2<f64>,
    aug_sigma: f64,
    rng: &mut R,
) -> Result<Array2<f64>, SslError> {
    if batch.ncols() != w.dim() {
        return Err(SslError::DimensionMismatch(format!(
            "batch has {} columns, model expects {}",
            batch.ncols(),
            w.dim()
        )));
    }
    if batch.nrows() == 0 {
        return Err(SslError::DimensionMismatch("empty batch".into()));
    }
    let outputs = batch.dot(&w.0.t());
    let (upstream, _) = alignment_gradient(&outputs, aug_sigma, rng);
    Ok(upstream.t().dot(batch) + gram_regularizer_grad(&w.0))
}

/// Gradient of `½‖wᵀw‖²_F`, i.e. `2·w·wᵀw`.
pub fn gram_regularizer_grad(w: &Array2<f64>) -> Array2<f64> {
    w.dot(&w.t().dot(w)) * 2.0
}

/// Spectral decomposition with eigenvalues in descending order and
/// eigenvectors stored as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub eigenvalues: Array1<f64>,
    pub eigenvectors: Array2<f64>,
}

impl EigenDecomposition {
    pub fn vector(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.eigenvectors.column(i)
    }

    pub fn reconstruct(&self) -> Array2<f64> {
        let scaled = &self.eigenvectors * &self.eigenvalues.view().insert_axis(Axis(0));
        scaled.dot(&self.eigenvectors.t())
    }
}

pub const JACOBI_MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-9;

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Each eigenvector is sign-normalized so its largest-magnitude component is
/// positive.
pub fn sym_eig(x: &Array2<f64>) -> Result<EigenDecomposition, SslError> {
    let (n, c) = x.dim();
    if n != c {
        return Err(SslError::DimensionMismatch(format!("eigensolver needs a square matrix, got {n}x{c}")));
    }
    let scale = x.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let asym = (0..n)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| (x[[i, j]] - x[[j, i]]).abs())
        .fold(0.0, f64::max);
    if asym > SYMMETRY_TOL * scale {
        return Err(SslError::NotSymmetric(asym));
    }

    let mut a = (x + &x.t()) * 0.5;
    let mut v = Array2::<f64>::eye(n);
    let frob = a.iter().map(|e| e * e).sum::<f64>().sqrt();
    let target = 1e-15 * frob.max(f64::MIN_POSITIVE);

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| a[[p, q]] * a[[p, q]])
            .sum::<f64>()
            .sqrt();
        if off <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = cos * akp - sin * akq;
                    a[[k, q]] = sin * akp + cos * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = cos * apk - sin * aqk;
                    a[[q, k]] = sin * apk + cos * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = cos * vkp - sin * vkq;
                    v[[k, q]] = sin * vkp + cos * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(SslError::NoConvergence(JACOBI_MAX_SWEEPS));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]));
    let eigenvalues = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let mut eigenvectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        let col = v.column(src);
        let pivot = col.iter().fold(0.0f64, |best, &e| if e.abs() > best.abs() { e } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        eigenvectors.column_mut(dst).assign(&(&col * sign));
    }
    Ok(EigenDecomposition { eigenvalues, eigenvectors })
}

/// Tolerance below which a selected negative eigenvalue is treated as zero.
pub const NEGATIVE_EIGEN_TOL: f64 = 1e-9;

/// Eckart–Young minimizer of `‖X − wᵀw‖²` over rank-`m` feature matrices:
/// row `i` is `√λ_i · v_iᵀ` for the top-`m` eigenpairs.
pub fn closed_form_optimum(x: &Array2<f64>, m: usize) -> Result<FeatureMatrix, SslError> {
    let d = x.nrows();
    if m == 0 || m > d {
        return Err(SslError::DimensionMismatch(format!("rank {m} outside 1..={d}")));
    }
    let eig = sym_eig(x)?;
    optimum_from_eig(&eig, m)
}

pub fn optimum_from_eig(eig: &EigenDecomposition, m: usize) -> Result<FeatureMatrix, SslError> {
    let d = eig.eigenvalues.len();
    let mut w = Array2::zeros((m, d));
    for i in 0..m {
        let lambda = eig.eigenvalues[i];
        if lambda < -NEGATIVE_EIGEN_TOL {
            return Err(SslError::NegativeEigenvalue(lambda));
        }
        let root = lambda.max(0.0).sqrt();
        w.row_mut(i).assign(&(&eig.vector(i) * root));
    }
    FeatureMatrix::new(w)
}

/// `Σ_{i>m} λ_i²`, the optimal loss at rank `m`.
pub fn trailing_energy(eig: &EigenDecomposition, m: usize) -> f64 {
    eig.eigenvalues.slice(s![m..]).iter().map(|l| l * l).sum()
}

/// Relative tolerance for dropping rows during orthonormalization.
pub const RANK_TOL: f64 = 1e-10;

/// Orthonormal basis of the row space of `w` (modified Gram–Schmidt with one
/// reorthogonalization pass). Rows whose residual falls under
/// `RANK_TOL·‖w‖_F` are dropped.
pub fn row_space_basis(w: &Array2<f64>) -> Vec<Array1<f64>> {
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = RANK_TOL * norm;
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for row in w.outer_iter() {
        let mut r = row.to_owned();
        for _ in 0..2 {
            for b in &basis {
                let proj = r.dot(b);
                r.scaled_add(-proj, b);
            }
        }
        let rn = r.dot(&r).sqrt();
        if rn > tol && rn > 0.0 {
            basis.push(r / rn);
        }
    }
    basis
}

/// `r_i = ‖Π_S(e_i)‖²` where `S` is the row space of `w`.
pub fn representability(w: &FeatureMatrix) -> Result<Array1<f64>, SslError> {
    let basis = row_space_basis(&w.0);
    if basis.is_empty() {
        return Err(SslError::ZeroMatrix);
    }
    let mut r = Array1::zeros(w.dim());
    for b in &basis {
        r.zip_mut_with(b, |acc, v| *acc += v * v);
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::{stream, Domain, Stream};
    use ndarray::array;
    use rand_distr::StandardNormal;

    fn rng(id: u64) -> Stream {
        stream(5, Domain::Probe, id)
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut Stream) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
    }

    fn random_psd(d: usize, rng: &mut Stream) -> Array2<f64> {
        let a = random_matrix(d, d, rng);
        a.t().dot(&a) / d as f64
    }

    #[test]
    fn loss_examples() {
        let x = array![[1.0, 0.2], [0.2, 3.0]];
        let w = closed_form_optimum(&x, 2).unwrap();
        assert!(loss(&w, &x).unwrap() < 1e-20);

        let eye = Array2::<f64>::eye(4);
        assert_eq!(loss(&FeatureMatrix::zeros(2, 4), &eye).unwrap(), 4.0);

        let x = array![[4.0, 0.0], [0.0, 1.0]];
        let w = FeatureMatrix::new(array![[2.0, 0.0]]).unwrap();
        assert_eq!(loss(&w, &x).unwrap(), 1.0);
        assert!(matches!(loss(&w, &Array2::eye(3)), Err(SslError::DimensionMismatch(_))));
    }

    #[test]
    fn grad_vanishes_at_stationary_points() {
        let x = array![[4.0, 0.0], [0.0, 1.0]];
        let w = FeatureMatrix::new(array![[2.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(grad(&w, &x).unwrap().iter().all(|v| v.abs() < 1e-12));
        assert!(grad(&FeatureMatrix::zeros(2, 2), &x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_matches_central_differences() {
        let mut r = rng(1);
        let x = random_psd(5, &mut r);
        let w0 = random_matrix(2, 5, &mut r);
        let g = grad(&FeatureMatrix::new(w0.clone()).unwrap(), &x).unwrap();
        let h = 1e-5;
        for i in 0..2 {
            for j in 0..5 {
                let mut plus = w0.clone();
                plus[[i, j]] += h;
                let mut minus = w0.clone();
                minus[[i, j]] -= h;
                let fd = (loss(&FeatureMatrix::new(plus).unwrap(), &x).unwrap()
                    - loss(&FeatureMatrix::new(minus).unwrap(), &x).unwrap())
                    / (2.0 * h);
                let rel = (fd - g[[i, j]]).abs() / g[[i, j]].abs().max(1.0);
                assert!(rel < 1e-5, "entry ({i},{j}): fd {fd} vs {}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn noiseless_full_batch_gradient_is_half_the_loss_gradient() {
        let mut r = rng(2);
        let data = random_matrix(40, 6, &mut r);
        let x = data.t().dot(&data) / 40.0;
        let w = FeatureMatrix::new(random_matrix(3, 6, &mut r)).unwrap();
        let sg = stochastic_grad(&w, &data, 0.0, &mut r).unwrap();
        let expected = grad(&w, &x).unwrap() * 0.5;
        for (a, b) in sg.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn stochastic_gradient_is_unbiased() {
        let mut r = rng(3);
        let data = random_matrix(8, 4, &mut r);
        let w = FeatureMatrix::new(random_matrix(2, 4, &mut r)).unwrap();
        let exact = stochastic_grad(&w, &data, 0.0, &mut r).unwrap();
        let n = 10_000;
        let mut sum = Array2::<f64>::zeros(exact.dim());
        let mut sumsq = Array2::<f64>::zeros(exact.dim());
        for _ in 0..n {
            let g = stochastic_grad(&w, &data, 0.5, &mut r).unwrap();
            sum += &g;
            sumsq += &(&g * &g);
        }
        let mean = &sum / n as f64;
        for ((m, s), e) in mean.iter().zip(sumsq.iter()).zip(exact.iter()) {
            let var = s / n as f64 - m * m;
            let se = (var / n as f64).sqrt();
            assert!((m - e).abs() <= 3.0 * se + 1e-12, "mean {m} exact {e} se {se}");
        }
    }

    #[test]
    fn zero_weights_leave_only_noise_terms() {
        let mut r = rng(4);
        let data = random_matrix(16, 3, &mut r);
        let w = FeatureMatrix::zeros(2, 3);
        assert!(stochastic_grad(&w, &data, 0.0, &mut r).unwrap().iter().all(|&v| v == 0.0));
        let noisy = stochastic_grad(&w, &data, 0.3, &mut r).unwrap();
        assert!(noisy.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn eig_of_diagonal() {
        let x = Array2::from_diag(&array![3.0, 1.0, 2.0]);
        let eig = sym_eig(&x).unwrap();
        assert_eq!(eig.eigenvalues.to_vec(), vec![3.0, 2.0, 1.0]);
        let expected = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        assert_eq!(eig.eigenvectors, expected);
    }

    #[test]
    fn eig_of_rank_one() {
        let v = array![1.0, -2.0, 2.0] / 3.0;
        let x = v.view().insert_axis(Axis(1)).dot(&v.view().insert_axis(Axis(0)));
        let eig = sym_eig(&x).unwrap();
        assert!((eig.eigenvalues[0] - 1.0).abs() < 1e-14);
        assert!(eig.eigenvalues.slice(s![1..]).iter().all(|l| l.abs() < 1e-14));
        let dot = eig.vector(0).dot(&v);
        assert!((dot.abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn eig_reconstructs_random_symmetric() {
        let mut r = rng(5);
        let a = random_matrix(8, 8, &mut r);
        let x = (&a + &a.t()) * 0.5;
        let eig = sym_eig(&x).unwrap();
        let frob = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(frob(&(eig.reconstruct() - &x)) / frob(&x) < 1e-7);
        let gram = eig.eigenvectors.t().dot(&eig.eigenvectors);
        assert!(frob(&(gram - Array2::<f64>::eye(8))) < 1e-8);
        assert!(eig.eigenvalues.windows(2).into_iter().all(|w| w[0] >= w[1]));
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let x = array![[1.0, 2.0], [0.0, 1.0]];
        assert!(matches!(sym_eig(&x), Err(SslError::NotSymmetric(_))));
    }

    #[test]
    fn optimum_examples() {
        let x = array![[4.0, 0.0], [0.0, 1.0]];
        let w = closed_form_optimum(&x, 1).unwrap();
        assert_eq!(w.as_array(), &array![[2.0, 0.0]]);
        assert_eq!(loss(&w, &x).unwrap(), 1.0);

        let mut r = rng(6);
        let x = random_psd(5, &mut r);
        let w = closed_form_optimum(&x, 5).unwrap();
        assert!(loss(&w, &x).unwrap() < 1e-20);

        let bad = array![[1.0, 0.0], [0.0, -1.0]];
        assert!(matches!(closed_form_optimum(&bad, 2), Err(SslError::NegativeEigenvalue(_))));
    }

    #[test]
    fn optimum_is_locally_optimal() {
        let mut r = rng(7);
        let x = random_psd(6, &mut r);
        let eig = sym_eig(&x).unwrap();
        let w = optimum_from_eig(&eig, 3).unwrap();
        let best = loss(&w, &x).unwrap();
        let trailing = trailing_energy(&eig, 3);
        assert!((best - trailing).abs() <= 1e-8 * trailing.max(1e-300));
        for _ in 0..1000 {
            let delta = random_matrix(3, 6, &mut r);
            let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            let moved = w.as_array() + &(delta * (0.1 / norm));
            assert!(loss(&FeatureMatrix::new(moved).unwrap(), &x).unwrap() >= best);
        }
    }

    #[test]
    fn representability_examples() {
        let r = representability(&FeatureMatrix::new(array![[1.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(r.to_vec(), vec![1.0, 0.0]);

        let mut g = rng(8);
        let full = representability(&FeatureMatrix::new(random_matrix(4, 4, &mut g)).unwrap()).unwrap();
        assert!(full.iter().all(|v| (v - 1.0).abs() < 1e-10));

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let r = representability(&FeatureMatrix::new(array![[h, h]]).unwrap()).unwrap();
        assert!(r.iter().all(|v| (v - 0.5).abs() < 1e-15));

        assert!(matches!(representability(&FeatureMatrix::zeros(2, 3)), Err(SslError::ZeroMatrix)));
    }

    #[test]
    fn representability_drops_dependent_rows() {
        let w = FeatureMatrix::new(array![[1.0, 1.0, 0.0], [2.0, 2.0, 0.0], [0.0, 0.0, 3.0]]).unwrap();
        let r = representability(&w).unwrap();
        assert!((r.sum() - 2.0).abs() < 1e-12);
        assert!((r[0] - 0.5).abs() < 1e-12 && (r[2] - 1.0).abs() < 1e-12);
    }
}
