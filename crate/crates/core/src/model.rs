//! Joint model of K controlled experiments run on one subject pool.
//!
//! Responses follow a mixed-effects model: subject i in experiment j yields
//! `y_ij = beta_j * x_ij + z_i' gamma_j + u_i + eps_ij`, where `u_i` is a
//! subject random effect with variance tau^2 and `eps_ij` has variance
//! sigma_j^2. Under GLS estimation the precision matrix of the treatment
//! effect estimates has the closed form
//!
//! ```text
//! P[j, j]  = (1/c) Q_j     x_j' Pz x_j
//! P[j, j'] = (1/c) R_{jj'} x_j' Pz x_{j'}
//! ```
//!
//! with `Pz` the projector onto the orthogonal complement of the covariate
//! column space, `c = 1 + tau^2 sum_l sigma_l^-2`, `Q_j = sigma_j^-2 (c -
//! tau^2 sigma_j^-2)` and `R_{jj'} = -tau^2 sigma_j^-2 sigma_{j'}^-2`.
//! [`precision_matrix`] implements the closed form; [`precision_oracle`]
//! recomputes the same quantity from the stacked GLS system and serves as an
//! independent cross-check. The module also carries the closed-form
//! best/worst-case benchmarks and bounds used to judge designs.

use crate::error::{Error, Result};
use crate::numerics::{
    self, chol_psd, eigh_sym, inverse_spd, logdet_spd, solve_spd, Matrix,
};

/// Covariates of the subject pool: the N-by-p matrix `Z` (first column all
/// ones) together with the cached projector onto the orthogonal complement
/// of its column space.
#[derive(Debug, Clone)]
pub struct CovariateMatrix {
    z: Matrix,
    projector: Matrix,
}

impl CovariateMatrix {
    /// Number of subjects.
    pub fn n(&self) -> usize {
        self.z.rows()
    }

    /// Number of covariates, intercept included.
    pub fn p(&self) -> usize {
        self.z.cols()
    }

    pub fn z(&self) -> &Matrix {
        &self.z
    }

    /// The cached projector `I - Z (Z'Z)^-1 Z'`.
    pub fn projector(&self) -> &Matrix {
        &self.projector
    }

    /// Intercept-only covariates (Z = column of ones); the projector is the
    /// centering matrix.
    pub fn intercept_only(n: usize) -> Self {
        projection_complement(Matrix::from_fn(n, 1, |_, _| 1.0))
            .expect("intercept-only covariates are always full rank")
    }
}

/// Build a [`CovariateMatrix`] from `Z`, computing and validating the
/// projector onto the orthogonal complement of its column space.
///
/// Fails with [`Error::RankDeficient`] when the columns of `Z` are
/// collinear.
pub fn projection_complement(z: Matrix) -> Result<CovariateMatrix> {
    let (n, p) = (z.rows(), z.cols());
    if p > n {
        return Err(Error::IncompatibleDimensions(format!(
            "covariate matrix has more columns ({p}) than rows ({n})"
        )));
    }
    if !z.all_finite() {
        return Err(Error::Invalid("covariates contain non-finite values".into()));
    }
    for i in 0..n {
        if z[(i, 0)] != 1.0 {
            return Err(Error::Invalid(format!(
                "first covariate column must be all ones (row {i} is {})",
                z[(i, 0)]
            )));
        }
    }

    let zt = z.transpose();
    let gram = zt.matmul(&z).symmetrized();
    // (Z'Z)^-1 Z' via Cholesky; failure means collinear columns.
    let solved = solve_spd(&gram, &zt).map_err(|_| Error::RankDeficient)?;
    let mut projector = Matrix::identity(n).sub(&z.matmul(&solved)).symmetrized();

    // Clean up round-off so the cached projector honours its contract.
    let idem = projector.matmul(&projector).sub(&projector).max_abs();
    if idem > 1e-8 {
        return Err(Error::RankDeficient);
    }
    if projector.matmul(&z).max_abs() > 1e-8 {
        return Err(Error::RankDeficient);
    }
    if projector.max_asymmetry() > 0.0 {
        projector = projector.symmetrized();
    }
    Ok(CovariateMatrix { z, projector })
}

/// Noise levels of the mixed-effects model: the subject random-effect
/// variance tau^2 and the per-experiment error variances sigma_j^2.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    tau_sq: f64,
    sigma_sq: Vec<f64>,
}

impl NoiseSpec {
    pub fn new(tau_sq: f64, sigma_sq: Vec<f64>) -> Result<Self> {
        if !(tau_sq >= 0.0) || !tau_sq.is_finite() {
            return Err(Error::Invalid(format!("tau^2 must be finite and >= 0, got {tau_sq}")));
        }
        if sigma_sq.is_empty() {
            return Err(Error::Invalid("need at least one experiment".into()));
        }
        for (j, &s) in sigma_sq.iter().enumerate() {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Invalid(format!("sigma_{j}^2 must be finite and > 0, got {s}")));
            }
        }
        Ok(Self { tau_sq, sigma_sq })
    }

    /// Equal error variance in all K experiments.
    pub fn equal(tau_sq: f64, sigma_sq: f64, k: usize) -> Result<Self> {
        Self::new(tau_sq, vec![sigma_sq; k])
    }

    pub fn tau_sq(&self) -> f64 {
        self.tau_sq
    }

    pub fn sigma_sq(&self) -> &[f64] {
        &self.sigma_sq
    }

    /// Number of experiments.
    pub fn k(&self) -> usize {
        self.sigma_sq.len()
    }

    /// The common sigma^2, if all experiments share one.
    pub fn equal_sigma_sq(&self) -> Option<f64> {
        let first = self.sigma_sq[0];
        self.sigma_sq.iter().all(|&s| s == first).then_some(first)
    }

    /// Noise ratio b = tau^2 / sigma^2; defined only under equal variances.
    pub fn noise_ratio(&self) -> Option<f64> {
        self.equal_sigma_sq().map(|s| self.tau_sq / s)
    }
}

/// The constants of the closed-form precision matrix.
#[derive(Debug, Clone)]
pub struct ModelConstants {
    /// `c = 1 + tau^2 sum_l sigma_l^-2`.
    pub c: f64,
    /// `Q_j = sigma_j^-2 (c - tau^2 sigma_j^-2)`, one per experiment.
    pub q: Vec<f64>,
    /// `R_{jj'} = -tau^2 sigma_j^-2 sigma_{j'}^-2`, zero on the diagonal.
    pub r: Matrix,
}

/// Evaluate c, Q_j and R_{jj'} for a noise specification.
pub fn model_constants(noise: &NoiseSpec) -> ModelConstants {
    let k = noise.k();
    let tau_sq = noise.tau_sq();
    let inv: Vec<f64> = noise.sigma_sq().iter().map(|s| 1.0 / s).collect();
    let c = 1.0 + tau_sq * inv.iter().sum::<f64>();
    let q: Vec<f64> = inv.iter().map(|&si| si * (c - tau_sq * si)).collect();
    let r = Matrix::from_fn(k, k, |j, jp| {
        if j == jp {
            0.0
        } else {
            -tau_sq * inv[j] * inv[jp]
        }
    });
    ModelConstants { c, q, r }
}

/// A treatment/control design: one vector in {-1, +1}^N per experiment,
/// stored as the columns of an N-by-K matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationSet {
    x: Matrix,
}

impl AllocationSet {
    /// Validate that every entry is exactly -1 or +1.
    pub fn new(x: Matrix) -> Result<Self> {
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let v = x[(i, j)];
                if v != 1.0 && v != -1.0 {
                    return Err(Error::Invalid(format!(
                        "allocation entry ({i}, {j}) is {v}, expected -1 or 1"
                    )));
                }
            }
        }
        Ok(Self { x })
    }

    /// Assemble from per-experiment columns.
    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        if cols.is_empty() {
            return Err(Error::Invalid("need at least one experiment".into()));
        }
        let n = cols[0].len();
        if cols.iter().any(|c| c.len() != n) {
            return Err(Error::IncompatibleDimensions("allocation columns differ in length".into()));
        }
        Self::new(Matrix::from_fn(n, cols.len(), |i, j| cols[j][i]))
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn k(&self) -> usize {
        self.x.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.x
    }

    /// Allocation vector of experiment `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.x.col(j)
    }
}

/// Precision matrix of the treatment-effect estimates, K-by-K symmetric
/// positive semi-definite.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionMatrix {
    p: Matrix,
}

impl PrecisionMatrix {
    /// Wrap a K-by-K matrix, checking symmetry and (tolerant) positive
    /// semi-definiteness.
    pub fn new(p: Matrix) -> Result<Self> {
        if !p.is_square() {
            return Err(Error::Invalid("precision matrix must be square".into()));
        }
        let scale = p.max_abs();
        if p.max_asymmetry() > 1e-10 * (1.0 + scale) {
            return Err(Error::Invalid("precision matrix must be symmetric".into()));
        }
        let p = p.symmetrized();
        let (vals, _) = eigh_sym(&p)?;
        let min = vals.last().copied().unwrap_or(0.0);
        if min < -1e-8 * scale.max(1.0) {
            return Err(Error::Invalid(format!(
                "precision matrix is not positive semi-definite (min eigenvalue {min})"
            )));
        }
        Ok(Self { p })
    }

    pub fn k(&self) -> usize {
        self.p.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.p
    }
}

fn check_dims(cov: &CovariateMatrix, alloc: &AllocationSet, noise: &NoiseSpec) {
    assert_eq!(cov.n(), alloc.n(), "covariates and allocations disagree on N");
    assert_eq!(noise.k(), alloc.k(), "noise spec and allocations disagree on K");
}

/// Closed-form precision matrix of the treatment effect estimates.
pub fn precision_matrix(
    cov: &CovariateMatrix,
    alloc: &AllocationSet,
    noise: &NoiseSpec,
) -> PrecisionMatrix {
    check_dims(cov, alloc, noise);
    let k = noise.k();
    let consts = model_constants(noise);
    let pz = cov.projector();
    // Cache Pz x_j once per experiment.
    let projected: Vec<Vec<f64>> = (0..k).map(|j| pz.matvec(&alloc.column(j))).collect();
    let mut p = Matrix::zeros(k, k);
    for j in 0..k {
        let xj = alloc.column(j);
        for jp in j..k {
            let form = numerics::dot(&xj, &projected[jp]);
            let coeff = if j == jp { consts.q[j] } else { consts.r[(j, jp)] };
            let value = coeff * form / consts.c;
            p[(j, jp)] = value;
            p[(jp, j)] = value;
        }
    }
    PrecisionMatrix::new(p).expect("closed-form precision is symmetric PSD by construction")
}

/// Stacked design matrix X of the joint GLS system: row block j holds the
/// allocation of experiment j in column j and a copy of Z in its covariate
/// block.
pub(crate) fn design_matrix(cov: &CovariateMatrix, alloc: &AllocationSet) -> Matrix {
    let (n, p, k) = (cov.n(), cov.p(), alloc.k());
    let mut x = Matrix::zeros(n * k, k + k * p);
    for j in 0..k {
        for i in 0..n {
            x[(j * n + i, j)] = alloc.matrix()[(i, j)];
            for q in 0..p {
                x[(j * n + i, k + j * p + q)] = cov.z()[(i, q)];
            }
        }
    }
    x
}

/// Apply the inverse response covariance V^-1 to a stacked NK-by-m matrix,
/// using the Woodbury form: V^-1 is block diagonal `sigma_j^-2 I` minus the
/// rank-N correction `(tau^-2 + sum_l sigma_l^-2)^-1` times the outer
/// product of the stacked `sigma_j^-2 I` blocks.
pub(crate) fn apply_v_inverse(noise: &NoiseSpec, n: usize, m: &Matrix) -> Matrix {
    let k = noise.k();
    assert_eq!(m.rows(), n * k, "stacked matrix has wrong row count");
    let inv: Vec<f64> = noise.sigma_sq().iter().map(|s| 1.0 / s).collect();
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for j in 0..k {
        for i in 0..n {
            for q in 0..m.cols() {
                out[(j * n + i, q)] = inv[j] * m[(j * n + i, q)];
            }
        }
    }
    if noise.tau_sq() == 0.0 {
        return out;
    }
    let g = 1.0 / (1.0 / noise.tau_sq() + inv.iter().sum::<f64>());
    // S = sum_l sigma_l^-2 M_l, one N-by-m block.
    let mut s = Matrix::zeros(n, m.cols());
    for j in 0..k {
        for i in 0..n {
            for q in 0..m.cols() {
                s[(i, q)] += inv[j] * m[(j * n + i, q)];
            }
        }
    }
    for j in 0..k {
        for i in 0..n {
            for q in 0..m.cols() {
                out[(j * n + i, q)] -= g * inv[j] * s[(i, q)];
            }
        }
    }
    out
}

/// Ground-truth precision of the treatment effects, computed from the
/// stacked GLS system rather than the closed form: assemble X and V^-1,
/// invert X' V^-1 X, extract the treatment block of the covariance, and
/// invert it back.
///
/// Fails with [`Error::Singular`] for degenerate designs, e.g. an
/// allocation lying in the column space of Z.
pub fn precision_oracle(
    cov: &CovariateMatrix,
    alloc: &AllocationSet,
    noise: &NoiseSpec,
) -> Result<PrecisionMatrix> {
    check_dims(cov, alloc, noise);
    let k = noise.k();
    let x = design_matrix(cov, alloc);
    let vinv_x = apply_v_inverse(noise, cov.n(), &x);
    let a = x.transpose().matmul(&vinv_x).symmetrized();
    let a_inv = inverse_spd(&a).map_err(|_| Error::Singular)?;
    let cov_beta = Matrix::from_fn(k, k, |i, j| a_inv[(i, j)]).symmetrized();
    let prec = inverse_spd(&cov_beta).map_err(|_| Error::Singular)?;
    PrecisionMatrix::new(prec)
}

/// D-efficiency of a design: `det(P)^(1/K)` for its precision matrix P.
/// Singular precision (within tolerance) scores 0.
pub fn d_efficiency(p: &PrecisionMatrix) -> f64 {
    let k = p.k();
    let scale = p.matrix().max_abs();
    if scale == 0.0 {
        return 0.0;
    }
    let (vals, _) = eigh_sym(p.matrix()).expect("precision matrix is symmetric");
    if *vals.last().unwrap() <= 1e-10 * scale {
        return 0.0;
    }
    let logdet = logdet_spd(p.matrix()).expect("strictly positive eigenvalues");
    (logdet / k as f64).exp()
}

/// Variances of the individual treatment effect estimates: the diagonal of
/// the inverse precision matrix.
pub fn treatment_variances(p: &PrecisionMatrix) -> Result<Vec<f64>> {
    let inv = inverse_spd(p.matrix()).map_err(|_| Error::Singular)?;
    Ok((0..p.k()).map(|j| inv[(j, j)]).collect())
}

/// Closed-form benchmark values for equal error variances, parameterized by
/// the noise ratio `b = tau^2 / sigma^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmarks {
    /// D-efficiency when one covariate-balancing allocation is reused in
    /// every experiment (the worst balanced design).
    pub d_eff_worst: f64,
    /// D-efficiency of balanced, mutually orthogonal allocations (the ideal
    /// design).
    pub d_eff_best: f64,
    /// D-efficiency when the experiments are designed and analyzed as if
    /// independent.
    pub d_eff_independent: f64,
    /// Per-experiment variance under the worst balanced design.
    pub var_worst: f64,
    /// Per-experiment variance under the ideal design.
    pub var_best: f64,
    /// Per-experiment variance under independent analysis.
    pub var_independent: f64,
    /// Hadamard-inequality upper bound on any achievable D-efficiency.
    pub hadamard_upper: f64,
    /// Lower bound on any achievable per-experiment variance.
    pub variance_floor: f64,
    /// Ostrowski lower bound on `det(P) (sigma^2/N)^K` over balanced
    /// designs.
    pub ostrowski_floor: f64,
}

/// Evaluate all closed-form benchmarks for N subjects, K experiments, noise
/// ratio `b` and common error variance `sigma_sq`.
pub fn closed_form_benchmarks(n: usize, k: usize, b: f64, sigma_sq: f64) -> Benchmarks {
    assert!(n >= 2, "need at least two subjects");
    assert!(k >= 1, "need at least one experiment");
    assert!(b >= 0.0 && b.is_finite(), "noise ratio must be finite and >= 0");
    assert!(sigma_sq > 0.0, "sigma^2 must be positive");
    let nf = n as f64;
    let kf = k as f64;
    let d_eff_worst = nf / sigma_sq * (1.0 / (1.0 + b * kf)).powf(1.0 / kf);
    let d_eff_best = nf / sigma_sq * (1.0 + b * (kf - 1.0)) / (1.0 + b * kf);
    let d_eff_independent = nf / ((1.0 + b) * sigma_sq);
    let var_worst = sigma_sq / nf * (1.0 + b);
    let var_best = sigma_sq / nf * (1.0 + b * kf) / (1.0 + b * (kf - 1.0));
    Benchmarks {
        d_eff_worst,
        d_eff_best,
        d_eff_independent,
        var_worst,
        var_best,
        var_independent: var_worst,
        hadamard_upper: d_eff_best,
        variance_floor: var_best,
        ostrowski_floor: 1.0 / (1.0 + b * kf),
    }
}

/// Covariate-independent upper bound on D-efficiency: `(N/c) (prod_j
/// Q_j)^(1/K)`, from the Hadamard inequality applied to the precision
/// matrix with perfectly balanced allocations.
pub fn hadamard_upper_bound(cov: &CovariateMatrix, noise: &NoiseSpec) -> f64 {
    let consts = model_constants(noise);
    let k = noise.k() as f64;
    let log_mean_q = consts.q.iter().map(|q| q.ln()).sum::<f64>() / k;
    cov.n() as f64 / consts.c * log_mean_q.exp()
}

/// Ostrowski determinant floor: for any covariate-balancing design with
/// equal error variances, `det(P) (sigma^2/N)^K >= 1/(1 + bK)`. The floor is
/// attained by reusing a single balanced allocation in every experiment.
pub fn ostrowski_floor(noise: &NoiseSpec, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::Invalid("need at least two subjects".into()));
    }
    let b = noise.noise_ratio().ok_or(Error::UnequalSigmas)?;
    Ok(1.0 / (1.0 + b * noise.k() as f64))
}

/// Build the worst-case precision matrix (one balanced allocation reused in
/// every experiment) directly from its closed form.
pub fn worst_case_precision(n: usize, k: usize, b: f64, sigma_sq: f64) -> PrecisionMatrix {
    let kf = k as f64;
    let scale = n as f64 / (sigma_sq * (1.0 + b * kf));
    let p = Matrix::from_fn(k, k, |i, j| {
        if i == j {
            scale * (1.0 + b * (kf - 1.0))
        } else {
            -scale * b
        }
    });
    PrecisionMatrix::new(p).expect("closed-form worst case is PSD")
}

/// Check that a symmetric matrix is positive definite, as a convenience for
/// validating precision matrices before inversion.
pub fn is_positive_definite(m: &Matrix) -> bool {
    chol_psd(m, 0.0).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_rel(actual: f64, expected: f64, tol: f64) {
        let denom = expected.abs().max(1e-300);
        assert!(
            ((actual - expected) / denom).abs() <= tol,
            "expected {expected}, got {actual} (rel tol {tol})"
        );
    }

    /// Walsh-function allocation columns: balanced, mutually orthogonal,
    /// tiled to length n (n must be a multiple of 8).
    fn walsh_allocation(n: usize, masks: &[usize]) -> AllocationSet {
        let cols: Vec<Vec<f64>> = masks
            .iter()
            .map(|&m| {
                (0..n)
                    .map(|i| if ((i % 8) & m).count_ones() % 2 == 0 { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect();
        AllocationSet::from_columns(&cols).unwrap()
    }

    #[test]
    fn centering_projector_for_intercept_only() {
        let cov = CovariateMatrix::intercept_only(2);
        let expected = Matrix::from_rows(&[&[0.5, -0.5], &[-0.5, 0.5]]);
        assert!(cov.projector().sub(&expected).max_abs() < 1e-12);
    }

    #[test]
    fn full_column_space_gives_zero_projector() {
        // Square invertible Z spans all of R^2, so nothing is left over.
        let z = Matrix::from_rows(&[&[1.0, 0.0], &[1.0, 1.0]]);
        let cov = projection_complement(z).unwrap();
        assert!(cov.projector().max_abs() < 1e-10);
    }

    #[test]
    fn projector_annihilates_z_and_is_idempotent() {
        let mut state = 88172645463325252u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state as f64 / u64::MAX as f64) * 2.0 - 1.0
        };
        let z = Matrix::from_fn(8, 3, |_, j| if j == 0 { 1.0 } else { next() });
        let cov = projection_complement(z).unwrap();
        let p = cov.projector();
        assert!(p.matmul(cov.z()).max_abs() <= 1e-10);
        assert!(p.matmul(p).sub(p).max_abs() <= 1e-10);
    }

    #[test]
    fn rejects_missing_intercept() {
        let z = Matrix::from_rows(&[&[1.0, 2.0], &[0.5, 1.0]]);
        assert!(matches!(projection_complement(z), Err(Error::Invalid(_))));
    }

    #[test]
    fn rejects_collinear_covariates() {
        let z = Matrix::from_fn(4, 2, |_, _| 1.0);
        assert_eq!(projection_complement(z).unwrap_err(), Error::RankDeficient);
    }

    #[test]
    fn constants_without_random_effect() {
        let noise = NoiseSpec::new(0.0, vec![2.0, 0.5]).unwrap();
        let c = model_constants(&noise);
        assert_eq!(c.c, 1.0);
        assert_eq!(c.q, vec![0.5, 2.0]);
        assert_eq!(c.r.max_abs(), 0.0);
    }

    #[test]
    fn constants_two_experiments_unit_noise() {
        let noise = NoiseSpec::equal(1.0, 1.0, 2).unwrap();
        let c = model_constants(&noise);
        assert_rel(c.c, 3.0, 1e-15);
        assert_rel(c.q[0], 2.0, 1e-15);
        assert_rel(c.q[1], 2.0, 1e-15);
        assert_rel(c.r[(0, 1)], -1.0, 1e-15);
        assert_eq!(c.r[(0, 0)], 0.0);
    }

    #[test]
    fn constants_four_experiments_heavy_noise() {
        let noise = NoiseSpec::equal(4.0, 1.0, 4).unwrap();
        let c = model_constants(&noise);
        assert_rel(c.c, 17.0, 1e-15);
        for j in 0..4 {
            assert_rel(c.q[j], 13.0, 1e-15);
        }
        assert_rel(c.r[(2, 3)], -4.0, 1e-15);
    }

    #[test]
    fn single_experiment_precision() {
        let cov = CovariateMatrix::intercept_only(2);
        let alloc = AllocationSet::from_columns(&[vec![1.0, -1.0]]).unwrap();
        let noise = NoiseSpec::equal(0.0, 1.0, 1).unwrap();
        let p = precision_matrix(&cov, &alloc, &noise);
        assert_rel(p.matrix()[(0, 0)], 2.0, 1e-14);
    }

    #[test]
    fn orthogonal_balanced_pair_precision() {
        let cov = CovariateMatrix::intercept_only(4);
        let alloc = AllocationSet::from_columns(&[
            vec![1.0, 1.0, -1.0, -1.0],
            vec![1.0, -1.0, 1.0, -1.0],
        ])
        .unwrap();
        let noise = NoiseSpec::equal(1.0, 1.0, 2).unwrap();
        let p = precision_matrix(&cov, &alloc, &noise);
        assert_rel(p.matrix()[(0, 0)], 8.0 / 3.0, 1e-14);
        assert_rel(p.matrix()[(1, 1)], 8.0 / 3.0, 1e-14);
        assert!(p.matrix()[(0, 1)].abs() < 1e-14);

        let oracle = precision_oracle(&cov, &alloc, &noise).unwrap();
        assert!(p.matrix().sub(oracle.matrix()).max_abs() <= 1e-8 * p.matrix().max_abs());
    }

    #[test]
    fn oracle_reduces_to_independent_errors_when_tau_zero() {
        let cov = CovariateMatrix::intercept_only(8);
        let alloc = walsh_allocation(8, &[1, 3]);
        let noise = NoiseSpec::new(0.0, vec![1.0, 4.0]).unwrap();
        let oracle = precision_oracle(&cov, &alloc, &noise).unwrap();
        for j in 0..2 {
            let xj = alloc.column(j);
            let form = cov.projector().quadratic_form(&xj);
            assert_rel(oracle.matrix()[(j, j)], form / noise.sigma_sq()[j], 1e-10);
        }
        assert!(oracle.matrix()[(0, 1)].abs() <= 1e-10 * oracle.matrix().max_abs());
    }

    #[test]
    fn d_efficiency_of_diagonal_precision() {
        let p = PrecisionMatrix::new(Matrix::from_rows(&[
            &[8.0 / 3.0, 0.0],
            &[0.0, 8.0 / 3.0],
        ]))
        .unwrap();
        assert_rel(d_efficiency(&p), 8.0 / 3.0, 1e-12);
    }

    #[test]
    fn d_efficiency_of_worst_case() {
        // N=4, b=1, sigma=1, K=2 gives 4 / sqrt(3).
        let p = worst_case_precision(4, 2, 1.0, 1.0);
        assert_rel(d_efficiency(&p), 4.0 / 3.0f64.sqrt(), 1e-12);
    }

    #[test]
    fn d_efficiency_of_singular_precision_is_zero() {
        let p = PrecisionMatrix::new(Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]])).unwrap();
        assert_eq!(d_efficiency(&p), 0.0);
    }

    #[test]
    fn variances_of_diagonal_precision() {
        let p = PrecisionMatrix::new(Matrix::from_rows(&[
            &[8.0 / 3.0, 0.0],
            &[0.0, 8.0 / 3.0],
        ]))
        .unwrap();
        let v = treatment_variances(&p).unwrap();
        assert_rel(v[0], 0.375, 1e-14);
        assert_rel(v[1], 0.375, 1e-14);
    }

    #[test]
    fn variances_of_worst_case() {
        // Reusing one allocation leaves every variance at (1+b)/N.
        for k in [2usize, 4, 8] {
            let p = worst_case_precision(96, k, 4.0, 1.0);
            let v = treatment_variances(&p).unwrap();
            for vj in v {
                assert_rel(vj, 5.0 / 96.0, 1e-12);
            }
        }
    }

    #[test]
    fn variances_of_best_case() {
        let bench = closed_form_benchmarks(96, 4, 4.0, 1.0);
        let p = PrecisionMatrix::new(Matrix::from_fn(4, 4, |i, j| {
            if i == j {
                bench.d_eff_best
            } else {
                0.0
            }
        }))
        .unwrap();
        let v = treatment_variances(&p).unwrap();
        for vj in v {
            assert_rel(vj, 17.0 / (13.0 * 96.0), 1e-12);
        }
    }

    #[test]
    fn benchmarks_match_hand_evaluations() {
        let bench = closed_form_benchmarks(96, 4, 0.0625, 1.0);
        assert_rel(bench.hadamard_upper, 91.2, 1e-12);
        assert_rel(bench.d_eff_best, 91.2, 1e-12);
        assert_rel(bench.variance_floor, 1.25 / (96.0 * 1.1875), 1e-12);
    }

    #[test]
    fn benchmarks_collapse_without_random_effect() {
        let bench = closed_form_benchmarks(96, 4, 0.0, 1.0);
        assert_eq!(bench.d_eff_worst, 96.0);
        assert_eq!(bench.d_eff_best, 96.0);
        assert_eq!(bench.d_eff_independent, 96.0);
        assert_eq!(bench.var_worst, 1.0 / 96.0);
        assert_eq!(bench.var_best, 1.0 / 96.0);
    }

    #[test]
    fn benchmark_ordering_invariants() {
        for b in [0.0, 0.0625, 1.0, 4.0] {
            for k in [1usize, 2, 4, 8] {
                let bench = closed_form_benchmarks(96, k, b, 1.0);
                assert!(bench.d_eff_worst <= bench.d_eff_best + 1e-12);
                assert!(bench.d_eff_best <= bench.hadamard_upper + 1e-12);
                assert!(bench.var_best <= bench.var_worst + 1e-12);
                assert!(bench.ostrowski_floor > 0.0);
            }
        }
    }

    #[test]
    fn hadamard_bound_examples() {
        let cov = CovariateMatrix::intercept_only(96);
        let noise = NoiseSpec::equal(0.0625, 1.0, 4).unwrap();
        assert_rel(hadamard_upper_bound(&cov, &noise), 91.2, 1e-12);

        let noise = NoiseSpec::equal(4.0, 1.0, 8).unwrap();
        assert_rel(hadamard_upper_bound(&cov, &noise), 96.0 * 29.0 / 33.0, 1e-12);
    }

    #[test]
    fn hadamard_bound_geometric_mean_when_tau_zero() {
        let cov = CovariateMatrix::intercept_only(96);
        let noise = NoiseSpec::new(0.0, vec![1.0, 4.0]).unwrap();
        // Geometric mean of sigma^2 is 2.
        assert_rel(hadamard_upper_bound(&cov, &noise), 48.0, 1e-12);

        let unit = NoiseSpec::equal(0.0, 1.0, 3).unwrap();
        assert_rel(hadamard_upper_bound(&cov, &unit), 96.0, 1e-12);
    }

    #[test]
    fn ostrowski_floor_examples() {
        let noise = NoiseSpec::equal(1.0, 1.0, 2).unwrap();
        assert_rel(ostrowski_floor(&noise, 4).unwrap(), 1.0 / 3.0, 1e-15);

        let no_effect = NoiseSpec::equal(0.0, 1.0, 3).unwrap();
        assert_eq!(ostrowski_floor(&no_effect, 4).unwrap(), 1.0);

        let unequal = NoiseSpec::new(1.0, vec![1.0, 2.0]).unwrap();
        assert_eq!(ostrowski_floor(&unequal, 4).unwrap_err(), Error::UnequalSigmas);
    }

    #[test]
    fn ostrowski_floor_attained_by_identical_allocation() {
        // Same balanced vector in both experiments, N=4, b=1, K=2.
        let cov = CovariateMatrix::intercept_only(4);
        let x = vec![1.0, 1.0, -1.0, -1.0];
        let alloc = AllocationSet::from_columns(&[x.clone(), x]).unwrap();
        let noise = NoiseSpec::equal(1.0, 1.0, 2).unwrap();
        let p = precision_matrix(&cov, &alloc, &noise);
        let factor = numerics::det(p.matrix()) * (1.0 / 4.0f64).powi(2);
        assert_rel(factor, 1.0 / 3.0, 1e-12);
    }

    #[test]
    fn worst_case_attainment_identity() {
        // One balanced allocation reused across experiments hits the
        // closed-form worst case exactly.
        let n = 96;
        let cov = CovariateMatrix::intercept_only(n);
        let x: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        for k in [2usize, 4] {
            for b in [0.0625, 1.0, 4.0] {
                let alloc = AllocationSet::from_columns(&vec![x.clone(); k]).unwrap();
                let noise = NoiseSpec::equal(b, 1.0, k).unwrap();
                let p = precision_matrix(&cov, &alloc, &noise);
                let bench = closed_form_benchmarks(n, k, b, 1.0);
                assert_rel(d_efficiency(&p), bench.d_eff_worst, 1e-10);
                for v in treatment_variances(&p).unwrap() {
                    assert_rel(v, bench.var_worst, 1e-10);
                }
            }
        }
    }

    #[test]
    fn best_case_attainment_identity() {
        // Balanced, mutually orthogonal allocations hit the ideal closed
        // form exactly.
        let n = 96;
        let cov = CovariateMatrix::intercept_only(n);
        for b in [0.0625, 4.0] {
            let alloc = walsh_allocation(n, &[1, 2, 4, 7]);
            let noise = NoiseSpec::equal(b, 1.0, 4).unwrap();
            let p = precision_matrix(&cov, &alloc, &noise);
            let bench = closed_form_benchmarks(n, 4, b, 1.0);
            assert_rel(d_efficiency(&p), bench.d_eff_best, 1e-10);
            for v in treatment_variances(&p).unwrap() {
                assert_rel(v, bench.var_best, 1e-10);
            }
        }
    }
}
