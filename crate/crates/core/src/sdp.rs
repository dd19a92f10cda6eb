//! The diagonal-constrained SDP `max Tr(C W), diag(W) = 1, W >= 0` and the
//! randomized machinery built on it: unit-sphere sampling, hyperplane
//! rounding, and orthonormal rounding-vector generation.
//!
//! The solver works on the low-rank factorization `W = Y Y'` with the rows
//! of `Y` constrained to the unit sphere, using projected gradient ascent
//! with Barzilai-Borwein step sizes. The rank budget sits above the
//! Barvinok-Pataki threshold, where stationary points of the factorized
//! problem are generically global optima of the SDP; random restarts guard
//! against the exceptions. The factor that rounding needs falls out of the
//! parameterization directly.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{dot, norm2, orthonormal_completion, Matrix};

/// Convergence tolerance on the projected-gradient norm, scaled by
/// `1 + max |C|`.
pub const GRAD_TOL: f64 = 1e-6;

/// Iteration cap per ascent run.
pub const MAX_ITERATIONS: usize = 5000;

/// Independent restarts per solve; the best value is kept.
pub const RESTARTS: usize = 3;

/// Seeded random stream. Identical seeds produce identical draw sequences;
/// child streams derived with [`RandomSource::child`] are independent of the
/// parent's position.
#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
}

/// Combine seed material into a new 64-bit seed (splitmix64 finalizer over
/// the parts). Used for hierarchical seed derivation.
pub fn mix_seed(parts: &[u64]) -> u64 {
    fn splitmix64(x: u64) -> u64 {
        let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let mut acc = 0x243F_6A88_85A3_08D3u64; // arbitrary non-zero start
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

impl RandomSource {
    pub fn from_seed(seed: u64) -> Self {
        Self { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent child stream; the derivation depends only on
    /// the original seed and the tag, not on how much the parent has drawn.
    pub fn child(&self, tag: u64) -> Self {
        Self::from_seed(mix_seed(&[self.seed, tag]))
    }

    /// Uniform draw from [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }

    /// Standard normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Fair coin mapped to -1 or +1.
    pub fn sign(&mut self) -> f64 {
        if self.rng.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.rng.random_range(0..=i);
            xs.swap(i, j);
        }
    }
}

/// Cost matrix of the diagonal-constrained SDP. Must be symmetric and
/// positive semi-definite up to a small tolerance (the design subproblems
/// are PSD in exact arithmetic but floating-point assembly perturbs them).
#[derive(Debug, Clone)]
pub struct SdpProblem {
    c: Matrix,
}

impl SdpProblem {
    pub fn new(c: Matrix) -> Result<Self> {
        if !c.is_square() {
            return Err(Error::Invalid("cost matrix must be square".into()));
        }
        if !c.all_finite() {
            return Err(Error::Invalid("cost matrix has non-finite entries".into()));
        }
        let scale = c.max_abs();
        if c.max_asymmetry() > 1e-8 * (1.0 + scale) {
            return Err(Error::Invalid("cost matrix must be symmetric".into()));
        }
        let c = c.symmetrized();
        let (vals, _) = crate::numerics::eigh_sym(&c)?;
        let min = vals.last().copied().unwrap_or(0.0);
        if min < -1e-6 * scale.max(1.0) {
            return Err(Error::Invalid(format!(
                "cost matrix is not positive semi-definite within tolerance (min eigenvalue {min})"
            )));
        }
        Ok(Self { c })
    }

    pub fn n(&self) -> usize {
        self.c.rows()
    }

    pub fn cost(&self) -> &Matrix {
        &self.c
    }
}

/// Feasible (near-)optimal point of the SDP in factored form: `factor *
/// factor'` is the solution matrix `W`.
#[derive(Debug, Clone)]
pub struct SdpSolution {
    /// N-by-r factor with unit-norm rows.
    pub factor: Matrix,
    /// Objective value `Tr(C W)`.
    pub value: f64,
    /// Worst deviation of a diagonal entry of `W` from 1.
    pub feasibility_residual: f64,
    /// Total ascent iterations spent across restarts.
    pub iterations: usize,
    /// Set when the time limit cut the ascent short; the best feasible
    /// iterate found so far is returned.
    pub time_limit_hit: bool,
}

/// Rank budget `ceil(sqrt(2N)) + 1`, one above the Barvinok-Pataki
/// threshold.
pub fn rank_budget(n: usize) -> usize {
    ((2.0 * n as f64).sqrt().ceil() as usize) + 1
}

fn frob_inner(a: &Matrix, b: &Matrix) -> f64 {
    debug_assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    let mut s = 0.0;
    for i in 0..a.rows() {
        s += dot(a.row(i), b.row(i));
    }
    s
}

/// Gaussian factor with unit-norm rows.
fn random_factor(n: usize, r: usize, rng: &mut RandomSource) -> Matrix {
    let mut y = Matrix::zeros(n, r);
    for i in 0..n {
        loop {
            for j in 0..r {
                y[(i, j)] = rng.standard_normal();
            }
            let norm = norm2(y.row(i));
            if norm > 1e-12 {
                for j in 0..r {
                    y[(i, j)] /= norm;
                }
                break;
            }
        }
    }
    y
}

/// Project the ambient gradient onto the tangent space of the product of
/// unit spheres (rowwise).
fn project_rows(grad: &mut Matrix, y: &Matrix) {
    for i in 0..grad.rows() {
        let coeff = dot(grad.row(i), y.row(i));
        let yr: Vec<f64> = y.row(i).to_vec();
        for (g, yv) in grad.row_mut(i).iter_mut().zip(yr) {
            *g -= coeff * yv;
        }
    }
}

fn normalize_rows(y: &mut Matrix) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..y.rows() {
        let norm = norm2(y.row(i));
        if !(norm > 1e-150) || !norm.is_finite() {
            return Err(Error::InfeasibleNumerics);
        }
        for v in y.row_mut(i) {
            *v /= norm;
        }
        worst = worst.max((dot(y.row(i), y.row(i)) - 1.0).abs());
    }
    Ok(worst)
}

struct AscentOutcome {
    y: Matrix,
    value: f64,
    iterations: usize,
    time_limit_hit: bool,
}

/// One Barzilai-Borwein ascent run from the given starting factor. Keeps the
/// best-value iterate seen, since BB steps are non-monotone.
fn ascend(
    c: &Matrix,
    mut y: Matrix,
    deadline: Instant,
) -> Result<AscentOutcome> {
    let n = y.rows();
    let scale = c.max_abs();
    let grad_tol = GRAD_TOL * (1.0 + scale);
    // Gershgorin bound on the spectral radius gives a safe fallback step.
    let mut row_sum_max = 0.0f64;
    for i in 0..n {
        row_sum_max = row_sum_max.max(c.row(i).iter().map(|v| v.abs()).sum());
    }
    let fallback = 1.0 / (2.0 * row_sum_max).max(1e-12);

    let mut cy = c.matmul(&y);
    let mut value = frob_inner(&cy, &y);
    let mut grad = cy.scale(2.0);
    project_rows(&mut grad, &y);

    let mut best_y = y.clone();
    let mut best_value = value;
    let mut prev_y: Option<Matrix> = None;
    let mut prev_grad: Option<Matrix> = None;
    let mut time_limit_hit = false;
    let mut iterations = 0;

    for iter in 0..MAX_ITERATIONS {
        iterations = iter + 1;
        let gnorm = frob_inner(&grad, &grad).sqrt();
        if gnorm <= grad_tol {
            iterations = iter;
            break;
        }
        if Instant::now() >= deadline {
            time_limit_hit = true;
            break;
        }

        let step = match (&prev_y, &prev_grad) {
            (Some(py), Some(pg)) => {
                let s = y.sub(py);
                let d = grad.sub(pg);
                let ss = frob_inner(&s, &s);
                let sd = frob_inner(&s, &d);
                let dd = frob_inner(&d, &d);
                // Alternate the two BB formulas; magnitudes only, since the
                // sphere constraints flip curvature signs along the path.
                let bb = if iter % 2 == 0 && sd.abs() > 1e-300 {
                    (ss / sd).abs()
                } else if dd > 1e-300 {
                    (sd / dd).abs()
                } else {
                    fallback
                };
                if bb.is_finite() && bb > 0.0 {
                    bb.clamp(fallback * 1e-4, fallback * 1e6)
                } else {
                    fallback
                }
            }
            _ => fallback,
        };

        prev_y = Some(y.clone());
        prev_grad = Some(grad.clone());

        for i in 0..n {
            let g = grad.row(i).to_vec();
            for (v, gi) in y.row_mut(i).iter_mut().zip(g) {
                *v += step * gi;
            }
        }
        normalize_rows(&mut y)?;

        cy = c.matmul(&y);
        value = frob_inner(&cy, &y);
        grad = cy.scale(2.0);
        project_rows(&mut grad, &y);

        if value > best_value {
            best_value = value;
            best_y = y.clone();
        }
    }

    Ok(AscentOutcome { y: best_y, value: best_value, iterations, time_limit_hit })
}

/// Solve the diagonal-constrained SDP `max Tr(C W)` over unit-diagonal PSD
/// matrices, returning a low-rank factor of the solution.
///
/// Runs [`RESTARTS`] independently initialized ascents and keeps the best.
/// When `time_limit` expires the best feasible iterate found so far is
/// returned with [`SdpSolution::time_limit_hit`] set.
pub fn solve_diag_sdp(
    prob: &SdpProblem,
    rng: &mut RandomSource,
    time_limit: Duration,
) -> Result<SdpSolution> {
    if time_limit.is_zero() {
        return Err(Error::Invalid("time limit must be positive".into()));
    }
    let n = prob.n();
    let r = rank_budget(n);
    let deadline = Instant::now() + time_limit;

    let mut best: Option<AscentOutcome> = None;
    let mut iterations = 0;
    let mut time_limit_hit = false;
    for _ in 0..RESTARTS {
        let y0 = random_factor(n, r, rng);
        let out = ascend(prob.cost(), y0, deadline)?;
        iterations += out.iterations;
        time_limit_hit |= out.time_limit_hit;
        if best.as_ref().map_or(true, |b| out.value > b.value) {
            best = Some(out);
        }
        if time_limit_hit {
            break;
        }
    }
    let best = best.expect("at least one restart runs");

    let mut factor = best.y;
    let feasibility_residual = normalize_rows(&mut factor)?;
    Ok(SdpSolution {
        factor,
        value: best.value,
        feasibility_residual,
        iterations,
        time_limit_hit,
    })
}

/// Uniform draw from the unit (n-1)-sphere: Gaussian vector normalized by
/// its length.
pub fn sample_unit_sphere(n: usize, rng: &mut RandomSource) -> Vec<f64> {
    assert!(n >= 1);
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let norm = norm2(&v);
        if norm > 1e-12 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Round an SDP factor to a sign vector against the direction `v`: subject
/// i gets +1 when the projection of its factor row onto `v` is >= 0, else
/// -1. Ties at exactly zero map to +1.
pub fn hyperplane_round(sol: &SdpSolution, v: &[f64]) -> Vec<f64> {
    assert_eq!(v.len(), sol.factor.cols(), "rounding vector length must match factor rank");
    (0..sol.factor.rows())
        .map(|i| if dot(sol.factor.row(i), v) >= 0.0 { 1.0 } else { -1.0 })
        .collect()
}

/// Draw `k` mutually orthogonal unit vectors in dimension `n`: one uniform
/// sphere vector completed to an orthonormal basis, from which `k` columns
/// are selected uniformly without replacement.
pub fn random_orthonormal_k(n: usize, k: usize, rng: &mut RandomSource) -> Matrix {
    assert!(k >= 1 && k <= n, "need 1 <= k <= n");
    let v = sample_unit_sphere(n, rng);
    let q = orthonormal_completion(&v).expect("sphere sample is unit length");
    // Partial Fisher-Yates over the column indices.
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.index(n - i);
        idx.swap(i, j);
    }
    Matrix::from_fn(n, k, |row, col| q[(row, idx[col])])
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive maximum of x'Cx over sign vectors; test oracle only.
    fn binary_max(c: &Matrix) -> f64 {
        let n = c.rows();
        let mut best = f64::NEG_INFINITY;
        for bits in 0u64..(1 << n) {
            let x: Vec<f64> =
                (0..n).map(|i| if bits >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
            best = best.max(c.quadratic_form(&x));
        }
        best
    }

    fn random_psd(n: usize, rng: &mut RandomSource) -> Matrix {
        let b = Matrix::from_fn(n, n, |_, _| rng.standard_normal());
        b.transpose().matmul(&b).symmetrized()
    }

    #[test]
    fn identity_cost_has_fixed_trace_value() {
        let prob = SdpProblem::new(Matrix::identity(4)).unwrap();
        let mut rng = RandomSource::from_seed(1);
        let sol = solve_diag_sdp(&prob, &mut rng, Duration::from_secs(5)).unwrap();
        // Any feasible W has Tr(W) = 4.
        assert!((sol.value - 4.0).abs() <= 1e-9);
        assert!(sol.feasibility_residual <= 1e-6);
    }

    #[test]
    fn centering_cost_reaches_enumerated_optimum() {
        let n = 4;
        let c = Matrix::from_fn(n, n, |i, j| {
            let delta = if i == j { 1.0 } else { 0.0 };
            delta - 1.0 / n as f64
        });
        assert_eq!(binary_max(&c), 4.0);
        let prob = SdpProblem::new(c).unwrap();
        let mut rng = RandomSource::from_seed(7);
        let sol = solve_diag_sdp(&prob, &mut rng, Duration::from_secs(10)).unwrap();
        assert!((sol.value - 4.0).abs() <= 1e-4, "value {}", sol.value);
    }

    #[test]
    fn solver_dominates_binary_optimum() {
        for seed in 0..5u64 {
            let mut rng = RandomSource::from_seed(seed);
            let n = 4 + (seed as usize % 5);
            let c = random_psd(n, &mut rng);
            let prob = SdpProblem::new(c.clone()).unwrap();
            let sol = solve_diag_sdp(&prob, &mut rng, Duration::from_secs(10)).unwrap();
            let opt = binary_max(&c);
            assert!(
                sol.value >= opt - 1e-4 * (1.0 + c.max_abs()),
                "seed {seed}: solver {} below binary optimum {opt}",
                sol.value
            );
        }
    }

    #[test]
    fn rounding_mean_respects_two_over_pi_guarantee() {
        let mut rng = RandomSource::from_seed(3);
        let c = random_psd(6, &mut rng);
        let prob = SdpProblem::new(c.clone()).unwrap();
        let sol = solve_diag_sdp(&prob, &mut rng, Duration::from_secs(10)).unwrap();
        let draws = 2000;
        let mut values = Vec::with_capacity(draws);
        for _ in 0..draws {
            let v = sample_unit_sphere(sol.factor.cols(), &mut rng);
            let x = hyperplane_round(&sol, &v);
            values.push(c.quadratic_form(&x));
        }
        let mean = values.iter().sum::<f64>() / draws as f64;
        let var =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        assert!(
            mean >= 2.0 / std::f64::consts::PI * sol.value - 3.0 * se,
            "mean {mean} vs guarantee {}",
            2.0 / std::f64::consts::PI * sol.value
        );
    }

    #[test]
    fn solver_is_deterministic() {
        let mut rng = RandomSource::from_seed(11);
        let c = random_psd(8, &mut rng);
        let prob = SdpProblem::new(c).unwrap();
        let sol_a =
            solve_diag_sdp(&prob, &mut RandomSource::from_seed(5), Duration::from_secs(10))
                .unwrap();
        let sol_b =
            solve_diag_sdp(&prob, &mut RandomSource::from_seed(5), Duration::from_secs(10))
                .unwrap();
        assert_eq!(sol_a.value, sol_b.value);
        assert_eq!(sol_a.factor, sol_b.factor);
        assert_eq!(sol_a.iterations, sol_b.iterations);
    }

    #[test]
    fn problem_rejects_indefinite_cost() {
        let c = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, -1.0]]);
        assert!(SdpProblem::new(c).is_err());
    }

    #[test]
    fn sphere_sample_in_one_dimension_is_sign() {
        let mut rng = RandomSource::from_seed(2);
        for _ in 0..10 {
            let v = sample_unit_sphere(1, &mut rng);
            assert!(v[0] == 1.0 || v[0] == -1.0);
        }
    }

    #[test]
    fn sphere_sample_is_deterministic_and_unit() {
        let a = sample_unit_sphere(17, &mut RandomSource::from_seed(9));
        let b = sample_unit_sphere(17, &mut RandomSource::from_seed(9));
        assert_eq!(a, b);
        assert!((norm2(&a) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn sphere_sample_coordinates_are_centered() {
        let mut rng = RandomSource::from_seed(4);
        let n = 50;
        let draws = 10_000;
        let mut sums = vec![0.0f64; n];
        for _ in 0..draws {
            let v = sample_unit_sphere(n, &mut rng);
            for (s, x) in sums.iter_mut().zip(v) {
                *s += x;
            }
        }
        // Each coordinate has variance 1/n on the sphere.
        let se = (1.0 / n as f64 / draws as f64).sqrt();
        for s in sums {
            assert!((s / draws as f64).abs() <= 4.0 * se);
        }
    }

    #[test]
    fn rounding_reads_signs() {
        let sol = SdpSolution {
            factor: Matrix::identity(3),
            value: 0.0,
            feasibility_residual: 0.0,
            iterations: 0,
            time_limit_hit: false,
        };
        let s3 = 3.0f64.sqrt();
        let x = hyperplane_round(&sol, &[1.0 / s3, -1.0 / s3, 1.0 / s3]);
        assert_eq!(x, vec![1.0, -1.0, 1.0]);
    }

    #[test]
    fn rounding_equal_rows_gives_all_plus() {
        let v = sample_unit_sphere(4, &mut RandomSource::from_seed(21));
        let factor = Matrix::from_fn(5, 4, |_, j| v[j]);
        let sol = SdpSolution {
            factor,
            value: 0.0,
            feasibility_residual: 0.0,
            iterations: 0,
            time_limit_hit: false,
        };
        assert_eq!(hyperplane_round(&sol, &v), vec![1.0; 5]);
    }

    #[test]
    fn rounding_rank_one_factor_recovers_signs() {
        // Rows equal to +/- a fixed unit vector reproduce +/- the sign
        // pattern for every rounding direction; both signs must occur.
        let mut rng = RandomSource::from_seed(33);
        let u = sample_unit_sphere(3, &mut rng);
        let signs = [1.0, -1.0, -1.0, 1.0, 1.0];
        let factor = Matrix::from_fn(5, 3, |i, j| signs[i] * u[j]);
        let sol = SdpSolution {
            factor,
            value: 0.0,
            feasibility_residual: 0.0,
            iterations: 0,
            time_limit_hit: false,
        };
        let mut saw_plus = false;
        let mut saw_minus = false;
        for _ in 0..64 {
            let v = sample_unit_sphere(3, &mut rng);
            let x = hyperplane_round(&sol, &v);
            if x == signs.to_vec() {
                saw_plus = true;
            } else {
                assert_eq!(x, signs.iter().map(|s| -s).collect::<Vec<_>>());
                saw_minus = true;
            }
        }
        assert!(saw_plus && saw_minus);
    }

    #[test]
    fn orthonormal_draw_single_vector_is_unit() {
        let m = random_orthonormal_k(6, 1, &mut RandomSource::from_seed(5));
        assert!((norm2(&m.col(0)) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn orthonormal_draw_full_basis() {
        let m = random_orthonormal_k(8, 8, &mut RandomSource::from_seed(6));
        let gram = m.transpose().matmul(&m);
        assert!(gram.sub(&Matrix::identity(8)).max_abs() <= 1e-10);
    }

    #[test]
    fn orthonormal_draw_pairwise_orthogonal() {
        let m = random_orthonormal_k(96, 4, &mut RandomSource::from_seed(7));
        for a in 0..4 {
            assert!((norm2(&m.col(a)) - 1.0).abs() <= 1e-10);
            for b in (a + 1)..4 {
                assert!(dot(&m.col(a), &m.col(b)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn mix_seed_separates_tags() {
        let root = RandomSource::from_seed(42);
        let a = root.child(0);
        let b = root.child(1);
        assert_ne!(a.seed(), b.seed());
        assert_eq!(root.child(0).seed(), a.seed());
    }
}
