//! Design construction: five methods that produce an [`AllocationSet`] for
//! K experiments over one subject pool.
//!
//! - `rand`: i.i.d. coin flips per subject and experiment.
//! - `pb`: stacked Plackett-Burman orthogonal arrays (covariate-agnostic,
//!   exactly balanced and mutually orthogonal).
//! - `sdr`: one SDP relaxation of `max x' Pz x`, rounded against K random
//!   mutually orthogonal directions.
//! - `greedy-sdp`: sequential maximization of the D-efficiency marginal
//!   gain, each subproblem relaxed to an SDP and rounded randomly.
//! - `greedy-ls`: the same sequence of subproblems solved by deterministic
//!   spectral-initialized best-flip local search.
//!
//! The greedy decomposition rests on the block-determinant identity: with
//! experiments 1..j-1 fixed, `det(P_{1:j}) = det(P_{1:j-1}) * q_j(x_j)`
//! where `q_j` is the quadratic form with matrix
//! `(Q_j/c) Pz - B (P*_{1:j-1})^-1 B'`, so each step maximizes a binary
//! quadratic program over sign vectors.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::{
    model_constants, AllocationSet, CovariateMatrix, ModelConstants, NoiseSpec,
};
use crate::numerics::{chol_psd, eigh_sym, solve_with_chol, Matrix};
use crate::sdp::{
    hyperplane_round, random_orthonormal_k, sample_unit_sphere, solve_diag_sdp, RandomSource,
    SdpProblem,
};

/// Jitter rungs (relative to the matrix scale) tried on the sub-precision
/// matrix before giving up on a greedy step.
const SUB_PRECISION_JITTER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Hard cap on local-search flips, independent of the time limit.
const MAX_FLIPS_PER_SUBPROBLEM: usize = 200_000;

/// The five design construction methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DesignMethod {
    Rand,
    Pb,
    Sdr,
    GreedySdp,
    GreedyLs,
}

impl DesignMethod {
    pub const ALL: [DesignMethod; 5] = [
        DesignMethod::Rand,
        DesignMethod::Pb,
        DesignMethod::Sdr,
        DesignMethod::GreedySdp,
        DesignMethod::GreedyLs,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DesignMethod::Rand => "rand",
            DesignMethod::Pb => "pb",
            DesignMethod::Sdr => "sdr",
            DesignMethod::GreedySdp => "greedy-sdp",
            DesignMethod::GreedyLs => "greedy-ls",
        }
    }

    /// Whether repeated runs with fresh seeds explore different designs.
    pub fn is_randomized(&self) -> bool {
        !matches!(self, DesignMethod::GreedyLs)
    }
}

impl std::str::FromStr for DesignMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rand" => Ok(DesignMethod::Rand),
            "pb" => Ok(DesignMethod::Pb),
            "sdr" => Ok(DesignMethod::Sdr),
            "greedy-sdp" => Ok(DesignMethod::GreedySdp),
            "greedy-ls" => Ok(DesignMethod::GreedyLs),
            other => Err(Error::Invalid(format!(
                "unknown method '{other}' (expected rand|pb|sdr|greedy-sdp|greedy-ls)"
            ))),
        }
    }
}

impl std::fmt::Display for DesignMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a design method needs: the subject pool, the noise levels,
/// the method, and its knobs.
#[derive(Debug, Clone)]
pub struct DesignRequest<'a> {
    pub cov: &'a CovariateMatrix,
    pub noise: &'a NoiseSpec,
    pub method: DesignMethod,
    pub seed: u64,
    /// Wall-clock budget per SDP solve (and per local-search subproblem).
    pub time_limit_per_sdp: Duration,
    /// Rounding draws per greedy-SDP subproblem; the best draw by subproblem
    /// objective is kept. 1 reproduces the plain single-draw procedure.
    pub rounding_draws: usize,
}

impl<'a> DesignRequest<'a> {
    pub fn new(
        cov: &'a CovariateMatrix,
        noise: &'a NoiseSpec,
        method: DesignMethod,
        seed: u64,
    ) -> Self {
        Self {
            cov,
            noise,
            method,
            seed,
            time_limit_per_sdp: Duration::from_secs(50),
            rounding_draws: 1,
        }
    }

    pub fn with_time_limit(mut self, limit: Duration) -> Self {
        self.time_limit_per_sdp = limit;
        self
    }

    pub fn with_rounding_draws(mut self, draws: usize) -> Self {
        self.rounding_draws = draws;
        self
    }
}

/// Run the method named in the request.
pub fn construct(req: &DesignRequest) -> Result<AllocationSet> {
    if req.cov.n() == 0 || req.noise.k() == 0 {
        return Err(Error::Invalid("empty design request".into()));
    }
    match req.method {
        DesignMethod::Rand => rand_allocation(req),
        DesignMethod::Pb => plackett_burman_allocation(req),
        DesignMethod::Sdr => sdr(req),
        DesignMethod::GreedySdp => greedy_sdp(req),
        DesignMethod::GreedyLs => greedy_local_search(req),
    }
}

/// Greedy loop state after experiments `1..=chosen.len()` have been
/// allocated, prepared for one target experiment: the sub-precision matrix
/// of the chosen allocations and the cross-coupling matrix `B` whose column
/// l is `(1/c) R_{l,j} Pz x_l`.
#[derive(Debug, Clone)]
pub struct GreedyState {
    chosen: Vec<Vec<f64>>,
    sub_precision: Option<Matrix>,
    b_matrix: Option<Matrix>,
}

impl GreedyState {
    /// Assemble the state for target experiment `target` (0-based) from the
    /// allocations already chosen for experiments `0..chosen.len()`. A
    /// target of K marks a terminal state: the sub-precision of all chosen
    /// allocations with no coupling matrix.
    pub fn for_target(
        chosen: &[Vec<f64>],
        cov: &CovariateMatrix,
        consts: &ModelConstants,
        target: usize,
    ) -> Self {
        assert!(target >= chosen.len(), "target experiment already allocated");
        assert!(target <= consts.q.len(), "target experiment out of range");
        let j = chosen.len();
        if j == 0 {
            return Self { chosen: Vec::new(), sub_precision: None, b_matrix: None };
        }
        let pz = cov.projector();
        let projected: Vec<Vec<f64>> = chosen.iter().map(|x| pz.matvec(x)).collect();
        let sub = Matrix::from_fn(j, j, |a, b| {
            let coeff = if a == b { consts.q[a] } else { consts.r[(a, b)] };
            coeff * crate::numerics::dot(&chosen[a], &projected[b]) / consts.c
        })
        .symmetrized();
        let b_matrix = (target < consts.q.len()).then(|| {
            Matrix::from_fn(cov.n(), j, |i, l| consts.r[(l, target)] * projected[l][i] / consts.c)
        });
        Self { chosen: chosen.to_vec(), sub_precision: Some(sub), b_matrix }
    }

    /// Number of experiments already allocated.
    pub fn len(&self) -> usize {
        self.chosen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chosen.is_empty()
    }

    pub fn sub_precision(&self) -> Option<&Matrix> {
        self.sub_precision.as_ref()
    }
}

/// Cost matrix of the greedy subproblem for experiment `j` (0-based):
/// `(Q_j/c) Pz - B (P*)^-1 B'`, or just `(Q_j/c) Pz` when no experiment has
/// been allocated yet. The result is symmetric PSD up to round-off.
pub fn subproblem_matrix(
    state: &GreedyState,
    cov: &CovariateMatrix,
    consts: &ModelConstants,
    j: usize,
) -> Result<SdpProblem> {
    let base = cov.projector().scale(consts.q[j] / consts.c);
    let Some(sub) = &state.sub_precision else {
        return SdpProblem::new(base);
    };
    let b = state
        .b_matrix
        .as_ref()
        .ok_or_else(|| Error::Invalid("greedy state was built without a target experiment".into()))?;

    let scale = sub.max_abs();
    for rung in SUB_PRECISION_JITTER {
        match chol_psd(sub, rung * scale) {
            Ok(l) => {
                let solved = solve_with_chol(&l, &b.transpose());
                let cost = base.sub(&b.matmul(&solved)).symmetrized();
                return SdpProblem::new(cost);
            }
            Err(_) => continue,
        }
    }
    Err(Error::SingularSubPrecision)
}

/// Deterministic maximizer of `x' C x` over sign vectors: start from the
/// signs of the leading eigenvector (zeros count as +1), then repeatedly
/// take the single flip with the largest gain, lowest index first on ties,
/// until no flip improves or the deadline passes (best iterate returned).
pub fn max_quadratic_local_search(c: &Matrix, time_limit: Duration) -> Result<Vec<f64>> {
    let n = c.rows();
    let (_, vecs) = eigh_sym(c)?;
    let lead = vecs.col(0);
    let mut x: Vec<f64> = lead.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect();
    let mut g = c.matvec(&x);
    let tol = 1e-12 * (1.0 + c.max_abs());
    let deadline = Instant::now() + time_limit;

    for _ in 0..MAX_FLIPS_PER_SUBPROBLEM {
        // Gain of flipping coordinate i: 4 (c_ii - x_i g_i).
        let mut best_gain = tol;
        let mut best_i = None;
        for i in 0..n {
            let gain = 4.0 * (c[(i, i)] - x[i] * g[i]);
            if gain > best_gain {
                best_gain = gain;
                best_i = Some(i);
            }
        }
        let Some(i) = best_i else { break };
        for a in 0..n {
            g[a] -= 2.0 * x[i] * c[(a, i)];
        }
        x[i] = -x[i];
        if Instant::now() >= deadline {
            break;
        }
    }
    Ok(x)
}

fn check_method(req: &DesignRequest, expected: DesignMethod) -> Result<()> {
    if req.method != expected {
        return Err(Error::Invalid(format!(
            "request method is {}, expected {}",
            req.method, expected
        )));
    }
    Ok(())
}

fn greedy(req: &DesignRequest, randomized: bool) -> Result<AllocationSet> {
    let consts = model_constants(req.noise);
    let k = req.noise.k();
    let root = RandomSource::from_seed(req.seed);
    let mut chosen: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let state = GreedyState::for_target(&chosen, req.cov, &consts, j);
        let prob = subproblem_matrix(&state, req.cov, &consts, j)?;
        let x = if randomized {
            let mut solver_rng = root.child(2 * j as u64);
            let sol = solve_diag_sdp(&prob, &mut solver_rng, req.time_limit_per_sdp)?;
            let mut round_rng = root.child(2 * j as u64 + 1);
            let mut best: Option<(f64, Vec<f64>)> = None;
            for _ in 0..req.rounding_draws.max(1) {
                let v = sample_unit_sphere(sol.factor.cols(), &mut round_rng);
                let cand = hyperplane_round(&sol, &v);
                let score = prob.cost().quadratic_form(&cand);
                if best.as_ref().map_or(true, |(s, _)| score > *s) {
                    best = Some((score, cand));
                }
            }
            best.expect("at least one rounding draw").1
        } else {
            max_quadratic_local_search(prob.cost(), req.time_limit_per_sdp)?
        };
        chosen.push(x);
    }
    AllocationSet::from_columns(&chosen)
}

/// Greedy design with each subproblem solved by SDP relaxation and
/// hyperplane rounding. The rounding directions of different experiments
/// are drawn independently.
pub fn greedy_sdp(req: &DesignRequest) -> Result<AllocationSet> {
    check_method(req, DesignMethod::GreedySdp)?;
    greedy(req, true)
}

/// Greedy design with each subproblem solved by deterministic local search;
/// bit-for-bit reproducible for identical requests.
pub fn greedy_local_search(req: &DesignRequest) -> Result<AllocationSet> {
    check_method(req, DesignMethod::GreedyLs)?;
    greedy(req, false)
}

/// Single-SDP randomized design: relax `max x' Pz x` once, then round the
/// one factor against K mutually orthogonal random directions, one per
/// experiment.
pub fn sdr(req: &DesignRequest) -> Result<AllocationSet> {
    check_method(req, DesignMethod::Sdr)?;
    let (n, k) = (req.cov.n(), req.noise.k());
    if k > n {
        return Err(Error::IncompatibleDimensions(format!(
            "sdr needs K <= N, got K={k}, N={n}"
        )));
    }
    let prob = SdpProblem::new(req.cov.projector().clone())?;
    let root = RandomSource::from_seed(req.seed);
    let mut solver_rng = root.child(0);
    let mut sol = solve_diag_sdp(&prob, &mut solver_rng, req.time_limit_per_sdp)?;

    // Orthogonal directions live in the factor's column space; pad with
    // zero columns when K exceeds the rank budget.
    let r = sol.factor.cols();
    let dim = r.max(k);
    if dim > r {
        let old = sol.factor;
        sol.factor = Matrix::from_fn(n, dim, |i, j| if j < r { old[(i, j)] } else { 0.0 });
    }
    let mut vec_rng = root.child(1);
    let directions = random_orthonormal_k(dim, k, &mut vec_rng);
    let cols: Vec<Vec<f64>> =
        (0..k).map(|j| hyperplane_round(&sol, &directions.col(j))).collect();
    AllocationSet::from_columns(&cols)
}

/// Fully random allocation: every entry an independent fair coin.
pub fn rand_allocation(req: &DesignRequest) -> Result<AllocationSet> {
    check_method(req, DesignMethod::Rand)?;
    let (n, k) = (req.cov.n(), req.noise.k());
    let mut rng = RandomSource::from_seed(req.seed);
    let cols: Vec<Vec<f64>> =
        (0..k).map(|_| (0..n).map(|_| rng.sign()).collect()).collect();
    AllocationSet::from_columns(&cols)
}

/// Order-8 Sylvester-Hadamard matrix entry (+1/-1) at `(row, col)`.
fn hadamard8(row: usize, col: usize) -> i32 {
    if (row & col).count_ones() % 2 == 0 {
        1
    } else {
        -1
    }
}

/// The 12-run Plackett-Burman generator row (the 1946 construction).
const PB12_GENERATOR: [i32; 11] = [1, 1, -1, 1, 1, 1, -1, -1, -1, 1, -1];

/// Stacked Plackett-Burman design: K <= 7 uses the 8-run base (order-8
/// Hadamard matrix without its all-ones column), 8 <= K <= 11 the 12-run
/// base (cycled generator row plus an all-minus row). The base is stacked
/// to N rows and subjects are randomly assigned to rows; exact balance and
/// mutual orthogonality of the columns survive both steps.
pub fn plackett_burman_allocation(req: &DesignRequest) -> Result<AllocationSet> {
    check_method(req, DesignMethod::Pb)?;
    let (n, k) = (req.cov.n(), req.noise.k());
    let base: Vec<Vec<i32>> = if k <= 7 {
        if n % 8 != 0 {
            return Err(Error::IncompatibleDimensions(format!(
                "the 8-run base design needs N divisible by 8, got N={n}"
            )));
        }
        // Column 0 of the Hadamard matrix is all ones; skip it.
        (0..8).map(|row| (1..=k).map(|col| hadamard8(row, col)).collect()).collect()
    } else if k <= 11 {
        if n % 12 != 0 {
            return Err(Error::IncompatibleDimensions(format!(
                "the 12-run base design needs N divisible by 12, got N={n}"
            )));
        }
        let mut rows: Vec<Vec<i32>> = (0..11)
            .map(|row| (0..k).map(|col| PB12_GENERATOR[(row + col) % 11]).collect())
            .collect();
        rows.push(vec![-1; k]);
        rows
    } else {
        return Err(Error::IncompatibleDimensions(format!(
            "Plackett-Burman bases here support at most 11 experiments, got K={k}"
        )));
    };

    let runs = base.len();
    let mut stacked: Vec<&Vec<i32>> = Vec::with_capacity(n);
    for copy in 0..(n / runs) {
        let _ = copy;
        stacked.extend(base.iter());
    }
    let mut rng = RandomSource::from_seed(req.seed);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);

    let matrix = Matrix::from_fn(n, k, |i, j| stacked[order[i]][j] as f64);
    AllocationSet::new(matrix)
}
