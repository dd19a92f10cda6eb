//! Response simulation, GLS estimation, and the factorial simulation study
//! comparing design methods.
//!
//! Responses are drawn from the mixed-effects model (one shared random
//! effect per subject plus independent per-experiment errors); estimates
//! come from the stacked GLS system. The study harness sweeps covariate
//! count, experiment count, and random-effect scale, replicating every
//! randomized method with hierarchically derived seeds and recording
//! D-efficiency and first/last-experiment variances next to the cell's
//! closed-form bounds.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::designs::{construct, DesignMethod, DesignRequest};
use crate::model::{
    apply_v_inverse, closed_form_benchmarks, d_efficiency, design_matrix, precision_matrix,
    projection_complement, treatment_variances, AllocationSet, CovariateMatrix, NoiseSpec,
};
use crate::numerics::{solve_spd, Matrix};
use crate::sdp::{mix_seed, RandomSource};

/// Method label used for the per-cell benchmark records emitted by
/// [`run_study`].
pub const BOUND_METHOD: &str = "bound";

/// True parameter values for response simulation.
#[derive(Debug, Clone)]
pub struct ResponseModel {
    /// Treatment effects, one per experiment.
    pub beta: Vec<f64>,
    /// Covariate effects; column j belongs to experiment j.
    pub gamma: Matrix,
    pub noise: NoiseSpec,
    noiseless: bool,
}

impl ResponseModel {
    pub fn new(beta: Vec<f64>, gamma: Matrix, noise: NoiseSpec) -> Result<Self> {
        if beta.len() != noise.k() || gamma.cols() != noise.k() {
            return Err(Error::IncompatibleDimensions(
                "beta/gamma dimensions must match the experiment count".into(),
            ));
        }
        Ok(Self { beta, gamma, noise, noiseless: false })
    }

    /// Exact-zero noise variant: responses become deterministic, which is
    /// the sigma -> 0 limit without degenerate variance parameters.
    pub fn noiseless(beta: Vec<f64>, gamma: Matrix, noise: NoiseSpec) -> Result<Self> {
        let mut m = Self::new(beta, gamma, noise)?;
        m.noiseless = true;
        Ok(m)
    }

    /// All effects zero: the default for design-quality studies, whose
    /// metrics do not depend on the true parameter values.
    pub fn null(noise: NoiseSpec, p: usize) -> Self {
        let k = noise.k();
        Self { beta: vec![0.0; k], gamma: Matrix::zeros(p, k), noise, noiseless: false }
    }
}

/// GLS estimates of the treatment and covariate effects.
#[derive(Debug, Clone)]
pub struct GlsEstimate {
    pub beta_hat: Vec<f64>,
    /// Column j holds the covariate-effect estimates of experiment j.
    pub gamma_hat: Matrix,
}

/// Draw an N-by-p covariate matrix: intercept column of ones, every other
/// entry i.i.d. standard normal. Regenerates on the (measure-zero) rank
/// failure, up to three attempts.
pub fn generate_covariates(n: usize, p: usize, rng: &mut RandomSource) -> Result<CovariateMatrix> {
    if p < 2 || p >= n {
        return Err(Error::Invalid(format!("need 2 <= p < n, got p={p}, n={n}")));
    }
    let mut last = Error::RankDeficient;
    for _ in 0..3 {
        let z = Matrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.standard_normal() });
        match projection_complement(z) {
            Ok(cov) => return Ok(cov),
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Simulate the N-by-K response matrix: entry (i, j) is subject i's response
/// in experiment j, with one random effect per subject shared across
/// experiments and independent per-experiment errors.
pub fn simulate_responses(
    model: &ResponseModel,
    cov: &CovariateMatrix,
    alloc: &AllocationSet,
    rng: &mut RandomSource,
) -> Matrix {
    let (n, k) = (cov.n(), alloc.k());
    assert_eq!(alloc.n(), n, "covariates and allocations disagree on N");
    assert_eq!(model.noise.k(), k, "model and allocations disagree on K");
    assert_eq!(model.gamma.rows(), cov.p(), "gamma rows must match covariate count");

    let tau = model.noise.tau_sq().sqrt();
    let subject_effect: Vec<f64> = if model.noiseless {
        vec![0.0; n]
    } else {
        (0..n).map(|_| tau * rng.standard_normal()).collect()
    };

    let mut y = Matrix::zeros(n, k);
    for j in 0..k {
        let sd = model.noise.sigma_sq()[j].sqrt();
        for i in 0..n {
            let mut v = model.beta[j] * alloc.matrix()[(i, j)] + subject_effect[i];
            for q in 0..cov.p() {
                v += cov.z()[(i, q)] * model.gamma[(q, j)];
            }
            if !model.noiseless {
                v += sd * rng.standard_normal();
            }
            y[(i, j)] = v;
        }
    }
    y
}

/// GLS estimates from observed responses: solve the stacked normal
/// equations `(X' V^-1 X) theta = X' V^-1 Y` with the structured inverse of
/// the response covariance.
pub fn gls_estimate(
    responses: &Matrix,
    cov: &CovariateMatrix,
    alloc: &AllocationSet,
    noise: &NoiseSpec,
) -> Result<GlsEstimate> {
    let (n, k, p) = (cov.n(), alloc.k(), cov.p());
    assert_eq!(responses.rows(), n, "responses must have one row per subject");
    assert_eq!(responses.cols(), k, "responses must have one column per experiment");
    assert_eq!(noise.k(), k, "noise spec and allocations disagree on K");

    // Experiment-major stacking of the responses.
    let y = Matrix::from_fn(n * k, 1, |row, _| responses[(row % n, row / n)]);
    let x = design_matrix(cov, alloc);
    let vinv_x = apply_v_inverse(noise, n, &x);
    let a = x.transpose().matmul(&vinv_x).symmetrized();
    let rhs = vinv_x.transpose().matmul(&y);
    let theta = solve_spd(&a, &rhs).map_err(|_| Error::Singular)?;

    let beta_hat: Vec<f64> = (0..k).map(|j| theta[(j, 0)]).collect();
    let gamma_hat = Matrix::from_fn(p, k, |q, j| theta[(k + j * p + q, 0)]);
    Ok(GlsEstimate { beta_hat, gamma_hat })
}

/// Grid and replication structure of the simulation study.
#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub n: usize,
    pub p_values: Vec<usize>,
    pub k_values: Vec<usize>,
    /// Random-effect scales tau (not squared).
    pub tau_values: Vec<f64>,
    /// Independently drawn covariate matrices per p setting.
    pub covariate_matrices: usize,
    /// Replications per randomized method and cell; deterministic methods
    /// run once.
    pub replications: usize,
    pub methods: Vec<DesignMethod>,
    pub seed: u64,
    /// Per-solve cap passed through to the design methods.
    pub time_limit: Duration,
}

impl Default for SimulationConfig {
    /// The full study grid: 96 subjects, p in {10, 70}, K in {4, 8}, tau in
    /// {0.25, 2}, five covariate matrices, 100 replications.
    fn default() -> Self {
        Self {
            n: 96,
            p_values: vec![10, 70],
            k_values: vec![4, 8],
            tau_values: vec![0.25, 2.0],
            covariate_matrices: 5,
            replications: 100,
            methods: DesignMethod::ALL.to_vec(),
            seed: 0,
            time_limit: Duration::from_secs(50),
        }
    }
}

impl SimulationConfig {
    /// Reduced grid that keeps runtimes desk-friendly: two covariate
    /// matrices and ten replications.
    pub fn desk_scale() -> Self {
        Self { covariate_matrices: 2, replications: 10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Invalid("need at least two subjects".into()));
        }
        if self.p_values.is_empty()
            || self.k_values.is_empty()
            || self.tau_values.is_empty()
            || self.methods.is_empty()
        {
            return Err(Error::Invalid("study grid has an empty dimension".into()));
        }
        if self.covariate_matrices < 1 || self.replications < 1 {
            return Err(Error::Invalid("counts must be at least 1".into()));
        }
        for &p in &self.p_values {
            if p < 2 || p >= self.n {
                return Err(Error::Invalid(format!("need 2 <= p < n, got p={p}")));
            }
        }
        for &k in &self.k_values {
            if k < 1 {
                return Err(Error::Invalid("need at least one experiment".into()));
            }
        }
        for &tau in &self.tau_values {
            if !(tau >= 0.0) || !tau.is_finite() {
                return Err(Error::Invalid(format!("tau must be finite and >= 0, got {tau}")));
            }
        }
        if self.time_limit.is_zero() {
            return Err(Error::Invalid("time limit must be positive".into()));
        }
        Ok(())
    }
}

/// One row of study output: what was run and what it scored, next to the
/// cell's bounds. Failed runs carry an error code instead of metrics.
#[derive(Debug, Clone)]
pub struct ReplicationRecord {
    /// Method name, or [`BOUND_METHOD`] for the per-cell benchmark row.
    pub method: String,
    pub covariate_index: usize,
    pub k: usize,
    pub tau: f64,
    pub p: usize,
    pub replication: usize,
    pub d_eff: f64,
    pub var_first: f64,
    pub var_last: f64,
    /// Measured wall time of the design construction, seconds.
    pub wall_time: f64,
    pub hadamard_upper: f64,
    pub variance_floor: f64,
    pub error: Option<String>,
}

impl ReplicationRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    fn sort_key(&self) -> (String, usize, usize, u64, usize, usize) {
        (self.method.clone(), self.covariate_index, self.k, self.tau.to_bits(), self.p, self.replication)
    }
}

fn method_tag(method: DesignMethod) -> u64 {
    DesignMethod::ALL.iter().position(|m| *m == method).unwrap() as u64
}

/// Run the factorial study. Per-record failures are recorded with an error
/// marker and the study continues; the record list is sorted by its
/// identifiers so collection order never shows.
pub fn run_study(config: &SimulationConfig) -> Result<Vec<ReplicationRecord>> {
    config.validate()?;
    let mut records = Vec::new();

    for &p in &config.p_values {
        for cov_index in 0..config.covariate_matrices {
            let cov_seed = mix_seed(&[config.seed, u64::MAX, p as u64, cov_index as u64]);
            let cov = generate_covariates(config.n, p, &mut RandomSource::from_seed(cov_seed))?;
            for &k in &config.k_values {
                for &tau in &config.tau_values {
                    let noise = NoiseSpec::equal(tau * tau, 1.0, k)?;
                    let bench = closed_form_benchmarks(config.n, k, tau * tau, 1.0);
                    let cell_seed = mix_seed(&[
                        config.seed,
                        cov_index as u64,
                        k as u64,
                        tau.to_bits(),
                        p as u64,
                    ]);

                    for &method in &config.methods {
                        let reps = if method.is_randomized() { config.replications } else { 1 };
                        for replication in 0..reps {
                            let rep_seed = mix_seed(&[
                                cell_seed,
                                method_tag(method),
                                replication as u64,
                            ]);
                            records.push(run_one(
                                &cov,
                                &noise,
                                method,
                                rep_seed,
                                config.time_limit,
                                RecordId { cov_index, k, tau, p, replication },
                                &bench,
                            ));
                        }
                    }

                    records.push(ReplicationRecord {
                        method: BOUND_METHOD.to_string(),
                        covariate_index: cov_index,
                        k,
                        tau,
                        p,
                        replication: 0,
                        d_eff: bench.hadamard_upper,
                        var_first: bench.variance_floor,
                        var_last: bench.variance_floor,
                        wall_time: 0.0,
                        hadamard_upper: bench.hadamard_upper,
                        variance_floor: bench.variance_floor,
                        error: None,
                    });
                }
            }
        }
    }

    records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(records)
}

struct RecordId {
    cov_index: usize,
    k: usize,
    tau: f64,
    p: usize,
    replication: usize,
}

fn run_one(
    cov: &CovariateMatrix,
    noise: &NoiseSpec,
    method: DesignMethod,
    seed: u64,
    time_limit: Duration,
    id: RecordId,
    bench: &crate::model::Benchmarks,
) -> ReplicationRecord {
    let start = Instant::now();
    let req = DesignRequest::new(cov, noise, method, seed).with_time_limit(time_limit);
    let outcome = construct(&req).and_then(|alloc| {
        let prec = precision_matrix(cov, &alloc, noise);
        let d_eff = d_efficiency(&prec);
        let variances = treatment_variances(&prec)?;
        Ok((d_eff, variances))
    });
    let wall_time = start.elapsed().as_secs_f64();

    let mut record = ReplicationRecord {
        method: method.name().to_string(),
        covariate_index: id.cov_index,
        k: id.k,
        tau: id.tau,
        p: id.p,
        replication: id.replication,
        d_eff: f64::NAN,
        var_first: f64::NAN,
        var_last: f64::NAN,
        wall_time,
        hadamard_upper: bench.hadamard_upper,
        variance_floor: bench.variance_floor,
        error: None,
    };
    match outcome {
        Ok((d_eff, variances)) => {
            record.d_eff = d_eff;
            record.var_first = variances[0];
            record.var_last = *variances.last().unwrap();
        }
        Err(e) => record.error = Some(e.code().to_string()),
    }
    record
}

/// Per-(method, cell) summary statistics with gap-to-bound columns.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub method: String,
    pub covariate_index: usize,
    pub k: usize,
    pub tau: f64,
    pub p: usize,
    /// Successful records behind this row.
    pub count: usize,
    pub d_eff_mean: f64,
    pub d_eff_sd: f64,
    pub d_eff_min: f64,
    pub d_eff_max: f64,
    pub var_first_mean: f64,
    pub var_first_sd: f64,
    pub var_first_min: f64,
    pub var_first_max: f64,
    pub var_last_mean: f64,
    pub var_last_sd: f64,
    pub var_last_min: f64,
    pub var_last_max: f64,
    /// `hadamard_upper - mean d_eff`; non-negative when the bound holds.
    pub hadamard_gap: f64,
    /// `mean var_first - variance_floor`.
    pub variance_gap_first: f64,
    /// `mean var_last - variance_floor`.
    pub variance_gap_last: f64,
}

fn stats(values: &[f64]) -> (f64, f64, f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, sd, min, max)
}

/// Aggregate records per (method, cell). Error records are skipped; a group
/// with no successful record is dropped.
pub fn summarize(records: &[ReplicationRecord]) -> Vec<SummaryRow> {
    assert!(!records.is_empty(), "no records to summarize");
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, usize, usize, u64, usize), Vec<&ReplicationRecord>> =
        BTreeMap::new();
    for r in records.iter().filter(|r| r.is_ok()) {
        groups
            .entry((r.method.clone(), r.covariate_index, r.k, r.tau.to_bits(), r.p))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((method, covariate_index, k, tau_bits, p), rs)| {
            let d: Vec<f64> = rs.iter().map(|r| r.d_eff).collect();
            let vf: Vec<f64> = rs.iter().map(|r| r.var_first).collect();
            let vl: Vec<f64> = rs.iter().map(|r| r.var_last).collect();
            let (d_mean, d_sd, d_min, d_max) = stats(&d);
            let (vf_mean, vf_sd, vf_min, vf_max) = stats(&vf);
            let (vl_mean, vl_sd, vl_min, vl_max) = stats(&vl);
            let hadamard = rs[0].hadamard_upper;
            let floor = rs[0].variance_floor;
            SummaryRow {
                method,
                covariate_index,
                k,
                tau: f64::from_bits(tau_bits),
                p,
                count: rs.len(),
                d_eff_mean: d_mean,
                d_eff_sd: d_sd,
                d_eff_min: d_min,
                d_eff_max: d_max,
                var_first_mean: vf_mean,
                var_first_sd: vf_sd,
                var_first_min: vf_min,
                var_first_max: vf_max,
                var_last_mean: vl_mean,
                var_last_sd: vl_sd,
                var_last_min: vl_min,
                var_last_max: vl_max,
                hadamard_gap: hadamard - d_mean,
                variance_gap_first: vf_mean - floor,
                variance_gap_last: vl_mean - floor,
            }
        })
        .collect()
}
