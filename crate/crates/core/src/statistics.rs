//! Ensembles of commutator functionals and the estimators built on them.

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::coefficient_map::{derivative_field, evaluate_coefficient, CoefficientMap, MapSpec};
use crate::commutator::{ScalingFunctions, TestFunction};
use crate::corrector::{
    ensemble_homogenized, least_squares, solve_corrector_with, CorrectorSolution, HomogenizedEstimate,
    SolverOptions, DEFAULT_TOLERANCE,
};
use crate::error::{Error, Result};
use crate::fft::Spectral;
use crate::gaussian_field::{sample_field_with, CovarianceModel, FieldSample, Regime};
use crate::grid::LatticeGrid;
use crate::parallel::ordered_map;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Matrix subtracted inside the commutator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbarMode {
    /// Each sample's own cell average; the commutator is exactly mean-zero.
    #[default]
    PerSample,
    /// Ensemble mean of the cell averages, shared by all samples.
    EnsembleMean,
}

fn default_decay_constant() -> f64 {
    20.0
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub dim: usize,
    pub beta: f64,
    #[serde(default = "default_decay_constant")]
    pub decay_constant: f64,
    pub map: MapSpec,
    pub side: usize,
    pub epsilons: Vec<f64>,
    pub test_functions: Vec<TestFunction>,
    pub samples: usize,
    pub seed: u64,
    /// Shift `z` added to the field before applying the map.
    #[serde(default)]
    pub shift: Vec<f64>,
    #[serde(default)]
    pub abar_mode: AbarMode,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

impl EnsembleConfig {
    pub fn grid(&self) -> Result<LatticeGrid> {
        LatticeGrid::new(self.dim, self.side)
    }

    pub fn build_map(&self) -> Result<Box<dyn CoefficientMap>> {
        self.map.build(self.dim)
    }

    pub fn build_model(&self) -> Result<CovarianceModel> {
        let kappa = self.build_map()?.kappa();
        CovarianceModel::build(self.beta, kappa, self.decay_constant, self.grid()?)
    }

    pub fn shift_vector(&self, kappa: usize) -> Vec<f64> {
        if self.shift.is_empty() {
            vec![0.0; kappa]
        } else {
            self.shift.clone()
        }
    }

    /// Checks everything that can be checked without sampling.
    pub fn validate(&self) -> Result<()> {
        let grid = self.grid().map_err(|e| Error::Config(e.to_string()))?;
        let map = self.build_map().map_err(|e| Error::Config(e.to_string()))?;
        if !self.shift.is_empty() && self.shift.len() != map.kappa() {
            return Err(Error::Config(format!(
                "shift has {} entries, map expects {}",
                self.shift.len(),
                map.kappa()
            )));
        }
        if self.samples < 2 {
            return Err(Error::Config("need at least 2 samples".into()));
        }
        if !(self.tolerance > 0.0 && self.tolerance <= 1e-6) {
            return Err(Error::Config("tolerance must lie in (0, 1e-6]".into()));
        }
        ScalingFunctions::new(self.dim, self.beta).map_err(|e| Error::Config(e.to_string()))?;
        if self.test_functions.is_empty() || self.epsilons.is_empty() {
            return Err(Error::Config("need at least one epsilon and one test function".into()));
        }
        for (k, f) in self.test_functions.iter().enumerate() {
            TestFunction::new(f.id.clone(), f.center_offset.clone(), f.radius, f.weights.clone())
                .map_err(|e| Error::Config(format!("test function {}: {e}", f.id)))?;
            if self.test_functions[..k].iter().any(|g| g.id == f.id) {
                return Err(Error::Config(format!("duplicate test function id {}", f.id)));
            }
            for &eps in &self.epsilons {
                f.quadrature(grid, eps)
                    .map_err(|e| Error::Config(format!("test function {}: {e}", f.id)))?;
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// `A_ij = sum_x w(x) [a(grad phi_i + e_i)]_j` and
/// `B_ik = sum_x w(x) (grad phi_i + e_i)_k` for one `(eps, F)` pair, where
/// `w` are the test-function quadrature weights. Then
/// `int F : Xi = sum_ij W_ij (A_ij - sum_k abar_jk B_ik)` for any `abar`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSums {
    pub flux: Vec<f64>,
    pub gradient: Vec<f64>,
}

impl FunctionalSums {
    fn evaluate(&self, weights: &[f64], abar: &[f64], d: usize) -> f64 {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                let w = weights[i * d + j];
                if w == 0.0 {
                    continue;
                }
                let mut xi = self.flux[i * d + j];
                for k in 0..d {
                    xi -= abar[j * d + k] * self.gradient[i * d + k];
                }
                s += w * xi;
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_index: u64,
    pub abar_per: Vec<f64>,
    /// Indexed `[eps][F]`, flattened eps-major.
    pub functionals: Vec<FunctionalSums>,
    /// Torus average of `(grad phi*_j + e_j) . d_l a0 (grad phi_i + e_i)`,
    /// layout `[l][i][j]`.
    pub k_local: Vec<f64>,
    pub mean_phi_squared: f64,
    pub iterations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedSample {
    pub sample_index: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalTable {
    pub epsilon: f64,
    pub f_id: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub variance_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KTensor {
    pub kappa: usize,
    pub dim: usize,
    /// Layout `[l][i][j]`.
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl KTensor {
    pub fn value(&self, l: usize, i: usize, j: usize) -> f64 {
        self.values[(l * self.dim + i) * self.dim + j]
    }

    pub fn error(&self, l: usize, i: usize, j: usize) -> f64 {
        self.stderr[(l * self.dim + i) * self.dim + j]
    }

    pub fn from_records(records: &[SampleRecord], kappa: usize, dim: usize) -> Result<Self> {
        let len = kappa * dim * dim;
        let m = records.len();
        if m < 2 {
            return Err(Error::InsufficientData("K estimate needs at least 2 samples".into()));
        }
        let mut values = vec![0.0; len];
        let mut stderr = vec![0.0; len];
        for e in 0..len {
            let xs: Vec<f64> = records.iter().map(|r| r.k_local[e]).collect();
            let (mean, var) = mean_variance(&xs);
            values[e] = mean;
            stderr[e] = (var / m as f64).sqrt();
        }
        Ok(Self {
            kappa,
            dim,
            values,
            stderr,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub schema_version: u32,
    pub config: EnsembleConfig,
    pub config_hash: String,
    pub homogenized: HomogenizedEstimate,
    pub abar_used: Option<Vec<f64>>,
    pub records: Vec<SampleRecord>,
    pub failures: Vec<FailedSample>,
    pub tables: Vec<FunctionalTable>,
    pub k_tensor: KTensor,
}

impl EnsembleReport {
    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn table(&self, eps_index: usize, f_index: usize) -> &FunctionalTable {
        &self.tables[eps_index * self.config.test_functions.len() + f_index]
    }

    pub fn f_index(&self, id: &str) -> Option<usize> {
        self.config.test_functions.iter().position(|f| f.id == id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "beta,d,N,epsilon,F_id,sample_index,I_value")?;
        for t in &self.tables {
            for (r, v) in self.records.iter().zip(&t.values) {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{:e}",
                    self.config.beta, self.config.dim, self.config.side, t.epsilon, t.f_id, r.sample_index, v
                )?;
            }
        }
        Ok(())
    }
}

fn mean_variance(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        f64::NAN
    };
    (mean, var)
}

/// Unbiased sample covariance.
pub fn sample_covariance(xs: &[f64], ys: &[f64]) -> f64 {
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (m - 1.0)
}

/// Jackknife estimate and standard error. `stat(None)` evaluates on all `m`
/// samples, `stat(Some(k))` with sample `k` left out.
pub fn jackknife(m: usize, stat: impl Fn(Option<usize>) -> f64) -> (f64, f64) {
    let full = stat(None);
    if m < 2 {
        return (full, f64::NAN);
    }
    let loo: Vec<f64> = (0..m).map(|k| stat(Some(k))).collect();
    let mean = loo.iter().sum::<f64>() / m as f64;
    let var = loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>() * (m as f64 - 1.0) / m as f64;
    (full, var.sqrt())
}

fn leave_out(xs: &[f64], k: Option<usize>) -> Vec<f64> {
    match k {
        None => xs.to_vec(),
        Some(k) => xs.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, v)| *v).collect(),
    }
}

/// Jackknifed unbiased variance.
pub fn variance_with_error(xs: &[f64]) -> (f64, f64) {
    jackknife(xs.len(), |k| mean_variance(&leave_out(xs, k)).1)
}

/// Jackknifed unbiased covariance.
pub fn covariance_with_error(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    jackknife(xs.len(), |k| sample_covariance(&leave_out(xs, k), &leave_out(ys, k)))
}

struct SampleContext<'a> {
    config: &'a EnsembleConfig,
    map: &'a dyn CoefficientMap,
    model: &'a CovarianceModel,
    spectral: &'a Spectral,
    quadratures: Vec<Vec<(usize, f64)>>,
    solver: SolverOptions,
}

impl SampleContext<'_> {
    fn run(&self, sample_index: u64) -> Result<SampleRecord> {
        let g = sample_field_with(self.model, self.spectral, self.config.seed, sample_index);
        self.run_on(&g, &self.config.shift_vector(self.map.kappa()))
    }

    fn run_on(&self, g: &FieldSample, shift: &[f64]) -> Result<SampleRecord> {
        let d = self.config.dim;
        let coeff = evaluate_coefficient(self.map, g, shift)?;
        let sol = solve_corrector_with(&coeff, &self.solver, self.spectral)?;
        let adjoint = if coeff.symmetric {
            None
        } else {
            Some(solve_corrector_with(&coeff.transposed(), &self.solver, self.spectral)?)
        };
        let functionals = self
            .quadratures
            .iter()
            .map(|quad| functional_sums(&coeff.values, &sol, quad, d))
            .collect();
        let k_local = local_k(self.map, g, shift, &sol, adjoint.as_ref().unwrap_or(&sol));
        Ok(SampleRecord {
            sample_index: g.sample_index,
            abar_per: sol.abar_per.clone(),
            functionals,
            k_local,
            mean_phi_squared: sol.mean_phi_squared(),
            iterations: sol.iterations.clone(),
        })
    }
}

fn functional_sums(a: &[f64], sol: &CorrectorSolution, quad: &[(usize, f64)], d: usize) -> FunctionalSums {
    let mut flux = vec![0.0; d * d];
    let mut gradient = vec![0.0; d * d];
    let mut e = vec![0.0; d];
    for &(site, w) in quad {
        let am = &a[site * d * d..(site + 1) * d * d];
        for i in 0..d {
            for (k, v) in e.iter_mut().enumerate() {
                *v = sol.corrected_gradient(i, site, k);
                gradient[i * d + k] += w * *v;
            }
            for j in 0..d {
                flux[i * d + j] += w * (0..d).map(|k| am[j * d + k] * e[k]).sum::<f64>();
            }
        }
    }
    FunctionalSums { flux, gradient }
}

fn local_k(
    map: &dyn CoefficientMap,
    g: &FieldSample,
    shift: &[f64],
    sol: &CorrectorSolution,
    adjoint: &CorrectorSolution,
) -> Vec<f64> {
    let d = map.dim();
    let kappa = map.kappa();
    let n = g.grid.len();
    let mut out = vec![0.0; kappa * d * d];
    for l in 0..kappa {
        let da = derivative_field(map, g, shift, l);
        for site in 0..n {
            let m = &da[site * d * d..(site + 1) * d * d];
            for i in 0..d {
                for j in 0..d {
                    let mut s = 0.0;
                    for a in 0..d {
                        let left = adjoint.corrected_gradient(j, site, a);
                        for b in 0..d {
                            s += left * m[a * d + b] * sol.corrected_gradient(i, site, b);
                        }
                    }
                    out[(l * d + i) * d + j] += s;
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

/// Sample fields, solve correctors, and evaluate every `(eps, F)` functional.
/// Sample `m` uses the stream `(seed, m)`, so results do not depend on
/// `workers`.
pub fn run_ensemble(config: &EnsembleConfig, workers: usize) -> Result<EnsembleReport> {
    config.validate()?;
    let grid = config.grid()?;
    let map = config.build_map()?;
    let model = config.build_model()?;
    let spectral = Spectral::new(grid);
    let mut quadratures = Vec::new();
    for &eps in &config.epsilons {
        for f in &config.test_functions {
            quadratures.push(f.quadrature(grid, eps)?);
        }
    }
    let ctx = SampleContext {
        config,
        map: map.as_ref(),
        model: &model,
        spectral: &spectral,
        quadratures,
        solver: SolverOptions::with_tolerance(config.tolerance),
    };
    let outcomes = ordered_map(workers, config.samples, |m| ctx.run(m as u64))?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (m, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => failures.push(FailedSample {
                sample_index: m as u64,
                message: e.to_string(),
            }),
        }
    }
    if failures.len() * 100 > config.samples {
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total: config.samples,
        });
    }
    build_report(config, map.as_ref(), records, failures)
}

fn build_report(
    config: &EnsembleConfig,
    map: &dyn CoefficientMap,
    records: Vec<SampleRecord>,
    failures: Vec<FailedSample>,
) -> Result<EnsembleReport> {
    let d = config.dim;
    let scaling = ScalingFunctions::new(d, config.beta)?;
    let abars: Vec<Vec<f64>> = records.iter().map(|r| r.abar_per.clone()).collect();
    let homogenized = ensemble_homogenized(&abars)?;
    let abar_used = match config.abar_mode {
        AbarMode::PerSample => None,
        AbarMode::EnsembleMean => Some(homogenized.mean.clone()),
    };
    let nf = config.test_functions.len();
    let mut tables = Vec::new();
    for (e, &eps) in config.epsilons.iter().enumerate() {
        let root = scaling.pi(1.0 / eps).sqrt();
        for (fi, f) in config.test_functions.iter().enumerate() {
            let values: Vec<f64> = records
                .iter()
                .map(|r| {
                    let abar = abar_used.as_deref().unwrap_or(&r.abar_per);
                    root * r.functionals[e * nf + fi].evaluate(&f.weights, abar, d)
                })
                .collect();
            let (mean, _) = mean_variance(&values);
            let (variance, variance_stderr) = variance_with_error(&values);
            tables.push(FunctionalTable {
                epsilon: eps,
                f_id: f.id.clone(),
                values,
                mean,
                variance,
                variance_stderr,
            });
        }
    }
    let k_tensor = KTensor::from_records(&records, map.kappa(), d)?;
    Ok(EnsembleReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        config_hash: config.hash(),
        homogenized,
        abar_used,
        records,
        failures,
        tables,
        k_tensor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// All variances vanish.
    Degenerate,
    /// Reported without assertion.
    LowPower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub epsilon: f64,
    /// `Var[int F : Xi(./eps)]`.
    pub variance: f64,
    pub variance_stderr: f64,
    /// `Var[I_eps(F)]`.
    pub normalized_variance: f64,
    pub normalized_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub f_id: String,
    pub rows: Vec<ScalingRow>,
    pub slope: f64,
    pub slope_stderr: f64,
    pub expected_slope: f64,
    pub log_corrected: bool,
    pub tolerance: f64,
    pub verdict: Verdict,
}

/// Least-squares slope of `log Var[int F : Xi(./eps)]` against `log(1/eps)`
/// (divided by `log(2 + 1/eps)` first at `beta = d`), compared with
/// `-min(beta, d)`.
pub fn variance_scaling_fit(report: &EnsembleReport, f_index: usize, tolerance: f64) -> Result<ScalingFit> {
    let cfg = &report.config;
    let ne = cfg.epsilons.len();
    if ne < 3 {
        return Err(Error::InsufficientData("scaling fit needs at least 3 epsilons".into()));
    }
    let scaling = ScalingFunctions::new(cfg.dim, cfg.beta)?;
    let critical = Regime::classify(cfg.dim, cfg.beta) == Regime::Critical;
    let expected_slope = -cfg.beta.min(cfg.dim as f64);
    let m = report.records.len();
    let mut rows = Vec::new();
    for (e, &eps) in cfg.epsilons.iter().enumerate() {
        let t = report.table(e, f_index);
        let pi = scaling.pi(1.0 / eps);
        rows.push(ScalingRow {
            epsilon: eps,
            variance: t.variance / pi,
            variance_stderr: t.variance_stderr / pi,
            normalized_variance: t.variance,
            normalized_stderr: t.variance_stderr,
        });
    }
    let f_id = cfg.test_functions[f_index].id.clone();
    if rows.iter().all(|r| r.variance == 0.0) {
        return Ok(ScalingFit {
            f_id,
            rows,
            slope: f64::NAN,
            slope_stderr: f64::NAN,
            expected_slope,
            log_corrected: critical,
            tolerance,
            verdict: Verdict::Degenerate,
        });
    }
    let xs: Vec<f64> = cfg.epsilons.iter().map(|e| (1.0 / e).ln()).collect();
    let values: Vec<Vec<f64>> = (0..ne).map(|e| report.table(e, f_index).values.clone()).collect();
    let slope_of = |k: Option<usize>| {
        let ys: Vec<f64> = (0..ne)
            .map(|e| {
                let pi = scaling.pi(1.0 / cfg.epsilons[e]);
                let mut v = mean_variance(&leave_out(&values[e], k)).1 / pi;
                if critical {
                    v /= (2.0 + 1.0 / cfg.epsilons[e]).ln();
                }
                v.ln()
            })
            .collect();
        least_squares(&xs, &ys).0
    };
    let (slope, slope_stderr) = jackknife(m, slope_of);
    let verdict = if (slope - expected_slope).abs() <= tolerance {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(ScalingFit {
        f_id,
        rows,
        slope,
        slope_stderr,
        expected_slope,
        log_corrected: critical,
        tolerance,
        verdict,
    })
}

/// `K^l_ij` by Monte Carlo over an ensemble.
pub fn estimate_k_tensor(config: &EnsembleConfig, workers: usize) -> Result<KTensor> {
    Ok(run_ensemble(config, workers)?.k_tensor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceRow {
    pub epsilon: f64,
    pub empirical: f64,
    pub empirical_stderr: f64,
    pub prediction: Option<f64>,
    pub ratio: Option<f64>,
    pub ratio_stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceCheck {
    pub regime: Regime,
    pub f_id: String,
    pub g_id: String,
    pub rows: Vec<CovarianceRow>,
    pub verdict: Verdict,
}

/// Compare `Cov[I_eps(F), I_eps(G)]` with the regime's limit.
///
/// * `beta > d`: plateau of the covariance between the two smallest `eps`
///   (within combined 3 sigma).
/// * `beta = d`: reports `pi(1/eps) sum_x w_F w_G (W_F:K^l)(W_G:K^m) sum_{|z|<1/eps} c_lm(z)`;
///   verdict `LowPower`.
/// * `beta < d`: ratio to `pi(1/eps) sum_{x,y} w_F(x) w_G(y) (W_F:K^l)(W_G:K^m) c_lm(x - y)`
///   with the model's lattice covariance; passes if every ratio is within 3
///   jackknife standard errors of 1.
///
/// Under [`AbarMode::PerSample`] the covariance is centered by its torus mean.
pub fn covariance_structure_check(report: &EnsembleReport, f_index: usize, g_index: usize) -> Result<CovarianceCheck> {
    let cfg = &report.config;
    let d = cfg.dim;
    let regime = Regime::classify(d, cfg.beta);
    let f = &cfg.test_functions[f_index];
    let g = &cfg.test_functions[g_index];
    let m = report.records.len();
    let kappa = report.k_tensor.kappa;
    // K per sample contracted with the weights: kf[l][sample].
    let contract = |w: &[f64], l: usize, r: &SampleRecord| -> f64 {
        (0..d * d).map(|e| w[e] * r.k_local[l * d * d + e]).sum()
    };
    let kf: Vec<Vec<f64>> = (0..kappa).map(|l| report.records.iter().map(|r| contract(&f.weights, l, r)).collect()).collect();
    let kg: Vec<Vec<f64>> = (0..kappa).map(|l| report.records.iter().map(|r| contract(&g.weights, l, r)).collect()).collect();
    let constant = report.records.iter().all(|r| r.k_local.iter().all(|v| *v == 0.0));

    let model = cfg.build_model()?;
    let grid = model.grid();
    let scaling = ScalingFunctions::new(d, cfg.beta)?;
    // Per-sample abar removes the torus average of the fluctuation, which
    // centers the covariance: c(x - y) - mean(c).
    let centering: Vec<f64> = (0..kappa * kappa)
        .map(|e| match cfg.abar_mode {
            AbarMode::PerSample => {
                let c = model.covariance_component(e / kappa, e % kappa);
                c.iter().sum::<f64>() / c.len() as f64
            }
            AbarMode::EnsembleMean => 0.0,
        })
        .collect();
    let mut rows = Vec::new();
    for (e, &eps) in cfg.epsilons.iter().enumerate() {
        let x = &report.table(e, f_index).values;
        let y = &report.table(e, g_index).values;
        let (empirical, empirical_stderr) = covariance_with_error(x, y);
        if regime == Regime::Integrable {
            rows.push(CovarianceRow {
                epsilon: eps,
                empirical,
                empirical_stderr,
                prediction: None,
                ratio: None,
                ratio_stderr: None,
            });
            continue;
        }
        let pi = scaling.pi(1.0 / eps);
        let qf = f.quadrature(grid, eps)?;
        let qg = g.quadrature(grid, eps)?;
        // kernel[l][m] such that prediction = sum_lm Kf_l Kg_m kernel_lm.
        let mut kernel = vec![0.0; kappa * kappa];
        let mut coords_a = vec![0usize; d];
        let mut coords_b = vec![0usize; d];
        let mut lag = vec![0i64; d];
        if regime == Regime::NonIntegrable {
            for &(sa, wa) in &qf {
                grid.coords(sa, &mut coords_a);
                for &(sb, wb) in &qg {
                    grid.coords(sb, &mut coords_b);
                    for a in 0..d {
                        lag[a] = coords_a[a] as i64 - coords_b[a] as i64;
                    }
                    for l in 0..kappa {
                        for mm in 0..kappa {
                            kernel[l * kappa + mm] += wa * wb * (model.covariance_at(&lag, l, mm) - centering[l * kappa + mm]);
                        }
                    }
                }
            }
        } else {
            let overlap: f64 = {
                let map: std::collections::HashMap<usize, f64> = qg.iter().cloned().collect();
                qf.iter().map(|(s, w)| w * map.get(s).copied().unwrap_or(0.0)).sum()
            };
            let radius = 1.0 / eps;
            for site in 0..grid.len() {
                if grid.min_image_norm(site) < radius {
                    for l in 0..kappa {
                        for mm in 0..kappa {
                            kernel[l * kappa + mm] += model.covariance(site, l, mm) - centering[l * kappa + mm];
                        }
                    }
                }
            }
            kernel.iter_mut().for_each(|v| *v *= overlap);
        }
        kernel.iter_mut().for_each(|v| *v *= pi);
        let prediction_of = |k: Option<usize>| -> f64 {
            let mut p = 0.0;
            for l in 0..kappa {
                let a = mean_variance(&leave_out(&kf[l], k)).0;
                for mm in 0..kappa {
                    let b = mean_variance(&leave_out(&kg[mm], k)).0;
                    p += a * b * kernel[l * kappa + mm];
                }
            }
            p
        };
        let prediction = prediction_of(None);
        if !constant {
            for l in 0..kappa {
                for (name, k) in [(&f.id, &kf[l]), (&g.id, &kg[l])] {
                    let (mean, var) = mean_variance(k);
                    let rel = (var / m as f64).sqrt() / mean.abs();
                    if !(rel <= 0.3) {
                        return Err(Error::TooNoisy(format!(
                            "K contracted with {name} has relative error {rel:.3}"
                        )));
                    }
                }
            }
        }
        let (ratio, ratio_stderr) = if prediction != 0.0 {
            let (r, se) = jackknife(m, |k| {
                sample_covariance(&leave_out(x, k), &leave_out(y, k)) / prediction_of(k)
            });
            (Some(r), Some(se))
        } else {
            (None, None)
        };
        rows.push(CovarianceRow {
            epsilon: eps,
            empirical,
            empirical_stderr,
            prediction: Some(prediction),
            ratio,
            ratio_stderr,
        });
    }
    let verdict = if constant && rows.iter().all(|r| r.empirical == 0.0) {
        Verdict::Degenerate
    } else {
        match regime {
            Regime::Integrable => {
                if rows.len() < 2 {
                    return Err(Error::InsufficientData("plateau check needs at least 2 epsilons".into()));
                }
                let mut sorted: Vec<&CovarianceRow> = rows.iter().collect();
                sorted.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
                let (a, b) = (sorted[0], sorted[1]);
                let combined = (a.empirical_stderr.powi(2) + b.empirical_stderr.powi(2)).sqrt();
                if (a.empirical - b.empirical).abs() <= 3.0 * combined {
                    Verdict::Pass
                } else {
                    Verdict::Fail
                }
            }
            Regime::Critical => Verdict::LowPower,
            Regime::NonIntegrable => {
                let ok = rows.iter().all(|r| match (r.ratio, r.ratio_stderr) {
                    (Some(q), Some(se)) => (q - 1.0).abs() <= 3.0 * se,
                    _ => false,
                });
                if ok {
                    Verdict::Pass
                } else {
                    Verdict::Fail
                }
            }
        }
    };
    Ok(CovarianceCheck {
        regime,
        f_id: f.id.clone(),
        g_id: g.id.clone(),
        rows,
        verdict,
    })
}

pub const MIN_NORMALITY_SAMPLES: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityDistances {
    pub samples: usize,
    /// 1-Wasserstein distance of the standardized sample to `N(0,1)`.
    pub wasserstein1: f64,
    /// Kolmogorov-Smirnov statistic.
    pub kolmogorov_smirnov: f64,
    pub total_variation: String,
}

/// Standardize by the sample mean and standard deviation, then compute the
/// exact `W_1` (quantile coupling, closed-form Gaussian integrals) and the KS
/// statistic against the standard normal.
pub fn normality_distances(values: &[f64]) -> Result<NormalityDistances> {
    let m = values.len();
    if m < MIN_NORMALITY_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "normality distances need at least {MIN_NORMALITY_SAMPLES} samples, got {m}"
        )));
    }
    let (mean, var) = mean_variance(values);
    if !(var > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let sd = var.sqrt();
    let mut z: Vec<f64> = values.iter().map(|v| (v - mean) / sd).collect();
    z.sort_by(|a, b| a.total_cmp(b));
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let n = m as f64;
    let mut ks: f64 = 0.0;
    for (k, &v) in z.iter().enumerate() {
        let c = normal.cdf(v);
        ks = ks.max((k + 1) as f64 / n - c).max(c - k as f64 / n);
    }
    // W1 = sum_k int_{t_{k-1}}^{t_k} |z_k - t| phi(t) dt with t_k = Phi^{-1}(k/n).
    let antiderivative = |zk: f64, t: f64| -> f64 {
        if t == f64::NEG_INFINITY {
            0.0
        } else if t == f64::INFINITY {
            zk
        } else {
            zk * normal.cdf(t) + normal.pdf(t)
        }
    };
    let mut w1 = 0.0;
    let mut lo = f64::NEG_INFINITY;
    for (k, &zk) in z.iter().enumerate() {
        let hi = if k + 1 == m {
            f64::INFINITY
        } else {
            normal.inverse_cdf((k + 1) as f64 / n)
        };
        let part = if zk >= hi {
            antiderivative(zk, hi) - antiderivative(zk, lo)
        } else if zk <= lo {
            antiderivative(zk, lo) - antiderivative(zk, hi)
        } else {
            2.0 * antiderivative(zk, zk) - antiderivative(zk, lo) - antiderivative(zk, hi)
        };
        w1 += part;
        lo = hi;
    }
    Ok(NormalityDistances {
        samples: m,
        wasserstein1: w1,
        kolmogorov_smirnov: ks,
        total_variation: "not computed".into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegeneracyConfig {
    pub dim: usize,
    pub beta: f64,
    #[serde(default = "default_decay_constant")]
    pub decay_constant: f64,
    pub map: MapSpec,
    pub side: usize,
    /// Uniformly spaced shifts, at least 5.
    pub shifts: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

impl DegeneracyConfig {
    pub fn validate(&self) -> Result<()> {
        let map = self.map.build(self.dim).map_err(|e| Error::Config(e.to_string()))?;
        if map.kappa() != 1 {
            return Err(Error::Config("degeneracy scan needs a scalar (kappa = 1) family".into()));
        }
        LatticeGrid::new(self.dim, self.side).map_err(|e| Error::Config(e.to_string()))?;
        if self.samples < 2 {
            return Err(Error::Config("need at least 2 samples".into()));
        }
        if !(self.tolerance > 0.0 && self.tolerance <= 1e-6) {
            return Err(Error::Config("tolerance must lie in (0, 1e-6]".into()));
        }
        shift_spacing(&self.shifts).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

fn shift_spacing(shifts: &[f64]) -> Result<f64> {
    if shifts.len() < 5 {
        return Err(Error::InvalidParameter("shift grid needs at least 5 points".into()));
    }
    let h = shifts[1] - shifts[0];
    if !(h > 0.0) {
        return Err(Error::InvalidParameter("shift grid must be increasing".into()));
    }
    for w in shifts.windows(2) {
        if ((w[1] - w[0]) - h).abs() > 1e-9 * h.max(1.0) {
            return Err(Error::InvalidParameter("shift grid must be uniformly spaced".into()));
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub z: f64,
    /// `(abar^z)_ii` per axis.
    pub abar: Vec<f64>,
    pub abar_stderr: Vec<f64>,
    /// `K^1_ii(z)` per axis.
    pub k: Vec<f64>,
    pub k_stderr: Vec<f64>,
    /// Central difference of `abar^z`; `None` at the ends of the grid.
    pub slope: Option<Vec<f64>>,
    /// Combined error of `K - slope`: paired Monte Carlo error plus the
    /// truncation estimate `|K(z+h) - 2K(z) + K(z-h)| / 6`.
    pub identity_error: Option<Vec<f64>>,
    pub identity_holds: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyReport {
    pub config: DegeneracyConfig,
    pub config_hash: String,
    pub lambda: f64,
    pub rows: Vec<ShiftRow>,
    /// Grid maximizer of `(abar^z)_11`.
    pub z_max: f64,
    pub k_at_max: f64,
    pub k_at_max_stderr: f64,
    /// `lambda < (abar^z)_ii <= 1` for every sample, shift and axis.
    pub harmonic_bound_holds: bool,
    pub identity_holds: bool,
}

/// `abar^z` and `K^1(z)` over a shift grid with common random numbers: every
/// shift reuses the same field samples.
pub fn degeneracy_scan(config: &DegeneracyConfig, workers: usize) -> Result<DegeneracyReport> {
    config.validate()?;
    let h = shift_spacing(&config.shifts)?;
    let d = config.dim;
    let map = config.map.build(d)?;
    let grid = LatticeGrid::new(d, config.side)?;
    let model = CovarianceModel::build(config.beta, 1, config.decay_constant, grid)?;
    let spectral = Spectral::new(grid);
    let solver = SolverOptions::with_tolerance(config.tolerance);
    let nz = config.shifts.len();
    // per sample: [z][i] pairs (abar_ii, K_ii)
    let outcomes = ordered_map(workers, config.samples, |m| -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let g = sample_field_with(&model, &spectral, config.seed, m as u64);
        config
            .shifts
            .iter()
            .map(|&z| {
                let coeff = evaluate_coefficient(map.as_ref(), &g, &[z])?;
                let sol = solve_corrector_with(&coeff, &solver, &spectral)?;
                let k = local_k(map.as_ref(), &g, &[z], &sol, &sol);
                Ok(((0..d).map(|i| sol.abar_per[i * d + i]).collect(), (0..d).map(|i| k[i * d + i]).collect()))
            })
            .collect()
    })?;
    let mut per_sample = Vec::new();
    let mut failed = 0;
    for o in outcomes {
        match o {
            Ok(v) => per_sample.push(v),
            Err(_) => failed += 1,
        }
    }
    if failed * 100 > config.samples {
        return Err(Error::TooManyFailures {
            failed,
            total: config.samples,
        });
    }
    let m = per_sample.len() as f64;
    let lambda = map.lambda();
    let harmonic_bound_holds = per_sample
        .iter()
        .flat_map(|s| s.iter().flat_map(|(a, _)| a.iter()))
        .all(|&a| a > lambda && a <= 1.0 + 1e-12);
    let column = |iz: usize, i: usize, which: usize| -> Vec<f64> {
        per_sample
            .iter()
            .map(|s| if which == 0 { s[iz].0[i] } else { s[iz].1[i] })
            .collect()
    };
    let stats = |xs: &[f64]| {
        let (mean, var) = mean_variance(xs);
        (mean, (var / m).sqrt())
    };
    let mut rows = Vec::new();
    for iz in 0..nz {
        let mut row = ShiftRow {
            z: config.shifts[iz],
            abar: vec![],
            abar_stderr: vec![],
            k: vec![],
            k_stderr: vec![],
            slope: None,
            identity_error: None,
            identity_holds: None,
        };
        let interior = iz > 0 && iz + 1 < nz;
        let mut slopes = Vec::new();
        let mut errors = Vec::new();
        let mut holds = true;
        for i in 0..d {
            let (a, ase) = stats(&column(iz, i, 0));
            let k_col = column(iz, i, 1);
            let (k, kse) = stats(&k_col);
            row.abar.push(a);
            row.abar_stderr.push(ase);
            row.k.push(k);
            row.k_stderr.push(kse);
            if interior {
                let up = column(iz + 1, i, 0);
                let down = column(iz - 1, i, 0);
                let diffs: Vec<f64> = (0..per_sample.len()).map(|s| k_col[s] - (up[s] - down[s]) / (2.0 * h)).collect();
                let slope = stats(&up).0 / (2.0 * h) - stats(&down).0 / (2.0 * h);
                let (gap, gap_se) = stats(&diffs);
                let curvature = stats(&column(iz + 1, i, 1)).0 - 2.0 * k + stats(&column(iz - 1, i, 1)).0;
                let combined = gap_se + curvature.abs() / 6.0;
                holds &= gap.abs() <= 3.0 * combined + 1e-12;
                slopes.push(slope);
                errors.push(combined);
            }
        }
        if interior {
            row.slope = Some(slopes);
            row.identity_error = Some(errors);
            row.identity_holds = Some(holds);
        }
        rows.push(row);
    }
    let (imax, _) = rows
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |(bi, bv), (i, r)| if r.abar[0] > bv { (i, r.abar[0]) } else { (bi, bv) });
    let identity_holds = rows.iter().all(|r| r.identity_holds.unwrap_or(true));
    Ok(DegeneracyReport {
        config: config.clone(),
        config_hash: config.hash(),
        lambda,
        z_max: rows[imax].z,
        k_at_max: rows[imax].k[0],
        k_at_max_stderr: rows[imax].k_stderr[0],
        rows,
        harmonic_bound_holds,
        identity_holds,
    })
}
