//! Periodic corrector problems `-div a (grad phi_i + e_i) = 0` on the lattice
//! torus, fluxes, flux correctors and the homogenized matrix.

use std::io::Write;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::coefficient_map::{evaluate_coefficient, CoefficientField, CoefficientMap};
use crate::commutator::ScalingFunctions;
use crate::error::{Error, Result};
use crate::fft::Spectral;
use crate::gaussian_field::{sample_field_with, CovarianceModel, FieldSample};
use crate::grid::LatticeGrid;
use crate::parallel::ordered_map;

pub const DEFAULT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: 5000,
        }
    }
}

impl SolverOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance <= 1e-6) {
            return Err(Error::InvalidParameter(format!(
                "solver tolerance must lie in (0, 1e-6], got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// Forward-difference gradient, backward-difference divergence
/// (`div = -grad^*`), and the operator `u -> -div(a grad u)`.
pub struct DiscreteEllipticOperator<'a> {
    coeff: &'a CoefficientField,
    spectral: Spectral,
    forward: Vec<Vec<usize>>,
    backward: Vec<Vec<usize>>,
    symbol: Vec<Complex64>,
}

impl<'a> DiscreteEllipticOperator<'a> {
    pub fn new(coeff: &'a CoefficientField, spectral: Spectral) -> Result<Self> {
        let grid = coeff.grid;
        if spectral.grid() != grid {
            return Err(Error::GridMismatch("transform plan does not match coefficient grid".into()));
        }
        let d = grid.dim();
        let forward = (0..d).map(|k| (0..grid.len()).map(|s| grid.forward(s, k)).collect()).collect();
        let backward = (0..d).map(|k| (0..grid.len()).map(|s| grid.backward(s, k)).collect()).collect();
        let mean = coeff.mean_matrix();
        let mut coords = vec![0usize; d];
        let mut g = vec![Complex64::new(0.0, 0.0); d];
        let symbol = (0..grid.len())
            .map(|k| {
                grid.coords(k, &mut coords);
                for (gk, &c) in g.iter_mut().zip(&coords) {
                    *gk = Complex64::from_polar(1.0, grid.frequency(c)) - 1.0;
                }
                let mut s = Complex64::new(0.0, 0.0);
                for a in 0..d {
                    for b in 0..d {
                        s += g[a].conj() * mean[a * d + b] * g[b];
                    }
                }
                s
            })
            .collect();
        Ok(Self {
            coeff,
            spectral,
            forward,
            backward,
            symbol,
        })
    }

    pub fn grid(&self) -> LatticeGrid {
        self.coeff.grid
    }

    /// `(grad u)(x)_k = u(x + e_k) - u(x)`, layout `[site][k]`.
    pub fn gradient(&self, u: &[f64]) -> Vec<f64> {
        let d = self.grid().dim();
        let mut out = vec![0.0; u.len() * d];
        for (site, row) in out.chunks_exact_mut(d).enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = u[self.forward[k][site]] - u[site];
            }
        }
        out
    }

    /// `(div v)(x) = sum_k v_k(x) - v_k(x - e_k)`.
    pub fn divergence(&self, v: &[f64]) -> Vec<f64> {
        let d = self.grid().dim();
        let n = self.grid().len();
        (0..n)
            .map(|site| {
                (0..d)
                    .map(|k| v[site * d + k] - v[self.backward[k][site] * d + k])
                    .sum()
            })
            .collect()
    }

    /// `out = -div(a grad u)`.
    pub fn apply(&self, u: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let d = self.grid().dim();
        let dd = d * d;
        let mut g = [0.0f64; 8];
        for site in 0..u.len() {
            for k in 0..d {
                g[k] = u[self.forward[k][site]] - u[site];
            }
            let a = &self.coeff.values[site * dd..(site + 1) * dd];
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += a[j * d + k] * g[k];
                }
                scratch[site * d + j] = s;
            }
        }
        for site in 0..u.len() {
            let mut s = 0.0;
            for k in 0..d {
                s += scratch[site * d + k] - scratch[self.backward[k][site] * d + k];
            }
            out[site] = -s;
        }
    }

    /// Right-hand side `div(a e_i)`.
    pub fn rhs(&self, i: usize) -> Vec<f64> {
        let d = self.grid().dim();
        let dd = d * d;
        let column: Vec<f64> = self
            .coeff
            .values
            .chunks_exact(dd)
            .flat_map(|a| (0..d).map(move |j| a[j * d + i]))
            .collect();
        self.divergence(&column)
    }

    /// Inverse of the mean-coefficient operator on mean-zero fields.
    pub fn precondition(&self, r: &[f64]) -> Vec<f64> {
        let mut hat = self.spectral.forward_real(r);
        hat[0] = Complex64::new(0.0, 0.0);
        for (h, s) in hat.iter_mut().zip(&self.symbol).skip(1) {
            *h /= *s;
        }
        self.spectral.inverse_real(hat)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn remove_mean(u: &mut [f64]) {
    let m = u.iter().sum::<f64>() / u.len() as f64;
    u.iter_mut().for_each(|v| *v -= m);
}

struct SolveOutcome {
    x: Vec<f64>,
    residual: f64,
    iterations: usize,
}

fn true_residual(op: &DiscreteEllipticOperator, x: &[f64], b: &[f64], scratch: &mut [f64]) -> Vec<f64> {
    let mut ax = vec![0.0; x.len()];
    op.apply(x, &mut ax, scratch);
    b.iter().zip(&ax).map(|(b, a)| b - a).collect()
}

fn pcg(op: &DiscreteEllipticOperator, b: &[f64], opts: &SolverOptions) -> SolveOutcome {
    let n = b.len();
    let d = op.grid().dim();
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return SolveOutcome { x, residual: 0.0, iterations: 0 };
    }
    let mut scratch = vec![0.0; n * d];
    let mut ap = vec![0.0; n];
    let mut iterations = 0;
    let mut r = b.to_vec();
    remove_mean(&mut r);
    loop {
        let mut z = op.precondition(&r);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        while iterations < opts.max_iterations && norm(&r) > opts.tolerance * bnorm {
            op.apply(&p, &mut ap, &mut scratch);
            let alpha = rz / dot(&p, &ap);
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            z = op.precondition(&r);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
            iterations += 1;
        }
        r = true_residual(op, &x, b, &mut scratch);
        let residual = norm(&r) / bnorm;
        if residual <= opts.tolerance || iterations >= opts.max_iterations {
            remove_mean(&mut x);
            return SolveOutcome { x, residual, iterations };
        }
    }
}

fn bicgstab(op: &DiscreteEllipticOperator, b: &[f64], opts: &SolverOptions) -> SolveOutcome {
    let n = b.len();
    let d = op.grid().dim();
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return SolveOutcome { x, residual: 0.0, iterations: 0 };
    }
    let mut scratch = vec![0.0; n * d];
    let mut iterations = 0;
    let mut v = vec![0.0; n];
    let mut t = vec![0.0; n];
    loop {
        let mut r = true_residual(op, &x, b, &mut scratch);
        let residual = norm(&r) / bnorm;
        if residual <= opts.tolerance || iterations >= opts.max_iterations {
            remove_mean(&mut x);
            return SolveOutcome { x, residual, iterations };
        }
        let r_hat = r.clone();
        let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
        let mut p = vec![0.0; n];
        v.iter_mut().for_each(|e| *e = 0.0);
        while iterations < opts.max_iterations && norm(&r) > opts.tolerance * bnorm {
            let rho_new = dot(&r_hat, &r);
            if rho_new == 0.0 || omega == 0.0 {
                break;
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
            }
            let y = op.precondition(&p);
            op.apply(&y, &mut v, &mut scratch);
            alpha = rho / dot(&r_hat, &v);
            let s: Vec<f64> = r.iter().zip(&v).map(|(r, v)| r - alpha * v).collect();
            iterations += 1;
            if norm(&s) <= opts.tolerance * bnorm {
                for i in 0..n {
                    x[i] += alpha * y[i];
                }
                r = s;
                break;
            }
            let z = op.precondition(&s);
            op.apply(&z, &mut t, &mut scratch);
            omega = dot(&t, &s) / dot(&t, &t);
            for i in 0..n {
                x[i] += alpha * y[i] + omega * z[i];
                r[i] = s[i] - omega * t[i];
            }
        }
    }
}

/// Correctors, fluxes and flux correctors of one coefficient field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectorSolution {
    pub grid: LatticeGrid,
    /// `phi[i]`, torus mean zero.
    pub phi: Vec<Vec<f64>>,
    /// `grad_phi[i]`, layout `[site][k]`.
    pub grad_phi: Vec<Vec<f64>>,
    /// `flux[i] = a(grad phi_i + e_i) - abar_per e_i`, layout `[site][j]`.
    pub flux: Vec<Vec<f64>>,
    /// `sigma[i]`, layout `[site][j][k]`; empty until
    /// [`solve_flux_corrector`] runs.
    pub sigma: Vec<Vec<f64>>,
    /// Row-major `d x d`; column `i` is the cell average of `a(grad phi_i + e_i)`.
    pub abar_per: Vec<f64>,
    /// Largest relative residual over the `d` solves.
    pub residual: f64,
    pub iterations: Vec<usize>,
}

impl CorrectorSolution {
    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// `(grad phi_i + e_i)(site)_k`.
    pub fn corrected_gradient(&self, i: usize, site: usize, k: usize) -> f64 {
        let d = self.dim();
        self.grad_phi[i][site * d + k] + if i == k { 1.0 } else { 0.0 }
    }

    pub fn has_sigma(&self) -> bool {
        !self.sigma.is_empty()
    }

    /// Torus average of `sum_i phi_i^2`.
    pub fn mean_phi_squared(&self) -> f64 {
        let n = self.grid.len() as f64;
        self.phi.iter().flat_map(|p| p.iter()).map(|v| v * v).sum::<f64>() / n
    }

    /// Max over sites of `|div sigma_i - q_i|`, relative to `max |q|`.
    pub fn sigma_divergence_error(&self) -> f64 {
        let d = self.dim();
        if !self.has_sigma() {
            return f64::NAN;
        }
        let mut qmax: f64 = 0.0;
        let mut err: f64 = 0.0;
        for i in 0..d {
            for site in 0..self.grid.len() {
                for j in 0..d {
                    let mut div = 0.0;
                    for k in 0..d {
                        let back = self.grid.backward(site, k);
                        div += self.sigma[i][site * d * d + j * d + k] - self.sigma[i][back * d * d + j * d + k];
                    }
                    let q = self.flux[i][site * d + j];
                    qmax = qmax.max(q.abs());
                    err = err.max((div - q).abs());
                }
            }
        }
        if qmax == 0.0 {
            err
        } else {
            err / qmax
        }
    }

    /// The correctors as a `d`-component field in the flat binary format.
    pub fn phi_field(&self, seed: u64, sample_index: u64) -> FieldSample {
        let d = self.dim();
        let mut values = vec![0.0; self.grid.len() * d];
        for (i, p) in self.phi.iter().enumerate() {
            for (site, v) in p.iter().enumerate() {
                values[site * d + i] = *v;
            }
        }
        FieldSample {
            grid: self.grid,
            kappa: d,
            values,
            seed,
            sample_index,
        }
    }
}

pub fn solve_corrector(coeff: &CoefficientField, tol: f64) -> Result<CorrectorSolution> {
    solve_corrector_with(coeff, &SolverOptions::with_tolerance(tol), &Spectral::new(coeff.grid))
}

pub fn solve_corrector_with(
    coeff: &CoefficientField,
    opts: &SolverOptions,
    spectral: &Spectral,
) -> Result<CorrectorSolution> {
    opts.validate()?;
    coeff.spot_check(1000)?;
    let op = DiscreteEllipticOperator::new(coeff, spectral.clone())?;
    let grid = coeff.grid;
    let d = grid.dim();
    let dd = d * d;
    let n = grid.len();
    let mut phi = Vec::with_capacity(d);
    let mut grad_phi = Vec::with_capacity(d);
    let mut residual: f64 = 0.0;
    let mut iterations = Vec::with_capacity(d);
    for i in 0..d {
        let b = op.rhs(i);
        let out = if coeff.symmetric { pcg(&op, &b, opts) } else { bicgstab(&op, &b, opts) };
        if !(out.residual <= opts.tolerance) {
            return Err(Error::NonConvergence {
                iterations: out.iterations,
                residual: out.residual,
            });
        }
        residual = residual.max(out.residual);
        iterations.push(out.iterations);
        grad_phi.push(op.gradient(&out.x));
        phi.push(out.x);
    }
    let mut flux: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut q = vec![0.0; n * d];
            for site in 0..n {
                let a = &coeff.values[site * dd..(site + 1) * dd];
                for j in 0..d {
                    q[site * d + j] = (0..d)
                        .map(|k| a[j * d + k] * (grad_phi[i][site * d + k] + if i == k { 1.0 } else { 0.0 }))
                        .sum();
                }
            }
            q
        })
        .collect();
    let mut abar = vec![0.0; dd];
    for (i, q) in flux.iter().enumerate() {
        for j in 0..d {
            abar[j * d + i] = compensated_sum(q.chunks_exact(d).map(|row| row[j])) / n as f64;
        }
    }
    for (i, q) in flux.iter_mut().enumerate() {
        for row in q.chunks_exact_mut(d) {
            for j in 0..d {
                row[j] -= abar[j * d + i];
            }
        }
    }
    Ok(CorrectorSolution {
        grid,
        phi,
        grad_phi,
        flux,
        sigma: Vec::new(),
        abar_per: abar,
        residual,
        iterations,
    })
}

/// Fill `sigma` from `-Lap sigma_ijk = D_j q_ik - D_k q_ij` (forward
/// differences), solved spectrally with zero mean; `sigma_ikj = -sigma_ijk`
/// by construction. Then `sum_k sigma_ijk(x) - sigma_ijk(x - e_k) = q_ij`.
pub fn solve_flux_corrector(mut solution: CorrectorSolution) -> Result<CorrectorSolution> {
    let spectral = Spectral::new(solution.grid);
    solve_flux_corrector_with(&mut solution, &spectral)?;
    Ok(solution)
}

pub fn solve_flux_corrector_with(solution: &mut CorrectorSolution, spectral: &Spectral) -> Result<()> {
    let grid = solution.grid;
    let d = grid.dim();
    let n = grid.len();
    let qmax = solution
        .flux
        .iter()
        .flat_map(|q| q.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst: f64 = 0.0;
    for q in &solution.flux {
        for j in 0..d {
            let mean = q.iter().skip(j).step_by(d).sum::<f64>() / n as f64;
            worst = worst.max(mean.abs());
        }
    }
    if worst > 1e-10 * qmax.max(1.0) {
        return Err(Error::FluxNotMeanZero(worst));
    }
    let mut coords = vec![0usize; d];
    let g: Vec<Vec<Complex64>> = (0..n)
        .map(|k| {
            grid.coords(k, &mut coords);
            coords
                .iter()
                .map(|&c| Complex64::from_polar(1.0, grid.frequency(c)) - 1.0)
                .collect()
        })
        .collect();
    let lap: Vec<f64> = g.iter().map(|gk| gk.iter().map(|v| v.norm_sqr()).sum()).collect();
    let mut sigma = Vec::with_capacity(d);
    for q in &solution.flux {
        let hats: Vec<Vec<Complex64>> = (0..d)
            .map(|j| {
                let comp: Vec<f64> = q.iter().skip(j).step_by(d).cloned().collect();
                spectral.forward_real(&comp)
            })
            .collect();
        let mut s = vec![0.0; n * d * d];
        for j in 0..d {
            for k in (j + 1)..d {
                let mut hat = vec![Complex64::new(0.0, 0.0); n];
                for m in 1..n {
                    hat[m] = (g[m][j] * hats[k][m] - g[m][k] * hats[j][m]) / lap[m];
                }
                for (site, v) in spectral.inverse_real(hat).into_iter().enumerate() {
                    s[site * d * d + j * d + k] = v;
                    s[site * d * d + k * d + j] = -v;
                }
            }
        }
        sigma.push(s);
    }
    solution.sigma = sigma;
    Ok(())
}

/// `abar_per` of one solution.
pub fn homogenized_estimate(solution: &CorrectorSolution) -> Vec<f64> {
    solution.abar_per.clone()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HomogenizedEstimate {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub samples: usize,
}

/// Entrywise ensemble mean and standard error of `abar_per`.
pub fn ensemble_homogenized(estimates: &[Vec<f64>]) -> Result<HomogenizedEstimate> {
    let m = estimates.len();
    if m == 0 {
        return Err(Error::InsufficientData("no samples".into()));
    }
    let len = estimates[0].len();
    let mut mean = vec![0.0; len];
    for e in estimates {
        for (a, v) in mean.iter_mut().zip(e) {
            *a += v / m as f64;
        }
    }
    let stderr = (0..len)
        .map(|i| {
            if m < 2 {
                return f64::NAN;
            }
            let var = estimates.iter().map(|e| (e[i] - mean[i]).powi(2)).sum::<f64>() / (m - 1) as f64;
            (var / m as f64).sqrt()
        })
        .collect();
    Ok(HomogenizedEstimate { mean, stderr, samples: m })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthRow {
    pub n: usize,
    pub beta: f64,
    /// `E[<|phi|^2>]^{1/2}` over the torus.
    pub mean_phi_l2: f64,
    pub stderr: f64,
    pub mu_reference: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrowthTable {
    pub dim: usize,
    pub rows: Vec<GrowthRow>,
    /// Least-squares slope of `log mean_phi_l2` against `log(1 + N)`;
    /// `None` when the correctors vanish.
    pub exponent: Option<f64>,
    /// RMS residual of that fit in log space.
    pub fit_residual: Option<f64>,
    /// `max/min - 1` of `mean_phi_l2 / mu_reference` over the sides.
    pub ratio_variation: Option<f64>,
}

impl GrowthTable {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "N,beta,mean_phi_l2,stderr,mu_reference")?;
        for r in &self.rows {
            writeln!(out, "{},{},{:e},{:e},{:e}", r.n, r.beta, r.mean_phi_l2, r.stderr, r.mu_reference)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GrowthScanSpec<'a> {
    pub map: &'a dyn CoefficientMap,
    pub beta: f64,
    pub decay_constant: f64,
    pub sides: &'a [usize],
    pub samples: usize,
    pub seed: u64,
    pub workers: usize,
    pub solver: SolverOptions,
}

/// Corrector size at the torus scale for a family of grids, compared with
/// the reference growth `mu_{d,beta}(N)`.
pub fn corrector_growth_scan(spec: &GrowthScanSpec) -> Result<GrowthTable> {
    if spec.sides.len() < 3 {
        return Err(Error::InsufficientData("growth fit needs at least 3 sides".into()));
    }
    if spec.samples < 2 {
        return Err(Error::InsufficientData("growth scan needs at least 2 samples".into()));
    }
    let d = spec.map.dim();
    let scaling = ScalingFunctions::new(d, spec.beta)?;
    let mut rows = Vec::new();
    for &side in spec.sides {
        let grid = LatticeGrid::new(d, side)?;
        let model = CovarianceModel::build(spec.beta, spec.map.kappa(), spec.decay_constant, grid)?;
        let spectral = Spectral::new(grid);
        let values = ordered_map(spec.workers, spec.samples, |m| -> Result<f64> {
            let g = sample_field_with(&model, &spectral, spec.seed, m as u64);
            let zero = vec![0.0; spec.map.kappa()];
            let coeff = evaluate_coefficient(spec.map, &g, &zero)?;
            Ok(solve_corrector_with(&coeff, &spec.solver, &spectral)?.mean_phi_squared())
        })?
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
        let m = values.len() as f64;
        let mean = values.iter().sum::<f64>() / m;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let root = mean.sqrt();
        let stderr = if root > 0.0 { (var / m).sqrt() / (2.0 * root) } else { 0.0 };
        rows.push(GrowthRow {
            n: side,
            beta: spec.beta,
            mean_phi_l2: root,
            stderr,
            mu_reference: scaling.mu(side as f64),
        });
    }
    let (exponent, fit_residual, ratio_variation) = if rows.iter().all(|r| r.mean_phi_l2 > 0.0) {
        let xs: Vec<f64> = rows.iter().map(|r| (1.0 + r.n as f64).ln()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.mean_phi_l2.ln()).collect();
        let (slope, intercept) = least_squares(&xs, &ys);
        let rms = (xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (y - slope * x - intercept).powi(2))
            .sum::<f64>()
            / xs.len() as f64)
            .sqrt();
        let ratios: Vec<f64> = rows.iter().map(|r| r.mean_phi_l2 / r.mu_reference).collect();
        let hi = ratios.iter().cloned().fold(f64::MIN, f64::max);
        let lo = ratios.iter().cloned().fold(f64::MAX, f64::min);
        (Some(slope), Some(rms), Some(hi / lo - 1.0))
    } else {
        (None, None, None)
    };
    Ok(GrowthTable {
        dim: d,
        rows,
        exponent,
        fit_residual,
        ratio_variation,
    })
}

/// Neumaier summation; exact for constant fields.
pub(crate) fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0;
    for v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}

/// Returns `(slope, intercept)`.
pub(crate) fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficient_map::{family_bump, family_sigmoid, ConstantMap};
    use crate::gaussian_field::sample_field;
    use proptest::prelude::*;

    fn laminate(side: usize) -> CoefficientField {
        let grid = LatticeGrid::new(2, side).unwrap();
        CoefficientField::from_scalar_fn(grid, "laminate", |c| if c[0] < side / 2 { 1.0 } else { 0.5 }).unwrap()
    }

    fn checkerboard(side: usize) -> CoefficientField {
        let grid = LatticeGrid::new(2, side).unwrap();
        let h = side / 2;
        CoefficientField::from_scalar_fn(grid, "checkerboard", |c| {
            if (c[0] < h) == (c[1] < h) {
                1.0
            } else {
                0.25
            }
        })
        .unwrap()
    }

    fn random_coefficient(side: usize, seed: u64) -> CoefficientField {
        let grid = LatticeGrid::new(2, side).unwrap();
        let model = CovarianceModel::build(4.0, 1, 20.0, grid).unwrap();
        let g = sample_field(&model, seed, 0);
        evaluate_coefficient(&family_sigmoid(0.25, 2).unwrap(), &g, &[0.0]).unwrap()
    }

    #[test]
    fn constant_coefficient_has_trivial_corrector() {
        let grid = LatticeGrid::new(2, 16).unwrap();
        let coeff = CoefficientField::from_scalar_fn(grid, "c", |_| 0.7).unwrap();
        let sol = solve_flux_corrector(solve_corrector(&coeff, 1e-10).unwrap()).unwrap();
        assert!(sol.phi.iter().flatten().all(|v| *v == 0.0));
        let expected = [0.7, 0.0, 0.0, 0.7];
        for (a, e) in homogenized_estimate(&sol).iter().zip(expected) {
            assert!((a - e).abs() < 1e-14);
        }
        assert!(sol.sigma.iter().flatten().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn laminate_matches_one_dimensional_oracle() {
        // Harmonic mean along the layering axis, arithmetic mean across it.
        let side = 32;
        let coeff = laminate(side);
        let sol = solve_flux_corrector(solve_corrector(&coeff, 1e-12).unwrap()).unwrap();
        let harmonic: f64 = 1.0 / (0.5 * (1.0 / 1.0 + 1.0 / 0.5));
        let arithmetic: f64 = 0.5 * (1.0 + 0.5);
        assert!((harmonic - 2.0 / 3.0).abs() < 1e-15);
        assert!((sol.abar_per[0] - harmonic).abs() < 1e-10);
        assert!((sol.abar_per[3] - arithmetic).abs() < 1e-10);
        assert!(sol.abar_per[1].abs() < 1e-10 && sol.abar_per[2].abs() < 1e-10);
        for site in 0..coeff.grid.len() {
            let a = coeff.at(site)[0];
            assert!((sol.corrected_gradient(0, site, 0) - harmonic / a).abs() < 1e-9);
            assert!(sol.corrected_gradient(0, site, 1).abs() < 1e-9);
        }
        assert!(sol.sigma[0].iter().all(|v| v.abs() < 1e-9));
        assert!(sol.sigma_divergence_error() < 1e-8);
    }

    #[test]
    fn checkerboard_extrapolates_to_geometric_mean() {
        let sides = [64usize, 128, 256];
        let values: Vec<f64> = sides
            .iter()
            .map(|&s| solve_corrector(&checkerboard(s), 1e-10).unwrap().abar_per[0])
            .collect();
        // First-order Richardson in h = 1/N on the two finest grids.
        let extrapolated = 2.0 * values[2] - values[1];
        assert!((extrapolated - 0.5).abs() < 0.005, "{values:?} -> {extrapolated}");
    }

    #[test]
    fn random_field_flux_corrector_is_consistent() {
        let coeff = random_coefficient(64, 11);
        let sol = solve_flux_corrector(solve_corrector(&coeff, 1e-10).unwrap()).unwrap();
        assert!(sol.sigma_divergence_error() < 1e-8, "{}", sol.sigma_divergence_error());
        let d = 2;
        for s in &sol.sigma {
            for site in 0..coeff.grid.len() {
                for j in 0..d {
                    for k in 0..d {
                        assert_eq!(s[site * 4 + j * d + k], -s[site * 4 + k * d + j]);
                    }
                }
            }
        }
    }

    #[test]
    fn solution_invariants_and_energy_identity() {
        let coeff = random_coefficient(32, 5);
        let sol = solve_corrector(&coeff, 1e-11).unwrap();
        let n = coeff.grid.len() as f64;
        for i in 0..2 {
            assert!(sol.phi[i].iter().sum::<f64>().abs() / n < 1e-13);
            for k in 0..2 {
                let m: f64 = sol.grad_phi[i].iter().skip(k).step_by(2).sum::<f64>() / n;
                assert!(m.abs() < 1e-13);
            }
            let energy: f64 = (0..coeff.grid.len())
                .map(|site| {
                    let a = coeff.at(site);
                    let e: Vec<f64> = (0..2).map(|k| sol.corrected_gradient(i, site, k)).collect();
                    (0..2).map(|j| (0..2).map(|k| e[j] * a[j * 2 + k] * e[k]).sum::<f64>()).sum::<f64>()
                })
                .sum::<f64>()
                / n;
            assert!((energy - sol.abar_per[i * 2 + i]).abs() < 1e-8);
        }
        // Symmetry and the harmonic/arithmetic bounds for scalar media.
        assert!((sol.abar_per[1] - sol.abar_per[2]).abs() < 1e-9);
        let harmonic = n / coeff.values.chunks(4).map(|a| 1.0 / a[0]).sum::<f64>();
        let arithmetic = coeff.values.chunks(4).map(|a| a[0]).sum::<f64>() / n;
        let eig = nalgebra::Matrix2::new(sol.abar_per[0], sol.abar_per[1], sol.abar_per[2], sol.abar_per[3])
            .symmetric_eigenvalues();
        for e in eig.iter() {
            assert!(*e >= harmonic - 1e-9 && *e <= arithmetic + 1e-9);
            assert!(*e >= 0.25 && *e <= 1.0);
        }
    }

    #[test]
    fn reported_residual_matches_recomputation() {
        let coeff = random_coefficient(32, 9);
        let sol = solve_corrector(&coeff, 1e-8).unwrap();
        let grid = coeff.grid;
        for i in 0..2 {
            // Independent stencil: -sum_k [F_k(x) - F_k(x - e_k)], F = a(grad phi + e_i).
            let flux = |site: usize, k: usize| -> f64 {
                let a = coeff.at(site);
                (0..2)
                    .map(|l| {
                        let g = sol.phi[i][grid.forward(site, l)] - sol.phi[i][site] + if l == i { 1.0 } else { 0.0 };
                        a[k * 2 + l] * g
                    })
                    .sum()
            };
            let mut r2 = 0.0;
            let mut b2 = 0.0;
            for site in 0..grid.len() {
                let mut lhs = 0.0;
                let mut rhs = 0.0;
                for k in 0..2 {
                    lhs += flux(site, k) - flux(grid.backward(site, k), k);
                    rhs += coeff.at(site)[k * 2 + i] - coeff.at(grid.backward(site, k))[k * 2 + i];
                }
                r2 += lhs * lhs;
                b2 += rhs * rhs;
            }
            let rel = (r2 / b2).sqrt();
            assert!(rel <= 1e-8 * 1.01, "{rel}");
            assert!((rel - sol.residual).abs() < 1e-9 || rel <= sol.residual * 1.01);
        }
    }

    #[test]
    fn non_symmetric_coefficient_uses_bicgstab() {
        let grid = LatticeGrid::new(2, 32).unwrap();
        let base = random_coefficient(32, 2);
        let mut coeff = base.clone();
        for a in coeff.values.chunks_exact_mut(4) {
            a[0] *= 0.9;
            a[3] *= 0.9;
            a[1] = 0.1 * a[0];
            a[2] = -0.1 * a[0];
        }
        coeff.symmetric = false;
        coeff.lambda = 0.2;
        let sol = solve_corrector(&coeff, 1e-10).unwrap();
        assert!(sol.residual <= 1e-10);
        let op = DiscreteEllipticOperator::new(&coeff, Spectral::new(grid)).unwrap();
        let mut out = vec![0.0; grid.len()];
        let mut scratch = vec![0.0; grid.len() * 2];
        op.apply(&sol.phi[0], &mut out, &mut scratch);
        let b = op.rhs(0);
        let r: f64 = out.iter().zip(&b).map(|(o, b)| (b - o).powi(2)).sum::<f64>().sqrt();
        assert!(r / norm(&b) <= 1e-10 * 1.01);
    }

    #[test]
    fn tolerance_precondition() {
        let coeff = laminate(8);
        assert!(matches!(solve_corrector(&coeff, 1e-3), Err(Error::InvalidParameter(_))));
        let opts = SolverOptions {
            tolerance: 1e-12,
            max_iterations: 1,
        };
        let r = solve_corrector_with(&random_coefficient(32, 1), &opts, &Spectral::new(LatticeGrid::new(2, 32).unwrap()));
        assert!(matches!(r, Err(Error::NonConvergence { .. })));
    }

    #[test]
    fn flux_must_be_mean_zero() {
        let mut sol = solve_corrector(&laminate(8), 1e-10).unwrap();
        sol.flux[0][0] += 1.0;
        assert!(matches!(solve_flux_corrector(sol), Err(Error::FluxNotMeanZero(_))));
    }

    #[test]
    fn growth_scan_edge_cases() {
        let map = ConstantMap::scalar(0.7, 2, 1).unwrap();
        let spec = GrowthScanSpec {
            map: &map,
            beta: 4.0,
            decay_constant: 20.0,
            sides: &[8, 16, 32],
            samples: 2,
            seed: 1,
            workers: 1,
            solver: SolverOptions::default(),
        };
        let table = corrector_growth_scan(&spec).unwrap();
        assert!(table.rows.iter().all(|r| r.mean_phi_l2 == 0.0));
        assert!(table.exponent.is_none());
        let short = GrowthScanSpec { sides: &[8, 16], ..spec };
        assert!(matches!(corrector_growth_scan(&short), Err(Error::InsufficientData(_))));
        let mut csv = Vec::new();
        table.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("N,beta,mean_phi_l2,stderr,mu_reference\n"));

        let bump = family_bump(0.3, 2).unwrap();
        let table = corrector_growth_scan(&GrowthScanSpec { map: &bump, ..spec }).unwrap();
        assert!(table.exponent.is_some() && table.rows.iter().all(|r| r.mean_phi_l2 > 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn gradient_and_divergence_are_adjoint(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let grid = LatticeGrid::new(2, 8).unwrap();
            let coeff = CoefficientField::from_scalar_fn(grid, "c", |_| 1.0).unwrap();
            let op = DiscreteEllipticOperator::new(&coeff, Spectral::new(grid)).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lhs: f64 = dot(&op.gradient(&u), &v);
            let rhs: f64 = -dot(&u, &op.divergence(&v));
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
