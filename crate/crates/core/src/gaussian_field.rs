//! Stationary Gaussian fields on the periodic lattice.
//!
//! A [`CovarianceModel`] stores the lattice spectral table `S(k)` of the
//! covariance together with a per-frequency factor `B(k)` with
//! `S(k) = B(k) B(k)^T`. Sampling multiplies the transform of real white
//! noise by `B(k)`, so the realized lattice covariance is exactly the inverse
//! transform of `S`.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Spectral;
use crate::grid::LatticeGrid;

/// Relative tolerance below which negative spectral entries are clamped.
pub const PSD_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `beta > d`
    Integrable,
    /// `beta = d`
    Critical,
    /// `beta < d`
    NonIntegrable,
}

impl Regime {
    pub fn classify(dim: usize, beta: f64) -> Self {
        let d = dim as f64;
        if (beta - d).abs() < 1e-12 {
            Regime::Critical
        } else if beta > d {
            Regime::Integrable
        } else {
            Regime::NonIntegrable
        }
    }
}

/// Radial factor profile `c0` used by [`CovarianceModel::build`].
///
/// The exponent is `(d + beta)/2` for `beta <= d` (with the logarithmic
/// correction at `beta = d`) and `beta` for `beta > d`, which makes
/// `c = c0 * c0` decay exactly like `|x|^{-beta}` in every regime.
pub fn canonical_profile(dim: usize, beta: f64, r: f64) -> f64 {
    let d = dim as f64;
    match Regime::classify(dim, beta) {
        Regime::Integrable => (1.0 + r * r).powf(-beta / 2.0),
        Regime::NonIntegrable => (1.0 + r * r).powf(-(d + beta) / 4.0),
        Regime::Critical => {
            (1.0 + r * r).powf(-(d + beta) / 4.0) / (std::f64::consts::E + r).ln().sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Canonical,
    WhiteNoise,
    Zero,
    SpectralOverride,
    ProfileMatrix,
}

#[derive(Debug, Clone)]
pub struct CovarianceModel {
    grid: LatticeGrid,
    beta: f64,
    kappa: usize,
    decay_constant: f64,
    regime: Regime,
    kind: ModelKind,
    /// `S_lm(k)`, layout `[site][l][m]`.
    spectral: Vec<f64>,
    /// `B_lm(k)`, layout `[site][l][m]`.
    factor: Vec<f64>,
    /// Realized lattice covariance `c_lm(x)`, layout `[site][l][m]`.
    covariance: Vec<f64>,
}

impl CovarianceModel {
    /// Canonical model with independent, identically distributed components and
    /// `c(0) = 1`. Fails if the realized covariance leaves the decay envelope
    /// with constant `decay_constant` for lags `|x| <= N/4`.
    pub fn build(beta: f64, kappa: usize, decay_constant: f64, grid: LatticeGrid) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
        }
        if kappa == 0 {
            return Err(Error::InvalidParameter("kappa must be at least 1".into()));
        }
        if !(decay_constant >= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "decay constant must be >= 1, got {decay_constant}"
            )));
        }
        let spec = Spectral::new(grid);
        let dim = grid.dim();
        let c0: Vec<f64> = (0..grid.len())
            .map(|i| canonical_profile(dim, beta, grid.min_image_norm(i)))
            .collect();
        // c0 is even on the torus, so its transform is real.
        let c0_hat: Vec<f64> = spec.forward_real(&c0).into_iter().map(|v| v.re).collect();
        let mean_sq = c0_hat.iter().map(|v| v * v).sum::<f64>() / grid.len() as f64;
        let amplitude = 1.0 / mean_sq.sqrt();
        let diag: Vec<f64> = c0_hat.iter().map(|v| (v * amplitude).abs()).collect();
        let model = Self::from_diagonal_factor(grid, beta, kappa, decay_constant, ModelKind::Canonical, &diag);
        model.check_envelope()?;
        Ok(model)
    }

    /// Degenerate override `c0 = delta`: unit-variance white noise.
    pub fn white_noise(grid: LatticeGrid, kappa: usize) -> Self {
        let ones = vec![1.0; grid.len()];
        Self::from_diagonal_factor(grid, f64::INFINITY, kappa, 1.0, ModelKind::WhiteNoise, &ones)
    }

    /// Zero-variance model.
    pub fn zero(grid: LatticeGrid, kappa: usize) -> Self {
        let zeros = vec![0.0; grid.len()];
        Self::from_diagonal_factor(grid, f64::INFINITY, kappa, 1.0, ModelKind::Zero, &zeros)
    }

    /// Model defined directly by one spectral table shared by all (independent)
    /// components. Negative entries within [`PSD_TOLERANCE`] of the maximum are
    /// clamped to zero; anything more negative is an error.
    pub fn from_spectral_table(
        grid: LatticeGrid,
        beta: f64,
        kappa: usize,
        table: &[f64],
    ) -> Result<Self> {
        if table.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "spectral table has {} entries, grid has {}",
                table.len(),
                grid.len()
            )));
        }
        let clamped = clamp_psd(table)?;
        let factor: Vec<f64> = clamped.iter().map(|v| v.sqrt()).collect();
        Ok(Self::from_diagonal_factor(
            grid,
            beta,
            kappa,
            1.0,
            ModelKind::SpectralOverride,
            &factor,
        ))
    }

    /// Coupled components: `profile(l, m, r)` gives the radial factor matrix
    /// `c0_lm`, and `c = c0 * c0^T`. No normalization is applied.
    pub fn from_profile_matrix(
        grid: LatticeGrid,
        beta: f64,
        kappa: usize,
        profile: impl Fn(usize, usize, f64) -> f64,
    ) -> Result<Self> {
        if kappa == 0 {
            return Err(Error::InvalidParameter("kappa must be at least 1".into()));
        }
        let spec = Spectral::new(grid);
        let n = grid.len();
        let mut factor = vec![0.0; n * kappa * kappa];
        for l in 0..kappa {
            for m in 0..kappa {
                let c0: Vec<f64> = (0..n).map(|i| profile(l, m, grid.min_image_norm(i))).collect();
                let hat = spec.forward_real(&c0);
                for (i, v) in hat.iter().enumerate() {
                    factor[i * kappa * kappa + l * kappa + m] = v.re;
                }
            }
        }
        let mut spectral = vec![0.0; n * kappa * kappa];
        for i in 0..n {
            let b = &factor[i * kappa * kappa..(i + 1) * kappa * kappa];
            for l in 0..kappa {
                for m in 0..kappa {
                    spectral[i * kappa * kappa + l * kappa + m] =
                        (0..kappa).map(|q| b[l * kappa + q] * b[m * kappa + q]).sum();
                }
            }
        }
        let covariance = realize_covariance(&spec, kappa, &spectral);
        Ok(Self {
            grid,
            beta,
            kappa,
            decay_constant: 1.0,
            regime: Regime::classify(grid.dim(), beta),
            kind: ModelKind::ProfileMatrix,
            spectral,
            factor,
            covariance,
        })
    }

    fn from_diagonal_factor(
        grid: LatticeGrid,
        beta: f64,
        kappa: usize,
        decay_constant: f64,
        kind: ModelKind,
        diag: &[f64],
    ) -> Self {
        let n = grid.len();
        let kk = kappa * kappa;
        let mut factor = vec![0.0; n * kk];
        let mut spectral = vec![0.0; n * kk];
        for i in 0..n {
            for l in 0..kappa {
                factor[i * kk + l * kappa + l] = diag[i];
                spectral[i * kk + l * kappa + l] = diag[i] * diag[i];
            }
        }
        let spec = Spectral::new(grid);
        let covariance = realize_covariance(&spec, kappa, &spectral);
        Self {
            grid,
            beta,
            kappa,
            decay_constant,
            regime: if beta.is_finite() {
                Regime::classify(grid.dim(), beta)
            } else {
                Regime::Integrable
            },
            kind,
            spectral,
            factor,
            covariance,
        }
    }

    pub fn grid(&self) -> LatticeGrid {
        self.grid
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn kappa(&self) -> usize {
        self.kappa
    }
    pub fn decay_constant(&self) -> f64 {
        self.decay_constant
    }
    pub fn regime(&self) -> Regime {
        self.regime
    }
    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    /// Spectral entry `S_lm(k)` at the flat frequency index `k`.
    pub fn spectral(&self, k: usize, l: usize, m: usize) -> f64 {
        self.spectral[k * self.kappa * self.kappa + l * self.kappa + m]
    }

    /// Realized lattice covariance `c_lm(x)` at the flat lag index.
    pub fn covariance(&self, lag: usize, l: usize, m: usize) -> f64 {
        self.covariance[lag * self.kappa * self.kappa + l * self.kappa + m]
    }

    /// Realized covariance at a signed lattice lag.
    pub fn covariance_at(&self, lag: &[i64], l: usize, m: usize) -> f64 {
        self.covariance(self.grid.index_wrapped(lag), l, m)
    }

    /// Component `(l, m)` of the realized covariance over all lags.
    pub fn covariance_component(&self, l: usize, m: usize) -> Vec<f64> {
        (0..self.grid.len()).map(|i| self.covariance(i, l, m)).collect()
    }

    /// Smallest `C0` for which the realized covariance satisfies the decay
    /// envelope (and, for `beta < d`, the gradient bound) on `|x| <= N/4`.
    pub fn envelope_constant(&self) -> f64 {
        let mut worst: f64 = 1.0;
        let quarter = self.grid.side() as f64 / 4.0;
        for lag in 0..self.grid.len() {
            let r = self.grid.min_image_norm(lag);
            if r > quarter {
                continue;
            }
            for l in 0..self.kappa {
                let scaled = self.covariance(lag, l, l).abs() * (1.0 + r).powf(self.beta);
                worst = worst.max(scaled).max(1.0 / scaled);
                if self.regime == Regime::NonIntegrable {
                    worst = worst.max(self.gradient_norm(lag, l) * (1.0 + r).powf(self.beta + 1.0));
                }
            }
        }
        worst
    }

    fn gradient_norm(&self, lag: usize, l: usize) -> f64 {
        let base = self.covariance(lag, l, l);
        (0..self.grid.dim())
            .map(|axis| {
                let diff = self.covariance(self.grid.forward(lag, axis), l, l) - base;
                diff * diff
            })
            .sum::<f64>()
            .sqrt()
    }

    fn check_envelope(&self) -> Result<()> {
        let quarter = self.grid.side() as f64 / 4.0;
        let c0 = self.decay_constant;
        let mut coords = vec![0usize; self.grid.dim()];
        for lag in 0..self.grid.len() {
            let r = self.grid.min_image_norm(lag);
            if r > quarter {
                continue;
            }
            for l in 0..self.kappa {
                let scaled = self.covariance(lag, l, l).abs() * (1.0 + r).powf(self.beta);
                let grad_scaled = if self.regime == Regime::NonIntegrable {
                    self.gradient_norm(lag, l) * (1.0 + r).powf(self.beta + 1.0)
                } else {
                    0.0
                };
                if scaled > c0 || scaled < 1.0 / c0 || grad_scaled > c0 {
                    self.grid.coords(lag, &mut coords);
                    return Err(Error::DecayEnvelope {
                        lag: coords.iter().map(|&c| self.grid.min_image(c)).collect(),
                        scaled: scaled.max(grad_scaled),
                        c0,
                    });
                }
            }
        }
        Ok(())
    }

    /// Variance of the torus average of each component, `S_ll(0) / N^d`.
    pub fn torus_mean_variance(&self, l: usize) -> f64 {
        self.spectral(0, l, l) / self.grid.len() as f64
    }
}

fn clamp_psd(table: &[f64]) -> Result<Vec<f64>> {
    let max = table.iter().cloned().fold(0.0_f64, f64::max);
    let tol = PSD_TOLERANCE * max;
    table
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if value >= 0.0 {
                Ok(value)
            } else if value >= -tol {
                Ok(0.0)
            } else {
                Err(Error::PsdViolation {
                    index,
                    value,
                    tolerance: tol,
                })
            }
        })
        .collect()
}

fn realize_covariance(spec: &Spectral, kappa: usize, spectral: &[f64]) -> Vec<f64> {
    let n = spec.grid().len();
    let kk = kappa * kappa;
    let mut out = vec![0.0; n * kk];
    for l in 0..kappa {
        for m in 0..kappa {
            let buf: Vec<Complex64> = (0..n)
                .map(|i| Complex64::new(spectral[i * kk + l * kappa + m], 0.0))
                .collect();
            for (i, v) in spec.inverse_real(buf).into_iter().enumerate() {
                out[i * kk + l * kappa + m] = v;
            }
        }
    }
    out
}

/// One realization of the `kappa`-component field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub grid: LatticeGrid,
    pub kappa: usize,
    /// Layout `[site][component]`.
    pub values: Vec<f64>,
    pub seed: u64,
    pub sample_index: u64,
}

impl FieldSample {
    pub fn value(&self, site: usize, component: usize) -> f64 {
        self.values[site * self.kappa + component]
    }

    pub fn site(&self, site: usize) -> &[f64] {
        &self.values[site * self.kappa..(site + 1) * self.kappa]
    }

    /// Constant field `z` (used for frozen-field limits).
    pub fn constant(grid: LatticeGrid, value: &[f64]) -> Self {
        let values = (0..grid.len()).flat_map(|_| value.iter().copied()).collect();
        Self {
            grid,
            kappa: value.len(),
            values,
            seed: 0,
            sample_index: 0,
        }
    }

    /// The field `G + z`.
    pub fn shifted(&self, shift: &[f64]) -> Self {
        let mut out = self.clone();
        for site in out.values.chunks_exact_mut(self.kappa) {
            for (v, z) in site.iter_mut().zip(shift) {
                *v += z;
            }
        }
        out
    }

    pub fn component_mean(&self, component: usize) -> f64 {
        let n = self.grid.len();
        (0..n).map(|i| self.value(i, component)).sum::<f64>() / n as f64
    }

    /// Statistical check that each component's torus mean lies within five
    /// standard deviations of zero, using the exact variance of the torus mean.
    pub fn mean_is_plausible(&self, model: &CovarianceModel) -> bool {
        (0..self.kappa).all(|l| {
            let sd = model.torus_mean_variance(l).sqrt();
            self.component_mean(l).abs() <= 5.0 * sd + 1e-12
        })
    }

    /// Little-endian binary snapshot: header `d, N, kappa, seed` as `u64`,
    /// then the values as `f64`, row-major with components innermost.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        for h in [
            self.grid.dim() as u64,
            self.grid.side() as u64,
            self.kappa as u64,
            self.seed,
        ] {
            out.write_all(&h.to_le_bytes())?;
        }
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut header = [0u64; 4];
        for h in header.iter_mut() {
            input.read_exact(&mut word)?;
            *h = u64::from_le_bytes(word);
        }
        let grid = LatticeGrid::new(header[0] as usize, header[1] as usize)?;
        let kappa = header[2] as usize;
        let mut values = Vec::with_capacity(grid.len() * kappa);
        for _ in 0..grid.len() * kappa {
            input.read_exact(&mut word)?;
            values.push(f64::from_le_bytes(word));
        }
        Ok(Self {
            grid,
            kappa,
            values,
            seed: header[3],
            sample_index: 0,
        })
    }

    /// CSV with columns `x0..x{d-1}, g0..g{kappa-1}`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.grid.dim();
        let header: Vec<String> = (0..d)
            .map(|a| format!("x{a}"))
            .chain((0..self.kappa).map(|l| format!("g{l}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        let mut coords = vec![0usize; d];
        for site in 0..self.grid.len() {
            self.grid.coords(site, &mut coords);
            let row: Vec<String> = coords
                .iter()
                .map(|c| c.to_string())
                .chain(self.site(site).iter().map(|v| format!("{v:e}")))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Spectral synthesis of one sample. The Gaussian stream is a ChaCha8 generator
/// keyed by `seed` on stream `sample_index`, so the result depends only on
/// `(model, seed, sample_index)`.
pub fn sample_field(model: &CovarianceModel, seed: u64, sample_index: u64) -> FieldSample {
    let spec = Spectral::new(model.grid);
    sample_field_with(model, &spec, seed, sample_index)
}

/// As [`sample_field`] with a caller-provided transform plan.
pub fn sample_field_with(
    model: &CovarianceModel,
    spec: &Spectral,
    seed: u64,
    sample_index: u64,
) -> FieldSample {
    let grid = model.grid;
    let n = grid.len();
    let kappa = model.kappa;
    let kk = kappa * kappa;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_index);
    let noise: Vec<Vec<Complex64>> = (0..kappa)
        .map(|_| {
            let w: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            spec.forward_real(&w)
        })
        .collect();
    let mut values = vec![0.0; n * kappa];
    for l in 0..kappa {
        let hat: Vec<Complex64> = (0..n)
            .map(|k| {
                (0..kappa)
                    .map(|m| noise[m][k] * model.factor[k * kk + l * kappa + m])
                    .sum()
            })
            .collect();
        for (i, v) in spec.inverse_real(hat).into_iter().enumerate() {
            values[i * kappa + l] = v;
        }
    }
    FieldSample {
        grid,
        kappa,
        values,
        seed,
        sample_index,
    }
}

/// Empirical covariance per lag with standard errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceTable {
    pub lags: Vec<Vec<i64>>,
    pub kappa: usize,
    /// Layout `[lag][l][m]`.
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl CovarianceTable {
    pub fn value(&self, lag: usize, l: usize, m: usize) -> f64 {
        self.values[lag * self.kappa * self.kappa + l * self.kappa + m]
    }
    pub fn error(&self, lag: usize, l: usize, m: usize) -> f64 {
        self.stderr[lag * self.kappa * self.kappa + l * self.kappa + m]
    }
}

/// Unbiased cross-sample covariance estimate `E[G_l(x + lag) G_m(x)]`,
/// averaged over base points `x` of the torus.
pub fn empirical_covariance(samples: &[FieldSample], lags: &[Vec<i64>]) -> Result<CovarianceTable> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData("need at least two samples".into()));
    }
    let grid = samples[0].grid;
    let kappa = samples[0].kappa;
    if samples.iter().any(|s| s.grid != grid || s.kappa != kappa) {
        return Err(Error::GridMismatch("samples are on different grids".into()));
    }
    if lags.iter().any(|l| l.len() != grid.dim()) {
        return Err(Error::DimensionMismatch("lag dimension differs from grid".into()));
    }
    let n = grid.len();
    let m_samples = samples.len() as f64;
    let mut site_mean = vec![0.0; n * kappa];
    for s in samples {
        for (acc, v) in site_mean.iter_mut().zip(&s.values) {
            *acc += v / m_samples;
        }
    }
    let kk = kappa * kappa;
    let mut values = vec![0.0; lags.len() * kk];
    let mut stderr = vec![0.0; lags.len() * kk];
    let mut coords = vec![0usize; grid.dim()];
    let mut shifted = vec![0i64; grid.dim()];
    for (li, lag) in lags.iter().enumerate() {
        let partner: Vec<usize> = (0..n)
            .map(|x| {
                grid.coords(x, &mut coords);
                for a in 0..grid.dim() {
                    shifted[a] = coords[a] as i64 + lag[a];
                }
                grid.index_wrapped(&shifted)
            })
            .collect();
        for l in 0..kappa {
            for m in 0..kappa {
                let per_sample: Vec<f64> = samples
                    .iter()
                    .map(|s| {
                        (0..n)
                            .map(|x| {
                                let y = partner[x];
                                (s.values[y * kappa + l] - site_mean[y * kappa + l])
                                    * (s.values[x * kappa + m] - site_mean[x * kappa + m])
                            })
                            .sum::<f64>()
                            / n as f64
                    })
                    .collect();
                let estimate = per_sample.iter().sum::<f64>() / (m_samples - 1.0);
                let mean = per_sample.iter().sum::<f64>() / m_samples;
                let var = per_sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m_samples - 1.0);
                values[li * kk + l * kappa + m] = estimate;
                stderr[li * kk + l * kappa + m] = (var * m_samples).sqrt() / (m_samples - 1.0);
            }
        }
    }
    Ok(CovarianceTable {
        lags: lags.to_vec(),
        kappa,
        values,
        stderr,
    })
}

/// `<h, c * h>` over the lattice, computed spectrally. `h` (layout
/// `[site][component]`) must vanish outside the central region
/// `[N/4, 3N/4)^d` so wrap-around does not enter.
#[allow(clippy::needless_range_loop)]
pub fn h_norm_squared(h: &[f64], model: &CovarianceModel) -> Result<f64> {
    let grid = model.grid;
    let kappa = model.kappa;
    if h.len() != grid.len() * kappa {
        return Err(Error::GridMismatch(format!(
            "h has {} entries, expected {}",
            h.len(),
            grid.len() * kappa
        )));
    }
    let side = grid.side();
    let (lo, hi) = (side / 4, 3 * side / 4);
    for site in 0..grid.len() {
        let outside = (0..grid.dim()).any(|a| {
            let c = grid.coord(site, a);
            c < lo || c >= hi
        });
        if outside && h[site * kappa..(site + 1) * kappa].iter().any(|&v| v != 0.0) {
            return Err(Error::SupportGuard(format!(
                "h is nonzero at site {site}, outside the central region"
            )));
        }
    }
    let spec = Spectral::new(grid);
    let hats: Vec<Vec<Complex64>> = (0..kappa)
        .map(|l| {
            let comp: Vec<f64> = (0..grid.len()).map(|i| h[i * kappa + l]).collect();
            spec.forward_real(&comp)
        })
        .collect();
    let mut total = 0.0;
    for k in 0..grid.len() {
        for l in 0..kappa {
            for m in 0..kappa {
                total += (hats[l][k].conj() * hats[m][k]).re * model.spectral(k, l, m);
            }
        }
    }
    Ok((total / grid.len() as f64).max(0.0))
}

/// `||h||_H`.
pub fn h_norm(h: &[f64], model: &CovarianceModel) -> Result<f64> {
    h_norm_squared(h, model).map(f64::sqrt)
}

/// Right-hand norm of the Hardy-Littlewood-Sobolev-type bound on `||h||_H`
/// (lattice spacing 1, `|h|` Euclidean over components): `L^2` for
/// `beta > d`, `||log(2+|x|)^{1/2} h||_{L^2}` at `beta = d` with `|x|`
/// measured from the torus midpoint, `L^{2d/(2d-beta)}` for `beta < d`.
pub fn hls_rhs_norm(h: &[f64], grid: LatticeGrid, kappa: usize, beta: f64) -> f64 {
    let d = grid.dim();
    let half = (grid.side() / 2) as f64;
    let regime = Regime::classify(d, beta);
    let p = match regime {
        Regime::NonIntegrable => 2.0 * d as f64 / (2.0 * d as f64 - beta),
        _ => 2.0,
    };
    let mut total = 0.0;
    for site in 0..grid.len() {
        let a2: f64 = h[site * kappa..(site + 1) * kappa].iter().map(|v| v * v).sum();
        if a2 == 0.0 {
            continue;
        }
        let weight = if regime == Regime::Critical {
            let r2: f64 = (0..d).map(|a| (grid.coord(site, a) as f64 - half).powi(2)).sum();
            (2.0 + r2.sqrt()).ln()
        } else {
            1.0
        };
        total += weight * a2.sqrt().powf(p);
    }
    total.powf(1.0 / p)
}

/// Smooth bump `A exp(-1/(1-t^2))`, `t = |x - c|/r`, placed relative to the
/// side so that the same member can be drawn on every grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HlsBump {
    /// Center as a fraction of the side, within `[0.4, 0.6]`.
    pub center: Vec<f64>,
    /// Radius as a fraction of the side, within `[1/32, 1/10]`.
    pub radius: f64,
    pub amplitude: Vec<f64>,
}

impl HlsBump {
    pub fn on_grid(&self, grid: LatticeGrid) -> Vec<f64> {
        let kappa = self.amplitude.len();
        let n = grid.side() as f64;
        let r = self.radius * n;
        let mut h = vec![0.0; grid.len() * kappa];
        for site in 0..grid.len() {
            let t2: f64 = (0..grid.dim())
                .map(|a| (grid.coord(site, a) as f64 - self.center[a] * n).powi(2))
                .sum::<f64>()
                / (r * r);
            if t2 < 1.0 {
                let b = (-1.0 / (1.0 - t2)).exp();
                for (l, amp) in self.amplitude.iter().enumerate() {
                    h[site * kappa + l] = amp * b;
                }
            }
        }
        h
    }
}

pub fn random_hls_family(dim: usize, kappa: usize, count: usize, seed: u64) -> Vec<HlsBump> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| HlsBump {
            center: (0..dim).map(|_| rng.gen_range(0.4..0.6)).collect(),
            radius: rng.gen_range(1.0 / 32.0..0.1),
            amplitude: (0..kappa).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect()
}

/// Largest `||h||_H / rhs(h)` over the family on the model's grid.
pub fn hls_max_ratio(model: &CovarianceModel, family: &[HlsBump]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for bump in family {
        let h = bump.on_grid(model.grid);
        let rhs = hls_rhs_norm(&h, model.grid, model.kappa, model.beta);
        if rhs > 0.0 {
            worst = worst.max(h_norm(&h, model)? / rhs);
        }
    }
    Ok(worst)
}
