//! The commutator `Xi_i = (a - abar)(grad phi_i + e_i)` and the rescaled
//! functionals `I_eps(F) = pi(1/eps)^{1/2} int F(x) : Xi(x/eps) dx`.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::coefficient_map::CoefficientField;
use crate::corrector::CorrectorSolution;
use crate::error::{Error, Result};
use crate::gaussian_field::Regime;
use crate::grid::LatticeGrid;

/// Minimum number of lattice cells per test-function radius.
pub const RESOLUTION_CELLS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFunctions {
    pub dim: usize,
    pub beta: f64,
}

impl ScalingFunctions {
    pub fn new(dim: usize, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
        }
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        Ok(Self { dim, beta })
    }

    /// `(1+r)^d` for `beta > d`, `(1+r)^d / log(2+r)` at `beta = d`,
    /// `(1+r)^beta` for `beta < d`.
    pub fn pi(&self, r: f64) -> f64 {
        let d = self.dim as f64;
        match Regime::classify(self.dim, self.beta) {
            Regime::Integrable => (1.0 + r).powf(d),
            Regime::Critical => (1.0 + r).powf(d) / (2.0 + r).ln(),
            Regime::NonIntegrable => (1.0 + r).powf(self.beta),
        }
    }

    /// Corrector growth rate, defined for `d >= 2` (NaN otherwise).
    pub fn mu(&self, r: f64) -> f64 {
        if self.dim < 2 {
            return f64::NAN;
        }
        let beta_is_two = (self.beta - 2.0).abs() < 1e-12;
        let d_is_two = self.dim == 2;
        if self.beta < 2.0 && !beta_is_two {
            (1.0 + r).powf(1.0 - self.beta / 2.0)
        } else if beta_is_two && d_is_two {
            (2.0 + r).ln()
        } else if beta_is_two || d_is_two {
            (2.0 + r).ln().sqrt()
        } else {
            1.0
        }
    }
}

pub fn pi_scaling(dim: usize, beta: f64, r: f64) -> Result<f64> {
    Ok(ScalingFunctions::new(dim, beta)?.pi(r))
}

pub fn mu_scaling(dim: usize, beta: f64, r: f64) -> Result<f64> {
    Ok(ScalingFunctions::new(dim, beta)?.mu(r))
}

/// `Xi_ij(x) = e_j . (a - abar)(grad phi_i + e_i)(x)`, layout `[site][i][j]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommutatorField {
    pub grid: LatticeGrid,
    pub values: Vec<f64>,
    pub abar_used: Vec<f64>,
}

impl CommutatorField {
    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn entry(&self, site: usize, i: usize, j: usize) -> f64 {
        let d = self.dim();
        self.values[site * d * d + i * d + j]
    }

    /// Torus average of each entry, row-major `[i][j]`.
    pub fn mean(&self) -> Vec<f64> {
        let dd = self.dim() * self.dim();
        let mut m = vec![0.0; dd];
        for chunk in self.values.chunks_exact(dd) {
            for (a, v) in m.iter_mut().zip(chunk) {
                *a += v;
            }
        }
        let n = self.grid.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

pub fn compute_commutator(
    coeff: &CoefficientField,
    sol: &CorrectorSolution,
    abar: &[f64],
) -> Result<CommutatorField> {
    let d = coeff.dim();
    if sol.grid != coeff.grid {
        return Err(Error::GridMismatch("corrector and coefficient grids differ".into()));
    }
    if abar.len() != d * d || sol.dim() != d {
        return Err(Error::DimensionMismatch(format!("expected a {d} x {d} matrix")));
    }
    let n = coeff.grid.len();
    let mut values = vec![0.0; n * d * d];
    let mut e = vec![0.0; d];
    for site in 0..n {
        let a = coeff.at(site);
        for i in 0..d {
            for (k, v) in e.iter_mut().enumerate() {
                *v = sol.corrected_gradient(i, site, k);
            }
            for j in 0..d {
                values[site * d * d + i * d + j] =
                    (0..d).map(|k| (a[j * d + k] - abar[j * d + k]) * e[k]).sum();
            }
        }
    }
    Ok(CommutatorField {
        grid: coeff.grid,
        values,
        abar_used: abar.to_vec(),
    })
}

/// `F(x) = W * b(|x - c| / r) / Z` with `b(t) = exp(-1/(1 - t^2))` on
/// `t < 1`, `Z = int b(|x - c|/r) dx`. The center is an offset from the
/// midpoint of the macroscopic torus `[0, N eps)^d`, so the same function can
/// be placed on every scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunction {
    pub id: String,
    pub center_offset: Vec<f64>,
    pub radius: f64,
    /// Row-major `d x d` weight `W`.
    pub weights: Vec<f64>,
}

impl TestFunction {
    /// Unit weight in slot `(i, j)`.
    pub fn slot(dim: usize, i: usize, j: usize, radius: f64, center_offset: Vec<f64>) -> Result<Self> {
        if i >= dim || j >= dim {
            return Err(Error::DimensionMismatch(format!("slot ({i},{j}) outside {dim} x {dim}")));
        }
        let mut weights = vec![0.0; dim * dim];
        weights[i * dim + j] = 1.0;
        Self::new(format!("bump{i}{j}"), center_offset, radius, weights)
    }

    pub fn new(id: String, center_offset: Vec<f64>, radius: f64, weights: Vec<f64>) -> Result<Self> {
        let d = center_offset.len();
        if d == 0 || weights.len() != d * d {
            return Err(Error::DimensionMismatch("weights must be d x d for a d-point center".into()));
        }
        if !(radius > 0.0) {
            return Err(Error::InvalidParameter(format!("radius must be positive, got {radius}")));
        }
        Ok(Self {
            id,
            center_offset,
            radius,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.center_offset.len()
    }

    /// Scalar profile `b(|x - c|/r) / Z` at macroscopic offset `x - c`.
    pub fn profile(&self, offset: &[f64]) -> f64 {
        let t2 = offset.iter().map(|v| v * v).sum::<f64>() / (self.radius * self.radius);
        if t2 >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - t2)).exp() / bump_normalization(self.dim(), self.radius)
        }
    }

    /// Nonzero quadrature weights `(site, b(eps x)/Z eps^d)` of the midpoint
    /// rule on `grid` after the resolution and support guards.
    pub fn quadrature(&self, grid: LatticeGrid, epsilon: f64) -> Result<Vec<(usize, f64)>> {
        let d = grid.dim();
        if d != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "test function is {}-dimensional, grid is {d}-dimensional",
                self.dim()
            )));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
        }
        let cells = self.radius / epsilon;
        if cells < RESOLUTION_CELLS - 1e-9 {
            return Err(Error::ResolutionGuard(format!(
                "radius covers {cells:.2} cells at eps = {epsilon}, need {RESOLUTION_CELLS}"
            )));
        }
        let side = grid.side() as f64;
        let macro_side = side * epsilon;
        let center: Vec<f64> = self.center_offset.iter().map(|o| 0.5 * macro_side + o).collect();
        for &c in &center {
            if c - self.radius <= 0.0 || c + self.radius >= macro_side {
                return Err(Error::SupportGuard(format!(
                    "support [{:.4}, {:.4}] leaves the torus [0, {macro_side})",
                    c - self.radius,
                    c + self.radius
                )));
            }
        }
        let lo: Vec<usize> = center.iter().map(|c| ((c - self.radius) / epsilon).floor().max(0.0) as usize).collect();
        let hi: Vec<usize> = center
            .iter()
            .map(|c| (((c + self.radius) / epsilon).ceil() as usize).min(grid.side() - 1))
            .collect();
        let vol = epsilon.powi(d as i32);
        let mut out = Vec::new();
        let mut coords = lo.clone();
        let mut offset = vec![0.0; d];
        loop {
            for a in 0..d {
                offset[a] = epsilon * coords[a] as f64 - center[a];
            }
            let w = self.profile(&offset);
            if w > 0.0 {
                out.push((grid.index(&coords), w * vol));
            }
            let mut axis = d;
            loop {
                if axis == 0 {
                    return Ok(out);
                }
                axis -= 1;
                if coords[axis] < hi[axis] {
                    coords[axis] += 1;
                    break;
                }
                coords[axis] = lo[axis];
            }
        }
    }
}

/// `int_{R^d} exp(-1/(1 - |x|^2/r^2)) dx`.
pub fn bump_normalization(dim: usize, radius: f64) -> f64 {
    static UNIT: [OnceLock<f64>; 8] = [const { OnceLock::new() }; 8];
    let unit = match UNIT.get(dim) {
        Some(cell) => *cell.get_or_init(|| unit_bump_integral(dim)),
        None => unit_bump_integral(dim),
    };
    unit * radius.powi(dim as i32)
}

fn unit_bump_integral(dim: usize) -> f64 {
    let d = dim as f64;
    let sphere = 2.0 * std::f64::consts::PI.powf(d / 2.0) / statrs::function::gamma::gamma(d / 2.0);
    // Composite Simpson; the integrand is flat to all orders at t = 1.
    let m = 4000;
    let h = 1.0 / m as f64;
    let f = |t: f64| {
        if t >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - t * t)).exp() * t.powi(dim as i32 - 1)
        }
    };
    let mut s = f(0.0) + f(1.0);
    for k in 1..m {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * h);
    }
    sphere * s * h / 3.0
}

/// `pi(1/eps)^{1/2} sum_x F(eps x) : Xi(x) eps^d`.
pub fn integrate_functional(
    xi: &CommutatorField,
    f: &TestFunction,
    epsilon: f64,
    scaling: &ScalingFunctions,
) -> Result<f64> {
    let d = xi.dim();
    let quad = f.quadrature(xi.grid, epsilon)?;
    let mut s = 0.0;
    for (site, w) in quad {
        let contraction: f64 = (0..d * d).map(|e| f.weights[e] * xi.values[site * d * d + e]).sum();
        s += w * contraction;
    }
    Ok(scaling.pi(1.0 / epsilon).sqrt() * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrector::solve_corrector;

    fn laminate(side: usize) -> CoefficientField {
        let grid = LatticeGrid::new(2, side).unwrap();
        CoefficientField::from_scalar_fn(grid, "laminate", |c| if c[0] < side / 2 { 1.0 } else { 0.5 }).unwrap()
    }

    #[test]
    fn scaling_examples() {
        assert_eq!(pi_scaling(2, 3.0, 7.0).unwrap(), 64.0);
        assert_eq!(pi_scaling(2, 1.0, 3.0).unwrap(), 4.0);
        assert!((mu_scaling(2, 3.0, 0.0).unwrap() - 0.8326).abs() < 1e-4);
        assert!(pi_scaling(2, 0.0, 1.0).is_err());
        assert!(mu_scaling(2, -1.0, 1.0).is_err());
    }

    #[test]
    fn scaling_matches_independent_table() {
        // (d, beta) -> closure transcribed independently of the dispatch above.
        type Table = (usize, f64, fn(f64) -> f64, fn(f64) -> f64);
        let cases: [Table; 7] = [
            (2, 4.0, |r| (1.0 + r) * (1.0 + r), |r| (2.0 + r).ln().sqrt()),
            (2, 2.0, |r| (1.0 + r) * (1.0 + r) / (2.0 + r).ln(), |r| (2.0 + r).ln()),
            (2, 1.0, |r| 1.0 + r, |r| (1.0 + r).sqrt()),
            (3, 4.0, |r| (1.0 + r).powi(3), |_| 1.0),
            (3, 3.0, |r| (1.0 + r).powi(3) / (2.0 + r).ln(), |_| 1.0),
            (3, 2.0, |r| (1.0 + r).powi(2), |r| (2.0 + r).ln().sqrt()),
            (3, 1.5, |r| (1.0 + r).powf(1.5), |r| (1.0 + r).powf(0.25)),
        ];
        for (d, beta, pi, mu) in cases {
            let s = ScalingFunctions::new(d, beta).unwrap();
            let mut prev = (0.0, 0.0);
            for k in 0..20 {
                let r = 0.5 * k as f64 * (k as f64 + 1.0);
                assert!((s.pi(r) - pi(r)).abs() <= 1e-12 * pi(r), "pi d={d} beta={beta} r={r}");
                assert!((s.mu(r) - mu(r)).abs() <= 1e-12 * mu(r), "mu d={d} beta={beta} r={r}");
                if k > 0 {
                    assert!(s.pi(r) >= prev.0 && s.mu(r) >= prev.1);
                }
                prev = (s.pi(r), s.mu(r));
            }
        }
    }

    #[test]
    fn constant_medium_commutator_vanishes() {
        let grid = LatticeGrid::new(2, 16).unwrap();
        let coeff = CoefficientField::from_scalar_fn(grid, "c", |_| 0.7).unwrap();
        let sol = solve_corrector(&coeff, 1e-10).unwrap();
        let xi = compute_commutator(&coeff, &sol, &[0.7, 0.0, 0.0, 0.7]).unwrap();
        assert!(xi.values.iter().all(|v| *v == 0.0));
        assert!(compute_commutator(&coeff, &sol, &[0.7]).is_err());
    }

    #[test]
    fn laminate_commutator_values() {
        let side = 32;
        let coeff = laminate(side);
        let sol = solve_corrector(&coeff, 1e-12).unwrap();
        let abar = [2.0 / 3.0, 0.0, 0.0, 0.75];
        let xi = compute_commutator(&coeff, &sol, &abar).unwrap();
        for site in 0..coeff.grid.len() {
            let a = coeff.at(site)[0];
            let expected = abar[0] - abar[0] * abar[0] / a;
            assert!((xi.entry(site, 0, 0) - expected).abs() < 1e-9);
            let sign = if a == 1.0 { 1.0 } else { -1.0 };
            assert!((xi.entry(site, 0, 0) - sign * 2.0 / 9.0).abs() < 1e-9);
        }
        let own = compute_commutator(&coeff, &sol, &sol.abar_per).unwrap();
        assert!(own.mean().iter().all(|m| m.abs() < 1e-14));
    }

    #[test]
    fn random_medium_commutator_is_mean_zero_with_cell_average() {
        use crate::coefficient_map::{evaluate_coefficient, family_bump};
        use crate::gaussian_field::{sample_field, CovarianceModel};
        let grid = LatticeGrid::new(2, 32).unwrap();
        let model = CovarianceModel::build(1.0, 1, 20.0, grid).unwrap();
        let g = sample_field(&model, 4, 0);
        let coeff = evaluate_coefficient(&family_bump(0.25, 2).unwrap(), &g, &[0.3]).unwrap();
        let sol = solve_corrector(&coeff, 1e-10).unwrap();
        let xi = compute_commutator(&coeff, &sol, &sol.abar_per).unwrap();
        assert!(xi.mean().iter().all(|m| m.abs() < 1e-14));
    }

    #[test]
    fn normalization_integrates_to_one() {
        for d in 1..=3 {
            let f = TestFunction::slot(d, 0, 0, 0.625, vec![0.0; d]).unwrap();
            let grid = LatticeGrid::new(d, if d == 3 { 64 } else { 256 }).unwrap();
            let eps = if d == 3 { 1.0 / 16.0 } else { 1.0 / 64.0 };
            let total: f64 = f.quadrature(grid, eps).unwrap().iter().map(|(_, w)| w).sum();
            assert!((total - 1.0).abs() < 1e-3, "d={d} total={total}");
        }
    }

    #[test]
    fn constant_commutator_gives_pi_root_times_entry() {
        let grid = LatticeGrid::new(2, 128).unwrap();
        let xi = CommutatorField {
            grid,
            values: (0..grid.len()).flat_map(|_| [0.3, -1.0, 2.0, 0.5]).collect(),
            abar_used: vec![0.0; 4],
        };
        let s = ScalingFunctions::new(2, 4.0).unwrap();
        let eps = 1.0 / 32.0;
        let f = TestFunction::slot(2, 1, 0, 0.75, vec![0.0, 0.0]).unwrap();
        let value = integrate_functional(&xi, &f, eps, &s).unwrap();
        let expected = s.pi(32.0).sqrt() * 2.0;
        assert!((value - expected).abs() < 1e-6 * expected);

        let zero = CommutatorField { values: vec![0.0; grid.len() * 4], ..xi };
        assert_eq!(integrate_functional(&zero, &f, eps, &s).unwrap(), 0.0);
    }

    #[test]
    fn guards() {
        let grid = LatticeGrid::new(2, 64).unwrap();
        let xi = CommutatorField {
            grid,
            values: vec![0.0; grid.len() * 4],
            abar_used: vec![0.0; 4],
        };
        let s = ScalingFunctions::new(2, 4.0).unwrap();
        let small = TestFunction::slot(2, 0, 0, 0.1, vec![0.0, 0.0]).unwrap();
        assert!(matches!(integrate_functional(&xi, &small, 1.0 / 64.0, &s), Err(Error::ResolutionGuard(_))));
        let big = TestFunction::slot(2, 0, 0, 0.6, vec![0.0, 0.0]).unwrap();
        assert!(matches!(integrate_functional(&xi, &big, 1.0 / 64.0, &s), Err(Error::SupportGuard(_))));
        let shifted = TestFunction::slot(2, 0, 0, 0.3, vec![0.25, 0.0]).unwrap();
        assert!(matches!(integrate_functional(&xi, &shifted, 1.0 / 64.0, &s), Err(Error::SupportGuard(_))));
    }

    #[test]
    fn laminate_functional_matches_dense_quadrature() {
        // One interface at macroscopic x0 = L/2 with Xi_11 = +2/9 below and -2/9 above.
        let side = 256;
        let eps = 1.0 / 64.0;
        let coeff = laminate(side);
        let sol = solve_corrector(&coeff, 1e-12).unwrap();
        let xi = compute_commutator(&coeff, &sol, &[2.0 / 3.0, 0.0, 0.0, 0.75]).unwrap();
        let f = TestFunction::slot(2, 0, 0, 1.0, vec![0.3, 0.0]).unwrap();
        let s = ScalingFunctions::new(2, 4.0).unwrap();
        let value = integrate_functional(&xi, &f, eps, &s).unwrap() / s.pi(1.0 / eps).sqrt();

        // Dense tensor midpoint rule for the piecewise-constant continuum Xi whose
        // cell around lattice site x is [eps (x - 1/2), eps (x + 1/2)).
        let macro_side = side as f64 * eps;
        let interface = 0.5 * macro_side - 0.5 * eps;
        let c = [0.5 * macro_side + 0.3, 0.5 * macro_side];
        let m = 2000;
        let h = 2.0 / m as f64;
        let mut oracle = 0.0;
        for p in 0..m {
            let x0 = c[0] - 1.0 + (p as f64 + 0.5) * h;
            let sign = if x0 < interface { 2.0 / 9.0 } else { -2.0 / 9.0 };
            for q in 0..m {
                let x1 = c[1] - 1.0 + (q as f64 + 0.5) * h;
                oracle += sign * f.profile(&[x0 - c[0], x1 - c[1]]) * h * h;
            }
        }
        assert!((value - oracle).abs() < 0.02 * oracle.abs(), "{value} vs {oracle}");
    }

    #[test]
    fn halving_epsilon_on_smooth_medium_is_stable() {
        let f = TestFunction::slot(2, 0, 1, 0.8, vec![0.1, -0.2]).unwrap();
        let s = ScalingFunctions::new(2, 4.0).unwrap();
        let smooth = |x: f64, y: f64| (0.7 * x).sin() * (0.4 * y).cos() + 0.2;
        let value = |side: usize, eps: f64| {
            let grid = LatticeGrid::new(2, side).unwrap();
            let mut values = vec![0.0; grid.len() * 4];
            let mut c = [0usize; 2];
            for site in 0..grid.len() {
                grid.coords(site, &mut c);
                values[site * 4 + 1] = smooth(eps * c[0] as f64, eps * c[1] as f64);
            }
            let xi = CommutatorField { grid, values, abar_used: vec![0.0; 4] };
            integrate_functional(&xi, &f, eps, &s).unwrap() / s.pi(1.0 / eps).sqrt()
        };
        let coarse = value(64, 1.0 / 16.0);
        let fine = value(128, 1.0 / 32.0);
        assert!((coarse - fine).abs() < 0.01 * fine.abs(), "{coarse} {fine}");
    }

    #[test]
    fn functional_is_linear() {
        let grid = LatticeGrid::new(2, 64).unwrap();
        let s = ScalingFunctions::new(2, 1.0).unwrap();
        let eps = 1.0 / 32.0;
        let mk = |k: f64| CommutatorField {
            grid,
            values: (0..grid.len() * 4).map(|e| ((e as f64) * k).sin()).collect(),
            abar_used: vec![0.0; 4],
        };
        let (x, y) = (mk(0.37), mk(1.91));
        let sum = CommutatorField {
            values: x.values.iter().zip(&y.values).map(|(a, b)| 2.0 * a - b).collect(),
            ..x.clone()
        };
        let f = TestFunction::new("w".into(), vec![0.0, 0.1], 0.4, vec![1.0, -0.5, 0.25, 2.0]).unwrap();
        let lhs = integrate_functional(&sum, &f, eps, &s).unwrap();
        let rhs = 2.0 * integrate_functional(&x, &f, eps, &s).unwrap() - integrate_functional(&y, &f, eps, &s).unwrap();
        assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
    }
}
