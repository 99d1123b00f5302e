//! Wiener-chaos calculus for functionals `X = g(G(zeta_1), ..., G(zeta_n))`
//! of finitely many jointly Gaussian variables.
//!
//! The Gram matrix `cov_ij = <zeta_i, zeta_j>_H` is factored as `A A^T` with
//! `A` of full column rank `r`, so `G(zeta) = A W` for a standard Gaussian
//! `W in R^r`. Expansions are in the probabilists' Hermite basis
//! `He_alpha(W) = prod_m He_{alpha_m}(W_m)`, and the whitened directions form
//! an orthonormal frame of `span(zeta)`: derivative slots are indexed by `m`
//! and paired with the Euclidean product. The Ornstein-Uhlenbeck operator acts
//! on chaos of degree `k` as multiplication by `k`.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAX_VARIABLES: usize = 8;
pub const MAX_DEGREE: usize = 20;
pub const DEFAULT_DEGREE: usize = 12;
const MAX_GRID_POINTS: usize = 4_000_000;

#[derive(Debug, Clone)]
pub struct FiniteGaussianModel {
    n: usize,
    cov: Vec<f64>,
    /// Row-major `n x rank`.
    whitening: Vec<f64>,
    rank: usize,
    key: u64,
}

impl FiniteGaussianModel {
    pub fn new(n: usize, cov: Vec<f64>) -> Result<Self> {
        if n == 0 || n > MAX_VARIABLES {
            return Err(Error::InvalidParameter(format!("need 1 <= n <= {MAX_VARIABLES}, got {n}")));
        }
        if cov.len() != n * n {
            return Err(Error::DimensionMismatch("covariance is not n x n".into()));
        }
        let scale = cov.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            for j in 0..i {
                if (cov[i * n + j] - cov[j * n + i]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidParameter("covariance is not symmetric".into()));
                }
            }
        }
        let sym = DMatrix::from_fn(n, n, |i, j| 0.5 * (cov[i * n + j] + cov[j * n + i]));
        let eig = SymmetricEigen::new(sym);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut columns = Vec::new();
        for &k in &order {
            let lambda = eig.eigenvalues[k];
            if lambda < -1e-12 * scale {
                return Err(Error::PsdViolation {
                    index: k,
                    value: lambda,
                    tolerance: 1e-12,
                });
            }
            if lambda <= 1e-12 * scale {
                continue;
            }
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().cloned().collect();
            // Sign convention: largest-magnitude entry positive.
            let pivot = v.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            columns.push(v.into_iter().map(|x| x * lambda.sqrt()).collect::<Vec<f64>>());
        }
        let rank = columns.len();
        let mut whitening = vec![0.0; n * rank];
        for (m, col) in columns.iter().enumerate() {
            for i in 0..n {
                whitening[i * rank + m] = col[i];
            }
        }
        for i in 0..n {
            for j in 0..n {
                let r: f64 = (0..rank).map(|m| whitening[i * rank + m] * whitening[j * rank + m]).sum();
                if (r - cov[i * n + j]).abs() > 1e-12 * scale.max(1.0) * 10.0 {
                    return Err(Error::InvalidParameter(format!(
                        "whitening does not reproduce the covariance at ({i},{j})"
                    )));
                }
            }
        }
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        n.hash(&mut hasher);
        for v in &cov {
            v.to_bits().hash(&mut hasher);
        }
        Ok(Self {
            n,
            cov,
            whitening,
            rank,
            key: hasher.finish(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn covariance(&self) -> &[f64] {
        &self.cov
    }

    /// Row-major `n x rank` factor `A`.
    pub fn whitening(&self) -> &[f64] {
        &self.whitening
    }

    /// `y = A w`.
    pub fn correlate(&self, w: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = (0..self.rank).map(|m| self.whitening[i * self.rank + m] * w[m]).sum();
        }
    }
}

/// `He_k(x)` for `k = 0..=degree`.
pub fn hermite_values(x: f64, degree: usize, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    if degree >= 1 {
        out.push(x);
    }
    for k in 1..degree {
        let next = x * out[k] - k as f64 * out[k - 1];
        out.push(next);
    }
}

/// Gauss-Hermite rule for the standard Gaussian measure (weights sum to 1),
/// by the Golub-Welsch eigenvalue method.
pub fn gauss_hermite(nodes: usize) -> (Vec<f64>, Vec<f64>) {
    if nodes == 0 {
        return (vec![], vec![]);
    }
    let jacobi = DMatrix::from_fn(nodes, nodes, |i, j| {
        if i + 1 == j {
            (j as f64).sqrt()
        } else if j + 1 == i {
            (i as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..nodes)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetrize to remove eigen-solver round-off.
    let mut x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut w: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    for k in 0..nodes / 2 {
        let j = nodes - 1 - k;
        let xs = 0.5 * (x[j] - x[k]);
        let ws = 0.5 * (w[j] + w[k]);
        x[k] = -xs;
        x[j] = xs;
        w[k] = ws;
        w[j] = ws;
    }
    if nodes % 2 == 1 {
        x[nodes / 2] = 0.0;
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    (x, w)
}

/// All multi-indices in `r` variables with total degree `<= p`.
#[derive(Debug)]
pub struct MultiIndexSet {
    rank: usize,
    degree: usize,
    list: Vec<Vec<u32>>,
    lookup: HashMap<Vec<u32>, usize>,
    factorials: Vec<f64>,
}

impl MultiIndexSet {
    fn new(rank: usize, degree: usize) -> Self {
        let mut list = Vec::new();
        let mut current = vec![0u32; rank];
        fn rec(pos: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if pos == cur.len() {
                out.push(cur.clone());
                return;
            }
            for k in 0..=left {
                cur[pos] = k;
                rec(pos + 1, left - k, cur, out);
            }
            cur[pos] = 0;
        }
        rec(0, degree as u32, &mut current, &mut list);
        list.sort_by_key(|a| (a.iter().sum::<u32>(), std::cmp::Reverse(a.clone())));
        let lookup = list.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        let factorials = list
            .iter()
            .map(|a| a.iter().map(|&k| factorial(k as usize)).product())
            .collect();
        Self {
            rank,
            degree,
            list,
            lookup,
            factorials,
        }
    }

    pub fn len(&self) -> usize {
        self.list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.list.is_empty()
    }

    pub fn get(&self, k: usize) -> &[u32] {
        &self.list[k]
    }

    pub fn position(&self, alpha: &[u32]) -> Option<usize> {
        self.lookup.get(alpha).copied()
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

#[derive(Debug, Clone)]
pub struct ChaosExpansion {
    indices: Arc<MultiIndexSet>,
    model_key: u64,
    /// Coefficients `c_alpha` of `X = sum c_alpha He_alpha(W)`.
    pub coefficients: Vec<f64>,
    /// `L^2` norm of the part of `g` not captured by the truncation, from
    /// quadrature (zero for expansions built from coefficients).
    pub tail: f64,
}

impl ChaosExpansion {
    /// Zero expansion with the layout used for `model` at degree `p_max`.
    pub fn zero(model: &FiniteGaussianModel, p_max: usize) -> Self {
        Self {
            indices: Arc::new(MultiIndexSet::new(model.rank, p_max)),
            model_key: model.key,
            coefficients: vec![0.0; MultiIndexSet::new(model.rank, p_max).len()],
            tail: 0.0,
        }
    }

    /// Expansion with the given whitened Hermite coefficients.
    pub fn from_terms(model: &FiniteGaussianModel, p_max: usize, terms: &[(Vec<u32>, f64)]) -> Result<Self> {
        let mut x = Self::zero(model, p_max);
        for (alpha, c) in terms {
            let k = x.indices.position(alpha).ok_or_else(|| {
                Error::DimensionMismatch(format!("multi-index {alpha:?} outside rank {} degree {p_max}", model.rank))
            })?;
            x.coefficients[k] += c;
        }
        Ok(x)
    }

    pub fn rank(&self) -> usize {
        self.indices.rank
    }

    pub fn p_max(&self) -> usize {
        self.indices.degree
    }

    pub fn coefficient(&self, alpha: &[u32]) -> f64 {
        self.indices.position(alpha).map_or(0.0, |k| self.coefficients[k])
    }

    pub fn mean(&self) -> f64 {
        self.coefficients.first().copied().unwrap_or(0.0)
    }

    /// `sum alpha! c_alpha^2`.
    pub fn norm_squared(&self) -> f64 {
        self.coefficients
            .iter()
            .zip(&self.indices.factorials)
            .map(|(c, f)| f * c * c)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        self.norm_squared() - self.mean().powi(2)
    }

    /// `E[X Y]` from coefficients.
    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .coefficients
            .iter()
            .zip(&other.coefficients)
            .zip(&self.indices.factorials)
            .map(|((a, b), f)| f * a * b)
            .sum())
    }

    /// Largest total degree carrying a coefficient above round-off.
    pub fn effective_degree(&self) -> usize {
        let scale = self.coefficients.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        (0..self.coefficients.len())
            .filter(|&k| self.coefficients[k].abs() > 1e-13 * scale)
            .map(|k| self.indices.list[k].iter().sum::<u32>() as usize)
            .max()
            .unwrap_or(0)
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.model_key != other.model_key || self.rank() != other.rank() || self.p_max() != other.p_max() {
            return Err(Error::DimensionMismatch("expansions belong to different models or truncations".into()));
        }
        Ok(())
    }

    fn map_coefficients(&self, f: impl Fn(&[u32], f64) -> f64) -> Self {
        let mut out = self.clone();
        for (k, c) in out.coefficients.iter_mut().enumerate() {
            *c = f(&self.indices.list[k], *c);
        }
        out.tail = 0.0;
        out
    }

    /// `L X`.
    pub fn ou(&self) -> Self {
        self.map_coefficients(|a, c| a.iter().sum::<u32>() as f64 * c)
    }

    /// `(shift + L)^{-1} X`.
    pub fn resolvent(&self, shift: u32) -> Self {
        self.map_coefficients(|a, c| c / (shift as f64 + a.iter().sum::<u32>() as f64))
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map_coefficients(|_, c| s * c)
    }

    pub fn shifted(&self, s: f64) -> Self {
        let mut out = self.clone();
        if let Some(c) = out.coefficients.first_mut() {
            *c += s;
        }
        out
    }

    /// Derivative along whitened direction `m`: `He_k' = k He_{k-1}`.
    pub fn partial(&self, m: usize) -> Self {
        let mut out = self.clone();
        out.tail = 0.0;
        let mut shifted = vec![0u32; self.rank()];
        for (k, alpha) in self.indices.list.iter().enumerate() {
            shifted.copy_from_slice(alpha);
            shifted[m] += 1;
            out.coefficients[k] = match self.indices.position(&shifted) {
                Some(j) => shifted[m] as f64 * self.coefficients[j],
                None => 0.0,
            };
        }
        out
    }

    /// Evaluate at whitened coordinates `w`.
    pub fn eval(&self, w: &[f64]) -> f64 {
        let mut tables = Vec::with_capacity(self.rank());
        for &x in w {
            let mut t = Vec::new();
            hermite_values(x, self.p_max(), &mut t);
            tables.push(t);
        }
        self.eval_tables(&tables)
    }

    fn eval_tables(&self, tables: &[Vec<f64>]) -> f64 {
        self.indices
            .list
            .iter()
            .zip(&self.coefficients)
            .filter(|(_, c)| **c != 0.0)
            .map(|(alpha, c)| c * alpha.iter().enumerate().map(|(m, &k)| tables[m][k as usize]).product::<f64>())
            .sum()
    }
}

/// Tensor Gauss-Hermite grid in whitened coordinates.
struct TensorGrid {
    rank: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl TensorGrid {
    fn new(rank: usize, nodes: usize) -> Result<Self> {
        let total = (nodes as f64).powi(rank as i32);
        if total > MAX_GRID_POINTS as f64 {
            return Err(Error::InvalidParameter(format!(
                "tensor quadrature with {nodes}^{rank} points exceeds {MAX_GRID_POINTS}"
            )));
        }
        let (x, w) = gauss_hermite(nodes);
        Ok(Self { rank, nodes: x, weights: w })
    }

    /// Calls `f(point, weight)` for every grid point.
    fn for_each(&self, mut f: impl FnMut(&[usize], f64)) {
        let k = self.nodes.len();
        let mut idx = vec![0usize; self.rank];
        loop {
            let w: f64 = idx.iter().map(|&i| self.weights[i]).product();
            f(&idx, w);
            let mut axis = self.rank;
            loop {
                if axis == 0 {
                    return;
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] < k {
                    break;
                }
                idx[axis] = 0;
            }
        }
    }
}

/// Expand `g(y)` with `y = A W` in Hermite polynomials of `W` up to total
/// degree `p_max`, using `p_max + 1` Gauss-Hermite nodes per axis.
pub fn hermite_expand(
    g: &dyn Fn(&[f64]) -> f64,
    model: &FiniteGaussianModel,
    p_max: usize,
) -> Result<ChaosExpansion> {
    hermite_expand_with_nodes(g, model, p_max, p_max + 1)
}

pub fn hermite_expand_with_nodes(
    g: &dyn Fn(&[f64]) -> f64,
    model: &FiniteGaussianModel,
    p_max: usize,
    nodes: usize,
) -> Result<ChaosExpansion> {
    if p_max > MAX_DEGREE {
        return Err(Error::InvalidParameter(format!("p_max must be <= {MAX_DEGREE}, got {p_max}")));
    }
    if nodes < p_max + 1 {
        return Err(Error::QuadratureNodes { nodes, degree: p_max });
    }
    let grid = TensorGrid::new(model.rank, nodes)?;
    let mut x = ChaosExpansion::zero(model, p_max);
    let tables: Vec<Vec<f64>> = grid
        .nodes
        .iter()
        .map(|&v| {
            let mut t = Vec::new();
            hermite_values(v, p_max, &mut t);
            t
        })
        .collect();
    let mut w = vec![0.0; model.rank];
    let mut y = vec![0.0; model.n];
    let mut quad_norm = 0.0;
    let indices = x.indices.clone();
    grid.for_each(|idx, weight| {
        for (m, &i) in idx.iter().enumerate() {
            w[m] = grid.nodes[i];
        }
        model.correlate(&w, &mut y);
        let gv = g(&y);
        quad_norm += weight * gv * gv;
        let gw = weight * gv;
        for (k, alpha) in indices.list.iter().enumerate() {
            let basis: f64 = alpha.iter().zip(idx).map(|(&a, &i)| tables[i][a as usize]).product();
            x.coefficients[k] += gw * basis;
        }
    });
    for (c, f) in x.coefficients.iter_mut().zip(&indices.factorials) {
        *c /= f;
    }
    x.tail = (quad_norm - x.norm_squared()).max(0.0).sqrt();
    Ok(x)
}

/// `D X` in the whitened orthonormal frame: slot `m` is `d X / d W_m`.
pub fn malliavin_derivative(x: &ChaosExpansion) -> Vec<ChaosExpansion> {
    (0..x.rank()).map(|m| x.partial(m)).collect()
}

/// `D X` expressed in the `zeta` slots, `DX = sum_i (d_i g) zeta_i`; requires
/// linearly independent `zeta` (full-rank Gram matrix).
pub fn zeta_slots(dx: &[ChaosExpansion], model: &FiniteGaussianModel) -> Result<Vec<ChaosExpansion>> {
    let n = model.n;
    if model.rank != n {
        return Err(Error::InvalidParameter("zeta slots need a full-rank Gram matrix".into()));
    }
    let a = DMatrix::from_row_slice(n, n, &model.whitening);
    let inv_t = a
        .transpose()
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("whitening factor is singular".into()))?;
    Ok((0..n)
        .map(|i| {
            let mut out = dx[0].scaled(0.0);
            for (m, slot) in dx.iter().enumerate() {
                for (o, c) in out.coefficients.iter_mut().zip(&slot.coefficients) {
                    *o += inv_t[(i, m)] * c;
                }
            }
            out
        })
        .collect())
}

/// `(shift + L)^{-1} X`.
pub fn ou_resolvent(x: &ChaosExpansion, shift: u32) -> ChaosExpansion {
    x.resolvent(shift)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceComparison {
    /// `E[<DX, (1+L)^{-1} DY>]`.
    pub helffer_sjostrand: f64,
    /// `E[XY] - E[X]E[Y]` from the chaos coefficients.
    pub direct: f64,
}

pub fn hs_covariance(x: &ChaosExpansion, y: &ChaosExpansion) -> Result<CovarianceComparison> {
    x.check_compatible(y)?;
    let dx = malliavin_derivative(x);
    let dy = malliavin_derivative(y);
    let mut hs = 0.0;
    for (a, b) in dx.iter().zip(&dy) {
        hs += a.inner(&b.resolvent(1))?;
    }
    Ok(CovarianceComparison {
        helffer_sjostrand: hs,
        direct: x.inner(y)? - x.mean() * y.mean(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoincareReport {
    pub order: u8,
    pub variance: f64,
    /// `E ||DX||^2` (order 1).
    pub dirichlet: f64,
    /// `2 Var[<DX, (1+L)^{-1} DX>]^{1/2}` for the normalized `X` (order 2).
    pub middle: f64,
    /// `3 E[||D^2 X||_op^4]^{1/4} E[||DX||^4]^{1/4}` (order 2).
    pub outer: f64,
    pub holds: bool,
}

pub fn poincare_check(x: &ChaosExpansion, order: u8) -> Result<PoincareReport> {
    let variance = x.variance();
    match order {
        1 => {
            let dirichlet: f64 = malliavin_derivative(x).iter().map(|d| d.norm_squared()).sum();
            Ok(PoincareReport {
                order,
                variance,
                dirichlet,
                middle: f64::NAN,
                outer: f64::NAN,
                holds: variance <= dirichlet + 1e-10,
            })
        }
        2 => {
            if !(variance > 1e-14) {
                return Err(Error::ZeroVariance);
            }
            let xn = x.shifted(-x.mean()).scaled(1.0 / variance.sqrt());
            let r = xn.rank();
            let dx = malliavin_derivative(&xn);
            let rdx: Vec<ChaosExpansion> = dx.iter().map(|d| d.resolvent(1)).collect();
            let hess: Vec<Vec<ChaosExpansion>> = dx.iter().map(malliavin_derivative).collect();
            let p = xn.effective_degree().max(1);
            let grid = TensorGrid::new(r, (2 * p).max(2))?;
            let tables: Vec<Vec<f64>> = grid
                .nodes
                .iter()
                .map(|&v| {
                    let mut t = Vec::new();
                    hermite_values(v, xn.p_max(), &mut t);
                    t
                })
                .collect();
            let mut zs = Vec::new();
            let (mut grad4, mut op4) = (0.0, 0.0);
            let mut point_tables: Vec<Vec<f64>> = vec![Vec::new(); r];
            let mut h = DMatrix::<f64>::zeros(r, r);
            grid.for_each(|idx, w| {
                for (m, &i) in idx.iter().enumerate() {
                    point_tables[m].clone_from(&tables[i]);
                }
                let d: Vec<f64> = dx.iter().map(|e| e.eval_tables(&point_tables)).collect();
                let z: f64 = d
                    .iter()
                    .zip(&rdx)
                    .map(|(dv, re)| dv * re.eval_tables(&point_tables))
                    .sum();
                zs.push((w, z));
                let g2: f64 = d.iter().map(|v| v * v).sum();
                grad4 += w * g2 * g2;
                for a in 0..r {
                    for b in 0..r {
                        h[(a, b)] = hess[a][b].eval_tables(&point_tables);
                    }
                }
                let op = if r == 0 {
                    0.0
                } else {
                    h.clone().symmetric_eigenvalues().iter().fold(0.0f64, |m, e| m.max(e.abs()))
                };
                op4 += w * op.powi(4);
            });
            let z_mean: f64 = zs.iter().map(|(w, z)| w * z).sum();
            let z_var: f64 = zs.iter().map(|(w, z)| w * (z - z_mean).powi(2)).sum();
            let middle = 2.0 * z_var.sqrt();
            let outer = 3.0 * op4.powf(0.25) * grad4.powf(0.25);
            Ok(PoincareReport {
                order,
                variance,
                dirichlet: f64::NAN,
                middle,
                outer,
                holds: middle <= outer * (1.0 + 1e-8) + 1e-12,
            })
        }
        _ => Err(Error::InvalidParameter(format!("Poincare order must be 1 or 2, got {order}"))),
    }
}

/// Polynomial in the correlated variables `y`, as `(exponents, coefficient)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub n: usize,
    pub terms: Vec<(Vec<u32>, f64)>,
}

impl Polynomial {
    pub fn eval(&self, y: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| c * e.iter().zip(y).map(|(&k, v)| v.powi(k as i32)).product::<f64>())
            .sum()
    }

    pub fn degree(&self) -> usize {
        self.terms.iter().map(|(e, _)| e.iter().sum::<u32>() as usize).max().unwrap_or(0)
    }

    /// Between 1 and 6 monomials of total degree `<= degree`, coefficients
    /// uniform in `[-1, 1]`.
    pub fn random(n: usize, degree: usize, rng: &mut impl Rng) -> Self {
        let count = rng.gen_range(1..=6);
        let terms = (0..count)
            .map(|_| {
                let total = rng.gen_range(0..=degree as u32);
                let mut e = vec![0u32; n];
                for _ in 0..total {
                    e[rng.gen_range(0..n)] += 1;
                }
                (e, rng.gen_range(-1.0..1.0))
            })
            .collect();
        Self { n, terms }
    }
}

/// `B B^T` with `B` uniform in `[-1, 1]`, rank-deficient one time in four.
pub fn random_covariance(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut b: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    if n > 1 && rng.gen_bool(0.25) {
        let col = rng.gen_range(0..n);
        for i in 0..n {
            b[i * n + col] = 0.0;
        }
    }
    let mut cov = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cov[i * n + j] = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum();
        }
    }
    for i in 0..n {
        for j in 0..i {
            cov[j * n + i] = cov[i * n + j];
        }
    }
    cov
}

/// `E[f(A W)]` by tensor Gauss-Hermite quadrature, independent of the chaos
/// machinery.
pub fn gaussian_expectation(f: &dyn Fn(&[f64]) -> f64, model: &FiniteGaussianModel, nodes: usize) -> Result<f64> {
    let grid = TensorGrid::new(model.rank, nodes)?;
    let mut w = vec![0.0; model.rank];
    let mut y = vec![0.0; model.n];
    let mut total = 0.0;
    grid.for_each(|idx, weight| {
        for (m, &i) in idx.iter().enumerate() {
            w[m] = grid.nodes[i];
        }
        model.correlate(&w, &mut y);
        total += weight * f(&y);
    });
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub identity: String,
    pub inputs_hash: String,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_gap: f64,
    pub rel_gap: f64,
    pub passed: bool,
}

impl VerificationRecord {
    /// `scale` is the natural size of both sides (e.g. `||X|| ||Y||` for a
    /// covariance), so the relative gap stays meaningful when the true value is 0.
    fn equality(identity: &str, hash: &str, lhs: f64, rhs: f64, scale: f64, tol: f64) -> Self {
        let abs_gap = (lhs - rhs).abs();
        Self {
            identity: identity.into(),
            inputs_hash: hash.into(),
            lhs,
            rhs,
            abs_gap,
            rel_gap: abs_gap / lhs.abs().max(rhs.abs()).max(scale).max(1e-300),
            passed: abs_gap <= tol * (1.0 + lhs.abs()),
        }
    }

    fn inequality(identity: &str, hash: &str, lhs: f64, rhs: f64, passed: bool) -> Self {
        let abs_gap = (lhs - rhs).abs();
        Self {
            identity: identity.into(),
            inputs_hash: hash.into(),
            lhs,
            rhs,
            abs_gap,
            rel_gap: abs_gap / lhs.abs().max(rhs.abs()).max(1e-300),
            passed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub cases: usize,
    pub max_variables: usize,
    pub max_degree: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            cases: 100,
            max_variables: 4,
            max_degree: 6,
            seed: 0,
        }
    }
}

/// Randomized checks of Parseval, the Helffer-Sjostrand covariance identity,
/// `DL = (1+L)D`, mean preservation of `(1+L)^{-1}`, and both Poincare
/// inequalities, on random polynomial pairs and random Gram matrices.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<VerificationRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut records = Vec::new();
    for _ in 0..opts.cases {
        let n = rng.gen_range(1..=opts.max_variables.clamp(1, MAX_VARIABLES));
        let degree = rng.gen_range(1..=opts.max_degree.clamp(1, MAX_DEGREE));
        let cov = random_covariance(n, &mut rng);
        let px = Polynomial::random(n, degree, &mut rng);
        let py = Polynomial::random(n, degree, &mut rng);
        let hash = {
            let bytes = serde_json::to_vec(&(&cov, &px, &py))?;
            hex::encode(Sha256::digest(bytes))
        };
        let model = FiniteGaussianModel::new(n, cov)?;
        let gx = |y: &[f64]| px.eval(y);
        let gy = |y: &[f64]| py.eval(y);
        let x = hermite_expand(&gx, &model, degree)?;
        let y = hermite_expand(&gy, &model, degree)?;
        let nodes = degree + 1;

        let quad_norm = gaussian_expectation(&|v| px.eval(v).powi(2), &model, nodes)?;
        records.push(VerificationRecord::equality("parseval", &hash, quad_norm, x.norm_squared(), quad_norm, 1e-8));

        let exy = gaussian_expectation(&|v| px.eval(v) * py.eval(v), &model, nodes)?;
        let ex = gaussian_expectation(&gx, &model, nodes)?;
        let ey = gaussian_expectation(&gy, &model, nodes)?;
        let hs = hs_covariance(&x, &y)?;
        records.push(VerificationRecord::equality(
            "helffer_sjostrand",
            &hash,
            exy - ex * ey,
            hs.helffer_sjostrand,
            (x.norm_squared() * y.norm_squared()).sqrt(),
            1e-8,
        ));

        let dlx = malliavin_derivative(&x.ou());
        let ldx: Vec<ChaosExpansion> = malliavin_derivative(&x).iter().map(|d| d.ou()).collect();
        let mut gap: f64 = 0.0;
        let mut size: f64 = 0.0;
        for (a, (b, d)) in dlx.iter().zip(ldx.iter().zip(malliavin_derivative(&x))) {
            for ((ca, cb), cd) in a.coefficients.iter().zip(&b.coefficients).zip(&d.coefficients) {
                gap = gap.max((ca - (cb + cd)).abs());
                size = size.max(ca.abs());
            }
        }
        records.push(VerificationRecord::equality("commutation_dl", &hash, size, size + gap, size, 1e-12));

        let rx = x.resolvent(1);
        let resolvent_mean = {
            let grid = TensorGrid::new(model.rank, nodes)?;
            let mut total = 0.0;
            let mut w = vec![0.0; model.rank];
            grid.for_each(|idx, weight| {
                for (m, &i) in idx.iter().enumerate() {
                    w[m] = grid.nodes[i];
                }
                total += weight * rx.eval(&w);
            });
            total
        };
        records.push(VerificationRecord::equality(
            "mean_preservation",
            &hash,
            resolvent_mean,
            ex,
            x.norm_squared().sqrt(),
            1e-10,
        ));

        let first = poincare_check(&x, 1)?;
        records.push(VerificationRecord::inequality(
            "poincare_first",
            &hash,
            first.variance,
            first.dirichlet,
            first.holds,
        ));
        if x.variance() > 1e-10 {
            let second = poincare_check(&x, 2)?;
            records.push(VerificationRecord::inequality(
                "poincare_second",
                &hash,
                second.middle,
                second.outer,
                second.holds,
            ));
        }
    }
    Ok(records)
}
