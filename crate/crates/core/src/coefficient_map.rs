//! Maps `a0: R^kappa -> R^{d x d}` and the coefficient fields `a = a0(G + z)`.

use std::fmt::Debug;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian_field::FieldSample;
use crate::grid::LatticeGrid;

/// A bounded `C^2` matrix-valued map with analytic first and second
/// derivatives. Matrices are `d x d`, row-major.
pub trait CoefficientMap: Send + Sync + Debug {
    fn id(&self) -> String;
    fn kappa(&self) -> usize;
    fn dim(&self) -> usize;
    /// Ellipticity constant in `(0, 1]`.
    fn lambda(&self) -> f64;
    fn is_symmetric(&self) -> bool;
    fn eval(&self, y: &[f64], out: &mut [f64]);
    /// `d a0 / d y_l`.
    fn d1(&self, y: &[f64], l: usize, out: &mut [f64]);
    /// `d^2 a0 / d y_l d y_m`.
    fn d2(&self, y: &[f64], l: usize, m: usize, out: &mut [f64]);
}

/// Scalar profiles `s: R -> [lambda, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarProfile {
    Constant { value: f64 },
    /// `lambda + (1 - lambda) / (1 + e^{-g})`
    Sigmoid { lambda: f64 },
    /// `lambda + (1 - lambda) e^{-g^2}`
    Bump { lambda: f64 },
}

impl ScalarProfile {
    pub fn value(&self, g: f64) -> f64 {
        match *self {
            ScalarProfile::Constant { value } => value,
            ScalarProfile::Sigmoid { lambda } => lambda + (1.0 - lambda) * logistic(g),
            ScalarProfile::Bump { lambda } => lambda + (1.0 - lambda) * (-g * g).exp(),
        }
    }

    pub fn d1(&self, g: f64) -> f64 {
        match *self {
            ScalarProfile::Constant { .. } => 0.0,
            ScalarProfile::Sigmoid { lambda } => {
                let s = logistic(g);
                (1.0 - lambda) * s * (1.0 - s)
            }
            ScalarProfile::Bump { lambda } => -2.0 * g * (1.0 - lambda) * (-g * g).exp(),
        }
    }

    pub fn d2(&self, g: f64) -> f64 {
        match *self {
            ScalarProfile::Constant { .. } => 0.0,
            ScalarProfile::Sigmoid { lambda } => {
                let s = logistic(g);
                (1.0 - lambda) * s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            ScalarProfile::Bump { lambda } => (4.0 * g * g - 2.0) * (1.0 - lambda) * (-g * g).exp(),
        }
    }

    /// Infimum of the profile.
    pub fn lower_bound(&self) -> f64 {
        match *self {
            ScalarProfile::Constant { value } => value,
            ScalarProfile::Sigmoid { lambda } | ScalarProfile::Bump { lambda } => lambda,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, ScalarProfile::Constant { .. })
    }

    fn validate(&self) -> Result<()> {
        match *self {
            ScalarProfile::Constant { value } if value > 0.0 && value <= 1.0 => Ok(()),
            ScalarProfile::Sigmoid { lambda } | ScalarProfile::Bump { lambda }
                if lambda > 0.0 && lambda < 1.0 =>
            {
                Ok(())
            }
            other => Err(Error::InvalidParameter(format!(
                "profile {other:?} does not map into (0, 1]"
            ))),
        }
    }

    fn label(&self) -> String {
        match *self {
            ScalarProfile::Constant { value } => format!("const({value})"),
            ScalarProfile::Sigmoid { lambda } => format!("sigmoid({lambda})"),
            ScalarProfile::Bump { lambda } => format!("bump({lambda})"),
        }
    }
}

fn logistic(g: f64) -> f64 {
    if g >= 0.0 {
        1.0 / (1.0 + (-g).exp())
    } else {
        let e = g.exp();
        e / (1.0 + e)
    }
}

/// `a0(y) = A` for a fixed matrix.
#[derive(Debug, Clone)]
pub struct ConstantMap {
    matrix: Vec<f64>,
    dim: usize,
    kappa: usize,
    lambda: f64,
}

impl ConstantMap {
    pub fn new(matrix: Vec<f64>, dim: usize, kappa: usize) -> Result<Self> {
        if matrix.len() != dim * dim {
            return Err(Error::DimensionMismatch("matrix is not d x d".into()));
        }
        let lambda = min_symmetric_eigenvalue(&matrix, dim);
        if !(lambda > 0.0) {
            return Err(Error::InvalidParameter("constant matrix is not elliptic".into()));
        }
        Ok(Self {
            matrix,
            dim,
            kappa,
            lambda: lambda.min(1.0),
        })
    }

    /// `a0 = value * Id`.
    pub fn scalar(value: f64, dim: usize, kappa: usize) -> Result<Self> {
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = value;
        }
        Self::new(m, dim, kappa)
    }
}

impl CoefficientMap for ConstantMap {
    fn id(&self) -> String {
        format!("constant{:?}", self.matrix)
    }
    fn kappa(&self) -> usize {
        self.kappa
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn lambda(&self) -> f64 {
        self.lambda
    }
    fn is_symmetric(&self) -> bool {
        (0..self.dim).all(|i| (0..self.dim).all(|j| self.matrix[i * self.dim + j] == self.matrix[j * self.dim + i]))
    }
    fn eval(&self, _y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.matrix);
    }
    fn d1(&self, _y: &[f64], _l: usize, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn d2(&self, _y: &[f64], _l: usize, _m: usize, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// `a0(g) = s(g) Id` with `kappa = 1`.
#[derive(Debug, Clone)]
pub struct IsotropicMap {
    pub profile: ScalarProfile,
    dim: usize,
}

impl IsotropicMap {
    pub fn new(profile: ScalarProfile, dim: usize) -> Result<Self> {
        profile.validate()?;
        Ok(Self { profile, dim })
    }
}

impl CoefficientMap for IsotropicMap {
    fn id(&self) -> String {
        format!("isotropic:{}", self.profile.label())
    }
    fn kappa(&self) -> usize {
        1
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn lambda(&self) -> f64 {
        self.profile.lower_bound()
    }
    fn is_symmetric(&self) -> bool {
        true
    }
    fn eval(&self, y: &[f64], out: &mut [f64]) {
        fill_scaled_identity(out, self.dim, self.profile.value(y[0]));
    }
    fn d1(&self, y: &[f64], _l: usize, out: &mut [f64]) {
        fill_scaled_identity(out, self.dim, self.profile.d1(y[0]));
    }
    fn d2(&self, y: &[f64], _l: usize, _m: usize, out: &mut [f64]) {
        fill_scaled_identity(out, self.dim, self.profile.d2(y[0]));
    }
}

/// `a0(y) = diag(s_1(y_1), ..., s_d(y_d))` with `kappa = d`.
#[derive(Debug, Clone)]
pub struct DiagonalMap {
    pub profiles: Vec<ScalarProfile>,
}

impl DiagonalMap {
    /// Axes whose profile is constant; such axes violate the non-constancy
    /// hypothesis of the diagonal non-degeneracy criterion.
    pub fn constant_axes(&self) -> Vec<usize> {
        self.profiles
            .iter()
            .enumerate()
            .filter(|(_, p)| p.is_constant())
            .map(|(i, _)| i)
            .collect()
    }
}

impl CoefficientMap for DiagonalMap {
    fn id(&self) -> String {
        let labels: Vec<String> = self.profiles.iter().map(|p| p.label()).collect();
        format!("diagonal:[{}]", labels.join(","))
    }
    fn kappa(&self) -> usize {
        self.profiles.len()
    }
    fn dim(&self) -> usize {
        self.profiles.len()
    }
    fn lambda(&self) -> f64 {
        self.profiles.iter().map(|p| p.lower_bound()).fold(1.0, f64::min)
    }
    fn is_symmetric(&self) -> bool {
        true
    }
    fn eval(&self, y: &[f64], out: &mut [f64]) {
        let d = self.dim();
        out.fill(0.0);
        for (i, p) in self.profiles.iter().enumerate() {
            out[i * d + i] = p.value(y[i]);
        }
    }
    fn d1(&self, y: &[f64], l: usize, out: &mut [f64]) {
        let d = self.dim();
        out.fill(0.0);
        out[l * d + l] = self.profiles[l].d1(y[l]);
    }
    fn d2(&self, y: &[f64], l: usize, m: usize, out: &mut [f64]) {
        let d = self.dim();
        out.fill(0.0);
        if l == m {
            out[l * d + l] = self.profiles[l].d2(y[l]);
        }
    }
}

fn fill_scaled_identity(out: &mut [f64], dim: usize, value: f64) {
    out.fill(0.0);
    for i in 0..dim {
        out[i * dim + i] = value;
    }
}

/// Scalar sigmoid family; its derivative is positive everywhere.
pub fn family_sigmoid(lambda: f64, dim: usize) -> Result<IsotropicMap> {
    IsotropicMap::new(ScalarProfile::Sigmoid { lambda }, dim)
}

/// Scalar bump family: even, `sup a0 = 1`, `a0 -> lambda` at infinity.
pub fn family_bump(lambda: f64, dim: usize) -> Result<IsotropicMap> {
    IsotropicMap::new(ScalarProfile::Bump { lambda }, dim)
}

/// Diagonal family, one profile per axis (`kappa = d`). Constant profiles are
/// accepted and reported by [`DiagonalMap::constant_axes`].
pub fn family_diagonal(profiles: Vec<ScalarProfile>) -> Result<DiagonalMap> {
    if profiles.is_empty() {
        return Err(Error::InvalidParameter("need at least one axis".into()));
    }
    for p in &profiles {
        p.validate()?;
    }
    Ok(DiagonalMap { profiles })
}

/// Serializable choice of a builtin family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSpec {
    Sigmoid { lambda: f64 },
    Bump { lambda: f64 },
    Diagonal { profiles: Vec<ScalarProfile> },
    Constant { value: f64 },
}

impl MapSpec {
    pub fn build(&self, dim: usize) -> Result<Box<dyn CoefficientMap>> {
        Ok(match self {
            MapSpec::Sigmoid { lambda } => Box::new(family_sigmoid(*lambda, dim)?),
            MapSpec::Bump { lambda } => Box::new(family_bump(*lambda, dim)?),
            MapSpec::Diagonal { profiles } => {
                if profiles.len() != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "diagonal family needs {dim} profiles, got {}",
                        profiles.len()
                    )));
                }
                Box::new(family_diagonal(profiles.clone())?)
            }
            MapSpec::Constant { value } => Box::new(ConstantMap::scalar(*value, dim, 1)?),
        })
    }
}

/// Result of probing a map for boundedness, ellipticity and derivative
/// consistency.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificate {
    pub probes: usize,
    pub max_norm_ratio: f64,
    pub min_ellipticity_ratio: f64,
    pub max_d1_error: f64,
    pub max_d2_error: f64,
    pub symmetric_ok: bool,
}

/// Relative tolerance for finite-difference derivative checks.
pub const DERIVATIVE_TOLERANCE: f64 = 1e-6;

/// Probe `map` at `probes` random points `y` and directions `xi`. Fails if
/// `|a0(y) xi| > |xi|` or `xi . a0(y) xi < lambda |xi|^2` anywhere.
pub fn certify(map: &dyn CoefficientMap, probes: usize, seed: u64) -> Result<Certificate> {
    let d = map.dim();
    let kappa = map.kappa();
    let lambda = map.lambda();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = vec![0.0; d * d];
    let mut deriv = vec![0.0; d * d];
    let mut y = vec![0.0; kappa];
    let mut xi = vec![0.0; d];
    let mut cert = Certificate {
        probes,
        max_norm_ratio: 0.0,
        min_ellipticity_ratio: f64::INFINITY,
        max_d1_error: 0.0,
        max_d2_error: 0.0,
        symmetric_ok: true,
    };
    for probe in 0..probes {
        for v in y.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v = 2.0 * g;
        }
        for v in xi.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let xi2: f64 = xi.iter().map(|v| v * v).sum();
        if xi2 == 0.0 {
            continue;
        }
        map.eval(&y, &mut a);
        let (norm2, quad) = apply_checks(&a, &xi, d);
        let norm_ratio = (norm2 / xi2).sqrt();
        let ell_ratio = quad / (lambda * xi2);
        cert.max_norm_ratio = cert.max_norm_ratio.max(norm_ratio);
        cert.min_ellipticity_ratio = cert.min_ellipticity_ratio.min(ell_ratio);
        if norm_ratio > 1.0 + 1e-12 || ell_ratio < 1.0 - 1e-12 {
            return Err(Error::Ellipticity {
                probe,
                detail: format!("|a xi|/|xi| = {norm_ratio}, xi.a xi/(lambda|xi|^2) = {ell_ratio}"),
            });
        }
        if map.is_symmetric() {
            cert.symmetric_ok &= (0..d).all(|i| (0..d).all(|j| a[i * d + j] == a[j * d + i]));
        }
        for l in 0..kappa {
            map.d1(&y, l, &mut deriv);
            let fd = extrapolated_difference(&mut y, l, d * d, |p, out| map.eval(p, out));
            cert.max_d1_error = cert.max_d1_error.max(relative_error(&fd, &deriv));
            for m in 0..kappa {
                map.d2(&y, l, m, &mut deriv);
                let fd = extrapolated_difference(&mut y, m, d * d, |p, out| map.d1(p, l, out));
                cert.max_d2_error = cert.max_d2_error.max(relative_error(&fd, &deriv));
            }
        }
    }
    Ok(cert)
}

/// Richardson-extrapolated central difference of `f` along coordinate `axis`.
fn extrapolated_difference(
    y: &mut [f64],
    axis: usize,
    len: usize,
    f: impl Fn(&[f64], &mut [f64]),
) -> Vec<f64> {
    let orig = y[axis];
    let mut plus = vec![0.0; len];
    let mut minus = vec![0.0; len];
    let mut central = |h: f64| {
        y[axis] = orig + h;
        f(y, &mut plus);
        y[axis] = orig - h;
        f(y, &mut minus);
        y[axis] = orig;
        plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect::<Vec<f64>>()
    };
    let coarse = central(2e-3);
    let fine = central(1e-3);
    fine.iter().zip(&coarse).map(|(f, c)| (4.0 * f - c) / 3.0).collect()
}

fn relative_error(fd: &[f64], exact: &[f64]) -> f64 {
    fd.iter()
        .zip(exact)
        .map(|(f, e)| (f - e).abs() / (e.abs() + 1e-4))
        .fold(0.0, f64::max)
}

fn apply_checks(a: &[f64], xi: &[f64], d: usize) -> (f64, f64) {
    let mut norm2 = 0.0;
    let mut quad = 0.0;
    for i in 0..d {
        let ai: f64 = (0..d).map(|j| a[i * d + j] * xi[j]).sum();
        norm2 += ai * ai;
        quad += xi[i] * ai;
    }
    (norm2, quad)
}

fn min_symmetric_eigenvalue(m: &[f64], d: usize) -> f64 {
    let mat = nalgebra::DMatrix::from_fn(d, d, |i, j| 0.5 * (m[i * d + j] + m[j * d + i]));
    mat.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub map_id: String,
    pub seed: u64,
    pub sample_index: u64,
    pub shift: Vec<f64>,
}

/// A `d x d` matrix per site, layout `[site][row][col]`.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    pub grid: LatticeGrid,
    pub values: Vec<f64>,
    pub lambda: f64,
    pub symmetric: bool,
    pub provenance: Provenance,
}

impl CoefficientField {
    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn at(&self, site: usize) -> &[f64] {
        let dd = self.dim() * self.dim();
        &self.values[site * dd..(site + 1) * dd]
    }

    /// Deterministic medium from a scalar function of the site coordinates,
    /// `a(x) = f(x) Id` (laminates, checkerboards, constants).
    pub fn from_scalar_fn(grid: LatticeGrid, label: &str, f: impl Fn(&[usize]) -> f64) -> Result<Self> {
        let d = grid.dim();
        let mut coords = vec![0usize; d];
        let mut values = vec![0.0; grid.len() * d * d];
        let mut lo = f64::INFINITY;
        for site in 0..grid.len() {
            grid.coords(site, &mut coords);
            let v = f(&coords);
            lo = lo.min(v);
            fill_scaled_identity(&mut values[site * d * d..(site + 1) * d * d], d, v);
        }
        let field = Self {
            grid,
            values,
            lambda: lo,
            symmetric: true,
            provenance: Provenance {
                map_id: label.to_string(),
                seed: 0,
                sample_index: 0,
                shift: vec![],
            },
        };
        field.spot_check(1000)?;
        Ok(field)
    }

    /// Sitewise boundedness and ellipticity on up to `count` sites spread
    /// evenly over the torus.
    pub fn spot_check(&self, count: usize) -> Result<()> {
        let d = self.dim();
        let n = self.grid.len();
        let step = (n / count.max(1)).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut xi = vec![0.0; d];
        for site in (0..n).step_by(step) {
            let a = self.at(site);
            for dir in 0..=d {
                if dir < d {
                    xi.fill(0.0);
                    xi[dir] = 1.0;
                } else {
                    for v in xi.iter_mut() {
                        *v = rng.gen_range(-1.0..1.0);
                    }
                }
                let xi2: f64 = xi.iter().map(|v| v * v).sum();
                if xi2 == 0.0 {
                    continue;
                }
                let (norm2, quad) = apply_checks(a, &xi, d);
                if norm2 > xi2 * (1.0 + 1e-12) || quad < self.lambda * xi2 * (1.0 - 1e-12) || !(quad > 0.0) {
                    return Err(Error::Ellipticity {
                        probe: site,
                        detail: format!("matrix {a:?} fails bounds with lambda = {}", self.lambda),
                    });
                }
            }
        }
        Ok(())
    }

    /// Sitewise adjoint field `a^T`.
    pub fn transposed(&self) -> Self {
        let d = self.dim();
        let mut out = self.clone();
        for (dst, src) in out.values.chunks_exact_mut(d * d).zip(self.values.chunks_exact(d * d)) {
            for i in 0..d {
                for j in 0..d {
                    dst[i * d + j] = src[j * d + i];
                }
            }
        }
        out
    }

    pub fn mean_matrix(&self) -> Vec<f64> {
        let dd = self.dim() * self.dim();
        let mut mean = vec![0.0; dd];
        for chunk in self.values.chunks_exact(dd) {
            for (m, v) in mean.iter_mut().zip(chunk) {
                *m += v;
            }
        }
        let n = self.grid.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// `a(x) = a0(G(x) + z)` sitewise, followed by an ellipticity spot-check.
pub fn evaluate_coefficient(
    map: &dyn CoefficientMap,
    field: &FieldSample,
    shift: &[f64],
) -> Result<CoefficientField> {
    let kappa = map.kappa();
    if field.kappa != kappa || shift.len() != kappa {
        return Err(Error::DimensionMismatch(format!(
            "map expects kappa = {kappa}, field has {}, shift has {}",
            field.kappa,
            shift.len()
        )));
    }
    if map.dim() != field.grid.dim() {
        return Err(Error::DimensionMismatch(format!(
            "map is {}-dimensional, grid is {}-dimensional",
            map.dim(),
            field.grid.dim()
        )));
    }
    let d = map.dim();
    let mut values = vec![0.0; field.grid.len() * d * d];
    let mut y = vec![0.0; kappa];
    for (site, out) in values.chunks_exact_mut(d * d).enumerate() {
        for (l, v) in y.iter_mut().enumerate() {
            *v = field.value(site, l) + shift[l];
        }
        map.eval(&y, out);
    }
    let coeff = CoefficientField {
        grid: field.grid,
        values,
        lambda: map.lambda(),
        symmetric: map.is_symmetric(),
        provenance: Provenance {
            map_id: map.id(),
            seed: field.seed,
            sample_index: field.sample_index,
            shift: shift.to_vec(),
        },
    };
    coeff.spot_check(1000)?;
    Ok(coeff)
}

/// `d a0 / d y_l (G(x) + z)` per site, layout `[site][row][col]`.
pub fn derivative_field(map: &dyn CoefficientMap, field: &FieldSample, shift: &[f64], l: usize) -> Vec<f64> {
    let d = map.dim();
    let kappa = map.kappa();
    let mut out = vec![0.0; field.grid.len() * d * d];
    let mut y = vec![0.0; kappa];
    for (site, chunk) in out.chunks_exact_mut(d * d).enumerate() {
        for (m, v) in y.iter_mut().enumerate() {
            *v = field.value(site, m) + shift[m];
        }
        map.d1(&y, l, chunk);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian_field::{sample_field, CovarianceModel};

    #[test]
    fn builtin_families_pass_certificate() {
        let maps: Vec<Box<dyn CoefficientMap>> = vec![
            Box::new(family_sigmoid(0.25, 2).unwrap()),
            Box::new(family_bump(0.3, 2).unwrap()),
            Box::new(
                family_diagonal(vec![
                    ScalarProfile::Sigmoid { lambda: 0.25 },
                    ScalarProfile::Bump { lambda: 0.5 },
                ])
                .unwrap(),
            ),
            Box::new(ConstantMap::scalar(0.7, 3, 1).unwrap()),
        ];
        for map in &maps {
            let cert = certify(map.as_ref(), 1000, 3).unwrap();
            assert!(cert.max_d1_error < DERIVATIVE_TOLERANCE, "{} {:?}", map.id(), cert);
            assert!(cert.max_d2_error < DERIVATIVE_TOLERANCE, "{} {:?}", map.id(), cert);
            assert!(cert.symmetric_ok);
        }
    }

    #[test]
    fn sigmoid_values() {
        let map = family_sigmoid(0.25, 2).unwrap();
        let mut a = [0.0; 4];
        map.eval(&[0.0], &mut a);
        assert_eq!(a, [0.625, 0.0, 0.0, 0.625]);
        map.d1(&[0.0], 0, &mut a);
        assert!((a[0] - 0.75 / 4.0).abs() < 1e-15 && a[1] == 0.0);
        map.eval(&[40.0], &mut a);
        assert!((a[0] - 1.0).abs() < 1e-12);
        map.eval(&[-40.0], &mut a);
        assert!((a[0] - 0.25).abs() < 1e-12);
        assert!(family_sigmoid(1.0, 2).is_err());
    }

    #[test]
    fn bump_values() {
        let map = family_bump(0.2, 2).unwrap();
        let mut a = [0.0; 4];
        map.eval(&[0.0], &mut a);
        assert_eq!(a[0], 1.0);
        let mut b = [0.0; 4];
        map.eval(&[2.0], &mut a);
        map.eval(&[-2.0], &mut b);
        assert_eq!(a, b);
        assert!((a[0] - (0.2 + 0.8 * (-4.0f64).exp())).abs() < 1e-15);
        map.d1(&[0.0], 0, &mut a);
        assert_eq!(a[0], 0.0);
    }

    #[test]
    fn diagonal_family_structure() {
        let map = family_diagonal(vec![ScalarProfile::Sigmoid { lambda: 0.25 }; 2]).unwrap();
        let mut a = [0.0; 4];
        map.eval(&[0.0, 0.0], &mut a);
        assert_eq!(a, [0.625, 0.0, 0.0, 0.625]);
        map.d1(&[0.3, -1.0], 0, &mut a);
        assert!(a[0] > 0.0 && a[1] == 0.0 && a[2] == 0.0 && a[3] == 0.0);
        let flagged = family_diagonal(vec![
            ScalarProfile::Constant { value: 0.5 },
            ScalarProfile::Sigmoid { lambda: 0.25 },
        ])
        .unwrap();
        assert_eq!(flagged.constant_axes(), vec![0]);
    }

    #[test]
    fn evaluation_and_shift_covariance() {
        let grid = LatticeGrid::new(2, 16).unwrap();
        let model = CovarianceModel::build(1.0, 1, 20.0, grid).unwrap();
        let g = sample_field(&model, 3, 1);
        let map = family_bump(0.25, 2).unwrap();
        let a = evaluate_coefficient(&map, &g, &[0.8]).unwrap();
        let b = evaluate_coefficient(&map, &g.shifted(&[0.8]), &[0.0]).unwrap();
        assert_eq!(a.values, b.values);

        let constant = ConstantMap::scalar(0.7, 2, 1).unwrap();
        let c = evaluate_coefficient(&constant, &g, &[0.0]).unwrap();
        assert!(c.values.chunks(4).all(|m| m == [0.7, 0.0, 0.0, 0.7]));

        let frozen = FieldSample::constant(grid, &[-3.0]);
        let peak = evaluate_coefficient(&map, &frozen, &[3.0]).unwrap();
        assert!(peak.values.chunks(4).all(|m| m == [1.0, 0.0, 0.0, 1.0]));

        assert!(matches!(
            evaluate_coefficient(&map, &g, &[0.0, 1.0]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn spot_check_catches_non_elliptic_field() {
        let grid = LatticeGrid::new(2, 8).unwrap();
        let mut field = CoefficientField::from_scalar_fn(grid, "c", |_| 0.5).unwrap();
        field.values[0] = 2.0;
        assert!(field.spot_check(64).is_err());
    }
}
