//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::time::{Duration, Instant};

use homlab::coefficient_map::{CoefficientField, ConstantMap, MapSpec};
use homlab::commutator::{compute_commutator, TestFunction};
use homlab::corrector::{corrector_growth_scan, solve_corrector, GrowthScanSpec, SolverOptions};
use homlab::gaussian_field::{hls_max_ratio, random_hls_family, sample_field, CovarianceModel};
use homlab::malliavin::{run_suite, SuiteOptions};
use homlab::statistics::{
    covariance_structure_check, degeneracy_scan, normality_distances, run_ensemble, variance_scaling_fit,
    AbarMode, DegeneracyConfig, EnsembleConfig, Verdict,
};
use homlab::LatticeGrid;

fn verdict(number: u32, name: &str, pass: bool, detail: String) {
    println!(
        "criterion {number:>2} {} {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {number} ({name}) failed: {detail}");
}

fn laminate(side: usize) -> CoefficientField {
    let grid = LatticeGrid::new(2, side).unwrap();
    CoefficientField::from_scalar_fn(grid, "laminate", |c| if c[0] < side / 2 { 1.0 } else { 0.5 }).unwrap()
}

fn checkerboard(side: usize) -> CoefficientField {
    let grid = LatticeGrid::new(2, side).unwrap();
    let h = side / 2;
    CoefficientField::from_scalar_fn(grid, "checkerboard", |c| if (c[0] < h) == (c[1] < h) { 1.0 } else { 0.25 })
        .unwrap()
}

fn named(id: &str, radius: f64, offset: Vec<f64>) -> TestFunction {
    TestFunction::new(id.into(), offset, radius, vec![1.0, 0.0, 0.0, 0.0]).unwrap()
}

fn ensemble(beta: f64, side: usize, epsilons: Vec<f64>, fs: Vec<TestFunction>, samples: usize, mode: AbarMode) -> EnsembleConfig {
    EnsembleConfig {
        dim: 2,
        beta,
        decay_constant: 20.0,
        map: MapSpec::Sigmoid { lambda: 0.25 },
        side,
        epsilons,
        test_functions: fs,
        samples,
        seed: 20260,
        shift: vec![],
        abar_mode: mode,
        tolerance: 1e-8,
    }
}

#[test]
fn criterion_01_constant_medium_null() {
    let start = Instant::now();
    let grid = LatticeGrid::new(2, 64).unwrap();
    let model = CovarianceModel::build(4.0, 1, 20.0, grid).unwrap();
    let map = ConstantMap::scalar(0.7, 2, 1).unwrap();
    let g = sample_field(&model, 1, 0);
    let coeff = homlab::coefficient_map::evaluate_coefficient(&map, &g, &[0.0]).unwrap();
    let sol = solve_corrector(&coeff, 1e-10).unwrap();
    let xi = compute_commutator(&coeff, &sol, &sol.abar_per).unwrap();
    let phi_max = sol.phi.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let xi_max = xi.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let abar_err = (0..4)
        .map(|e| (sol.abar_per[e] - if e % 3 == 0 { 0.7 } else { 0.0 }).abs())
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let pass = phi_max == 0.0 && xi_max < 1e-14 && abar_err < 1e-14 && elapsed < Duration::from_secs(1);
    verdict(
        1,
        "constant-medium null",
        pass,
        format!("max|phi| = {phi_max:e}, max|Xi| = {xi_max:e}, |abar - a| = {abar_err:e}, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_02_laminate_exactness() {
    let start = Instant::now();
    let coeff = laminate(256);
    let sol = solve_corrector(&coeff, 1e-12).unwrap();
    let abar_err = [
        (sol.abar_per[0] - 2.0 / 3.0).abs(),
        sol.abar_per[1].abs(),
        sol.abar_per[2].abs(),
        (sol.abar_per[3] - 0.75).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let xi = compute_commutator(&coeff, &sol, &sol.abar_per).unwrap();
    let mut xi_err: f64 = 0.0;
    for site in 0..coeff.grid.len() {
        let sign = if coeff.at(site)[0] == 1.0 { 1.0 } else { -1.0 };
        xi_err = xi_err.max((xi.entry(site, 0, 0) - sign * 2.0 / 9.0).abs());
    }
    let elapsed = start.elapsed();
    let pass = abar_err < 1e-10 && xi_err < 1e-8 && elapsed < Duration::from_secs(10);
    verdict(
        2,
        "laminate exactness",
        pass,
        format!("|abar - diag(2/3, 3/4)| = {abar_err:e}, |Xi_11 -/+ 2/9| = {xi_err:e}, N = 256, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_03_checkerboard_duality() {
    let start = Instant::now();
    let values: Vec<f64> = [64usize, 128, 256]
        .iter()
        .map(|&s| solve_corrector(&checkerboard(s), 1e-10).unwrap().abar_per[0])
        .collect();
    // First-order Richardson in 1/N on the two finest grids.
    let extrapolated = 2.0 * values[2] - values[1];
    let rel = (extrapolated - 0.5).abs() / 0.5;
    let elapsed = start.elapsed();
    let pass = rel < 0.01 && elapsed < Duration::from_secs(120);
    verdict(
        3,
        "checkerboard duality",
        pass,
        format!("abar_11 on N = 64, 128, 256: {values:.5?}, extrapolated {extrapolated:.5}, rel. error {rel:.2e}, {elapsed:.2?}"),
    );
}

fn scaling_check(side: usize, samples: usize, tolerance: f64, label: &str) {
    let eps = vec![1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
    let mut lines = Vec::new();
    let mut pass = true;
    for beta in [4.0, 1.0] {
        let cfg = ensemble(beta, side, eps.clone(), vec![named("F", 1.25, vec![0.0, 0.0])], samples, AbarMode::PerSample);
        let report = run_ensemble(&cfg, 1).unwrap();
        let fit = variance_scaling_fit(&report, 0, tolerance).unwrap();
        pass &= fit.verdict == Verdict::Pass;
        lines.push(format!(
            "beta = {beta}: slope {:.3} +/- {:.3} (expected {})",
            fit.slope, fit.slope_stderr, fit.expected_slope
        ));
    }
    verdict(
        4,
        label,
        pass,
        format!("{}; N = {side}, M = {samples}, tolerance {tolerance}", lines.join("; ")),
    );
}

#[test]
fn criterion_04_variance_scaling_smoke() {
    scaling_check(256, 200, 0.25, "variance-scaling exponents (smoke)");
}

#[test]
#[ignore = "long run: N = 512, M = 1000"]
fn criterion_04_variance_scaling_full() {
    scaling_check(512, 1000, 0.15, "variance-scaling exponents (full)");
}

#[test]
fn criterion_05_non_integrable_covariance_factorization() {
    let fs = vec![named("left", 1.0, vec![-1.2, 0.0]), named("right", 1.0, vec![1.2, 0.0])];
    let cfg = ensemble(1.0, 256, vec![1.0 / 32.0], fs, 1000, AbarMode::EnsembleMean);
    let report = run_ensemble(&cfg, 1).unwrap();
    let check = covariance_structure_check(&report, 0, 1).unwrap();
    let row = &check.rows[0];
    verdict(
        5,
        "non-integrable covariance factorization",
        check.verdict == Verdict::Pass,
        format!(
            "eps = 1/32, Cov = {:.4e} +/- {:.1e}, prediction {:.4e}, ratio {:.3} +/- {:.3}",
            row.empirical,
            row.empirical_stderr,
            row.prediction.unwrap_or(f64::NAN),
            row.ratio.unwrap_or(f64::NAN),
            row.ratio_stderr.unwrap_or(f64::NAN)
        ),
    );
}

#[test]
fn criterion_06_integrable_plateau() {
    let cfg = ensemble(
        4.0,
        128,
        vec![1.0 / 32.0, 1.0 / 64.0],
        vec![named("F", 0.9, vec![0.0, 0.0])],
        1000,
        AbarMode::EnsembleMean,
    );
    let report = run_ensemble(&cfg, 1).unwrap();
    let check = covariance_structure_check(&report, 0, 0).unwrap();
    let detail: Vec<String> = check
        .rows
        .iter()
        .map(|r| format!("Var(eps = {}) = {:.4} +/- {:.4}", r.epsilon, r.empirical, r.empirical_stderr))
        .collect();
    verdict(6, "integrable plateau", check.verdict == Verdict::Pass, detail.join(", "));
}

#[test]
fn criterion_07_normality_trend() {
    let samples = 1000;
    let cfg = ensemble(
        1.0,
        128,
        vec![1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0],
        vec![named("F", 1.25, vec![0.0, 0.0])],
        samples,
        AbarMode::PerSample,
    );
    let report = run_ensemble(&cfg, 1).unwrap();
    let ks: Vec<f64> = report
        .tables
        .iter()
        .map(|t| normality_distances(&t.values).unwrap().kolmogorov_smirnov)
        .collect();
    let noise = 1.0 / (samples as f64).sqrt();
    let trend = ks.windows(2).all(|w| w[1] <= w[0] + noise);
    let last = *ks.last().unwrap();
    verdict(
        7,
        "normality trend",
        last < 0.06 && trend,
        format!("KS at eps = 1/8, 1/16, 1/32: {ks:.4?}; noise allowance {noise:.3}"),
    );
}

#[test]
fn criterion_08_corrector_growth() {
    let map = homlab::coefficient_map::family_sigmoid(0.25, 2).unwrap();
    let sides = [32usize, 64, 128, 256];
    let scan = |beta: f64| {
        corrector_growth_scan(&GrowthScanSpec {
            map: &map,
            beta,
            decay_constant: 20.0,
            sides: &sides,
            samples: 64,
            seed: 8,
            workers: 1,
            solver: SolverOptions::with_tolerance(1e-8),
        })
        .unwrap()
    };
    let integrable = scan(4.0);
    let variation = integrable.ratio_variation.unwrap();
    let non_integrable = scan(1.0);
    let exponent = non_integrable.exponent.unwrap();
    verdict(
        8,
        "corrector growth",
        variation < 0.2 && (exponent - 0.5).abs() <= 0.1,
        format!(
            "beta = 4: ratio to log^(1/2)(2+N) varies {:.1}%; beta = 1: exponent {exponent:.3} (expected 0.5 +/- 0.1)",
            100.0 * variation
        ),
    );
}

#[test]
fn criterion_09_degeneracy_suite() {
    let shifts: Vec<f64> = (0..9).map(|i| -1.0 + 0.25 * i as f64).collect();
    let cfg = |map| DegeneracyConfig {
        dim: 2,
        beta: 4.0,
        decay_constant: 20.0,
        map,
        side: 64,
        shifts: shifts.clone(),
        samples: 100,
        seed: 9,
        tolerance: 1e-8,
    };
    let bump = degeneracy_scan(&cfg(MapSpec::Bump { lambda: 0.25 }), 1).unwrap();
    let sigmoid = degeneracy_scan(&cfg(MapSpec::Sigmoid { lambda: 0.25 }), 1).unwrap();
    let row = |r: &homlab::statistics::DegeneracyReport, z: f64| r.rows.iter().find(|x| (x.z - z).abs() < 1e-12).unwrap().clone();
    let at_zero = row(&bump, 0.0);
    let (lo, hi) = (row(&bump, -1.0), row(&bump, 1.0));
    let degenerate = at_zero.k[0].abs() <= 3.0 * at_zero.k_stderr[0];
    let signs = lo.k[0].abs() > 3.0 * lo.k_stderr[0] && hi.k[0].abs() > 3.0 * hi.k_stderr[0] && lo.k[0] * hi.k[0] < 0.0;
    let positive = sigmoid.rows.iter().all(|r| (0..2).all(|i| r.k[i] > 3.0 * r.k_stderr[i]));
    let identity = bump.identity_holds && sigmoid.identity_holds;
    let harmonic = bump.harmonic_bound_holds && sigmoid.harmonic_bound_holds;
    verdict(
        9,
        "degeneracy suite",
        degenerate && signs && positive && identity && harmonic && bump.z_max == 0.0,
        format!(
            "bump: z0 = {}, K(0) = {:.2e} +/- {:.1e}, K(-1) = {:.4}, K(+1) = {:.4}; sigmoid positive at 3 sigma: {positive}; identity: {identity}; harmonic bound: {harmonic}",
            bump.z_max, at_zero.k[0], at_zero.k_stderr[0], lo.k[0], hi.k[0]
        ),
    );
}

#[test]
fn criterion_10_malliavin_oracle_suite() {
    let start = Instant::now();
    let records = run_suite(&SuiteOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let failed = records.iter().filter(|r| !r.passed).count();
    let worst = records
        .iter()
        .filter(|r| !r.identity.starts_with("poincare"))
        .map(|r| r.rel_gap)
        .fold(0.0, f64::max);
    verdict(
        10,
        "Malliavin oracle suite",
        failed == 0 && worst < 1e-8 && elapsed < Duration::from_secs(30),
        format!("{} checks, {failed} failed, max identity rel. gap {worst:.2e}, {elapsed:.2?}", records.len()),
    );
}

#[test]
fn criterion_11_hls_property() {
    let family = random_hls_family(2, 1, 50, 11);
    let mut pass = true;
    let mut lines = Vec::new();
    for beta in [4.0, 2.0, 1.0] {
        let ratio = |side| {
            let model = CovarianceModel::build(beta, 1, 20.0, LatticeGrid::new(2, side).unwrap()).unwrap();
            hls_max_ratio(&model, &family).unwrap()
        };
        let (coarse, fine) = (ratio(256), ratio(512));
        let growth = fine / coarse - 1.0;
        pass &= growth < 0.1;
        lines.push(format!("beta = {beta}: {coarse:.4} -> {fine:.4} ({:+.1}%)", 100.0 * growth));
    }
    verdict(11, "HLS property", pass, format!("{}; N = 256 -> 512", lines.join("; ")));
}

#[test]
fn criterion_12_reproducibility() {
    let cfg = ensemble(
        1.0,
        64,
        vec![1.0 / 16.0, 1.0 / 32.0],
        vec![named("F", 0.9, vec![0.0, 0.0])],
        16,
        AbarMode::PerSample,
    );
    let render = |workers| {
        let report = run_ensemble(&cfg, workers).unwrap();
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        (report.to_json().unwrap(), csv)
    };
    let reference = render(1);
    let same = [4, 16].iter().all(|&w| render(w) == reference);
    verdict(
        12,
        "reproducibility",
        same,
        format!("report and CSV bytes identical for 1, 4, 16 workers: {same}"),
    );
}
