// Chaos expansions of Gaussian functionals and the finite-dimensional
// Malliavin identities.

use homlab::malliavin::{hermite_expand, hs_covariance, poincare_check, run_suite, FiniteGaussianModel, SuiteOptions};

fn main() -> homlab::Result<()> {
    let model = FiniteGaussianModel::new(2, vec![1.0, 0.6, 0.6, 1.0])?;
    let x = hermite_expand(&|y| (y[0] * y[1]).sin() + y[0], &model, 12)?;
    let z = hermite_expand(&|y| y[0].powi(3) - y[1], &model, 12)?;
    let cov = hs_covariance(&x, &z)?;
    println!(
        "Cov[X, Z]: direct {:.10}, Helffer-Sjostrand {:.10}",
        cov.direct, cov.helffer_sjostrand
    );
    let first = poincare_check(&x, 1)?;
    let second = poincare_check(&x, 2)?;
    println!("Var X = {:.5} <= E|DX|^2 = {:.5}", first.variance, first.dirichlet);
    println!("second order: {:.5} <= {:.5}", second.middle, second.outer);

    let records = run_suite(&SuiteOptions {
        cases: 20,
        ..SuiteOptions::default()
    })?;
    let worst = records
        .iter()
        .filter(|r| !r.identity.starts_with("poincare"))
        .map(|r| r.rel_gap)
        .fold(0.0, f64::max);
    println!(
        "{} randomized checks, {} passed, largest identity gap {worst:.1e}",
        records.len(),
        records.iter().filter(|r| r.passed).count()
    );
    Ok(())
}
