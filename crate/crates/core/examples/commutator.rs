// The homogenization commutator of one sample and its rescaled averages.

use homlab::coefficient_map::{evaluate_coefficient, family_sigmoid};
use homlab::commutator::{compute_commutator, integrate_functional, ScalingFunctions, TestFunction};
use homlab::corrector::solve_corrector;
use homlab::gaussian_field::{sample_field, CovarianceModel};
use homlab::LatticeGrid;

fn main() -> homlab::Result<()> {
    let grid = LatticeGrid::new(2, 128)?;
    let model = CovarianceModel::build(1.0, 1, 20.0, grid)?;
    let map = family_sigmoid(0.25, 2)?;
    let coeff = evaluate_coefficient(&map, &sample_field(&model, 3, 0), &[0.0])?;
    let sol = solve_corrector(&coeff, 1e-10)?;
    let xi = compute_commutator(&coeff, &sol, &sol.abar_per)?;
    println!("largest |cell mean of Xi|: {:.1e}", xi.mean().iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let scaling = ScalingFunctions::new(2, 1.0)?;
    let f = TestFunction::slot(2, 0, 0, 0.9, vec![0.0, 0.0])?;
    for eps in [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0] {
        println!(
            "eps = {eps}: pi(1/eps) = {:.1}, I_eps(F) = {:+.4}",
            scaling.pi(1.0 / eps),
            integrate_functional(&xi, &f, eps, &scaling)?
        );
    }
    Ok(())
}
