// Correctors for deterministic periodic media with known answers.

use homlab::coefficient_map::CoefficientField;
use homlab::corrector::{solve_corrector, solve_flux_corrector};
use homlab::LatticeGrid;

fn main() -> homlab::Result<()> {
    let side = 128;
    let grid = LatticeGrid::new(2, side)?;
    let laminate = CoefficientField::from_scalar_fn(grid, "laminate", |c| if c[0] < side / 2 { 1.0 } else { 0.5 })?;
    let sol = solve_flux_corrector(solve_corrector(&laminate, 1e-12)?)?;
    println!("laminate abar = {:?} (harmonic 2/3, arithmetic 3/4)", sol.abar_per);
    println!("  div sigma - q residual: {:.2e}", sol.sigma_divergence_error());

    // Dykhne: the checkerboard {1, 1/4} homogenizes to the geometric mean.
    let mut values = Vec::new();
    for side in [32usize, 64, 128] {
        let grid = LatticeGrid::new(2, side)?;
        let h = side / 2;
        let board = CoefficientField::from_scalar_fn(grid, "checkerboard", |c| {
            if (c[0] < h) == (c[1] < h) {
                1.0
            } else {
                0.25
            }
        })?;
        let a = solve_corrector(&board, 1e-10)?.abar_per[0];
        println!("checkerboard N = {side}: abar_11 = {a:.5}");
        values.push(a);
    }
    println!("  extrapolated: {:.5} (exact 0.5)", 2.0 * values[2] - values[1]);
    Ok(())
}
