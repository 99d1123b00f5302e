// Corrector size on the torus against the reference growth mu(N).

use homlab::coefficient_map::family_sigmoid;
use homlab::corrector::{corrector_growth_scan, GrowthScanSpec, SolverOptions};

fn main() -> homlab::Result<()> {
    let map = family_sigmoid(0.25, 2)?;
    for beta in [4.0, 1.0] {
        let table = corrector_growth_scan(&GrowthScanSpec {
            map: &map,
            beta,
            decay_constant: 20.0,
            sides: &[16, 32, 64],
            samples: 8,
            seed: 1,
            workers: 1,
            solver: SolverOptions::with_tolerance(1e-8),
        })?;
        println!("beta = {beta}");
        table.write_csv(std::io::stdout())?;
        println!("  exponent vs log(1+N): {:.3?}", table.exponent);
    }
    Ok(())
}
