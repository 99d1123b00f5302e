// Ensemble of commutator functionals and the variance-scaling fit. With 40
// samples the fitted slope carries a jackknife error near 0.2.

use homlab::coefficient_map::MapSpec;
use homlab::commutator::TestFunction;
use homlab::statistics::{run_ensemble, variance_scaling_fit, AbarMode, EnsembleConfig};

fn main() -> homlab::Result<()> {
    for beta in [4.0, 1.0] {
        let config = EnsembleConfig {
            dim: 2,
            beta,
            decay_constant: 20.0,
            map: MapSpec::Sigmoid { lambda: 0.25 },
            side: 256,
            epsilons: vec![1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0],
            test_functions: vec![TestFunction::slot(2, 0, 0, 1.25, vec![0.0, 0.0])?],
            samples: 40,
            seed: 2,
            shift: vec![],
            abar_mode: AbarMode::PerSample,
            tolerance: 1e-8,
        };
        let report = run_ensemble(&config, 1)?;
        let fit = variance_scaling_fit(&report, 0, 0.25)?;
        println!(
            "beta = {beta}: slope {:.2} +/- {:.2}, expected {} ({:?})",
            fit.slope, fit.slope_stderr, fit.expected_slope, fit.verdict
        );
        for row in &fit.rows {
            println!("  eps {:<9} Var[I_eps] = {:.4} +/- {:.4}", row.epsilon, row.normalized_variance, row.normalized_stderr);
        }
    }
    Ok(())
}
