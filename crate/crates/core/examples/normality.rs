// Distance of standardized functionals to the standard normal.

use homlab::coefficient_map::MapSpec;
use homlab::commutator::TestFunction;
use homlab::statistics::{normality_distances, run_ensemble, AbarMode, EnsembleConfig};

fn main() -> homlab::Result<()> {
    let config = EnsembleConfig {
        dim: 2,
        beta: 4.0,
        decay_constant: 20.0,
        map: MapSpec::Sigmoid { lambda: 0.25 },
        side: 32,
        epsilons: vec![1.0 / 16.0],
        test_functions: vec![TestFunction::slot(2, 0, 0, 0.625, vec![0.0, 0.0])?],
        samples: 500,
        seed: 4,
        shift: vec![],
        abar_mode: AbarMode::EnsembleMean,
        tolerance: 1e-8,
    };
    let report = run_ensemble(&config, 1)?;
    for t in &report.tables {
        let d = normality_distances(&t.values)?;
        println!(
            "eps {}: W1 = {:.4}, KS = {:.4}, TV {}",
            t.epsilon, d.wasserstein1, d.kolmogorov_smirnov, d.total_variation
        );
    }
    Ok(())
}
