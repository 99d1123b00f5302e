// Covariance of two separated functionals against the K (x) K c prediction.

use homlab::coefficient_map::MapSpec;
use homlab::commutator::TestFunction;
use homlab::statistics::{covariance_structure_check, run_ensemble, AbarMode, EnsembleConfig};

fn main() -> homlab::Result<()> {
    let bump = |id: &str, x: f64| TestFunction::new(id.into(), vec![x, 0.0], 0.35, vec![1.0, 0.0, 0.0, 0.0]);
    let config = EnsembleConfig {
        dim: 2,
        beta: 1.0,
        decay_constant: 20.0,
        map: MapSpec::Sigmoid { lambda: 0.25 },
        side: 64,
        epsilons: vec![1.0 / 32.0],
        test_functions: vec![bump("left", -0.5)?, bump("right", 0.5)?],
        samples: 60,
        seed: 3,
        shift: vec![],
        abar_mode: AbarMode::EnsembleMean,
        tolerance: 1e-8,
    };
    let report = run_ensemble(&config, 1)?;
    println!("K^1 = {:.4?} +/- {:.4?}", report.k_tensor.values, report.k_tensor.stderr);
    for (f, g) in [(0, 0), (0, 1)] {
        match covariance_structure_check(&report, f, g) {
            Ok(check) => {
                let row = &check.rows[0];
                println!(
                    "{} x {}: Cov {:.4} +/- {:.4}, prediction {:.4?}, {:?}",
                    check.f_id, check.g_id, row.empirical, row.empirical_stderr, row.prediction, check.verdict
                );
            }
            Err(e) => println!("check skipped: {e}"),
        }
    }
    Ok(())
}
