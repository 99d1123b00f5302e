// Build an experiment file in code, validate it and print the TOML that
// `homlab commutator-scan --config` accepts.

use homlab::cli::{Command, ExperimentConfig, ScalingSection};
use homlab::coefficient_map::MapSpec;
use homlab::commutator::TestFunction;
use homlab::statistics::{AbarMode, EnsembleConfig};

fn main() -> homlab::Result<()> {
    let config = ExperimentConfig {
        command: Some(Command::CommutatorScan),
        ensemble: Some(EnsembleConfig {
            dim: 2,
            beta: 1.0,
            decay_constant: 20.0,
            map: MapSpec::Sigmoid { lambda: 0.25 },
            side: 256,
            epsilons: vec![0.125, 0.0625, 0.03125, 0.015625],
            test_functions: vec![TestFunction::slot(2, 0, 0, 1.25, vec![0.0, 0.0])?],
            samples: 200,
            seed: 1,
            shift: vec![],
            abar_mode: AbarMode::PerSample,
            tolerance: 1e-8,
        }),
        scaling: Some(ScalingSection { tolerance: 0.25 }),
        ..Default::default()
    };
    config.validate(Command::CommutatorScan)?;
    let text = config.to_toml()?;
    assert_eq!(ExperimentConfig::parse(&text)?, config);
    println!("# sha256 {}\n{text}", config.hash());
    Ok(())
}
