// Built-in coefficient families, their certificates, and a TOML-style spec.

use homlab::coefficient_map::{certify, evaluate_coefficient, MapSpec, ScalarProfile};
use homlab::gaussian_field::{sample_field, CovarianceModel};
use homlab::LatticeGrid;

fn main() -> homlab::Result<()> {
    let specs = [
        MapSpec::Sigmoid { lambda: 0.25 },
        MapSpec::Bump { lambda: 0.25 },
        MapSpec::Diagonal {
            profiles: vec![ScalarProfile::Sigmoid { lambda: 0.3 }, ScalarProfile::Constant { value: 0.5 }],
        },
    ];
    let grid = LatticeGrid::new(2, 32)?;
    for spec in specs {
        let map = spec.build(2)?;
        let cert = certify(map.as_ref(), 500, 1)?;
        let model = CovarianceModel::build(4.0, map.kappa(), 20.0, grid)?;
        let coeff = evaluate_coefficient(map.as_ref(), &sample_field(&model, 5, 0), &vec![0.0; map.kappa()])?;
        println!(
            "{}: lambda {}, ellipticity ratio {:.3}, d1 error {:.1e}, cell mean {:?}",
            map.id(),
            map.lambda(),
            cert.min_ellipticity_ratio,
            cert.max_d1_error,
            coeff.mean_matrix()
        );
    }
    Ok(())
}
