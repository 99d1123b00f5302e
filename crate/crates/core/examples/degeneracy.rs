// Homogenized coefficient of shifted fields and its derivative K^1(z).

use homlab::coefficient_map::MapSpec;
use homlab::statistics::{degeneracy_scan, DegeneracyConfig};

fn main() -> homlab::Result<()> {
    for map in [MapSpec::Bump { lambda: 0.25 }, MapSpec::Sigmoid { lambda: 0.25 }] {
        let report = degeneracy_scan(
            &DegeneracyConfig {
                dim: 2,
                beta: 4.0,
                decay_constant: 20.0,
                map: map.clone(),
                side: 32,
                shifts: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
                samples: 16,
                seed: 5,
                tolerance: 1e-8,
            },
            1,
        )?;
        println!("{map:?}");
        for row in &report.rows {
            println!(
                "  z = {:+.1}: abar_11 = {:.4}, K_11 = {:+.4} +/- {:.4}, d abar/dz = {}",
                row.z,
                row.abar[0],
                row.k[0],
                row.k_stderr[0],
                row.slope.as_ref().map_or("-".to_string(), |s| format!("{:+.4}", s[0]))
            );
        }
        println!(
            "  z_max = {}, identity {}, harmonic bound {}",
            report.z_max, report.identity_holds, report.harmonic_bound_holds
        );
    }
    Ok(())
}
