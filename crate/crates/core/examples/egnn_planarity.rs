//! Shows that an E(n)-equivariant message-passing network keeps planar inputs
//! planar, while the full-trajectory decoder does not.

use mango::baselines::egnn::{mango_planarity_control, planarity_check, Plane};

fn main() -> mango::Result<()> {
    let tilted = Plane {
        point: [0.3, -0.2, 0.5],
        normal: [0.4, -0.7, 0.6],
    };
    for (name, plane) in [("z = 0", Plane::xy()), ("tilted", tilted)] {
        for depth in 1..=5 {
            let report = planarity_check(depth, 20, plane.clone(), 0)?;
            println!("{name:<7} depth {depth}: max residual {:.2e}", report.max_residual);
        }
        println!("{name:<7} decoder control: {:.2e}", mango_planarity_control(plane, 0)?);
    }
    Ok(())
}
