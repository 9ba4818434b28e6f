//! Simulates one trial of the mass-spring plate at several stiffness values
//! and reports how far the plate deforms.

use mango::data::{SpringWorld, TrialSetup};

fn main() -> mango::Result<()> {
    let setup = TrialSetup {
        radius: 0.09,
        x_center: 0.45,
        speed: 0.15,
    };
    println!("stiffness  max_displacement  final_speed");
    for k in [200.0, 632.0, 2000.0] {
        let world = SpringWorld {
            stiffness: k,
            ..SpringWorld::default()
        };
        let trial = world.simulate_setup(&setup)?;
        let p0 = trial.x.p0.data();
        let max_disp = trial
            .y_p
            .data()
            .chunks_exact(p0.len())
            .flat_map(|f| f.iter().zip(p0).map(|(a, b)| (a - b).abs()))
            .fold(0.0f32, f32::max);
        let last = trial.y_v.narrow_rows(world.horizon - 1, 1)?;
        println!("{k:>9.0}  {max_disp:>16.4}  {:>11.4}", last.max_abs());
    }
    Ok(())
}
