//! Finite-difference check of the hand-written backward pass.

use coca_lab::gradcheck::{gradient_check, ModelObjective};
use coca_lab::{init_model, ModelConfig, Variant};

fn main() -> coca_lab::Result<()> {
    for variant in [Variant::Coca, Variant::Baseline] {
        let model = init_model::<f64>(&ModelConfig::tiny(variant, 4))?;
        let batch = vec![(vec![1, 7, 3, 3, 9, 0], vec![7, 3, 3, 9, 0, 2])];
        let mut obj = ModelObjective { model, batch };
        let r = gradient_check(&mut obj, 1e-5, 16, 0)?;
        println!("{variant}: {} coords, max rel err {:.2e} at {}", r.coords_checked, r.max_rel_err, r.worst_parameter);
    }
    Ok(())
}
