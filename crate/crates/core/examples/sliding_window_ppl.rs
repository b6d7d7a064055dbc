//! Sliding-window perplexity across context sizes.
//!
//! cargo run --release --example sliding_window_ppl -- [checkpoint]

use coca_lab::checkpoint::Checkpoint;
use coca_lab::cli::heldout_docs;
use coca_lab::evaluation::{ppl_curve, DEFAULT_STRIDE};
use coca_lab::{init_model, ModelConfig, Variant};

fn main() -> coca_lab::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(p) => Checkpoint::load(p.as_ref())?.model()?,
        // untrained: close to uniform over the byte vocabulary
        None => init_model(&ModelConfig::desk(Variant::Coca, 0))?,
    };
    let docs = heldout_docs(11, 4, 1025)?;
    let curve = ppl_curve(&model, &docs, &[64, 128, 256, 512], DEFAULT_STRIDE, 1.0)?;
    print!("{}", curve.to_csv());
    Ok(())
}
