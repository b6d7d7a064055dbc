//! Trains a small CoCA model on the keyvalue corpus and writes checkpoints.
//!
//! cargo run --release --example train_keyvalue -- [steps] [out_dir]

use std::path::PathBuf;

use coca_lab::data::{synth_corpus, CorpusKind};
use coca_lab::training::{train_loop, TrainConfig, TrainOptions, Trainer};
use coca_lab::{init_model, ModelConfig, Variant};

fn main() -> coca_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(200, |s| s.parse().expect("steps"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/example-train".into()));

    let model = init_model(&ModelConfig::desk(Variant::Coca, 0))?;
    let corpus = synth_corpus(CorpusKind::Keyvalue, 65 * 4000, 65, 1)?;
    let cfg = TrainConfig {
        total_steps: steps,
        lr_peak: 1e-3,
        lr_final: 1e-4,
        warmup_fraction: 0.05,
        checkpoint_every: 100,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, cfg)?;
    let summary =
        train_loop(&mut trainer, &corpus, &TrainOptions { out_dir: Some(out.clone()), ..Default::default() })?;
    for r in summary.metrics.iter().step_by(20) {
        println!("step {:>5}  lr {:.2e}  loss {:.4}  {:.0} tok/s", r.step, r.lr, r.loss, r.tokens_per_sec);
    }
    println!("last checkpoint: {:?}", summary.last_checkpoint);
    Ok(())
}
