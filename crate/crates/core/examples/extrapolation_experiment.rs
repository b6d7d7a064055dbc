//! One seed of the desk extrapolation comparison: trains CoCA and the RoPE
//! baseline on the keyvalue corpus at length 64, then measures passkey
//! accuracy at 4x (NTK kappa 4) and lm_mix perplexity at 1x and 8x.
//!
//! cargo run --release --example extrapolation_experiment -- [seed] [steps]

use coca_lab::cli::heldout_docs;
use coca_lab::data::{synth_corpus, CorpusKind};
use coca_lab::evaluation::{passkey_suite, ppl_curve, PasskeyOptions, PasskeyTemplate, DEFAULT_STRIDE};
use coca_lab::training::{train_loop, TrainConfig, TrainOptions, Trainer};
use coca_lab::{init_model, ModelConfig, Variant};

const TRAIN_LEN: usize = 64;

fn main() -> coca_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let steps: usize = args.next().map_or(6000, |s| s.parse().expect("steps"));

    let window = TRAIN_LEN + 1;
    let corpus = synth_corpus(CorpusKind::Keyvalue, window * 20_000, window, 100 + seed)?;
    let docs = heldout_docs(2000 + seed, 8, 16 * TRAIN_LEN + 1)?;

    println!("variant   passkey@{}  ppl@{}  ppl@{}  ratio", 4 * TRAIN_LEN, TRAIN_LEN, 8 * TRAIN_LEN);
    for variant in [Variant::Coca, Variant::Baseline] {
        let cfg = TrainConfig {
            total_steps: steps,
            warmup_fraction: 0.05,
            lr_peak: 3e-3,
            lr_final: 3e-4,
            seq_len: TRAIN_LEN,
            seed,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(init_model(&ModelConfig::desk(variant, seed))?, cfg)?;
        train_loop(&mut trainer, &corpus, &TrainOptions::default())?;
        let model = trainer.model;

        let opts = PasskeyOptions {
            lengths: vec![4 * TRAIN_LEN],
            ntk_kappa: 4.0,
            template: PasskeyTemplate::Compact,
            seed: 1000 + seed,
            ..Default::default()
        };
        let acc = passkey_suite(&model, &opts)?.records[0].accuracy;
        let ppl = ppl_curve(&model, &docs, &[TRAIN_LEN, 8 * TRAIN_LEN], DEFAULT_STRIDE, 1.0)?;
        let (short, long) = (ppl.records[0].ppl, ppl.records[1].ppl);
        println!("{variant:<9} {acc:>11.2}  {short:>6.2}  {long:>6.2}  {:>5.2}", long / short);
    }
    Ok(())
}
