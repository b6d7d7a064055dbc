//! Renders passkey prompts and, given a checkpoint, measures retrieval
//! accuracy with and without NTK rescaling.
//!
//! cargo run --release --example passkey_retrieval -- [checkpoint]

use coca_lab::checkpoint::Checkpoint;
use coca_lab::evaluation::{gen_passkey_sample, passkey_suite, score_passkey, PasskeyOptions, PasskeyTemplate};
use coca_lab::tokenizer::encode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> coca_lab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = gen_passkey_sample(400, PasskeyTemplate::Paper, &mut rng)?;
    println!("{}\n", s.text());
    let compact = gen_passkey_sample(160, PasskeyTemplate::Compact, &mut rng)?;
    println!("{}\n", compact.text());

    let key = s.passkey;
    println!("'{key} is it' scores {}", score_passkey(&encode(&format!("{key} is it")), key));
    println!("'The grass is green.' scores {}", score_passkey(&encode("The grass is green."), key));

    if let Some(path) = std::env::args().nth(1) {
        let model = Checkpoint::load(path.as_ref())?.model()?;
        for kappa in [1.0, 4.0] {
            let opts = PasskeyOptions {
                lengths: vec![64, 128, 256],
                n_per_length: 20,
                ntk_kappa: kappa,
                ..Default::default()
            };
            print!("kappa {kappa}\n{}", passkey_suite(&model, &opts)?.to_csv());
        }
    }
    Ok(())
}
