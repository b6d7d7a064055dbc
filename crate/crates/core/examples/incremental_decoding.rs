//! Token-by-token decoding with layer caches against one batch forward.

use coca_lab::{init_model, ModelConfig, Variant};

fn main() -> coca_lab::Result<()> {
    for variant in [Variant::Coca, Variant::Baseline] {
        let model = init_model::<f32>(&ModelConfig::desk(variant, 2))?;
        let tokens: Vec<u32> = (0..64).map(|i| (i * 31 + 7) % 256).collect();
        let (full, _) = model.forward(&tokens, None)?;
        let mut caches = model.empty_caches();
        let mut last = Vec::new();
        for &t in &tokens {
            let (logits, c) = model.forward(&[t], Some(&caches))?;
            caches = c;
            last = logits;
        }
        let v = model.config.vocab_size;
        let diff = full[63 * v..].iter().zip(&last).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        println!("{variant}: max |batch - cached| on the final logits = {diff:.2e}");
    }
    Ok(())
}
