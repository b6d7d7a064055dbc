//! Rotary tables, relative-position scores and NTK base rescaling.

use coca_lab::rotary::{apply_rotation, ntk_rescale, RotaryTable, DEFAULT_BASE};
use coca_lab::HeadTensor;

fn main() -> coca_lab::Result<()> {
    let d = 8;
    let table = RotaryTable::new(d, DEFAULT_BASE, 64)?;
    println!("theta_j = {:?}", table.freqs());

    // one query and one key, placed at several absolute offsets
    let q = vec![0.3, -1.1, 0.8, 0.2, 1.0, 0.4, -0.5, 0.9];
    let k = vec![1.2, 0.1, -0.3, 0.7, 0.2, -0.8, 0.6, 0.5];
    for offset in [0, 10, 40] {
        let qt = HeadTensor::from_vec(q.clone(), 1, 1, d)?;
        let kt = HeadTensor::from_vec(k.clone(), 1, 1, d)?;
        let qr = apply_rotation(&qt, &table, offset + 5)?;
        let kr = apply_rotation(&kt, &table, offset)?;
        let dot: f64 = qr.data.iter().zip(&kr.data).map(|(a, b)| a * b).sum();
        println!("m - n = 5 at offset {offset:>2}: score {dot:.12}");
    }

    // trained at 64 tokens, evaluated at 256
    let scaled = ntk_rescale(&table, 64, 256)?;
    println!("NTK base {:.1} -> {:.1} (capacity {})", table.base(), scaled.base(), scaled.max_pos());
    println!("lowest frequency {:.3e} -> {:.3e}", table.freqs()[d / 2 - 1], scaled.freqs()[d / 2 - 1]);
    Ok(())
}
