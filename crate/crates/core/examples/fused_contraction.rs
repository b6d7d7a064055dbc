//! CoCA scores two ways: the fused three-operand contraction and the naive
//! path that materialises one key per (query, key) pair.

use coca_lab::attention::{coca_scores_fused, coca_scores_naive};
use coca_lab::diagnostics::{contraction_memory_probe, random_score_inputs};

fn main() -> coca_lab::Result<()> {
    let (q_raw, q_rot, t_rot) = random_score_inputs(6, 6, 2, 16, 7)?;
    let scale = 4.0;
    let fused = coca_scores_fused(&q_raw, &q_rot, &t_rot, scale)?;
    let naive = coca_scores_naive(&q_raw, &q_rot, &t_rot, scale)?;
    let diff = fused.data.iter().zip(&naive.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("max |fused - naive| = {diff:.3e}");
    println!("head 0 row 5: {:?}", fused.row(0, 5).iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>());

    for d in [8, 16, 32, 64] {
        let p = contraction_memory_probe(64, 64, 4, d)?;
        println!(
            "d={d:>2}: fused peak {:>8} elems, naive peak {:>9} elems, ratio {:.1}",
            p.fused_peak_elems,
            p.naive_peak_elems,
            p.ratio()
        );
    }
    Ok(())
}
