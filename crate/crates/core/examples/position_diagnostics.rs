//! Order breaking near zero distance, decay bounds and rotary borders for
//! one injected initial angle.

use coca_lab::diagnostics::{decay_bound_check, initial_angles, order_break_scan, rotary_border_report, DecayMode};
use coca_lab::rotary::{RotaryTable, DEFAULT_BASE};

fn main() -> coca_lab::Result<()> {
    let table = RotaryTable::new(16, DEFAULT_BASE, 1)?;
    let j = 2;
    let theta0: f64 = 0.5;
    // q and k equal except for component j, where q leads by theta0
    let mut q = vec![0.0; 16];
    let mut k = vec![0.0; 16];
    for i in 0..8 {
        q[i] = 1.0;
        k[i] = 1.0;
    }
    q[j] = theta0.cos();
    q[j + 8] = theta0.sin();
    println!(
        "theta0 per component: {:?}",
        initial_angles(&q, &k)?.iter().map(|t| t.map(|t| (t * 1e3).round() / 1e3)).collect::<Vec<_>>()
    );

    let r = order_break_scan(&q, &k, &table, 256)?;
    let c = &r.components[j];
    println!("component {j}: theta_j {:.4}, predicted {:.3}, measured {}", c.theta_j, c.predicted, c.measured);

    let t = vec![0.7, 0.1, 0.0, 1.3, 0.4, 0.2, 0.9, 0.5];
    let d = decay_bound_check(&q, &t, &table, 1..=4096, DecayMode::Coca)?;
    let worst = d.points.iter().map(|p| p.lhs / p.rhs_strong.max(1e-300)).fold(0.0, f64::max);
    println!(
        "coca decay: violations {}, max |a|/bound {worst:.3}, closed form err {:.2e}",
        d.violations,
        d.closed_form_max_err.unwrap_or(0.0)
    );

    for b in rotary_border_report(theta0, &table, 2000)?.iter().take(4) {
        let idx: Vec<_> = b.predicted.iter().take(4).map(|e| (e.border, e.s_index)).collect();
        println!("j={} first borders {:?} agree={}", b.j, idx, b.agree);
    }
    Ok(())
}
