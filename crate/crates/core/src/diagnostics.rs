//! Numerical probes of the position-encoding theory: initial angles and
//! order breaking near zero distance, long-term decay bounds, rotary borders
//! and the memory footprint of the score contraction.
//!
//! Head vectors use the half-split layout: component `j` is the complex
//! number `x[j] + i x[j + d/2]`. Everything here runs in `f64`.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::attention::{coca_scores_fused, coca_scores_naive};
use crate::error::{bail, Result};
use crate::rotary::RotaryTable;
use crate::tensor::HeadTensor;
use crate::workspace;

fn pairs(x: &[f64]) -> Result<Vec<(f64, f64)>> {
    if x.is_empty() || !x.len().is_multiple_of(2) {
        bail!(Dimension, "head vector length {} must be even and non-zero", x.len());
    }
    let h = x.len() / 2;
    Ok((0..h).map(|j| (x[j], x[j + h])).collect())
}

fn check_table(d: usize, table: &RotaryTable) -> Result<()> {
    if table.head_dim() != d {
        bail!(Dimension, "vectors have {d} entries but the table is for head_dim {}", table.head_dim());
    }
    Ok(())
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Signed angle `arg q_j - arg k_j` per component, in `(-pi, pi]`; `None`
/// where either pair has zero magnitude.
pub fn initial_angles(q: &[f64], k: &[f64]) -> Result<Vec<Option<f64>>> {
    if q.len() != k.len() {
        bail!(Dimension, "q has {} entries, k has {}", q.len(), k.len());
    }
    Ok(pairs(q)?
        .into_iter()
        .zip(pairs(k)?)
        .map(|((qr, qi), (kr, ki))| {
            if (qr == 0.0 && qi == 0.0) || (kr == 0.0 && ki == 0.0) {
                None
            } else {
                Some(wrap_angle(qi.atan2(qr) - ki.atan2(kr)))
            }
        })
        .collect())
}

/// Length of the initial run of strict increases of `f(0), f(1), ...`.
fn increasing_run(values: impl Iterator<Item = f64>) -> usize {
    let mut prev = None;
    let mut n = 0;
    for v in values {
        if let Some(p) = prev {
            if v > p {
                n += 1;
            } else {
                break;
            }
        }
        prev = Some(v);
    }
    n
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentBreak {
    pub j: usize,
    pub theta_j: f64,
    pub theta0: Option<f64>,
    /// `|theta0| / theta_j`.
    pub predicted: f64,
    /// Initial increasing steps of the single-component score, taken on the
    /// side of zero distance where the angle closes.
    pub measured: usize,
    /// `"ahead"` when the key sits after the query (`theta0 > 0`), else `"behind"`.
    pub side: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderBreakReport {
    pub s_max: usize,
    pub components: Vec<ComponentBreak>,
    /// `a(s) = <q, R_s k>` for `s = 0..=s_max`: the key `s` positions ahead.
    pub aggregate_ahead: Vec<f64>,
    /// `a(s) = <R_s q, k>`: the key `s` positions behind (the causal side).
    pub aggregate_behind: Vec<f64>,
}

impl OrderBreakReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("j,theta0,predicted,measured\n");
        for c in &self.components {
            let t = c.theta0.map_or(String::from("nan"), |t| format!("{t:.12}"));
            s.push_str(&format!("{},{},{:.6},{}\n", c.j, t, c.predicted, c.measured));
        }
        s
    }

    pub fn total_measured(&self) -> usize {
        self.components.iter().map(|c| c.measured).sum()
    }
}

/// Score of `q` against `k` when the two sit `s` positions apart:
/// `Re sum_j q_j conj(k_j) e^{i sign s theta_j}` with `sign = +1` for a key behind the
/// query and `-1` for a key ahead of it.
fn relative_score(qp: &[(f64, f64)], kp: &[(f64, f64)], table: &RotaryTable, s: usize, sign: f64) -> f64 {
    let mut a = 0.0;
    for (j, (&(qr, qi), &(kr, ki))) in qp.iter().zip(kp).enumerate() {
        let ang = sign * s as f64 * table.freqs()[j];
        let (c, sn) = (ang.cos(), ang.sin());
        // q conj(k)
        let (hr, hi) = (qr * kr + qi * ki, qi * kr - qr * ki);
        a += hr * c - hi * sn;
    }
    a
}

/// Scans scores near zero distance. A component with initial angle
/// `theta0 != 0` has its maximum not at distance 0 but about
/// `|theta0| / theta_j` positions away, on the side where the angle closes.
pub fn order_break_scan(q: &[f64], k: &[f64], table: &RotaryTable, s_max: usize) -> Result<OrderBreakReport> {
    if s_max < 2 {
        bail!(Input, "s_max must be at least 2");
    }
    check_table(q.len(), table)?;
    let angles = initial_angles(q, k)?;
    let qp = pairs(q)?;
    let kp = pairs(k)?;
    let components = angles
        .iter()
        .enumerate()
        .map(|(j, &theta0)| {
            let theta_j = table.freqs()[j];
            let t0 = theta0.unwrap_or(0.0);
            // single component: l cos(theta0 - sign s theta_j)
            let sign = if t0 > 0.0 { 1.0 } else { -1.0 };
            let measured = if theta0.is_some() {
                increasing_run((0..=s_max).map(|s| (t0 - sign * s as f64 * theta_j).cos()))
            } else {
                0
            };
            ComponentBreak {
                j,
                theta_j,
                theta0,
                predicted: t0.abs() / theta_j,
                measured,
                side: if t0 > 0.0 { "ahead" } else { "behind" },
            }
        })
        .collect();
    let aggregate_ahead = (0..=s_max).map(|s| relative_score(&qp, &kp, table, s, -1.0)).collect();
    let aggregate_behind = (0..=s_max).map(|s| relative_score(&qp, &kp, table, s, 1.0)).collect();
    Ok(OrderBreakReport { s_max, components, aggregate_ahead, aggregate_behind })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    Baseline,
    Coca,
}

impl std::str::FromStr for DecayMode {
    type Err = crate::CocaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "coca" => Ok(Self::Coca),
            other => bail!(Config, "unknown decay mode {other:?}"),
        }
    }
}

/// Input-independent partial sums over a range of distances, shared by many
/// bound checks against the same table.
pub struct DecayTables {
    pub s_values: Vec<usize>,
    half: usize,
    // [s][j] cos(s theta_j), sin(s theta_j)
    cos: Vec<f64>,
    sin: Vec<f64>,
    // per s: sum_j |S_{j+1}| and sum_j |C_{j+1}|
    sum_abs_s: Vec<f64>,
    sum_abs_c: Vec<f64>,
}

impl DecayTables {
    pub fn new(table: &RotaryTable, s_values: Vec<usize>) -> Self {
        let half = table.head_dim() / 2;
        let mut cos = Vec::with_capacity(s_values.len() * half);
        let mut sin = Vec::with_capacity(s_values.len() * half);
        let mut sum_abs_s = Vec::with_capacity(s_values.len());
        let mut sum_abs_c = Vec::with_capacity(s_values.len());
        for &s in &s_values {
            let (mut sr, mut si, mut c_acc) = (0.0, 0.0, 0.0);
            let (mut tot_s, mut tot_c) = (0.0, 0.0);
            for &th in table.freqs() {
                let ang = s as f64 * th;
                let (c, sn) = (ang.cos(), ang.sin());
                cos.push(c);
                sin.push(sn);
                sr += c;
                si += sn;
                c_acc += c;
                tot_s += sr.hypot(si);
                tot_c += c_acc.abs();
            }
            sum_abs_s.push(tot_s);
            sum_abs_c.push(tot_c);
        }
        Self { s_values, half, cos, sin, sum_abs_s, sum_abs_c }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayPoint {
    pub s: usize,
    pub a: f64,
    pub lhs: f64,
    pub rhs_weak: f64,
    pub rhs_strong: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayBoundReport {
    pub mode: DecayMode,
    pub convention: &'static str,
    pub points: Vec<DecayPoint>,
    /// `|h_{i+1} - h_i|` for `i = 0..d/2`, with `h_{d/2} = 0`.
    pub h_gaps: Vec<f64>,
    /// `|l_{i+1} - l_i|`, same convention.
    pub l_gaps: Vec<f64>,
    /// Distances where `|a(s)|` exceeds the bound of the mode plus slack
    /// (`rhs_strong` for coca, `rhs_weak` for baseline).
    pub violations: usize,
    /// Indices with `|l_{i+1} - l_i| > |h_{i+1} - h_i|` beyond slack.
    pub coefficient_violations: usize,
    /// Coca mode: max `|a(s) - sum_j l_j cos(s theta_j)|`.
    pub closed_form_max_err: Option<f64>,
}

impl DecayBoundReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("s,a,rhs_weak,rhs_strong\n");
        for p in &self.points {
            s.push_str(&format!("{},{:.12e},{:.12e},{:.12e}\n", p.s, p.a, p.rhs_weak, p.rhs_strong));
        }
        s
    }
}

pub const DECAY_SLACK: f64 = 1e-9;

fn gaps(values: &[f64]) -> Vec<f64> {
    (0..values.len()).map(|i| (values.get(i + 1).copied().unwrap_or(0.0) - values[i]).abs()).collect()
}

fn complex_gaps(values: &[(f64, f64)]) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let (nr, ni) = values.get(i + 1).copied().unwrap_or((0.0, 0.0));
            (nr - values[i].0).hypot(ni - values[i].1)
        })
        .collect()
}

/// Checks the Abel-summation decay bounds at every distance of `tables`.
/// In coca mode `k_or_t` holds the `d/2` folded coefficients and the key is
/// `k_j = t_j q_j`; in baseline mode it is the key itself.
pub fn decay_bound_check_with(
    tables: &DecayTables,
    q: &[f64],
    k_or_t: &[f64],
    mode: DecayMode,
) -> Result<DecayBoundReport> {
    let half = tables.half;
    if q.len() != 2 * half {
        bail!(Dimension, "q has {} entries, expected {}", q.len(), 2 * half);
    }
    let qp = pairs(q)?;
    let kp: Vec<(f64, f64)> = match mode {
        DecayMode::Baseline => {
            if k_or_t.len() != 2 * half {
                bail!(Dimension, "k has {} entries, expected {}", k_or_t.len(), 2 * half);
            }
            pairs(k_or_t)?
        }
        DecayMode::Coca => {
            if k_or_t.len() != half {
                bail!(Dimension, "folded t has {} entries, expected {half}", k_or_t.len());
            }
            if let Some(t) = k_or_t.iter().find(|t| !(**t >= 0.0)) {
                bail!(Input, "folded coefficients must be non-negative, got {t}");
            }
            qp.iter().zip(k_or_t).map(|(&(r, i), &t)| (t * r, t * i)).collect()
        }
    };
    // h_j = q_j conj(k_j), l_j = |q_j| |k_j|
    let h: Vec<(f64, f64)> =
        qp.iter().zip(&kp).map(|(&(qr, qi), &(kr, ki))| (qr * kr + qi * ki, qi * kr - qr * ki)).collect();
    let l: Vec<f64> = qp.iter().zip(&kp).map(|(&(qr, qi), &(kr, ki))| qr.hypot(qi) * kr.hypot(ki)).collect();
    let h_gaps = complex_gaps(&h);
    let l_gaps = gaps(&l);
    let max_h = h_gaps.iter().copied().fold(0.0, f64::max);
    let max_l = l_gaps.iter().copied().fold(0.0, f64::max);
    let coefficient_violations = l_gaps.iter().zip(&h_gaps).filter(|(lg, hg)| **lg > **hg + DECAY_SLACK).count();

    let mut points = Vec::with_capacity(tables.s_values.len());
    let mut violations = 0;
    let mut closed_err: f64 = 0.0;
    for (idx, &s) in tables.s_values.iter().enumerate() {
        let cos = &tables.cos[idx * half..(idx + 1) * half];
        let sin = &tables.sin[idx * half..(idx + 1) * half];
        let mut a = 0.0;
        for j in 0..half {
            a += h[j].0 * cos[j] - h[j].1 * sin[j];
        }
        let rhs_weak = max_h * tables.sum_abs_s[idx];
        let rhs_strong = max_l * tables.sum_abs_c[idx];
        let bound = match mode {
            DecayMode::Coca => {
                let closed: f64 = (0..half).map(|j| l[j] * cos[j]).sum();
                closed_err = closed_err.max((a - closed).abs());
                rhs_strong
            }
            DecayMode::Baseline => rhs_weak,
        };
        if a.abs() > bound + DECAY_SLACK {
            violations += 1;
        }
        points.push(DecayPoint { s, a, lhs: a.abs(), rhs_weak, rhs_strong });
    }
    Ok(DecayBoundReport {
        mode,
        convention: "Abel summation over components j = 0..d/2 with h_{d/2} = l_{d/2} = 0",
        points,
        h_gaps,
        l_gaps,
        violations,
        coefficient_violations,
        closed_form_max_err: (mode == DecayMode::Coca).then_some(closed_err),
    })
}

pub fn decay_bound_check(
    q: &[f64],
    k_or_t: &[f64],
    table: &RotaryTable,
    s_range: std::ops::RangeInclusive<usize>,
    mode: DecayMode,
) -> Result<DecayBoundReport> {
    check_table(q.len(), table)?;
    decay_bound_check_with(&DecayTables::new(table, s_range.collect()), q, k_or_t, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Border {
    /// Relative angle 0: aligned with the key, score maximum.
    K,
    /// Relative angle pi: opposite the query, score minimum.
    NegQ,
    /// Relative angle 2 pi: back on the query, score maximum again.
    Q,
}

#[derive(Debug, Clone, Serialize)]
pub struct BorderEvent {
    pub border: Border,
    /// Real distance where `theta0 - s theta_j` hits the border.
    pub s_exact: f64,
    /// Integer distance of the discrete extremum.
    pub s_index: usize,
    /// Crossing at distance 0, i.e. no reversal inside the scan.
    pub at_origin: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentBorders {
    pub j: usize,
    pub theta_j: f64,
    pub predicted: Vec<BorderEvent>,
    /// Interior extrema of the scanned single-component score.
    pub scanned: Vec<usize>,
    pub agree: bool,
}

/// Nearest integer, rounding exact halves down (the earlier of two equal
/// neighbours ends the monotone run).
fn round_half_down(x: f64) -> usize {
    let f = x.floor();
    if x - f > 0.5 {
        f as usize + 1
    } else {
        f as usize
    }
}

/// Interior strict-run ends of `v`: indices where the direction of change
/// flips. Flat steps extend the current run.
fn scanned_extrema(v: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut dir = 0i8;
    let mut last_move = 0usize;
    for i in 1..v.len() {
        let d = if v[i] > v[i - 1] {
            1
        } else if v[i] < v[i - 1] {
            -1
        } else {
            0
        };
        if d != 0 {
            if dir != 0 && d != dir {
                out.push(last_move);
            }
            dir = d;
            last_move = i;
        }
    }
    out
}

/// Border crossings of the relative angle `theta0 - s theta_j` for
/// `s = 0..=s_max` (the key `s` positions ahead, query as x-axis), checked
/// against a scan of `cos(theta0 - s theta_j)`.
pub fn rotary_border_report(theta0: f64, table: &RotaryTable, s_max: usize) -> Result<Vec<ComponentBorders>> {
    if !(theta0 > -PI && theta0 <= PI) {
        bail!(Input, "theta0 {theta0} is outside (-pi, pi]");
    }
    let mut out = Vec::with_capacity(table.freqs().len());
    for (j, &th) in table.freqs().iter().enumerate() {
        // extrema where theta0 - s theta = -k pi for k = 0, 1, 2, ...
        let mut predicted = Vec::new();
        let mut kk = if theta0 < 0.0 { 1 } else { 0 };
        loop {
            let s_exact = (theta0 + kk as f64 * PI) / th;
            if s_exact > s_max as f64 {
                break;
            }
            if s_exact >= 0.0 {
                let border = match kk {
                    0 => Border::K,
                    k if k % 2 == 1 => Border::NegQ,
                    _ => Border::Q,
                };
                let s_index = round_half_down(s_exact);
                predicted.push(BorderEvent { border, s_exact, s_index, at_origin: s_index == 0 });
            }
            kk += 1;
        }
        let values: Vec<f64> = (0..=s_max).map(|s| (theta0 - s as f64 * th).cos()).collect();
        let scanned = scanned_extrema(&values);
        let interior: Vec<usize> =
            predicted.iter().filter(|e| !e.at_origin && e.s_index < s_max).map(|e| e.s_index).collect();
        out.push(ComponentBorders { j, theta_j: th, agree: interior == scanned, predicted, scanned });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MemoryProbe {
    pub sq: usize,
    pub sk: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub fused_peak_elems: usize,
    pub naive_peak_elems: usize,
    /// Largest absolute difference between the two score tensors.
    pub max_abs_diff: f64,
}

impl MemoryProbe {
    pub fn ratio(&self) -> f64 {
        self.naive_peak_elems as f64 / self.fused_peak_elems.max(1) as f64
    }
}

/// Random operands for one score contraction of the given shape.
pub fn random_score_inputs(
    sq: usize,
    sk: usize,
    heads: usize,
    d: usize,
    seed: u64,
) -> Result<(HeadTensor<f64>, HeadTensor<f64>, HeadTensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>();
    Ok((
        HeadTensor::from_vec(draw(sq * heads * d), sq, heads, d)?,
        HeadTensor::from_vec(draw(sq * heads * d), sq, heads, d)?,
        HeadTensor::from_vec(draw(sk * heads * d), sk, heads, d)?,
    ))
}

/// Peak transient elements of the fused and the naive score paths.
pub fn contraction_memory_probe(sq: usize, sk: usize, heads: usize, d: usize) -> Result<MemoryProbe> {
    if sq == 0 || sk == 0 || heads == 0 || d == 0 {
        bail!(Input, "all probe dimensions must be positive");
    }
    let (q_raw, q_rot, t_rot) = random_score_inputs(sq, sk, heads, d, 0)?;
    let scale = (d as f64).sqrt();
    workspace::reset_peak();
    let base = workspace::live_elems();
    let fused = coca_scores_fused(&q_raw, &q_rot, &t_rot, scale)?;
    let fused_peak = workspace::reset_peak() - base;
    let naive = coca_scores_naive(&q_raw, &q_rot, &t_rot, scale)?;
    let naive_peak = workspace::reset_peak() - base;
    let max_abs_diff = fused.data.iter().zip(&naive.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(MemoryProbe {
        sq,
        sk,
        heads,
        head_dim: d,
        fused_peak_elems: fused_peak,
        naive_peak_elems: naive_peak,
        max_abs_diff,
    })
}
