//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{bail, Result};
use crate::model::{param_specs, Model, ModelParams};

/// Denominator floor for the relative error, so coordinates whose gradient
/// is zero on both sides do not divide by zero.
pub const REL_ERR_FLOOR: f64 = 1e-7;

/// A scalar objective over a flat list of named `f64` tensors.
pub trait Objective {
    fn tensor_names(&self) -> Vec<String>;
    fn tensor_len(&self, tensor: usize) -> usize;
    fn get(&self, tensor: usize, index: usize) -> f64;
    fn set(&mut self, tensor: usize, index: usize, value: f64);
    fn loss(&self) -> Result<f64>;
    /// Loss and its gradient, one vector per tensor.
    fn loss_and_grad(&self) -> Result<(f64, Vec<Vec<f64>>)>;
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_parameter: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
    pub per_tensor_max: Vec<(String, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks `per_tensor` randomly chosen coordinates of every tensor (all of
/// them when the tensor is smaller).
pub fn gradient_check<O: Objective>(
    obj: &mut O,
    epsilon: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        bail!(Input, "epsilon must be a positive finite step, got {epsilon}");
    }
    let (loss, grads) = obj.loss_and_grad()?;
    if !loss.is_finite() {
        bail!(Numeric, "non-finite loss {loss}");
    }
    let names = obj.tensor_names();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_parameter: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
        per_tensor_max: Vec::new(),
    };
    for (t, name) in names.iter().enumerate() {
        let len = obj.tensor_len(t);
        let picks: Vec<usize> =
            if len <= per_tensor { (0..len).collect() } else { sample(&mut rng, len, per_tensor).into_vec() };
        let mut tensor_max = 0.0f64;
        for i in picks {
            let orig = obj.get(t, i);
            obj.set(t, i, orig + epsilon);
            let plus = obj.loss()?;
            obj.set(t, i, orig - epsilon);
            let minus = obj.loss()?;
            obj.set(t, i, orig);
            if !plus.is_finite() || !minus.is_finite() {
                bail!(Numeric, "non-finite loss while perturbing {name}[{i}]");
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = grads[t][i];
            let err = relative_error(analytic, numeric);
            report.coords_checked += 1;
            tensor_max = tensor_max.max(err);
            if err > report.max_rel_err || report.worst_parameter.is_empty() {
                report.max_rel_err = err;
                report.worst_parameter = format!("{name}[{i}]");
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
        report.per_tensor_max.push((name.clone(), tensor_max));
    }
    Ok(report)
}

/// A model in double precision with a fixed batch of (tokens, targets).
pub struct ModelObjective {
    pub model: Model<f64>,
    pub batch: Vec<(Vec<u32>, Vec<u32>)>,
}

impl ModelObjective {
    fn tensor_mut(&mut self, tensor: usize) -> &mut Vec<f64> {
        self.model.params.tensors_mut().into_iter().nth(tensor).expect("tensor index in range")
    }
}

impl Objective for ModelObjective {
    fn tensor_names(&self) -> Vec<String> {
        param_specs(&self.model.config).into_iter().map(|s| s.name).collect()
    }

    fn tensor_len(&self, tensor: usize) -> usize {
        self.model.params.tensors()[tensor].len()
    }

    fn get(&self, tensor: usize, index: usize) -> f64 {
        self.model.params.tensors()[tensor][index]
    }

    fn set(&mut self, tensor: usize, index: usize, value: f64) {
        self.tensor_mut(tensor)[index] = value;
    }

    fn loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for (x, y) in &self.batch {
            total += self.model.loss(x, y)?;
        }
        Ok(total / self.batch.len() as f64)
    }

    fn loss_and_grad(&self) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut grads = ModelParams::zeros(&self.model.config);
        let w = 1.0 / self.batch.len() as f64;
        let mut total = 0.0;
        for (x, y) in &self.batch {
            total += w * self.model.loss_and_grad(x, y, w, &mut grads)?;
        }
        Ok((total, grads.tensors().into_iter().map(<[f64]>::to_vec).collect()))
    }
}

/// Squared-error linear map `0.5 * mean ||x W - y||^2`; its finite
/// differences are exact up to rounding.
pub struct LinearObjective {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub weight: Vec<f64>,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearObjective {
    pub fn random(rows: usize, d_in: usize, d_out: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        Self { inputs: draw(rows * d_in), targets: draw(rows * d_out), weight: draw(d_in * d_out), d_in, d_out }
    }

    fn residuals(&self) -> Vec<f64> {
        let rows = self.inputs.len() / self.d_in;
        let mut out = self.targets.iter().map(|y| -y).collect::<Vec<_>>();
        crate::real::matmul(&self.inputs, &self.weight, &mut out, rows, self.d_in, self.d_out, true);
        out
    }
}

impl Objective for LinearObjective {
    fn tensor_names(&self) -> Vec<String> {
        vec!["weight".into()]
    }

    fn tensor_len(&self, _tensor: usize) -> usize {
        self.weight.len()
    }

    fn get(&self, _tensor: usize, index: usize) -> f64 {
        self.weight[index]
    }

    fn set(&mut self, _tensor: usize, index: usize, value: f64) {
        self.weight[index] = value;
    }

    fn loss(&self) -> Result<f64> {
        let rows = self.inputs.len() / self.d_in;
        Ok(0.5 * self.residuals().iter().map(|r| r * r).sum::<f64>() / rows as f64)
    }

    fn loss_and_grad(&self) -> Result<(f64, Vec<Vec<f64>>)> {
        let rows = self.inputs.len() / self.d_in;
        let r = self.residuals();
        let mut g = vec![0.0; self.weight.len()];
        crate::real::matmul_at(&self.inputs, &r, &mut g, self.d_in, rows, self.d_out, false);
        g.iter_mut().for_each(|x| *x /= rows as f64);
        Ok((0.5 * r.iter().map(|v| v * v).sum::<f64>() / rows as f64, vec![g]))
    }
}
