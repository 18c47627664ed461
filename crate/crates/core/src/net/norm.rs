//! Row-wise RMS normalization and per-channel batch normalization as fused
//! tape operations.

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{shape_err, Result};

pub const RMS_EPS: f64 = 1e-8;
pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// `x * gain / sqrt(mean(x^2) + 1e-8)`.
pub fn rmsnorm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let s = inverse_rms(x);
    x.iter().zip(gain).map(|(x, g)| x * g * s).collect()
}

fn inverse_rms(x: &[f64]) -> f64 {
    1.0 / (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64 + RMS_EPS).sqrt()
}

fn matrix_dims(tape: &Tape, x: Var, op: &'static str) -> Result<(usize, usize)> {
    match tape.shape(x) {
        [r, h] if *h > 0 => Ok((*r, *h)),
        other => Err(shape_err(op, "[R, H] with H >= 1", format!("{other:?}"))),
    }
}

fn check_vector(tape: &Tape, v: Var, h: usize, op: &'static str) -> Result<()> {
    if tape.shape(v) != [h] {
        return Err(shape_err(op, format!("[{h}]"), format!("{:?}", tape.shape(v))));
    }
    Ok(())
}

struct RmsNormOp {
    rows: usize,
    h: usize,
    inv_rms: Vec<f64>,
}

impl CustomOp for RmsNormOp {
    fn name(&self) -> &'static str {
        "rmsnorm"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (x, gain, g) = (inputs[0].data(), inputs[1].data(), grad.data());
        let h = self.h;
        let mut gx = vec![0.0; x.len()];
        let mut gg = vec![0.0; h];
        for r in 0..self.rows {
            let s = self.inv_rms[r];
            let row = r * h..(r + 1) * h;
            let (xr, gr) = (&x[row.clone()], &g[row.clone()]);
            let dot: f64 = (0..h).map(|i| gr[i] * gain[i] * xr[i]).sum();
            let coeff = s * s * s * dot / h as f64;
            for i in 0..h {
                gx[row.start + i] = gain[i] * gr[i] * s - xr[i] * coeff;
                gg[i] += gr[i] * xr[i] * s;
            }
        }
        vec![
            Tensor::from_parts(vec![self.rows, h], gx),
            Tensor::from_parts(vec![h], gg),
        ]
    }
}

/// RMS normalization of every row of `x: [R, H]` with `gain: [H]`.
pub fn rmsnorm_tape(tape: &mut Tape, x: Var, gain: Var) -> Result<Var> {
    let (rows, h) = matrix_dims(tape, x, "rmsnorm")?;
    check_vector(tape, gain, h, "rmsnorm")?;
    let (xv, gv) = (tape.value(x).data(), tape.value(gain).data());
    let mut out = Vec::with_capacity(rows * h);
    let mut inv_rms = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &xv[r * h..(r + 1) * h];
        inv_rms.push(inverse_rms(row));
        out.extend(rmsnorm(row, gv));
    }
    let out = Tensor::new(vec![rows, h], out)?;
    tape.push_custom(&[x, gain], out, RmsNormOp { rows, h, inv_rms })
}

/// Which moments a batch normalization uses.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Statistics of the rows being normalized.
    Train,
    /// Stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel moments of one training batch. `var` is unbiased when more
/// than one row is present.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchMoments {
    /// Exponential moving average update of running statistics.
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64]) {
        let m = BATCHNORM_MOMENTUM;
        for (r, b) in running_mean.iter_mut().zip(&self.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in running_var.iter_mut().zip(&self.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

struct BatchNormOp {
    rows: usize,
    h: usize,
    /// `(x - mean) / std`
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl CustomOp for BatchNormOp {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (gamma, g) = (inputs[1].data(), grad.data());
        let (rows, h) = (self.rows, self.h);
        let mut g_gamma = vec![0.0; h];
        let mut g_beta = vec![0.0; h];
        for r in 0..rows {
            for c in 0..h {
                let i = r * h + c;
                g_beta[c] += g[i];
                g_gamma[c] += g[i] * self.x_hat[i];
            }
        }
        let mut gx = vec![0.0; rows * h];
        let n = rows as f64;
        for r in 0..rows {
            for c in 0..h {
                let i = r * h + c;
                let scale = gamma[c] * self.inv_std[c];
                gx[i] = if self.batch_stats {
                    scale * (g[i] - g_beta[c] / n - self.x_hat[i] * g_gamma[c] / n)
                } else {
                    scale * g[i]
                };
            }
        }
        vec![
            Tensor::from_parts(vec![rows, h], gx),
            Tensor::from_parts(vec![h], g_gamma),
            Tensor::from_parts(vec![h], g_beta),
        ]
    }
}

/// `gamma * (x - mean) / sqrt(var + 1e-5) + beta` per channel of `x: [R, H]`.
/// Training mode normalizes with the biased batch variance and also returns
/// the moments for the running averages.
pub fn batchnorm_tape(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    mode: BatchNormMode<'_>,
) -> Result<(Var, Option<BatchMoments>)> {
    let (rows, h) = matrix_dims(tape, x, "batchnorm")?;
    check_vector(tape, gamma, h, "batchnorm")?;
    check_vector(tape, beta, h, "batchnorm")?;
    if rows == 0 {
        return Err(shape_err("batchnorm", "at least one row", "0"));
    }
    let xv = tape.value(x).data();
    let (mean, biased_var, moments) = match mode {
        BatchNormMode::Train => {
            let n = rows as f64;
            let mut mean = vec![0.0; h];
            for r in 0..rows {
                for c in 0..h {
                    mean[c] += xv[r * h + c];
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut ss = vec![0.0; h];
            for r in 0..rows {
                for c in 0..h {
                    ss[c] += (xv[r * h + c] - mean[c]).powi(2);
                }
            }
            let biased: Vec<f64> = ss.iter().map(|s| s / n).collect();
            let unbiased = if rows > 1 { ss.iter().map(|s| s / (n - 1.0)).collect() } else { biased.clone() };
            let moments = BatchMoments { mean: mean.clone(), var: unbiased };
            (mean, biased, Some(moments))
        }
        BatchNormMode::Eval { mean, var } => {
            if mean.len() != h || var.len() != h {
                return Err(shape_err("batchnorm", format!("running stats of width {h}"), format!("{} / {}", mean.len(), var.len())));
            }
            (mean.to_vec(), var.to_vec(), None)
        }
    };
    let inv_std: Vec<f64> = biased_var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
    let (gv, bv) = (tape.value(gamma).data(), tape.value(beta).data());
    let mut x_hat = Vec::with_capacity(rows * h);
    let mut out = Vec::with_capacity(rows * h);
    for r in 0..rows {
        for c in 0..h {
            let xh = (xv[r * h + c] - mean[c]) * inv_std[c];
            x_hat.push(xh);
            out.push(gv[c] * xh + bv[c]);
        }
    }
    let out = Tensor::new(vec![rows, h], out)?;
    let op = BatchNormOp {
        rows,
        h,
        x_hat,
        inv_std,
        batch_stats: moments.is_some(),
    };
    let var = tape.push_custom(&[x, gamma, beta], out, op)?;
    Ok((var, moments))
}
