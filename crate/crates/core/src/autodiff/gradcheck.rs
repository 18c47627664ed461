use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Maximum relative error between reverse-mode gradients and central
/// differences, over every coordinate of every input:
/// `|analytic - (f(x+he) - f(x-he)) / 2h| / (|analytic| + 1e-8)`.
///
/// `f` must build a scalar on the given tape. Non-differentiable routing
/// inside `f` must be piecewise constant around `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(invalid(format!("grad_check: step must be positive, got {h}")));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for i in 0..inputs[slot].numel() {
            probe[slot] = inputs[slot].perturbed(i, h);
            let plus = eval(&probe)?;
            probe[slot] = inputs[slot].perturbed(i, -h);
            let minus = eval(&probe)?;
            probe[slot] = inputs[slot].clone();
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
        }
    }
    Ok(worst)
}
