//! Differentiable diagonal SSM scan over multi-channel sequences.
//!
//! Each of the `W` channels of `x: [L, W]` runs its own SISO diagonal
//! recurrence with `N` states, discretized by zero-order hold at every
//! step. The reverse pass is the adjoint recurrence, so the whole scan
//! is a single tape node.

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::ssm::{phi, phi_prime};

/// Which parameters vary along the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanMode {
    /// `dt: [W]`, `b, c: [W, N]`, fixed over time.
    Lti,
    /// `dt: [L]`, `b, c: [L, N]`, shared by every channel.
    Selective,
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    len: usize,
    width: usize,
    n: usize,
    mode: ScanMode,
}

impl Dims {
    fn dt(&self, l: usize, h: usize) -> usize {
        match self.mode {
            ScanMode::Lti => h,
            ScanMode::Selective => l,
        }
    }

    fn bc(&self, l: usize, h: usize, j: usize) -> usize {
        match self.mode {
            ScanMode::Lti => h * self.n + j,
            ScanMode::Selective => l * self.n + j,
        }
    }
}

/// Per-channel discretization tables, recomputed only when a channel's
/// step changes between positions.
struct Coeffs {
    n: usize,
    step: Vec<f64>,
    a_bar: Vec<f64>,
    gain: Vec<f64>,
    dphi: Vec<f64>,
}

impl Coeffs {
    fn new(width: usize, n: usize) -> Self {
        Self {
            n,
            step: vec![f64::NAN; width],
            a_bar: vec![0.0; width * n],
            gain: vec![0.0; width * n],
            dphi: vec![0.0; width * n],
        }
    }

    fn refresh(&mut self, h: usize, step: f64, a: &[f64], with_derivative: bool) {
        if step.to_bits() == self.step[h].to_bits() {
            return;
        }
        self.step[h] = step;
        for j in 0..self.n {
            let i = h * self.n + j;
            let z = step * a[i];
            self.a_bar[i] = z.exp();
            self.gain[i] = phi(z) * step;
            if with_derivative {
                self.dphi[i] = phi_prime(z);
            }
        }
    }
}

struct DiagScan {
    dims: Dims,
    /// `states[(l * W + h) * N + j]` is `h_l` after step `l`.
    states: Vec<f64>,
}

/// Runs the scan. `a` holds the (negative) continuous-time diagonal,
/// one row per channel.
pub fn diag_scan(tape: &mut Tape, x: Var, dt: Var, a: Var, b: Var, c: Var, mode: ScanMode) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    let [len, width] = xs[..] else {
        return Err(shape_err("diag_scan", "x of shape [L, W]", format!("{xs:?}")));
    };
    let a_shape = tape.shape(a).to_vec();
    let [aw, n] = a_shape[..] else {
        return Err(shape_err("diag_scan", "a of shape [W, N]", format!("{a_shape:?}")));
    };
    if aw != width {
        return Err(shape_err("diag_scan", format!("a with {width} rows"), format!("{aw}")));
    }
    let (dt_len, bc_shape) = match mode {
        ScanMode::Lti => (width, [width, n]),
        ScanMode::Selective => (len, [len, n]),
    };
    if tape.value(dt).numel() != dt_len {
        return Err(shape_err("diag_scan", format!("{dt_len} time steps"), format!("{:?}", tape.shape(dt))));
    }
    for v in [b, c] {
        if tape.shape(v) != bc_shape {
            return Err(shape_err("diag_scan", format!("{bc_shape:?}"), format!("{:?}", tape.shape(v))));
        }
    }
    let dims = Dims { len, width, n, mode };
    let (xv, dtv, av, bv, cv) = (
        tape.value(x).data(),
        tape.value(dt).data(),
        tape.value(a).data(),
        tape.value(b).data(),
        tape.value(c).data(),
    );
    let mut states = vec![0.0; len * width * n];
    let mut y = vec![0.0; len * width];
    let mut k = Coeffs::new(width, n);
    let mut state = vec![0.0; width * n];
    for l in 0..len {
        for h in 0..width {
            k.refresh(h, dtv[dims.dt(l, h)], av, false);
            let xl = xv[l * width + h];
            let mut acc = 0.0;
            for j in 0..n {
                let i = h * n + j;
                let bc = dims.bc(l, h, j);
                let b_bar = k.gain[i] * bv[bc];
                let s = k.a_bar[i] * state[i] + b_bar * xl;
                state[i] = s;
                acc += cv[bc] * s;
            }
            y[l * width + h] = acc;
        }
        states[l * width * n..(l + 1) * width * n].copy_from_slice(&state);
    }
    let out = Tensor::new(vec![len, width], y)?;
    tape.push_custom(&[x, dt, a, b, c], out, DiagScan { dims, states })
}

impl CustomOp for DiagScan {
    fn name(&self) -> &'static str {
        "diag_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let Dims { len, width, n, .. } = self.dims;
        let d = self.dims;
        let (xv, dtv, av, bv, cv) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
        );
        let g = grad.data();
        let mut gx = vec![0.0; xv.len()];
        let mut gdt = vec![0.0; dtv.len()];
        let mut ga = vec![0.0; av.len()];
        let mut gb = vec![0.0; bv.len()];
        let mut gc = vec![0.0; cv.len()];
        let mut k = Coeffs::new(width, n);
        // Adjoint carried back from step l+1: a_bar_{l+1} * lambda_{l+1}.
        let mut carry = vec![0.0; width * n];
        for l in (0..len).rev() {
            for h in 0..width {
                let step = dtv[d.dt(l, h)];
                k.refresh(h, step, av, true);
                let gy = g[l * width + h];
                let xl = xv[l * width + h];
                let mut gx_acc = 0.0;
                let mut gdt_acc = 0.0;
                for j in 0..n {
                    let i = h * n + j;
                    let bc = d.bc(l, h, j);
                    let state = self.states[l * width * n + i];
                    gc[bc] += gy * state;
                    let lambda = carry[i] + gy * cv[bc];
                    let (a_bar, gain, aj) = (k.a_bar[i], k.gain[i], av[i]);
                    let prev = if l == 0 { 0.0 } else { self.states[(l - 1) * width * n + i] };

                    let g_abar = lambda * prev;
                    let g_bbar = lambda * xl;
                    gx_acc += lambda * gain * bv[bc];
                    gb[bc] += g_bbar * gain;
                    // d(gain)/d(dt) = e^z, d(gain)/da = dt^2 phi'(z).
                    gdt_acc += g_abar * a_bar * aj + g_bbar * bv[bc] * a_bar;
                    ga[i] += g_abar * a_bar * step + g_bbar * bv[bc] * step * step * k.dphi[i];

                    carry[i] = a_bar * lambda;
                }
                gx[l * width + h] += gx_acc;
                gdt[d.dt(l, h)] += gdt_acc;
            }
        }
        [gx, gdt, ga, gb, gc]
            .into_iter()
            .zip(inputs)
            .map(|(data, t)| Tensor::from_parts(t.shape().to_vec(), data))
            .collect()
    }
}
