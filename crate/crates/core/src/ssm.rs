//! Linear time-invariant and time-varying diagonal state space models:
//! zero-order-hold discretization, recurrent scans, the equivalent
//! causal convolution, and HiPPO-style initializations.

use crate::error::{invalid, shape_err, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Below this magnitude `phi` switches to its Taylor expansion.
pub const PHI_TAYLOR_THRESHOLD: f64 = 1e-4;

/// Continuous-time diagonal SSM `h' = diag(a) h + b x`, `y = <c, h>`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<S> {
    a_diag: Vec<S>,
    b: Vec<S>,
    c: Vec<S>,
}

impl<S: Scalar> SsmParams<S> {
    pub fn new(a_diag: Vec<S>, b: Vec<S>, c: Vec<S>) -> Result<Self> {
        if a_diag.is_empty() || a_diag.len() != b.len() || a_diag.len() != c.len() {
            return Err(shape_err(
                "SsmParams::new",
                "non-empty a, b, c of equal length",
                format!("{}, {}, {}", a_diag.len(), b.len(), c.len()),
            ));
        }
        if let Some(a) = a_diag.iter().find(|a| !(**a < S::zero())) {
            return Err(invalid(format!("SsmParams::new: diagonal entry {a} is not strictly negative")));
        }
        Ok(Self { a_diag, b, c })
    }

    pub fn n(&self) -> usize {
        self.a_diag.len()
    }

    pub fn a_diag(&self) -> &[S] {
        &self.a_diag
    }

    pub fn b(&self) -> &[S] {
        &self.b
    }

    pub fn c(&self) -> &[S] {
        &self.c
    }
}

/// Discretized parameters for one step of length `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStep<S> {
    pub a_bar: Vec<S>,
    pub b_bar: Vec<S>,
    pub delta: S,
}

/// HiPPO matrix with its normal-plus-rank-one split.
#[derive(Debug, Clone, PartialEq)]
pub struct NplrInit<S> {
    pub a_full: Matrix<S>,
    pub a_normal: Matrix<S>,
    pub p: Vec<S>,
    pub q: Vec<S>,
}

/// `phi(z) = (e^z - 1) / z`, continuous at 0.
pub fn phi<S: Scalar>(z: S) -> S {
    if z.abs() < S::lit(PHI_TAYLOR_THRESHOLD) {
        S::one() + z / S::lit(2.0) + z * z / S::lit(6.0)
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`phi`], `(z e^z - (e^z - 1)) / z^2`.
pub fn phi_prime<S: Scalar>(z: S) -> S {
    if z.abs() < S::lit(PHI_TAYLOR_THRESHOLD) {
        S::lit(0.5) + z / S::lit(3.0) + z * z / S::lit(8.0)
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// HiPPO state matrix: `-sqrt(2i+1) sqrt(2j+1)` below the diagonal,
/// `-(i+1)` on it, zero above (0-based indices).
pub fn hippo_matrix<S: Scalar>(n: usize) -> Result<Matrix<S>> {
    if n == 0 {
        return Err(invalid("hippo_matrix: state size must be at least 1"));
    }
    Ok(Matrix::from_fn(n, n, |i, j| {
        let (fi, fj) = (S::from_usize_lossy(i), S::from_usize_lossy(j));
        let two = S::lit(2.0);
        if i > j {
            -((two * fi + S::one()).sqrt() * (two * fj + S::one()).sqrt())
        } else if i == j {
            -(fi + S::one())
        } else {
            S::zero()
        }
    }))
}

/// Splits the HiPPO matrix as `a_normal + p q^T` with
/// `p_i = sqrt(i + 1/2)`, `q = -p`, which leaves
/// `a_normal = -I/2 + skew-symmetric`.
pub fn nplr_components<S: Scalar>(n: usize) -> Result<NplrInit<S>> {
    let a_full = hippo_matrix::<S>(n)?;
    let p: Vec<S> = (0..n).map(|i| (S::from_usize_lossy(i) + S::lit(0.5)).sqrt()).collect();
    let q: Vec<S> = p.iter().map(|v| -*v).collect();
    let a_normal = Matrix::from_fn(n, n, |i, j| a_full.get(i, j) - p[i] * q[j]);
    Ok(NplrInit { a_full, a_normal, p, q })
}

/// `max |M M^T - M^T M|`, zero for normal matrices.
pub fn normality_residual<S: Scalar>(m: &Matrix<S>) -> Result<S> {
    let mt = m.transpose();
    let left = m.matmul(&mt)?;
    let right = mt.matmul(m)?;
    Ok(left.sub(&right)?.max_abs())
}

/// Diagonal of the HiPPO matrix: `-(j+1)`.
pub fn diag_init<S: Scalar>(n: usize) -> Vec<S> {
    (0..n).map(|j| -S::from_usize_lossy(j + 1)).collect()
}

fn discretize_raw<S: Scalar>(a_diag: &[S], b: &[S], delta: S) -> (Vec<S>, Vec<S>) {
    a_diag
        .iter()
        .zip(b)
        .map(|(&a, &b)| {
            let z = delta * a;
            (z.exp(), phi(z) * delta * b)
        })
        .unzip()
}

/// Zero-order hold: `a_bar = exp(delta a)`, `b_bar = phi(delta a) delta b`.
pub fn zoh_discretize<S: Scalar>(params: &SsmParams<S>, delta: S) -> Result<DiscreteStep<S>> {
    if !(delta >= S::zero()) || !delta.is_finite() {
        return Err(invalid(format!("zoh_discretize: delta must be finite and >= 0, got {delta}")));
    }
    let (a_bar, b_bar) = discretize_raw(&params.a_diag, &params.b, delta);
    Ok(DiscreteStep { a_bar, b_bar, delta })
}

/// Recurrent LTI scan `h_l = a_bar * h_{l-1} + b_bar x_l`, `y_l = <c, h_l>`.
/// Returns the outputs and the final state.
pub fn lti_scan<S: Scalar>(step: &DiscreteStep<S>, c: &[S], x: &[S], h0: Option<&[S]>) -> Result<(Vec<S>, Vec<S>)> {
    let n = step.a_bar.len();
    if x.is_empty() {
        return Err(invalid("lti_scan: empty input"));
    }
    if step.b_bar.len() != n || c.len() != n || h0.is_some_and(|h| h.len() != n) {
        return Err(shape_err("lti_scan", format!("state size {n}"), "inconsistent c, b_bar or h0"));
    }
    let mut h = h0.map_or_else(|| vec![S::zero(); n], <[S]>::to_vec);
    let mut y = Vec::with_capacity(x.len());
    for &xl in x {
        for j in 0..n {
            h[j] = step.a_bar[j] * h[j] + step.b_bar[j] * xl;
        }
        y.push(dot(c, &h));
    }
    Ok((y, h))
}

/// Convolution kernel `K[k] = <c, a_bar^k b_bar>` for `k < len`.
pub fn conv_kernel<S: Scalar>(step: &DiscreteStep<S>, c: &[S], len: usize) -> Vec<S> {
    let mut power = step.b_bar.clone();
    let mut kernel = Vec::with_capacity(len);
    for _ in 0..len {
        kernel.push(dot(c, &power));
        for (p, a) in power.iter_mut().zip(&step.a_bar) {
            *p = *p * *a;
        }
    }
    kernel
}

/// Direct causal convolution `y_l = sum_{k<=l} K[k] x_{l-k}`.
pub fn conv_apply<S: Scalar>(x: &[S], kernel: &[S]) -> Result<Vec<S>> {
    if x.len() != kernel.len() {
        return Err(shape_err("conv_apply", format!("kernel of length {}", x.len()), format!("{}", kernel.len())));
    }
    Ok((0..x.len())
        .map(|l| (0..=l).fold(S::zero(), |acc, k| acc + kernel[k] * x[l - k]))
        .collect())
}

/// Outputs and full state trajectory of a time-varying scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanTrace<S> {
    pub y: Vec<S>,
    /// `states[l]` is `h_{l+1}`.
    pub states: Vec<Vec<S>>,
}

impl<S: Scalar> ScanTrace<S> {
    pub fn final_state(&self) -> &[S] {
        self.states.last().map_or(&[], Vec::as_slice)
    }
}

/// Time-varying scan: step `l` is discretized with its own `deltas[l]`
/// and input projection `b_seq[l]`, read out through `c_seq[l]`.
pub fn varying_scan<S: Scalar>(
    a_diag: &[S],
    deltas: &[S],
    b_seq: &[Vec<S>],
    c_seq: &[Vec<S>],
    x: &[S],
) -> Result<ScanTrace<S>> {
    if let Some(d) = deltas.iter().find(|d| !(**d > S::zero())) {
        return Err(invalid(format!("varying_scan: time step {d} is not positive")));
    }
    scan_unchecked(a_diag, deltas, b_seq, c_seq, x)
}

/// As [`varying_scan`] but admits zero-length steps.
pub(crate) fn scan_unchecked<S: Scalar>(
    a_diag: &[S],
    deltas: &[S],
    b_seq: &[Vec<S>],
    c_seq: &[Vec<S>],
    x: &[S],
) -> Result<ScanTrace<S>> {
    let (n, len) = (a_diag.len(), x.len());
    if deltas.len() != len || b_seq.len() != len || c_seq.len() != len {
        return Err(shape_err(
            "varying_scan",
            format!("{len} steps"),
            format!("deltas {}, b {}, c {}", deltas.len(), b_seq.len(), c_seq.len()),
        ));
    }
    if b_seq.iter().chain(c_seq).any(|v| v.len() != n) {
        return Err(shape_err("varying_scan", format!("state size {n}"), "mismatched B_l or C_l"));
    }
    let mut h = vec![S::zero(); n];
    let mut trace = ScanTrace {
        y: Vec::with_capacity(len),
        states: Vec::with_capacity(len),
    };
    for l in 0..len {
        let (a_bar, b_bar) = discretize_raw(a_diag, &b_seq[l], deltas[l]);
        for j in 0..n {
            h[j] = a_bar[j] * h[j] + b_bar[j] * x[l];
        }
        trace.y.push(dot(&c_seq[l], &h));
        trace.states.push(h.clone());
    }
    Ok(trace)
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (x, y)| acc + *x * *y)
}
