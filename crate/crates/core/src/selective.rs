//! Input-dependent (selective) SSM parameters.
//!
//! Every position produces its own `B_l = theta_B x_l`,
//! `C_l = theta_C x_l` and a positive step
//! `delta_l = softplus(delta + theta_delta . x_l)`. One step is shared by
//! all channels of a position.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, shape_err, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::scan_op::{diag_scan, ScanMode};
use crate::ssm::{varying_scan, ScanTrace};

/// Weights of one selective head with `h_dim` input features and `n` states.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveHead<S> {
    /// `[H, N]`
    pub theta_b: Matrix<S>,
    /// `[H, N]`
    pub theta_c: Matrix<S>,
    /// `[H]`
    pub theta_delta: Vec<S>,
    pub delta_base: S,
    pub a_diag: Vec<S>,
}

/// Parameters produced for one position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepParams<S> {
    pub b: Vec<S>,
    pub c: Vec<S>,
    pub delta: S,
}

fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

impl<S: Scalar> SelectiveHead<S> {
    pub fn new(theta_b: Matrix<S>, theta_c: Matrix<S>, theta_delta: Vec<S>, delta_base: S, a_diag: Vec<S>) -> Result<Self> {
        let (h, n) = (theta_b.rows(), theta_b.cols());
        if theta_c.rows() != h || theta_c.cols() != n || theta_delta.len() != h || a_diag.len() != n {
            return Err(shape_err("SelectiveHead::new", format!("H = {h}, N = {n}"), "inconsistent weight shapes"));
        }
        if a_diag.iter().any(|a| !(*a < S::zero())) {
            return Err(invalid("SelectiveHead::new: a_diag must be strictly negative"));
        }
        if !delta_base.is_finite() {
            return Err(invalid("SelectiveHead::new: delta_base must be finite"));
        }
        Ok(Self {
            theta_b,
            theta_c,
            theta_delta,
            delta_base,
            a_diag,
        })
    }

    /// Fan-in uniform weights in `[-1/sqrt(H), 1/sqrt(H)]`, delta 0 and
    /// the HiPPO diagonal for `a`.
    pub fn init(h_dim: usize, n: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (h_dim as f64).sqrt();
        let mut draw = || S::lit(rng.gen_range(-bound..=bound));
        let theta_b = Matrix::from_fn(h_dim, n, |_, _| draw());
        let theta_c = Matrix::from_fn(h_dim, n, |_, _| draw());
        let theta_delta = (0..h_dim).map(|_| draw()).collect();
        Self::new(theta_b, theta_c, theta_delta, S::zero(), crate::ssm::diag_init(n))
    }

    pub fn h_dim(&self) -> usize {
        self.theta_b.rows()
    }

    pub fn n(&self) -> usize {
        self.a_diag.len()
    }
}

/// `(B_l, C_l, delta_l)` for one input vector.
pub fn mamba_params<S: Scalar>(head: &SelectiveHead<S>, x: &[S]) -> Result<StepParams<S>> {
    if x.len() != head.h_dim() {
        return Err(shape_err("mamba_params", format!("{} features", head.h_dim()), format!("{}", x.len())));
    }
    let project = |m: &Matrix<S>| -> Vec<S> {
        (0..m.cols())
            .map(|j| x.iter().enumerate().fold(S::zero(), |acc, (i, xi)| acc + *xi * m.get(i, j)))
            .collect()
    };
    let pre = x.iter().zip(&head.theta_delta).fold(head.delta_base, |acc, (a, b)| acc + *a * *b);
    Ok(StepParams {
        b: project(&head.theta_b),
        c: project(&head.theta_c),
        delta: softplus(pre),
    })
}

/// Runs one selective channel: the parameters come from the rows of `x`
/// (`L x H`), the scanned scalar input is `channel` (length `L`).
pub fn selective_scan<S: Scalar>(head: &SelectiveHead<S>, x: &Matrix<S>, channel: &[S]) -> Result<ScanTrace<S>> {
    if x.rows() == 0 {
        return Err(invalid("selective_scan: empty sequence"));
    }
    if channel.len() != x.rows() {
        return Err(shape_err("selective_scan", format!("{} inputs", x.rows()), format!("{}", channel.len())));
    }
    let steps = (0..x.rows()).map(|l| mamba_params(head, x.row(l))).collect::<Result<Vec<_>>>()?;
    let deltas: Vec<S> = steps.iter().map(|s| s.delta).collect();
    let (bs, cs): (Vec<Vec<S>>, Vec<Vec<S>>) = steps.into_iter().map(|s| (s.b, s.c)).unzip();
    varying_scan(&head.a_diag, &deltas, &bs, &cs, channel)
}

/// `t_l = sum_{i <= l} delta_i`, the sampling instants implied by the steps.
pub fn cumulative_times<S: Scalar>(deltas: &[S]) -> Result<Vec<S>> {
    if let Some(d) = deltas.iter().find(|d| !(**d > S::zero())) {
        return Err(invalid(format!("cumulative_times: step {d} is not positive")));
    }
    Ok(deltas
        .iter()
        .scan(S::zero(), |t, d| {
            *t = *t + *d;
            Some(*t)
        })
        .collect())
}

/// Tape handles of a selective head's trainable weights.
#[derive(Debug, Clone, Copy)]
pub struct SelectiveVars {
    /// `[H, N]`
    pub theta_b: Var,
    /// `[H, N]`
    pub theta_c: Var,
    /// `[H, 1]`
    pub theta_delta: Var,
    /// scalar
    pub delta_base: Var,
    /// `[W, N]`, strictly negative
    pub a: Var,
}

impl SelectiveVars {
    /// Binds a plain head with `a` shared by `width` channels.
    pub fn bind(tape: &mut Tape, head: &SelectiveHead<f64>, width: usize) -> Result<Self> {
        let (h, n) = (head.h_dim(), head.n());
        Ok(Self {
            theta_b: tape.leaf(Tensor::matrix(h, n, head.theta_b.data().to_vec())?),
            theta_c: tape.leaf(Tensor::matrix(h, n, head.theta_c.data().to_vec())?),
            theta_delta: tape.leaf(Tensor::matrix(h, 1, head.theta_delta.clone())?),
            delta_base: tape.leaf(Tensor::scalar(head.delta_base)),
            a: tape.leaf(Tensor::matrix(width, n, head.a_diag.repeat(width))?),
        })
    }
}

/// Per-position steps `softplus(delta + x theta_delta)` as `[L, 1]`.
pub fn selective_deltas_tape(tape: &mut Tape, head: &SelectiveVars, x: Var) -> Result<Var> {
    let pre = tape.matmul(x, head.theta_delta)?;
    let shifted = tape.add(pre, head.delta_base)?;
    tape.softplus(shifted)
}

/// Differentiable selective scan: parameters from `x: [L, H]`, scanned
/// channels `u: [L, W]`.
pub fn selective_scan_tape(tape: &mut Tape, head: &SelectiveVars, x: Var, u: Var) -> Result<Var> {
    let len = tape.shape(x)[0];
    let deltas = selective_deltas_tape(tape, head, x)?;
    let deltas = tape.reshape(deltas, &[len])?;
    let b = tape.matmul(x, head.theta_b)?;
    let c = tape.matmul(x, head.theta_c)?;
    diag_scan(tape, u, deltas, head.a, b, c, ScanMode::Selective)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;
    use crate::ssm::{lti_scan, zoh_discretize, SsmParams};

    fn head(rng: &mut ChaCha8Rng, h: usize, n: usize) -> SelectiveHead<f64> {
        SelectiveHead::init(h, n, rng).unwrap()
    }

    fn random_seq(rng: &mut ChaCha8Rng, len: usize, h: usize) -> Matrix<f64> {
        Matrix::from_fn(len, h, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_delta_weights_give_ln2_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hd = head(&mut rng, 3, 2);
        hd.theta_delta = vec![0.0; 3];
        let p = mamba_params(&hd, &[0.3, -0.2, 0.9]).unwrap();
        assert!((p.delta - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn zero_input_gives_zero_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hd = head(&mut rng, 4, 3);
        let p = mamba_params(&hd, &[0.0; 4]).unwrap();
        assert_eq!(p.b, vec![0.0; 3]);
        assert_eq!(p.c, vec![0.0; 3]);
        assert!(mamba_params(&hd, &[0.0; 3]).is_err());
    }

    #[test]
    fn steps_are_positive_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut hd = head(&mut rng, 5, 2);
        hd.theta_delta.iter_mut().for_each(|w| *w *= 20.0);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            assert!(mamba_params(&hd, &x).unwrap().delta > 0.0);
        }
    }

    #[test]
    fn selectivity_off_equals_lti_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // theta_delta = 0 makes the step constant; a constant-valued input
        // row makes B_l and C_l constant.
        let mut hd = head(&mut rng, 3, 4);
        hd.theta_delta = vec![0.0; 3];
        hd.delta_base = -0.4;
        let row = [0.5, -0.25, 0.8];
        let x = Matrix::from_rows(&vec![row.to_vec(); 16]).unwrap();
        let channel: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let trace = selective_scan(&hd, &x, &channel).unwrap();

        let p = mamba_params(&hd, &row).unwrap();
        let params = SsmParams::new(hd.a_diag.clone(), p.b.clone(), p.c.clone()).unwrap();
        let step = zoh_discretize(&params, p.delta).unwrap();
        let (y, _) = lti_scan(&step, &p.c, &channel, None).unwrap();
        for (a, b) in trace.y.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn raising_the_preactivation_raises_every_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hd = head(&mut rng, 4, 2);
        let mut doubled = hd.clone();
        doubled.theta_delta.iter_mut().for_each(|w| *w *= 2.0);
        for _ in 0..200 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pre: f64 = x.iter().zip(&hd.theta_delta).map(|(a, b)| a * b).sum();
            let (d1, d2) = (mamba_params(&hd, &x).unwrap().delta, mamba_params(&doubled, &x).unwrap().delta);
            if pre > 0.0 {
                assert!(d2 > d1);
            } else if pre < 0.0 {
                assert!(d2 < d1);
            }
        }
    }

    #[test]
    fn cumulative_times_examples() {
        assert_eq!(cumulative_times(&[1.0, 1.0, 1.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(cumulative_times(&[0.5]).unwrap(), vec![0.5]);
        assert!(cumulative_times(&[0.5, 0.0]).is_err());
        assert!(cumulative_times(&[-0.5]).is_err());
    }

    #[test]
    fn cumulative_times_strictly_increase_and_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let len = rng.gen_range(1..40);
            let d: Vec<f64> = (0..len).map(|_| rng.gen_range(1e-6..2.0)).collect();
            let t = cumulative_times(&d).unwrap();
            assert!(t.windows(2).all(|w| w[1] > w[0]));
            assert!((t[0] - d[0]).abs() < 1e-12);
            for l in 1..len {
                assert!(((t[l] - t[l - 1]) - d[l]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_version_matches_plain_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hd = head(&mut rng, 3, 4);
        let x = random_seq(&mut rng, 10, 3);
        let channel: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let plain = selective_scan(&hd, &x, &channel).unwrap();

        let mut tape = Tape::new();
        let vars = SelectiveVars::bind(&mut tape, &hd, 1).unwrap();
        let xv = tape.leaf(Tensor::matrix(10, 3, x.data().to_vec()).unwrap());
        let uv = tape.leaf(Tensor::matrix(10, 1, channel).unwrap());
        let y = selective_scan_tape(&mut tape, &vars, xv, uv).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&plain.y) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_wrt_theta_delta_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let hd = head(&mut rng, 3, 2);
        let x = Tensor::matrix(8, 3, random_seq(&mut rng, 8, 3).into_vec()).unwrap();
        let theta_delta = Tensor::matrix(3, 1, hd.theta_delta.clone()).unwrap();
        let err = grad_check(
            |t, v| {
                let mut vars = SelectiveVars::bind(t, &hd, 3)?;
                vars.theta_delta = v[0];
                let xv = t.leaf(x.clone());
                let y = selective_scan_tape(t, &vars, xv, xv)?;
                let w = t.leaf(Tensor::full(&[8, 3], 0.7));
                let p = t.mul(y, w)?;
                t.sum_all(p)
            },
            &[theta_delta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
