//! Selective resampling: compresses a sequence by treating learned
//! steps `delta_l` as sampling intervals and re-reading the sequence on
//! a uniform grid of spacing `delta`.
//!
//! Each grid point `t̄_l = l * delta` is interpolated from its `K`
//! nearest source points `t_k` by a linear map over
//! `[x_k, eps(t̄_l - t_k)]`, where `eps` is a Gaussian basis expansion of
//! the signed time difference. Decompression copies, for every source
//! time, the grid value closest to it.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{invalid, shape_err, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Resampling hyperparameters and weights for sequences with `h` features.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleConfig<S> {
    /// Minimum compression rate. `1` disables compression (ablation).
    pub kappa: S,
    pub window_k: usize,
    pub basis_g: usize,
    /// Grid spacing `delta`, the upper bound of every step.
    pub delta_base: S,
    /// `[H]`
    pub theta_delta: Vec<S>,
    /// `[K * (H + G), H]`
    pub theta_gamma: Matrix<S>,
    /// `[G]`
    pub mus: Vec<S>,
}

impl<S: Scalar> ResampleConfig<S> {
    pub fn new(
        kappa: S,
        window_k: usize,
        delta_base: S,
        theta_delta: Vec<S>,
        theta_gamma: Matrix<S>,
        mus: Vec<S>,
    ) -> Result<Self> {
        validate_hyper(kappa, window_k, mus.len(), delta_base)?;
        let h = theta_delta.len();
        let g = mus.len();
        if theta_gamma.rows() != window_k * (h + g) || theta_gamma.cols() != h {
            return Err(shape_err(
                "ResampleConfig::new",
                format!("theta_gamma [{}, {h}]", window_k * (h + g)),
                format!("[{}, {}]", theta_gamma.rows(), theta_gamma.cols()),
            ));
        }
        Ok(Self {
            kappa,
            window_k,
            basis_g: g,
            delta_base,
            theta_delta,
            theta_gamma,
            mus,
        })
    }

    /// Fan-in uniform weights, `delta = 1`, and the basis means on an
    /// even grid over `[-K delta, K delta]`.
    pub fn init(h: usize, kappa: S, window_k: usize, basis_g: usize, rng: &mut impl Rng) -> Result<Self> {
        validate_hyper(kappa, window_k, basis_g, S::one())?;
        let delta_base = S::one();
        let td_bound = 1.0 / (h as f64).sqrt();
        let theta_delta = (0..h).map(|_| S::lit(rng.gen_range(-td_bound..=td_bound))).collect();
        let fan_in = window_k * (h + basis_g);
        let g_bound = 1.0 / (fan_in as f64).sqrt();
        let theta_gamma = Matrix::from_fn(fan_in, h, |_, _| S::lit(rng.gen_range(-g_bound..=g_bound)));
        let mus = basis_means(window_k, basis_g, delta_base);
        Self::new(kappa, window_k, delta_base, theta_delta, theta_gamma, mus)
    }

    /// `theta_gamma` copies the `x` block of the centre window slot and
    /// ignores the distance features. With `K = 1` the centre slot is
    /// the nearest neighbour.
    pub fn center_copy(h: usize, kappa: S, window_k: usize, basis_g: usize) -> Result<Self> {
        let slot = (window_k - 1) / 2;
        let fan_in = window_k * (h + basis_g);
        let theta_gamma = Matrix::from_fn(fan_in, h, |r, c| if r == slot * (h + basis_g) + c { S::one() } else { S::zero() });
        let mus = basis_means(window_k, basis_g, S::one());
        Self::new(kappa, window_k, S::one(), vec![S::zero(); h], theta_gamma, mus)
    }

    pub fn h_dim(&self) -> usize {
        self.theta_delta.len()
    }
}

fn validate_hyper<S: Scalar>(kappa: S, window_k: usize, basis_g: usize, delta_base: S) -> Result<()> {
    if !(kappa > S::zero() && kappa <= S::one()) {
        return Err(invalid(format!("kappa must lie in (0, 1], got {kappa}")));
    }
    if window_k == 0 || basis_g == 0 {
        return Err(invalid("window size and basis size must be at least 1"));
    }
    if !(delta_base > S::zero()) || !delta_base.is_finite() {
        return Err(invalid(format!("delta must be positive, got {delta_base}")));
    }
    Ok(())
}

/// Evenly spaced means over `[-K delta, K delta]`; a single mean sits at 0.
pub fn basis_means<S: Scalar>(window_k: usize, basis_g: usize, delta: S) -> Vec<S> {
    let span = S::from_usize_lossy(window_k) * delta;
    if basis_g == 1 {
        return vec![S::zero()];
    }
    let step = (span + span) / S::from_usize_lossy(basis_g - 1);
    (0..basis_g).map(|i| -span + step * S::from_usize_lossy(i)).collect()
}

/// Source and target sampling instants with the routing between them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResamplePlan<S> {
    pub src_times: Vec<S>,
    /// `t̄_l = l * delta` for `l = 1..=dst_len`.
    pub dst_times: Vec<S>,
    /// `K` source indices per grid point, by ascending source time.
    pub neighbors: Vec<Vec<usize>>,
    pub dst_len: usize,
    pub delta_base: S,
}

impl<S: Scalar> ResamplePlan<S> {
    pub fn src_len(&self) -> usize {
        self.src_times.len()
    }

    /// Fills `neighbors` with the `k` nearest sources of every grid point.
    pub fn route(mut self, k: usize) -> Self {
        self.neighbors = self.dst_times.iter().map(|&t| knn_indices(t, &self.src_times, k)).collect();
        self
    }

    /// For each source time, the grid index closest to it (ties to the
    /// lower index).
    pub fn decompress_indices(&self) -> Vec<usize> {
        self.src_times.iter().map(|&t| nearest_index(t, &self.dst_times)).collect()
    }
}

/// `delta_l = sigmoid(theta_delta . x_l) * delta * (1 - kappa) + kappa * delta`,
/// which keeps every step in `[kappa delta, delta]`.
pub fn serpent_deltas<S: Scalar>(cfg: &ResampleConfig<S>, x: &Matrix<S>) -> Result<Vec<S>> {
    if x.cols() != cfg.h_dim() {
        return Err(shape_err("serpent_deltas", format!("{} features", cfg.h_dim()), format!("{}", x.cols())));
    }
    if x.rows() == 0 {
        return Err(invalid("serpent_deltas: empty sequence"));
    }
    let span = cfg.delta_base * (S::one() - cfg.kappa);
    let floor = cfg.kappa * cfg.delta_base;
    Ok((0..x.rows())
        .map(|l| {
            let pre = x.row(l).iter().zip(&cfg.theta_delta).fold(S::zero(), |acc, (a, b)| acc + *a * *b);
            sigmoid(pre) * span + floor
        })
        .collect())
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Source times from the steps and the uniform target grid.
///
/// `dst_len = max(1, floor(t_L / delta))`, capped at `L`. The floor
/// tolerates the rounding of the running sum so that steps all equal to
/// `delta` yield exactly `L` grid points.
pub fn build_grid<S: Scalar>(deltas: &[S], delta_base: S) -> Result<ResamplePlan<S>> {
    if deltas.is_empty() {
        return Err(invalid("build_grid: empty sequence"));
    }
    if let Some(d) = deltas.iter().find(|d| !(**d > S::zero())) {
        return Err(invalid(format!("build_grid: step {d} is not positive")));
    }
    if !(delta_base > S::zero()) {
        return Err(invalid("build_grid: delta must be positive"));
    }
    let src_times = crate::selective::cumulative_times(deltas)?;
    let len = deltas.len();
    let ratio = src_times[len - 1] / delta_base;
    let slack = ratio * S::epsilon() * S::from_usize_lossy(len + 2);
    let dst_len = (ratio + slack).floor().to_usize().unwrap_or(0).clamp(1, len);
    let dst_times = (1..=dst_len).map(|l| S::from_usize_lossy(l) * delta_base).collect();
    Ok(ResamplePlan {
        src_times,
        dst_times,
        neighbors: Vec::new(),
        dst_len,
        delta_base,
    })
}

/// Indices of the `k` source times closest to `t`, ties to the lower
/// index, returned in ascending order. When `k` exceeds the number of
/// sources the window holds all of them and repeats the last.
pub fn knn_indices<S: Scalar>(t: S, src_times: &[S], k: usize) -> Vec<usize> {
    let len = src_times.len();
    if len == 0 || k == 0 {
        return Vec::new();
    }
    let take = k.min(len);
    // First source at or after t; the nearest set is a contiguous run around it.
    let split = src_times.partition_point(|&s| s < t);
    let (mut lo, mut hi) = (split, split);
    while hi - lo < take {
        let left = (lo > 0).then(|| t - src_times[lo - 1]);
        let right = (hi < len).then(|| src_times[hi] - t);
        match (left, right) {
            (Some(l), Some(r)) if l <= r => lo -= 1,
            (Some(_), None) => lo -= 1,
            _ => hi += 1,
        }
    }
    let mut out: Vec<usize> = (lo..hi).collect();
    out.resize(k, hi - 1);
    out
}

fn nearest_index<S: Scalar>(t: S, sorted: &[S]) -> usize {
    let split = sorted.partition_point(|&s| s < t);
    match (split.checked_sub(1), (split < sorted.len()).then_some(split)) {
        (Some(l), Some(r)) => {
            if t - sorted[l] <= sorted[r] - t {
                l
            } else {
                r
            }
        }
        (Some(l), None) => l,
        (None, Some(r)) => r,
        (None, None) => 0,
    }
}

/// `eps(d)_i = exp(-(d - mu_i)^2)`.
pub fn gauss_expand<S: Scalar>(d: S, mus: &[S]) -> Vec<S> {
    mus.iter().map(|&mu| (-(d - mu) * (d - mu)).exp()).collect()
}

/// Plan with routing for `x` under `cfg`.
pub fn plan<S: Scalar>(cfg: &ResampleConfig<S>, x: &Matrix<S>) -> Result<(Vec<S>, ResamplePlan<S>)> {
    let deltas = serpent_deltas(cfg, x)?;
    let plan = build_grid(&deltas, cfg.delta_base)?.route(cfg.window_k);
    Ok((deltas, plan))
}

/// `x̄_l = theta_gamma([x_k, eps(t̄_l - t_k)] for k in N_K(t̄_l))`.
pub fn compress<S: Scalar>(cfg: &ResampleConfig<S>, x: &Matrix<S>, plan: &ResamplePlan<S>) -> Result<Matrix<S>> {
    if x.rows() != plan.src_len() || x.cols() != cfg.h_dim() {
        return Err(shape_err(
            "compress",
            format!("[{}, {}]", plan.src_len(), cfg.h_dim()),
            format!("[{}, {}]", x.rows(), x.cols()),
        ));
    }
    if plan.neighbors.len() != plan.dst_len || plan.neighbors.iter().any(|n| n.len() != cfg.window_k) {
        return Err(invalid("compress: plan is not routed for this window size"));
    }
    let width = cfg.window_k * (cfg.h_dim() + cfg.basis_g);
    let mut features = Vec::with_capacity(plan.dst_len * width);
    for (l, nbrs) in plan.neighbors.iter().enumerate() {
        for &k in nbrs {
            features.extend_from_slice(x.row(k));
            features.extend(gauss_expand(plan.dst_times[l] - plan.src_times[k], &cfg.mus));
        }
    }
    Matrix::from_vec(plan.dst_len, width, features)?.matmul(&cfg.theta_gamma)
}

/// `y_l = ȳ_k` with `k = argmin_j |t_l - t̄_j|`.
pub fn decompress<S: Scalar>(y_bar: &Matrix<S>, plan: &ResamplePlan<S>) -> Result<Matrix<S>> {
    if y_bar.rows() != plan.dst_len {
        return Err(shape_err("decompress", format!("{} rows", plan.dst_len), format!("{}", y_bar.rows())));
    }
    let idx = plan.decompress_indices();
    Ok(Matrix::from_fn(idx.len(), y_bar.cols(), |l, c| y_bar.get(idx[l], c)))
}

/// Tape handles of a resampler's trainable weights.
#[derive(Debug, Clone, Copy)]
pub struct ResampleVars {
    /// `[H, 1]`
    pub theta_delta: Var,
    /// scalar, positive
    pub delta_base: Var,
    /// `[K * (H + G), H]`
    pub theta_gamma: Var,
    /// `[G]`
    pub mus: Var,
}

impl ResampleVars {
    pub fn bind(tape: &mut Tape, cfg: &ResampleConfig<f64>) -> Result<Self> {
        let h = cfg.h_dim();
        Ok(Self {
            theta_delta: tape.leaf(Tensor::matrix(h, 1, cfg.theta_delta.clone())?),
            delta_base: tape.leaf(Tensor::scalar(cfg.delta_base)),
            theta_gamma: tape.leaf(Tensor::matrix(
                cfg.theta_gamma.rows(),
                cfg.theta_gamma.cols(),
                cfg.theta_gamma.data().to_vec(),
            )?),
            mus: tape.leaf(Tensor::vector(cfg.mus.clone())?),
        })
    }
}

/// Differentiable steps as `[L, 1]`.
pub fn serpent_deltas_tape(tape: &mut Tape, vars: &ResampleVars, kappa: f64, x: Var) -> Result<Var> {
    let pre = tape.matmul(x, vars.theta_delta)?;
    let gate = tape.sigmoid(pre)?;
    let span = tape.scale(vars.delta_base, 1.0 - kappa)?;
    let scaled = tape.mul(gate, span)?;
    let floor = tape.scale(vars.delta_base, kappa)?;
    tape.add(scaled, floor)
}

/// Differentiable compression. Routing is computed from the forward
/// values and held fixed; gradients reach `x`, `theta_gamma`, the basis
/// means, and through the distances the steps and `delta`.
pub fn compress_tape(
    tape: &mut Tape,
    vars: &ResampleVars,
    kappa: f64,
    window_k: usize,
    x: Var,
) -> Result<(Var, ResamplePlan<f64>)> {
    let deltas = serpent_deltas_tape(tape, vars, kappa, x)?;
    let times = tape.cumsum(deltas)?;
    let delta_base = tape.value(vars.delta_base).item()?;
    let plan = build_grid(tape.value(deltas).data(), delta_base)?.route(window_k);
    debug_assert_eq!(tape.value(times).data(), plan.src_times.as_slice());
    let features = gather_features(tape, x, times, vars.delta_base, vars.mus, &plan)?;
    let out = tape.matmul(features, vars.theta_gamma)?;
    Ok((out, plan))
}

/// Copy-closest decompression on the tape.
pub fn decompress_tape(tape: &mut Tape, y_bar: Var, plan: &ResamplePlan<f64>) -> Result<Var> {
    if tape.shape(y_bar).first() != Some(&plan.dst_len) {
        return Err(shape_err("decompress", format!("{} rows", plan.dst_len), format!("{:?}", tape.shape(y_bar))));
    }
    tape.gather_rows(y_bar, &plan.decompress_indices())
}

struct GatherFeatures {
    neighbors: Vec<Vec<usize>>,
}

/// Builds the `[L̄, K (H + G)]` interpolation features for `plan`.
fn gather_features(
    tape: &mut Tape,
    x: Var,
    times: Var,
    delta_base: Var,
    mus: Var,
    plan: &ResamplePlan<f64>,
) -> Result<Var> {
    let (xv, tv, mv) = (tape.value(x), tape.value(times).data(), tape.value(mus).data());
    let h = xv.shape()[1];
    let delta = tape.value(delta_base).item()?;
    let mut data = Vec::new();
    for (l, nbrs) in plan.neighbors.iter().enumerate() {
        let t_dst = (l + 1) as f64 * delta;
        for &k in nbrs {
            data.extend_from_slice(xv.row(k));
            data.extend(gauss_expand(t_dst - tv[k], mv));
        }
    }
    let width = plan.neighbors.first().map_or(0, |n| n.len() * (h + mv.len()));
    let out = Tensor::new(vec![plan.dst_len, width], data)?;
    tape.push_custom(
        &[x, times, delta_base, mus],
        out,
        GatherFeatures {
            neighbors: plan.neighbors.clone(),
        },
    )
}

impl CustomOp for GatherFeatures {
    fn name(&self) -> &'static str {
        "gather_features"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (x, times, delta, mus) = (inputs[0], inputs[1].data(), inputs[2].data()[0], inputs[3].data());
        let h = x.shape()[1];
        let g_dim = mus.len();
        let width = output.shape()[1];
        let mut gx = vec![0.0; x.numel()];
        let mut gt = vec![0.0; times.len()];
        let mut gdelta = 0.0;
        let mut gmu = vec![0.0; g_dim];
        for (l, nbrs) in self.neighbors.iter().enumerate() {
            let t_dst = (l + 1) as f64 * delta;
            for (slot, &k) in nbrs.iter().enumerate() {
                let base = l * width + slot * (h + g_dim);
                for c in 0..h {
                    gx[k * h + c] += grad.data()[base + c];
                }
                let d = t_dst - times[k];
                let mut gd = 0.0;
                for (i, &mu) in mus.iter().enumerate() {
                    let eps = output.data()[base + h + i];
                    // d eps / d d = -2 (d - mu) eps = -d eps / d mu
                    let local = -2.0 * (d - mu) * eps * grad.data()[base + h + i];
                    gd += local;
                    gmu[i] -= local;
                }
                gdelta += gd * (l + 1) as f64;
                gt[k] -= gd;
            }
        }
        vec![
            Tensor::from_parts(x.shape().to_vec(), gx),
            Tensor::from_parts(inputs[1].shape().to_vec(), gt),
            Tensor::from_parts(inputs[2].shape().to_vec(), vec![gdelta]),
            Tensor::from_parts(inputs[3].shape().to_vec(), gmu),
        ]
    }
}
