//! Numerical check that deleting one element from a diagonal selective scan
//! moves the final state by an amount asymptotically linear in that element's
//! time step.
//!
//! Inputs are the already-projected sequence `x_l = B_l u_l`, so the scan is
//! `h_l = exp(alpha Delta_l) h_{l-1} + (exp(alpha Delta_l) - 1) / alpha * x_l`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::ssm::scan_unchecked;

/// Largest `|alpha_j * sum(Delta)|` for which the closed form is evaluated.
pub const OVERFLOW_GUARD: f64 = 50.0;

/// Number of smallest grid points used by the slope fit.
pub const FIT_POINTS: usize = 4;

/// One leave-one-out experiment. `m` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropInstance<S> {
    pub a_diag: Vec<S>,
    pub deltas: Vec<S>,
    pub x_seq: Vec<Vec<S>>,
    pub m: usize,
}

impl<S: Scalar> PropInstance<S> {
    pub fn new(a_diag: Vec<S>, deltas: Vec<S>, x_seq: Vec<Vec<S>>, m: usize) -> Result<Self> {
        let inst = Self { a_diag, deltas, x_seq, m };
        inst.validate()?;
        Ok(inst)
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn n(&self) -> usize {
        self.a_diag.len()
    }

    /// Copy of the instance with `Delta_m` replaced.
    pub fn with_delta_m(&self, delta_m: S) -> Self {
        let mut out = self.clone();
        out.deltas[self.m - 1] = delta_m;
        out
    }

    fn validate(&self) -> Result<()> {
        let len = self.len();
        if self.a_diag.is_empty() {
            return Err(invalid("PropInstance: empty state"));
        }
        if self.x_seq.len() != len {
            return Err(shape_err("PropInstance", format!("{len} inputs"), self.x_seq.len().to_string()));
        }
        if self.x_seq.iter().any(|x| x.len() != self.n()) {
            return Err(shape_err("PropInstance", format!("inputs of width {}", self.n()), "ragged x_seq"));
        }
        if self.m < 1 || self.m > len {
            return Err(invalid(format!("PropInstance: removal index {} outside 1..={len}", self.m)));
        }
        if self.deltas.iter().any(|d| !(*d >= S::zero()) || !d.is_finite()) {
            return Err(invalid("PropInstance: time steps must be non-negative and finite"));
        }
        if self.a_diag.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite { op: "PropInstance" });
        }
        Ok(())
    }
}

/// Final-state distance measurements for a decreasing grid of `Delta_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    pub grid: Vec<f64>,
    pub distances: Vec<f64>,
    /// Least-squares slope of `ln distance` against `ln Delta_m`.
    pub slope: Option<f64>,
    /// `distance / Delta_m` at the smallest grid point.
    pub c_estimate: Option<f64>,
    /// Per-component limits of `(h_L - h_L^m)_j / Delta_m`.
    pub c_components: Vec<f64>,
    /// Euclidean norm of `c_components`, the limit `c_estimate` approaches.
    pub c_limit: f64,
    /// Normwise relative gap between closed form and two-scan difference at
    /// the instance's own `Delta_m`.
    pub residual: f64,
    /// The same gap at each grid point. Small `Delta_m` makes the two-scan
    /// subtraction cancel, so these grow roughly like `eps / Delta_m`.
    pub grid_residuals: Vec<f64>,
    pub degenerate: bool,
}

/// Final state of the scan (`h0 = 0`), admitting zero-length steps.
fn final_state<S: Scalar>(a_diag: &[S], deltas: &[S], x_seq: &[Vec<S>]) -> Result<Vec<S>> {
    let ones = vec![S::one(); deltas.len()];
    let trace = scan_unchecked(a_diag, deltas, x_seq, x_seq, &ones)?;
    Ok(trace
        .states
        .last()
        .cloned()
        .unwrap_or_else(|| vec![S::zero(); a_diag.len()]))
}

/// `(h_L, h_L^m)`: final state of the full sequence and of the sequence with
/// element `m` and its step removed.
pub fn leave_one_out_states<S: Scalar>(inst: &PropInstance<S>) -> Result<(Vec<S>, Vec<S>)> {
    inst.validate()?;
    if inst.len() == 1 {
        return Err(invalid("leave_one_out_states: removing the only element leaves an empty sequence"));
    }
    let full = final_state(&inst.a_diag, &inst.deltas, &inst.x_seq)?;
    let keep = |l: &usize| *l != inst.m - 1;
    let deltas: Vec<S> = (0..inst.len()).filter(keep).map(|l| inst.deltas[l]).collect();
    let xs: Vec<Vec<S>> = (0..inst.len()).filter(keep).map(|l| inst.x_seq[l].clone()).collect();
    let removed = final_state(&inst.a_diag, &deltas, &xs)?;
    Ok((full, removed))
}

/// Closed-form `h_L - h_L^m`, per component
/// `exp(alpha S) * expm1(alpha Delta_m) * (h_{m-1} + x_m / alpha)` where `S` is
/// the sum of the steps after `m`.
pub fn closed_form_diff<S: Scalar>(inst: &PropInstance<S>) -> Result<Vec<S>> {
    inst.validate()?;
    let weights = annihilator_weights(inst)?.combined();
    let tail = tail_sum(inst);
    let dm = inst.deltas[inst.m - 1];
    guard(inst, tail + dm)?;
    Ok(inst
        .a_diag
        .iter()
        .zip(&weights)
        .map(|(&a, &w)| (a * tail).exp() * (a * dm).exp_m1() * w)
        .collect())
}

/// The two terms of `h_{m-1} + x_m / alpha`, the factor that vanishes on
/// annihilating inputs.
struct Annihilator<S> {
    prefix: Vec<S>,
    scaled_input: Vec<S>,
}

impl<S: Scalar> Annihilator<S> {
    fn combined(&self) -> Vec<S> {
        self.prefix.iter().zip(&self.scaled_input).map(|(h, x)| *h + *x).collect()
    }
}

fn annihilator_weights<S: Scalar>(inst: &PropInstance<S>) -> Result<Annihilator<S>> {
    if inst.a_diag.iter().any(|a| *a == S::zero()) {
        return Err(invalid("closed_form_diff: zero diagonal entry"));
    }
    let m = inst.m;
    let prefix = final_state(&inst.a_diag, &inst.deltas[..m - 1], &inst.x_seq[..m - 1])?;
    let scaled_input = inst.x_seq[m - 1].iter().zip(&inst.a_diag).map(|(x, a)| *x / *a).collect();
    Ok(Annihilator { prefix, scaled_input })
}

fn tail_sum<S: Scalar>(inst: &PropInstance<S>) -> S {
    inst.deltas[inst.m..].iter().fold(S::zero(), |acc, d| acc + *d)
}

fn guard<S: Scalar>(inst: &PropInstance<S>, total: S) -> Result<()> {
    let worst = inst
        .a_diag
        .iter()
        .map(|a| (*a * total).abs().to_f64_lossy())
        .fold(0.0, f64::max);
    if worst > OVERFLOW_GUARD {
        return Err(Error::OverflowGuard(worst));
    }
    Ok(())
}

/// Geometric grid of `points` values from `hi` down to `lo`.
pub fn geometric_grid(hi: f64, lo: f64, points: usize) -> Result<Vec<f64>> {
    if points < 2 || !(hi > lo) || !(lo > 0.0) {
        return Err(invalid(format!("geometric_grid: need hi > lo > 0 and 2+ points, got {hi}, {lo}, {points}")));
    }
    let (top, bottom) = (hi.log10(), lo.log10());
    let step = (bottom - top) / (points - 1) as f64;
    Ok((0..points)
        .map(|i| match i {
            0 => hi,
            i if i == points - 1 => lo,
            i => 10f64.powf(top + step * i as f64),
        })
        .collect())
}

/// The default sweep grid: decades from `1e-1` to `1e-6`.
pub fn default_grid() -> Vec<f64> {
    (1..=6).map(|e| 10f64.powi(-e)).collect()
}

fn norm<S: Scalar>(v: &[S]) -> f64 {
    v.iter()
        .map(|x| x.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Normwise relative gap `max|a - b| / max|b|` (absolute when `b` is zero).
fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let den = max_abs(b);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    if xs.len() < 2 || xs.len() != ys.len() {
        return None;
    }
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Sweeps `Delta_m` over `grid` and measures `||h_L - h_L^m||` by two scans.
///
/// An instance is
/// degenerate when some distance is zero or `h_{m-1} + x_m / alpha` cancels
/// to rounding level; degenerate instances are not fitted.
pub fn linearity_sweep<S: Scalar>(inst: &PropInstance<S>, grid: &[f64]) -> Result<LinearityReport> {
    inst.validate()?;
    if grid.len() < 6 {
        return Err(invalid(format!("linearity_sweep: grid has {} points, need at least 6", grid.len())));
    }
    if grid.windows(2).any(|w| !(w[1] < w[0])) || !(grid[grid.len() - 1] > 0.0) {
        return Err(invalid("linearity_sweep: grid must be positive and strictly decreasing"));
    }

    let to_f64 = |v: &[S]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<_>>();
    let two_scan = |inst: &PropInstance<S>| -> Result<Vec<f64>> {
        let (h, hm) = leave_one_out_states(inst)?;
        Ok(h.iter().zip(&hm).map(|(a, b)| (*a - *b).to_f64_lossy()).collect())
    };

    let residual = relative_gap(&two_scan(inst)?, &to_f64(&closed_form_diff(inst)?));
    let mut distances = Vec::with_capacity(grid.len());
    let mut grid_residuals = Vec::with_capacity(grid.len());
    for &d in grid {
        let probe = inst.with_delta_m(S::lit(d));
        let diff = two_scan(&probe)?;
        grid_residuals.push(relative_gap(&diff, &to_f64(&closed_form_diff(&probe)?)));
        distances.push(norm(&diff));
    }

    let parts = annihilator_weights(inst)?;
    let weights = parts.combined();
    let cancelled = norm(&weights) <= 1e-12 * (norm(&parts.prefix) + norm(&parts.scaled_input));
    let degenerate = cancelled || distances.iter().any(|d| *d == 0.0);

    let tail = tail_sum(inst);
    let c_components: Vec<f64> = inst
        .a_diag
        .iter()
        .zip(&weights)
        .map(|(&a, &w)| (a * (a * tail).exp() * w).to_f64_lossy())
        .collect();
    let c_limit = norm(&c_components);

    let (slope, c_estimate) = if degenerate {
        (None, None)
    } else {
        let start = grid.len() - FIT_POINTS;
        let xs: Vec<f64> = grid[start..].iter().map(|d| d.ln()).collect();
        let ys: Vec<f64> = distances[start..].iter().map(|d| d.ln()).collect();
        let last = grid.len() - 1;
        (fit_slope(&xs, &ys), Some(distances[last] / grid[last]))
    };

    Ok(LinearityReport {
        grid: grid.to_vec(),
        distances,
        slope,
        c_estimate,
        c_components,
        c_limit,
        residual,
        grid_residuals,
        degenerate,
    })
}

/// Random well-conditioned instance: `alpha_j` in `[-2, -0.1]`, steps in
/// `[0.05, 0.5]`, inputs in `[-1, 1]`.
pub fn random_instance(rng: &mut impl rand::Rng, n: usize, len: usize) -> Result<PropInstance<f64>> {
    if n == 0 || len < 2 {
        return Err(invalid("random_instance: need n >= 1 and len >= 2"));
    }
    let a_diag = (0..n).map(|_| rng.gen_range(-2.0..-0.1)).collect();
    let deltas = (0..len).map(|_| rng.gen_range(0.05..0.5)).collect();
    let x_seq = (0..len)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let m = rng.gen_range(1..=len);
    PropInstance::new(a_diag, deltas, x_seq, m)
}

/// Accepted range for the fitted slope.
pub const SLOPE_BAND: (f64, f64) = (0.98, 1.02);

/// Largest accepted closed-form residual.
pub const RESIDUAL_BOUND: f64 = 1e-9;

/// One instance of a seeded batch together with its report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub index: usize,
    pub n: usize,
    pub len: usize,
    pub m: usize,
    pub report: LinearityReport,
    pub passed: bool,
}

impl InstanceOutcome {
    fn judge(index: usize, inst: &PropInstance<f64>, report: LinearityReport) -> Self {
        let slope_ok = report.slope.is_some_and(|s| (SLOPE_BAND.0..=SLOPE_BAND.1).contains(&s));
        let passed = slope_ok && report.residual < RESIDUAL_BOUND;
        Self {
            index,
            n: inst.n(),
            len: inst.len(),
            m: inst.m,
            report,
            passed,
        }
    }
}

/// Sweeps `count` random non-degenerate instances with `N <= max_n` and
/// `L <= max_len` drawn from `seed`. Degenerate draws are skipped.
pub fn verify_batch(seed: u64, count: usize, max_n: usize, max_len: usize, grid: &[f64]) -> Result<Vec<InstanceOutcome>> {
    use rand::{Rng, SeedableRng};
    if max_n == 0 || max_len < 2 {
        return Err(invalid("verify_batch: need max_n >= 1 and max_len >= 2"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 100 * count.max(1) {
            return Err(invalid("verify_batch: too many degenerate draws"));
        }
        let n = rng.gen_range(1..=max_n);
        let len = rng.gen_range(2..=max_len);
        let inst = random_instance(&mut rng, n, len)?;
        let report = match linearity_sweep(&inst, grid) {
            Ok(r) => r,
            Err(Error::OverflowGuard(_)) => continue,
            Err(e) => return Err(e),
        };
        if !report.degenerate {
            out.push(InstanceOutcome::judge(out.len(), &inst, report));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
