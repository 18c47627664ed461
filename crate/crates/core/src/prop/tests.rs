use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ssm::{lti_scan, zoh_discretize, SsmParams};

/// Re-scan one step at a time through the LTI path, carrying the state.
fn stepwise_final(a: &[f64], deltas: &[f64], xs: &[Vec<f64>]) -> Vec<f64> {
    let mut h = vec![0.0; a.len()];
    for (d, x) in deltas.iter().zip(xs) {
        let params = SsmParams::new(a.to_vec(), x.clone(), vec![0.0; a.len()]).unwrap();
        let step = zoh_discretize(&params, *d).unwrap();
        h = lti_scan(&step, &vec![0.0; a.len()], &[1.0], Some(&h)).unwrap().1;
    }
    h
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    num / b.iter().fold(0.0f64, |m, y| m.max(y.abs()))
}

fn sample(seed: u64) -> PropInstance<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=4);
    let len = rng.gen_range(2..=32);
    random_instance(&mut rng, n, len).unwrap()
}

#[test]
fn removing_last_element_is_prefix_state() {
    for seed in 0..20 {
        let mut inst = sample(seed);
        inst.m = inst.len();
        let (_, hm) = leave_one_out_states(&inst).unwrap();
        let len = inst.len();
        let prefix = stepwise_final(&inst.a_diag, &inst.deltas[..len - 1], &inst.x_seq[..len - 1]);
        assert_eq!(hm, prefix);
    }
}

#[test]
fn zero_step_removal_is_exact() {
    for seed in 0..20 {
        let inst = sample(seed).with_delta_m(0.0);
        let (h, hm) = leave_one_out_states(&inst).unwrap();
        assert_eq!(h, hm);
        assert!(closed_form_diff(&inst).unwrap().iter().all(|d| *d == 0.0));
    }
}

#[test]
fn removed_state_matches_independent_rescan() {
    for seed in 0..50 {
        let inst = sample(seed);
        let (h, hm) = leave_one_out_states(&inst).unwrap();
        assert_eq!(h, stepwise_final(&inst.a_diag, &inst.deltas, &inst.x_seq));
        let keep: Vec<usize> = (0..inst.len()).filter(|l| *l != inst.m - 1).collect();
        let deltas: Vec<f64> = keep.iter().map(|&l| inst.deltas[l]).collect();
        let xs: Vec<Vec<f64>> = keep.iter().map(|&l| inst.x_seq[l].clone()).collect();
        assert_eq!(hm, stepwise_final(&inst.a_diag, &deltas, &xs));
    }
}

#[test]
fn closed_form_matches_two_scans() {
    for seed in 100..200 {
        let inst = sample(seed);
        let (h, hm) = leave_one_out_states(&inst).unwrap();
        let diff: Vec<f64> = h.iter().zip(&hm).map(|(a, b)| a - b).collect();
        let cf = closed_form_diff(&inst).unwrap();
        assert!(rel(&diff, &cf) < 1e-9, "seed {seed}: {}", rel(&diff, &cf));
    }
}

#[test]
fn last_element_closed_form_has_no_decay_factor() {
    let inst = PropInstance::new(
        vec![-0.5, -1.5],
        vec![0.3, 0.2, 0.4],
        vec![vec![1.0, -1.0], vec![0.5, 2.0], vec![-0.25, 0.75]],
        3,
    )
    .unwrap();
    let h2 = stepwise_final(&inst.a_diag, &inst.deltas[..2], &inst.x_seq[..2]);
    let cf = closed_form_diff(&inst).unwrap();
    for j in 0..2 {
        let a = inst.a_diag[j];
        let expect = (a * 0.4f64).exp_m1() * (h2[j] + inst.x_seq[2][j] / a);
        assert_eq!(cf[j], expect);
    }
}

/// Instance whose `x_m` cancels `h_{m-1}`: `alpha` are powers of two so
/// `-alpha h / alpha == h` exactly.
fn annihilating() -> PropInstance<f64> {
    let a = vec![-0.5, -2.0, -1.0];
    let deltas = vec![0.3, 0.2, 0.25, 0.4, 0.1];
    let mut xs = vec![vec![1.0, -0.5, 0.25], vec![0.75, 0.5, -1.0], vec![0.0; 3], vec![0.3, 0.1, -0.2], vec![1.0, 1.0, 1.0]];
    let h = stepwise_final(&a, &deltas[..2], &xs[..2]);
    xs[2] = h.iter().zip(&a).map(|(h, a)| -a * h).collect();
    PropInstance::new(a, deltas, xs, 3).unwrap()
}

#[test]
fn annihilating_input_is_degenerate() {
    let inst = annihilating();
    assert!(closed_form_diff(&inst).unwrap().iter().all(|d| *d == 0.0));
    let report = linearity_sweep(&inst, &default_grid()).unwrap();
    assert!(report.degenerate);
    assert_eq!(report.slope, None);
    assert_eq!(report.c_estimate, None);
}

#[test]
fn sweep_slope_and_constant() {
    for seed in 300..320 {
        let inst = sample(seed);
        let report = linearity_sweep(&inst, &default_grid()).unwrap();
        assert!(!report.degenerate);
        let slope = report.slope.unwrap();
        assert!((0.98..=1.02).contains(&slope), "seed {seed}: slope {slope}");
        assert!(report.residual < 1e-9, "seed {seed}: residual {}", report.residual);
        let n = report.grid.len();
        let r6 = report.distances[n - 1] / report.grid[n - 1];
        let r5 = report.distances[n - 2] / report.grid[n - 2];
        assert!(((r6 - r5) / r6).abs() < 0.01);
        let c = report.c_estimate.unwrap();
        assert!(((c - report.c_limit) / report.c_limit).abs() < 1e-4, "{c} vs {}", report.c_limit);
        assert!(report.distances.windows(2).all(|w| w[1] < w[0]));
    }
}

#[test]
fn sweep_report_serializes() {
    let report = linearity_sweep(&sample(7), &default_grid()).unwrap();
    let json = serde_json::to_string(&report).unwrap();
    let back: LinearityReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
    for key in ["grid", "distances", "slope", "c_estimate", "residual", "degenerate"] {
        assert!(json.contains(&format!("\"{key}\"")));
    }
}

#[test]
fn invalid_inputs() {
    let inst = sample(1);
    assert!(linearity_sweep(&inst, &[1e-1, 1e-2]).is_err());
    assert!(linearity_sweep(&inst, &[1e-1, 1e-2, 1e-3, 1e-3, 1e-5, 1e-6]).is_err());
    assert!(linearity_sweep(&inst, &[1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1]).is_err());

    let single = PropInstance::new(vec![-1.0], vec![0.1], vec![vec![1.0]], 1).unwrap();
    assert!(leave_one_out_states(&single).is_err());

    assert!(PropInstance::new(vec![-1.0], vec![0.1, 0.2], vec![vec![1.0], vec![1.0]], 0).is_err());
    assert!(PropInstance::new(vec![-1.0], vec![0.1, 0.2], vec![vec![1.0], vec![1.0]], 3).is_err());
    assert!(PropInstance::new(vec![-1.0], vec![0.1, -0.2], vec![vec![1.0], vec![1.0]], 1).is_err());
    assert!(PropInstance::new(vec![-1.0], vec![0.1], vec![vec![1.0, 2.0]], 1).is_err());

    let zero_alpha = PropInstance::new(vec![0.0], vec![0.1, 0.2], vec![vec![1.0], vec![1.0]], 1).unwrap();
    assert!(closed_form_diff(&zero_alpha).is_err());

    let stiff = PropInstance::new(vec![-30.0], vec![1.0, 1.0], vec![vec![1.0], vec![1.0]], 1).unwrap();
    assert!(matches!(closed_form_diff(&stiff), Err(Error::OverflowGuard(_))));
}

#[test]
fn grid_helpers() {
    let g = geometric_grid(1e-1, 1e-6, 6).unwrap();
    assert_eq!(g.len(), 6);
    assert_eq!((g[0], g[5]), (1e-1, 1e-6));
    for (a, b) in g.iter().zip(default_grid()) {
        assert!((a - b).abs() / b < 1e-12);
    }
    assert!(geometric_grid(1e-6, 1e-1, 6).is_err());
    assert_eq!(fit_slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]), Some(2.0));
    assert_eq!(fit_slope(&[1.0, 1.0], &[0.0, 2.0]), None);
}

#[test]
fn single_precision_instance() {
    let inst = PropInstance::new(
        vec![-0.5f32, -1.0],
        vec![0.2, 0.3, 0.1],
        vec![vec![1.0, -1.0], vec![0.5, 0.25], vec![-0.5, 2.0]],
        2,
    )
    .unwrap();
    let (h, hm) = leave_one_out_states(&inst).unwrap();
    let cf = closed_form_diff(&inst).unwrap();
    for j in 0..2 {
        assert!(((h[j] - hm[j]) - cf[j]).abs() < 1e-5);
    }
}

proptest! {
    #[test]
    fn closed_form_equivalence(seed in 0u64..100_000) {
        let inst = sample(seed);
        let (h, hm) = leave_one_out_states(&inst).unwrap();
        let diff: Vec<f64> = h.iter().zip(&hm).map(|(a, b)| a - b).collect();
        prop_assert!(rel(&diff, &closed_form_diff(&inst).unwrap()) < 1e-9);
    }

    #[test]
    fn distance_monotone_near_zero(seed in 0u64..100_000) {
        let inst = sample(seed);
        let grid = geometric_grid(1e-4, 1e-7, 8).unwrap();
        let report = linearity_sweep(&inst, &grid).unwrap();
        prop_assert!(report.distances.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn grid_residuals_stay_at_rounding_level() {
    for seed in 300..320 {
        let report = linearity_sweep(&sample(seed), &default_grid()).unwrap();
        for (d, r) in report.grid.iter().zip(&report.grid_residuals) {
            assert!(*r < 1e-13 / d, "seed {seed}: {r} at {d}");
        }
    }
}

#[test]
fn seeded_batch_passes_and_replays() {
    let grid = default_grid();
    let a = verify_batch(9, 5, 4, 32, &grid).unwrap();
    assert_eq!(a.len(), 5);
    assert!(a.iter().all(|o| o.passed && !o.report.degenerate && o.n <= 4 && o.len <= 32));
    assert_eq!(a, verify_batch(9, 5, 4, 32, &grid).unwrap());
    assert!(verify_batch(9, 1, 0, 32, &grid).is_err());
    assert!(verify_batch(9, 1, 4, 32, &grid[..3]).is_err());
}
