use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, Tape, Tensor};
use crate::error::Error;
use crate::ssm::{conv_apply, conv_kernel, zoh_discretize, SsmParams};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn features_config(h: usize, branches: Vec<BranchConfig>, norm: NormKind, position: NormPosition) -> NetworkConfig {
    NetworkConfig {
        input: InputKind::Features { dim: 3 },
        h_dim: h,
        d_state: 3,
        depth: 1,
        head: HeadKind::Classification { n_classes: 3 },
        pooling: Pooling::Mean,
        block: BlockConfig {
            branches,
            widths: None,
            window_k: 2,
            basis_g: 2,
            norm,
            norm_position: position,
            activation: Activation::Silu,
        },
    }
}

fn block_output(model: &Model, x: &Tensor, mode: Mode) -> Tensor {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let out = model.block_forward(&mut tape, &bound, 0, &[xv], mode, &mut Vec::new()).unwrap();
    tape.value(out[0]).clone()
}

#[test]
fn rmsnorm_examples() {
    // Exactly 1 / sqrt(1 + 1e-8).
    for v in rmsnorm(&[1.0; 5], &[1.0; 5]) {
        assert!((v - 1.0).abs() < 1e-8);
    }
    let mut r = rng(1);
    for _ in 0..100 {
        let x: Vec<f64> = (0..7).map(|_| r.gen_range(-3.0..3.0)).collect();
        let y = rmsnorm(&x, &[1.0; 7]);
        let rms = (y.iter().map(|v| v * v).sum::<f64>() / 7.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-6);
    }
}

#[test]
fn rmsnorm_tape_matches_plain() {
    let mut r = rng(2);
    let x = random_tensor(&mut r, &[4, 5], 2.0);
    let gain = random_tensor(&mut r, &[5], 1.5);
    let mut tape = Tape::new();
    let (xv, gv) = (tape.leaf(x.clone()), tape.leaf(gain.clone()));
    let y = rmsnorm_tape(&mut tape, xv, gv).unwrap();
    for row in 0..4 {
        assert_eq!(tape.value(y).row(row), rmsnorm(x.row(row), gain.data()).as_slice());
    }
}

#[test]
fn batchnorm_eval_with_unit_stats_is_identity() {
    let mut r = rng(3);
    let x = random_tensor(&mut r, &[6, 3], 4.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let g = tape.leaf(Tensor::ones(&[3]));
    let b = tape.leaf(Tensor::zeros(&[3]));
    let mode = BatchNormMode::Eval { mean: &[0.0; 3], var: &[1.0; 3] };
    let (y, moments) = batchnorm_tape(&mut tape, xv, g, b, mode).unwrap();
    assert!(moments.is_none());
    // Identity up to the 1e-5 variance floor.
    for (a, e) in tape.value(y).data().iter().zip(x.data()) {
        assert!((a - e).abs() <= 1e-5 * e.abs());
    }
}

#[test]
fn batchnorm_train_standardizes_and_updates_running_stats() {
    let mut r = rng(4);
    let x = random_tensor(&mut r, &[50, 2], 3.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let g = tape.leaf(Tensor::ones(&[2]));
    let b = tape.leaf(Tensor::zeros(&[2]));
    let (y, moments) = batchnorm_tape(&mut tape, xv, g, b, BatchNormMode::Train).unwrap();
    let y = tape.value(y);
    for c in 0..2 {
        let col: Vec<f64> = (0..50).map(|i| y.at2(i, c)).collect();
        let mean = col.iter().sum::<f64>() / 50.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
    let m = moments.unwrap();
    let col0: Vec<f64> = (0..50).map(|i| x.at2(i, 0)).collect();
    let mean0 = col0.iter().sum::<f64>() / 50.0;
    let var0 = col0.iter().map(|v| (v - mean0).powi(2)).sum::<f64>() / 49.0;
    assert!((m.mean[0] - mean0).abs() < 1e-12);
    assert!((m.var[0] - var0).abs() < 1e-12);
    let (mut rm, mut rv) = (vec![0.0, 0.0], vec![1.0, 1.0]);
    m.update_running(&mut rm, &mut rv);
    assert!((rm[0] - 0.1 * mean0).abs() < 1e-12);
    assert!((rv[0] - (0.9 + 0.1 * var0)).abs() < 1e-12);
}

#[test]
fn norm_gradients() {
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[5, 4], 2.0);
    let gain = random_tensor(&mut r, &[4], 1.5);
    let w = random_tensor(&mut r, &[5, 4], 1.0);
    let weighted = |t: &mut Tape, y, w: &Tensor| {
        let wv = t.leaf(w.clone());
        let p = t.mul(y, wv)?;
        t.sum_all(p)
    };
    let err = grad_check(
        |t, v| {
            let y = rmsnorm_tape(t, v[0], v[1])?;
            weighted(t, y, &w)
        },
        &[x.clone(), gain.clone()],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "rmsnorm {err}");
    let beta = random_tensor(&mut r, &[4], 0.5);
    for train in [true, false] {
        let err = grad_check(
            |t, v| {
                let mode = if train {
                    BatchNormMode::Train
                } else {
                    BatchNormMode::Eval { mean: &[0.1, -0.2, 0.3, 0.0], var: &[1.5, 0.5, 2.0, 1.0] }
                };
                let (y, _) = batchnorm_tape(t, v[0], v[1], v[2], mode)?;
                weighted(t, y, &w)
            },
            &[x.clone(), gain.clone(), beta.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "batchnorm train={train}: {err}");
    }
}

#[test]
fn zero_ssm_block_is_norm_of_input() {
    let mut r = rng(6);
    for (norm, position) in [(NormKind::RmsNorm, NormPosition::PostSkip), (NormKind::BatchNorm, NormPosition::PostSkip)] {
        let cfg = features_config(4, vec![BranchConfig::base()], norm, position);
        let mut model = Model::init(cfg, &mut r).unwrap();
        model.set_param("blocks.0.branch0.ssm.c", Tensor::zeros(&[4, 3])).unwrap();
        let x = random_tensor(&mut r, &[9, 4], 2.0);
        let out = block_output(&model, &x, Mode::Train);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let expect = match norm {
            NormKind::RmsNorm => {
                let g = tape.leaf(Tensor::ones(&[4]));
                rmsnorm_tape(&mut tape, xv, g).unwrap()
            }
            _ => {
                let g = tape.leaf(Tensor::ones(&[4]));
                let b = tape.leaf(Tensor::zeros(&[4]));
                batchnorm_tape(&mut tape, xv, g, b, BatchNormMode::Train).unwrap().0
            }
        };
        assert_eq!(&out, tape.value(expect));
    }
}

#[test]
fn blocks_preserve_shape() {
    let mut r = rng(7);
    let branches = vec![BranchConfig::base(), BranchConfig::compressed(0.5), BranchConfig::compressed(0.2)];
    for (norm, position) in [
        (NormKind::BatchNorm, NormPosition::PostSkip),
        (NormKind::RmsNorm, NormPosition::Pre),
        (NormKind::None, NormPosition::Pre),
    ] {
        let cfg = features_config(7, branches.clone(), norm, position);
        let model = Model::init(cfg, &mut r).unwrap();
        for len in [1, 2, 5, 33] {
            let x = random_tensor(&mut r, &[len, 7], 1.0);
            assert_eq!(block_output(&model, &x, Mode::Train).shape(), &[len, 7]);
        }
    }
}

#[test]
fn removing_the_skip_changes_the_output() {
    let mut r = rng(8);
    let cfg = features_config(6, vec![BranchConfig::base(), BranchConfig::compressed(0.5)], NormKind::RmsNorm, NormPosition::PostSkip);
    let model = Model::init(cfg, &mut r).unwrap();
    let x = random_tensor(&mut r, &[10, 6], 1.0);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.leaf(x);
    let with_skip = model.block_forward(&mut tape, &bound, 0, &[xv], Mode::Eval, &mut Vec::new()).unwrap()[0];
    let mixed = model.mixer(&mut tape, &bound, 0, xv).unwrap();
    let gain = bound.get("blocks.0.norm.gain").unwrap();
    let without = rmsnorm_tape(&mut tape, mixed, gain).unwrap();
    assert_ne!(tape.value(with_skip), tape.value(without));
}

#[test]
fn zeroing_one_branch_changes_only_its_slice() {
    let mut r = rng(9);
    let branches = vec![BranchConfig::base(), BranchConfig::compressed(0.5), BranchConfig::compressed(0.2)];
    let cfg = features_config(8, branches, NormKind::BatchNorm, NormPosition::PostSkip);
    let model = Model::init(cfg.clone(), &mut r).unwrap();
    let widths = cfg.branch_widths();
    assert_eq!(widths, vec![4, 2, 2]);
    let x = random_tensor(&mut r, &[20, 8], 1.0);
    let mix = |m: &Model| {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = m.mixer(&mut tape, &bound, 0, xv).unwrap();
        tape.value(out).clone()
    };
    let before = mix(&model);
    for b in 0..3 {
        let mut zeroed = model.clone();
        let name = format!("blocks.0.branch{b}.ssm.c");
        let shape = zeroed.param(&name).unwrap().shape().to_vec();
        zeroed.set_param(&name, Tensor::zeros(&shape)).unwrap();
        let after = mix(&zeroed);
        let start: usize = widths[..b].iter().sum();
        let slice = start..start + widths[b];
        for row in 0..20 {
            for c in 0..8 {
                let (u, v) = (before.at2(row, c), after.at2(row, c));
                if slice.contains(&c) {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(u, v);
                }
            }
        }
        assert_ne!(before, after);
    }
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(10);
    let mut cfg = NetworkConfig::classification(12, 5, 6);
    cfg.block.branches[1].ssm = SsmKind::Selective;
    let model = Model::init(cfg, &mut r).unwrap();
    let inputs: Vec<Input> = (0..3)
        .map(|_| Input::Tokens((0..40).map(|_| r.gen_range(0..12)).collect()))
        .collect();
    let run = || {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let fwd = model.forward(&mut tape, &bound, &inputs, Mode::Train).unwrap();
        fwd.outputs.iter().map(|v| tape.value(*v).clone()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
    assert_eq!(model.predict(&inputs).unwrap(), model.predict(&inputs).unwrap());
}

#[test]
fn lti_branches_match_convolution() {
    let mut r = rng(11);
    let mut cfg = features_config(6, vec![BranchConfig::base(), BranchConfig::base()], NormKind::None, NormPosition::Pre);
    cfg.block.activation = Activation::None;
    cfg.d_state = 4;
    let model = Model::init(cfg, &mut r).unwrap();
    let len = 48;
    let x = random_tensor(&mut r, &[len, 6], 1.0);
    for b in 0..2 {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let u = tape.slice(xv, 1, b * 3..b * 3 + 3).unwrap();
        let (y, plan) = model.branch_forward(&mut tape, &bound, 0, b, u).unwrap();
        assert!(plan.is_none());
        let p = format!("blocks.0.branch{b}.ssm");
        let a_log = model.param(&format!("{p}.a_log")).unwrap();
        let log_dt = model.param(&format!("{p}.log_dt")).unwrap();
        let bm = model.param(&format!("{p}.b")).unwrap();
        let cm = model.param(&format!("{p}.c")).unwrap();
        for ch in 0..3 {
            let a: Vec<f64> = a_log.row(ch).iter().map(|v| -v.exp()).collect();
            let params = SsmParams::new(a, bm.row(ch).to_vec(), cm.row(ch).to_vec()).unwrap();
            let step = zoh_discretize(&params, log_dt.data()[ch].exp()).unwrap();
            let kernel = conv_kernel(&step, params.c(), len);
            let xs: Vec<f64> = (0..len).map(|l| x.at2(l, b * 3 + ch)).collect();
            let expect = conv_apply(&xs, &kernel).unwrap();
            for l in 0..len {
                assert!((tape.value(y).at2(l, ch) - expect[l]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn logits_shapes() {
    let mut r = rng(12);
    let model = Model::init(NetworkConfig::classification(10, 4, 6), &mut r).unwrap();
    let out = model.predict(&[Input::Tokens(vec![1, 2, 3, 9, 0])]).unwrap();
    assert_eq!(out[0].shape(), &[4]);
    let mut cfg = NetworkConfig::language_model(10, 6);
    cfg.depth = 2;
    let model = Model::init(cfg, &mut r).unwrap();
    let out = model.predict(&[Input::Tokens(vec![1, 2, 3, 9, 0, 4, 4])]).unwrap();
    assert_eq!(out[0].shape(), &[7, 10]);
}

#[test]
fn zero_weights_give_constant_logits() {
    let mut r = rng(13);
    let mut cfg = NetworkConfig::classification(10, 4, 6);
    cfg.depth = 1;
    let mut model = Model::init(cfg, &mut r).unwrap();
    let names: Vec<String> = model.params().keys().cloned().collect();
    for name in names {
        let shape = model.param(&name).unwrap().shape().to_vec();
        model.set_param(&name, Tensor::zeros(&shape)).unwrap();
    }
    let a = model.predict(&[Input::Tokens(vec![1, 2, 3])]).unwrap();
    let b = model.predict(&[Input::Tokens(vec![9, 9, 0, 5, 7, 7, 7])]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn invalid_inputs_and_configs() {
    let mut r = rng(14);
    let model = Model::init(NetworkConfig::classification(10, 4, 6), &mut r).unwrap();
    assert!(matches!(
        model.predict(&[Input::Tokens(vec![1, 10])]),
        Err(Error::TokenOutOfVocab { token: 10, vocab: 10 })
    ));
    assert!(model.predict(&[Input::Tokens(vec![])]).is_err());
    assert!(model.predict(&[]).is_err());
    assert!(model.predict(&[Input::Features(Tensor::zeros(&[3, 2]))]).is_err());

    let mut cfg = NetworkConfig::classification(10, 4, 6);
    cfg.depth = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = NetworkConfig::classification(10, 4, 6);
    cfg.block.widths = Some(vec![2, 2, 1]);
    assert!(cfg.validate().is_err());
    let mut cfg = NetworkConfig::classification(10, 4, 6);
    cfg.block.branches[1].kappa = Some(0.0);
    assert!(cfg.validate().is_err());
    let mut cfg = NetworkConfig::classification(10, 4, 2);
    assert!(cfg.validate().is_err());
    cfg.block.branches.truncate(2);
    assert!(cfg.validate().is_ok());
    assert_eq!(even_widths(7, 3), vec![3, 2, 2]);
}

#[test]
fn running_stats_follow_training_batches() {
    let mut r = rng(15);
    let mut model = Model::init(NetworkConfig::classification(10, 4, 6), &mut r).unwrap();
    let inputs = vec![Input::Tokens(vec![1, 2, 3, 4]), Input::Tokens(vec![5, 6])];
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let fwd = model.forward(&mut tape, &bound, &inputs, Mode::Train).unwrap();
    assert_eq!(fwd.moments.len(), 2);
    let before = model.buffer("blocks.0.norm.running_mean").unwrap().clone();
    model.apply_moments(&fwd.moments).unwrap();
    let after = model.buffer("blocks.0.norm.running_mean").unwrap();
    assert_ne!(&before, after);
    let expect: Vec<f64> = fwd.moments[0].1.mean.iter().map(|m| 0.1 * m).collect();
    assert_eq!(after.data(), expect.as_slice());
}

/// Gradient check over every parameter and, for feature inputs, the inputs.
fn end_to_end_error(cfg: NetworkConfig, seed: u64, inputs: &[Input], targets: &[Target]) -> f64 {
    let model = Model::init(cfg, &mut rng(seed)).unwrap();
    let mut leaves: Vec<Tensor> = model.params().values().map(|p| p.value.clone()).collect();
    let n_params = leaves.len();
    for input in inputs {
        if let Input::Features(f) = input {
            leaves.push(f.clone());
        }
    }
    grad_check(
        |t, v| {
            let bound = model.bind_vars(&v[..n_params])?;
            let mut xs = Vec::new();
            let mut next = n_params;
            for input in inputs {
                xs.push(match input {
                    Input::Features(_) => {
                        let emb = t.matmul(v[next], bound.get("embed.weight")?)?;
                        next += 1;
                        let [len, h] = t.shape(emb)[..] else { unreachable!() };
                        let ones = t.leaf(Tensor::ones(&[len, 1]));
                        let bias = t.reshape(bound.get("embed.bias")?, &[1, h])?;
                        let spread = t.matmul(ones, bias)?;
                        t.add(emb, spread)?
                    }
                    Input::Tokens(_) => model.embed(t, &bound, input)?,
                });
            }
            let fwd = model.forward_embedded(t, &bound, xs, Mode::Train)?;
            model.loss(t, &fwd.outputs, targets)
        },
        &leaves,
        1e-5,
    )
    .unwrap()
}

#[test]
fn end_to_end_gradients() {
    let mut r = rng(16);
    let feats = [random_tensor(&mut r, &[8, 3], 1.0), random_tensor(&mut r, &[8, 3], 1.0)];
    // Batch statistics over a single mean-pooled sequence cancel exactly, so
    // the batch-norm model is checked on two sequences.
    let base = features_config(4, vec![BranchConfig::base(), BranchConfig::compressed(0.5)], NormKind::BatchNorm, NormPosition::PostSkip);
    let batch = [Input::Features(feats[0].clone()), Input::Features(feats[1].clone())];
    let err = end_to_end_error(base.clone(), 17, &batch, &[Target::Class(1), Target::Class(0)]);
    assert!(err < 1e-3, "batchnorm: {err}");

    let mut rms = base.clone();
    rms.block.norm = NormKind::RmsNorm;
    rms.block.norm_position = NormPosition::Pre;
    rms.block.branches[0].ssm = SsmKind::Selective;
    let err = end_to_end_error(rms, 18, &batch[..1], &[Target::Class(2)]);
    assert!(err < 1e-3, "rmsnorm/selective: {err}");

    let mut lm = NetworkConfig::language_model(5, 4);
    lm.depth = 1;
    lm.d_state = 3;
    lm.block.branches.truncate(2);
    let tokens: Vec<usize> = (0..8).map(|_| r.gen_range(0..5)).collect();
    let targets: Vec<usize> = (0..8).map(|_| r.gen_range(0..5)).collect();
    let err = end_to_end_error(lm, 19, &[Input::Tokens(tokens)], &[Target::Tokens(targets)]);
    assert!(err < 1e-3, "next token: {err}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut r = rng(20);
    let mut model = Model::init(NetworkConfig::classification(10, 4, 6), &mut r).unwrap();
    let inputs = vec![Input::Tokens((0..30).map(|_| r.gen_range(0..10)).collect())];
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let fwd = model.forward(&mut tape, &bound, &inputs, Mode::Train).unwrap();
    model.apply_moments(&fwd.moments).unwrap();

    let dir = std::env::temp_dir().join(format!("serpent-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.json");
    let meta = serde_json::json!({"epoch": 3, "loss": 0.1 + 0.2});
    model.save(&path, meta.clone()).unwrap();
    let (loaded, meta_back) = Model::load(&path).unwrap();
    assert_eq!(meta_back, meta);
    assert_eq!(loaded, model);
    assert_eq!(loaded.predict(&inputs).unwrap(), model.predict(&inputs).unwrap());

    let mut ckpt = model.to_checkpoint(serde_json::Value::Null);
    ckpt.version = 99;
    assert!(matches!(Model::from_checkpoint(ckpt), Err(Error::Checkpoint(_))));
    let mut ckpt = model.to_checkpoint(serde_json::Value::Null);
    ckpt.weights[0].shape = vec![1, 1];
    ckpt.weights[0].data = vec![0.0];
    assert!(Model::from_checkpoint(ckpt).is_err());
    let mut ckpt = model.to_checkpoint(serde_json::Value::Null);
    ckpt.weights.pop();
    assert!(Model::from_checkpoint(ckpt).is_err());
    assert!(Model::load(&dir.join("missing.json")).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}

