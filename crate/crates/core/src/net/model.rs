use indexmap::IndexMap;
use rand::Rng;

use super::config::{Activation, HeadKind, InputKind, NetworkConfig, NormKind, NormPosition, Pooling, SsmKind};
use super::norm::{batchnorm_tape, rmsnorm_tape, BatchMoments, BatchNormMode};
use crate::autodiff::{ReduceKind, Tape, Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::resample::{compress_tape, decompress_tape, ResampleConfig, ResamplePlan, ResampleVars};
use crate::scan_op::{diag_scan, ScanMode};
use crate::selective::{selective_scan_tape, SelectiveHead, SelectiveVars};

/// A trainable array and whether weight decay applies to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub decay: bool,
}

/// One input sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Tokens(Vec<usize>),
    /// `[L, F]`
    Features(Tensor),
}

impl Input {
    pub fn len(&self) -> usize {
        match self {
            Input::Tokens(t) => t.len(),
            Input::Features(f) => f.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Supervision for one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Class(usize),
    /// One target token per position.
    Tokens(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Tape handles for every parameter of a model, by name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("no parameter named {name}")))
    }

    /// Handles in parameter order.
    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Result of a batched forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Logits per input: `[C]` for classification, `[L, V]` for next token.
    pub outputs: Vec<Var>,
    /// Batch-norm moments by layer prefix, training mode only.
    pub moments: Vec<(String, BatchMoments)>,
}

/// Embedding, `depth` multi-branch blocks and a head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: NetworkConfig,
    params: IndexMap<String, Param>,
    buffers: IndexMap<String, Tensor>,
}

fn block_name(i: usize) -> String {
    format!("blocks.{i}")
}

fn branch_name(i: usize, b: usize) -> String {
    format!("blocks.{i}.branch{b}")
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
}

fn log_uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Result<Tensor> {
    Tensor::vector((0..n).map(|_| rng.gen_range(lo.ln()..hi.ln())).collect())
}

impl Model {
    pub fn init(config: NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (h, n) = (config.h_dim, config.d_state);
        let mut model = Self {
            config: config.clone(),
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        };
        match config.input {
            InputKind::Tokens { vocab } => model.add("embed.weight", uniform(rng, &[vocab, h], 3f64.sqrt())?, true),
            InputKind::Features { dim } => {
                model.add("embed.weight", uniform(rng, &[dim, h], 1.0 / (dim as f64).sqrt())?, true);
                model.add("embed.bias", Tensor::zeros(&[h]), false);
            }
        }
        let widths = config.branch_widths();
        let block = &config.block;
        for i in 0..config.depth {
            for (b, (branch, &w)) in block.branches.iter().zip(&widths).enumerate() {
                let p = branch_name(i, b);
                if let Some(kappa) = branch.kappa {
                    let rs = ResampleConfig::init(w, kappa, block.window_k, block.basis_g, rng)?;
                    model.add(&format!("{p}.resample.theta_delta"), Tensor::matrix(w, 1, rs.theta_delta)?, false);
                    model.add(&format!("{p}.resample.log_delta"), Tensor::scalar(rs.delta_base.ln()), false);
                    let tg = rs.theta_gamma;
                    model.add(&format!("{p}.resample.theta_gamma"), Tensor::matrix(tg.rows(), tg.cols(), tg.into_vec())?, true);
                    model.add(&format!("{p}.resample.mus"), Tensor::vector(rs.mus)?, false);
                }
                let a_log: Vec<f64> = (0..w).flat_map(|_| (0..n).map(|j| ((j + 1) as f64).ln())).collect();
                model.add(&format!("{p}.ssm.a_log"), Tensor::matrix(w, n, a_log)?, false);
                match branch.ssm {
                    SsmKind::Lti => {
                        model.add(&format!("{p}.ssm.log_dt"), log_uniform(rng, w, 1e-3, 1e-1)?, false);
                        model.add(&format!("{p}.ssm.b"), Tensor::ones(&[w, n]), false);
                        model.add(&format!("{p}.ssm.c"), uniform(rng, &[w, n], 1.0 / (n as f64).sqrt())?, false);
                    }
                    SsmKind::Selective => {
                        let head = SelectiveHead::<f64>::init(w, n, rng)?;
                        model.add(&format!("{p}.ssm.theta_b"), Tensor::matrix(w, n, head.theta_b.into_vec())?, true);
                        model.add(&format!("{p}.ssm.theta_c"), Tensor::matrix(w, n, head.theta_c.into_vec())?, true);
                        model.add(&format!("{p}.ssm.theta_delta"), Tensor::matrix(w, 1, head.theta_delta)?, false);
                        model.add(&format!("{p}.ssm.delta_base"), Tensor::scalar(head.delta_base), false);
                    }
                }
            }
            let p = block_name(i);
            match block.norm {
                NormKind::RmsNorm => model.add(&format!("{p}.norm.gain"), Tensor::ones(&[h]), false),
                NormKind::BatchNorm => {
                    model.add(&format!("{p}.norm.gamma"), Tensor::ones(&[h]), false);
                    model.add(&format!("{p}.norm.beta"), Tensor::zeros(&[h]), false);
                    model.buffers.insert(format!("{p}.norm.running_mean"), Tensor::zeros(&[h]));
                    model.buffers.insert(format!("{p}.norm.running_var"), Tensor::ones(&[h]));
                }
                NormKind::None => {}
            }
        }
        let out = config.n_outputs();
        model.add("head.weight", uniform(rng, &[h, out], 1.0 / (h as f64).sqrt())?, true);
        model.add("head.bias", Tensor::zeros(&[out]), false);
        Ok(model)
    }

    fn add(&mut self, name: &str, value: Tensor, decay: bool) {
        self.params.insert(name.to_string(), Param { value, decay });
    }

    pub(crate) fn from_parts(
        config: NetworkConfig,
        params: IndexMap<String, Param>,
        buffers: IndexMap<String, Tensor>,
    ) -> Self {
        Self { config, params, buffers }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &IndexMap<String, Param> {
        &self.params
    }

    pub fn buffers(&self) -> &IndexMap<String, Tensor> {
        &self.buffers
    }

    pub fn n_parameters(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| invalid(format!("no parameter named {name}")))
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| invalid(format!("no parameter named {name}")))?;
        if slot.value.shape() != value.shape() {
            return Err(shape_err("set_param", format!("{:?}", slot.value.shape()), format!("{:?}", value.shape())));
        }
        slot.value = value;
        Ok(())
    }

    /// Every parameter as a fresh tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), tape.leaf(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Binds existing handles given in parameter order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(shape_err("bind_vars", format!("{} handles", self.params.len()), vars.len().to_string()));
        }
        Ok(Bound {
            vars: self.params.keys().cloned().zip(vars.iter().copied()).collect(),
        })
    }

    /// Folds training-batch moments into the running statistics.
    pub fn apply_moments(&mut self, moments: &[(String, BatchMoments)]) -> Result<()> {
        for (prefix, m) in moments {
            let mean_key = format!("{prefix}.norm.running_mean");
            let var_key = format!("{prefix}.norm.running_var");
            let mut mean = self.buffer(&mean_key)?.data().to_vec();
            let mut var = self.buffer(&var_key)?.data().to_vec();
            m.update_running(&mut mean, &mut var);
            let h = mean.len();
            self.buffers.insert(mean_key, Tensor::new(vec![h], mean)?);
            self.buffers.insert(var_key, Tensor::new(vec![h], var)?);
        }
        Ok(())
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| invalid(format!("no buffer named {name}")))
    }

    /// Batched forward pass. Batch normalization in training mode pools
    /// statistics over every position of every input.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, inputs: &[Input], mode: Mode) -> Result<Forward> {
        if inputs.is_empty() {
            return Err(invalid("forward: empty batch"));
        }
        let xs = inputs
            .iter()
            .map(|input| self.embed(tape, bound, input))
            .collect::<Result<Vec<_>>>()?;
        self.forward_embedded(tape, bound, xs, mode)
    }

    /// Forward pass from already embedded `[L_i, H]` sequences.
    pub fn forward_embedded(&self, tape: &mut Tape, bound: &Bound, mut xs: Vec<Var>, mode: Mode) -> Result<Forward> {
        if xs.is_empty() {
            return Err(invalid("forward: empty batch"));
        }
        let mut moments = Vec::new();
        for i in 0..self.config.depth {
            xs = self.block_forward(tape, bound, i, &xs, mode, &mut moments)?;
        }
        let outputs = xs
            .into_iter()
            .map(|x| self.head(tape, bound, x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Forward { outputs, moments })
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, tape: &mut Tape, outputs: &[Var], targets: &[Target]) -> Result<Var> {
        if outputs.len() != targets.len() || outputs.is_empty() {
            return Err(shape_err("loss", format!("{} targets", outputs.len()), targets.len().to_string()));
        }
        let mut total: Option<Var> = None;
        for (&out, target) in outputs.iter().zip(targets) {
            let ce = match target {
                Target::Class(c) => tape.cross_entropy(out, &[*c])?,
                Target::Tokens(t) => tape.cross_entropy(out, t)?,
            };
            total = Some(match total {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
        }
        let total = total.expect("non-empty batch");
        tape.scale(total, 1.0 / outputs.len() as f64)
    }

    /// Eval-mode logits for each input.
    pub fn predict(&self, inputs: &[Input]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let fwd = self.forward(&mut tape, &bound, inputs, Mode::Eval)?;
        Ok(fwd.outputs.iter().map(|v| tape.value(*v).clone()).collect())
    }

    /// Input embedding `[L, H]`.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, input: &Input) -> Result<Var> {
        if input.is_empty() {
            return Err(invalid("empty input sequence"));
        }
        let weight = bound.get("embed.weight")?;
        match (input, self.config.input) {
            (Input::Tokens(tokens), InputKind::Tokens { vocab }) => {
                if let Some(&token) = tokens.iter().find(|t| **t >= vocab) {
                    return Err(Error::TokenOutOfVocab { token, vocab });
                }
                tape.gather_rows(weight, tokens)
            }
            (Input::Features(f), InputKind::Features { dim }) => {
                if f.rank() != 2 || f.shape()[1] != dim {
                    return Err(shape_err("embed", format!("[L, {dim}]"), format!("{:?}", f.shape())));
                }
                let x = tape.leaf(f.clone());
                let proj = tape.matmul(x, weight)?;
                let bias = bound.get("embed.bias")?;
                add_row_bias(tape, proj, bias)
            }
            _ => Err(invalid("input kind does not match the network's input configuration")),
        }
    }

    /// One block over a batch of `[L_i, H]` sequences.
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        i: usize,
        xs: &[Var],
        mode: Mode,
        moments: &mut Vec<(String, BatchMoments)>,
    ) -> Result<Vec<Var>> {
        match self.config.block.norm_position {
            NormPosition::Pre => {
                let normed = self.norm(tape, bound, i, xs, mode, moments)?;
                xs.iter()
                    .zip(normed)
                    .map(|(&x, z)| {
                        let mixed = self.mixer(tape, bound, i, z)?;
                        tape.add(x, mixed)
                    })
                    .collect()
            }
            NormPosition::PostSkip => {
                let summed = xs
                    .iter()
                    .map(|&x| {
                        let mixed = self.mixer(tape, bound, i, x)?;
                        tape.add(x, mixed)
                    })
                    .collect::<Result<Vec<_>>>()?;
                self.norm(tape, bound, i, &summed, mode, moments)
            }
        }
    }

    fn norm(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        i: usize,
        xs: &[Var],
        mode: Mode,
        moments: &mut Vec<(String, BatchMoments)>,
    ) -> Result<Vec<Var>> {
        let p = block_name(i);
        match self.config.block.norm {
            NormKind::None => Ok(xs.to_vec()),
            NormKind::RmsNorm => {
                let gain = bound.get(&format!("{p}.norm.gain"))?;
                xs.iter().map(|&x| rmsnorm_tape(tape, x, gain)).collect()
            }
            NormKind::BatchNorm => {
                let gamma = bound.get(&format!("{p}.norm.gamma"))?;
                let beta = bound.get(&format!("{p}.norm.beta"))?;
                let lens: Vec<usize> = xs.iter().map(|&x| tape.shape(x)[0]).collect();
                let stacked = if xs.len() == 1 { xs[0] } else { tape.concat(xs, 0)? };
                let (y, m) = match mode {
                    Mode::Train => batchnorm_tape(tape, stacked, gamma, beta, BatchNormMode::Train)?,
                    Mode::Eval => {
                        let mean = self.buffer(&format!("{p}.norm.running_mean"))?.data();
                        let var = self.buffer(&format!("{p}.norm.running_var"))?.data();
                        batchnorm_tape(tape, stacked, gamma, beta, BatchNormMode::Eval { mean, var })?
                    }
                };
                if let Some(m) = m {
                    moments.push((p, m));
                }
                if xs.len() == 1 {
                    return Ok(vec![y]);
                }
                let mut start = 0;
                lens.iter()
                    .map(|&len| {
                        let part = tape.slice(y, 0, start..start + len);
                        start += len;
                        part
                    })
                    .collect()
            }
        }
    }

    /// Concatenated branch outputs of block `i` for `x: [L, H]`, before the skip.
    pub fn mixer(&self, tape: &mut Tape, bound: &Bound, i: usize, x: Var) -> Result<Var> {
        let widths = self.config.branch_widths();
        let mut start = 0;
        let mut outs = Vec::with_capacity(widths.len());
        for (b, w) in widths.iter().enumerate() {
            let u = tape.slice(x, 1, start..start + w)?;
            outs.push(self.branch_forward(tape, bound, i, b, u)?.0);
            start += w;
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            tape.concat(&outs, 1)
        }
    }

    /// Branch `b` of block `i` on its channel slice `u: [L, w]`: compress,
    /// scan, activate, decompress. Also returns the resampling plan.
    pub fn branch_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        i: usize,
        b: usize,
        u: Var,
    ) -> Result<(Var, Option<ResamplePlan<f64>>)> {
        let branch = self
            .config
            .block
            .branches
            .get(b)
            .ok_or_else(|| invalid(format!("no branch {b}")))?;
        let p = branch_name(i, b);
        let get = |name: &str| bound.get(&format!("{p}.{name}"));
        let (seq, plan) = match branch.kappa {
            Some(kappa) => {
                let log_delta = get("resample.log_delta")?;
                let vars = ResampleVars {
                    theta_delta: get("resample.theta_delta")?,
                    delta_base: tape.exp(log_delta)?,
                    theta_gamma: get("resample.theta_gamma")?,
                    mus: get("resample.mus")?,
                };
                let (xb, plan) = compress_tape(tape, &vars, kappa, self.config.block.window_k, u)?;
                (xb, Some(plan))
            }
            None => (u, None),
        };
        let a_log = get("ssm.a_log")?;
        let a_pos = tape.exp(a_log)?;
        let a = tape.neg(a_pos)?;
        let y = match branch.ssm {
            SsmKind::Lti => {
                let dt = get("ssm.log_dt")?;
                let dt = tape.exp(dt)?;
                diag_scan(tape, seq, dt, a, get("ssm.b")?, get("ssm.c")?, ScanMode::Lti)?
            }
            SsmKind::Selective => {
                let vars = SelectiveVars {
                    theta_b: get("ssm.theta_b")?,
                    theta_c: get("ssm.theta_c")?,
                    theta_delta: get("ssm.theta_delta")?,
                    delta_base: get("ssm.delta_base")?,
                    a,
                };
                selective_scan_tape(tape, &vars, seq, seq)?
            }
        };
        let y = match self.config.block.activation {
            Activation::Silu => tape.silu(y)?,
            Activation::None => y,
        };
        match plan {
            Some(plan) => Ok((decompress_tape(tape, y, &plan)?, Some(plan))),
            None => Ok((y, None)),
        }
    }

    fn head(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let weight = bound.get("head.weight")?;
        let bias = bound.get("head.bias")?;
        let [len, h] = tape.shape(x)[..] else {
            return Err(shape_err("head", "[L, H]", format!("{:?}", tape.shape(x))));
        };
        match self.config.head {
            HeadKind::Classification { .. } => {
                let pooled = match self.config.pooling {
                    Pooling::Mean => tape.reduce(ReduceKind::Mean, x, 0)?,
                    Pooling::Last => tape.slice(x, 0, len - 1..len)?,
                };
                let row = tape.reshape(pooled, &[1, h])?;
                let logits = tape.matmul(row, weight)?;
                let n = tape.shape(logits)[1];
                let logits = tape.reshape(logits, &[n])?;
                tape.add(logits, bias)
            }
            HeadKind::NextToken => {
                let logits = tape.matmul(x, weight)?;
                add_row_bias(tape, logits, bias)
            }
        }
    }
}

/// `x + 1 bias^T` for `x: [L, C]`, `bias: [C]`.
fn add_row_bias(tape: &mut Tape, x: Var, bias: Var) -> Result<Var> {
    let [len, c] = tape.shape(x)[..] else {
        return Err(shape_err("bias", "[L, C]", format!("{:?}", tape.shape(x))));
    };
    let ones = tape.leaf(Tensor::ones(&[len, 1]));
    let row = tape.reshape(bias, &[1, c])?;
    let spread = tape.matmul(ones, row)?;
    tape.add(x, spread)
}
