//! Run configuration: TOML sections (or dotted `section.key = value`
//! lines) layered over built-in defaults, then `--set` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serpent_core::harness::{AdamWConfig, SchedulerKind, SparseSignalTask, TrainConfig};
use serpent_core::net::{
    Activation, BlockConfig, BranchConfig, HeadKind, InputKind, NetworkConfig, NormKind, NormPosition, Pooling,
    SsmKind,
};
use toml::{Table, Value};

use crate::error::{usage, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub prop: PropSection,
    pub task: TaskSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub kernel: KernelSection,
    pub compress: CompressSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropSection {
    pub instances: usize,
    pub max_n: usize,
    pub max_len: usize,
    /// Largest and smallest `Delta_m` of the geometric sweep grid.
    pub grid_hi: f64,
    pub grid_lo: f64,
    pub grid_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub seq_len: usize,
    pub n_classes: usize,
    pub n_informative: usize,
    pub noise_vocab: usize,
    pub n_train: usize,
    pub n_val: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub h_dim: usize,
    pub d_state: usize,
    pub depth: usize,
    /// Include an uncompressed branch.
    pub base_branch: bool,
    /// One compressed branch per entry.
    pub kappas: Vec<f64>,
    pub ssm: String,
    pub window_k: usize,
    pub basis_g: usize,
    pub norm: String,
    pub norm_position: String,
    pub activation: String,
    pub pooling: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub scheduler: String,
    pub patience: usize,
    pub factor: f64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub clip_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub ssm: String,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: f64,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressSection {
    pub kappa: f64,
    pub window_k: usize,
    pub basis_g: usize,
    pub delta: f64,
    /// Step projection weights, one per feature. Empty draws them from
    /// the run seed.
    pub theta_delta: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            run: RunSection { seed: 1 },
            prop: PropSection {
                instances: 20,
                max_n: 4,
                max_len: 32,
                grid_hi: 1e-1,
                grid_lo: 1e-6,
                grid_points: 6,
            },
            task: TaskSection {
                seq_len: 256,
                n_classes: 4,
                n_informative: 4,
                noise_vocab: 8,
                n_train: 500,
                n_val: 200,
            },
            model: ModelSection {
                h_dim: 16,
                d_state: 16,
                depth: 2,
                base_branch: true,
                kappas: vec![0.5],
                ssm: "lti".into(),
                window_k: 3,
                basis_g: 4,
                norm: "batchnorm".into(),
                norm_position: "post_skip".into(),
                activation: "silu".into(),
                pooling: "mean".into(),
            },
            train: TrainSection {
                lr: 1e-2,
                weight_decay: adam.weight_decay,
                beta1: adam.beta1,
                beta2: adam.beta2,
                eps: adam.eps,
                batch_size: 32,
                epochs: 40,
                scheduler: "cosine".into(),
                patience: 5,
                factor: 0.1,
                clip_norm: 1.0,
            },
            kernel: KernelSection {
                ssm: "lti".into(),
                a: vec![-1.0],
                b: vec![2.0],
                c: vec![1.0],
                delta: std::f64::consts::LN_2,
                len: 4,
            },
            compress: CompressSection {
                kappa: 0.5,
                window_k: 3,
                basis_g: 4,
                delta: 1.0,
                theta_delta: Vec::new(),
            },
        }
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// `new` converted to the type of `old`, if compatible. Integers widen
/// to floats; arrays must hold numbers.
fn coerce(old: &Value, new: Value) -> Option<Value> {
    match (old, new) {
        (Value::Float(_), Value::Integer(i)) => Some(Value::Float(i as f64)),
        (Value::Array(_), Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                Value::Float(f) => Some(Value::Float(f)),
                Value::Integer(i) => Some(Value::Float(i as f64)),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(Value::Array),
        (Value::Integer(_), Value::Integer(i)) if i < 0 => None,
        (o, n) if std::mem::discriminant(o) == std::mem::discriminant(&n) => Some(n),
        _ => None,
    }
}

/// Layered configuration under construction.
pub struct ConfigBuilder {
    table: Table,
}

impl ConfigBuilder {
    pub fn new() -> Self {
        let table = match Value::try_from(RunConfig::default()) {
            Ok(Value::Table(t)) => t,
            _ => unreachable!("default configuration serializes to a table"),
        };
        Self { table }
    }

    fn set(&mut self, section: &str, key: &str, value: Value) -> CliResult<()> {
        let path = format!("{section}.{key}");
        let Some(Value::Table(dst)) = self.table.get_mut(section) else {
            return Err(usage(format!("unknown config key `{path}`: no section `{section}`")));
        };
        let Some(old) = dst.get(key) else {
            return Err(usage(format!("unknown config key `{path}`")));
        };
        let expected = type_name(old);
        let got = type_name(&value);
        let v = coerce(old, value)
            .ok_or_else(|| usage(format!("config key `{path}`: expected {expected}, got {got}")))?;
        dst.insert(key.to_string(), v);
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        let parsed: Table = text
            .parse()
            .map_err(|e: toml::de::Error| usage(format!("config {}: {}", path.display(), e.message())))?;
        for (section, body) in parsed {
            let Value::Table(body) = body else {
                return Err(usage(format!("config key `{section}` must be a section")));
            };
            for (key, value) in body {
                if let Value::Table(_) = value {
                    return Err(usage(format!("unknown config key `{section}.{key}`")));
                }
                self.set(&section, &key, value)?;
            }
        }
        Ok(())
    }

    /// Applies one `section.key=value`. Values parse as TOML, falling back
    /// to a bare string.
    pub fn apply_override(&mut self, spec: &str) -> CliResult<()> {
        let (path, raw) = spec
            .split_once('=')
            .ok_or_else(|| usage(format!("override `{spec}` is not of the form section.key=value")))?;
        let path = path.trim();
        let (section, key) = path
            .split_once('.')
            .filter(|(s, k)| !s.is_empty() && !k.is_empty() && !k.contains('.'))
            .ok_or_else(|| usage(format!("override key `{path}` must look like section.key")))?;
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.set(section, key, value)
    }

    pub fn set_seed(&mut self, seed: u64) -> CliResult<()> {
        let seed = i64::try_from(seed).map_err(|_| usage("seed must fit in a signed 64-bit integer"))?;
        self.set("run", "seed", Value::Integer(seed))
    }

    pub fn build(self) -> CliResult<RunConfig> {
        Value::Table(self.table)
            .try_into()
            .map_err(|e: toml::de::Error| usage(format!("config: {}", e.message())))
    }
}

fn choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> CliResult<T> {
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            usage(format!("config key `{key}`: unknown value `{value}`, expected one of {names:?}"))
        })
}

pub fn ssm_kind(key: &str, value: &str) -> CliResult<SsmKind> {
    choice(key, value, &[("lti", SsmKind::Lti), ("selective", SsmKind::Selective)])
}

impl RunConfig {
    pub fn sparse_task(&self) -> CliResult<SparseSignalTask> {
        let t = &self.task;
        let task = SparseSignalTask {
            seq_len: t.seq_len,
            n_classes: t.n_classes,
            n_informative: t.n_informative,
            noise_vocab: t.noise_vocab,
            n_train: t.n_train,
            n_val: t.n_val,
            seed: self.run.seed,
        };
        task.validate().map_err(|e| usage(format!("task: {e}")))?;
        if t.n_train == 0 || t.n_val == 0 {
            return Err(usage("task: n_train and n_val must be at least 1"));
        }
        Ok(task)
    }

    pub fn network(&self) -> CliResult<NetworkConfig> {
        let m = &self.model;
        let ssm = ssm_kind("model.ssm", &m.ssm)?;
        let mut branches = Vec::new();
        if m.base_branch {
            branches.push(BranchConfig { kappa: None, ssm });
        }
        branches.extend(m.kappas.iter().map(|&k| BranchConfig { kappa: Some(k), ssm }));
        let cfg = NetworkConfig {
            input: InputKind::Tokens {
                vocab: self.task.noise_vocab + self.task.n_classes,
            },
            h_dim: m.h_dim,
            d_state: m.d_state,
            depth: m.depth,
            head: HeadKind::Classification {
                n_classes: self.task.n_classes,
            },
            pooling: choice("model.pooling", &m.pooling, &[("mean", Pooling::Mean), ("last", Pooling::Last)])?,
            block: BlockConfig {
                branches,
                widths: None,
                window_k: m.window_k,
                basis_g: m.basis_g,
                norm: choice(
                    "model.norm",
                    &m.norm,
                    &[("batchnorm", NormKind::BatchNorm), ("rmsnorm", NormKind::RmsNorm), ("none", NormKind::None)],
                )?,
                norm_position: choice(
                    "model.norm_position",
                    &m.norm_position,
                    &[("pre", NormPosition::Pre), ("post_skip", NormPosition::PostSkip)],
                )?,
                activation: choice(
                    "model.activation",
                    &m.activation,
                    &[("silu", Activation::Silu), ("none", Activation::None)],
                )?,
            },
        };
        cfg.validate().map_err(|e| usage(format!("model: {e}")))?;
        Ok(cfg)
    }

    pub fn training(&self) -> CliResult<TrainConfig> {
        let t = &self.train;
        let scheduler = match t.scheduler.as_str() {
            "none" => SchedulerKind::None,
            "cosine" => SchedulerKind::Cosine,
            "plateau" => SchedulerKind::Plateau {
                patience: t.patience,
                factor: t.factor,
            },
            other => {
                return Err(usage(format!(
                    "config key `train.scheduler`: unknown value `{other}`, expected one of [\"none\", \"cosine\", \"plateau\"]"
                )))
            }
        };
        if t.clip_norm < 0.0 {
            return Err(usage("config key `train.clip_norm`: must be non-negative"));
        }
        let cfg = TrainConfig {
            optimizer: AdamWConfig {
                lr: t.lr,
                weight_decay: t.weight_decay,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
            batch_size: t.batch_size,
            epochs: t.epochs,
            scheduler,
            clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
            seed: self.run.seed,
        };
        cfg.validate().map_err(|e| usage(format!("train: {e}")))?;
        Ok(cfg)
    }
}
