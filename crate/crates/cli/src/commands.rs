use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use serpent_core::harness::{
    evaluate, fmt17, init_model, metrics_csv, stream, train, EvalMetrics, Purpose, RunSummary,
};
use serpent_core::matrix::Matrix;
use serpent_core::net::{Model, SsmKind};
use serpent_core::prop::{geometric_grid, verify_batch, InstanceOutcome, RESIDUAL_BOUND, SLOPE_BAND};
use serpent_core::resample::{basis_means, plan, ResampleConfig};
use serpent_core::ssm::{conv_kernel, zoh_discretize, SsmParams};
use serpent_core::Error;

use crate::config::{ssm_kind, RunConfig, TaskSection};
use crate::error::{runtime, usage, CliResult};

/// Output directory handling shared by every command.
pub struct OutDir {
    path: PathBuf,
}

impl OutDir {
    /// Creates `path`, refusing to reuse an existing one unless `force`.
    pub fn prepare(path: &Path, force: bool) -> CliResult<Self> {
        if path.exists() && !force {
            return Err(usage(format!(
                "output directory {} already exists; pass --force to overwrite",
                path.display()
            )));
        }
        fs::create_dir_all(path).map_err(|e| usage(format!("cannot create {}: {e}", path.display())))?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> CliResult<()> {
        let p = self.file(name);
        fs::write(&p, contents).map_err(|e| runtime(format!("cannot write {}: {e}", p.display())))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| runtime(format!("{name}: {e}")))?;
        text.push('\n');
        self.write(name, &text)
    }
}

#[derive(Serialize)]
struct LinearityFile<'a> {
    seed: u64,
    grid: &'a [f64],
    slope_band: (f64, f64),
    residual_bound: f64,
    passed: usize,
    failed: usize,
    instances: &'a [InstanceOutcome],
}

pub fn verify_prop(cfg: &RunConfig, out: impl FnOnce() -> CliResult<OutDir>) -> CliResult<()> {
    let p = &cfg.prop;
    if p.grid_points < 6 {
        return Err(usage(format!(
            "config key `prop.grid_points`: the slope fit needs at least 6 points, got {}",
            p.grid_points
        )));
    }
    if p.instances == 0 {
        return Err(usage("config key `prop.instances`: must be at least 1"));
    }
    let grid = geometric_grid(p.grid_hi, p.grid_lo, p.grid_points)
        .map_err(|e| usage(format!("config keys `prop.grid_hi` / `prop.grid_lo`: {e}")))?;
    let outcomes = verify_batch(cfg.run.seed, p.instances, p.max_n, p.max_len, &grid).map_err(|e| match e {
        Error::InvalidArgument(m) => usage(format!("prop: {m}")),
        other => runtime(other.to_string()),
    })?;
    let out = out()?;
    let passed = outcomes.iter().filter(|o| o.passed).count();
    let failed = outcomes.len() - passed;
    out.write_json(
        "linearity_report.json",
        &LinearityFile {
            seed: cfg.run.seed,
            grid: &grid,
            slope_band: SLOPE_BAND,
            residual_bound: RESIDUAL_BOUND,
            passed,
            failed,
            instances: &outcomes,
        },
    )?;
    for o in &outcomes {
        eprintln!(
            "instance {:>3}: N={} L={} m={} slope={} residual={:.3e} {}",
            o.index,
            o.n,
            o.len,
            o.m,
            o.report.slope.map_or("n/a".to_string(), |s| format!("{s:.6}")),
            o.report.residual,
            if o.passed { "ok" } else { "FAILED" }
        );
    }
    if failed > 0 {
        return Err(runtime(format!("{failed} of {} instances failed", outcomes.len())));
    }
    println!("all {passed} instances passed");
    Ok(())
}

/// Data recorded in a checkpoint so that `eval` can rebuild the dataset.
#[derive(Debug, Serialize, Deserialize)]
struct RunMetadata {
    seed: u64,
    task: TaskSection,
    best_epoch: usize,
    best_val: EvalMetrics,
}

pub fn train_cmd(cfg: &RunConfig, out: impl FnOnce() -> CliResult<OutDir>) -> CliResult<()> {
    let task = cfg.sparse_task()?;
    let network = cfg.network()?;
    let tcfg = cfg.training()?;
    let (train_set, val_set) = task.splits().map_err(|e| usage(format!("task: {e}")))?;
    let mut model = init_model(network, tcfg.seed).map_err(|e| usage(format!("model: {e}")))?;
    let out = out()?;
    let outcome = train(&mut model, &train_set, &val_set, &tcfg).map_err(|e| runtime(e.to_string()))?;
    for r in &outcome.history {
        eprintln!(
            "epoch {:>3} {:<5} loss {:.6} top1 {:.4} top5 {:.4}",
            r.epoch,
            r.split.as_str(),
            r.metrics.loss,
            r.metrics.top1,
            r.metrics.top5
        );
    }
    let summary = RunSummary::new(&outcome, &tcfg).map_err(|e| runtime(e.to_string()))?;
    out.write("metrics.csv", &metrics_csv(&outcome.history))?;
    out.write_json("summary.json", &json!({ "config": cfg, "summary": summary }))?;
    let meta = RunMetadata {
        seed: cfg.run.seed,
        task: cfg.task.clone(),
        best_epoch: outcome.best_epoch,
        best_val: outcome.best_val,
    };
    let meta = serde_json::to_value(meta).map_err(|e| runtime(e.to_string()))?;
    outcome
        .best_model
        .save(&out.file("checkpoint.json"), meta)
        .map_err(|e| runtime(e.to_string()))?;
    println!(
        "best epoch {} val loss {} top1 {}",
        outcome.best_epoch,
        fmt17(outcome.best_val.loss),
        fmt17(outcome.best_val.top1)
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    Train,
    Val,
}

pub fn eval_cmd(checkpoint: &Path, split: EvalSplit, out: impl FnOnce() -> CliResult<OutDir>) -> CliResult<()> {
    if !checkpoint.is_file() {
        return Err(usage(format!("checkpoint {} not found", checkpoint.display())));
    }
    let (model, meta) = Model::load(checkpoint).map_err(|e| usage(e.to_string()))?;
    let meta: RunMetadata = serde_json::from_value(meta)
        .map_err(|e| usage(format!("checkpoint {}: bad run metadata: {e}", checkpoint.display())))?;
    let rebuild = RunConfig {
        task: meta.task.clone(),
        run: crate::config::RunSection { seed: meta.seed },
        ..RunConfig::default()
    };
    let (train_set, val_set) = rebuild
        .sparse_task()?
        .splits()
        .map_err(|e| usage(format!("task: {e}")))?;
    let data = match split {
        EvalSplit::Train => &train_set,
        EvalSplit::Val => &val_set,
    };
    let metrics = evaluate(&model, data).map_err(|e| runtime(e.to_string()))?;
    let out = out()?;
    let split_name = match split {
        EvalSplit::Train => "train",
        EvalSplit::Val => "val",
    };
    out.write_json(
        "eval.json",
        &json!({ "checkpoint_best_epoch": meta.best_epoch, "split": split_name, "metrics": metrics }),
    )?;
    println!(
        "{split_name}: loss {} top1 {} top5 {} ppl {}",
        fmt17(metrics.loss),
        fmt17(metrics.top1),
        fmt17(metrics.top5),
        fmt17(metrics.ppl)
    );
    Ok(())
}

pub fn dump_kernel(cfg: &RunConfig, out: impl FnOnce() -> CliResult<OutDir>) -> CliResult<()> {
    let k = &cfg.kernel;
    if ssm_kind("kernel.ssm", &k.ssm)? == SsmKind::Selective {
        return Err(usage(
            "config key `kernel.ssm`: a selective SSM has input-dependent steps and no static convolution kernel",
        ));
    }
    if k.len == 0 {
        return Err(usage("config key `kernel.len`: must be at least 1"));
    }
    let params = SsmParams::new(k.a.clone(), k.b.clone(), k.c.clone()).map_err(|e| usage(format!("kernel: {e}")))?;
    let step = zoh_discretize(&params, k.delta).map_err(|e| usage(format!("config key `kernel.delta`: {e}")))?;
    let kernel = conv_kernel(&step, params.c(), k.len);
    let mut csv = String::from("index,value\n");
    for (i, v) in kernel.iter().enumerate() {
        let _ = writeln!(csv, "{i},{}", fmt17(*v));
    }
    out()?.write("kernel.csv", &csv)?;
    println!("wrote {} kernel taps", kernel.len());
    Ok(())
}

/// Parses a numeric CSV: one row per position, one column per feature.
/// Blank lines and `#` comments are skipped.
pub fn read_sequence(path: &Path) -> CliResult<Matrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("input {}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| usage(format!("input {} line {}: expected finite numbers", path.display(), i + 1)))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(usage(format!(
                    "input {} line {}: {} columns, expected {}",
                    path.display(),
                    i + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(usage(format!("input {}: no data rows", path.display())));
    }
    Matrix::from_rows(&rows).map_err(|e| usage(e.to_string()))
}

#[derive(Serialize)]
struct Trace {
    src_len: usize,
    dst_len: usize,
    ratio: f64,
    kappa: f64,
    delta: f64,
    theta_delta: Vec<f64>,
    deltas: Vec<f64>,
    src_times: Vec<f64>,
    dst_times: Vec<f64>,
    neighbors: Vec<Vec<usize>>,
    decompress_indices: Vec<usize>,
}

pub fn compress_trace(cfg: &RunConfig, input: &Path, out: impl FnOnce() -> CliResult<OutDir>) -> CliResult<()> {
    let c = &cfg.compress;
    let x = read_sequence(input)?;
    let h = x.cols();
    let mut rcfg = ResampleConfig::init(h, c.kappa, c.window_k, c.basis_g, &mut stream(cfg.run.seed, Purpose::Init))
        .map_err(|e| usage(format!("compress: {e}")))?;
    if !(c.delta > 0.0 && c.delta.is_finite()) {
        return Err(usage(format!("config key `compress.delta`: must be positive, got {}", c.delta)));
    }
    rcfg.delta_base = c.delta;
    rcfg.mus = basis_means(c.window_k, c.basis_g, c.delta);
    if !c.theta_delta.is_empty() {
        if c.theta_delta.len() != h {
            return Err(usage(format!(
                "config key `compress.theta_delta`: {} weights for {h} input columns",
                c.theta_delta.len()
            )));
        }
        rcfg.theta_delta = c.theta_delta.clone();
    }
    let (deltas, p) = plan(&rcfg, &x).map_err(|e| runtime(e.to_string()))?;
    let decompress_indices = p.decompress_indices();
    let trace = Trace {
        src_len: p.src_len(),
        dst_len: p.dst_len,
        ratio: p.dst_len as f64 / p.src_len() as f64,
        kappa: c.kappa,
        delta: c.delta,
        theta_delta: rcfg.theta_delta,
        deltas,
        src_times: p.src_times,
        dst_times: p.dst_times,
        neighbors: p.neighbors,
        decompress_indices,
    };
    out()?.write_json("trace.json", &trace)?;
    println!("compressed {} positions to {}", trace.src_len, trace.dst_len);
    Ok(())
}
