//! Seeded parameter sweeps over the zoo, with CSV and JSON-lines output.
//!
//! A config names one task, a function, a list of seeds and one sweep axis.
//! Every (seed, sweep value) cell runs independently and produces a few
//! metric rows. Cells may run concurrently; rows always come back ordered by
//! seed position, then sweep position.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::descent::{
    adaptive_run, exact_run, kiefer_wolfowitz_run, nesterov_run, sgd_run, DescentTrace, StepSchedule, StopRule,
};
use crate::egop::{edr_subspace, egop_estimate, subspace_distance, Sampler, Subspace};
use crate::error::{Error, Result};
use crate::estimator::{estimate_gradient, EstimatorConfig};
use crate::measurement::{naive_sp_estimate, NoiseModel, Objective};
use crate::numerics::{derive_seed, relative_error, seeded_rng, stream, DenseVector};
use crate::zoo::{make_function, FunctionSpec, TestFunction};

pub const CSV_HEADER: [&str; 7] = ["experiment", "seed", "sweep", "metric", "value", "evals", "wall_ms"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Sparse recovery from SP measurements.
    Proposed,
    /// Plain SPSA averaging in `n` dimensions.
    Naive,
    Sgd,
    Nesterov,
    Adaptive,
    Kw,
    Exact,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Naive => "naive",
            Method::Sgd => "sgd",
            Method::Nesterov => "nesterov",
            Method::Adaptive => "adaptive",
            Method::Kw => "kw",
            Method::Exact => "exact",
        }
    }

    fn is_estimator(&self) -> bool {
        matches!(self, Method::Proposed | Method::Naive)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum Sweep {
    K(Vec<usize>),
    S(Vec<usize>),
    R(Vec<usize>),
    /// Evaluations per gradient estimate; sets `k` for every method.
    Budget(Vec<u64>),
    Method(Vec<Method>),
}

impl Sweep {
    pub fn len(&self) -> usize {
        match self {
            Sweep::K(v) | Sweep::S(v) | Sweep::R(v) => v.len(),
            Sweep::Budget(v) => v.len(),
            Sweep::Method(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, i: usize) -> String {
        match self {
            Sweep::K(v) | Sweep::S(v) | Sweep::R(v) => v[i].to_string(),
            Sweep::Budget(v) => v[i].to_string(),
            Sweep::Method(v) => v[i].name().to_string(),
        }
    }

    fn validate(&self) -> Result<()> {
        fn increasing<T: PartialOrd>(v: &[T]) -> bool {
            v.windows(2).all(|w| w[0] < w[1])
        }
        let ok = match self {
            Sweep::K(v) | Sweep::S(v) | Sweep::R(v) => increasing(v) && v.first().is_none_or(|&x| x > 0),
            Sweep::Budget(v) => increasing(v) && v.first().is_none_or(|&x| x > 1),
            Sweep::Method(v) => (0..v.len()).all(|i| !v[..i].contains(&v[i])),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("sweep values must be positive and strictly increasing (methods distinct)".into()))
        }
    }
}

/// Where to evaluate or start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PointSpec {
    /// i.i.d. `N(0, scale^2)` coordinates, seeded per cell.
    Normal { scale: f64 },
    /// Every coordinate equal to `value`.
    Constant { value: f64 },
    /// `value` on the function's support, zero elsewhere.
    Support { value: f64 },
}

impl Default for PointSpec {
    fn default() -> Self {
        PointSpec::Normal { scale: 1.0 }
    }
}

impl PointSpec {
    fn point(&self, f: &TestFunction, seed: u64) -> DenseVector {
        match *self {
            PointSpec::Normal { scale } => {
                let mut rng = seeded_rng(seed, stream::START);
                DVector::from_fn(f.n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
            }
            PointSpec::Constant { value } => DVector::from_element(f.n, value),
            PointSpec::Support { value } => {
                let mut x = DVector::zeros(f.n);
                for &i in &f.support {
                    x[i] = value;
                }
                x
            }
        }
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::Proposed]
}

fn default_inner_steps() -> usize {
    2
}

fn default_kw_delta() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    /// Relative error of one gradient estimate per method; metric
    /// `<method>_error`.
    Gradient {
        #[serde(default)]
        point: PointSpec,
        #[serde(default = "default_methods")]
        methods: Vec<Method>,
    },
    /// EGOP from `r` points (unless `r` is swept); metrics `egop_error`,
    /// `egop_rel_error` (when the population EGOP is known) and
    /// `edr_distance`.
    Egop {
        #[serde(default)]
        r: Option<usize>,
        /// Subspace dimension; defaults to the number of relevant directions.
        #[serde(default)]
        d: Option<usize>,
        #[serde(default)]
        sampler: Sampler,
    },
    /// One optimizer run per cell; metrics `final_f`, `iterations`,
    /// `reached`, and `evals_to_target` / `wall_ms_to_target` once
    /// `f <= target_fraction * f(x0)`.
    Optimize {
        #[serde(default)]
        method: Option<Method>,
        schedule: StepSchedule,
        #[serde(default)]
        stop: StopRule,
        #[serde(default)]
        start: PointSpec,
        #[serde(default = "default_inner_steps")]
        inner_steps: usize,
        #[serde(default = "default_kw_delta")]
        kw_delta: f64,
        #[serde(default)]
        target_fraction: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub function: FunctionSpec,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    pub seeds: Vec<u64>,
    pub sweep: Sweep,
    pub task: Task,
    /// Standard deviation of additive evaluation noise.
    #[serde(default)]
    pub noise: Option<f64>,
    /// Draw a new function instance per seed.
    #[serde(default = "default_true")]
    pub vary_function: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Free text, e.g. desk-scale substitutions.
    #[serde(default)]
    pub notes: Option<String>,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.is_empty() {
            return Err(Error::Config("experiment id is empty".into()));
        }
        self.sweep.validate()?;
        self.estimator.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let Some(sigma) = self.noise {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::Config(format!("noise must be positive, got {sigma}")));
            }
        }
        let spec = match self.sweep {
            Sweep::S(ref v) => v.iter().map(|&s| self.function.with_sparsity(s)).collect(),
            _ => vec![self.function.clone()],
        };
        for spec in &spec {
            if spec.n() <= self.estimator.m {
                return Err(Error::Config(format!("need m < n, got m={} n={}", self.estimator.m, spec.n())));
            }
            make_function(spec).map_err(|e| Error::Config(e.to_string()))?;
        }
        match (&self.task, &self.sweep) {
            (Task::Gradient { methods, .. }, Sweep::Method(swept)) => {
                if swept.iter().chain(methods).any(|m| !m.is_estimator()) {
                    return Err(Error::Config("gradient task takes proposed or naive".into()));
                }
            }
            (Task::Gradient { methods, .. }, _) => {
                if methods.is_empty() || methods.iter().any(|m| !m.is_estimator()) {
                    return Err(Error::Config("gradient task takes proposed or naive".into()));
                }
            }
            (Task::Egop { r, .. }, sweep) => {
                if !matches!(sweep, Sweep::R(_)) && r.is_none() {
                    return Err(Error::Config("egop task needs r or an r sweep".into()));
                }
                if matches!(sweep, Sweep::Method(_) | Sweep::Budget(_)) {
                    return Err(Error::Config("egop task sweeps k, s or r".into()));
                }
            }
            (Task::Optimize { method, schedule, inner_steps, .. }, sweep) => {
                schedule.validate().map_err(|e| Error::Config(e.to_string()))?;
                let methods: Vec<Method> = match sweep {
                    Sweep::Method(v) => v.clone(),
                    _ => method.iter().copied().collect(),
                };
                if methods.is_empty() || methods.iter().any(|m| m.is_estimator()) {
                    return Err(Error::Config("optimize task needs a method among sgd, nesterov, adaptive, kw, exact".into()));
                }
                if *inner_steps == 0 {
                    return Err(Error::Config("inner_steps must be at least 1".into()));
                }
                if matches!(sweep, Sweep::R(_) | Sweep::Budget(_)) {
                    return Err(Error::Config("optimize task sweeps k, s or method".into()));
                }
            }
        }
        if matches!(self.sweep, Sweep::R(_)) && !matches!(self.task, Task::Egop { .. }) {
            return Err(Error::Config("r sweep needs the egop task".into()));
        }
        Ok(())
    }
}

/// One measured value. `value == None` marks a failed cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub seed: u64,
    pub sweep: String,
    pub metric: String,
    #[serde(serialize_with = "failed_or_number")]
    pub value: Option<f64>,
    pub evals: u64,
    pub wall_ms: f64,
}

fn failed_or_number<S: Serializer>(value: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match value {
        Some(v) => s.serialize_f64(*v),
        None => s.serialize_str("failed"),
    }
}

impl ResultRow {
    pub fn value_text(&self) -> String {
        self.value.map_or_else(|| "failed".to_string(), |v| v.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Concurrent cells; `None` uses all cores.
    pub jobs: Option<usize>,
    /// Report wall times. Off makes the output byte-reproducible.
    pub wall_time: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: None, wall_time: true }
    }
}

/// Runs every (seed, sweep value) cell.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let cells: Vec<(u64, usize)> = config
        .seeds
        .iter()
        .flat_map(|&seed| (0..config.sweep.len()).map(move |i| (seed, i)))
        .collect();
    let run = || -> Vec<Vec<ResultRow>> { cells.par_iter().map(|&(seed, i)| run_cell(config, seed, i, opts)).collect() };
    let per_cell = match opts.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run),
        None => run(),
    };
    Ok(per_cell.into_iter().flatten().collect())
}

struct CellSeeds {
    function: u64,
    matrix: u64,
    signs: u64,
    point: u64,
    samples: u64,
    noise: u64,
}

impl CellSeeds {
    fn new(seed: u64) -> Self {
        Self {
            function: derive_seed(seed, stream::FUNCTION),
            matrix: derive_seed(seed, stream::MATRIX),
            signs: derive_seed(seed, stream::SIGNS),
            point: derive_seed(seed, stream::START),
            samples: derive_seed(seed, stream::SAMPLES),
            noise: derive_seed(seed, stream::NOISE),
        }
    }
}

fn run_cell(config: &ExperimentConfig, seed: u64, index: usize, opts: &RunOptions) -> Vec<ResultRow> {
    let start = Instant::now();
    let seeds = CellSeeds::new(seed);
    let mut evals = 0u64;
    let outcome = cell_metrics(config, &seeds, index, &mut evals);
    let wall_ms = if opts.wall_time { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
    let sweep = config.sweep.label(index);
    let row = |metric: String, value: Option<f64>| ResultRow {
        experiment: config.experiment.clone(),
        seed,
        sweep: sweep.clone(),
        metric,
        value,
        evals,
        wall_ms,
    };
    match outcome {
        Ok(metrics) => metrics
            .into_iter()
            .map(|(name, v)| row(name, Some(v).filter(|v| v.is_finite())))
            .collect(),
        Err(_) => primary_metrics(config, index).into_iter().map(|name| row(name, None)).collect(),
    }
}

fn primary_metrics(config: &ExperimentConfig, index: usize) -> Vec<String> {
    match &config.task {
        Task::Gradient { methods, .. } => match &config.sweep {
            Sweep::Method(v) => vec![format!("{}_error", v[index].name())],
            _ => methods.iter().map(|m| format!("{}_error", m.name())).collect(),
        },
        Task::Egop { .. } => vec!["egop_error".into(), "edr_distance".into()],
        Task::Optimize { .. } => vec!["final_f".into()],
    }
}

fn cell_metrics(config: &ExperimentConfig, seeds: &CellSeeds, index: usize, evals: &mut u64) -> Result<Vec<(String, f64)>> {
    let mut spec = config.function.clone();
    if let Sweep::S(v) = &config.sweep {
        spec = spec.with_sparsity(v[index]);
    }
    if config.vary_function {
        spec = spec.with_seed(seeds.function);
    }
    let f = make_function(&spec)?;
    let mut cfg = EstimatorConfig {
        matrix_seed: seeds.matrix,
        sign_seed: seeds.signs,
        ..config.estimator.clone()
    };
    match &config.sweep {
        Sweep::K(v) => cfg.k = v[index],
        Sweep::Budget(v) => {
            // proposed and naive both spend k + 1 evaluations, or 2k when noisy
            let b = v[index] as usize;
            cfg.k = if config.noise.is_some() { b / 2 } else { b - 1 };
        }
        _ => {}
    }
    let objective = |salt: u64| -> Objective {
        let obj = f.objective();
        match config.noise {
            Some(sigma) => obj.with_noise(NoiseModel { sigma, seed: derive_seed(seeds.noise, salt) }),
            None => obj,
        }
    };

    match &config.task {
        Task::Gradient { point, methods } => {
            let methods: Vec<Method> = match &config.sweep {
                Sweep::Method(v) => vec![v[index]],
                _ => methods.clone(),
            };
            let x = point.point(&f, seeds.point);
            let truth = f.gradient(&x);
            let mut out = Vec::new();
            for (salt, method) in methods.iter().enumerate() {
                let obj = objective(salt as u64);
                let g = match method {
                    Method::Proposed => estimate_gradient(&obj, &x, &cfg)?.g,
                    Method::Naive => naive_sp_estimate(&obj, &x, cfg.delta_at(&x), cfg.k, seeds.signs)?,
                    _ => unreachable!("validated"),
                };
                *evals += obj.eval_count();
                out.push((format!("{}_error", method.name()), relative_error(&g, &truth)));
            }
            Ok(out)
        }
        Task::Egop { r, d, sampler } => {
            let r = match &config.sweep {
                Sweep::R(v) => v[index],
                _ => r.expect("validated"),
            };
            let outputs: Vec<Objective> = match config.noise {
                Some(sigma) => f
                    .output_objectives()
                    .into_iter()
                    .enumerate()
                    .map(|(j, o)| o.with_noise(NoiseModel { sigma, seed: derive_seed(seeds.noise, j as u64) }))
                    .collect(),
                None => f.output_objectives(),
            };
            let est = egop_estimate(&outputs, sampler, r, &cfg, seeds.samples)?;
            *evals += outputs.iter().map(|o| o.eval_count()).sum::<u64>();
            let truth = Subspace::span_of(&f.relevant_directions())?;
            let d = d.unwrap_or(truth.dim());
            let mut out = Vec::new();
            if let (Some(pop), Sampler::Normal) = (f.population_egop(), sampler) {
                let err = (&pop - &est.g_hat).norm();
                out.push(("egop_error".to_string(), err));
                out.push(("egop_rel_error".to_string(), err / pop.norm()));
            }
            out.push(("edr_distance".to_string(), subspace_distance(&edr_subspace(&est, d)?, &truth)?));
            Ok(out)
        }
        Task::Optimize {
            method,
            schedule,
            stop,
            start,
            inner_steps,
            kw_delta,
            target_fraction,
        } => {
            let method = match &config.sweep {
                Sweep::Method(v) => v[index],
                _ => method.expect("validated"),
            };
            let x0 = start.point(&f, seeds.point);
            let obj = objective(0);
            let mut stop = *stop;
            let f0 = f.value(&x0);
            if target_fraction.is_some() && f0 <= 0.0 {
                return Err(Error::Config(format!("target_fraction needs f(x0) > 0, got {f0}")));
            }
            let target = target_fraction.map(|frac| frac * f0);
            if let Some(t) = target {
                stop.target = Some(stop.target.map_or(t, |s| s.max(t)));
            }
            let trace = run_method(method, &f, &obj, &x0, schedule, &cfg, &stop, *inner_steps, *kw_delta)?;
            *evals += obj.eval_count();
            Ok(optimize_metrics(&trace, target))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_method(
    method: Method,
    f: &TestFunction,
    obj: &Objective,
    x0: &DenseVector,
    schedule: &StepSchedule,
    cfg: &EstimatorConfig,
    stop: &StopRule,
    inner_steps: usize,
    kw_delta: f64,
) -> Result<DescentTrace> {
    match method {
        Method::Sgd => sgd_run(obj, x0, schedule, cfg, stop),
        Method::Nesterov => nesterov_run(obj, x0, schedule, cfg, stop),
        Method::Adaptive => adaptive_run(obj, x0, schedule, cfg, inner_steps, stop),
        Method::Kw => kiefer_wolfowitz_run(obj, x0, schedule, kw_delta, stop),
        Method::Exact => {
            let g = f.clone();
            exact_run(obj, x0, schedule, Arc::new(move |x: &DenseVector| g.gradient(x)), stop)
        }
        Method::Proposed | Method::Naive => Err(Error::Config(format!("{} is not an optimizer", method.name()))),
    }
}

fn optimize_metrics(trace: &DescentTrace, target: Option<f64>) -> Vec<(String, f64)> {
    let mut out = vec![
        ("final_f".to_string(), trace.final_f()),
        ("iterations".to_string(), (trace.records.len() - 1) as f64),
    ];
    if let Some(t) = target {
        match trace.first_reaching(t) {
            Some(rec) => {
                out.push(("reached".to_string(), 1.0));
                out.push(("evals_to_target".to_string(), rec.evals as f64));
                out.push(("wall_ms_to_target".to_string(), rec.wall_ms));
            }
            None => out.push(("reached".to_string(), 0.0)),
        }
    }
    out
}

pub fn write_csv<W: Write>(rows: &[ResultRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            r.seed.to_string(),
            r.sweep.clone(),
            r.metric.clone(),
            r.value_text(),
            r.evals.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<W: Write>(rows: &[ResultRow], mut writer: W) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_rows<W: Write>(rows: &[ResultRow], format: OutputFormat, writer: W) -> Result<()> {
    match format {
        OutputFormat::Csv => write_csv(rows, writer),
        OutputFormat::Jsonl => write_jsonl(rows, writer),
    }
}

/// Median of the finite values of `metric` at each sweep label, in sweep
/// order.
pub fn medians(rows: &[ResultRow], metric: &str) -> Vec<(String, f64)> {
    let mut labels: Vec<String> = Vec::new();
    for r in rows {
        if r.metric == metric && !labels.contains(&r.sweep) {
            labels.push(r.sweep.clone());
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let mut v: Vec<f64> = rows
                .iter()
                .filter(|r| r.metric == metric && r.sweep == label)
                .filter_map(|r| r.value)
                .collect();
            v.sort_by(f64::total_cmp);
            let med = match v.len() {
                0 => f64::NAN,
                l if l % 2 == 1 => v[l / 2],
                l => 0.5 * (v[l / 2 - 1] + v[l / 2]),
            };
            (label, med)
        })
        .collect()
}
