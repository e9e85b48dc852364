//! Gradient descent driven by estimated gradients: plain, Nesterov
//! accelerated, and an adaptive variant that advances a warm-started
//! homotopy by only a few breakpoints per iteration.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{estimate_with_matrix, EstimatorConfig};
use crate::homotopy::{solve_bpdn_warm, SparseSolution};
use crate::measurement::{central_fd, sp_measure_averaged, Objective};
use crate::numerics::{derive_seed, seeded_rng, stream, DenseVector, MeasurementMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `a(n) = a0 / (1 + n / n0)`.
    Harmonic { a0: f64, n0: f64 },
    /// Fixed step. Violates square summability; for closed-form checks only.
    Constant { a: f64 },
}

impl StepSchedule {
    pub fn step(&self, n: usize) -> f64 {
        match *self {
            StepSchedule::Harmonic { a0, n0 } => a0 / (1.0 + n as f64 / n0),
            StepSchedule::Constant { a } => a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Harmonic { a0, n0 } => a0 > 0.0 && n0 > 0.0 && a0.is_finite() && n0.is_finite(),
            StepSchedule::Constant { a } => a > 0.0 && a.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid step schedule {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopRule {
    pub max_iters: Option<usize>,
    /// Counted evaluations allowed. An iteration is not started if its
    /// expected cost would exceed the budget.
    pub eval_budget: Option<u64>,
    /// Stop after 3 consecutive iterations with `||g|| <= g_tol ||g_0||`.
    pub g_tol: Option<f64>,
    /// Stop once the (noise-free) objective reaches this value.
    pub target: Option<f64>,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            max_iters: None,
            eval_budget: Some(100_000),
            g_tol: Some(1e-4),
            target: None,
        }
    }
}

impl StopRule {
    pub fn iterations(n: usize) -> Self {
        Self {
            max_iters: Some(n),
            eval_budget: None,
            g_tol: None,
            target: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_iters.is_none() && self.eval_budget.is_none() && self.g_tol.is_none() && self.target.is_none() {
            return Err(Error::InvalidParameter("stop rule never stops".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    BudgetExhausted,
    GradientTolerance,
    TargetReached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentRecord {
    pub iteration: usize,
    pub f: f64,
    /// Norm of the direction used to reach this iterate (NaN initially).
    pub grad_norm: f64,
    pub step: f64,
    /// Cumulative counted evaluations.
    pub evals: u64,
    pub wall_ms: f64,
    pub x_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentTrace {
    pub records: Vec<DescentRecord>,
    pub x_final: DenseVector,
    pub stop_reason: StopReason,
    /// Directions used at each iteration.
    pub directions: Vec<DenseVector>,
}

impl DescentTrace {
    pub fn final_f(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.f)
    }

    /// Wall time and evaluations at the first record with `f <= target`.
    pub fn first_reaching(&self, target: f64) -> Option<&DescentRecord> {
        self.records.iter().find(|r| r.f <= target)
    }
}

/// Anything that produces a descent direction at `x`.
pub trait GradientSource {
    fn gradient(&mut self, obj: &Objective, x: &DenseVector, iteration: usize) -> Result<DenseVector>;
    /// Counted evaluations one call is expected to use.
    fn cost_hint(&self, obj: &Objective) -> u64;
}

/// Sparse SP estimate with a fixed matrix and fresh signs per iteration.
#[derive(Debug, Clone)]
pub struct SpEstimator {
    pub cfg: EstimatorConfig,
    pub matrix: MeasurementMatrix,
}

impl SpEstimator {
    pub fn new(cfg: EstimatorConfig, n: usize) -> Result<Self> {
        cfg.validate()?;
        let matrix = cfg.matrix(n)?;
        Ok(Self { cfg, matrix })
    }
}

fn sp_cost(cfg: &EstimatorConfig, obj: &Objective) -> u64 {
    if obj.is_noisy() {
        2 * cfg.k as u64
    } else {
        cfg.k as u64 + 1
    }
}

impl GradientSource for SpEstimator {
    fn gradient(&mut self, obj: &Objective, x: &DenseVector, iteration: usize) -> Result<DenseVector> {
        let seed = derive_seed(self.cfg.sign_seed, iteration as u64);
        Ok(estimate_with_matrix(obj, x, &self.matrix, &self.cfg, seed)?.g)
    }

    fn cost_hint(&self, obj: &Objective) -> u64 {
        sp_cost(&self.cfg, obj)
    }
}

/// Keeps one homotopy state across iterations and advances it by at most
/// `inner_steps` breakpoints on each fresh batch of measurements.
#[derive(Debug, Clone)]
pub struct AdaptiveEstimator {
    pub cfg: EstimatorConfig,
    pub matrix: MeasurementMatrix,
    pub inner_steps: usize,
    pub state: SparseSolution,
}

impl AdaptiveEstimator {
    pub fn new(cfg: EstimatorConfig, n: usize, inner_steps: usize) -> Result<Self> {
        if inner_steps == 0 {
            return Err(Error::InvalidParameter("inner_steps must be at least 1".into()));
        }
        cfg.validate()?;
        let matrix = cfg.matrix(n)?;
        Ok(Self {
            cfg,
            matrix,
            inner_steps,
            state: SparseSolution::zeros(n),
        })
    }
}

impl GradientSource for AdaptiveEstimator {
    fn gradient(&mut self, obj: &Objective, x: &DenseVector, iteration: usize) -> Result<DenseVector> {
        let seed = derive_seed(self.cfg.sign_seed, iteration as u64);
        let delta = self.cfg.delta_at(x);
        let batch = sp_measure_averaged(obj, x, &self.matrix, delta, self.cfg.k, seed)?;
        let tol = self.cfg.residual_tol.resolve(&batch, obj.noise_sigma(), obj.is_noisy());
        let next = match solve_bpdn_warm(&self.matrix, &batch.y_bar, &self.state, self.inner_steps, tol) {
            Ok(sol) => sol,
            // a degenerate warm path restarts from the empty solution
            Err(_) => solve_bpdn_warm(&self.matrix, &batch.y_bar, &SparseSolution::zeros(x.len()), self.inner_steps, tol)
                .map_err(|e| Error::RecoveryFailed(Box::new(e)))?,
        };
        self.state = next;
        Ok(self.state.z.clone())
    }

    fn cost_hint(&self, obj: &Objective) -> u64 {
        sp_cost(&self.cfg, obj)
    }
}

/// Central differences, `2n` evaluations per call.
#[derive(Debug, Clone, Copy)]
pub struct CentralDifference {
    pub delta: f64,
}

impl GradientSource for CentralDifference {
    fn gradient(&mut self, obj: &Objective, x: &DenseVector, _iteration: usize) -> Result<DenseVector> {
        central_fd(obj, x, self.delta)
    }

    fn cost_hint(&self, obj: &Objective) -> u64 {
        2 * obj.dim() as u64
    }
}

pub type GradientFn = Arc<dyn Fn(&DenseVector) -> DenseVector + Send + Sync>;

/// Analytic gradient; uses no evaluations.
#[derive(Clone)]
pub struct ExactGradient(pub GradientFn);

impl GradientSource for ExactGradient {
    fn gradient(&mut self, _obj: &Objective, x: &DenseVector, _iteration: usize) -> Result<DenseVector> {
        Ok((self.0)(x))
    }

    fn cost_hint(&self, _obj: &Objective) -> u64 {
        0
    }
}

/// Analytic gradient plus a fixed error vector of norm `eps0` whose
/// direction is drawn once from `seed`.
#[derive(Clone)]
pub struct PerturbedGradient {
    pub exact: GradientFn,
    pub error: DenseVector,
}

impl PerturbedGradient {
    pub fn new(exact: GradientFn, n: usize, eps0: f64, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, stream::PERTURBATION);
        let dir = DenseVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let error = dir.normalize() * eps0;
        Self { exact, error }
    }
}

impl GradientSource for PerturbedGradient {
    fn gradient(&mut self, _obj: &Objective, x: &DenseVector, _iteration: usize) -> Result<DenseVector> {
        Ok((self.exact)(x) + &self.error)
    }

    fn cost_hint(&self, _obj: &Objective) -> u64 {
        0
    }
}

/// Nesterov sequence: `lambda(0) = 0`,
/// `lambda(n) = (1 + sqrt(1 + 4 lambda(n-1)^2)) / 2`,
/// `gamma(n) = (1 - lambda(n)) / lambda(n+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NesterovState {
    /// Index `n` of `lambda_cur`.
    pub n: usize,
    pub lambda_prev: f64,
    pub lambda_cur: f64,
    pub gamma: f64,
    pub z_prev: DenseVector,
    pub z_cur: DenseVector,
}

fn next_lambda(lambda: f64) -> f64 {
    (1.0 + (1.0 + 4.0 * lambda * lambda).sqrt()) / 2.0
}

impl NesterovState {
    /// State at `n = 1` (`lambda(1) = 1`, `gamma(1) = 0`) with `z = x0`.
    pub fn new(x0: &DenseVector) -> Self {
        let lambda_cur = next_lambda(0.0);
        Self {
            n: 1,
            lambda_prev: 0.0,
            lambda_cur,
            gamma: (1.0 - lambda_cur) / next_lambda(lambda_cur),
            z_prev: x0.clone(),
            z_cur: x0.clone(),
        }
    }

    /// Takes `z(n+1)` and returns `x(n+1) = (1 - gamma(n)) z(n+1) + gamma(n) z(n)`,
    /// then moves to `n + 1`.
    pub fn extrapolate(&mut self, z_next: DenseVector, use_gamma: bool) -> DenseVector {
        let gamma = if use_gamma { self.gamma } else { 0.0 };
        let x = (1.0 - gamma) * &z_next + gamma * &self.z_cur;
        self.z_prev = std::mem::replace(&mut self.z_cur, z_next);
        self.lambda_prev = self.lambda_cur;
        self.lambda_cur = next_lambda(self.lambda_cur);
        self.gamma = (1.0 - self.lambda_cur) / next_lambda(self.lambda_cur);
        self.n += 1;
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Momentum {
    None,
    Nesterov,
    /// Nesterov bookkeeping with `gamma` forced to zero.
    NesterovZeroGamma,
}

/// Runs descent with any gradient source.
pub fn run_with_source(
    obj: &Objective,
    x0: &DenseVector,
    schedule: &StepSchedule,
    stop: &StopRule,
    source: &mut dyn GradientSource,
    momentum: Momentum,
) -> Result<DescentTrace> {
    schedule.validate()?;
    stop.validate()?;
    if x0.len() != obj.dim() {
        return Err(Error::InvalidDimensions(format!("x0 has length {}, objective has {}", x0.len(), obj.dim())));
    }
    crate::numerics::check_finite(x0.as_slice())?;
    let start = Instant::now();
    let base_evals = obj.eval_count();
    let mut x = x0.clone();
    let mut nesterov = NesterovState::new(x0);
    let mut records = vec![DescentRecord {
        iteration: 0,
        f: obj.peek(&x)?,
        grad_norm: f64::NAN,
        step: 0.0,
        evals: 0,
        wall_ms: 0.0,
        x_norm: x.norm(),
    }];
    let mut directions = Vec::new();
    let mut first_norm: Option<f64> = None;
    let mut small_streak = 0;

    let reason = loop {
        let iteration = records.len() - 1;
        if let Some(target) = stop.target {
            if records.last().expect("initial record").f <= target {
                break StopReason::TargetReached;
            }
        }
        if stop.max_iters.is_some_and(|max| iteration >= max) {
            break StopReason::MaxIterations;
        }
        if let Some(budget) = stop.eval_budget {
            let used = obj.eval_count() - base_evals;
            if used + source.cost_hint(obj) > budget {
                break StopReason::BudgetExhausted;
            }
        }

        let g = source.gradient(obj, &x, iteration)?;
        let step = schedule.step(iteration);
        let z_next = &x - step * &g;
        x = match momentum {
            Momentum::None => z_next,
            Momentum::Nesterov => nesterov.extrapolate(z_next, true),
            Momentum::NesterovZeroGamma => nesterov.extrapolate(z_next, false),
        };
        crate::numerics::check_finite(x.as_slice()).map_err(|_| Error::EvaluationFailed(format!("iterate diverged at iteration {iteration}")))?;

        let grad_norm = g.norm();
        records.push(DescentRecord {
            iteration: iteration + 1,
            f: obj.peek(&x)?,
            grad_norm,
            step,
            evals: obj.eval_count() - base_evals,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            x_norm: x.norm(),
        });
        directions.push(g);

        if let Some(tol) = stop.g_tol {
            let reference = *first_norm.get_or_insert(grad_norm);
            if grad_norm <= tol * reference {
                small_streak += 1;
                if small_streak >= 3 {
                    break StopReason::GradientTolerance;
                }
            } else {
                small_streak = 0;
            }
        }
    };

    Ok(DescentTrace {
        records,
        x_final: x,
        stop_reason: reason,
        directions,
    })
}

/// Plain descent with sparse SP gradient estimates; `A` is drawn once.
pub fn sgd_run(obj: &Objective, x0: &DenseVector, schedule: &StepSchedule, cfg: &EstimatorConfig, stop: &StopRule) -> Result<DescentTrace> {
    let mut source = SpEstimator::new(cfg.clone(), x0.len())?;
    run_with_source(obj, x0, schedule, stop, &mut source, Momentum::None)
}

pub fn nesterov_run(obj: &Objective, x0: &DenseVector, schedule: &StepSchedule, cfg: &EstimatorConfig, stop: &StopRule) -> Result<DescentTrace> {
    let mut source = SpEstimator::new(cfg.clone(), x0.len())?;
    run_with_source(obj, x0, schedule, stop, &mut source, Momentum::Nesterov)
}

pub fn adaptive_run(
    obj: &Objective,
    x0: &DenseVector,
    schedule: &StepSchedule,
    cfg: &EstimatorConfig,
    inner_steps: usize,
    stop: &StopRule,
) -> Result<DescentTrace> {
    let mut source = AdaptiveEstimator::new(cfg.clone(), x0.len(), inner_steps)?;
    run_with_source(obj, x0, schedule, stop, &mut source, Momentum::None)
}

/// Descent on central-difference gradients.
pub fn kiefer_wolfowitz_run(obj: &Objective, x0: &DenseVector, schedule: &StepSchedule, delta: f64, stop: &StopRule) -> Result<DescentTrace> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
    }
    let mut source = CentralDifference { delta };
    run_with_source(obj, x0, schedule, stop, &mut source, Momentum::None)
}

/// Descent on an analytic gradient.
pub fn exact_run(obj: &Objective, x0: &DenseVector, schedule: &StepSchedule, gradient: GradientFn, stop: &StopRule) -> Result<DescentTrace> {
    let mut source = ExactGradient(gradient);
    run_with_source(obj, x0, schedule, stop, &mut source, Momentum::None)
}
