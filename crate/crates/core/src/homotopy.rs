//! Basis pursuit denoising by homotopy.
//!
//! Solves `min ||z||_1  s.t.  ||A z - y||_2 <= rho` by tracing the solution path
//! of the penalized problem `min 1/2 ||A z - y||^2 + lambda ||z||_1` as `lambda`
//! decreases from `||A^T y||_inf`, adding or removing one active index per
//! breakpoint. Inside the segment where the residual crosses `rho` the path is
//! linear in `lambda`, so the stopping point is located exactly: the returned
//! solution is the path point with `||A z - y|| = rho`, which is unique and does
//! not depend on how the path was reached.
//!
//! Warm starts work from any previous solution. Given a starting point `z0`
//! with support `S`, set `lambda0 = max(lambda_prev, ||A^T (y - A z0)||_inf)` and
//! choose the linear term `u` so that `z0` is optimal for
//! `1/2 ||A z - y||^2 + lambda0 ||z||_1 + (1 - eps) u^T z` at `eps = 0`; a
//! second homotopy drives `eps` to one, after which the ordinary `lambda` path
//! is followed (upward or downward) until the residual target is met.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::{DenseVector, MeasurementMatrix};

pub const DEFAULT_KKT_TOL: f64 = 1e-6;

/// Relative pivot threshold for the incremental Cholesky factor.
const PIVOT_TOL: f64 = 1e-10;

/// The stopping point aims this far (relative) inside the residual target,
/// plus an absolute allowance for rounding in `A z`.
const TARGET_MARGIN: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub residual_tol: f64,
    pub max_steps: usize,
    pub kkt_tol: f64,
}

impl SolverOptions {
    /// Defaults: `max_steps = 4 m`, `kkt_tol = 1e-6`.
    pub fn new(residual_tol: f64, m: usize) -> Self {
        Self {
            residual_tol,
            max_steps: 4 * m,
            kkt_tol: DEFAULT_KKT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseSolution {
    pub z: DenseVector,
    pub support: Vec<usize>,
    pub residual_norm: f64,
    /// Penalty weight at the returned path point.
    pub lambda_final: f64,
    /// Breakpoints executed by the call that produced this solution.
    pub path_steps: usize,
    /// Active set of the path point with the sign of each entry. Can hold
    /// indices whose coefficient is still zero (they entered at this point).
    pub active: Vec<(usize, f64)>,
}

impl SparseSolution {
    /// The empty solution; warm-starting from it is a cold start.
    pub fn zeros(n: usize) -> Self {
        Self {
            z: DVector::zeros(n),
            support: Vec::new(),
            residual_norm: f64::NAN,
            lambda_final: f64::INFINITY,
            path_steps: 0,
            active: Vec::new(),
        }
    }
}

/// Checks the lasso optimality conditions at penalty `lambda`: active
/// correlations equal `lambda * sign(z_j)`, inactive ones are bounded by
/// `lambda`, both within `tol`.
pub fn kkt_check(a: &MeasurementMatrix, y: &DenseVector, z: &DenseVector, lambda: f64, tol: f64) -> bool {
    let a = a.matrix();
    if y.len() != a.nrows() || z.len() != a.ncols() {
        return false;
    }
    let corr = a.tr_mul(&(y - a * z));
    z.iter().zip(corr.iter()).all(|(&zj, &cj)| {
        if zj != 0.0 {
            (cj - lambda * zj.signum()).abs() <= tol
        } else {
            cj.abs() <= lambda + tol
        }
    })
}

/// Cold-start solve of the residual-constrained problem.
pub fn solve_bpdn(a: &MeasurementMatrix, y: &DenseVector, opts: &SolverOptions) -> Result<SparseSolution> {
    validate(a, y, opts.residual_tol)?;
    let mut path = Path::cold(a.matrix(), y);
    match path.run(opts.residual_tol, opts.max_steps)? {
        Outcome::Target => Ok(path.into_solution()),
        Outcome::Budget => Err(Error::MaxStepsExceeded {
            max_steps: opts.max_steps,
            residual: path.residual().norm(),
            target: opts.residual_tol,
        }),
    }
}

/// Resumes the path from `start`, executing at most `inner_steps`
/// breakpoints. The result may not meet `residual_tol`; callers inspect
/// `residual_norm`. Repeated calls converge to the `solve_bpdn` solution.
pub fn solve_bpdn_warm(
    a: &MeasurementMatrix,
    y: &DenseVector,
    start: &SparseSolution,
    inner_steps: usize,
    residual_tol: f64,
) -> Result<SparseSolution> {
    validate(a, y, residual_tol)?;
    if start.z.len() != a.n() {
        return Err(Error::InvalidDimensions(format!(
            "start has length {}, matrix has {} columns",
            start.z.len(),
            a.n()
        )));
    }
    if start.z.iter().all(|v| *v == 0.0) {
        let mut path = Path::cold(a.matrix(), y);
        path.run(residual_tol, inner_steps)?;
        return Ok(path.into_solution());
    }
    // Keeping the previous lambda moves least when the data changed little.
    // If that path degenerates, restart from the largest correlation.
    let attempt = |raise: bool| -> Result<SparseSolution> {
        let mut path = Path::warm(a.matrix(), y, start, raise)?;
        path.run(residual_tol, inner_steps)?;
        Ok(path.into_solution())
    };
    match attempt(false) {
        Err(Error::DegenerateStep { .. }) => attempt(true),
        other => other,
    }
}

fn validate(a: &MeasurementMatrix, y: &DenseVector, residual_tol: f64) -> Result<()> {
    if y.len() != a.m() {
        return Err(Error::InvalidDimensions(format!(
            "y has length {}, matrix has {} rows",
            y.len(),
            a.m()
        )));
    }
    if !(residual_tol > 0.0 && residual_tol.is_finite()) {
        return Err(Error::InvalidParameter(format!("residual_tol must be positive, got {residual_tol}")));
    }
    crate::numerics::check_finite(y.as_slice())
}

/// Lower-triangular Cholesky factor of the active Gram matrix, grown one
/// column at a time.
#[derive(Debug, Default)]
struct GramFactor {
    rows: Vec<Vec<f64>>,
}

impl GramFactor {
    /// Appends a column with Gram entries `cross` against the existing
    /// columns and squared norm `diag`. Fails on a tiny pivot.
    fn push(&mut self, cross: &[f64], diag: f64) -> bool {
        let l = self.forward(cross);
        let pivot_sq = diag - l.iter().map(|v| v * v).sum::<f64>();
        if !(pivot_sq > PIVOT_TOL * diag) {
            return false;
        }
        let mut row = l;
        row.push(pivot_sq.sqrt());
        self.rows.push(row);
        true
    }

    fn forward(&self, b: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(b.len() + 1);
        for (i, row) in self.rows.iter().enumerate() {
            let partial: f64 = row[..i].iter().zip(&x).map(|(l, v)| l * v).sum();
            x.push((b[i] - partial) / row[i]);
        }
        x
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = self.forward(b);
        let k = self.rows.len();
        for i in (0..k).rev() {
            let partial: f64 = (i + 1..k).map(|j| self.rows[j][i] * x[j]).sum();
            x[i] = (x[i] - partial) / self.rows[i][i];
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Motion {
    /// eps from its current value to one, lambda fixed
    Reconcile,
    Down,
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Outcome {
    Target,
    Budget,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Event {
    Enter { index: usize, sign: f64 },
    Leave { slot: usize },
    Target,
    /// reconcile finished, or lambda reached zero
    Limit,
}

struct Path<'a> {
    a: &'a DMatrix<f64>,
    y: &'a DenseVector,
    z: DenseVector,
    active: Vec<usize>,
    signs: Vec<f64>,
    factor: GramFactor,
    lambda: f64,
    motion: Motion,
    /// warm-start linear term and its homotopy parameter
    u: Option<DenseVector>,
    eps: f64,
    /// index that just left the active set and may not re-enter at t = 0
    blocked: Option<usize>,
    steps: usize,
}

impl<'a> Path<'a> {
    fn cold(a: &'a DMatrix<f64>, y: &'a DenseVector) -> Self {
        let corr = a.tr_mul(y);
        let lambda = corr.amax();
        Self {
            a,
            y,
            z: DVector::zeros(a.ncols()),
            active: Vec::new(),
            signs: Vec::new(),
            factor: GramFactor::default(),
            lambda,
            motion: Motion::Down,
            u: None,
            eps: 1.0,
            blocked: None,
            steps: 0,
        }
    }

    fn warm(a: &'a DMatrix<f64>, y: &'a DenseVector, start: &SparseSolution, raise: bool) -> Result<Self> {
        let z = start.z.clone();
        // trust the recorded active set only if it covers the nonzeros with
        // matching signs
        let recorded_ok = (0..z.len()).filter(|&j| z[j] != 0.0).all(|j| {
            start.active.iter().any(|&(i, s)| i == j && s == z[j].signum())
        }) && start.active.iter().all(|&(i, _)| i < z.len());
        let (active, signs): (Vec<usize>, Vec<f64>) = if recorded_ok {
            start.active.iter().copied().unzip()
        } else {
            (0..z.len()).filter(|&j| z[j] != 0.0).map(|j| (j, z[j].signum())).unzip()
        };
        if active.len() > a.nrows() {
            return Err(Error::DegenerateStep { active: active.len() });
        }
        let corr = a.tr_mul(&(y - a * &z));
        // Raising lambda to the largest correlation keeps every inactive index
        // inside its bound. Without the raise, inactive indices past the bound
        // are pulled back in by the linear term like the active ones.
        // An exact solution has corr.amax() == lambda_final and stays put.
        let recorded = if start.lambda_final.is_finite() { start.lambda_final } else { 0.0 };
        let lambda = if raise || recorded <= 0.0 {
            recorded.max(corr.amax()).max(f64::MIN_POSITIVE)
        } else {
            recorded
        };
        let mut u = DVector::zeros(z.len());
        for j in 0..z.len() {
            u[j] = corr[j] - corr[j].clamp(-lambda, lambda);
        }
        for (&j, &s) in active.iter().zip(&signs) {
            u[j] = corr[j] - lambda * s;
        }
        let needs_reconcile = u.amax() > 1e-9 * lambda.max(1e-300);
        let mut path = Self {
            a,
            y,
            z,
            active,
            signs,
            factor: GramFactor::default(),
            lambda,
            motion: Motion::Reconcile,
            u: needs_reconcile.then_some(u),
            eps: if needs_reconcile { 0.0 } else { 1.0 },
            blocked: None,
            steps: 0,
        };
        path.refactor()?;
        Ok(path)
    }

    fn aim(&self, target: f64) -> f64 {
        let rounding = 1e3 * f64::EPSILON * self.y.norm();
        (target * (1.0 - TARGET_MARGIN) - rounding).max(0.5 * target)
    }

    fn residual(&self) -> DenseVector {
        self.y - self.a * &self.z
    }

    fn into_solution(self) -> SparseSolution {
        let residual_norm = self.residual().norm();
        let support = (0..self.z.len()).filter(|&j| self.z[j] != 0.0).collect();
        let active = self.active.iter().copied().zip(self.signs.iter().copied()).collect();
        SparseSolution {
            z: self.z,
            support,
            residual_norm,
            lambda_final: self.lambda,
            path_steps: self.steps,
            active,
        }
    }

    fn gram(&self, i: usize, j: usize) -> f64 {
        self.a.column(i).dot(&self.a.column(j))
    }

    fn refactor(&mut self) -> Result<()> {
        let mut factor = GramFactor::default();
        for (k, &j) in self.active.iter().enumerate() {
            let cross: Vec<f64> = self.active[..k].iter().map(|&i| self.gram(i, j)).collect();
            if !factor.push(&cross, self.gram(j, j)) {
                return Err(Error::DegenerateStep { active: self.active.len() });
            }
        }
        self.factor = factor;
        Ok(())
    }

    fn add(&mut self, index: usize, sign: f64) -> Result<()> {
        if self.active.len() >= self.a.nrows() {
            return Err(Error::DegenerateStep { active: self.active.len() + 1 });
        }
        let cross: Vec<f64> = self.active.iter().map(|&i| self.gram(i, index)).collect();
        let ok = self.factor.push(&cross, self.gram(index, index));
        self.active.push(index);
        self.signs.push(sign);
        if !ok {
            self.refactor()?;
        }
        Ok(())
    }

    fn remove(&mut self, slot: usize) -> Result<()> {
        let index = self.active.remove(slot);
        self.signs.remove(slot);
        self.z[index] = 0.0;
        self.blocked = Some(index);
        self.refactor()
    }

    /// Follows the path until the residual target is met or `budget`
    /// breakpoints have been executed.
    fn run(&mut self, target: f64, budget: usize) -> Result<Outcome> {
        if self.motion != Motion::Reconcile || self.u.is_none() {
            self.motion = Motion::Down;
            if let Some(outcome) = self.settle_motion(target) {
                return Ok(outcome);
            }
        }
        if self.active.is_empty() && self.motion == Motion::Down {
            // lambda_max: the most correlated column enters
            if budget == 0 {
                return Ok(Outcome::Budget);
            }
            let corr = self.a.tr_mul(self.y);
            let index = corr.iamax();
            self.add(index, corr[index].signum())?;
            self.steps += 1;
        }

        let mut last_residual = f64::INFINITY;
        loop {
            let (t, event, dz) = self.next_event(target);
            if !t.is_finite() {
                // only reachable when nothing moves: the point is final
                return Ok(Outcome::Target);
            }
            self.advance(t, &dz);
            match event {
                Event::Target => return Ok(Outcome::Target),
                Event::Limit => match self.motion {
                    Motion::Reconcile => {
                        self.u = None;
                        self.eps = 1.0;
                        self.motion = Motion::Down;
                        if let Some(outcome) = self.settle_motion(target) {
                            return Ok(outcome);
                        }
                        continue;
                    }
                    // lambda hit zero; nothing left to trade
                    _ => return Ok(Outcome::Target),
                },
                Event::Leave { slot } if self.steps >= budget => {
                    // the coefficient is zero here; drop it without charging a step
                    self.remove(slot)?;
                    return Ok(Outcome::Budget);
                }
                Event::Enter { .. } if self.steps >= budget => return Ok(Outcome::Budget),
                Event::Enter { index, sign } => {
                    self.blocked = None;
                    self.add(index, sign)?;
                }
                Event::Leave { slot } => self.remove(slot)?,
            }
            self.steps += 1;
            if self.motion == Motion::Down {
                let residual = self.residual().norm();
                debug_assert!(
                    residual <= last_residual * (1.0 + 1e-9) + 1e-12,
                    "residual increased along the path: {last_residual} -> {residual}"
                );
                last_residual = residual;
            }
        }
    }

    /// Picks the lambda direction after reconciliation; returns an outcome
    /// when the current point already sits on the target.
    fn settle_motion(&mut self, target: f64) -> Option<Outcome> {
        let residual = self.residual().norm();
        if self.active.is_empty() && residual <= target {
            // zero is feasible: lambda_max or above is the answer
            self.lambda = self.lambda.max(self.a.tr_mul(self.y).amax());
            return Some(Outcome::Target);
        }
        if residual <= target && residual >= self.aim(target) - TARGET_MARGIN * target {
            return Some(Outcome::Target);
        }
        self.motion = if residual > target { Motion::Down } else { Motion::Up };
        None
    }

    fn advance(&mut self, t: f64, dz: &[f64]) {
        for (&j, d) in self.active.iter().zip(dz) {
            self.z[j] += t * d;
        }
        match self.motion {
            Motion::Reconcile => self.eps += t,
            Motion::Down => self.lambda = (self.lambda - t).max(0.0),
            Motion::Up => self.lambda += t,
        }
    }

    /// Direction of the active coefficients per unit path parameter and the
    /// first event along it.
    fn next_event(&self, target: f64) -> (f64, Event, Vec<f64>) {
        let a = self.a;
        let (dlambda, drift) = match self.motion {
            Motion::Reconcile => (0.0, self.u.as_ref()),
            Motion::Down => (-1.0, None),
            Motion::Up => (1.0, None),
        };
        let rhs: Vec<f64> = self
            .active
            .iter()
            .zip(&self.signs)
            .map(|(&j, &s)| drift.map_or(0.0, |u| u[j]) - dlambda * s)
            .collect();
        let dz = self.factor.solve(&rhs);

        let residual = self.residual();
        let mut w = DVector::zeros(a.nrows());
        for (&j, &d) in self.active.iter().zip(&dz) {
            w.axpy(d, &a.column(j), 1.0);
        }
        let corr = a.tr_mul(&residual);
        let dcorr = a.tr_mul(&w);
        let slack = (1.0 - self.eps).max(0.0);

        let (mut best_t, mut best) = match self.motion {
            Motion::Reconcile => (slack, Event::Limit),
            Motion::Down => (self.lambda, Event::Limit),
            Motion::Up => (f64::INFINITY, Event::Limit),
        };

        let mut is_active = vec![false; a.ncols()];
        for &j in &self.active {
            is_active[j] = true;
        }
        for j in 0..a.ncols() {
            if is_active[j] {
                continue;
            }
            // a column that just left may not re-enter at the same point
            let floor = if Some(j) == self.blocked { 1e-10 * self.lambda.max(1.0) } else { -1.0 };
            let (h, dh) = match drift {
                Some(u) => (corr[j] - slack * u[j], -dcorr[j] + u[j]),
                None => (corr[j], -dcorr[j]),
            };
            let upper = dh - dlambda;
            if upper > 0.0 {
                let t = (self.lambda - h).max(0.0) / upper;
                if t < best_t && t > floor {
                    best_t = t;
                    best = Event::Enter { index: j, sign: 1.0 };
                }
            }
            let lower = -dh - dlambda;
            if lower > 0.0 {
                let t = (self.lambda + h).max(0.0) / lower;
                if t < best_t && t > floor {
                    best_t = t;
                    best = Event::Enter { index: j, sign: -1.0 };
                }
            }
        }
        for (slot, ((&j, &d), &s)) in self.active.iter().zip(&dz).zip(&self.signs).enumerate() {
            // a coefficient sitting at zero and heading the wrong way leaves at once
            if d * s < 0.0 {
                let t = (-self.z[j] / d).max(0.0);
                if t < best_t {
                    best_t = t;
                    best = Event::Leave { slot };
                }
            }
        }
        if self.motion != Motion::Reconcile {
            if let Some(t) = crossing(&residual, &w, self.aim(target)) {
                if t <= best_t {
                    best_t = t;
                    best = Event::Target;
                }
            }
        }
        (best_t, best, dz)
    }
}

/// Smallest `t > 0` with `||r - t w|| = target`.
///
/// Splits `r` into its component along `w` and the orthogonal remainder so
/// that the noiseless case (`r` parallel to `w`) does not cancel.
fn crossing(r: &DenseVector, w: &DenseVector, target: f64) -> Option<f64> {
    let ww = w.norm_squared();
    if ww == 0.0 {
        return None;
    }
    let along = r.dot(w) / ww;
    let orth = (r - along * w).norm();
    if orth > target {
        return None;
    }
    let half_width = ((target - orth) * (target + orth) / ww).sqrt();
    [along - half_width, along + half_width].into_iter().find(|t| *t > 0.0)
}
