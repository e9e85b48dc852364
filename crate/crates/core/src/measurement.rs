//! Black-box objectives and simultaneous-perturbation measurements of their
//! gradients.
//!
//! Every evaluation that reaches the underlying function is counted; the
//! counter is the cost metric used throughout the crate.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{check_finite, seeded_rng, stream, DenseVector, MeasurementMatrix, PerturbationSigns};

type Evaluator = dyn Fn(&DenseVector) -> std::result::Result<f64, String> + Send + Sync;

/// Additive i.i.d. Gaussian evaluation noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma: f64,
    pub seed: u64,
}

struct NoiseState {
    sigma: f64,
    rng: Mutex<ChaCha8Rng>,
}

/// A counted, optionally noisy, scalar function of `dim` variables.
pub struct Objective {
    dim: usize,
    evaluator: Arc<Evaluator>,
    noise: Option<NoiseState>,
    evals: AtomicU64,
}

impl fmt::Debug for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Objective")
            .field("dim", &self.dim)
            .field("noise_sigma", &self.noise.as_ref().map(|n| n.sigma))
            .field("evals", &self.eval_count())
            .finish()
    }
}

impl Objective {
    pub fn new(dim: usize, f: impl Fn(&DenseVector) -> f64 + Send + Sync + 'static) -> Self {
        Self::fallible(dim, move |x| Ok(f(x)))
    }

    pub fn fallible(
        dim: usize,
        f: impl Fn(&DenseVector) -> std::result::Result<f64, String> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            evaluator: Arc::new(f),
            noise: None,
            evals: AtomicU64::new(0),
        }
    }

    /// Runs `program` once per evaluation: `x` is written to its stdin as
    /// newline-separated decimals and a single decimal is read from stdout.
    pub fn external(dim: usize, program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        let program = program.into();
        Self::fallible(dim, move |x| run_external(&program, &args, x))
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Self {
        self.noise = (noise.sigma > 0.0).then(|| NoiseState {
            sigma: noise.sigma,
            rng: Mutex::new(seeded_rng(noise.seed, stream::NOISE)),
        });
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_noisy(&self) -> bool {
        self.noise.is_some()
    }

    /// Standard deviation of the evaluation noise, zero when noiseless.
    pub fn noise_sigma(&self) -> f64 {
        self.noise.as_ref().map_or(0.0, |n| n.sigma)
    }

    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::SeqCst)
    }

    /// Counted evaluation, including noise.
    pub fn evaluate(&self, x: &DenseVector) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::InvalidDimensions(format!(
                "point has length {}, objective has dimension {}",
                x.len(),
                self.dim
            )));
        }
        self.evals.fetch_add(1, Ordering::SeqCst);
        let mut value = (self.evaluator)(x).map_err(Error::EvaluationFailed)?;
        if let Some(noise) = &self.noise {
            let draw: f64 = noise.rng.lock().expect("noise rng poisoned").sample(StandardNormal);
            value += noise.sigma * draw;
        }
        if !value.is_finite() {
            return Err(Error::EvaluationFailed(format!("non-finite value {value}")));
        }
        Ok(value)
    }

    /// Noise-free evaluation that does not touch the counter. Used for
    /// monitoring traces, never by estimators.
    pub fn peek(&self, x: &DenseVector) -> Result<f64> {
        (self.evaluator)(x).map_err(Error::EvaluationFailed)
    }
}

fn run_external(program: &PathBuf, args: &[String], x: &DenseVector) -> std::result::Result<f64, String> {
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| format!("cannot spawn {}: {e}", program.display()))?;
    let mut input = String::with_capacity(x.len() * 24);
    for v in x.iter() {
        // Display for f64 is the shortest representation that round-trips
        input.push_str(&v.to_string());
        input.push('\n');
    }
    child
        .stdin
        .take()
        .expect("stdin is piped")
        .write_all(input.as_bytes())
        .map_err(|e| format!("writing to {}: {e}", program.display()))?;
    let output = child.wait_with_output().map_err(|e| e.to_string())?;
    if !output.status.success() {
        return Err(format!("{} exited with {}", program.display(), output.status));
    }
    let text = String::from_utf8_lossy(&output.stdout);
    text.trim()
        .parse::<f64>()
        .map_err(|e| format!("cannot parse objective output {:?}: {e}", text.trim()))
}

/// Averaged SP measurements `y_bar ≈ A ∇f(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementBatch {
    pub y_bar: DenseVector,
    pub k: usize,
    pub delta: f64,
    pub evals_used: u64,
    pub matrix_seed: u64,
    /// `f(x)` as observed while measuring (the first draw for noisy objectives).
    pub f_base: f64,
}

fn check_point(obj: &Objective, x: &DenseVector, delta: f64) -> Result<()> {
    if x.len() != obj.dim() {
        return Err(Error::InvalidDimensions(format!(
            "point has length {}, objective has dimension {}",
            x.len(),
            obj.dim()
        )));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
    }
    check_finite(x.as_slice())
}

/// One SP measurement: evaluates `f` at `x + delta * sum_j signs_j a_j` (and
/// at `x` unless `f_base` is given) and returns
/// `y_i = (f(x + delta p) - f(x)) / (delta * signs_i)`.
pub fn sp_measure_once(
    obj: &Objective,
    x: &DenseVector,
    a: &MeasurementMatrix,
    delta: f64,
    signs: &PerturbationSigns,
    f_base: Option<f64>,
) -> Result<DenseVector> {
    check_point(obj, x, delta)?;
    if a.n() != x.len() || signs.len() != a.m() {
        return Err(Error::InvalidDimensions(format!(
            "matrix {}x{}, point {}, signs {}",
            a.m(),
            a.n(),
            x.len(),
            signs.len()
        )));
    }
    let direction = a.matrix().tr_mul(&signs.to_vector());
    let shifted = obj.evaluate(&(x + delta * direction))?;
    let base = match f_base {
        Some(v) => v,
        None => obj.evaluate(x)?,
    };
    let quotient = (shifted - base) / delta;
    // 1 / s_i = s_i for ±1 signs
    Ok(signs.to_vector() * quotient)
}

/// Averages `k` SP measurements with independent signs and a fixed `A`.
/// Deterministic objectives evaluate `f(x)` once (`k + 1` evaluations); noisy
/// ones draw it afresh each repetition (`2k`).
pub fn sp_measure_averaged(
    obj: &Objective,
    x: &DenseVector,
    a: &MeasurementMatrix,
    delta: f64,
    k: usize,
    seed: u64,
) -> Result<MeasurementBatch> {
    if k == 0 {
        return Err(Error::InvalidParameter("repetition count k must be at least 1".into()));
    }
    check_point(obj, x, delta)?;
    let before = obj.eval_count();
    let mut rng = seeded_rng(seed, stream::SIGNS);
    let shared_base = if obj.is_noisy() { None } else { Some(obj.evaluate(x)?) };
    let mut f_base = shared_base;
    let m = a.m();
    let mut sum = DVector::zeros(m);
    // directions for a block of repetitions come from one matrix product
    const BLOCK: usize = 64;
    let mut done = 0;
    while done < k {
        let width = BLOCK.min(k - done);
        let signs = DMatrix::from_fn(m, width, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
        // row c is the direction of repetition c
        let directions = signs.transpose() * a.matrix();
        for c in 0..width {
            let base = match shared_base {
                Some(v) => v,
                None => {
                    let v = obj.evaluate(x)?;
                    f_base.get_or_insert(v);
                    v
                }
            };
            let shifted = obj.evaluate(&(x + delta * directions.row(c).transpose()))?;
            sum.axpy((shifted - base) / delta, &signs.column(c), 1.0);
        }
        done += width;
    }
    Ok(MeasurementBatch {
        y_bar: sum / k as f64,
        k,
        delta,
        evals_used: obj.eval_count() - before,
        matrix_seed: a.seed(),
        f_base: f_base.expect("k >= 1"),
    })
}

/// Classic one-sided SPSA gradient estimate averaged over `k` draws of
/// `Delta ∈ {±1}^n`.
pub fn naive_sp_estimate(obj: &Objective, x: &DenseVector, delta: f64, k: usize, seed: u64) -> Result<DenseVector> {
    if k == 0 {
        return Err(Error::InvalidParameter("repetition count k must be at least 1".into()));
    }
    check_point(obj, x, delta)?;
    let n = x.len();
    let mut rng = seeded_rng(seed, stream::SIGNS);
    let shared_base = if obj.is_noisy() { None } else { Some(obj.evaluate(x)?) };
    let mut sum = DVector::zeros(n);
    for _ in 0..k {
        let signs = PerturbationSigns::draw(&mut rng, n).to_vector();
        let shifted = obj.evaluate(&(x + delta * &signs))?;
        let base = match shared_base {
            Some(v) => v,
            None => obj.evaluate(x)?,
        };
        sum += signs * ((shifted - base) / delta);
    }
    Ok(sum / k as f64)
}

/// Central differences along each coordinate; `2n` evaluations.
pub fn central_fd(obj: &Objective, x: &DenseVector, delta: f64) -> Result<DenseVector> {
    check_point(obj, x, delta)?;
    let mut probe = x.clone();
    let mut grad = DVector::zeros(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + delta;
        let plus = obj.evaluate(&probe)?;
        probe[i] = x[i] - delta;
        let minus = obj.evaluate(&probe)?;
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * delta);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_matrix, rademacher_signs};

    fn linear(c: DenseVector) -> Objective {
        Objective::new(c.len(), move |x| c.dot(x))
    }

    fn sum_squares(n: usize) -> Objective {
        Objective::new(n, |x| x.norm_squared())
    }

    #[test]
    fn counter_and_determinism() {
        let obj = sum_squares(3);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(obj.evaluate(&x).unwrap(), obj.evaluate(&x).unwrap());
        assert_eq!(obj.eval_count(), 2);
        obj.peek(&x).unwrap();
        assert_eq!(obj.eval_count(), 2);
    }

    #[test]
    fn noisy_objective_varies_and_is_seeded() {
        let noise = NoiseModel { sigma: 0.1, seed: 4 };
        let a = sum_squares(2).with_noise(noise);
        let b = sum_squares(2).with_noise(noise);
        let x = DVector::from_vec(vec![1.0, 1.0]);
        let (a1, a2) = (a.evaluate(&x).unwrap(), a.evaluate(&x).unwrap());
        assert_ne!(a1, a2);
        assert_eq!(a1, b.evaluate(&x).unwrap());
    }

    #[test]
    fn non_finite_values_fail() {
        let obj = Objective::new(1, |_| f64::NAN);
        let err = obj.evaluate(&DVector::from_vec(vec![0.0])).unwrap_err();
        assert!(matches!(err, Error::EvaluationFailed(_)));
    }

    #[test]
    fn linear_single_row_is_exact() {
        let c = DVector::from_fn(6, |i, _| i as f64 - 2.5);
        let obj = linear(c.clone());
        let a = gaussian_matrix(1, 6, 2).unwrap();
        let x = DVector::from_element(6, 0.3);
        let expected = a.row(0).dot(&c);
        for seed in 0..5 {
            let y = sp_measure_once(&obj, &x, &a, 1e-3, &rademacher_signs(1, seed).unwrap(), None).unwrap();
            assert!((y[0] - expected).abs() < 1e-9 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn linear_two_rows_expand_exactly() {
        let c = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let obj = linear(c.clone());
        let a = gaussian_matrix(2, 4, 8).unwrap();
        let signs = PerturbationSigns::from_signs(vec![1.0, -1.0]).unwrap();
        let y = sp_measure_once(&obj, &DVector::zeros(4), &a, 1e-2, &signs, None).unwrap();
        let (c1, c2) = (a.row(0).dot(&c), a.row(1).dot(&c));
        assert!((y[0] - (c1 - c2)).abs() < 1e-10);
        assert!((y[1] - (-c1 + c2)).abs() < 1e-10);
    }

    #[test]
    fn averaged_measurement_approaches_projection() {
        let (n, m) = (50, 10);
        let obj = sum_squares(n);
        let a = gaussian_matrix(m, n, 31).unwrap();
        let x = DVector::from_fn(n, |i, _| ((i * 7) % 5) as f64 - 2.0);
        let target = a.matrix() * (2.0 * &x);
        let batch = sp_measure_averaged(&obj, &x, &a, 1e-4, 10_000, 5).unwrap();
        // y_i averages s_i * sum_j s_j c_j, whose variance is ||c||^2 - c_i^2
        let k = batch.k as f64;
        for i in 0..m {
            let se = ((target.norm_squared() - target[i] * target[i]) / k).sqrt();
            let dev = (batch.y_bar[i] - target[i]).abs();
            assert!(dev < 4.0 * se, "row {i}: deviation {dev}, standard error {se}");
        }
    }

    #[test]
    fn averaged_k1_matches_single_shot() {
        let obj = sum_squares(8);
        let a = gaussian_matrix(3, 8, 1).unwrap();
        let x = DVector::from_element(8, 1.0);
        let batch = sp_measure_averaged(&obj, &x, &a, 1e-3, 1, 77).unwrap();
        let single = sp_measure_once(&obj, &x, &a, 1e-3, &rademacher_signs(3, 77).unwrap(), None).unwrap();
        assert_eq!(batch.y_bar, single);
        assert_eq!(batch.evals_used, 2);
    }

    #[test]
    fn more_repetitions_reduce_error() {
        let (n, m) = (100, 20);
        let obj = sum_squares(n);
        let x = DVector::from_fn(n, |i, _| (i as f64 * 0.37).sin());
        let mut wins = 0;
        for trial in 0..100u64 {
            let a = gaussian_matrix(m, n, 1000 + trial).unwrap();
            let target = a.matrix() * (2.0 * &x);
            let err = |k| {
                let batch = sp_measure_averaged(&obj, &x, &a, 1e-4, k, trial).unwrap();
                (&batch.y_bar - &target).norm() / target.norm()
            };
            if err(400) < err(4) {
                wins += 1;
            }
        }
        assert!(wins >= 95, "k=400 beat k=4 in {wins}/100 trials");
    }

    #[test]
    fn evaluation_accounting() {
        let x = DVector::from_element(10, 0.5);
        let a = gaussian_matrix(4, 10, 1).unwrap();
        let obj = sum_squares(10);
        assert_eq!(sp_measure_averaged(&obj, &x, &a, 1e-3, 100, 1).unwrap().evals_used, 101);

        let noisy = sum_squares(10).with_noise(NoiseModel { sigma: 1e-3, seed: 1 });
        assert_eq!(sp_measure_averaged(&noisy, &x, &a, 1e-3, 100, 1).unwrap().evals_used, 200);

        let obj = sum_squares(10);
        naive_sp_estimate(&obj, &x, 1e-3, 25, 3).unwrap();
        assert_eq!(obj.eval_count(), 26);

        let obj = sum_squares(10);
        central_fd(&obj, &x, 1e-3).unwrap();
        assert_eq!(obj.eval_count(), 20);
    }

    #[test]
    fn naive_sp_linear_one_dimensional_is_exact() {
        let obj = linear(DVector::from_vec(vec![2.5]));
        let g = naive_sp_estimate(&obj, &DVector::from_vec(vec![1.0]), 1e-2, 7, 9).unwrap();
        assert!((g[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn naive_sp_mean_matches_gradient() {
        let n = 100;
        let obj = sum_squares(n);
        let x = DVector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { -0.5 });
        let g = naive_sp_estimate(&obj, &x, 1e-4, 10_000, 12).unwrap();
        let truth = 2.0 * &x;
        // per-coordinate standard error is ||g|| / sqrt(k); in norm this is
        // ||g|| sqrt(n / k) = 0.1 ||g||, so 2% is not reachable at k = 1e4 in
        // norm. Check the mean coordinate-wise against 5 standard errors.
        let se = truth.norm() / (10_000f64).sqrt();
        let worst = (&g - &truth).amax();
        assert!(worst < 5.0 * se, "worst deviation {worst}, se {se}");
    }

    #[test]
    fn central_differences() {
        let obj = sum_squares(4);
        let x = DVector::from_vec(vec![1.0, -2.0, 0.25, 3.0]);
        let g = central_fd(&obj, &x, 1e-3).unwrap();
        assert!((&g - 2.0 * &x).amax() < 1e-9);

        let cubic = Objective::new(2, |x| x[0].powi(3));
        let g = central_fd(&cubic, &DVector::from_vec(vec![1.0, 0.0]), 1e-3).unwrap();
        assert!((g[0] - 3.000001).abs() < 1e-9);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn external_objective_round_trips_bits() {
        let obj = Objective::external(3, "sh", vec!["-c".into(), "head -n 1".into()]);
        let x = DVector::from_vec(vec![0.1 + 0.2, -1.0e-300, 7.0]);
        let value = obj.evaluate(&x).unwrap();
        assert_eq!(value.to_bits(), x[0].to_bits());
        assert_eq!(obj.eval_count(), 1);
    }

    #[test]
    fn external_objective_failure_is_reported() {
        let obj = Objective::external(1, "sh", vec!["-c".into(), "exit 3".into()]);
        assert!(matches!(obj.evaluate(&DVector::zeros(1)), Err(Error::EvaluationFailed(_))));
    }
}
