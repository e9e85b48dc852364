//! End-to-end sparse gradient estimation: SP measurements along the rows of
//! a Gaussian matrix, averaged, then recovered by the homotopy solver.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homotopy::{solve_bpdn, SolverOptions, SparseSolution, DEFAULT_KKT_TOL};
use crate::measurement::{sp_measure_averaged, sp_measure_once, MeasurementBatch, Objective};
use crate::numerics::{derive_seed, gaussian_matrix, seeded_rng, stream, DenseVector, MeasurementMatrix, PerturbationSigns};

/// How the residual bound for recovery is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualTol {
    /// A fixed bound on `||A z - y_bar||`.
    Absolute(f64),
    /// `factor * ||y_bar||`.
    Relative(f64),
    /// `factor` times the predicted norm of the SP averaging noise,
    /// `||y_bar|| sqrt((m - 1) / (k + m - 1))`, plus the contribution of
    /// evaluation noise. Costs no extra evaluations.
    SpNoise(f64),
}

impl Default for ResidualTol {
    fn default() -> Self {
        ResidualTol::SpNoise(1.0)
    }
}

impl ResidualTol {
    /// Resolves the rule to a positive scalar for a given batch.
    pub fn resolve(&self, batch: &MeasurementBatch, noise_sigma: f64, noisy_base: bool) -> f64 {
        let y_norm = batch.y_bar.norm();
        let m = batch.y_bar.len() as f64;
        let k = batch.k as f64;
        let rho = match *self {
            ResidualTol::Absolute(t) => t,
            ResidualTol::Relative(frac) => frac * y_norm,
            ResidualTol::SpNoise(factor) => {
                let averaging = y_norm * ((m - 1.0) / (k + m - 1.0)).sqrt();
                // each quotient carries (noise(x + dp) - noise(x)) / delta
                let per_entry = if noisy_base { 2.0 } else { 1.0 + 1.0 / k };
                let evaluation = noise_sigma * (per_entry * m / k).sqrt() / batch.delta;
                factor * (averaging * averaging + evaluation * evaluation).sqrt()
            }
        };
        rho.max(f64::MIN_POSITIVE)
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            ResidualTol::Absolute(v) | ResidualTol::Relative(v) | ResidualTol::SpNoise(v) => v,
        };
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("residual tolerance parameter must be positive, got {v}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub m: usize,
    pub k: usize,
    /// SP step. `None` means `1e-3 * (1 + ||x||)`.
    pub delta: Option<f64>,
    pub residual_tol: ResidualTol,
    pub matrix_seed: u64,
    pub sign_seed: u64,
    /// Defaults to `4 m`.
    pub max_steps: Option<usize>,
    pub kkt_tol: f64,
    /// Least-squares refit on the recovered support.
    pub refit: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            m: 50,
            k: 100,
            delta: None,
            residual_tol: ResidualTol::default(),
            matrix_seed: 0,
            sign_seed: 1,
            max_steps: None,
            kkt_tol: DEFAULT_KKT_TOL,
            refit: false,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidParameter("m must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::InvalidParameter(format!("delta must be positive, got {d}")));
            }
        }
        if !(self.kkt_tol > 0.0) {
            return Err(Error::InvalidParameter("kkt_tol must be positive".into()));
        }
        self.residual_tol.validate()
    }

    pub fn delta_at(&self, x: &DenseVector) -> f64 {
        self.delta.unwrap_or_else(|| 1e-3 * (1.0 + x.norm()))
    }

    pub fn solver_options(&self, residual_tol: f64) -> SolverOptions {
        let mut opts = SolverOptions::new(residual_tol, self.m);
        if let Some(steps) = self.max_steps {
            opts.max_steps = steps;
        }
        opts.kkt_tol = self.kkt_tol;
        opts
    }

    pub fn matrix(&self, n: usize) -> Result<MeasurementMatrix> {
        gaussian_matrix(self.m, n, self.matrix_seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub g: DenseVector,
    pub support: Vec<usize>,
    pub residual_norm: f64,
    /// The resolved residual bound used for recovery.
    pub residual_tol: f64,
    pub config: EstimatorConfig,
    pub evals_used: u64,
    /// `f(x)` observed while measuring.
    pub f_base: f64,
    pub solution: SparseSolution,
}

/// Measures at `x` with the matrix generated from `cfg.matrix_seed` and
/// recovers a sparse gradient.
pub fn estimate_gradient(obj: &Objective, x: &DenseVector, cfg: &EstimatorConfig) -> Result<GradientEstimate> {
    cfg.validate()?;
    let a = cfg.matrix(x.len())?;
    estimate_with_matrix(obj, x, &a, cfg, cfg.sign_seed)
}

/// As [`estimate_gradient`] but with a caller-held matrix and sign seed, so
/// optimizers can keep `A` fixed while drawing fresh signs every iteration.
pub fn estimate_with_matrix(
    obj: &Objective,
    x: &DenseVector,
    a: &MeasurementMatrix,
    cfg: &EstimatorConfig,
    sign_seed: u64,
) -> Result<GradientEstimate> {
    cfg.validate()?;
    let delta = cfg.delta_at(x);
    let batch = sp_measure_averaged(obj, x, a, delta, cfg.k, sign_seed)?;
    let tol = cfg.residual_tol.resolve(&batch, obj.noise_sigma(), obj.is_noisy());
    let solution = solve_bpdn(a, &batch.y_bar, &cfg.solver_options(tol)).map_err(|e| Error::RecoveryFailed(Box::new(e)))?;
    let g = if cfg.refit {
        refit_on_support(a, &batch.y_bar, &solution.support, x.len())
    } else {
        solution.z.clone()
    };
    Ok(GradientEstimate {
        support: crate::numerics::support(&g),
        g,
        residual_norm: solution.residual_norm,
        residual_tol: tol,
        config: cfg.clone(),
        evals_used: batch.evals_used,
        f_base: batch.f_base,
        solution,
    })
}

/// Unpenalized least squares restricted to `support`.
pub fn refit_on_support(a: &MeasurementMatrix, y: &DenseVector, support: &[usize], n: usize) -> DenseVector {
    let mut g = DenseVector::zeros(n);
    if support.is_empty() {
        return g;
    }
    let cols: Vec<_> = support.iter().map(|&j| a.matrix().column(j).into_owned()).collect();
    let sub = DMatrix::from_columns(&cols);
    let svd = sub.svd(true, true);
    if let Ok(coef) = svd.solve(y, 1e-12) {
        for (slot, &j) in support.iter().enumerate() {
            g[j] = coef[slot];
        }
    }
    g
}

/// Estimates a residual bound from `probes` extra single-shot measurements.
///
/// The spread of the single-shot quotients around their mean gives the
/// per-entry noise scale `sigma`; averaging `k` of them in `m` entries gives
/// `sigma sqrt(m / k)`. The result is clamped below by `2 m K delta`, where
/// `K` comes from second differences `f(x + dp) - 2 f(x) + f(x - dp)` and is
/// scaled so that `2 m K delta` is the largest observed norm of the
/// second-order bias vector. Uses `2 probes + 1` evaluations.
pub fn calibrate_tolerance(obj: &Objective, x: &DenseVector, cfg: &EstimatorConfig, probes: usize) -> Result<f64> {
    if probes < 2 {
        return Err(Error::InvalidParameter(format!("calibration needs at least 2 probes, got {probes}")));
    }
    cfg.validate()?;
    let a = cfg.matrix(x.len())?;
    let m = a.m();
    let delta = cfg.delta_at(x);
    let mut rng = seeded_rng(derive_seed(cfg.sign_seed, 0xCA11), stream::SIGNS);
    let base = obj.evaluate(x)?;

    let mut shots = Vec::with_capacity(probes);
    let mut worst_curvature: f64 = 0.0;
    for _ in 0..probes {
        let signs = PerturbationSigns::draw(&mut rng, m);
        let y = sp_measure_once(obj, x, &a, delta, &signs, Some(base))?;
        let p = a.matrix().tr_mul(&signs.to_vector());
        let back = obj.evaluate(&(x - delta * p))?;
        // forward quotient times delta recovers f(x + dp) - f(x)
        let forward = y[0] * signs.as_slice()[0] * delta;
        let second = forward + (back - base);
        worst_curvature = worst_curvature.max(second.abs());
        shots.push(y);
    }

    let count = probes as f64;
    let mean = shots.iter().fold(DenseVector::zeros(m), |acc, y| acc + y) / count;
    let spread: f64 = shots.iter().map(|y| (y - &mean).norm_squared()).sum();
    let sigma = (spread / (m as f64 * (count - 1.0))).sqrt();
    let noise = sigma * (m as f64 / cfg.k as f64).sqrt();

    // bias per entry is second / (2 delta); the vector has norm sqrt(m) times that
    let bias_norm = (m as f64).sqrt() * worst_curvature / (2.0 * delta);
    let k_hat = bias_norm / (2.0 * m as f64 * delta);
    let floor = 2.0 * m as f64 * k_hat * delta;
    Ok(noise.max(floor).max(f64::MIN_POSITIVE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn first_coordinate_squared(n: usize) -> Objective {
        Objective::new(n, |x| x[0] * x[0])
    }

    #[test]
    fn config_validation() {
        assert!(EstimatorConfig::default().validate().is_ok());
        assert!(EstimatorConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(EstimatorConfig { m: 0, ..Default::default() }.validate().is_err());
        assert!(EstimatorConfig { delta: Some(0.0), ..Default::default() }.validate().is_err());
        let bad = EstimatorConfig { residual_tol: ResidualTol::Absolute(-1.0), ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = EstimatorConfig { residual_tol: ResidualTol::Relative(0.3), delta: Some(1e-4), ..Default::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<EstimatorConfig>(&text).unwrap(), cfg);
        let partial: EstimatorConfig = serde_json::from_str(r#"{"m": 10, "residual_tol": {"absolute": 0.5}}"#).unwrap();
        assert_eq!(partial.m, 10);
        assert_eq!(partial.residual_tol, ResidualTol::Absolute(0.5));
    }

    #[test]
    fn constant_function_gives_zero_gradient() {
        let obj = Objective::new(40, |_| 3.0);
        let x = DVector::from_element(40, 0.5);
        let est = estimate_gradient(&obj, &x, &EstimatorConfig { m: 10, k: 5, ..Default::default() }).unwrap();
        assert_eq!(est.g, DVector::zeros(40));
        assert!(est.support.is_empty());
        assert_eq!(est.evals_used, 6);
    }

    #[test]
    fn single_coordinate_gradient_is_recovered() {
        let n = 100;
        let obj = first_coordinate_squared(n);
        let mut x = DVector::zeros(n);
        x[0] = 1.0;
        let cfg = EstimatorConfig { m: 10, k: 50, delta: Some(1e-3), ..Default::default() };
        let tol = calibrate_tolerance(&obj, &x, &cfg, 50).unwrap();
        let cfg = EstimatorConfig { residual_tol: ResidualTol::Absolute(tol), ..cfg };
        let est = estimate_gradient(&obj, &x, &cfg).unwrap();
        let mut truth = DVector::zeros(n);
        truth[0] = 2.0;
        // Averaging k single shots leaves noise with covariance
        // (||c||^2 I + c c^T) / k for c = A g. Projected on the true column
        // the first coordinate has standard deviation sqrt(8 / k) = 0.4, and
        // recovery at the noise level shrinks it further.
        assert!(est.support.contains(&0));
        assert!(est.g[0] > 0.0 && est.g.amax() == est.g[0]);
        let err = (&est.g - &truth).norm() / 2.0;
        assert!(err < 4.0 * 0.4 / 2.0, "relative error {err}");
        assert_eq!(est.evals_used, 51);
    }

    #[test]
    fn recovery_errors_are_wrapped() {
        let obj = Objective::new(30, |x| x.iter().map(|v| v.sin()).sum());
        let x = DVector::from_element(30, 0.1);
        let cfg = EstimatorConfig { m: 5, k: 2, max_steps: Some(1), residual_tol: ResidualTol::Absolute(1e-12), ..Default::default() };
        assert!(matches!(estimate_gradient(&obj, &x, &cfg), Err(Error::RecoveryFailed(_))));
    }

    #[test]
    fn evaluation_failures_propagate() {
        let obj = Objective::fallible(20, |_| Err("boom".into()));
        let x = DVector::zeros(20);
        let cfg = EstimatorConfig { m: 5, k: 2, ..Default::default() };
        assert!(matches!(estimate_gradient(&obj, &x, &cfg), Err(Error::EvaluationFailed(_))));
    }

    #[test]
    fn refit_removes_shrinkage_on_exact_data() {
        let a = gaussian_matrix(10, 30, 2).unwrap();
        let mut g = DVector::zeros(30);
        g[4] = 1.5;
        g[20] = -0.5;
        let y = a.matrix() * &g;
        let fitted = refit_on_support(&a, &y, &[4, 20], 30);
        assert!((&fitted - &g).norm() < 1e-12);
    }

    #[test]
    fn sp_noise_rule_matches_predicted_noise() {
        // The predicted averaging noise should match the realised deviation
        // from A g on average over sign seeds.
        let (n, m, k) = (200, 30, 40);
        let obj = Objective::new(n, |x| x.iter().take(5).map(|v| v * v).sum());
        let x = DVector::from_fn(n, |i, _| if i < 5 { 1.0 + i as f64 } else { 0.0 });
        let a = gaussian_matrix(m, n, 3).unwrap();
        let truth = a.matrix() * DVector::from_fn(n, |i, _| if i < 5 { 2.0 * (1.0 + i as f64) } else { 0.0 });
        let (mut predicted, mut realised) = (0.0, 0.0);
        for seed in 0..200 {
            let batch = sp_measure_averaged(&obj, &x, &a, 1e-6, k, seed).unwrap();
            predicted += ResidualTol::SpNoise(1.0).resolve(&batch, 0.0, false).powi(2);
            realised += (&batch.y_bar - &truth).norm_squared();
        }
        let ratio = (predicted / realised).sqrt();
        assert!((ratio - 1.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn calibration_needs_two_probes() {
        let obj = first_coordinate_squared(10);
        let cfg = EstimatorConfig { m: 3, k: 1, ..Default::default() };
        assert!(calibrate_tolerance(&obj, &DVector::zeros(10), &cfg, 1).is_err());
    }

    #[test]
    fn calibration_on_linear_function_settles_at_averaging_noise() {
        // For linear f the single shots spread only through the cross terms,
        // so the estimate converges to sqrt((m - 1) / k) ||A c||, not to zero.
        let n = 60;
        let c = DVector::from_fn(n, |i, _| if i % 10 == 0 { 1.0 } else { 0.0 });
        let cc = c.clone();
        let obj = Objective::new(n, move |x| cc.dot(x));
        let cfg = EstimatorConfig { m: 12, k: 25, delta: Some(1e-3), ..Default::default() };
        let level = (11.0f64 / 25.0).sqrt() * (cfg.matrix(n).unwrap().matrix() * &c).norm();
        let coarse = calibrate_tolerance(&obj, &DVector::zeros(n), &cfg, 4).unwrap();
        let fine = calibrate_tolerance(&obj, &DVector::zeros(n), &cfg, 4000).unwrap();
        assert!((fine / level - 1.0).abs() < 0.05, "fine {fine}, level {level}");
        assert!((fine / level - 1.0).abs() <= (coarse / level - 1.0).abs() + 0.05);
        assert_eq!(obj.eval_count(), 2 * 4 + 1 + 2 * 4000 + 1);
    }

    #[test]
    fn calibration_scales_linearly_in_delta_at_a_critical_point() {
        let n = 40;
        let obj = Objective::new(n, |x| x.norm_squared());
        let x = DVector::zeros(n);
        let deltas = [1e-2, 1e-3, 1e-4];
        let tols: Vec<f64> = deltas
            .iter()
            .map(|&d| {
                let cfg = EstimatorConfig { m: 8, k: 10, delta: Some(d), ..Default::default() };
                calibrate_tolerance(&obj, &x, &cfg, 20).unwrap()
            })
            .collect();
        // least-squares slope in log-log coordinates
        let lx: Vec<f64> = deltas.iter().map(|d| d.ln()).collect();
        let ly: Vec<f64> = tols.iter().map(|t| t.ln()).collect();
        let (mx, my) = (lx.iter().sum::<f64>() / 3.0, ly.iter().sum::<f64>() / 3.0);
        let slope = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
            / lx.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
        assert!((slope - 1.0).abs() < 1e-6, "slope {slope}");
    }
}
