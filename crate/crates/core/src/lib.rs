//! Sparse gradient estimation for expensive black-box functions.
//!
//! Simultaneous-perturbation measurements `y ≈ A ∇f(x)` are taken with a
//! Gaussian `m x n` matrix, `m << n`, and the gradient is recovered by
//! basis pursuit denoising along a homotopy path. On top of the estimator
//! sit expected-gradient-outer-product subspace learning and three descent
//! methods.
//!
//! ```
//! use sparsegrad::{estimate_gradient, make_function, EstimatorConfig, FunctionSpec};
//! use nalgebra::DVector;
//!
//! let f = make_function(&FunctionSpec::SumOfSquares { n: 200, s: 3 }).unwrap();
//! let x = DVector::from_element(200, 1.0);
//! let cfg = EstimatorConfig { m: 20, k: 200, ..Default::default() };
//! let est = estimate_gradient(&f.objective(), &x, &cfg).unwrap();
//! assert!(est.support.contains(&0));
//! ```

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advisor;
pub mod descent;
pub mod egop;
pub mod eigen;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod homotopy;
pub mod measurement;
pub mod numerics;
pub mod zoo;

pub use advisor::{advise, min_measurements, min_repetitions, AdvisorInputs, AdvisorReport};
pub use descent::{
    adaptive_run, exact_run, kiefer_wolfowitz_run, nesterov_run, sgd_run, DescentRecord, DescentTrace, NesterovState,
    StepSchedule, StopReason, StopRule,
};
pub use egop::{edr_subspace, egop_estimate, subspace_distance, EgopEstimate, Sampler, Subspace};
pub use eigen::{symmetric_eigen, SymmetricEigen};
pub use error::{Error, Result};
pub use estimator::{calibrate_tolerance, estimate_gradient, EstimatorConfig, GradientEstimate, ResidualTol};
pub use experiment::{run_experiment, ExperimentConfig, OutputFormat, ResultRow, RunOptions};
pub use homotopy::{kkt_check, solve_bpdn, solve_bpdn_warm, SolverOptions, SparseSolution};
pub use measurement::{central_fd, naive_sp_estimate, sp_measure_averaged, sp_measure_once, MeasurementBatch, NoiseModel, Objective};
pub use numerics::{gaussian_matrix, rademacher_signs, DenseVector, MeasurementMatrix, PerturbationSigns};
pub use zoo::{make_function, FunctionSpec, TestFunction};
