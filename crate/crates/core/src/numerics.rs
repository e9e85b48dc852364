//! Seeded random generation and small dense helpers shared by every module.
//!
//! All randomness flows through [`ChaCha8Rng`] seeded from a 64-bit integer.
//! Independent streams for the same seed are selected with
//! [`ChaCha8Rng::set_stream`], so a single user seed can feed matrix draws,
//! perturbation signs and sample points without overlap. Gaussian variates use
//! the ziggurat sampler from `rand_distr::StandardNormal`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type DenseVector = DVector<f64>;

/// Stream identifiers, one per consumer of randomness.
pub mod stream {
    pub const MATRIX: u64 = 1;
    pub const SIGNS: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const SAMPLES: u64 = 4;
    pub const FUNCTION: u64 = 5;
    pub const PERTURBATION: u64 = 6;
    pub const START: u64 = 7;
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer; turns `(seed, index)` pairs into well-separated seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// An `m x n` matrix with i.i.d. N(0, 1) entries. Row `i` is the direction
/// `a_i` used both as an SP probe and as a compressive measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMatrix {
    matrix: DMatrix<f64>,
    seed: u64,
}

impl MeasurementMatrix {
    /// Wraps an existing matrix. Used by tests and permutation checks; the
    /// recorded seed is informational only.
    pub fn from_matrix(matrix: DMatrix<f64>, seed: u64) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::InvalidDimensions("empty measurement matrix".into()));
        }
        check_finite(matrix.as_slice())?;
        Ok(Self { matrix, seed })
    }

    pub fn m(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> DenseVector {
        self.matrix.row(i).transpose()
    }
}

/// Draws an `m x n` standard Gaussian matrix. Requires `0 < m < n`.
pub fn gaussian_matrix(m: usize, n: usize, seed: u64) -> Result<MeasurementMatrix> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidDimensions(format!("m={m}, n={n} must be positive")));
    }
    if m >= n {
        return Err(Error::InvalidDimensions(format!(
            "measurement count m={m} must be smaller than dimension n={n}"
        )));
    }
    let mut rng = seeded_rng(seed, stream::MATRIX);
    let matrix = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(MeasurementMatrix { matrix, seed })
}

/// A vector of independent fair ±1 signs.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSigns(Vec<f64>);

impl PerturbationSigns {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, m: usize) -> Self {
        Self((0..m).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect())
    }

    pub fn from_signs(signs: Vec<f64>) -> Result<Self> {
        if signs.is_empty() {
            return Err(Error::InvalidDimensions("empty sign vector".into()));
        }
        if let Some(i) = signs.iter().position(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::InvalidParameter(format!("sign {i} is {} (must be ±1)", signs[i])));
        }
        Ok(Self(signs))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_vector(&self) -> DenseVector {
        DVector::from_column_slice(&self.0)
    }
}

pub fn rademacher_signs(m: usize, seed: u64) -> Result<PerturbationSigns> {
    if m == 0 {
        return Err(Error::InvalidDimensions("sign count must be positive".into()));
    }
    let mut rng = seeded_rng(seed, stream::SIGNS);
    Ok(PerturbationSigns::draw(&mut rng, m))
}

/// Keeps the `s` largest-magnitude entries of `x` and returns them with the
/// norm of the discarded part, which is the sparsity defect `sigma_s(x)`.
/// Ties go to the lower index.
pub fn best_s_sparse(x: &DenseVector, s: usize) -> (DenseVector, f64) {
    let n = x.len();
    let s = s.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps index order among equal magnitudes
    order.sort_by(|&i, &j| x[j].abs().total_cmp(&x[i].abs()));
    let mut kept = DVector::zeros(n);
    for &i in &order[..s] {
        kept[i] = x[i];
    }
    let defect = order[s..].iter().map(|&i| x[i] * x[i]).sum::<f64>().sqrt();
    (kept, defect)
}

/// Indices of nonzero entries, ascending.
pub fn support(x: &DenseVector) -> Vec<usize> {
    x.iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// `||x - y|| / ||y||`, or the absolute error when `y` is zero.
pub fn relative_error(estimate: &DenseVector, truth: &DenseVector) -> f64 {
    let err = (estimate - truth).norm();
    let scale = truth.norm();
    if scale > 0.0 {
        err / scale
    } else {
        err
    }
}
