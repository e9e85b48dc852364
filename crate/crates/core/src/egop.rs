//! Empirical gradient outer products from estimated sparse gradients and
//! the effective dimension-reducing subspace they span.
//!
//! Each sample point gets seeds derived from the master seeds and a key
//! computed from the point's bits, and outer products are accumulated in key
//! order. Reordering the sample list therefore reproduces the estimate
//! bit for bit.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eigen::symmetric_eigen;
use crate::error::{Error, Result};
use crate::estimator::{estimate_gradient, EstimatorConfig};
use crate::measurement::Objective;
use crate::numerics::{derive_seed, seeded_rng, stream, DenseVector};

/// Relative eigenvalue floor below which a direction counts as absent.
pub const RANK_TOL: f64 = 1e-10;

/// Distribution of sample points.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// i.i.d. standard normal coordinates.
    #[default]
    Normal,
    /// i.i.d. uniform coordinates on `[low, high]`.
    UniformCube { low: f64, high: f64 },
    /// Fixed points; the first `r` are used.
    Points(Vec<Vec<f64>>),
}

impl Sampler {
    /// Point `index` of the sequence drawn with `seed`. Points do not depend
    /// on how many are requested, so smaller `r` uses a prefix.
    pub fn point(&self, n: usize, seed: u64, index: usize) -> Result<DenseVector> {
        match self {
            Sampler::Normal => {
                let mut rng = seeded_rng(derive_seed(seed, index as u64), stream::SAMPLES);
                Ok(DVector::from_fn(n, |_, _| rng.sample(StandardNormal)))
            }
            Sampler::UniformCube { low, high } => {
                if !(low < high) {
                    return Err(Error::InvalidParameter(format!("empty cube [{low}, {high}]")));
                }
                let mut rng = seeded_rng(derive_seed(seed, index as u64), stream::SAMPLES);
                Ok(DVector::from_fn(n, |_, _| rng.random_range(*low..*high)))
            }
            Sampler::Points(points) => {
                let p = points.get(index).ok_or_else(|| {
                    Error::InvalidParameter(format!("sampler has {} points, sample {index} requested", points.len()))
                })?;
                if p.len() != n {
                    return Err(Error::InvalidDimensions(format!("point {index} has length {}, expected {n}", p.len())));
                }
                Ok(DVector::from_column_slice(p))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgopEstimate {
    /// Symmetric `n x n` average of gradient outer products.
    pub g_hat: DMatrix<f64>,
    pub r: usize,
    /// Mean number of evaluations per sample point.
    pub per_sample_evals: f64,
    /// Descending, length `n`.
    pub eigenvalues: DVector<f64>,
    /// Orthonormal `n x q` eigenvectors for the leading `q` eigenvalues.
    /// Directions of the zero eigenspace outside the gradients' support are
    /// not materialized.
    pub eigenvectors: DMatrix<f64>,
    /// Sample points in the order they were drawn.
    pub points: Vec<DenseVector>,
}

impl EgopEstimate {
    /// Averages outer products of the given gradient sets (one set per
    /// point, one vector per output) and decomposes the result.
    pub fn from_gradients(n: usize, gradients: &[Vec<DenseVector>], points: Vec<DenseVector>, per_sample_evals: f64) -> Result<Self> {
        let r = gradients.len();
        if r == 0 {
            return Err(Error::InvalidParameter("need at least one sample".into()));
        }
        let columns: Vec<&DenseVector> = gradients.iter().flatten().collect();
        if let Some(g) = columns.iter().find(|g| g.len() != n) {
            return Err(Error::InvalidDimensions(format!("gradient has length {}, expected {n}", g.len())));
        }
        let block = union_support(columns.iter().copied(), n);
        let mut g_hat = DMatrix::zeros(n, n);
        for g in &columns {
            for &i in &block {
                if g[i] == 0.0 {
                    continue;
                }
                for &j in &block {
                    g_hat[(i, j)] += g[i] * g[j];
                }
            }
        }
        g_hat /= r as f64;

        let (eigenvalues, eigenvectors) = if block.len() <= columns.len() {
            decompose_block(&g_hat, &block)?
        } else {
            decompose_by_gram(&columns, &block, n, r)?
        };
        Ok(Self {
            g_hat,
            r,
            per_sample_evals,
            eigenvalues,
            eigenvectors,
            points,
        })
    }

    /// Wraps an already averaged symmetric matrix.
    pub fn from_matrix(g_hat: DMatrix<f64>, r: usize) -> Result<Self> {
        let n = g_hat.nrows();
        let sym = (&g_hat + g_hat.transpose()) * 0.5;
        let asym = (&g_hat - g_hat.transpose()).amax();
        if asym > crate::eigen::SYMMETRY_TOL * g_hat.amax().max(1.0) {
            return Err(Error::NotSymmetric(asym));
        }
        let block: Vec<usize> = (0..n).filter(|&i| sym.row(i).iter().any(|v| *v != 0.0)).collect();
        let (eigenvalues, eigenvectors) = decompose_block(&sym, &block)?;
        Ok(Self {
            g_hat: sym,
            r,
            per_sample_evals: 0.0,
            eigenvalues,
            eigenvectors,
            points: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.g_hat.nrows()
    }
}

fn union_support<'a>(vectors: impl Iterator<Item = &'a DenseVector>, n: usize) -> Vec<usize> {
    let mut used = vec![false; n];
    for g in vectors {
        for (i, v) in g.iter().enumerate() {
            if *v != 0.0 {
                used[i] = true;
            }
        }
    }
    (0..n).filter(|&i| used[i]).collect()
}

/// Jacobi on the rows and columns in `block`, embedded in `n` dimensions.
fn decompose_block(g: &DMatrix<f64>, block: &[usize]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = g.nrows();
    let b = block.len();
    let sub = DMatrix::from_fn(b, b, |i, j| g[(block[i], block[j])]);
    let eig = symmetric_eigen(&sub)?;
    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, b);
    for c in 0..b {
        values[c] = eig.values[c];
        for (row, &i) in block.iter().enumerate() {
            vectors[(i, c)] = eig.vectors[(row, c)];
        }
    }
    // the block's negative eigenvalues (rounding) belong after the zeros
    let negatives = (0..b).filter(|&c| values[c] < 0.0).count();
    if negatives > 0 {
        let keep = b - negatives;
        let tail: Vec<f64> = (keep..b).map(|c| values[c]).collect();
        for c in keep..n {
            values[c] = 0.0;
        }
        for (offset, v) in tail.iter().enumerate() {
            values[n - negatives + offset] = *v;
        }
        vectors = vectors.columns(0, keep).into_owned();
    }
    Ok((values, vectors))
}

/// Eigenpairs of `W W^T / r` from the small Gram matrix `W^T W / r`.
fn decompose_by_gram(columns: &[&DenseVector], block: &[usize], n: usize, r: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = columns.len();
    let w = DMatrix::from_fn(block.len(), p, |i, j| columns[j][block[i]]);
    let gram = w.tr_mul(&w) / r as f64;
    let eig = symmetric_eigen(&gram)?;
    let top = eig.values[0].max(0.0);
    let mut values = DVector::zeros(n);
    let mut kept: Vec<DenseVector> = Vec::new();
    for c in 0..p {
        let lambda = eig.values[c];
        if !(lambda > RANK_TOL * top) {
            break;
        }
        let mut u = &w * eig.vectors.column(c);
        // re-orthogonalize against earlier vectors to absorb rounding
        for prev in &kept {
            let proj = prev.dot(&u);
            u -= prev * proj;
        }
        let norm = u.norm();
        if norm == 0.0 {
            break;
        }
        values[kept.len()] = lambda;
        kept.push(u / norm);
    }
    let mut vectors = DMatrix::zeros(n, kept.len());
    for (c, u) in kept.iter().enumerate() {
        for (row, &i) in block.iter().enumerate() {
            vectors[(i, c)] = u[row];
        }
    }
    Ok((values, vectors))
}

fn point_key(x: &DenseVector) -> u64 {
    x.iter().fold(0x5EED, |acc, v| derive_seed(acc, v.to_bits()))
}

/// Estimates `(1/r) sum_i sum_j g_j(x_i) g_j(x_i)^T` where `g_j` is the
/// estimated gradient of output `j` at sample `x_i`.
pub fn egop_estimate(
    outputs: &[Objective],
    sampler: &Sampler,
    r: usize,
    cfg: &EstimatorConfig,
    sample_seed: u64,
) -> Result<EgopEstimate> {
    if r == 0 {
        return Err(Error::InvalidParameter("r must be at least 1".into()));
    }
    let n = match outputs.first() {
        Some(obj) => obj.dim(),
        None => return Err(Error::InvalidParameter("need at least one output".into())),
    };
    if outputs.iter().any(|o| o.dim() != n) {
        return Err(Error::InvalidDimensions("outputs have different dimensions".into()));
    }
    cfg.validate()?;
    let points = (0..r).map(|i| sampler.point(n, sample_seed, i)).collect::<Result<Vec<_>>>()?;
    let before: u64 = outputs.iter().map(|o| o.eval_count()).sum();

    let estimate_at = |(index, x): (usize, &DenseVector)| -> Result<(u64, Vec<DenseVector>)> {
        let key = point_key(x);
        let mut grads = Vec::with_capacity(outputs.len());
        for (j, obj) in outputs.iter().enumerate() {
            let local = EstimatorConfig {
                matrix_seed: derive_seed(cfg.matrix_seed, key),
                sign_seed: derive_seed(derive_seed(cfg.sign_seed, key), j as u64),
                ..cfg.clone()
            };
            let est = estimate_gradient(obj, x, &local).map_err(|e| Error::Sample { index, source: Box::new(e) })?;
            grads.push(est.g);
        }
        Ok((key, grads))
    };
    // noisy objectives share a noise stream, so only reentrant ones run in parallel
    let results: Vec<(u64, Vec<DenseVector>)> = if outputs.iter().any(|o| o.is_noisy()) {
        points.iter().enumerate().map(estimate_at).collect::<Result<_>>()?
    } else {
        points.par_iter().enumerate().map(estimate_at).collect::<Result<_>>()?
    };

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by_key(|&i| (results[i].0, i));
    let gradients: Vec<Vec<DenseVector>> = order.iter().map(|&i| results[i].1.clone()).collect();
    let after: u64 = outputs.iter().map(|o| o.eval_count()).sum();
    EgopEstimate::from_gradients(n, &gradients, points, (after - before) as f64 / r as f64)
}

/// An orthonormal basis stored as the columns of an `n x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    basis: DMatrix<f64>,
}

impl Subspace {
    /// Accepts columns that are orthonormal within `1e-10`.
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        let d = basis.ncols();
        if d == 0 || basis.nrows() < d {
            return Err(Error::InvalidDimensions(format!("basis is {}x{}", basis.nrows(), d)));
        }
        let gram = basis.tr_mul(&basis);
        let dev = (gram - DMatrix::identity(d, d)).amax();
        if dev > 1e-10 {
            return Err(Error::InvalidParameter(format!("basis is not orthonormal (deviation {dev:.3e})")));
        }
        Ok(Self { basis })
    }

    /// Orthonormal basis of the span of the given columns.
    pub fn span_of(columns: &DMatrix<f64>) -> Result<Self> {
        let d = columns.ncols();
        let qr = columns.clone().qr();
        let r = qr.r();
        let scale = r.diagonal().amax();
        if (0..d).any(|i| r[(i, i)].abs() <= RANK_TOL * scale) {
            return Err(Error::RankDeficient { requested: d, rank: (0..d).filter(|&i| r[(i, i)].abs() > RANK_TOL * scale).count() });
        }
        Self::new(qr.q())
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient(&self) -> usize {
        self.basis.nrows()
    }
}

/// The top `d` eigenvectors. Fails with `RankDeficient` when eigenvalue `d`
/// is at most `1e-10` times the largest.
pub fn edr_subspace(e: &EgopEstimate, d: usize) -> Result<Subspace> {
    let n = e.n();
    if d == 0 || d > n {
        return Err(Error::InvalidParameter(format!("need 1 <= d <= n, got d={d}, n={n}")));
    }
    let top = e.eigenvalues[0];
    let rank = e.eigenvalues.iter().take_while(|&&v| v > RANK_TOL * top && top > 0.0).count().min(e.eigenvectors.ncols());
    if d > rank {
        return Err(Error::RankDeficient { requested: d, rank });
    }
    Subspace::new(e.eigenvectors.columns(0, d).into_owned())
}

/// Sine of the largest principal angle between equal-dimensional subspaces.
pub fn subspace_distance(u: &Subspace, v: &Subspace) -> Result<f64> {
    if u.ambient() != v.ambient() || u.dim() != v.dim() {
        return Err(Error::InvalidDimensions(format!(
            "subspaces {}x{} and {}x{}",
            u.ambient(),
            u.dim(),
            v.ambient(),
            v.dim()
        )));
    }
    let cross = u.basis.tr_mul(&v.basis);
    let sigma_min = cross.singular_values().min().clamp(0.0, 1.0);
    Ok((1.0 - sigma_min * sigma_min).max(0.0).sqrt())
}
