//! Test functions with sparse gradients and known analytic derivatives.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{central_fd, Objective};
use crate::numerics::{seeded_rng, stream, DenseVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionSpec {
    /// `x_1^2 + ... + x_s^2`.
    SumOfSquares { n: usize, s: usize },
    /// `x^T M M^T x` with `M` an `n x 3` matrix whose `s` nonzero rows hold
    /// random ±1 entries.
    QuadMmt { n: usize, s: usize, seed: u64 },
    /// `||M1^T x||^6 + ||M2^T x||^4 + <M1^T x, M2^T x>` with `n x 3`
    /// matrices sharing `s` nonzero rows of random ±1 entries.
    Coupled { n: usize, s: usize, seed: u64 },
    /// Vector-valued: output `i` is `(m_i^T x)^2` where each `m_i` has
    /// `nonzeros` random ±1 entries.
    QuadVector { n: usize, outputs: usize, nonzeros: usize, seed: u64 },
}

impl FunctionSpec {
    /// Builds a spec from a family name as used on the command line.
    pub fn from_name(family: &str, n: usize, s: usize, seed: u64) -> Result<Self> {
        match family {
            "sum_of_squares" => Ok(FunctionSpec::SumOfSquares { n, s }),
            "quad_mmt" => Ok(FunctionSpec::QuadMmt { n, s, seed }),
            "coupled" => Ok(FunctionSpec::Coupled { n, s, seed }),
            "quad_vector" => Ok(FunctionSpec::QuadVector { n, outputs: 3, nonzeros: s, seed }),
            other => Err(Error::UnknownFunction(other.to_string())),
        }
    }

    /// The same family with sparsity `s` (nonzeros per output for the
    /// vector family).
    pub fn with_sparsity(&self, s: usize) -> Self {
        let mut spec = self.clone();
        match &mut spec {
            FunctionSpec::SumOfSquares { s: v, .. } | FunctionSpec::QuadMmt { s: v, .. } | FunctionSpec::Coupled { s: v, .. } => *v = s,
            FunctionSpec::QuadVector { nonzeros, .. } => *nonzeros = s,
        }
        spec
    }

    /// The same family with a different random seed (no-op for the
    /// deterministic family).
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut spec = self.clone();
        match &mut spec {
            FunctionSpec::SumOfSquares { .. } => {}
            FunctionSpec::QuadMmt { seed: v, .. } | FunctionSpec::Coupled { seed: v, .. } | FunctionSpec::QuadVector { seed: v, .. } => *v = seed,
        }
        spec
    }

    pub fn n(&self) -> usize {
        match *self {
            FunctionSpec::SumOfSquares { n, .. }
            | FunctionSpec::QuadMmt { n, .. }
            | FunctionSpec::Coupled { n, .. }
            | FunctionSpec::QuadVector { n, .. } => n,
        }
    }
}

/// Rows `rows` of a sparse `n x 3` matrix; `block[r]` is row `rows[r]`.
#[derive(Debug, Clone, PartialEq)]
struct SparseRows {
    rows: Vec<usize>,
    block: Vec<[f64; 3]>,
}

impl SparseRows {
    /// `M^T x`.
    fn project(&self, x: &DenseVector) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (r, &i) in self.rows.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.block[r]) {
                *o += w * x[i];
            }
        }
        out
    }

    /// Adds `scale * M v` into `g`.
    fn add_lift(&self, v: [f64; 3], scale: f64, g: &mut DenseVector) {
        for (r, &i) in self.rows.iter().enumerate() {
            let row = &self.block[r];
            g[i] += scale * (row[0] * v[0] + row[1] * v[1] + row[2] * v[2]);
        }
    }
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sign<R: Rng>(rng: &mut R) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    SumOfSquares { s: usize },
    QuadMmt(SparseRows),
    Coupled { m1: SparseRows, m2: SparseRows },
    QuadVector(Vec<Vec<(usize, f64)>>),
}

impl Kind {
    fn outputs(&self) -> usize {
        match self {
            Kind::QuadVector(v) => v.len(),
            _ => 1,
        }
    }

    fn value(&self, output: usize, x: &DenseVector) -> f64 {
        match self {
            Kind::SumOfSquares { s } => x.iter().take(*s).map(|v| v * v).sum(),
            Kind::QuadMmt(m) => {
                let p = m.project(x);
                dot3(p, p)
            }
            Kind::Coupled { m1, m2 } => {
                let (u, v) = (m1.project(x), m2.project(x));
                dot3(u, u).powi(3) + dot3(v, v).powi(2) + dot3(u, v)
            }
            Kind::QuadVector(rows) => {
                let t: f64 = rows[output].iter().map(|&(i, w)| w * x[i]).sum();
                t * t
            }
        }
    }

    fn gradient(&self, output: usize, x: &DenseVector) -> DenseVector {
        let mut g = DVector::zeros(x.len());
        match self {
            Kind::SumOfSquares { s } => {
                for i in 0..*s {
                    g[i] = 2.0 * x[i];
                }
            }
            Kind::QuadMmt(m) => m.add_lift(m.project(x), 2.0, &mut g),
            Kind::Coupled { m1, m2 } => {
                let (u, v) = (m1.project(x), m2.project(x));
                let (uu, vv) = (dot3(u, u), dot3(v, v));
                m1.add_lift(u, 6.0 * uu * uu, &mut g);
                m2.add_lift(v, 4.0 * vv, &mut g);
                m1.add_lift(v, 1.0, &mut g);
                m2.add_lift(u, 1.0, &mut g);
            }
            Kind::QuadVector(rows) => {
                let t: f64 = rows[output].iter().map(|&(i, w)| w * x[i]).sum();
                for &(i, w) in &rows[output] {
                    g[i] += 2.0 * t * w;
                }
            }
        }
        g
    }
}

/// A zoo function with analytic gradients. Vector-valued functions are
/// scalarized by summing their outputs in [`TestFunction::value`] and
/// [`TestFunction::gradient`].
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub name: String,
    pub spec: FunctionSpec,
    pub n: usize,
    /// Indices where the gradient can be nonzero.
    pub support: Vec<usize>,
    /// Known minimum value, when there is one.
    pub minimum: Option<f64>,
    kind: Arc<Kind>,
}

impl TestFunction {
    pub fn outputs(&self) -> usize {
        self.kind.outputs()
    }

    pub fn value(&self, x: &DenseVector) -> f64 {
        (0..self.outputs()).map(|o| self.kind.value(o, x)).sum()
    }

    pub fn gradient(&self, x: &DenseVector) -> DenseVector {
        (0..self.outputs()).fold(DVector::zeros(self.n), |acc, o| acc + self.kind.gradient(o, x))
    }

    pub fn output_value(&self, output: usize, x: &DenseVector) -> f64 {
        self.kind.value(output, x)
    }

    pub fn output_gradient(&self, output: usize, x: &DenseVector) -> DenseVector {
        self.kind.gradient(output, x)
    }

    /// A counted objective for the (scalarized) function.
    pub fn objective(&self) -> Objective {
        let kind = Arc::clone(&self.kind);
        let outputs = self.outputs();
        Objective::new(self.n, move |x| (0..outputs).map(|o| kind.value(o, x)).sum())
    }

    /// One counted objective per output.
    pub fn output_objectives(&self) -> Vec<Objective> {
        (0..self.outputs())
            .map(|o| {
                let kind = Arc::clone(&self.kind);
                Objective::new(self.n, move |x| kind.value(o, x))
            })
            .collect()
    }

    /// `E[sum_j grad f_j(x) grad f_j(x)^T]` for `x ~ N(0, I)`, when it has a
    /// closed form (all quadratic families).
    pub fn population_egop(&self) -> Option<DMatrix<f64>> {
        let n = self.n;
        match &*self.kind {
            Kind::SumOfSquares { s } => Some(DMatrix::from_fn(n, n, |i, j| if i == j && i < *s { 4.0 } else { 0.0 })),
            Kind::QuadMmt(_) => {
                // grad = 2 B x with B = M M^T, so the expectation is 4 B^2
                let b = DMatrix::from_fn(n, n, |i, j| 0.5 * self.kind.gradient(0, &DVector::from_fn(n, |k, _| if k == j { 1.0 } else { 0.0 }))[i]);
                Some(4.0 * &b * &b)
            }
            Kind::Coupled { .. } => None,
            Kind::QuadVector(rows) => {
                // grad f_i = 2 m_i m_i^T x, so the expectation is 4 ||m_i||^2 m_i m_i^T
                let mut g = DMatrix::zeros(n, n);
                for row in rows {
                    let norm_sq: f64 = row.iter().map(|(_, w)| w * w).sum();
                    for &(a, wa) in row {
                        for &(b, wb) in row {
                            g[(a, b)] += 4.0 * norm_sq * wa * wb;
                        }
                    }
                }
                Some(g)
            }
        }
    }

    /// Directions the function depends on, as columns: the span of the
    /// e.d.r. subspace for the vector-valued family.
    pub fn relevant_directions(&self) -> DMatrix<f64> {
        match &*self.kind {
            Kind::QuadVector(rows) => DMatrix::from_fn(self.n, rows.len(), |i, c| {
                rows[c].iter().find(|(j, _)| *j == i).map_or(0.0, |(_, w)| *w)
            }),
            _ => DMatrix::from_fn(self.n, self.support.len(), |i, c| if self.support[c] == i { 1.0 } else { 0.0 }),
        }
    }
}

fn sparse_rows<R: Rng>(rng: &mut R, rows: &[usize]) -> SparseRows {
    SparseRows {
        rows: rows.to_vec(),
        block: rows.iter().map(|_| [sign(rng), sign(rng), sign(rng)]).collect(),
    }
}

fn sorted_sample<R: Rng>(rng: &mut R, n: usize, s: usize) -> Vec<usize> {
    let mut rows = sample(rng, n, s).into_vec();
    rows.sort_unstable();
    rows
}

/// Builds the function and checks its analytic gradient against central
/// differences at two random points.
pub fn make_function(spec: &FunctionSpec) -> Result<TestFunction> {
    let n = spec.n();
    if n == 0 {
        return Err(Error::InvalidDimensions("dimension must be positive".into()));
    }
    let check_s = |s: usize| {
        if s == 0 || s > n {
            Err(Error::InvalidDimensions(format!("need 1 <= s <= n, got s={s}, n={n}")))
        } else {
            Ok(())
        }
    };
    let (name, kind, support, minimum) = match *spec {
        FunctionSpec::SumOfSquares { s, .. } => {
            check_s(s)?;
            ("sum_of_squares", Kind::SumOfSquares { s }, (0..s).collect(), Some(0.0))
        }
        FunctionSpec::QuadMmt { s, seed, .. } => {
            check_s(s)?;
            let mut rng = seeded_rng(seed, stream::FUNCTION);
            let rows = sorted_sample(&mut rng, n, s);
            ("quad_mmt", Kind::QuadMmt(sparse_rows(&mut rng, &rows)), rows, Some(0.0))
        }
        FunctionSpec::Coupled { s, seed, .. } => {
            check_s(s)?;
            let mut rng = seeded_rng(seed, stream::FUNCTION);
            let rows = sorted_sample(&mut rng, n, s);
            let m1 = sparse_rows(&mut rng, &rows);
            let m2 = sparse_rows(&mut rng, &rows);
            ("coupled", Kind::Coupled { m1, m2 }, rows, None)
        }
        FunctionSpec::QuadVector { outputs, nonzeros, seed, .. } => {
            check_s(nonzeros)?;
            if outputs == 0 {
                return Err(Error::InvalidParameter("need at least one output".into()));
            }
            let mut rng = seeded_rng(seed, stream::FUNCTION);
            let vectors: Vec<Vec<(usize, f64)>> = (0..outputs)
                .map(|_| sorted_sample(&mut rng, n, nonzeros).into_iter().map(|i| (i, sign(&mut rng))).collect())
                .collect();
            let mut support: Vec<usize> = vectors.iter().flatten().map(|(i, _)| *i).collect();
            support.sort_unstable();
            support.dedup();
            ("quad_vector", Kind::QuadVector(vectors), support, Some(0.0))
        }
    };
    let f = TestFunction {
        name: name.to_string(),
        spec: spec.clone(),
        n,
        support,
        minimum,
        kind: Arc::new(kind),
    };
    self_check(&f)?;
    Ok(f)
}

fn self_check(f: &TestFunction) -> Result<()> {
    let mut rng = seeded_rng(0x5E1F, stream::FUNCTION);
    for _ in 0..2 {
        let x = DVector::from_fn(f.n, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
        for (o, obj) in f.output_objectives().iter().enumerate() {
            let fd = central_fd(obj, &x, 1e-4)?;
            let exact = f.output_gradient(o, &x);
            let gap = (&fd - &exact).amax();
            if gap > 1e-5 * (1.0 + exact.amax()) {
                return Err(Error::InvalidParameter(format!(
                    "{}: analytic gradient disagrees with central differences by {gap:.3e}",
                    f.name
                )));
            }
        }
    }
    Ok(())
}
