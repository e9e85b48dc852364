use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;

use sparsegrad::descent::{run_with_source, AdaptiveEstimator, CentralDifference, ExactGradient, Momentum, SpEstimator};
use sparsegrad::experiment::write_rows;
use sparsegrad::numerics::relative_error;
use sparsegrad::{
    advise, edr_subspace, egop_estimate, estimate_gradient, make_function, run_experiment, subspace_distance, AdvisorInputs,
    DenseVector, Error, EstimatorConfig, ExperimentConfig, FunctionSpec, Objective, OutputFormat, ResidualTol, RunOptions,
    Sampler, StepSchedule, StopRule, Subspace,
};

#[derive(Parser)]
#[command(name = "sparsegrad", version, about = "Sparse gradient estimation from simultaneous perturbations")]
struct Cli {
    /// Master seed for matrices, signs and sample points.
    #[arg(long, global = true, env = "SPARSEGRAD_SEED", default_value_t = 0)]
    seed: u64,
    /// Output file (standard output when omitted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Jsonl => OutputFormat::Jsonl,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Estimate one gradient.
    Estimate(EstimateArgs),
    /// Estimate the gradient outer product and its leading subspace.
    Egop(EgopArgs),
    /// Run an optimizer and write its trace.
    Optimize(OptimizeArgs),
    /// Run an experiment from a JSON config.
    Bench(BenchArgs),
    /// Minimum measurements and repetitions for a target accuracy.
    Advise(AdviseArgs),
}

#[derive(Args)]
struct FunctionArgs {
    /// sum_of_squares, quad_mmt, coupled or quad_vector.
    #[arg(long, default_value = "sum_of_squares")]
    function: String,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Sparsity (nonzeros per output for quad_vector).
    #[arg(long, default_value_t = 3)]
    s: usize,
}

impl FunctionArgs {
    fn spec(&self, seed: u64) -> sparsegrad::Result<FunctionSpec> {
        FunctionSpec::from_name(&self.function, self.n, self.s, seed)
    }
}

#[derive(Args)]
struct EstimatorArgs {
    #[arg(long, default_value_t = 50)]
    m: usize,
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// SP step; defaults to 1e-3 (1 + ||x||).
    #[arg(long)]
    delta: Option<f64>,
    /// Residual bound as a multiple of the predicted measurement noise.
    #[arg(long, conflicts_with_all = ["tol_relative", "tol_absolute"])]
    tol_factor: Option<f64>,
    /// Residual bound as a fraction of ||y||.
    #[arg(long)]
    tol_relative: Option<f64>,
    #[arg(long)]
    tol_absolute: Option<f64>,
    /// Least-squares refit on the recovered support.
    #[arg(long)]
    refit: bool,
}

impl EstimatorArgs {
    fn config(&self, seed: u64) -> EstimatorConfig {
        let residual_tol = match (self.tol_factor, self.tol_relative, self.tol_absolute) {
            (_, Some(r), _) => ResidualTol::Relative(r),
            (_, _, Some(a)) => ResidualTol::Absolute(a),
            (Some(f), _, _) => ResidualTol::SpNoise(f),
            _ => ResidualTol::default(),
        };
        EstimatorConfig {
            m: self.m,
            k: self.k,
            delta: self.delta,
            residual_tol,
            matrix_seed: sparsegrad::numerics::derive_seed(seed, 1),
            sign_seed: sparsegrad::numerics::derive_seed(seed, 2),
            refit: self.refit,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    function: FunctionArgs,
    #[command(flatten)]
    estimator: EstimatorArgs,
    /// Evaluate at this constant point instead of (1, ..., 1).
    #[arg(long, default_value_t = 1.0)]
    at: f64,
    /// External objective program (reads x on stdin, prints f).
    #[arg(long, requires = "dim")]
    external: Option<PathBuf>,
    /// Dimension of the external objective.
    #[arg(long)]
    dim: Option<usize>,
    /// Arguments passed to the external program.
    #[arg(last = true)]
    external_args: Vec<String>,
}

#[derive(Args)]
struct EgopArgs {
    #[command(flatten)]
    function: FunctionArgs,
    #[command(flatten)]
    estimator: EstimatorArgs,
    /// Number of sample points.
    #[arg(long, default_value_t = 10)]
    r: usize,
    /// Subspace dimension (defaults to the number of relevant directions).
    #[arg(long)]
    d: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptMethod {
    Sgd,
    Nesterov,
    Adaptive,
    Kw,
    Exact,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long, value_enum, default_value_t = OptMethod::Sgd)]
    method: OptMethod,
    #[command(flatten)]
    function: FunctionArgs,
    #[command(flatten)]
    estimator: EstimatorArgs,
    #[arg(long, default_value_t = 0.01)]
    a0: f64,
    #[arg(long, default_value_t = 100.0)]
    n0: f64,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    /// Evaluation budget.
    #[arg(long)]
    budget: Option<u64>,
    /// Relative gradient-norm stopping tolerance.
    #[arg(long)]
    g_tol: Option<f64>,
    /// Homotopy breakpoints per iteration for the adaptive method.
    #[arg(long, default_value_t = 2)]
    inner_steps: usize,
    /// Central-difference step for kw.
    #[arg(long, default_value_t = 1e-4)]
    kw_delta: f64,
    /// Starting value on the function's support (zero elsewhere).
    #[arg(long, default_value_t = 0.4)]
    start: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON experiment config.
    config: PathBuf,
    /// Concurrent cells (all cores by default).
    #[arg(long)]
    jobs: Option<usize>,
    /// Report zero wall times so repeated runs are byte-identical.
    #[arg(long)]
    no_wall_time: bool,
}

#[derive(Args)]
struct AdviseArgs {
    #[arg(long)]
    s: usize,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    eps: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Bound on |<grad f, a_i>|.
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    /// Curvature constant of the measurement bias.
    #[arg(long, default_value_t = 1.0)]
    k_const: f64,
    #[arg(long, default_value_t = 1e-3)]
    delta: f64,
    /// Residual bound; defaults to 2 m K delta.
    #[arg(long)]
    t: Option<f64>,
}

#[derive(Serialize)]
struct EstimateRow {
    function: String,
    n: usize,
    m: usize,
    k: usize,
    evals: u64,
    support_size: usize,
    relative_error: Option<f64>,
    residual_norm: f64,
    residual_tol: f64,
    support: String,
}

#[derive(Serialize)]
struct EgopRow {
    function: String,
    n: usize,
    r: usize,
    d: usize,
    evals_per_sample: f64,
    egop_error: Option<f64>,
    edr_distance: f64,
    top_eigenvalues: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn output(cli: &Cli, fallback: Option<&PathBuf>) -> sparsegrad::Result<Box<dyn Write>> {
    Ok(match cli.out.as_ref().or(fallback) {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn emit<T: Serialize>(rows: &[T], format: Format, mut w: impl Write) -> sparsegrad::Result<()> {
    match format {
        Format::Csv => {
            let mut csv = csv::Writer::from_writer(w);
            for row in rows {
                csv.serialize(row)?;
            }
            csv.flush()?;
        }
        Format::Jsonl => {
            for row in rows {
                serde_json::to_writer(&mut w, row)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn run(cli: &Cli) -> sparsegrad::Result<()> {
    match &cli.command {
        Command::Estimate(args) => estimate(cli, args),
        Command::Egop(args) => egop(cli, args),
        Command::Optimize(args) => optimize(cli, args),
        Command::Bench(args) => {
            let config = ExperimentConfig::load(&args.config)?;
            let opts = RunOptions { jobs: args.jobs, wall_time: !args.no_wall_time };
            let rows = run_experiment(&config, &opts)?;
            let out = output(cli, config.output.as_ref())?;
            write_rows(&rows, cli.format.into(), out)
        }
        Command::Advise(args) => {
            let report = advise(&AdvisorInputs {
                s: args.s,
                n: args.n,
                epsilon: args.eps,
                tau: args.tau,
                c: args.c,
                k_const: args.k_const,
                delta: args.delta,
                t: args.t,
            })?;
            emit(&[report], cli.format, output(cli, None)?)
        }
    }
}

fn estimate(cli: &Cli, args: &EstimateArgs) -> sparsegrad::Result<()> {
    let cfg = args.estimator.config(cli.seed);
    let (name, obj, truth_fn): (String, Objective, Option<sparsegrad::TestFunction>) = match &args.external {
        Some(program) => {
            let dim = args.dim.expect("clap enforces --dim");
            (program.display().to_string(), Objective::external(dim, program, args.external_args.clone()), None)
        }
        None => {
            let f = make_function(&args.function.spec(cli.seed)?)?;
            (f.name.clone(), f.objective(), Some(f))
        }
    };
    if obj.dim() <= cfg.m {
        return Err(Error::Config(format!("need m < n, got m={} n={}", cfg.m, obj.dim())));
    }
    let x = DVector::from_element(obj.dim(), args.at);
    let est = estimate_gradient(&obj, &x, &cfg)?;
    let row = EstimateRow {
        function: name,
        n: obj.dim(),
        m: cfg.m,
        k: cfg.k,
        evals: est.evals_used,
        support_size: est.support.len(),
        relative_error: truth_fn.map(|f| relative_error(&est.g, &f.gradient(&x))),
        residual_norm: est.residual_norm,
        residual_tol: est.residual_tol,
        support: join(&est.support),
    };
    emit(&[row], cli.format, output(cli, None)?)
}

fn egop(cli: &Cli, args: &EgopArgs) -> sparsegrad::Result<()> {
    let cfg = args.estimator.config(cli.seed);
    let f = make_function(&args.function.spec(cli.seed)?)?;
    if f.n <= cfg.m {
        return Err(Error::Config(format!("need m < n, got m={} n={}", cfg.m, f.n)));
    }
    let est = egop_estimate(&f.output_objectives(), &Sampler::Normal, args.r, &cfg, sparsegrad::numerics::derive_seed(cli.seed, 4))?;
    let truth = Subspace::span_of(&f.relevant_directions())?;
    let d = args.d.unwrap_or(truth.dim());
    let row = EgopRow {
        function: f.name.clone(),
        n: f.n,
        r: args.r,
        d,
        evals_per_sample: est.per_sample_evals,
        egop_error: f.population_egop().map(|g| (&g - &est.g_hat).norm()),
        edr_distance: subspace_distance(&edr_subspace(&est, d)?, &truth)?,
        top_eigenvalues: join(est.eigenvalues.iter().take(d + 1)),
    };
    emit(&[row], cli.format, output(cli, None)?)
}

fn optimize(cli: &Cli, args: &OptimizeArgs) -> sparsegrad::Result<()> {
    let cfg = args.estimator.config(cli.seed);
    let f = make_function(&args.function.spec(cli.seed)?)?;
    let obj = f.objective();
    let mut x0: DenseVector = DVector::zeros(f.n);
    for &i in &f.support {
        x0[i] = args.start;
    }
    let schedule = StepSchedule::Harmonic { a0: args.a0, n0: args.n0 };
    let stop = StopRule {
        max_iters: Some(args.iters),
        eval_budget: args.budget,
        g_tol: args.g_tol,
        target: None,
    };
    let trace = match args.method {
        OptMethod::Sgd => run_with_source(&obj, &x0, &schedule, &stop, &mut SpEstimator::new(cfg, f.n)?, Momentum::None),
        OptMethod::Nesterov => run_with_source(&obj, &x0, &schedule, &stop, &mut SpEstimator::new(cfg, f.n)?, Momentum::Nesterov),
        OptMethod::Adaptive => {
            let mut source = AdaptiveEstimator::new(cfg, f.n, args.inner_steps)?;
            run_with_source(&obj, &x0, &schedule, &stop, &mut source, Momentum::None)
        }
        OptMethod::Kw => run_with_source(&obj, &x0, &schedule, &stop, &mut CentralDifference { delta: args.kw_delta }, Momentum::None),
        OptMethod::Exact => {
            let g = f.clone();
            let mut source = ExactGradient(Arc::new(move |x: &DenseVector| g.gradient(x)));
            run_with_source(&obj, &x0, &schedule, &stop, &mut source, Momentum::None)
        }
    }?;
    eprintln!("stop: {:?} after {} iterations, f = {}", trace.stop_reason, trace.records.len() - 1, trace.final_f());
    emit(&trace.records, cli.format, output(cli, None)?)
}
