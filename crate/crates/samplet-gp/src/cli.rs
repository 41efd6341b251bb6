//! Command-line front end.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use crate::bayesopt::{self, BoConfig};
use crate::cluster_tree::PointCloud;
use crate::compressor::{compress, compression_error, FarField};
use crate::error::{Error, Result};
use crate::gp::{self, CompressionConfig, TraceEstimator};
use crate::io::{self, RunConfig};
use crate::kernels::{Hyperparameters, MaternKernel};
use crate::linalg::{solve_perturbed_system, sparse_cholesky_with};

/// Default largest `N` for which errors against the uncompressed kernel are
/// computed.
pub const CLI_ORACLE_CAP: usize = 16_384;

#[derive(Debug, Parser)]
#[command(name = "samplet-gp", version, about = "Samplet-compressed Gaussian processes")]
pub struct Cli {
    /// Random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON configuration; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Largest N for reference error computations.
    #[arg(long, global = true)]
    pub oracle_cap: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress a kernel matrix and report its size and accuracy.
    Compress(CompressArgs),
    /// Samplet transform of one CSV column.
    Transform(TransformArgs),
    /// Train a Gaussian process and write a checkpoint.
    Train(TrainArgs),
    /// Predict with a checkpoint.
    Predict(PredictArgs),
    /// Time compression, factorization and solve over a range of sizes.
    Bench(BenchArgs),
    /// Bayesian optimization of a built-in test function.
    Bo(BoArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    #[value(name = "1d")]
    D1,
    #[value(name = "2d")]
    D2,
    #[value(name = "3d")]
    D3,
}

impl Grid {
    fn dim(self) -> usize {
        match self {
            Grid::D1 => 1,
            Grid::D2 => 2,
            Grid::D3 => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FarFieldArg {
    Interpolated,
    Exact,
}

#[derive(Debug, Clone, Default, Args)]
pub struct KernelArgs {
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub ell: Option<f64>,
    #[arg(long)]
    pub s2: Option<f64>,
    #[arg(long)]
    pub sigma2: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CompressionArgs {
    /// Vanishing moments.
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Interpolation points per dimension.
    #[arg(long)]
    pub interp: Option<usize>,
    #[arg(long)]
    pub tau_comp: Option<f64>,
    #[arg(long)]
    pub leaf_threshold: Option<usize>,
    #[arg(long, value_enum)]
    pub far_field: Option<FarFieldArg>,
}

#[derive(Debug, Clone, Args)]
pub struct PointArgs {
    /// Number of points.
    #[arg(long)]
    pub n: Option<usize>,
    /// Tensor grid in (0, 1)^d with `n` points.
    #[arg(long, value_enum, conflicts_with = "random")]
    pub grid: Option<Grid>,
    /// Uniform random points in [0, 1]^d.
    #[arg(long, value_name = "DIM")]
    pub random: Option<usize>,
    /// CSV of points; all columns are coordinates.
    #[arg(long, conflicts_with_all = ["grid", "random"])]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[command(flatten)]
    pub points: PointArgs,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[command(flatten)]
    pub compression: CompressionArgs,
    /// Matrix Market output of the compressed matrix.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Column holding the values; the other columns are coordinates.
    #[arg(long)]
    pub column: String,
    #[arg(long)]
    pub output: PathBuf,
    /// Apply the inverse transform.
    #[arg(long)]
    pub inverse: bool,
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub leaf_threshold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub target: String,
    /// Checkpoint path.
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[command(flatten)]
    pub compression: CompressionArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub probes: Option<usize>,
    /// Exact trace instead of Hutchinson probes.
    #[arg(long)]
    pub exact_trace: bool,
    #[arg(long)]
    pub no_normalize: bool,
    /// Training trace as JSON lines.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV holding the feature columns of the checkpoint.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Also write the posterior variance.
    #[arg(long)]
    pub variance: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "2d")]
    pub grid: Grid,
    /// Comma-separated point counts.
    #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 4096, 16384])]
    pub sizes: Vec<usize>,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[command(flatten)]
    pub compression: CompressionArgs,
    /// Metrics CSV; standard output when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TestFunction {
    Ackley,
    Rastrigin,
}

#[derive(Debug, Args)]
pub struct BoArgs {
    #[arg(long, value_enum, default_value = "ackley")]
    pub function: TestFunction,
    /// Dimension for Rastrigin; Ackley is two-dimensional.
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long)]
    pub n0: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Add standard normal noise to every evaluation.
    #[arg(long)]
    pub noise: bool,
    /// History as JSON lines.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let mut out = std::io::stdout().lock();
    match execute(&cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Runs a parsed command, writing reports to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let cfg = match &cli.config {
        Some(p) => io::load_config(p)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let cap = cli.oracle_cap.unwrap_or(CLI_ORACLE_CAP);
    match &cli.command {
        Command::Compress(a) => cmd_compress(a, &cfg, seed, cap, out),
        Command::Transform(a) => cmd_transform(a, &cfg),
        Command::Train(a) => cmd_train(a, &cfg, seed, out),
        Command::Predict(a) => cmd_predict(a),
        Command::Bench(a) => cmd_bench(a, &cfg, cap, out),
        Command::Bo(a) => cmd_bo(a, &cfg, seed, out),
    }
}

fn hyper_from(args: &KernelArgs, cfg: &RunConfig) -> Result<Hyperparameters> {
    let mut h = cfg.kernel.unwrap_or_default();
    if let Some(v) = args.nu {
        h.nu = v;
    }
    if let Some(v) = args.ell {
        h.ell = v;
    }
    if let Some(v) = args.s2 {
        h.s2 = v;
    }
    if let Some(v) = args.sigma2 {
        h.sigma2 = v;
    }
    h.validate()?;
    Ok(h)
}

fn compression_from(args: &CompressionArgs, cfg: &RunConfig) -> Result<CompressionConfig> {
    let mut c = cfg.compression.unwrap_or_default();
    if let Some(v) = args.q {
        c.q = v;
    }
    if let Some(v) = args.eta {
        c.eta = v;
    }
    if args.interp.is_some() {
        c.interpolation_order = args.interp;
    }
    if let Some(v) = args.tau_comp {
        c.tau_comp = v;
    }
    if args.leaf_threshold.is_some() {
        c.leaf_threshold = args.leaf_threshold;
    }
    if let Some(f) = args.far_field {
        c.far_field = match f {
            FarFieldArg::Interpolated => FarField::Interpolated,
            FarFieldArg::Exact => FarField::Exact,
        };
    }
    c.validate()?;
    Ok(c)
}

/// Tensor grid with `side^d = n` points at the cell midpoints of (0, 1)^d.
pub fn grid_points(n: usize, d: usize) -> Result<PointCloud> {
    let side = (n as f64).powf(1.0 / d as f64).round() as usize;
    if side == 0 || side.pow(d as u32) != n {
        return Err(Error::InvalidArgument(format!("{n} is not a perfect {d}-th power")));
    }
    let mut flat = Vec::with_capacity(n * d);
    for k in 0..n {
        let mut r = k;
        for _ in 0..d {
            flat.push(((r % side) as f64 + 0.5) / side as f64);
            r /= side;
        }
    }
    PointCloud::from_flat(d, flat)
}

/// Uniform random points in `[0, 1]^d`.
pub fn random_points(n: usize, d: usize, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::from_flat(d, (0..n * d).map(|_| rng.random::<f64>()).collect())
}

fn load_points(a: &PointArgs, seed: u64) -> Result<PointCloud> {
    if let Some(p) = &a.input {
        let (_, rows) = io::read_columns(p, None)?;
        return PointCloud::new(&rows);
    }
    let n = a.n.ok_or_else(|| Error::InvalidArgument("--n is required with --grid or --random".into()))?;
    match (a.grid, a.random) {
        (Some(g), None) => grid_points(n, g.dim()),
        (None, Some(d)) => random_points(n, d, seed),
        (None, None) => grid_points(n, 2),
        _ => Err(Error::InvalidArgument("--grid and --random are exclusive".into())),
    }
}

fn write_json(out: &mut dyn Write, v: &serde_json::Value) -> Result<()> {
    writeln!(out, "{v}")?;
    Ok(())
}

fn cmd_compress(a: &CompressArgs, cfg: &RunConfig, seed: u64, cap: usize, out: &mut dyn Write) -> Result<()> {
    let h = hyper_from(&a.kernel, cfg)?;
    let cc = compression_from(&a.compression, cfg)?;
    let pts = load_points(&a.points, seed)?;
    let kernel = MaternKernel::new(h.nu, h.ell, h.s2)?;
    let t0 = Instant::now();
    let st = cc.samplet_tree(&pts)?;
    let t_tree = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let c = compress(&st, &kernel, &cc.options())?;
    let t_comp = t1.elapsed().as_secs_f64();
    let n = pts.len();
    let error = if n <= cap { Some(compression_error(&st, &kernel, &c.matrix)?) } else { None };
    if let Some(p) = &a.output {
        io::export_sparse(&c.matrix, p)?;
    }
    let nlogn = n as f64 * (n as f64).log2().max(1.0);
    write_json(
        out,
        &json!({
            "n": n,
            "dim": pts.dim(),
            "q": cc.q,
            "eta": cc.eta,
            "nu": h.nu,
            "ell": h.ell,
            "tau_comp": cc.tau_comp,
            "nnz": c.stats.nnz,
            "nnz_lower": c.stats.nnz_lower,
            "nnz_per_nlogn": c.stats.nnz as f64 / nlogn,
            "thresholded": c.stats.thresholded,
            "relative_error": error,
            "tree_seconds": t_tree,
            "compress_seconds": t_comp,
        }),
    )
}

fn cmd_transform(a: &TransformArgs, cfg: &RunConfig) -> Result<()> {
    let (names, rows) = io::read_columns(&a.input, None)?;
    let col = names
        .iter()
        .position(|n| n == &a.column)
        .ok_or_else(|| Error::InvalidArgument(format!("column '{}' not found", a.column)))?;
    if names.len() < 2 {
        return Err(Error::InvalidArgument("need at least one coordinate column".into()));
    }
    let coords: Vec<Vec<f64>> =
        rows.iter().map(|r| r.iter().enumerate().filter(|&(i, _)| i != col).map(|(_, v)| *v).collect()).collect();
    let values: Vec<f64> = rows.iter().map(|r| r[col]).collect();
    let mut cc = cfg.compression.unwrap_or_default();
    if let Some(q) = a.q {
        cc.q = q;
    }
    if a.leaf_threshold.is_some() {
        cc.leaf_threshold = a.leaf_threshold;
    }
    let st = cc.samplet_tree(&PointCloud::new(&coords)?)?;
    let result = if a.inverse { st.inverse_transform(&values)? } else { st.forward_transform(&values)? };
    let mut rows = rows;
    for (r, v) in rows.iter_mut().zip(result) {
        r[col] = v;
    }
    io::write_csv(&a.output, &names, &rows)
}

fn cmd_train(a: &TrainArgs, cfg: &RunConfig, seed: u64, out: &mut dyn Write) -> Result<()> {
    let h = hyper_from(&a.kernel, cfg)?;
    let cc = compression_from(&a.compression, cfg)?;
    let mut tc = cfg.train.clone().unwrap_or_default();
    tc.seed = seed;
    if let Some(s) = a.steps {
        tc.n_steps = s;
    }
    if let Some(lr) = a.lr {
        tc.adam.learning_rate = lr;
    }
    if let Some(p) = a.probes {
        tc.trace = TraceEstimator::Hutchinson { probes: p };
    }
    if a.exact_trace {
        tc.trace = TraceEstimator::Exact;
    }
    if a.no_normalize {
        tc.normalize = false;
    }
    tc.validate()?;
    let ds = io::ingest_csv(&a.input, &a.target)?;
    if ds.dropped > 0 {
        eprintln!("warning: dropped {} rows with non-finite values", ds.dropped);
    }
    if ds.len() < 2 {
        return Err(Error::InvalidArgument("training needs at least two rows".into()));
    }
    let model = gp::train(&ds.points()?, &ds.targets, &h, &tc, &cc)?;
    io::save_model(&model, &ds.feature_names, &ds.target_name, &a.output)?;
    if let Some(p) = &a.trace {
        io::write_jsonl(model.train_trace(), p)?;
    }
    let hp = model.hyperparameters();
    write_json(
        out,
        &json!({
            "n": ds.len(),
            "dropped": ds.dropped,
            "ell": hp.ell,
            "s2": hp.s2,
            "sigma2": hp.sigma2,
            "log_likelihood": model.log_likelihood(),
            "sigma2_escalated": model.sigma2_escalated(),
        }),
    )
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let (model, ck) = io::load_model(&a.model)?;
    let (_, rows) = io::read_columns(&a.input, Some(&ck.feature_names))?;
    let x = PointCloud::new(&rows)?;
    let (headers, table) = if a.variance {
        let (mean, cov) = gp::predict(&model, &x)?;
        let t: Vec<Vec<f64>> = (0..mean.len()).map(|i| vec![mean[i], cov[(i, i)]]).collect();
        (vec!["mean".to_string(), "variance".to_string()], t)
    } else {
        let mean = gp::predict_mean(&model, &x)?;
        (vec!["mean".to_string()], mean.into_iter().map(|m| vec![m]).collect())
    };
    io::write_csv(&a.output, &headers, &table)
}

fn cmd_bench(a: &BenchArgs, cfg: &RunConfig, cap: usize, out: &mut dyn Write) -> Result<()> {
    let h = hyper_from(&a.kernel, cfg)?;
    let cc = compression_from(&a.compression, cfg)?;
    let kernel = MaternKernel::new(h.nu, h.ell, h.s2)?;
    let d = a.grid.dim();
    let mut rows = Vec::new();
    for &n in &a.sizes {
        let pts = grid_points(n, d)?;
        let t0 = Instant::now();
        let st = cc.samplet_tree(&pts)?;
        let c = compress(&st, &kernel, &cc.options())?;
        let t_comp = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let f = sparse_cholesky_with(&c.matrix, h.sigma2, cc.ordering)?;
        let t_fact = t1.elapsed().as_secs_f64();
        let y: Vec<f64> = (0..n).map(|i| pts.point(i).iter().sum::<f64>().sin()).collect();
        let t2 = Instant::now();
        solve_perturbed_system(&f, &st, &y)?;
        let t_solve = t2.elapsed().as_secs_f64();
        let err = if n <= cap { Some(compression_error(&st, &kernel, &c.matrix)?) } else { None };
        rows.push((n, c.stats.nnz, f.nnz(), t_comp, t_fact, t_solve, err));
    }
    let mut text = String::from("n,dim,nnz,nnz_per_nlogn,factor_nnz,compress_s,factor_s,solve_s,relative_error\n");
    for (n, nnz, fnnz, tc, tf, ts, err) in rows {
        let nlogn = n as f64 * (n as f64).log2().max(1.0);
        text.push_str(&format!(
            "{n},{d},{nnz},{},{fnnz},{tc},{tf},{ts},{}\n",
            nnz as f64 / nlogn,
            err.map(|e| e.to_string()).unwrap_or_default()
        ));
    }
    match &a.output {
        Some(p) => std::fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_bo(a: &BoArgs, cfg: &RunConfig, seed: u64, out: &mut dyn Write) -> Result<()> {
    let mut bc: BoConfig = cfg.bo.clone().unwrap_or_default();
    bc.seed = seed;
    if let Some(n) = a.n0 {
        bc.n0 = n;
    }
    if let Some(g) = a.gamma {
        bc.gamma = g;
    }
    if let Some(s) = a.steps {
        bc.train.n_steps = s;
    }
    if let Some(h) = cfg.kernel {
        bc.hyper = h;
    }
    bc.validate()?;
    let dim = match a.function {
        TestFunction::Ackley => 2,
        TestFunction::Rastrigin => a.dim,
    };
    if dim == 0 {
        return Err(Error::InvalidArgument("--dim must be positive".into()));
    }
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = a.noise;
    let f = a.function;
    let black_box = move |u: &[f64]| -> Result<f64> {
        let v = match f {
            TestFunction::Ackley => bayesopt::negative_ackley_unit(u),
            TestFunction::Rastrigin => -bayesopt::rastrigin(&bayesopt::rastrigin_domain(u)),
        };
        Ok(if noise { v + noise_rng.sample::<f64, _>(StandardNormal) } else { v })
    };
    let res = bayesopt::run_bo(dim, black_box, &bc);
    let history = match &res {
        Ok(r) => &r.history,
        Err(e) => &e.history,
    };
    if let Some(p) = &a.history {
        io::write_jsonl(history, p)?;
    }
    let r = res.map_err(|e| e.error)?;
    let last = r.final_record();
    write_json(
        out,
        &json!({
            "function": format!("{:?}", a.function).to_lowercase(),
            "dim": dim,
            "n0": bc.n0,
            "x_best": r.x_best,
            "y_best": r.y_best,
            "x_final": last.x,
            "y_final": last.y,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        assert_eq!(grid_points(16, 2).unwrap().len(), 16);
        assert!(grid_points(15, 2).is_err());
        let g = grid_points(4, 2).unwrap();
        assert_eq!(g.point(3), &[0.75, 0.75]);
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run_command(["samplet-gp", "compress", "--bogus"]), 2);
    }
}
