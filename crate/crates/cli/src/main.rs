mod commands;
mod manifest;
mod settings;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

use settings::Settings;

#[derive(Parser, Debug)]
#[command(name = "cscfa", version, about = "Convolutional factor analysis and compressive sensing reconstruction")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Root seed; every random component draws from a named sub-stream of it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads [default: $CSCFA_THREADS, else all cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// `key = value` settings file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in defaults: mnist or generic-64.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Exit with status 1 when any CG solve hits its iteration cap.
    #[arg(long, global = true)]
    pub strict: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SolverArgs {
    /// Outer ADMM iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Fraction of feature entries kept nonzero per image.
    #[arg(long)]
    pub sparsity: Option<f64>,
    /// Dictionary step size.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub eta0: Option<f64>,
    #[arg(long)]
    pub eta_max: Option<f64>,
    #[arg(long)]
    pub eta_growth: Option<f64>,
    /// Take eta values literally instead of relative to the data-term curvature.
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub eta_absolute: Option<bool>,
    /// Extrapolate Z and U between iterations (with restart).
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub accelerate: Option<bool>,
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub normalize_atoms: Option<bool>,
    /// Start in-situ runs from zero features.
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub zero_init: Option<bool>,
    /// Early-stop threshold on the relative error; 0 disables.
    #[arg(long)]
    pub rel_tol: Option<f64>,
    #[arg(long)]
    pub cg_tol: Option<f64>,
    #[arg(long)]
    pub cg_max_iter: Option<usize>,
}

impl SolverArgs {
    fn apply(&self, s: &mut Settings) {
        s.set_opt("iters", self.iters);
        s.set_opt("sparsity", self.sparsity);
        s.set_opt("beta", self.beta);
        s.set_opt("eta0", self.eta0);
        s.set_opt("eta_max", self.eta_max);
        s.set_opt("eta_growth", self.eta_growth);
        s.set_opt("eta_absolute", self.eta_absolute);
        s.set_opt("accelerate", self.accelerate);
        s.set_opt("normalize_atoms", self.normalize_atoms);
        s.set_opt("zero_init", self.zero_init);
        s.set_opt("rel_tol", self.rel_tol);
        s.set_opt("cg_tol", self.cg_tol);
        s.set_opt("cg_max_iter", self.cg_max_iter);
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct SoftmaxArgs {
    /// Softmax gradient-descent epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial softmax step size.
    #[arg(long)]
    pub step: Option<f64>,
    /// Softmax weight decay.
    #[arg(long)]
    pub l2: Option<f64>,
}

impl SoftmaxArgs {
    fn apply(&self, s: &mut Settings) {
        s.set_opt("epochs", self.epochs);
        s.set_opt("step", self.step);
        s.set_opt("l2", self.l2);
    }
}

#[derive(Args, Debug, Clone)]
pub struct ImageArgs {
    /// IDX image file, or a directory holding images-idx3-ubyte (and labels-idx1-ubyte).
    #[arg(long)]
    pub images: PathBuf,
    /// IDX label file [default: labels-idx1-ubyte next to a directory --images]
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Index of the first image used.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Number of images used [default: all from --start]
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a convolutional dictionary (optionally a second pooled layer).
    TrainDict(TrainDictArgs),
    /// Compress images with a random sensing operator.
    Measure(MeasureArgs),
    /// Recover images from a measurement file.
    Reconstruct(ReconstructArgs),
    /// Softmax classification of sparse-code features.
    Classify(ClassifyArgs),
    /// Sweep compression ratios: reconstruction PSNR and classification accuracy.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug)]
pub struct TrainDictArgs {
    #[command(flatten)]
    pub images: ImageArgs,
    /// Atoms in the (first-layer) dictionary.
    #[arg(long)]
    pub atoms: Option<usize>,
    /// Kernel size, `H` or `HxW`.
    #[arg(long)]
    pub kernel: Option<String>,
    /// Atoms in a second layer; enables two-layer training.
    #[arg(long)]
    pub layer2: Option<usize>,
    #[arg(long, default_value = "7", requires = "layer2")]
    pub kernel2: String,
    /// Pooling block of layer 1.
    #[arg(long, default_value = "3", requires = "layer2")]
    pub pool: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug)]
pub struct MeasureArgs {
    #[command(flatten)]
    pub images: ImageArgs,
    /// Measurements per pixel, in (0, 1].
    #[arg(long, value_parser = parse_csr)]
    pub csr: f64,
    /// gaussian, hadamard or identity.
    #[arg(long)]
    pub matrix: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("model").required(true).args(["dict", "in_situ", "projected_dict"])))]
pub struct ReconstructArgs {
    #[arg(long)]
    pub measurements: PathBuf,
    /// Pre-learned dictionary.
    #[arg(long)]
    pub dict: Option<PathBuf>,
    /// Learn the dictionary from the measurements themselves.
    #[arg(long)]
    pub in_situ: bool,
    /// Two-layer model file; reconstructs with its projected dictionary.
    #[arg(long)]
    pub projected_dict: Option<PathBuf>,
    #[arg(long)]
    pub atoms: Option<usize>,
    #[arg(long)]
    pub kernel: Option<String>,
    /// Ground-truth IDX images (file or directory); adds PSNR to the metrics.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Index of the truth image matching the first measurement.
    #[arg(long, default_value_t = 0)]
    pub truth_start: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["train_features", "images"])))]
pub struct ClassifyArgs {
    /// `label,f0,f1,...` rows.
    #[arg(long, requires = "test_features")]
    pub train_features: Option<PathBuf>,
    #[arg(long, requires = "train_features")]
    pub test_features: Option<PathBuf>,
    /// IDX images with labels, for end-to-end runs.
    #[arg(long, requires = "dict")]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Dictionary used to extract features.
    #[arg(long)]
    pub dict: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    pub train_count: usize,
    #[arg(long, default_value_t = 1000)]
    pub test_count: usize,
    /// First test image [default: right after the training images]
    #[arg(long)]
    pub test_start: Option<usize>,
    /// Extract features from measurements at this ratio instead of from images.
    #[arg(long, value_parser = parse_csr)]
    pub csr: Option<f64>,
    #[arg(long)]
    pub matrix: Option<String>,
    /// Also write `<prefix>.train.csv` and `<prefix>.test.csv`.
    #[arg(long)]
    pub save_features: Option<PathBuf>,
    /// Result CSV: csr,accuracy,n_train,n_test,seed.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Save the trained softmax model.
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub softmax: SoftmaxArgs,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    /// Directory with images-idx3-ubyte and labels-idx1-ubyte, or an IDX image file with --labels.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Comma-separated compression ratios.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1.., value_parser = parse_csr)]
    pub csr_list: Vec<f64>,
    /// Pre-learned dictionary [default: learned from the training images]
    #[arg(long)]
    pub dict: Option<PathBuf>,
    #[arg(long)]
    pub atoms: Option<usize>,
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub train_count: usize,
    #[arg(long, default_value_t = 50)]
    pub test_count: usize,
    #[arg(long)]
    pub matrix: Option<String>,
    /// Result CSV: csr,psnr,softmax_acc.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub softmax: SoftmaxArgs,
}

fn parse_csr(raw: &str) -> Result<f64, String> {
    let v: f64 = raw.trim().parse().map_err(|_| format!("not a number: {raw:?}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("CSr must lie in (0, 1], got {v}"))
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(cscfa::Error),
    /// `--strict` and this many CG solves hit their cap.
    CgWarnings(usize),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(cscfa::Error::Numeric(_)) | CliError::CgWarnings(_) => 1,
            CliError::Core(_) | CliError::Usage(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::CgWarnings(n) => write!(f, "{n} CG solves stopped at the iteration cap (--strict)"),
        }
    }
}

impl From<cscfa::Error> for CliError {
    fn from(e: cscfa::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("CSCFA_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("CSCFA_THREADS must be a thread count, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    if let Some(n) = thread_count(g.threads)? {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let mut settings = match &g.preset {
        Some(p) => Settings::from_preset(p)?,
        None => Settings::default(),
    };
    if let Some(path) = &g.config {
        settings.merge_file(path)?;
    }
    match &cli.command {
        Command::TrainDict(a) => commands::train_dict(g, settings, a),
        Command::Measure(a) => commands::measure(g, settings, a),
        Command::Reconstruct(a) => commands::reconstruct(g, settings, a),
        Command::Classify(a) => commands::classify(g, settings, a),
        Command::Benchmark(a) => commands::benchmark(g, settings, a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
