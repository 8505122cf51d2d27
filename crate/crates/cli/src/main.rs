//! `slotagg`: compress patch-feature files into a fixed number of slot
//! tokens, train the compressor on synthetic bags, and certify gradients.
//!
//! Exit codes: 0 success, 1 data error, 2 usage error, 3 divergence.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slotagg::format::{
    format_train_report, read_feature_file, read_params_file, write_assignments, write_feature_file, write_params_file,
};
use slotagg::gradients::{CheckSettings, GradCheckInstance};
use slotagg::trainer::{
    generate_synthetic_bags, nearest_centroid_accuracy, slot_budget_sweep, train, SyntheticBagConfig, TrainConfig,
    TrainStatus,
};
use slotagg::{
    check_pipeline, compress_item, CompressConfig, Error, LossConstants, ModelConfig, ModelParams, RngState,
};

const EXIT_DATA: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "slotagg",
    version,
    about = "Semantic slot aggregation for patch-feature sequences"
)]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compress one feature file to K slot tokens
    Compress(CompressArgs),
    /// Train the compressor and a linear head on synthetic bags
    Train(TrainArgs),
    /// Compare analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Train one model per slot budget and print an accuracy table
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct CompressArgs {
    /// Input feature file (N × D)
    #[arg(long)]
    input: PathBuf,
    /// Learned parameter file; without it a seeded random init is used
    #[arg(long)]
    params: Option<PathBuf>,
    /// Slot budget K (must match --params when both are given)
    #[arg(long, default_value_t = 32)]
    slots: usize,
    /// Slots each patch is routed to
    #[arg(long, default_value_t = 2)]
    top_k: usize,
    /// Output feature file (K × D′)
    #[arg(long)]
    output: PathBuf,
    /// Optional per-patch assignment CSV
    #[arg(long)]
    assignments: Option<PathBuf>,
    /// Print slot count, patch count, compression ratio and slot loads
    #[arg(long)]
    stats: bool,
    /// Seed for the random init when --params is absent
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Patches per bag
    #[arg(long, default_value_t = 1024)]
    patches: usize,
    /// Feature dimension
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Number of patch clusters, one of which is evidence
    #[arg(long, default_value_t = 6)]
    clusters: usize,
    /// Share of a positive bag's patches drawn from the evidence cluster
    #[arg(long, default_value_t = 0.02)]
    evidence_fraction: f64,
    /// Cluster distance from the shared mean, in noise standard deviations
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    /// Per-coordinate patch noise
    #[arg(long, default_value_t = 1.0)]
    noise_std: f64,
    /// Norm of the mean vector shared by all patches
    #[arg(long, default_value_t = 12.0)]
    offset: f64,
    /// Probability of flipping a bag label
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    #[arg(long, default_value_t = 160)]
    train_bags: usize,
    #[arg(long, default_value_t = 80)]
    val_bags: usize,
    #[arg(long, default_value_t = 200)]
    test_bags: usize,
    /// Seed for data generation; defaults to --seed
    #[arg(long)]
    data_seed: Option<u64>,
}

impl DataArgs {
    fn config(&self) -> SyntheticBagConfig {
        SyntheticBagConfig {
            n_patches: self.patches,
            dim: self.dim,
            n_clusters: self.clusters,
            evidence_cluster: 0,
            evidence_fraction: self.evidence_fraction,
            separation: self.separation,
            noise_std: self.noise_std,
            offset: self.offset,
            label_noise: self.label_noise,
            train_bags: self.train_bags,
            val_bags: self.val_bags,
            test_bags: self.test_bags,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct TrainingArgs {
    /// Weight of the routing regularizers
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 2)]
    top_k: usize,
    /// Seed for parameter init and minibatch order
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    /// Bags per minibatch
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// One refinement MLP per slot instead of a shared one
    #[arg(long)]
    per_slot_mlp: bool,
    /// Add the pooled slot vector to the MLP output
    #[arg(long)]
    residual: bool,
}

impl TrainingArgs {
    fn config(&self, dim: usize, slots: usize) -> TrainConfig {
        let mut model = ModelConfig::new(dim, slots, 2);
        model.per_slot_mlp = self.per_slot_mlp;
        model.residual = self.residual;
        let mut cfg = TrainConfig::new(model);
        cfg.top_k = self.top_k;
        cfg.constants = LossConstants::default().with_lambda(self.lambda);
        cfg.epochs = self.epochs;
        cfg.lr = self.lr;
        cfg.batch_size = self.batch;
        cfg.seed = self.seed;
        cfg
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value_t = 32)]
    slots: usize,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Where to write the training report; stdout when omitted
    #[arg(long)]
    report: Option<PathBuf>,
    /// Where to write the learned parameters
    #[arg(long)]
    save_params: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bags in the instance
    #[arg(long, default_value_t = 2)]
    bags: usize,
    /// Patches per bag
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Feature dimension
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    slots: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    top_k: usize,
    /// Maximum relative error over unflagged coordinates
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Floor on the relative-error denominator
    #[arg(long, default_value_t = 1e-6)]
    abs_tol: f64,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Comma-separated slot budgets
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
    budgets: Vec<usize>,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    data: DataArgs,
}

/// A failed command: message plus exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig(_) => EXIT_USAGE,
            Error::NumericalFailure { .. } => EXIT_DIVERGED,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn with_path(path: &std::path::Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    }
}

fn run_compress(args: &CompressArgs) -> Result<u8, Failure> {
    let x = read_feature_file::<f64>(&args.input).map_err(with_path(&args.input))?;
    let params = match &args.params {
        Some(path) => {
            let p: ModelParams<f64> = read_params_file(path).map_err(with_path(path))?;
            if p.config.slots != args.slots {
                return Err(usage(format!(
                    "--slots {} does not match the {} slots stored in {}",
                    args.slots,
                    p.config.slots,
                    path.display()
                )));
            }
            p
        }
        None => ModelParams::init(
            &ModelConfig::new(x.cols(), args.slots, 2),
            &mut RngState::new(args.seed),
        )?,
    };
    if params.config.dim != x.cols() {
        return Err(Failure {
            code: EXIT_DATA,
            message: format!("input has D={} but parameters expect D={}", x.cols(), params.config.dim),
        });
    }
    let config = CompressConfig {
        top_k: args.top_k,
        ..Default::default()
    };
    let item = compress_item(&x, &params, &config)?;
    write_feature_file(&args.output, &item.tokens.tokens).map_err(with_path(&args.output))?;
    if let Some(path) = &args.assignments {
        let mut w = BufWriter::new(fs::File::create(path)?);
        write_assignments(&mut w, &item.table)?;
        w.flush()?;
    }
    if args.stats {
        let loads = &item.stats.load_fraction;
        let mut out = io::stdout().lock();
        writeln!(out, "slots={}", item.tokens.slots())?;
        writeln!(out, "patches={}", x.rows())?;
        writeln!(out, "compression_ratio={:?}", item.compression_ratio())?;
        let joined: Vec<String> = loads.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "load={}", joined.join(","))?;
        writeln!(out, "max_load={:.6}", item.stats.max_load())?;
    }
    Ok(0)
}

fn run_train(args: &TrainArgs) -> Result<u8, Failure> {
    let data = args.data.config();
    let splits = generate_synthetic_bags::<f64>(&data, args.data.data_seed.unwrap_or(args.training.seed))?;
    let cfg = args.training.config(data.dim, args.slots);
    let out = train(&splits.train, &splits.val, &splits.test, &cfg)?;
    let text = format_train_report(&out.report);
    match &args.report {
        Some(path) => fs::write(path, &text)?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    if let Some(path) = &args.save_params {
        write_params_file(path, &out.params).map_err(with_path(path))?;
    }
    let last = out.report.last();
    eprintln!(
        "epochs={} max_load={:.4} val_accuracy={:.4} test_accuracy={:.4}",
        out.report.epochs_completed(),
        last.max_load,
        last.val_accuracy,
        out.report.test_accuracy
    );
    match out.report.status {
        TrainStatus::Completed => Ok(0),
        TrainStatus::Diverged { epoch } => {
            eprintln!("training diverged in epoch {epoch}; report ends at the last finite state");
            Ok(EXIT_DIVERGED)
        }
    }
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<u8, Failure> {
    if args.slots < 2 {
        return Err(usage(format!(
            "--slots must be >= 2 (entropy of the gate distribution is undefined for {})",
            args.slots
        )));
    }
    if !(args.step > 0.0 && args.tol > 0.0 && args.abs_tol >= 0.0) {
        return Err(usage("--step and --tol must be > 0, --abs-tol >= 0"));
    }
    let inst = GradCheckInstance::<f64>::random(args.seed, args.bags, args.n, args.d, args.slots, args.classes)?;
    let report = check_pipeline(
        &inst.params,
        &inst.items(),
        &inst.labels,
        args.top_k,
        &LossConstants::default(),
        &CheckSettings {
            step: args.step,
            rel_tol: args.tol,
            abs_tol: args.abs_tol,
        },
    )?;
    let mut out = io::stdout().lock();
    writeln!(
        out,
        "coordinates={} flagged={} ({:.2}%) max_rel_error={:.3e} tol={:.1e}",
        report.coordinates,
        report.flagged,
        100.0 * report.flagged_fraction(),
        report.max_rel_error,
        report.rel_tol
    )?;
    for o in &report.worst {
        writeln!(
            out,
            "  index={} analytic={:.10e} numeric={:.10e} rel_error={:.3e}",
            o.index, o.analytic, o.numeric, o.rel_error
        )?;
    }
    writeln!(out, "{}", if report.passed { "PASS" } else { "FAIL" })?;
    Ok(if report.passed { 0 } else { 1 })
}

fn run_sweep(args: &SweepArgs) -> Result<u8, Failure> {
    if args.budgets.is_empty() {
        return Err(usage("--budgets needs at least one value"));
    }
    let data = args.data.config();
    let splits = generate_synthetic_bags::<f64>(&data, args.data.data_seed.unwrap_or(args.training.seed))?;
    let base = args.training.config(data.dim, args.budgets[0]);
    let rows = slot_budget_sweep(&splits, &base, &args.budgets)?;
    let mut out = io::stdout().lock();
    writeln!(out, "slots,ratio,val_accuracy,test_accuracy,max_load")?;
    for r in &rows {
        writeln!(
            out,
            "{},{:.1},{:.4},{:.4},{:.4}",
            r.slots,
            data.n_patches as f64 / r.slots as f64,
            r.val_accuracy,
            r.test_accuracy,
            r.final_max_load
        )?;
    }
    writeln!(
        out,
        "# nearest-centroid reference accuracy {:.4}",
        nearest_centroid_accuracy(&splits, &splits.test)
    )?;
    Ok(0)
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("cannot size thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Compress(a) => run_compress(a),
        Command::Train(a) => run_train(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Sweep(a) => run_sweep(a),
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
