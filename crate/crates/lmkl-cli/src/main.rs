//! `lmkl` — train and inspect localized multiple-kernel classifiers.
//!
//! Subcommands form a pipeline over files: `synth` writes toy datasets,
//! `kernels` turns a dataset into a kernel tensor file plus a labels file,
//! `train` fits models on kernel files, `eval` scores a checkpoint,
//! `gating` exports where the gating network puts its mass, and
//! `gradcheck` verifies the analytic gradients numerically.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage error, 3 bad
//! input (missing or malformed files, incompatible shapes).

mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use lmkl::{
    bandwidth_grid, build_cross_kernels, build_train_kernels, evaluate, gather_batch,
    gating_report, grad_check, max_pairwise_distance, read_labels, subsample, train, write_gating,
    write_labels, write_libsvm, write_metrics_csv, Architecture, Checkpoint, CrossKernelStack,
    Dataset, Dtype, KernelSource, KernelStack, ModelParams, PoolMode, SynthKind, TrainConfig,
};

/// Default cap on training examples before kernel construction.
const TRAIN_CAP: usize = 20_000;
/// Default cap on query (test) examples before kernel construction.
const QUERY_CAP: usize = 10_000;
/// Default number of kernels in a stack.
const DEFAULT_KERNELS: usize = 10;

#[derive(Parser)]
#[command(
    name = "lmkl",
    version,
    about = "Localized multiple kernel learning over precomputed Gaussian kernel stacks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset in sparse text format.
    Synth(SynthArgs),
    /// Build a kernel tensor file (and labels file) from a dataset.
    Kernels(KernelsArgs),
    /// Train one model per seed on precomputed kernels.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a kernel file.
    Eval(EvalArgs),
    /// Export gating weights of a checkpoint.
    Gating(GatingArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

fn parse_kind(s: &str) -> Result<SynthKind, String> {
    s.parse()
}

fn parse_dtype(s: &str) -> Result<Dtype, String> {
    s.parse()
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    s.parse()
}

fn parse_pool(s: &str) -> Result<PoolMode, String> {
    s.parse()
}

#[derive(Args)]
struct SynthArgs {
    /// Shape to generate: gauss2, xor4, or rings.
    #[arg(long, value_parser = parse_kind)]
    kind: SynthKind,
    /// Number of training examples.
    #[arg(long, default_value_t = 500)]
    train: usize,
    /// Number of test examples.
    #[arg(long, default_value_t = 200)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path for the training split.
    #[arg(long)]
    out_train: PathBuf,
    /// Output path for the test split (required when --test > 0).
    #[arg(long)]
    out_test: Option<PathBuf>,
}

#[derive(Args)]
struct KernelsArgs {
    /// Dataset to build kernel rows for.
    #[arg(long)]
    data: PathBuf,
    /// Training dataset; when given, builds the cross stack of --data
    /// against this set at the training bandwidths.
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// Output kernel tensor file.
    #[arg(long)]
    out: PathBuf,
    /// Output labels file (default: --out with a .labels extension).
    #[arg(long)]
    labels_out: Option<PathBuf>,
    /// Number of kernels (bandwidths) in the stack.
    #[arg(long, default_value_t = DEFAULT_KERNELS)]
    count: usize,
    /// Storage precision: f64 or f32.
    #[arg(long, default_value = "f64", value_parser = parse_dtype)]
    dtype: Dtype,
    /// Cap on examples from --data (default: 20000 standalone, 10000 with
    /// --train-data).
    #[arg(long)]
    cap: Option<usize>,
    /// Cap on examples from --train-data (cross mode only).
    #[arg(long, default_value_t = TRAIN_CAP)]
    train_cap: usize,
    /// Seed of the capping subsample.
    #[arg(long, default_value_t = 0)]
    cap_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Square training kernel file.
    #[arg(long)]
    kernels: PathBuf,
    /// Training labels file.
    #[arg(long)]
    labels: PathBuf,
    /// Test-vs-train kernel file for per-epoch test metrics.
    #[arg(long, requires = "test_labels")]
    test_kernels: Option<PathBuf>,
    /// Test labels file.
    #[arg(long, requires = "test_kernels")]
    test_labels: Option<PathBuf>,
    /// Directory for checkpoints and metric files.
    #[arg(long)]
    out_dir: PathBuf,
    /// Optional key=value config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Head architecture: shared or separate.
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Architecture>,
    /// Pooling of gated kernel rows: sum or mean.
    #[arg(long, value_parser = parse_pool)]
    pool: Option<PoolMode>,
    /// Comma-separated run seeds, one model per seed.
    #[arg(long)]
    seeds: Option<String>,
    /// Epochs between metric evaluations.
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Kernel file of the examples to score (square or cross).
    #[arg(long)]
    kernels: PathBuf,
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args)]
struct GatingArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    kernels: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Output path for the gating export.
    #[arg(long)]
    out: PathBuf,
    /// How many leading examples get individual entries.
    #[arg(long, default_value_t = 16)]
    samples: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of synthetic examples behind the kernel stack.
    #[arg(long, default_value_t = 8)]
    examples: usize,
    #[arg(long, default_value_t = 5)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Number of kernels in the stack.
    #[arg(long, default_value_t = 3)]
    count: usize,
    /// Batch size of the checked loss.
    #[arg(long, default_value_t = 6)]
    batch: usize,
    /// How many parameter seeds to check per configuration.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Relative error tolerance.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

/// Failure category, mapped to the process exit code.
#[derive(Debug)]
enum CliError {
    /// A check failed (exit 1).
    Verification(String),
    /// Bad or missing input (exit 3).
    Input(String),
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Input(e.to_string())
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Kernels(args) => run_kernels(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Gating(args) => run_gating(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    };
    match result {
        Ok(()) => {}
        Err(CliError::Verification(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Input(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(3);
        }
    }
}

fn run_synth(args: SynthArgs) -> Result<(), CliError> {
    let (train_set, test_set) = lmkl::train_test(args.kind, args.train, args.test, args.seed);
    write_libsvm(&args.out_train, &train_set)?;
    println!(
        "wrote {} {} examples to {}",
        train_set.len(),
        args.kind,
        args.out_train.display()
    );
    if args.test > 0 {
        let out_test = args.out_test.ok_or_else(|| {
            CliError::Input("--out-test is required when --test > 0".into())
        })?;
        write_libsvm(&out_test, &test_set)?;
        println!(
            "wrote {} {} examples to {}",
            test_set.len(),
            args.kind,
            out_test.display()
        );
    }
    Ok(())
}

fn run_kernels(args: KernelsArgs) -> Result<(), CliError> {
    let labels_out = args
        .labels_out
        .clone()
        .unwrap_or_else(|| args.out.with_extension("labels"));
    match &args.train_data {
        None => {
            // square training stack over the (capped) dataset
            let dataset = lmkl::load_dataset(&args.data)?;
            let capped = subsample(&dataset, args.cap.unwrap_or(TRAIN_CAP), args.cap_seed);
            let stack = build_train_kernels(&capped.examples, args.count)?;
            stack.to_file(&args.out, args.dtype)?;
            write_labels(&labels_out, &capped.labels())?;
            println!(
                "built {}x{}x{} training stack from {} (bandwidths {:.4}..{:.4})",
                stack.m(),
                stack.n(),
                stack.n(),
                args.data.display(),
                stack.bandwidths().first().unwrap(),
                stack.bandwidths().last().unwrap(),
            );
        }
        Some(train_path) => {
            // cross stack: queries against the capped training set, at the
            // training set's bandwidths; query labels share the training
            // label space
            let train_raw = lmkl::load_raw_examples(train_path)?;
            let train_labels: Vec<i64> = train_raw.iter().map(|e| e.label).collect();
            let label_map = lmkl::remap_labels(&train_labels)?;
            let train_set = Dataset::with_label_map(train_raw, label_map.clone())?;
            let train_capped = subsample(&train_set, args.train_cap, args.cap_seed);

            let query_raw = lmkl::load_raw_examples(&args.data)?;
            let query_set = Dataset::with_label_map(query_raw, label_map)?;
            let query_capped = subsample(&query_set, args.cap.unwrap_or(QUERY_CAP), args.cap_seed);

            let d_max = max_pairwise_distance(&train_capped.examples);
            if d_max <= 0.0 {
                return Err(CliError::Input(format!(
                    "{}: all training examples are identical",
                    train_path.display()
                )));
            }
            let bandwidths = bandwidth_grid(d_max, args.count);
            let cross = build_cross_kernels(
                &query_capped.examples,
                &train_capped.examples,
                &bandwidths,
            )?;
            cross.to_file(&args.out, args.dtype)?;
            write_labels(&labels_out, &query_capped.labels())?;
            println!(
                "built {}x{}x{} cross stack from {} against {}",
                cross.m(),
                cross.n_rows(),
                cross.n_cols(),
                args.data.display(),
                train_path.display(),
            );
        }
    }
    println!("kernels: {}", args.out.display());
    println!("labels: {}", labels_out.display());
    Ok(())
}

/// Labels files hold internal class ids; the class count is the largest id
/// plus one across every labels file of the run.
fn class_count(label_sets: &[&[usize]]) -> Result<usize, CliError> {
    let max = label_sets
        .iter()
        .flat_map(|s| s.iter())
        .max()
        .copied()
        .ok_or_else(|| CliError::Input("no labels".into()))?;
    let classes = max + 1;
    if classes < 2 {
        return Err(CliError::Input(
            "labels contain a single class; at least two are required".into(),
        ));
    }
    Ok(classes)
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let stack = KernelStack::from_file(&args.kernels)?;
    let labels = read_labels(&args.labels)?;
    let test_data = match (&args.test_kernels, &args.test_labels) {
        (Some(k), Some(l)) => Some((CrossKernelStack::from_file(k)?, read_labels(l)?)),
        _ => None,
    };

    let mut cfg = TrainConfig::default();
    let mut seeds: Vec<u64> = vec![0];
    if let Some(path) = &args.config {
        config::load_config(path)
            .map_err(CliError::Input)?
            .apply(&mut cfg, &mut seeds);
    }
    let flag_seeds = match &args.seeds {
        Some(text) => Some(config::parse_seeds(text).map_err(CliError::Input)?),
        None => None,
    };
    config::Overrides {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        beta1: args.beta1,
        beta2: args.beta2,
        eps: args.eps,
        hidden: args.hidden,
        arch: args.arch,
        pool: args.pool,
        eval_every: args.eval_every,
        seeds: flag_seeds,
    }
    .apply(&mut cfg, &mut seeds);

    let mut label_sets: Vec<&[usize]> = vec![&labels];
    if let Some((_, l)) = &test_data {
        label_sets.push(l);
    }
    let classes = class_count(&label_sets)?;

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.out_dir.display())))?;

    let mut final_accs = Vec::new();
    for &seed in &seeds {
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let test_ref = test_data
            .as_ref()
            .map(|(s, l)| (s as &dyn KernelSource, l.as_slice()));
        let run = train(&stack, &labels, classes, test_ref, &run_cfg)?;

        let ckpt_path = args.out_dir.join(format!("model-seed{seed}.ckpt"));
        Checkpoint {
            params: run.params,
            seed,
        }
        .save(&ckpt_path)?;
        let metrics_path = args.out_dir.join(format!("metrics-seed{seed}.csv"));
        write_metrics_csv(&metrics_path, &run.metrics)?;

        let last = run.metrics.last().expect("at least one epoch");
        let seconds: f64 = run.metrics.iter().map(|m| m.seconds).sum();
        match last.test_acc {
            Some(acc) => {
                println!(
                    "seed {seed}: train_loss {:.6} train_acc {:.4} test_acc {:.4} ({seconds:.1}s)",
                    last.train_loss, last.train_acc, acc
                );
                final_accs.push(acc);
            }
            None => {
                println!(
                    "seed {seed}: train_loss {:.6} train_acc {:.4} ({seconds:.1}s)",
                    last.train_loss, last.train_acc
                );
                final_accs.push(last.train_acc);
            }
        }
        println!("  checkpoint: {}", ckpt_path.display());
        println!("  metrics: {}", metrics_path.display());
    }

    let mean = final_accs.iter().sum::<f64>() / final_accs.len() as f64;
    let var = final_accs
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / final_accs.len() as f64;
    let which = if test_data.is_some() { "test" } else { "train" };
    println!(
        "mean {which}_acc {:.4} (std {:.4}) over {} seeds",
        mean,
        var.sqrt(),
        final_accs.len()
    );
    Ok(())
}

/// Load a kernel file as a source for evaluation: square stacks and cross
/// stacks are both acceptable.
fn load_source(path: &Path) -> Result<Box<dyn KernelSource>, CliError> {
    // a cross stack with equal dimensions reads square files fine
    Ok(Box::new(CrossKernelStack::from_file(path)?))
}

fn load_checkpoint_for(
    path: &Path,
    source: &dyn KernelSource,
) -> Result<ModelParams, CliError> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.params.check_compatible(source)?;
    Ok(ckpt.params)
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    let source = load_source(&args.kernels)?;
    let labels = read_labels(&args.labels)?;
    if labels.len() != source.n_rows() {
        return Err(CliError::Input(format!(
            "{} labels for {} kernel rows",
            labels.len(),
            source.n_rows()
        )));
    }
    let params = load_checkpoint_for(&args.checkpoint, source.as_ref())?;
    for &label in &labels {
        if label >= params.c {
            return Err(CliError::Input(format!(
                "label {label} out of range for {} classes",
                params.c
            )));
        }
    }
    let (loss, acc) = evaluate(&params, source.as_ref(), &labels, 256);
    println!("examples {}", labels.len());
    println!("loss {loss}");
    println!("accuracy {acc}");
    Ok(())
}

fn run_gating(args: GatingArgs) -> Result<(), CliError> {
    let source = load_source(&args.kernels)?;
    let labels = read_labels(&args.labels)?;
    if labels.len() != source.n_rows() {
        return Err(CliError::Input(format!(
            "{} labels for {} kernel rows",
            labels.len(),
            source.n_rows()
        )));
    }
    let params = load_checkpoint_for(&args.checkpoint, source.as_ref())?;
    let classes = class_count(&[&labels])?.max(params.c);
    let report = gating_report(&params, source.as_ref(), &labels, classes, args.samples)?;
    write_gating(&args.out, &report)?;
    println!(
        "wrote {} sample entries and {} class summaries to {}",
        report.samples.len(),
        report.classes.len(),
        args.out.display()
    );
    for c in &report.classes {
        if c.count == 0 {
            continue;
        }
        let mean: Vec<String> = c.mean.iter().map(|v| format!("{v:.4}")).collect();
        println!("class {} ({} examples): mean gating [{}]", c.class, c.count, mean.join(", "));
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    if args.batch > args.examples {
        return Err(CliError::Input(format!(
            "batch {} exceeds example count {}",
            args.batch, args.examples
        )));
    }
    let data = lmkl::generate(SynthKind::Gauss2, args.examples, 0);
    let stack = build_train_kernels(&data, args.count)?;
    let indices: Vec<usize> = (0..args.batch).collect();
    let labels: Vec<usize> = indices
        .iter()
        .map(|&i| (data[i].label > 0) as usize % args.classes.max(2))
        .collect();
    let x = gather_batch(&stack, &indices);

    let mut failed = 0usize;
    for arch in [Architecture::Shared, Architecture::Separate] {
        for pool in [PoolMode::Sum, PoolMode::Mean] {
            for seed in 0..args.seeds {
                let params = ModelParams::init(
                    stack.n(),
                    args.hidden,
                    args.classes.max(2),
                    stack.m(),
                    arch,
                    pool,
                    seed,
                );
                let report = grad_check(&params, &x, &labels, args.eps, args.tol);
                println!(
                    "{arch}/{pool} seed {seed}: checked {} kink_skips {} resolution_skips {} max_rel {:.3e} -> {}",
                    report.checked,
                    report.kink_skips,
                    report.resolution_skips,
                    report.max_rel_err,
                    if report.passed() { "ok" } else { "FAILED" }
                );
                for f in &report.failures {
                    println!(
                        "  {}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                        f.tensor, f.index, f.analytic, f.numeric, f.rel_err
                    );
                }
                failed += report.failures.len();
            }
        }
    }
    if failed > 0 {
        return Err(CliError::Verification(format!(
            "{failed} gradient coordinates exceeded tolerance {}",
            args.tol
        )));
    }
    println!("all gradients within {:.1e}", args.tol);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_count_from_label_sets() {
        let a = [0usize, 1, 1];
        let b = [2usize, 0];
        assert_eq!(class_count(&[&a]).unwrap(), 2);
        assert_eq!(class_count(&[&a, &b]).unwrap(), 3);
        assert!(class_count(&[&[0usize, 0][..]]).is_err());
        assert!(class_count(&[]).is_err());
    }
}
