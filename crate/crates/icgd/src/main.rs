//! Command-line entry point: dataset generation, meta-training, evaluation,
//! and the numerical verification suites. Every command prints its effective
//! configuration (defaults expanded) so a run is reproducible from the log
//! alone, and embeds the same configuration in its output files.
//!
//! Exit codes: 0 success, 2 usage error, 3 numerical failure or divergence,
//! 4 verification assertion failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use icgd::attention::{EraseMode, ModelCheckpoint, ModelMode};
use icgd::datagen::{generate_dataset, read_dataset, write_dataset, GeneratorFamily, GeneratorSpec};
use icgd::kernels::KernelFamily;
use icgd::training::{train, TrainConfig};
use icgd::verify::{
    check_equivalence, check_stationarity, evaluate_metrics, mean_max_probability,
    weight_diagnostics, StationarityConfig,
};
use icgd::Error;

#[derive(Parser)]
#[command(name = "icgd", about = "in-context learning as functional gradient descent", version)]
struct Cli {
    /// Root seed for any stochastic command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; affects wall clock only, never results.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON config file; flags take precedence over its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path (main artifact of the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (JSON-lines plus a sidecar header).
    Gen(GenArgs),
    /// Meta-train a model and write a checkpoint plus a learning-curve CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset (top-1 accuracy and mean NLL).
    Eval(EvalArgs),
    /// Numerical verification suites.
    #[command(subcommand)]
    Verify(VerifyCommand),
}

#[derive(Args)]
struct GenArgs {
    /// rbf-mixture | quadrant | rot-invariant
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    contexts: Option<usize>,
    /// Covariate dimension (rot-invariant only; other families fix it).
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// gd | tf
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    /// linear | rbf | exponential | laplacian | softmax
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Training dataset (JSON-lines file written by `gen`).
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset for the eval columns of the curve CSV.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Run this many seeds and write per-seed outputs plus an aggregate.
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand)]
enum VerifyCommand {
    /// Constructed attention vs the explicit GD recursion.
    Equivalence(EquivalenceArgs),
    /// Monte-Carlo gradient of the restricted model at scaled-identity keys.
    Stationarity(StationarityArgs),
    /// Diagonality diagnostics of a trained free checkpoint.
    Diagnostics(EvalArgs),
    /// Top-1 / NLL metrics CSV for a checkpoint on a dataset.
    Metrics(EvalArgs),
    /// Best-achievable-accuracy bound on the quadrant configuration.
    Bound(BoundArgs),
}

#[derive(Args)]
struct EquivalenceArgs {
    /// Maximum GD depth checked (1..=layers).
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Use the finite-sharpness erasure head with this scale instead of the
    /// exact construction.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct StationarityArgs {
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long)]
    contexts: Option<usize>,
    /// Optionally check a checkpoint's accuracy against the bound.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

/// Config-file values keyed by flag name; flags override these, these
/// override built-in defaults.
struct FileConfig(BTreeMap<String, Value>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let map = match path {
            None => BTreeMap::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
                let value: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::usage(format!("bad config {}: {e}", p.display())))?;
                match value {
                    Value::Object(m) => m.into_iter().collect(),
                    _ => return Err(CliError::usage("config file must be a JSON object".into())),
                }
            }
        };
        Ok(FileConfig(map))
    }

    fn pick<T: Clone + serde::de::DeserializeOwned>(
        &self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T, CliError> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| CliError::usage(format!("config key `{key}`: {e}"))),
        }
    }
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: String) -> Self {
        CliError { code: 2, message }
    }

    fn assertion(message: String) -> Self {
        CliError { code: 4, message }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFinite(_) | Error::Diverged { .. } | Error::DimMismatch { .. } => 3,
            _ => 2,
        };
        CliError { code, message: e.to_string() }
    }
}

fn parse_kernel(name: &str) -> Result<KernelFamily, CliError> {
    match name {
        "linear" => Ok(KernelFamily::Linear),
        "rbf" => Ok(KernelFamily::Rbf),
        "exponential" => Ok(KernelFamily::Exponential),
        "laplacian" => Ok(KernelFamily::Laplacian),
        "softmax" => Ok(KernelFamily::Softmax),
        other => Err(CliError::usage(format!("unknown kernel `{other}`"))),
    }
}

fn echo_config(command: &str, cfg: &Value) {
    println!("effective-config {command} {cfg}");
}

fn out_path(cli_out: &Option<PathBuf>, default: &str) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text + "\n").map_err(Error::from)?;
    Ok(())
}

fn cmd_gen(cli: &Cli, args: &GenArgs) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let family = file.pick(args.family.clone(), "family", "rbf-mixture".to_string())?;
    let contexts = file.pick(args.contexts, "contexts", 2048)?;
    let seed = file.pick(cli.seed, "seed", 0)?;
    let mut spec = match family.as_str() {
        "rbf-mixture" => GeneratorSpec::rbf_mixture(seed),
        "quadrant" => GeneratorSpec::quadrant(seed),
        "rot-invariant" => {
            let d = file.pick(args.dim, "dim", 6)?;
            GeneratorSpec::rot_invariant(d, seed)
        }
        other => return Err(CliError::usage(format!("unknown family `{other}`"))),
    };
    if let Some(d) = args.dim {
        if spec.family == GeneratorFamily::RotInvariant {
            spec.d = d;
        } else if d != spec.d {
            return Err(CliError::usage(format!(
                "family `{family}` fixes dim={}, got --dim {d}",
                spec.d
            )));
        }
    }
    let cfg = json!({"family": family, "contexts": contexts, "seed": seed, "spec": spec});
    echo_config("gen", &cfg);
    let dataset = generate_dataset(&spec, contexts)?;
    let path = out_path(&cli.out, "dataset.jsonl");
    write_dataset(&path, &dataset)?;
    println!(
        "wrote {} contexts (C={}, d={}, d'={}, N={}, seed={}) to {}",
        contexts, spec.c, spec.d, spec.d_prime, spec.n, seed,
        path.display()
    );
    Ok(())
}

fn train_once(
    cfg: &TrainConfig,
    data: &icgd::datagen::Dataset,
    eval: Option<&icgd::datagen::Dataset>,
    ckpt_path: &Path,
    csv_path: &Path,
    effective: &Value,
) -> Result<(Option<f64>, Option<f64>), CliError> {
    let arch = icgd::attention::ArchMeta {
        d: data.header.spec.d,
        d_prime: data.header.spec.d_prime,
        c: data.header.spec.c,
        layers: cfg.layers,
        heads: 1,
    };
    let eval_ctx: &[icgd::gd_oracle::ContextSet] = eval.map(|d| d.contexts.as_slice()).unwrap_or(&[]);
    let report = train(cfg, &arch, &data.contexts, eval_ctx)?;
    if let Some(epoch) = report.diverged_at {
        // Keep the last finite checkpoint on disk, but signal the failure.
        report.final_checkpoint.save(ckpt_path)?;
        return Err(CliError::from(Error::Diverged { epoch }));
    }
    report.final_checkpoint.save(ckpt_path)?;
    let mut csv = report.to_csv();
    csv.push_str(&format!("# config {effective}\n"));
    std::fs::write(csv_path, csv).map_err(Error::from)?;
    let last = report.records.iter().rev().find(|r| r.eval_top1.is_some());
    Ok((last.and_then(|r| r.eval_top1), last.and_then(|r| r.eval_nll)))
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let model = file.pick(args.model.clone(), "model", "gd".to_string())?;
    let mode = match model.as_str() {
        "gd" => ModelMode::GdTrainable,
        "tf" => ModelMode::FreeTf,
        other => return Err(CliError::usage(format!("unknown model `{other}`"))),
    };
    let layers = file.pick(args.layers, "layers", 1)?;
    let kernel_name = file.pick(args.kernel.clone(), "kernel", "softmax".to_string())?;
    let kernel = parse_kernel(&kernel_name)?;
    let seed = file.pick(cli.seed, "seed", 0)?;
    let mut cfg = TrainConfig::new(mode, layers, kernel, seed);
    cfg.epochs = file.pick(args.epochs, "epochs", cfg.epochs)?;
    cfg.batch_size = file.pick(args.batch_size, "batch_size", cfg.batch_size)?;
    if let Some(lr) = file.pick(args.lr.map(Some), "lr", None)? {
        cfg.optimizer = icgd::training::OptimizerKind::Adam { lr };
    }
    cfg.validate()?;
    let seeds = file.pick(args.seeds, "seeds", 1)?;
    if seeds == 0 {
        return Err(CliError::usage("--seeds must be positive".into()));
    }

    let data = read_dataset(&args.data)?;
    let eval = args.eval_data.as_deref().map(read_dataset).transpose()?;
    let base = out_path(&cli.out, "model.json");
    let stem = base.with_extension("");
    let effective = json!({
        "model": model, "layers": layers, "kernel": kernel_name,
        "epochs": cfg.epochs, "batch_size": cfg.batch_size,
        "optimizer": cfg.optimizer, "seed": seed, "seeds": seeds,
        "data": args.data.display().to_string(),
    });
    echo_config("train", &effective);

    if seeds == 1 {
        let csv = stem.with_extension("curve.csv");
        let (top1, nll) = train_once(&cfg, &data, eval.as_ref(), &base, &csv, &effective)?;
        println!(
            "checkpoint {} curve {} eval_top1 {:?} eval_nll {:?}",
            base.display(), csv.display(), top1, nll
        );
        return Ok(());
    }

    let mut top1s = Vec::new();
    let mut nlls = Vec::new();
    for s in 0..seeds {
        let mut per_seed = cfg.clone();
        per_seed.init_seed = seed.wrapping_add(s as u64);
        let ckpt = stem.with_extension(format!("seed{s}.json"));
        let csv = stem.with_extension(format!("seed{s}.curve.csv"));
        let (top1, nll) = train_once(&per_seed, &data, eval.as_ref(), &ckpt, &csv, &effective)?;
        if let (Some(t), Some(n)) = (top1, nll) {
            top1s.push(t);
            nlls.push(n);
        }
        println!("seed {s} checkpoint {} eval_top1 {:?}", ckpt.display(), top1);
    }
    let agg = stem.with_extension("aggregate.json");
    let summary = json!({
        "config": effective,
        "seeds": seeds,
        "eval_top1": {"mean": mean(&top1s), "std": std_dev(&top1s)},
        "eval_nll": {"mean": mean(&nlls), "std": std_dev(&nlls)},
    });
    write_json(&agg, &summary)?;
    println!(
        "aggregate {} top1 {:.4} +/- {:.4}",
        agg.display(),
        mean(&top1s).unwrap_or(f64::NAN),
        std_dev(&top1s).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn std_dev(v: &[f64]) -> Option<f64> {
    let m = mean(v)?;
    if v.len() < 2 {
        return Some(0.0);
    }
    Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

fn metrics_csv(ckpt: &ModelCheckpoint, data_path: &Path) -> Result<(f64, f64, String), CliError> {
    let data = read_dataset(data_path)?;
    let (top1, nll) = evaluate_metrics(ckpt, &data.contexts)?;
    let csv = format!("metric,value\ntop1,{top1}\nnll,{nll}\n");
    Ok((top1, nll, csv))
}

fn cmd_eval(cli: &Cli, args: &EvalArgs, as_csv: bool) -> Result<(), CliError> {
    let effective = json!({
        "ckpt": args.ckpt.display().to_string(),
        "data": args.data.display().to_string(),
    });
    echo_config(if as_csv { "verify metrics" } else { "eval" }, &effective);
    let ckpt = ModelCheckpoint::load(&args.ckpt)?;
    let (top1, nll, csv) = metrics_csv(&ckpt, &args.data)?;
    let path = out_path(&cli.out, "metrics.csv");
    std::fs::write(&path, csv).map_err(Error::from)?;
    println!("top1 {top1} nll {nll} -> {}", path.display());
    Ok(())
}

fn cmd_verify_equivalence(cli: &Cli, args: &EquivalenceArgs) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let max_layers = file.pick(args.layers, "layers", 6)?;
    let trials = file.pick(args.trials, "trials", 100)?;
    let tol = file.pick(args.tol, "tol", 1e-9)?;
    let seed = file.pick(cli.seed, "seed", 0)?;
    let lambda = file.pick(args.lambda.map(Some), "lambda", None)?;
    let effective = json!({
        "layers": max_layers, "trials": trials, "tol": tol,
        "lambda": lambda, "seed": seed,
    });
    echo_config("verify equivalence", &effective);
    let erase = match lambda {
        None => EraseMode::ExactDelta,
        Some(l) => EraseMode::FiniteLambda(l),
    };
    let layers: Vec<usize> = (1..=max_layers).collect();
    let kernels = [
        KernelFamily::Linear,
        KernelFamily::Rbf,
        KernelFamily::Laplacian,
        KernelFamily::Softmax,
    ];
    let report = check_equivalence(&layers, &kernels, trials, tol, erase, seed)?;
    let path = out_path(&cli.out, "equivalence.json");
    write_json(&path, &json!({"config": effective, "report": report}))?;
    for e in &report.entries {
        println!(
            "layers {} kernel {:?} max_dev {:.3e}",
            e.layers, e.kernel, e.max_relative_deviation
        );
    }
    println!("single-step max_dev {:.3e}", report.single_step_deviation);
    if report.pass {
        println!("equivalence PASS (tol {tol:.1e})");
        Ok(())
    } else {
        Err(CliError::assertion(format!("equivalence exceeded tol {tol:.1e}")))
    }
}

fn cmd_verify_stationarity(cli: &Cli, args: &StationarityArgs) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let samples = file.pick(args.samples, "samples", 10_000)?;
    let d = file.pick(args.dim, "dim", 6)?;
    let seed = file.pick(cli.seed, "seed", 0)?;
    let effective = json!({"samples": samples, "dim": d, "seed": seed});
    echo_config("verify stationarity", &effective);
    let report = check_stationarity(&StationarityConfig::new(d, samples, seed))?;
    let path = out_path(&cli.out, "stationarity.json");
    write_json(&path, &json!({"config": effective, "report": report}))?;
    for layer in &report.layers {
        println!(
            "layer {} offdiag |z|<=3: {:.1}% grad_norm {:.3e} (se {:.3e})",
            layer.layer,
            100.0 * layer.offdiag_within_3sigma,
            layer.grad_norm,
            layer.grad_norm_se
        );
    }
    if report.pass_offdiag && report.pass_norm {
        println!("stationarity PASS");
        Ok(())
    } else {
        Err(CliError::assertion("stationarity criteria not met".into()))
    }
}

fn cmd_verify_diagnostics(cli: &Cli, args: &EvalArgs) -> Result<(), CliError> {
    let effective = json!({"ckpt": args.ckpt.display().to_string()});
    echo_config("verify diagnostics", &effective);
    let ckpt = ModelCheckpoint::load(&args.ckpt)?;
    let diag = weight_diagnostics(&ckpt)?;
    let path = out_path(&cli.out, "diagnostics.json");
    write_json(&path, &json!({"config": effective, "report": diag}))?;
    println!(
        "q_diag_ratio {:.4} ed_diag_ratio {:.4} -> {}",
        diag.q_diag_ratio,
        diag.ed_diag_ratio,
        path.display()
    );
    Ok(())
}

fn cmd_verify_bound(cli: &Cli, args: &BoundArgs) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let contexts = file.pick(args.contexts, "contexts", 2048)?;
    let seed = file.pick(cli.seed, "seed", 0)?;
    let effective = json!({
        "contexts": contexts, "seed": seed,
        "ckpt": args.ckpt.as_ref().map(|p| p.display().to_string()),
    });
    echo_config("verify bound", &effective);
    let spec = GeneratorSpec::quadrant(seed);
    let data = generate_dataset(&spec, contexts)?;
    let bound = mean_max_probability(&data.contexts, &data.header.w_e)?;
    println!("quadrant mean max probability {bound:.4}");
    let mut report = json!({"config": effective, "bound": bound});
    let mut pass = bound < 0.6;
    if let Some(ckpt_path) = &args.ckpt {
        let ckpt = ModelCheckpoint::load(ckpt_path)?;
        let (top1, _) = evaluate_metrics(&ckpt, &data.contexts)?;
        // binomial sampling error of the accuracy estimate
        let sigma = (top1.max(1e-12) * (1.0 - top1).max(1e-12) / contexts as f64).sqrt();
        println!("checkpoint top1 {top1:.4} vs bound + 3 sigma {:.4}", bound + 3.0 * sigma);
        report["top1"] = json!(top1);
        report["sigma"] = json!(sigma);
        pass = pass && top1 <= bound + 3.0 * sigma;
    }
    let path = out_path(&cli.out, "bound.json");
    write_json(&path, &report)?;
    if pass {
        println!("bound PASS");
        Ok(())
    } else {
        Err(CliError::assertion("accuracy bound violated".into()))
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Gen(args) => cmd_gen(cli, args),
        Command::Train(args) => cmd_train(cli, args),
        Command::Eval(args) => cmd_eval(cli, args, false),
        Command::Verify(VerifyCommand::Equivalence(args)) => cmd_verify_equivalence(cli, args),
        Command::Verify(VerifyCommand::Stationarity(args)) => cmd_verify_stationarity(cli, args),
        Command::Verify(VerifyCommand::Diagnostics(args)) => cmd_verify_diagnostics(cli, args),
        Command::Verify(VerifyCommand::Metrics(args)) => cmd_eval(cli, args, true),
        Command::Verify(VerifyCommand::Bound(args)) => cmd_verify_bound(cli, args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
