//! Command-line surface: train / attack / analyze / canonicalize / audit /
//! verify over serialized networks and MNIST or synthetic data.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use wssi::analysis::{self, BoundMode};
use wssi::attack::{self, AttackConfig, AttackKind};
use wssi::data::{self, Dataset, Split};
use wssi::experiment::{self, ExperimentConfig, Method, Preset};
use wssi::nn::Network;
use wssi::reg;
use wssi::scale_shift::{self, Normalizer};
use wssi::train::AdversarialTraining;
use wssi::verify::{self, Suite};

#[derive(Parser)]
#[command(name = "wssi", version, about = "Weight-scale-shift algebra, WEISSI regularizers, and adversarial-robustness experiments")]
struct Cli {
    /// Cap the worker thread count (kernels are deterministic either way).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a training experiment (multi-seed, with robustness evaluation).
    Train(TrainArgs),
    /// Attack a trained model and report clean vs adversarial accuracy.
    Attack(AttackArgs),
    /// Input-gradient analysis: histograms, bounds, residual checks.
    Analyze(AnalyzeArgs),
    /// Canonical form and minimized weight decay of a serialized network.
    Canonicalize(CanonArgs),
    /// Print every regularizer value for a serialized network.
    Audit(AuditArgs),
    /// Run the property suites; nonzero exit on any failure.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config JSON (overrides the preset flags).
    #[arg(long)]
    config: Option<PathBuf>,
    /// mlp-mnist | cnn-mnist | residual-toy
    #[arg(long, default_value = "mlp-mnist")]
    preset: String,
    /// wd | weissi | weissi_energy_only | weissi_complexity_only | none
    #[arg(long = "reg", default_value = "wd")]
    method: String,
    /// Adversarial training inside the delta = 0.01 l∞ ball.
    #[arg(long)]
    adv: bool,
    /// Inner maximizer for adversarial training: pgd10 | fgsm.
    #[arg(long, default_value = "pgd10")]
    adv_inner: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    /// Override the preset epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Cap train/test examples (smoke runs).
    #[arg(long)]
    limit_train: Option<usize>,
    #[arg(long)]
    limit_test: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    /// Output directory (default $WSSI_OUTPUT_ROOT/<preset>-<reg>[-adv]).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// fgsm | pgd
    #[arg(long, default_value = "pgd")]
    kind: String,
    #[arg(long, default_value_t = 0.03)]
    eps: f64,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    random_start: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate only the first N examples.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    limit: Option<usize>,
    /// Write the input-gradient-norm histogram CSV here.
    #[arg(long)]
    histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    /// Write the per-logit gradient bounds JSON here.
    #[arg(long)]
    bounds: Option<PathBuf>,
    /// Use the sqrt(width) gate bound instead of the width.
    #[arg(long)]
    tight: bool,
    /// Run the residual-chain expansion/bound check.
    #[arg(long)]
    residual_check: bool,
    #[arg(long, default_value = "convex_aggregation")]
    residual_mode: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CanonArgs {
    #[arg(long)]
    model: PathBuf,
    /// frobenius | lpq
    #[arg(long, default_value = "frobenius")]
    normalizer: String,
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    #[arg(long, default_value_t = 2.0)]
    q: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// algebra | gradients | bounds | all
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    wssi::tune_allocator();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        wssi::set_threads(n);
    }
    match cli.cmd {
        Cmd::Train(args) => cmd_train(args, cli.threads),
        Cmd::Attack(args) => cmd_attack(args),
        Cmd::Analyze(args) => cmd_analyze(args),
        Cmd::Canonicalize(args) => cmd_canonicalize(args),
        Cmd::Audit(args) => cmd_audit(args),
        Cmd::Verify(args) => cmd_verify(args),
    }
}

fn output_root() -> PathBuf {
    std::env::var_os("WSSI_OUTPUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn cmd_train(args: TrainArgs, threads: Option<usize>) -> Result<()> {
    let mut cfg: ExperimentConfig = match &args.config {
        Some(path) => serde_json::from_slice(
            &fs::read(path).with_context(|| format!("reading {}", path.display()))?,
        )?,
        None => {
            let preset: Preset = args.preset.parse()?;
            let method: Method = args.method.parse()?;
            let seeds: Vec<u64> = args
                .seeds
                .split(',')
                .map(|s| s.trim().parse::<u64>().context("seed list"))
                .collect::<Result<_>>()?;
            let out = args.out.clone().unwrap_or_else(|| {
                let adv = if args.adv { "-adv" } else { "" };
                output_root().join(format!("{}-{}{adv}", preset.tag(), method.label()))
            });
            let mut cfg =
                ExperimentConfig::from_preset(preset, method, args.adv, seeds, args.mnist_dir.clone(), out);
            if args.adv {
                cfg.train.adversarial = Some(match args.adv_inner.as_str() {
                    "pgd10" => AdversarialTraining::pgd10(0.01),
                    "fgsm" => AdversarialTraining::fgsm(0.01),
                    other => bail!("unknown inner attack `{other}`"),
                });
            }
            cfg
        }
    };
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if args.limit_train.is_some() {
        cfg.limit_train = args.limit_train;
    }
    if args.limit_test.is_some() {
        cfg.limit_test = args.limit_test;
    }
    if args.checkpoint_every.is_some() {
        cfg.checkpoint_every = args.checkpoint_every;
    }
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    if let Some(dir) = args.mnist_dir {
        cfg.mnist_dir = Some(dir);
    }
    let summary = experiment::run_experiment(&cfg, threads, args.quiet)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

/// Evaluation data for a loaded model: MNIST for image-shaped inputs, the
/// synthetic blob split for the toy presets.
fn eval_dataset(model: &Network, mnist_dir: Option<&PathBuf>, split: &str, limit: Option<usize>) -> Result<Dataset> {
    let split = match split {
        "train" => Split::Train,
        "test" => Split::Test,
        other => bail!("unknown split `{other}`"),
    };
    let ds = match model.input_shape() {
        [784] | [1, 28, 28] => {
            let dir = mnist_dir
                .cloned()
                .or_else(|| std::env::var_os("WSSI_MNIST_DIR").map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("data/mnist"));
            let ds = data::load_mnist_dir(&dir, split)?;
            if model.input_shape().len() == 3 {
                ds.to_chw(1, 28, 28)?
            } else {
                ds
            }
        }
        [_] => {
            let (train, test) = experiment::blob_split();
            match split {
                Split::Train => train,
                _ => test,
            }
        }
        other => bail!("no dataset source for input shape {other:?}"),
    };
    Ok(match limit {
        Some(n) => ds.take(n),
        None => ds,
    })
}

fn cmd_attack(args: AttackArgs) -> Result<()> {
    let net = Network::load(&args.model)?;
    let ds = eval_dataset(&net, args.mnist_dir.as_ref(), &args.split, args.limit)?;
    let mut cfg = match args.kind.as_str() {
        "fgsm" => AttackConfig::fgsm(args.eps),
        "pgd" => AttackConfig::pgd(args.eps, args.steps),
        other => bail!("unknown attack kind `{other}`"),
    };
    if let Some(s) = args.step_size {
        if cfg.kind == AttackKind::Pgd {
            cfg.step_size = s;
        }
    }
    cfg = cfg.with_random_start(args.random_start);
    let rep = attack::evaluate_robustness(&net, &ds, &cfg, args.seed, 100)?;
    let out = serde_json::json!({
        "clean_acc": rep.clean_accuracy,
        "adv_acc": rep.adversarial_accuracy,
        "eps": rep.epsilon,
        "kind": args.kind,
        "steps": cfg.steps,
        "step_size": cfg.step_size,
        "examples": ds.len(),
    });
    emit(&out, args.out.as_ref(), "attack")?;
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let net = Network::load(&args.model)?;
    let mut wrote = false;
    let mut combined = serde_json::Map::new();
    if args.histogram.is_some() || args.bounds.is_some() {
        let ds = eval_dataset(&net, args.mnist_dir.as_ref(), &args.split, args.limit)?;
        let report = analysis::grad_norm_histogram(&net, &ds, args.bins)?;
        if let Some(path) = &args.histogram {
            fs::write(path, report.histogram.to_csv())?;
            println!("histogram -> {}", path.display());
            wrote = true;
        }
        if let Some(path) = &args.bounds {
            let mut bounds = serde_json::Map::new();
            bounds.insert("logit_bounds".into(), serde_json::to_value(&report.logit_bounds)?);
            if args.tight {
                let tight: Option<Vec<f64>> = (0..net.output_dim())
                    .map(|j| analysis::gradient_bound(&net, j, true).ok())
                    .collect();
                bounds.insert("logit_bounds_tight".into(), serde_json::to_value(tight)?);
            }
            bounds.insert(
                "max_grad_norm".into(),
                serde_json::to_value(report.norms.iter().copied().fold(0.0f64, f64::max))?,
            );
            bounds.insert("examples".into(), serde_json::to_value(ds.len())?);
            fs::write(path, serde_json::to_vec_pretty(&bounds)?)?;
            println!("bounds -> {}", path.display());
            wrote = true;
        }
        combined.insert(
            "grad_norm_quantiles".into(),
            serde_json::json!({
                "p50": report.quantile(0.5),
                "p90": report.quantile(0.9),
                "max": report.quantile(1.0),
            }),
        );
    }
    if args.residual_check {
        let mode = match args.residual_mode.as_str() {
            "convex_aggregation" => BoundMode::ConvexAggregation,
            "standard" => BoundMode::Standard,
            other => bail!("unknown residual mode `{other}`"),
        };
        let d: usize = net.input_shape().iter().product();
        let probe = wssi::Tensor::new(
            net.input_shape().to_vec(),
            (0..d).map(|i| 0.1 + 0.8 * (i as f64) / d.max(1) as f64).collect(),
        )?;
        let rep = analysis::residual_bound_check(&net, &probe, mode)?;
        combined.insert("residual_check".into(), serde_json::to_value(&rep)?);
    }
    if !combined.is_empty() || !wrote {
        emit(&serde_json::Value::Object(combined), args.out.as_ref(), "analyze")?;
    }
    Ok(())
}

fn cmd_canonicalize(args: CanonArgs) -> Result<()> {
    let net = Network::load(&args.model)?;
    let normalizer = match args.normalizer.as_str() {
        "frobenius" => Normalizer::Frobenius,
        "lpq" => Normalizer::Lpq { p: args.p, q: args.q },
        other => bail!("unknown normalizer `{other}`"),
    };
    let canon = scale_shift::canonicalize(&net, normalizer)?;
    let norms_sq = scale_shift::layer_norms_sq(&net);
    let (minimized, gammas) = scale_shift::minimized_wd(&norms_sq)?;
    let out = serde_json::json!({
        "per_layer_norms": canon.per_layer_norms,
        "energy": canon.energy,
        "minimized_wd": minimized,
        "optimal_gammas": gammas.gammas(),
        "normalizer": normalizer,
    });
    emit(&out, args.out.as_ref(), "canonicalize")?;
    Ok(())
}

fn cmd_audit(args: AuditArgs) -> Result<()> {
    let net = Network::load(&args.model)?;
    let weissi = reg::weissi(&net, 1.0, 1.0).ok();
    let weissi_log = reg::weissi_log(&net, 1.0, 1.0).ok();
    let weissi_cnn = reg::weissi_cnn(&net, 1.0, 1.0).ok();
    let reg_json = |v: reg::RegValue| serde_json::json!({"energy": v.energy_term, "complexity": v.complexity_term});
    let out = serde_json::json!({
        "wd": reg::wd(&net),
        "lpq_11": reg::lpq_family(&net, 1.0, 1.0)?,
        "lpq_21": reg::lpq_family(&net, 2.0, 1.0)?,
        "weissi": weissi.map(reg_json),
        "weissi_log": weissi_log.map(reg_json),
        "weissi_cnn": weissi_cnn.map(reg_json),
        "layer_norms_sq": scale_shift::layer_norms_sq(&net),
        "param_count": net.params().iter().map(|p| p.numel()).sum::<usize>(),
    });
    emit(&out, args.out.as_ref(), "audit")?;
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    let suite = match args.suite.as_str() {
        "algebra" => Suite::Algebra,
        "gradients" => Suite::Gradients,
        "bounds" => Suite::Bounds,
        "all" => Suite::All,
        other => bail!("unknown suite `{other}`"),
    };
    let reports = verify::run(suite, args.seed, args.trials)?;
    let mut all_passed = true;
    for rep in &reports {
        for c in &rep.checks {
            println!(
                "[{}] {} {}: metric {:.3e} (threshold {:.3e}) — {}",
                rep.suite,
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.metric,
                c.threshold,
                c.detail
            );
        }
        all_passed &= rep.passed;
    }
    if let Some(path) = &args.out {
        fs::write(path, serde_json::to_vec_pretty(&reports)?)?;
        println!("report -> {}", path.display());
    }
    if !all_passed {
        std::process::exit(1);
    }
    Ok(())
}

fn emit(value: &serde_json::Value, out: Option<&PathBuf>, what: &str) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            fs::write(path, &text)?;
            println!("{what} -> {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}
