//! Experiment presets and orchestration: architectures and training
//! protocols for the MNIST and toy experiments, multi-seed runs with
//! robustness evaluation, and the summary/manifest files that make a run
//! reproducible. The CLI `train` subcommand is a thin wrapper over this.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{self, AttackConfig, AttackKind};
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{self, InitScheme, Layer, Network};
use crate::reg::RegularizerConfig;
use crate::tensor::Tensor;
use crate::train::{self, AdversarialTraining, LrDecay, TrainConfig, TrainHooks};

pub const BLOBS_TOTAL: usize = 900;
pub const BLOBS_TRAIN: usize = 600;
pub const BLOBS_SEED: u64 = 1234;
/// Per-epoch clean accuracy is tracked on this many held-out examples; the
/// final summary numbers always use the full test split.
pub const EPOCH_EVAL_EXAMPLES: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    MlpMnist,
    CnnMnist,
    ResidualToy,
    Custom,
}

impl Preset {
    pub fn tag(&self) -> &'static str {
        match self {
            Preset::MlpMnist => "mlp-mnist",
            Preset::CnnMnist => "cnn-mnist",
            Preset::ResidualToy => "residual-toy",
            Preset::Custom => "custom",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mlp-mnist" => Preset::MlpMnist,
            "cnn-mnist" => Preset::CnnMnist,
            "residual-toy" => Preset::ResidualToy,
            "custom" => Preset::Custom,
            other => {
                return Err(Error::ConfigInvalid {
                    field: "preset",
                    message: format!("unknown preset `{other}`"),
                })
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Wd,
    Weissi,
    /// Energy term only (complexity coefficient zeroed).
    WeissiEnergyOnly,
    /// Complexity term only (energy coefficient zeroed).
    WeissiComplexityOnly,
    None,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Wd => "wd",
            Method::Weissi => "weissi",
            Method::WeissiEnergyOnly => "weissi_energy_only",
            Method::WeissiComplexityOnly => "weissi_complexity_only",
            Method::None => "none",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "wd" => Method::Wd,
            "weissi" => Method::Weissi,
            "weissi_energy_only" => Method::WeissiEnergyOnly,
            "weissi_complexity_only" => Method::WeissiComplexityOnly,
            "none" => Method::None,
            other => {
                return Err(Error::ConfigInvalid {
                    field: "method",
                    message: format!("unknown regularizer method `{other}`"),
                })
            }
        })
    }
}

/// Regularizer coefficients for a preset/method pair: lambda_wd = 1e-4 for
/// weight decay; lambda_we = 1e-6, lambda_wc = 1e-5 for WEISSI at MNIST
/// scale. The shallow MNIST networks use the raw weight-energy product;
/// the deeper residual chain takes the log form, whose energy stays finite
/// as the per-layer product grows with depth.
pub fn regularizer(preset: Preset, method: Method) -> RegularizerConfig {
    let (le, lc) = (1e-6, 1e-5);
    let weissi = |le: f64, lc: f64| match preset {
        Preset::ResidualToy => RegularizerConfig::weissi_log(if le > 0.0 { 1e-4 } else { 0.0 }, lc),
        _ => RegularizerConfig::weissi(le, lc),
    };
    match method {
        Method::Wd => RegularizerConfig::wd(1e-4),
        Method::Weissi => weissi(le, lc),
        Method::WeissiEnergyOnly => weissi(le, 0.0),
        Method::WeissiComplexityOnly => weissi(0.0, lc),
        Method::None => RegularizerConfig::none(),
    }
}

/// Zero-initialized architecture for a preset: the 784-1024-1024-10 MLP,
/// the two-conv-layer CNN (128 filters of 3x3, stride 1), or the synthetic
/// residual chain with convex aggregation.
pub fn architecture(preset: Preset) -> Result<Network> {
    match preset {
        Preset::MlpMnist => nn::mlp(&[784, 1024, 1024, 10], true),
        Preset::CnnMnist => Network::new(
            vec![1, 28, 28],
            vec![
                Layer::Conv2d {
                    kernel: Tensor::zeros(&[3, 3, 1, 128]),
                    bias: Some(Tensor::zeros(&[128])),
                    stride: 1,
                    padding: 1,
                },
                Layer::Relu,
                Layer::Conv2d {
                    kernel: Tensor::zeros(&[3, 3, 128, 128]),
                    bias: Some(Tensor::zeros(&[128])),
                    stride: 1,
                    padding: 1,
                },
                Layer::Relu,
                Layer::MaxPool2d { window: 2, stride: 2 },
                Layer::Flatten,
                Layer::Dense {
                    w: Tensor::zeros(&[10, 128 * 14 * 14]),
                    bias: Some(Tensor::zeros(&[10])),
                },
            ],
        ),
        Preset::ResidualToy => nn::residual_chain(16, 16, 32, 3, 3, true, false, false),
        Preset::Custom => Err(Error::ConfigInvalid {
            field: "preset",
            message: "custom preset requires an explicit architecture file".into(),
        }),
    }
}

/// He everywhere: fixup-like init zeroes each block's W2, which the
/// product-form regularizers reject (zero norm factor), so it stays an
/// opt-in scheme rather than a preset default.
pub fn init_scheme(_preset: Preset) -> InitScheme {
    InitScheme::He
}

/// Training protocol for a preset: 60 epochs, batch 100, momentum 0.9,
/// lr 0.1 with a x0.1 step at epoch 40 for the MNIST networks.
pub fn train_config(preset: Preset, method: Method, seed: u64, adversarial: bool) -> TrainConfig {
    let reg = regularizer(preset, method);
    let adversarial = adversarial.then(|| AdversarialTraining::pgd10(0.01));
    match preset {
        Preset::MlpMnist | Preset::CnnMnist => TrainConfig {
            epochs: 60,
            batch_size: 100,
            lr: 0.1,
            momentum: 0.9,
            lr_decay: Some(LrDecay {
                interval_epochs: 40,
                factor: 0.1,
            }),
            reg,
            adversarial,
            seed,
            allow_partial_batch: false,
        },
        Preset::ResidualToy | Preset::Custom => TrainConfig {
            epochs: 40,
            batch_size: 30,
            lr: 0.05,
            momentum: 0.9,
            lr_decay: None,
            reg,
            adversarial,
            seed,
            allow_partial_batch: true,
        },
    }
}

/// Evaluation attacks: FGSM and PGD-10 at epsilon 0.03.
pub fn default_attack_suite() -> Vec<AttackConfig> {
    vec![AttackConfig::fgsm(0.03), AttackConfig::pgd10(0.03)]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub method: Method,
    #[serde(default)]
    pub adversarial: bool,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub attack_suite: Vec<AttackConfig>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub mnist_dir: Option<PathBuf>,
    /// Caps on train/test examples (smoke runs only; full sets when absent).
    #[serde(default)]
    pub limit_train: Option<usize>,
    #[serde(default)]
    pub limit_test: Option<usize>,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_preset(
        preset: Preset,
        method: Method,
        adversarial: bool,
        seeds: Vec<u64>,
        mnist_dir: Option<PathBuf>,
        output_dir: PathBuf,
    ) -> Self {
        ExperimentConfig {
            preset,
            method,
            adversarial,
            train: train_config(preset, method, seeds.first().copied().unwrap_or(1), adversarial),
            seeds,
            attack_suite: default_attack_suite(),
            output_dir,
            mnist_dir,
            limit_train: None,
            limit_test: None,
            checkpoint_every: None,
        }
    }
}

/// The computation-identifying view of a config: everything that affects
/// results, none of the filesystem paths.
#[derive(Serialize)]
struct HashView<'a> {
    preset: Preset,
    method: Method,
    adversarial: bool,
    seeds: &'a [u64],
    train: &'a TrainConfig,
    attack_suite: &'a [AttackConfig],
    limit_train: Option<usize>,
    limit_test: Option<usize>,
}

pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let view = HashView {
        preset: cfg.preset,
        method: cfg.method,
        adversarial: cfg.adversarial,
        seeds: &cfg.seeds,
        train: &cfg.train,
        attack_suite: &cfg.attack_suite,
        limit_train: cfg.limit_train,
        limit_test: cfg.limit_test,
    };
    let canonical = serde_json::to_string(&view)?;
    let mut h = Sha256::new();
    h.update(canonical.as_bytes());
    Ok(format!("{:x}", h.finalize()))
}

pub fn attack_label(cfg: &AttackConfig) -> String {
    match cfg.kind {
        AttackKind::Fgsm => format!("fgsm@{}", cfg.epsilon),
        AttackKind::Pgd => format!("pgd{}@{}", cfg.steps, cfg.epsilon),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub clean: f64,
    pub attacks: Vec<(String, f64)>,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub preset: Preset,
    pub method: Method,
    pub adversarial: bool,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub clean: MetricStat,
    pub attacks: Vec<(String, MetricStat)>,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub threads: Option<usize>,
}

fn stat(values: &[f64]) -> MetricStat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MetricStat {
        mean,
        std: var.sqrt(),
        per_seed: values.to_vec(),
    }
}

/// Train/test pair for a preset. MNIST presets read the IDX files; the toy
/// preset splits one synthetic blob draw.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match cfg.preset {
        Preset::MlpMnist | Preset::CnnMnist => {
            let dir = cfg
                .mnist_dir
                .clone()
                .or_else(|| std::env::var_os("WSSI_MNIST_DIR").map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("data/mnist"));
            let mut train = data::load_mnist_dir(&dir, Split::Train)?;
            let mut test = data::load_mnist_dir(&dir, Split::Test)?;
            if let Some(n) = cfg.limit_train {
                train = train.take(n);
            }
            if let Some(n) = cfg.limit_test {
                test = test.take(n);
            }
            if cfg.preset == Preset::CnnMnist {
                train = train.to_chw(1, 28, 28)?;
                test = test.to_chw(1, 28, 28)?;
            }
            Ok((train, test))
        }
        Preset::ResidualToy | Preset::Custom => Ok(blob_split()),
    }
}

/// One fixed blob draw split into train/test (identical class means).
pub fn blob_split() -> (Dataset, Dataset) {
    let all = data::synthetic_blobs(BLOBS_TOTAL, 16, 3, BLOBS_SEED);
    let train_idx: Vec<usize> = (0..BLOBS_TRAIN).collect();
    let test_idx: Vec<usize> = (BLOBS_TRAIN..BLOBS_TOTAL).collect();
    let (ti, tl) = all.gather(&train_idx);
    let (vi, vl) = all.gather(&test_idx);
    (
        Dataset {
            images: ti,
            labels: tl,
            num_classes: 3,
            split: Split::Train,
        },
        Dataset {
            images: vi,
            labels: vl,
            num_classes: 3,
            split: Split::Test,
        },
    )
}

/// Train one seed and evaluate the attack suite on the full test split.
pub fn run_seed(
    cfg: &ExperimentConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    seed: u64,
    quiet: bool,
) -> Result<(Network, SeedResult, train::TrainLog)> {
    let mut net = architecture(cfg.preset)?;
    net.init(init_scheme(cfg.preset), seed);
    let mut tc: TrainConfig = cfg.train;
    tc.seed = seed;
    if cfg.adversarial && tc.adversarial.is_none() {
        tc.adversarial = Some(AdversarialTraining::pgd10(0.01));
    }
    if !cfg.adversarial {
        tc.adversarial = None;
    }

    let seed_dir = cfg.output_dir.join(format!("seed_{seed}"));
    fs::create_dir_all(&seed_dir)?;
    let progress = |r: &train::EpochRecord| {
        if !quiet {
            println!(
                "[{} {} seed {seed}] epoch {:>3} loss {:.4} acc {:.4} lr {:.4}",
                cfg.preset.tag(),
                cfg.method.label(),
                r.epoch,
                r.train_loss,
                r.clean_acc,
                r.lr
            );
        }
    };
    let hooks = TrainHooks {
        checkpoint: cfg.checkpoint_every.map(|every| (seed_dir.as_path(), every)),
        progress: Some(&progress),
    };
    let epoch_eval = test_ds.take(EPOCH_EVAL_EXAMPLES);
    let log = train::train_with(&mut net, train_ds, &tc, Some(&epoch_eval), hooks)?;
    fs::write(seed_dir.join("metrics.csv"), log.to_csv())?;
    let ckpt = seed_dir.join("final.wssi");
    net.save(&ckpt)?;

    let clean = attack::accuracy(&net, test_ds, 200)?;
    let mut attacks = Vec::new();
    for a in &cfg.attack_suite {
        let rep = attack::evaluate_robustness(&net, test_ds, a, seed, 100)?;
        attacks.push((attack_label(a), rep.adversarial_accuracy));
    }
    Ok((
        net,
        SeedResult {
            seed,
            clean,
            attacks,
            checkpoint: ckpt,
        },
        log,
    ))
}

/// Full experiment: all seeds, aggregation, summary + manifest on disk.
pub fn run_experiment(cfg: &ExperimentConfig, threads: Option<usize>, quiet: bool) -> Result<Summary> {
    fs::create_dir_all(&cfg.output_dir)?;
    let hash = config_hash(cfg)?;
    fs::write(cfg.output_dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    write_manifest(&cfg.output_dir, "train", &hash, &cfg.seeds, threads)?;

    let (train_ds, test_ds) = load_datasets(cfg)?;
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let (_, result, _) = run_seed(cfg, &train_ds, &test_ds, seed, quiet)?;
        per_seed.push(result);
    }

    let clean = stat(&per_seed.iter().map(|r| r.clean).collect::<Vec<_>>());
    let mut attacks = Vec::new();
    for (i, a) in cfg.attack_suite.iter().enumerate() {
        let vals: Vec<f64> = per_seed.iter().map(|r| r.attacks[i].1).collect();
        attacks.push((attack_label(a), stat(&vals)));
    }
    let summary = Summary {
        preset: cfg.preset,
        method: cfg.method,
        adversarial: cfg.adversarial,
        config_hash: hash,
        seeds: cfg.seeds.clone(),
        clean,
        attacks,
        per_seed,
    };
    fs::write(
        cfg.output_dir.join("summary.json"),
        serde_json::to_vec_pretty(&summary)?,
    )?;
    Ok(summary)
}

/// Load a cached summary if its config hash matches, else run and cache.
pub fn ensure_run(cfg: &ExperimentConfig, quiet: bool) -> Result<Summary> {
    let expected = config_hash(cfg)?;
    let path = cfg.output_dir.join("summary.json");
    if let Ok(bytes) = fs::read(&path) {
        if let Ok(summary) = serde_json::from_slice::<Summary>(&bytes) {
            if summary.config_hash == expected {
                return Ok(summary);
            }
        }
    }
    run_experiment(cfg, None, quiet)
}

pub fn write_manifest(dir: &Path, command: &str, hash: &str, seeds: &[u64], threads: Option<usize>) -> Result<()> {
    let manifest = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: hash.to_string(),
        seeds: seeds.to_vec(),
        threads,
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_round_trips() {
        for p in [Preset::MlpMnist, Preset::CnnMnist, Preset::ResidualToy] {
            assert_eq!(Preset::from_str(p.tag()).unwrap(), p);
        }
        assert!(Preset::from_str("nope").is_err());
    }

    #[test]
    fn preset_regularizers_mirror_protocol() {
        let wd = regularizer(Preset::MlpMnist, Method::Wd);
        assert_eq!(wd.lambda_wd, 1e-4);
        let we = regularizer(Preset::MlpMnist, Method::Weissi);
        assert_eq!((we.lambda_e, we.lambda_c), (1e-6, 1e-5));
        let tc = train_config(Preset::MlpMnist, Method::Wd, 1, false);
        assert_eq!((tc.epochs, tc.batch_size), (60, 100));
        assert_eq!(tc.lr, 0.1);
        assert_eq!(tc.momentum, 0.9);
    }

    #[test]
    fn mlp_preset_matches_architecture() {
        let net = architecture(Preset::MlpMnist).unwrap();
        let dims: Vec<usize> = net
            .weights()
            .iter()
            .map(|w| w.tensor.shape()[0])
            .collect();
        assert_eq!(dims, vec![1024, 1024, 10]);
        assert_eq!(net.input_dim(), 784);
    }

    #[test]
    fn cnn_preset_shapes() {
        let net = architecture(Preset::CnnMnist).unwrap();
        assert_eq!(net.output_dim(), 10);
        let kinds: Vec<_> = net.weights().iter().map(|w| w.kind).collect();
        assert_eq!(
            kinds,
            vec![
                crate::nn::WeightKind::Conv,
                crate::nn::WeightKind::Conv,
                crate::nn::WeightKind::Dense
            ]
        );
    }

    #[test]
    fn config_hash_ignores_paths_but_not_protocol() {
        let mut a = ExperimentConfig::from_preset(
            Preset::ResidualToy,
            Method::Wd,
            false,
            vec![1],
            None,
            PathBuf::from("/tmp/a"),
        );
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/tmp/elsewhere");
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        a.train.epochs += 1;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }

    #[test]
    fn toy_experiment_end_to_end_with_cache() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::from_preset(
            Preset::ResidualToy,
            Method::Weissi,
            false,
            vec![5],
            None,
            dir.path().join("run"),
        );
        cfg.train.epochs = 6;
        let s1 = ensure_run(&cfg, true).unwrap();
        assert!(s1.clean.mean > 0.5, "toy run should learn: {}", s1.clean.mean);
        assert!(cfg.output_dir.join("summary.json").exists());
        assert!(cfg.output_dir.join("manifest.json").exists());
        assert!(cfg.output_dir.join("seed_5/final.wssi").exists());
        assert!(cfg.output_dir.join("seed_5/metrics.csv").exists());
        // second call reuses the cache (bit-identical summary)
        let s2 = ensure_run(&cfg, true).unwrap();
        assert_eq!(
            serde_json::to_string(&s1).unwrap(),
            serde_json::to_string(&s2).unwrap()
        );
    }
}
