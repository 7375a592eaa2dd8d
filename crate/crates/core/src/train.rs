//! Standard and adversarial training with the momentum optimizer and
//! analytic regularizer gradients.
//!
//! One training context owns its network and optimizer state; parameter
//! updates are strictly sequential. All randomness (shuffling, inner-attack
//! starts) derives from the config seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::reg::{self, RegularizerConfig};
use crate::rng;
use crate::tape::{Reduction, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LrDecay {
    pub interval_epochs: usize,
    pub factor: f64,
}

/// Inner-maximization settings for adversarial training: craft each batch
/// inside the l∞ ball of radius `delta` before the gradient step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdversarialTraining {
    pub delta: f64,
    pub inner: AttackConfig,
}

impl AdversarialTraining {
    /// Madry-style default: PGD-10 with random start inside the ball.
    pub fn pgd10(delta: f64) -> Self {
        AdversarialTraining {
            delta,
            inner: AttackConfig::pgd(delta, 10).with_random_start(true),
        }
    }

    /// Cheaper single-step variant.
    pub fn fgsm(delta: f64) -> Self {
        AdversarialTraining {
            delta,
            inner: AttackConfig::fgsm(delta),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: Option<LrDecay>,
    pub reg: RegularizerConfig,
    pub adversarial: Option<AdversarialTraining>,
    pub seed: u64,
    pub allow_partial_batch: bool,
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::ConfigInvalid {
                field: "batch_size",
                message: "must be >= 1".into(),
            });
        }
        if !self.allow_partial_batch && dataset_len % self.batch_size != 0 {
            return Err(Error::ConfigInvalid {
                field: "batch_size",
                message: format!(
                    "{} examples do not divide into batches of {}; set allow_partial_batch",
                    dataset_len, self.batch_size
                ),
            });
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::ConfigInvalid {
                field: "lr",
                message: format!("got {}", self.lr),
            });
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::ConfigInvalid {
                field: "momentum",
                message: format!("must be in [0,1), got {}", self.momentum),
            });
        }
        self.reg.validate()?;
        if let Some(adv) = &self.adversarial {
            if adv.delta < 0.0 {
                return Err(Error::ConfigInvalid {
                    field: "adversarial.delta",
                    message: format!("got {}", adv.delta),
                });
            }
            let mut inner = adv.inner;
            inner.epsilon = adv.delta;
            if inner.kind == attack::AttackKind::Fgsm {
                inner.step_size = adv.delta;
            }
            inner.validate()?;
        }
        Ok(())
    }
}

/// Classic momentum update: v <- m·v + g; theta <- theta - lr·v.
pub struct MomentumSgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl MomentumSgd {
    pub fn new(net: &Network, momentum: f64) -> Self {
        MomentumSgd {
            momentum,
            velocity: net.params().iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepMetrics {
    pub loss: f64,
    pub data_loss: f64,
    pub reg: reg::RegValue,
}

/// One momentum step on a batch: gradients of the mean cross-entropy plus
/// the analytic regularizer gradient.
pub fn train_step(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    opt: &mut MomentumSgd,
    lr: f64,
) -> Result<StepMetrics> {
    let tape = Tape::new();
    let param_vars = net.stage_params(&tape, true);
    let xv = tape.leaf(x.clone(), false);
    let logits = net.trace(&tape, &param_vars, xv)?;
    let loss_var = tape.softmax_cross_entropy(logits, labels, Reduction::Mean)?;
    let data_loss = tape.value(loss_var).item();
    tape.backward(loss_var)?;

    let mut grads: Vec<Tensor> = param_vars
        .iter()
        .map(|&v| tape.grad(v).expect("staged param receives gradient"))
        .collect();

    let reg_val = reg::reg_value(net, &cfg.reg)?;
    if cfg.reg.kind != reg::RegKind::None {
        let reg_grads = reg::reg_grad(net, &cfg.reg)?;
        for (wi, &pi) in net.weight_param_indices().iter().enumerate() {
            let g = &mut grads[pi];
            for (gv, &rv) in g.data_mut().iter_mut().zip(reg_grads[wi].data()) {
                *gv += rv;
            }
        }
    }

    let loss = data_loss + reg_val.total;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            step: 0,
            value: loss,
        });
    }
    opt.step(net.params_mut(), &grads, lr);
    Ok(StepMetrics {
        loss,
        data_loss,
        reg: reg_val,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub data_loss: f64,
    pub reg_energy: f64,
    pub reg_complexity: f64,
    pub reg_total: f64,
    pub clean_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,train_loss,data_loss,reg_energy,reg_complexity,reg_total,clean_acc,lr\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.data_loss, r.reg_energy, r.reg_complexity, r.reg_total, r.clean_acc, r.lr
            ));
        }
        out
    }
}

/// Optional side effects of an epoch: checkpointing and progress reporting.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub checkpoint: Option<(&'a Path, usize)>,
    pub progress: Option<&'a dyn Fn(&EpochRecord)>,
}

pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig, eval: Option<&Dataset>) -> Result<TrainLog> {
    train_with(net, data, cfg, eval, TrainHooks::default())
}

/// Adversarial training: requires `cfg.adversarial`; each batch is replaced
/// by examples crafted inside the delta-ball before the gradient step. The
/// regularizer applies to the outer minimization only.
pub fn adv_train(net: &mut Network, data: &Dataset, cfg: &TrainConfig, eval: Option<&Dataset>) -> Result<TrainLog> {
    if cfg.adversarial.is_none() {
        return Err(Error::ConfigInvalid {
            field: "adversarial",
            message: "adv_train requires an adversarial config".into(),
        });
    }
    train(net, data, cfg, eval)
}

pub fn train_with(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    eval: Option<&Dataset>,
    hooks: TrainHooks<'_>,
) -> Result<TrainLog> {
    cfg.validate(data.len())?;
    let inner_attack = cfg.adversarial.map(|adv| {
        let mut inner = adv.inner;
        inner.epsilon = adv.delta;
        if inner.kind == attack::AttackKind::Fgsm {
            inner.step_size = adv.delta;
        }
        inner
    });
    let mut opt = MomentumSgd::new(net, cfg.momentum);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let lr = match cfg.lr_decay {
            Some(d) if d.interval_epochs > 0 => cfg.lr * d.factor.powi((epoch / d.interval_epochs) as i32),
            _ => cfg.lr,
        };
        let shuffle = rng::stream_indexed(cfg.seed, "shuffle", epoch as u64);
        let mut loss_sum = 0.0;
        let mut data_loss_sum = 0.0;
        let mut steps = 0usize;
        for (bi, (x, labels)) in batches(data, cfg.batch_size, Some(shuffle)).enumerate() {
            let x = match &inner_attack {
                Some(inner) => {
                    let ids: Vec<u64> = (0..labels.len() as u64)
                        .map(|i| ((epoch as u64) << 40) | ((bi as u64) << 20) | i)
                        .collect();
                    attack::attack_batch(net, &x, &labels, inner, cfg.seed, Some(&ids))?
                }
                None => x,
            };
            let metrics = train_step(net, &x, &labels, cfg, &mut opt, lr).map_err(|e| match e {
                Error::NonFiniteLoss { value, .. } => Error::NonFiniteLoss {
                    epoch,
                    step: bi,
                    value,
                },
                other => other,
            })?;
            loss_sum += metrics.loss;
            data_loss_sum += metrics.data_loss;
            steps += 1;
        }
        let reg_val = reg::reg_value(net, &cfg.reg)?;
        let clean_acc = attack::accuracy(net, eval.unwrap_or(data), 256)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / steps.max(1) as f64,
            data_loss: data_loss_sum / steps.max(1) as f64,
            reg_energy: reg_val.energy_term,
            reg_complexity: reg_val.complexity_term,
            reg_total: reg_val.total,
            clean_acc,
            lr,
        };
        if let Some(progress) = hooks.progress {
            progress(&record);
        }
        if let Some((dir, every)) = hooks.checkpoint {
            if every > 0 && (epoch + 1) % every == 0 {
                net.save(&dir.join(format!("epoch_{:03}.wssi", epoch + 1)))?;
            }
        }
        log.epochs.push(record);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::nn::{self, InitScheme};
    use crate::reg::RegularizerConfig;

    fn base_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 5,
            batch_size: 20,
            lr: 0.2,
            momentum: 0.9,
            lr_decay: None,
            reg: RegularizerConfig::none(),
            adversarial: None,
            seed,
            allow_partial_batch: true,
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let ds = synthetic_blobs(40, 4, 2, 1);
        let mut net = nn::mlp(&[4, 8, 2], true).unwrap();
        net.init(InitScheme::He, 1);
        let before: Vec<Vec<f64>> = net.params().iter().map(|p| p.data().to_vec()).collect();
        let mut cfg = base_cfg(1);
        cfg.lr = 0.0;
        cfg.epochs = 2;
        train(&mut net, &ds, &cfg, None).unwrap();
        for (p, b) in net.params().iter().zip(&before) {
            assert_eq!(p.data(), b.as_slice());
        }
    }

    #[test]
    fn zero_epochs_empty_log() {
        let ds = synthetic_blobs(10, 3, 2, 2);
        let mut net = nn::mlp(&[3, 4, 2], false).unwrap();
        net.init(InitScheme::He, 2);
        let before = net.params()[0].data().to_vec();
        let mut cfg = base_cfg(2);
        cfg.epochs = 0;
        let log = train(&mut net, &ds, &cfg, None).unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(net.params()[0].data(), before.as_slice());
    }

    #[test]
    fn momentum_converges_on_quadratic() {
        // minimize (w - 3)² by hand with the same update rule
        let mut w = 10.0f64;
        let mut v = 0.0f64;
        for _ in 0..300 {
            let g = 2.0 * (w - 3.0);
            v = 0.9 * v + g;
            w -= 0.05 * v;
        }
        assert!((w - 3.0).abs() < 1e-3, "w = {w}");
    }

    #[test]
    fn separable_toy_reaches_full_train_accuracy() {
        let ds = synthetic_blobs(120, 2, 2, 3);
        let mut net = nn::mlp(&[2, 16, 2], true).unwrap();
        net.init(InitScheme::He, 3);
        let mut cfg = base_cfg(3);
        cfg.epochs = 40;
        cfg.lr = 0.3;
        let log = train(&mut net, &ds, &cfg, None).unwrap();
        assert_eq!(log.epochs.len(), 40);
        assert_eq!(log.epochs.last().unwrap().clean_acc, 1.0);
    }

    #[test]
    fn heavy_weight_decay_shrinks_norms_monotonically() {
        let ds = synthetic_blobs(20, 3, 2, 4);
        let mut net = nn::mlp(&[3, 6, 2], false).unwrap();
        net.init(InitScheme::He, 4);
        let mut cfg = base_cfg(4);
        cfg.reg = RegularizerConfig::wd(5.0);
        cfg.lr = 0.05;
        cfg.epochs = 10;
        let mut norms = Vec::new();
        for _ in 0..10 {
            let mut one = cfg;
            one.epochs = 1;
            train(&mut net, &ds, &one, None).unwrap();
            norms.push(crate::reg::wd(&net));
        }
        for w in norms.windows(2) {
            assert!(w[1] < w[0], "wd should decay: {norms:?}");
        }
    }

    #[test]
    fn fixed_seed_reproduces_bitwise() {
        let ds = synthetic_blobs(60, 4, 3, 5);
        let run = || -> (Vec<Vec<f64>>, TrainLog) {
            let mut net = nn::mlp(&[4, 10, 3], true).unwrap();
            net.init(InitScheme::He, 5);
            let mut cfg = base_cfg(5);
            cfg.reg = RegularizerConfig::weissi(1e-4, 1e-4);
            let log = train(&mut net, &ds, &cfg, None).unwrap();
            (net.params().iter().map(|p| p.data().to_vec()).collect(), log)
        };
        let (p1, l1) = run();
        let (p2, l2) = run();
        assert_eq!(p1, p2);
        assert_eq!(serde_json::to_string(&l1).unwrap(), serde_json::to_string(&l2).unwrap());
    }

    #[test]
    fn zero_delta_adversarial_matches_standard_trajectory() {
        let ds = synthetic_blobs(40, 3, 2, 6);
        let run = |adv: Option<AdversarialTraining>| -> Vec<Vec<f64>> {
            let mut net = nn::mlp(&[3, 8, 2], true).unwrap();
            net.init(InitScheme::He, 6);
            let mut cfg = base_cfg(6);
            cfg.adversarial = adv;
            cfg.epochs = 3;
            train(&mut net, &ds, &cfg, None).unwrap();
            net.params().iter().map(|p| p.data().to_vec()).collect()
        };
        let std = run(None);
        let adv = run(Some(AdversarialTraining::pgd10(0.0)));
        assert_eq!(std, adv);
    }

    #[test]
    fn logged_reg_matches_posthoc_recompute() {
        let ds = synthetic_blobs(30, 3, 2, 7);
        let mut net = nn::mlp(&[3, 6, 2], false).unwrap();
        net.init(InitScheme::He, 7);
        let mut cfg = base_cfg(7);
        cfg.reg = RegularizerConfig::weissi(1e-3, 1e-3);
        cfg.epochs = 2;
        let log = train(&mut net, &ds, &cfg, None).unwrap();
        let recomputed = crate::reg::weissi(&net, 1e-3, 1e-3).unwrap();
        let last = log.epochs.last().unwrap();
        assert_eq!(last.reg_energy, recomputed.energy_term);
        assert_eq!(last.reg_complexity, recomputed.complexity_term);
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        let ds = synthetic_blobs(20, 3, 2, 8);
        let mut net = nn::mlp(&[3, 6, 2], false).unwrap();
        net.init(InitScheme::He, 8);
        let mut cfg = base_cfg(8);
        cfg.reg = RegularizerConfig::wd(1.0);
        cfg.lr = 1e3; // decay overshoot multiplies weights each step
        cfg.epochs = 200;
        let err = train(&mut net, &ds, &cfg, None).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "got {err:?}");
    }

    #[test]
    fn partial_batch_flag_enforced() {
        let ds = synthetic_blobs(25, 3, 2, 9);
        let mut net = nn::mlp(&[3, 4, 2], false).unwrap();
        net.init(InitScheme::He, 9);
        let mut cfg = base_cfg(9);
        cfg.batch_size = 10;
        cfg.allow_partial_batch = false;
        assert!(matches!(
            train(&mut net, &ds, &cfg, None),
            Err(Error::ConfigInvalid { field: "batch_size", .. })
        ));
        cfg.allow_partial_batch = true;
        cfg.epochs = 1;
        assert!(train(&mut net, &ds, &cfg, None).is_ok());
    }
}
