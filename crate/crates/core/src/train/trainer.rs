//! Training loop, validation and the per-epoch log.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{composite_loss, LossInputs, DEFAULT_SMOOTHING};
use crate::network::model::BnUpdate;
use crate::network::{Checkpoint, ModelConfig, Network, ParamStore, TrainingMeta};
use crate::ops::{self, Mode};
use crate::pipeline::plan_windows;
use crate::tape::Tape;
use crate::tensor::{Real, Tensor5};

use super::adam::{Adam, DEFAULT_LR};
use super::sampler::{PatchSampler, TrainCase};
use super::scheduler::PlateauScheduler;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub fg_fraction: f64,
    pub smoothing: f64,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 10,
            steps_per_epoch: 50,
            batch_size: 4,
            lr: DEFAULT_LR,
            seed: 42,
            fg_fraction: 0.5,
            smoothing: DEFAULT_SMOOTHING,
            patience: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_loss,lr,seconds";

pub fn log_csv(records: &[EpochRecord]) -> String {
    let mut s = String::new();
    writeln!(s, "{LOG_HEADER}").unwrap();
    for r in records {
        writeln!(s, "{},{},{},{},{:.3}", r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds).unwrap();
    }
    s
}

pub struct StepGrads<T: Real> {
    pub loss: f64,
    pub grads: Vec<(String, Tensor5<T>)>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// Composite loss of `labels` against sigmoid(network(input)) and its
/// gradient with respect to every trainable parameter.
pub fn loss_and_grads<T: Real>(
    net: &Network,
    params: &ParamStore<T>,
    input: &Tensor5<T>,
    labels: &Tensor5<T>,
    mode: Mode,
    smoothing: f64,
) -> Result<StepGrads<T>> {
    let mut tape = Tape::new();
    let x = tape.leaf_ref(input);
    let out = net.forward(&mut tape, params, x, mode)?;
    let logits = tape.value(out.logits);
    if logits.shape() != labels.shape() {
        return Err(Error::shape("labels", labels.shape(), logits.shape()));
    }
    let probs = ops::sigmoid(logits);
    let inp = LossInputs::new(probs.data(), labels.data())?.with_smoothing(smoothing)?;
    let lv = composite_loss(&inp);
    let seed: Vec<T> = lv
        .grad
        .iter()
        .zip(probs.data())
        .map(|(&g, &p)| g * p * (T::ONE - p))
        .collect();
    let seed = Tensor5::from_vec(logits.shape(), seed)?;
    let mut g = tape.backward(out.logits, seed, &[])?;
    let grads = out
        .param_vars
        .iter()
        .map(|(k, v)| {
            let t = g
                .take(*v)
                .unwrap_or_else(|| Tensor5::zeros(tape.shape(*v)));
            (k.clone(), t)
        })
        .collect();
    Ok(StepGrads {
        loss: lv.loss,
        grads,
        bn_updates: out.bn_updates,
    })
}

/// Mean composite loss over sliding windows of each case, inference mode.
pub fn validation_loss(net: &Network, params: &ParamStore<f32>, cases: &[TrainCase], smoothing: f64) -> Result<f64> {
    let patch = net.config().patch_shape;
    let mut total = 0.0;
    let mut count = 0usize;
    for case in cases {
        let plan = plan_windows(case.dims(), patch)?;
        let losses = crate::par::map_range(plan.len(), |i| -> Result<f64> {
            let x = case.image.block(plan.starts[i], patch);
            let y = case.mask.block(plan.starts[i], patch);
            let p = ops::sigmoid(&net.predict(params, &x)?);
            let inp = LossInputs::new(p.data(), y.data())?.with_smoothing(smoothing)?;
            Ok(composite_loss(&inp).loss)
        });
        for l in losses {
            total += l?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no validation windows".into()));
    }
    Ok(total / count as f64)
}

pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest validation loss.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochRecord>,
    /// Training loss of every step, in order.
    pub step_losses: Vec<f64>,
}

pub fn train(
    cfg: &TrainConfig,
    train_cases: &[TrainCase],
    val_cases: &[TrainCase],
    mut on_epoch: impl FnMut(&EpochRecord, &Checkpoint, bool) -> Result<()>,
) -> Result<TrainOutcome> {
    let net = Network::new(cfg.model.clone())?;
    let mut params: ParamStore<f32> = net.init_params(cfg.seed);
    let mut adam = Adam::new(&params, cfg.lr);
    let mut sched = PlateauScheduler {
        patience: cfg.patience,
        ..Default::default()
    };
    let mut sampler = PatchSampler::new(cfg.model.patch_shape, cfg.fg_fraction, cfg.seed ^ 0x5eed);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(cfg.epochs * cfg.steps_per_epoch);
    let mut best: Option<Checkpoint> = None;
    let mut best_val: Option<f64> = None;
    let mut step = 0u64;

    let snapshot = |params: &ParamStore<f32>, adam: &Adam<f32>, epoch, step, best_val| Checkpoint {
        config: cfg.model.clone(),
        params: params.clone(),
        meta: TrainingMeta {
            epoch,
            step,
            best_val_loss: best_val,
            seed: cfg.seed,
        },
        optimizer: Some(adam.snapshot()),
    };

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut sum = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            step += 1;
            let (x, y) = sampler.batch(train_cases, cfg.batch_size)?;
            let sg = loss_and_grads(&net, &params, &x, &y, Mode::Train, cfg.smoothing)?;
            if !sg.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {} at step {step} (lr {})",
                    sg.loss, adam.lr
                )));
            }
            adam.step(&mut params, &sg.grads)?;
            net.apply_bn_updates(&mut params, &sg.bn_updates)?;
            if !params.all_finite() {
                return Err(Error::NonFinite(format!("parameters after step {step} (lr {})", adam.lr)));
            }
            log::debug!("step {step} loss {:.5}", sg.loss);
            step_losses.push(sg.loss);
            sum += sg.loss;
        }
        let val_loss = validation_loss(&net, &params, val_cases, cfg.smoothing)?;
        let lr_used = adam.lr;
        sched.step(val_loss, &mut adam.lr)?;
        let rec = EpochRecord {
            epoch,
            train_loss: sum / cfg.steps_per_epoch.max(1) as f64,
            val_loss,
            lr: lr_used,
            seconds: started.elapsed().as_secs_f64(),
        };
        let improved = best_val.is_none_or(|b| val_loss < b);
        if improved {
            best_val = Some(val_loss);
        }
        let ck = snapshot(&params, &adam, epoch, step, best_val);
        if improved {
            best = Some(ck.clone());
        }
        log::info!(
            "epoch {epoch} train {:.5} val {:.5} lr {:.1e} {:.1}s",
            rec.train_loss,
            rec.val_loss,
            rec.lr,
            rec.seconds
        );
        on_epoch(&rec, &ck, improved)?;
        log.push(rec);
    }

    let last = snapshot(&params, &adam, cfg.epochs, step, best_val);
    Ok(TrainOutcome {
        best: best.unwrap_or_else(|| last.clone()),
        last,
        log,
        step_losses,
    })
}
