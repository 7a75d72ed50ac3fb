//! Momentum SGD, incremental densification, datasets and evaluation.

mod data;
mod schedule;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::convnet::{cost_report, Network, NewConnectionInit};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Scalar, Tensor4};

pub use data::{load_idx, load_mnist, mnist_paths, synth_dataset, Dataset, SynthSpec};
pub use schedule::{apply_densification, target_density, DensifySchedule, Growth};

/// Floating point width used for training and inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl TryFrom<u32> for Precision {
    type Error = String;

    fn try_from(v: u32) -> std::result::Result<Self, String> {
        match v {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            _ => Err(format!("precision must be 32 or 64, got {v}")),
        }
    }
}

impl From<Precision> for u32 {
    fn from(p: Precision) -> u32 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}

fn default_decay() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Steps between evaluations; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Multiply the learning rate by `lr_decay` at each of these epochs.
    #[serde(default)]
    pub lr_milestones: Vec<usize>,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub new_connection_init: NewConnectionInit,
    /// Stops early after this many steps.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            epochs: 1,
            seed: 0,
            eval_every: 0,
            precision: Precision::F32,
            lr_milestones: Vec::new(),
            lr_decay: 0.1,
            new_connection_init: NewConnectionInit::Fresh,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::Config(format!(
                "lr_decay must be > 0, got {}",
                self.lr_decay
            )));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub epoch: usize,
    pub density: f64,
    pub params: u64,
    pub madds: u64,
    /// Mean training loss over the steps since the previous point.
    pub train_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub schedule: Option<DensifySchedule>,
    pub points: Vec<EvalPoint>,
    pub steps: u64,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn final_accuracy(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.test_accuracy)
    }
}

/// One momentum SGD update, `v ← μv + g`, `w ← w − lr·v`, over every
/// trainable array. Returns the loss before the update.
pub fn sgd_step<T: Scalar>(
    net: &mut Network<T>,
    x: &Tensor4<T>,
    labels: &[usize],
    lr: f64,
    momentum: f64,
    step: u64,
) -> Result<f64> {
    let loss = net.loss_and_grad(x, labels)?.as_f64();
    if !loss.is_finite() {
        let norms: Vec<String> = net
            .activation_norms()
            .iter()
            .enumerate()
            .map(|(i, n)| format!("layer{i}={n:.3e}"))
            .collect();
        return Err(Error::NonFiniteLoss {
            step,
            diagnostics: norms.join(", "),
        });
    }
    let (lr, mu) = (T::lit(lr), T::lit(momentum));
    for p in net.params_mut() {
        for ((w, v), &g) in p.value.iter_mut().zip(p.velocity.iter_mut()).zip(p.grad) {
            *v = mu * *v + g;
            *w = *w - lr * *v;
        }
    }
    Ok(loss)
}

/// Top-1 accuracy with batch norm in inference mode.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset) -> Result<f64> {
    const CHUNK: usize = 100;
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (x, y) = data.batch::<T>(chunk);
        correct += net
            .predict(&x)?
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn eval_point<T: Scalar>(
    net: &Network<T>,
    test: &Dataset,
    step: u64,
    epoch: usize,
    loss_sum: f64,
    loss_n: u64,
) -> Result<EvalPoint> {
    let cost = cost_report(net);
    Ok(EvalPoint {
        step,
        epoch,
        density: net.connection_density(),
        params: cost.total_params,
        madds: cost.total_madds,
        train_loss: if loss_n == 0 {
            0.0
        } else {
            loss_sum / loss_n as f64
        },
        test_accuracy: evaluate(net, test)?,
    })
}

/// Trains `net` for `config.epochs` passes over `train`, densifying before
/// each step when a schedule is given. `on_point` sees every evaluation
/// point as it is produced.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    schedule: Option<&DensifySchedule>,
    on_point: &mut dyn FnMut(&EvalPoint),
) -> Result<RunRecord> {
    config.validate()?;
    if let Some(s) = schedule {
        s.validate()?;
    }
    let input = net.arch().input;
    if (train_set.channels, train_set.height, train_set.width)
        != (input.channels, input.height, input.width)
    {
        return Err(Error::Config(format!(
            "dataset items are {}x{}x{} but the network expects {}x{}x{}",
            train_set.channels,
            train_set.height,
            train_set.width,
            input.channels,
            input.height,
            input.width
        )));
    }
    let started = Instant::now();
    let mut shuffle = rng::stream(config.seed, Stream::Shuffle);
    let mut grow = rng::stream(config.seed, Stream::Densify);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut points = Vec::new();
    let mut step = 0u64;
    let (mut loss_sum, mut loss_n) = (0.0, 0u64);
    let limit = config.max_steps.unwrap_or(u64::MAX);
    let mut epoch = 0;
    'outer: while epoch < config.epochs {
        order.shuffle(&mut shuffle);
        let lr = config.lr_at_epoch(epoch);
        for batch in order.chunks(config.batch_size) {
            if step >= limit {
                break 'outer;
            }
            if let Some(s) = schedule {
                apply_densification(net, s, step, config.new_connection_init, &mut grow)?;
            }
            let (x, y) = train_set.batch::<T>(batch);
            loss_sum += sgd_step(net, &x, &y, lr, config.momentum, step)?;
            loss_n += 1;
            step += 1;
            if config.eval_every > 0 && step % config.eval_every == 0 {
                let p = eval_point(net, test_set, step, epoch, loss_sum, loss_n)?;
                on_point(&p);
                points.push(p);
                (loss_sum, loss_n) = (0.0, 0);
            }
        }
        epoch += 1;
    }
    if points.last().is_none_or(|p| p.step != step) {
        let p = eval_point(
            net,
            test_set,
            step,
            epoch.saturating_sub(1),
            loss_sum,
            loss_n,
        )?;
        on_point(&p);
        points.push(p);
    }
    Ok(RunRecord {
        config: config.clone(),
        schedule: schedule.cloned(),
        points,
        steps: step,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
