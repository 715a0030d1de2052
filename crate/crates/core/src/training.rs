//! Mini-batch SGD with momentum under standard, adversarial (PGD inner
//! maximization), and TRADES objectives, optionally with adversarial weight
//! perturbation and same-distribution extra data.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_maximize, AttackConfig, PgdParams};
use crate::data::{regenerate, DataSource, Dataset};
use crate::error::{Error, Result};
use crate::loss::{log_softmax_rows, Batch, InputObjective, LossFunction};
use crate::model::{Network, ParamVector};
use crate::seed;

pub const TRADES_BETA: f64 = 6.0;
pub const AWP_GAMMA: f64 = 0.005;
pub const INNER_PGD_STEPS: usize = 10;

const KEY_SHUFFLE: u64 = 0x5348_5546;
const KEY_ATTACK: u64 = 0x4154_544b;
const KEY_EXTRA: u64 = 0x4558_5452;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Standard,
    At,
    Trades,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Standard, Method::At, Method::Trades];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Standard => "standard",
            Method::At => "at",
            Method::Trades => "trades",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Method::Standard),
            "at" => Ok(Method::At),
            "trades" => Ok(Method::Trades),
            other => Err(Error::invalid(format!("unknown training method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default)]
    pub awp: bool,
    #[serde(default)]
    pub extra_data: bool,
    /// Dataset size multiplier applied when `extra_data` is set.
    #[serde(default = "default_extra_factor")]
    pub extra_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta")]
    pub trades_beta: f64,
    #[serde(default = "default_gamma")]
    pub awp_gamma: f64,
    /// ×0.1 at 50% and 75% of the epochs.
    #[serde(default = "default_true")]
    pub step_decay: bool,
    pub inner_attack: AttackConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_extra_factor() -> f64 {
    2.0
}
fn default_momentum() -> f64 {
    0.9
}
fn default_beta() -> f64 {
    TRADES_BETA
}
fn default_gamma() -> f64 {
    AWP_GAMMA
}
fn default_true() -> bool {
    true
}

impl TrainConfig {
    /// Standard training with the default optimizer and a 10-step inner
    /// PGD of radius `epsilon` for the adversarial methods.
    pub fn new(
        method: Method,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        epsilon: f64,
        seed: u64,
    ) -> Self {
        Self {
            method,
            awp: false,
            extra_data: false,
            extra_factor: default_extra_factor(),
            epochs,
            batch_size,
            learning_rate,
            momentum: default_momentum(),
            trades_beta: TRADES_BETA,
            awp_gamma: AWP_GAMMA,
            step_decay: true,
            inner_attack: AttackConfig::pgd_with(epsilon, INNER_PGD_STEPS, 1, 0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(
                "need learning_rate >= 0 and momentum in [0, 1)",
            ));
        }
        if self.method == Method::Trades && !(self.trades_beta > 0.0) {
            return Err(Error::invalid("trades_beta must be positive"));
        }
        if self.awp && !(self.awp_gamma >= 0.0) {
            return Err(Error::invalid("awp_gamma must be non-negative"));
        }
        if self.extra_data && !(self.extra_factor >= 1.0) {
            return Err(Error::invalid("extra_factor must be >= 1"));
        }
        if !(self.inner_attack.epsilon >= 0.0) || self.inner_attack.restarts == 0 {
            return Err(Error::invalid(
                "inner attack needs epsilon >= 0 and restarts >= 1",
            ));
        }
        Ok(())
    }

    /// Short label such as `at+awp+ed`.
    pub fn tag(&self) -> String {
        let mut s = self.method.as_str().to_string();
        if self.awp {
            s.push_str("+awp");
        }
        if self.extra_data {
            s.push_str("+ed");
        }
        s
    }

    fn learning_rate_at(&self, epoch: usize) -> f64 {
        let mut lr = self.learning_rate;
        if self.step_decay {
            if 2 * epoch >= self.epochs {
                lr *= 0.1;
            }
            if 4 * epoch >= 3 * self.epochs {
                lr *= 0.1;
            }
        }
        lr
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub test_accuracy: Vec<Option<f64>>,
    pub wall_clock_seconds: f64,
}

impl TrainHistory {
    /// `epoch,train_loss,train_accuracy,test_accuracy` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_accuracy,test_accuracy\n");
        for e in 0..self.train_loss.len() {
            let test = self.test_accuracy[e]
                .map(|v| format!("{v:?}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{:?},{:?},{}\n",
                e + 1,
                self.train_loss[e],
                self.train_accuracy[e],
                test
            ));
        }
        out
    }
}

pub fn accuracy(network: &Network, data: &Dataset) -> f64 {
    let preds = network.predict_batch(&data.inputs_flat());
    let correct = preds
        .iter()
        .zip(data.labels())
        .filter(|(p, y)| **p == *y)
        .count();
    correct as f64 / data.len() as f64
}

/// Replaces a batch's inputs by PGD adversarial examples against the
/// cross-entropy of the true labels. A zero budget returns the batch as is.
pub fn adversarial_batch(network: &Network, batch: &Batch, attack: &AttackConfig) -> Batch {
    let objective = InputObjective::CrossEntropy {
        labels: &batch.labels,
    };
    let out = pgd_maximize(
        network,
        &batch.inputs,
        &objective,
        inner_params(attack),
        0,
        false,
    );
    Batch {
        inputs: out.adversarial,
        ..batch.clone()
    }
}

/// Attaches TRADES adversarial inputs, found by maximizing the KL divergence
/// from the clean predictive distribution. With no inner steps or a zero
/// budget the adversarial inputs equal the clean ones and none are attached.
pub fn trades_batch(network: &Network, batch: &Batch, attack: &AttackConfig) -> Batch {
    let params = inner_params(attack);
    if params.steps == 0 || params.epsilon == 0.0 {
        return batch.clone();
    }
    let clean = log_softmax_rows(&network.logits_batch(&batch.inputs), network.class_count());
    let objective = InputObjective::KlFrom {
        clean_log_probs: &clean,
    };
    let out = pgd_maximize(network, &batch.inputs, &objective, params, 0, false);
    Batch {
        adversarial: Some(out.adversarial),
        ..batch.clone()
    }
}

fn inner_params(attack: &AttackConfig) -> PgdParams {
    PgdParams {
        epsilon: attack.epsilon,
        steps: attack.steps,
        step_size: attack.step_size,
        restarts: attack.restarts,
        seed: attack.seed,
    }
}

/// TRADES objective on a batch: natural cross-entropy plus β times the mean
/// KL divergence to the adversarial predictions.
pub fn trades_loss(
    network: &Network,
    batch: &Batch,
    beta: f64,
    inner_attack: &AttackConfig,
) -> Result<f64> {
    let b = trades_batch(network, batch, inner_attack);
    LossFunction::TradesComposite { beta }.value(network, &b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AwpOutcome {
    /// Loss gradient at the perturbed weights θ + v.
    pub gradient: ParamVector,
    pub perturbation: ParamVector,
    pub loss_before: f64,
    pub loss_after: f64,
}

/// One normalized ascent step in weight space, scaled per parameter block to
/// `γ‖θ_block‖`. Blocks with zero weight or gradient norm are left alone,
/// and the perturbation is dropped if it would lower the loss. The network
/// itself is not modified.
pub fn awp_step(
    network: &Network,
    batch: &Batch,
    loss: &LossFunction,
    gamma: f64,
) -> Result<AwpOutcome> {
    let (loss_before, grad) = loss.value_and_gradient(network, batch)?;
    let theta = network.params();
    let mut v = vec![0.0; theta.len()];
    if gamma > 0.0 {
        for block in network.blocks() {
            let r = block.range();
            let wn = theta[r.clone()].iter().map(|x| x * x).sum::<f64>().sqrt();
            let gn = grad.0[r.clone()].iter().map(|x| x * x).sum::<f64>().sqrt();
            if wn > 0.0 && gn > 0.0 {
                let s = gamma * wn / gn;
                for i in r {
                    v[i] = s * grad.0[i];
                }
            }
        }
    }
    if v.iter().all(|&x| x == 0.0) {
        return Ok(AwpOutcome {
            gradient: grad,
            perturbation: ParamVector(v),
            loss_before,
            loss_after: loss_before,
        });
    }
    let shifted: Vec<f64> = theta.iter().zip(&v).map(|(t, d)| t + d).collect();
    let perturbed = network.with_params(&shifted)?;
    let (loss_after, g_after) = loss.value_and_gradient(&perturbed, batch)?;
    if loss_after < loss_before {
        v.iter_mut().for_each(|x| *x = 0.0);
        return Ok(AwpOutcome {
            gradient: grad,
            perturbation: ParamVector(v),
            loss_before,
            loss_after: loss_before,
        });
    }
    Ok(AwpOutcome {
        gradient: g_after,
        perturbation: ParamVector(v),
        loss_before,
        loss_after,
    })
}

/// Augments a training set with `(factor − 1)·n` fresh samples from its
/// generating process, or from `pool` when it has none.
pub fn with_extra_data(
    train: &Dataset,
    factor: f64,
    seed: u64,
    pool: Option<&Dataset>,
) -> Result<Dataset> {
    if !(factor >= 1.0) {
        return Err(Error::invalid("extra-data factor must be >= 1"));
    }
    let extra = ((factor - 1.0) * train.len() as f64).round() as usize;
    if extra == 0 {
        return Ok(train.clone());
    }
    let fresh = match train.source() {
        DataSource::External => {
            let pool = pool.ok_or_else(|| {
                Error::invalid("image track without a held-out pool cannot add extra data")
            })?;
            pool.subset(extra, seed)
        }
        DataSource::TwoMoons { .. } => regenerate(train.source(), extra + extra % 2, seed)?,
        source => regenerate(source, extra, seed)?,
    };
    train.concat(&fresh.with_split(train.split()))
}

/// Optional inputs to [`train_with`].
#[derive(Clone, Copy, Default)]
pub struct TrainExtras<'a> {
    /// Evaluated after every epoch for the history.
    pub monitor: Option<&'a Dataset>,
    /// Held-out samples for the extra-data option on file-backed tracks.
    pub pool: Option<&'a Dataset>,
}

pub fn train(
    network: &Network,
    train_set: &Dataset,
    config: &TrainConfig,
) -> Result<(Network, TrainHistory)> {
    train_with(network, train_set, config, TrainExtras::default())
}

pub fn train_standard(
    network: &Network,
    train_set: &Dataset,
    config: &TrainConfig,
) -> Result<(Network, TrainHistory)> {
    if config.method != Method::Standard {
        return Err(Error::invalid("train_standard needs method = standard"));
    }
    train(network, train_set, config)
}

pub fn train_adversarial(
    network: &Network,
    train_set: &Dataset,
    config: &TrainConfig,
) -> Result<(Network, TrainHistory)> {
    if config.method != Method::At {
        return Err(Error::invalid("train_adversarial needs method = at"));
    }
    train(network, train_set, config)
}

pub fn train_with(
    network: &Network,
    train_set: &Dataset,
    config: &TrainConfig,
    extras: TrainExtras<'_>,
) -> Result<(Network, TrainHistory)> {
    config.validate()?;
    let started = Instant::now();
    let data = if config.extra_data {
        with_extra_data(
            train_set,
            config.extra_factor,
            seed::mix64(config.seed, &[KEY_EXTRA]),
            extras.pool,
        )?
    } else {
        train_set.clone()
    };
    let mut net = network.clone();
    let mut velocity = vec![0.0; net.param_count()];
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        let mut rng = seed::rng(seed::mix64(config.seed, &[KEY_SHUFFLE, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let clean = data.batch(idx);
            let mut attack = config.inner_attack.clone();
            attack.seed = seed::mix64(config.seed, &[KEY_ATTACK, epoch as u64, b as u64]);
            let (batch, loss) = match config.method {
                Method::Standard => (clean, LossFunction::CrossEntropy),
                Method::At => (
                    adversarial_batch(&net, &clean, &attack),
                    LossFunction::CrossEntropy,
                ),
                Method::Trades => (
                    trades_batch(&net, &clean, &attack),
                    LossFunction::TradesComposite {
                        beta: config.trades_beta,
                    },
                ),
            };
            let (value, grad) = if config.awp {
                let out = awp_step(&net, &batch, &loss, config.awp_gamma)?;
                (out.loss_before, out.gradient)
            } else {
                loss.value_and_gradient(&net, &batch)?
            };
            if !value.is_finite() || grad.0.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    loss: value,
                });
            }
            let mut params = net.params().to_vec();
            for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad.0) {
                *v = config.momentum * *v + g;
                *p -= lr * *v;
            }
            net.set_params(&params)?;
            loss_sum += value;
            batches += 1;
        }
        history.train_loss.push(loss_sum / batches as f64);
        history.train_accuracy.push(accuracy(&net, &data));
        history
            .test_accuracy
            .push(extras.monitor.map(|m| accuracy(&net, m)));
    }
    history.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok((net, history))
}
