//! Losses and their parameter-space derivatives.
//!
//! All batch objectives are means over samples. Large batches are split into
//! fixed-size chunks whose contributions are combined in order, so results
//! are deterministic and independent of the worker count.

use std::rc::Rc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Network, ParamVector};
use crate::tensor::Tensor;

/// Samples per tape when evaluating large batches.
pub const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LossFunction {
    CrossEntropy,
    /// `CE(f(x), y) + β · KL(softmax f(x) ‖ softmax f(x_adv))`.
    TradesComposite {
        beta: f64,
    },
    /// `½‖f(x) − onehot(y)‖²`; quadratic in the logits.
    SquaredError,
}

/// A flat `n × d` input block with labels and, for the TRADES objective,
/// matching adversarial inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub input_len: usize,
    pub adversarial: Option<Vec<f64>>,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, input_len: usize) -> Result<Self> {
        if inputs.len() != labels.len() * input_len {
            return Err(Error::invalid(format!(
                "batch of {} labels needs {} input values, got {}",
                labels.len(),
                labels.len() * input_len,
                inputs.len()
            )));
        }
        Ok(Self {
            inputs,
            labels,
            input_len,
            adversarial: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn chunk(&self, range: std::ops::Range<usize>) -> Batch {
        let d = self.input_len;
        Batch {
            inputs: self.inputs[range.start * d..range.end * d].to_vec(),
            labels: self.labels[range.clone()].to_vec(),
            input_len: d,
            adversarial: self
                .adversarial
                .as_ref()
                .map(|a| a[range.start * d..range.end * d].to_vec()),
        }
    }

    fn chunks(&self) -> Vec<Batch> {
        (0..self.len())
            .step_by(CHUNK)
            .map(|s| self.chunk(s..(s + CHUNK).min(self.len())))
            .collect()
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let z = logits.data();
    if label >= z.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: z.len(),
        });
    }
    Ok(log_sum_exp(z) - z[label])
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise log-softmax of flat `n × c` logits.
pub fn log_softmax_rows(logits: &[f64], c: usize) -> Vec<f64> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(c) {
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Per-sample cross-entropy for flat `n × c` logits.
pub fn cross_entropy_rows(logits: &[f64], c: usize, labels: &[usize]) -> Vec<f64> {
    logits
        .chunks_exact(c)
        .zip(labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .collect()
}

/// `KL(p ‖ q) = Σ p_i ln(p_i / q_i)` for probability vectors.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

fn label_index(labels: &[usize], c: usize) -> Rc<[u32]> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| (i * c + y) as u32)
        .collect::<Vec<_>>()
        .into()
}

/// Sum over samples of the cross-entropy, as a scalar tape node.
pub(crate) fn cross_entropy_sum(t: &mut Tape, logits: Var, labels: &[usize]) -> Var {
    let c = t.shape(logits)[1];
    let lp = t.log_softmax(logits);
    let picked = t.gather(lp, label_index(labels, c), vec![labels.len()]);
    let s = t.sum_all(picked);
    t.scale(s, -1.0)
}

/// Sum over samples of `KL(p_clean ‖ softmax(adv_logits))`.
pub(crate) fn kl_sum(t: &mut Tape, clean_log_probs: Var, adv_logits: Var) -> Var {
    let lq = t.log_softmax(adv_logits);
    let p = t.exp(clean_log_probs);
    let diff = t.sub(clean_log_probs, lq);
    let terms = t.mul(p, diff);
    t.sum_all(terms)
}

impl LossFunction {
    /// Mean loss over a batch chunk, recorded on `t` with the given
    /// parameter nodes.
    fn record(&self, t: &mut Tape, net: &Network, params: &[Var], batch: &Batch) -> Var {
        let n = batch.len();
        let c = net.class_count();
        let x = t.constant(vec![n, batch.input_len], batch.inputs.clone());
        let logits = net.forward_tape(t, params, x);
        let total = match *self {
            LossFunction::CrossEntropy => cross_entropy_sum(t, logits, &batch.labels),
            LossFunction::SquaredError => {
                let mut target = vec![0.0; n * c];
                for (i, &y) in batch.labels.iter().enumerate() {
                    target[i * c + y] = 1.0;
                }
                let target = t.constant(vec![n, c], target);
                let r = t.sub(logits, target);
                let sq = t.mul(r, r);
                let s = t.sum_all(sq);
                t.scale(s, 0.5)
            }
            LossFunction::TradesComposite { beta } => {
                let ce = cross_entropy_sum(t, logits, &batch.labels);
                match &batch.adversarial {
                    // x_adv == x makes the KL term identically zero in θ.
                    None => ce,
                    Some(adv) => {
                        let xa = t.constant(vec![n, batch.input_len], adv.clone());
                        let adv_logits = net.forward_tape(t, params, xa);
                        let lp = t.log_softmax(logits);
                        let kl = kl_sum(t, lp, adv_logits);
                        let kl = t.scale(kl, beta);
                        t.add(ce, kl)
                    }
                }
            }
        };
        t.scale(total, 1.0 / n as f64)
    }

    fn validate(&self, net: &Network, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if batch.input_len != net.input_len() {
            return Err(Error::ShapeMismatch {
                expected: net.spec().input_shape.clone(),
                actual: vec![batch.input_len],
            });
        }
        if let Some(a) = &batch.adversarial {
            if a.len() != batch.inputs.len() {
                return Err(Error::invalid("adversarial inputs do not match the batch"));
            }
        }
        if let LossFunction::TradesComposite { beta } = self {
            if !(*beta > 0.0) {
                return Err(Error::invalid("trades beta must be positive"));
            }
        }
        check_labels(&batch.labels, net.class_count())
    }

    /// Runs `per_chunk` over each chunk and combines the results weighted by
    /// chunk size, in chunk order.
    fn chunked<F>(&self, batch: &Batch, width: usize, per_chunk: F) -> Vec<f64>
    where
        F: Fn(&Batch) -> Vec<f64> + Sync,
    {
        if batch.len() <= CHUNK {
            return per_chunk(batch);
        }
        let chunks = batch.chunks();
        let parts: Vec<Vec<f64>> = chunks.par_iter().map(&per_chunk).collect();
        let total = batch.len() as f64;
        let mut out = vec![0.0; width];
        for (chunk, part) in chunks.iter().zip(parts) {
            let w = chunk.len() as f64 / total;
            for (o, p) in out.iter_mut().zip(part) {
                *o += w * p;
            }
        }
        out
    }

    pub fn value(&self, net: &Network, batch: &Batch) -> Result<f64> {
        self.validate(net, batch)?;
        let v = self.chunked(batch, 1, |b| {
            let mut t = Tape::new();
            let params = net.param_vars(&mut t, false);
            let l = self.record(&mut t, net, &params, b);
            vec![t.value(l)[0]]
        });
        Ok(v[0])
    }

    /// Loss value and ∂(mean loss)/∂θ.
    pub fn value_and_gradient(&self, net: &Network, batch: &Batch) -> Result<(f64, ParamVector)> {
        self.validate(net, batch)?;
        let p = net.param_count();
        let out = self.chunked(batch, p + 1, |b| {
            let mut t = Tape::new();
            let params = net.param_vars(&mut t, true);
            let l = self.record(&mut t, net, &params, b);
            let grads = t.grad(l, &params);
            let mut flat = Vec::with_capacity(p + 1);
            for g in grads {
                flat.extend_from_slice(t.value(g));
            }
            flat.push(t.value(l)[0]);
            flat
        });
        let loss = out[p];
        let mut grad = out;
        grad.truncate(p);
        Ok((loss, ParamVector(grad)))
    }

    pub fn gradient(&self, net: &Network, batch: &Batch) -> Result<ParamVector> {
        self.value_and_gradient(net, batch).map(|(_, g)| g)
    }

    /// Exact `H v` for the Hessian of the mean loss, by reverse-mode
    /// differentiation of `∇θ L · v`.
    pub fn hvp(&self, net: &Network, batch: &Batch, v: &ParamVector) -> Result<ParamVector> {
        self.validate(net, batch)?;
        if v.len() != net.param_count() {
            return Err(Error::ParamLength {
                expected: net.param_count(),
                actual: v.len(),
            });
        }
        let out = self.chunked(batch, net.param_count(), |b| {
            let mut t = Tape::new();
            let params = net.param_vars(&mut t, true);
            let l = self.record(&mut t, net, &params, b);
            let grads = t.grad(l, &params);
            let mut dot = None;
            for (g, block) in grads.iter().zip(net.blocks()) {
                let vb = t.constant(block.shape.clone(), v.0[block.range()].to_vec());
                let prod = t.mul(*g, vb);
                let s = t.sum_all(prod);
                dot = Some(match dot {
                    None => s,
                    Some(acc) => t.add(acc, s),
                });
            }
            let dot = dot.expect("network has parameters");
            let hv = t.grad(dot, &params);
            let mut flat = Vec::with_capacity(net.param_count());
            for h in hv {
                flat.extend_from_slice(t.value(h));
            }
            flat
        });
        if let Some(index) = out.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteHvp { index });
        }
        Ok(ParamVector(out))
    }
}

pub fn gradient(loss: &LossFunction, network: &Network, batch: &Batch) -> Result<ParamVector> {
    loss.gradient(network, batch)
}

pub fn hvp(
    loss: &LossFunction,
    network: &Network,
    batch: &Batch,
    v: &ParamVector,
) -> Result<ParamVector> {
    loss.hvp(network, batch, v)
}

/// Per-sample objective maximized by input-space attacks.
#[derive(Clone, Debug)]
pub enum InputObjective<'a> {
    CrossEntropy {
        labels: &'a [usize],
    },
    /// KL from fixed clean log-probabilities (flat `n × C`).
    KlFrom {
        clean_log_probs: &'a [f64],
    },
}

impl InputObjective<'_> {
    fn record(&self, t: &mut Tape, logits: Var) -> Var {
        match self {
            InputObjective::CrossEntropy { labels } => cross_entropy_sum(t, logits, labels),
            InputObjective::KlFrom { clean_log_probs } => {
                let shape = t.shape(logits).to_vec();
                let lp = t.constant(shape, clean_log_probs.to_vec());
                kl_sum(t, lp, logits)
            }
        }
    }

    /// Per-sample objective values from logits.
    pub fn values(&self, logits: &[f64], c: usize) -> Vec<f64> {
        match self {
            InputObjective::CrossEntropy { labels } => cross_entropy_rows(logits, c, labels),
            InputObjective::KlFrom { clean_log_probs } => {
                let lq = log_softmax_rows(logits, c);
                clean_log_probs
                    .chunks_exact(c)
                    .zip(lq.chunks_exact(c))
                    .map(|(lp, lq)| {
                        lp.iter()
                            .zip(lq)
                            .map(|(a, b)| a.exp() * (a - b))
                            .sum::<f64>()
                    })
                    .collect()
            }
        }
    }
}

/// Per-sample objective values and their input gradients for a flat batch.
/// Parameters are held constant.
pub fn input_gradient(
    net: &Network,
    inputs: &[f64],
    objective: &InputObjective<'_>,
) -> (Vec<f64>, Vec<f64>) {
    let d = net.input_len();
    let n = inputs.len() / d;
    let c = net.class_count();
    let mut t = Tape::new();
    let params = net.param_vars(&mut t, false);
    let x = t.leaf(vec![n, d], inputs.to_vec());
    let logits = net.forward_tape(&mut t, &params, x);
    let values = objective.values(t.value(logits), c);
    let total = objective.record(&mut t, logits);
    let g = t.grad(total, &[x])[0];
    (values, t.value(g).to_vec())
}

/// Per-sample objective values without gradients.
pub fn input_objective(net: &Network, inputs: &[f64], objective: &InputObjective<'_>) -> Vec<f64> {
    objective.values(&net.logits_batch(inputs), net.class_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec};

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::vector(vec![0.3; 4]).unwrap();
        assert!((cross_entropy(&uniform, 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        let saturated = Tensor::vector(vec![1000.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&saturated, 0).unwrap() <= 1e-6);
        // −ln(e¹/(e¹+e²+e³)) evaluated with mpmath to 30 digits:
        // 2.40760596444438030...
        let l = cross_entropy(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap(), 0).unwrap();
        assert!((l - 2.407_605_964_444_38).abs() < 1e-14);
        assert!(matches!(
            cross_entropy(&uniform, 4),
            Err(Error::LabelOutOfRange {
                label: 4,
                classes: 4
            })
        ));
    }

    #[test]
    fn kl_hand_computed() {
        // 0.9 ln(0.9/0.6) + 0.1 ln(0.1/0.4), mpmath: 0.226289161185358881...
        let kl = kl_divergence(&[0.9, 0.1], &[0.6, 0.4]);
        assert!((kl - 0.226_289_161_185_358_9).abs() < 1e-15, "{kl}");
    }

    #[test]
    fn empty_batch_rejected() {
        let net = build_model(&ModelSpec::mlp(2, 2, 1.0, 0)).unwrap();
        let b = Batch::new(vec![], vec![], 2).unwrap();
        assert!(matches!(
            LossFunction::CrossEntropy.gradient(&net, &b),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn bad_direction_length_rejected() {
        let net = build_model(&ModelSpec::mlp(2, 2, 1.0, 0)).unwrap();
        let b = Batch::new(vec![0.1, 0.2], vec![1], 2).unwrap();
        assert!(matches!(
            LossFunction::CrossEntropy.hvp(&net, &b, &ParamVector(vec![0.0; 3])),
            Err(Error::ParamLength { .. })
        ));
    }

    #[test]
    fn chunked_matches_single_tape() {
        let net = build_model(&ModelSpec::mlp(2, 3, 1.0, 5)).unwrap();
        let n = CHUNK + 37;
        let inputs: Vec<f64> = (0..2 * n)
            .map(|i| ((i * 7919) % 101) as f64 / 101.0)
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let b = Batch::new(inputs.clone(), labels.clone(), 2).unwrap();
        let chunked = LossFunction::CrossEntropy.gradient(&net, &b).unwrap();

        let mut t = Tape::new();
        let params = net.param_vars(&mut t, true);
        let l = LossFunction::CrossEntropy.record(&mut t, &net, &params, &b);
        let g: Vec<f64> = t
            .grad(l, &params)
            .into_iter()
            .flat_map(|g| t.value(g).to_vec())
            .collect();
        for (a, b) in chunked.0.iter().zip(&g) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
