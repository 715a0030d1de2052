//! l∞ adversarial attacks, Gaussian noise, and robust-accuracy evaluation.
//!
//! Labels used for targeting are always the ground-truth labels. Each
//! sample's random stream is keyed by `(seed, sample index, restart)`, so
//! results do not depend on how the test set is chunked or scheduled.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{input_gradient, input_objective, InputObjective, CHUNK};
use crate::model::Network;
use crate::seed;
use crate::tensor::{argmax_class, Tensor};

pub const PGD_STEPS: usize = 40;
pub const PGD_RESTARTS: usize = 5;
/// Step size as a multiple of `ε / steps`.
pub const PGD_STEP_FACTOR: f64 = 2.5;

/// The l∞ radii swept in the robustness experiment, in `[0, 1]` pixel units.
pub fn epsilon_grid() -> Vec<f64> {
    (1..=8).map(|i| i as f64 / 255.0).collect()
}

pub fn sigma_grid() -> Vec<f64> {
    (1..=8).map(|i| i as f64 * 0.05).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Gaussian,
    /// Per-sample strongest of PGD and FGSM.
    PgdStrong,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Gaussian => "gaussian",
            AttackKind::PgdStrong => "pgd-strong",
        }
    }

    pub fn is_budgeted(self) -> bool {
        !matches!(self, AttackKind::Gaussian)
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fgsm" => AttackKind::Fgsm,
            "pgd" => AttackKind::Pgd,
            "gaussian" => AttackKind::Gaussian,
            "pgd-strong" => AttackKind::PgdStrong,
            other => return Err(Error::invalid(format!("unknown attack `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// l∞ radius in input units.
    #[serde(default)]
    pub epsilon: f64,
    /// Gaussian standard deviation.
    #[serde(default)]
    pub sigma: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub step_size: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    PGD_STEPS
}

fn default_restarts() -> usize {
    PGD_RESTARTS
}

impl AttackConfig {
    fn budgeted(kind: AttackKind, epsilon: f64, steps: usize, restarts: usize, seed: u64) -> Self {
        Self {
            kind,
            epsilon,
            sigma: 0.0,
            steps,
            step_size: PGD_STEP_FACTOR * epsilon / steps.max(1) as f64,
            restarts,
            seed,
        }
    }

    pub fn pgd(epsilon: f64, seed: u64) -> Self {
        Self::budgeted(AttackKind::Pgd, epsilon, PGD_STEPS, PGD_RESTARTS, seed)
    }

    /// PGD with a custom step count; step size follows the default rule.
    pub fn pgd_with(epsilon: f64, steps: usize, restarts: usize, seed: u64) -> Self {
        Self::budgeted(AttackKind::Pgd, epsilon, steps, restarts, seed)
    }

    pub fn pgd_strong(epsilon: f64, seed: u64) -> Self {
        Self::budgeted(
            AttackKind::PgdStrong,
            epsilon,
            PGD_STEPS,
            PGD_RESTARTS,
            seed,
        )
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self::budgeted(AttackKind::Fgsm, epsilon, 1, 1, 0)
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            kind: AttackKind::Gaussian,
            epsilon: 0.0,
            sigma,
            steps: 1,
            step_size: 0.0,
            restarts: 1,
            seed,
        }
    }

    /// The perturbation size: ε for budgeted attacks, σ for Gaussian noise.
    pub fn budget(&self) -> f64 {
        if self.kind.is_budgeted() {
            self.epsilon
        } else {
            self.sigma
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v >= 0.0 && v.is_finite();
        match self.kind {
            AttackKind::Gaussian => {
                if !finite_nonneg(self.sigma) {
                    return Err(Error::invalid("sigma must be non-negative"));
                }
            }
            kind => {
                if !finite_nonneg(self.epsilon) {
                    return Err(Error::invalid("epsilon must be non-negative"));
                }
                if kind != AttackKind::Fgsm
                    && (self.steps == 0 || !(self.step_size > 0.0 || self.epsilon == 0.0))
                {
                    return Err(Error::invalid("pgd needs steps >= 1 and step_size > 0"));
                }
            }
        }
        if self.restarts == 0 {
            return Err(Error::invalid("restarts must be positive"));
        }
        Ok(())
    }
}

/// Clean accuracy `p`, attacked accuracy `p*` and `p_r = p*/p`
/// (`None` when `p == 0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRecord {
    pub clean_accuracy: f64,
    pub attacked_accuracy: f64,
    pub relative_performance: Option<f64>,
    pub attack: AttackConfig,
    pub n_evaluated: usize,
}

pub fn relative_performance(p: f64, p_star: f64) -> Option<f64> {
    (p > 0.0).then(|| p_star / p)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects onto the ε-ball around `origin` intersected with `[0, 1]`.
fn project(v: f64, origin: f64, epsilon: f64) -> f64 {
    let mut a = v.clamp(origin - epsilon, origin + epsilon).clamp(0.0, 1.0);
    // Rounding in `origin ± epsilon` can leave `|a - origin|` an ulp above ε.
    while (a - origin).abs() > epsilon {
        a = if a > origin {
            a.next_down()
        } else {
            a.next_up()
        };
    }
    a
}

/// One signed-gradient step of size ε, clipped to `[0, 1]`, on a flat batch.
pub fn fgsm_batch(network: &Network, inputs: &[f64], labels: &[usize], epsilon: f64) -> Vec<f64> {
    if epsilon == 0.0 {
        return inputs.to_vec();
    }
    let (_, g) = input_gradient(network, inputs, &InputObjective::CrossEntropy { labels });
    inputs
        .iter()
        .zip(&g)
        .map(|(&x, &gi)| project(x + epsilon * sign(gi), x, epsilon))
        .collect()
}

pub fn fgsm(network: &Network, x: &Tensor, y: usize, epsilon: f64) -> Tensor {
    let adv = fgsm_batch(network, x.data(), &[y], epsilon);
    Tensor::from_parts_unchecked(x.shape().to_vec(), adv)
}

/// Settings of one projected-gradient maximization.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PgdParams {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub seed: u64,
}

/// Result of a batched PGD run.
pub struct PgdOutcome {
    pub adversarial: Vec<f64>,
    pub objective: Vec<f64>,
    /// `trace[restart][step]` holds per-sample objective values, the first
    /// entry being the random start.
    pub trace: Vec<Vec<Vec<f64>>>,
}

/// Maximizes a per-sample objective over the ε-ball ∩ `[0, 1]^d`. A step is
/// kept only if it does not decrease that sample's objective; rejected
/// samples stay put and halve their step size. Returns the highest-objective
/// iterate across restarts.
pub(crate) fn pgd_maximize(
    network: &Network,
    inputs: &[f64],
    objective: &InputObjective<'_>,
    params: PgdParams,
    first_index: usize,
    keep_trace: bool,
) -> PgdOutcome {
    let d = network.input_len();
    let n = inputs.len() / d;
    let mut best = inputs.to_vec();
    let mut best_val = input_objective(network, inputs, objective);
    let mut trace = Vec::new();
    if params.steps == 0 || params.epsilon == 0.0 {
        return PgdOutcome {
            adversarial: best,
            objective: best_val,
            trace,
        };
    }
    let eps = params.epsilon;
    for r in 0..params.restarts {
        let mut cur = inputs.to_vec();
        for (i, row) in cur.chunks_exact_mut(d).enumerate() {
            let mut rng = seed::rng(seed::mix64(
                params.seed,
                &[(first_index + i) as u64, r as u64],
            ));
            let origin = &inputs[i * d..(i + 1) * d];
            for (v, &o) in row.iter_mut().zip(origin) {
                *v = project(o + rng.random_range(-eps..=eps), o, eps);
            }
        }
        let (mut val, mut grad) = input_gradient(network, &cur, objective);
        let mut alpha = vec![params.step_size; n];
        let mut restart_trace = Vec::new();
        if keep_trace {
            restart_trace.push(val.clone());
        }
        for _ in 0..params.steps {
            let cand: Vec<f64> = cur
                .iter()
                .zip(&grad)
                .zip(inputs)
                .enumerate()
                .map(|(j, ((&x, &g), &o))| project(x + alpha[j / d] * sign(g), o, eps))
                .collect();
            let (cval, cgrad) = input_gradient(network, &cand, objective);
            for i in 0..n {
                if cval[i] >= val[i] {
                    let span = i * d..(i + 1) * d;
                    cur[span.clone()].copy_from_slice(&cand[span.clone()]);
                    grad[span.clone()].copy_from_slice(&cgrad[span]);
                    val[i] = cval[i];
                } else {
                    alpha[i] *= 0.5;
                }
            }
            if keep_trace {
                restart_trace.push(val.clone());
            }
        }
        for i in 0..n {
            if val[i] > best_val[i] {
                best_val[i] = val[i];
                best[i * d..(i + 1) * d].copy_from_slice(&cur[i * d..(i + 1) * d]);
            }
        }
        trace.push(restart_trace);
    }
    PgdOutcome {
        adversarial: best,
        objective: best_val,
        trace,
    }
}

fn pgd_params(config: &AttackConfig) -> PgdParams {
    PgdParams {
        epsilon: config.epsilon,
        steps: config.steps,
        step_size: config.step_size,
        restarts: config.restarts,
        seed: config.seed,
    }
}

/// Batched PGD on the cross-entropy of the true labels. `first_index` is the
/// global index of the first sample, used for seeding.
pub fn pgd_batch(
    network: &Network,
    inputs: &[f64],
    labels: &[usize],
    config: &AttackConfig,
    first_index: usize,
) -> PgdOutcome {
    let objective = InputObjective::CrossEntropy { labels };
    pgd_maximize(
        network,
        inputs,
        &objective,
        pgd_params(config),
        first_index,
        false,
    )
}

/// Like [`pgd_batch`], also recording per-restart objective traces.
pub fn pgd_batch_traced(
    network: &Network,
    inputs: &[f64],
    labels: &[usize],
    config: &AttackConfig,
    first_index: usize,
) -> PgdOutcome {
    let objective = InputObjective::CrossEntropy { labels };
    pgd_maximize(
        network,
        inputs,
        &objective,
        pgd_params(config),
        first_index,
        true,
    )
}

pub fn pgd(network: &Network, x: &Tensor, y: usize, config: &AttackConfig) -> Tensor {
    let out = pgd_batch(network, x.data(), &[y], config, 0);
    Tensor::from_parts_unchecked(x.shape().to_vec(), out.adversarial)
}

/// `x + N(0, σ²I)`, clipped to `[0, 1]`.
pub fn gaussian_perturb(x: &Tensor, sigma: f64, seed: u64) -> Tensor {
    let mut rng = seed::rng(seed);
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (v + sigma * z).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::from_parts_unchecked(x.shape().to_vec(), data)
}

fn gaussian_batch(
    inputs: &[f64],
    d: usize,
    sigma: f64,
    seed: u64,
    first_index: usize,
    restart: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(inputs.len());
    for (i, row) in inputs.chunks_exact(d).enumerate() {
        let mut rng = seed::rng(seed::mix64(
            seed,
            &[(first_index + i) as u64, restart as u64],
        ));
        out.extend(row.iter().map(|&v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (v + sigma * z).clamp(0.0, 1.0)
        }));
    }
    out
}

/// Outcome of one adversarial candidate for a sample.
#[derive(Clone)]
struct Candidate {
    loss: f64,
    correct: bool,
}

impl Candidate {
    /// Misclassification dominates; ties broken by higher loss.
    fn beats(&self, other: &Candidate) -> bool {
        match (self.correct, other.correct) {
            (false, true) => true,
            (true, false) => false,
            _ => self.loss > other.loss,
        }
    }
}

fn score(network: &Network, inputs: &[f64], labels: &[usize]) -> Vec<Candidate> {
    let c = network.class_count();
    let logits = network.logits_batch(inputs);
    let losses = crate::loss::cross_entropy_rows(&logits, c, labels);
    logits
        .chunks_exact(c)
        .zip(labels)
        .zip(losses)
        .map(|((row, &y), loss)| Candidate {
            loss,
            correct: argmax_class(row) == y,
        })
        .collect()
}

fn merge(best: &mut [Candidate], challengers: Vec<Candidate>) {
    for (b, c) in best.iter_mut().zip(challengers) {
        if c.beats(b) {
            *b = c;
        }
    }
}

/// Best budgeted candidates for one chunk under `config`.
fn attack_chunk(
    network: &Network,
    inputs: &[f64],
    labels: &[usize],
    config: &AttackConfig,
    first: usize,
) -> Vec<Candidate> {
    match config.kind {
        AttackKind::Fgsm => score(
            network,
            &fgsm_batch(network, inputs, labels, config.epsilon),
            labels,
        ),
        AttackKind::Pgd => score(
            network,
            &pgd_batch(network, inputs, labels, config, first).adversarial,
            labels,
        ),
        AttackKind::PgdStrong => {
            let mut best = score(
                network,
                &pgd_batch(network, inputs, labels, config, first).adversarial,
                labels,
            );
            merge(
                &mut best,
                score(
                    network,
                    &fgsm_batch(network, inputs, labels, config.epsilon),
                    labels,
                ),
            );
            best
        }
        AttackKind::Gaussian => unreachable!("gaussian noise is not budgeted"),
    }
}

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n)
        .step_by(CHUNK)
        .map(|s| s..(s + CHUNK).min(n))
        .collect()
}

/// Evaluates one attack setting on the test set.
pub fn evaluate_robustness(
    network: &Network,
    test: &Dataset,
    config: &AttackConfig,
) -> Result<RobustnessRecord> {
    evaluate_grid(network, test, std::slice::from_ref(config)).map(|mut v| v.remove(0))
}

/// Evaluates several settings of the same attack. Budgeted settings must be
/// in ascending ε order and are evaluated nested: each sample's best
/// candidate at a smaller ε stays in the candidate set at every larger ε,
/// so attacked accuracy is non-increasing along the grid.
pub fn evaluate_grid(
    network: &Network,
    test: &Dataset,
    configs: &[AttackConfig],
) -> Result<Vec<RobustnessRecord>> {
    if test.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if test.input_len() != network.input_len() {
        return Err(Error::ShapeMismatch {
            expected: network.spec().input_shape.clone(),
            actual: test.input_shape().to_vec(),
        });
    }
    for c in configs {
        c.validate()?;
    }
    if let Some(first) = configs.first() {
        if configs.iter().any(|c| c.kind != first.kind) {
            return Err(Error::invalid("evaluate_grid needs a single attack kind"));
        }
        if first.kind.is_budgeted() && configs.windows(2).any(|w| w[1].epsilon < w[0].epsilon) {
            return Err(Error::invalid("epsilon grid must be ascending"));
        }
    }
    let n = test.len();
    let d = test.input_len();
    let inputs = test.inputs_flat();
    let labels = test.labels();
    let ranges = chunk_ranges(n);

    let per_chunk: Vec<(usize, Vec<usize>)> = ranges
        .par_iter()
        .map(|r| {
            let x = &inputs[r.start * d..r.end * d];
            let y = &labels[r.clone()];
            let clean = score(network, x, y);
            let clean_correct = clean.iter().filter(|c| c.correct).count();
            let mut best = clean;
            let mut attacked = Vec::with_capacity(configs.len());
            for config in configs {
                let correct = if config.kind.is_budgeted() {
                    let challengers = attack_chunk(network, x, y, config, r.start);
                    merge(&mut best, challengers);
                    best.iter().filter(|c| c.correct).count()
                } else {
                    (0..config.restarts)
                        .map(|restart| {
                            let noisy =
                                gaussian_batch(x, d, config.sigma, config.seed, r.start, restart);
                            score(network, &noisy, y)
                                .iter()
                                .filter(|c| c.correct)
                                .count()
                        })
                        .sum()
                };
                attacked.push(correct);
            }
            (clean_correct, attacked)
        })
        .collect();

    let clean: usize = per_chunk.iter().map(|(c, _)| c).sum();
    Ok(configs
        .iter()
        .enumerate()
        .map(|(j, config)| {
            let attacked: usize = per_chunk.iter().map(|(_, a)| a[j]).sum();
            let draws = if config.kind.is_budgeted() {
                1
            } else {
                config.restarts
            };
            let p = clean as f64 / n as f64;
            let p_star = attacked as f64 / (n * draws) as f64;
            RobustnessRecord {
                clean_accuracy: p,
                attacked_accuracy: p_star,
                relative_performance: relative_performance(p, p_star),
                attack: config.clone(),
                n_evaluated: n,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec};

    /// Two-class linear scorer `s(x) = 3x₁ − 4x₂ − 0.5` as logits `(0, s)`.
    fn linear_scorer() -> Network {
        let mut net = build_model(&ModelSpec::mlp_with_hidden(2, vec![], 2, 0)).unwrap();
        net.set_params(&[0.0, 0.0, 3.0, -4.0, 0.0, -0.5]).unwrap();
        net
    }

    #[test]
    fn fgsm_linear_threshold() {
        let net = linear_scorer();
        let x = Tensor::vector(vec![0.5, 0.5]).unwrap();
        assert_eq!(net.predict_batch(x.data()), vec![0]);
        let hit = fgsm(&net, &x, 0, 0.2);
        assert_eq!(net.predict_batch(hit.data()), vec![1]);
        let miss = fgsm(&net, &x, 0, 0.1);
        assert_eq!(net.predict_batch(miss.data()), vec![0]);
        assert_eq!(fgsm(&net, &x, 0, 0.0), x);
    }

    #[test]
    fn pgd_matches_linear_threshold() {
        let net = linear_scorer();
        let x = Tensor::vector(vec![0.5, 0.5]).unwrap();
        for steps in [1, 3, 40] {
            let hit = pgd(&net, &x, 0, &AttackConfig::pgd_with(0.2, steps, 2, 7));
            assert_eq!(net.predict_batch(hit.data()), vec![1], "steps {steps}");
            let miss = pgd(&net, &x, 0, &AttackConfig::pgd_with(0.1, steps, 2, 7));
            assert_eq!(net.predict_batch(miss.data()), vec![0], "steps {steps}");
        }
    }

    #[test]
    fn zero_budget_is_identity() {
        let net = build_model(&ModelSpec::mlp(2, 2, 1.0, 3)).unwrap();
        let x = Tensor::vector(vec![0.25, 0.75]).unwrap();
        assert_eq!(pgd(&net, &x, 1, &AttackConfig::pgd(0.0, 1)), x);
        assert_eq!(gaussian_perturb(&x, 0.0, 4), x);
    }

    #[test]
    fn gaussian_is_seeded() {
        let x = Tensor::vector(vec![0.5; 16]).unwrap();
        assert_eq!(gaussian_perturb(&x, 0.1, 9), gaussian_perturb(&x, 0.1, 9));
        assert_ne!(gaussian_perturb(&x, 0.1, 9), gaussian_perturb(&x, 0.1, 10));
    }

    #[test]
    fn validation() {
        assert!(AttackConfig::pgd(0.1, 0).validate().is_ok());
        assert!(AttackConfig::pgd_with(0.1, 0, 1, 0).validate().is_err());
        assert!(AttackConfig::gaussian(-0.1, 0).validate().is_err());
        assert!(AttackConfig::fgsm(-1.0).validate().is_err());
    }

    #[test]
    fn relative_performance_arithmetic() {
        assert_eq!(relative_performance(0.92, 0.46), Some(0.5));
        assert_eq!(relative_performance(0.0, 0.0), None);
    }
}
