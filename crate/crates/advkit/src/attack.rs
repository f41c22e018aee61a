//! White-box attacks against the local substitute model, under an ℓ∞
//! constraint anchored at the clean input.
//!
//! All four algorithms are purely local: none of them touches the oracle.
//! Sample-level randomness (the noisy start of `pgd`/`ipgd`) is drawn from
//! a stream derived from `(config.seed, sample.id)`, so batch and
//! single-sample runs produce identical outputs.

use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::semisup::one_hot;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackAlgorithm {
    Fgsm,
    Bim,
    Pgd,
    Ipgd,
}

impl AttackAlgorithm {
    pub const ALL: [AttackAlgorithm; 4] =
        [AttackAlgorithm::Fgsm, AttackAlgorithm::Bim, AttackAlgorithm::Pgd, AttackAlgorithm::Ipgd];

    pub fn name(&self) -> &'static str {
        match self {
            AttackAlgorithm::Fgsm => "fgsm",
            AttackAlgorithm::Bim => "bim",
            AttackAlgorithm::Pgd => "pgd",
            AttackAlgorithm::Ipgd => "ipgd",
        }
    }
}

impl FromStr for AttackAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackAlgorithm::Fgsm),
            "bim" => Ok(AttackAlgorithm::Bim),
            "pgd" => Ok(AttackAlgorithm::Pgd),
            "ipgd" => Ok(AttackAlgorithm::Ipgd),
            other => Err(Error::config("attack.algorithm", format!("unknown algorithm `{other}`"))),
        }
    }
}

/// How the target class of a targeted attack is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetClass {
    /// `(y + 1) mod K` — always differs from the true label.
    Next,
    /// A fixed class; attacking a sample whose true label equals it is a
    /// contract error.
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    Untargeted,
    Targeted(TargetClass),
}

impl AttackMode {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMode::Untargeted => "untargeted",
            AttackMode::Targeted(_) => "targeted",
        }
    }

    /// Class the attack pushes toward (targeted) or `None` (untargeted).
    pub fn resolve_target(&self, true_label: usize, num_classes: usize) -> Result<Option<usize>> {
        match self {
            AttackMode::Untargeted => Ok(None),
            AttackMode::Targeted(TargetClass::Next) => {
                Ok(Some((true_label + 1) % num_classes))
            }
            AttackMode::Targeted(TargetClass::Fixed(c)) => {
                if *c == true_label {
                    Err(Error::contract(
                        "attack mode",
                        format!("target class {c} equals the true label"),
                    ))
                } else if *c >= num_classes {
                    Err(Error::contract("attack mode", format!("target class {c} out of range")))
                } else {
                    Ok(Some(*c))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// ℓ∞ radius in input units.
    pub epsilon: f64,
    /// Step rate α.
    pub step_rate: f64,
    /// Maximum iterations I.
    pub max_iterations: usize,
    /// Maximum decay-and-retry events d_max (ipgd only).
    pub max_decays: usize,
    /// Uniform init-noise half-width for pgd/ipgd.
    pub init_noise_scale: f64,
    pub mode: AttackMode,
    /// Geometric decay base ρ: a retry at iteration i rescales α by ρ^i.
    pub decay_factor: f64,
    /// Weight of the optional soft perturbation penalty ‖δ‖²; zero keeps
    /// the pure hard-constraint formulation.
    pub penalty_lambda: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.3,
            step_rate: 0.075,
            max_iterations: 20,
            max_decays: 4,
            init_noise_scale: 0.15,
            mode: AttackMode::Untargeted,
            decay_factor: 0.9,
            penalty_lambda: 0.0,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(Error::config("attack.epsilon", "must be positive"));
        }
        if self.step_rate <= 0.0 {
            return Err(Error::config("attack.step_rate", "must be positive"));
        }
        if self.init_noise_scale < 0.0 {
            return Err(Error::config("attack.init_noise", "must be non-negative"));
        }
        Ok(())
    }
}

/// One input to attack: the clean tensor, its label in model space, and a
/// stable identity for seed derivation.
#[derive(Debug, Clone)]
pub struct AttackSample {
    pub id: u64,
    pub x: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct AdversarialResult {
    pub x_adv: Tensor,
    pub id: u64,
    pub true_label: usize,
    /// Substitute's prediction on the adversarial input.
    pub substitute_prediction: usize,
    pub iterations_used: usize,
    pub decays_used: usize,
    pub linf_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    Init,
    Accepted,
    Decay,
}

/// One trace line: the loss and step rate observed at an iteration, plus
/// whether the step was accepted or retried with a decayed rate.
#[derive(Debug, Clone, Copy)]
pub struct TraceStep {
    pub iteration: usize,
    pub loss: f64,
    pub alpha: f64,
    pub event: StepEvent,
}

#[derive(Debug, Clone, Default)]
pub struct AttackTrace {
    pub steps: Vec<TraceStep>,
}

impl AttackTrace {
    pub fn decay_events(&self) -> usize {
        self.steps.iter().filter(|s| s.event == StepEvent::Decay).count()
    }

    /// Losses at accepted iterations, in order.
    pub fn accepted_losses(&self) -> Vec<f64> {
        self.steps
            .iter()
            .filter(|s| s.event == StepEvent::Accepted)
            .map(|s| s.loss)
            .collect()
    }
}

/// Deterministic sign with `sign(0) = 0`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clip `x_adv` into the ℓ∞ ball of radius `epsilon` around `x`, then into
/// the valid box `[0,1]`. Idempotent.
pub fn project(x_adv: &Tensor, x: &Tensor, epsilon: f64) -> Result<Tensor> {
    if x_adv.shape() != x.shape() {
        return Err(Error::shape(
            "project",
            format!("{:?} vs {:?}", x_adv.shape(), x.shape()),
        ));
    }
    let data = x_adv
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &c)| a.clamp(c - epsilon, c + epsilon).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Attack loss at `point` and its gradient with respect to the input.
///
/// Untargeted mode ascends cross-entropy on the true label; targeted mode
/// descends cross-entropy on the target class. The optional penalty term
/// `penalty_lambda * ||point - clean||^2` discourages large perturbations
/// in both modes. Returns the cross-entropy value and the signed objective
/// gradient (already oriented so a `+alpha * sign(grad)` step improves the
/// attack objective).
fn loss_and_step_grad(
    model: &Model,
    point: &Tensor,
    clean: &Tensor,
    effective_label: usize,
    targeted: bool,
    penalty_lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let k = model.num_classes();
    let batch = Tensor::stack(std::slice::from_ref(point))?.with_grad();
    let targets = Tensor::new(vec![1, k], one_hot(k, effective_label))?;

    let mut tape = Tape::new();
    let x = tape.leaf(&batch);
    let logits = model.forward_on(&mut tape, x)?;
    let ce = tape.cross_entropy(logits, &targets)?;
    let objective = if penalty_lambda > 0.0 {
        let clean_batch = Tensor::stack(std::slice::from_ref(clean))?;
        let c = tape.constant(&clean_batch);
        let delta = tape.sub(x, c)?;
        let sq = tape.mul(delta, delta)?;
        let d = tape.sum(sq);
        let pen = tape.scale(d, penalty_lambda);
        if targeted {
            // minimize ce + λD
            tape.add(ce, pen)?
        } else {
            // maximize ce − λD
            tape.sub(ce, pen)?
        }
    } else {
        ce
    };
    tape.backward(objective)?;
    let grad = tape
        .grad(x)
        .ok_or_else(|| Error::contract("attack gradient", "input gradient missing"))?;
    let dir = if targeted { -1.0 } else { 1.0 };
    let loss = tape.value(ce)[0];
    Ok((loss, grad.data().iter().map(|&g| dir * g).collect()))
}

fn stepped(point: &Tensor, grad: &[f64], alpha: f64) -> Tensor {
    Tensor::new(
        point.shape().to_vec(),
        point.data().iter().zip(grad).map(|(&v, &g)| v + alpha * sign(g)).collect(),
    )
    .expect("step shape")
}

fn finish(
    model: &Model,
    sample: &AttackSample,
    x_adv: Tensor,
    iterations_used: usize,
    decays_used: usize,
) -> Result<AdversarialResult> {
    let pred = model.predict(&Tensor::stack(std::slice::from_ref(&x_adv))?)?[0];
    let linf = x_adv.linf_distance(&sample.x);
    Ok(AdversarialResult {
        x_adv,
        id: sample.id,
        true_label: sample.label,
        substitute_prediction: pred,
        iterations_used,
        decays_used,
        linf_distance: linf,
    })
}

/// Independent random stream for one sample.
fn sample_rng(config: &AttackConfig, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(id.wrapping_add(1));
    rng
}

/// Single signed-gradient step of size epsilon.
pub fn fgsm(model: &Model, sample: &AttackSample, config: &AttackConfig) -> Result<AdversarialResult> {
    config.validate()?;
    let k = model.num_classes();
    let target = config.mode.resolve_target(sample.label, k)?;
    let effective = target.unwrap_or(sample.label);
    let (_, grad) = loss_and_step_grad(
        model,
        &sample.x,
        &sample.x,
        effective,
        target.is_some(),
        config.penalty_lambda,
    )?;
    let raw = stepped(&sample.x, &grad[..], config.epsilon);
    let x_adv = project(&raw, &sample.x, config.epsilon)?;
    finish(model, sample, x_adv, 1, 0)
}

/// Iterated signed-gradient steps with projection after every step.
pub fn bim(model: &Model, sample: &AttackSample, config: &AttackConfig) -> Result<AdversarialResult> {
    Ok(iterative(model, sample, config, Variant::Bim, None)?)
}

/// `bim` from a uniformly noised, projected start.
pub fn pgd(model: &Model, sample: &AttackSample, config: &AttackConfig) -> Result<AdversarialResult> {
    Ok(iterative(model, sample, config, Variant::Pgd, None)?)
}

/// `pgd` with a step-rate decay-and-retry rule: when the pre-projection
/// step escapes the ℓ∞ ball around the noised start and the decay budget
/// is not spent, the step is retried at the same iteration index with
/// `alpha * decay_factor^i`, at most `max_decays` times in total.
pub fn ipgd(model: &Model, sample: &AttackSample, config: &AttackConfig) -> Result<AdversarialResult> {
    Ok(iterative(model, sample, config, Variant::Ipgd, None)?)
}

/// Run any algorithm and collect its per-iteration trace.
pub fn attack_with_trace(
    model: &Model,
    sample: &AttackSample,
    config: &AttackConfig,
    algorithm: AttackAlgorithm,
) -> Result<(AdversarialResult, AttackTrace)> {
    let mut trace = AttackTrace::default();
    let result = match algorithm {
        AttackAlgorithm::Fgsm => fgsm(model, sample, config)?,
        AttackAlgorithm::Bim => iterative(model, sample, config, Variant::Bim, Some(&mut trace))?,
        AttackAlgorithm::Pgd => iterative(model, sample, config, Variant::Pgd, Some(&mut trace))?,
        AttackAlgorithm::Ipgd => iterative(model, sample, config, Variant::Ipgd, Some(&mut trace))?,
    };
    Ok((result, trace))
}

#[derive(Clone, Copy, PartialEq)]
enum Variant {
    Bim,
    Pgd,
    Ipgd,
}

fn iterative(
    model: &Model,
    sample: &AttackSample,
    config: &AttackConfig,
    variant: Variant,
    mut trace: Option<&mut AttackTrace>,
) -> Result<AdversarialResult> {
    config.validate()?;
    let k = model.num_classes();
    let target = config.mode.resolve_target(sample.label, k)?;
    let effective = target.unwrap_or(sample.label);
    let targeted = target.is_some();

    let start = if variant == Variant::Bim || config.init_noise_scale == 0.0 {
        sample.x.clone()
    } else {
        let mut rng = sample_rng(config, sample.id);
        let s = config.init_noise_scale;
        let mut data = sample.x.data().to_vec();
        for v in &mut data {
            *v += rng.random_range(-s..=s);
        }
        let noised = Tensor::new(sample.x.shape().to_vec(), data)?;
        project(&noised, &sample.x, config.epsilon)?
    };
    if let Some(t) = trace.as_deref_mut() {
        t.steps.push(TraceStep { iteration: 0, loss: f64::NAN, alpha: config.step_rate, event: StepEvent::Init });
    }

    let mut current = start.clone();
    let mut alpha = config.step_rate;
    let mut decays = 0usize;
    let mut accepted = 0usize;
    let mut i = 0usize;
    while i < config.max_iterations {
        let (loss, grad) = loss_and_step_grad(
            model,
            &current,
            &sample.x,
            effective,
            targeted,
            config.penalty_lambda,
        )?;
        let raw = stepped(&current, &grad, alpha);
        if variant == Variant::Ipgd
            && raw.linf_distance(&start) > config.epsilon
            && decays < config.max_decays
        {
            alpha *= config.decay_factor.powi(i as i32);
            decays += 1;
            if let Some(t) = trace.as_deref_mut() {
                t.steps.push(TraceStep { iteration: i, loss, alpha, event: StepEvent::Decay });
            }
            continue;
        }
        current = project(&raw, &sample.x, config.epsilon)?;
        accepted += 1;
        if let Some(t) = trace.as_deref_mut() {
            t.steps.push(TraceStep { iteration: i, loss, alpha, event: StepEvent::Accepted });
        }
        i += 1;
    }
    finish(model, sample, current, accepted, decays)
}

/// Attack a batch, one independent random stream per sample; per-sample
/// failures are reported in place without aborting the rest.
pub fn attack_batch(
    model: &Model,
    samples: &[AttackSample],
    config: &AttackConfig,
    algorithm: AttackAlgorithm,
) -> Vec<Result<AdversarialResult>> {
    samples
        .par_iter()
        .map(|s| match algorithm {
            AttackAlgorithm::Fgsm => fgsm(model, s, config),
            AttackAlgorithm::Bim => bim(model, s, config),
            AttackAlgorithm::Pgd => pgd(model, s, config),
            AttackAlgorithm::Ipgd => ipgd(model, s, config),
        })
        .collect()
}
