//! Substitute-model training from a small labeled pool and a large
//! unlabeled pool: augmentation, label guessing, sharpening, mixup, and a
//! combined labeled/unlabeled loss.
//!
//! All randomness comes from one seeded generator with a fixed draw order
//! per iteration, so serial runs replay exactly:
//!
//! 1. labeled batch indices, 2. unlabeled batch indices, 3. one augmentation
//! per labeled sample, 4. `N` augmentations per unlabeled sample, 5. the
//! shuffle permutation of the combined batch, 6. mixup coefficients for the
//! labeled side then the unlabeled side.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::augment::Augmenter;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Optimizer;
use crate::oracle::LabeledSample;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Hyperparameters for substitute training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Epochs over the pools.
    pub epochs: usize,
    /// Optimizer steps per epoch; pools smaller than a batch are resampled
    /// with replacement, so this is independent of pool size.
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    /// Sharpening temperature for guessed labels.
    pub temperature: f64,
    /// Augmentations per unlabeled sample.
    pub augmentations: usize,
    /// Adam learning rate for the substitute.
    pub learning_rate: f64,
    /// Shape parameter `a` of the Beta(a, a) mixup coefficient.
    pub beta_param: f64,
    /// Weight of the unlabeled consistency loss.
    pub unlabeled_weight: f64,
    /// Fraction of total iterations over which the unlabeled weight ramps
    /// linearly from zero to its full value.
    pub ramp_fraction: f64,
    /// Optional exponential moving average of parameters; the averaged
    /// weights are returned instead of the raw ones when set.
    pub ema_decay: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            iters_per_epoch: 32,
            batch_size: 16,
            temperature: 0.5,
            augmentations: 2,
            learning_rate: 0.004,
            beta_param: 0.75,
            unlabeled_weight: 75.0,
            ramp_fraction: 0.75,
            ema_decay: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::config("train.temperature", "must be positive"));
        }
        if self.augmentations == 0 {
            return Err(Error::config("train.augmentations", "must be at least 1"));
        }
        if self.unlabeled_weight < 0.0 {
            return Err(Error::config("train.unlabeled_weight", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::config("train.ema_decay", "must lie in (0, 1)"));
            }
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.epochs * self.iters_per_epoch
    }

    /// Unlabeled-loss weight in effect at global iteration `t` (0-based).
    pub fn lambda_at(&self, t: usize) -> f64 {
        let total = self.total_iterations();
        let ramp = (self.ramp_fraction * total as f64).ceil() as usize;
        if ramp == 0 {
            return self.unlabeled_weight;
        }
        self.unlabeled_weight * (((t + 1) as f64 / ramp as f64).min(1.0))
    }
}

/// One mixed labeled/unlabeled training batch. Target rows are probability
/// vectors by construction (mixups of one-hots and sharpened guesses).
#[derive(Debug, Clone)]
pub struct SemiBatch {
    pub labeled_inputs: Tensor,
    pub labeled_targets: Tensor,
    /// `(inputs, targets)` for the unlabeled side; absent when the
    /// unlabeled pool is empty and training degenerates to supervised.
    pub unlabeled: Option<(Tensor, Tensor)>,
}

/// Replay record for one batch: the shuffle permutation of the combined
/// batch and every mixup coefficient drawn, in draw order.
#[derive(Debug, Clone, Default)]
pub struct SemiBatchTrace {
    pub shuffle: Vec<usize>,
    pub etas: Vec<f64>,
}

pub fn one_hot(num_classes: usize, class: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_classes];
    v[class] = 1.0;
    v
}

/// Temperature-exponentiate a distribution to lower its entropy:
/// `p_k = p̄_k^(1/T) / Σ_j p̄_j^(1/T)`.
pub fn sharpen(p: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 {
        return Err(Error::contract("sharpen", "temperature must be positive"));
    }
    let powed: Vec<f64> = p.iter().map(|&v| v.powf(1.0 / temperature)).collect();
    let sum: f64 = powed.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        return Err(Error::contract("sharpen", "input has no probability mass"));
    }
    Ok(powed.into_iter().map(|v| v / sum).collect())
}

/// Average the model's softmax outputs over `n` independent augmentations
/// of one unlabeled sample.
pub fn guess_label(
    model: &Model,
    x: &Tensor,
    augmenter: &Augmenter,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::contract("guess_label", "need at least one augmentation"));
    }
    let (_, guesses) = augment_and_guess(model, &[x], augmenter, n, rng)?;
    Ok(guesses.into_iter().next().unwrap())
}

/// Generate `n` augmentations per sample (draws in sample order) and return
/// them together with the per-sample mean softmax prediction.
fn augment_and_guess(
    model: &Model,
    xs: &[&Tensor],
    augmenter: &Augmenter,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Tensor>, Vec<Vec<f64>>)> {
    let mut augmented = Vec::with_capacity(xs.len() * n);
    for x in xs {
        for _ in 0..n {
            augmented.push(augmenter.apply(x, rng));
        }
    }
    let batch = Tensor::stack(&augmented)?;
    let probs = model.predict_proba(&batch)?;
    let k = model.num_classes();
    let mut guesses = Vec::with_capacity(xs.len());
    for s in 0..xs.len() {
        let mut mean = vec![0.0; k];
        for i in 0..n {
            let row = &probs.data()[(s * n + i) * k..(s * n + i + 1) * k];
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        guesses.push(mean);
    }
    Ok((augmented, guesses))
}

/// Convex combination of two (input, distribution) pairs with the dominant
/// coefficient `ζ = max(η, 1−η)` on the first pair, so the result stays
/// closer to its own set.
pub fn mixup_pair(
    x_a: &Tensor,
    p_a: &[f64],
    x_b: &Tensor,
    p_b: &[f64],
    eta: f64,
) -> (Tensor, Vec<f64>) {
    let zeta = eta.max(1.0 - eta);
    let x = Tensor::new(
        x_a.shape().to_vec(),
        x_a.data()
            .iter()
            .zip(x_b.data())
            .map(|(&a, &b)| zeta * a + (1.0 - zeta) * b)
            .collect(),
    )
    .expect("mixup shape");
    let p = p_a.iter().zip(p_b).map(|(&a, &b)| zeta * a + (1.0 - zeta) * b).collect();
    (x, p)
}

/// Assemble one training batch: augment, guess + sharpen unlabeled labels,
/// shuffle the union, and mix each side against its shuffled partners.
pub fn build_semibatch(
    model: &Model,
    labeled: &[&LabeledSample],
    unlabeled: &[&Tensor],
    config: &TrainConfig,
    augmenter: &Augmenter,
    rng: &mut ChaCha8Rng,
) -> Result<(SemiBatch, SemiBatchTrace)> {
    let beta = Beta::new(config.beta_param, config.beta_param)
        .map_err(|e| Error::config("train.beta_param", e.to_string()))?;
    build_semibatch_impl(model, labeled, unlabeled, config, augmenter, rng, &mut |rng| {
        beta.sample(rng)
    })
}

pub(crate) fn build_semibatch_impl(
    model: &Model,
    labeled: &[&LabeledSample],
    unlabeled: &[&Tensor],
    config: &TrainConfig,
    augmenter: &Augmenter,
    rng: &mut ChaCha8Rng,
    draw_eta: &mut dyn FnMut(&mut ChaCha8Rng) -> f64,
) -> Result<(SemiBatch, SemiBatchTrace)> {
    if labeled.is_empty() {
        return Err(Error::contract("build_semibatch", "labeled batch is empty"));
    }
    let k = model.num_classes();

    // One augmentation per labeled sample, with its one-hot oracle label.
    let labeled_aug: Vec<(Tensor, Vec<f64>)> = labeled
        .iter()
        .map(|s| (augmenter.apply(&s.x, rng), one_hot(k, s.y)))
        .collect();

    // N augmentations per unlabeled sample, all carrying the sharpened
    // average guess for that sample.
    let mut unlabeled_aug: Vec<(Tensor, Vec<f64>)> = Vec::new();
    if !unlabeled.is_empty() {
        let n = config.augmentations;
        let (augs, guesses) = augment_and_guess(model, unlabeled, augmenter, n, rng)?;
        for (s, guess) in guesses.iter().enumerate() {
            let p = sharpen(guess, config.temperature)?;
            for i in 0..n {
                unlabeled_aug.push((augs[s * n + i].clone(), p.clone()));
            }
        }
    }

    // Shuffle the union; the labeled side mixes against the first |D0'|
    // shuffled entries, the unlabeled side against the remainder.
    let total = labeled_aug.len() + unlabeled_aug.len();
    let mut perm: Vec<usize> = (0..total).collect();
    use rand::seq::SliceRandom;
    perm.shuffle(rng);
    let combined: Vec<&(Tensor, Vec<f64>)> =
        labeled_aug.iter().chain(unlabeled_aug.iter()).collect();

    let mut trace = SemiBatchTrace { shuffle: perm.clone(), etas: Vec::with_capacity(total) };
    let mut mix_side = |side: &[(Tensor, Vec<f64>)],
                        offset: usize,
                        rng: &mut ChaCha8Rng,
                        trace: &mut SemiBatchTrace| {
        let mut xs = Vec::with_capacity(side.len());
        let mut ps = Vec::with_capacity(side.len() * k);
        for (i, (x, p)) in side.iter().enumerate() {
            let partner = combined[perm[offset + i]];
            let eta = draw_eta(rng);
            trace.etas.push(eta);
            let (mx, mp) = mixup_pair(x, p, &partner.0, &partner.1, eta);
            xs.push(mx);
            ps.extend(mp);
        }
        (xs, ps)
    };

    let (lx, lp) = mix_side(&labeled_aug, 0, rng, &mut trace);
    let labeled_inputs = Tensor::stack(&lx)?;
    let labeled_targets = Tensor::new(vec![lx.len(), k], lp)?;

    let unlabeled_pair = if unlabeled_aug.is_empty() {
        None
    } else {
        let (ux, up) = mix_side(&unlabeled_aug, labeled_aug.len(), rng, &mut trace);
        Some((Tensor::stack(&ux)?, Tensor::new(vec![ux.len(), k], up)?))
    };

    let batch =
        SemiBatch { labeled_inputs, labeled_targets, unlabeled: unlabeled_pair };
    validate_batch_targets(&batch)?;
    Ok((batch, trace))
}

fn validate_batch_targets(batch: &SemiBatch) -> Result<()> {
    let check = |t: &Tensor, side: &str| -> Result<()> {
        let k = *t.shape().last().unwrap();
        for (i, row) in t.data().chunks(k).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::contract(
                    "build_semibatch",
                    format!("{side} target row {i} sums to {s}"),
                ));
            }
        }
        Ok(())
    };
    check(&batch.labeled_targets, "labeled")?;
    if let Some((_, up)) = &batch.unlabeled {
        check(up, "unlabeled")?;
    }
    Ok(())
}

/// Combined loss: mean cross-entropy on the labeled side plus
/// `lambda_u` times the mean squared distance between the model's softmax
/// outputs and the unlabeled targets.
pub fn semi_loss(model: &Model, batch: &SemiBatch, lambda_u: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _, parts) = semi_loss_on(&mut tape, model, batch, lambda_u, false)?;
    let _ = parts;
    Ok(tape.value(loss)[0])
}

/// Per-side loss values for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub label_loss: f64,
    pub unlabeled_loss: f64,
}

fn semi_loss_on(
    tape: &mut Tape,
    model: &Model,
    batch: &SemiBatch,
    lambda_u: f64,
    trainable: bool,
) -> Result<(Var, Vec<Var>, LossParts)> {
    let forward = |tape: &mut Tape, model: &Model, x: Var| -> Result<(Var, Vec<Var>)> {
        if trainable {
            model.forward_trainable(tape, x)
        } else {
            Ok((model.forward_on(tape, x)?, Vec::new()))
        }
    };
    let lx = tape.constant(&batch.labeled_inputs);
    let (l_logits, mut pvars) = forward(tape, model, lx)?;
    let ce = tape.cross_entropy(l_logits, &batch.labeled_targets)?;
    let label_loss = tape.value(ce)[0];

    let (total, unlabeled_loss) = match &batch.unlabeled {
        None => (ce, 0.0),
        Some((ux, up)) => {
            let uxv = tape.constant(ux);
            let (u_logits, upvars) = forward(tape, model, uxv)?;
            pvars.extend(upvars);
            let probs = tape.softmax(u_logits)?;
            let mse = tape.mse_rows(probs, up)?;
            let unlabeled_loss = tape.value(mse)[0];
            let weighted = tape.scale(mse, lambda_u);
            (tape.add(ce, weighted)?, unlabeled_loss)
        }
    };
    Ok((total, pvars, LossParts { label_loss, unlabeled_loss }))
}

/// Per-iteration training metrics, one line per optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct IterationRecord {
    pub iteration: usize,
    pub label_loss: f64,
    pub unlabeled_loss: f64,
    pub combined: f64,
    pub lambda_u: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    pub records: Vec<IterationRecord>,
    /// Every mixup coefficient drawn over the whole run, in draw order.
    pub eta_draws: Vec<f64>,
}

impl TrainStats {
    /// Tab-separated metrics log: iteration, label loss, unlabeled loss,
    /// combined loss, effective unlabeled weight.
    pub fn write_log(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "iteration\tlabel_loss\tunlabeled_loss\tcombined\tlambda_u")?;
        for r in &self.records {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                r.iteration, r.label_loss, r.unlabeled_loss, r.combined, r.lambda_u
            )?;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub stats: TrainStats,
}

/// Train the substitute on the oracle-labeled pool `d0` and the unlabeled
/// pool `d1`. The oracle itself is never touched here: the labels in `d0`
/// are the only supervision the substitute ever sees.
pub fn train_substitute(
    mut model: Model,
    d0: &[LabeledSample],
    d1: &[(u64, Tensor)],
    config: &TrainConfig,
    augmenter: &Augmenter,
) -> Result<TrainOutcome> {
    config.validate()?;
    if d0.is_empty() {
        return Err(Error::contract("train_substitute", "labeled pool is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::adam(config.learning_rate);
    let mut stats = TrainStats::default();
    let mut ema: Option<Vec<Vec<f64>>> = config
        .ema_decay
        .map(|_| model.params().iter().map(|p| p.data().to_vec()).collect());

    let b = config.batch_size;
    for t in 0..config.total_iterations() {
        let lambda = config.lambda_at(t);
        let labeled_idx = pick_indices(d0.len(), b, &mut rng);
        let labeled_batch: Vec<&LabeledSample> = labeled_idx.iter().map(|&i| &d0[i]).collect();
        let unlabeled_batch: Vec<&Tensor> = if d1.is_empty() {
            Vec::new()
        } else {
            pick_indices(d1.len(), b, &mut rng).iter().map(|&i| &d1[i].1).collect()
        };

        let (batch, trace) =
            build_semibatch(&model, &labeled_batch, &unlabeled_batch, config, augmenter, &mut rng)?;
        stats.eta_draws.extend(&trace.etas);

        let mut tape = Tape::new();
        let (loss, pvars, parts) = semi_loss_on(&mut tape, &model, &batch, lambda, true)?;
        let combined = tape.value(loss)[0];
        tape.backward(loss)?;
        // Two forward passes bind two leaf sets per parameter; absorbing
        // accumulates both contributions.
        let per_pass = model.params().len();
        for chunk in pvars.chunks(per_pass) {
            model.absorb_grads(&tape, chunk);
        }
        opt.step(&mut model)?;

        if let (Some(decay), Some(shadow)) = (config.ema_decay, ema.as_mut()) {
            for (s, p) in shadow.iter_mut().zip(model.params()) {
                for (sv, &pv) in s.iter_mut().zip(p.data()) {
                    *sv = decay * *sv + (1.0 - decay) * pv;
                }
            }
        }

        stats.records.push(IterationRecord {
            iteration: t,
            label_loss: parts.label_loss,
            unlabeled_loss: parts.unlabeled_loss,
            combined,
            lambda_u: lambda,
        });
    }

    if let Some(shadow) = ema {
        for (p, s) in model.params_mut().into_iter().zip(shadow) {
            p.data_mut().copy_from_slice(&s);
        }
    }
    Ok(TrainOutcome { model, stats })
}

/// Batch indices: without replacement when the pool is large enough,
/// with replacement otherwise.
fn pick_indices(len: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len >= batch {
        sample_indices(rng, len, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..len)).collect()
    }
}
