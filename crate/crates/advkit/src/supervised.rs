//! Plain supervised minibatch training: used for the target model and as
//! the labeled-only baseline the semi-supervised pipeline is compared to.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Optimizer;
use crate::semisup::one_hot;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 32, seed: 0 }
    }
}

/// Train `model` on `(inputs[i], labels[i])` pairs with the given optimizer.
pub fn train_supervised(
    mut model: Model,
    inputs: &[Tensor],
    labels: &[usize],
    mut opt: Optimizer,
    config: &SupervisedConfig,
) -> Result<Model> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(Error::contract(
            "train_supervised",
            format!("{} inputs vs {} labels", inputs.len(), labels.len()),
        ));
    }
    let k = model.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let b = config.batch_size.min(inputs.len());
    let steps_per_epoch = inputs.len().div_ceil(b);
    for _ in 0..config.epochs {
        for _ in 0..steps_per_epoch {
            let idx: Vec<usize> = if inputs.len() >= b {
                sample_indices(&mut rng, inputs.len(), b).into_vec()
            } else {
                (0..b).map(|_| rng.random_range(0..inputs.len())).collect()
            };
            let rows: Vec<Tensor> = idx.iter().map(|&i| inputs[i].clone()).collect();
            let batch = Tensor::stack(&rows)?;
            let mut target = Vec::with_capacity(idx.len() * k);
            for &i in &idx {
                target.extend(one_hot(k, labels[i]));
            }
            let targets = Tensor::new(vec![idx.len(), k], target)?;

            let mut tape = Tape::new();
            let x = tape.constant(&batch);
            let (logits, pvars) = model.forward_trainable(&mut tape, x)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            tape.backward(loss)?;
            model.absorb_grads(&tape, &pvars);
            opt.step(&mut model)?;
        }
    }
    Ok(model)
}

/// Fraction of samples the model labels correctly.
pub fn accuracy(model: &Model, inputs: &[Tensor], labels: &[usize]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::contract("accuracy", "empty evaluation set"));
    }
    let batch = Tensor::stack(inputs)?;
    let pred = model.predict(&batch)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchSpec;

    #[test]
    fn supervised_training_fits_a_separable_toy_task() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let class = i % 2;
            let center = if class == 0 { 0.25 } else { 0.75 };
            let x: Vec<f64> =
                (0..4).map(|_| (center + 0.05 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0)).collect();
            inputs.push(Tensor::new(vec![4], x).unwrap());
            labels.push(class);
        }
        let model =
            Model::build(&ArchSpec::Mlp { hidden: vec![8] }, &[4], 2, &mut rng).unwrap();
        let opt = Optimizer::sgd_momentum(0.1, 0.9);
        let trained = train_supervised(
            model,
            &inputs,
            &labels,
            opt,
            &SupervisedConfig { epochs: 10, batch_size: 16, seed: 1 },
        )
        .unwrap();
        assert!(accuracy(&trained, &inputs, &labels).unwrap() > 0.95);
    }
}
