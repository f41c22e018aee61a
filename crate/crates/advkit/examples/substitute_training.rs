//! Train a substitute from one label-only query per pool sample, then
//! compare its target agreement to a labeled-only supervised baseline.

use advkit::augment::Augmenter;
use advkit::data::{load_dataset, DataFormat, SplitConfig};
use advkit::eval::similarity;
use advkit::model::{ArchSpec, Model};
use advkit::optim::Optimizer;
use advkit::oracle::Oracle;
use advkit::semisup::{train_substitute, TrainConfig};
use advkit::supervised::{train_supervised, SupervisedConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> advkit::Result<()> {
    let format: DataFormat = "synthetic:blobs:k=3,n=900,d=8,noise=0.1".parse()?;
    let dataset = load_dataset("", &format, &SplitConfig { eval_fraction: 0.2, seed: 0 })?;

    // Target trained on its own half.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let target = Model::build(&ArchSpec::Mlp { hidden: vec![32, 32] }, &[8], 3, &mut rng)?;
    let target = train_supervised(
        target,
        &dataset.target_train.inputs,
        &dataset.target_train.labels,
        Optimizer::sgd_momentum(0.1, 0.9),
        &SupervisedConfig::default(),
    )?;

    // One label-only query per selected pool sample.
    let budget = 60;
    let oracle = Oracle::new(target.clone(), budget);
    let (d0, d1) = oracle.build_initial_pool(&dataset.attacker_pool.items(), budget, 1)?;
    println!("labeled pool {} | unlabeled pool {} | queries {}", d0.len(), d1.len(), oracle.budget_used());

    let config = TrainConfig { seed: 3, ..TrainConfig::default() };
    let substitute = Model::build(&ArchSpec::Mlp { hidden: vec![32, 32] }, &[8], 3, &mut rng)?;
    let augmenter = Augmenter::for_shape(&dataset.input_shape);
    let outcome = train_substitute(substitute, &d0, &d1, &config, &augmenter)?;
    for r in outcome.stats.records.iter().step_by(32) {
        println!(
            "iter {:>4}  label {:.4}  unlabeled {:.5}  combined {:.4}  lambda {:.1}",
            r.iteration, r.label_loss, r.unlabeled_loss, r.combined, r.lambda_u
        );
    }

    // Supervised baseline sees exactly the same oracle labels, nothing else.
    let baseline = Model::build(&ArchSpec::Mlp { hidden: vec![32, 32] }, &[8], 3, &mut rng)?;
    let baseline = train_supervised(
        baseline,
        &d0.iter().map(|s| s.x.clone()).collect::<Vec<_>>(),
        &d0.iter().map(|s| s.y).collect::<Vec<_>>(),
        Optimizer::adam(0.004),
        &SupervisedConfig { epochs: 40, batch_size: 16, seed: 3 },
    )?;

    let semi = similarity(&target, &outcome.model, &dataset.evaluation.inputs)?;
    let sup = similarity(&target, &baseline, &dataset.evaluation.inputs)?;
    println!("substitute-target agreement: semi-supervised {semi:.4} vs supervised {sup:.4}");
    Ok(())
}
