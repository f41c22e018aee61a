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

fn median(mut v: Vec<f64>) -> f64 { v.sort_by(|a,b| a.partial_cmp(b).unwrap()); v[v.len()/2] }

fn main() -> advkit::Result<()> {
    let genspec = "blobs:k=3,n=900,d=8,noise=0.1";
    for (name, lambda, ramp, epochs) in [
        ("l75 r0.25 e40", 75.0, 0.25, 40),
        ("l75 r0.50 e40", 75.0, 0.50, 40),
        ("l75 r0.75 e30", 75.0, 0.75, 30),
        ("l2  r0.50 e20", 2.0, 0.50, 20),
    ] {
        let mut gaps = vec![]; let mut semis = vec![]; let mut sups = vec![];
        for seed in 0..5u64 {
            let format: DataFormat = format!("synthetic:{genspec}").parse()?;
            let dataset = load_dataset("", &format, &SplitConfig { eval_fraction: 0.2, seed })?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let target = Model::build(&ArchSpec::Mlp { hidden: vec![32, 32] }, &[8], 3, &mut rng)?;
            let target = train_supervised(target, &dataset.target_train.inputs, &dataset.target_train.labels,
                Optimizer::sgd_momentum(0.1, 0.9), &SupervisedConfig { epochs: 20, batch_size: 32, seed })?;
            let oracle = Oracle::new(target.clone(), 60);
            let (d0, d1) = oracle.build_initial_pool(&dataset.attacker_pool.items(), 60, seed)?;
            let d1 = d1;
            let aug = Augmenter::for_shape(&dataset.input_shape);
            let config = TrainConfig { seed, unlabeled_weight: lambda, ramp_fraction: ramp, epochs, ..TrainConfig::default() };
            let substitute = Model::build(&ArchSpec::Mlp { hidden: vec![32, 32] }, &[8], 3, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x11))?;
            let out = train_substitute(substitute, &d0, &d1, &config, &aug)?;
            let semi = similarity(&target, &out.model, &dataset.evaluation.inputs)?;
            let baseline = Model::build(&ArchSpec::Mlp { hidden: vec![32, 32] }, &[8], 3, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x11))?;
            let baseline = train_supervised(baseline,
                &d0.iter().map(|s| s.x.clone()).collect::<Vec<_>>(),
                &d0.iter().map(|s| s.y).collect::<Vec<_>>(),
                Optimizer::adam(0.004), &SupervisedConfig { epochs: 40, batch_size: 16, seed })?;
            let sup = similarity(&target, &baseline, &dataset.evaluation.inputs)?;
            gaps.push(semi - sup); semis.push(semi); sups.push(sup);
        }
        println!("{name}: median gap {:+.4} | median semi {:.4} sup {:.4} | gaps {:?}",
            median(gaps.clone()), median(semis), median(sups),
            gaps.iter().map(|g| (g * 1e3).round() / 1e3).collect::<Vec<_>>());
    }
    Ok(())
}
