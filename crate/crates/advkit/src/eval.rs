//! Experiment metrics and the per-cell pipeline: attack success rate,
//! substitute-target similarity, and query accounting, assembled into one
//! report record per (budget, algorithm, mode) cell.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_batch, AdversarialResult, AttackAlgorithm, AttackConfig, AttackMode, AttackSample};
use crate::augment::Augmenter;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ArchSpec, Model};
use crate::oracle::Oracle;
use crate::semisup::{train_substitute, TrainConfig};
use crate::tensor::Tensor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One row of the results file. Two reports compare equal when every field
/// except the wall time matches; timing is diagnostic, not identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub dataset: String,
    pub target_arch: String,
    pub substitute_arch: String,
    pub query_number: usize,
    pub algorithm: AttackAlgorithm,
    pub mode: String,
    /// Headline ASR. Untargeted: success over samples the target classifies
    /// correctly in clean form. Targeted: hits on the target class over the
    /// same eligible set.
    pub asr: f64,
    /// Same success count over all attacked samples.
    pub asr_unrestricted: f64,
    /// Label agreement between substitute and target on the evaluation set.
    pub similarity: f64,
    /// Substitute accuracy against ground truth (similarity's companion
    /// reading; agreement stays the headline).
    pub substitute_accuracy: f64,
    pub clean_accuracy_target: f64,
    pub seed: u64,
    pub wall_time_ms: u64,
}

impl PartialEq for ExperimentReport {
    fn eq(&self, other: &Self) -> bool {
        self.schema_version == other.schema_version
            && self.dataset == other.dataset
            && self.target_arch == other.target_arch
            && self.substitute_arch == other.substitute_arch
            && self.query_number == other.query_number
            && self.algorithm == other.algorithm
            && self.mode == other.mode
            && self.asr == other.asr
            && self.asr_unrestricted == other.asr_unrestricted
            && self.similarity == other.similarity
            && self.substitute_accuracy == other.substitute_accuracy
            && self.clean_accuracy_target == other.clean_accuracy_target
            && self.seed == other.seed
    }
}

impl ExperimentReport {
    /// Stable cell identity for file names and failure messages.
    pub fn key(&self) -> String {
        format!(
            "{}_{}_{}_q{}_{}_{}_s{}",
            sanitize(&self.dataset),
            sanitize(&self.target_arch),
            sanitize(&self.substitute_arch),
            self.query_number,
            self.algorithm.name(),
            self.mode,
            self.seed
        )
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_alphanumeric() { c } else { '-' }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsrBreakdown {
    /// Success rate over samples the target classifies correctly clean.
    pub restricted: f64,
    /// Success rate over every attacked sample.
    pub unrestricted: f64,
    pub eligible: usize,
    pub total: usize,
}

/// Attack success rate of adversarial results against the frozen target.
///
/// `samples` are the clean counterparts of `results`, index-aligned; they
/// define the clean-correct eligible set, which depends only on the target
/// and the clean inputs, so different algorithms attacking the same samples
/// are scored on identical eligible sets.
pub fn asr(
    target: &Model,
    samples: &[AttackSample],
    results: &[AdversarialResult],
    mode: &AttackMode,
) -> Result<AsrBreakdown> {
    if results.is_empty() || samples.len() != results.len() {
        return Err(Error::contract(
            "asr",
            format!("{} samples vs {} results", samples.len(), results.len()),
        ));
    }
    let k = target.num_classes();
    let clean_batch = Tensor::stack(&samples.iter().map(|s| s.x.clone()).collect::<Vec<_>>())?;
    let adv_batch = Tensor::stack(&results.iter().map(|r| r.x_adv.clone()).collect::<Vec<_>>())?;
    let clean_pred = target.predict(&clean_batch)?;
    let adv_pred = target.predict(&adv_batch)?;

    let mut eligible = 0usize;
    let mut hits_eligible = 0usize;
    let mut hits_all = 0usize;
    for i in 0..results.len() {
        let y = results[i].true_label;
        let success = match mode.resolve_target(y, k)? {
            None => adv_pred[i] != y,
            Some(target_class) => adv_pred[i] == target_class,
        };
        if success {
            hits_all += 1;
        }
        if clean_pred[i] == y {
            eligible += 1;
            if success {
                hits_eligible += 1;
            }
        }
    }
    if eligible == 0 {
        return Err(Error::contract("asr", "no clean-correct samples to score"));
    }
    Ok(AsrBreakdown {
        restricted: hits_eligible as f64 / eligible as f64,
        unrestricted: hits_all as f64 / results.len() as f64,
        eligible,
        total: results.len(),
    })
}

/// Label-agreement rate between two models on a test set.
pub fn similarity(target: &Model, substitute: &Model, inputs: &[Tensor]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::contract("similarity", "empty test set"));
    }
    let batch = Tensor::stack(inputs)?;
    let a = target.predict(&batch)?;
    let b = substitute.predict(&batch)?;
    let agree = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    Ok(agree as f64 / inputs.len() as f64)
}

/// Everything one table cell needs beyond the dataset and the target.
#[derive(Debug, Clone)]
pub struct CellConfig {
    pub substitute_arch: ArchSpec,
    pub query_number: usize,
    pub algorithm: AttackAlgorithm,
    pub mode: AttackMode,
    pub seed: u64,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    /// Cap on how many evaluation samples are attacked (deterministic
    /// prefix of the evaluation split); `None` attacks all of them.
    pub eval_limit: Option<usize>,
}

/// A trained, frozen target with its bookkeeping.
#[derive(Debug, Clone)]
pub struct TargetBundle {
    pub model: Model,
    pub arch_tag: String,
    pub clean_accuracy: f64,
}

/// Per-cell artifacts beyond the report row itself.
#[derive(Debug)]
pub struct CellOutcome {
    pub report: ExperimentReport,
    /// Oracle audit log (`id \t counter \t label` lines).
    pub audit_log: String,
    pub substitute: Model,
}

/// Run one experiment cell: oracle with the cell's budget, initial pool,
/// substitute training, attacks on the evaluation split, metrics.
pub fn run_cell(dataset: &Dataset, target: &TargetBundle, cell: &CellConfig) -> Result<ExperimentReport> {
    Ok(run_cell_full(dataset, target, cell)?.report)
}

pub fn run_cell_full(
    dataset: &Dataset,
    target: &TargetBundle,
    cell: &CellConfig,
) -> Result<CellOutcome> {
    let started = Instant::now();
    if cell.query_number > dataset.attacker_pool.len() {
        return Err(Error::contract(
            "run_cell",
            format!(
                "budget {} exceeds unlabeled pool size {}",
                cell.query_number,
                dataset.attacker_pool.len()
            ),
        ));
    }

    let oracle = Oracle::new(target.model.clone(), cell.query_number);
    let (d0, d1) =
        oracle.build_initial_pool(&dataset.attacker_pool.items(), cell.query_number, cell.seed)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cell.seed ^ SUBSTITUTE_INIT_MASK);
    let substitute = Model::build(
        &cell.substitute_arch,
        &dataset.input_shape,
        dataset.num_classes,
        &mut init_rng,
    )?;
    let augmenter = Augmenter::for_shape(&dataset.input_shape);
    let train_config = TrainConfig { seed: cell.seed, ..cell.train.clone() };
    let outcome = train_substitute(substitute, &d0, &d1, &train_config, &augmenter)?;

    // The entire experiment's query spend is the initial pool, exactly.
    if oracle.budget_used() != cell.query_number {
        return Err(Error::contract(
            "run_cell",
            format!("ledger {} != configured budget {}", oracle.budget_used(), cell.query_number),
        ));
    }

    let limit = cell.eval_limit.unwrap_or(dataset.evaluation.len()).min(dataset.evaluation.len());
    if limit == 0 {
        return Err(Error::contract("run_cell", "evaluation split is empty"));
    }
    let samples: Vec<AttackSample> = (0..limit)
        .map(|i| AttackSample {
            id: dataset.evaluation.ids[i],
            x: dataset.evaluation.inputs[i].clone(),
            label: dataset.evaluation.labels[i],
        })
        .collect();
    let attack_config = AttackConfig { mode: cell.mode, seed: cell.seed, ..cell.attack.clone() };
    let results: Vec<AdversarialResult> =
        attack_batch(&outcome.model, &samples, &attack_config, cell.algorithm)
            .into_iter()
            .collect::<Result<_>>()?;

    let breakdown = asr(&target.model, &samples, &results, &cell.mode)?;
    let eval_inputs = &dataset.evaluation.inputs;
    let agreement = similarity(&target.model, &outcome.model, eval_inputs)?;
    let sub_accuracy = crate::supervised::accuracy(
        &outcome.model,
        eval_inputs,
        &dataset.evaluation.labels,
    )?;

    let report = ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        dataset: dataset.name.clone(),
        target_arch: target.arch_tag.clone(),
        substitute_arch: cell.substitute_arch.to_string(),
        query_number: cell.query_number,
        algorithm: cell.algorithm,
        mode: cell.mode.name().to_string(),
        asr: breakdown.restricted,
        asr_unrestricted: breakdown.unrestricted,
        similarity: agreement,
        substitute_accuracy: sub_accuracy,
        clean_accuracy_target: target.clean_accuracy,
        seed: cell.seed,
        wall_time_ms: started.elapsed().as_millis() as u64,
    };
    Ok(CellOutcome { report, audit_log: oracle.export_ledger(), substitute: outcome.model })
}

/// Seed-domain separator so substitute initialization never shares draws
/// with pool selection or training.
const SUBSTITUTE_INIT_MASK: u64 = 0x9E37_79B9_7F4A_7C15;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::TargetClass;
    use crate::data::{load_dataset, DataFormat, SplitConfig};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn constant_model(k: usize, class: usize, d: usize) -> Model {
        let mut m =
            Model::build(&ArchSpec::Mlp { hidden: vec![] }, &[d], k, &mut rng(0)).unwrap();
        for p in m.params_mut() {
            p.data_mut().fill(0.0);
        }
        {
            let mut ps = m.params_mut();
            ps[1].data_mut()[class] = 1.0;
        }
        m
    }

    fn identity_result(s: &AttackSample) -> AdversarialResult {
        AdversarialResult {
            x_adv: s.x.clone(),
            id: s.id,
            true_label: s.label,
            substitute_prediction: s.label,
            iterations_used: 0,
            decays_used: 0,
            linf_distance: 0.0,
        }
    }

    fn separable_samples(model: &Model, n: usize, d: usize) -> Vec<AttackSample> {
        // Label by the model itself so it is 100% clean-accurate on them.
        let mut r = rng(5);
        (0..n as u64)
            .map(|id| {
                use rand::Rng;
                let x =
                    Tensor::new(vec![d], (0..d).map(|_| r.random()).collect()).unwrap();
                let label =
                    model.predict(&Tensor::stack(std::slice::from_ref(&x)).unwrap()).unwrap()[0];
                AttackSample { id, x, label }
            })
            .collect()
    }

    #[test]
    fn identity_attack_on_accurate_target_scores_zero() {
        let target = Model::build(&ArchSpec::Mlp { hidden: vec![6] }, &[4], 3, &mut rng(2)).unwrap();
        let samples = separable_samples(&target, 10, 4);
        let results: Vec<AdversarialResult> = samples.iter().map(identity_result).collect();
        let b = asr(&target, &samples, &results, &AttackMode::Untargeted).unwrap();
        assert_eq!(b.restricted, 0.0);
        assert_eq!(b.unrestricted, 0.0);
        assert_eq!(b.eligible, 10);
    }

    #[test]
    fn forced_constant_misclassification_scores_one() {
        // Target labels everything class 0; all true labels differ; the
        // adversarial input is any input (target still says 0).
        let target = constant_model(3, 0, 4);
        let samples: Vec<AttackSample> = (0..5)
            .map(|i| AttackSample {
                id: i,
                x: Tensor::new(vec![4], vec![0.5; 4]).unwrap(),
                label: 1 + (i as usize % 2),
            })
            .collect();
        let results: Vec<AdversarialResult> = samples.iter().map(identity_result).collect();
        // No clean-correct samples: restricted ASR is undefined here.
        assert!(asr(&target, &samples, &results, &AttackMode::Untargeted).is_err());
        // Give one sample the "correct" label 0 so the eligible set is
        // non-empty; everything keeps unrestricted ASR over all samples.
        let mut samples = samples;
        samples[0].label = 0;
        let mut results: Vec<AdversarialResult> = samples.iter().map(identity_result).collect();
        // For the class-0 sample the attack fails (target still says 0),
        // for the rest it "succeeds" by construction.
        for r in &mut results {
            r.x_adv = Tensor::new(vec![4], vec![0.9; 4]).unwrap();
        }
        let b = asr(&target, &samples, &results, &AttackMode::Untargeted).unwrap();
        assert_eq!(b.eligible, 1);
        assert_eq!(b.restricted, 0.0);
        assert!((b.unrestricted - 0.8).abs() < 1e-12);
    }

    #[test]
    fn asr_counts_a_mixed_batch_by_hand() {
        // Identity-logit target on one-hot-ish inputs: flip 6 of 10
        // adversarial inputs to a different dominant coordinate.
        let target = constant_model(3, 0, 3); // start from zero weights
        let mut target = target;
        {
            let mut ps = target.params_mut();
            ps[1].data_mut().fill(0.0);
            for i in 0..3 {
                ps[0].data_mut()[i * 3 + i] = 1.0;
            }
        }
        let one_hot_x = |c: usize| {
            let mut v = vec![0.0; 3];
            v[c] = 1.0;
            Tensor::new(vec![3], v).unwrap()
        };
        let samples: Vec<AttackSample> = (0..10)
            .map(|i| AttackSample { id: i, x: one_hot_x(i as usize % 3), label: i as usize % 3 })
            .collect();
        let results: Vec<AdversarialResult> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut r = identity_result(s);
                if i < 6 {
                    r.x_adv = one_hot_x((s.label + 1) % 3);
                }
                r
            })
            .collect();
        let b = asr(&target, &samples, &results, &AttackMode::Untargeted).unwrap();
        assert!((b.restricted - 0.6).abs() < 1e-12);
    }

    #[test]
    fn targeted_asr_counts_hits_on_the_target_class() {
        let target = {
            let mut m = constant_model(3, 0, 3);
            let mut ps = m.params_mut();
            ps[1].data_mut().fill(0.0);
            for i in 0..3 {
                ps[0].data_mut()[i * 3 + i] = 1.0;
            }
            m
        };
        let one_hot_x = |c: usize| {
            let mut v = vec![0.0; 3];
            v[c] = 1.0;
            Tensor::new(vec![3], v).unwrap()
        };
        let samples: Vec<AttackSample> =
            (0..4).map(|i| AttackSample { id: i, x: one_hot_x(0), label: 0 }).collect();
        // Two results land on class 1 = (0+1) % 3, two stay at 0.
        let results: Vec<AdversarialResult> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut r = identity_result(s);
                if i < 2 {
                    r.x_adv = one_hot_x(1);
                }
                r
            })
            .collect();
        let mode = AttackMode::Targeted(TargetClass::Next);
        let b = asr(&target, &samples, &results, &mode).unwrap();
        assert!((b.restricted - 0.5).abs() < 1e-12);
    }

    #[test]
    fn similarity_examples() {
        let target = Model::build(&ArchSpec::Mlp { hidden: vec![5] }, &[4], 3, &mut rng(3)).unwrap();
        let inputs: Vec<Tensor> = {
            use rand::Rng;
            let mut r = rng(7);
            (0..40)
                .map(|_| Tensor::new(vec![4], (0..4).map(|_| r.random()).collect()).unwrap())
                .collect()
        };
        // Exact copy agrees everywhere.
        assert_eq!(similarity(&target, &target.clone(), &inputs).unwrap(), 1.0);

        // Constant predictor agrees exactly as often as the target emits
        // that class.
        let constant = constant_model(3, 0, 4);
        let batch = Tensor::stack(&inputs).unwrap();
        let freq = target.predict(&batch).unwrap().iter().filter(|&&c| c == 0).count() as f64
            / inputs.len() as f64;
        let sim = similarity(&target, &constant, &inputs).unwrap();
        assert!((sim - freq).abs() < 1e-12);

        // Disjoint constant predictors never agree.
        let a = constant_model(3, 0, 4);
        let b = constant_model(3, 1, 4);
        assert_eq!(similarity(&a, &b, &inputs).unwrap(), 0.0);
    }

    #[test]
    fn similarity_is_invariant_to_positive_logit_scaling() {
        let target = Model::build(&ArchSpec::Mlp { hidden: vec![5] }, &[4], 3, &mut rng(4)).unwrap();
        let substitute =
            Model::build(&ArchSpec::Mlp { hidden: vec![5] }, &[4], 3, &mut rng(5)).unwrap();
        let mut scaled = substitute.clone();
        {
            let mut ps = scaled.params_mut();
            let n = ps.len();
            // Scaling the head weights and bias scales all logits.
            for p in &mut ps[n - 2..] {
                for v in p.data_mut() {
                    *v *= 13.7;
                }
            }
        }
        let inputs: Vec<Tensor> = {
            use rand::Rng;
            let mut r = rng(8);
            (0..60)
                .map(|_| Tensor::new(vec![4], (0..4).map(|_| r.random()).collect()).unwrap())
                .collect()
        };
        let a = similarity(&target, &substitute, &inputs).unwrap();
        let b = similarity(&target, &scaled, &inputs).unwrap();
        assert_eq!(a, b);
    }

    fn quick_cell(query_number: usize, seed: u64) -> (Dataset, TargetBundle, CellConfig) {
        let format: DataFormat = "synthetic:blobs:k=3,n=240,d=6,noise=0.08".parse().unwrap();
        let ds = load_dataset("", &format, &SplitConfig { eval_fraction: 0.2, seed: 11 }).unwrap();
        let target_model = {
            let m = Model::build(&ArchSpec::Mlp { hidden: vec![16] }, &[6], 3, &mut rng(21)).unwrap();
            let opt = crate::optim::Optimizer::sgd_momentum(0.1, 0.9);
            crate::supervised::train_supervised(
                m,
                &ds.target_train.inputs,
                &ds.target_train.labels,
                opt,
                &crate::supervised::SupervisedConfig { epochs: 15, batch_size: 32, seed: 3 },
            )
            .unwrap()
        };
        let clean = crate::supervised::accuracy(
            &target_model,
            &ds.evaluation.inputs,
            &ds.evaluation.labels,
        )
        .unwrap();
        let target =
            TargetBundle { model: target_model, arch_tag: "mlp:16".into(), clean_accuracy: clean };
        let cell = CellConfig {
            substitute_arch: ArchSpec::Mlp { hidden: vec![16] },
            query_number,
            algorithm: AttackAlgorithm::Pgd,
            mode: AttackMode::Untargeted,
            seed,
            train: TrainConfig {
                epochs: 3,
                iters_per_epoch: 8,
                batch_size: 8,
                ..TrainConfig::default()
            },
            attack: AttackConfig { max_iterations: 5, ..AttackConfig::default() },
            eval_limit: Some(12),
        };
        (ds, target, cell)
    }

    #[test]
    fn full_budget_cell_still_balances_its_ledger() {
        let (ds, target, mut cell) = quick_cell(0, 1);
        cell.query_number = ds.attacker_pool.len();
        let outcome = run_cell_full(&ds, &target, &cell).unwrap();
        assert_eq!(outcome.report.query_number, ds.attacker_pool.len());
        assert_eq!(outcome.audit_log.lines().count(), ds.attacker_pool.len());
    }

    #[test]
    fn same_seed_cells_produce_identical_reports() {
        let (ds, target, cell) = quick_cell(24, 9);
        let a = run_cell(&ds, &target, &cell).unwrap();
        let b = run_cell(&ds, &target, &cell).unwrap();
        assert_eq!(a, b);
        let different = run_cell(&ds, &target, &CellConfig { seed: 10, ..cell }).unwrap();
        assert_ne!(a, different);
    }

    #[test]
    fn budget_larger_than_pool_is_rejected() {
        let (ds, target, mut cell) = quick_cell(24, 2);
        cell.query_number = ds.attacker_pool.len() + 1;
        assert!(run_cell(&ds, &target, &cell).is_err());
    }
}
