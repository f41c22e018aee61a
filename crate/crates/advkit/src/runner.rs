//! Experiment orchestration: target training with checkpoint reuse, the
//! budget-by-algorithm sweep, append-only results files, and table-shaped
//! text summaries.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{load_dataset, DataFormat, Dataset};
use crate::error::{Error, Result};
use crate::eval::{run_cell_full, CellConfig, ExperimentReport, TargetBundle};
use crate::model::{ArchSpec, Model};
use crate::optim::Optimizer;
use crate::supervised::{accuracy, train_supervised, SupervisedConfig};

/// Seed-domain separator for target initialization and training.
const TARGET_MASK: u64 = 0x517C_C1B7_2722_0A95;

pub fn load_run_dataset(config: &RunConfig) -> Result<Dataset> {
    let format: DataFormat = config.dataset_format.parse()?;
    load_dataset(&config.dataset_path, &format, &config.split_config())
}

pub fn target_checkpoint_path(out_dir: &str) -> PathBuf {
    Path::new(out_dir).join("target.ckpt")
}

/// Train the frozen target on its half of the data and checkpoint it.
pub fn train_target(config: &RunConfig, dataset: &Dataset) -> Result<TargetBundle> {
    let arch: ArchSpec = config.target_arch.parse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ TARGET_MASK);
    let model = Model::build(&arch, &dataset.input_shape, dataset.num_classes, &mut rng)?;
    let mut opt = Optimizer::sgd_momentum(config.target_learning_rate, config.target_momentum)
        .with_weight_decay(config.target_weight_decay);
    if config.target_cosine_t_max > 0 {
        opt = opt.with_cosine_annealing(config.target_cosine_t_max);
    }
    let trained = train_supervised(
        model,
        &dataset.target_train.inputs,
        &dataset.target_train.labels,
        opt,
        &SupervisedConfig {
            epochs: config.target_epochs,
            batch_size: config.target_batch_size,
            seed: config.seed ^ TARGET_MASK,
        },
    )?;
    let clean = accuracy(&trained, &dataset.evaluation.inputs, &dataset.evaluation.labels)?;
    Ok(TargetBundle { model: trained, arch_tag: config.target_arch.clone(), clean_accuracy: clean })
}

/// Load the checkpointed target if present, otherwise train and save it.
pub fn train_or_load_target(config: &RunConfig, dataset: &Dataset) -> Result<TargetBundle> {
    let path = target_checkpoint_path(&config.out_dir);
    if path.exists() {
        let model = Model::load(&path)?;
        let clean = accuracy(&model, &dataset.evaluation.inputs, &dataset.evaluation.labels)?;
        return Ok(TargetBundle {
            model,
            arch_tag: config.target_arch.clone(),
            clean_accuracy: clean,
        });
    }
    let bundle = train_target(config, dataset)?;
    std::fs::create_dir_all(&config.out_dir)
        .map_err(|e| Error::io(config.out_dir.clone(), &e))?;
    bundle.model.save(&path)?;
    Ok(bundle)
}

/// Cross product of sweep budgets and algorithms, all at the run seed.
pub fn build_cells(config: &RunConfig, dataset: &Dataset) -> Result<Vec<CellConfig>> {
    let substitute_arch: ArchSpec = config.substitute_arch.parse()?;
    let attack = config.attack_config(&dataset.input_shape)?;
    let mode = config.parse_mode()?;
    let train = config.train_config();
    let eval_limit = (config.eval_limit > 0).then_some(config.eval_limit);
    let mut cells = Vec::new();
    for &budget in &config.sweep_budgets {
        for &algorithm in &config.sweep_algorithms {
            cells.push(CellConfig {
                substitute_arch: substitute_arch.clone(),
                query_number: budget,
                algorithm,
                mode,
                seed: config.seed,
                train: train.clone(),
                attack: attack.clone(),
                eval_limit,
            });
        }
    }
    Ok(cells)
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub reports: Vec<ExperimentReport>,
    /// `(cell description, error)` for cells that failed; the sweep
    /// continues past them.
    pub failures: Vec<(String, Error)>,
    pub results_path: PathBuf,
}

/// Run every cell, append the reports, and export per-cell audit logs.
pub fn run_sweep(config: &RunConfig) -> Result<SweepOutcome> {
    config.validate()?;
    let dataset = load_run_dataset(config)?;
    let target = train_or_load_target(config, &dataset)?;
    let cells = build_cells(config, &dataset)?;

    let run = || -> Vec<_> {
        cells
            .par_iter()
            .map(|cell| (cell, run_cell_full(&dataset, &target, cell)))
            .collect()
    };
    let outcomes = if config.parallelism > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
            .map_err(|e| Error::config("parallelism", e.to_string()))?
            .install(run)
    } else {
        run()
    };

    let out_dir = Path::new(&config.out_dir);
    let audit_dir = out_dir.join("audit");
    std::fs::create_dir_all(&audit_dir).map_err(|e| Error::io(config.out_dir.clone(), &e))?;

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (cell, outcome) in outcomes {
        let desc = format!("q{}_{}", cell.query_number, cell.algorithm.name());
        match outcome {
            Ok(full) => {
                let audit_path = audit_dir.join(format!("{}.log", full.report.key()));
                std::fs::write(&audit_path, &full.audit_log)
                    .map_err(|e| Error::io(audit_path.display().to_string(), &e))?;
                reports.push(full.report);
            }
            Err(e) => failures.push((desc.clone(), e.in_cell(desc))),
        }
    }

    let results_path = out_dir.join("results.jsonl");
    append_reports(&results_path, &reports)?;
    write_columns(&out_dir.join("results.tsv"), &reports)?;
    Ok(SweepOutcome { reports, failures, results_path })
}

/// Append one JSON record per line; the file is never rewritten.
pub fn append_reports(path: &Path, reports: &[ExperimentReport]) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path.display().to_string(), &e))?;
    for r in reports {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::config("results", e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), &e))?;
    }
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<ExperimentReport>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), &e))?;
    let mut reports = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let report: ExperimentReport = serde_json::from_str(line).map_err(|e| Error::Format {
            path: path.display().to_string(),
            position: format!("line {}", lineno + 1),
            detail: e.to_string(),
        })?;
        reports.push(report);
    }
    Ok(reports)
}

/// Plot-ready columnar data, one row per report.
fn write_columns(path: &Path, reports: &[ExperimentReport]) -> Result<()> {
    let mut out = String::from(
        "dataset\tmode\talgorithm\tquery_number\tasr\tasr_unrestricted\tsimilarity\tsubstitute_accuracy\tseed\n",
    );
    for r in reports {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.dataset,
            r.mode,
            r.algorithm.name(),
            r.query_number,
            r.asr,
            r.asr_unrestricted,
            r.similarity,
            r.substitute_accuracy,
            r.seed
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), &e))
}

/// Text tables: ASR per (algorithm x budget) plus similarity per budget,
/// grouped by dataset, mode, and seed.
pub fn render_report(reports: &[ExperimentReport]) -> String {
    let mut groups: Vec<(String, Vec<&ExperimentReport>)> = Vec::new();
    for r in reports {
        let key = format!("{} | {} | seed {}", r.dataset, r.mode, r.seed);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let mut out = String::new();
    for (key, group) in groups {
        let mut budgets: Vec<usize> = group.iter().map(|r| r.query_number).collect();
        budgets.sort_unstable();
        budgets.dedup();
        let mut algorithms: Vec<_> = group.iter().map(|r| r.algorithm).collect();
        algorithms.dedup();

        let first = group[0];
        out.push_str(&format!("== {key} ==\n"));
        out.push_str(&format!(
            "target {} (clean accuracy {:.4})  substitute {}\n",
            first.target_arch, first.clean_accuracy_target, first.substitute_arch
        ));
        out.push_str(&format!("{:<14}", "attack"));
        for b in &budgets {
            out.push_str(&format!("{:>10}", format!("q={b}")));
        }
        out.push('\n');
        for algorithm in crate::attack::AttackAlgorithm::ALL {
            if !algorithms.contains(&algorithm) {
                continue;
            }
            out.push_str(&format!("{:<14}", algorithm.name()));
            for b in &budgets {
                match group.iter().find(|r| r.algorithm == algorithm && r.query_number == *b) {
                    Some(r) => out.push_str(&format!("{:>10.4}", r.asr)),
                    None => out.push_str(&format!("{:>10}", "-")),
                }
            }
            out.push('\n');
        }
        for (label, pick) in [
            ("similarity", &(|r: &ExperimentReport| r.similarity) as &dyn Fn(&ExperimentReport) -> f64),
            ("sub-accuracy", &|r: &ExperimentReport| r.substitute_accuracy),
        ] {
            out.push_str(&format!("{:<14}", label));
            for b in &budgets {
                match group.iter().find(|r| r.query_number == *b) {
                    Some(r) => out.push_str(&format!("{:>10.4}", pick(r))),
                    None => out.push_str(&format!("{:>10}", "-")),
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackAlgorithm;

    fn fast_config(out_dir: &str) -> RunConfig {
        let mut config = RunConfig::default();
        config.out_dir = out_dir.to_string();
        config.dataset_format = "synthetic:blobs:k=3,n=240,d=6,noise=0.08".into();
        config.target_arch = "mlp:16".into();
        config.substitute_arch = "mlp:16".into();
        config.target_epochs = 10;
        config.train_epochs = 2;
        config.train_iters_per_epoch = 6;
        config.train_batch_size = 8;
        config.attack_iterations = 4;
        config.eval_limit = 10;
        config
    }

    #[test]
    fn single_cell_sweep_writes_one_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = fast_config(dir.path().to_str().unwrap());
        config.sweep_budgets = vec![20];
        config.sweep_algorithms = vec![AttackAlgorithm::Fgsm];
        let outcome = run_sweep(&config).unwrap();
        assert!(outcome.failures.is_empty());
        assert_eq!(outcome.reports.len(), 1);
        let read_back = read_reports(&outcome.results_path).unwrap();
        assert_eq!(read_back.len(), 1);
        assert_eq!(read_back[0], outcome.reports[0]);
    }

    #[test]
    fn two_by_two_sweep_yields_four_distinct_keys() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = fast_config(dir.path().to_str().unwrap());
        config.sweep_budgets = vec![16, 32];
        config.sweep_algorithms = vec![AttackAlgorithm::Fgsm, AttackAlgorithm::Pgd];
        let outcome = run_sweep(&config).unwrap();
        assert_eq!(outcome.reports.len(), 4);
        let mut keys: Vec<String> = outcome.reports.iter().map(|r| r.key()).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 4);
        // Expected key set enumerable straight from the config.
        for b in [16, 32] {
            for a in ["fgsm", "pgd"] {
                assert!(
                    keys.iter().any(|k| k.contains(&format!("q{b}_{a}"))),
                    "missing cell q{b}_{a} in {keys:?}"
                );
            }
        }
    }

    #[test]
    fn rerun_with_same_seed_reproduces_every_record() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut config_a = fast_config(dir_a.path().to_str().unwrap());
        config_a.sweep_budgets = vec![16];
        config_a.sweep_algorithms = vec![AttackAlgorithm::Pgd, AttackAlgorithm::Ipgd];
        let mut config_b = config_a.clone();
        config_b.out_dir = dir_b.path().to_str().unwrap().to_string();

        let a = run_sweep(&config_a).unwrap();
        let b = run_sweep(&config_b).unwrap();
        assert_eq!(a.reports, b.reports);
    }

    #[test]
    fn report_rendering_contains_all_cells() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = fast_config(dir.path().to_str().unwrap());
        config.sweep_budgets = vec![16, 32];
        config.sweep_algorithms = vec![AttackAlgorithm::Fgsm, AttackAlgorithm::Ipgd];
        let outcome = run_sweep(&config).unwrap();
        let table = render_report(&outcome.reports);
        assert!(table.contains("fgsm"));
        assert!(table.contains("ipgd"));
        assert!(table.contains("q=16"));
        assert!(table.contains("q=32"));
        assert!(table.contains("similarity"));
    }
}
