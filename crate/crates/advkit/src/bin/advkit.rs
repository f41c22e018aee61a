use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use advkit::attack::AttackAlgorithm;
use advkit::config::RunConfig;
use advkit::error::Result;
use advkit::eval::run_cell_full;
use advkit::runner;

#[derive(Parser)]
#[command(name = "advkit", version, about = "Black-box transfer-attack laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key-value configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any key, e.g. `--set train.temperature=0.5`. Flags win
    /// over the file and the environment.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Ok(dir) = std::env::var("ADVKIT_OUT_DIR") {
            config.out_dir = dir;
        }
        for kv in &self.set {
            let (key, value) = kv.split_once('=').ok_or_else(|| {
                advkit::Error::config(kv.clone(), "expected KEY=VALUE")
            })?;
            config.set(key.trim(), value.trim())?;
        }
        if let Some(dir) = &self.out_dir {
            config.out_dir = dir.clone();
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the target model on its data half and checkpoint it.
    TrainTarget(ConfigArgs),
    /// Run a single experiment cell (one budget, one algorithm).
    Attack {
        #[command(flatten)]
        config: ConfigArgs,
        /// Query budget; defaults to the first sweep budget.
        #[arg(long)]
        budget: Option<usize>,
        /// fgsm | bim | pgd | ipgd; defaults to the first sweep algorithm.
        #[arg(long)]
        algorithm: Option<String>,
    },
    /// Run the full budget-by-algorithm sweep.
    Sweep(ConfigArgs),
    /// Render table-shaped summaries from a results file.
    Report {
        /// Path to a results.jsonl produced by `sweep` or `attack`.
        #[arg(long)]
        results: PathBuf,
    },
    /// Print the fully resolved configuration with key documentation.
    PrintConfig(ConfigArgs),
}

fn main() -> ExitCode {
    match run() {
        Ok(ok) => {
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<bool> {
    match Cli::parse().command {
        Command::TrainTarget(args) => {
            let config = args.resolve()?;
            config.validate()?;
            let dataset = runner::load_run_dataset(&config)?;
            let target = runner::train_target(&config, &dataset)?;
            std::fs::create_dir_all(&config.out_dir)
                .map_err(|e| advkit::Error::io(config.out_dir.clone(), &e))?;
            let path = runner::target_checkpoint_path(&config.out_dir);
            target.model.save(&path)?;
            println!(
                "trained target {} on {} samples; clean accuracy {:.4}; checkpoint {}",
                target.arch_tag,
                dataset.target_train.len(),
                target.clean_accuracy,
                path.display()
            );
            Ok(true)
        }
        Command::Attack { config, budget, algorithm } => {
            let config = config.resolve()?;
            config.validate()?;
            let dataset = runner::load_run_dataset(&config)?;
            let target = runner::train_or_load_target(&config, &dataset)?;
            let mut cells = runner::build_cells(&config, &dataset)?;
            let mut cell = cells.remove(0);
            if let Some(b) = budget {
                cell.query_number = b;
            }
            if let Some(a) = &algorithm {
                cell.algorithm = a.parse::<AttackAlgorithm>()?;
            }
            let outcome = run_cell_full(&dataset, &target, &cell)?;
            let results_path = std::path::Path::new(&config.out_dir).join("results.jsonl");
            runner::append_reports(&results_path, std::slice::from_ref(&outcome.report))?;
            println!("{}", runner::render_report(std::slice::from_ref(&outcome.report)));
            Ok(true)
        }
        Command::Sweep(args) => {
            let config = args.resolve()?;
            let outcome = runner::run_sweep(&config)?;
            println!("{}", runner::render_report(&outcome.reports));
            println!(
                "{} cells ok, {} failed; results in {}",
                outcome.reports.len(),
                outcome.failures.len(),
                outcome.results_path.display()
            );
            for (cell, err) in &outcome.failures {
                eprintln!("cell {cell} failed: {err}");
            }
            Ok(outcome.failures.is_empty())
        }
        Command::Report { results } => {
            let reports = runner::read_reports(&results)?;
            println!("{}", runner::render_report(&reports));
            Ok(true)
        }
        Command::PrintConfig(args) => {
            let config = args.resolve()?;
            print!("{}", config.render());
            Ok(true)
        }
    }
}
