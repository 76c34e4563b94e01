//! Command-line front end: single pipeline runs, the viability studies, the
//! baseline benchmark, and replay from logged events.

use clap::{Parser, Subcommand};
use selfheal::datagen::ScenarioSpec;
use selfheal::llm::ProviderConfig;
use selfheal::monitoring::MonitorConfig;
use selfheal::orchestrator::{
    self, diabetes_grid_scenario, replay_events, run_pipeline, run_study, write_events,
    ExperimentConfig, ResultTable, Strategy, StudyName, DEFAULT_OUTLIER_FACTOR,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "selfheal", about = "Self-healing pipeline for drifting tabular streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one pipeline on a scenario and write results.csv + events.jsonl.
    Run {
        /// Scenario JSON file; defaults to the built-in drifting scenario.
        #[arg(long)]
        config: Option<PathBuf>,
        /// no-retraining | partial-updating | new-model-training |
        /// ensemble-ddm | self-healing
        #[arg(long, default_value = "self-healing")]
        strategy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        batch_size: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        llm_endpoint: Option<String>,
        #[arg(long, default_value = "gpt-4")]
        llm_model: String,
        #[arg(long, default_value = "SELFHEAL_API_KEY")]
        llm_auth_env: String,
    },
    /// Run a named viability study (I, III, IV, V, VI, ablation).
    Study {
        #[arg(long)]
        name: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Comma-separated seed list overriding the study default.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        llm_endpoint: Option<String>,
        #[arg(long, default_value = "gpt-4")]
        llm_model: String,
        #[arg(long, default_value = "SELFHEAL_API_KEY")]
        llm_auth_env: String,
    },
    /// Baseline comparison over the corruption grid (Table-style output).
    Bench {
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Rebuild results.csv from a logged events.jsonl.
    Replay {
        #[arg(long)]
        events: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn parse_strategy(name: &str) -> Result<Strategy, String> {
    match name {
        "no-retraining" => Ok(Strategy::NoRetraining),
        "partial-updating" => Ok(Strategy::PartialUpdating { window: 4 }),
        "new-model-training" => Ok(Strategy::NewModelTraining),
        "ensemble-ddm" => Ok(Strategy::EnsembleDdm),
        "self-healing" => Ok(Strategy::self_healing()),
        other => Err(format!("unknown strategy {other:?}")),
    }
}

fn provider_from(endpoint: Option<String>, model: String, auth_env: String) -> Option<ProviderConfig> {
    endpoint.map(|endpoint| ProviderConfig {
        endpoint,
        model,
        auth_env,
        ..ProviderConfig::default()
    })
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(ConfigError(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

struct ConfigError(String);

impl<E: std::fmt::Display> From<E> for ConfigError {
    fn from(e: E) -> Self {
        ConfigError(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), ConfigError> {
    match cli.command {
        Command::Run {
            config,
            strategy,
            seed,
            batch_size,
            lambda,
            out,
            llm_endpoint,
            llm_model,
            llm_auth_env,
        } => {
            let scenario = match config {
                Some(path) => ScenarioSpec::from_json(&std::fs::read_to_string(path)?)?,
                None => diabetes_grid_scenario(3, 0.05, DEFAULT_OUTLIER_FACTOR, seed),
            };
            let mut strategy = parse_strategy(&strategy)?;
            if let (Strategy::SelfHealing(cfg), Some(provider)) = (
                &mut strategy,
                provider_from(llm_endpoint, llm_model, llm_auth_env),
            ) {
                cfg.diagnoser = orchestrator::DiagnoserKind::Llm;
                cfg.llm_provider = Some(provider);
            }
            let monitor = MonitorConfig { sensitivity: lambda, ..MonitorConfig::default() };
            let result = run_pipeline(&scenario, &strategy, &monitor, batch_size, seed)
                .map_err(|e| ConfigError(e.to_string()))?;
            std::fs::create_dir_all(&out)?;
            write_events(&result, &out.join("events.jsonl"))?;
            let summary_csv = format!(
                "strategy,seed,pre_level,overall_accuracy,post_intervention_accuracy,recovery_time,healing_events\n{},{},{:.6},{:.6},{:.6},{},{}\n",
                result.strategy,
                result.seed,
                result.summary.pre_level,
                result.summary.overall_accuracy,
                result.summary.post_intervention_accuracy,
                result
                    .summary
                    .recovery_time
                    .map(|r| r.to_string())
                    .unwrap_or_else(|| "inf".into()),
                result.healing_events.len()
            );
            std::fs::write(out.join("results.csv"), summary_csv)?;
            println!(
                "{}: pre {:.3}, post {:.3}, overall {:.3}, recovery {}, healing events {}",
                result.strategy,
                result.summary.pre_level,
                result.summary.post_intervention_accuracy,
                result.summary.overall_accuracy,
                result
                    .summary
                    .recovery_time
                    .map(|r| r.to_string())
                    .unwrap_or_else(|| "never".into()),
                result.healing_events.len()
            );
            Ok(())
        }
        Command::Study { name, out, seeds, llm_endpoint, llm_model, llm_auth_env } => {
            let study: StudyName = name.parse()?;
            let table = run_study(
                study,
                &out,
                seeds,
                provider_from(llm_endpoint, llm_model, llm_auth_env),
            )
            .map_err(|e| ConfigError(e.to_string()))?;
            for row in &table.rows {
                println!(
                    "{} k={} tau={:.2} lambda={:.1} {}: post {:.3} +- {:.3}",
                    row.study, row.k, row.tau, row.lambda, row.strategy, row.post_acc_mean,
                    row.post_acc_std
                );
            }
            println!("results written to {}", out.display());
            Ok(())
        }
        Command::Bench { out, seeds } => {
            let seeds = seeds.unwrap_or_else(|| (0..5).collect());
            let mut cfg = ExperimentConfig {
                name: "bench-k".into(),
                k_list: vec![2, 4, 6, 8],
                seeds: seeds.clone(),
                ..ExperimentConfig::default()
            };
            let mut table = orchestrator::run_experiment(&cfg).map_err(|e| ConfigError(e.to_string()))?;
            cfg = ExperimentConfig {
                name: "bench-tau".into(),
                k_list: vec![3],
                tau_list: vec![0.01, 0.02, 0.05, 0.1, 0.2],
                seeds,
                ..ExperimentConfig::default()
            };
            table
                .rows
                .extend(orchestrator::run_experiment(&cfg).map_err(|e| ConfigError(e.to_string()))?.rows);
            std::fs::create_dir_all(&out)?;
            table.write_csv(&out.join("results.csv"))?;
            print_table(&table);
            Ok(())
        }
        Command::Replay { events, out } => {
            let (summary, healing, series) = replay_events(&events)?;
            std::fs::create_dir_all(&out)?;
            let csv = format!(
                "pre_level,overall_accuracy,post_intervention_accuracy,recovery_time,healing_events,batches\n{:.6},{:.6},{:.6},{},{},{}\n",
                summary.pre_level,
                summary.overall_accuracy,
                summary.post_intervention_accuracy,
                summary
                    .recovery_time
                    .map(|r| r.to_string())
                    .unwrap_or_else(|| "inf".into()),
                healing.len(),
                summary.n_batches
            );
            std::fs::write(out.join("results.csv"), csv)?;
            let pts: Vec<(f64, f64)> =
                series.iter().enumerate().map(|(t, &a)| (t as f64, a)).collect();
            orchestrator::plot_lines(
                &out.join("plots").join("accuracy.svg"),
                "replayed batch accuracy",
                "batch",
                "accuracy",
                &[("accuracy".into(), pts)],
            )?;
            println!(
                "replayed {} batches, post accuracy {:.3}",
                summary.n_batches, summary.post_intervention_accuracy
            );
            Ok(())
        }
    }
}

fn print_table(table: &ResultTable) {
    for row in &table.rows {
        println!(
            "{} k={} tau={:.2} {}: post {:.3} +- {:.3}",
            row.study, row.k, row.tau, row.strategy, row.post_acc_mean, row.post_acc_std
        );
    }
}
