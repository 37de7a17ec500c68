//! `flk`: run, deploy and inspect federated experiments.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flk_core::metrics::{read_metrics, JsonlWriter, MetricRecord, MetricsSink};
use flk_core::orchestrator::{run_client, run_server, run_simulation_with, write_model, SimOptions};
use flk_core::hooks::HookRegistry;
use flk_core::partition::FederatedData;
use flk_core::{Error, ExperimentConfig};

const MODEL_FILE: &str = "model.flmd";
const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Parser)]
#[command(name = "flk", version, about = "Federated learning kernel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every client in this process.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; omit to follow the config's mode.
        #[arg(long)]
        parallel: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Serve a deployment over TCP.
    Server {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Join a deployment.
    Client {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        client_id: String,
    },
    /// Export each client's shard as client_<i>.flds.
    Partition {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Read a metrics file.
    Inspect {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        summary: bool,
    },
}

/// Maps a failure onto the process exit code.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Auth(_) | Error::ConfigMismatch { .. } | Error::Protocol(_) | Error::Decode(_) | Error::Remote { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLK_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flk: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Error> {
    let cfg = ExperimentConfig::from_path(path)?;
    log::info!("loaded {} (digest {})", path.display(), cfg.digest());
    Ok(cfg)
}

fn metrics_sink(out: &Path) -> Result<Box<dyn MetricsSink>, Error> {
    fs::create_dir_all(out)?;
    Ok(Box::new(JsonlWriter::create(out.join(METRICS_FILE))?))
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Simulate { config, parallel, out } => {
            let cfg = load(&config)?;
            let sink = metrics_sink(&out)?;
            let opts = SimOptions { threads: parallel };
            let outcome = run_simulation_with(&cfg, HookRegistry::from_config(&cfg), opts, Some(sink))?;
            write_model(out.join(MODEL_FILE), &outcome.final_model, &outcome.digest)?;
            log::info!("wrote {}", out.display());
        }
        Command::Server { config, out } => {
            let cfg = load(&config)?;
            let sink = metrics_sink(&out)?;
            let outcome = run_server(&cfg, Some(sink))?;
            write_model(out.join(MODEL_FILE), &outcome.final_model, &outcome.digest)?;
            log::info!("wrote {}", out.display());
        }
        Command::Client { config, client_id } => {
            let cfg = load(&config)?;
            let outcome = run_client(&cfg, &client_id)?;
            log::info!(
                "client {} done after round {} ({} rounds trained)",
                outcome.client_id,
                outcome.final_round,
                outcome.rounds_trained
            );
        }
        Command::Partition { config, out } => {
            let cfg = load(&config)?;
            cfg.check()?;
            let data = FederatedData::from_config(&cfg)?;
            fs::create_dir_all(&out)?;
            for id in 0..cfg.clients {
                let shard = data.pooled.subset(data.plan.shard(id));
                shard.save_flds(out.join(format!("client_{id}.flds")))?;
                println!("client {id}: {} samples, class histogram {:?}", shard.len(), shard.class_histogram());
            }
        }
        Command::Inspect { metrics, summary } => {
            let records = read_metrics(&metrics)?;
            if summary {
                print!("{}", summarize(&records));
            } else {
                print!("{}", describe(&records));
            }
        }
    }
    Ok(())
}

/// Final-round server accuracy and each client's mean test accuracy.
fn summarize(records: &[MetricRecord]) -> String {
    let mut text = String::new();
    let server_acc = records
        .iter()
        .filter(|r| r.scope == "server" && r.name == "accuracy")
        .max_by_key(|r| r.round);
    match server_acc {
        Some(r) => text.push_str(&format!("final round {}: server accuracy {:.6}\n", r.round, r.value)),
        None => text.push_str("no server accuracy recorded\n"),
    }
    let mut per_client: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.name == "test_acc") {
        if let Ok(id) = r.scope.parse::<u32>() {
            let e = per_client.entry(id).or_default();
            e.0 += r.value;
            e.1 += 1;
        }
    }
    for (id, (sum, n)) in per_client {
        text.push_str(&format!("client {id}: mean test_acc {:.6} over {n} rounds\n", sum / n as f64));
    }
    text
}

/// Record counts per metric name.
fn describe(records: &[MetricRecord]) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.name.as_str()).or_default() += 1;
    }
    let last = records.iter().map(|r| r.round).max();
    let mut text = format!("{} records", records.len());
    if let Some(last) = last {
        text.push_str(&format!(", rounds 0..={last}"));
    }
    text.push('\n');
    for (name, n) in counts {
        text.push_str(&format!("{name}: {n}\n"));
    }
    text
}

#[cfg(test)]
mod tests {
    use super::*;
    use flk_core::metrics::Timestamp;

    fn rec(round: u32, scope: &str, name: &str, value: f64) -> MetricRecord {
        MetricRecord { ts: Timestamp::Sim(round as f64), round, scope: scope.into(), name: name.into(), value }
    }

    #[test]
    fn summary_uses_last_round_and_client_means() {
        let records = vec![
            rec(0, "server", "accuracy", 0.5),
            rec(0, "0", "test_acc", 0.4),
            rec(0, "1", "test_acc", 1.0),
            rec(1, "0", "test_acc", 0.8),
            rec(1, "server", "accuracy", 0.75),
        ];
        assert_eq!(
            summarize(&records),
            "final round 1: server accuracy 0.750000\n\
             client 0: mean test_acc 0.600000 over 2 rounds\n\
             client 1: mean test_acc 1.000000 over 1 rounds\n"
        );
    }

    #[test]
    fn empty_metrics_summary() {
        assert_eq!(summarize(&[]), "no server accuracy recorded\n");
        assert_eq!(describe(&[]), "0 records\n");
    }

    #[test]
    fn error_exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::Internal("x".into())), 2);
        assert_eq!(exit_code(&Error::Auth("x".into())), 3);
        assert_eq!(exit_code(&Error::ConfigMismatch { server: "a".into(), local: "b".into() }), 3);
    }
}
