use clap::{Args, Parser, Subcommand};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use spores_sim::analysis::{compromise_scan, DEFAULT_COMBINATIONS_CAP, DEFAULT_MAX_ADVERSARY_USERS};
use spores_sim::config::{content_hash, ConfigError, ExperimentConfig, Thetas};
use spores_sim::events::{read_ndjson, write_ndjson};
use spores_sim::metrics::{write_fig4, write_fig5, write_fig6, write_transfers};
use spores_sim::model::{predictability_grid, GridParams, ModelKind};
use spores_sim::run_experiment;

#[derive(Parser)]
#[command(name = "spores", version, about = "Simulate and analyse probabilistic onion routing over e-squads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment; writes events.ndjson, transfers.csv, fig6.csv and config.toml.
    Run {
        #[command(flatten)]
        shared: Shared,
        /// TOML file; flags below override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated thresholds, assigned to files in turn.
        #[arg(long, value_delimiter = ',')]
        theta: Option<Vec<f64>>,
        #[arg(long)]
        model: Option<ModelKind>,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        devices_per_user: Option<usize>,
        #[arg(long)]
        files: Option<usize>,
        #[arg(long)]
        chunk_kib: Option<f64>,
        #[arg(long)]
        file_mib: Option<f64>,
        #[arg(long)]
        drop_rate: Option<f64>,
    },
    /// Score the availability predictor on every (model, mu) cell; writes fig4.csv.
    Predictability {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, value_delimiter = ',', default_values_t = ModelKind::ALL)]
        models: Vec<ModelKind>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.5, 0.7, 0.9])]
        mu: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        rounds: usize,
        #[arg(long, default_value_t = 50)]
        l_init: usize,
        #[arg(long, default_value_t = 25)]
        users: usize,
        #[arg(long, default_value_t = 4)]
        locations: usize,
        #[arg(long, default_value_t = 6)]
        devices: usize,
    },
    /// Count compromised routes in an event log; writes fig5.csv.
    Attack {
        #[command(flatten)]
        shared: Shared,
        /// Event log written by `run`.
        #[arg(long)]
        events: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_ADVERSARY_USERS)]
        max_adversaries: usize,
        /// Adversary sets drawn per route and adversary count.
        #[arg(long, default_value_t = DEFAULT_COMBINATIONS_CAP)]
        cap: usize,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn create(dir: &Path, name: &str) -> Result<fs::File, Failure> {
    fs::create_dir_all(dir).map_err(runtime)?;
    fs::File::create(dir.join(name)).map_err(|e| runtime(format!("{}: {e}", dir.join(name).display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            shared,
            config,
            theta,
            model,
            mu,
            users,
            devices_per_user,
            files,
            chunk_kib,
            file_mib,
            drop_rate,
        } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = shared.seed {
                cfg.seed = s;
            }
            if let Some(t) = theta {
                cfg.theta = Thetas(t);
            }
            macro_rules! set {
                ($($f:ident),*) => { $(if let Some(v) = $f { cfg.$f = v; })* };
            }
            set!(model, mu, users, devices_per_user, files, chunk_kib, file_mib, drop_rate);
            cfg.validate()?;
            cmd_run(&cfg, &shared.out)
        }
        Command::Predictability {
            shared,
            models,
            mu,
            rounds,
            l_init,
            users,
            locations,
            devices,
        } => {
            let params = GridParams {
                locations,
                devices,
                rounds,
                l_init,
                users,
            };
            if rounds <= l_init + 1 {
                return Err(Failure::Config("rounds must exceed l_init + 1".into()));
            }
            if devices == 0 || devices > 64 || locations == 0 || users == 0 {
                return Err(Failure::Config("locations, users and devices (at most 64) must be positive".into()));
            }
            let seed = shared.seed.unwrap_or(1);
            let rows = predictability_grid(&models, &mu, params, seed).map_err(|e| Failure::Config(e.to_string()))?;
            let hash = content_hash(format!("{models:?} {mu:?} {params:?} seed={seed}").as_bytes());
            write_fig4(&rows, &hash, create(&shared.out, "fig4.csv")?).map_err(runtime)?;
            for r in &rows {
                println!("{:<14} mu={:<4} score={:.4}", r.model, r.mu, r.score);
            }
            Ok(())
        }
        Command::Attack {
            shared,
            events,
            max_adversaries,
            cap,
        } => {
            if cap == 0 {
                return Err(Failure::Config("cap must be positive".into()));
            }
            let bytes = fs::read(&events).map_err(|e| runtime(format!("{}: {e}", events.display())))?;
            let log = read_ndjson(BufReader::new(&bytes[..])).map_err(runtime)?;
            let seed = shared.seed.unwrap_or(1);
            let counts: Vec<usize> = (1..=max_adversaries).collect();
            let report = compromise_scan(&log, &counts, cap, seed).map_err(runtime)?;
            let mut key = content_hash(&bytes).into_bytes();
            key.extend_from_slice(format!(" max={max_adversaries} cap={cap} seed={seed}").as_bytes());
            write_fig5(&report, &content_hash(&key), create(&shared.out, "fig5.csv")?).map_err(runtime)?;
            println!("{} routes, mean relay layer size {}", report.routes, report.layer_size);
            for r in &report.rows {
                println!(
                    "adversaries={:<2} fraction={:.3} ends={:.3} full={:.3} observed={:.3}",
                    r.adversary_users,
                    r.adv_fraction,
                    r.ends_compromised_frac,
                    r.full_compromised_frac,
                    r.mean_observed_msg_frac
                );
            }
            Ok(())
        }
    }
}

fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<(), Failure> {
    let result = run_experiment(cfg).map_err(runtime)?;
    fs::create_dir_all(out).map_err(runtime)?;
    fs::write(out.join("config.toml"), cfg.to_toml()).map_err(runtime)?;
    write_ndjson(&result.events, std::io::BufWriter::new(create(out, "events.ndjson")?)).map_err(runtime)?;
    write_transfers(&result, create(out, "transfers.csv")?).map_err(runtime)?;
    write_fig6(&result, create(out, "fig6.csv")?).map_err(runtime)?;
    let done = result.transfers.iter().filter(|t| t.completed_at.is_some()).count();
    println!(
        "config {}: {} transfers, {} complete, {} skipped, transit rate {:.3}, mean layer size {:.2}",
        cfg.hash(),
        result.transfers.len(),
        done,
        result.skipped.len(),
        result.transit_rate(None),
        result.mean_layer_size(None)
    );
    println!("wrote {}", out.display());
    Ok(())
}
