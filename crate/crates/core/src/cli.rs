use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use ndarray::Array1;
use rand_distr::{Distribution, StandardNormal};

use fedqssl::analysis;
use fedqssl::datagen;
use fedqssl::orchestrator::{self, ExperimentConfig, MetricsTable, RunOptions};
use fedqssl::quantkit::{self, Codebook};
use fedqssl::sslcore;
use fedqssl::streams::{stream, Domain};

/// Sidecar written next to `datagen` shards.
pub const PARAMS_FILE: &str = "params.json";

#[derive(Debug, Parser)]
#[command(name = "fedqssl", version, about = "Federated self-supervised learning under low-bitwidth training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment and write metrics.csv plus the resolved config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Write per-client shard files and a params.json sidecar.
    Datagen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stochastic-rounding MSE per rate on clipped N(0,1) samples.
    Quantprobe {
        /// `lo..hi` (inclusive) or a comma list.
        #[arg(long, default_value = "3..8", value_parser = parse_rates)]
        rates: RateList,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, value_enum, default_value_t = CodebookKind::Uniform)]
        codebook: CodebookKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form optimum of the configured data and its loss.
    Oracle {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize a metrics file and write it in long format.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        /// Long-format CSV; defaults to `<metrics stem>_long.csv` alongside.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CodebookKind {
    Uniform,
    Tanh,
    Quantile,
}

#[derive(Debug, Clone)]
struct RateList(Vec<u32>);

fn parse_rates(s: &str) -> Result<RateList, String> {
    let rates: Vec<u32> = if let Some((lo, hi)) = s.split_once("..") {
        let lo: u32 = lo.trim().parse().map_err(|_| format!("bad rate range {s:?}"))?;
        let hi: u32 = hi.trim().trim_start_matches('=').parse().map_err(|_| format!("bad rate range {s:?}"))?;
        if lo > hi {
            return Err(format!("empty rate range {s:?}"));
        }
        (lo..=hi).collect()
    } else {
        s.split(',').map(|r| r.trim().parse().map_err(|_| format!("bad rate {r:?}"))).collect::<Result<_, _>>()?
    };
    if let Some(bad) = rates.iter().find(|&&r| r == 0 || r > quantkit::MAX_RATE) {
        return Err(format!("rate {bad} outside 1..={}", quantkit::MAX_RATE));
    }
    Ok(RateList(rates))
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            eprintln!("{}", Cli::command().render_usage());
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, out, threads } => {
            let cfg = load(&config)?;
            if threads == Some(0) {
                return Err(Failure::Usage("--threads must be at least 1".into()));
            }
            let opts = RunOptions { out_dir: out, threads };
            if opts.out_dir.is_none() && cfg.output_dir.is_none() {
                return Err(Failure::Usage("no output directory: pass --out or set output_dir".into()));
            }
            let summary = orchestrator::run_experiment(&cfg, &opts).map_err(runtime)?;
            let last = summary.records.last().map_or(summary.initial.global_loss, |r| r.global_loss);
            println!(
                "{} rounds, global loss {:.6e} -> {:.6e}, artifacts in {}",
                summary.records.len(),
                summary.initial.global_loss,
                last,
                summary.out_dir.as_deref().unwrap_or(Path::new("-")).display()
            );
            Ok(())
        }
        Command::Datagen { config, out } => {
            let mut cfg = load(&config)?;
            cfg.data.shard_dir = None;
            let shards = orchestrator::prepare_shards(&cfg).map_err(runtime)?;
            fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
            for s in &shards {
                datagen::write_shard(&out.join(datagen::shard_file_name(s.client_id)), s).map_err(runtime)?;
            }
            let params = serde_json::to_string_pretty(&cfg.data_params()).map_err(runtime)?;
            fs::write(out.join(PARAMS_FILE), params + "\n").map_err(runtime)?;
            println!("wrote {} shards to {}", shards.len(), out.display());
            Ok(())
        }
        Command::Quantprobe { rates, samples, codebook, seed, out } => {
            if samples == 0 {
                return Err(Failure::Usage("--samples must be positive".into()));
            }
            let csv = quantprobe(&rates.0, samples, codebook, seed).map_err(runtime)?;
            match out {
                Some(path) => fs::write(&path, csv).map_err(|e| runtime(format!("{}: {e}", path.display()))),
                None => io::stdout().write_all(csv.as_bytes()).map_err(runtime),
            }
        }
        Command::Oracle { config } => {
            let cfg = load(&config)?;
            print!("{}", oracle(&cfg).map_err(runtime)?);
            Ok(())
        }
        Command::Report { metrics, out } => {
            let text = fs::read_to_string(&metrics).map_err(|e| runtime(format!("{}: {e}", metrics.display())))?;
            let table = MetricsTable::parse(&text).map_err(runtime)?;
            let out = out.unwrap_or_else(|| {
                let stem = metrics.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
                metrics.with_file_name(format!("{stem}_long.csv"))
            });
            fs::write(&out, table.long_format()).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
            print!("{}", table.summary());
            println!("long format: {}", out.display());
            Ok(())
        }
    }
}

/// A config path that does not exist is a usage error; anything wrong inside
/// the file is a runtime error.
fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("config file {} not found", path.display())));
    }
    orchestrator::load_config(path).map_err(runtime)
}

fn quantprobe(rates: &[u32], samples: usize, kind: CodebookKind, seed: u64) -> Result<String, quantkit::QuantError> {
    let mut rng = stream(seed, Domain::Probe, 0);
    let data: Array1<f64> = (0..samples)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z.clamp(-3.0, 3.0)
        })
        .collect();
    let mut csv = String::from("rate,mse\n");
    for &rate in rates {
        let cb: Codebook = match kind {
            CodebookKind::Uniform => quantkit::build_uniform_codebook(-3.0, 3.0, rate)?,
            CodebookKind::Tanh => quantkit::build_tanh_codebook(&data, rate)?,
            CodebookKind::Quantile => quantkit::build_quantile_codebook(&data, rate)?,
        };
        let cb = Arc::new(cb);
        let mse = quantkit::empirical_mse(&cb, &data, 1, &mut rng);
        csv.push_str(&format!("{rate},{}\n", orchestrator::csv_float(mse)));
    }
    Ok(csv)
}

fn oracle(cfg: &ExperimentConfig) -> Result<String, orchestrator::RunError> {
    cfg.validate()?;
    let shards = orchestrator::prepare_shards(cfg)?;
    let x = datagen::global_covariance(&shards)?;
    let m = cfg.m();
    let eig = sslcore::sym_eig(&x)?;
    let w = sslcore::optimum_from_eig(&eig, m)?;
    let loss = sslcore::loss(&w, &x)?;
    let trailing = sslcore::trailing_energy(&eig, m);
    let r = sslcore::representability(&w)?;
    let mut out = format!("d {} m {} clients {}\n", cfg.d, m, cfg.n_clients);
    out.push_str(&format!("lambda_max {:.10e}\n", analysis::spectral_norm(&x)));
    let eigs: Vec<String> = eig.eigenvalues.iter().map(|l| format!("{l:.10e}")).collect();
    out.push_str(&format!("eigenvalues {}\n", eigs.join(" ")));
    out.push_str(&format!("optimum_loss {:.16e}\n", loss));
    out.push_str(&format!("trailing_energy {:.16e}\n", trailing));
    out.push_str(&format!("abs_difference {:.3e}\n", (loss - trailing).abs()));
    let rs: Vec<String> = r.iter().take(cfg.n_clients).map(|v| format!("{v:.6}")).collect();
    out.push_str(&format!("representability {}\n", rs.join(" ")));
    Ok(out)
}
