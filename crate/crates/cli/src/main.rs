use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dtr_cli::config::RunConfig;
use dtr_cli::pipeline::{logrank_from_file, run_pipeline, run_simulation, write_logrank_file_result, SimulateOptions, Stage};
use dtr_cli::CliError;
use dtr_core::simulator::{BiasLevel, SimConfig};

#[derive(Parser)]
#[command(name = "dtr", version, about = "Cloned IPW analyses of dynamic treatment regimens")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration; defaults apply to omitted keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    None,
    Moderate,
    Severe,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    UsrdsLike,
    Simulation,
}

#[derive(Subcommand)]
enum Command {
    /// Read or generate the cohort and write canonical and descriptive tables.
    Ingest(Common),
    /// Ingest, then expand into per-regimen clones.
    Clone(Common),
    /// Through stabilized weights.
    Weights(Common),
    /// Weighted log-rank tests, from a config or from a clone table file.
    Logrank {
        #[command(flatten)]
        common: Common,
        /// Clone table with a `w_total` column (from `clone` or `weights`).
        #[arg(long, requires = "pair")]
        clones: Option<PathBuf>,
        /// Regimen ids `a,b`.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        pair: Option<Vec<u32>>,
    },
    /// Through marginal structural model fits.
    Msm(Common),
    /// Full pipeline with published tables and plot data.
    Report(Common),
    /// Simulation study: calibration, replications and summary.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        scenario: Option<Scenario>,
        #[arg(long)]
        replications: Option<usize>,
        /// Only write the first replication's cohort.
        #[arg(long)]
        cohort_only: bool,
    },
    /// Print the configuration with every default filled in.
    PrintConfig {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let stage = |common: &Common, until| -> Result<(), CliError> {
        let cfg = load(common)?;
        let out = run_pipeline(&cfg, until)?;
        for f in &out.artifacts {
            println!("{}", cfg.output_dir.join(f).display());
        }
        Ok(())
    };
    match cli.command {
        Command::Ingest(c) => stage(&c, Stage::Ingest),
        Command::Clone(c) => stage(&c, Stage::Clone),
        Command::Weights(c) => stage(&c, Stage::Weights),
        Command::Msm(c) => stage(&c, Stage::Msm),
        Command::Report(c) => stage(&c, Stage::Report),
        Command::Logrank { common, clones: None, pair } => {
            let mut cfg = load(&common)?;
            if let Some(p) = pair {
                cfg.logrank.pairs = vec![(p[0], p[1])];
            }
            let out = run_pipeline(&cfg, Stage::Logrank)?;
            for r in &out.logrank {
                println!("pair={}v{} z={:.6} p_value={:.6e}", r.a, r.b, r.result.z, r.result.p_value);
            }
            Ok(())
        }
        Command::Logrank { common, clones: Some(path), pair } => {
            let cfg = load(&common)?;
            let pair = pair.expect("clap requires --pair with --clones");
            let d = cfg.delimiter_byte()?;
            let file = File::open(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let (result, data) = logrank_from_file(file, d, pair[0], pair[1])?;
            let weighted = data.subjects.iter().flatten().flatten().any(|a| a.weights.iter().any(|&w| w != 1.0));
            write_logrank_file_result(&cfg.output_dir, d, (pair[0], pair[1]), &result, &data, weighted)?;
            println!("regimen_a={}\nregimen_b={}\nweighted={weighted}", pair[0], pair[1]);
            println!("wstar={:.6}\nsigma2_hat={:.6}\nz={:.6}", result.wstar, result.sigma2_hat, result.z);
            println!("p_value={:.6e}\ntau={}\nn={}\ndegenerate={}", result.p_value, result.tau, result.n, result.degenerate);
            Ok(())
        }
        Command::Simulate { common, scenario, replications, cohort_only } => {
            let mut cfg = load(&common)?;
            if let Some(s) = scenario {
                cfg.simulation.bias_level = match s {
                    Scenario::None => BiasLevel::None,
                    Scenario::Moderate => BiasLevel::Moderate,
                    Scenario::Severe => BiasLevel::Severe,
                };
            }
            if let Some(r) = replications {
                cfg.simulation.replications = r;
            }
            if let Some(study) = run_simulation(&cfg, &SimulateOptions { cohort_only })? {
                study.summary.write_dsv(std::io::stdout(), b'\t').map_err(|source| CliError::Stage { stage: "simulate", source })?;
            }
            Ok(())
        }
        Command::PrintConfig { common, preset } => {
            let cfg = match preset {
                Some(Preset::Simulation) => RunConfig::for_simulation(SimConfig::default()),
                Some(Preset::UsrdsLike) => RunConfig::default(),
                None => load(&common)?,
            };
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dtr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
