use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fbm_smp::export::{write_binary, write_csv};
use fbm_smp::fbm::{sample_paths, HurstParam};
use fbm_smp::harness::{run, write_record, Experiment, ExperimentConfig};
use fbm_smp::problem::{Builtin, PolicySpec};
use fbm_smp::{Error, Result};

/// Monte Carlo checks of the stochastic maximum principle for systems driven
/// by a Brownian motion and a fractional Brownian motion with H ≤ 1/2.
#[derive(Parser, Debug)]
#[command(name = "fbm-smp", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON experiment config; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; the run lands in `<out>/<fingerprint>/`.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    paths: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// Built-in problem name, or a JSON object such as `{"name":"geometric","a":0.2}`.
    #[arg(long)]
    problem: Option<String>,
    /// `lq_optimal`, a number for a constant control, or a JSON policy object.
    #[arg(long, allow_negative_numbers = true)]
    policy: Option<String>,
    #[arg(long)]
    hurst: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample (W, B^H) and check the covariance, independence and kernel rows.
    SampleFbm {
        #[command(flatten)]
        model: ModelArgs,
        /// Also export the ensemble; `.bin` selects the binary layout, anything else CSV.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Girsanov identities for F ∈ {1, B^H(T), B^H(T)²} and the shifted density.
    CheckGirsanov,
    /// Transformed-state simulation and reconstructed moments of X.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Monte Carlo estimate of the cost.
    Cost {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// First- and second-order adjoint BSDEs by least-squares regression.
    SolveBsde,
    /// Pointwise variational inequality over the candidate grid.
    VerifyMp,
    /// Spike-variation scaling over the ε ladder.
    Scaling,
    /// Duality relations for one spike perturbation.
    Duality,
    /// Transformed route against the two-driver adjoint at H = 1/2.
    ReduceClassical,
}

impl Command {
    fn experiment(&self) -> Experiment {
        match self {
            Command::SampleFbm { .. } => Experiment::SampleFbm,
            Command::CheckGirsanov => Experiment::CheckGirsanov,
            Command::Simulate { .. } => Experiment::Simulate,
            Command::Cost { .. } => Experiment::Cost,
            Command::SolveBsde => Experiment::SolveBsde,
            Command::VerifyMp => Experiment::VerifyMp,
            Command::Scaling => Experiment::Scaling,
            Command::Duality => Experiment::Duality,
            Command::ReduceClassical => Experiment::ReduceClassical,
        }
    }

    fn model(&self) -> Option<&ModelArgs> {
        match self {
            Command::SampleFbm { model, .. } | Command::Simulate { model } | Command::Cost { model } => Some(model),
            _ => None,
        }
    }
}

fn parse_problem(text: &str) -> Result<Builtin> {
    let value = if text.trim_start().starts_with('{') {
        serde_json::from_str(text)?
    } else {
        serde_json::json!({ "name": text })
    };
    serde_json::from_value(value).map_err(|e| Error::Config {
        path: "problem".into(),
        message: e.to_string(),
    })
}

fn parse_policy(text: &str) -> Result<PolicySpec> {
    if text == "lq_optimal" {
        return Ok(PolicySpec::LqOptimal);
    }
    if let Ok(value) = text.parse::<f64>() {
        return Ok(PolicySpec::Constant { value });
    }
    serde_json::from_str(text).map_err(|e| Error::Config {
        path: "policy".into(),
        message: e.to_string(),
    })
}

fn default_config(command: &Command) -> ExperimentConfig {
    match command {
        Command::ReduceClassical => {
            let mut c = ExperimentConfig::for_problem(Builtin::ClassicalHHalf {
                a: 0.1,
                c: 0.3,
                lambda: 0.0,
                q: 1.0,
            });
            c.hurst = 0.5;
            c.sigma = 0.3;
            c
        }
        _ => {
            let mut c = ExperimentConfig::for_problem(Builtin::lq_basic());
            c.policy = PolicySpec::LqOptimal;
            c
        }
    }
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.global.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => default_config(&cli.command),
    };
    cfg.experiments = vec![cli.command.experiment()];
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    if let Some(paths) = cli.global.paths {
        cfg.m_paths = paths;
    }
    if let Some(steps) = cli.global.steps {
        cfg.n_steps = steps;
    }
    if let Some(model) = cli.command.model() {
        if let Some(p) = &model.problem {
            cfg.problem = parse_problem(p)?;
        }
        if let Some(p) = &model.policy {
            cfg.policy = parse_policy(p)?;
        }
        if let Some(h) = model.hurst {
            cfg.hurst = h;
        }
        if let Some(s) = model.sigma {
            cfg.sigma = s;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn export(cfg: &ExperimentConfig, path: &PathBuf) -> Result<()> {
    let e = sample_paths(HurstParam::new(cfg.hurst)?, cfg.grid()?, cfg.m_paths, cfg.seed)?;
    let out = BufWriter::new(File::create(path)?);
    if path.extension().is_some_and(|x| x == "bin") {
        write_binary(&e, out)
    } else {
        write_csv(&e, out)
    }
}

fn execute(cli: &Cli) -> Result<bool> {
    let cfg = build_config(cli)?;
    if let Command::SampleFbm { export: Some(path), .. } = &cli.command {
        export(&cfg, path)?;
    }
    let record = run(&cfg)?;
    let dir = write_record(&record, &cli.global.out)?;
    let summary = serde_json::json!({
        "fingerprint": record.fingerprint,
        "dir": dir,
        "pass": record.pass,
        "checks": record.checks,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    for c in record.failed_checks() {
        eprintln!("FAIL {}::{}", c.experiment.name(), c.name);
    }
    Ok(record.pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
