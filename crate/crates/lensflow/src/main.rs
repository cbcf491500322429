//! lensflow: train and evaluate normalizing flows for pushforward
//! distributions on lens spaces.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lensflow::checkpoint::load_checkpoint;
use lensflow::config::{builtin_experiment, ExperimentConfig};
use lensflow::flow_model::{flow_forward, prior_sample, PriorParams};
use lensflow::runner::{
    default_out_root, emit_artifacts, execute, multi_seed_summary, summary_line, MetricsReport,
    RunError,
};
use lensflow::verify::{run_suite, Suite};

#[derive(Parser)]
#[command(name = "lensflow", version, about = "flows on lens-space Heegaard tori")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a built-in experiment (exp1, exp2, boltz) or a JSON config file
    Train {
        /// experiment name or path to a config JSON
        experiment: String,
        /// number of seeds to run (seeds are base, base+1, ...)
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// output root (default: $LENSFLOW_OUT or ./out)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a property suite: geometry, densities, flow, or all
    Verify { suite: Suite },
    /// Push prior samples through a saved checkpoint, CSV on stdout
    Sample {
        /// a checkpoint directory (params.bin + manifest.json)
        checkpoint_dir: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 5.0)]
        prior_kappa: f64,
        #[arg(long, default_value_t = 0.25)]
        prior_sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the metrics summary of a finished run directory
    Report { run_dir: PathBuf },
}

fn load_config(experiment: &str) -> Result<ExperimentConfig, RunError> {
    let path = Path::new(experiment);
    if path.is_file() || experiment.ends_with(".json") {
        let text = std::fs::read_to_string(path).map_err(|e| {
            RunError::Config(lensflow::config::ConfigError::Parse(serde_json::Error::io(
                std::io::Error::new(e.kind(), format!("{}: {e}", path.display())),
            )))
        })?;
        Ok(ExperimentConfig::from_json(&text)?)
    } else {
        Ok(builtin_experiment(experiment)?)
    }
}

fn cmd_train(experiment: &str, seeds: u64, out: Option<PathBuf>) -> Result<(), RunError> {
    let base = load_config(experiment)?;
    let out_root = out.unwrap_or_else(default_out_root);
    let mut reports: Vec<MetricsReport> = Vec::new();
    for i in 0..seeds.max(1) {
        let mut config = base.clone();
        config.train.seed = base.train.seed + i;
        let run_id = format!("{}-s{}", config.name, config.train.seed);
        eprintln!("training {run_id} ({} epochs x 2 tori)", config.train.epochs);
        let result = execute(&config)?;
        let dir = out_root.join(&run_id);
        emit_artifacts(&result, &dir)?;
        println!("{}", summary_line(&result.metrics));
        println!("  artifacts: {}", dir.display());
        reports.push(result.metrics);
    }
    if reports.len() > 1 {
        println!("{}", multi_seed_summary(&reports));
    }
    Ok(())
}

fn cmd_verify(suite: Suite) -> ExitCode {
    let results = run_suite(suite);
    let mut failed = 0;
    for r in &results {
        println!(
            "{} {} ({})",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        if !r.passed {
            failed += 1;
        }
    }
    println!("{}/{} properties passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn cmd_sample(
    dir: &Path,
    n: usize,
    prior_kappa: f64,
    prior_sigma: f64,
    seed: u64,
) -> Result<(), RunError> {
    let flow = load_checkpoint(dir)?;
    let prior = PriorParams::new(prior_kappa, prior_sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = prior_sample(&prior, n, &mut rng)?;
    println!("theta,x,y,log_model");
    for z in batch {
        let (o, logdet) = flow_forward(&flow, z);
        let log_model = prior.logpdf_unchecked(z) - logdet;
        println!("{},{},{},{}", o[0], o[1], o[2], log_model);
    }
    Ok(())
}

fn cmd_report(run_dir: &Path) -> Result<(), RunError> {
    let text = std::fs::read_to_string(run_dir.join("metrics.json"))?;
    let metrics: MetricsReport = serde_json::from_str(&text)
        .map_err(|e| RunError::Config(lensflow::config::ConfigError::Parse(e)))?;
    println!("{}", summary_line(&metrics));
    println!(
        "  I1 = {:.4} ± {:.4}   I2 = {:.4} ± {:.4}   w = {:.4}",
        metrics.i1, metrics.i1_stderr, metrics.i2, metrics.i2_stderr, metrics.mixture_weight
    );
    println!(
        "  decomposition (1-w) KL1 + w KL2 = {:.4}   initial KL = ({:.2}, {:.2})",
        metrics.kl_decomposition, metrics.initial_kl_t1, metrics.initial_kl_t2
    );
    println!(
        "  eval n = {}   normalizer n = {}   seed = {}",
        metrics.n_eval_samples, metrics.n_normalizer_samples, metrics.seed
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { experiment, seeds, out } => cmd_train(&experiment, seeds, out),
        Command::Verify { suite } => return cmd_verify(suite),
        Command::Sample {
            checkpoint_dir,
            n,
            prior_kappa,
            prior_sigma,
            seed,
        } => cmd_sample(&checkpoint_dir, n, prior_kappa, prior_sigma, seed),
        Command::Report { run_dir } => cmd_report(&run_dir),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
