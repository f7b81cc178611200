//! `camp`: train, prune, evaluate and compare pruned networks from a JSON config.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use camp_core::checkpoint;
use camp_core::curvature::calibration_batch;
use camp_core::experiment::{
    self, compare_strategies, prepare_baseline, probe_inputs, ExperimentConfig, ExperimentReport, PipelineError,
    Precision,
};
use camp_core::probe::{evaluate, AccuracyReport, ProbeStats};
use camp_core::prune::{prune, Strategy};
use camp_core::{Error, Network, Scalar};
use clap::{Args, Parser, Subcommand};
use log::{error, info};

#[derive(Parser)]
#[command(name = "camp", version, about = "Curvature-aware pruning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a baseline and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Prune a checkpoint and write the pruned checkpoint plus a prune report.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Prune report (JSON); stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        p: Option<f64>,
    },
    /// Accuracy of a checkpoint on the config's test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report the delta against this baseline checkpoint.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Train, prune, fine-tune, evaluate and write the full report.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Overrides the config report path.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write the probe table as CSV.
        #[arg(long)]
        probe_csv: Option<PathBuf>,
    },
    /// Accuracy-vs-percentile sweep over strategies and seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "camp-hive,hrp,hmp,magnitude")]
        strategies: Vec<Strategy>,
        #[arg(long, value_delimiter = ',', default_value = "30,50,70")]
        p: Vec<f64>,
        /// Seeds to average over; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// CSV table; stdout when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Per-seed samples and aggregated rows as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Activation statistics and MAD between two checkpoints.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        pruned: PathBuf,
        /// CSV table; stdout when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let text = fs::read_to_string(&common.config)?;
    let mut config = ExperimentConfig::from_json(&text)?;
    if common.seed.is_some() {
        config.seed = common.seed;
    }
    config.validate()?;
    Ok(config)
}

fn write_text(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, Error> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout()),
    })
}

/// Writes the partial report if there is somewhere to put it, then surfaces the cause.
fn pipeline_failure(e: PipelineError, report: Option<&Path>) -> Error {
    if let Some(path) = report {
        if let Ok(json) = e.partial.to_json() {
            let _ = fs::write(path, json);
        }
    }
    error!("{} stage failed", e.stage);
    e.source
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Train { common, out } => {
            let config = load_config(&common)?;
            match config.precision {
                Precision::F32 => train::<f32>(&config, &out),
                Precision::F64 => train::<f64>(&config, &out),
            }
        }
        Command::Prune { common, checkpoint, out, report, strategy, p } => {
            let mut config = load_config(&common)?;
            if let Some(s) = strategy {
                config.prune.strategy = s;
            }
            if let Some(p) = p {
                config.prune.p = p;
            }
            config.validate()?;
            match config.precision {
                Precision::F32 => prune_cmd::<f32>(&config, &checkpoint, &out, report.as_deref()),
                Precision::F64 => prune_cmd::<f64>(&config, &checkpoint, &out, report.as_deref()),
            }
        }
        Command::Eval { common, checkpoint, baseline } => {
            let config = load_config(&common)?;
            match config.precision {
                Precision::F32 => eval::<f32>(&config, &checkpoint, baseline.as_deref()),
                Precision::F64 => eval::<f64>(&config, &checkpoint, baseline.as_deref()),
            }
        }
        Command::Pipeline { common, report, probe_csv } => {
            let config = load_config(&common)?;
            let path = report.or_else(|| config.report.clone());
            let result = experiment::run_pipeline(&config).map_err(|e| pipeline_failure(e, path.as_deref()))?;
            finish_pipeline(&result, path.as_deref(), probe_csv.as_deref())
        }
        Command::Compare { common, strategies, p, seeds, out, json } => {
            let config = load_config(&common)?;
            let seeds = if seeds.is_empty() { vec![config.seed()?] } else { seeds };
            let table = compare_strategies(&config, &strategies, &p, &seeds).map_err(|e| pipeline_failure(e, None))?;
            if let Some(path) = json {
                fs::write(path, serde_json::to_string_pretty(&table)? + "\n")?;
            }
            table.write_csv(sink(out.as_deref())?)
        }
        Command::Stats { common, base, pruned, out } => {
            let config = load_config(&common)?;
            match config.precision {
                Precision::F32 => stats::<f32>(&config, &base, &pruned, out.as_deref()),
                Precision::F64 => stats::<f64>(&config, &base, &pruned, out.as_deref()),
            }
        }
    }
}

fn finish_pipeline(report: &ExperimentReport, path: Option<&Path>, probe_csv: Option<&Path>) -> Result<(), Error> {
    if let (Some(path), Some(probe)) = (probe_csv, &report.probe) {
        probe.write_csv(BufWriter::new(File::create(path)?))?;
    }
    if let (Some(base), Some(tuned), Some(delta)) = (&report.baseline, &report.pruned_after_finetune, report.delta_acc) {
        info!("baseline {:.2}%, pruned+fine-tuned {:.2}% ({delta:+.2})", base.top1, tuned.top1);
    }
    write_text(path, &report.to_json()?)
}

fn train<T: Scalar>(config: &ExperimentConfig, out: &Path) -> Result<(), Error> {
    let baseline = prepare_baseline::<T>(config).map_err(|e| pipeline_failure(e, None))?;
    checkpoint::save(&baseline.network, out)?;
    let summary = serde_json::json!({
        "accuracy": baseline.accuracy,
        "train_loss": baseline.train_loss,
        "checkpoint": out,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn load_net<T: Scalar>(path: &Path, config: &ExperimentConfig) -> Result<(Network<T>, camp_core::data::DatasetSplit<T>), Error> {
    let net: Network<T> = checkpoint::load(path)?;
    let data = experiment::load_data::<T>(config)?;
    if net.input_shape() != data.test.sample_shape() {
        return Err(Error::Shape(format!(
            "checkpoint expects inputs {:?}, dataset provides {:?}",
            net.input_shape(),
            data.test.sample_shape()
        )));
    }
    Ok((net, data))
}

fn prune_cmd<T: Scalar>(config: &ExperimentConfig, ckpt: &Path, out: &Path, report: Option<&Path>) -> Result<(), Error> {
    let (net, data) = load_net::<T>(ckpt, config)?;
    let seed = config.seed()?;
    let pi = &config.prune.power_iteration;
    let calib = calibration_batch(&data.train, pi.calibration_size, seed)?;
    let outcome = prune(&net, config.prune.strategy, config.prune.p, pi, &calib, seed)?;
    checkpoint::save(&outcome.network, out)?;
    write_text(report, &(serde_json::to_string_pretty(&outcome.report)? + "\n"))
}

fn eval<T: Scalar>(config: &ExperimentConfig, ckpt: &Path, baseline: Option<&Path>) -> Result<(), Error> {
    let (net, data) = load_net::<T>(ckpt, config)?;
    let acc = evaluate(&net, &data.test)?;
    let text = match baseline {
        Some(b) => {
            let base: Network<T> = checkpoint::load(b)?;
            serde_json::to_string_pretty(&AccuracyReport::new(evaluate(&base, &data.test)?, acc))?
        }
        None => serde_json::to_string_pretty(&acc)?,
    };
    println!("{text}");
    Ok(())
}

fn stats<T: Scalar>(config: &ExperimentConfig, base: &Path, pruned: &Path, out: Option<&Path>) -> Result<(), Error> {
    let (base_net, data) = load_net::<T>(base, config)?;
    let pruned_net: Network<T> = checkpoint::load(pruned)?;
    if !base_net.same_architecture(&pruned_net) {
        return Err(Error::Shape("base and pruned checkpoints have different architectures".into()));
    }
    let probe = probe_inputs(&data.test, config.probe.samples, config.seed()?)?;
    let stats = ProbeStats::collect(&base_net, &pruned_net, None, &probe)?;
    stats.write_csv(sink(out)?)
}
