//! Command-line surface and configuration resolution. Precedence for every
//! training setting is: command-line flag, then config-file value, then the
//! built-in default.

use std::error::Error;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use ar_core::Method;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

pub type CliResult<T> = Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "ar", version, about = "Augment-and-reduce classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Fit a model; writes trace.csv, summary.json, model.bin.
    Train(TrainArgs),
    /// Evaluate a saved model on a dataset.
    Eval(EvalArgs),
    /// Run the built-in invariant suites.
    Selftest(SelftestArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// TOML config file; flags given here override its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// One of: softmax_ar, probit_ar, logistic_ar, ove, exact.
    #[arg(long)]
    pub method: Option<Method>,
    /// Training data in XMLC text format.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Held-out data; evaluated into summary.json.
    #[arg(long, value_name = "PATH")]
    pub test_data: Option<PathBuf>,
    /// Synthetic categorical data instead of --data, e.g. K=1000,N=30000.
    #[arg(long, value_name = "SPEC", conflicts_with = "data")]
    pub synth: Option<String>,
    /// Minibatch size.
    #[arg(long = "B", value_name = "INT")]
    pub minibatch: Option<usize>,
    /// Classes sampled per datapoint.
    #[arg(long = "S", value_name = "INT")]
    pub class_sample: Option<usize>,
    /// Training iterations.
    #[arg(long, value_name = "INT")]
    pub iters: Option<u64>,
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    /// Base step size of the decaying global schedule.
    #[arg(long, value_name = "FLOAT")]
    pub rho0: Option<f64>,
    /// L2 penalty on the weights.
    #[arg(long, value_name = "FLOAT")]
    pub l2: Option<f64>,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Importance-sampling draws per test datapoint.
    #[arg(long, value_name = "INT")]
    pub is_samples: Option<usize>,
    #[arg(long, value_name = "FLOAT")]
    pub proposal_mean: Option<f64>,
    #[arg(long, value_name = "FLOAT")]
    pub proposal_std: Option<f64>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Saved model (model.bin).
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    /// Evaluation data in XMLC text format.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Method the model was trained with; selects exact vs sampled log-lik.
    #[arg(long)]
    pub method: Method,
    /// label_map.json from training; aligns the data's class ids with the
    /// model's rows. Without it the data's own first-label projection is used.
    #[arg(long, value_name = "PATH")]
    pub label_map: Option<PathBuf>,
    #[arg(long, value_name = "INT")]
    pub is_samples: Option<usize>,
    #[arg(long, value_name = "FLOAT")]
    pub proposal_mean: Option<f64>,
    #[arg(long, value_name = "FLOAT")]
    pub proposal_std: Option<f64>,
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct SelftestArgs {
    /// Run a reduced subset of every suite.
    #[arg(long)]
    pub quick: bool,
    /// Flips the sign of one computed gradient component (fault-injection
    /// hook: a healthy build must then fail the gradient suite).
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
}

/// Config-file counterpart of [`TrainArgs`]. Field names match the flags.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    method: Option<String>,
    data: Option<PathBuf>,
    test_data: Option<PathBuf>,
    synth: Option<String>,
    #[serde(rename = "B")]
    minibatch: Option<usize>,
    #[serde(rename = "S")]
    class_sample: Option<usize>,
    iters: Option<u64>,
    seed: Option<u64>,
    rho0: Option<f64>,
    l2: Option<f64>,
    out: Option<PathBuf>,
    is_samples: Option<usize>,
    proposal_mean: Option<f64>,
    proposal_std: Option<f64>,
}

/// Where the training examples come from.
pub enum DataSource {
    File(PathBuf),
    Synth { raw_classes: usize, n: usize },
}

/// A fully resolved training run: every setting has a concrete value except
/// the batch sizes, which default relative to the loaded data's shape.
pub struct ResolvedTrain {
    pub method: Method,
    pub source: DataSource,
    pub test_data: Option<PathBuf>,
    pub minibatch: Option<usize>,
    pub class_sample: Option<usize>,
    pub iters: u64,
    pub seed: u64,
    pub rho0: f64,
    pub l2: f64,
    pub out: PathBuf,
    pub is_samples: usize,
    pub proposal_mean: f64,
    pub proposal_std: f64,
}

pub fn resolve_train(args: TrainArgs) -> CliResult<ResolvedTrain> {
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
            toml::from_str::<FileConfig>(&text)
                .map_err(|e| format!("invalid config {}: {e}", path.display()))?
        }
        None => FileConfig::default(),
    };

    let method = match (args.method, file.method) {
        (Some(m), _) => m,
        (None, Some(s)) => Method::from_str(&s)?,
        (None, None) => return Err("no --method given (and none in the config file)".into()),
    };
    let data = args.data.or(file.data);
    let synth = args.synth.or(file.synth);
    let source = match (data, synth) {
        (Some(path), None) => DataSource::File(path),
        (None, Some(spec)) => parse_synth_spec(&spec)
            .map_err(|e| format!("bad --synth spec {spec:?}: {e}"))?,
        (Some(_), Some(_)) => {
            return Err("both --data and --synth given; pick one data source".into())
        }
        (None, None) => return Err("no data source: give --data PATH or --synth K=..,N=..".into()),
    };

    Ok(ResolvedTrain {
        method,
        source,
        test_data: args.test_data.or(file.test_data),
        minibatch: args.minibatch.or(file.minibatch),
        class_sample: args.class_sample.or(file.class_sample),
        iters: args.iters.or(file.iters).unwrap_or(50_000),
        seed: args.seed.or(file.seed).unwrap_or(0),
        rho0: args.rho0.or(file.rho0).unwrap_or(0.02),
        l2: args.l2.or(file.l2).unwrap_or(0.0),
        out: args.out.or(file.out).unwrap_or_else(|| PathBuf::from("ar-run")),
        is_samples: args.is_samples.or(file.is_samples).unwrap_or(1000),
        proposal_mean: args.proposal_mean.or(file.proposal_mean).unwrap_or(5.0),
        proposal_std: args.proposal_std.or(file.proposal_std).unwrap_or(5.0),
    })
}

fn parse_synth_spec(spec: &str) -> CliResult<DataSource> {
    let mut k: Option<usize> = None;
    let mut n: Option<usize> = None;
    for part in spec.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format!("bad synth spec part {part:?}: expected KEY=VALUE"))?;
        let slot = match key.trim() {
            "K" => &mut k,
            "N" => &mut n,
            other => return Err(format!("unknown synth key {other:?} (expected K or N)").into()),
        };
        if slot.is_some() {
            return Err(format!("synth key {} given twice", key.trim()).into());
        }
        *slot = Some(parse_count(value.trim())?);
    }
    match (k, n) {
        (Some(raw_classes), Some(n)) => Ok(DataSource::Synth { raw_classes, n }),
        _ => Err("synth spec needs both K and N, e.g. K=1000,N=30000".into()),
    }
}

fn parse_count(value: &str) -> CliResult<usize> {
    value
        .parse::<usize>()
        .map_err(|_| format!("{value:?} is not a positive integer").into())
}

pub fn fail<T>(msg: impl Display) -> CliResult<T> {
    Err(msg.to_string().into())
}
