//! The `train` and `eval` commands: data loading, the training loop with a
//! streamed CSV trace, artifact output, and saved-model evaluation.

use std::cell::RefCell;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ar_core::data::{first_label_projection, load_xmlc, projection_onto_classes, synth_categorical};
use ar_core::eval::{accuracy, prob_estimation_error, test_loglik_is, test_loglik_softmax};
use ar_core::train::train_with_callback;
use ar_core::{Dataset, Error, IsConfig, LinearModel, Method, TrainConfig};
use serde::Serialize;

use crate::opts::{fail, resolve_train, CliResult, DataSource, EvalArgs, ResolvedTrain, TrainArgs};

#[derive(Serialize)]
struct Summary {
    method: String,
    n_train: usize,
    num_classes: usize,
    num_features: usize,
    minibatch: usize,
    class_sample: usize,
    iterations: u64,
    seed: u64,
    rho0: f64,
    l2: f64,
    final_minibatch_elbo: f64,
    final_smoothed_elbo: f64,
    train_seconds: f64,
    seconds_per_epoch: f64,
    accuracy: f64,
    /// Which split `accuracy` was computed on: "test" when --test-data was
    /// given, otherwise "train".
    accuracy_split: &'static str,
    #[serde(flatten)]
    test: TestMetrics,
    /// Mean absolute error of the recovered class probabilities against the
    /// generator's; present for bias-only models on synthetic data.
    prob_estimation_error: Option<f64>,
}

#[derive(Serialize, PartialEq, Debug)]
struct TestMetrics {
    test_loglik: Option<f64>,
    test_loglik_se: Option<f64>,
    is_degenerate: Option<usize>,
}

pub fn train(args: TrainArgs) -> CliResult<ExitCode> {
    let cfg = resolve_train(args)?;
    let data = match &cfg.source {
        DataSource::File(path) => first_label_projection(&load_xmlc(path)?)?,
        DataSource::Synth { raw_classes, n } => synth_categorical(*raw_classes, *n, cfg.seed)?,
    };
    let test = match &cfg.test_data {
        Some(path) => {
            let ids = data.class_ids.clone().expect("loaders always set class ids");
            Some(projection_onto_classes(&load_xmlc(path)?, &ids)?)
        }
        None => None,
    };

    let minibatch = cfg.minibatch.unwrap_or_else(|| data.len().min(500));
    let class_sample = cfg
        .class_sample
        .unwrap_or_else(|| data.num_classes.saturating_sub(1).clamp(1, 100));
    let mut train_config =
        TrainConfig::new(cfg.method, minibatch, class_sample, cfg.iters, cfg.seed);
    train_config.rho0 = cfg.rho0;
    train_config.l2 = cfg.l2;
    train_config.validate(&data)?;

    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| format!("cannot create {}: {e}", cfg.out.display()))?;
    let trace_path = cfg.out.join("trace.csv");
    let trace = RefCell::new(TraceWriter::create(&trace_path)?);

    let outcome = train_with_callback(&data, &train_config, |record| {
        trace.borrow_mut().row(
            record.iteration,
            record.wall_clock_s,
            record.minibatch_elbo,
            record.smoothed_elbo,
        );
    });
    trace.into_inner().finish()?;

    let output = match outcome {
        Ok(output) => output,
        Err(err @ Error::Diverged { .. }) => {
            return fail(format!(
                "{err}; config: {} B={minibatch} S={class_sample} seed={}; \
                 partial trace left at {}",
                cfg.method,
                cfg.seed,
                trace_path.display()
            ));
        }
        Err(err) => return Err(err.into()),
    };

    let model_path = cfg.out.join("model.bin");
    output.model.save(&model_path)?;
    if let Some(ids) = &data.class_ids {
        let map_path = cfg.out.join("label_map.json");
        std::fs::write(&map_path, serde_json::to_string(ids)?)
            .map_err(|e| format!("cannot write {}: {e}", map_path.display()))?;
    }

    let last = output.records.last().expect("at least one iteration");
    let eval_split = test.as_ref().unwrap_or(&data);
    let eval_start = Instant::now();
    let test_metrics = match &test {
        Some(test_data) => evaluate_loglik(&output.model, test_data, cfg.method, &cfg.is_config())?,
        None => TestMetrics {
            test_loglik: None,
            test_loglik_se: None,
            is_degenerate: None,
        },
    };
    if let Some(count) = test_metrics.is_degenerate.filter(|&c| c > 0) {
        eprintln!("warning: {count} test datapoints had all importance weights underflow");
    }
    let prob_error = match (&data.true_probs, output.model.num_features()) {
        (Some(probs), 0) => Some(prob_estimation_error(&output.model, probs)?),
        _ => None,
    };
    let epochs = cfg.iters as f64 * minibatch as f64 / data.len() as f64;
    let summary = Summary {
        method: cfg.method.to_string(),
        n_train: data.len(),
        num_classes: data.num_classes,
        num_features: data.num_features,
        minibatch,
        class_sample,
        iterations: cfg.iters,
        seed: cfg.seed,
        rho0: cfg.rho0,
        l2: cfg.l2,
        final_minibatch_elbo: last.minibatch_elbo,
        final_smoothed_elbo: last.smoothed_elbo,
        train_seconds: last.wall_clock_s,
        seconds_per_epoch: last.wall_clock_s / epochs,
        accuracy: accuracy(&output.model, eval_split)?,
        accuracy_split: if test.is_some() { "test" } else { "train" },
        test: test_metrics,
        prob_estimation_error: prob_error,
    };
    let summary_path = cfg.out.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)
        .map_err(|e| format!("cannot write {}: {e}", summary_path.display()))?;

    let eval_seconds = eval_start.elapsed().as_secs_f64();
    println!(
        "trained {} for {} iterations in {:.2}s (eval {:.2}s); artifacts in {}",
        cfg.method,
        cfg.iters,
        last.wall_clock_s,
        eval_seconds,
        cfg.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

impl ResolvedTrain {
    fn is_config(&self) -> IsConfig {
        IsConfig {
            samples: self.is_samples,
            proposal_mean: self.proposal_mean,
            proposal_std: self.proposal_std,
            seed: self.seed,
        }
    }
}

fn evaluate_loglik(
    model: &LinearModel,
    data: &Dataset,
    method: Method,
    is_config: &IsConfig,
) -> CliResult<TestMetrics> {
    Ok(match method {
        Method::SoftmaxAr | Method::Ove | Method::Exact => TestMetrics {
            test_loglik: Some(test_loglik_softmax(model, data)?),
            test_loglik_se: None,
            is_degenerate: None,
        },
        Method::ProbitAr | Method::LogisticAr => {
            let kind = method.noise_kind().expect("general method");
            let estimate = test_loglik_is(model, data, kind, is_config)?;
            TestMetrics {
                test_loglik: Some(estimate.mean_loglik),
                test_loglik_se: Some(estimate.se_log_mean),
                is_degenerate: Some(estimate.degenerate),
            }
        }
    })
}

pub fn eval(args: EvalArgs) -> CliResult<ExitCode> {
    let model = LinearModel::load(&args.model)?;
    let raw = load_xmlc(&args.data)?;
    let data = match &args.label_map {
        Some(path) => projection_onto_classes(&raw, &read_label_map(path)?)?,
        None => first_label_projection(&raw)?,
    };
    if data.num_classes != model.num_classes() || data.num_features != model.num_features() {
        return fail(format!(
            "model is {}x{} (classes x features) but {} projects to {}x{}",
            model.num_classes(),
            model.num_features(),
            args.data.display(),
            data.num_classes,
            data.num_features
        ));
    }

    let is_config = IsConfig {
        samples: args.is_samples.unwrap_or(1000),
        proposal_mean: args.proposal_mean.unwrap_or(5.0),
        proposal_std: args.proposal_std.unwrap_or(5.0),
        seed: args.seed.unwrap_or(0),
    };
    let loglik = match args.method {
        Method::SoftmaxAr | Method::Ove | Method::Exact => TestMetrics {
            test_loglik: Some(test_loglik_softmax(&model, &data)?),
            test_loglik_se: None,
            is_degenerate: None,
        },
        Method::ProbitAr | Method::LogisticAr => {
            let kind = args.method.noise_kind().expect("general method");
            let estimate = test_loglik_is(&model, &data, kind, &is_config)?;
            if estimate.degenerate > 0 {
                eprintln!(
                    "warning: {} datapoints had all importance weights underflow",
                    estimate.degenerate
                );
            }
            TestMetrics {
                test_loglik: Some(estimate.mean_loglik),
                test_loglik_se: Some(estimate.se_log_mean),
                is_degenerate: Some(estimate.degenerate),
            }
        }
    };

    #[derive(Serialize)]
    struct EvalReport {
        n: usize,
        accuracy: f64,
        #[serde(flatten)]
        loglik: TestMetrics,
    }
    let report = EvalReport {
        n: data.len(),
        accuracy: accuracy(&model, &data)?,
        loglik,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn read_label_map(path: &PathBuf) -> CliResult<Vec<i64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read label map {}: {e}", path.display()))?;
    Ok(serde_json::from_str(&text)
        .map_err(|e| format!("invalid label map {}: {e}", path.display()))?)
}

/// Streams trace rows during training so a diverged run still leaves its
/// partial trace on disk. IO errors are remembered and surfaced at the end
/// rather than interrupting the training callback.
struct TraceWriter {
    writer: BufWriter<File>,
    path: PathBuf,
    error: Option<std::io::Error>,
}

impl TraceWriter {
    fn create(path: &Path) -> CliResult<Self> {
        let file =
            File::create(path).map_err(|e| format!("cannot create {}: {e}", path.display()))?;
        let mut writer = BufWriter::new(file);
        let mut this = match writeln!(writer, "iteration,wall_clock_s,minibatch_elbo,smoothed_elbo")
        {
            Ok(()) => TraceWriter {
                writer,
                path: path.to_owned(),
                error: None,
            },
            Err(e) => TraceWriter {
                writer,
                path: path.to_owned(),
                error: Some(e),
            },
        };
        this.flush_error()?;
        Ok(this)
    }

    fn row(&mut self, iteration: u64, wall_clock_s: f64, elbo: f64, smoothed: f64) {
        if self.error.is_some() {
            return;
        }
        if let Err(e) = writeln!(
            self.writer,
            "{iteration},{wall_clock_s},{elbo},{smoothed}"
        ) {
            self.error = Some(e);
        }
    }

    fn finish(mut self) -> CliResult<()> {
        if self.error.is_none() {
            if let Err(e) = self.writer.flush() {
                self.error = Some(e);
            }
        }
        self.flush_error()
    }

    fn flush_error(&mut self) -> CliResult<()> {
        match self.error.take() {
            Some(e) => fail(format!("writing {}: {e}", self.path.display())),
            None => Ok(()),
        }
    }
}
