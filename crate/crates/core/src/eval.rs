//! Held-out metrics: exact and importance-sampled log-likelihood, accuracy,
//! and probability-recovery error for bias-only synthetic studies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bounds::{exact_softmax_logprob, log_sum_exp, UtilityRow};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::LinearModel;
use crate::noise::NoiseKind;

/// The class with the highest mean utility; ties break to the lowest index.
pub fn predict_label(model: &LinearModel, x: &crate::data::SparseExample) -> usize {
    let mut psi = Vec::with_capacity(model.num_classes());
    model.psi_all(x, &mut psi);
    let mut best = 0;
    let mut best_psi = psi[0];
    for (k, &v) in psi.iter().enumerate().skip(1) {
        if v > best_psi {
            best = k;
            best_psi = v;
        }
    }
    best
}

/// Fraction of examples whose predicted label matches the truth.
pub fn accuracy(model: &LinearModel, data: &Dataset) -> Result<f64> {
    check_eval_inputs(model, data)?;
    let correct = data
        .examples
        .iter()
        .filter(|ex| predict_label(model, ex) == ex.label as usize)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Mean per-datapoint exact softmax log-likelihood.
pub fn test_loglik_softmax(model: &LinearModel, data: &Dataset) -> Result<f64> {
    check_eval_inputs(model, data)?;
    let mut psi = Vec::with_capacity(model.num_classes());
    let mut total = 0.0;
    for ex in &data.examples {
        model.psi_all(ex, &mut psi);
        let row = UtilityRow::new(&psi, ex.label as usize)?;
        total += exact_softmax_logprob(&row);
    }
    Ok(total / data.len() as f64)
}

/// Importance-sampling settings for [`test_loglik_is`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsConfig {
    /// Draws per datapoint.
    pub samples: usize,
    pub proposal_mean: f64,
    pub proposal_std: f64,
    pub seed: u64,
}

impl Default for IsConfig {
    fn default() -> Self {
        IsConfig {
            samples: 1000,
            proposal_mean: 5.0,
            proposal_std: 5.0,
            seed: 0,
        }
    }
}

/// Result of an importance-sampled log-likelihood evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsEstimate {
    /// Mean per-datapoint log of the estimated marginal likelihood.
    pub mean_loglik: f64,
    /// Delta-method standard error of `mean_loglik` (datapoints treated as
    /// independent; degenerate datapoints contribute none).
    pub se_log_mean: f64,
    /// How many datapoints had every importance weight underflow to zero;
    /// each contributes `−∞` to the mean.
    pub degenerate: usize,
}

/// Mean per-datapoint marginal log-likelihood
/// `ln ∫ φ(ε) ∏_{k'≠y} Φ(ε + ψ_y − ψ_{k'}) dε`
/// by plain (not self-normalized) importance sampling under a shared Gaussian
/// proposal, with all weight arithmetic in the log domain.
///
/// Intended for the Gaussian and logistic families, whose marginals have no
/// closed form; the Gumbel family is accepted as a diagnostic, since its
/// estimate must converge to the exact softmax value. Each datapoint uses its
/// own counter-mode substream of the seeded generator, so results do not
/// depend on evaluation order.
pub fn test_loglik_is(
    model: &LinearModel,
    data: &Dataset,
    kind: NoiseKind,
    config: &IsConfig,
) -> Result<IsEstimate> {
    check_eval_inputs(model, data)?;
    if config.samples == 0 {
        return Err(Error::InvalidArgument(
            "importance sampling needs at least one draw".into(),
        ));
    }
    if !(config.proposal_std > 0.0) || !config.proposal_std.is_finite() {
        return Err(Error::NonPositive {
            what: "proposal_std",
            value: config.proposal_std,
        });
    }
    if !config.proposal_mean.is_finite() {
        return Err(Error::NonFinite {
            what: "proposal_mean",
            value: config.proposal_mean,
        });
    }

    let proposal = Normal::new(config.proposal_mean, config.proposal_std).expect("validated");
    let log_norm = config.proposal_std.ln() + crate::noise::LOG_SQRT_2PI;
    let base = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.samples;
    let ln_n = (n as f64).ln();

    let mut psi = Vec::with_capacity(model.num_classes());
    let mut log_w = vec![0.0; n];
    let mut total = 0.0;
    let mut var_sum = 0.0;
    let mut degenerate = 0;

    for (i, ex) in data.examples.iter().enumerate() {
        let mut rng = base.clone();
        rng.set_stream(i as u64);
        model.psi_all(ex, &mut psi);
        let y = ex.label as usize;
        let psi_y = psi[y];
        for w in log_w.iter_mut() {
            let eps = proposal.sample(&mut rng);
            let z = (eps - config.proposal_mean) / config.proposal_std;
            let log_proposal = -0.5 * z * z - log_norm;
            let mut lw = kind.log_pdf_raw(eps) - log_proposal;
            for (k, &p) in psi.iter().enumerate() {
                if k != y {
                    lw += kind.log_cdf_raw(eps + psi_y - p);
                }
            }
            *w = lw;
        }
        let l1 = log_sum_exp(&log_w);
        if l1 == f64::NEG_INFINITY {
            degenerate += 1;
            total = f64::NEG_INFINITY;
            continue;
        }
        total += l1 - ln_n;
        let doubled: Vec<f64> = log_w.iter().map(|&w| 2.0 * w).collect();
        let l2 = log_sum_exp(&doubled);
        // Var(log estimate) ≈ (n·E[w²]/E[w]² − 1)/n by the delta method.
        let rel_var = ((n as f64) * (l2 - 2.0 * l1).exp() - 1.0) / n as f64;
        var_sum += rel_var.max(0.0);
    }

    let m = data.len() as f64;
    Ok(IsEstimate {
        mean_loglik: total / m,
        se_log_mean: var_sum.sqrt() / m,
        degenerate,
    })
}

/// Mean absolute error between the class probabilities implied by a
/// bias-only model and the generator's true probabilities.
pub fn prob_estimation_error(model: &LinearModel, true_probs: &[f64]) -> Result<f64> {
    if model.num_features() != 0 {
        return Err(Error::InvalidArgument(
            "probability recovery is defined for bias-only models".into(),
        ));
    }
    if true_probs.len() != model.num_classes() {
        return Err(Error::DimensionMismatch {
            what: "true probabilities vs model classes",
            expected: model.num_classes(),
            got: true_probs.len(),
        });
    }
    let lse = log_sum_exp(model.biases());
    let total: f64 = model
        .biases()
        .iter()
        .zip(true_probs)
        .map(|(&b, &p)| ((b - lse).exp() - p).abs())
        .sum();
    Ok(total / true_probs.len() as f64)
}

fn check_eval_inputs(model: &LinearModel, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    if data.num_classes != model.num_classes() || data.num_features != model.num_features() {
        return Err(Error::DimensionMismatch {
            what: "dataset vs model",
            expected: model.num_classes(),
            got: data.num_classes,
        });
    }
    Ok(())
}
