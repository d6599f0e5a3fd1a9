//! Exact softmax maximum-likelihood baseline.
//!
//! For datasets whose class count permits `O(K)` work per observation, this
//! trainer ascends the exact log-likelihood with the same initialization,
//! minibatch sampling, and adaptive step schedule as the variational
//! trainers, so its trace is directly comparable to theirs.

use std::collections::VecDeque;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bounds::log_sum_exp;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::LinearModel;
use crate::train::{
    apply_global_step, push_smoothed, GradBuffer, IterationRecord, LocalStore, Method, StepState,
    TrainConfig, TrainOutput,
};

/// Gradient of the exact softmax log-likelihood summed over `batch`, as a
/// flat vector (row-major weights, then biases): class `k` receives
/// `(1[k = y_n] − p_nk) · x_n` and the matching bias term per observation.
pub fn exact_softmax_grad(
    model: &LinearModel,
    data: &Dataset,
    batch: &[usize],
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    if data.num_classes != model.num_classes() || data.num_features != model.num_features() {
        return Err(Error::DimensionMismatch {
            what: "dataset vs model",
            expected: model.num_features(),
            got: data.num_features,
        });
    }
    let mut grad = GradBuffer::new(model.num_classes(), model.num_features());
    grad.reset();
    let mut psi = Vec::new();
    accumulate_exact(model, data, batch, 1.0, &mut psi, &mut grad)?;
    Ok(grad.dense())
}

/// Shared accumulation for [`exact_softmax_grad`] and the trainer: adds
/// `coef_scale · (1[k=y] − p_k) · x` for every class of every batch example
/// and returns the summed log-likelihood.
fn accumulate_exact(
    model: &LinearModel,
    data: &Dataset,
    batch: &[usize],
    coef_scale: f64,
    psi: &mut Vec<f64>,
    grad: &mut GradBuffer,
) -> Result<f64> {
    let k = model.num_classes();
    let mut ll_sum = 0.0;
    for &idx in batch {
        let ex = data
            .examples
            .get(idx)
            .ok_or_else(|| Error::InvalidArgument(format!("batch index {idx} out of range")))?;
        let y = ex.label as usize;
        model.psi_all(ex, psi);
        let lse = log_sum_exp(psi);
        ll_sum += psi[y] - lse;
        for class in 0..k {
            let p = (psi[class] - lse).exp();
            let indicator = if class == y { 1.0 } else { 0.0 };
            grad.add_class(ex, class, coef_scale * (indicator - p));
        }
    }
    Ok(ll_sum)
}

/// Trains the exact softmax baseline. The config's `method` must be
/// [`Method::Exact`]; `class_sample` and `alpha` are ignored.
pub fn train_exact(data: &Dataset, config: &TrainConfig) -> Result<TrainOutput> {
    if config.method != Method::Exact {
        return Err(Error::InvalidArgument(format!(
            "train_exact requires the exact method, got {}",
            config.method
        )));
    }
    config.validate(data)?;
    train_exact_with_callback(data, config, |_| {})
}

pub(crate) fn train_exact_with_callback(
    data: &Dataset,
    config: &TrainConfig,
    mut callback: impl FnMut(&IterationRecord),
) -> Result<TrainOutput> {
    config.validate(data)?;
    let n = data.len();
    let k = data.num_classes;
    let d = data.num_features;
    let b = config.minibatch;
    let weight = n as f64 / b as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = LinearModel::init_random(
        k,
        d,
        config.weight_init_std,
        config.bias_init_std,
        &mut rng,
    )?;
    let mut step = StepState::new(
        model.num_params(),
        config.rho0,
        config.decay_factor,
        config.decay_period,
    );
    let mut perm: Vec<usize> = (0..n).collect();
    let mut grad = GradBuffer::new(k, d);
    let mut psi = Vec::with_capacity(k);
    let mut window = VecDeque::new();
    let mut records = Vec::with_capacity(config.iterations as usize);
    let start = Instant::now();

    for _ in 0..config.iterations {
        let rho_base = step.begin_iteration();
        grad.reset();
        for i in 0..b {
            let j = rng.random_range(i..n);
            perm.swap(i, j);
        }
        let ll_sum = accumulate_exact(&model, data, &perm[..b], weight, &mut psi, &mut grad)?;
        let minibatch_elbo = ll_sum / b as f64;
        if !minibatch_elbo.is_finite() {
            return Err(Error::Diverged {
                iteration: step.t(),
                detail: format!("minibatch log-likelihood became {minibatch_elbo}"),
            });
        }
        apply_global_step(&mut model, &grad, &mut step, rho_base, config.l2)?;
        step.end_iteration();

        let smoothed_elbo = push_smoothed(&mut window, minibatch_elbo);
        let record = IterationRecord {
            iteration: step.t(),
            wall_clock_s: start.elapsed().as_secs_f64(),
            minibatch_elbo,
            smoothed_elbo,
        };
        callback(&record);
        records.push(record);
    }

    Ok(TrainOutput {
        model,
        local: LocalStore::None,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, SparseExample};
    use approx::assert_relative_eq;

    fn one_example_dataset(k: usize, d: usize, ex: SparseExample) -> Dataset {
        Dataset {
            examples: vec![ex],
            num_features: d,
            num_classes: k,
            class_ids: None,
            true_probs: None,
        }
    }

    #[test]
    fn uniform_two_class_gradient_is_half_x() {
        let data = one_example_dataset(
            2,
            1,
            SparseExample {
                indices: vec![0],
                values: vec![2.0],
                label: 0,
            },
        );
        let model = LinearModel::zeros(2, 1).unwrap();
        let g = exact_softmax_grad(&model, &data, &[0]).unwrap();
        // Layout: w00, w10, b0, b1.
        assert_relative_eq!(g[0], 1.0, max_relative = 1e-15);
        assert_relative_eq!(g[1], -1.0, max_relative = 1e-15);
        assert_relative_eq!(g[2], 0.5, max_relative = 1e-15);
        assert_relative_eq!(g[3], -0.5, max_relative = 1e-15);
    }

    #[test]
    fn saturated_prediction_has_vanishing_gradient() {
        let data = one_example_dataset(
            3,
            1,
            SparseExample {
                indices: vec![0],
                values: vec![1.0],
                label: 1,
            },
        );
        let mut model = LinearModel::zeros(3, 1).unwrap();
        model.biases[1] = 60.0;
        let g = exact_softmax_grad(&model, &data, &[0]).unwrap();
        assert!(g.iter().all(|&v| v.abs() < 1e-20), "{g:?}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = synth_blobs(4, 12, 3, 1.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = LinearModel::init_random(4, 3, 0.5, 0.5, &mut rng).unwrap();
        let batch: Vec<usize> = (0..data.len()).collect();
        let g = exact_softmax_grad(&model, &data, &batch).unwrap();

        let ll = |m: &LinearModel| -> f64 {
            let mut psi = Vec::new();
            batch
                .iter()
                .map(|&i| {
                    let ex = &data.examples[i];
                    m.psi_all(ex, &mut psi);
                    psi[ex.label as usize] - log_sum_exp(&psi)
                })
                .sum()
        };
        let h = 1e-6;
        for idx in 0..model.num_params() {
            let mut hi = model.clone();
            let mut lo = model.clone();
            if idx < 12 {
                hi.weights[idx] += h;
                lo.weights[idx] -= h;
            } else {
                hi.biases[idx - 12] += h;
                lo.biases[idx - 12] -= h;
            }
            let fd = (ll(&hi) - ll(&lo)) / (2.0 * h);
            let denom = fd.abs().max(g[idx].abs()).max(1e-8);
            assert!(
                (fd - g[idx]).abs() / denom <= 1e-6,
                "param {idx}: fd {fd} vs analytic {}",
                g[idx]
            );
        }
    }

    #[test]
    fn zero_rho_leaves_model_at_init() {
        let data = synth_blobs(3, 15, 2, 0.7, 2).unwrap();
        let mut cfg = TrainConfig::new(Method::Exact, 5, 1, 8, 31);
        cfg.rho0 = 0.0;
        let out = train_exact(&data, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let init = LinearModel::init_random(3, 2, 0.1, 0.001, &mut rng).unwrap();
        assert_eq!(out.model.weights(), init.weights());
        assert_eq!(out.model.biases(), init.biases());
    }

    #[test]
    fn same_seed_gives_identical_trace() {
        let data = synth_blobs(4, 30, 3, 0.8, 9).unwrap();
        let cfg = TrainConfig::new(Method::Exact, 10, 1, 20, 77);
        let a = train_exact(&data, &cfg).unwrap();
        let b = train_exact(&data, &cfg).unwrap();
        let ea: Vec<f64> = a.records.iter().map(|r| r.minibatch_elbo).collect();
        let eb: Vec<f64> = b.records.iter().map(|r| r.minibatch_elbo).collect();
        assert_eq!(ea, eb);
        assert_eq!(a.model.weights(), b.model.weights());
    }

    #[test]
    fn separable_toy_set_reaches_perfect_accuracy() {
        // Two well-separated blobs; 50 epochs at |B| = 10 on N = 40.
        let data = synth_blobs(2, 40, 2, 0.05, 4).unwrap();
        let epochs = 50;
        let cfg = TrainConfig::new(Method::Exact, 10, 1, epochs * 4, 13);
        let out = train_exact(&data, &cfg).unwrap();
        let correct = data
            .examples
            .iter()
            .filter(|ex| {
                let mut psi = Vec::new();
                out.model.psi_all(ex, &mut psi);
                let best = psi
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                best == ex.label as usize
            })
            .count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn rejects_wrong_method_and_bad_batches() {
        let data = synth_blobs(3, 10, 2, 0.5, 1).unwrap();
        let cfg = TrainConfig::new(Method::SoftmaxAr, 5, 1, 5, 1);
        assert!(train_exact(&data, &cfg).is_err());
        let model = LinearModel::zeros(3, 2).unwrap();
        assert!(exact_softmax_grad(&model, &data, &[]).is_err());
        assert!(exact_softmax_grad(&model, &data, &[99]).is_err());
    }
}
