//! Finite-difference and unbiasedness checks for the subsampled global
//! gradient, and its agreement with the exact-softmax baseline gradient.

use ar_core::bounds::{
    mc_elbo_subsampled, softmax_eta_star, softmax_eta_tilde, ClassSample, UtilityRow,
};
use ar_core::data::synth_blobs;
use ar_core::exact::exact_softmax_grad;
use ar_core::noise::LocScale;
use ar_core::train::{global_gradient, LocalStore, Method};
use ar_core::{Dataset, LinearModel, NoiseKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64, k: usize, n: usize, d: usize) -> (LinearModel, Dataset) {
    let data = synth_blobs(k, n, d, 0.8, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let model = LinearModel::init_random(k, d, 0.5, 0.5, &mut rng).unwrap();
    (model, data)
}

fn perturbed(model: &LinearModel, idx: usize, h: f64) -> LinearModel {
    let mut m = model.clone();
    let off = m.num_classes() * m.num_features();
    if idx < off {
        m.weights_mut()[idx] += h;
    } else {
        m.biases_mut()[idx - off] += h;
    }
    m
}

fn check_gradient(
    grad: &[f64],
    objective: impl Fn(&LinearModel) -> f64,
    model: &LinearModel,
    context: &str,
) {
    let h = 1e-6;
    for (idx, &g) in grad.iter().enumerate() {
        let up = objective(&perturbed(model, idx, h));
        let down = objective(&perturbed(model, idx, -h));
        let fd = (up - down) / (2.0 * h);
        let tol = 1e-5 * g.abs().max(fd.abs()) + 1e-7;
        assert!(
            (fd - g).abs() <= tol,
            "{context}: param {idx}: analytic {g} vs finite difference {fd}"
        );
    }
}

fn full_competitors(k: usize, label: usize) -> ClassSample {
    ClassSample::new((0..k).filter(|&c| c != label).collect(), k, label).unwrap()
}

fn rows(model: &LinearModel, data: &Dataset) -> Vec<Vec<f64>> {
    data.examples
        .iter()
        .map(|ex| {
            let mut psi = Vec::new();
            model.psi_all(ex, &mut psi);
            psi
        })
        .collect()
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    for seed in [1u64, 2, 3] {
        let (model, data) = instance(seed, 5, 10, 3);
        let k = data.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let etas: Vec<f64> = (0..data.len()).map(|_| rng.random_range(0.8..8.0)).collect();
        let batch: Vec<usize> = vec![0, 2, 5, 7, 9];
        let samples: Vec<ClassSample> = batch
            .iter()
            .map(|&n| {
                let y = data.examples[n].label as usize;
                ClassSample::uniform(k, y, 2, &mut rng).unwrap()
            })
            .collect();
        let store = LocalStore::SoftmaxEta(etas.clone());
        let grad =
            global_gradient(&model, &data, &batch, &samples, &store, None, Method::SoftmaxAr)
                .unwrap();
        let weight = data.len() as f64 / batch.len() as f64;
        let objective = |m: &LinearModel| {
            let psi = rows(m, &data);
            batch
                .iter()
                .zip(&samples)
                .map(|(&n, sample)| {
                    let row = UtilityRow::new(&psi[n], data.examples[n].label as usize).unwrap();
                    let eta_tilde = softmax_eta_tilde(&row, sample).unwrap();
                    weight * (1.0 - etas[n].ln() - eta_tilde / etas[n])
                })
                .sum()
        };
        check_gradient(&grad, objective, &model, &format!("softmax seed {seed}"));
    }
}

#[test]
fn general_gradient_matches_finite_differences() {
    for kind_method in [
        (NoiseKind::Gaussian, Method::ProbitAr),
        (NoiseKind::Logistic, Method::LogisticAr),
    ] {
        let (kind, method) = kind_method;
        for seed in [4u64, 5] {
            let (model, data) = instance(seed, 5, 10, 3);
            let k = data.num_classes;
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
            let batch: Vec<usize> = vec![1, 3, 4, 8];
            let samples: Vec<ClassSample> = batch
                .iter()
                .map(|&n| {
                    let y = data.examples[n].label as usize;
                    ClassSample::uniform(k, y, 2, &mut rng).unwrap()
                })
                .collect();
            let eps: Vec<f64> = batch
                .iter()
                .map(|_| kind.standard_sample(&mut rng) * 0.7 + 0.3)
                .collect();
            let grad = global_gradient(
                &model,
                &data,
                &batch,
                &samples,
                &LocalStore::None,
                Some(&eps),
                method,
            )
            .unwrap();
            let q = LocScale::from_scale(0.0, 1.0).unwrap();
            let weight = data.len() as f64 / batch.len() as f64;
            let objective = |m: &LinearModel| {
                let psi = rows(m, &data);
                batch
                    .iter()
                    .enumerate()
                    .map(|(pos, &n)| {
                        let row =
                            UtilityRow::new(&psi[n], data.examples[n].label as usize).unwrap();
                        weight
                            * mc_elbo_subsampled(&row, kind, &q, &[eps[pos]], &samples[pos])
                                .unwrap()
                    })
                    .sum()
            };
            check_gradient(&grad, objective, &model, &format!("{kind:?} seed {seed}"));
        }
    }
}

#[test]
fn ove_gradient_matches_finite_differences() {
    for seed in [6u64, 7] {
        let (model, data) = instance(seed, 5, 10, 3);
        let k = data.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 300);
        let batch: Vec<usize> = vec![0, 1, 6, 9];
        let samples: Vec<ClassSample> = batch
            .iter()
            .map(|&n| {
                let y = data.examples[n].label as usize;
                ClassSample::uniform(k, y, 3, &mut rng).unwrap()
            })
            .collect();
        let grad = global_gradient(
            &model,
            &data,
            &batch,
            &samples,
            &LocalStore::None,
            None,
            Method::Ove,
        )
        .unwrap();
        let weight = data.len() as f64 / batch.len() as f64;
        let objective = |m: &LinearModel| {
            let psi = rows(m, &data);
            batch
                .iter()
                .zip(&samples)
                .map(|(&n, sample)| {
                    let row = UtilityRow::new(&psi[n], data.examples[n].label as usize).unwrap();
                    weight * ar_core::bounds::ove_bound_subsampled(&row, sample).unwrap()
                })
                .sum()
        };
        check_gradient(&grad, objective, &model, &format!("ove seed {seed}"));
    }
}

#[test]
fn ar_gradient_at_optimal_eta_equals_exact_gradient() {
    for seed in [8u64, 9, 10] {
        let (model, data) = instance(seed, 6, 12, 3);
        let k = data.num_classes;
        let batch: Vec<usize> = (0..data.len()).collect();
        let psi = rows(&model, &data);
        let etas: Vec<f64> = data
            .examples
            .iter()
            .enumerate()
            .map(|(n, ex)| {
                softmax_eta_star(&UtilityRow::new(&psi[n], ex.label as usize).unwrap())
            })
            .collect();
        let samples: Vec<ClassSample> = data
            .examples
            .iter()
            .map(|ex| full_competitors(k, ex.label as usize))
            .collect();
        let ar = global_gradient(
            &model,
            &data,
            &batch,
            &samples,
            &LocalStore::SoftmaxEta(etas),
            None,
            Method::SoftmaxAr,
        )
        .unwrap();
        let exact = exact_softmax_grad(&model, &data, &batch).unwrap();
        for (idx, (&a, &e)) in ar.iter().zip(&exact).enumerate() {
            assert!(
                (a - e).abs() <= 1e-8 * a.abs().max(e.abs()).max(1e-8),
                "seed {seed}, param {idx}: AR {a} vs exact {e}"
            );
        }
    }
}

fn combinations(pool: &[usize], size: usize) -> Vec<Vec<usize>> {
    if size == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for (i, &first) in pool.iter().enumerate() {
        if pool.len() - i < size {
            break;
        }
        for mut rest in combinations(&pool[i + 1..], size - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

#[test]
fn subsampled_eta_update_is_unbiased_over_all_class_subsets() {
    let psi = [0.9f64, -0.4, 0.2, 1.3, -1.0, 0.0];
    let row = UtilityRow::new(&psi, 2).unwrap();
    let eta_star = softmax_eta_star(&row);
    let competitors: Vec<usize> = (0..6).filter(|&c| c != 2).collect();
    for size in [1usize, 2, 5] {
        let subsets = combinations(&competitors, size);
        let mean: f64 = subsets
            .iter()
            .map(|s| {
                let sample = ClassSample::new(s.clone(), 6, 2).unwrap();
                softmax_eta_tilde(&row, &sample).unwrap()
            })
            .sum::<f64>()
            / subsets.len() as f64;
        assert!(
            (mean - eta_star).abs() <= 1e-12 * eta_star,
            "|S| = {size}: mean {mean} vs eta* {eta_star}"
        );
    }
}

#[test]
fn subsampled_gradient_is_unbiased_over_all_batches_and_class_subsets() {
    let (model, data) = instance(11, 4, 4, 2);
    let k = data.num_classes;
    let n = data.len();
    let all: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let etas: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..5.0)).collect();
    let eps_all: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.0)).collect();
    let store = LocalStore::SoftmaxEta(etas);

    for method in [Method::SoftmaxAr, Method::ProbitAr, Method::LogisticAr, Method::Ove] {
        let full_samples: Vec<ClassSample> = data
            .examples
            .iter()
            .map(|ex| full_competitors(k, ex.label as usize))
            .collect();
        let general = matches!(method, Method::ProbitAr | Method::LogisticAr);
        let full_eps = general.then(|| eps_all.clone());
        let full = global_gradient(
            &model,
            &data,
            &all,
            &full_samples,
            &store,
            full_eps.as_deref(),
            method,
        )
        .unwrap();

        let mut mean = vec![0.0; full.len()];
        let mut count = 0usize;
        for batch in combinations(&all, 2) {
            let choices: Vec<Vec<Vec<usize>>> = batch
                .iter()
                .map(|&idx| {
                    let y = data.examples[idx].label as usize;
                    let competitors: Vec<usize> = (0..k).filter(|&c| c != y).collect();
                    combinations(&competitors, 1)
                })
                .collect();
            for first in &choices[0] {
                for second in &choices[1] {
                    let samples = vec![
                        ClassSample::new(first.clone(), k, data.examples[batch[0]].label as usize)
                            .unwrap(),
                        ClassSample::new(
                            second.clone(),
                            k,
                            data.examples[batch[1]].label as usize,
                        )
                        .unwrap(),
                    ];
                    let eps = general.then(|| vec![eps_all[batch[0]], eps_all[batch[1]]]);
                    let g = global_gradient(
                        &model,
                        &data,
                        &batch,
                        &samples,
                        &store,
                        eps.as_deref(),
                        method,
                    )
                    .unwrap();
                    for (m, v) in mean.iter_mut().zip(&g) {
                        *m += v;
                    }
                    count += 1;
                }
            }
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        for (idx, (&m, &f)) in mean.iter().zip(&full).enumerate() {
            assert!(
                (m - f).abs() <= 1e-12 * f.abs().max(1.0),
                "{method:?}, param {idx}: enumerated mean {m} vs full {f}"
            );
        }
    }
}
