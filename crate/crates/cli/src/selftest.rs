//! Built-in invariant suites: finite-difference gradient checks, bound
//! ordering and tightness, and unbiasedness of the subsampled estimators by
//! exhaustive enumeration. `--quick` runs reduced instance counts.

use std::process::ExitCode;

use ar_core::bounds::{
    exact_softmax_logprob, mc_elbo_grad_nu, mc_elbo_subsampled, ove_bound, softmax_elbo,
    softmax_eta_star, softmax_eta_tilde, ClassSample, UtilityRow,
};
use ar_core::data::synth_blobs;
use ar_core::exact::exact_softmax_grad;
use ar_core::noise::LocScale;
use ar_core::train::{global_gradient, LocalStore};
use ar_core::{Dataset, LinearModel, Method, NoiseKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::opts::{CliResult, SelftestArgs};

const REL_TOL: f64 = 1e-5;
const ABS_TOL: f64 = 1e-7;

struct SuiteReport {
    name: &'static str,
    checks: usize,
    failures: Vec<String>,
}

pub fn run(args: SelftestArgs) -> CliResult<ExitCode> {
    let (gradient_instances, bound_rows) = if args.quick { (24, 200) } else { (120, 1000) };
    let reports = [
        gradient_checks(gradient_instances, args.inject_sign_flip),
        bound_ordering(bound_rows),
        unbiasedness_enumeration(),
    ];

    println!("{:<26} {:>7}  result", "suite", "checks");
    for report in &reports {
        let verdict = if report.failures.is_empty() { "pass" } else { "FAIL" };
        println!("{:<26} {:>7}  {verdict}", report.name, report.checks);
    }
    let mut failed = false;
    for report in &reports {
        for failure in report.failures.iter().take(5) {
            eprintln!("{}: {failure}", report.name);
            failed = true;
        }
        let extra = report.failures.len().saturating_sub(5);
        if extra > 0 {
            eprintln!("{}: ... and {extra} more", report.name);
        }
    }
    Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    NoiseKind::Gaussian.standard_sample(rng)
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

fn fd_mismatch(analytic: f64, fd: f64) -> bool {
    (fd - analytic).abs() > REL_TOL * analytic.abs().max(fd.abs()) + ABS_TOL
}

fn check_model_gradient(
    grad: &[f64],
    objective: impl Fn(&LinearModel) -> f64,
    model: &LinearModel,
    context: &str,
    failures: &mut Vec<String>,
) {
    let h = 1e-6;
    for (idx, &g) in grad.iter().enumerate() {
        let fd = (objective(&perturbed(model, idx, h)) - objective(&perturbed(model, idx, -h)))
            / (2.0 * h);
        if fd_mismatch(g, fd) {
            failures.push(format!("{context}: param {idx}: analytic {g} vs central fd {fd}"));
        }
    }
}

struct Instance {
    model: LinearModel,
    data: Dataset,
    batch: Vec<usize>,
    samples: Vec<ClassSample>,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let k = rng.random_range(3..=8usize);
    let d = rng.random_range(1..=3usize);
    let n = rng.random_range(4..=8usize);
    let data = synth_blobs(k, n, d, 1.0, rng.random()).unwrap();
    let model = LinearModel::init_random(k, d, 0.5, 0.5, rng).unwrap();
    let b = rng.random_range(1..=n);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in 0..b {
        let j = rng.random_range(i..n);
        perm.swap(i, j);
    }
    let batch = perm[..b].to_vec();
    let samples = batch
        .iter()
        .map(|&idx| {
            let y = data.examples[idx].label as usize;
            let count = rng.random_range(1..k);
            ClassSample::uniform(k, y, count, rng).unwrap()
        })
        .collect();
    Instance {
        model,
        data,
        batch,
        samples,
    }
}

fn psi_rows(model: &LinearModel, data: &Dataset) -> Vec<Vec<f64>> {
    data.examples
        .iter()
        .map(|ex| {
            let mut psi = Vec::new();
            model.psi_all(ex, &mut psi);
            psi
        })
        .collect()
}

fn gradient_checks(instances: usize, inject_sign_flip: bool) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA5F0);
    let mut failures = Vec::new();
    let mut checks = 0;
    for i in 0..instances {
        let alternate = (i / 4) % 2 == 0;
        match i % 4 {
            0 => {
                let inst = random_instance(&mut rng);
                let etas: Vec<f64> =
                    (0..inst.data.len()).map(|_| rng.random_range(0.8..8.0)).collect();
                let store = LocalStore::SoftmaxEta(etas.clone());
                let mut grad = global_gradient(
                    &inst.model,
                    &inst.data,
                    &inst.batch,
                    &inst.samples,
                    &store,
                    None,
                    Method::SoftmaxAr,
                )
                .unwrap();
                if inject_sign_flip && i == 0 {
                    let worst = grad
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                        .map(|(idx, _)| idx)
                        .unwrap();
                    grad[worst] = -grad[worst];
                }
                let weight = inst.data.len() as f64 / inst.batch.len() as f64;
                let objective = |m: &LinearModel| {
                    let psi = psi_rows(m, &inst.data);
                    inst.batch
                        .iter()
                        .zip(&inst.samples)
                        .map(|(&n, sample)| {
                            let y = inst.data.examples[n].label as usize;
                            let row = UtilityRow::new(&psi[n], y).unwrap();
                            let eta_tilde = softmax_eta_tilde(&row, sample).unwrap();
                            weight * (1.0 - etas[n].ln() - eta_tilde / etas[n])
                        })
                        .sum()
                };
                check_model_gradient(
                    &grad,
                    objective,
                    &inst.model,
                    &format!("softmax global, instance {i}"),
                    &mut failures,
                );
                checks += grad.len();
            }
            1 => {
                let (kind, method) = if alternate {
                    (NoiseKind::Gaussian, Method::ProbitAr)
                } else {
                    (NoiseKind::Logistic, Method::LogisticAr)
                };
                let inst = random_instance(&mut rng);
                let eps: Vec<f64> =
                    inst.batch.iter().map(|_| kind.standard_sample(&mut rng)).collect();
                let grad = global_gradient(
                    &inst.model,
                    &inst.data,
                    &inst.batch,
                    &inst.samples,
                    &LocalStore::None,
                    Some(&eps),
                    method,
                )
                .unwrap();
                let q = LocScale::from_scale(0.0, 1.0).unwrap();
                let weight = inst.data.len() as f64 / inst.batch.len() as f64;
                let objective = |m: &LinearModel| {
                    let psi = psi_rows(m, &inst.data);
                    inst.batch
                        .iter()
                        .enumerate()
                        .map(|(pos, &n)| {
                            let y = inst.data.examples[n].label as usize;
                            let row = UtilityRow::new(&psi[n], y).unwrap();
                            weight
                                * mc_elbo_subsampled(
                                    &row,
                                    kind,
                                    &q,
                                    &[eps[pos]],
                                    &inst.samples[pos],
                                )
                                .unwrap()
                        })
                        .sum()
                };
                check_model_gradient(
                    &grad,
                    objective,
                    &inst.model,
                    &format!("{kind:?} global, instance {i}"),
                    &mut failures,
                );
                checks += grad.len();
            }
            2 => {
                let kind = if alternate { NoiseKind::Gaussian } else { NoiseKind::Logistic };
                let k = rng.random_range(3..=8usize);
                let psi: Vec<f64> = (0..k).map(|_| 2.0 * normal(&mut rng)).collect();
                let label = rng.random_range(0..k);
                let row = UtilityRow::new(&psi, label).unwrap();
                let count = rng.random_range(1..k);
                let sample = ClassSample::uniform(k, label, count, &mut rng).unwrap();
                let q = LocScale::new(normal(&mut rng), 0.5 * normal(&mut rng));
                let u = kind.standard_sample(&mut rng);
                let grad = mc_elbo_grad_nu(&row, kind, &q, u, &sample).unwrap();

                let h = 1e-6;
                let objective = |q2: &LocScale| {
                    mc_elbo_subsampled(&row, kind, q2, &[q2.reparam(u)], &sample).unwrap()
                };
                let fd_mu = (objective(&LocScale::new(q.mu + h, q.gamma))
                    - objective(&LocScale::new(q.mu - h, q.gamma)))
                    / (2.0 * h);
                let fd_gamma = (objective(&LocScale::new(q.mu, q.gamma + h))
                    - objective(&LocScale::new(q.mu, q.gamma - h)))
                    / (2.0 * h);
                if fd_mismatch(grad.mu, fd_mu) {
                    failures.push(format!(
                        "nu gradient ({kind:?}), instance {i}: mu {} vs fd {fd_mu}",
                        grad.mu
                    ));
                }
                if fd_mismatch(grad.gamma, fd_gamma) {
                    failures.push(format!(
                        "nu gradient ({kind:?}), instance {i}: gamma {} vs fd {fd_gamma}",
                        grad.gamma
                    ));
                }
                checks += 2;
            }
            _ => {
                let inst = random_instance(&mut rng);
                let grad = exact_softmax_grad(&inst.model, &inst.data, &inst.batch).unwrap();
                let objective = |m: &LinearModel| {
                    let psi = psi_rows(m, &inst.data);
                    inst.batch
                        .iter()
                        .map(|&n| {
                            let y = inst.data.examples[n].label as usize;
                            exact_softmax_logprob(&UtilityRow::new(&psi[n], y).unwrap())
                        })
                        .sum()
                };
                check_model_gradient(
                    &grad,
                    objective,
                    &inst.model,
                    &format!("exact baseline, instance {i}"),
                    &mut failures,
                );
                checks += grad.len();
            }
        }
    }
    SuiteReport {
        name: "gradient_checks",
        checks,
        failures,
    }
}

fn bound_ordering(rows: usize) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB0B1);
    let mut failures = Vec::new();
    let mut checks = 0;
    for i in 0..rows {
        let k = rng.random_range(2..=50usize);
        let psi: Vec<f64> = (0..k).map(|_| 3.0 * normal(&mut rng)).collect();
        let label = rng.random_range(0..k);
        let row = UtilityRow::new(&psi, label).unwrap();
        let exact = exact_softmax_logprob(&row);
        let eta_star = softmax_eta_star(&row);

        let tight = softmax_elbo(&row, eta_star).unwrap();
        if (tight - exact).abs() >= 1e-10 {
            failures.push(format!("row {i}: bound at eta* {tight} vs exact {exact}"));
        }
        checks += 1;
        for _ in 0..10 {
            let eta = eta_star * normal(&mut rng).exp();
            let elbo = softmax_elbo(&row, eta).unwrap();
            if elbo > exact + 1e-12 {
                failures.push(format!("row {i}: bound {elbo} above exact {exact} at eta {eta}"));
            }
            checks += 1;
        }
        let ove = ove_bound(&row);
        if ove > exact + 1e-12 {
            failures.push(format!("row {i}: OVE {ove} above exact {exact}"));
        }
        checks += 1;
        if k == 2 && (ove - exact).abs() > 1e-12 {
            failures.push(format!("row {i}: K=2 OVE {ove} != exact {exact}"));
        }
    }
    SuiteReport {
        name: "bound_ordering",
        checks,
        failures,
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

fn unbiasedness_enumeration() -> SuiteReport {
    let mut failures = Vec::new();
    let mut checks = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4C1);

    // Mean of the subsampled eta update over every class subset equals the
    // closed-form optimum.
    let psi: Vec<f64> = (0..6).map(|_| 3.0 * normal(&mut rng)).collect();
    let label = rng.random_range(0..6);
    let row = UtilityRow::new(&psi, label).unwrap();
    let eta_star = softmax_eta_star(&row);
    let competitors: Vec<usize> = (0..6).filter(|&c| c != label).collect();
    for size in [1usize, 2, 5] {
        let subsets = combinations(&competitors, size);
        let mean = subsets
            .iter()
            .map(|s| {
                softmax_eta_tilde(&row, &ClassSample::new(s.clone(), 6, label).unwrap()).unwrap()
            })
            .sum::<f64>()
            / subsets.len() as f64;
        if (mean - eta_star).abs() > 1e-12 * eta_star {
            failures.push(format!("|S|={size}: mean eta~ {mean} vs eta* {eta_star}"));
        }
        checks += 1;
    }

    // Mean of the subsampled global gradient over every (batch, class
    // subset) combination equals the full gradient.
    let data = synth_blobs(4, 4, 2, 0.8, 77).unwrap();
    let model = LinearModel::init_random(4, 2, 0.5, 0.5, &mut rng).unwrap();
    let all: Vec<usize> = (0..4).collect();
    let etas: Vec<f64> = (0..4).map(|_| rng.random_range(1.0..5.0)).collect();
    let eps_all: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..2.0)).collect();
    let store = LocalStore::SoftmaxEta(etas);
    for method in [Method::SoftmaxAr, Method::ProbitAr, Method::LogisticAr, Method::Ove] {
        let general = matches!(method, Method::ProbitAr | Method::LogisticAr);
        let full_samples: Vec<ClassSample> = data
            .examples
            .iter()
            .map(|ex| {
                let y = ex.label as usize;
                ClassSample::new((0..4).filter(|&c| c != y).collect(), 4, y).unwrap()
            })
            .collect();
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
            let subsets: Vec<Vec<Vec<usize>>> = batch
                .iter()
                .map(|&idx| {
                    let y = data.examples[idx].label as usize;
                    combinations(&(0..4).filter(|&c| c != y).collect::<Vec<_>>(), 1)
                })
                .collect();
            for first in &subsets[0] {
                for second in &subsets[1] {
                    let samples = vec![
                        ClassSample::new(first.clone(), 4, data.examples[batch[0]].label as usize)
                            .unwrap(),
                        ClassSample::new(second.clone(), 4, data.examples[batch[1]].label as usize)
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
        for (idx, (m, &f)) in mean.iter_mut().zip(&full).enumerate() {
            *m /= count as f64;
            if (*m - f).abs() > 1e-12 * f.abs().max(1.0) {
                failures.push(format!("{method:?} param {idx}: mean {m} vs full {f}"));
            }
        }
        checks += 1;
    }

    SuiteReport {
        name: "unbiasedness_enumeration",
        checks,
        failures,
    }
}
