//! Stochastic variational EM trainers for the augment-and-reduce bounds.
//!
//! One training iteration samples a minibatch `B` of observations and, for
//! each of them, a set `S` of competing classes. The E step updates that
//! observation's local variational state (the auxiliary `η` on the softmax
//! path, a location–scale `ν` on the general path); the M step takes one
//! adaptive gradient ascent step on the weights using the `(N/|B|)·(K−1)/|S|`
//! scaled, unbiased minibatch gradient. The one-vs-each baseline shares the
//! same loop with no local state.
//!
//! # Determinism
//!
//! A run is a pure function of the dataset, the configuration, and the seed.
//! All randomness comes from one ChaCha stream consumed in a fixed order:
//! model initialization first (weights row by row, then biases), then per
//! iteration the `|B|` minibatch positions, then for each selected example in
//! batch order its class sample (rejection draws) followed, on the general
//! path, by one standard draw for the E step and one for the M step. Tests
//! rely on this order to replay a run's draws through the public sampling
//! APIs.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bounds::ClassSample;
use crate::data::{Dataset, SparseExample};
use crate::error::{Error, Result};
use crate::exact;
use crate::model::LinearModel;
use crate::noise::{self, sigmoid, LocScale, NoiseKind};

/// Which objective and update rule a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Softmax likelihood, closed-form E step on `η`.
    SoftmaxAr,
    /// Multinomial probit, reparameterized E step on `ν`.
    ProbitAr,
    /// Multinomial logistic, reparameterized E step on `ν`.
    LogisticAr,
    /// One-vs-each lower bound; no local state.
    Ove,
    /// Exact softmax maximum likelihood (no class subsampling).
    Exact,
}

impl Method {
    /// The noise family behind an augmented method, if any.
    pub fn noise_kind(self) -> Option<NoiseKind> {
        match self {
            Method::SoftmaxAr => Some(NoiseKind::Gumbel),
            Method::ProbitAr => Some(NoiseKind::Gaussian),
            Method::LogisticAr => Some(NoiseKind::Logistic),
            Method::Ove | Method::Exact => None,
        }
    }

    /// Whether the method subsamples competing classes.
    pub fn uses_class_samples(self) -> bool {
        !matches!(self, Method::Exact)
    }

    fn is_general(self) -> bool {
        matches!(self, Method::ProbitAr | Method::LogisticAr)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax_ar" => Ok(Method::SoftmaxAr),
            "probit_ar" => Ok(Method::ProbitAr),
            "logistic_ar" => Ok(Method::LogisticAr),
            "ove" => Ok(Method::Ove),
            "exact" => Ok(Method::Exact),
            other => Err(Error::InvalidArgument(format!(
                "unknown method '{other}' (expected softmax_ar, probit_ar, logistic_ar, ove, or exact)"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::SoftmaxAr => "softmax_ar",
            Method::ProbitAr => "probit_ar",
            Method::LogisticAr => "logistic_ar",
            Method::Ove => "ove",
            Method::Exact => "exact",
        })
    }
}

/// Local step-size schedule `α(t) = scale · (1+t)^{−power}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaSchedule {
    pub scale: f64,
    pub power: f64,
}

impl AlphaSchedule {
    /// The default schedule for a method: unit scale on the softmax path,
    /// 0.01 on the general path (whose one-sample gradients are noisier),
    /// and zero where no local state exists.
    pub fn for_method(method: Method) -> Self {
        let scale = match method {
            Method::SoftmaxAr => 1.0,
            Method::ProbitAr | Method::LogisticAr => 0.01,
            Method::Ove | Method::Exact => 0.0,
        };
        AlphaSchedule { scale, power: 0.9 }
    }

    pub fn at(&self, t: u64) -> f64 {
        self.scale * (1.0 + t as f64).powf(-self.power)
    }
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub method: Method,
    /// Observations per iteration, `|B|`.
    pub minibatch: usize,
    /// Competing classes per observation, `|S|` (ignored by `Exact`).
    pub class_sample: usize,
    pub iterations: u64,
    pub seed: u64,
    /// Base global step size `ρ_0`.
    pub rho0: f64,
    /// `ρ_0` is multiplied by this factor every `decay_period` iterations.
    pub decay_factor: f64,
    pub decay_period: u64,
    pub alpha: AlphaSchedule,
    /// L2 penalty weight on the weight matrix (not the biases); 0 disables.
    pub l2: f64,
    pub weight_init_std: f64,
    pub bias_init_std: f64,
}

impl TrainConfig {
    pub fn new(
        method: Method,
        minibatch: usize,
        class_sample: usize,
        iterations: u64,
        seed: u64,
    ) -> Self {
        TrainConfig {
            method,
            minibatch,
            class_sample,
            iterations,
            seed,
            rho0: 0.02,
            decay_factor: 0.9,
            decay_period: 2000,
            alpha: AlphaSchedule::for_method(method),
            l2: 0.0,
            weight_init_std: 0.1,
            bias_init_std: 0.001,
        }
    }

    pub fn validate(&self, data: &Dataset) -> Result<()> {
        data.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
        }
        if self.minibatch == 0 || self.minibatch > data.len() {
            return Err(Error::InvalidArgument(format!(
                "minibatch size {} outside 1..={}",
                self.minibatch,
                data.len()
            )));
        }
        if self.method.uses_class_samples() {
            let k = data.num_classes;
            if k < 2 {
                return Err(Error::InvalidArgument(
                    "class subsampling needs at least two classes".into(),
                ));
            }
            if self.class_sample == 0 || self.class_sample > k - 1 {
                return Err(Error::InvalidArgument(format!(
                    "class sample size {} outside 1..={}",
                    self.class_sample,
                    k - 1
                )));
            }
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("need at least one iteration".into()));
        }
        if !(self.rho0 >= 0.0) || !self.rho0.is_finite() {
            return Err(Error::NonPositive {
                what: "rho0",
                value: self.rho0,
            });
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::NonPositive {
                what: "decay_factor",
                value: self.decay_factor,
            });
        }
        if self.decay_period == 0 {
            return Err(Error::InvalidArgument("decay period must be positive".into()));
        }
        if !(self.alpha.scale >= 0.0 && self.alpha.scale <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha scale {} outside [0, 1]",
                self.alpha.scale
            )));
        }
        if !(self.alpha.power >= 0.0) || !self.alpha.power.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "alpha power {} must be finite and nonnegative",
                self.alpha.power
            )));
        }
        if !(self.l2 >= 0.0) || !self.l2.is_finite() {
            return Err(Error::NonPositive {
                what: "l2",
                value: self.l2,
            });
        }
        Ok(())
    }
}

/// Adaptive per-parameter step sizes:
/// `ρ(t) = ρ_0 · t^{−1/2+10⁻¹⁶} / (1 + √s(t))` with the running curvature
/// proxy `s(t) = 0.1 g² + 0.9 s(t−1)`, and `ρ_0` decayed by a fixed factor
/// every `decay_period` iterations (immediately after the step at which
/// `t ≡ 0 (mod period)`).
#[derive(Debug, Clone)]
pub struct StepState {
    s: Vec<f64>,
    t: u64,
    rho0: f64,
    decay_factor: f64,
    decay_period: u64,
}

const STEP_EXPONENT: f64 = -0.5 + 1e-16;

#[inline]
fn s_update(s: f64, g: f64) -> f64 {
    0.9 * s + 0.1 * (g * g)
}

impl StepState {
    pub fn new(num_params: usize, rho0: f64, decay_factor: f64, decay_period: u64) -> Self {
        StepState {
            s: vec![0.0; num_params],
            t: 0,
            rho0,
            decay_factor,
            decay_period,
        }
    }

    /// Iterations completed so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// The current (possibly decayed) base step size.
    pub fn rho0(&self) -> f64 {
        self.rho0
    }

    /// Advances one iteration and returns the per-parameter step sizes for
    /// gradient `g`. Panics if `g` has the wrong length.
    pub fn step_sizes(&mut self, g: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), self.s.len(), "gradient length mismatch");
        let rho_base = self.begin_iteration();
        let steps = g
            .iter()
            .zip(self.s.iter_mut())
            .map(|(&gi, si)| {
                *si = s_update(*si, gi);
                rho_base / (1.0 + si.sqrt())
            })
            .collect();
        self.end_iteration();
        steps
    }

    /// Starts iteration `t+1` and returns `ρ_0 · t^{−1/2+10⁻¹⁶}`.
    pub(crate) fn begin_iteration(&mut self) -> f64 {
        self.t += 1;
        self.rho0 * (self.t as f64).powf(STEP_EXPONENT)
    }

    /// Applies the `g = 0` part of the `s` recursion to every parameter.
    /// Touched parameters then add their `0.1 g²` on top, which together is
    /// exactly `s_update`.
    fn decay_s(&mut self) {
        for s in &mut self.s {
            *s *= 0.9;
        }
    }

    /// Adds one parameter's `0.1 g²` on top of the already-applied decay and
    /// returns its step size. Only valid between `decay_s` and
    /// `end_iteration`.
    #[inline]
    fn step_at(&mut self, idx: usize, g: f64, rho_base: f64) -> f64 {
        let s = &mut self.s[idx];
        *s += 0.1 * (g * g);
        rho_base / (1.0 + s.sqrt())
    }

    pub(crate) fn end_iteration(&mut self) {
        if self.t % self.decay_period == 0 {
            self.rho0 *= self.decay_factor;
        }
    }
}

/// Per-observation variational state.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalStore {
    /// Softmax-path auxiliary values `η_n > 0`.
    SoftmaxEta(Vec<f64>),
    /// General-path location–scale parameters `ν_n`.
    General(Vec<LocScale>),
    /// Methods with no local state (one-vs-each, exact).
    None,
}

impl LocalStore {
    pub fn etas(&self) -> Option<&[f64]> {
        match self {
            LocalStore::SoftmaxEta(v) => Some(v),
            _ => None,
        }
    }

    pub fn nus(&self) -> Option<&[LocScale]> {
        match self {
            LocalStore::General(v) => Some(v),
            _ => None,
        }
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    /// 1-based iteration index.
    pub iteration: u64,
    /// Seconds since the run started.
    pub wall_clock_s: f64,
    /// Mean per-datapoint objective estimate on this iteration's minibatch.
    pub minibatch_elbo: f64,
    /// Mean of the last (up to) 100 `minibatch_elbo` values.
    pub smoothed_elbo: f64,
}

/// Number of trailing iterations averaged into `smoothed_elbo`.
pub const SMOOTHING_WINDOW: usize = 100;

/// The result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: LinearModel,
    pub local: LocalStore,
    pub records: Vec<IterationRecord>,
}

/// Sparse gradient accumulator over the flat parameter vector
/// (row-major weights, then biases), tracking which entries were touched.
pub(crate) struct GradBuffer {
    num_features: usize,
    bias_offset: usize,
    values: Vec<f64>,
    stamp: Vec<u64>,
    touched: Vec<usize>,
    epoch: u64,
}

impl GradBuffer {
    pub(crate) fn new(num_classes: usize, num_features: usize) -> Self {
        let p = num_classes * num_features + num_classes;
        GradBuffer {
            num_features,
            bias_offset: num_classes * num_features,
            values: vec![0.0; p],
            stamp: vec![0; p],
            touched: Vec::new(),
            epoch: 0,
        }
    }

    pub(crate) fn reset(&mut self) {
        self.epoch += 1;
        self.touched.clear();
    }

    #[inline]
    fn add(&mut self, idx: usize, v: f64) {
        if self.stamp[idx] == self.epoch {
            self.values[idx] += v;
        } else {
            self.stamp[idx] = self.epoch;
            self.values[idx] = v;
            self.touched.push(idx);
        }
    }

    #[inline]
    fn value_at(&self, idx: usize) -> f64 {
        if self.stamp[idx] == self.epoch {
            self.values[idx]
        } else {
            0.0
        }
    }

    /// Adds `coef · x` into one class's weight row and `coef` into its bias.
    #[inline]
    pub(crate) fn add_class(&mut self, ex: &SparseExample, class: usize, coef: f64) {
        let base = class * self.num_features;
        for (&i, &v) in ex.indices.iter().zip(&ex.values) {
            self.add(base + i as usize, coef * v);
        }
        self.add(self.bias_offset + class, coef);
    }

    /// The shared scatter shape of every subsampled bound gradient: each
    /// competitor `k'` pulls its own utility down by `coefs[j]` and pushes
    /// the label's up by the same amount.
    fn scatter_pairwise(
        &mut self,
        ex: &SparseExample,
        label: usize,
        classes: &[usize],
        coefs: &[f64],
    ) {
        let mut label_total = 0.0;
        for (j, &c) in classes.iter().enumerate() {
            label_total += coefs[j];
            self.add_class(ex, c, -coefs[j]);
        }
        self.add_class(ex, label, label_total);
    }

    pub(crate) fn touched(&self) -> &[usize] {
        &self.touched
    }

    pub(crate) fn dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for &i in &self.touched {
            out[i] = self.values[i];
        }
        out
    }
}

/// Uniform rejection sampler for class sets, with persistent buffers so the
/// hot loop does not allocate. Draws exactly like [`ClassSample::uniform`].
struct ClassSampler {
    mark: Vec<u64>,
    epoch: u64,
}

impl ClassSampler {
    fn new(num_classes: usize) -> Self {
        ClassSampler {
            mark: vec![0; num_classes],
            epoch: 0,
        }
    }

    fn sample_into<R: Rng + ?Sized>(
        &mut self,
        num_classes: usize,
        label: usize,
        count: usize,
        rng: &mut R,
        out: &mut Vec<usize>,
    ) {
        self.epoch += 1;
        out.clear();
        self.mark[label] = self.epoch;
        while out.len() < count {
            let c = rng.random_range(0..num_classes as u32) as usize;
            if self.mark[c] != self.epoch {
                self.mark[c] = self.epoch;
                out.push(c);
            }
        }
    }
}

fn fill_psi(model: &LinearModel, ex: &SparseExample, classes: &[usize], psi: &mut Vec<f64>) {
    psi.clear();
    psi.extend(classes.iter().map(|&c| model.psi(c, ex)));
}

/// Computes `e^{ψ_{k'}−ψ_y}` for every sampled class and returns
/// `η̃ = 1 + scale · Σ e^{ψ_{k'}−ψ_y}`.
fn eta_tilde_from(psi_y: f64, psi: &[f64], scale: f64, exps: &mut Vec<f64>) -> f64 {
    exps.clear();
    let mut sum = 0.0;
    for &p in psi {
        let e = (p - psi_y).exp();
        exps.push(e);
        sum += e;
    }
    1.0 + scale * sum
}

/// Softmax-path competitor coefficients `base · e^{ψ_{k'}−ψ_y}`.
fn softmax_coefs(exps: &[f64], base: f64, coefs: &mut Vec<f64>) {
    coefs.clear();
    coefs.extend(exps.iter().map(|&e| base * e));
}

/// General-path competitor coefficients `amount · d logΦ(ε+ψ_y−ψ_{k'})`;
/// returns `Σ logΦ(ε+ψ_y−ψ_{k'})` for the objective estimate.
fn general_coefs(
    kind: NoiseKind,
    eps: f64,
    psi_y: f64,
    psi: &[f64],
    amount: f64,
    coefs: &mut Vec<f64>,
) -> f64 {
    coefs.clear();
    let mut log_cdf_sum = 0.0;
    for &p in psi {
        let (lc, d) = kind.log_cdf_with_grad(eps + psi_y - p);
        log_cdf_sum += lc;
        coefs.push(amount * d);
    }
    log_cdf_sum
}

/// One-vs-each competitor coefficients `amount · σ(ψ_{k'}−ψ_y)`; returns
/// `Σ ln σ(ψ_y−ψ_{k'})` for the objective estimate.
fn ove_coefs(psi_y: f64, psi: &[f64], amount: f64, coefs: &mut Vec<f64>) -> f64 {
    coefs.clear();
    let mut bound = 0.0;
    for &p in psi {
        let (log_sig, slope) = noise::ove_terms(psi_y - p);
        bound += log_sig;
        coefs.push(amount * slope);
    }
    bound
}

/// The subsampled global (M-step) gradient of the minibatch objective with
/// respect to the flat parameter vector (row-major weights, then biases),
/// scaled by `N/|B|` so it estimates the full-data gradient.
///
/// The local state is taken as given: the softmax path reads the `η` in
/// effect for the M step from `local`, and the general path evaluates at the
/// provided per-example noise draws `eps` (aligned with `batch`). This is
/// the reference implementation the trainer's fused loop is checked against;
/// `Method::Exact` has no subsampled gradient and is rejected.
pub fn global_gradient(
    model: &LinearModel,
    data: &Dataset,
    batch: &[usize],
    samples: &[ClassSample],
    local: &LocalStore,
    eps: Option<&[f64]>,
    method: Method,
) -> Result<Vec<f64>> {
    if method == Method::Exact {
        return Err(Error::InvalidArgument(
            "the exact method trains on the full class set; it has no subsampled gradient".into(),
        ));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    if samples.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            what: "class samples vs minibatch",
            expected: batch.len(),
            got: samples.len(),
        });
    }
    let k = model.num_classes();
    if data.num_classes != k || data.num_features != model.num_features() {
        return Err(Error::DimensionMismatch {
            what: "dataset vs model",
            expected: model.num_features(),
            got: data.num_features,
        });
    }
    let etas = match (method, local) {
        (Method::SoftmaxAr, LocalStore::SoftmaxEta(etas)) => {
            if etas.len() != data.len() {
                return Err(Error::DimensionMismatch {
                    what: "eta store vs dataset",
                    expected: data.len(),
                    got: etas.len(),
                });
            }
            Some(etas.as_slice())
        }
        (Method::SoftmaxAr, _) => {
            return Err(Error::InvalidArgument(
                "the softmax path needs a LocalStore::SoftmaxEta".into(),
            ))
        }
        _ => None,
    };
    let draws = if method.is_general() {
        let draws = eps.ok_or_else(|| {
            Error::InvalidArgument("the general path needs one noise draw per batch entry".into())
        })?;
        if draws.len() != batch.len() {
            return Err(Error::DimensionMismatch {
                what: "noise draws vs minibatch",
                expected: batch.len(),
                got: draws.len(),
            });
        }
        Some(draws)
    } else {
        None
    };

    let weight = data.len() as f64 / batch.len() as f64;
    let mut grad = GradBuffer::new(k, model.num_features());
    grad.reset();
    let mut psi_vals = Vec::new();
    let mut exps = Vec::new();
    let mut coefs = Vec::new();

    for (pos, &idx) in batch.iter().enumerate() {
        let ex = data
            .examples
            .get(idx)
            .ok_or_else(|| Error::InvalidArgument(format!("batch index {idx} out of range")))?;
        let y = ex.label as usize;
        let sample = &samples[pos];
        if sample.num_classes() != k {
            return Err(Error::DimensionMismatch {
                what: "class sample vs model",
                expected: k,
                got: sample.num_classes(),
            });
        }
        if sample.classes().contains(&y) {
            return Err(Error::InvalidClassSample {
                detail: format!("label {y} appears in its own class sample"),
            });
        }
        let amount = weight * sample.scale();
        let psi_y = model.psi(y, ex);
        fill_psi(model, ex, sample.classes(), &mut psi_vals);
        match method {
            Method::SoftmaxAr => {
                let eta = etas.unwrap()[idx];
                if !(eta > 0.0) || !eta.is_finite() {
                    return Err(Error::NonPositive {
                        what: "eta",
                        value: eta,
                    });
                }
                eta_tilde_from(psi_y, &psi_vals, sample.scale(), &mut exps);
                softmax_coefs(&exps, amount / eta, &mut coefs);
            }
            Method::ProbitAr | Method::LogisticAr => {
                let e = draws.unwrap()[pos];
                if !e.is_finite() {
                    return Err(Error::NonFinite {
                        what: "eps",
                        value: e,
                    });
                }
                let kind = method.noise_kind().expect("general method");
                general_coefs(kind, e, psi_y, &psi_vals, amount, &mut coefs);
            }
            Method::Ove => {
                ove_coefs(psi_y, &psi_vals, amount, &mut coefs);
            }
            Method::Exact => unreachable!(),
        }
        grad.scatter_pairwise(ex, y, sample.classes(), &coefs);
    }
    Ok(grad.dense())
}

/// Trains with the given configuration. See [`train_with_callback`].
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<TrainOutput> {
    train_with_callback(data, config, |_| {})
}

/// Trains with the given configuration, invoking `callback` after every
/// iteration with that iteration's trace record. `Method::Exact` dispatches
/// to the full-softmax baseline trainer; every method shares the same
/// initialization, minibatch sampling, and global step schedule.
pub fn train_with_callback(
    data: &Dataset,
    config: &TrainConfig,
    mut callback: impl FnMut(&IterationRecord),
) -> Result<TrainOutput> {
    config.validate(data)?;
    if config.method == Method::Exact {
        return exact::train_exact_with_callback(data, config, callback);
    }

    let n = data.len();
    let k = data.num_classes;
    let d = data.num_features;
    let bias_offset = k * d;
    let b = config.minibatch;
    let s_size = config.class_sample;
    let class_scale = (k - 1) as f64 / s_size as f64;
    let weight = n as f64 / b as f64;
    let general_kind = config.method.noise_kind().filter(|_| config.method.is_general());

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = LinearModel::init_random(
        k,
        d,
        config.weight_init_std,
        config.bias_init_std,
        &mut rng,
    )?;
    let mut local = match config.method {
        Method::SoftmaxAr => LocalStore::SoftmaxEta(vec![k as f64; n]),
        Method::ProbitAr | Method::LogisticAr => {
            let nu0 = LocScale::from_scale(0.0, 1.0).expect("unit scale");
            LocalStore::General(vec![nu0; n])
        }
        Method::Ove => LocalStore::None,
        Method::Exact => unreachable!(),
    };
    let entropy_base = match general_kind {
        Some(kind) => kind.standard_entropy()?,
        None => 0.0,
    };

    let mut step = StepState::new(
        bias_offset + k,
        config.rho0,
        config.decay_factor,
        config.decay_period,
    );
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sampler = ClassSampler::new(k);
    let mut grad = GradBuffer::new(k, d);
    let mut classes = Vec::with_capacity(s_size);
    let mut psi_vals = Vec::with_capacity(s_size);
    let mut exps = Vec::with_capacity(s_size);
    let mut coefs = Vec::with_capacity(s_size);
    let mut window = VecDeque::with_capacity(SMOOTHING_WINDOW);
    let mut records = Vec::with_capacity(config.iterations as usize);
    let start = Instant::now();

    for _ in 0..config.iterations {
        let rho_base = step.begin_iteration();
        let alpha = config.alpha.at(step.t());
        grad.reset();
        for i in 0..b {
            let j = rng.random_range(i..n);
            perm.swap(i, j);
        }

        let mut elbo_sum = 0.0;
        for &idx in &perm[..b] {
            let ex = &data.examples[idx];
            let y = ex.label as usize;
            sampler.sample_into(k, y, s_size, &mut rng, &mut classes);
            let psi_y = model.psi(y, ex);
            fill_psi(&model, ex, &classes, &mut psi_vals);
            let amount = weight * class_scale;

            let elbo_n = match &mut local {
                LocalStore::SoftmaxEta(etas) => {
                    let eta_tilde = eta_tilde_from(psi_y, &psi_vals, class_scale, &mut exps);
                    let eta = (1.0 - alpha) * etas[idx] + alpha * eta_tilde;
                    etas[idx] = eta;
                    softmax_coefs(&exps, amount / eta, &mut coefs);
                    1.0 - eta.ln() - eta_tilde / eta
                }
                LocalStore::General(nus) => {
                    let kind = general_kind.expect("general method");
                    let nu = &mut nus[idx];
                    let u1 = kind.standard_sample(&mut rng);
                    let s1 = nu.scale();
                    let eps1 = nu.mu + s1 * u1;
                    let mut dlogp = kind.dlog_pdf_raw(eps1);
                    for &p in &psi_vals {
                        dlogp += class_scale * kind.dlog_cdf_raw(eps1 + psi_y - p);
                    }
                    let g_gamma = (dlogp * u1 + 1.0 / s1) * sigmoid(nu.gamma);
                    nu.mu += alpha * dlogp;
                    nu.gamma += alpha * g_gamma;

                    let u2 = kind.standard_sample(&mut rng);
                    let s2 = nu.scale();
                    let eps2 = nu.mu + s2 * u2;
                    let log_cdf_sum =
                        general_coefs(kind, eps2, psi_y, &psi_vals, amount, &mut coefs);
                    kind.log_pdf_raw(eps2) + class_scale * log_cdf_sum + entropy_base + s2.ln()
                }
                LocalStore::None => class_scale * ove_coefs(psi_y, &psi_vals, amount, &mut coefs),
            };
            elbo_sum += elbo_n;
            grad.scatter_pairwise(ex, y, &classes, &coefs);
        }

        let minibatch_elbo = elbo_sum / b as f64;
        if !minibatch_elbo.is_finite() {
            return Err(Error::Diverged {
                iteration: step.t(),
                detail: format!("minibatch objective estimate became {minibatch_elbo}"),
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
        local,
        records,
    })
}

/// Appends one objective value to the smoothing window and returns the mean
/// of the last (up to) [`SMOOTHING_WINDOW`] values.
pub(crate) fn push_smoothed(window: &mut VecDeque<f64>, value: f64) -> f64 {
    if window.len() == SMOOTHING_WINDOW {
        window.pop_front();
    }
    window.push_back(value);
    window.iter().sum::<f64>() / window.len() as f64
}

/// Ascends the model along the accumulated gradient with per-parameter
/// adaptive steps; with `l2 > 0` every weight additionally feels the ridge
/// pull `−l2·w` (biases are never regularized). Must be followed by
/// `step.end_iteration()`.
pub(crate) fn apply_global_step(
    model: &mut LinearModel,
    grad: &GradBuffer,
    step: &mut StepState,
    rho_base: f64,
    l2: f64,
) -> Result<()> {
    let bias_offset = grad.bias_offset;
    step.decay_s();
    if l2 > 0.0 {
        for idx in 0..bias_offset {
            let g = grad.value_at(idx) - l2 * model.weights[idx];
            let delta = step.step_at(idx, g, rho_base) * g;
            apply_delta(model, bias_offset, idx, g, delta, step.t())?;
        }
        for &idx in grad.touched() {
            if idx < bias_offset {
                continue;
            }
            let g = grad.value_at(idx);
            let delta = step.step_at(idx, g, rho_base) * g;
            apply_delta(model, bias_offset, idx, g, delta, step.t())?;
        }
    } else {
        for &idx in grad.touched() {
            let g = grad.value_at(idx);
            let delta = step.step_at(idx, g, rho_base) * g;
            apply_delta(model, bias_offset, idx, g, delta, step.t())?;
        }
    }
    Ok(())
}

#[inline]
fn apply_delta(
    model: &mut LinearModel,
    bias_offset: usize,
    idx: usize,
    g: f64,
    delta: f64,
    iteration: u64,
) -> Result<()> {
    if !delta.is_finite() {
        return Err(Error::Diverged {
            iteration,
            detail: format!("non-finite update {delta} for parameter {idx} (gradient {g})"),
        });
    }
    if delta != 0.0 {
        if idx < bias_offset {
            model.weights[idx] += delta;
        } else {
            model.biases[idx - bias_offset] += delta;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use approx::assert_relative_eq;

    fn tiny_dataset(k: usize, n: usize, d: usize, seed: u64) -> Dataset {
        synth_blobs(k, n, d, 0.5, seed).unwrap()
    }

    #[test]
    fn method_strings_round_trip() {
        for m in [
            Method::SoftmaxAr,
            Method::ProbitAr,
            Method::LogisticAr,
            Method::Ove,
            Method::Exact,
        ] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("softmax".parse::<Method>().is_err());
    }

    #[test]
    fn alpha_schedule_defaults() {
        let softmax = AlphaSchedule::for_method(Method::SoftmaxAr);
        assert_relative_eq!(softmax.at(1), 0.535_886_731_268_147_4, max_relative = 1e-12);
        let general = AlphaSchedule::for_method(Method::ProbitAr);
        assert_relative_eq!(general.at(1), 0.005_358_867_312_681_474, max_relative = 1e-12);
        let mut prev = f64::INFINITY;
        for t in 1..50 {
            let a = softmax.at(t);
            assert!(a < prev && a > 0.0);
            prev = a;
        }
    }

    #[test]
    fn step_sizes_match_hand_computed_values() {
        // Zero gradient: the accumulator stays at zero and the step is the
        // bare schedule.
        let mut state = StepState::new(2, 0.02, 0.9, 2000);
        let steps = state.step_sizes(&[0.0, 0.0]);
        assert_eq!(steps, vec![0.02, 0.02]);
        let steps2 = state.step_sizes(&[0.0, 0.0]);
        let ratio = steps2[0] / steps[0];
        assert_relative_eq!(ratio, 2f64.powf(STEP_EXPONENT), max_relative = 1e-15);

        // Unit gradient at t=1: s = 0.1, step = 0.02/(1+sqrt(0.1)).
        let mut state = StepState::new(1, 0.02, 0.9, 2000);
        let steps = state.step_sizes(&[1.0]);
        assert_relative_eq!(steps[0], 0.02 / (1.0 + 0.1f64.sqrt()), max_relative = 1e-15);
        assert_relative_eq!(steps[0], 0.015_194_938_532_959_156, max_relative = 1e-12);
    }

    #[test]
    fn step_decay_fires_at_period_boundary() {
        let mut state = StepState::new(1, 0.02, 0.5, 3);
        assert_eq!(state.step_sizes(&[0.0])[0], 0.02);
        state.step_sizes(&[0.0]);
        // The t=3 step still uses the undecayed base; decay applies after.
        let s3 = state.step_sizes(&[0.0])[0];
        assert_relative_eq!(s3, 0.02 * 3f64.powf(STEP_EXPONENT), max_relative = 1e-15);
        assert_eq!(state.rho0(), 0.01);
        let s4 = state.step_sizes(&[0.0])[0];
        assert_relative_eq!(s4, 0.01 * 4f64.powf(STEP_EXPONENT), max_relative = 1e-15);
        assert_eq!(state.t(), 4);
    }

    #[test]
    fn step_state_invariants_hold_under_random_gradients() {
        let mut state = StepState::new(3, 0.02, 0.9, 5);
        let mut prev_t = 0;
        for i in 0..50u64 {
            let g = [(i as f64).sin(), -(i as f64), 0.5];
            state.step_sizes(&g);
            assert!(state.t() > prev_t);
            prev_t = state.t();
            assert!(state.s.iter().all(|&s| s >= 0.0));
        }
    }

    #[test]
    fn grad_buffer_accumulates_and_resets() {
        let mut g = GradBuffer::new(3, 2);
        g.reset();
        let ex = SparseExample {
            indices: vec![1],
            values: vec![2.0],
            label: 0,
        };
        g.add_class(&ex, 2, 0.5);
        g.add_class(&ex, 2, 0.25);
        let dense = g.dense();
        assert_eq!(dense[2 * 2 + 1], 1.5);
        assert_eq!(dense[6 + 2], 0.75);
        assert_eq!(g.touched().len(), 2);
        g.reset();
        assert!(g.dense().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noop_config_returns_initialized_model() {
        let data = tiny_dataset(4, 20, 3, 7);
        let mut cfg = TrainConfig::new(Method::SoftmaxAr, 20, 3, 1, 99);
        cfg.rho0 = 0.0;
        cfg.alpha = AlphaSchedule { scale: 0.0, power: 0.9 };
        let out = train(&data, &cfg).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let expected = LinearModel::init_random(4, 3, 0.1, 0.001, &mut rng).unwrap();
        assert_eq!(out.model.weights(), expected.weights());
        assert_eq!(out.model.biases(), expected.biases());
        assert_eq!(out.local.etas().unwrap(), vec![4.0; 20].as_slice());
        assert_eq!(out.records.len(), 1);
    }

    #[test]
    fn full_alpha_sets_eta_to_eta_star() {
        let data = tiny_dataset(3, 6, 2, 3);
        let mut cfg = TrainConfig::new(Method::SoftmaxAr, 6, 2, 1, 5);
        cfg.rho0 = 0.0;
        cfg.alpha = AlphaSchedule { scale: 1.0, power: 0.0 };
        let out = train(&data, &cfg).unwrap();
        let etas = out.local.etas().unwrap();
        let mut psi = Vec::new();
        for (n, ex) in data.examples.iter().enumerate() {
            out.model.psi_all(ex, &mut psi);
            let row = crate::bounds::UtilityRow::new(&psi, ex.label as usize).unwrap();
            let eta_star = crate::bounds::softmax_eta_star(&row);
            assert_relative_eq!(etas[n], eta_star, max_relative = 1e-12);
        }
    }

    #[test]
    fn half_alpha_blends_eta() {
        let data = tiny_dataset(3, 4, 2, 11);
        let mut cfg = TrainConfig::new(Method::SoftmaxAr, 4, 2, 1, 5);
        cfg.rho0 = 0.0;
        cfg.alpha = AlphaSchedule { scale: 0.5, power: 0.0 };
        let out = train(&data, &cfg).unwrap();
        let etas = out.local.etas().unwrap();
        let mut psi = Vec::new();
        for (n, ex) in data.examples.iter().enumerate() {
            out.model.psi_all(ex, &mut psi);
            let row = crate::bounds::UtilityRow::new(&psi, ex.label as usize).unwrap();
            let expected = 0.5 * 3.0 + 0.5 * crate::bounds::softmax_eta_star(&row);
            assert_relative_eq!(etas[n], expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_alpha_leaves_general_store_unchanged() {
        let data = tiny_dataset(3, 5, 2, 13);
        let mut cfg = TrainConfig::new(Method::ProbitAr, 5, 2, 2, 5);
        cfg.alpha = AlphaSchedule { scale: 0.0, power: 0.9 };
        let out = train(&data, &cfg).unwrap();
        let nu0 = LocScale::from_scale(0.0, 1.0).unwrap();
        assert!(out.local.nus().unwrap().iter().all(|nu| *nu == nu0));
        // The model still moved: the M step is independent of alpha.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let init = LinearModel::init_random(3, 2, 0.1, 0.001, &mut rng).unwrap();
        assert_ne!(out.model.biases(), init.biases());
    }

    #[test]
    fn same_seed_reproduces_run_exactly() {
        let data = tiny_dataset(5, 30, 4, 21);
        let cfg = TrainConfig::new(Method::LogisticAr, 10, 3, 25, 42);
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.model.weights(), b.model.weights());
        assert_eq!(a.model.biases(), b.model.biases());
        assert_eq!(a.local, b.local);
        let elbos_a: Vec<f64> = a.records.iter().map(|r| r.minibatch_elbo).collect();
        let elbos_b: Vec<f64> = b.records.iter().map(|r| r.minibatch_elbo).collect();
        assert_eq!(elbos_a, elbos_b);

        let mut cfg2 = cfg.clone();
        cfg2.seed = 43;
        let c = train(&data, &cfg2).unwrap();
        assert_ne!(a.model.weights(), c.model.weights());
    }

    #[test]
    fn callback_sees_every_record_in_order() {
        let data = tiny_dataset(3, 12, 2, 2);
        let cfg = TrainConfig::new(Method::Ove, 4, 2, 7, 1);
        let mut seen = Vec::new();
        let out = train_with_callback(&data, &cfg, |r| seen.push(r.iteration)).unwrap();
        assert_eq!(seen, (1..=7).collect::<Vec<u64>>());
        assert_eq!(out.records.len(), 7);
        for (i, r) in out.records.iter().enumerate() {
            assert_eq!(r.iteration as usize, i + 1);
            let lo = i.saturating_sub(SMOOTHING_WINDOW - 1);
            let expect: f64 = out.records[lo..=i]
                .iter()
                .map(|r| r.minibatch_elbo)
                .sum::<f64>()
                / (i - lo + 1) as f64;
            assert_relative_eq!(r.smoothed_elbo, expect, max_relative = 1e-12);
        }
        // Wall clock is nondecreasing.
        for w in out.records.windows(2) {
            assert!(w[1].wall_clock_s >= w[0].wall_clock_s);
        }
    }

    #[test]
    fn divergence_is_reported_with_iteration() {
        let data = tiny_dataset(4, 16, 3, 8);
        let mut cfg = TrainConfig::new(Method::SoftmaxAr, 16, 3, 50, 3);
        cfg.rho0 = 1e300;
        match train(&data, &cfg) {
            Err(Error::Diverged { iteration, .. }) => assert!(iteration >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_rejects_bad_sizes() {
        let data = tiny_dataset(3, 10, 2, 1);
        let cases = [
            TrainConfig::new(Method::SoftmaxAr, 0, 2, 10, 1),
            TrainConfig::new(Method::SoftmaxAr, 11, 2, 10, 1),
            TrainConfig::new(Method::SoftmaxAr, 5, 0, 10, 1),
            TrainConfig::new(Method::SoftmaxAr, 5, 3, 10, 1),
            TrainConfig::new(Method::SoftmaxAr, 5, 2, 0, 1),
        ];
        for cfg in cases {
            assert!(cfg.validate(&data).is_err(), "{cfg:?} should be rejected");
        }
        let mut cfg = TrainConfig::new(Method::SoftmaxAr, 5, 2, 10, 1);
        assert!(cfg.validate(&data).is_ok());
        cfg.l2 = -1.0;
        assert!(cfg.validate(&data).is_err());
        cfg.l2 = 0.0;
        cfg.alpha.scale = 1.5;
        assert!(cfg.validate(&data).is_err());
    }

    #[test]
    fn global_gradient_validates_inputs() {
        let data = tiny_dataset(3, 6, 2, 4);
        let model = LinearModel::zeros(3, 2).unwrap();
        let sample = ClassSample::new(vec![1], 3, 0).unwrap();
        let etas = LocalStore::SoftmaxEta(vec![3.0; 6]);
        assert!(global_gradient(&model, &data, &[], &[], &etas, None, Method::SoftmaxAr).is_err());
        assert!(global_gradient(
            &model,
            &data,
            &[0],
            &[sample.clone()],
            &LocalStore::None,
            None,
            Method::SoftmaxAr
        )
        .is_err());
        assert!(global_gradient(
            &model,
            &data,
            &[0],
            &[sample.clone()],
            &LocalStore::None,
            None,
            Method::ProbitAr
        )
        .is_err());
        assert!(global_gradient(
            &model,
            &data,
            &[0],
            &[sample.clone()],
            &LocalStore::None,
            None,
            Method::Exact
        )
        .is_err());
        let ok = global_gradient(
            &model,
            &data,
            &[0],
            &[sample],
            &LocalStore::None,
            None,
            Method::Ove,
        )
        .unwrap();
        assert_eq!(ok.len(), model.num_params());
    }
}
