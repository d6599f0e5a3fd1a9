//! Noise families and location–scale variational distributions.
//!
//! Each categorical likelihood in this crate is induced by an additive noise
//! family: Gumbel noise gives softmax, Gaussian noise gives multinomial
//! probit, and logistic noise gives multinomial logistic. Everything the
//! bounds and trainers need from a family is exposed here as four scalar
//! functions of the standardized noise value — `log_pdf`, `log_cdf`, and the
//! derivatives of both — plus standard sampling and a reparameterized
//! location–scale distribution used for the per-observation posteriors.
//!
//! All four scalar functions are finite for any finite input. The hard case
//! is the Gaussian left tail, where the CDF underflows long before the
//! quantities of interest do; below the switch point the implementation
//! evaluates the Mills ratio by continued fraction instead of calling the
//! error function.

use rand::distr::Open01;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use libm::erfc;

use crate::error::{Error, Result};

pub(crate) const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_7;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Where the Gaussian `log_cdf` switches from the error function to the
/// Mills-ratio continued fraction. At −8 both branches agree to ~1e-14
/// relative, and the continued fraction is exact to double precision for
/// every input left of it.
const GAUSS_TAIL_SWITCH: f64 = -8.0;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic function `1/(1 + e^{-x})`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(ln σ(m), σ(-m))` — the one-vs-each bound term and its negated slope —
/// sharing a single exponential. Bit-identical to `-softplus(-m)` and
/// `sigmoid(-m)`.
pub(crate) fn ove_terms(m: f64) -> (f64, f64) {
    if m >= 0.0 {
        let e = (-m).exp();
        (-e.ln_1p(), e / (1.0 + e))
    } else {
        let e = m.exp();
        (m - e.ln_1p(), 1.0 / (1.0 + e))
    }
}

/// Denominator of the Gaussian Mills ratio `R(x) = Φ(-x)/φ(x)` via the
/// Laplace continued fraction `1/R(x) = x + 1/(x + 2/(x + 3/(x + ...)))`.
/// Accurate to full double precision for `x ≥ 8` (32 terms are already far
/// more than needed there).
fn gauss_mills_denom(x: f64) -> f64 {
    let mut d = x;
    for k in (1..=32u32).rev() {
        d = x + f64::from(k) / d;
    }
    d
}

fn check_not_nan(what: &'static str, value: f64) -> Result<()> {
    if value.is_nan() {
        Err(Error::NonFinite { what, value })
    } else {
        Ok(())
    }
}

/// The additive noise family defining the categorical likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    /// Standard Gumbel; induces the softmax likelihood.
    Gumbel,
    /// Standard Gaussian; induces multinomial probit.
    Gaussian,
    /// Standard logistic; induces multinomial logistic.
    Logistic,
}

impl NoiseKind {
    /// Log density of the standard noise distribution.
    pub fn log_pdf(self, eps: f64) -> Result<f64> {
        check_not_nan("eps", eps)?;
        Ok(self.log_pdf_raw(eps))
    }

    /// Log CDF of the standard noise distribution.
    pub fn log_cdf(self, eps: f64) -> Result<f64> {
        check_not_nan("eps", eps)?;
        Ok(self.log_cdf_raw(eps))
    }

    /// Derivative of `log_cdf`, i.e. the hazard-like ratio `pdf/cdf`.
    /// Always finite and nonnegative; deep in the left tail it grows like
    /// the tail rate instead of overflowing or returning NaN.
    pub fn dlog_cdf(self, eps: f64) -> Result<f64> {
        check_not_nan("eps", eps)?;
        Ok(self.dlog_cdf_raw(eps))
    }

    /// Derivative of `log_pdf`.
    pub fn dlog_pdf(self, eps: f64) -> Result<f64> {
        check_not_nan("eps", eps)?;
        Ok(self.dlog_pdf_raw(eps))
    }

    pub(crate) fn log_pdf_raw(self, eps: f64) -> f64 {
        match self {
            NoiseKind::Gumbel => -eps - (-eps).exp(),
            NoiseKind::Gaussian => -0.5 * eps * eps - LOG_SQRT_2PI,
            NoiseKind::Logistic => -softplus(eps) - softplus(-eps),
        }
    }

    pub(crate) fn log_cdf_raw(self, eps: f64) -> f64 {
        match self {
            NoiseKind::Gumbel => -(-eps).exp(),
            NoiseKind::Gaussian => {
                if eps >= 0.0 {
                    // ln(1 - Φ(-eps)) via ln_1p keeps full relative precision
                    // as Φ approaches 1.
                    (-0.5 * erfc(eps / SQRT_2)).ln_1p()
                } else if eps >= GAUSS_TAIL_SWITCH {
                    (0.5 * erfc(-eps / SQRT_2)).ln()
                } else {
                    // ln Φ(eps) = ln φ(eps) - ln(1/R(-eps))
                    self.log_pdf_raw(eps) - gauss_mills_denom(-eps).ln()
                }
            }
            NoiseKind::Logistic => -softplus(-eps),
        }
    }

    pub(crate) fn dlog_cdf_raw(self, eps: f64) -> f64 {
        let v = match self {
            NoiseKind::Gumbel => (-eps).exp(),
            NoiseKind::Gaussian => {
                if eps >= GAUSS_TAIL_SWITCH {
                    (self.log_pdf_raw(eps) - self.log_cdf_raw(eps)).exp()
                } else {
                    gauss_mills_denom(-eps)
                }
            }
            NoiseKind::Logistic => sigmoid(-eps),
        };
        if v.is_finite() {
            v
        } else {
            f64::MAX
        }
    }

    pub(crate) fn dlog_pdf_raw(self, eps: f64) -> f64 {
        let v = match self {
            NoiseKind::Gumbel => -1.0 + (-eps).exp(),
            NoiseKind::Gaussian => -eps,
            NoiseKind::Logistic => 1.0 - 2.0 * sigmoid(eps),
        };
        if v.is_finite() {
            v
        } else {
            f64::MAX
        }
    }

    /// `(log_cdf, dlog_cdf)` in one call, sharing the expensive part
    /// (exponential, error function, or continued fraction) between the two.
    /// Bit-identical to calling the two functions separately.
    pub(crate) fn log_cdf_with_grad(self, eps: f64) -> (f64, f64) {
        let (lc, d) = match self {
            NoiseKind::Gumbel => {
                let e = (-eps).exp();
                (-e, e)
            }
            NoiseKind::Gaussian => {
                if eps < GAUSS_TAIL_SWITCH {
                    let den = gauss_mills_denom(-eps);
                    (self.log_pdf_raw(eps) - den.ln(), den)
                } else {
                    let lc = if eps >= 0.0 {
                        (-0.5 * erfc(eps / SQRT_2)).ln_1p()
                    } else {
                        (0.5 * erfc(-eps / SQRT_2)).ln()
                    };
                    (lc, (self.log_pdf_raw(eps) - lc).exp())
                }
            }
            NoiseKind::Logistic => {
                if eps >= 0.0 {
                    let e = (-eps).exp();
                    (-e.ln_1p(), e / (1.0 + e))
                } else {
                    let e = eps.exp();
                    (eps - e.ln_1p(), 1.0 / (1.0 + e))
                }
            }
        };
        (lc, if d.is_finite() { d } else { f64::MAX })
    }

    /// Draws from the standard (location 0, scale 1) noise distribution.
    pub fn standard_sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            NoiseKind::Gumbel => {
                let u: f64 = Open01.sample(rng);
                -(-u.ln()).ln()
            }
            NoiseKind::Gaussian => StandardNormal.sample(rng),
            NoiseKind::Logistic => {
                let u: f64 = Open01.sample(rng);
                (u / (1.0 - u)).ln()
            }
        }
    }

    /// Differential entropy of the standard distribution, where defined for
    /// use as a variational family.
    pub(crate) fn standard_entropy(self) -> Result<f64> {
        match self {
            NoiseKind::Gaussian => Ok(0.5 + LOG_SQRT_2PI),
            NoiseKind::Logistic => Ok(2.0),
            NoiseKind::Gumbel => Err(Error::Unsupported {
                what: "variational entropy",
                kind: self,
            }),
        }
    }
}

/// Location–scale variational distribution `q(ε) = φ((ε - μ)/s) / s`.
///
/// The scale is kept positive by parameterizing it as `s = softplus(γ)` and
/// optimizing `γ` freely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocScale {
    pub mu: f64,
    pub gamma: f64,
}

impl LocScale {
    pub fn new(mu: f64, gamma: f64) -> Self {
        Self { mu, gamma }
    }

    /// Builds from an explicit positive scale by inverting the softplus.
    pub fn from_scale(mu: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::NonPositive {
                what: "scale",
                value: scale,
            });
        }
        let gamma = if scale < 1.0 {
            scale.exp_m1().ln()
        } else {
            scale + (-(-scale).exp()).ln_1p()
        };
        Ok(Self { mu, gamma })
    }

    pub fn scale(&self) -> f64 {
        softplus(self.gamma)
    }

    /// Reparameterization transform `T(u; ν) = μ + s·u`.
    pub fn reparam(&self, u: f64) -> f64 {
        self.mu + self.scale() * u
    }

    /// Draws `ε ~ q` by transforming a standard draw.
    pub fn sample<R: Rng + ?Sized>(&self, kind: NoiseKind, rng: &mut R) -> f64 {
        self.reparam(kind.standard_sample(rng))
    }

    /// `ln q(ε)` under this location–scale distribution.
    pub fn log_density(&self, kind: NoiseKind, eps: f64) -> Result<f64> {
        check_not_nan("eps", eps)?;
        let s = self.scale();
        Ok(kind.log_pdf_raw((eps - self.mu) / s) - s.ln())
    }

    /// Entropy of `q` and its gradient with respect to `(μ, s)`.
    ///
    /// For any location–scale family the entropy is `H₀ + ln s`, so the
    /// gradient is `(0, 1/s)`. Defined for the Gaussian and logistic
    /// families only.
    pub fn entropy_and_grad(&self, kind: NoiseKind) -> Result<(f64, [f64; 2])> {
        let s = self.scale();
        let h0 = kind.standard_entropy()?;
        Ok((h0 + s.ln(), [0.0, 1.0 / s]))
    }
}
