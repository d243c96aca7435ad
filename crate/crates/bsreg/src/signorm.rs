//! Error function, the sinh-normal distribution, and the
//! Birnbaum-Saunders lifetime law it generates on the log scale.
//!
//! The error function is computed from the incomplete gamma pair
//! P(1/2, x²), Q(1/2, x²): a non-alternating power series below
//! x = sqrt(1.5) and a continued fraction above it. The continued
//! fraction yields the scaled complement erfcx(x) = exp(x²) erfc(x)
//! directly, without forming exp(x²), so the shape quantity psi1 stays
//! finite for arbitrarily small alpha where a literal evaluation of
//! exp(2/alpha²) erfc(sqrt(2)/alpha) would overflow long before the
//! product decays.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

const INV_SQRT_PI: f64 = 0.5641895835477562869480794515607725858;
const SQRT_2PI: f64 = 2.5066282746310005024157652848110452530;
/// Series/continued-fraction crossover at x = sqrt(1.5).
const ERF_SWITCH: f64 = 1.2247448713915890490986420373529456959;
/// Beyond this the two-term asymptotic tail of erfcx is exact to f64.
const ERFCX_ASYMPTOTIC: f64 = 5e7;

#[derive(Debug, Error, PartialEq)]
pub enum SignormError {
    #[error("erfcx is only defined here for x >= 0, got {0}")]
    NegativeArgument(f64),
    #[error("shape parameter alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("scale parameter must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("location parameter must be finite, got {0}")]
    InvalidLocation(f64),
    #[error("lifetime argument must be positive, got {0}")]
    NonpositiveLifetime(f64),
    #[error("probability must lie strictly in (0, 1), got {0}")]
    InvalidProbability(f64),
}

/// Power series for erf on |x| < sqrt(1.5):
/// erf(x) = (2/sqrt(pi)) x exp(-x²) Σ_{n≥0} (2x²)ⁿ / (1·3···(2n+1)).
/// Every term is positive, so there is no cancellation.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut odd = 1.0;
    loop {
        odd += 2.0;
        term *= 2.0 * x2 / odd;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    2.0 * INV_SQRT_PI * x * (-x2).exp() * sum
}

/// Modified Lentz evaluation of the continued fraction for
/// Q(1/2, x²). Returns h with erfc(x) = x exp(-x²) h / sqrt(pi)
/// and erfcx(x) = x h / sqrt(pi), valid for x >= sqrt(1.5).
fn erfc_cf_h(x: f64) -> f64 {
    const FPMIN: f64 = 1e-290;
    let chi = x * x;
    let a = 0.5;
    let mut b = chi + 1.0 - a;
    let mut c = 1.0 / FPMIN;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..400 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = b + an / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Error function.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x.is_infinite() {
        return x.signum();
    }
    let ax = x.abs();
    if ax < ERF_SWITCH {
        erf_series(x)
    } else {
        let tail = ax * (-ax * ax).exp() * erfc_cf_h(ax) * INV_SQRT_PI;
        if x > 0.0 {
            1.0 - tail
        } else {
            tail - 1.0
        }
    }
}

/// Complementary error function 1 - erf(x), accurate in the right tail.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x.is_infinite() {
        return 1.0 - x.signum();
    }
    if x >= ERF_SWITCH {
        x * (-x * x).exp() * erfc_cf_h(x) * INV_SQRT_PI
    } else if x <= -ERF_SWITCH {
        2.0 - (-x) * (-x * x).exp() * erfc_cf_h(-x) * INV_SQRT_PI
    } else {
        1.0 - erf_series(x)
    }
}

/// Scaled complementary error function exp(x²) erfc(x) for x >= 0.
/// Decays like 1/(x sqrt(pi)) instead of overflowing.
pub fn erfcx(x: f64) -> Result<f64, SignormError> {
    if !(x >= 0.0) {
        return Err(SignormError::NegativeArgument(x));
    }
    if x < ERF_SWITCH {
        Ok((x * x).exp() * (1.0 - erf_series(x)))
    } else if x > ERFCX_ASYMPTOTIC {
        // two asymptotic terms; the truncation error is O(x⁻⁵) < 1e-38 here
        Ok(INV_SQRT_PI / x * (1.0 - 0.5 / (x * x)))
    } else {
        Ok(x * erfc_cf_h(x) * INV_SQRT_PI)
    }
}

/// Shape quantity entering the Fisher information of the regression
/// coefficients:
/// psi1(alpha) = 2 + 4/alpha² - (sqrt(2 pi)/alpha) erfcx(sqrt(2)/alpha).
///
/// Limits: psi1 -> 1 + 4/alpha² as alpha -> 0 and psi1 -> 2 as
/// alpha -> infinity (the correction term is O(1/alpha)).
pub fn psi1(alpha: f64) -> Result<f64, SignormError> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(SignormError::InvalidAlpha(alpha));
    }
    let t = std::f64::consts::SQRT_2 / alpha;
    Ok(2.0 + 4.0 / (alpha * alpha) - SQRT_2PI / alpha * erfcx(t)?)
}

/// Standard normal cdf, evaluated through erfc so that both tails keep
/// full relative accuracy: Phi(x) = erfc(-x/sqrt(2))/2, which equals
/// (1 + erf(x/sqrt(2)))/2.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Standard normal quantile by bisection followed by Newton polish,
/// accurate to 1e-12 in x.
pub fn norm_quantile(p: f64) -> Result<f64, SignormError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(SignormError::InvalidProbability(p));
    }
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    let mut x = 0.0;
    for _ in 0..60 {
        x = 0.5 * (lo + hi);
        if norm_cdf(x) < p {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo < 1e-3 {
            break;
        }
    }
    for _ in 0..60 {
        let step = (norm_cdf(x) - p) / norm_pdf(x);
        x -= step;
        if step.abs() <= 1e-13 * x.abs().max(1.0) {
            break;
        }
    }
    Ok(x)
}

/// Sinh-normal law SN(alpha, mu, sigma): Y has this distribution when
/// (2/alpha) sinh((Y - mu)/sigma) is standard normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinhNormalParams {
    alpha: f64,
    mu: f64,
    sigma: f64,
}

impl SinhNormalParams {
    pub fn new(alpha: f64, mu: f64, sigma: f64) -> Result<Self, SignormError> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(SignormError::InvalidAlpha(alpha));
        }
        if !mu.is_finite() {
            return Err(SignormError::InvalidLocation(mu));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(SignormError::InvalidScale(sigma));
        }
        Ok(Self { alpha, mu, sigma })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Density
    /// (2/(alpha sigma sqrt(2 pi))) cosh(z) exp(-(2/alpha²) sinh²(z))
    /// with z = (y - mu)/sigma.
    pub fn pdf(&self, y: f64) -> f64 {
        let z = (y - self.mu) / self.sigma;
        let s = z.sinh();
        2.0 / (self.alpha * self.sigma * SQRT_2PI)
            * z.cosh()
            * (-2.0 / (self.alpha * self.alpha) * s * s).exp()
    }

    /// Distribution function Phi((2/alpha) sinh((y - mu)/sigma)).
    pub fn cdf(&self, y: f64) -> f64 {
        let z = (y - self.mu) / self.sigma;
        norm_cdf(2.0 / self.alpha * z.sinh())
    }

    /// Draw n variates through the inverse monotone map
    /// Y = mu + sigma asinh(alpha Z / 2) with Z standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                self.mu + self.sigma * (0.5 * self.alpha * z).asinh()
            })
            .collect()
    }
}

/// Birnbaum-Saunders lifetime law BS(alpha, eta); eta is the median.
/// If T ~ BS(alpha, eta) then log T ~ SN(alpha, log eta, 2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsParams {
    alpha: f64,
    eta: f64,
}

impl BsParams {
    pub fn new(alpha: f64, eta: f64) -> Result<Self, SignormError> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(SignormError::InvalidAlpha(alpha));
        }
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(SignormError::InvalidScale(eta));
        }
        Ok(Self { alpha, eta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Distribution function Phi((sqrt(t/eta) - sqrt(eta/t))/alpha)
    /// for t > 0.
    pub fn cdf(&self, t: f64) -> Result<f64, SignormError> {
        if !(t > 0.0) {
            return Err(SignormError::NonpositiveLifetime(t));
        }
        let r = (t / self.eta).sqrt();
        Ok(norm_cdf((r - 1.0 / r) / self.alpha))
    }
}

/// Two-sided Kolmogorov-Smirnov statistic sup |F_n(x) − F(x)| of a
/// sample against a reference cdf; sorts the sample in place. Handy for
/// checking standardized residuals against the standard normal.
pub fn ks_statistic<F: Fn(f64) -> f64>(sample: &mut [f64], cdf: F) -> f64 {
    assert!(!sample.is_empty(), "empty sample");
    sample.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN sample"));
    let n = sample.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sample.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n);
        d = d.max((i + 1) as f64 / n - f);
    }
    d
}
