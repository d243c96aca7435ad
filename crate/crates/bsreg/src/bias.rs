//! Second-order bias corrections (Cox & Snell 1968) for the maximum
//! likelihood estimates. The general-purpose route assembles the bias
//! from the joint cumulants of log-likelihood derivatives; the closed
//! forms below collapse that sum into least-squares solves and are what
//! the public correction entry point uses.

use crate::estimate::FitResult;
use crate::linalg::{self, LinalgError};
use crate::model::DerivativeBundle;
use crate::signorm::psi1;
use ndarray::{Array1, Array2, Array3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BiasError {
    #[error("fit did not converge; refusing to bias-correct")]
    NotConverged,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("second derivative at ({r},{s}) is nonzero for observation {row}; the mean is not of the partially nonlinear form")]
    NotPartiallyNonlinear { row: usize, r: usize, s: usize },
    #[error("coefficient {index} multiplies the nonlinear term and is zero")]
    EtaZero { index: usize },
    #[error("partially nonlinear form needs at least two parameters")]
    TooFewParams,
}

/// Joint cumulants of log-likelihood derivatives at (β, α), for the mean
/// derivatives in `bundle`. κ_rs is E[∂²ℓ/∂β_r∂β_s] and so on; the
/// parenthesized superscript denotes a parameter derivative of a
/// cumulant, e.g. κ_rs^(t) = ∂κ_rs/∂β_t.
///
/// Everything not stored here is zero: κ_rα, κ_rαα, κ_rα^(s), κ_rα^(α),
/// and ∂κ_αα/∂β_t all vanish identically, and κ_rs^(α), while nonzero,
/// only ever multiplies the β–α block of the inverse information, which
/// is exactly zero.
#[derive(Debug, Clone)]
pub struct CumulantSet {
    pub psi1: f64,
    /// κ_rs = −(ψ₁/4)·Σᵢ dᵢr dᵢs
    pub beta_beta: Array2<f64>,
    /// κ_rst = −(ψ₁/4)·Σᵢ (gᵢrs dᵢt + gᵢrt dᵢs + gᵢst dᵢr)
    pub beta_beta_beta: Array3<f64>,
    /// κ_rs^(t) = −(ψ₁/4)·Σᵢ (gᵢrt dᵢs + gᵢst dᵢr)
    pub d_beta_beta: Array3<f64>,
    /// κ_rsα = ((2+α²)/α³)·Σᵢ dᵢr dᵢs
    pub beta_beta_alpha: Array2<f64>,
    /// κ_αα = −2n/α²
    pub alpha_alpha: f64,
    /// κ_ααα = 10n/α³
    pub alpha_alpha_alpha: f64,
    /// κ_αα^(α) = 4n/α³
    pub d_alpha_alpha: f64,
}

pub fn cumulants(alpha: f64, bundle: &DerivativeBundle) -> CumulantSet {
    assert!(alpha > 0.0, "alpha must be positive");
    let psi = psi1(alpha).expect("alpha validated positive");
    let (n, p) = (bundle.n(), bundle.p());
    let nf = n as f64;
    let a2 = alpha * alpha;
    let a3 = a2 * alpha;

    let dtd = bundle.d.t().dot(&bundle.d);
    let beta_beta = &dtd * (-psi / 4.0);
    let beta_beta_alpha = &dtd * ((2.0 + a2) / a3);

    let mut beta_beta_beta = Array3::<f64>::zeros((p, p, p));
    let mut d_beta_beta = Array3::<f64>::zeros((p, p, p));
    for i in 0..n {
        for r in 0..p {
            for s in 0..p {
                let g_rs = bundle.g[[i, s * p + r]];
                for t in 0..p {
                    let g_rt = bundle.g[[i, t * p + r]];
                    let g_st = bundle.g[[i, t * p + s]];
                    let (d_r, d_s, d_t) =
                        (bundle.d[[i, r]], bundle.d[[i, s]], bundle.d[[i, t]]);
                    beta_beta_beta[[r, s, t]] +=
                        -psi / 4.0 * (g_rs * d_t + g_rt * d_s + g_st * d_r);
                    d_beta_beta[[r, s, t]] += -psi / 4.0 * (g_rt * d_s + g_st * d_r);
                }
            }
        }
    }

    CumulantSet {
        psi1: psi,
        beta_beta,
        beta_beta_beta,
        d_beta_beta,
        beta_beta_alpha,
        alpha_alpha: -2.0 * nf / a2,
        alpha_alpha_alpha: 10.0 * nf / a3,
        d_alpha_alpha: 4.0 * nf / a3,
    }
}

impl CumulantSet {
    /// κ_uvw over the full parameter vector θ = (β…, α), index p = α.
    fn third(&self, p: usize, u: usize, v: usize, w: usize) -> f64 {
        let alphas = [u, v, w].iter().filter(|&&i| i == p).count();
        match alphas {
            0 => self.beta_beta_beta[[u, v, w]],
            1 => {
                let mut b = [u, v, w].into_iter().filter(|&i| i != p);
                self.beta_beta_alpha[[b.next().unwrap(), b.next().unwrap()]]
            }
            2 => 0.0,
            _ => self.alpha_alpha_alpha,
        }
    }

    /// κ_uv^(w) over the full parameter vector; the derivative index is
    /// the last one and does not commute with the first two.
    fn third_deriv(&self, p: usize, u: usize, v: usize, w: usize) -> f64 {
        match (u == p, v == p, w == p) {
            (false, false, false) => self.d_beta_beta[[u, v, w]],
            (true, true, true) => self.d_alpha_alpha,
            // κ_rs^(α) multiplies κ^{sα} = 0; everything else vanishes
            _ => 0.0,
        }
    }
}

/// O(p⁴) reference evaluation of the Cox-Snell bias
/// B(θ̂_a) = Σ_{r,s,t} κ^{ar} κ^{st} (κ_rs^(t) − ½κ_rst)
/// over the full θ = (β…, α), using the explicit inverse of the
/// expected information. Kept as the comparison point for the closed
/// forms; not meant for production sizes.
pub fn coxsnell_oracle(alpha: f64, bundle: &DerivativeBundle) -> Result<Array1<f64>, BiasError> {
    let cs = cumulants(alpha, bundle);
    let p = bundle.p();
    let q = p + 1;

    let mut info = Array2::<f64>::zeros((q, q));
    for r in 0..p {
        for s in 0..p {
            info[[r, s]] = -cs.beta_beta[[r, s]];
        }
    }
    info[[p, p]] = -cs.alpha_alpha;
    let kinv = linalg::spd_inverse(&info)?;

    let mut bias = Array1::<f64>::zeros(q);
    for a in 0..q {
        let mut acc = 0.0;
        for r in 0..q {
            if kinv[[a, r]] == 0.0 {
                continue;
            }
            for s in 0..q {
                for t in 0..q {
                    let weight = kinv[[a, r]] * kinv[[s, t]];
                    if weight == 0.0 {
                        continue;
                    }
                    acc += weight * (cs.third_deriv(p, r, s, t) - 0.5 * cs.third(p, r, s, t));
                }
            }
        }
        bias[a] = acc;
    }
    Ok(bias)
}

/// Closed-form B(β̂) = (DᵀD)⁻¹Dᵀd with dᵢ = −(2/ψ₁)·tr(Mᵢ(DᵀD)⁻¹),
/// i.e. the least-squares regression of d on the columns of D. Exactly
/// zero whenever the mean is affine in β (all Mᵢ = 0).
pub fn bias_beta(alpha: f64, bundle: &DerivativeBundle) -> Result<Array1<f64>, BiasError> {
    assert!(alpha > 0.0, "alpha must be positive");
    let psi = psi1(alpha).expect("alpha validated positive");
    let p = bundle.p();
    let dtd = bundle.d.t().dot(&bundle.d);
    let c = linalg::spd_inverse(&dtd)?;
    // tr(Mᵢ C) is row i of G dotted with vec(C), both laid out column-major
    let mut vec_c = Array1::<f64>::zeros(p * p);
    for s in 0..p {
        for r in 0..p {
            vec_c[s * p + r] = c[[r, s]];
        }
    }
    let d_vec = bundle.g.dot(&vec_c) * (-2.0 / psi);
    Ok(linalg::lstsq(&bundle.d, &d_vec)?)
}

/// Closed-form B(α̂) = −(1/n)·(p(2+α²)/(αψ₁(α)) + α/4). Negative for
/// every p ≥ 0, n ≥ 1, α > 0, so the corrected α̃ always exceeds α̂.
pub fn bias_alpha(p: usize, n: usize, alpha: f64) -> f64 {
    assert!(alpha > 0.0, "alpha must be positive");
    assert!(n > 0, "n must be positive");
    let psi = psi1(alpha).expect("alpha validated positive");
    let a2 = alpha * alpha;
    -(p as f64 * (2.0 + a2) / (alpha * psi) + alpha / 4.0) / n as f64
}

/// B(μ̂ᵢ) = dᵢᵀB(β̂) + ½·tr(Mᵢ K_β⁻¹), the second-order bias of the
/// fitted mean at each design point.
pub fn bias_mu(alpha: f64, bundle: &DerivativeBundle) -> Result<Array1<f64>, BiasError> {
    let psi = psi1(alpha).expect("alpha validated positive");
    let p = bundle.p();
    let b_beta = bias_beta(alpha, bundle)?;
    let dtd = bundle.d.t().dot(&bundle.d);
    let c = linalg::spd_inverse(&dtd)?;
    let mut vec_kinv = Array1::<f64>::zeros(p * p);
    for s in 0..p {
        for r in 0..p {
            vec_kinv[s * p + r] = 4.0 / psi * c[[r, s]];
        }
    }
    let trace_term = bundle.g.dot(&vec_kinv) * 0.5;
    Ok(bundle.d.dot(&b_beta) + trace_term)
}

/// Var(μ̂ᵢ) = dᵢᵀ K_β⁻¹ dᵢ, the first-order variance of the fitted mean.
pub fn var_mu(alpha: f64, bundle: &DerivativeBundle) -> Result<Array1<f64>, BiasError> {
    let psi = psi1(alpha).expect("alpha validated positive");
    let dtd = bundle.d.t().dot(&bundle.d);
    let c = linalg::spd_inverse(&dtd)?;
    let dk = bundle.d.dot(&c);
    let n = bundle.n();
    let mut out = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..bundle.p() {
            acc += dk[[i, j]] * bundle.d[[i, j]];
        }
        out[i] = 4.0 / psi * acc;
    }
    Ok(out)
}

/// Single-parameter specialization: with first derivatives dᵢ and second
/// derivatives gᵢ of the mean, B(β̂) = −(2/ψ₁)·κ₂/κ₁² where κ₁ = Σdᵢ²
/// and κ₂ = Σdᵢgᵢ.
pub fn bias_single_param(alpha: f64, d: &Array1<f64>, g: &Array1<f64>) -> f64 {
    assert!(alpha > 0.0, "alpha must be positive");
    assert_eq!(d.len(), g.len());
    let psi = psi1(alpha).expect("alpha validated positive");
    let k1: f64 = d.iter().map(|v| v * v).sum();
    let k2: f64 = d.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
    -2.0 / psi * k2 / (k1 * k1)
}

/// Bias for means of the partially nonlinear form
/// fᵢ = λᵀzᵢ + η·h(xᵢ; γ) with scalar η and γ as the last two
/// parameters:
/// B(β̂) = −[(1/η)·Cov(η̂, γ̂)·e_γ + (η/2)·Var(γ̂)·δ]
/// where δ is the least-squares regression of h'' = ∂²fᵢ/∂γ²/η on the
/// columns of D and e_γ is the unit vector of the γ coordinate.
pub fn bias_partially_nonlinear(
    alpha: f64,
    bundle: &DerivativeBundle,
    beta: &[f64],
) -> Result<Array1<f64>, BiasError> {
    assert!(alpha > 0.0, "alpha must be positive");
    let psi = psi1(alpha).expect("alpha validated positive");
    let (n, p) = (bundle.n(), bundle.p());
    assert_eq!(beta.len(), p);
    if p < 2 {
        return Err(BiasError::TooFewParams);
    }
    let (eta_ix, gamma_ix) = (p - 2, p - 1);
    for i in 0..n {
        for r in 0..p {
            for s in 0..p {
                let in_tail = (r == eta_ix && s == gamma_ix)
                    || (r == gamma_ix && s == eta_ix)
                    || (r == gamma_ix && s == gamma_ix);
                if !in_tail && bundle.g[[i, s * p + r]] != 0.0 {
                    return Err(BiasError::NotPartiallyNonlinear { row: i, r, s });
                }
            }
        }
    }
    let eta = beta[eta_ix];
    if eta == 0.0 {
        return Err(BiasError::EtaZero { index: eta_ix });
    }

    let dtd = bundle.d.t().dot(&bundle.d);
    let c = linalg::spd_inverse(&dtd)?;
    let cov = &c * (4.0 / psi);
    let h2: Array1<f64> = (0..n)
        .map(|i| bundle.g[[i, gamma_ix * p + gamma_ix]] / eta)
        .collect();
    let delta = linalg::lstsq(&bundle.d, &h2)?;

    let mut bias = delta * (-eta / 2.0 * cov[[gamma_ix, gamma_ix]]);
    bias[gamma_ix] -= cov[[eta_ix, gamma_ix]] / eta;
    Ok(bias)
}

/// Output of `correct`: biases, corrected estimates, and the per-point
/// mean bias and variance.
#[derive(Debug, Clone)]
pub struct BiasReport {
    pub b_beta: Vec<f64>,
    pub b_alpha: f64,
    pub beta_tilde: Vec<f64>,
    pub alpha_tilde: f64,
    pub b_mu: Vec<f64>,
    pub var_mu: Vec<f64>,
    /// set if α̃ came out nonpositive; the value is reported as-is
    pub alpha_tilde_nonpositive: bool,
}

/// Bias-correct a converged fit: θ̃ = θ̂ − B(θ̂) with B evaluated at θ̂.
pub fn correct(fit: &FitResult) -> Result<BiasReport, BiasError> {
    if !fit.converged {
        return Err(BiasError::NotConverged);
    }
    let bundle = &fit.bundle;
    let (n, p) = (bundle.n(), bundle.p());
    let b_beta = bias_beta(fit.alpha_hat, bundle)?;
    let b_alpha = bias_alpha(p, n, fit.alpha_hat);
    let beta_tilde: Vec<f64> = fit
        .beta_hat
        .iter()
        .zip(b_beta.iter())
        .map(|(e, b)| e - b)
        .collect();
    let alpha_tilde = fit.alpha_hat - b_alpha;
    let b_mu = bias_mu(fit.alpha_hat, bundle)?;
    let v_mu = var_mu(fit.alpha_hat, bundle)?;
    Ok(BiasReport {
        b_beta: b_beta.to_vec(),
        b_alpha,
        beta_tilde,
        alpha_tilde,
        b_mu: b_mu.to_vec(),
        var_mu: v_mu.to_vec(),
        alpha_tilde_nonpositive: alpha_tilde <= 0.0,
    })
}
