//! Maximum likelihood for the nonlinear model yᵢ = fᵢ(xᵢ; β) + εᵢ with
//! εᵢ ~ SN(α, 0, 2): log-likelihood, score, observed and expected
//! information, Fisher scoring with a step-halving safeguard, and a
//! BFGS fallback in (β, log α).

use crate::linalg::{self, LinalgError};
use crate::model::{
    check_rank, Dataset, DatasetError, DerivativeBundle, EvalError, MeanModel,
};
use crate::signorm::psi1;
use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("design matrix is rank deficient (condition {condition:.3e})")]
    RankDeficient { condition: f64 },
    #[error("all residuals vanish at the starting point; alpha would be zero")]
    DegenerateResiduals,
    #[error("{n} observations cannot identify {p} parameters plus alpha")]
    TooFewObservations { n: usize, p: usize },
    #[error("starting values are required for a model that is not affine in its parameters")]
    StartRequired,
    #[error("expected {expect} starting values, got {got}")]
    StartLength { expect: usize, got: usize },
    #[error("non-finite {what} at the starting point")]
    NonFiniteStart { what: &'static str },
}

/// The per-observation quantities the likelihood derivatives are built
/// from: ξᵢ₁ = (2/α)cosh((yᵢ−μᵢ)/2), ξᵢ₂ = (2/α)sinh((yᵢ−μᵢ)/2), and
/// sᵢ = ξᵢ₁ξᵢ₂ − ξᵢ₂/ξᵢ₁.
#[derive(Debug, Clone)]
pub struct XiTerms {
    pub xi1: Array1<f64>,
    pub xi2: Array1<f64>,
    pub s: Array1<f64>,
}

pub fn xi_terms(y: &Array1<f64>, mu: &Array1<f64>, alpha: f64) -> XiTerms {
    assert!(alpha > 0.0, "alpha must be positive");
    let n = y.len();
    assert_eq!(mu.len(), n);
    let mut xi1 = Array1::<f64>::zeros(n);
    let mut xi2 = Array1::<f64>::zeros(n);
    let mut s = Array1::<f64>::zeros(n);
    for i in 0..n {
        let z = (y[i] - mu[i]) / 2.0;
        let c = 2.0 / alpha * z.cosh();
        let sh = 2.0 / alpha * z.sinh();
        xi1[i] = c;
        xi2[i] = sh;
        s[i] = c * sh - sh / c;
    }
    XiTerms { xi1, xi2, s }
}

/// ln cosh(z) without overflow for large |z|.
fn ln_cosh(z: f64) -> f64 {
    let a = z.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Log-likelihood (additive constants dropped):
/// Σ log ξᵢ₁ − ½ Σ ξᵢ₂².
pub(crate) fn loglik_parts(y: &Array1<f64>, mu: &Array1<f64>, alpha: f64) -> f64 {
    let ln_2_over_alpha = (2.0 / alpha).ln();
    let mut ll = 0.0;
    for i in 0..y.len() {
        let z = (y[i] - mu[i]) / 2.0;
        let xi2 = 2.0 / alpha * z.sinh();
        ll += ln_2_over_alpha + ln_cosh(z) - 0.5 * xi2 * xi2;
    }
    ll
}

pub fn loglik(model: &MeanModel, data: &Dataset, beta: &[f64], alpha: f64) -> Result<f64, FitError> {
    assert!(alpha > 0.0, "alpha must be positive");
    let design = data.design_for(model)?;
    let mu = model.eval_mu(&design, beta)?;
    Ok(loglik_parts(data.y(), &mu, alpha))
}

fn score_parts(bundle: &DerivativeBundle, xi: &XiTerms, alpha: f64) -> (Array1<f64>, f64) {
    let n = bundle.n() as f64;
    let u_beta = bundle.d.t().dot(&xi.s) * 0.5;
    let sum_xi2_sq: f64 = xi.xi2.iter().map(|v| v * v).sum();
    let u_alpha = -n / alpha + sum_xi2_sq / alpha;
    (u_beta, u_alpha)
}

/// Score U(θ) = (U_β, U_α) with U_β = ½Dᵀs and
/// U_α = −n/α + (1/α)Σξᵢ₂².
pub fn score(
    model: &MeanModel,
    data: &Dataset,
    beta: &[f64],
    alpha: f64,
) -> Result<(Array1<f64>, f64), FitError> {
    assert!(alpha > 0.0, "alpha must be positive");
    let design = data.design_for(model)?;
    let bundle = model.eval_bundle(&design, beta)?;
    let xi = xi_terms(data.y(), &bundle.mu, alpha);
    Ok(score_parts(&bundle, &xi, alpha))
}

/// Observed information contributions, assembled as the symmetric
/// (p+1)×(p+1) matrix of second derivatives of the log-likelihood with
/// α in the last row/column.
pub fn observed_hessian(
    model: &MeanModel,
    data: &Dataset,
    beta: &[f64],
    alpha: f64,
) -> Result<Array2<f64>, FitError> {
    assert!(alpha > 0.0, "alpha must be positive");
    let design = data.design_for(model)?;
    let bundle = model.eval_bundle(&design, beta)?;
    let xi = xi_terms(data.y(), &bundle.mu, alpha);
    let n = bundle.n();
    let p = bundle.p();
    let mut h = Array2::<f64>::zeros((p + 1, p + 1));
    let a2 = alpha * alpha;
    for i in 0..n {
        let (x1, x2, si) = (xi.xi1[i], xi.xi2[i], xi.s[i]);
        let w = 2.0 * x2 * x2 + 4.0 / a2 - 1.0 + (x2 * x2) / (x1 * x1);
        for r in 0..p {
            for s_idx in r..p {
                h[[r, s_idx]] += 0.5 * bundle.g[[i, s_idx * p + r]] * si
                    - 0.25 * bundle.d[[i, r]] * bundle.d[[i, s_idx]] * w;
            }
            h[[r, p]] += -(1.0 / alpha) * bundle.d[[i, r]] * x1 * x2;
        }
    }
    let sum_xi2_sq: f64 = xi.xi2.iter().map(|v| v * v).sum();
    h[[p, p]] = n as f64 / a2 - 3.0 / a2 * sum_xi2_sq;
    for r in 0..=p {
        for s_idx in (r + 1)..=p {
            h[[s_idx, r]] = h[[r, s_idx]];
        }
    }
    Ok(h)
}

/// Expected (Fisher) information blocks. The β–α cross block is exactly
/// zero, so only the two diagonal blocks exist.
#[derive(Debug, Clone)]
pub struct FisherInfo {
    /// K_β = ψ₁(α)·DᵀD/4
    pub k_beta: Array2<f64>,
    /// κ_αα = 2n/α²
    pub kappa_alpha: f64,
}

pub fn fisher_info(alpha: f64, bundle: &DerivativeBundle) -> FisherInfo {
    assert!(alpha > 0.0, "alpha must be positive");
    let psi = psi1(alpha).expect("alpha validated positive");
    let k_beta = bundle.d.t().dot(&bundle.d) * (psi / 4.0);
    FisherInfo {
        k_beta,
        kappa_alpha: 2.0 * bundle.n() as f64 / (alpha * alpha),
    }
}

/// Starting point (β⁽⁰⁾, α⁽⁰⁾). β⁽⁰⁾ comes from the caller, or from OLS
/// when the model is affine in all parameters; α⁽⁰⁾ is the exact root of
/// U_α = 0 at μ⁽⁰⁾: sqrt((4/n)·Σ sinh²((yᵢ−μᵢ⁽⁰⁾)/2)).
pub fn init_theta(
    model: &MeanModel,
    data: &Dataset,
    beta0: Option<&[f64]>,
) -> Result<(Vec<f64>, f64), FitError> {
    let p = model.n_params();
    let design = data.design_for(model)?;
    let beta0 = match beta0 {
        Some(b) => {
            if b.len() != p {
                return Err(FitError::StartLength {
                    expect: p,
                    got: b.len(),
                });
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(FitError::NonFiniteStart { what: "beta" });
            }
            b.to_vec()
        }
        None if model.is_affine_in_params() => {
            let at_zero = vec![0.0; p];
            let bundle = model.eval_bundle(&design, &at_zero)?;
            let resid = data.y() - &bundle.mu;
            linalg::lstsq(&bundle.d, &resid)?.to_vec()
        }
        None => return Err(FitError::StartRequired),
    };
    let mu0 = model.eval_mu(&design, &beta0)?;
    let n = data.n() as f64;
    let sum_sq: f64 = data
        .y()
        .iter()
        .zip(mu0.iter())
        .map(|(&y, &m)| {
            let sh = ((y - m) / 2.0).sinh();
            sh * sh
        })
        .sum();
    if sum_sq == 0.0 {
        return Err(FitError::DegenerateResiduals);
    }
    let alpha0 = (4.0 * sum_sq / n).sqrt();
    if !alpha0.is_finite() {
        return Err(FitError::NonFiniteStart { what: "alpha" });
    }
    Ok((beta0, alpha0))
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    /// starting β; mandatory unless the model is affine in its parameters
    pub start: Option<Vec<f64>>,
    pub max_iter: usize,
    /// relative log-likelihood change tolerance
    pub tol_loglik: f64,
    /// max-norm tolerance on the score
    pub tol_score: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            start: None,
            max_iter: 200,
            tol_loglik: 1e-10,
            tol_score: 1e-6,
        }
    }
}

impl FitConfig {
    pub fn with_start(beta: &[f64]) -> Self {
        FitConfig {
            start: Some(beta.to_vec()),
            ..FitConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta_hat: Vec<f64>,
    pub alpha_hat: f64,
    pub loglik: f64,
    /// K_β⁻¹ evaluated at θ̂
    pub cov_beta: Array2<f64>,
    /// α̂²/(2n)
    pub var_alpha: f64,
    pub iterations: usize,
    pub converged: bool,
    pub score_norm: f64,
    pub termination: Termination,
    /// derivatives at β̂, reused by the bias machinery
    pub bundle: DerivativeBundle,
}

impl FitResult {
    pub fn se_beta(&self) -> Vec<f64> {
        (0..self.cov_beta.nrows())
            .map(|j| self.cov_beta[[j, j]].sqrt())
            .collect()
    }

    pub fn se_alpha(&self) -> f64 {
        self.var_alpha.sqrt()
    }
}

fn finish(
    model: &MeanModel,
    design: &Array2<f64>,
    y: &Array1<f64>,
    beta: Vec<f64>,
    alpha: f64,
    iterations: usize,
    termination: Termination,
) -> Result<FitResult, FitError> {
    let bundle = model.eval_bundle(design, &beta)?;
    // a degenerate design at the solution (e.g. a likelihood ridge the
    // iteration ran along) has no usable information matrix
    let rep = check_rank(&bundle.d);
    if rep.deficient {
        return Err(FitError::RankDeficient {
            condition: rep.condition,
        });
    }
    // land alpha exactly on the fixed point of its update given the final
    // beta (the closed-form profile maximum); a refit started from the
    // reported estimates then reproduces them bitwise
    let s2 = y
        .iter()
        .zip(bundle.mu.iter())
        .map(|(&yv, &mv)| {
            let t = ((yv - mv) / 2.0).sinh();
            t * t
        })
        .sum::<f64>()
        * 4.0
        / y.len() as f64;
    let alpha = if s2.is_finite() && s2 > 0.0 { s2.sqrt() } else { alpha };
    let ll = loglik_parts(y, &bundle.mu, alpha);
    let xi = xi_terms(y, &bundle.mu, alpha);
    let (u_beta, u_alpha) = score_parts(&bundle, &xi, alpha);
    let score_norm = u_beta
        .iter()
        .map(|v| v.abs())
        .fold(u_alpha.abs(), f64::max);
    let info = fisher_info(alpha, &bundle);
    let cov_beta = linalg::spd_inverse(&info.k_beta).map_err(|_| {
        let rep = check_rank(&bundle.d);
        FitError::RankDeficient {
            condition: rep.condition,
        }
    })?;
    let n = y.len() as f64;
    Ok(FitResult {
        beta_hat: beta,
        alpha_hat: alpha,
        loglik: ll,
        cov_beta,
        var_alpha: alpha * alpha / (2.0 * n),
        iterations,
        converged: termination == Termination::Converged,
        score_norm,
        termination,
        bundle,
    })
}

fn prepare(
    model: &MeanModel,
    data: &Dataset,
    config: &FitConfig,
) -> Result<(Array2<f64>, Vec<f64>, f64), FitError> {
    let (n, p) = (data.n(), model.n_params());
    if n < p + 1 {
        return Err(FitError::TooFewObservations { n, p });
    }
    let design = data.design_for(model)?;
    let (beta0, alpha0) = init_theta(model, data, config.start.as_deref())?;
    Ok((design, beta0, alpha0))
}

/// Fisher scoring: β⁽ᵐ⁺¹⁾ = β⁽ᵐ⁾ + (DᵀD)⁻¹Dᵀζ⁽ᵐ⁾ with
/// ζ⁽ᵐ⁾ = 2s⁽ᵐ⁾/ψ₁(α⁽ᵐ⁾), then α⁽ᵐ⁺¹⁾ = ½α⁽ᵐ⁾(1 + ξ̄₂) with ξ̄₂
/// recomputed at the stepped β. The β-step is halved (up to 20 times)
/// whenever the joint log-likelihood would otherwise fall.
pub fn fit_scoring(
    model: &MeanModel,
    data: &Dataset,
    config: &FitConfig,
) -> Result<FitResult, FitError> {
    let (design, mut beta, mut alpha) = prepare(model, data, config)?;
    let y = data.y();
    let n = data.n() as f64;
    let p = model.n_params();

    let mut bundle = model.eval_bundle(&design, &beta)?;
    let rep = check_rank(&bundle.d);
    if rep.deficient {
        return Err(FitError::RankDeficient {
            condition: rep.condition,
        });
    }
    let mut ll = loglik_parts(y, &bundle.mu, alpha);
    if !ll.is_finite() {
        return Err(FitError::NonFiniteStart { what: "log-likelihood" });
    }

    // already at a first-order optimum (e.g. restarted from a reported
    // fit): return the start unchanged
    {
        let xi = xi_terms(y, &bundle.mu, alpha);
        let (u_beta, u_alpha) = score_parts(&bundle, &xi, alpha);
        let s0 = u_beta.iter().map(|v| v.abs()).fold(u_alpha.abs(), f64::max);
        if s0 <= config.tol_score {
            return finish(model, &design, y, beta, alpha, 0, Termination::Converged);
        }
    }

    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    for m in 1..=config.max_iter {
        iterations = m;
        let xi = xi_terms(y, &bundle.mu, alpha);
        let psi = psi1(alpha).expect("alpha stays positive");
        let zeta = &xi.s * (2.0 / psi);
        let dtd = bundle.d.t().dot(&bundle.d);
        let rhs = bundle.d.t().dot(&zeta);
        let delta = linalg::solve_spd(&dtd, &rhs).map_err(|_| {
            let rep = check_rank(&bundle.d);
            FitError::RankDeficient {
                condition: rep.condition,
            }
        })?;

        // step halving on the joint update
        let mut accepted = None;
        let mut step = 1.0;
        for h in 0..=20 {
            let beta_try: Vec<f64> = beta
                .iter()
                .zip(delta.iter())
                .map(|(b, d)| b + step * d)
                .collect();
            if let Ok(mu_try) = model.eval_mu(&design, &beta_try) {
                let xi2_bar: f64 = y
                    .iter()
                    .zip(mu_try.iter())
                    .map(|(&yv, &mv)| {
                        let t = 2.0 / alpha * ((yv - mv) / 2.0).sinh();
                        t * t
                    })
                    .sum::<f64>()
                    / n;
                let alpha_try = 0.5 * alpha * (1.0 + xi2_bar);
                if alpha_try.is_finite() && alpha_try > 0.0 {
                    let ll_try = loglik_parts(y, &mu_try, alpha_try);
                    let not_worse = ll_try >= ll - 1e-12 * (1.0 + ll.abs());
                    if ll_try.is_finite() && (not_worse || h == 20) {
                        accepted = Some((beta_try, alpha_try, ll_try));
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        let Some((beta_new, alpha_new, ll_new)) = accepted else {
            termination = Termination::LineSearchFailed;
            break;
        };

        beta = beta_new;
        alpha = alpha_new;
        bundle = model.eval_bundle(&design, &beta)?;
        let xi_new = xi_terms(y, &bundle.mu, alpha);
        let (u_beta, u_alpha) = score_parts(&bundle, &xi_new, alpha);
        let score_norm = u_beta
            .iter()
            .map(|v| v.abs())
            .fold(u_alpha.abs(), f64::max);
        let ll_change = (ll_new - ll).abs();
        ll = ll_new;
        if score_norm <= config.tol_score && ll_change <= config.tol_loglik * (1.0 + ll.abs()) {
            termination = Termination::Converged;
            break;
        }
    }
    let _ = p;
    finish(model, &design, y, beta, alpha, iterations, termination)
}

/// Negative log-likelihood and gradient in z = (β, log α).
fn objective(
    model: &MeanModel,
    design: &Array2<f64>,
    y: &Array1<f64>,
    z: &[f64],
) -> Option<(f64, Vec<f64>)> {
    let p = z.len() - 1;
    let alpha = z[p].exp();
    if !alpha.is_finite() || alpha <= 0.0 {
        return None;
    }
    let bundle = model.eval_bundle(design, &z[..p]).ok()?;
    let ll = loglik_parts(y, &bundle.mu, alpha);
    if !ll.is_finite() {
        return None;
    }
    let xi = xi_terms(y, &bundle.mu, alpha);
    let (u_beta, u_alpha) = score_parts(&bundle, &xi, alpha);
    if u_beta.iter().any(|v| !v.is_finite()) || !u_alpha.is_finite() {
        return None;
    }
    let mut grad = Vec::with_capacity(p + 1);
    for v in u_beta.iter() {
        grad.push(-v);
    }
    // d(-ll)/d(log alpha) = -alpha * U_alpha
    grad.push(-alpha * u_alpha);
    Some((-ll, grad))
}

/// BFGS quasi-Newton ascent of the log-likelihood over (β, log α) with
/// the analytic gradient and Armijo backtracking. Serves as the
/// cross-check and fallback for `fit_scoring`.
pub fn fit_bfgs(model: &MeanModel, data: &Dataset, config: &FitConfig) -> Result<FitResult, FitError> {
    let (design, beta0, alpha0) = prepare(model, data, config)?;
    let y = data.y();
    let p = model.n_params();
    let q = p + 1;

    let mut z: Vec<f64> = beta0.iter().copied().chain([alpha0.ln()]).collect();
    let (mut f, mut grad) =
        objective(model, &design, y, &z).ok_or(FitError::NonFiniteStart { what: "log-likelihood" })?;

    // same no-move rule as fit_scoring when the start is already optimal
    let start_score = grad[..p]
        .iter()
        .map(|v| v.abs())
        .fold((grad[p] / alpha0).abs(), f64::max);
    if start_score <= config.tol_score {
        return finish(model, &design, y, beta0, alpha0, 0, Termination::Converged);
    }

    let mut h_inv = Array2::<f64>::eye(q);
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    for m in 1..=config.max_iter {
        iterations = m;
        let g = Array1::from_vec(grad.clone());
        let mut dir = h_inv.dot(&g) * -1.0;
        let mut slope: f64 = dir.iter().zip(grad.iter()).map(|(d, g)| d * g).sum();
        if !(slope < 0.0) {
            // reset to steepest descent when curvature info degrades
            h_inv = Array2::eye(q);
            dir = g.clone() * -1.0;
            slope = -g.iter().map(|v| v * v).sum::<f64>();
            if slope == 0.0 {
                termination = Termination::Converged;
                break;
            }
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let z_try: Vec<f64> = z.iter().zip(dir.iter()).map(|(zi, di)| zi + t * di).collect();
            if let Some((f_try, grad_try)) = objective(model, &design, y, &z_try) {
                if f_try <= f + 1e-4 * t * slope {
                    accepted = Some((z_try, f_try, grad_try));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((z_new, f_new, grad_new)) = accepted else {
            termination = Termination::LineSearchFailed;
            break;
        };

        // BFGS inverse-Hessian update
        let s: Vec<f64> = z_new.iter().zip(z.iter()).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = grad_new.iter().zip(grad.iter()).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(yv.iter()).map(|(a, b)| a * b).sum();
        let s_norm: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y_norm: f64 = yv.iter().map(|v| v * v).sum::<f64>().sqrt();
        if sy > 1e-10 * s_norm * y_norm {
            let rho = 1.0 / sy;
            let hy = h_inv.dot(&Array1::from_vec(yv.clone()));
            let yhy: f64 = yv.iter().zip(hy.iter()).map(|(a, b)| a * b).sum();
            for r in 0..q {
                for c in 0..q {
                    h_inv[[r, c]] += rho * rho * (sy + yhy) * s[r] * s[c]
                        - rho * (hy[r] * s[c] + s[r] * hy[c]);
                }
            }
        }

        let f_change = (f - f_new).abs();
        z = z_new;
        f = f_new;
        grad = grad_new;

        let alpha = z[p].exp();
        let u_alpha = -grad[p] / alpha;
        let score_norm = grad[..p]
            .iter()
            .map(|v| v.abs())
            .fold(u_alpha.abs(), f64::max);
        if score_norm <= config.tol_score && f_change <= config.tol_loglik * (1.0 + f.abs()) {
            termination = Termination::Converged;
            break;
        }
    }

    let beta: Vec<f64> = z[..p].to_vec();
    let alpha = z[p].exp();
    finish(model, &design, y, beta, alpha, iterations, termination)
}

/// Fisher scoring with BFGS fallback: returns the scoring fit when it
/// converges, otherwise the better of the two attempts.
pub fn fit(model: &MeanModel, data: &Dataset, config: &FitConfig) -> Result<FitResult, FitError> {
    match fit_scoring(model, data, config) {
        Ok(res) if res.converged => Ok(res),
        Ok(res) => {
            // restart BFGS from wherever scoring stalled
            let mut cfg = config.clone();
            cfg.start = Some(res.beta_hat.clone());
            match fit_bfgs(model, data, &cfg) {
                Ok(b) if b.converged || b.loglik > res.loglik => Ok(b),
                _ => Ok(res),
            }
        }
        Err(first) => match fit_bfgs(model, data, config) {
            Ok(b) => Ok(b),
            Err(_) => Err(first),
        },
    }
}

/// Raw and standardized residuals at the fitted point: ε̂ᵢ = yᵢ − μ̂ᵢ and
/// R̂ᵢ = (2/α̂)·sinh(ε̂ᵢ/2), which is standard normal under the model.
#[derive(Debug, Clone)]
pub struct Residuals {
    pub mu_hat: Array1<f64>,
    pub eps_hat: Array1<f64>,
    pub r_hat: Array1<f64>,
}

pub fn residuals(fit: &FitResult, data: &Dataset) -> Residuals {
    let mu_hat = fit.bundle.mu.clone();
    let eps_hat = data.y() - &mu_hat;
    let r_hat = eps_hat.mapv(|e| 2.0 / fit.alpha_hat * (e / 2.0).sinh());
    Residuals {
        mu_hat,
        eps_hat,
        r_hat,
    }
}
