//! Closed-form and brute-force references for the function-space estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{FbpcError, Result};
use crate::models::{
    ArchitectureSpec, GaussianRegression, Network, OutputLikelihood, ParameterVector,
};
use crate::posteriors::FunctionalPosterior;
use crate::rng::{fill_standard_normal, FbpcRng};

/// Largest parameter count for which a finite-difference Jacobian is attempted.
pub const MAX_FD_PARAMS: usize = 2000;
pub const FD_STEP: f64 = 1e-5;

/// Multivariate Gaussian over the `m × d` function values at a finite input set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFD {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianFD {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Symmetric to round-off with eigenvalues above `-tol`.
    pub fn check_psd(&self, tol: f64) -> Result<()> {
        let n = self.dim();
        if self.cov.nrows() != n || self.cov.ncols() != n {
            return Err(FbpcError::Dimension(
                "covariance does not match mean".into(),
            ));
        }
        let scale = self.cov.amax().max(1.0);
        if (&self.cov - self.cov.transpose()).amax() > 1e-10 * scale {
            return Err(FbpcError::Validation("covariance is not symmetric".into()));
        }
        let min = self.cov.clone().symmetric_eigenvalues().min();
        if min < -tol {
            return Err(FbpcError::Validation(format!(
                "covariance has eigenvalue {min}"
            )));
        }
        Ok(())
    }
}

/// Jacobian of the flattened outputs at `u` with respect to the parameters,
/// `[(m·d) × p]`, by central differences.
pub fn param_jacobian_fd(
    spec: &ArchitectureSpec,
    mu: &ParameterVector,
    u: &[f64],
) -> Result<DMatrix<f64>> {
    mu.check_spec(spec)?;
    let p = mu.len();
    if p > MAX_FD_PARAMS {
        return Err(FbpcError::Capability(format!(
            "finite-difference Jacobian limited to {MAX_FD_PARAMS} parameters, model has {p}"
        )));
    }
    let net = Network::new(spec)?;
    let n = net.forward(&mu.values, u)?.len();
    let mut jac = DMatrix::zeros(n, p);
    let mut theta = mu.values.clone();
    for k in 0..p {
        let orig = theta[k];
        theta[k] = orig + FD_STEP;
        let plus = net.forward(&theta, u)?;
        theta[k] = orig - FD_STEP;
        let minus = net.forward(&theta, u)?;
        theta[k] = orig;
        for i in 0..n {
            jac[(i, k)] = (plus[i] - minus[i]) / (2.0 * FD_STEP);
        }
    }
    Ok(jac)
}

/// Pushforward of `N(mu, diag(sigma_diag))` through the network linearized at
/// `mu`: mean `g_mu(u)`, covariance `J diag(sigma_diag) Jᵀ`. `sigma_diag`
/// holds variances.
pub fn linearized_fd_posterior(
    spec: &ArchitectureSpec,
    mu: &ParameterVector,
    sigma_diag: &[f64],
    u: &[f64],
) -> Result<GaussianFD> {
    if sigma_diag.len() != mu.len() {
        return Err(FbpcError::Dimension(format!(
            "weight variances have length {}, parameters {}",
            sigma_diag.len(),
            mu.len()
        )));
    }
    if sigma_diag.iter().any(|v| !(*v >= 0.0)) {
        return Err(FbpcError::Config(
            "weight variances must be non-negative".into(),
        ));
    }
    let jac = param_jacobian_fd(spec, mu, u)?;
    let mean = DVector::from_vec(Network::new(spec)?.forward(&mu.values, u)?);
    let scaled = DMatrix::from_fn(jac.nrows(), jac.ncols(), |i, k| jac[(i, k)] * sigma_diag[k]);
    let cov = &scaled * jac.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianFD { mean, cov })
}

/// Closed-form `E_{N(μ̂, diag ψ)}[log N(y | f, σ²I)]` (without constant) and its
/// gradient in `u` through `μ̂ = g_anchor(u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedLoglik {
    pub value: f64,
    pub gradient: Vec<f64>,
}

pub fn expected_grad_gaussian_loglik(
    q: &FunctionalPosterior,
    u: &[f64],
    targets: &[f64],
    sigma_obs: f64,
) -> Result<ExpectedLoglik> {
    if !(sigma_obs > 0.0) {
        return Err(FbpcError::Config(
            "observation noise must be positive".into(),
        ));
    }
    let mean = q.mean(u)?;
    if targets.len() != mean.len() {
        return Err(FbpcError::Dimension(
            "targets do not match the function values".into(),
        ));
    }
    let s2 = sigma_obs * sigma_obs;
    let resid: Vec<f64> = targets.iter().zip(&mean).map(|(y, m)| y - m).collect();
    let trace: f64 = q.diag_std.iter().map(|s| s * s).sum();
    let value = -(resid.iter().map(|r| r * r).sum::<f64>() + trace) / (2.0 * s2);
    let cot: Vec<f64> = resid.iter().map(|r| r / s2).collect();
    let gradient = Network::new(&q.spec)?.vjp_inputs(&q.anchor.values, u, &cot)?;
    Ok(ExpectedLoglik { value, gradient })
}

/// Exact expectation of the forward-KL gradient estimator under the Gaussian
/// regression likelihood: `∇_u E_{q_u}[log p] − ∇_u E_{q_x}[log p]`.
pub fn expected_fbpc_gradient_gaussian(
    q_x: &FunctionalPosterior,
    q_u: &FunctionalPosterior,
    u: &[f64],
    targets: &[f64],
    sigma_obs: f64,
) -> Result<ExpectedLoglik> {
    let ex = expected_grad_gaussian_loglik(q_x, u, targets, sigma_obs)?;
    let eu = expected_grad_gaussian_loglik(q_u, u, targets, sigma_obs)?;
    Ok(ExpectedLoglik {
        value: eu.value - ex.value,
        gradient: eu
            .gradient
            .iter()
            .zip(&ex.gradient)
            .map(|(a, b)| a - b)
            .collect(),
    })
}

/// Plain Monte-Carlo mean of the regression log-likelihood with its standard error.
pub fn mc_gaussian_loglik(
    q: &FunctionalPosterior,
    u: &[f64],
    targets: &[f64],
    sigma_obs: f64,
    s: usize,
    rng: &mut FbpcRng,
) -> Result<(f64, f64)> {
    let mean = q.mean(u)?;
    let lik = GaussianRegression {
        targets,
        num_outputs: q.spec.num_classes,
        sigma_obs,
    };
    let mut eps = vec![0.0; mean.len()];
    let mut f = vec![0.0; mean.len()];
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..s {
        fill_standard_normal(rng, &mut eps);
        for j in 0..f.len() {
            f[j] = mean[j] + q.diag_std[j] * eps[j];
        }
        let v = lik.log_prob(&f);
        sum += v;
        sq += v * v;
    }
    let m = sum / s as f64;
    let var = (sq / s as f64 - m * m).max(0.0);
    Ok((m, (var / s as f64).sqrt()))
}

/// Monte-Carlo reference with per-entry standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceGradient {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub samples: usize,
}

impl BruteForceGradient {
    /// Largest `|x_i − mean_i| / se_i` over entries with positive SE; exact
    /// mismatches where the SE is zero count as infinite.
    pub fn max_z(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.mean)
            .zip(&self.se)
            .map(|((a, m), s)| {
                let d = (a - m).abs();
                if *s > 0.0 {
                    d / s
                } else if d <= 1e-12 * (1.0 + m.abs()) {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Input Jacobian `∂ vec(g_θ(u)) / ∂ u`, `[(m·d) × len(u)]`, from one VJP per output.
fn input_jacobian(net: &Network, theta: &[f64], u: &[f64]) -> Result<DMatrix<f64>> {
    let n = net.forward(theta, u)?.len();
    let mut jac = DMatrix::zeros(n, u.len());
    let mut cot = vec![0.0; n];
    for i in 0..n {
        cot[i] = 1.0;
        let row = net.vjp_inputs(theta, u, &cot)?;
        cot[i] = 0.0;
        for (k, v) in row.into_iter().enumerate() {
            jac[(i, k)] = v;
        }
    }
    Ok(jac)
}

/// High-sample reference for the forward-KL gradient under any output
/// likelihood. Each sample's gradient is formed from explicit input Jacobians
/// so per-sample variance is available.
pub fn brute_force_expected_grad<L: OutputLikelihood>(
    q_x: &FunctionalPosterior,
    q_u: &FunctionalPosterior,
    u: &[f64],
    lik: &L,
    s: usize,
    rng: &mut FbpcRng,
) -> Result<BruteForceGradient> {
    if q_x.spec != q_u.spec {
        return Err(FbpcError::Config(
            "posteriors use different architectures".into(),
        ));
    }
    if s < 2 {
        return Err(FbpcError::Config(
            "need at least two samples for standard errors".into(),
        ));
    }
    let net = Network::new(&q_x.spec)?;
    let mean_x = q_x.mean(u)?;
    let mean_u = q_u.mean(u)?;
    let jx = input_jacobian(&net, &q_x.anchor.values, u)?.transpose();
    let ju = input_jacobian(&net, &q_u.anchor.values, u)?.transpose();
    let n = mean_x.len();
    let mut eps = vec![0.0; n];
    let mut f = vec![0.0; n];
    let mut sum = DVector::zeros(u.len());
    let mut sq = DVector::zeros(u.len());
    for _ in 0..s {
        let mut draw = |mean: &[f64], std: &[f64], rng: &mut FbpcRng| {
            fill_standard_normal(rng, &mut eps);
            for j in 0..n {
                f[j] = mean[j] + std[j] * eps[j];
            }
            DVector::from_vec(lik.grad_outputs(&f))
        };
        let cx = draw(&mean_x, &q_x.diag_std, rng);
        let cu = draw(&mean_u, &q_u.diag_std, rng);
        let g = &ju * cu - &jx * cx;
        sq += g.component_mul(&g);
        sum += g;
    }
    let k = s as f64;
    let mean = sum / k;
    let se = (0..u.len())
        .map(|i| {
            let var = (sq[i] / k - mean[i] * mean[i]).max(0.0) * k / (k - 1.0);
            (var / k).sqrt()
        })
        .collect();
    Ok(BruteForceGradient {
        mean: mean.iter().copied().collect(),
        se,
        samples: s,
    })
}

/// `KL(p ‖ q)` between finite-dimensional Gaussians. Infinite when `p` is
/// degenerate and `q` is not.
pub fn kl_forward_gaussian(p: &GaussianFD, q: &GaussianFD) -> Result<f64> {
    let k = p.dim();
    if q.dim() != k || p.cov.shape() != (k, k) || q.cov.shape() != (k, k) {
        return Err(FbpcError::Dimension(
            "Gaussians have different dimensions".into(),
        ));
    }
    let lq =
        q.cov.clone().cholesky().ok_or_else(|| {
            FbpcError::NumericalRank("q covariance is not positive definite".into())
        })?;
    let logdet_q = 2.0 * lq.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    if !logdet_q.is_finite() {
        return Err(FbpcError::NumericalRank("q covariance is singular".into()));
    }
    let Some(lp) = p.cov.clone().cholesky() else {
        return Ok(f64::INFINITY);
    };
    let logdet_p = 2.0 * lp.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = lq.solve(&p.cov).trace();
    let delta = &q.mean - &p.mean;
    let maha = delta.dot(&lq.solve(&delta));
    Ok((0.5 * (trace + maha - k as f64 + logdet_q - logdet_p)).max(0.0))
}
