//! SGHMC posterior sampling on a (pseudo)coreset and ensemble evaluation.
//!
//! Dynamics, one step per epoch on the full coreset:
//!
//! ```text
//! v ← (1 − α) v − η ∇Ũ(θ) + N(0, 2d)
//! θ ← θ + v
//! ```
//!
//! with `Ũ` the summed negative log-likelihood on the coreset plus the
//! negative log prior.

use serde::{Deserialize, Serialize};

use crate::data::{corrupt, CorruptionKind};
use crate::error::{FbpcError, Result};
use crate::fbpc::Pseudocoreset;
use crate::models::{
    init_params, log_softmax_row, ArchitectureSpec, Batch, Network, ParameterVector,
};
use crate::rng::{standard_normal, FbpcRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SghmcConfig {
    pub eta: f64,
    /// Friction.
    pub alpha: f64,
    /// Noise scale `d`; `None` means `0.01 / m` for a coreset of size `m`.
    pub noise_d: Option<f64>,
    pub epochs: usize,
    pub collect_every: usize,
    pub burn_in: usize,
    /// Multiplier on the coreset log-likelihood in `Ũ`.
    pub likelihood_weight: f64,
}

impl Default for SghmcConfig {
    fn default() -> Self {
        SghmcConfig {
            eta: 0.03,
            alpha: 0.1,
            noise_d: None,
            epochs: 1000,
            collect_every: 100,
            burn_in: 100,
            likelihood_weight: 1.0,
        }
    }
}

impl SghmcConfig {
    pub fn noise_for(&self, coreset_size: usize) -> f64 {
        self.noise_d.unwrap_or(0.01 / coreset_size.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.alpha > 0.0) {
            return Err(FbpcError::Config("eta and alpha must be positive".into()));
        }
        if !(self.likelihood_weight > 0.0 && self.likelihood_weight.is_finite()) {
            return Err(FbpcError::Config(
                "likelihood_weight must be positive".into(),
            ));
        }
        if self.noise_d.is_some_and(|d| !(d >= 0.0)) {
            return Err(FbpcError::Config("noise_d must be non-negative".into()));
        }
        if self.collect_every == 0 || self.collect_every > self.epochs {
            return Err(FbpcError::Config(format!(
                "collect_every must be in 1..={}, got {}",
                self.epochs, self.collect_every
            )));
        }
        if self.burn_in > self.epochs {
            return Err(FbpcError::Config("burn_in exceeds epochs".into()));
        }
        Ok(())
    }
}

/// Energy `Ũ` for the sampler.
pub trait Potential {
    fn grad(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// `Ũ(θ) = ‖θ‖² / 2`.
#[derive(Debug, Clone, Copy)]
pub struct StandardGaussianPotential;

impl Potential for StandardGaussianPotential {
    fn grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(theta.to_vec())
    }
}

/// Weighted summed negative log-likelihood on a labelled batch plus the
/// negative log prior.
pub struct CoresetPotential<'a> {
    net: Network,
    batch: &'a Batch,
    weight: f64,
}

impl<'a> CoresetPotential<'a> {
    pub fn new(spec: &ArchitectureSpec, batch: &'a Batch, likelihood_weight: f64) -> Result<Self> {
        batch.check_labels(spec.num_classes)?;
        if batch.input_shape != spec.input_shape {
            return Err(FbpcError::Validation(format!(
                "coreset inputs have shape {:?}, architecture expects {:?}",
                batch.input_shape, spec.input_shape
            )));
        }
        Ok(CoresetPotential {
            net: Network::new(spec)?,
            batch,
            weight: likelihood_weight,
        })
    }

    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        let logits = self.net.forward(theta, &self.batch.inputs)?;
        let ll = crate::models::log_likelihood(&logits, &self.batch.labels)?;
        Ok(-self.weight * ll + self.net.prior_neg_log(theta).0)
    }
}

impl Potential for CoresetPotential<'_> {
    fn grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let (g, _) = self
            .net
            .loglik_grad_params(theta, &self.batch.inputs, &self.batch.labels)?;
        let (_, gp) = self.net.prior_neg_log(theta);
        Ok(g.iter()
            .zip(&gp)
            .map(|(a, b)| b - self.weight * a)
            .collect())
    }
}

/// Run the sampler from `init` with zero initial momentum. Returns the
/// states at every epoch `e ≥ burn_in` with `e % collect_every == 0`.
pub fn sghmc_run<P: Potential>(
    potential: &P,
    init: Vec<f64>,
    cfg: &SghmcConfig,
    noise_d: f64,
    rng: &mut FbpcRng,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let mut theta = init;
    let mut v = vec![0.0; theta.len()];
    let scale = (2.0 * noise_d).sqrt();
    let mut samples = Vec::new();
    for epoch in 1..=cfg.epochs {
        let g = potential.grad(&theta)?;
        for i in 0..theta.len() {
            v[i] = (1.0 - cfg.alpha) * v[i] - cfg.eta * g[i] + scale * standard_normal(rng);
            theta[i] += v[i];
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(FbpcError::Divergence(format!(
                "SGHMC state became non-finite at epoch {epoch}"
            )));
        }
        if epoch >= cfg.burn_in && epoch % cfg.collect_every == 0 {
            samples.push(theta.clone());
        }
    }
    Ok(samples)
}

/// Posterior samples on a coreset, starting from a prior draw.
pub fn sghmc_sample(
    spec: &ArchitectureSpec,
    coreset: &Pseudocoreset,
    cfg: &SghmcConfig,
    rng: &mut FbpcRng,
) -> Result<Vec<ParameterVector>> {
    let batch = coreset.as_batch();
    let potential = CoresetPotential::new(spec, &batch, cfg.likelihood_weight)?;
    let init = init_params(spec, rng)?;
    let d = cfg.noise_for(coreset.len());
    Ok(sghmc_run(&potential, init.values, cfg, d, rng)?
        .into_iter()
        .map(|values| ParameterVector {
            values,
            spec_id: spec.id(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Mean negative log of the averaged predictive probability of the true class.
    pub nll: f64,
    /// Mean of the individual members' NLLs; never below `nll`.
    pub member_nll: f64,
    pub entropy_mean: f64,
    pub entropy_std: f64,
    pub n_samples: usize,
    pub n_test: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub corruption: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub severity: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub degradation: Option<f64>,
}

/// Bayesian model average of the softmax predictions of `samples`.
pub fn evaluate_ensemble(
    spec: &ArchitectureSpec,
    samples: &[ParameterVector],
    test: &Batch,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(FbpcError::Config(
            "need at least one posterior sample".into(),
        ));
    }
    if test.is_empty() {
        return Err(FbpcError::Config("empty test set".into()));
    }
    test.check_labels(spec.num_classes)?;
    let net = Network::new(spec)?;
    let d = spec.num_classes;
    let n = test.len();
    let mut probs = vec![0.0; n * d];
    let mut member_nll = 0.0;
    for s in samples {
        s.check_spec(spec)?;
        let logits = net.forward(&s.values, &test.inputs)?;
        for j in 0..n {
            let lp = log_softmax_row(&logits[j * d..(j + 1) * d]);
            member_nll -= lp[test.labels[j]];
            for c in 0..d {
                probs[j * d + c] += lp[c].exp();
            }
        }
    }
    let k = samples.len() as f64;
    probs.iter_mut().for_each(|p| *p /= k);
    member_nll /= k * n as f64;
    let mut correct = 0usize;
    let mut nll = 0.0;
    let mut entropies = Vec::with_capacity(n);
    for j in 0..n {
        let row = &probs[j * d..(j + 1) * d];
        let arg = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("at least two classes");
        if arg == test.labels[j] {
            correct += 1;
        }
        nll -= row[test.labels[j]].max(f64::MIN_POSITIVE).ln();
        entropies.push(
            -row.iter()
                .filter(|&&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>(),
        );
    }
    nll /= n as f64;
    let entropy_mean = entropies.iter().sum::<f64>() / n as f64;
    let entropy_std = (entropies
        .iter()
        .map(|e| (e - entropy_mean).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    // Jensen: log of the mean probability is at least the mean log probability
    assert!(
        nll <= member_nll + 1e-9 * (1.0 + member_nll.abs()),
        "ensemble NLL {nll} exceeds mean member NLL {member_nll}"
    );
    Ok(EvalReport {
        accuracy: correct as f64 / n as f64,
        nll,
        member_nll,
        entropy_mean,
        entropy_std,
        n_samples: samples.len(),
        n_test: n,
        corruption: None,
        severity: None,
        degradation: None,
    })
}

/// Evaluate on an already-corrupted copy of the test set and fill in the
/// degradation relative to `clean_accuracy`.
pub fn evaluate_degradation(
    spec: &ArchitectureSpec,
    samples: &[ParameterVector],
    clean_accuracy: f64,
    corrupted: &Batch,
) -> Result<EvalReport> {
    let mut r = evaluate_ensemble(spec, samples, corrupted)?;
    r.degradation = Some(clean_accuracy - r.accuracy);
    Ok(r)
}

/// One report per `(kind, severity)` with degradation against clean accuracy.
pub fn evaluate_robustness(
    spec: &ArchitectureSpec,
    samples: &[ParameterVector],
    clean_test: &Batch,
    corruptions: &[(CorruptionKind, u8)],
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let clean = evaluate_ensemble(spec, samples, clean_test)?;
    corruptions
        .iter()
        .map(|&(kind, severity)| {
            let batch = corrupt(clean_test, kind, severity, seed)?;
            let mut r = evaluate_degradation(spec, samples, clean.accuracy, &batch)?;
            r.corruption = Some(kind.name().into());
            r.severity = Some(severity);
            Ok(r)
        })
        .collect()
}
