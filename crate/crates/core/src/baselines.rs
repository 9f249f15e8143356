//! Comparison methods: random coresets and weight-space forward-KL pseudocoresets.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{FbpcError, Result};
use crate::fbpc::{
    apply_update, check_pools, init_pseudocoreset, iteration_rows, norm, LogRecord, Pseudocoreset,
    SpecRecord,
};
use crate::models::{
    categorical_logit_grad, log_likelihood, ArchitectureSpec, Network, ParameterVector,
};
use crate::posteriors::{sample_expert_checkpoint, sgd_step, train_loss, TrajectoryPool};
use crate::rng::{derive_seed, derived, fill_standard_normal, seeded, FbpcRng};

/// Spherical Gaussian over weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPosteriorApprox {
    pub spec: ArchitectureSpec,
    pub mean: ParameterVector,
    pub std: f64,
}

/// Class-balanced uniform selection of real examples, no training.
pub fn random_coreset(dataset: &Dataset, ipc: usize, rng: &mut FbpcRng) -> Result<Pseudocoreset> {
    init_pseudocoreset(dataset, ipc, rng)
}

fn check_pair(qx: &WeightPosteriorApprox, qu: &WeightPosteriorApprox) -> Result<()> {
    if qx.spec != qu.spec {
        return Err(FbpcError::Config(format!(
            "weight posteriors use different architectures ({} vs {})",
            qx.spec.id(),
            qu.spec.id()
        )));
    }
    qx.mean.check_spec(&qx.spec)?;
    qu.mean.check_spec(&qu.spec)?;
    if !(qx.std >= 0.0 && qu.std >= 0.0) {
        return Err(FbpcError::Config(
            "spherical std must be non-negative".into(),
        ));
    }
    Ok(())
}

/// Materialize `S` full weight draws `mean + std·ε` per side.
fn weight_draws(q: &WeightPosteriorApprox, eps: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    eps.iter()
        .map(|e| {
            if e.len() != q.mean.len() {
                return Err(FbpcError::Dimension(
                    "weight noise has the wrong length".into(),
                ));
            }
            Ok(q.mean
                .values
                .iter()
                .zip(e)
                .map(|(m, z)| m + q.std * z)
                .collect())
        })
        .collect()
}

/// `(1/S) Σ_s ∇_u [log p(ỹ | u, θ_u⁽ˢ⁾) − log p(ỹ | u, θ_x⁽ˢ⁾)]` with caller-supplied
/// weight noise. All `2S` parameter-sized draws are held at once.
pub fn bpc_fkl_gradient_with_eps(
    qx: &WeightPosteriorApprox,
    qu: &WeightPosteriorApprox,
    inputs: &[f64],
    labels: &[usize],
    eps_x: &[Vec<f64>],
    eps_u: &[Vec<f64>],
) -> Result<Vec<f64>> {
    check_pair(qx, qu)?;
    if eps_x.is_empty() || eps_x.len() != eps_u.len() {
        return Err(FbpcError::Config(
            "need the same positive number of draws per side".into(),
        ));
    }
    let net = Network::new(&qx.spec)?;
    let draws_x = weight_draws(qx, eps_x)?;
    let draws_u = weight_draws(qu, eps_u)?;
    let mut grad = vec![0.0; inputs.len()];
    let s = draws_x.len() as f64;
    for (theta, sign) in draws_u
        .iter()
        .map(|t| (t, 1.0))
        .chain(draws_x.iter().map(|t| (t, -1.0)))
    {
        let logits = net.forward(theta, inputs)?;
        let cot = categorical_logit_grad(&logits, labels, qx.spec.num_classes)?;
        let g = net.vjp_inputs(theta, inputs, &cot)?;
        grad.iter_mut()
            .zip(&g)
            .for_each(|(a, b)| *a += sign * b / s);
    }
    Ok(grad)
}

/// The objective whose `u`-gradient [`bpc_fkl_gradient_with_eps`] returns.
pub fn bpc_fkl_objective_with_eps(
    qx: &WeightPosteriorApprox,
    qu: &WeightPosteriorApprox,
    inputs: &[f64],
    labels: &[usize],
    eps_x: &[Vec<f64>],
    eps_u: &[Vec<f64>],
) -> Result<f64> {
    check_pair(qx, qu)?;
    let net = Network::new(&qx.spec)?;
    let s = eps_x.len() as f64;
    let mut total = 0.0;
    for t in weight_draws(qu, eps_u)? {
        total += log_likelihood(&net.forward(&t, inputs)?, labels)? / s;
    }
    for t in weight_draws(qx, eps_x)? {
        total -= log_likelihood(&net.forward(&t, inputs)?, labels)? / s;
    }
    Ok(total)
}

pub fn bpc_fkl_gradient(
    qx: &WeightPosteriorApprox,
    qu: &WeightPosteriorApprox,
    inputs: &[f64],
    labels: &[usize],
    s: usize,
    rng: &mut FbpcRng,
) -> Result<Vec<f64>> {
    let p = qx.mean.len();
    let mut draw = || {
        (0..s)
            .map(|_| {
                let mut e = vec![0.0; p];
                fill_standard_normal(rng, &mut e);
                e
            })
            .collect::<Vec<_>>()
    };
    let eps_x = draw();
    let eps_u = draw();
    bpc_fkl_gradient_with_eps(qx, qu, inputs, labels, &eps_x, &eps_u)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BpcConfig {
    pub mc_samples: usize,
    /// SGD steps from the expert checkpoint for each side's mean.
    pub fine_tune_steps: usize,
    pub lr_x: f64,
    pub lr_u: f64,
    pub spherical_std: f64,
    pub min_expert_epoch: usize,
    pub iterations: usize,
    pub coreset_lr: f64,
    pub batch_size: Option<usize>,
    pub x_batch_size: usize,
    pub grad_clip: Option<f64>,
}

impl Default for BpcConfig {
    fn default() -> Self {
        BpcConfig {
            mc_samples: 8,
            fine_tune_steps: 10,
            lr_x: 0.05,
            lr_u: 0.01,
            spherical_std: 0.01,
            min_expert_epoch: 2,
            iterations: 200,
            coreset_lr: 0.05,
            batch_size: None,
            x_batch_size: 256,
            grad_clip: None,
        }
    }
}

impl BpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 || self.iterations == 0 || self.x_batch_size == 0 {
            return Err(FbpcError::Config(
                "sample and iteration counts must be positive".into(),
            ));
        }
        if !(self.lr_x > 0.0
            && self.lr_u > 0.0
            && self.coreset_lr > 0.0
            && self.spherical_std > 0.0)
        {
            return Err(FbpcError::Config(
                "learning rates and spherical std must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Weight-space forward-KL pseudocoreset: means from a few SGD steps off an
/// expert checkpoint on the full data and on the coreset.
pub fn train_bpc_fkl(
    spec: &ArchitectureSpec,
    pool: &TrajectoryPool,
    dataset: &Dataset,
    ipc: usize,
    cfg: &BpcConfig,
    seed: u64,
) -> Result<(Pseudocoreset, Vec<LogRecord>)> {
    cfg.validate()?;
    check_pools(
        std::slice::from_ref(spec),
        std::slice::from_ref(pool),
        dataset,
    )?;
    let net = Network::new(spec)?;
    let mut pc = init_pseudocoreset(dataset, ipc, &mut derived(seed, &["init"]))?;
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        let mut rng = seeded(derive_seed(
            seed,
            &["bpc_fkl", &spec.id().0, &it.to_string()],
        ));
        let theta0 = sample_expert_checkpoint(pool, spec, cfg.min_expert_epoch, &mut rng)?;
        let coreset = pc.as_batch();
        let mut mu_x = theta0.clone();
        let mut mu_u = theta0;
        for _ in 0..cfg.fine_tune_steps {
            let rows = rand::seq::index::sample(
                &mut rng,
                dataset.train.len(),
                cfg.x_batch_size.min(dataset.train.len()),
            )
            .into_vec();
            sgd_step(
                &net,
                &mut mu_x.values,
                &dataset.train.select(&rows),
                cfg.lr_x,
            )?;
            sgd_step(&net, &mut mu_u.values, &coreset, cfg.lr_u)?;
        }
        if !mu_x.is_finite() || !mu_u.is_finite() {
            return Err(FbpcError::Divergence(format!(
                "fine-tuned means diverged at iteration {it}"
            )));
        }
        let u_loss = train_loss(spec, &mu_u, &coreset)?;
        let rows = iteration_rows(&pc, cfg.batch_size, seed, it);
        let eval = pc.rows_inputs(&rows);
        let labels: Vec<usize> = rows.iter().map(|&r| pc.labels()[r]).collect();
        let qx = WeightPosteriorApprox {
            spec: spec.clone(),
            mean: mu_x,
            std: cfg.spherical_std,
        };
        let qu = WeightPosteriorApprox {
            spec: spec.clone(),
            mean: mu_u,
            std: cfg.spherical_std,
        };
        let mut g = bpc_fkl_gradient(&qx, &qu, &eval, &labels, cfg.mc_samples, &mut rng)?;
        let raw_norm = norm(&g);
        let gn = apply_update(&mut pc, &rows, &mut g, cfg.coreset_lr, cfg.grad_clip);
        if pc.u.iter().any(|v| !v.is_finite()) {
            return Err(FbpcError::Divergence(format!(
                "coreset became non-finite at iteration {it}"
            )));
        }
        log.push(LogRecord {
            iteration: it,
            grad_norm: gn,
            loss_estimate: None,
            specs: vec![SpecRecord {
                spec_id: spec.id().0,
                map_loss: u_loss,
                map_steps: cfg.fine_tune_steps,
                grad_norm: raw_norm,
                loss_estimate: None,
            }],
        });
    }
    Ok((pc, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::init_params;

    #[test]
    fn zero_noise_equal_means_cancel() {
        let spec = ArchitectureSpec::mlp(2, &[6], 2);
        let mean = init_params(&spec, &mut seeded(0)).unwrap();
        let q = WeightPosteriorApprox {
            spec: spec.clone(),
            mean,
            std: 0.0,
        };
        let g =
            bpc_fkl_gradient(&q, &q, &[0.3, -0.2, 1.0, 0.5], &[0, 1], 4, &mut seeded(1)).unwrap();
        assert!(g.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = ArchitectureSpec::mlp(2, &[6], 2);
        let qx = WeightPosteriorApprox {
            spec: spec.clone(),
            mean: init_params(&spec, &mut seeded(0)).unwrap(),
            std: 0.1,
        };
        let qu = WeightPosteriorApprox {
            spec: spec.clone(),
            mean: init_params(&spec, &mut seeded(1)).unwrap(),
            std: 0.1,
        };
        let u = [0.3, -0.2, 1.0, 0.5];
        let a = bpc_fkl_gradient(&qx, &qu, &u, &[0, 1], 5, &mut seeded(7)).unwrap();
        let b = bpc_fkl_gradient(&qx, &qu, &u, &[0, 1], 5, &mut seeded(7)).unwrap();
        assert_eq!(a, b);
    }
}
