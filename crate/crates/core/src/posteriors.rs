//! Gaussian approximations to finite-dimensional function-space posteriors.
//!
//! The full-data MAP comes from stored expert trajectories; the coreset MAP is
//! refit from a prior draw. Around each MAP, `K` extra SGD steps give function
//! samples whose per-entry variance is the diagonal covariance.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array_io::{read_json, write_json_atomic, ArrayFile, NamedArray};
use crate::data::Dataset;
use crate::error::{FbpcError, Result};
use crate::models::{
    init_params, mean_nll, ArchitectureSpec, Batch, Network, ParameterVector, SpecId,
};
use crate::rng::{derive_seed, fill_standard_normal, seeded, FbpcRng};

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-6;

/// Plain minibatch SGD on the mean cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One SGD step on the mean cross-entropy of `batch`. Returns the loss before the step.
pub fn sgd_step(net: &Network, params: &mut [f64], batch: &Batch, lr: f64) -> Result<f64> {
    let (g, ll) = net.loglik_grad_params(params, &batch.inputs, &batch.labels)?;
    let scale = lr / batch.len() as f64;
    params
        .iter_mut()
        .zip(&g)
        .for_each(|(p, gi)| *p += scale * gi);
    Ok(-ll / batch.len() as f64)
}

fn minibatch(data: &Batch, size: usize, rng: &mut FbpcRng) -> Batch {
    if size >= data.len() {
        return data.clone();
    }
    let rows = rand::seq::index::sample(rng, data.len(), size).into_vec();
    data.select(&rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub spec_id: SpecId,
    /// `(epoch, params)` with epoch 0 the initialization.
    pub checkpoints: Vec<(usize, ParameterVector)>,
    pub training: SgdConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPool {
    pub spec: ArchitectureSpec,
    pub trajectories: Vec<Trajectory>,
    pub dataset: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub n_traj: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            n_traj: 10,
            epochs: 50,
            lr: 0.01,
            batch_size: 64,
        }
    }
}

fn run_trajectory(
    spec: &ArchitectureSpec,
    net: &Network,
    data: &Batch,
    cfg: &ExpertConfig,
    index: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = seeded(seed);
    let mut params = init_params(spec, &mut rng)?;
    let mut checkpoints = Vec::with_capacity(cfg.epochs + 1);
    checkpoints.push((0, params.clone()));
    let n = data.len();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mb = data.select(chunk);
            let loss = sgd_step(net, &mut params.values, &mb, cfg.lr)?;
            if !loss.is_finite() || !params.is_finite() {
                return Err(FbpcError::Divergence(format!(
                    "expert trajectory {index} for {} diverged at epoch {epoch}",
                    spec.id()
                )));
            }
        }
        checkpoints.push((epoch, params.clone()));
    }
    Ok(Trajectory {
        spec_id: spec.id(),
        checkpoints,
        training: SgdConfig {
            lr: cfg.lr,
            batch_size: cfg.batch_size,
        },
        seed,
    })
}

/// Train `n_traj` independent SGD runs on the full training set, keeping a
/// checkpoint after every epoch.
pub fn generate_expert_trajectories(
    spec: &ArchitectureSpec,
    dataset: &Dataset,
    cfg: &ExpertConfig,
    seed: u64,
) -> Result<TrajectoryPool> {
    if cfg.n_traj == 0 || cfg.epochs == 0 {
        return Err(FbpcError::Config(
            "n_traj and epochs must be at least 1".into(),
        ));
    }
    if !(cfg.lr > 0.0) || cfg.batch_size == 0 {
        return Err(FbpcError::Config(
            "expert lr and batch size must be positive".into(),
        ));
    }
    let net = Network::new(spec)?;
    dataset.train.check_labels(spec.num_classes)?;
    let id = spec.id();
    let trajectories = (0..cfg.n_traj)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(seed, &["expert", &id.0, &i.to_string()]);
            run_trajectory(spec, &net, &dataset.train, cfg, i, s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryPool {
        spec: spec.clone(),
        trajectories,
        dataset: dataset.name.clone(),
        seed,
    })
}

#[derive(Serialize, Deserialize)]
struct PoolManifest {
    format: String,
    version: u32,
    spec_id: SpecId,
    spec: ArchitectureSpec,
    dataset: String,
    seed: u64,
    optimizer: String,
    lr: f64,
    batch_size: usize,
    trajectories: Vec<ManifestTrajectory>,
}

#[derive(Serialize, Deserialize)]
struct ManifestTrajectory {
    index: usize,
    seed: u64,
    checkpoints: Vec<ManifestCheckpoint>,
}

#[derive(Serialize, Deserialize)]
struct ManifestCheckpoint {
    epoch: usize,
    file: String,
}

pub const POOL_MANIFEST: &str = "manifest.json";

impl TrajectoryPool {
    pub fn max_epoch(&self) -> usize {
        self.trajectories
            .iter()
            .filter_map(|t| t.checkpoints.last().map(|c| c.0))
            .max()
            .unwrap_or(0)
    }

    /// Persist as a directory: one array file per checkpoint and a JSON manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| FbpcError::io(dir, e))?;
        let training = self
            .trajectories
            .first()
            .map(|t| t.training)
            .unwrap_or(SgdConfig {
                lr: 0.0,
                batch_size: 0,
            });
        let mut entries = Vec::new();
        for (i, t) in self.trajectories.iter().enumerate() {
            let mut cps = Vec::new();
            for (epoch, p) in &t.checkpoints {
                let file = format!("traj{i:03}_epoch{epoch:03}.fbpa");
                let mut f = ArrayFile::new();
                f.meta.insert("kind".into(), "checkpoint".into());
                f.meta.insert("spec_id".into(), p.spec_id.0.clone().into());
                f.meta.insert("trajectory".into(), i.into());
                f.meta.insert("epoch".into(), (*epoch).into());
                f.push(NamedArray::f64("params", vec![p.len()], p.values.clone()));
                f.write_atomic(&dir.join(&file))?;
                cps.push(ManifestCheckpoint {
                    epoch: *epoch,
                    file,
                });
            }
            entries.push(ManifestTrajectory {
                index: i,
                seed: t.seed,
                checkpoints: cps,
            });
        }
        let manifest = PoolManifest {
            format: "fbpc-pool".into(),
            version: 1,
            spec_id: self.spec.id(),
            spec: self.spec.clone(),
            dataset: self.dataset.clone(),
            seed: self.seed,
            optimizer: "sgd".into(),
            lr: training.lr,
            batch_size: training.batch_size,
            trajectories: entries,
        };
        write_json_atomic(&dir.join(POOL_MANIFEST), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(POOL_MANIFEST);
        let m: PoolManifest = read_json(&mpath)?;
        if m.format != "fbpc-pool" {
            return Err(FbpcError::format(&mpath, "not a trajectory pool manifest"));
        }
        if m.spec.id() != m.spec_id {
            return Err(FbpcError::format(&mpath, "spec_id does not match spec"));
        }
        let training = SgdConfig {
            lr: m.lr,
            batch_size: m.batch_size,
        };
        let mut trajectories = Vec::with_capacity(m.trajectories.len());
        for t in m.trajectories {
            let mut checkpoints = Vec::with_capacity(t.checkpoints.len());
            let mut last = None;
            for cp in t.checkpoints {
                if last.is_some_and(|l| cp.epoch <= l) {
                    return Err(FbpcError::format(&mpath, "checkpoint epochs must increase"));
                }
                last = Some(cp.epoch);
                let path: PathBuf = dir.join(&cp.file);
                let f = ArrayFile::read(&path)?;
                let params = ParameterVector::new(&m.spec, f.get("params", &path)?.as_f64())?;
                checkpoints.push((cp.epoch, params));
            }
            trajectories.push(Trajectory {
                spec_id: m.spec_id.clone(),
                checkpoints,
                training,
                seed: t.seed,
            });
        }
        if trajectories.is_empty() {
            return Err(FbpcError::format(&mpath, "pool has no trajectories"));
        }
        Ok(TrajectoryPool {
            spec: m.spec,
            trajectories,
            dataset: m.dataset,
            seed: m.seed,
        })
    }
}

/// Uniform draw over all `(trajectory, epoch ≥ min_epoch)` checkpoints.
pub fn sample_expert_checkpoint(
    pool: &TrajectoryPool,
    spec: &ArchitectureSpec,
    min_epoch: usize,
    rng: &mut FbpcRng,
) -> Result<ParameterVector> {
    if &pool.spec != spec {
        return Err(FbpcError::Config(format!(
            "pool holds {} but {} was requested",
            pool.spec.id(),
            spec.id()
        )));
    }
    let candidates: Vec<&ParameterVector> = pool
        .trajectories
        .iter()
        .flat_map(|t| {
            t.checkpoints
                .iter()
                .filter(|(e, _)| *e >= min_epoch)
                .map(|(_, p)| p)
        })
        .collect();
    if candidates.is_empty() {
        return Err(FbpcError::Config(format!(
            "no checkpoints at epoch {min_epoch} or later (pool max epoch {})",
            pool.max_epoch()
        )));
    }
    Ok(candidates[rng.random_range(0..candidates.len())].clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapFit {
    pub params: ParameterVector,
    pub loss: f64,
    pub steps: usize,
}

/// Adam from a fresh prior draw until the mean training loss is at most `gamma`.
pub fn fit_map(
    spec: &ArchitectureSpec,
    batch: &Batch,
    opt: &AdamConfig,
    gamma: f64,
    max_steps: usize,
    rng: &mut FbpcRng,
) -> Result<MapFit> {
    if !(gamma > 0.0) {
        return Err(FbpcError::Config(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    if batch.is_empty() {
        return Err(FbpcError::Config(
            "cannot fit a MAP on an empty batch".into(),
        ));
    }
    let net = Network::new(spec)?;
    batch.check_labels(spec.num_classes)?;
    let mut params = init_params(spec, rng)?;
    let p = params.len();
    let (mut m, mut v) = (vec![0.0; p], vec![0.0; p]);
    let n = batch.len() as f64;
    let mut loss = f64::NAN;
    for step in 0..=max_steps {
        let (g, ll) = net.loglik_grad_params(&params.values, &batch.inputs, &batch.labels)?;
        loss = -ll / n;
        if !loss.is_finite() {
            return Err(FbpcError::Divergence(format!(
                "MAP fit loss became non-finite at step {step}"
            )));
        }
        if loss <= gamma {
            return Ok(MapFit {
                params,
                loss,
                steps: step,
            });
        }
        if step == max_steps {
            break;
        }
        let t = (step + 1) as i32;
        let (b1, b2) = (opt.beta1, opt.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for i in 0..p {
            // descend the mean negative log-likelihood
            let gi = -g[i] / n;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            params.values[i] -= opt.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + opt.eps);
        }
    }
    Err(FbpcError::NonConvergence {
        steps: max_steps,
        last_loss: loss,
        context: String::new(),
    })
}

/// Gaussian over function values at `m` evaluation points: mean
/// `forward(anchor, u)` recomputed at every use, constant diagonal std.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalPosterior {
    pub spec: ArchitectureSpec,
    pub anchor: ParameterVector,
    /// `[m × d]`, every entry at least the floor it was built with.
    pub diag_std: Vec<f64>,
}

impl FunctionalPosterior {
    pub fn rows(&self) -> usize {
        self.diag_std.len() / self.spec.num_classes
    }

    pub fn mean(&self, eval_inputs: &[f64]) -> Result<Vec<f64>> {
        let net = Network::new(&self.spec)?;
        let out = net.forward(&self.anchor.values, eval_inputs)?;
        if out.len() != self.diag_std.len() {
            return Err(FbpcError::Dimension(format!(
                "posterior built for {} rows, evaluated at {}",
                self.rows(),
                out.len() / self.spec.num_classes
            )));
        }
        Ok(out)
    }
}

/// Where the excursion steps draw their data from.
#[derive(Debug, Clone, Copy)]
pub enum ExcursionData<'a> {
    Full(&'a Batch),
    Minibatch { data: &'a Batch, batch_size: usize },
}

/// Function values `g_{θ^(k)}(u)` for `k = 1..K`, where `θ^(0) = theta0` and
/// each `θ^(k)` is one SGD step from `θ^(k-1)`.
pub fn excursion_function_values(
    spec: &ArchitectureSpec,
    theta0: &ParameterVector,
    data: ExcursionData<'_>,
    eval_inputs: &[f64],
    k: usize,
    lr: f64,
    rng: &mut FbpcRng,
) -> Result<Vec<Vec<f64>>> {
    theta0.check_spec(spec)?;
    let net = Network::new(spec)?;
    let mut theta = theta0.values.clone();
    let mut values = Vec::with_capacity(k);
    for step in 1..=k {
        match data {
            ExcursionData::Full(b) => sgd_step(&net, &mut theta, b, lr)?,
            ExcursionData::Minibatch { data, batch_size } => {
                sgd_step(&net, &mut theta, &minibatch(data, batch_size, rng), lr)?
            }
        };
        let f = net.forward(&theta, eval_inputs)?;
        if f.iter().any(|v| !v.is_finite()) {
            return Err(FbpcError::Divergence(format!(
                "function values became non-finite at excursion step {step}"
            )));
        }
        values.push(f);
    }
    Ok(values)
}

/// Two-pass population standard deviation per entry, floored at `sigma_floor`.
pub fn diag_std_from_samples(samples: &[Vec<f64>], sigma_floor: f64) -> Vec<f64> {
    let k = samples.len() as f64;
    let len = samples.first().map_or(0, Vec::len);
    (0..len)
        .map(|i| {
            let mean = samples.iter().map(|s| s[i]).sum::<f64>() / k;
            let var = samples.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / k;
            var.sqrt().max(sigma_floor)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExcursionConfig {
    pub k: usize,
    pub lr: f64,
    pub sigma_floor: f64,
}

/// Anchor at `theta0`, diagonal std from `K` SGD excursion steps.
pub fn collect_function_stats(
    spec: &ArchitectureSpec,
    theta0: &ParameterVector,
    data: ExcursionData<'_>,
    eval_inputs: &[f64],
    cfg: &ExcursionConfig,
    rng: &mut FbpcRng,
) -> Result<FunctionalPosterior> {
    if cfg.k < 2 {
        return Err(FbpcError::Config(format!(
            "K must be at least 2, got {}",
            cfg.k
        )));
    }
    if !(cfg.sigma_floor > 0.0) || cfg.lr < 0.0 {
        return Err(FbpcError::Config(
            "sigma_floor must be positive and lr non-negative".into(),
        ));
    }
    let samples = excursion_function_values(spec, theta0, data, eval_inputs, cfg.k, cfg.lr, rng)?;
    Ok(FunctionalPosterior {
        spec: spec.clone(),
        anchor: theta0.clone(),
        diag_std: diag_std_from_samples(&samples, cfg.sigma_floor),
    })
}

/// Unit-covariance variant.
pub fn isotropic_stats(
    spec: &ArchitectureSpec,
    theta0: &ParameterVector,
    eval_inputs: &[f64],
) -> Result<FunctionalPosterior> {
    theta0.check_spec(spec)?;
    let m = Network::new(spec)?.rows(eval_inputs)?;
    Ok(FunctionalPosterior {
        spec: spec.clone(),
        anchor: theta0.clone(),
        diag_std: vec![1.0; m * spec.num_classes],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionSamples {
    pub values: Vec<Vec<f64>>,
    pub eps: Vec<Vec<f64>>,
}

/// Reparameterized draws `mean + diag_std ⊙ ε` with the given noise.
pub fn sample_functions_with_eps(
    post: &FunctionalPosterior,
    eval_inputs: &[f64],
    eps: Vec<Vec<f64>>,
) -> Result<FunctionSamples> {
    let mean = post.mean(eval_inputs)?;
    let values = eps
        .iter()
        .map(|e| {
            if e.len() != mean.len() {
                return Err(FbpcError::Dimension(
                    "noise array has the wrong size".into(),
                ));
            }
            Ok(mean
                .iter()
                .zip(&post.diag_std)
                .zip(e)
                .map(|((m, s), z)| m + s * z)
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FunctionSamples { values, eps })
}

pub fn sample_functions(
    post: &FunctionalPosterior,
    eval_inputs: &[f64],
    s: usize,
    rng: &mut FbpcRng,
) -> Result<FunctionSamples> {
    if s == 0 {
        return Err(FbpcError::Config("need at least one sample".into()));
    }
    let eps = (0..s)
        .map(|_| {
            let mut e = vec![0.0; post.diag_std.len()];
            fill_standard_normal(rng, &mut e);
            e
        })
        .collect();
    sample_functions_with_eps(post, eval_inputs, eps)
}

/// Mean training loss of `params` on `batch`.
pub fn train_loss(spec: &ArchitectureSpec, params: &ParameterVector, batch: &Batch) -> Result<f64> {
    let logits = crate::models::forward(spec, params, &batch.inputs)?;
    mean_nll(&logits, &batch.labels)
}
