//! Pseudocoreset learning by function-space forward-KL matching.
//!
//! The gradient of `KL(ν_x ‖ ν_u)` with respect to the coreset inputs `u` is
//! estimated as
//!
//! ```text
//! (1/S) Σ_s [ −∇_u log p(ỹ | μ̂_x(u) + σ_x ⊙ ε_x⁽ˢ⁾) + ∇_u log p(ỹ | μ̂_u(u) + σ_u ⊙ ε_u⁽ˢ⁾) ]
//! ```
//!
//! where `μ̂_·(u)` is the anchor network evaluated at `u` and `σ_·` are held
//! constant. Because the sample only enters through the logits, the S
//! per-sample logit cotangents are averaged first and pulled back through
//! each anchor network once; the working set per sample is one `m × d`
//! array, never a parameter-sized buffer.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array_io::{ArrayFile, NamedArray};
use crate::data::{class_balanced_rows, Dataset};
use crate::error::{FbpcError, Result};
use crate::models::{ArchitectureSpec, Batch, Categorical, Network, OutputLikelihood};
use crate::posteriors::{
    collect_function_stats, fit_map, isotropic_stats, sample_expert_checkpoint, AdamConfig,
    ExcursionConfig, ExcursionData, FunctionalPosterior, TrajectoryPool,
};
use crate::rng::{derive_seed, derived, fill_standard_normal, seeded, FbpcRng};

/// Learnable inputs `u` with labels fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Pseudocoreset {
    pub u: Vec<f64>,
    pub input_shape: Vec<usize>,
    labels: Vec<usize>,
    pub ipc: usize,
    pub num_classes: usize,
}

impl Pseudocoreset {
    pub fn new(
        u: Vec<f64>,
        input_shape: Vec<usize>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let batch = Batch::new(u, input_shape, labels)?;
        batch.check_labels(num_classes)?;
        let mut counts = vec![0usize; num_classes];
        for &y in &batch.labels {
            counts[y] += 1;
        }
        let ipc = counts[0];
        if ipc == 0 || counts.iter().any(|&c| c != ipc) {
            return Err(FbpcError::Validation(format!(
                "pseudocoreset labels must be class-balanced, got counts {counts:?}"
            )));
        }
        Ok(Pseudocoreset {
            u: batch.inputs,
            input_shape: batch.input_shape,
            labels: batch.labels,
            ipc,
            num_classes,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            inputs: self.u.clone(),
            input_shape: self.input_shape.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn rows_inputs(&self, rows: &[usize]) -> Vec<f64> {
        let d = self.input_dim();
        rows.iter()
            .flat_map(|&r| self.u[r * d..(r + 1) * d].iter().copied())
            .collect()
    }

    pub fn save(&self, path: &Path, provenance: serde_json::Value) -> Result<()> {
        let mut f = ArrayFile::new();
        f.meta.insert("kind".into(), "pseudocoreset".into());
        f.meta.insert("ipc".into(), self.ipc.into());
        f.meta.insert("num_classes".into(), self.num_classes.into());
        f.meta.insert("provenance".into(), provenance);
        let mut shape = vec![self.len()];
        shape.extend_from_slice(&self.input_shape);
        f.push(NamedArray::f64("u", shape, self.u.clone()));
        f.push(NamedArray::labels("labels", &self.labels));
        f.write_atomic(path)
    }

    /// Returns the coreset and its provenance record.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let f = ArrayFile::read(path)?;
        let u = f.get("u", path)?;
        let labels = f.get("labels", path)?.as_labels(path)?;
        if u.shape.len() < 2 {
            return Err(FbpcError::format(path, "u needs a row dimension"));
        }
        let num_classes = f
            .meta
            .get("num_classes")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| FbpcError::format(path, "missing num_classes"))?
            as usize;
        let pc = Pseudocoreset::new(u.as_f64(), u.shape[1..].to_vec(), labels, num_classes)?;
        let prov = f
            .meta
            .get("provenance")
            .cloned()
            .unwrap_or(serde_json::Value::Null);
        Ok((pc, prov))
    }
}

/// Copy `ipc` uniformly chosen training rows per class.
pub fn init_pseudocoreset(
    dataset: &Dataset,
    ipc: usize,
    rng: &mut FbpcRng,
) -> Result<Pseudocoreset> {
    if ipc == 0 {
        return Err(FbpcError::Config("ipc must be at least 1".into()));
    }
    let rows = class_balanced_rows(dataset, ipc, rng)?;
    let b = dataset.train.select(&rows);
    Pseudocoreset::new(b.inputs, b.input_shape, b.labels, dataset.num_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FbpcConfig {
    /// Monte-Carlo samples per gradient estimate.
    pub mc_samples: usize,
    /// Excursion steps used for the empirical function covariance.
    pub excursion_steps: usize,
    pub lr_x: f64,
    pub lr_u: f64,
    /// Expert checkpoints are drawn from this epoch onwards.
    pub min_expert_epoch: usize,
    /// Coreset MAP fit stops once mean training loss is at most this.
    pub map_loss_threshold: f64,
    pub map_max_steps: usize,
    pub map_optimizer: AdamConfig,
    pub iterations: usize,
    pub coreset_lr: f64,
    /// Coreset rows updated per iteration; `None` means all.
    pub batch_size: Option<usize>,
    /// Minibatch size for the full-data excursion steps.
    pub x_batch_size: usize,
    pub isotropic: bool,
    pub sigma_floor: f64,
    /// Share ε between the two estimator terms.
    pub common_random_numbers: bool,
    /// Max gradient norm; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for FbpcConfig {
    fn default() -> Self {
        FbpcConfig {
            mc_samples: 32,
            excursion_steps: 30,
            lr_x: 0.05,
            lr_u: 0.01,
            min_expert_epoch: 2,
            map_loss_threshold: 0.1,
            map_max_steps: 5000,
            map_optimizer: AdamConfig::default(),
            iterations: 200,
            coreset_lr: 0.05,
            batch_size: None,
            x_batch_size: 256,
            isotropic: false,
            sigma_floor: crate::posteriors::DEFAULT_SIGMA_FLOOR,
            common_random_numbers: false,
            grad_clip: None,
        }
    }
}

impl FbpcConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_x", self.lr_x),
            ("lr_u", self.lr_u),
            ("map_loss_threshold", self.map_loss_threshold),
            ("coreset_lr", self.coreset_lr),
            ("sigma_floor", self.sigma_floor),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(FbpcError::Config(format!(
                "{name} must be positive, got {v}"
            )));
        }
        if self.mc_samples == 0
            || self.iterations == 0
            || self.x_batch_size == 0
            || self.map_max_steps == 0
        {
            return Err(FbpcError::Config(
                "sample, iteration and step counts must be positive".into(),
            ));
        }
        if !self.isotropic && self.excursion_steps < 2 {
            return Err(FbpcError::Config(
                "excursion_steps must be at least 2".into(),
            ));
        }
        if self.batch_size == Some(0) {
            return Err(FbpcError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Output of one estimator call.
#[derive(Debug, Clone, PartialEq)]
pub struct FbpcEstimate {
    /// `[m × input_shape]`
    pub gradient: Vec<f64>,
    /// `−(1/S) Σ log p(ỹ | f_x) + (1/S) Σ log p(ỹ | f_u)` over the same draws.
    pub loss: f64,
}

enum Noise<'a> {
    Stream {
        rng: &'a mut FbpcRng,
        shared: bool,
    },
    Fixed {
        x: &'a [Vec<f64>],
        u: &'a [Vec<f64>],
    },
}

fn check_pair(q_x: &FunctionalPosterior, q_u: &FunctionalPosterior) -> Result<()> {
    if q_x.spec != q_u.spec {
        return Err(FbpcError::Config(format!(
            "posteriors use different architectures ({} vs {})",
            q_x.spec.id(),
            q_u.spec.id()
        )));
    }
    if q_x.diag_std.len() != q_u.diag_std.len() {
        return Err(FbpcError::Dimension(
            "posteriors built at different evaluation sets".into(),
        ));
    }
    Ok(())
}

fn estimate_core<L: OutputLikelihood>(
    q_x: &FunctionalPosterior,
    q_u: &FunctionalPosterior,
    eval_inputs: &[f64],
    lik: &L,
    s: usize,
    mut noise: Noise<'_>,
) -> Result<FbpcEstimate> {
    check_pair(q_x, q_u)?;
    if s == 0 {
        return Err(FbpcError::Config(
            "need at least one Monte-Carlo sample".into(),
        ));
    }
    let mean_x = q_x.mean(eval_inputs)?;
    let mean_u = q_u.mean(eval_inputs)?;
    if lik.num_rows() * q_x.spec.num_classes != mean_x.len() {
        return Err(FbpcError::Dimension(
            "likelihood targets do not match evaluation rows".into(),
        ));
    }
    let len = mean_x.len();
    let mut cot_x = vec![0.0; len];
    let mut cot_u = vec![0.0; len];
    let mut eps_x = vec![0.0; len];
    let mut eps_u = vec![0.0; len];
    let mut f = vec![0.0; len];
    let (mut ll_x, mut ll_u) = (0.0, 0.0);
    for i in 0..s {
        match &mut noise {
            Noise::Stream { rng, shared } => {
                fill_standard_normal(rng, &mut eps_x);
                if *shared {
                    eps_u.copy_from_slice(&eps_x);
                } else {
                    fill_standard_normal(rng, &mut eps_u);
                }
            }
            Noise::Fixed { x, u } => {
                if x[i].len() != len || u[i].len() != len {
                    return Err(FbpcError::Dimension(
                        "fixed noise arrays have the wrong size".into(),
                    ));
                }
                eps_x.copy_from_slice(&x[i]);
                eps_u.copy_from_slice(&u[i]);
            }
        }
        for (mean, std, eps, cot, ll) in [
            (&mean_x, &q_x.diag_std, &eps_x, &mut cot_x, &mut ll_x),
            (&mean_u, &q_u.diag_std, &eps_u, &mut cot_u, &mut ll_u),
        ] {
            for j in 0..len {
                f[j] = mean[j] + std[j] * eps[j];
            }
            *ll += lik.log_prob(&f);
            cot.iter_mut()
                .zip(lik.grad_outputs(&f))
                .for_each(|(c, g)| *c += g);
        }
    }
    let inv = 1.0 / s as f64;
    cot_x.iter_mut().for_each(|c| *c *= inv);
    cot_u.iter_mut().for_each(|c| *c *= inv);
    let net = Network::new(&q_x.spec)?;
    let gx = net.vjp_inputs(&q_x.anchor.values, eval_inputs, &cot_x)?;
    let gu = net.vjp_inputs(&q_u.anchor.values, eval_inputs, &cot_u)?;
    Ok(FbpcEstimate {
        gradient: gx.iter().zip(&gu).map(|(a, b)| b - a).collect(),
        loss: (ll_u - ll_x) * inv,
    })
}

/// Monte-Carlo forward-KL gradient and loss surrogate for an arbitrary output likelihood.
pub fn fbpc_estimate<L: OutputLikelihood>(
    q_x: &FunctionalPosterior,
    q_u: &FunctionalPosterior,
    eval_inputs: &[f64],
    lik: &L,
    s: usize,
    common_random_numbers: bool,
    rng: &mut FbpcRng,
) -> Result<FbpcEstimate> {
    estimate_core(
        q_x,
        q_u,
        eval_inputs,
        lik,
        s,
        Noise::Stream {
            rng,
            shared: common_random_numbers,
        },
    )
}

/// Same estimator with caller-supplied noise draws (one array per sample and side).
pub fn fbpc_estimate_with_eps<L: OutputLikelihood>(
    q_x: &FunctionalPosterior,
    q_u: &FunctionalPosterior,
    eval_inputs: &[f64],
    lik: &L,
    eps_x: &[Vec<f64>],
    eps_u: &[Vec<f64>],
) -> Result<FbpcEstimate> {
    if eps_x.len() != eps_u.len() {
        return Err(FbpcError::Dimension("noise sample counts differ".into()));
    }
    estimate_core(
        q_x,
        q_u,
        eval_inputs,
        lik,
        eps_x.len(),
        Noise::Fixed { x: eps_x, u: eps_u },
    )
}

/// Categorical-likelihood gradient at the coreset points.
pub fn fbpc_gradient(
    q_x: &FunctionalPosterior,
    q_u: &FunctionalPosterior,
    eval_inputs: &[f64],
    labels: &[usize],
    s: usize,
    common_random_numbers: bool,
    rng: &mut FbpcRng,
) -> Result<Vec<f64>> {
    let lik = Categorical {
        labels,
        num_classes: q_x.spec.num_classes,
    };
    Ok(fbpc_estimate(q_x, q_u, eval_inputs, &lik, s, common_random_numbers, rng)?.gradient)
}

pub fn fbpc_loss_estimate(
    q_x: &FunctionalPosterior,
    q_u: &FunctionalPosterior,
    eval_inputs: &[f64],
    labels: &[usize],
    s: usize,
    common_random_numbers: bool,
    rng: &mut FbpcRng,
) -> Result<f64> {
    let lik = Categorical {
        labels,
        num_classes: q_x.spec.num_classes,
    };
    Ok(fbpc_estimate(q_x, q_u, eval_inputs, &lik, s, common_random_numbers, rng)?.loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecRecord {
    pub spec_id: String,
    pub map_loss: f64,
    pub map_steps: usize,
    pub grad_norm: f64,
    pub loss_estimate: Option<f64>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub grad_norm: f64,
    pub loss_estimate: Option<f64>,
    pub specs: Vec<SpecRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureGradient {
    /// Gradient for the selected rows, `[rows × input_shape]`.
    pub gradient: Vec<f64>,
    pub record: SpecRecord,
}

/// Gradient contribution of one architecture at one outer iteration.
pub fn architecture_gradient(
    spec: &ArchitectureSpec,
    pool: &TrajectoryPool,
    dataset: &Dataset,
    pc: &Pseudocoreset,
    rows: &[usize],
    cfg: &FbpcConfig,
    seed: u64,
) -> Result<ArchitectureGradient> {
    let mut rng = seeded(seed);
    let theta_x = sample_expert_checkpoint(pool, spec, cfg.min_expert_epoch, &mut rng)?;
    let coreset = pc.as_batch();
    let map = fit_map(
        spec,
        &coreset,
        &cfg.map_optimizer,
        cfg.map_loss_threshold,
        cfg.map_max_steps,
        &mut rng,
    )
    .map_err(|e| e.with_context(format!("coreset MAP fit for {}", spec.id())))?;
    let eval = pc.rows_inputs(rows);
    let labels: Vec<usize> = rows.iter().map(|&r| pc.labels()[r]).collect();
    let (q_x, q_u) = if cfg.isotropic {
        (
            isotropic_stats(spec, &theta_x, &eval)?,
            isotropic_stats(spec, &map.params, &eval)?,
        )
    } else {
        let x_cfg = ExcursionConfig {
            k: cfg.excursion_steps,
            lr: cfg.lr_x,
            sigma_floor: cfg.sigma_floor,
        };
        let u_cfg = ExcursionConfig {
            lr: cfg.lr_u,
            ..x_cfg
        };
        let x_data = ExcursionData::Minibatch {
            data: &dataset.train,
            batch_size: cfg.x_batch_size,
        };
        (
            collect_function_stats(spec, &theta_x, x_data, &eval, &x_cfg, &mut rng)?,
            collect_function_stats(
                spec,
                &map.params,
                ExcursionData::Full(&coreset),
                &eval,
                &u_cfg,
                &mut rng,
            )?,
        )
    };
    let lik = Categorical {
        labels: &labels,
        num_classes: spec.num_classes,
    };
    let est = fbpc_estimate(
        &q_x,
        &q_u,
        &eval,
        &lik,
        cfg.mc_samples,
        cfg.common_random_numbers,
        &mut rng,
    )?;
    Ok(ArchitectureGradient {
        record: SpecRecord {
            spec_id: spec.id().0,
            map_loss: map.loss,
            map_steps: map.steps,
            grad_norm: norm(&est.gradient),
            loss_estimate: Some(est.loss),
        },
        gradient: est.gradient,
    })
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Coreset rows touched at `iteration`: all rows, or a class-balanced subset of size `B`.
pub fn iteration_rows(
    pc: &Pseudocoreset,
    batch_size: Option<usize>,
    seed: u64,
    iteration: usize,
) -> Vec<usize> {
    let m = pc.len();
    match batch_size {
        Some(b) if b < m => {
            let per_class = (b / pc.num_classes).max(1);
            let mut rng = derived(seed, &["rows", &iteration.to_string()]);
            let mut rows = Vec::with_capacity(per_class * pc.num_classes);
            for c in 0..pc.num_classes {
                let members: Vec<usize> = (0..m).filter(|&r| pc.labels()[r] == c).collect();
                let pick =
                    rand::seq::index::sample(&mut rng, members.len(), per_class.min(members.len()));
                rows.extend(pick.into_iter().map(|i| members[i]));
            }
            rows.sort_unstable();
            rows
        }
        _ => (0..m).collect(),
    }
}

/// Per-architecture sub-seed for one outer iteration.
pub fn architecture_seed(seed: u64, spec: &ArchitectureSpec, iteration: usize) -> u64 {
    derive_seed(seed, &["fbpc", &spec.id().0, &iteration.to_string()])
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationGradient {
    pub rows: Vec<usize>,
    /// Sum over architectures, `[rows × input_shape]`.
    pub total: Vec<f64>,
    pub parts: Vec<ArchitectureGradient>,
}

/// Summed gradient over architectures for one outer iteration.
pub fn iteration_gradient(
    specs: &[ArchitectureSpec],
    pools: &[TrajectoryPool],
    dataset: &Dataset,
    pc: &Pseudocoreset,
    cfg: &FbpcConfig,
    seed: u64,
    iteration: usize,
) -> Result<IterationGradient> {
    let rows = iteration_rows(pc, cfg.batch_size, seed, iteration);
    let parts = specs
        .par_iter()
        .zip(pools.par_iter())
        .map(|(spec, pool)| {
            architecture_gradient(
                spec,
                pool,
                dataset,
                pc,
                &rows,
                cfg,
                architecture_seed(seed, spec, iteration),
            )
            .map_err(|e| e.with_context(format!("iteration {iteration}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = vec![0.0; rows.len() * pc.input_dim()];
    for p in &parts {
        total.iter_mut().zip(&p.gradient).for_each(|(t, g)| *t += g);
    }
    Ok(IterationGradient { rows, total, parts })
}

pub(crate) fn check_pools(
    specs: &[ArchitectureSpec],
    pools: &[TrajectoryPool],
    dataset: &Dataset,
) -> Result<()> {
    if specs.is_empty() {
        return Err(FbpcError::Config(
            "at least one architecture is required".into(),
        ));
    }
    if specs.len() != pools.len() {
        return Err(FbpcError::Config(format!(
            "{} specs but {} pools",
            specs.len(),
            pools.len()
        )));
    }
    for (s, p) in specs.iter().zip(pools) {
        if &p.spec != s {
            return Err(FbpcError::Config(format!(
                "no trajectory pool for {}",
                s.id()
            )));
        }
        if s.input_shape != dataset.input_shape() || s.num_classes != dataset.num_classes {
            return Err(FbpcError::Config(format!(
                "{} does not fit dataset {}",
                s.id(),
                dataset.name
            )));
        }
    }
    Ok(())
}

pub(crate) fn apply_update(
    pc: &mut Pseudocoreset,
    rows: &[usize],
    grad: &mut [f64],
    lr: f64,
    clip: Option<f64>,
) -> f64 {
    let gn = norm(grad);
    if let Some(c) = clip {
        if gn > c {
            grad.iter_mut().for_each(|g| *g *= c / gn);
        }
    }
    let d = pc.input_dim();
    for (k, &r) in rows.iter().enumerate() {
        for i in 0..d {
            pc.u[r * d + i] -= lr * grad[k * d + i];
        }
    }
    gn
}

/// Multi-architecture training loop. Returns the learned coreset and one log
/// record per outer iteration.
pub fn train_fbpc(
    specs: &[ArchitectureSpec],
    pools: &[TrajectoryPool],
    dataset: &Dataset,
    ipc: usize,
    cfg: &FbpcConfig,
    seed: u64,
) -> Result<(Pseudocoreset, Vec<LogRecord>)> {
    cfg.validate()?;
    check_pools(specs, pools, dataset)?;
    let mut pc = init_pseudocoreset(dataset, ipc, &mut derived(seed, &["init"]))?;
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        let mut g = iteration_gradient(specs, pools, dataset, &pc, cfg, seed, it)?;
        let gn = apply_update(
            &mut pc,
            &g.rows,
            &mut g.total,
            cfg.coreset_lr,
            cfg.grad_clip,
        );
        if pc.u.iter().any(|v| !v.is_finite()) {
            return Err(FbpcError::Divergence(format!(
                "coreset became non-finite at iteration {it}"
            )));
        }
        log.push(LogRecord {
            iteration: it,
            grad_norm: gn,
            loss_estimate: g.parts.iter().map(|p| p.record.loss_estimate).sum(),
            specs: g.parts.into_iter().map(|p| p.record).collect(),
        });
    }
    Ok((pc, log))
}
