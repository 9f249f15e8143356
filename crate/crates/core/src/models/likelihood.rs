use crate::error::{FbpcError, Result};

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn classes_of(logits: &[f64], labels: &[usize]) -> Result<usize> {
    if labels.is_empty() {
        return if logits.is_empty() {
            Ok(0)
        } else {
            Err(FbpcError::Dimension("logits given for zero labels".into()))
        };
    }
    if !logits.len().is_multiple_of(labels.len()) {
        return Err(FbpcError::Dimension(format!(
            "{} logits cannot be split over {} rows",
            logits.len(),
            labels.len()
        )));
    }
    let d = logits.len() / labels.len();
    if let Some(&bad) = labels.iter().find(|&&y| y >= d) {
        return Err(FbpcError::Validation(format!(
            "label {bad} out of range for {d} classes"
        )));
    }
    Ok(d)
}

/// `Σ_j [logits[j, y_j] − logsumexp_c logits[j, c]]`.
pub fn log_likelihood(logits: &[f64], labels: &[usize]) -> Result<f64> {
    let d = classes_of(logits, labels)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(j, &y)| {
            let row = &logits[j * d..(j + 1) * d];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            (row[y] - lse).min(0.0)
        })
        .sum())
}

pub fn mean_nll(logits: &[f64], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    Ok(-log_likelihood(logits, labels)? / labels.len() as f64)
}

/// `∂/∂logits` of the summed categorical log-likelihood: `onehot − softmax` per row.
pub fn categorical_logit_grad(
    logits: &[f64],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<f64>> {
    if logits.len() != labels.len() * num_classes {
        return Err(FbpcError::Dimension(format!(
            "{} logits for {} rows of {num_classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(logits.len());
    for (j, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(FbpcError::Validation(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        let sm = softmax_row(&logits[j * num_classes..(j + 1) * num_classes]);
        out.extend(
            sm.iter()
                .enumerate()
                .map(|(c, p)| if c == y { 1.0 - p } else { -p }),
        );
    }
    Ok(out)
}

/// Likelihood of targets given network outputs `f` of shape `[m × d]`.
pub trait OutputLikelihood: Sync {
    fn num_rows(&self) -> usize;
    fn log_prob(&self, outputs: &[f64]) -> f64;
    /// `∂ log p / ∂ outputs`, same layout as `outputs`.
    fn grad_outputs(&self, outputs: &[f64]) -> Vec<f64>;
}

/// Softmax categorical likelihood over fixed labels.
#[derive(Debug, Clone, Copy)]
pub struct Categorical<'a> {
    pub labels: &'a [usize],
    pub num_classes: usize,
}

impl OutputLikelihood for Categorical<'_> {
    fn num_rows(&self) -> usize {
        self.labels.len()
    }

    fn log_prob(&self, outputs: &[f64]) -> f64 {
        log_likelihood(outputs, self.labels).expect("shape checked by caller")
    }

    fn grad_outputs(&self, outputs: &[f64]) -> Vec<f64> {
        categorical_logit_grad(outputs, self.labels, self.num_classes)
            .expect("shape checked by caller")
    }
}

/// Isotropic Gaussian observation model `y ~ N(f, σ² I)`, up to its constant.
#[derive(Debug, Clone, Copy)]
pub struct GaussianRegression<'a> {
    pub targets: &'a [f64],
    pub num_outputs: usize,
    pub sigma_obs: f64,
}

impl OutputLikelihood for GaussianRegression<'_> {
    fn num_rows(&self) -> usize {
        self.targets.len() / self.num_outputs
    }

    fn log_prob(&self, outputs: &[f64]) -> f64 {
        let s2 = self.sigma_obs * self.sigma_obs;
        -outputs
            .iter()
            .zip(self.targets)
            .map(|(f, y)| (y - f) * (y - f))
            .sum::<f64>()
            / (2.0 * s2)
    }

    fn grad_outputs(&self, outputs: &[f64]) -> Vec<f64> {
        let s2 = self.sigma_obs * self.sigma_obs;
        outputs
            .iter()
            .zip(self.targets)
            .map(|(f, y)| (y - f) / s2)
            .collect()
    }
}
