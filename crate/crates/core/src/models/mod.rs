//! Small differentiable classifiers, the categorical likelihood, and their
//! gradients with respect to parameters and inputs.

mod likelihood;
mod network;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FbpcError, Result};
use crate::rng::FbpcRng;

pub use likelihood::{
    categorical_logit_grad, log_likelihood, log_softmax_row, mean_nll, softmax_row, Categorical,
    GaussianRegression, OutputLikelihood,
};
pub use network::{Network, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "mlp")]
    Mlp,
    /// Two 3x3 conv blocks with 2x2 average pooling and a linear head.
    #[serde(rename = "convnet-small")]
    ConvnetSmall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    None,
    Instance,
    Group,
    Layer,
    Batch,
}

impl Normalization {
    pub const ALL_NORMALIZED: [Normalization; 4] = [
        Normalization::Instance,
        Normalization::Group,
        Normalization::Layer,
        Normalization::Batch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Normalization::None => "none",
            Normalization::Instance => "instance",
            Normalization::Group => "group",
            Normalization::Layer => "layer",
            Normalization::Batch => "batch",
        }
    }
}

/// Architecture of a small classifier `g_θ : X → R^d`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub family: Family,
    /// Hidden layer widths for `mlp`; conv channel counts for `convnet-small`.
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub normalization: Normalization,
    /// `[features]` for `mlp`, `[channels, height, width]` for `convnet-small`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl ArchitectureSpec {
    pub fn mlp(input_dim: usize, hidden_widths: &[usize], num_classes: usize) -> Self {
        ArchitectureSpec {
            family: Family::Mlp,
            hidden_widths: hidden_widths.to_vec(),
            activation: Activation::Relu,
            normalization: Normalization::None,
            input_shape: vec![input_dim],
            num_classes,
        }
    }

    pub fn convnet_small(
        channels: usize,
        side: usize,
        widths: [usize; 2],
        num_classes: usize,
    ) -> Self {
        ArchitectureSpec {
            family: Family::ConvnetSmall,
            hidden_widths: widths.to_vec(),
            activation: Activation::Relu,
            normalization: Normalization::None,
            input_shape: vec![channels, side, side],
            num_classes,
        }
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Stable identifier derived from the canonical JSON encoding.
    pub fn id(&self) -> SpecId {
        let json = serde_json::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(json.as_bytes());
        let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
        SpecId(format!(
            "{}-{}-{hex}",
            self.family_tag(),
            self.normalization.name()
        ))
    }

    fn family_tag(&self) -> &'static str {
        match self.family {
            Family::Mlp => "mlp",
            Family::ConvnetSmall => "convnet",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(FbpcError::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.hidden_widths.contains(&0) {
            return Err(FbpcError::Config("hidden widths must be positive".into()));
        }
        match self.family {
            Family::Mlp => {
                if self.input_shape.len() != 1 || self.input_shape[0] == 0 {
                    return Err(FbpcError::Config(format!(
                        "mlp expects a one-dimensional input shape, got {:?}",
                        self.input_shape
                    )));
                }
                if self.normalization == Normalization::Instance {
                    return Err(FbpcError::Config(
                        "instance normalization needs spatial inputs; use convnet-small".into(),
                    ));
                }
            }
            Family::ConvnetSmall => {
                if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
                    return Err(FbpcError::Config(format!(
                        "convnet-small expects [channels, height, width], got {:?}",
                        self.input_shape
                    )));
                }
                if self.hidden_widths.len() != 2 {
                    return Err(FbpcError::Config(format!(
                        "convnet-small takes exactly two conv widths, got {}",
                        self.hidden_widths.len()
                    )));
                }
                if self.input_shape[1] < 4 || self.input_shape[2] < 4 {
                    return Err(FbpcError::Config(
                        "convnet-small needs images of at least 4x4".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpecId(pub String);

impl fmt::Display for SpecId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Flat parameter vector tagged with the architecture it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub spec_id: SpecId,
}

impl ParameterVector {
    pub fn new(spec: &ArchitectureSpec, values: Vec<f64>) -> Result<Self> {
        let net = Network::new(spec)?;
        if values.len() != net.num_params() {
            return Err(FbpcError::Dimension(format!(
                "parameter vector has length {}, spec needs {}",
                values.len(),
                net.num_params()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FbpcError::Validation(
                "parameter vector has non-finite entries".into(),
            ));
        }
        Ok(ParameterVector {
            values,
            spec_id: spec.id(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_spec(&self, spec: &ArchitectureSpec) -> Result<()> {
        if self.spec_id != spec.id() {
            return Err(FbpcError::Config(format!(
                "parameters belong to {} but spec is {}",
                self.spec_id,
                spec.id()
            )));
        }
        Ok(())
    }
}

/// A labelled set of inputs, stored row-major as `[n × input_shape]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub input_shape: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, input_shape: Vec<usize>, labels: Vec<usize>) -> Result<Self> {
        let dim: usize = input_shape.iter().product();
        if dim == 0 || inputs.len() != dim * labels.len() {
            return Err(FbpcError::Dimension(format!(
                "{} input values do not form {} rows of shape {:?}",
                inputs.len(),
                labels.len(),
                input_shape
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(FbpcError::Validation(
                "batch inputs contain non-finite values".into(),
            ));
        }
        Ok(Batch {
            inputs,
            input_shape,
            labels,
        })
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

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.input_dim();
        &self.inputs[i * d..(i + 1) * d]
    }

    pub fn is_image(&self) -> bool {
        self.input_shape.len() == 3
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        let d = self.input_dim();
        let mut inputs = Vec::with_capacity(rows.len() * d);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            inputs.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        Batch {
            inputs,
            input_shape: self.input_shape.clone(),
            labels,
        }
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= num_classes) {
            return Err(FbpcError::Validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(())
    }
}

/// Draw from the prior: weights ~ N(0, 1/fan_in), biases zero, norm scales one.
pub fn init_params(spec: &ArchitectureSpec, rng: &mut FbpcRng) -> Result<ParameterVector> {
    let net = Network::new(spec)?;
    Ok(ParameterVector {
        values: net.sample_prior(rng),
        spec_id: spec.id(),
    })
}

/// Logits `[m × d]` for `m` rows of `inputs`.
pub fn forward(
    spec: &ArchitectureSpec,
    params: &ParameterVector,
    inputs: &[f64],
) -> Result<Vec<f64>> {
    params.check_spec(spec)?;
    Network::new(spec)?.forward(&params.values, inputs)
}

/// Gradient of the summed categorical log-likelihood with respect to the parameters.
pub fn grad_wrt_params(
    spec: &ArchitectureSpec,
    params: &ParameterVector,
    batch: &Batch,
) -> Result<Vec<f64>> {
    params.check_spec(spec)?;
    batch.check_labels(spec.num_classes)?;
    let net = Network::new(spec)?;
    let (g, _) = net.loglik_grad_params(&params.values, &batch.inputs, &batch.labels)?;
    Ok(g)
}

/// Gradient with respect to the inputs of
/// `log_likelihood(forward(params, inputs) + logit_offset, labels)`.
/// The parameters are held constant.
pub fn grad_wrt_inputs(
    spec: &ArchitectureSpec,
    params: &ParameterVector,
    inputs: &[f64],
    labels: &[usize],
    logit_offset: &[f64],
) -> Result<Vec<f64>> {
    params.check_spec(spec)?;
    let net = Network::new(spec)?;
    let m = net.rows(inputs)?;
    if labels.len() != m || logit_offset.len() != m * spec.num_classes {
        return Err(FbpcError::Dimension(format!(
            "{m} rows but {} labels and {} offset entries",
            labels.len(),
            logit_offset.len()
        )));
    }
    let mut logits = net.forward(&params.values, inputs)?;
    for (l, o) in logits.iter_mut().zip(logit_offset) {
        *l += o;
    }
    let cot = categorical_logit_grad(&logits, labels, spec.num_classes)?;
    net.vjp_inputs(&params.values, inputs, &cot)
}
