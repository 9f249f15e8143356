//! Desk-scale classification datasets and input corruptions.

use std::f64::consts::PI;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array_io::{ArrayFile, NamedArray};
use crate::error::{FbpcError, Result};
use crate::models::Batch;
use crate::rng::{derived, standard_normal, FbpcRng};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub train: Batch,
    pub test: Batch,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        train: Batch,
        test: Batch,
        num_classes: usize,
    ) -> Result<Self> {
        if train.input_shape != test.input_shape {
            return Err(FbpcError::Dimension(format!(
                "train shape {:?} differs from test shape {:?}",
                train.input_shape, test.input_shape
            )));
        }
        train.check_labels(num_classes)?;
        test.check_labels(num_classes)?;
        let ds = Dataset {
            name: name.into(),
            train,
            test,
            num_classes,
        };
        if let Some(c) = ds.class_counts().iter().position(|&n| n == 0) {
            return Err(FbpcError::Validation(format!(
                "class {c} has no training examples"
            )));
        }
        Ok(ds)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.train.input_shape
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.train.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Training row indices grouped by class.
    pub fn rows_by_class(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.train.labels.iter().enumerate() {
            rows[y].push(i);
        }
        rows
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = ArrayFile::new();
        f.meta.insert("kind".into(), "dataset".into());
        f.meta.insert("name".into(), self.name.clone().into());
        f.meta.insert("num_classes".into(), self.num_classes.into());
        f.meta.insert(
            "input_shape".into(),
            serde_json::to_value(self.input_shape()).expect("shape"),
        );
        let shape = |b: &Batch| {
            let mut s = vec![b.len()];
            s.extend_from_slice(&b.input_shape);
            s
        };
        f.push(NamedArray::f64(
            "train_inputs",
            shape(&self.train),
            self.train.inputs.clone(),
        ));
        f.push(NamedArray::labels("train_labels", &self.train.labels));
        f.push(NamedArray::f64(
            "test_inputs",
            shape(&self.test),
            self.test.inputs.clone(),
        ));
        f.push(NamedArray::labels("test_labels", &self.test.labels));
        f.write_atomic(path)
    }

    /// Load a dataset from the array container. Accepts files written by
    /// [`Dataset::save`] or any file holding `train_inputs`, `train_labels`,
    /// `test_inputs`, `test_labels` with a leading row dimension.
    pub fn load(path: &Path) -> Result<Self> {
        let f = ArrayFile::read(path)?;
        let batch = |inputs: &str, labels: &str| -> Result<Batch> {
            let x = f.get(inputs, path)?;
            let y = f.get(labels, path)?;
            if x.shape.len() < 2 {
                return Err(FbpcError::format(
                    path,
                    format!("{inputs} needs a row dimension"),
                ));
            }
            Batch::new(x.as_f64(), x.shape[1..].to_vec(), y.as_labels(path)?)
        };
        let train = batch("train_inputs", "train_labels")?;
        let test = batch("test_inputs", "test_labels")?;
        let inferred = train
            .labels
            .iter()
            .chain(&test.labels)
            .max()
            .map_or(0, |m| m + 1);
        let num_classes = f
            .meta
            .get("num_classes")
            .and_then(|v| v.as_u64())
            .map_or(inferred, |v| v as usize);
        let name = f
            .meta
            .get("name")
            .and_then(|v| v.as_str())
            .map(str::to_owned)
            .unwrap_or_else(|| {
                path.file_stem()
                    .map_or("external".into(), |s| s.to_string_lossy().into_owned())
            });
        Dataset::new(name, train, test, num_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    TwoMoons,
    GaussianBlobs,
    Rings,
}

impl FromStr for SyntheticKind {
    type Err = FbpcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_moons" => Ok(SyntheticKind::TwoMoons),
            "gaussian_blobs" => Ok(SyntheticKind::GaussianBlobs),
            "rings" => Ok(SyntheticKind::Rings),
            other => Err(FbpcError::Config(format!(
                "unknown synthetic dataset kind `{other}`"
            ))),
        }
    }
}

impl SyntheticKind {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::TwoMoons => "two_moons",
            SyntheticKind::GaussianBlobs => "gaussian_blobs",
            SyntheticKind::Rings => "rings",
        }
    }
}

fn synthetic_point(
    kind: SyntheticKind,
    class: usize,
    num_classes: usize,
    noise: f64,
    rng: &mut FbpcRng,
) -> [f64; 2] {
    let (x, y) = match kind {
        SyntheticKind::TwoMoons => {
            let t = rng.random::<f64>() * PI;
            if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            }
        }
        SyntheticKind::GaussianBlobs => {
            let a = 2.0 * PI * class as f64 / num_classes as f64;
            (2.5 * a.cos(), 2.5 * a.sin())
        }
        SyntheticKind::Rings => {
            let a = rng.random::<f64>() * 2.0 * PI;
            let r = 1.0 + class as f64;
            (r * a.cos(), r * a.sin())
        }
    };
    [
        x + noise * standard_normal(rng),
        y + noise * standard_normal(rng),
    ]
}

fn synthetic_batch(
    kind: SyntheticKind,
    n: usize,
    num_classes: usize,
    noise: f64,
    rng: &mut FbpcRng,
) -> Batch {
    let mut inputs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        inputs.extend_from_slice(&synthetic_point(kind, c, num_classes, noise, rng));
        labels.push(c);
    }
    Batch {
        inputs,
        input_shape: vec![2],
        labels,
    }
}

/// Two-dimensional synthetic classification data. `num_classes` is ignored
/// for `two_moons`, which always has two.
pub fn make_synthetic(
    kind: SyntheticKind,
    num_classes: usize,
    n_train: usize,
    n_test: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(FbpcError::Config(
            "n_train and n_test must be positive".into(),
        ));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(FbpcError::Config(format!(
            "noise must be non-negative, got {noise}"
        )));
    }
    let d = if kind == SyntheticKind::TwoMoons {
        2
    } else {
        num_classes
    };
    if d < 2 {
        return Err(FbpcError::Config("need at least two classes".into()));
    }
    if n_train < d {
        return Err(FbpcError::Config(format!(
            "n_train={n_train} cannot cover {d} classes"
        )));
    }
    let train = synthetic_batch(
        kind,
        n_train,
        d,
        noise,
        &mut derived(seed, &[kind.name(), "train"]),
    );
    let test = synthetic_batch(
        kind,
        n_test,
        d,
        noise,
        &mut derived(seed, &[kind.name(), "test"]),
    );
    Dataset::new(kind.name(), train, test, d)
}

/// Class-conditional oriented sinusoid textures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageToyConfig {
    pub side: usize,
    pub num_classes: usize,
    pub n_per_class: usize,
    #[serde(default)]
    pub n_test_per_class: Option<usize>,
    #[serde(default = "ImageToyConfig::default_noise")]
    pub noise: f64,
    /// Random phase offset as a fraction of a full period.
    #[serde(default = "ImageToyConfig::default_phase_jitter")]
    pub phase_jitter: f64,
}

impl ImageToyConfig {
    fn default_noise() -> f64 {
        0.3
    }

    fn default_phase_jitter() -> f64 {
        0.5
    }

    pub fn new(side: usize, num_classes: usize, n_per_class: usize) -> Self {
        ImageToyConfig {
            side,
            num_classes,
            n_per_class,
            n_test_per_class: None,
            noise: Self::default_noise(),
            phase_jitter: Self::default_phase_jitter(),
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.noise = 0.0;
        self.phase_jitter = 0.0;
        self
    }
}

fn class_pattern(c: usize, side: usize, phase: f64) -> Vec<f64> {
    let angle = PI * c as f64 / 4.0 + 0.3 * (c / 4) as f64;
    let freq = 1.0 + (c % 3) as f64 * 0.75 + (c / 8) as f64 * 0.5;
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut img = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let t = (i as f64 * ca + j as f64 * sa) / side as f64;
            img.push(0.5 + 0.35 * (2.0 * PI * (freq * t + phase)).sin());
        }
    }
    img
}

/// Per-class noiseless template images (`[num_classes × side × side]`).
pub fn image_templates(side: usize, num_classes: usize) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| class_pattern(c, side, 0.0))
        .collect()
}

fn image_batch(cfg: &ImageToyConfig, per_class: usize, rng: &mut FbpcRng) -> Batch {
    let side = cfg.side;
    let mut inputs = Vec::with_capacity(per_class * cfg.num_classes * side * side);
    let mut labels = Vec::new();
    for i in 0..per_class * cfg.num_classes {
        let c = i % cfg.num_classes;
        let phase = cfg.phase_jitter * (rng.random::<f64>() - 0.5);
        for v in class_pattern(c, side, phase) {
            inputs.push((v + cfg.noise * standard_normal(rng)).clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    Batch {
        inputs,
        input_shape: vec![1, side, side],
        labels,
    }
}

pub fn make_image_toy_with(cfg: &ImageToyConfig, seed: u64) -> Result<Dataset> {
    if !(8..=32).contains(&cfg.side) {
        return Err(FbpcError::Config(format!(
            "image side must be in [8, 32], got {}",
            cfg.side
        )));
    }
    if cfg.num_classes < 2 || cfg.n_per_class == 0 {
        return Err(FbpcError::Config(
            "need at least two classes and one image per class".into(),
        ));
    }
    let train = image_batch(
        cfg,
        cfg.n_per_class,
        &mut derived(seed, &["image_toy", "train"]),
    );
    let test_n = cfg.n_test_per_class.unwrap_or(cfg.n_per_class);
    let test = image_batch(
        cfg,
        test_n.max(1),
        &mut derived(seed, &["image_toy", "test"]),
    );
    Dataset::new("image_toy", train, test, cfg.num_classes)
}

pub fn make_image_toy(
    side: usize,
    num_classes: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    make_image_toy_with(&ImageToyConfig::new(side, num_classes, n_per_class), seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    Blur,
    Contrast,
}

impl FromStr for CorruptionKind {
    type Err = FbpcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_noise" => Ok(CorruptionKind::GaussianNoise),
            "blur" => Ok(CorruptionKind::Blur),
            "contrast" => Ok(CorruptionKind::Contrast),
            other => Err(FbpcError::Config(format!("unknown corruption `{other}`"))),
        }
    }
}

impl CorruptionKind {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Contrast => "contrast",
        }
    }

    /// Intensity for severity 1..=5: noise std, blur sigma in pixels, or
    /// contrast reduction `1 - c`.
    pub fn intensity(self, severity: u8) -> Result<f64> {
        if !(1..=5).contains(&severity) {
            return Err(FbpcError::Config(format!(
                "severity must be in 1..=5, got {severity}"
            )));
        }
        let table = match self {
            CorruptionKind::GaussianNoise => [0.08, 0.12, 0.18, 0.26, 0.38],
            CorruptionKind::Blur => [0.5, 0.75, 1.0, 1.5, 2.0],
            CorruptionKind::Contrast => [0.25, 0.5, 0.6, 0.7, 0.8],
        };
        Ok(table[severity as usize - 1])
    }
}

pub fn corrupt(batch: &Batch, kind: CorruptionKind, severity: u8, seed: u64) -> Result<Batch> {
    corrupt_with_intensity(batch, kind, kind.intensity(severity)?, seed)
}

/// Apply a corruption at an explicit intensity. Intensity zero is the identity.
pub fn corrupt_with_intensity(
    batch: &Batch,
    kind: CorruptionKind,
    intensity: f64,
    seed: u64,
) -> Result<Batch> {
    if !(intensity >= 0.0 && intensity.is_finite()) {
        return Err(FbpcError::Config(format!(
            "corruption intensity must be non-negative, got {intensity}"
        )));
    }
    let image = batch.is_image();
    if kind == CorruptionKind::Blur && !image {
        return Err(FbpcError::Unsupported(
            "blur needs image-shaped inputs".into(),
        ));
    }
    let mut out = batch.clone();
    if intensity == 0.0 {
        return Ok(out);
    }
    match kind {
        CorruptionKind::GaussianNoise => {
            let mut rng = derived(seed, &["corrupt", kind.name()]);
            for v in out.inputs.iter_mut() {
                *v += intensity * standard_normal(&mut rng);
                if image {
                    *v = v.clamp(0.0, 1.0);
                }
            }
        }
        CorruptionKind::Blur => {
            let (h, w) = (batch.input_shape[1], batch.input_shape[2]);
            for plane in out.inputs.chunks_mut(h * w) {
                gaussian_blur(plane, h, w, intensity);
            }
        }
        CorruptionKind::Contrast => {
            let keep = 1.0 - intensity.min(1.0);
            let plane = if image {
                batch.input_shape[1] * batch.input_shape[2]
            } else {
                batch.input_dim()
            };
            for chunk in out.inputs.chunks_mut(plane) {
                let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
                chunk
                    .iter_mut()
                    .for_each(|v| *v = mean + keep * (*v - mean));
            }
        }
    }
    Ok(out)
}

fn gaussian_blur(plane: &mut [f64], h: usize, w: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane[i * w + clampi(j as isize + k as isize - radius, w)])
                .sum();
        }
    }
    for i in 0..h {
        for j in 0..w {
            plane[i * w + j] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clampi(i as isize + k as isize - radius, h) * w + j])
                .sum();
        }
    }
}

/// Row indices drawn uniformly without replacement, `per_class` from each class.
pub fn class_balanced_rows(
    ds: &Dataset,
    per_class: usize,
    rng: &mut FbpcRng,
) -> Result<Vec<usize>> {
    let by_class = ds.rows_by_class();
    let mut rows = Vec::with_capacity(per_class * ds.num_classes);
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < per_class {
            return Err(FbpcError::Config(format!(
                "class {c} has {} training examples, need {per_class}",
                members.len()
            )));
        }
        rows.extend(
            rand::seq::index::sample(rng, members.len(), per_class)
                .into_iter()
                .map(|i| members[i]),
        );
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn mse(a: &Batch, b: &Batch) -> f64 {
        a.inputs
            .iter()
            .zip(&b.inputs)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / a.inputs.len() as f64
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = make_synthetic(SyntheticKind::TwoMoons, 2, 100, 50, 0.1, 3).unwrap();
        let b = make_synthetic(SyntheticKind::TwoMoons, 2, 100, 50, 0.1, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train, a.test);
    }

    #[test]
    fn unknown_kind_is_config_error() {
        assert!(matches!(
            "spirals".parse::<SyntheticKind>(),
            Err(FbpcError::Config(_))
        ));
    }

    #[test]
    fn every_class_is_present() {
        let ds = make_synthetic(SyntheticKind::Rings, 3, 30, 30, 0.05, 0).unwrap();
        assert_eq!(ds.class_counts(), vec![10, 10, 10]);
    }

    #[test]
    fn image_toy_one_per_class() {
        let ds = make_image_toy(8, 5, 1, 0).unwrap();
        assert_eq!(ds.train.len(), 5);
        assert!(ds.train.inputs.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(make_image_toy(4, 5, 1, 0).is_err());
    }

    #[test]
    fn noiseless_images_match_templates() {
        let cfg = ImageToyConfig::new(12, 6, 5).noiseless();
        let ds = make_image_toy_with(&cfg, 1).unwrap();
        let templates = image_templates(12, 6);
        for i in 0..ds.test.len() {
            let row = ds.test.row(i);
            let best = templates
                .iter()
                .enumerate()
                .map(|(c, t)| {
                    (
                        c,
                        t.iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
                    )
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            assert_eq!(best, ds.test.labels[i]);
        }
    }

    #[test]
    fn severity_is_monotone() {
        let ds = make_image_toy(8, 3, 4, 2).unwrap();
        for kind in [
            CorruptionKind::GaussianNoise,
            CorruptionKind::Blur,
            CorruptionKind::Contrast,
        ] {
            let mut last = 0.0;
            for s in 1..=5 {
                let c = corrupt(&ds.test, kind, s, 11).unwrap();
                assert_eq!(c.labels, ds.test.labels);
                assert_eq!(c.inputs.len(), ds.test.inputs.len());
                let m = mse(&c, &ds.test);
                assert!(m > last, "{kind:?} severity {s}: {m} <= {last}");
                last = m;
            }
        }
    }

    #[test]
    fn severity_zero_rejected() {
        let ds = make_image_toy(8, 2, 2, 0).unwrap();
        assert!(matches!(
            corrupt(&ds.test, CorruptionKind::Contrast, 0, 0),
            Err(FbpcError::Config(_))
        ));
        assert!(corrupt(&ds.test, CorruptionKind::Contrast, 6, 0).is_err());
    }

    #[test]
    fn blur_on_vectors_unsupported() {
        let ds = make_synthetic(SyntheticKind::GaussianBlobs, 3, 9, 9, 0.2, 0).unwrap();
        assert!(matches!(
            corrupt(&ds.test, CorruptionKind::Blur, 1, 0),
            Err(FbpcError::Unsupported(_))
        ));
    }

    #[test]
    fn zero_intensity_is_identity() {
        let ds = make_image_toy(8, 2, 3, 0).unwrap();
        for kind in [
            CorruptionKind::GaussianNoise,
            CorruptionKind::Blur,
            CorruptionKind::Contrast,
        ] {
            assert_eq!(
                corrupt_with_intensity(&ds.test, kind, 0.0, 5).unwrap(),
                ds.test
            );
        }
    }

    #[test]
    fn balanced_rows() {
        let ds = make_synthetic(SyntheticKind::GaussianBlobs, 4, 40, 8, 0.3, 0).unwrap();
        let rows = class_balanced_rows(&ds, 3, &mut seeded(0)).unwrap();
        let mut counts = [0; 4];
        for r in &rows {
            counts[ds.train.labels[*r]] += 1;
        }
        assert_eq!(counts, [3; 4]);
        assert!(class_balanced_rows(&ds, 11, &mut seeded(0)).is_err());
    }

    #[test]
    fn dataset_roundtrip() {
        let ds = make_image_toy(8, 3, 2, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.fbpa");
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
    }
}
