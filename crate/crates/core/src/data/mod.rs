//! Labeled datasets and their sources.

mod features;
mod idx;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use deepbayes_tensor::{RngStream, Tensor};

use crate::error::{Error, Result};
use crate::lvm::TwoRingsSpec;

pub use features::{load_feature_vectors, write_feature_vectors, FeatureDataset};
pub use idx::{
    encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels,
    write_idx, IdxImages, IMAGE_MAGIC, LABEL_MAGIC,
};

/// An `N×D` input matrix with integer labels in `0..class_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if inputs.ndim() != 2 {
            return Err(Error::InvalidArgument(format!(
                "dataset inputs must be a matrix, got shape {:?}",
                inputs.shape()
            )));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} input rows but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside 0..{class_count}"
            )));
        }
        if !inputs.all_finite() {
            return Err(Error::NonFinite("dataset inputs".into()));
        }
        Ok(Self {
            inputs,
            labels,
            class_count,
            provenance: provenance.into(),
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let labels = indices
            .iter()
            .map(|&i| {
                self.labels.get(i).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("row {i} out of range for {}", self.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            self.inputs.select_rows(indices)?,
            labels,
            self.class_count,
            self.provenance.clone(),
        )
    }

    /// The first `n` rows (all rows when `n` exceeds the size).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn with_inputs(&self, inputs: Tensor) -> Result<Self> {
        Self::new(
            inputs,
            self.labels.clone(),
            self.class_count,
            self.provenance.clone(),
        )
    }

    /// Writes `x0..x{D-1},label` rows with shortest round-trip formatting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for d in 0..self.input_dim() {
            let _ = write!(out, "x{d},");
        }
        out.push_str("label\n");
        for (i, &label) in self.labels.iter().enumerate() {
            for v in self.inputs.row(i) {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{label}");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// A coordinatewise affine map `x ↦ scale ⊙ x + shift`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AffineMap {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl AffineMap {
    pub fn isotropic(dim: usize, scale: f64, shift: Vec<f64>) -> Self {
        Self {
            scale: vec![scale; dim],
            shift,
        }
    }

    /// Per-dimension min-max scaling of `data` onto `[0, 1]`. Constant
    /// columns are shifted to 0 and left unscaled.
    pub fn fit_min_max(data: &Dataset) -> Self {
        let d = data.input_dim();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for i in 0..data.len() {
            for (j, &v) in data.inputs().row(i).iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        let scale: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| if h > l { 1.0 / (h - l) } else { 1.0 })
            .collect();
        let shift = lo.iter().zip(&scale).map(|(l, s)| -l * s).collect();
        Self { scale, shift }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.last_dim();
        if d != self.scale.len() {
            return Err(Error::InvalidArgument(format!(
                "affine map of dimension {} applied to rows of width {d}",
                self.scale.len()
            )));
        }
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = self.scale[i % d] * *v + self.shift[i % d];
        }
        Ok(out)
    }

    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.last_dim();
        if d != self.scale.len() {
            return Err(Error::InvalidArgument(format!(
                "affine map of dimension {} applied to rows of width {d}",
                self.scale.len()
            )));
        }
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.shift[i % d]) / self.scale[i % d];
        }
        Ok(out)
    }

    pub fn apply_dataset(&self, data: &Dataset) -> Result<Dataset> {
        data.with_inputs(self.apply(data.inputs())?)
    }
}

/// `n_per_class` points from each ring: class 0 rows first, then class 1.
///
/// Each point is `c_y + r_y (cos θ, sin θ) + σ ε` with θ uniform on
/// `[0, 2π)` and ε standard normal. A zero variance gives noise-free rings.
pub fn sample_two_rings(spec: &TwoRingsSpec, n_per_class: usize, rng: &mut RngStream) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be at least 1".into()));
    }
    if !(spec.noise_variance.is_finite() && spec.noise_variance >= 0.0) {
        return Err(Error::Config(format!(
            "two-rings noise variance must be non-negative, got {}",
            spec.noise_variance
        )));
    }
    let sigma = spec.noise_variance.sqrt();
    let mut data = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for y in 0..2 {
        let c = spec.centers[y];
        let r = spec.radii[y];
        for _ in 0..n_per_class {
            let theta = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
            let (e0, e1) = (rng.normal(), rng.normal());
            data.push(c[0] + r * theta.cos() + sigma * e0);
            data.push(c[1] + r * theta.sin() + sigma * e1);
            labels.push(y);
        }
    }
    Dataset::new(
        Tensor::new(vec![2 * n_per_class, 2], data)?,
        labels,
        2,
        "two-rings",
    )
}

/// Rows labeled `a` or `b`, relabeled to 0 and 1, in source order.
pub fn subset_binary(data: &Dataset, a: usize, b: usize) -> Result<Dataset> {
    if a == b {
        return Err(Error::InvalidArgument(format!(
            "binary subset needs two distinct classes, got {a} twice"
        )));
    }
    let mut idx = Vec::new();
    let mut labels = Vec::new();
    for (i, &l) in data.labels().iter().enumerate() {
        if l == a || l == b {
            idx.push(i);
            labels.push(usize::from(l == b));
        }
    }
    if idx.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no rows with label {a} or {b}"
        )));
    }
    Dataset::new(
        data.inputs().select_rows(&idx)?,
        labels,
        2,
        format!("{}[{a},{b}]", data.provenance()),
    )
}
