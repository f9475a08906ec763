//! Precomputed feature vectors stored in the manifest + blob convention.

use std::path::Path;

use deepbayes_tensor::Tensor;
use serde_json::json;

use super::Dataset;
use crate::error::{Error, Result};
use crate::store::{read_bundle, write_bundle};

const KIND: &str = "features";

/// A dataset whose inputs are feature vectors from a named extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub data: Dataset,
    pub source: String,
}

pub fn write_feature_vectors(path: &Path, features: &FeatureDataset) -> Result<()> {
    let labels = Tensor::vector(features.data.labels().iter().map(|&l| l as f64).collect());
    write_bundle(
        path,
        KIND,
        json!({
            "source": features.source,
            "class_count": features.data.class_count(),
        }),
        &[
            ("features".to_string(), features.data.inputs()),
            ("labels".to_string(), &labels),
        ],
    )
}

pub fn load_feature_vectors(path: &Path) -> Result<FeatureDataset> {
    let bundle = read_bundle(path)?;
    let fail = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let features = bundle
        .tensor("features")
        .ok_or_else(|| fail("missing features section".into()))?;
    let labels = bundle
        .tensor("labels")
        .ok_or_else(|| fail("missing labels section".into()))?;
    if features.ndim() != 2 {
        return Err(fail(format!(
            "features must be a matrix, got shape {:?}",
            features.shape()
        )));
    }
    if labels.len() != features.shape()[0] {
        return Err(fail(format!(
            "{} feature rows but {} labels",
            features.shape()[0],
            labels.len()
        )));
    }
    let labels: Vec<usize> = labels
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(fail(format!("label {v} is not a class index")))
            }
        })
        .collect::<Result<_>>()?;
    let class_count = match bundle.meta.get("class_count").and_then(|v| v.as_u64()) {
        Some(c) => c as usize,
        None => labels.iter().max().map_or(1, |m| m + 1),
    };
    let source = bundle
        .meta
        .get("source")
        .and_then(|v| v.as_str())
        .unwrap_or("unknown")
        .to_string();
    Ok(FeatureDataset {
        data: Dataset::new(features.clone(), labels, class_count, source.clone())?,
        source,
    })
}
