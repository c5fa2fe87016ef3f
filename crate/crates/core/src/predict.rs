//! Single-image inference against a stored checkpoint.

use std::path::Path;

use crate::data::preprocess::preprocess_file;
use crate::data::{taxonomy, NormStats};
use crate::error::Result;
use crate::metrics::ranking;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::softmax;

/// One ranked class with its softmax probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub class: String,
    pub score: f64,
}

/// The `top_k` most probable classes for an already-preprocessed
/// `[1, 3, h, w]` input, descending by score, ties by lower class index.
pub fn rank_classes<T: Scalar>(model: &Model<T>, x: &Tensor<T>, top_k: usize) -> Result<Vec<Prediction>> {
    let logits = model.predict_logits(x)?;
    let probs = softmax(logits.item(0));
    let order = ranking(&probs);
    Ok(order
        .into_iter()
        .take(top_k.min(probs.len()))
        .map(|label| Prediction {
            label,
            class: taxonomy::abbreviation(label).map_or(format!("class{label}"), String::from),
            score: probs[label].to_f64_lossy(),
        })
        .collect())
}

pub fn predict_image<T: Scalar>(model: &Model<T>, stats: &NormStats, image: &Path, top_k: usize) -> Result<Vec<Prediction>> {
    let x = preprocess_file(image, model.config().input_size, stats)?;
    rank_classes(model, &x, top_k)
}
