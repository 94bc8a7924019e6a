use crate::dataset::Dataset;
use crate::engine;
use crate::error::{Error, Result};
use crate::model::ModelGraph;

/// Batch size used by evaluation and profiling passes. Results do not depend
/// on it (each sample's forward pass is independent), it only bounds memory.
pub const EVAL_BATCH: usize = 256;

/// Index of the largest value; NaN never wins, ties go to the lower index,
/// and an all-NaN row falls back to 0. This mirrors what a deployed argmax
/// over possibly-corrupted logits does deterministically.
pub fn argmax_row(row: &[f32]) -> usize {
    let mut best = f32::NEG_INFINITY;
    let mut bi = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > best {
            best = v;
            bi = i;
        }
    }
    bi
}

/// Predicted class per sample.
pub fn predict(model: &ModelGraph, ds: &Dataset) -> Result<Vec<usize>> {
    if ds.sample_shape() != model.input_shape {
        return Err(Error::InvalidArgument(format!(
            "dataset samples are {:?} but the model expects {:?}",
            ds.sample_shape(),
            model.input_shape
        )));
    }
    let classes = model.num_classes;
    let mut out = Vec::with_capacity(ds.len());
    let mut start = 0;
    while start < ds.len() {
        let count = EVAL_BATCH.min(ds.len() - start);
        let logits = engine::forward(model, &ds.batch(start, count)?)?;
        for row in logits.data().chunks_exact(classes) {
            out.push(argmax_row(row));
        }
        start += count;
    }
    Ok(out)
}

/// Top-1 accuracy as a percentage in `[0, 100]`.
pub fn evaluate(model: &ModelGraph, ds: &Dataset) -> Result<f64> {
    let preds = predict(model, ds)?;
    let correct = preds
        .iter()
        .zip(&ds.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(100.0 * correct as f64 / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{Layer, LayerParams, LayerSpec};
    use crate::tensor::Tensor;

    #[test]
    fn argmax_rules() {
        assert_eq!(argmax_row(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax_row(&[0.5, 0.5]), 0);
        assert_eq!(argmax_row(&[f32::NAN, 0.1]), 1);
        assert_eq!(argmax_row(&[f32::NAN, f32::NAN]), 0);
        assert_eq!(argmax_row(&[f32::NEG_INFINITY, f32::NEG_INFINITY]), 0);
        assert_eq!(argmax_row(&[0.2, f32::INFINITY]), 1);
    }

    /// An FC layer wired to copy pixel sums per class region would be
    /// overkill; instead, fixed weights route input pixel 0 to logit 0 and
    /// pixel 1 to logit 1, so labels are predictable by construction.
    #[test]
    fn evaluate_counts_known_predictions() {
        let model = ModelGraph::new(
            vec![
                Layer::new(LayerSpec::Flatten, LayerParams::None),
                Layer::new(
                    LayerSpec::FullyConnected {
                        in_features: 2,
                        out_features: 2,
                        has_bias: false,
                    },
                    LayerParams::FullyConnected {
                        weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                        bias: None,
                    },
                ),
            ],
            [1, 1, 2],
            2,
        )
        .unwrap();
        let images = Tensor::new(
            vec![4, 1, 1, 2],
            vec![
                0.9, 0.1, // -> 0
                0.2, 0.8, // -> 1
                0.6, 0.4, // -> 0
                0.3, 0.7, // -> 1
            ],
        )
        .unwrap();
        let ds = Dataset::new(images, vec![0, 1, 1, 1], 2).unwrap();
        assert_eq!(predict(&model, &ds).unwrap(), vec![0, 1, 0, 1]);
        assert_eq!(evaluate(&model, &ds).unwrap(), 75.0);
    }
}
