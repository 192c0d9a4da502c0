//! Held-out evaluation of a learned model against its dataset.

use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::error::MetricError;
use crate::math::Vec3;
use crate::metrics::{angular_error, evaluate_view, AngularError, ImagePair, MetricReport};
use crate::oracle::{trace_view, Dataset, Split};
use crate::scalar::Real;

type V = Vec3<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutMetrics {
    pub report: MetricReport,
    /// Predicted exit directions against the oracle's, over pixels where
    /// both hit and the oracle path escapes. `None` without an analytic shape.
    pub angular: Option<AngularError>,
    pub compared_rays: usize,
    /// Median predicted index over hit pixels.
    pub eta_median: Option<f64>,
}

/// Renders every view of `split`, comparing tone-mapped images and masks
/// and, when the dataset records its shape, exit directions.
pub fn evaluate_split<T: Real>(
    model: &Model<T>,
    dataset: &Dataset,
    split: Split,
    masked: bool,
) -> Result<HeldOutMetrics, MetricError> {
    let scene = match dataset.scene() {
        Some(Ok(s)) => Some(s),
        _ => None,
    };
    let mut per_view = Vec::new();
    let mut pred_dirs: Vec<V> = Vec::new();
    let mut ref_dirs: Vec<V> = Vec::new();
    let mut etas = Vec::new();
    for view in dataset.split(split) {
        let pred = model.render_view(&view.camera, &dataset.env);
        per_view.push(evaluate_view(
            &ImagePair {
                name: format!("{:03}", view.index),
                pred: &pred.image,
                reference: &view.image,
                mask: masked.then_some(&view.mask),
                masks: Some((&pred.mask, &view.mask)),
            },
            true,
        )?);
        etas.extend(pred.eta_t.iter().flatten().copied());
        if let Some(scene) = &scene {
            for (trace, omega) in trace_view(scene, &view.camera).iter().zip(&pred.omega_t) {
                if let (Some((_, path)), Some(w)) = (trace.hit, omega) {
                    if path.escaped {
                        pred_dirs.push(*w);
                        ref_dirs.push(path.exit_direction);
                    }
                }
            }
        }
    }
    if per_view.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let angular = if pred_dirs.is_empty() {
        None
    } else {
        Some(angular_error(&pred_dirs, &ref_dirs)?)
    };
    etas.sort_by(f64::total_cmp);
    let eta_median = (!etas.is_empty()).then(|| {
        let n = etas.len();
        if n % 2 == 1 {
            etas[n / 2]
        } else {
            0.5 * (etas[n / 2 - 1] + etas[n / 2])
        }
    });
    Ok(HeldOutMetrics {
        report: MetricReport::new(per_view),
        angular,
        compared_rays: pred_dirs.len(),
        eta_median,
    })
}
