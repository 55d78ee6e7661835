//! Encoding of annotations into padded per-slot training targets.

use super::SceneRecord;
use crate::geometry::{render_gaussian_heatmap, Box, Heatmap, Point2D};
use crate::model::ModelConfig;
use crate::{Error, Result};

/// The five target vectors of one real instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetInstance {
    pub head_box: Box,
    /// `(1, 0)` for in-frame gazes, `(0, 1)` otherwise.
    pub watch_in_out: [f64; 2],
    pub heatmap: Heatmap,
    /// Degenerate when `has_gaze_box` is false.
    pub gaze_box: Box,
    pub has_gaze_box: bool,
    /// 0-based class index; `num_categories` is the no-object class.
    pub class_index: usize,
    pub gaze_point: Option<Point2D>,
}

impl TargetInstance {
    pub fn watch_inside(&self) -> bool {
        self.watch_in_out[0] == 1.0
    }
}

/// Ground truth for one image, padded to `num_queries` slots. Slots
/// `instances.len()..num_queries` are the padding (no-instance) entries.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub num_queries: usize,
    pub num_categories: usize,
    pub instances: Vec<TargetInstance>,
}

impl TargetSet {
    pub fn num_real(&self) -> usize {
        self.instances.len()
    }

    /// `true` for padding slots.
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.num_queries).map(|i| i >= self.instances.len()).collect()
    }

    pub fn no_object_class(&self) -> usize {
        self.num_categories
    }

    /// One-hot gaze-object class vector of length `num_categories + 1`.
    pub fn class_one_hot(&self, slot: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.num_categories + 1];
        let idx = self
            .instances
            .get(slot)
            .map_or(self.no_object_class(), |t| t.class_index);
        v[idx] = 1.0;
        v
    }

    /// Reorders the real instances; used by invariance checks.
    pub fn permuted(&self, order: &[usize]) -> TargetSet {
        TargetSet {
            instances: order.iter().map(|&i| self.instances[i].clone()).collect(),
            ..self.clone()
        }
    }
}

pub fn encode_targets(rec: &SceneRecord, cfg: &ModelConfig) -> Result<TargetSet> {
    let n_gt = rec.annotations.len();
    if n_gt > cfg.num_queries {
        return Err(Error::Capacity {
            n_gt,
            n_q: cfg.num_queries,
        });
    }
    let instances = rec
        .annotations
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let context = format!("{} annotation {i}", rec.scene_id);
            a.validate(&context)?;
            if let Some(o) = &a.gaze_object {
                if o.category as usize > cfg.num_categories {
                    return Err(Error::validation(
                        context,
                        format!("category {} exceeds N_o = {}", o.category, cfg.num_categories),
                    ));
                }
            }
            let heatmap = match (a.watch_inside, a.gaze_point) {
                (true, Some(p)) => render_gaussian_heatmap(p, cfg.heatmap_height, cfg.heatmap_width, cfg.heatmap_sigma),
                _ => Heatmap::zeros(cfg.heatmap_height, cfg.heatmap_width),
            };
            Ok(TargetInstance {
                head_box: a.head_box,
                watch_in_out: if a.watch_inside { [1.0, 0.0] } else { [0.0, 1.0] },
                heatmap,
                gaze_box: a.gaze_object.map_or(Box::degenerate(), |o| o.bbox),
                has_gaze_box: a.gaze_object.is_some(),
                class_index: a
                    .gaze_object
                    .map_or(cfg.num_categories, |o| o.category as usize - 1),
                gaze_point: a.gaze_point,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TargetSet {
        num_queries: cfg.num_queries,
        num_categories: cfg.num_categories,
        instances,
    })
}
