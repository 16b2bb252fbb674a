//! Pseudo ground-truth excavation: turn raw detector predictions into
//! per-image pseudo instance labels.
//!
//! The steps, in order: drop classes absent from the image-level label,
//! per-class NMS, score threshold, argmax reinstatement for present classes
//! that lost every prediction, then same-class fusion of strongly
//! overlapping pairs into their enclosing box until fixpoint.

use crate::geometry::{iou, nms, BBox, Detection};

/// Excavation thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgeConfig {
    pub t_nms: f64,
    pub t_score: f64,
    pub t_fusion: f64,
}

impl Default for PgeConfig {
    fn default() -> Self {
        Self { t_nms: 0.3, t_score: 0.2, t_fusion: 0.4 }
    }
}

/// A pseudo instance label with per-task confidence tags.
///
/// `lambda_cls`/`lambda_reg` gate the classification and regression loss
/// terms of this instance; at least one must be set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Instance {
    pub bbox: BBox,
    pub class: usize,
    pub lambda_cls: bool,
    pub lambda_reg: bool,
}

impl Instance {
    /// Instance with both task tags enabled.
    pub fn new(bbox: BBox, class: usize) -> Self {
        Self { bbox, class, lambda_cls: true, lambda_reg: true }
    }

    pub fn with_tags(bbox: BBox, class: usize, lambda_cls: bool, lambda_reg: bool) -> Self {
        debug_assert!(lambda_cls || lambda_reg, "at least one task tag must be set");
        Self { bbox, class, lambda_cls, lambda_reg }
    }
}

/// Excavate pseudo ground-truths from raw predictions for one image.
///
/// Returns instances with both tags enabled; classes are always a subset of
/// the classes present in `image_label`.
pub fn excavate(preds: &[Detection], image_label: &[bool], cfg: &PgeConfig) -> Vec<Instance> {
    // 1. image-level label filter
    let filtered: Vec<Detection> = preds
        .iter()
        .filter(|d| image_label.get(d.class).copied().unwrap_or(false))
        .copied()
        .collect();

    // 2. per-class NMS, 3. score threshold
    let mut survivors: Vec<Detection> = nms(&filtered, cfg.t_nms)
        .into_iter()
        .filter(|d| d.score >= cfg.t_score)
        .collect();

    // 4. a present class with predictions but no survivor keeps its argmax
    for class in 0..image_label.len() {
        if !image_label[class] || survivors.iter().any(|d| d.class == class) {
            continue;
        }
        if let Some(best) = filtered
            .iter()
            .filter(|d| d.class == class)
            .max_by(|a, b| a.score.total_cmp(&b.score))
        {
            survivors.push(*best);
        }
    }

    // 5. fuse same-class pairs with IoU >= t_fusion into the enclosing box,
    // highest-IoU pair first, until fixpoint
    loop {
        let mut best_pair: Option<(usize, usize, f64)> = None;
        for i in 0..survivors.len() {
            for j in i + 1..survivors.len() {
                if survivors[i].class != survivors[j].class {
                    continue;
                }
                let overlap = iou(&survivors[i].bbox, &survivors[j].bbox);
                if overlap >= cfg.t_fusion
                    && best_pair.map_or(true, |(_, _, b)| overlap > b)
                {
                    best_pair = Some((i, j, overlap));
                }
            }
        }
        match best_pair {
            Some((i, j, _)) => {
                let fused = Detection {
                    bbox: survivors[i].bbox.enclosing(&survivors[j].bbox),
                    class: survivors[i].class,
                    score: survivors[i].score.max(survivors[j].score),
                };
                survivors.remove(j);
                survivors.remove(i);
                survivors.push(fused);
            }
            None => break,
        }
    }

    survivors
        .into_iter()
        .map(|d| Instance::new(d.bbox, d.class))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn det(x: f64, y: f64, w: f64, h: f64, class: usize, score: f64) -> Detection {
        Detection { bbox: BBox::new(x, y, w, h), class, score }
    }

    #[test]
    fn single_correct_prediction_passes_through() {
        let preds = vec![det(5.0, 5.0, 10.0, 10.0, 0, 0.9)];
        let out = excavate(&preds, &[true, false], &PgeConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, preds[0].bbox);
        assert_eq!(out[0].class, 0);
        assert!(out[0].lambda_cls && out[0].lambda_reg);
    }

    #[test]
    fn absent_class_is_dropped() {
        let preds = vec![det(5.0, 5.0, 10.0, 10.0, 1, 0.9)];
        let out = excavate(&preds, &[true, false], &PgeConfig::default());
        assert!(out.is_empty());
    }

    #[test]
    fn low_score_survivor_reinstated_by_argmax() {
        let preds = vec![
            det(5.0, 5.0, 10.0, 10.0, 0, 0.05),
            det(30.0, 30.0, 10.0, 10.0, 0, 0.12),
        ];
        let out = excavate(&preds, &[true], &PgeConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, preds[1].bbox, "argmax-score box reinstated");
    }

    #[test]
    fn empty_predictions_give_empty_output() {
        let out = excavate(&[], &[true, true], &PgeConfig::default());
        assert!(out.is_empty());
    }

    // Pair with IoU 1/3 < t_fusion stays separate; a 3/7-overlap pair fuses
    // into its enclosing box. t_nms is raised so NMS keeps both candidates.
    #[test]
    fn fusion_thresholds() {
        let cfg = PgeConfig { t_nms: 0.5, t_score: 0.2, t_fusion: 0.4 };
        let apart = vec![
            det(5.0, 5.0, 10.0, 10.0, 0, 0.9),
            det(10.0, 5.0, 10.0, 10.0, 0, 0.8), // IoU 1/3
        ];
        assert_eq!(excavate(&apart, &[true], &cfg).len(), 2);

        let close = vec![
            det(5.0, 5.0, 10.0, 10.0, 0, 0.9),
            det(9.0, 5.0, 10.0, 10.0, 0, 0.8), // IoU 3/7 = 0.428..
        ];
        let out = excavate(&close, &[true], &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, BBox::new(7.0, 5.0, 14.0, 10.0));
    }

    #[test]
    fn fusion_runs_to_fixpoint() {
        // chain of three boxes, each overlapping its neighbour at >= 0.4
        let cfg = PgeConfig { t_nms: 0.9, t_score: 0.1, t_fusion: 0.4 };
        let chain = vec![
            det(5.0, 5.0, 10.0, 10.0, 0, 0.9),
            det(9.0, 5.0, 10.0, 10.0, 0, 0.8),
            det(13.0, 5.0, 10.0, 10.0, 0, 0.7),
        ];
        let out = excavate(&chain, &[true], &cfg);
        for i in 0..out.len() {
            for j in i + 1..out.len() {
                assert!(iou(&out[i].bbox, &out[j].bbox) < cfg.t_fusion);
            }
        }
    }

    #[test]
    fn output_classes_subset_of_label() {
        let preds = vec![
            det(5.0, 5.0, 10.0, 10.0, 0, 0.9),
            det(20.0, 20.0, 8.0, 8.0, 1, 0.7),
            det(40.0, 40.0, 8.0, 8.0, 2, 0.95),
        ];
        let label = [true, false, true];
        for inst in excavate(&preds, &label, &PgeConfig::default()) {
            assert!(label[inst.class]);
        }
    }

    #[test]
    fn excavate_is_idempotent() {
        let cfg = PgeConfig::default();
        let preds = vec![
            det(5.0, 5.0, 10.0, 10.0, 0, 0.9),
            det(7.0, 5.0, 10.0, 10.0, 0, 0.8),
            det(30.0, 30.0, 6.0, 6.0, 1, 0.6),
            det(31.0, 30.0, 6.0, 6.0, 1, 0.15),
        ];
        let first = excavate(&preds, &[true, true], &cfg);
        let as_preds: Vec<Detection> = first
            .iter()
            .map(|i| Detection { bbox: i.bbox, class: i.class, score: 1.0 })
            .collect();
        let second = excavate(&as_preds, &[true, true], &cfg);
        assert_eq!(first, second);
    }
}
