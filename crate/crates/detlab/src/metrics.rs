//! Evaluation metrics: VOC-style mean average precision and CorLoc.

use crate::geometry::{iou, BBox, Detection};
use crate::{Error, Result};

/// Per-class average precision with all-points interpolation.
///
/// Detections across all images are ranked by descending score (ties broken
/// by image order, then input order); each is greedily matched to the
/// highest-IoU unmatched same-class ground truth of its image and counts as
/// a true positive at IoU >= 0.5. The AP is the area under the precision
/// envelope over recall. Classes without ground truth are skipped; mAP is
/// the mean over the rest.
pub fn toy_map(dets: &[Vec<Detection>], gt: &[Vec<(BBox, usize)>]) -> Result<f64> {
    let total_gt: usize = gt.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let classes = 1 + gt
        .iter()
        .flatten()
        .map(|(_, c)| *c)
        .chain(dets.iter().flatten().map(|d| d.class))
        .max()
        .unwrap_or(0);

    let mut ap_sum = 0.0;
    let mut ap_classes = 0usize;
    for class in 0..classes {
        let n_gt: usize = gt
            .iter()
            .map(|g| g.iter().filter(|(_, c)| *c == class).count())
            .sum();
        if n_gt == 0 {
            continue;
        }
        ap_classes += 1;
        ap_sum += average_precision(dets, gt, class, n_gt);
    }
    Ok(ap_sum / ap_classes as f64)
}

fn average_precision(
    dets: &[Vec<Detection>],
    gt: &[Vec<(BBox, usize)>],
    class: usize,
    n_gt: usize,
) -> f64 {
    // (image, det) pairs of this class, ranked by descending score
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (img, img_dets) in dets.iter().enumerate() {
        for (j, d) in img_dets.iter().enumerate() {
            if d.class == class {
                ranked.push((img, j));
            }
        }
    }
    ranked.sort_by(|&(ia, ja), &(ib, jb)| {
        dets[ib][jb]
            .score
            .total_cmp(&dets[ia][ja].score)
            .then(ia.cmp(&ib))
            .then(ja.cmp(&jb))
    });

    let mut matched: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(ranked.len()); // (recall, precision)
    for (img, j) in ranked {
        let d = &dets[img][j];
        let mut best: Option<(usize, f64)> = None;
        for (g, (b, c)) in gt[img].iter().enumerate() {
            if *c != class || matched[img][g] {
                continue;
            }
            let ov = iou(&d.bbox, b);
            if ov >= 0.5 && best.map_or(true, |(_, bo)| ov > bo) {
                best = Some((g, ov));
            }
        }
        match best {
            Some((g, _)) => {
                matched[img][g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }

    // precision envelope, integrated over recall
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..curve.len() {
        let (recall, _) = curve[i];
        if recall > prev_recall {
            let envelope = curve[i..]
                .iter()
                .map(|&(_, p)| p)
                .fold(0.0, f64::max);
            ap += (recall - prev_recall) * envelope;
            prev_recall = recall;
        }
    }
    ap
}

/// Correct localization: the fraction of (image, present class) pairs whose
/// top-scoring detection of that class hits a same-class ground truth at
/// IoU >= 0.5. Pairs without any detection count as misses.
pub fn corloc(dets: &[Vec<Detection>], gt: &[Vec<(BBox, usize)>], labels: &[Vec<bool>]) -> f64 {
    let mut pairs = 0usize;
    let mut hits = 0usize;
    for ((img_dets, img_gt), img_labels) in dets.iter().zip(gt).zip(labels) {
        for (class, present) in img_labels.iter().enumerate() {
            if !present {
                continue;
            }
            pairs += 1;
            let top = img_dets
                .iter()
                .filter(|d| d.class == class)
                .max_by(|a, b| a.score.total_cmp(&b.score));
            let Some(top) = top else { continue };
            let hit = img_gt
                .iter()
                .any(|(b, c)| *c == class && iou(&top.bbox, b) >= 0.5);
            if hit {
                hits += 1;
            }
        }
    }
    if pairs == 0 {
        return 0.0;
    }
    hits as f64 / pairs as f64
}
