//! Synthetic detection worlds.
//!
//! Each image is a set of ground-truth boxes on a fixed canvas. Objects of
//! the configured "part classes" carry a discriminative-part sub-box: a
//! `part_fraction`-scaled copy placed at a random position strictly inside
//! the object. Proposals are a mix of jittered object copies, jittered part
//! copies and uniform background boxes, and every ground-truth object is
//! covered by at least one proposal with IoU >= 0.5 by construction.
//!
//! Proposal features are a deterministic function of the box geometry and
//! its overlap profile against the scene, plus bounded noise:
//!
//! * per-class max IoU against object bodies;
//! * per-class coverage of part boxes (intersection over part area), so any
//!   box that contains a class's discriminative part sees its evidence;
//! * the delta coding of the best-overlapping body (`gain_body`), plus a
//!   copy gated by that body overlap, which lets a linear head treat
//!   object-sized inputs differently from part-sized ones;
//! * the delta coding of the best-overlapping part (`gain_part`), gated by
//!   part coverage, which ties part-sized inputs and the outer boxes around
//!   them together;
//! * normalized box geometry, and noise padding up to `feature_dim`.
//!
//! Classification and box-regression targets are therefore realizable by
//! linear heads, and the channel structure reproduces the early/late
//! regression behaviour of detectors trained on discriminative-part labels:
//! the body channel restores full extents where object evidence is strong,
//! while the coverage-gated part channel carries the memorized part fit
//! onto every box that contains the part.
//!
//! [`corrupt_to_wsod_output`] simulates the predictions of a weak detector
//! on a scene: per object it emits a (jittered) full box with the correct
//! class, the part box, a mislabeled box, or nothing, and it adds background
//! false positives at a configured rate.

use rand::Rng;
use rayon::prelude::*;

use crate::geometry::{encode, iou, BBox, Detection};
use crate::rng::stream;
use crate::{Error, Result};

/// Number of feature dimensions before noise padding, given `classes`.
pub fn base_feature_dim(classes: usize) -> usize {
    2 * classes + 16
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub num_images: usize,
    pub classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub canvas_w: f64,
    pub canvas_h: f64,
    pub object_min_size: f64,
    pub object_max_size: f64,
    /// Part box side length relative to its object, in (0, 1).
    pub part_fraction: f64,
    /// Classes whose objects exhibit the discriminative-part failure.
    pub part_classes: Vec<usize>,
    pub proposals_per_image: usize,
    pub feature_dim: usize,
    /// Proposal mix weights: jittered objects, jittered parts, uniform boxes.
    pub mix_gt: f64,
    pub mix_part: f64,
    pub mix_uniform: f64,
    /// Gain on the body-delta feature channel.
    pub gain_body: f64,
    /// Gain on the part-delta feature channel.
    pub gain_part: f64,
    /// Amplitude of the bounded uniform noise added to every feature.
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_images: 48,
            classes: 12,
            objects_min: 2,
            objects_max: 4,
            canvas_w: 100.0,
            canvas_h: 100.0,
            object_min_size: 18.0,
            object_max_size: 44.0,
            part_fraction: 0.45,
            part_classes: vec![0, 1, 2],
            proposals_per_image: 40,
            feature_dim: base_feature_dim(12),
            mix_gt: 0.35,
            mix_part: 0.3,
            mix_uniform: 0.35,
            gain_body: 3.0,
            gain_part: 3.0,
            feature_noise: 0.01,
            seed: 7,
        }
    }
}

impl WorldConfig {
    fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::InfeasibleWorld(msg));
        if self.num_images == 0 {
            return err("num_images must be >= 1".into());
        }
        if self.classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return err(format!(
                "invalid objects range {}..{}",
                self.objects_min, self.objects_max
            ));
        }
        if self.proposals_per_image < self.objects_max {
            return err(format!(
                "proposals_per_image {} cannot cover up to {} objects",
                self.proposals_per_image, self.objects_max
            ));
        }
        if !(self.part_fraction > 0.0 && self.part_fraction < 1.0) {
            return err(format!("part_fraction {} outside (0,1)", self.part_fraction));
        }
        if self.object_min_size <= 0.0 || self.object_min_size > self.object_max_size {
            return err(format!(
                "invalid object size range {}..{}",
                self.object_min_size, self.object_max_size
            ));
        }
        if self.object_max_size >= self.canvas_w || self.object_max_size >= self.canvas_h {
            return err(format!(
                "objects of size {} do not fit the {}x{} canvas",
                self.object_max_size, self.canvas_w, self.canvas_h
            ));
        }
        if self.feature_dim < base_feature_dim(self.classes) {
            return err(format!(
                "feature_dim {} below minimum {} for {} classes",
                self.feature_dim,
                base_feature_dim(self.classes),
                self.classes
            ));
        }
        if self.mix_gt < 0.0 || self.mix_part < 0.0 || self.mix_uniform < 0.0 {
            return err("proposal mix weights must be non-negative".into());
        }
        if self.mix_gt + self.mix_part + self.mix_uniform <= 0.0 {
            return err("proposal mix weights sum to zero".into());
        }
        if let Some(&c) = self.part_classes.iter().find(|&&c| c >= self.classes) {
            return err(format!("part class {c} out of range for {} classes", self.classes));
        }
        Ok(())
    }
}

/// Ground truth for one image: objects, optional part boxes aligned with the
/// objects, and the image-level class label vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthScene {
    pub objects: Vec<(BBox, usize)>,
    pub parts: Vec<Option<BBox>>,
    pub image_label: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<BBox>,
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub scene: GroundTruthScene,
    pub proposals: ProposalSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub cfg: WorldConfig,
    pub images: Vec<ImageRecord>,
}

// bounds the delta channels so far-away proposals cannot blow up the
// feature scale; relevant boxes stay well inside the linear region
fn clamp_delta(v: f64) -> f64 {
    v.clamp(-2.0, 2.0)
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}

/// Feature vector of an arbitrary box against a scene.
///
/// `rng` supplies the bounded noise; pass a dedicated stream to keep results
/// reproducible.
pub fn box_features(
    cfg: &WorldConfig,
    scene: &GroundTruthScene,
    b: &BBox,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let c = cfg.classes;
    let mut f = vec![0.0; cfg.feature_dim];

    let mut best_body: Option<(usize, f64)> = None;
    for (j, (obj, class)) in scene.objects.iter().enumerate() {
        let ov = iou(b, obj);
        if ov > f[*class] {
            f[*class] = ov;
        }
        if best_body.map_or(true, |(_, bo)| ov > bo) {
            best_body = Some((j, ov));
        }
    }
    // part channel: coverage (intersection over part area) carries the
    // discriminative evidence of a class; any box containing the part sees it
    let mut best_part: Option<(usize, f64)> = None;
    for (j, part) in scene.parts.iter().enumerate() {
        let Some(part) = part else { continue };
        let class = scene.objects[j].1;
        let cov = intersection_area(b, part) / part.area();
        if cov > f[c + class] {
            f[c + class] = cov;
        }
        let ov = iou(b, part);
        if best_part.map_or(true, |(_, bo)| ov > bo) {
            best_part = Some((j, ov));
        }
    }

    // raw delta channels plus an overlap-gated copy of the body channel;
    // the gated copy lets a linear head treat strongly object-overlapping
    // inputs differently from part-sized ones
    if let Some((j, ov)) = best_body {
        let d = encode(&scene.objects[j].0, b);
        for (k, v) in [d.tx, d.ty, d.tw, d.th].into_iter().enumerate() {
            let v = clamp_delta(v);
            f[2 * c + k] = cfg.gain_body * v;
            f[2 * c + 8 + k] = cfg.gain_body * v * ov;
        }
    }
    // coverage-gated part deltas: active wherever the part is fully seen,
    // which ties part-sized inputs and their outer boxes together
    if let Some((j, _)) = best_part {
        let part = scene.parts[j].expect("best part exists");
        let cov = intersection_area(b, &part) / part.area();
        let d = encode(&part, b);
        for (k, v) in [d.tx, d.ty, d.tw, d.th].into_iter().enumerate() {
            f[2 * c + 4 + k] = cfg.gain_part * clamp_delta(v) * cov;
        }
    }

    f[2 * c + 12] = b.w / cfg.canvas_w;
    f[2 * c + 13] = b.h / cfg.canvas_h;
    f[2 * c + 14] = b.x / cfg.canvas_w;
    f[2 * c + 15] = b.y / cfg.canvas_h;

    if cfg.feature_noise > 0.0 {
        for v in f.iter_mut() {
            *v += rng.random_range(-cfg.feature_noise..cfg.feature_noise);
        }
    }
    f
}

fn sample_jitter(
    b: &BBox,
    shift: f64,
    scale_lo: f64,
    scale_hi: f64,
    rng: &mut impl Rng,
) -> BBox {
    BBox::new(
        b.x + rng.random_range(-shift..shift) * b.w,
        b.y + rng.random_range(-shift..shift) * b.h,
        b.w * rng.random_range(scale_lo..scale_hi),
        b.h * rng.random_range(scale_lo..scale_hi),
    )
}

fn sample_uniform_box(cfg: &WorldConfig, rng: &mut impl Rng) -> BBox {
    let w = rng.random_range(0.5 * cfg.object_min_size..1.1 * cfg.object_max_size)
        .min(cfg.canvas_w * 0.95);
    let h = rng.random_range(0.5 * cfg.object_min_size..1.1 * cfg.object_max_size)
        .min(cfg.canvas_h * 0.95);
    BBox::new(
        rng.random_range(w / 2.0..cfg.canvas_w - w / 2.0),
        rng.random_range(h / 2.0..cfg.canvas_h - h / 2.0),
        w,
        h,
    )
}

fn generate_image(cfg: &WorldConfig, index: u64) -> ImageRecord {
    let mut rng = stream(cfg.seed, "world", index);

    let n_objects = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let mut objects = Vec::with_capacity(n_objects);
    let mut parts = Vec::with_capacity(n_objects);
    let mut image_label = vec![false; cfg.classes];
    for _ in 0..n_objects {
        let class = rng.random_range(0..cfg.classes);
        let w = rng.random_range(cfg.object_min_size..cfg.object_max_size);
        let h = rng.random_range(cfg.object_min_size..cfg.object_max_size);
        let x = rng.random_range(w / 2.0..cfg.canvas_w - w / 2.0);
        let y = rng.random_range(h / 2.0..cfg.canvas_h - h / 2.0);
        let obj = BBox::new(x, y, w, h);
        image_label[class] = true;

        let part = if cfg.part_classes.contains(&class) {
            let pw = cfg.part_fraction * w;
            let ph = cfg.part_fraction * h;
            // keep the part strictly inside and near-centered
            let mx = 0.25 * (w - pw) / 2.0;
            let my = 0.25 * (h - ph) / 2.0;
            Some(BBox::new(
                x + rng.random_range(-mx..mx),
                y + rng.random_range(-my..my),
                pw,
                ph,
            ))
        } else {
            None
        };
        objects.push((obj, class));
        parts.push(part);
    }
    let scene = GroundTruthScene { objects, parts, image_label };

    // coverage guarantee: one tight copy per object first
    let mut boxes = Vec::with_capacity(cfg.proposals_per_image);
    for (obj, _) in &scene.objects {
        boxes.push(sample_jitter(obj, 0.04, 0.96, 1.04, &mut rng));
    }
    let total_mix = cfg.mix_gt + cfg.mix_part + cfg.mix_uniform;
    let has_parts = scene.parts.iter().any(Option::is_some);
    while boxes.len() < cfg.proposals_per_image {
        let u = rng.random_range(0.0..total_mix);
        let b = if u < cfg.mix_gt || (u < cfg.mix_gt + cfg.mix_part && !has_parts) {
            let (obj, _) = scene.objects[rng.random_range(0..scene.objects.len())];
            sample_jitter(&obj, 0.15, 0.75, 1.3, &mut rng)
        } else if u < cfg.mix_gt + cfg.mix_part {
            let with_parts: Vec<usize> = scene
                .parts
                .iter()
                .enumerate()
                .filter_map(|(j, p)| p.map(|_| j))
                .collect();
            let j = with_parts[rng.random_range(0..with_parts.len())];
            let part = scene.parts[j].expect("part present");
            sample_jitter(&part, 0.08, 0.85, 1.2, &mut rng)
        } else {
            sample_uniform_box(cfg, &mut rng)
        };
        boxes.push(b);
    }

    let features = boxes
        .iter()
        .map(|b| box_features(cfg, &scene, b, &mut rng))
        .collect();
    ImageRecord { scene, proposals: ProposalSet { boxes, features } }
}

/// Generate a reproducible world: a pure function of the config, independent
/// of thread count.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let images: Vec<ImageRecord> = (0..cfg.num_images as u64)
        .into_par_iter()
        .map(|i| generate_image(cfg, i))
        .collect();
    Ok(World { cfg: cfg.clone(), images })
}

/// Failure-mode rates of the simulated weak detector.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    /// Probability that a part-class object is predicted as its part box.
    pub part_rate: f64,
    /// Probability of an accurate box with a wrong class.
    pub mislabel_rate: f64,
    /// Probability that an object is missed entirely.
    pub drop_rate: f64,
    /// Expected number of background false positives per image.
    pub fp_per_image: f64,
    /// Relative localization jitter on full-extent predictions; 0 emits
    /// ground-truth boxes exactly.
    pub box_jitter: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            part_rate: 0.55,
            mislabel_rate: 0.12,
            drop_rate: 0.05,
            fp_per_image: 1.0,
            box_jitter: 0.05,
        }
    }
}

fn score_in(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Simulate weak-detector predictions on one scene.
///
/// Per object: part box (part classes only, `part_rate`), mislabel
/// (`mislabel_rate`), drop (`drop_rate`), otherwise the exact box with the
/// correct class. Background false positives are drawn from low-overlap
/// proposals at `fp_per_image`.
pub fn corrupt_to_wsod_output(
    scene: &GroundTruthScene,
    proposals: &ProposalSet,
    noise: &NoiseModel,
    rng: &mut impl Rng,
) -> Vec<Detection> {
    let classes = scene.image_label.len();
    let mut preds = Vec::new();
    let jittered = |obj: &BBox, rng: &mut dyn rand::RngCore| {
        if noise.box_jitter == 0.0 {
            return *obj;
        }
        let a = noise.box_jitter;
        BBox::new(
            obj.x + rng.random_range(-a..a) * obj.w,
            obj.y + rng.random_range(-a..a) * obj.h,
            obj.w * rng.random_range(1.0 - a..1.0 + a),
            obj.h * rng.random_range(1.0 - a..1.0 + a),
        )
    };
    for (j, (obj, class)) in scene.objects.iter().enumerate() {
        let part_rate = if scene.parts[j].is_some() { noise.part_rate } else { 0.0 };
        let u: f64 = rng.random_range(0.0..1.0);
        if u < part_rate {
            let part = scene.parts[j].expect("part-class object");
            preds.push(Detection { bbox: part, class: *class, score: score_in(rng, 0.6, 1.0) });
        } else if u < part_rate + noise.mislabel_rate {
            let mut wrong = rng.random_range(0..classes - 1);
            if wrong >= *class {
                wrong += 1;
            }
            preds.push(Detection {
                bbox: jittered(obj, rng),
                class: wrong,
                score: score_in(rng, 0.4, 0.9),
            });
        } else if u < part_rate + noise.mislabel_rate + noise.drop_rate {
            // dropped
        } else {
            preds.push(Detection {
                bbox: jittered(obj, rng),
                class: *class,
                score: score_in(rng, 0.6, 1.0),
            });
        }
    }

    let mut n_fp = noise.fp_per_image.floor() as usize;
    let frac = noise.fp_per_image - noise.fp_per_image.floor();
    if frac > 0.0 && rng.random_range(0.0..1.0) < frac {
        n_fp += 1;
    }
    for _ in 0..n_fp {
        if proposals.boxes.is_empty() {
            break;
        }
        // prefer proposals that sit on background
        let mut pick = proposals.boxes[rng.random_range(0..proposals.boxes.len())];
        for _ in 0..16 {
            let max_ov = scene
                .objects
                .iter()
                .map(|(o, _)| iou(&pick, o))
                .fold(0.0, f64::max);
            if max_ov < 0.3 {
                break;
            }
            pick = proposals.boxes[rng.random_range(0..proposals.boxes.len())];
        }
        preds.push(Detection {
            bbox: pick,
            class: rng.random_range(0..classes),
            score: score_in(rng, 0.05, 0.5),
        });
    }
    preds
}
