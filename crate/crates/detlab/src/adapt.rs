//! Localization adaptation.
//!
//! Trains a fresh detector on the current pseudo ground-truths while
//! maintaining, for every pseudo box, an EMA-tracked regularization target
//! built from the regressions of randomly sampled outer boxes. A decoded
//! outer box is accepted into the EMA only while its class score clears
//! `tau_score` and its IoU against the pseudo box stays below `tau_assign`,
//! i.e. while the regressor still escapes the (possibly discriminative-part)
//! pseudo box. The initialized EMA boxes then join the loss as a second
//! target set weighted by `lambda_re`, and the trained detector regenerates
//! the pseudo ground-truths.

use rand::Rng;
use rayon::prelude::*;

use crate::detector::{assign, descend_on_image, detect_raw, forward_one, DetectorParams};
use crate::geometry::{box_ema, decode, iou, sample_outer_box, BBox};
use crate::labelgen::{excavate, Instance, PgeConfig};
use crate::synthworld::{box_features, World};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LaConfig {
    /// Minimum class score for a decoded outer box to update its EMA target.
    pub tau_score: f64,
    /// Label-assignment threshold; doubles as the EMA acceptance ceiling on
    /// IoU to the pseudo box.
    pub tau_assign: f64,
    /// Weight of the regularization target set in the total loss.
    pub lambda_re: f64,
    /// Outer-box center shift range.
    pub alpha: f64,
    /// EMA momentum of the regularization boxes.
    pub beta: f64,
    pub steps: usize,
    pub lr: f64,
    /// Gradient steps per emitted IoU-curve row.
    pub curve_interval: usize,
}

impl Default for LaConfig {
    fn default() -> Self {
        Self {
            tau_score: 0.1,
            tau_assign: 0.5,
            lambda_re: 0.1,
            alpha: 0.05,
            beta: 0.8,
            steps: 4800,
            lr: 0.05,
            curve_interval: 480,
        }
    }
}

/// EMA regularization target for one pseudo instance. `ema` stays `None`
/// until the first accepted decoded box initializes it; rejected iterations
/// leave it frozen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegTarget {
    pub ema: Option<BBox>,
}

/// One accepted decoded outer box, retained for audit and replay.
#[derive(Debug, Clone, Copy)]
pub struct AcceptEvent {
    pub step: usize,
    pub image: usize,
    pub instance: usize,
    pub decoded: BBox,
    pub score: f64,
    pub iou_to_pseudo: f64,
}

/// Mean IoUs of the decoded outer boxes over one logging interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub iter: usize,
    pub iou_gt: f64,
    pub iou_pgt: f64,
}

#[derive(Debug, Clone)]
pub struct LaRun {
    pub params: DetectorParams,
    /// Per image, per pseudo instance.
    pub reg_targets: Vec<Vec<RegTarget>>,
    pub curve: Vec<CurvePoint>,
    pub accepted: Vec<AcceptEvent>,
    pub loss_history: Vec<f64>,
}

/// Best IoU of `b` against ground-truth objects of `class`, falling back to
/// any object when the class is absent from the scene.
fn best_gt_iou(world: &World, image: usize, class: usize, b: &BBox) -> f64 {
    let objects = &world.images[image].scene.objects;
    let same_class = objects
        .iter()
        .filter(|(_, c)| *c == class)
        .map(|(g, _)| iou(b, g))
        .fold(f64::NEG_INFINITY, f64::max);
    if same_class.is_finite() {
        return same_class.max(0.0);
    }
    objects.iter().map(|(g, _)| iou(b, g)).fold(0.0, f64::max)
}

/// One localization-adaptation update on a single image: sample an outer box
/// per pseudo instance, filter and fold the decoded boxes into the EMA
/// targets, then take one gradient step on the pseudo targets plus the
/// `lambda_re`-weighted initialized EMA targets.
///
/// Returns the step's total loss and the per-sample (IoU to GT, IoU to
/// pseudo) curve measurements.
#[allow(clippy::too_many_arguments)]
pub fn la_step(
    params: &mut DetectorParams,
    world: &World,
    image: usize,
    pseudo_img: &[Instance],
    assignments: &[crate::detector::Assignment],
    reg_targets: &mut [RegTarget],
    cfg: &LaConfig,
    step: usize,
    accepted: &mut Vec<AcceptEvent>,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<(f64, f64)>)> {
    // curve statistics track the failure-prone classes; with no part
    // classes configured every instance is measured
    let tracked =
        |class: usize| world.cfg.part_classes.is_empty() || world.cfg.part_classes.contains(&class);
    let img = &world.images[image];
    let mut samples = Vec::with_capacity(pseudo_img.len());
    for (k, inst) in pseudo_img.iter().enumerate() {
        let outer = sample_outer_box(&inst.bbox, cfg.alpha, rng);
        let feats = box_features(&world.cfg, &img.scene, &outer.result, rng);
        let out = forward_one(params, &feats)?;
        let decoded = decode(&out.roi_delta[inst.class], &outer.result);
        // the quality gate scores the decoded box itself: re-classify its
        // features and take the class-c probability
        let decoded_feats = box_features(&world.cfg, &img.scene, &decoded, rng);
        let score = forward_one(params, &decoded_feats)?.roi_prob[inst.class];
        let iou_pgt = iou(&decoded, &inst.bbox);
        if tracked(inst.class) {
            samples.push((best_gt_iou(world, image, inst.class, &decoded), iou_pgt));
        }
        if score > cfg.tau_score && iou_pgt < cfg.tau_assign {
            let ema = match reg_targets[k].ema {
                None => decoded,
                Some(prev) => box_ema(&prev, &decoded, cfg.beta),
            };
            reg_targets[k].ema = Some(ema);
            accepted.push(AcceptEvent {
                step,
                image,
                instance: k,
                decoded,
                score,
                iou_to_pseudo: iou_pgt,
            });
        }
    }

    let reg_instances: Vec<Instance> = pseudo_img
        .iter()
        .zip(reg_targets.iter())
        .filter_map(|(inst, rt)| rt.ema.map(|b| Instance::new(b, inst.class)))
        .collect();
    let reg = (cfg.lambda_re != 0.0 && !reg_instances.is_empty())
        .then_some((reg_instances.as_slice(), cfg.lambda_re));
    let loss = descend_on_image(params, img, pseudo_img, assignments, reg, cfg.tau_assign, cfg.lr)
        .map_err(|e| match e {
            Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step },
            other => other,
        })?;
    Ok((loss, samples))
}

/// Full localization-adaptation training loop: `cfg.steps` single-image
/// updates cycling through the dataset, with IoU curves aggregated every
/// `cfg.curve_interval` steps.
pub fn la_train(
    mut params: DetectorParams,
    world: &World,
    pseudo: &[Vec<Instance>],
    cfg: &LaConfig,
    rng: &mut impl Rng,
) -> Result<LaRun> {
    if world.images.iter().any(|img| img.scene.objects.is_empty()) {
        return Err(Error::GroundTruthRequired("IoU curve tracking".into()));
    }
    let assignments: Vec<Vec<crate::detector::Assignment>> = world
        .images
        .iter()
        .zip(pseudo)
        .map(|(img, t)| assign(&img.proposals.boxes, t, cfg.tau_assign))
        .collect();
    let mut reg_targets: Vec<Vec<RegTarget>> = pseudo
        .iter()
        .map(|insts| vec![RegTarget { ema: None }; insts.len()])
        .collect();
    let mut accepted = Vec::new();
    let mut curve = Vec::new();
    let mut loss_history = Vec::with_capacity(cfg.steps);
    let mut acc_gt = 0.0;
    let mut acc_pgt = 0.0;
    let mut acc_n = 0usize;
    for step in 0..cfg.steps {
        let image = step % world.images.len();
        let (loss, samples) = la_step(
            &mut params,
            world,
            image,
            &pseudo[image],
            &assignments[image],
            &mut reg_targets[image],
            cfg,
            step,
            &mut accepted,
            rng,
        )?;
        loss_history.push(loss);
        for (g, p) in samples {
            acc_gt += g;
            acc_pgt += p;
            acc_n += 1;
        }
        let boundary = (step + 1) % cfg.curve_interval == 0 || step + 1 == cfg.steps;
        if boundary && acc_n > 0 {
            curve.push(CurvePoint {
                iter: step,
                iou_gt: acc_gt / acc_n as f64,
                iou_pgt: acc_pgt / acc_n as f64,
            });
            acc_gt = 0.0;
            acc_pgt = 0.0;
            acc_n = 0;
        }
    }
    Ok(LaRun { params, reg_targets, curve, accepted, loss_history })
}

/// Regenerate pseudo ground-truths: run detector inference on every image
/// and excavate the raw (proposal, class) predictions.
pub fn refine_labels(
    params: &DetectorParams,
    world: &World,
    pge: &PgeConfig,
) -> Result<Vec<Vec<Instance>>> {
    world
        .images
        .par_iter()
        .map(|img| {
            let preds = detect_raw(params, img)?;
            Ok(excavate(&preds, &img.scene.image_label, pge))
        })
        .collect()
}

/// Two-column IoU curve table for paired runs without and with the
/// regularization loss.
pub fn curves_csv(without: &[CurvePoint], with_reg: &[CurvePoint]) -> String {
    let mut out = String::from("iter,iou_gt,iou_pgt,regularized\n");
    for (points, flag) in [(without, 0), (with_reg, 1)] {
        for p in points {
            out.push_str(&format!("{},{:?},{:?},{}\n", p.iter, p.iou_gt, p.iou_pgt, flag));
        }
    }
    out
}
