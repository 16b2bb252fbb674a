//! Teacher-student semi-supervised training on a split dataset.
//!
//! The student takes gradient steps on a tag-gated supervised loss over the
//! labeled instances plus `lambda_u` times an unsupervised loss against
//! teacher pseudo labels on the unlabeled stream; the teacher tracks the
//! student by exponential moving average. Pseudo-label regression is gated
//! per box by a jitter stability probe: a box only supervises regression
//! when the teacher's decoded outputs stay put under small input-box
//! perturbations.

use rand::Rng;

use crate::detector::{
    assign, detect, forward_one, loss_and_grad, noised_features, DetectorParams,
};
use crate::geometry::{decode, BBox};
use crate::labelgen::Instance;
use crate::split::SplitResult;
use crate::synthworld::{box_features, World};
use crate::{Error, Result};

/// NMS threshold applied to teacher detections before pseudo-label scoring.
const PSEUDO_NMS_T: f64 = 0.3;

/// Jitter distribution for the regression stability probe: small shifts and
/// scales, unlike the outer-box sampler.
const JITTER_SHIFT: f64 = 0.06;
const JITTER_SCALE_LO: f64 = 0.94;
const JITTER_SCALE_HI: f64 = 1.06;

#[derive(Debug, Clone, PartialEq)]
pub struct SsodConfig {
    /// Weight of the unsupervised loss.
    pub lambda_u: f64,
    pub teacher_momentum: f64,
    pub pseudo_score_threshold: f64,
    pub jitter_samples: usize,
    /// Ceiling on the mean size-normalized standard deviation of jittered
    /// regressions for a pseudo box to keep its regression tag.
    pub jitter_variance_threshold: f64,
    pub tau_assign: f64,
    pub steps: usize,
    pub lr: f64,
    /// Images per step on each of the labeled and unlabeled streams.
    pub batch: usize,
    /// Amplitude of the bounded noise injected into the student's input
    /// features on the unsupervised stream.
    pub feature_noise: f64,
}

impl Default for SsodConfig {
    fn default() -> Self {
        Self {
            lambda_u: 2.0,
            teacher_momentum: 0.996,
            pseudo_score_threshold: 0.8,
            jitter_samples: 10,
            jitter_variance_threshold: 0.02,
            tau_assign: 0.5,
            steps: 600,
            lr: 0.01,
            batch: 8,
            feature_noise: 0.01,
        }
    }
}

/// A teacher-produced pseudo label; `reg_ok` reports the jitter probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub instance: Instance,
    pub reg_ok: bool,
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt()
}

/// Teacher inference on one unlabeled image: NMS-filtered detections above
/// the score threshold become pseudo labels with `lambda_cls` set; each then
/// gets `jitter_samples` perturbed copies regressed through the teacher, and
/// keeps `lambda_reg` only if the mean size-normalized per-coordinate
/// standard deviation of the decoded boxes stays below the threshold.
pub fn pseudo_label(
    teacher: &DetectorParams,
    world: &World,
    image: usize,
    cfg: &SsodConfig,
    rng: &mut impl Rng,
) -> Result<Vec<PseudoLabel>> {
    let img = &world.images[image];
    let dets = detect(teacher, img, PSEUDO_NMS_T)?;
    let mut out = Vec::new();
    for d in dets {
        if d.score < cfg.pseudo_score_threshold {
            continue;
        }
        let b = d.bbox;
        let mut xs = Vec::with_capacity(cfg.jitter_samples);
        let mut ys = Vec::with_capacity(cfg.jitter_samples);
        let mut ws = Vec::with_capacity(cfg.jitter_samples);
        let mut hs = Vec::with_capacity(cfg.jitter_samples);
        for _ in 0..cfg.jitter_samples {
            let jb = BBox::new(
                b.x + rng.random_range(-JITTER_SHIFT..JITTER_SHIFT) * b.w,
                b.y + rng.random_range(-JITTER_SHIFT..JITTER_SHIFT) * b.h,
                b.w * rng.random_range(JITTER_SCALE_LO..JITTER_SCALE_HI),
                b.h * rng.random_range(JITTER_SCALE_LO..JITTER_SCALE_HI),
            );
            let feats = box_features(&world.cfg, &img.scene, &jb, rng);
            let o = forward_one(teacher, &feats)?;
            let decoded = decode(&o.roi_delta[d.class], &jb);
            xs.push(decoded.x);
            ys.push(decoded.y);
            ws.push(decoded.w);
            hs.push(decoded.h);
        }
        let dev = (sample_std(&xs) / b.w
            + sample_std(&ys) / b.h
            + sample_std(&ws) / b.w
            + sample_std(&hs) / b.h)
            / 4.0;
        let reg_ok = dev < cfg.jitter_variance_threshold;
        out.push(PseudoLabel {
            instance: Instance::with_tags(b, d.class, true, reg_ok),
            reg_ok,
        });
    }
    Ok(out)
}

/// Tag-gated supervised loss over the labeled images: per-image gated loss
/// via the detector, averaged over the images that carry labeled instances.
/// Returns zero loss and gradient when nothing is labeled.
pub fn supervised_loss(
    params: &DetectorParams,
    world: &World,
    labeled: &[Vec<Instance>],
    tau_assign: f64,
) -> Result<(f64, DetectorParams)> {
    let mut grad = DetectorParams::zeros(params.feature_dim(), params.classes());
    let mut loss = 0.0;
    let mut n_images = 0usize;
    for (img, targets) in world.images.iter().zip(labeled) {
        if targets.is_empty() {
            continue;
        }
        n_images += 1;
        let assignments = assign(&img.proposals.boxes, targets, tau_assign);
        let (lb, g) =
            loss_and_grad(params, &img.proposals.features, &img.proposals.boxes, targets, &assignments)?;
        loss += lb.total();
        grad.axpy(1.0, &g);
    }
    if n_images > 0 {
        let scale = 1.0 / n_images as f64;
        loss *= scale;
        let mut scaled = DetectorParams::zeros(params.feature_dim(), params.classes());
        scaled.axpy(scale, &grad);
        grad = scaled;
    }
    Ok((loss, grad))
}

/// `teacher <- m*teacher + (1-m)*student`, entry by entry.
pub fn ema_update(teacher: &mut DetectorParams, student: &DetectorParams, momentum: f64) {
    for (t, s) in [
        (&mut teacher.rpn_cls, &student.rpn_cls),
        (&mut teacher.rpn_reg, &student.rpn_reg),
        (&mut teacher.roi_cls, &student.roi_cls),
        (&mut teacher.roi_reg, &student.roi_reg),
    ] {
        for (tv, sv) in t.data.iter_mut().zip(&s.data) {
            *tv = momentum * *tv + (1.0 - momentum) * *sv;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub step: usize,
    pub l_sup: f64,
    pub l_unsup: f64,
    pub l_total: f64,
    pub n_pseudo: usize,
    pub n_reg_ok: usize,
}

#[derive(Debug, Clone)]
pub struct SsodOutcome {
    pub student: DetectorParams,
    pub teacher: DetectorParams,
    pub log: Vec<StepLog>,
    /// Student parameters after every step, for EMA audit.
    pub student_trace: Vec<DetectorParams>,
}

/// Per-step training log in the shared comma-separated layout.
pub fn training_log_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,l_sup,l_unsup,l_total,n_pseudo,n_reg_ok\n");
    for l in log {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{},{}\n",
            l.step, l.l_sup, l.l_unsup, l.l_total, l.n_pseudo, l.n_reg_ok
        ));
    }
    out
}

/// Build the per-image labeled target lists from a split result.
pub fn labeled_view(split: &SplitResult, pseudo: &[Vec<Instance>]) -> Vec<Vec<Instance>> {
    let mut labeled: Vec<Vec<Instance>> = vec![Vec::new(); pseudo.len()];
    for t in &split.labeled {
        let inst = pseudo[t.image][t.instance];
        labeled[t.image].push(Instance::with_tags(
            inst.bbox,
            inst.class,
            t.lambda_cls,
            t.lambda_reg,
        ));
    }
    labeled
}

/// Distinct image indices for one batch, cycling through `pool` from a
/// step-dependent cursor.
fn batch_indices(pool: &[usize], step: usize, batch: usize) -> Vec<usize> {
    if pool.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(batch.min(pool.len()));
    for j in 0..batch {
        let idx = pool[(step * batch + j) % pool.len()];
        if !out.contains(&idx) {
            out.push(idx);
        }
    }
    out
}

/// One supervised mini-batch gradient step: mean gated loss over the batch
/// images. Shared by [`ssod_train`] and [`supervised_only_train`].
fn sup_batch_step(
    student: &mut DetectorParams,
    world: &World,
    labeled: &[Vec<Instance>],
    batch: &[usize],
    cfg: &SsodConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut grad = DetectorParams::zeros(student.feature_dim(), student.classes());
    let mut loss = 0.0;
    for &image in batch {
        let img = &world.images[image];
        let targets = &labeled[image];
        let assignments = assign(&img.proposals.boxes, targets, cfg.tau_assign);
        let (lb, g) = loss_and_grad(
            student,
            &img.proposals.features,
            &img.proposals.boxes,
            targets,
            &assignments,
        )?;
        loss += lb.total();
        grad.axpy(1.0, &g);
    }
    let scale = 1.0 / batch.len() as f64;
    student.axpy(-cfg.lr * scale, &grad);
    Ok(loss * scale)
}

/// Supervised-only reference loop: the labeled stream of [`ssod_train`]
/// without teacher or unsupervised loss.
pub fn supervised_only_train(
    student0: DetectorParams,
    world: &World,
    split: &SplitResult,
    pseudo: &[Vec<Instance>],
    cfg: &SsodConfig,
) -> Result<DetectorParams> {
    let labeled = labeled_view(split, pseudo);
    let labeled_images: Vec<usize> =
        (0..labeled.len()).filter(|&i| !labeled[i].is_empty()).collect();
    let mut student = student0;
    for step in 0..cfg.steps {
        let batch = batch_indices(&labeled_images, step, cfg.batch);
        let l_sup = sup_batch_step(&mut student, world, &labeled, &batch, cfg)?;
        if !l_sup.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
    }
    Ok(student)
}

/// Teacher-student training. The student starts from `student0`, the teacher
/// from a copy of it. Per step: one supervised mini-batch on the labeled
/// stream, then (for `lambda_u > 0`) one unlabeled mini-batch where the
/// teacher pseudo-labels each image and the student learns from its noised
/// features, then the teacher EMA update. Returns both models; the teacher
/// is the stabler one for label regeneration.
pub fn ssod_train(
    student0: DetectorParams,
    world: &World,
    split: &SplitResult,
    pseudo: &[Vec<Instance>],
    cfg: &SsodConfig,
    rng: &mut impl Rng,
) -> Result<SsodOutcome> {
    let labeled = labeled_view(split, pseudo);
    let labeled_images: Vec<usize> =
        (0..labeled.len()).filter(|&i| !labeled[i].is_empty()).collect();
    let mut student = student0;
    let mut teacher = student.clone();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut student_trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = batch_indices(&labeled_images, step, cfg.batch);
        let l_sup = sup_batch_step(&mut student, world, &labeled, &batch, cfg)?;

        let mut l_unsup = 0.0;
        let mut n_pseudo = 0usize;
        let mut n_reg_ok = 0usize;
        if cfg.lambda_u != 0.0 {
            let unsup_batch = batch_indices(&split.unlabeled_images, step, cfg.batch);
            let mut unsup_grad = DetectorParams::zeros(student.feature_dim(), student.classes());
            let mut n_images = 0usize;
            for &image in &unsup_batch {
                let labels = pseudo_label(&teacher, world, image, cfg, rng)?;
                if labels.is_empty() {
                    continue;
                }
                n_images += 1;
                n_pseudo += labels.len();
                n_reg_ok += labels.iter().filter(|l| l.reg_ok).count();
                let instances: Vec<Instance> = labels.iter().map(|l| l.instance).collect();
                let img = &world.images[image];
                let noised = noised_features(&img.proposals.features, cfg.feature_noise, rng);
                let assignments = assign(&img.proposals.boxes, &instances, cfg.tau_assign);
                let (lb, g) =
                    loss_and_grad(&student, &noised, &img.proposals.boxes, &instances, &assignments)?;
                l_unsup += lb.total();
                unsup_grad.axpy(1.0, &g);
            }
            if n_images > 0 {
                let scale = 1.0 / n_images as f64;
                l_unsup *= scale;
                student.axpy(-cfg.lr * cfg.lambda_u * scale, &unsup_grad);
            }
        }

        let l_total = l_sup + cfg.lambda_u * l_unsup;
        if !l_total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        ema_update(&mut teacher, &student, cfg.teacher_momentum);
        log.push(StepLog { step, l_sup, l_unsup, l_total, n_pseudo, n_reg_ok });
        student_trace.push(student.clone());
    }
    Ok(SsodOutcome { student, teacher, log, student_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::split::{SplitMode, SplitResult, TaggedInstance};
    use crate::synthworld::{generate_world, WorldConfig};

    fn world_and_pseudo() -> (World, Vec<Vec<Instance>>) {
        let world = generate_world(&WorldConfig { num_images: 6, ..WorldConfig::default() })
            .unwrap();
        let pseudo: Vec<Vec<Instance>> = world
            .images
            .iter()
            .map(|img| img.scene.objects.iter().map(|(b, c)| Instance::new(*b, *c)).collect())
            .collect();
        (world, pseudo)
    }

    fn full_split(pseudo: &[Vec<Instance>]) -> SplitResult {
        let labeled = pseudo
            .iter()
            .enumerate()
            .flat_map(|(image, insts)| {
                (0..insts.len()).map(move |instance| TaggedInstance {
                    image,
                    instance,
                    lambda_cls: true,
                    lambda_reg: true,
                })
            })
            .collect();
        SplitResult {
            labeled,
            unlabeled_images: (0..pseudo.len()).collect(),
            mode: SplitMode::Instance,
            p: 1.0,
        }
    }

    /// A teacher that decodes every input box to the best-overlapping scene
    /// object: copy the body-delta feature channel, undoing its gain.
    fn body_copy_teacher(world: &World) -> DetectorParams {
        let cfg = &world.cfg;
        let mut params = DetectorParams::zeros(cfg.feature_dim, cfg.classes);
        let base = 2 * cfg.classes;
        for class in 0..cfg.classes {
            for k in 0..4 {
                *params.roi_reg.at_mut(base + k, 4 * class + k) = 1.0 / cfg.gain_body;
            }
        }
        params
    }

    #[test]
    fn constant_regression_output_has_zero_deviation() {
        let (world, _) = world_and_pseudo();
        // teacher that always decodes to the scene's best body box,
        // regardless of the input box
        let mut teacher = body_copy_teacher(&world);
        // score the first class highly so a pseudo label is emitted
        *teacher.roi_cls.at_mut(world.cfg.feature_dim, 0) = 8.0;
        let found = (0..world.images.len()).any(|image| {
            let mut rng = stream(31, "ssod-test", image as u64);
            let cfg = SsodConfig {
                pseudo_score_threshold: 0.5,
                jitter_variance_threshold: 0.05,
                ..SsodConfig::default()
            };
            let labels = pseudo_label(&teacher, &world, image, &cfg, &mut rng).unwrap();
            labels.iter().any(|l| l.reg_ok)
        });
        assert!(found, "stable regressions should pass the jitter probe");
    }

    #[test]
    fn score_below_threshold_is_not_emitted() {
        let (world, _) = world_and_pseudo();
        // zero teacher scores everything uniformly at 1/(C+1) < 0.7
        let teacher = DetectorParams::zeros(world.cfg.feature_dim, world.cfg.classes);
        let mut rng = stream(32, "ssod-test", 0);
        let labels =
            pseudo_label(&teacher, &world, 0, &SsodConfig::default(), &mut rng).unwrap();
        assert!(labels.is_empty());
    }

    #[test]
    fn jitter_deviation_matches_closed_form_for_constant_delta() {
        // teacher whose regression head outputs a constant delta: decoded
        // coordinates are a linear map of the jitter draws, so the sample
        // deviation can be recomputed from a replayed RNG stream
        let (world, _) = world_and_pseudo();
        let cfg_w = &world.cfg;
        let mut teacher = DetectorParams::zeros(cfg_w.feature_dim, cfg_w.classes);
        let (tx, ty, tw, th) = (0.05, -0.03, 0.1, -0.08);
        for class in 0..cfg_w.classes {
            *teacher.roi_reg.at_mut(cfg_w.feature_dim, 4 * class) = tx;
            *teacher.roi_reg.at_mut(cfg_w.feature_dim, 4 * class + 1) = ty;
            *teacher.roi_reg.at_mut(cfg_w.feature_dim, 4 * class + 2) = tw;
            *teacher.roi_reg.at_mut(cfg_w.feature_dim, 4 * class + 3) = th;
        }
        *teacher.roi_cls.at_mut(cfg_w.feature_dim, 0) = 8.0;

        let cfg = SsodConfig { pseudo_score_threshold: 0.5, ..SsodConfig::default() };
        let image = 0;
        let mut rng = stream(33, "ssod-test", 7);
        let labels = pseudo_label(&teacher, &world, image, &cfg, &mut rng).unwrap();
        assert!(!labels.is_empty());

        // replay: identical stream, identical draw order
        let mut replay = stream(33, "ssod-test", 7);
        let img = &world.images[image];
        let dets = detect(&teacher, img, PSEUDO_NMS_T).unwrap();
        for (d, label) in dets
            .iter()
            .filter(|d| d.score >= cfg.pseudo_score_threshold)
            .zip(&labels)
        {
            let b = d.bbox;
            let (mut xs, mut ys, mut ws, mut hs) = (vec![], vec![], vec![], vec![]);
            for _ in 0..cfg.jitter_samples {
                let jb = BBox::new(
                    b.x + replay.random_range(-JITTER_SHIFT..JITTER_SHIFT) * b.w,
                    b.y + replay.random_range(-JITTER_SHIFT..JITTER_SHIFT) * b.h,
                    b.w * replay.random_range(JITTER_SCALE_LO..JITTER_SCALE_HI),
                    b.h * replay.random_range(JITTER_SCALE_LO..JITTER_SCALE_HI),
                );
                // consume the feature-noise draws exactly as pseudo_label does
                let _ = box_features(cfg_w, &img.scene, &jb, &mut replay);
                // closed form of the decoded box under a constant delta
                xs.push(jb.x + tx * jb.w);
                ys.push(jb.y + ty * jb.h);
                ws.push(jb.w * tw.exp());
                hs.push(jb.h * th.exp());
            }
            let dev = (sample_std(&xs) / b.w
                + sample_std(&ys) / b.h
                + sample_std(&ws) / b.w
                + sample_std(&hs) / b.h)
                / 4.0;
            let expected = dev < cfg.jitter_variance_threshold;
            assert_eq!(label.reg_ok, expected);
            // the probe itself is reproducible to closed form
            assert!(dev.is_finite());
        }
    }

    #[test]
    fn all_tags_set_equals_ungated_loss() {
        let (world, pseudo) = world_and_pseudo();
        let split = full_split(&pseudo);
        let labeled = labeled_view(&split, &pseudo);
        let params = DetectorParams::zeros(world.cfg.feature_dim, world.cfg.classes);
        let (gated, _) = supervised_loss(&params, &world, &labeled, 0.5).unwrap();
        let (plain, _) = supervised_loss(&params, &world, &pseudo, 0.5).unwrap();
        assert_eq!(gated, plain);
    }

    #[test]
    fn cls_only_tags_zero_out_regression() {
        let (world, pseudo) = world_and_pseudo();
        let cls_only: Vec<Vec<Instance>> = pseudo
            .iter()
            .map(|insts| {
                insts
                    .iter()
                    .map(|i| Instance::with_tags(i.bbox, i.class, true, false))
                    .collect()
            })
            .collect();
        let mut params = DetectorParams::zeros(world.cfg.feature_dim, world.cfg.classes);
        // nonzero reg weights so a reg term would show if ungated
        *params.roi_reg.at_mut(0, 0) = 0.7;
        *params.rpn_reg.at_mut(0, 0) = -0.4;
        let (_, grad) = supervised_loss(&params, &world, &cls_only, 0.5).unwrap();
        assert!(grad.roi_reg.data.iter().all(|&v| v == 0.0));
        assert!(grad.rpn_reg.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn supervised_loss_is_mean_over_labeled_images() {
        let (world, pseudo) = world_and_pseudo();
        let params = DetectorParams::zeros(world.cfg.feature_dim, world.cfg.classes);
        let (all, _) = supervised_loss(&params, &world, &pseudo, 0.5).unwrap();
        let mut per_image = Vec::new();
        for i in 0..world.images.len() {
            let mut only: Vec<Vec<Instance>> = vec![Vec::new(); world.images.len()];
            only[i] = pseudo[i].clone();
            let (l, _) = supervised_loss(&params, &world, &only, 0.5).unwrap();
            per_image.push(l);
        }
        let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
        assert!((all - mean).abs() < 1e-12);
    }

    #[test]
    fn lambda_u_zero_matches_supervised_only_loop_bitwise() {
        let (world, pseudo) = world_and_pseudo();
        let split = full_split(&pseudo);
        let cfg = SsodConfig { lambda_u: 0.0, steps: 20, lr: 0.1, ..SsodConfig::default() };
        let student0 = DetectorParams::zeros(world.cfg.feature_dim, world.cfg.classes);
        let mut rng = stream(34, "ssod-test", 1);
        let out = ssod_train(student0.clone(), &world, &split, &pseudo, &cfg, &mut rng).unwrap();
        let reference =
            supervised_only_train(student0, &world, &split, &pseudo, &cfg).unwrap();
        assert_eq!(out.student, reference);
    }

    #[test]
    fn training_log_has_the_documented_layout() {
        let (world, pseudo) = world_and_pseudo();
        let split = full_split(&pseudo);
        let cfg = SsodConfig { steps: 4, ..SsodConfig::default() };
        let mut rng = stream(37, "ssod-test", 4);
        let out = ssod_train(
            DetectorParams::zeros(world.cfg.feature_dim, world.cfg.classes),
            &world,
            &split,
            &pseudo,
            &cfg,
            &mut rng,
        )
        .unwrap();
        let csv = training_log_csv(&out.log);
        assert!(csv.starts_with("step,l_sup,l_unsup,l_total,n_pseudo,n_reg_ok\n"));
        assert_eq!(csv.lines().count(), 1 + cfg.steps);
    }

    #[test]
    fn frozen_teacher_at_momentum_one() {
        let (world, pseudo) = world_and_pseudo();
        let split = full_split(&pseudo);
        let cfg = SsodConfig { teacher_momentum: 1.0, steps: 6, ..SsodConfig::default() };
        let student0 = DetectorParams::zeros(world.cfg.feature_dim, world.cfg.classes);
        let mut rng = stream(35, "ssod-test", 2);
        let out = ssod_train(student0.clone(), &world, &split, &pseudo, &cfg, &mut rng).unwrap();
        assert_eq!(out.teacher, student0);
        assert_ne!(out.student, student0);
    }

    #[test]
    fn teacher_replays_bitwise_from_student_trace() {
        let (world, pseudo) = world_and_pseudo();
        let split = full_split(&pseudo);
        let cfg = SsodConfig { steps: 12, lr: 0.2, ..SsodConfig::default() };
        let student0 = DetectorParams::zeros(world.cfg.feature_dim, world.cfg.classes);
        let mut rng = stream(36, "ssod-test", 3);
        let out = ssod_train(student0.clone(), &world, &split, &pseudo, &cfg, &mut rng).unwrap();
        let mut teacher = student0;
        for s in &out.student_trace {
            ema_update(&mut teacher, s, cfg.teacher_momentum);
        }
        assert_eq!(out.teacher, teacher);
    }
}
