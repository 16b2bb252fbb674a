//! Small-loss dataset splitting.
//!
//! A trained detector scores every pseudo instance by its accumulated
//! forward-pass loss; ranking those losses ascending and keeping the top
//! `p` fraction yields the labeled set. Four variants: image-level,
//! instance-level, two-tasks instance-level (separate classification and
//! regression rankings producing per-task tags), and the ideal split that
//! consults ground truth.

use rayon::prelude::*;

use crate::detector::{assign, proposal_losses, DetectorParams};
use crate::geometry::iou;
use crate::labelgen::Instance;
use crate::synthworld::World;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    Image,
    Instance,
    TwoTasks,
    Ideal,
}

impl SplitMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitMode::Image => "image",
            SplitMode::Instance => "instance",
            SplitMode::TwoTasks => "two_tasks",
            SplitMode::Ideal => "ideal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "image" => Some(SplitMode::Image),
            "instance" => Some(SplitMode::Instance),
            "two_tasks" => Some(SplitMode::TwoTasks),
            "ideal" => Some(SplitMode::Ideal),
            _ => None,
        }
    }
}

/// Accumulated loss components for one ranking key (an instance or a whole
/// image), already averaged over the foreground proposals assigned to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub image: usize,
    /// `None` for image-level records.
    pub instance: Option<usize>,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
    pub fg_count: usize,
}

impl LossRecord {
    /// Total split loss; infinite when no foreground proposal supports the
    /// key, so such instances are never selected as clean.
    pub fn total(&self) -> f64 {
        if self.fg_count == 0 {
            return f64::INFINITY;
        }
        self.rpn_cls + self.rpn_reg + self.roi_cls + self.roi_reg
    }

    pub fn cls_total(&self) -> f64 {
        if self.fg_count == 0 {
            return f64::INFINITY;
        }
        self.rpn_cls + self.roi_cls
    }

    pub fn reg_total(&self) -> f64 {
        if self.fg_count == 0 {
            return f64::INFINITY;
        }
        self.rpn_reg + self.roi_reg
    }
}

/// Loss records at both granularities for one dataset pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitRecords {
    pub instances: Vec<LossRecord>,
    pub images: Vec<LossRecord>,
}

/// Forward-only loss accumulation of `pseudo` under detector `params`.
///
/// Per foreground proposal the four components are computed against its
/// assigned instance and averaged into that instance's record; image records
/// average over all of the image's foreground proposals regardless of
/// instance.
pub fn accumulate_losses(
    params: &DetectorParams,
    world: &World,
    pseudo: &[Vec<Instance>],
    tau_assign: f64,
) -> Result<SplitRecords> {
    let per_image: Vec<(Vec<LossRecord>, LossRecord)> = world
        .images
        .par_iter()
        .zip(pseudo.par_iter())
        .enumerate()
        .map(|(img_idx, (img, targets))| {
            let assignments = assign(&img.proposals.boxes, targets, tau_assign);
            let fg = proposal_losses(
                params,
                &img.proposals.features,
                &img.proposals.boxes,
                targets,
                &assignments,
            )?;
            let blank = |instance: Option<usize>| LossRecord {
                image: img_idx,
                instance,
                rpn_cls: 0.0,
                rpn_reg: 0.0,
                roi_cls: 0.0,
                roi_reg: 0.0,
                fg_count: 0,
            };
            let mut inst_records: Vec<LossRecord> =
                (0..targets.len()).map(|j| blank(Some(j))).collect();
            let mut img_record = blank(None);
            for f in &fg {
                for r in [&mut inst_records[f.target], &mut img_record] {
                    r.rpn_cls += f.rpn_cls;
                    r.rpn_reg += f.rpn_reg;
                    r.roi_cls += f.roi_cls;
                    r.roi_reg += f.roi_reg;
                    r.fg_count += 1;
                }
            }
            for r in inst_records.iter_mut().chain(std::iter::once(&mut img_record)) {
                if r.fg_count > 0 {
                    let n = r.fg_count as f64;
                    r.rpn_cls /= n;
                    r.rpn_reg /= n;
                    r.roi_cls /= n;
                    r.roi_reg /= n;
                }
            }
            Ok((inst_records, img_record))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = SplitRecords { instances: Vec::new(), images: Vec::new() };
    for (insts, img) in per_image {
        records.instances.extend(insts);
        records.images.push(img);
    }
    Ok(records)
}

/// A labeled instance with its task tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaggedInstance {
    pub image: usize,
    pub instance: usize,
    pub lambda_cls: bool,
    pub lambda_reg: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub labeled: Vec<TaggedInstance>,
    /// Images feeding the unsupervised stream; every image contributes.
    pub unlabeled_images: Vec<usize>,
    pub mode: SplitMode,
    pub p: f64,
}

impl SplitResult {
    pub fn labeled_tags(&self, image: usize, instance: usize) -> Option<(bool, bool)> {
        self.labeled
            .iter()
            .find(|t| t.image == image && t.instance == instance)
            .map(|t| (t.lambda_cls, t.lambda_reg))
    }
}

fn top_k_count(p: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    ((p * n as f64).floor() as usize).clamp(1, n)
}

/// Indices of the `k` smallest keys, ascending, ties by index, skipping
/// entries with infinite loss.
fn rank_top<F: Fn(&LossRecord) -> f64>(records: &[LossRecord], k: usize, key: F) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| key(&records[a]).total_cmp(&key(&records[b])).then(a.cmp(&b)));
    order
        .into_iter()
        .filter(|&i| key(&records[i]).is_finite())
        .take(k)
        .collect()
}

/// Rank by accumulated loss and keep the top `p` fraction as the labeled
/// set. `mode` must not be [`SplitMode::Ideal`]; that variant needs ground
/// truth and lives in [`ideal_split`].
pub fn split(records: &SplitRecords, mode: SplitMode, p: f64) -> SplitResult {
    debug_assert!(p > 0.0 && p <= 1.0);
    let unlabeled_images: Vec<usize> = (0..records.images.len()).collect();
    let labeled = match mode {
        SplitMode::Image => {
            let k = top_k_count(p, records.images.len());
            let chosen = rank_top(&records.images, k, LossRecord::total);
            let mut labeled = Vec::new();
            for &img_rank in &chosen {
                let img = records.images[img_rank].image;
                for r in records.instances.iter().filter(|r| r.image == img) {
                    if r.total().is_finite() {
                        labeled.push(TaggedInstance {
                            image: img,
                            instance: r.instance.expect("instance record"),
                            lambda_cls: true,
                            lambda_reg: true,
                        });
                    }
                }
            }
            labeled
        }
        SplitMode::Instance => {
            let k = top_k_count(p, records.instances.len());
            rank_top(&records.instances, k, LossRecord::total)
                .into_iter()
                .map(|i| {
                    let r = &records.instances[i];
                    TaggedInstance {
                        image: r.image,
                        instance: r.instance.expect("instance record"),
                        lambda_cls: true,
                        lambda_reg: true,
                    }
                })
                .collect()
        }
        SplitMode::TwoTasks => {
            let k = top_k_count(p, records.instances.len());
            let cls_top = rank_top(&records.instances, k, LossRecord::cls_total);
            let reg_top = rank_top(&records.instances, k, LossRecord::reg_total);
            let mut labeled: Vec<TaggedInstance> = Vec::new();
            let mut tag = |idx: usize, cls: bool| {
                let r = &records.instances[idx];
                let image = r.image;
                let instance = r.instance.expect("instance record");
                if let Some(existing) = labeled
                    .iter_mut()
                    .find(|t| t.image == image && t.instance == instance)
                {
                    existing.lambda_cls |= cls;
                    existing.lambda_reg |= !cls;
                } else {
                    labeled.push(TaggedInstance {
                        image,
                        instance,
                        lambda_cls: cls,
                        lambda_reg: !cls,
                    });
                }
            };
            for idx in cls_top {
                tag(idx, true);
            }
            for idx in reg_top {
                tag(idx, false);
            }
            labeled.sort_by_key(|t| (t.image, t.instance));
            labeled
        }
        SplitMode::Ideal => panic!("ideal split requires ground truth; call ideal_split"),
    };
    SplitResult { labeled, unlabeled_images, mode, p }
}

/// Oracle split: keep a pseudo instance iff some same-class ground-truth box
/// overlaps it with IoU strictly above 0.5; everything else is discarded.
pub fn ideal_split(world: &World, pseudo: &[Vec<Instance>]) -> Result<SplitResult> {
    if world.images.iter().all(|img| img.scene.objects.is_empty()) {
        return Err(Error::GroundTruthRequired("ideal split".into()));
    }
    let mut labeled = Vec::new();
    for (img_idx, (img, instances)) in world.images.iter().zip(pseudo).enumerate() {
        for (j, inst) in instances.iter().enumerate() {
            let hit = img
                .scene
                .objects
                .iter()
                .any(|(b, c)| *c == inst.class && iou(b, &inst.bbox) > 0.5);
            if hit {
                labeled.push(TaggedInstance {
                    image: img_idx,
                    instance: j,
                    lambda_cls: true,
                    lambda_reg: true,
                });
            }
        }
    }
    Ok(SplitResult {
        labeled,
        unlabeled_images: (0..world.images.len()).collect(),
        mode: SplitMode::Ideal,
        p: 1.0,
    })
}

/// Comma-separated audit of every instance record against a split result.
pub fn audit_csv(records: &SplitRecords, result: &SplitResult) -> String {
    let mut out = String::from("key,mode,total,cls_loss,reg_loss,lambda_cls,lambda_reg,labeled\n");
    for r in &records.instances {
        let j = r.instance.expect("instance record");
        let tags = result.labeled_tags(r.image, j);
        let (lc, lr) = tags.unwrap_or((false, false));
        out.push_str(&format!(
            "img{}_ins{},{},{:?},{:?},{:?},{},{},{}\n",
            r.image,
            j,
            result.mode.as_str(),
            r.total(),
            r.cls_total(),
            r.reg_total(),
            u8::from(lc),
            u8::from(lr),
            u8::from(tags.is_some()),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::synthworld::{generate_world, WorldConfig};

    #[test]
    fn perfect_detector_gives_near_zero_records() {
        let cfg_w = WorldConfig {
            num_images: 4,
            objects_min: 1,
            objects_max: 1,
            part_classes: vec![],
            feature_noise: 0.0,
            ..WorldConfig::default()
        };
        let world = generate_world(&cfg_w).unwrap();
        let pseudo: Vec<Vec<Instance>> = world
            .images
            .iter()
            .map(|img| img.scene.objects.iter().map(|(b, c)| Instance::new(*b, *c)).collect())
            .collect();
        // regression copies the body channel; classification keys on body
        // overlap with a saturating margin
        let mut params =
            crate::detector::DetectorParams::zeros(cfg_w.feature_dim, cfg_w.classes);
        let base = 2 * cfg_w.classes;
        for k in 0..4 {
            *params.rpn_reg.at_mut(base + k, k) = 1.0 / cfg_w.gain_body;
        }
        for class in 0..cfg_w.classes {
            for k in 0..4 {
                *params.roi_reg.at_mut(base + k, 4 * class + k) = 1.0 / cfg_w.gain_body;
            }
            *params.roi_cls.at_mut(class, class) = 400.0;
            *params.roi_cls.at_mut(cfg_w.feature_dim, class) = -160.0;
        }
        *params.rpn_cls.at_mut(cfg_w.feature_dim, 0) = 60.0;
        let records = accumulate_losses(&params, &world, &pseudo, 0.5).unwrap();
        for r in records.instances.iter().chain(&records.images) {
            if r.fg_count > 0 {
                assert!(r.total() < 1e-6, "record {r:?} should be near zero");
            }
        }
    }

    #[test]
    fn single_proposal_record_matches_hand_arithmetic() {
        // one proposal identical to its target, one-feature heads with
        // hand-set logits and deltas
        let feat = vec![vec![1.0]];
        let b = BBox::new(5.0, 5.0, 4.0, 4.0);
        let boxes = vec![b];
        let targets = vec![Instance::new(b, 0)];
        let mut params = crate::detector::DetectorParams::zeros(1, 2);
        *params.rpn_cls.at_mut(0, 0) = 0.3; // fg logit 0.3, bg 0
        *params.roi_cls.at_mut(0, 0) = 0.5; // class-0 logit 0.5
        *params.rpn_reg.at_mut(0, 0) = 0.2; // tx off by 0.2, target 0
        *params.roi_reg.at_mut(0, 2) = 1.6; // tw off by 1.6 (linear branch)
        let assignments = crate::detector::assign(&boxes, &targets, 0.5);
        let fg = crate::detector::proposal_losses(&params, &feat, &boxes, &targets, &assignments)
            .unwrap();
        assert_eq!(fg.len(), 1);
        let expect_rpn_cls = -(0.3f64.exp() / (0.3f64.exp() + 1.0)).ln();
        let expect_roi_cls = -(0.5f64.exp() / (0.5f64.exp() + 2.0)).ln(); // 3-way softmax
        let expect_rpn_reg = 0.5 * 0.2 * 0.2;
        let expect_roi_reg = 1.6 - 0.5;
        assert!((fg[0].rpn_cls - expect_rpn_cls).abs() < 1e-12);
        assert!((fg[0].roi_cls - expect_roi_cls).abs() < 1e-12);
        assert!((fg[0].rpn_reg - expect_rpn_reg).abs() < 1e-12);
        assert!((fg[0].roi_reg - expect_roi_reg).abs() < 1e-12);
    }

    #[test]
    fn image_record_averages_over_all_foreground_proposals() {
        let world = generate_world(&WorldConfig { num_images: 3, ..WorldConfig::default() })
            .unwrap();
        let pseudo: Vec<Vec<Instance>> = world
            .images
            .iter()
            .map(|img| img.scene.objects.iter().map(|(b, c)| Instance::new(*b, *c)).collect())
            .collect();
        let params = crate::detector::DetectorParams::zeros(
            world.cfg.feature_dim,
            world.cfg.classes,
        );
        let records = accumulate_losses(&params, &world, &pseudo, 0.5).unwrap();
        for img_record in &records.images {
            let insts: Vec<&LossRecord> = records
                .instances
                .iter()
                .filter(|r| r.image == img_record.image)
                .collect();
            let total_fg: usize = insts.iter().map(|r| r.fg_count).sum();
            assert_eq!(total_fg, img_record.fg_count);
            if total_fg == 0 {
                continue;
            }
            // weighted mean of instance records equals the image record
            let weighted: f64 = insts
                .iter()
                .filter(|r| r.fg_count > 0)
                .map(|r| r.total() * r.fg_count as f64)
                .sum::<f64>()
                / total_fg as f64;
            assert!((weighted - img_record.total()).abs() < 1e-9);
        }
    }

    fn record(image: usize, instance: usize, cls: f64, reg: f64) -> LossRecord {
        LossRecord {
            image,
            instance: Some(instance),
            rpn_cls: cls / 2.0,
            roi_cls: cls / 2.0,
            rpn_reg: reg / 2.0,
            roi_reg: reg / 2.0,
            fg_count: 1,
        }
    }

    fn records_from_totals(totals: &[f64]) -> SplitRecords {
        let instances: Vec<LossRecord> = totals
            .iter()
            .enumerate()
            .map(|(i, &t)| record(0, i, t / 2.0, t / 2.0))
            .collect();
        let images = vec![LossRecord {
            image: 0,
            instance: None,
            rpn_cls: 0.0,
            rpn_reg: 0.0,
            roi_cls: 0.0,
            roi_reg: 0.0,
            fg_count: 1,
        }];
        SplitRecords { instances, images }
    }

    #[test]
    fn p_one_labels_everything_with_both_tags() {
        let records = records_from_totals(&[0.4, 0.1, 0.3, 0.2]);
        for mode in [SplitMode::Image, SplitMode::Instance, SplitMode::TwoTasks] {
            let result = split(&records, mode, 1.0);
            assert_eq!(result.labeled.len(), 4, "{mode:?}");
            assert!(result.labeled.iter().all(|t| t.lambda_cls && t.lambda_reg));
        }
    }

    #[test]
    fn instance_mode_keeps_smallest_losses() {
        let records = records_from_totals(&[0.1, 0.2, 0.3, 0.4]);
        let result = split(&records, SplitMode::Instance, 0.5);
        let mut picked: Vec<usize> = result.labeled.iter().map(|t| t.instance).collect();
        picked.sort_unstable();
        assert_eq!(picked, vec![0, 1]);
    }

    #[test]
    fn labeled_count_is_floor_with_min_one() {
        let records = records_from_totals(&[0.5, 0.25, 0.75]);
        assert_eq!(split(&records, SplitMode::Instance, 0.2).labeled.len(), 1);
        assert_eq!(split(&records, SplitMode::Instance, 0.67).labeled.len(), 2);
    }

    #[test]
    fn two_tasks_collapses_to_instance_mode_when_rankings_agree() {
        let instances: Vec<LossRecord> = (0..6)
            .map(|i| record(0, i, 0.1 * (i + 1) as f64, 0.2 * (i + 1) as f64))
            .collect();
        let records = SplitRecords { instances, images: vec![] };
        for p in [0.25, 0.5, 0.75, 1.0] {
            let two = split(&records, SplitMode::TwoTasks, p);
            let one = split(&records, SplitMode::Instance, p);
            let mut a: Vec<(usize, usize)> =
                two.labeled.iter().map(|t| (t.image, t.instance)).collect();
            let mut b: Vec<(usize, usize)> =
                one.labeled.iter().map(|t| (t.image, t.instance)).collect();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
            assert!(two.labeled.iter().all(|t| t.lambda_cls && t.lambda_reg));
        }
    }

    #[test]
    fn two_tasks_tags_follow_their_rankings() {
        // instance 0 best at cls, worst at reg; instance 2 the converse
        let instances = vec![
            record(0, 0, 0.1, 0.9),
            record(0, 1, 0.5, 0.5),
            record(0, 2, 0.9, 0.1),
        ];
        let records = SplitRecords { instances, images: vec![] };
        let result = split(&records, SplitMode::TwoTasks, 1.0 / 3.0);
        assert_eq!(result.labeled.len(), 2);
        assert_eq!(result.labeled_tags(0, 0), Some((true, false)));
        assert_eq!(result.labeled_tags(0, 2), Some((false, true)));
        assert_eq!(result.labeled_tags(0, 1), None);
    }

    #[test]
    fn scaling_losses_preserves_every_split() {
        let base = records_from_totals(&[0.7, 0.2, 0.9, 0.4, 0.6]);
        let scaled = SplitRecords {
            instances: base
                .instances
                .iter()
                .map(|r| LossRecord {
                    rpn_cls: 17.0 * r.rpn_cls,
                    rpn_reg: 17.0 * r.rpn_reg,
                    roi_cls: 17.0 * r.roi_cls,
                    roi_reg: 17.0 * r.roi_reg,
                    ..*r
                })
                .collect(),
            images: base.images.clone(),
        };
        for mode in [SplitMode::Instance, SplitMode::TwoTasks] {
            for p in [0.2, 0.4, 0.8, 1.0] {
                assert_eq!(
                    split(&base, mode, p).labeled,
                    split(&scaled, mode, p).labeled
                );
            }
        }
    }

    #[test]
    fn monotone_in_p() {
        let records = records_from_totals(&[0.7, 0.2, 0.9, 0.4, 0.6, 0.1, 0.8]);
        let mut previous: Vec<(usize, usize)> = Vec::new();
        for p in [0.15, 0.3, 0.45, 0.6, 0.9, 1.0] {
            let labeled: Vec<(usize, usize)> = split(&records, SplitMode::Instance, p)
                .labeled
                .iter()
                .map(|t| (t.image, t.instance))
                .collect();
            for key in &previous {
                assert!(labeled.contains(key), "p must only grow the labeled set");
            }
            previous = labeled;
        }
    }

    #[test]
    fn zero_foreground_instances_are_never_labeled() {
        let mut records = records_from_totals(&[0.5, 0.1]);
        records.instances.push(LossRecord {
            image: 0,
            instance: Some(2),
            rpn_cls: 0.0,
            rpn_reg: 0.0,
            roi_cls: 0.0,
            roi_reg: 0.0,
            fg_count: 0,
        });
        let result = split(&records, SplitMode::Instance, 1.0);
        assert!(result.labeled.iter().all(|t| t.instance != 2));
    }

    #[test]
    fn instance_mode_boundary_between_sets() {
        let records = records_from_totals(&[0.7, 0.2, 0.9, 0.4, 0.6, 0.1]);
        let result = split(&records, SplitMode::Instance, 0.5);
        let labeled_max = result
            .labeled
            .iter()
            .map(|t| records.instances[t.instance].total())
            .fold(f64::NEG_INFINITY, f64::max);
        let unlabeled_min = records
            .instances
            .iter()
            .filter(|r| result.labeled_tags(r.image, r.instance.unwrap()).is_none())
            .map(LossRecord::total)
            .fold(f64::INFINITY, f64::min);
        assert!(labeled_max <= unlabeled_min);
    }
}
