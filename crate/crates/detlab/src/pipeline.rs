//! End-to-end iterative refinement.
//!
//! Simulate weak-detector predictions, excavate the initial pseudo
//! ground-truths, then iterate: localization adaptation trains a fresh
//! detector and refines the labels, a small-loss split partitions them, the
//! teacher-student stage trains on the partition, and the teacher regenerates
//! the labels for the next round. Metrics are reported per iteration: mAP on
//! a held-out evaluation world, CorLoc and pseudo-label IoU on the training
//! world.

use rayon::prelude::*;

use crate::adapt::{la_train, refine_labels, LaRun};
use crate::config::RunConfig;
use crate::detector::{detect, train, DetectorParams, TrainConfig};
use crate::geometry::{iou, BBox, Detection};
use crate::labelgen::{excavate, Instance};
use crate::metrics::{corloc, toy_map};
use crate::rng::stream;
use crate::split::{accumulate_losses, ideal_split, split, SplitMode, SplitResult};
use crate::ssod::{ssod_train, StepLog};
use crate::synthworld::{corrupt_to_wsod_output, generate_world, World, WorldConfig};
use crate::Result;

/// Seed offset separating the held-out evaluation world from the training
/// world.
const EVAL_SEED_XOR: u64 = 0x9E37_79B9_7F4A_7C15;

/// Metrics after one phase of the pipeline. `t = 0` is the untrained noisy
/// baseline; subsequent rows follow each completed iteration (or the
/// adaptation-only phase when `run.iterations = 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationReport {
    pub t: usize,
    /// Mean best IoU of the current pseudo labels against same-class ground
    /// truth on the training world.
    pub mean_iou: f64,
    /// Toy mAP on the held-out evaluation world.
    pub map: f64,
    /// CorLoc on the training world.
    pub corloc: f64,
    /// Fraction of pseudo instances labeled by the split (0 before any
    /// split runs).
    pub labeled_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub reports: Vec<IterationReport>,
    /// The detector that produced the final labels (teacher after the last
    /// iteration, or the adaptation detector when `iterations = 0`).
    pub params: DetectorParams,
    /// Final pseudo ground-truths.
    pub pseudo: Vec<Vec<Instance>>,
    /// Per-step log of the last teacher-student stage; empty when
    /// `iterations = 0`.
    pub ssod_log: Vec<StepLog>,
}

/// Per-iteration table in the shared comma-separated layout.
pub fn report_csv(reports: &[IterationReport]) -> String {
    let mut out = String::from("t,mean_iou,map,corloc,labeled_fraction\n");
    for r in reports {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?}\n",
            r.t, r.mean_iou, r.map, r.corloc, r.labeled_fraction
        ));
    }
    out
}

pub(crate) fn gt_boxes(world: &World) -> Vec<Vec<(BBox, usize)>> {
    world.images.iter().map(|img| img.scene.objects.clone()).collect()
}

fn image_labels(world: &World) -> Vec<Vec<bool>> {
    world.images.iter().map(|img| img.scene.image_label.clone()).collect()
}

/// Mean over pseudo instances of their best IoU against a same-class ground
/// truth box.
pub fn pseudo_mean_iou(world: &World, pseudo: &[Vec<Instance>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (img, instances) in world.images.iter().zip(pseudo) {
        for inst in instances {
            let best = img
                .scene
                .objects
                .iter()
                .filter(|(_, c)| *c == inst.class)
                .map(|(b, _)| iou(b, &inst.bbox))
                .fold(0.0, f64::max);
            sum += best;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Simulated weak-detector predictions for every image of a world.
pub fn wsod_predictions(world: &World, cfg: &RunConfig, domain: &str) -> Vec<Vec<Detection>> {
    world
        .images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = stream(cfg.seed, domain, i as u64);
            corrupt_to_wsod_output(&img.scene, &img.proposals, &cfg.noise, &mut rng)
        })
        .collect()
}

fn detect_all(params: &DetectorParams, world: &World, t_nms: f64) -> Result<Vec<Vec<Detection>>> {
    world.images.par_iter().map(|img| detect(params, img, t_nms)).collect()
}

/// Evaluate a detector: mAP on the held-out world, CorLoc on the training
/// world.
fn evaluate(
    params: &DetectorParams,
    train_world: &World,
    eval_world: &World,
    t_nms: f64,
) -> Result<(f64, f64)> {
    let eval_dets = detect_all(params, eval_world, t_nms)?;
    let map = toy_map(&eval_dets, &gt_boxes(eval_world))?;
    let train_dets = detect_all(params, train_world, t_nms)?;
    let cl = corloc(&train_dets, &gt_boxes(train_world), &image_labels(train_world));
    Ok((map, cl))
}

pub struct PipelineWorlds {
    pub train: World,
    pub eval: World,
}

pub fn build_worlds(cfg: &RunConfig) -> Result<PipelineWorlds> {
    let train = generate_world(&cfg.world)?;
    // a larger held-out world keeps the mAP estimate stable
    let eval_cfg = WorldConfig {
        seed: cfg.world.seed ^ EVAL_SEED_XOR,
        num_images: (2 * cfg.world.num_images).max(96),
        ..cfg.world.clone()
    };
    let eval = generate_world(&eval_cfg)?;
    Ok(PipelineWorlds { train, eval })
}

/// Initial pseudo ground-truths from the simulated weak detector.
pub fn initial_pseudo(worlds: &PipelineWorlds, cfg: &RunConfig) -> Vec<Vec<Instance>> {
    let preds = wsod_predictions(&worlds.train, cfg, "wsod");
    worlds
        .train
        .images
        .iter()
        .zip(&preds)
        .map(|(img, p)| excavate(p, &img.scene.image_label, &cfg.pge))
        .collect()
}

fn baseline_report(worlds: &PipelineWorlds, cfg: &RunConfig, pseudo: &[Vec<Instance>]) -> Result<IterationReport> {
    let eval_preds = wsod_predictions(&worlds.eval, cfg, "wsod-eval");
    let map = toy_map(&eval_preds, &gt_boxes(&worlds.eval))?;
    let train_preds = wsod_predictions(&worlds.train, cfg, "wsod");
    let cl = corloc(&train_preds, &gt_boxes(&worlds.train), &image_labels(&worlds.train));
    Ok(IterationReport {
        t: 0,
        mean_iou: pseudo_mean_iou(&worlds.train, pseudo),
        map,
        corloc: cl,
        labeled_fraction: 0.0,
    })
}

fn fresh_params(world: &World) -> DetectorParams {
    DetectorParams::zeros(world.cfg.feature_dim, world.cfg.classes)
}

fn split_dataset(
    world: &World,
    params: &DetectorParams,
    pseudo: &[Vec<Instance>],
    cfg: &RunConfig,
) -> Result<SplitResult> {
    if cfg.split_mode == SplitMode::Ideal {
        return ideal_split(world, pseudo);
    }
    let records = accumulate_losses(params, world, pseudo, cfg.la.tau_assign)?;
    Ok(split(&records, cfg.split_mode, cfg.p))
}

/// Run the full pipeline.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    crate::config::validate(cfg)?;
    let worlds = build_worlds(cfg)?;
    let mut pseudo = initial_pseudo(&worlds, cfg);
    let mut reports = vec![baseline_report(&worlds, cfg, &pseudo)?];

    if cfg.iterations == 0 {
        let mut rng = stream(cfg.seed, "la", 0);
        let la: LaRun = la_train(fresh_params(&worlds.train), &worlds.train, &pseudo, &cfg.la, &mut rng)?;
        pseudo = refine_labels(&la.params, &worlds.train, &cfg.pge)?;
        let (map, cl) = evaluate(&la.params, &worlds.train, &worlds.eval, cfg.pge.t_nms)?;
        reports.push(IterationReport {
            t: 1,
            mean_iou: pseudo_mean_iou(&worlds.train, &pseudo),
            map,
            corloc: cl,
            labeled_fraction: 0.0,
        });
        return Ok(RunOutcome { reports, params: la.params, pseudo, ssod_log: Vec::new() });
    }

    let mut current = fresh_params(&worlds.train);
    let mut ssod_log = Vec::new();
    for t in 0..cfg.iterations {
        let mut la_rng = stream(cfg.seed, "la", t as u64);
        let la = la_train(fresh_params(&worlds.train), &worlds.train, &pseudo, &cfg.la, &mut la_rng)?;
        pseudo = refine_labels(&la.params, &worlds.train, &cfg.pge)?;

        let split_result = split_dataset(&worlds.train, &la.params, &pseudo, cfg)?;
        let total_instances: usize = pseudo.iter().map(Vec::len).sum();
        let labeled_fraction = if total_instances == 0 {
            0.0
        } else {
            split_result.labeled.len() as f64 / total_instances as f64
        };

        let mut ssod_rng = stream(cfg.seed, "ssod", t as u64);
        let outcome = ssod_train(
            la.params.clone(),
            &worlds.train,
            &split_result,
            &pseudo,
            &cfg.ssod,
            &mut ssod_rng,
        )?;
        pseudo = refine_labels(&outcome.teacher, &worlds.train, &cfg.pge)?;
        current = outcome.teacher;
        ssod_log = outcome.log;

        let (map, cl) = evaluate(&current, &worlds.train, &worlds.eval, cfg.pge.t_nms)?;
        reports.push(IterationReport {
            t: t + 1,
            mean_iou: pseudo_mean_iou(&worlds.train, &pseudo),
            map,
            corloc: cl,
            labeled_fraction,
        });
    }
    Ok(RunOutcome { reports, params: current, pseudo, ssod_log })
}

/// Pipeline ablation arms: which mechanisms participate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    /// Simulated weak-detector predictions, no training.
    Baseline,
    /// Localization adaptation only (`iterations = 0`).
    LaOnly,
    /// Plain retraining (no regularizer, no refinement), split, then
    /// teacher-student training.
    SslOnly,
    /// One full iteration.
    LaSsl,
    /// The configured iteration count.
    Full,
}

impl Arm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::LaOnly => "la",
            Arm::SslOnly => "ssl",
            Arm::LaSsl => "la_ssl",
            Arm::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline" => Some(Arm::Baseline),
            "la" => Some(Arm::LaOnly),
            "ssl" => Some(Arm::SslOnly),
            "la_ssl" => Some(Arm::LaSsl),
            "full" => Some(Arm::Full),
            _ => None,
        }
    }
}

/// Run one ablation arm and return its final held-out mAP.
pub fn run_arm(cfg: &RunConfig, arm: Arm) -> Result<f64> {
    match arm {
        Arm::Baseline => {
            let worlds = build_worlds(cfg)?;
            let eval_preds = wsod_predictions(&worlds.eval, cfg, "wsod-eval");
            toy_map(&eval_preds, &gt_boxes(&worlds.eval))
        }
        Arm::LaOnly => {
            let mut la_cfg = cfg.clone();
            la_cfg.iterations = 0;
            Ok(run(&la_cfg)?.reports.last().expect("reports").map)
        }
        Arm::SslOnly => {
            let worlds = build_worlds(cfg)?;
            let pseudo = initial_pseudo(&worlds, cfg);
            let mut params = fresh_params(&worlds.train);
            train(
                &mut params,
                &worlds.train,
                &pseudo,
                cfg.la.tau_assign,
                &TrainConfig { steps: cfg.la.steps, lr: cfg.la.lr },
                None,
            )?;
            let split_result = split_dataset(&worlds.train, &params, &pseudo, cfg)?;
            let mut ssod_rng = stream(cfg.seed, "ssod", 0);
            let outcome = ssod_train(
                params,
                &worlds.train,
                &split_result,
                &pseudo,
                &cfg.ssod,
                &mut ssod_rng,
            )?;
            let eval_dets = detect_all(&outcome.teacher, &worlds.eval, cfg.pge.t_nms)?;
            toy_map(&eval_dets, &gt_boxes(&worlds.eval))
        }
        Arm::LaSsl => {
            let mut one = cfg.clone();
            one.iterations = 1;
            Ok(run(&one)?.reports.last().expect("reports").map)
        }
        Arm::Full => Ok(run(cfg)?.reports.last().expect("reports").map),
    }
}
