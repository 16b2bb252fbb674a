//! Brute-force reference implementations used only by test suites.
//!
//! Everything here recomputes results from first principles: quadratic
//! suppression loops, exhaustive subset enumeration, central finite
//! differences, all-pairs IoU scans and from-scratch loss re-aggregation.
//! None of it shares code with the implementation paths it checks (box
//! overlap and delta coding are re-derived locally), so a bug cannot hide in
//! both sides at once.

use rand::Rng;

use detlab::detector::{
    assign, forward, loss_and_grad, Assignment, DetectorParams, LossBreakdown, Mat,
};
use detlab::geometry::{BBox, Detection};
use detlab::labelgen::Instance;
use detlab::split::LossRecord;
use detlab::synthworld::World;

/// One oracle-vs-implementation comparison.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub case_id: String,
    pub reference_value: f64,
    pub implementation_value: f64,
    pub abs_diff: f64,
    pub rel_diff: f64,
}

impl OracleReport {
    pub fn new(case_id: impl Into<String>, reference: f64, implementation: f64) -> Self {
        let abs_diff = (reference - implementation).abs();
        let rel_diff = abs_diff / reference.abs().max(implementation.abs()).max(1.0);
        Self {
            case_id: case_id.into(),
            reference_value: reference,
            implementation_value: implementation,
            abs_diff,
            rel_diff,
        }
    }
}

/// A failed comparison plus a replayable dump of the offending case.
#[derive(Debug)]
pub struct OracleFailure {
    pub report: OracleReport,
    pub case_dump: String,
}

impl std::fmt::Display for OracleFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "oracle mismatch in {}: reference {:?} vs implementation {:?}\n{}",
            self.report.case_id,
            self.report.reference_value,
            self.report.implementation_value,
            self.case_dump
        )
    }
}

/// Corner-form IoU, derived independently of the geometry module.
pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let ax1 = a.x - a.w / 2.0;
    let ay1 = a.y - a.h / 2.0;
    let ax2 = a.x + a.w / 2.0;
    let ay2 = a.y + a.h / 2.0;
    let bx1 = b.x - b.w / 2.0;
    let by1 = b.y - b.h / 2.0;
    let bx2 = b.x + b.w / 2.0;
    let by2 = b.y + b.h / 2.0;
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.w * a.h + b.w * b.h - inter;
    inter / union
}

/// Quadratic reference NMS: repeatedly pick the best remaining detection
/// (highest score, ties by lower index) and discard same-class detections
/// overlapping it above `t_nms`.
pub fn brute_force_nms(dets: &[Detection], t_nms: f64) -> Vec<Detection> {
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if dets[i].score > dets[best].score {
                best = i;
            }
        }
        kept.push(dets[best]);
        alive.retain(|&i| {
            i != best
                && !(dets[i].class == dets[best].class
                    && oracle_iou(&dets[i].bbox, &dets[best].bbox) > t_nms)
        });
    }
    kept
}

/// Exhaustive small-loss selection: enumerate every subset of size
/// `max(1, floor(p*n))` and return the one with the smallest total,
/// preferring lower indices on ties. Exponential; keep `n <= 20`.
pub fn exhaustive_top_p(totals: &[f64], p: f64) -> Vec<usize> {
    let n = totals.len();
    assert!(n <= 20, "exhaustive oracle is exponential");
    if n == 0 {
        return Vec::new();
    }
    let k = ((p * n as f64).floor() as usize).clamp(1, n);
    let mut best_mask = 0u32;
    let mut best_sum = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let sum: f64 = (0..n).filter(|&i| mask & (1 << i) != 0).map(|i| totals[i]).sum();
        if sum < best_sum {
            best_sum = sum;
            best_mask = mask;
        }
    }
    (0..n).filter(|&i| best_mask & (1 << i) != 0).collect()
}

/// All-pairs ideal-split reference: a pseudo instance is clean iff some
/// same-class ground-truth box overlaps it above 0.5.
pub fn all_pairs_ideal(world: &World, pseudo: &[Vec<Instance>]) -> Vec<(usize, usize)> {
    let mut labeled = Vec::new();
    for (img_idx, (img, instances)) in world.images.iter().zip(pseudo).enumerate() {
        for (j, inst) in instances.iter().enumerate() {
            let mut hit = false;
            for (b, c) in &img.scene.objects {
                if *c == inst.class && oracle_iou(b, &inst.bbox) > 0.5 {
                    hit = true;
                }
            }
            if hit {
                labeled.push((img_idx, j));
            }
        }
    }
    labeled
}

fn entry_count(m: &Mat) -> usize {
    m.rows * m.cols
}

fn for_each_entry(params: &mut DetectorParams, mut f: impl FnMut(&mut f64)) {
    for m in [
        &mut params.rpn_cls,
        &mut params.rpn_reg,
        &mut params.roi_cls,
        &mut params.roi_reg,
    ] {
        for v in m.data.iter_mut() {
            f(v);
        }
    }
}

/// Central finite differences of `loss` over every parameter entry.
pub fn numeric_gradient(
    params: &DetectorParams,
    eps: f64,
    loss: impl Fn(&DetectorParams) -> f64,
) -> DetectorParams {
    let total = entry_count(&params.rpn_cls)
        + entry_count(&params.rpn_reg)
        + entry_count(&params.roi_cls)
        + entry_count(&params.roi_reg);
    let mut grad = params.clone();
    for idx in 0..total {
        let mut plus = params.clone();
        let mut k = 0usize;
        for_each_entry(&mut plus, |v| {
            if k == idx {
                *v += eps;
            }
            k += 1;
        });
        let mut minus = params.clone();
        k = 0;
        for_each_entry(&mut minus, |v| {
            if k == idx {
                *v -= eps;
            }
            k += 1;
        });
        let d = (loss(&plus) - loss(&minus)) / (2.0 * eps);
        k = 0;
        for_each_entry(&mut grad, |v| {
            if k == idx {
                *v = d;
            }
            k += 1;
        });
    }
    grad
}

/// Worst relative error between two same-shape parameter sets, with the
/// denominator floored at 1 so near-zero entries are compared absolutely.
pub fn max_rel_error(analytic: &DetectorParams, numeric: &DetectorParams) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in [
        (&analytic.rpn_cls, &numeric.rpn_cls),
        (&analytic.rpn_reg, &numeric.rpn_reg),
        (&analytic.roi_cls, &numeric.roi_cls),
        (&analytic.roi_reg, &numeric.roi_reg),
    ] {
        for (&av, &nv) in a.data.iter().zip(&n.data) {
            let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

/// From-scratch re-aggregation of split loss records: recomputes
/// cross-entropy, smooth L1 and the delta encoding locally from forward
/// outputs, then averages per instance or per image.
pub fn reaggregate_records(
    params: &DetectorParams,
    world: &World,
    pseudo: &[Vec<Instance>],
    tau_assign: f64,
) -> (Vec<LossRecord>, Vec<LossRecord>) {
    let smooth_l1 = |e: f64| {
        if e.abs() < 1.0 {
            0.5 * e * e
        } else {
            e.abs() - 0.5
        }
    };
    let mut instance_records = Vec::new();
    let mut image_records = Vec::new();
    for (img_idx, (img, targets)) in world.images.iter().zip(pseudo).enumerate() {
        let assignments: Vec<Assignment> = assign(&img.proposals.boxes, targets, tau_assign);
        let outputs = forward(params, &img.proposals.features).expect("forward");
        let mut per_instance: Vec<(f64, f64, f64, f64, usize)> =
            vec![(0.0, 0.0, 0.0, 0.0, 0); targets.len()];
        let mut image_acc = (0.0, 0.0, 0.0, 0.0, 0usize);
        for a in &assignments {
            let Some(t) = a.target else { continue };
            let o = &outputs.proposals[a.proposal_index];
            let inst = &targets[t];
            let prop = &img.proposals.boxes[a.proposal_index];
            // local delta encoding
            let tx = (inst.bbox.x - prop.x) / prop.w;
            let ty = (inst.bbox.y - prop.y) / prop.h;
            let tw = (inst.bbox.w / prop.w).ln();
            let th = (inst.bbox.h / prop.h).ln();
            let rpn_cls = -o.rpn_prob[0].ln();
            let roi_cls = -o.roi_prob[inst.class].ln();
            let rd = &o.rpn_delta;
            let rpn_reg = smooth_l1(rd.tx - tx)
                + smooth_l1(rd.ty - ty)
                + smooth_l1(rd.tw - tw)
                + smooth_l1(rd.th - th);
            let od = &o.roi_delta[inst.class];
            let roi_reg = smooth_l1(od.tx - tx)
                + smooth_l1(od.ty - ty)
                + smooth_l1(od.tw - tw)
                + smooth_l1(od.th - th);
            let rec = &mut per_instance[t];
            rec.0 += rpn_cls;
            rec.1 += rpn_reg;
            rec.2 += roi_cls;
            rec.3 += roi_reg;
            rec.4 += 1;
            image_acc.0 += rpn_cls;
            image_acc.1 += rpn_reg;
            image_acc.2 += roi_cls;
            image_acc.3 += roi_reg;
            image_acc.4 += 1;
        }
        for (j, (rc, rr, oc, or, n)) in per_instance.into_iter().enumerate() {
            let d = if n == 0 { 1.0 } else { n as f64 };
            instance_records.push(LossRecord {
                image: img_idx,
                instance: Some(j),
                rpn_cls: rc / d,
                rpn_reg: rr / d,
                roi_cls: oc / d,
                roi_reg: or / d,
                fg_count: n,
            });
        }
        let d = if image_acc.4 == 0 { 1.0 } else { image_acc.4 as f64 };
        image_records.push(LossRecord {
            image: img_idx,
            instance: None,
            rpn_cls: image_acc.0 / d,
            rpn_reg: image_acc.1 / d,
            roi_cls: image_acc.2 / d,
            roi_reg: image_acc.3 / d,
            fg_count: image_acc.4,
        });
    }
    (instance_records, image_records)
}

/// Total gated loss of an image batch, optionally plus a weighted second
/// target set, as a scalar closure for finite differencing.
pub fn scalar_loss(
    params: &DetectorParams,
    features: &[Vec<f64>],
    boxes: &[BBox],
    targets: &[Instance],
    assignments: &[Assignment],
    reg: Option<(&[Instance], &[Assignment], f64)>,
) -> f64 {
    let (lb, _) = loss_and_grad(params, features, boxes, targets, assignments).expect("loss");
    let mut total = lb.total();
    if let Some((reg_targets, reg_assign, lambda)) = reg {
        let (rlb, _): (LossBreakdown, _) =
            loss_and_grad(params, features, boxes, reg_targets, reg_assign).expect("reg loss");
        total += lambda * rlb.total();
    }
    total
}

/// Serialize a detection list for failure dumps.
pub fn dump_detections(dets: &[Detection]) -> String {
    let mut out = String::from("detections\n");
    for d in dets {
        out.push_str(&format!(
            "det {:?} {:?} {:?} {:?} {} {:?}\n",
            d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.class, d.score
        ));
    }
    out
}

/// Suite configuration for [`check_all`].
#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub seed: u64,
    pub nms_cases: usize,
    pub split_cases: usize,
    pub grad_instances: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { seed: 2024, nms_cases: 2000, split_cases: 200, grad_instances: 4 }
    }
}

fn random_box(rng: &mut impl Rng) -> BBox {
    BBox::new(
        rng.random_range(0.0..60.0),
        rng.random_range(0.0..60.0),
        rng.random_range(1.0..30.0),
        rng.random_range(1.0..30.0),
    )
}

pub fn random_detections(rng: &mut impl Rng, max_n: usize) -> Vec<Detection> {
    let n = rng.random_range(0..=max_n);
    (0..n)
        .map(|_| Detection {
            bbox: random_box(rng),
            class: rng.random_range(0..3),
            score: rng.random_range(0.0..1.0),
        })
        .collect()
}

/// Run the oracle batteries over seeded random instances; the first mismatch
/// aborts with the offending case serialized for replay.
pub fn check_all(cfg: &SuiteConfig) -> Result<Vec<OracleReport>, Box<OracleFailure>> {
    let mut reports = Vec::new();
    let mut rng = detlab::rng::stream(cfg.seed, "oracle-suite", 0);

    for case in 0..cfg.nms_cases {
        let dets = random_detections(&mut rng, 8);
        let t = rng.random_range(0.1..0.7);
        let reference = brute_force_nms(&dets, t);
        let implementation = detlab::geometry::nms(&dets, t);
        let report = OracleReport::new(
            format!("nms/{case}"),
            reference.len() as f64,
            implementation.len() as f64,
        );
        if reference != implementation {
            return Err(Box::new(OracleFailure { report, case_dump: dump_detections(&dets) }));
        }
        reports.push(report);
    }

    for case in 0..cfg.split_cases {
        let n = rng.random_range(1..=12);
        let totals: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        for p in [0.25, 0.5, 0.75, 1.0] {
            let reference = exhaustive_top_p(&totals, p);
            let records: Vec<LossRecord> = totals
                .iter()
                .enumerate()
                .map(|(i, &t)| LossRecord {
                    image: 0,
                    instance: Some(i),
                    rpn_cls: t / 4.0,
                    rpn_reg: t / 4.0,
                    roi_cls: t / 4.0,
                    roi_reg: t / 4.0,
                    fg_count: 1,
                })
                .collect();
            let split_records =
                detlab::split::SplitRecords { instances: records, images: vec![] };
            let mut implementation: Vec<usize> =
                detlab::split::split(&split_records, detlab::split::SplitMode::Instance, p)
                    .labeled
                    .iter()
                    .map(|t| t.instance)
                    .collect();
            implementation.sort_unstable();
            let report = OracleReport::new(
                format!("split/{case}/p{p}"),
                reference.len() as f64,
                implementation.len() as f64,
            );
            if reference != implementation {
                let dump = format!("totals {totals:?} p {p}");
                return Err(Box::new(OracleFailure { report, case_dump: dump }));
            }
            reports.push(report);
        }
    }

    Ok(reports)
}
