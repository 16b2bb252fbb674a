//! Toy two-head detector: an objectness head (binary classification plus
//! class-agnostic box regression) and a detection head ((C+1)-way
//! classification plus per-class box regression), all linear with bias over
//! proposal features, trained by plain gradient descent with analytic
//! gradients.
//!
//! Classification terms are cross-entropy, regression terms are smooth L1 on
//! encoded deltas of foreground proposals. Averaging is per image: the mean
//! over foreground proposals plus a separately averaged background term, and
//! multi-image losses are the mean over images.

use rand::Rng;

use crate::geometry::{decode, encode, iou, nms, BBox, BoxDelta, Detection};
use crate::labelgen::Instance;
use crate::synthworld::{ImageRecord, World};
use crate::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    fn axpy(&mut self, a: f64, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += a * o;
        }
    }
}

/// Weights of the two linear heads. Row `feature_dim` of every matrix is the
/// bias row.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub rpn_cls: Mat,
    pub rpn_reg: Mat,
    pub roi_cls: Mat,
    pub roi_reg: Mat,
}

impl DetectorParams {
    pub fn zeros(feature_dim: usize, classes: usize) -> Self {
        Self {
            rpn_cls: Mat::zeros(feature_dim + 1, 2),
            rpn_reg: Mat::zeros(feature_dim + 1, 4),
            roi_cls: Mat::zeros(feature_dim + 1, classes + 1),
            roi_reg: Mat::zeros(feature_dim + 1, 4 * classes),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.rpn_cls.rows - 1
    }

    pub fn classes(&self) -> usize {
        self.roi_cls.cols - 1
    }

    /// `self += a * other`, entry by entry.
    pub fn axpy(&mut self, a: f64, other: &DetectorParams) {
        self.rpn_cls.axpy(a, &other.rpn_cls);
        self.rpn_reg.axpy(a, &other.rpn_reg);
        self.roi_cls.axpy(a, &other.roi_cls);
        self.roi_reg.axpy(a, &other.roi_reg);
    }

    pub fn is_finite(&self) -> bool {
        self.heads().iter().all(|m| m.data.iter().all(|v| v.is_finite()))
    }

    fn heads(&self) -> [&Mat; 4] {
        [&self.rpn_cls, &self.rpn_reg, &self.roi_cls, &self.roi_reg]
    }

    /// Text serialization: shape headers plus row-major values at full
    /// precision; round-trips bit-exact.
    pub fn to_text(&self) -> String {
        let mut out = String::from("detlab-params 1\n");
        for (name, m) in [
            ("rpn_cls", &self.rpn_cls),
            ("rpn_reg", &self.rpn_reg),
            ("roi_cls", &self.roi_cls),
            ("roi_reg", &self.roi_reg),
        ] {
            out.push_str(&format!("{name} {} {}\n", m.rows, m.cols));
            for r in 0..m.rows {
                let row: Vec<String> =
                    (0..m.cols).map(|c| format!("{:?}", m.at(r, c))).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let parse_err = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty params file"))?;
        if header.trim() != "detlab-params 1" {
            return Err(parse_err(1, "bad params header"));
        }
        let mut mats = Vec::new();
        for expected in ["rpn_cls", "rpn_reg", "roi_cls", "roi_reg"] {
            let (ln, shape) = lines
                .next()
                .ok_or_else(|| parse_err(0, "truncated params file"))?;
            let mut it = shape.split_whitespace();
            let name = it.next().ok_or_else(|| parse_err(ln + 1, "missing head name"))?;
            if name != expected {
                return Err(parse_err(ln + 1, &format!("expected head {expected}, got {name}")));
            }
            let rows: usize = it
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_err(ln + 1, "bad row count"))?;
            let cols: usize = it
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_err(ln + 1, "bad col count"))?;
            let mut m = Mat::zeros(rows, cols);
            for r in 0..rows {
                let (ln, row) = lines
                    .next()
                    .ok_or_else(|| parse_err(0, "truncated matrix"))?;
                let vals: Vec<&str> = row.split_whitespace().collect();
                if vals.len() != cols {
                    return Err(parse_err(ln + 1, "wrong number of values in row"));
                }
                for (c, v) in vals.iter().enumerate() {
                    *m.at_mut(r, c) = v
                        .parse()
                        .map_err(|_| parse_err(ln + 1, &format!("bad float `{v}`")))?;
                }
            }
            mats.push(m);
        }
        let mut it = mats.into_iter();
        Ok(Self {
            rpn_cls: it.next().unwrap(),
            rpn_reg: it.next().unwrap(),
            roi_cls: it.next().unwrap(),
            roi_reg: it.next().unwrap(),
        })
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn linear(m: &Mat, feat: &[f64]) -> Vec<f64> {
    // implicit trailing bias input of 1.0
    let mut out = vec![0.0; m.cols];
    for (d, &f) in feat.iter().enumerate() {
        if f == 0.0 {
            continue;
        }
        for c in 0..m.cols {
            out[c] += f * m.at(d, c);
        }
    }
    for c in 0..m.cols {
        out[c] += m.at(m.rows - 1, c);
    }
    out
}

/// Head outputs for one proposal.
#[derive(Debug, Clone)]
pub struct ProposalOutput {
    pub rpn_prob: [f64; 2],
    pub rpn_delta: BoxDelta,
    pub roi_prob: Vec<f64>,
    pub roi_delta: Vec<BoxDelta>,
}

/// Head outputs for a feature matrix (one row per proposal).
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub proposals: Vec<ProposalOutput>,
}

fn delta_from_slice(v: &[f64]) -> BoxDelta {
    BoxDelta { tx: v[0], ty: v[1], tw: v[2], th: v[3] }
}

pub fn forward_one(params: &DetectorParams, feat: &[f64]) -> Result<ProposalOutput> {
    if feat.len() != params.feature_dim() {
        return Err(Error::DimMismatch { expected: params.feature_dim(), got: feat.len() });
    }
    let rpn_prob_v = softmax(&linear(&params.rpn_cls, feat));
    let rpn_delta = delta_from_slice(&linear(&params.rpn_reg, feat));
    let roi_prob = softmax(&linear(&params.roi_cls, feat));
    let roi_all = linear(&params.roi_reg, feat);
    let roi_delta = roi_all.chunks_exact(4).map(delta_from_slice).collect();
    Ok(ProposalOutput {
        rpn_prob: [rpn_prob_v[0], rpn_prob_v[1]],
        rpn_delta,
        roi_prob,
        roi_delta,
    })
}

pub fn forward(params: &DetectorParams, features: &[Vec<f64>]) -> Result<HeadOutputs> {
    let proposals = features
        .iter()
        .map(|f| forward_one(params, f))
        .collect::<Result<Vec<_>>>()?;
    Ok(HeadOutputs { proposals })
}

/// Index of the foreground column of the objectness head.
const RPN_FG: usize = 0;
const RPN_BG: usize = 1;

/// Proposal-to-target assignment: max-IoU target when that IoU clears
/// `tau_assign`, otherwise background.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub proposal_index: usize,
    pub target: Option<usize>,
}

impl Assignment {
    pub fn is_foreground(&self) -> bool {
        self.target.is_some()
    }
}

pub fn assign(boxes: &[BBox], targets: &[Instance], tau_assign: f64) -> Vec<Assignment> {
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mut best: Option<(usize, f64)> = None;
            for (t, inst) in targets.iter().enumerate() {
                let ov = iou(b, &inst.bbox);
                // ties broken by lower target index
                if best.map_or(true, |(_, bo)| ov > bo) {
                    best = Some((t, ov));
                }
            }
            let target = best.and_then(|(t, ov)| (ov >= tau_assign).then_some(t));
            Assignment { proposal_index: i, target }
        })
        .collect()
}

/// Per-image loss totals. Classification components include the separately
/// averaged background term of their head.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.rpn_cls + self.rpn_reg + self.roi_cls + self.roi_reg
    }

    pub fn add_scaled(&mut self, a: f64, other: &LossBreakdown) {
        self.rpn_cls += a * other.rpn_cls;
        self.rpn_reg += a * other.rpn_reg;
        self.roi_cls += a * other.roi_cls;
        self.roi_reg += a * other.roi_reg;
    }
}

fn smooth_l1(e: f64) -> f64 {
    let a = e.abs();
    if a < 1.0 {
        0.5 * e * e
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(e: f64) -> f64 {
    e.clamp(-1.0, 1.0)
}

fn delta_coords(d: &BoxDelta) -> [f64; 4] {
    [d.tx, d.ty, d.tw, d.th]
}

/// Accumulate `coeff * feat_with_bias x dvec` into the gradient matrix.
fn accumulate_outer(grad: &mut Mat, feat: &[f64], cols: std::ops::Range<usize>, dvec: &[f64], coeff: f64) {
    if coeff == 0.0 {
        return;
    }
    for (d, &f) in feat.iter().enumerate() {
        if f == 0.0 {
            continue;
        }
        for (k, c) in cols.clone().enumerate() {
            *grad.at_mut(d, c) += coeff * f * dvec[k];
        }
    }
    let bias_row = grad.rows - 1;
    for (k, c) in cols.enumerate() {
        *grad.at_mut(bias_row, c) += coeff * dvec[k];
    }
}

/// Raw loss components of one foreground proposal, before gating and
/// averaging.
#[derive(Debug, Clone, Copy)]
pub struct ForegroundLoss {
    pub proposal: usize,
    pub target: usize,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
}

/// Forward-only per-foreground-proposal loss components against assigned
/// targets. Used by the dataset split machinery.
pub fn proposal_losses(
    params: &DetectorParams,
    features: &[Vec<f64>],
    boxes: &[BBox],
    targets: &[Instance],
    assignments: &[Assignment],
) -> Result<Vec<ForegroundLoss>> {
    let outputs = forward(params, features)?;
    let mut out = Vec::new();
    for a in assignments {
        let Some(t) = a.target else { continue };
        let i = a.proposal_index;
        let o = &outputs.proposals[i];
        let inst = &targets[t];
        let enc = encode(&inst.bbox, &boxes[i]);
        let target_c = delta_coords(&enc);
        let rpn_c = delta_coords(&o.rpn_delta);
        let roi_c = delta_coords(&o.roi_delta[inst.class]);
        let rpn_reg: f64 = (0..4).map(|k| smooth_l1(rpn_c[k] - target_c[k])).sum();
        let roi_reg: f64 = (0..4).map(|k| smooth_l1(roi_c[k] - target_c[k])).sum();
        out.push(ForegroundLoss {
            proposal: i,
            target: t,
            rpn_cls: -o.rpn_prob[RPN_FG].max(f64::MIN_POSITIVE).ln(),
            rpn_reg,
            roi_cls: -o.roi_prob[inst.class].max(f64::MIN_POSITIVE).ln(),
            roi_reg,
        })
    }
    Ok(out)
}

/// Gated per-image loss and its exact gradient.
///
/// Foreground terms are averaged over foreground proposals with the
/// instance tags multiplying their classification/regression parts; the
/// background term (both heads) is averaged separately over background
/// proposals.
pub fn loss_and_grad(
    params: &DetectorParams,
    features: &[Vec<f64>],
    boxes: &[BBox],
    targets: &[Instance],
    assignments: &[Assignment],
) -> Result<(LossBreakdown, DetectorParams)> {
    loss_and_grad_impl(params, features, boxes, targets, assignments, true)
}

/// Foreground-only variant: auxiliary target sets (the EMA regularization
/// instances) supervise only the proposals assigned to them; their
/// complement carries no background term.
pub fn loss_and_grad_foreground(
    params: &DetectorParams,
    features: &[Vec<f64>],
    boxes: &[BBox],
    targets: &[Instance],
    assignments: &[Assignment],
) -> Result<(LossBreakdown, DetectorParams)> {
    loss_and_grad_impl(params, features, boxes, targets, assignments, false)
}

fn loss_and_grad_impl(
    params: &DetectorParams,
    features: &[Vec<f64>],
    boxes: &[BBox],
    targets: &[Instance],
    assignments: &[Assignment],
    include_bg: bool,
) -> Result<(LossBreakdown, DetectorParams)> {
    let outputs = forward(params, features)?;
    let mut grad = DetectorParams::zeros(params.feature_dim(), params.classes());
    let mut lb = LossBreakdown::default();
    let background = params.classes();

    let n_fg = assignments.iter().filter(|a| a.is_foreground()).count();
    let n_bg = assignments.len() - n_fg;
    let fg_w = if n_fg > 0 { 1.0 / n_fg as f64 } else { 0.0 };
    let bg_w = if n_bg > 0 && include_bg { 1.0 / n_bg as f64 } else { 0.0 };

    for a in assignments {
        let i = a.proposal_index;
        let o = &outputs.proposals[i];
        let feat = &features[i];
        match a.target {
            Some(t) => {
                let inst = &targets[t];
                let lc = if inst.lambda_cls { 1.0 } else { 0.0 };
                let lr = if inst.lambda_reg { 1.0 } else { 0.0 };

                if inst.lambda_cls {
                    lb.rpn_cls += fg_w * -o.rpn_prob[RPN_FG].max(f64::MIN_POSITIVE).ln();
                    lb.roi_cls += fg_w * -o.roi_prob[inst.class].max(f64::MIN_POSITIVE).ln();
                    let dz_rpn = [o.rpn_prob[0] - 1.0, o.rpn_prob[1]];
                    accumulate_outer(&mut grad.rpn_cls, feat, 0..2, &dz_rpn, lc * fg_w);
                    let mut dz_roi: Vec<f64> = o.roi_prob.clone();
                    dz_roi[inst.class] -= 1.0;
                    let n_roi = dz_roi.len();
                    accumulate_outer(&mut grad.roi_cls, feat, 0..n_roi, &dz_roi, lc * fg_w);
                }
                if inst.lambda_reg {
                    let enc = encode(&inst.bbox, &boxes[i]);
                    let target_c = delta_coords(&enc);
                    let rpn_c = delta_coords(&o.rpn_delta);
                    let roi_c = delta_coords(&o.roi_delta[inst.class]);
                    let mut d_rpn = [0.0; 4];
                    let mut d_roi = [0.0; 4];
                    for k in 0..4 {
                        let er = rpn_c[k] - target_c[k];
                        lb.rpn_reg += fg_w * smooth_l1(er);
                        d_rpn[k] = smooth_l1_grad(er);
                        let eo = roi_c[k] - target_c[k];
                        lb.roi_reg += fg_w * smooth_l1(eo);
                        d_roi[k] = smooth_l1_grad(eo);
                    }
                    accumulate_outer(&mut grad.rpn_reg, feat, 0..4, &d_rpn, lr * fg_w);
                    let col0 = 4 * inst.class;
                    accumulate_outer(&mut grad.roi_reg, feat, col0..col0 + 4, &d_roi, lr * fg_w);
                }
            }
            None => {
                if bg_w == 0.0 {
                    continue;
                }
                lb.rpn_cls += bg_w * -o.rpn_prob[RPN_BG].max(f64::MIN_POSITIVE).ln();
                lb.roi_cls += bg_w * -o.roi_prob[background].max(f64::MIN_POSITIVE).ln();
                let dz_rpn = [o.rpn_prob[0], o.rpn_prob[1] - 1.0];
                accumulate_outer(&mut grad.rpn_cls, feat, 0..2, &dz_rpn, bg_w);
                let mut dz_roi: Vec<f64> = o.roi_prob.clone();
                dz_roi[background] -= 1.0;
                let n_roi = dz_roi.len();
                accumulate_outer(&mut grad.roi_cls, feat, 0..n_roi, &dz_roi, bg_w);
            }
        }
    }
    Ok((lb, grad))
}

/// Gradient-descent schedule: `steps` single-image updates cycling through
/// the dataset in image order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainRecord {
    pub step: usize,
    pub image: usize,
    pub loss: f64,
}

/// Plain supervised training on per-image instance targets, optionally with
/// a second weighted target set (`reg`) per image.
pub fn train(
    params: &mut DetectorParams,
    world: &World,
    targets: &[Vec<Instance>],
    tau_assign: f64,
    cfg: &TrainConfig,
    reg: Option<(&[Vec<Instance>], f64)>,
) -> Result<Vec<TrainRecord>> {
    let assignments: Vec<Vec<Assignment>> = world
        .images
        .iter()
        .zip(targets)
        .map(|(img, t)| assign(&img.proposals.boxes, t, tau_assign))
        .collect();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let img_idx = step % world.images.len();
        let img = &world.images[img_idx];
        let reg_img = reg.map(|(r, lambda)| (r[img_idx].as_slice(), lambda));
        let loss = descend_on_image(
            params,
            img,
            &targets[img_idx],
            &assignments[img_idx],
            reg_img,
            tau_assign,
            cfg.lr,
        )
        .map_err(|e| match e {
            Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step },
            other => other,
        })?;
        history.push(TrainRecord { step, image: img_idx, loss });
    }
    Ok(history)
}

/// One gradient step on a single image: main targets plus an optional
/// `(instances, weight)` regularization target set. Returns the total loss.
pub(crate) fn descend_on_image(
    params: &mut DetectorParams,
    img: &ImageRecord,
    targets: &[Instance],
    assignments: &[Assignment],
    reg: Option<(&[Instance], f64)>,
    tau_assign: f64,
    lr: f64,
) -> Result<f64> {
    let (lb, grad) =
        loss_and_grad(params, &img.proposals.features, &img.proposals.boxes, targets, assignments)?;
    let mut total = lb.total();
    params.axpy(-lr, &grad);
    if let Some((reg_targets, lambda)) = reg {
        if lambda != 0.0 && !reg_targets.is_empty() {
            let reg_assign = assign(&img.proposals.boxes, reg_targets, tau_assign);
            let (rlb, rgrad) = loss_and_grad_foreground(
                params,
                &img.proposals.features,
                &img.proposals.boxes,
                reg_targets,
                &reg_assign,
            )?;
            total += lambda * rlb.total();
            params.axpy(-lr * lambda, &rgrad);
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    Ok(total)
}

/// All (proposal, class) detections: per-class score and decoded box for
/// every proposal.
pub fn detect_raw(params: &DetectorParams, img: &ImageRecord) -> Result<Vec<Detection>> {
    let outputs = forward(params, &img.proposals.features)?;
    let classes = params.classes();
    let mut dets = Vec::with_capacity(img.proposals.boxes.len() * classes);
    for (i, o) in outputs.proposals.iter().enumerate() {
        for c in 0..classes {
            dets.push(Detection {
                bbox: decode(&o.roi_delta[c], &img.proposals.boxes[i]),
                class: c,
                score: o.roi_prob[c],
            });
        }
    }
    Ok(dets)
}

/// Detections after per-class NMS.
pub fn detect(params: &DetectorParams, img: &ImageRecord, t_nms: f64) -> Result<Vec<Detection>> {
    Ok(nms(&detect_raw(params, img)?, t_nms))
}

/// Add bounded uniform noise to a copy of the feature matrix.
pub fn noised_features(features: &[Vec<f64>], amp: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    features
        .iter()
        .map(|row| {
            row.iter()
                .map(|&v| if amp > 0.0 { v + rng.random_range(-amp..amp) } else { v })
                .collect()
        })
        .collect()
}
