//! Box geometry: IoU, per-class NMS, delta coding, outer-box sampling and
//! box moving averages.
//!
//! All boxes live in center/size form `(x, y, w, h)` with `w, h > 0`.

use rand::Rng;

/// Axis-aligned box in center/size parameterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        debug_assert!(w > 0.0 && h > 0.0, "degenerate box {w}x{h}");
        Self { x, y, w, h }
    }

    /// Corner form `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        )
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corner containment: every corner of `inner` lies inside `self`.
    pub fn contains(&self, inner: &BBox) -> bool {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = inner.corners();
        ax1 <= bx1 && ay1 <= by1 && ax2 >= bx2 && ay2 >= by2
    }

    /// Smallest box enclosing both `self` and `other`.
    pub fn enclosing(&self, other: &BBox) -> BBox {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        BBox::from_corners(ax1.min(bx1), ay1.min(by1), ax2.max(bx2), ay2.max(by2))
    }
}

/// A scored, classified box prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

/// Intersection over union. Touching boxes count as disjoint (IoU 0);
/// identical boxes are exactly 1 even where corner arithmetic rounds.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Greedy per-class non-maximum suppression.
///
/// Keeps the highest-scoring box, removes same-class boxes with IoU strictly
/// above `t_nms`, repeats. Ties on equal score are broken by lower original
/// index. Output is ordered by descending score (stable on ties), so it is
/// also descending within every class.
pub fn nms(dets: &[Detection], t_nms: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then_with(|| a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    let mut suppressed = vec![false; dets.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i]);
        for &j in &order {
            if !suppressed[j]
                && j != i
                && dets[j].class == dets[i].class
                && iou(&dets[j].bbox, &dets[i].bbox) > t_nms
            {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Normalized-offset / log-scale box coding relative to an anchor box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

pub fn encode(b: &BBox, anchor: &BBox) -> BoxDelta {
    BoxDelta {
        tx: (b.x - anchor.x) / anchor.w,
        ty: (b.y - anchor.y) / anchor.h,
        tw: (b.w / anchor.w).ln(),
        th: (b.h / anchor.h).ln(),
    }
}

pub fn decode(d: &BoxDelta, anchor: &BBox) -> BBox {
    BBox::new(
        anchor.x + d.tx * anchor.w,
        anchor.y + d.ty * anchor.h,
        anchor.w * d.tw.exp(),
        anchor.h * d.th.exp(),
    )
}

/// One outer-box draw: the sampled transformation and the resulting box.
#[derive(Debug, Clone, Copy)]
pub struct OuterBoxSample {
    pub delta_x: f64,
    pub delta_y: f64,
    pub delta_w: f64,
    pub delta_h: f64,
    pub result: BBox,
}

/// Apply an outer-box transformation: shift by `(dx*w, dy*h)`, scale by
/// `(dw, dh)`.
pub fn apply_outer_delta(b: &BBox, dx: f64, dy: f64, dw: f64, dh: f64) -> BBox {
    BBox::new(b.x + dx * b.w, b.y + dy * b.h, b.w * dw, b.h * dh)
}

/// Sample a random outer box around `b`: shifts drawn from `U(-alpha, alpha)`,
/// scale factors from `U(sqrt(3), 2)`.
pub fn sample_outer_box(b: &BBox, alpha: f64, rng: &mut impl Rng) -> OuterBoxSample {
    let lo = 3.0f64.sqrt();
    let delta_x = if alpha > 0.0 { rng.random_range(-alpha..alpha) } else { 0.0 };
    let delta_y = if alpha > 0.0 { rng.random_range(-alpha..alpha) } else { 0.0 };
    let delta_w = rng.random_range(lo..2.0);
    let delta_h = rng.random_range(lo..2.0);
    OuterBoxSample {
        delta_x,
        delta_y,
        delta_w,
        delta_h,
        result: apply_outer_delta(b, delta_x, delta_y, delta_w, delta_h),
    }
}

/// Componentwise moving average `beta*prev + (1-beta)*current` in center/size
/// form.
pub fn box_ema(prev: &BBox, current: &BBox, beta: f64) -> BBox {
    debug_assert!((0.0..=1.0).contains(&beta));
    BBox::new(
        beta * prev.x + (1.0 - beta) * current.x,
        beta * prev.y + (1.0 - beta) * current.y,
        beta * prev.w + (1.0 - beta) * current.w,
        beta * prev.h + (1.0 - beta) * current.h,
    )
}
