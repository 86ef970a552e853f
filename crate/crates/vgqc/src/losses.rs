//! Box overlap measures and the grounding objective.
//!
//! Scalar [`iou`]/[`giou`] drive evaluation; the tape-side losses build the
//! same math from differentiable primitives so gradients flow back to the box
//! head. Both sides share the (cx, cy, w, h) parametrization.

use crate::tensor::{Elem, Tape, TensorError, TensorId};

/// Per-coordinate transition point of the smooth-L1 loss.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Lower bound applied to predicted w/h before the loss; keeps unions away
/// from zero so IoU never divides by zero during training.
pub const BOX_FLOOR: f64 = 1e-4;

/// Axis-aligned box as center plus extent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCwh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCwh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxCwh { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxCwh {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BoxCwh::new(v[0], v[1], v[2], v[3])
    }

    pub fn from_f32_slice(v: &[f32]) -> Self {
        BoxCwh::new(v[0] as f64, v[1] as f64, v[2] as f64, v[3] as f64)
    }

    /// (x1, y1, x2, y2) with x1 <= x2 and y1 <= y2 for non-negative extents.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection area over union area; 0 when the union is degenerate.
pub fn iou(a: &BoxCwh, b: &BoxCwh) -> f64 {
    let (inter, union) = inter_union(a, b);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU minus the enclosing-box area not covered by the union; in (-1, 1].
/// Degenerate unions return 0 to match [`iou`].
pub fn giou(a: &BoxCwh, b: &BoxCwh) -> f64 {
    let (inter, union) = inter_union(a, b);
    if union <= 0.0 {
        return 0.0;
    }
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let ew = ax2.max(bx2) - ax1.min(bx1);
    let eh = ay2.max(by2) - ay1.min(by1);
    let enclose = ew * eh;
    inter / union - (enclose - union) / enclose
}

/// acc@0.5 predicate: strictly greater than 0.5.
pub fn is_correct(pred: &BoxCwh, gt: &BoxCwh) -> bool {
    iou(pred, gt) > 0.5
}

fn inter_union(a: &BoxCwh, b: &BoxCwh) -> (f64, f64) {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter, union)
}

/// Corner columns of a `[b, 4]` box tensor, with w/h floored at [`BOX_FLOOR`].
struct BoxCols {
    x1: TensorId,
    y1: TensorId,
    x2: TensorId,
    y2: TensorId,
    area: TensorId,
    cx: TensorId,
    cy: TensorId,
    w: TensorId,
    h: TensorId,
}

fn box_cols<E: Elem>(tape: &mut Tape<E>, boxes: TensorId) -> Result<BoxCols, TensorError> {
    let shape = tape.shape(boxes).to_vec();
    if shape.len() != 2 || shape[1] != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "box_cols",
            detail: format!("{shape:?} is not [b, 4]"),
        });
    }
    let cx = tape.column(boxes, 0)?;
    let cy = tape.column(boxes, 1)?;
    let w_raw = tape.column(boxes, 2)?;
    let h_raw = tape.column(boxes, 3)?;
    let w = tape.max_scalar(w_raw, E::from_f64(BOX_FLOOR));
    let h = tape.max_scalar(h_raw, E::from_f64(BOX_FLOOR));
    let half = E::from_f64(0.5);
    let wh = tape.mul_scalar(w, half);
    let hh = tape.mul_scalar(h, half);
    let x1 = tape.sub(cx, wh)?;
    let x2 = tape.add(cx, wh)?;
    let y1 = tape.sub(cy, hh)?;
    let y2 = tape.add(cy, hh)?;
    let area = tape.mul(w, h)?;
    Ok(BoxCols {
        x1,
        y1,
        x2,
        y2,
        area,
        cx,
        cy,
        w,
        h,
    })
}

/// Per-sample `1 - giou` terms as a `[b]` vector.
fn giou_loss_vec<E: Elem>(
    tape: &mut Tape<E>,
    pred: TensorId,
    gt: TensorId,
) -> Result<TensorId, TensorError> {
    let p = box_cols(tape, pred)?;
    let g = box_cols(tape, gt)?;
    let ix1 = tape.max_el(p.x1, g.x1)?;
    let iy1 = tape.max_el(p.y1, g.y1)?;
    let ix2 = tape.min_el(p.x2, g.x2)?;
    let iy2 = tape.min_el(p.y2, g.y2)?;
    let iwr = tape.sub(ix2, ix1)?;
    let ihr = tape.sub(iy2, iy1)?;
    let iw = tape.relu(iwr);
    let ih = tape.relu(ihr);
    let inter = tape.mul(iw, ih)?;
    let sum_area = tape.add(p.area, g.area)?;
    let union = tape.sub(sum_area, inter)?;
    let iou = tape.div(inter, union)?;
    let ex1 = tape.min_el(p.x1, g.x1)?;
    let ey1 = tape.min_el(p.y1, g.y1)?;
    let ex2 = tape.max_el(p.x2, g.x2)?;
    let ey2 = tape.max_el(p.y2, g.y2)?;
    let ew = tape.sub(ex2, ex1)?;
    let eh = tape.sub(ey2, ey1)?;
    let enclose = tape.mul(ew, eh)?;
    let gap = tape.sub(enclose, union)?;
    let frac = tape.div(gap, enclose)?;
    let giou = tape.sub(iou, frac)?;
    let neg = tape.mul_scalar(giou, E::from_f64(-1.0));
    Ok(tape.add_scalar(neg, E::one()))
}

/// Mean over the batch of `1 - giou(pred_i, gt_i)`.
pub fn giou_loss<E: Elem>(
    tape: &mut Tape<E>,
    pred: TensorId,
    gt: TensorId,
) -> Result<TensorId, TensorError> {
    let v = giou_loss_vec(tape, pred, gt)?;
    Ok(tape.mean_all(v))
}

/// Mean over the batch of the coordinate-summed smooth-L1 distance.
///
/// Uses the closed form `q * (|d| - q/2) / beta` with `q = min(|d|, beta)`,
/// which equals the piecewise definition and is differentiable at the joint.
pub fn smooth_l1<E: Elem>(
    tape: &mut Tape<E>,
    pred: TensorId,
    gt: TensorId,
) -> Result<TensorId, TensorError> {
    let p = box_cols(tape, pred)?;
    let g = box_cols(tape, gt)?;
    let beta = E::from_f64(SMOOTH_L1_BETA);
    let batch = tape.shape(pred)[0];
    let beta_vec = tape.constant(vec![batch], vec![beta; batch]);
    let pairs = [(p.cx, g.cx), (p.cy, g.cy), (p.w, g.w), (p.h, g.h)];
    let mut total: Option<TensorId> = None;
    for (pc, gc) in pairs {
        let d = tape.sub(pc, gc)?;
        let a = tape.abs(d);
        let q = tape.min_el(a, beta_vec)?;
        let qh = tape.mul_scalar(q, E::from_f64(0.5));
        let rest = tape.sub(a, qh)?;
        let prod = tape.mul(q, rest)?;
        let term = tape.mul_scalar(prod, E::from_f64(1.0 / SMOOTH_L1_BETA));
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(tape.mean_all(total.unwrap()))
}

/// Combined objective: `giou_loss + smooth_l1`, unweighted.
pub fn total_loss<E: Elem>(
    tape: &mut Tape<E>,
    pred: TensorId,
    gt: TensorId,
) -> Result<TensorId, TensorError> {
    let g = giou_loss(tape, pred, gt)?;
    let s = smooth_l1(tape, pred, gt)?;
    tape.add(g, s)
}
