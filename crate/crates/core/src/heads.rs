//! Classification and regression heads, label assignment and the training
//! objective.
//!
//! Three classification branches share the aggregated map `R`:
//! - `cls1` scores anchors by their IoU with the ground truth,
//! - `cls2` scores whether a cell's center falls inside the ground truth,
//! - `cls3` regresses a centerness score.
//!
//! The regression head refines each anchor; its IoU with the ground truth
//! feeds the IoU loss `-(1 - iou)(alpha - iou) ln(iou)`.

use rand::Rng;

use crate::apn::{AnchorGrid, MAX_LOG_SCALE};
use crate::autodiff::{Tape, Var};
use crate::bbox::{iou, BBox};
use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::kernels::softplus;
use crate::nn::{ConvPair, OUTPUT_DAMPING};
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Lower clamp on IoU before the logarithm.
pub const IOU_EPS: f64 = 1e-6;

/// `-(1 - iou)(alpha - iou) ln(iou)` with `iou` clamped to `[IOU_EPS, 1]`.
pub fn l_ious(iou: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 1.0 && alpha <= 2.0) {
        return Err(Error::Config(format!("alpha {alpha} outside (1, 2]")));
    }
    let x = iou.clamp(IOU_EPS, 1.0);
    Ok(-(1.0 - x) * (alpha - x) * x.ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Targets for one search image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelAssignment {
    pub rows: usize,
    pub cols: usize,
    pub cls1: Vec<AnchorLabel>,
    /// Cell center inside the ground truth.
    pub cls2: Vec<bool>,
    pub cls3: Vec<f64>,
    pub reg_target: Vec<Option<BBox>>,
    /// Set when the ground truth had zero width or height.
    pub degenerate: bool,
}

impl LabelAssignment {
    pub fn num_positive(&self) -> usize {
        self.cls1.iter().filter(|&&l| l == AnchorLabel::Positive).count()
    }
}

/// Centerness of point `(px, py)` w.r.t. `gt`; zero outside.
pub fn centerness(gt: &BBox, px: f64, py: f64) -> f64 {
    let (x1, y1, x2, y2) = gt.corners();
    let (l, r, t, b) = (px - x1, x2 - px, py - y1, y2 - py);
    if l < 0.0 || r < 0.0 || t < 0.0 || b < 0.0 {
        return 0.0;
    }
    let ratio = |a: f64, b: f64| {
        let hi = a.max(b);
        if hi <= 0.0 {
            0.0
        } else {
            a.min(b) / hi
        }
    };
    (ratio(l, r) * ratio(t, b)).sqrt()
}

/// Label every cell of `grid` given its decoded anchor (row-major).
pub fn assign_labels(anchors: &[BBox], grid: &AnchorGrid, gt: &BBox, loss: &LossConfig) -> LabelAssignment {
    assert_eq!(anchors.len(), grid.len(), "one anchor per grid cell");
    let n = grid.len();
    if gt.is_degenerate() {
        return LabelAssignment {
            rows: grid.rows,
            cols: grid.cols,
            cls1: vec![AnchorLabel::Negative; n],
            cls2: vec![false; n],
            cls3: vec![0.0; n],
            reg_target: vec![None; n],
            degenerate: true,
        };
    }
    let mut out = LabelAssignment {
        rows: grid.rows,
        cols: grid.cols,
        cls1: Vec::with_capacity(n),
        cls2: Vec::with_capacity(n),
        cls3: Vec::with_capacity(n),
        reg_target: Vec::with_capacity(n),
        degenerate: false,
    };
    for (k, anchor) in anchors.iter().enumerate() {
        let (px, py) = grid.cell_center(k / grid.cols, k % grid.cols);
        let overlap = iou(anchor, gt);
        let label = if overlap >= loss.t_pos {
            AnchorLabel::Positive
        } else if overlap <= loss.t_neg {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
        out.cls1.push(label);
        out.cls2.push(gt.contains_point(px, py));
        out.cls3.push(centerness(gt, px, py));
        out.reg_target
            .push((label == AnchorLabel::Positive).then_some(*gt));
    }
    out
}

/// Refine an anchor with raw regression output `(dx, dy, dw, dh)`.
pub fn refine_box(anchor: &BBox, raw: [f64; 4]) -> BBox {
    let s = |r: f64| r.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    BBox::new(
        anchor.cx + raw[0] * anchor.w,
        anchor.cy + raw[1] * anchor.h,
        anchor.w * s(raw[2]),
        anchor.h * s(raw[3]),
    )
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub cls1: Var,
    pub cls2: Var,
    pub cls3: Var,
    pub reg: Var,
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub cls1: ConvPair,
    pub cls2: ConvPair,
    pub cls3: ConvPair,
    pub reg: ConvPair,
}

impl Heads {
    pub fn new<R: Rng + ?Sized>(channels: usize, hidden: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let heads = Self {
            cls1: ConvPair::new(store, "heads.cls1", channels, hidden, 2, rng)?,
            cls2: ConvPair::new(store, "heads.cls2", channels, hidden, 2, rng)?,
            cls3: ConvPair::new(store, "heads.cls3", channels, hidden, 1, rng)?,
            reg: ConvPair::new(store, "heads.reg", channels, hidden, 4, rng)?,
        };
        for head in [&heads.cls1, &heads.cls2, &heads.cls3, &heads.reg] {
            head.damp_output(store, OUTPUT_DAMPING);
        }
        Ok(heads)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, r: Var) -> Result<HeadOutputs> {
        Ok(HeadOutputs {
            cls1: self.cls1.forward(tape, store, r)?,
            cls2: self.cls2.forward(tape, store, r)?,
            cls3: self.cls3.forward(tape, store, r)?,
            reg: self.reg.forward(tape, store, r)?,
        })
    }
}

/// In-graph [`refine_box`] over whole maps.
pub fn refine_boxes(tape: &mut Tape, anchors: Var, reg: Var) -> Result<Var> {
    if tape.shape(anchors) != tape.shape(reg) {
        return Err(Error::shape("refine_boxes", tape.shape(anchors), tape.shape(reg)));
    }
    let ch = |tape: &mut Tape, x: Var, c: usize| tape.slice_channels(x, c, 1);
    let (ax, ay, aw, ah) = (ch(tape, anchors, 0)?, ch(tape, anchors, 1)?, ch(tape, anchors, 2)?, ch(tape, anchors, 3)?);
    let (dx, dy, dw, dh) = (ch(tape, reg, 0)?, ch(tape, reg, 1)?, ch(tape, reg, 2)?, ch(tape, reg, 3)?);

    let shift = |tape: &mut Tape, a: Var, d: Var, size: Var| -> Result<Var> {
        let s = tape.mul(d, size)?;
        tape.add(a, s)
    };
    let cx = shift(tape, ax, dx, aw)?;
    let cy = shift(tape, ay, dy, ah)?;
    let scale = |tape: &mut Tape, size: Var, d: Var| -> Result<Var> {
        let d = tape.clamp(d, -MAX_LOG_SCALE, MAX_LOG_SCALE)?;
        let e = tape.exp(d)?;
        tape.mul(size, e)
    };
    let w = scale(tape, aw, dw)?;
    let h = scale(tape, ah, dh)?;
    let xy = tape.concat_channels(cx, cy)?;
    let xyw = tape.concat_channels(xy, w)?;
    tape.concat_channels(xyw, h)
}

/// IoU of every predicted box `[N,4,h,w]` with its sample's ground truth,
/// clamped to `[IOU_EPS, 1]`. Returns `[N,1,h,w]`.
pub fn iou_map(tape: &mut Tape, boxes: Var, gts: &[BBox]) -> Result<Var> {
    let shape = tape.shape(boxes).to_vec();
    let (n, rows, cols) = (shape[0], shape[2], shape[3]);
    if gts.len() != n || shape[1] != 4 {
        return Err(Error::invalid_shape(
            "iou_map",
            format!("{} ground-truth boxes for predictions of shape {shape:?}", gts.len()),
        ));
    }
    let plane = rows * cols;
    let constant = |tape: &mut Tape, f: &dyn Fn(&BBox) -> f64| {
        let data = gts.iter().flat_map(|g| std::iter::repeat_n(f(g), plane)).collect();
        tape.input(Tensor::from_parts(vec![n, 1, rows, cols], data))
    };
    let gx1 = constant(tape, &|g| g.corners().0);
    let gy1 = constant(tape, &|g| g.corners().1);
    let gx2 = constant(tape, &|g| g.corners().2);
    let gy2 = constant(tape, &|g| g.corners().3);
    let garea = constant(tape, &|g| g.area());

    let cx = tape.slice_channels(boxes, 0, 1)?;
    let cy = tape.slice_channels(boxes, 1, 1)?;
    let w = tape.slice_channels(boxes, 2, 1)?;
    let h = tape.slice_channels(boxes, 3, 1)?;
    let hw = tape.affine(w, 0.5, 0.0)?;
    let hh = tape.affine(h, 0.5, 0.0)?;
    let x1 = tape.sub(cx, hw)?;
    let x2 = tape.add(cx, hw)?;
    let y1 = tape.sub(cy, hh)?;
    let y2 = tape.add(cy, hh)?;

    let overlap = |tape: &mut Tape, lo: Var, hi: Var, glo: Var, ghi: Var| -> Result<Var> {
        let right = tape.minimum(hi, ghi)?;
        let left = tape.maximum(lo, glo)?;
        let d = tape.sub(right, left)?;
        tape.relu(d)
    };
    let iw = overlap(tape, x1, x2, gx1, gx2)?;
    let ih = overlap(tape, y1, y2, gy1, gy2)?;
    let inter = tape.mul(iw, ih)?;
    let pw = tape.sub(x2, x1)?;
    let ph = tape.sub(y2, y1)?;
    let parea = tape.mul(pw, ph)?;
    let union = tape.add(parea, garea)?;
    let union = tape.sub(union, inter)?;
    let ratio = tape.div(inter, union)?;
    tape.clamp(ratio, IOU_EPS, 1.0)
}

/// In-graph IoU loss on an already clamped IoU map.
pub fn l_ious_map(tape: &mut Tape, ious: Var, alpha: f64) -> Result<Var> {
    let a = tape.affine(ious, -1.0, 1.0)?;
    let b = tape.affine(ious, -1.0, alpha)?;
    let l = tape.ln(ious)?;
    let ab = tape.mul(a, b)?;
    let abl = tape.mul(ab, l)?;
    tape.affine(abl, -1.0, 0.0)
}

/// Mean of `L_ious(IoU(boxes, gt))` over cells where `mask` is 1.
fn masked_iou_loss(tape: &mut Tape, boxes: Var, gts: &[BBox], mask: Tensor, count: usize, alpha: f64) -> Result<Var> {
    let ious = iou_map(tape, boxes, gts)?;
    let per_cell = l_ious_map(tape, ious, alpha)?;
    let m = tape.input(mask);
    let masked = tape.mul(per_cell, m)?;
    let s = tape.sum(masked)?;
    tape.affine(s, 1.0 / count as f64, 0.0)
}

/// Scalar loss terms on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cls1: Var,
    pub cls2: Var,
    pub cls3: Var,
    /// `reg_box + w_anchor * anchor`.
    pub reg: Var,
    pub reg_box: Var,
    pub anchor: Var,
}

/// Plain values of [`LossTerms`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub cls1: f64,
    pub cls2: f64,
    pub cls3: f64,
    pub reg: f64,
    pub reg_box: f64,
    pub anchor: f64,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let v = |x: Var| tape.value(x).item();
        LossValues {
            total: v(self.total),
            cls1: v(self.cls1),
            cls2: v(self.cls2),
            cls3: v(self.cls3),
            reg: v(self.reg),
            reg_box: v(self.reg_box),
            anchor: v(self.anchor),
        }
    }
}

fn mask(labels: &[LabelAssignment], f: impl Fn(&LabelAssignment, usize) -> f64) -> Tensor {
    let (rows, cols) = (labels[0].rows, labels[0].cols);
    let data = labels
        .iter()
        .flat_map(|l| (0..rows * cols).map(move |k| (l, k)))
        .map(|(l, k)| f(l, k))
        .collect();
    Tensor::from_parts(vec![labels.len(), 1, rows, cols], data)
}

/// Two-class softmax cross-entropy summed over cells, weighted per cell.
/// Channel 1 is the positive class.
fn two_class_ce(tape: &mut Tape, logits: Var, pos_weight: Tensor, neg_weight: Tensor) -> Result<Var> {
    let l0 = tape.slice_channels(logits, 0, 1)?;
    let l1 = tape.slice_channels(logits, 1, 1)?;
    let margin = tape.sub(l0, l1)?;
    // -log softmax_1 = softplus(l0 - l1), -log softmax_0 = softplus(l1 - l0)
    let pos_loss = tape.softplus(margin)?;
    let flipped = tape.affine(margin, -1.0, 0.0)?;
    let neg_loss = tape.softplus(flipped)?;
    let pw = tape.input(pos_weight);
    let nw = tape.input(neg_weight);
    let a = tape.mul(pos_loss, pw)?;
    let b = tape.mul(neg_loss, nw)?;
    let s = tape.add(a, b)?;
    tape.sum(s)
}

/// Weighted total objective:
/// `w1*CE(cls1) + w2*CE(cls2) + w3*BCE(cls3) + mean_pos L_ious(IoU(pred, gt))
///  + w_anchor * mean_inside L_ious(IoU(anchor, gt))`.
///
/// `cls1` averages over non-ignored cells, `cls2`/`cls3` over all cells, the
/// refined-box term over positives and the anchor term over cells whose
/// center lies inside the ground truth; empty sets contribute zero. The
/// centerness term is the KL form of binary cross-entropy, which differs
/// from BCE by the constant target entropy and is zero at a perfect fit.
pub fn total_loss(
    tape: &mut Tape,
    heads: &HeadOutputs,
    anchors: Var,
    labels: &[LabelAssignment],
    gts: &[BBox],
    lw: &LossConfig,
) -> Result<LossTerms> {
    if labels.is_empty() || labels.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} label sets for {} ground-truth boxes",
            labels.len(),
            gts.len()
        )));
    }
    let shape = tape.shape(heads.cls1).to_vec();
    if shape[0] != labels.len() || shape[2] != labels[0].rows || shape[3] != labels[0].cols {
        return Err(Error::invalid_shape(
            "total_loss",
            format!("head shape {shape:?} does not match {} label grids", labels.len()),
        ));
    }
    let cells = (labels.len() * labels[0].rows * labels[0].cols) as f64;

    // cls1: anchors by IoU
    let counted = labels
        .iter()
        .flat_map(|l| &l.cls1)
        .filter(|&&l| l != AnchorLabel::Ignore)
        .count()
        .max(1) as f64;
    let pos = mask(labels, |l, k| (l.cls1[k] == AnchorLabel::Positive) as u8 as f64);
    let neg = mask(labels, |l, k| (l.cls1[k] == AnchorLabel::Negative) as u8 as f64);
    let cls1_sum = two_class_ce(tape, heads.cls1, pos.clone(), neg)?;
    let cls1 = tape.affine(cls1_sum, 1.0 / counted, 0.0)?;

    // cls2: inside / outside ground truth
    let inside = mask(labels, |l, k| l.cls2[k] as u8 as f64);
    let outside = mask(labels, |l, k| (!l.cls2[k]) as u8 as f64);
    let cls2_sum = two_class_ce(tape, heads.cls2, inside.clone(), outside)?;
    let cls2 = tape.affine(cls2_sum, 1.0 / cells, 0.0)?;

    // cls3: centerness, softplus(x) - t*x - H(t)
    let target = mask(labels, |l, k| l.cls3[k]);
    let entropy: f64 = target
        .data()
        .iter()
        .map(|&t| {
            let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
            h(t) + h(1.0 - t)
        })
        .sum();
    let sp = tape.softplus(heads.cls3)?;
    let t = tape.input(target);
    let tx = tape.mul(heads.cls3, t)?;
    let bce = tape.sub(sp, tx)?;
    let bce_sum = tape.sum(bce)?;
    let cls3 = tape.affine(bce_sum, 1.0 / cells, -entropy / cells)?;

    // regression: IoU loss of refined boxes over positives
    let num_pos: usize = labels.iter().map(LabelAssignment::num_positive).sum();
    let reg_box = if num_pos == 0 {
        tape.input(Tensor::scalar(0.0))
    } else {
        let pred = refine_boxes(tape, anchors, heads.reg)?;
        masked_iou_loss(tape, pred, gts, pos, num_pos, lw.alpha)?
    };

    // anchors: IoU loss of the proposals themselves over inside cells
    let num_inside: usize = labels.iter().flat_map(|l| &l.cls2).filter(|&&b| b).count();
    let anchor = if num_inside == 0 || lw.w_anchor == 0.0 {
        tape.input(Tensor::scalar(0.0))
    } else {
        masked_iou_loss(tape, anchors, gts, inside, num_inside, lw.alpha)?
    };
    let weighted_anchor = tape.affine(anchor, lw.w_anchor, 0.0)?;
    let reg = tape.add(reg_box, weighted_anchor)?;

    let a = tape.affine(cls1, lw.w1, 0.0)?;
    let b = tape.affine(cls2, lw.w2, 0.0)?;
    let c = tape.affine(cls3, lw.w3, 0.0)?;
    let ab = tape.add(a, b)?;
    let abc = tape.add(ab, c)?;
    let total = tape.add(abc, reg)?;
    Ok(LossTerms {
        total,
        cls1,
        cls2,
        cls3,
        reg,
        reg_box,
        anchor,
    })
}

/// `softplus` re-exported for scalar callers that score cells.
pub fn log1p_exp(x: f64) -> f64 {
    softplus(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> AnchorGrid {
        AnchorGrid::new(21, 21, 8.0, 287.0, 64.0)
    }

    #[test]
    fn l_ious_examples() {
        assert_eq!(l_ious(1.0, 1.5).unwrap(), 0.0);
        let v = l_ious(0.5, 1.5).unwrap();
        assert!((v - 0.5 * 2f64.ln()).abs() < 1e-15);
        assert!((v - 0.346574).abs() < 1e-6);
        let big = l_ious(0.0, 1.5).unwrap();
        assert!(big.is_finite() && big > 10.0);
        assert!(l_ious(0.5, 1.0).is_err());
        assert!(l_ious(0.5, 2.1).is_err());
    }

    #[test]
    fn anchor_equal_to_gt_is_positive_inside_and_centered() {
        let g = grid();
        let gt = BBox::new(143.5, 143.5, 64.0, 64.0);
        let anchors: Vec<BBox> = (0..g.len())
            .map(|k| {
                let (x, y) = g.cell_center(k / 21, k % 21);
                BBox::new(x, y, 64.0, 64.0)
            })
            .collect();
        let labels = assign_labels(&anchors, &g, &gt, &LossConfig::default());
        let center = 10 * 21 + 10;
        assert_eq!(labels.cls1[center], AnchorLabel::Positive);
        assert!(labels.cls2[center]);
        assert_eq!(labels.cls3[center], 1.0);
        assert_eq!(labels.reg_target[center], Some(gt));
        assert_eq!(labels.cls1[0], AnchorLabel::Negative);
        assert_eq!(labels.cls3[0], 0.0);
        assert!(!labels.degenerate);
    }

    #[test]
    fn degenerate_gt_is_all_negative() {
        let g = grid();
        let anchors = vec![BBox::new(143.5, 143.5, 64.0, 64.0); g.len()];
        let labels = assign_labels(&anchors, &g, &BBox::new(143.5, 143.5, 0.0, 10.0), &LossConfig::default());
        assert!(labels.degenerate);
        assert!(labels.cls1.iter().all(|&l| l == AnchorLabel::Negative));
        assert_eq!(labels.num_positive(), 0);
    }

    #[test]
    fn centerness_range() {
        let gt = BBox::new(10.0, 10.0, 8.0, 4.0);
        assert_eq!(centerness(&gt, 10.0, 10.0), 1.0);
        assert_eq!(centerness(&gt, 100.0, 10.0), 0.0);
        let c = centerness(&gt, 12.0, 11.0);
        assert!(c > 0.0 && c < 1.0);
    }

    #[test]
    fn refine_matches_graph() {
        let mut tape = Tape::new();
        let anchors = Tensor::new(&[1, 4, 1, 2], vec![10.0, 50.0, 20.0, 60.0, 30.0, 40.0, 15.0, 25.0]).unwrap();
        let reg = Tensor::new(&[1, 4, 1, 2], vec![0.1, -0.2, 0.3, 0.05, -0.4, 0.2, 0.7, -0.1]).unwrap();
        let a = tape.input(anchors.clone());
        let r = tape.input(reg.clone());
        let out = refine_boxes(&mut tape, a, r).unwrap();
        let boxes = crate::apn::boxes_from_tensor(tape.value(out), 0);
        let a_boxes = crate::apn::boxes_from_tensor(&anchors, 0);
        for (k, b) in boxes.iter().enumerate() {
            let raw = [0, 1, 2, 3].map(|c| reg.at4(0, c, 0, k));
            let want = refine_box(&a_boxes[k], raw);
            assert!((b.cx - want.cx).abs() < 1e-12 && (b.w - want.w).abs() < 1e-12);
            assert!((b.cy - want.cy).abs() < 1e-12 && (b.h - want.h).abs() < 1e-12);
        }
    }
}
