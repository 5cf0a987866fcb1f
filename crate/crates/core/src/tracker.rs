//! Frame-by-frame inference: crop around the last box, score every cell,
//! pick the best refined anchor and map it back to the frame.

use crate::autodiff::Tape;
use crate::backbone::FeaturePair;
use crate::bbox::BBox;
use crate::config::TrackerConfig;
use crate::error::{Error, Result};
use crate::heads::refine_box;
use crate::image::{crop, CropWindow, Image};
use crate::kernels::sigmoid;
use crate::model::{ForwardOutput, SiamModel};
use crate::tensor::Tensor;

/// Side of the square template region around `b`: `sqrt((w+p)(h+p))`
/// with `p = context * (w + h)`.
pub fn context_side(b: &BBox, context: f64) -> f64 {
    let p = context * (b.w + b.h);
    ((b.w + p) * (b.h + p)).sqrt()
}

pub fn template_window(b: &BBox, cfg: &TrackerConfig) -> CropWindow {
    CropWindow {
        cx: b.cx,
        cy: b.cy,
        side: context_side(b, cfg.context_amount),
        out_size: cfg.template_size,
    }
}

pub fn search_window(b: &BBox, cfg: &TrackerConfig) -> CropWindow {
    let side = context_side(b, cfg.context_amount) * cfg.search_size as f64 / cfg.template_size as f64;
    CropWindow {
        cx: b.cx,
        cy: b.cy,
        side,
        out_size: cfg.search_size,
    }
}

fn batch1(t: Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.reshaped(&shape).expect("same element count")
}

#[derive(Clone, Debug)]
pub struct TrackState {
    template: FeaturePair<Tensor>,
    pub last_box: BBox,
    pub cfg: TrackerConfig,
}

impl TrackState {
    pub fn template_features(&self) -> &FeaturePair<Tensor> {
        &self.template
    }
}

/// Extract template features around `b` in `frame`.
pub fn init(model: &SiamModel, frame: &Image, b: &BBox) -> Result<TrackState> {
    if b.is_degenerate() || !b.is_valid() {
        return Err(Error::InvalidArgument(format!("degenerate initial box {b:?}")));
    }
    if !frame.contains_box(b) {
        return Err(Error::InvalidArgument(format!(
            "initial box {b:?} outside {}x{} frame",
            frame.width(),
            frame.height()
        )));
    }
    let cfg = model.config.tracker.clone();
    let patch = batch1(crop(frame, &template_window(b, &cfg)));
    let mut tape = Tape::new();
    let z = tape.input(patch);
    let zf = model.features(&mut tape, z)?;
    Ok(TrackState {
        template: FeaturePair {
            f4: tape.value(zf.f4).clone(),
            f5: tape.value(zf.f5).clone(),
        },
        last_box: *b,
        cfg,
    })
}

/// Per-cell scores and refined boxes in search-crop coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct CellMaps {
    pub rows: usize,
    pub cols: usize,
    pub score: Vec<f64>,
    pub boxes: Vec<BBox>,
}

fn pos_prob(l0: f64, l1: f64) -> f64 {
    sigmoid(l1 - l0)
}

/// Combine the three classification branches and refine each anchor,
/// for batch element `n`.
pub fn cell_maps(tape: &Tape, out: &ForwardOutput, n: usize) -> CellMaps {
    let c1 = tape.value(out.heads.cls1);
    let c2 = tape.value(out.heads.cls2);
    let c3 = tape.value(out.heads.cls3);
    let reg = tape.value(out.heads.reg);
    let anchors = out.anchors.boxes_for(tape, n);
    let (rows, cols) = (c1.shape()[2], c1.shape()[3]);
    let mut score = Vec::with_capacity(rows * cols);
    let mut boxes = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let s1 = pos_prob(c1.at4(n, 0, i, j), c1.at4(n, 1, i, j));
            let s2 = pos_prob(c2.at4(n, 0, i, j), c2.at4(n, 1, i, j));
            let s3 = sigmoid(c3.at4(n, 0, i, j));
            score.push(s1 * s2 * s3);
            let raw = [0, 1, 2, 3].map(|c| reg.at4(n, c, i, j));
            boxes.push(refine_box(&anchors[i * cols + j], raw));
        }
    }
    CellMaps {
        rows,
        cols,
        score,
        boxes,
    }
}

fn hanning(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Outer product of Hann windows, row-major, peak 1 at the center.
pub fn cosine_window(rows: usize, cols: usize) -> Vec<f64> {
    let (hr, hc) = (hanning(rows), hanning(cols));
    let peak = hr.iter().cloned().fold(0.0, f64::max) * hc.iter().cloned().fold(0.0, f64::max);
    hr.iter()
        .flat_map(|a| hc.iter().map(move |b| a * b / peak))
        .collect()
}

fn change(r: f64) -> f64 {
    r.max(1.0 / r)
}

fn size_term(w: f64, h: f64) -> f64 {
    let p = (w + h) / 2.0;
    ((w + p) * (h + p)).sqrt()
}

/// Scale/aspect change penalty of `cand` relative to `prev`, in `(0, 1]`.
pub fn change_penalty(cand: &BBox, prev: &BBox, k: f64) -> f64 {
    let s = change(size_term(cand.w, cand.h) / size_term(prev.w, prev.h));
    let r = change((prev.w / prev.h) / (cand.w / cand.h));
    (-(r * s - 1.0) * k).exp()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub index: usize,
    /// In search-crop coordinates.
    pub bbox: BBox,
    /// Network score before penalty and window.
    pub score: f64,
    pub penalty: f64,
    pub blended: f64,
}

/// Best cell after penalizing size changes against `prev` (crop
/// coordinates) and blending with `window`. The first maximum wins ties.
pub fn select_candidate(maps: &CellMaps, window: &[f64], prev: &BBox, cfg: &TrackerConfig) -> Candidate {
    let lambda = cfg.window_influence;
    let mut best: Option<Candidate> = None;
    for (k, (&score, bbox)) in maps.score.iter().zip(&maps.boxes).enumerate() {
        let penalty = change_penalty(bbox, prev, cfg.penalty_k);
        let blended = (1.0 - lambda) * score * penalty + lambda * window[k];
        if best.is_none_or(|b| blended > b.blended) {
            best = Some(Candidate {
                index: k,
                bbox: *bbox,
                score,
                penalty,
                blended,
            });
        }
    }
    best.expect("non-empty score map")
}

/// Keep `b` fully inside a `width x height` frame.
pub fn clamp_to_frame(b: &BBox, width: usize, height: usize) -> BBox {
    let (fw, fh) = (width as f64, height as f64);
    let w = b.w.clamp(1.0, fw);
    let h = b.h.clamp(1.0, fh);
    BBox::new(
        b.cx.clamp(w / 2.0, fw - w / 2.0),
        b.cy.clamp(h / 2.0, fh - h / 2.0),
        w,
        h,
    )
}

/// Locate the target in `frame` and update `state`.
pub fn track_frame(state: &mut TrackState, model: &SiamModel, frame: &Image) -> Result<(BBox, f64)> {
    let window = search_window(&state.last_box, &state.cfg);
    let patch = batch1(crop(frame, &window));
    let mut tape = Tape::new();
    let x = tape.input(patch);
    let xf = model.features(&mut tape, x)?;
    let zf = FeaturePair {
        f4: tape.input(state.template.f4.clone()),
        f5: tape.input(state.template.f5.clone()),
    };
    let out = model.forward(&mut tape, &zf, &xf)?;
    let maps = cell_maps(&tape, &out, 0);
    let cosine = cosine_window(maps.rows, maps.cols);
    let prev = window.box_to_crop(&state.last_box);
    let best = select_candidate(&maps, &cosine, &prev, &state.cfg);

    let found = window.box_to_frame(&best.bbox);
    let lr = state.cfg.size_lr;
    let last = state.last_box;
    let smoothed = BBox::new(
        found.cx,
        found.cy,
        (1.0 - lr) * last.w + lr * found.w,
        (1.0 - lr) * last.h + lr * found.h,
    );
    let b = clamp_to_frame(&smoothed, frame.width(), frame.height());
    state.last_box = b;
    Ok((b, best.score))
}

/// One-pass run: the first prediction is the initial box itself.
pub fn track_sequence(model: &SiamModel, frames: &[Image], first: &BBox) -> Result<Vec<BBox>> {
    let Some((head, rest)) = frames.split_first() else {
        return Err(Error::InvalidArgument("empty sequence".into()));
    };
    let mut state = init(model, head, first)?;
    let mut out = Vec::with_capacity(frames.len());
    out.push(*first);
    for frame in rest {
        out.push(track_frame(&mut state, model, frame)?.0);
    }
    Ok(out)
}
