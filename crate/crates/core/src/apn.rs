//! Anchor proposal on dual features.
//!
//! Level-4 and level-5 similarity maps are fused into `R_A`, from which two
//! convolutions regress one adaptive anchor per feature cell.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::FeaturePair;
use crate::bbox::BBox;
use crate::config::ApnConfig;
use crate::error::{Error, Result};
use crate::nn::{calibrate_correlation, gate, rms, unit_factor, Conv, ConvPair, Ffn, OUTPUT_DAMPING};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Raw log-scale outputs are clamped to this magnitude before `exp`.
pub const MAX_LOG_SCALE: f64 = 10.0;
/// Smallest anchor side in pixels.
pub const MIN_ANCHOR_SIDE: f64 = 1.0;

/// Maps feature cells to search-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorGrid {
    pub rows: usize,
    pub cols: usize,
    pub stride: f64,
    pub search_size: f64,
    pub base: f64,
}

impl AnchorGrid {
    pub fn new(rows: usize, cols: usize, stride: f64, search_size: f64, base: f64) -> Self {
        Self {
            rows,
            cols,
            stride,
            search_size,
            base,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The grid is centered on the search image.
    pub fn offset_x(&self) -> f64 {
        self.search_size / 2.0 - (self.cols as f64 - 1.0) / 2.0 * self.stride
    }

    pub fn offset_y(&self) -> f64 {
        self.search_size / 2.0 - (self.rows as f64 - 1.0) / 2.0 * self.stride
    }

    /// Search-image position of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.offset_x() + col as f64 * self.stride,
            self.offset_y() + row as f64 * self.stride,
        )
    }

    fn center_limit(&self) -> f64 {
        self.search_size - 1.0
    }

    /// Decode one cell's raw `(dx, dy, dw, dh)`.
    pub fn decode(&self, row: usize, col: usize, raw: [f64; 4]) -> BBox {
        let (gx, gy) = self.cell_center(row, col);
        let side = |r: f64| {
            (self.base * r.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp())
                .clamp(MIN_ANCHOR_SIDE, self.search_size)
        };
        BBox::new(
            (gx + raw[0] * self.stride).clamp(0.0, self.center_limit()),
            (gy + raw[1] * self.stride).clamp(0.0, self.center_limit()),
            side(raw[2]),
            side(raw[3]),
        )
    }
}

/// Proposed anchors, `[N,4,h,w]` channels `(cx, cy, w, h)`.
#[derive(Clone, Copy, Debug)]
pub struct AnchorSet {
    pub boxes: Var,
    pub grid: AnchorGrid,
}

impl AnchorSet {
    /// Row-major boxes for batch element `n`.
    pub fn boxes_for(&self, tape: &Tape, n: usize) -> Vec<BBox> {
        boxes_from_tensor(tape.value(self.boxes), n)
    }
}

/// Read `[N,4,h,w]` box channels of element `n` into row-major boxes.
pub fn boxes_from_tensor(t: &Tensor, n: usize) -> Vec<BBox> {
    let (rows, cols) = (t.shape()[2], t.shape()[3]);
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(BBox::new(
                t.at4(n, 0, i, j),
                t.at4(n, 1, i, j),
                t.at4(n, 2, i, j),
                t.at4(n, 3, i, j),
            ));
        }
    }
    out
}

/// Level-4, level-5 and fused similarity maps.
#[derive(Clone, Copy, Debug)]
pub struct FusedMap {
    pub r4: Var,
    pub r5: Var,
    pub ra: Var,
}

#[derive(Clone, Debug)]
pub struct ApnDf {
    pub reduce4: Conv,
    pub reduce5_search: Conv,
    pub reduce5_template: Conv,
    pub ffn: Ffn,
    pub cat: Conv,
    pub gamma1: ParamId,
    pub gamma2: ParamId,
    pub anchor_head: ConvPair,
    pub base: f64,
}

impl ApnDf {
    pub fn new<R: Rng + ?Sized>(
        cfg: &ApnConfig,
        c4: usize,
        c5: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let c = cfg.channels;
        let apn = Self {
            reduce4: Conv::pointwise(store, "apn.reduce4", c4, c, rng)?,
            reduce5_search: Conv::pointwise(store, "apn.reduce5_search", c5, c, rng)?,
            reduce5_template: Conv::pointwise(store, "apn.reduce5_template", c5, c, rng)?,
            ffn: Ffn::new(store, "apn.ffn", c, cfg.ffn_hidden, rng)?,
            cat: Conv::pointwise(store, "apn.cat", 2 * c, c, rng)?,
            gamma1: gate(store, "apn.gamma1")?,
            gamma2: gate(store, "apn.gamma2")?,
            anchor_head: ConvPair::new(store, "apn.anchor", c, cfg.head_channels, 4, rng)?,
            base: cfg.anchor_base,
        };
        apn.anchor_head.damp_output(store, OUTPUT_DAMPING);
        Ok(apn)
    }

    /// `R4 = F(phi4(X) * phi4(Z))`: correlate first, then reduce.
    pub fn compute_r4(&self, tape: &mut Tape, store: &ParamStore, zf: &FeaturePair, xf: &FeaturePair) -> Result<Var> {
        let corr = tape.dwxcorr(xf.f4, zf.f4)?;
        self.reduce4.forward(tape, store, corr)
    }

    /// `R5 = F(phi5(X)) * F(phi5(Z))`: reduce each branch, then correlate.
    pub fn compute_r5(&self, tape: &mut Tape, store: &ParamStore, zf: &FeaturePair, xf: &FeaturePair) -> Result<Var> {
        let xs = self.reduce5_search.forward(tape, store, xf.f5)?;
        let zs = self.reduce5_template.forward(tape, store, zf.f5)?;
        tape.dwxcorr(xs, zs)
    }

    /// Rescale the reduction convs so `R4` and `R5` have unit RMS on the
    /// given features.
    pub fn calibrate(&self, store: &mut ParamStore, zf: &FeaturePair<Tensor>, xf: &FeaturePair<Tensor>) -> Result<()> {
        let mut tape = Tape::new();
        let x4 = tape.input(xf.f4.clone());
        let z4 = tape.input(zf.f4.clone());
        let corr = tape.dwxcorr(x4, z4)?;
        let r4 = self.reduce4.forward(&mut tape, store, corr)?;
        self.reduce4.scale(store, unit_factor(rms(tape.value(r4))));
        calibrate_correlation(store, &self.reduce5_search, &self.reduce5_template, &xf.f5, &zf.f5)
    }

    /// `R_A = R5 + g1 * FFN(GAP(R4)) (.) R5 + g2 * F(Cat(R4, R5))`.
    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, r4: Var, r5: Var) -> Result<Var> {
        if tape.shape(r4) != tape.shape(r5) {
            return Err(Error::shape("fuse", tape.shape(r4), tape.shape(r5)));
        }
        let pooled = tape.gap(r4)?;
        let weights = self.ffn.forward(tape, store, pooled)?;
        let weighted = tape.mul_channelwise(r5, weights)?;
        let g1 = tape.param(store, self.gamma1);
        let branch1 = tape.scale(weighted, g1)?;

        let cat = tape.concat_channels(r4, r5)?;
        let mixed = self.cat.forward(tape, store, cat)?;
        let g2 = tape.param(store, self.gamma2);
        let branch2 = tape.scale(mixed, g2)?;

        let out = tape.add(r5, branch1)?;
        tape.add(out, branch2)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, zf: &FeaturePair, xf: &FeaturePair) -> Result<FusedMap> {
        let r4 = self.compute_r4(tape, store, zf, xf)?;
        let r5 = self.compute_r5(tape, store, zf, xf)?;
        let ra = self.fuse(tape, store, r4, r5)?;
        Ok(FusedMap { r4, r5, ra })
    }

    /// Raw `(dx, dy, dw, dh)` per cell.
    pub fn raw_offsets(&self, tape: &mut Tape, store: &ParamStore, ra: Var) -> Result<Var> {
        self.anchor_head.forward(tape, store, ra)
    }

    pub fn propose(&self, tape: &mut Tape, store: &ParamStore, ra: Var, stride: usize, search_size: usize) -> Result<AnchorSet> {
        let raw = self.raw_offsets(tape, store, ra)?;
        let shape = tape.shape(raw);
        let grid = AnchorGrid::new(shape[2], shape[3], stride as f64, search_size as f64, self.base);
        decode_anchors(tape, raw, grid)
    }
}

/// In-graph decode of raw offsets into anchor boxes.
pub fn decode_anchors(tape: &mut Tape, raw: Var, grid: AnchorGrid) -> Result<AnchorSet> {
    let shape = tape.shape(raw).to_vec();
    let n = shape[0];
    if shape[1] != 4 || shape[2] != grid.rows || shape[3] != grid.cols {
        return Err(Error::invalid_shape(
            "decode_anchors",
            format!("raw offsets {shape:?} do not match a {}x{} grid", grid.rows, grid.cols),
        ));
    }
    let (gx, gy) = grid_maps(&grid, n);
    let gx = tape.input(gx);
    let gy = tape.input(gy);
    let limit = grid.center_limit();

    let dx = tape.slice_channels(raw, 0, 1)?;
    let dy = tape.slice_channels(raw, 1, 1)?;
    let dw = tape.slice_channels(raw, 2, 1)?;
    let dh = tape.slice_channels(raw, 3, 1)?;

    let center = |tape: &mut Tape, g: Var, d: Var| -> Result<Var> {
        let shift = tape.affine(d, grid.stride, 0.0)?;
        let c = tape.add(g, shift)?;
        tape.clamp(c, 0.0, limit)
    };
    let cx = center(tape, gx, dx)?;
    let cy = center(tape, gy, dy)?;

    let side = |tape: &mut Tape, d: Var| -> Result<Var> {
        let d = tape.clamp(d, -MAX_LOG_SCALE, MAX_LOG_SCALE)?;
        let e = tape.exp(d)?;
        let s = tape.affine(e, grid.base, 0.0)?;
        tape.clamp(s, MIN_ANCHOR_SIDE, grid.search_size)
    };
    let w = side(tape, dw)?;
    let h = side(tape, dh)?;

    let xy = tape.concat_channels(cx, cy)?;
    let xyw = tape.concat_channels(xy, w)?;
    let boxes = tape.concat_channels(xyw, h)?;
    Ok(AnchorSet { boxes, grid })
}

/// Cell-center x and y maps, each `[n,1,rows,cols]`.
pub fn grid_maps(grid: &AnchorGrid, n: usize) -> (Tensor, Tensor) {
    let mut xs = Vec::with_capacity(n * grid.len());
    let mut ys = Vec::with_capacity(n * grid.len());
    for _ in 0..n {
        for i in 0..grid.rows {
            for j in 0..grid.cols {
                let (x, y) = grid.cell_center(i, j);
                xs.push(x);
                ys.push(y);
            }
        }
    }
    let shape = [n, 1, grid.rows, grid.cols];
    (
        Tensor::from_parts(shape.to_vec(), xs),
        Tensor::from_parts(shape.to_vec(), ys),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> AnchorGrid {
        AnchorGrid::new(21, 21, 8.0, 287.0, 64.0)
    }

    #[test]
    fn grid_is_centered() {
        let g = grid();
        assert_eq!(g.cell_center(10, 10), (143.5, 143.5));
        assert_eq!(g.offset_x(), 63.5);
    }

    #[test]
    fn zero_raw_decodes_to_cell_centers() {
        let g = grid();
        let mut tape = Tape::new();
        let raw = tape.input(Tensor::zeros(&[1, 4, 21, 21]));
        let set = decode_anchors(&mut tape, raw, g).unwrap();
        for (k, b) in set.boxes_for(&tape, 0).iter().enumerate() {
            let (x, y) = g.cell_center(k / 21, k % 21);
            assert_eq!((b.cx, b.cy, b.w, b.h), (x, y, 64.0, 64.0));
        }
    }

    #[test]
    fn log_two_doubles_width() {
        let b = grid().decode(3, 4, [0.0, 0.0, 2f64.ln(), 0.0]);
        assert!((b.w - 128.0).abs() < 1e-12);
        assert_eq!(b.h, 64.0);
    }

    #[test]
    fn extreme_raw_values_stay_valid() {
        let g = grid();
        for v in [-50.0, 50.0] {
            let mut tape = Tape::new();
            let raw = tape.input(Tensor::full(&[1, 4, 21, 21], v));
            let set = decode_anchors(&mut tape, raw, g).unwrap();
            for b in set.boxes_for(&tape, 0) {
                assert!(b.w > 0.0 && b.h > 0.0);
                assert!((0.0..287.0).contains(&b.cx) && (0.0..287.0).contains(&b.cy));
            }
        }
    }

    #[test]
    fn rejects_wrong_raw_shape() {
        let mut tape = Tape::new();
        let raw = tape.input(Tensor::zeros(&[1, 3, 21, 21]));
        assert!(decode_anchors(&mut tape, raw, grid()).is_err());
    }
}
