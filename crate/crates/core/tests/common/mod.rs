#![allow(dead_code)]

pub mod oracle;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use siamtrack::aan::AanParams;
use siamtrack::apn::{AnchorGrid, ApnDf};
use siamtrack::bbox::{iou, BBox};
use siamtrack::config::{ApnConfig, LossConfig};
use siamtrack::heads::{assign_labels, total_loss, AnchorLabel, HeadOutputs};
use siamtrack::metrics::eval_ope;
use siamtrack::nn::{Conv, Ffn};
use siamtrack::{ParamStore, Tape, Tensor};

use oracle::{Label, Linear, Mlp, Xywh};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Largest elementwise difference relative to the reference's largest
/// magnitude.
pub fn tensor_rel_err(got: &Tensor, want: &Tensor) -> f64 {
    assert_eq!(got.shape(), want.shape(), "shape mismatch");
    let scale = want.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = got.data().iter().zip(want.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

pub fn scalar_rel_err(got: f64, want: f64) -> f64 {
    let diff = (got - want).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / got.abs().max(want.abs())
    }
}

/// Overwrite every parameter, gates included, with uniform noise so no
/// branch is trivially off.
pub fn randomize(store: &mut ParamStore, rng: &mut impl Rng) {
    for (_, p) in store.iter_mut() {
        for v in p.tensor.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
}

pub fn linear(store: &ParamStore, conv: &Conv) -> Linear {
    Linear::from_conv(store.tensor(conv.weight), store.tensor(conv.bias))
}

pub fn mlp(store: &ParamStore, ffn: &Ffn) -> Mlp {
    Mlp {
        fc1: linear(store, &ffn.fc1),
        fc2: linear(store, &ffn.fc2),
    }
}

pub fn gate_value(store: &ParamStore, id: siamtrack::ParamId) -> f64 {
    store.tensor(id).item()
}

#[derive(Clone, Debug)]
pub struct OracleReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

impl OracleReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn run(name: &'static str, cases: usize, seed: u64, mut case: impl FnMut(&mut ChaCha8Rng) -> f64) -> OracleReport {
    let mut r = rng(seed);
    let max_rel_err = (0..cases).map(|_| case(&mut r)).fold(0.0, f64::max);
    OracleReport {
        name,
        cases,
        max_rel_err,
    }
}

pub fn small_apn(c: usize, hidden: usize, rng: &mut impl Rng) -> (ParamStore, ApnDf) {
    let mut store = ParamStore::new();
    let cfg = ApnConfig {
        channels: c,
        ffn_hidden: hidden,
        head_channels: 4,
        anchor_base: 16.0,
    };
    let apn = ApnDf::new(&cfg, c, c, &mut store, rng).unwrap();
    randomize(&mut store, rng);
    (store, apn)
}

pub fn small_aan(c: usize, hidden: usize, rng: &mut impl Rng) -> (ParamStore, AanParams) {
    let mut store = ParamStore::new();
    let aan = AanParams::new(c, c, hidden, &mut store, rng).unwrap();
    randomize(&mut store, rng);
    (store, aan)
}

pub fn check_dwxcorr(cases: usize, seed: u64) -> OracleReport {
    run("dwxcorr", cases, seed, |r| {
        let (n, c) = (r.gen_range(1..3), r.gen_range(1..5));
        let (ht, wt) = (r.gen_range(1..5), r.gen_range(1..5));
        let (hs, ws) = (ht + r.gen_range(0..6), wt + r.gen_range(0..6));
        let x = random_tensor(&[n, c, hs, ws], r);
        let t = random_tensor(&[n, c, ht, wt], r);
        let mut tape = Tape::new();
        let (xv, tv) = (tape.input(x.clone()), tape.input(t.clone()));
        let y = tape.dwxcorr(xv, tv).unwrap();
        tensor_rel_err(tape.value(y), &oracle::dwxcorr(&x, &t))
    })
}

pub fn check_conv(cases: usize, seed: u64) -> OracleReport {
    run("conv2d", cases, seed, |r| {
        let (n, cin, cout) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let k = r.gen_range(1..4);
        let (stride, pad) = (r.gen_range(1..3), r.gen_range(0..2));
        let (h, w) = (k + r.gen_range(0..6), k + r.gen_range(0..6));
        let x = random_tensor(&[n, cin, h, w], r);
        let wt = random_tensor(&[cout, cin, k, k], r);
        let b = random_tensor(&[cout], r);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.input(x.clone()), tape.input(wt.clone()), tape.input(b.clone()));
        let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
        tensor_rel_err(tape.value(y), &oracle::conv2d(&x, &wt, &b, stride, pad))
    })
}

pub fn check_fuse(cases: usize, seed: u64) -> OracleReport {
    run("fuse", cases, seed, |r| {
        let (n, c, hidden) = (r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..4));
        let (h, w) = (r.gen_range(1..5), r.gen_range(1..5));
        let (store, apn) = small_apn(c, hidden, r);
        let r4 = random_tensor(&[n, c, h, w], r);
        let r5 = random_tensor(&[n, c, h, w], r);
        let mut tape = Tape::new();
        let (a, b) = (tape.input(r4.clone()), tape.input(r5.clone()));
        let y = apn.fuse(&mut tape, &store, a, b).unwrap();
        let want = oracle::fuse(
            &r4,
            &r5,
            &mlp(&store, &apn.ffn),
            &linear(&store, &apn.cat),
            gate_value(&store, apn.gamma1),
            gate_value(&store, apn.gamma2),
        );
        tensor_rel_err(tape.value(y), &want)
    })
}

pub fn check_spatial(cases: usize, seed: u64) -> OracleReport {
    run("spatial_attention", cases, seed, |r| {
        let (n, c) = (r.gen_range(1..3), r.gen_range(1..5));
        let (h, w) = (r.gen_range(1..5), r.gen_range(1..5));
        let (store, aan) = small_aan(c, 2, r);
        let x = random_tensor(&[n, c, h, w], r);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = aan.spatial_attention(&mut tape, &store, xv).unwrap();
        let want = oracle::spatial_attention(
            &x,
            &linear(&store, &aan.query),
            &linear(&store, &aan.key),
            &linear(&store, &aan.value),
            gate_value(&store, aan.gamma3),
        );
        tensor_rel_err(tape.value(y), &want)
    })
}

pub fn check_channel(cases: usize, seed: u64) -> OracleReport {
    run("channel_attention", cases, seed, |r| {
        let (n, c, hidden) = (r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..4));
        let (h, w) = (r.gen_range(1..5), r.gen_range(1..5));
        let (store, aan) = small_aan(c, hidden, r);
        let x = random_tensor(&[n, c, h, w], r);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = aan.channel_attention(&mut tape, &store, xv).unwrap();
        let want = oracle::channel_attention(&x, &mlp(&store, &aan.channel_ffn), gate_value(&store, aan.gamma4));
        tensor_rel_err(tape.value(y), &want)
    })
}

pub fn check_cross(cases: usize, seed: u64) -> OracleReport {
    run("cross_aan", cases, seed, |r| {
        let (n, c, hidden) = (r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..4));
        let (h, w) = (r.gen_range(1..5), r.gen_range(1..5));
        let (store, aan) = small_aan(c, hidden, r);
        let rc = random_tensor(&[n, c, h, w], r);
        let ra = random_tensor(&[n, c, h, w], r);
        let mut tape = Tape::new();
        let (a, b) = (tape.input(rc.clone()), tape.input(ra.clone()));
        let y = aan.cross_aan(&mut tape, &store, a, b).unwrap();
        let want = oracle::cross_aan(
            &rc,
            &ra,
            &mlp(&store, &aan.cross_ffn),
            &linear(&store, &aan.cross_cat),
            gate_value(&store, aan.gamma5),
            gate_value(&store, aan.gamma6),
        );
        tensor_rel_err(tape.value(y), &want)
    })
}

pub fn random_box(r: &mut impl Rng, extent: f64) -> BBox {
    let w = r.gen_range(1.0..extent / 2.0);
    let h = r.gen_range(1.0..extent / 2.0);
    BBox::new(r.gen_range(0.0..extent), r.gen_range(0.0..extent), w, h)
}

/// A box near `b`: shifted and rescaled by up to `jitter` of its size.
pub fn nearby_box(b: &BBox, jitter: f64, r: &mut impl Rng) -> BBox {
    BBox::new(
        b.cx + r.gen_range(-jitter..jitter) * b.w,
        b.cy + r.gen_range(-jitter..jitter) * b.h,
        b.w * (1.0 + r.gen_range(-jitter..jitter)),
        b.h * (1.0 + r.gen_range(-jitter..jitter)),
    )
}

pub fn check_iou(cases: usize, seed: u64) -> OracleReport {
    run("iou", cases, seed, |r| {
        let a = random_box(r, 100.0);
        let b = match r.gen_range(0..3) {
            0 => random_box(r, 100.0),
            1 => nearby_box(&a, 0.3, r),
            _ => a,
        };
        scalar_rel_err(iou(&a, &b), oracle::iou(a.to_xywh(), b.to_xywh()))
    })
}

pub struct LabelCase {
    pub grid: AnchorGrid,
    pub anchors: Vec<BBox>,
    pub gt: BBox,
    pub loss: LossConfig,
}

pub fn random_label_case(r: &mut impl Rng) -> LabelCase {
    let (rows, cols) = (r.gen_range(1..6), r.gen_range(1..6));
    let stride = 8.0;
    let search = (rows.max(cols) as f64 + 2.0) * stride;
    let grid = AnchorGrid::new(rows, cols, stride, search, 16.0);
    let gt = if r.gen_bool(0.05) {
        BBox::new(search / 2.0, search / 2.0, 0.0, 10.0)
    } else {
        BBox::new(
            search / 2.0 + r.gen_range(-8.0..8.0),
            search / 2.0 + r.gen_range(-8.0..8.0),
            r.gen_range(6.0..search),
            r.gen_range(6.0..search),
        )
    };
    let anchors = (0..grid.len())
        .map(|_| {
            if r.gen_bool(0.4) && !gt.is_degenerate() {
                nearby_box(&gt, 0.3, r)
            } else {
                random_box(r, search)
            }
        })
        .collect();
    LabelCase {
        grid,
        anchors,
        gt,
        loss: LossConfig::default(),
    }
}

pub fn oracle_cells(case: &LabelCase) -> Vec<oracle::Cell> {
    let xywh: Vec<Xywh> = case.anchors.iter().map(BBox::to_xywh).collect();
    oracle::assign(
        &xywh,
        case.grid.rows,
        case.grid.cols,
        case.grid.stride,
        case.grid.search_size,
        case.gt.to_xywh(),
        case.loss.t_pos,
        case.loss.t_neg,
    )
}

fn same_label(a: AnchorLabel, b: Label) -> bool {
    matches!(
        (a, b),
        (AnchorLabel::Positive, Label::Pos) | (AnchorLabel::Negative, Label::Neg) | (AnchorLabel::Ignore, Label::Ignore)
    )
}

/// Label mismatches count as infinite error; otherwise the worst
/// centerness error.
pub fn check_assign(cases: usize, seed: u64) -> OracleReport {
    run("assign_labels", cases, seed, |r| {
        let case = random_label_case(r);
        let got = assign_labels(&case.anchors, &case.grid, &case.gt, &case.loss);
        let want = oracle_cells(&case);
        let mut err: f64 = 0.0;
        for (k, cell) in want.iter().enumerate() {
            if !same_label(got.cls1[k], cell.label) || got.cls2[k] != cell.inside {
                return f64::INFINITY;
            }
            if got.cls1[k] == AnchorLabel::Positive && got.reg_target[k] != Some(case.gt) {
                return f64::INFINITY;
            }
            err = err.max(scalar_rel_err(got.cls3[k], cell.centerness));
        }
        err
    })
}

pub fn check_eval(cases: usize, seed: u64) -> OracleReport {
    run("eval_ope", cases, seed, |r| {
        let frames = r.gen_range(1..60);
        let gt: Vec<BBox> = (0..frames).map(|_| random_box(r, 200.0)).collect();
        let pred: Vec<BBox> = gt
            .iter()
            .map(|g| match r.gen_range(0..4) {
                0 => *g,
                1 => random_box(r, 200.0),
                _ => nearby_box(g, 0.5, r),
            })
            .collect();
        let got = eval_ope(&pred, &gt).unwrap();
        let p: Vec<Xywh> = pred.iter().map(BBox::to_xywh).collect();
        let g: Vec<Xywh> = gt.iter().map(BBox::to_xywh).collect();
        let want = oracle::eval_ope(&p, &g);
        let curve = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| scalar_rel_err(*x, *y)).fold(0.0, f64::max);
        curve(&got.precision_curve, &want.precision)
            .max(curve(&got.success_curve, &want.success))
            .max(scalar_rel_err(got.success_auc, want.auc))
            .max(scalar_rel_err(got.precision_at_20, want.precision[20]))
    })
}

pub fn check_total_loss(cases: usize, seed: u64) -> OracleReport {
    run("total_loss", cases, seed, |r| {
        let n = r.gen_range(1..3);
        let (rows, cols) = (r.gen_range(2..5), r.gen_range(2..5));
        let stride = 8.0;
        let search = (rows.max(cols) as f64 + 2.0) * stride;
        let grid = AnchorGrid::new(rows, cols, stride, search, 16.0);
        let loss = LossConfig {
            w1: r.gen_range(0.5..2.0),
            w2: r.gen_range(0.5..2.0),
            w3: r.gen_range(0.5..2.0),
            w_anchor: if r.gen_bool(0.2) { 0.0 } else { r.gen_range(0.5..2.0) },
            alpha: r.gen_range(1.05..2.0),
            ..LossConfig::default()
        };
        let mut gts = Vec::new();
        let mut anchor_data = vec![0.0; n * 4 * rows * cols];
        let mut labels = Vec::new();
        let mut cells = Vec::new();
        for b in 0..n {
            let gt = BBox::new(
                search / 2.0 + r.gen_range(-6.0..6.0),
                search / 2.0 + r.gen_range(-6.0..6.0),
                r.gen_range(8.0..search * 0.8),
                r.gen_range(8.0..search * 0.8),
            );
            let anchors: Vec<BBox> = (0..grid.len())
                .map(|_| if r.gen_bool(0.5) { nearby_box(&gt, 0.2, r) } else { random_box(r, search) })
                .collect();
            for (k, a) in anchors.iter().enumerate() {
                for (c, v) in [a.cx, a.cy, a.w, a.h].into_iter().enumerate() {
                    anchor_data[(b * 4 + c) * rows * cols + k] = v;
                }
            }
            labels.push(assign_labels(&anchors, &grid, &gt, &loss));
            cells.push(oracle_cells(&LabelCase {
                grid,
                anchors,
                gt,
                loss,
            }));
            gts.push(gt);
        }
        let anchors = Tensor::new(&[n, 4, rows, cols], anchor_data).unwrap();
        let cls1 = random_tensor(&[n, 2, rows, cols], r);
        let cls2 = random_tensor(&[n, 2, rows, cols], r);
        let cls3 = random_tensor(&[n, 1, rows, cols], r);
        let reg = Tensor::new(
            &[n, 4, rows, cols],
            random_tensor(&[n, 4, rows, cols], r).data().iter().map(|v| v * 0.3).collect(),
        )
        .unwrap();

        let mut tape = Tape::new();
        let heads = HeadOutputs {
            cls1: tape.input(cls1.clone()),
            cls2: tape.input(cls2.clone()),
            cls3: tape.input(cls3.clone()),
            reg: tape.input(reg.clone()),
        };
        let av = tape.input(anchors.clone());
        let terms = total_loss(&mut tape, &heads, av, &labels, &gts, &loss).unwrap();
        let got = tape.value(terms.total).item();
        let g: Vec<Xywh> = gts.iter().map(BBox::to_xywh).collect();
        let lw = oracle::LossWeights {
            w1: loss.w1,
            w2: loss.w2,
            w3: loss.w3,
            w_anchor: loss.w_anchor,
            alpha: loss.alpha,
        };
        let want = oracle::total_loss(&cls1, &cls2, &cls3, &reg, &anchors, &cells, &g, &lw);
        scalar_rel_err(got, want)
    })
}

/// Every oracle family with `cases` random instances each.
pub fn all_oracles(cases: usize, seed: u64) -> Vec<OracleReport> {
    vec![
        check_dwxcorr(cases, seed),
        check_conv(cases, seed + 1),
        check_iou(cases, seed + 2),
        check_assign(cases, seed + 3),
        check_fuse(cases, seed + 4),
        check_spatial(cases, seed + 5),
        check_channel(cases, seed + 6),
        check_cross(cases, seed + 7),
        check_eval(cases, seed + 8),
        check_total_loss(cases, seed + 9),
    ]
}
