mod common;

use rand::Rng;

use common::*;
use siamtrack::apn::{boxes_from_tensor, decode_anchors, AnchorGrid};
use siamtrack::bbox::{iou, BBox};
use siamtrack::heads::{refine_box, total_loss, HeadOutputs};
use siamtrack::config::LossConfig;
use siamtrack::heads::assign_labels;
use siamtrack::Tape;

const CASES: usize = 100;
const TOL: f64 = 1e-10;

fn assert_report(r: OracleReport, tol: f64) {
    assert!(r.cases >= CASES);
    assert!(r.passed(tol), "{}: max rel err {:e} over {} cases", r.name, r.max_rel_err, r.cases);
}

#[test]
fn dwxcorr_matches_triple_loop() {
    assert_report(check_dwxcorr(CASES, 11), 1e-12);
}

#[test]
fn conv2d_matches_direct_loop() {
    assert_report(check_conv(CASES, 12), TOL);
}

#[test]
fn iou_matches_interval_formula() {
    assert_report(check_iou(CASES, 13), TOL);
}

#[test]
fn assign_labels_matches_per_cell_oracle() {
    assert_report(check_assign(CASES, 14), TOL);
}

#[test]
fn fuse_matches_straight_line() {
    assert_report(check_fuse(CASES, 15), TOL);
}

#[test]
fn spatial_attention_matches_straight_line() {
    assert_report(check_spatial(CASES, 16), TOL);
}

#[test]
fn channel_attention_matches_straight_line() {
    assert_report(check_channel(CASES, 17), TOL);
}

#[test]
fn cross_aan_matches_straight_line() {
    assert_report(check_cross(CASES, 18), TOL);
}

#[test]
fn eval_ope_matches_frame_loop() {
    assert_report(check_eval(CASES, 19), 1e-12);
}

#[test]
fn total_loss_matches_scalar_sum() {
    assert_report(check_total_loss(CASES, 20), TOL);
}

/// Integer-aligned boxes: count covered unit pixels.
#[test]
fn iou_matches_pixel_count() {
    let mut r = rng(21);
    for _ in 0..CASES {
        let mut b = || {
            let (x, y) = (r.gen_range(0..20), r.gen_range(0..20));
            (x, y, r.gen_range(1..12), r.gen_range(1..12))
        };
        let (a, c) = (b(), b());
        let covers = |bx: (i32, i32, i32, i32), px: i32, py: i32| px >= bx.0 && px < bx.0 + bx.2 && py >= bx.1 && py < bx.1 + bx.3;
        let (mut inter, mut union) = (0, 0);
        for py in 0..40 {
            for px in 0..40 {
                let (ia, ic) = (covers(a, px, py), covers(c, px, py));
                inter += (ia && ic) as i32;
                union += (ia || ic) as i32;
            }
        }
        let to_box = |t: (i32, i32, i32, i32)| BBox::from_xywh(t.0 as f64, t.1 as f64, t.2 as f64, t.3 as f64);
        let got = iou(&to_box(a), &to_box(c));
        assert!((got - inter as f64 / union as f64).abs() < 1e-12, "{a:?} {c:?}");
    }
}

#[test]
fn decoded_anchors_match_per_cell_decode() {
    let mut r = rng(22);
    for _ in 0..CASES {
        let (n, rows, cols) = (r.gen_range(1..3), r.gen_range(1..6), r.gen_range(1..6));
        let search = r.gen_range(60.0..300.0);
        let grid = AnchorGrid::new(rows, cols, 8.0, search, 64.0);
        let raw = random_tensor(&[n, 4, rows, cols], &mut r);
        let scaled: Vec<f64> = raw.data().iter().map(|v| v * 20.0).collect();
        let raw = siamtrack::Tensor::new(raw.shape(), scaled).unwrap();
        let mut tape = Tape::new();
        let rv = tape.input(raw.clone());
        let set = decode_anchors(&mut tape, rv, grid).unwrap();
        for b in 0..n {
            let got = boxes_from_tensor(tape.value(set.boxes), b);
            for i in 0..rows {
                for j in 0..cols {
                    let d = [0, 1, 2, 3].map(|c| raw.at4(b, c, i, j));
                    let (gx, gy) = oracle::cell_center(i, j, rows, cols, 8.0, search);
                    let side = |v: f64| (64.0 * v.clamp(-10.0, 10.0).exp()).clamp(1.0, search);
                    let want = BBox::new(
                        (gx + d[0] * 8.0).clamp(0.0, search - 1.0),
                        (gy + d[1] * 8.0).clamp(0.0, search - 1.0),
                        side(d[2]),
                        side(d[3]),
                    );
                    let g = got[i * cols + j];
                    for (x, y) in [(g.cx, want.cx), (g.cy, want.cy), (g.w, want.w), (g.h, want.h)] {
                        assert!(scalar_rel_err(x, y) < 1e-12, "{g:?} vs {want:?}");
                    }
                }
            }
        }
    }
}

#[test]
fn refine_box_matches_formula() {
    let mut r = rng(23);
    for _ in 0..CASES {
        let a = random_box(&mut r, 100.0);
        let d = [0, 1, 2, 3].map(|_| r.gen_range(-2.0..2.0));
        let got = refine_box(&a, d);
        assert!(scalar_rel_err(got.cx, a.cx + d[0] * a.w) < 1e-12);
        assert!(scalar_rel_err(got.cy, a.cy + d[1] * a.h) < 1e-12);
        assert!(scalar_rel_err(got.w, a.w * d[2].exp()) < 1e-12);
        assert!(scalar_rel_err(got.h, a.h * d[3].exp()) < 1e-12);
    }
}

/// Linearity in the branch weights: doubling w2 adds exactly the cls2 term.
#[test]
fn doubling_w2_adds_cls2_term() {
    let mut r = rng(24);
    let grid = AnchorGrid::new(3, 3, 8.0, 40.0, 16.0);
    let gt = BBox::new(20.0, 20.0, 14.0, 12.0);
    let anchors: Vec<BBox> = (0..9).map(|_| nearby_box(&gt, 0.3, &mut r)).collect();
    let mut anchor_data = vec![0.0; 36];
    for (k, a) in anchors.iter().enumerate() {
        for (c, v) in [a.cx, a.cy, a.w, a.h].into_iter().enumerate() {
            anchor_data[c * 9 + k] = v;
        }
    }
    let maps = [2, 2, 1, 4].map(|c| random_tensor(&[1, c, 3, 3], &mut r));
    let eval = |loss: &LossConfig| {
        let labels = vec![assign_labels(&anchors, &grid, &gt, loss)];
        let mut tape = Tape::new();
        let heads = HeadOutputs {
            cls1: tape.input(maps[0].clone()),
            cls2: tape.input(maps[1].clone()),
            cls3: tape.input(maps[2].clone()),
            reg: tape.input(maps[3].clone()),
        };
        let a = tape.input(siamtrack::Tensor::new(&[1, 4, 3, 3], anchor_data.clone()).unwrap());
        let t = total_loss(&mut tape, &heads, a, &labels, &[gt], loss).unwrap();
        t.values(&tape)
    };
    let base = LossConfig::default();
    let doubled = LossConfig { w2: 2.0 * base.w2, ..base };
    let (a, b) = (eval(&base), eval(&doubled));
    assert!((b.total - a.total - base.w2 * a.cls2).abs() < 1e-12);
    assert_eq!(a.cls2, b.cls2);
}
