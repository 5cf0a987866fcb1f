#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

//! Straight-line reference implementations. Everything here is written
//! with explicit index loops over `[N,C,H,W]` row-major buffers and shares
//! no code with the library beyond the `Tensor` container.

use siamtrack::Tensor;

fn at(t: &Tensor, n: usize, c: usize, h: usize, w: usize) -> f64 {
    let s = t.shape();
    t.data()[((n * s[1] + c) * s[2] + h) * s[3] + w]
}

fn tensor(shape: [usize; 4], data: Vec<f64>) -> Tensor {
    Tensor::new(&shape, data).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * cout * ho * wo);
    for b in 0..n {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = bias.data()[o];
                    for c in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                s += at(x, b, c, y as usize, xx as usize) * at(weight, o, c, u, v);
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    tensor([n, cout, ho, wo], out)
}

/// Per-channel valid correlation, summed row-major over the template.
pub fn dwxcorr(search: &Tensor, template: &Tensor) -> Tensor {
    let (n, c, hs, ws) = (search.shape()[0], search.shape()[1], search.shape()[2], search.shape()[3]);
    let (ht, wt) = (template.shape()[2], template.shape()[3]);
    let (ho, wo) = (hs - ht + 1, ws - wt + 1);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for u in 0..ht {
                        for v in 0..wt {
                            s += at(search, b, ch, i + u, j + v) * at(template, b, ch, u, v);
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    tensor([n, c, ho, wo], out)
}

/// Weights of a 1x1 conv: `w[o][i]`, `b[o]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn from_conv(weight: &Tensor, bias: &Tensor) -> Self {
        let (o, i) = (weight.shape()[0], weight.shape()[1]);
        Self {
            w: (0..o).map(|r| weight.data()[r * i..(r + 1) * i].to_vec()).collect(),
            b: bias.data().to_vec(),
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.b)
            .map(|(row, b)| b + row.iter().zip(v).map(|(a, x)| a * x).sum::<f64>())
            .collect()
    }
}

/// Two-layer bottleneck with ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self.fc1.apply(v).into_iter().map(|x| x.max(0.0)).collect();
        self.fc2.apply(&h)
    }
}

/// Apply a 1x1 conv at every pixel.
pub fn pointwise(x: &Tensor, f: &Linear) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = f.b.len();
    let mut out = vec![0.0; n * cout * h * w];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let v: Vec<f64> = (0..c).map(|ch| at(x, b, ch, i, j)).collect();
                for (o, y) in f.apply(&v).into_iter().enumerate() {
                    out[((b * cout + o) * h + i) * w + j] = y;
                }
            }
        }
    }
    tensor([n, cout, h, w], out)
}

fn channel_means(x: &Tensor, b: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    (0..c)
        .map(|ch| {
            let mut s = 0.0;
            for i in 0..h {
                for j in 0..w {
                    s += at(x, b, ch, i, j);
                }
            }
            s / (h * w) as f64
        })
        .collect()
}

fn channel_maxes(x: &Tensor, b: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    (0..c)
        .map(|ch| {
            let mut m = f64::NEG_INFINITY;
            for i in 0..h {
                for j in 0..w {
                    m = m.max(at(x, b, ch, i, j));
                }
            }
            m
        })
        .collect()
}

fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let cb = b.shape()[1];
    let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
    for k in 0..n {
        let plane = h * w;
        out.extend_from_slice(&a.data()[k * ca * plane..(k + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[k * cb * plane..(k + 1) * cb * plane]);
    }
    tensor([n, ca + cb, h, w], out)
}

/// `base + gate_w * weights[c] * base + gate_m * mixed`, elementwise.
fn gated_sum(base: &Tensor, weights: &[Vec<f64>], gate_w: f64, mixed: &Tensor, gate_m: f64) -> Tensor {
    let (n, c, h, w) = (base.shape()[0], base.shape()[1], base.shape()[2], base.shape()[3]);
    let mut out = Vec::with_capacity(base.len());
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let r = at(base, b, ch, i, j);
                    out.push(r + gate_w * weights[b][ch] * r + gate_m * at(mixed, b, ch, i, j));
                }
            }
        }
    }
    tensor([n, c, h, w], out)
}

/// `R_A = R5 + g1 * FFN(GAP(R4)) (.) R5 + g2 * F(Cat(R4, R5))`.
pub fn fuse(r4: &Tensor, r5: &Tensor, ffn: &Mlp, cat: &Linear, g1: f64, g2: f64) -> Tensor {
    let n = r4.shape()[0];
    let weights: Vec<Vec<f64>> = (0..n).map(|b| ffn.apply(&channel_means(r4, b))).collect();
    let mixed = pointwise(&concat(r4, r5), cat);
    gated_sum(r5, &weights, g1, &mixed, g2)
}

/// Attention rows `a[j][i]` over key positions `i` for query `j`.
pub fn attention_rows(r: &Tensor, b: usize, q: &Linear, k: &Linear) -> Vec<Vec<f64>> {
    let (c, h, w) = (r.shape()[1], r.shape()[2], r.shape()[3]);
    let hw = h * w;
    let pix = |p: usize| -> Vec<f64> { (0..c).map(|ch| at(r, b, ch, p / w, p % w)).collect() };
    let qs: Vec<Vec<f64>> = (0..hw).map(|p| q.apply(&pix(p))).collect();
    let ks: Vec<Vec<f64>> = (0..hw).map(|p| k.apply(&pix(p))).collect();
    (0..hw)
        .map(|j| {
            let e: Vec<f64> = (0..hw).map(|i| qs[j].iter().zip(&ks[i]).map(|(a, b)| a * b).sum()).collect();
            let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = e.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = ex.iter().sum();
            ex.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// `R^s = g3 * (V x A^T) + R'5`.
pub fn spatial_attention(r: &Tensor, q: &Linear, k: &Linear, v: &Linear, g3: f64) -> Tensor {
    let (n, c, h, w) = (r.shape()[0], r.shape()[1], r.shape()[2], r.shape()[3]);
    let hw = h * w;
    let mut out = Vec::with_capacity(r.len());
    for b in 0..n {
        let a = attention_rows(r, b, q, k);
        let vals: Vec<Vec<f64>> = (0..hw)
            .map(|p| v.apply(&(0..c).map(|ch| at(r, b, ch, p / w, p % w)).collect::<Vec<_>>()))
            .collect();
        for ch in 0..c {
            for j in 0..hw {
                let agg: f64 = (0..hw).map(|i| vals[i][ch] * a[j][i]).sum();
                out.push(g3 * agg + at(r, b, ch, j / w, j % w));
            }
        }
    }
    tensor([n, c, h, w], out)
}

/// `R_c = R^s + g4 * sigmoid(FFN(GAP) + FFN(GMP)) (.) R^s`.
pub fn channel_attention(rs: &Tensor, ffn: &Mlp, g4: f64) -> Tensor {
    let n = rs.shape()[0];
    let weights: Vec<Vec<f64>> = (0..n)
        .map(|b| {
            let a = ffn.apply(&channel_means(rs, b));
            let m = ffn.apply(&channel_maxes(rs, b));
            a.iter().zip(&m).map(|(x, y)| sigmoid(x + y)).collect()
        })
        .collect();
    let zero = Tensor::zeros(rs.shape());
    gated_sum(rs, &weights, g4, &zero, 0.0)
}

/// `R = R_c + g5 * FFN(GAP(R_A)) (.) R_c + g6 * F(Cat(R_A, R_c))`.
pub fn cross_aan(rc: &Tensor, ra: &Tensor, ffn: &Mlp, cat: &Linear, g5: f64, g6: f64) -> Tensor {
    let n = rc.shape()[0];
    let weights: Vec<Vec<f64>> = (0..n).map(|b| ffn.apply(&channel_means(ra, b))).collect();
    let mixed = pointwise(&concat(ra, rc), cat);
    gated_sum(rc, &weights, g5, &mixed, g6)
}

/// Box as top-left corner and size.
pub type Xywh = [f64; 4];

pub fn iou(a: Xywh, b: Xywh) -> f64 {
    let left = if a[0] > b[0] { a[0] } else { b[0] };
    let right = if a[0] + a[2] < b[0] + b[2] { a[0] + a[2] } else { b[0] + b[2] };
    let top = if a[1] > b[1] { a[1] } else { b[1] };
    let bottom = if a[1] + a[3] < b[1] + b[3] { a[1] + a[3] } else { b[1] + b[3] };
    if right <= left || bottom <= top {
        return 0.0;
    }
    let inter = (right - left) * (bottom - top);
    let area = |r: Xywh| ((r[0] + r[2]) - r[0]) * ((r[1] + r[3]) - r[1]);
    inter / (area(a) + area(b) - inter)
}

pub fn center_error(a: Xywh, b: Xywh) -> f64 {
    let dx = (a[0] + a[2] / 2.0) - (b[0] + b[2] / 2.0);
    let dy = (a[1] + a[3] / 2.0) - (b[1] + b[3] / 2.0);
    (dx * dx + dy * dy).sqrt()
}

pub fn l_ious(iou: f64, alpha: f64) -> f64 {
    let x = iou.clamp(1e-6, 1.0);
    -(1.0 - x) * (alpha - x) * x.ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Pos,
    Neg,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub label: Label,
    pub inside: bool,
    pub centerness: f64,
}

/// Cell centers sit on a stride grid centered on the search image.
pub fn cell_center(row: usize, col: usize, rows: usize, cols: usize, stride: f64, search: f64) -> (f64, f64) {
    (
        search / 2.0 + (col as f64 - (cols as f64 - 1.0) / 2.0) * stride,
        search / 2.0 + (row as f64 - (rows as f64 - 1.0) / 2.0) * stride,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn assign(
    anchors: &[Xywh],
    rows: usize,
    cols: usize,
    stride: f64,
    search: f64,
    gt: Xywh,
    t_pos: f64,
    t_neg: f64,
) -> Vec<Cell> {
    let degenerate = gt[2] <= 0.0 || gt[3] <= 0.0;
    (0..rows * cols)
        .map(|k| {
            if degenerate {
                return Cell {
                    label: Label::Neg,
                    inside: false,
                    centerness: 0.0,
                };
            }
            let (px, py) = cell_center(k / cols, k % cols, rows, cols, stride, search);
            let o = iou(anchors[k], gt);
            let label = if o >= t_pos {
                Label::Pos
            } else if o <= t_neg {
                Label::Neg
            } else {
                Label::Ignore
            };
            let (l, r) = (px - gt[0], gt[0] + gt[2] - px);
            let (t, b) = (py - gt[1], gt[1] + gt[3] - py);
            let inside = l >= 0.0 && r >= 0.0 && t >= 0.0 && b >= 0.0;
            let centerness = if inside {
                let lr = if l.max(r) > 0.0 { l.min(r) / l.max(r) } else { 0.0 };
                let tb = if t.max(b) > 0.0 { t.min(b) / t.max(b) } else { 0.0 };
                (lr * tb).sqrt()
            } else {
                0.0
            };
            Cell {
                label,
                inside,
                centerness,
            }
        })
        .collect()
}

pub struct Ope {
    pub precision: Vec<f64>,
    pub success: Vec<f64>,
    pub auc: f64,
}

pub fn eval_ope(pred: &[Xywh], gt: &[Xywh]) -> Ope {
    let n = pred.len() as f64;
    let mut precision = vec![0.0; 51];
    let mut success = vec![0.0; 21];
    for f in 0..pred.len() {
        let e = center_error(pred[f], gt[f]);
        let o = iou(pred[f], gt[f]);
        for (t, p) in precision.iter_mut().enumerate() {
            if e < t as f64 {
                *p += 1.0;
            }
        }
        for (k, s) in success.iter_mut().enumerate() {
            if o >= k as f64 / 20.0 {
                *s += 1.0;
            }
        }
    }
    precision.iter_mut().for_each(|p| *p /= n);
    success.iter_mut().for_each(|s| *s /= n);
    let auc = success.iter().sum::<f64>() / 21.0;
    Ope {
        precision,
        success,
        auc,
    }
}

/// `-log softmax(l)[class]` for two logits.
fn ce2(l0: f64, l1: f64, class: usize) -> f64 {
    let m = l0.max(l1);
    let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
    lse - if class == 1 { l1 } else { l0 }
}

fn bce(x: f64, t: f64) -> f64 {
    let p = sigmoid(x);
    let mut v = 0.0;
    if t > 0.0 {
        v -= t * p.ln();
    }
    if t < 1.0 {
        v -= (1.0 - t) * (1.0 - p).ln();
    }
    v
}

fn entropy(t: f64) -> f64 {
    let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    h(t) + h(1.0 - t)
}

fn center_box(cx: f64, cy: f64, w: f64, h: f64) -> Xywh {
    [cx - w / 2.0, cy - h / 2.0, w, h]
}

pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w_anchor: f64,
    pub alpha: f64,
}

/// Head maps and center-size anchors `[N,4,h,w]`; one ground truth and
/// one assignment per sample.
pub fn total_loss(
    cls1: &Tensor,
    cls2: &Tensor,
    cls3: &Tensor,
    reg: &Tensor,
    anchors: &Tensor,
    cells: &[Vec<Cell>],
    gts: &[Xywh],
    lw: &LossWeights,
) -> f64 {
    let (n, h, w) = (cls1.shape()[0], cls1.shape()[2], cls1.shape()[3]);
    let (mut ce1, mut counted) = (0.0, 0usize);
    let (mut ce2_sum, mut kl) = (0.0, 0.0);
    let (mut reg_sum, mut pos) = (0.0, 0usize);
    let (mut anc_sum, mut inside) = (0.0, 0usize);
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let cell = &cells[b][i * w + j];
                let (l0, l1) = (at(cls1, b, 0, i, j), at(cls1, b, 1, i, j));
                match cell.label {
                    Label::Pos => {
                        ce1 += ce2(l0, l1, 1);
                        counted += 1;
                    }
                    Label::Neg => {
                        ce1 += ce2(l0, l1, 0);
                        counted += 1;
                    }
                    Label::Ignore => {}
                }
                ce2_sum += ce2(at(cls2, b, 0, i, j), at(cls2, b, 1, i, j), cell.inside as usize);
                kl += bce(at(cls3, b, 0, i, j), cell.centerness) - entropy(cell.centerness);

                let a = [0, 1, 2, 3].map(|c| at(anchors, b, c, i, j));
                if cell.label == Label::Pos {
                    let d = [0, 1, 2, 3].map(|c| at(reg, b, c, i, j));
                    let refined = center_box(
                        a[0] + d[0] * a[2],
                        a[1] + d[1] * a[3],
                        a[2] * d[2].clamp(-10.0, 10.0).exp(),
                        a[3] * d[3].clamp(-10.0, 10.0).exp(),
                    );
                    reg_sum += l_ious(iou(refined, gts[b]), lw.alpha);
                    pos += 1;
                }
                if cell.inside {
                    anc_sum += l_ious(iou(center_box(a[0], a[1], a[2], a[3]), gts[b]), lw.alpha);
                    inside += 1;
                }
            }
        }
    }
    let all = (n * h * w) as f64;
    let cls1_term = ce1 / counted.max(1) as f64;
    let reg_box = if pos == 0 { 0.0 } else { reg_sum / pos as f64 };
    let anchor = if inside == 0 || lw.w_anchor == 0.0 { 0.0 } else { anc_sum / inside as f64 };
    lw.w1 * cls1_term + lw.w2 * ce2_sum / all + lw.w3 * kl / all + reg_box + lw.w_anchor * anchor
}
