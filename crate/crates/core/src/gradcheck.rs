//! Central finite-difference checks of tape gradients.
//!
//! The checker only ever evaluates forward passes to build its numeric
//! estimate, so it stays independent of every backward rule it audits.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aan::AanParams;
use crate::apn::{AnchorGrid, ApnDf};
use crate::autodiff::{Tape, Var};
use crate::bbox::BBox;
use crate::config::{ApnConfig, LossConfig};
use crate::heads::{assign_labels, total_loss, HeadOutputs};
use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Step for central differences.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so exact zeros do not divide by zero.
pub const REL_FLOOR: f64 = 1e-3;
/// Coordinates probed per tensor when it is larger than this.
pub const MAX_PROBES: usize = 48;

pub type LossFn<'a> = dyn Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var> + 'a;

/// A scalar function of some input tensors and a parameter store.
pub struct Problem<'a> {
    pub inputs: Vec<Tensor>,
    pub store: ParamStore,
    pub loss: Box<LossFn<'a>>,
}

impl<'a> Problem<'a> {
    pub fn new(
        inputs: Vec<Tensor>,
        store: ParamStore,
        loss: impl Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var> + 'a,
    ) -> Self {
        Self {
            inputs,
            store,
            loss: Box::new(loss),
        }
    }

    fn eval(&self, inputs: &[Tensor], store: &ParamStore) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let l = (self.loss)(&mut tape, store, &vars)?;
        Ok(tape.value(l).item())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn probes(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= MAX_PROBES {
        (0..len).collect()
    } else {
        let mut idx = sample(rng, len, MAX_PROBES).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Max relative error over all inputs and trainable parameters.
pub fn max_relative_error(problem: &Problem<'_>, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = problem
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let l = (problem.loss)(&mut tape, &problem.store, &vars)?;
    let grads = tape.backward(l)?;

    let mut worst = 0.0f64;
    let mut inputs = problem.inputs.clone();
    for (k, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.wrt(*v).unwrap_or(&zeros).clone();
        for j in probes(inputs[k].len(), &mut rng) {
            let orig = inputs[k].data()[j];
            inputs[k].data_mut()[j] = orig + STEP;
            let plus = problem.eval(&inputs, &problem.store)?;
            inputs[k].data_mut()[j] = orig - STEP;
            let minus = problem.eval(&inputs, &problem.store)?;
            inputs[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }

    let mut store = problem.store.clone();
    let param_grads: Vec<_> = grads.params().map(|(id, g)| (id, g.clone())).collect();
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let len = store.tensor(id).len();
        let mut analytic = vec![0.0; len];
        for (pid, g) in &param_grads {
            if *pid == id {
                for (a, b) in analytic.iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        for j in probes(len, &mut rng) {
            let orig = store.tensor(id).data()[j];
            store.tensor_mut(id).data_mut()[j] = orig + STEP;
            let plus = problem.eval(&problem.inputs, &store)?;
            store.tensor_mut(id).data_mut()[j] = orig - STEP;
            let minus = problem.eval(&problem.inputs, &store)?;
            store.tensor_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    Ok(worst)
}

/// Reduce any tensor to a scalar via a fixed random projection, so every
/// output element contributes a distinct weight to the gradient.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let weights = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = tape.input(Tensor::new(&shape, weights)?);
    let prod = tape.mul(y, r)?;
    tape.sum(prod)
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Run `cases` randomized problems built by `make` and keep the worst error.
pub fn run_cases<F>(name: &str, cases: usize, seed: u64, mut make: F) -> Result<CheckReport>
where
    F: FnMut(&mut ChaCha8Rng, u64) -> Result<Problem<'static>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let case_seed = seed.wrapping_mul(1_000_003).wrapping_add(case as u64);
        let problem = make(&mut rng, case_seed)?;
        worst = worst.max(max_relative_error(&problem, case_seed)?);
    }
    Ok(CheckReport {
        name: name.to_string(),
        cases,
        max_rel_err: worst,
    })
}

pub(crate) fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn unary_problem(
    rng: &mut ChaCha8Rng,
    seed: u64,
    positive: bool,
    op: fn(&mut Tape, Var) -> Result<Var>,
) -> Problem<'static> {
    let shape = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)];
    let mut x = rand_tensor(&shape, rng);
    if positive {
        for v in x.data_mut() {
            *v = v.abs() + 0.2;
        }
    }
    Problem::new(vec![x], ParamStore::new(), move |tape, _, v| {
        let y = op(tape, v[0])?;
        project(tape, y, seed)
    })
}

fn binary_problem(
    rng: &mut ChaCha8Rng,
    seed: u64,
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
    denominator: bool,
) -> Problem<'static> {
    let shape = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)];
    let a = rand_tensor(&shape, rng);
    let mut b = rand_tensor(&shape, rng);
    if denominator {
        for v in b.data_mut() {
            *v = v.signum() * (v.abs() + 0.5);
        }
    }
    Problem::new(vec![a, b], ParamStore::new(), move |tape, _, v| {
        let y = op(tape, v[0], v[1])?;
        project(tape, y, seed)
    })
}

/// Finite-difference checks for every tape primitive.
pub fn primitive_suite(cases: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    out.push(run_cases("conv2d", cases, seed, |rng, s| {
        let (n, cin, cout) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
        let (k, stride, pad) = (dim(rng, 1, 3), dim(rng, 1, 2), dim(rng, 0, 1));
        let (h, w) = (dim(rng, k, 6), dim(rng, k, 6));
        let inputs = vec![
            rand_tensor(&[n, cin, h, w], rng),
            rand_tensor(&[cout, cin, k, k], rng),
            rand_tensor(&[cout], rng),
        ];
        Ok(Problem::new(inputs, ParamStore::new(), move |t, _, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
            project(t, y, s)
        }))
    })?);
    out.push(run_cases("max_pool2d", cases, seed + 1, |rng, s| {
        let (k, stride) = (dim(rng, 1, 3), dim(rng, 1, 2));
        let shape = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, k, 6), dim(rng, k, 6)];
        let x = rand_tensor(&shape, rng);
        Ok(Problem::new(vec![x], ParamStore::new(), move |t, _, v| {
            let y = t.max_pool2d(v[0], k, stride)?;
            project(t, y, s)
        }))
    })?);
    out.push(run_cases("dwxcorr", cases, seed + 2, |rng, s| {
        let (n, c) = (dim(rng, 1, 2), dim(rng, 1, 3));
        let (th, tw) = (dim(rng, 1, 3), dim(rng, 1, 3));
        let (sh, sw) = (dim(rng, th, 6), dim(rng, tw, 6));
        let inputs = vec![rand_tensor(&[n, c, sh, sw], rng), rand_tensor(&[n, c, th, tw], rng)];
        Ok(Problem::new(inputs, ParamStore::new(), move |t, _, v| {
            let y = t.dwxcorr(v[0], v[1])?;
            project(t, y, s)
        }))
    })?);
    out.push(run_cases("matmul", cases, seed + 3, |rng, s| {
        let (m, k, p) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
        let inputs = if rng.gen_bool(0.5) {
            vec![rand_tensor(&[m, k], rng), rand_tensor(&[k, p], rng)]
        } else {
            let b = dim(rng, 1, 3);
            vec![rand_tensor(&[b, m, k], rng), rand_tensor(&[b, k, p], rng)]
        };
        Ok(Problem::new(inputs, ParamStore::new(), move |t, _, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, s)
        }))
    })?);
    out.push(run_cases("transpose", cases, seed + 4, |rng, s| {
        let x = rand_tensor(&[dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)], rng);
        Ok(Problem::new(vec![x], ParamStore::new(), move |t, _, v| {
            let y = t.transpose(v[0])?;
            project(t, y, s)
        }))
    })?);
    out.push(run_cases("softmax_lastaxis", cases, seed + 5, |rng, s| {
        let x = rand_tensor(&[dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 5)], rng);
        Ok(Problem::new(vec![x], ParamStore::new(), move |t, _, v| {
            let y = t.softmax_lastaxis(v[0])?;
            project(t, y, s)
        }))
    })?);
    out.push(run_cases("gap", cases, seed + 6, |rng, s| {
        Ok(unary_problem(rng, s, false, |t, x| t.gap(x)))
    })?);
    out.push(run_cases("gmp", cases, seed + 7, |rng, s| {
        Ok(unary_problem(rng, s, false, |t, x| t.gmp(x)))
    })?);
    out.push(run_cases("add", cases, seed + 8, |rng, s| {
        Ok(binary_problem(rng, s, |t, a, b| t.add(a, b), false))
    })?);
    out.push(run_cases("sub", cases, seed + 9, |rng, s| {
        Ok(binary_problem(rng, s, |t, a, b| t.sub(a, b), false))
    })?);
    out.push(run_cases("mul", cases, seed + 10, |rng, s| {
        Ok(binary_problem(rng, s, |t, a, b| t.mul(a, b), false))
    })?);
    out.push(run_cases("div", cases, seed + 11, |rng, s| {
        Ok(binary_problem(rng, s, |t, a, b| t.div(a, b), true))
    })?);
    out.push(run_cases("minimum", cases, seed + 12, |rng, s| {
        Ok(binary_problem(rng, s, |t, a, b| t.minimum(a, b), false))
    })?);
    out.push(run_cases("maximum", cases, seed + 13, |rng, s| {
        Ok(binary_problem(rng, s, |t, a, b| t.maximum(a, b), false))
    })?);
    out.push(run_cases("scale", cases, seed + 14, |rng, s| {
        let shape = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)];
        let inputs = vec![rand_tensor(&shape, rng), rand_tensor(&[1], rng)];
        Ok(Problem::new(inputs, ParamStore::new(), move |t, _, v| {
            let y = t.scale(v[0], v[1])?;
            project(t, y, s)
        }))
    })?);
    out.push(run_cases("affine", cases, seed + 15, |rng, s| {
        Ok(unary_problem(rng, s, false, |t, x| t.affine(x, -1.7, 0.3)))
    })?);
    out.push(run_cases("sigmoid", cases, seed + 16, |rng, s| {
        Ok(unary_problem(rng, s, false, |t, x| t.sigmoid(x)))
    })?);
    out.push(run_cases("relu", cases, seed + 17, |rng, s| {
        Ok(unary_problem(rng, s, false, |t, x| t.relu(x)))
    })?);
    out.push(run_cases("exp", cases, seed + 18, |rng, s| {
        Ok(unary_problem(rng, s, false, |t, x| t.exp(x)))
    })?);
    out.push(run_cases("ln", cases, seed + 19, |rng, s| {
        Ok(unary_problem(rng, s, true, |t, x| t.ln(x)))
    })?);
    out.push(run_cases("softplus", cases, seed + 20, |rng, s| {
        Ok(unary_problem(rng, s, false, |t, x| t.softplus(x)))
    })?);
    out.push(run_cases("clamp", cases, seed + 21, |rng, s| {
        Ok(unary_problem(rng, s, false, |t, x| t.clamp(x, -0.5, 0.5)))
    })?);
    out.push(run_cases("concat_channels", cases, seed + 22, |rng, s| {
        let (n, h, w) = (dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 1, 4));
        let inputs = vec![
            rand_tensor(&[n, dim(rng, 1, 3), h, w], rng),
            rand_tensor(&[n, dim(rng, 1, 3), h, w], rng),
        ];
        Ok(Problem::new(inputs, ParamStore::new(), move |t, _, v| {
            let y = t.concat_channels(v[0], v[1])?;
            project(t, y, s)
        }))
    })?);
    out.push(run_cases("mul_channelwise", cases, seed + 23, |rng, s| {
        let (n, c) = (dim(rng, 1, 2), dim(rng, 1, 3));
        let inputs = vec![
            rand_tensor(&[n, c, dim(rng, 1, 4), dim(rng, 1, 4)], rng),
            rand_tensor(&[n, c, 1, 1], rng),
        ];
        Ok(Problem::new(inputs, ParamStore::new(), move |t, _, v| {
            let y = t.mul_channelwise(v[0], v[1])?;
            project(t, y, s)
        }))
    })?);
    out.push(run_cases("reshape", cases, seed + 24, |rng, s| {
        Ok(unary_problem(rng, s, false, |t, x| {
            let n = t.value(x).len();
            t.reshape(x, &[n])
        }))
    })?);
    out.push(run_cases("slice_channels", cases, seed + 25, |rng, s| {
        let c = dim(rng, 2, 4);
        let start = dim(rng, 0, c - 1);
        let len = dim(rng, 1, c - start);
        let x = rand_tensor(&[dim(rng, 1, 2), c, dim(rng, 1, 3), dim(rng, 1, 3)], rng);
        Ok(Problem::new(vec![x], ParamStore::new(), move |t, _, v| {
            let y = t.slice_channels(v[0], start, len)?;
            project(t, y, s)
        }))
    })?);
    out.push(run_cases("sum", cases, seed + 26, |rng, s| {
        Ok(unary_problem(rng, s, false, |t, x| t.sum(x)))
    })?);
    out.push(run_cases("mean", cases, seed + 27, |rng, s| {
        Ok(unary_problem(rng, s, false, |t, x| t.mean(x)))
    })?);
    Ok(out)
}

fn gated_store(rng: &mut ChaCha8Rng, store: &mut ParamStore, gates: &[ParamId]) {
    for &g in gates {
        *store.tensor_mut(g) = Tensor::scalar(rng.gen_range(0.3..1.2) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
    }
}

fn small_aan(rng: &mut ChaCha8Rng, c: usize) -> Result<(AanParams, ParamStore)> {
    let mut store = ParamStore::new();
    let aan = AanParams::new(c, c, dim(rng, 1, 3), &mut store, rng)?;
    gated_store(rng, &mut store, &[aan.gamma3, aan.gamma4, aan.gamma5, aan.gamma6]);
    Ok((aan, store))
}

fn small_map(rng: &mut ChaCha8Rng, c: usize) -> [usize; 4] {
    [dim(rng, 1, 2), c, dim(rng, 1, 4), dim(rng, 1, 4)]
}

/// Small anchor/label problem for the total objective: a 3x3 grid with one
/// well-overlapping anchor per sample near the ground truth.
fn loss_problem(rng: &mut ChaCha8Rng) -> Result<Problem<'static>> {
    let n = dim(rng, 1, 2);
    let grid = AnchorGrid::new(3, 3, 8.0, 40.0, 16.0);
    let mut anchors = Vec::with_capacity(n * 4 * 9);
    let mut gts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let gt = BBox::new(
            20.0 + rng.gen_range(-2.0..2.0),
            20.0 + rng.gen_range(-2.0..2.0),
            16.0 * rng.gen_range(0.8..1.2),
            16.0 * rng.gen_range(0.8..1.2),
        );
        let boxes: Vec<BBox> = (0..9)
            .map(|k| {
                let (x, y) = grid.cell_center(k / 3, k % 3);
                BBox::new(
                    x + rng.gen_range(-2.0..2.0),
                    y + rng.gen_range(-2.0..2.0),
                    16.0 * rng.gen_range(0.8..1.2),
                    16.0 * rng.gen_range(0.8..1.2),
                )
            })
            .collect();
        for c in 0..4 {
            anchors.extend(boxes.iter().map(|b| [b.cx, b.cy, b.w, b.h][c]));
        }
        labels.push(assign_labels(&boxes, &grid, &gt, &LossConfig::default()));
        gts.push(gt);
    }
    let mut reg = rand_tensor(&[n, 4, 3, 3], rng);
    for v in reg.data_mut() {
        *v *= 0.1;
    }
    let inputs = vec![
        rand_tensor(&[n, 2, 3, 3], rng),
        rand_tensor(&[n, 2, 3, 3], rng),
        rand_tensor(&[n, 1, 3, 3], rng),
        reg,
        Tensor::new(&[n, 4, 3, 3], anchors)?,
    ];
    Ok(Problem::new(inputs, ParamStore::new(), move |t, _, v| {
        let heads = HeadOutputs {
            cls1: v[0],
            cls2: v[1],
            cls3: v[2],
            reg: v[3],
        };
        Ok(total_loss(t, &heads, v[4], &labels, &gts, &LossConfig::default())?.total)
    }))
}

/// Finite-difference checks for the fused and attentional blocks and the
/// training objective, including all of their parameters.
pub fn composite_suite(cases: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    out.push(run_cases("apn_fuse", cases, seed, |rng, s| {
        let c = dim(rng, 1, 3);
        let mut store = ParamStore::new();
        let cfg = ApnConfig {
            channels: c,
            ffn_hidden: dim(rng, 1, 3),
            head_channels: 2,
            anchor_base: 16.0,
        };
        let apn = ApnDf::new(&cfg, c, c, &mut store, rng)?;
        gated_store(rng, &mut store, &[apn.gamma1, apn.gamma2]);
        let shape = small_map(rng, c);
        let inputs = vec![rand_tensor(&shape, rng), rand_tensor(&shape, rng)];
        Ok(Problem::new(inputs, store, move |t, st, v| {
            let y = apn.fuse(t, st, v[0], v[1])?;
            project(t, y, s)
        }))
    })?);
    out.push(run_cases("spatial_attention", cases, seed + 1, |rng, s| {
        let c = dim(rng, 1, 3);
        let (aan, store) = small_aan(rng, c)?;
        let x = rand_tensor(&small_map(rng, c), rng);
        Ok(Problem::new(vec![x], store, move |t, st, v| {
            let y = aan.spatial_attention(t, st, v[0])?;
            project(t, y, s)
        }))
    })?);
    out.push(run_cases("channel_attention", cases, seed + 2, |rng, s| {
        let c = dim(rng, 1, 3);
        let (aan, store) = small_aan(rng, c)?;
        let x = rand_tensor(&small_map(rng, c), rng);
        Ok(Problem::new(vec![x], store, move |t, st, v| {
            let y = aan.channel_attention(t, st, v[0])?;
            project(t, y, s)
        }))
    })?);
    out.push(run_cases("cross_aan", cases, seed + 3, |rng, s| {
        let c = dim(rng, 1, 3);
        let (aan, store) = small_aan(rng, c)?;
        let shape = small_map(rng, c);
        let inputs = vec![rand_tensor(&shape, rng), rand_tensor(&shape, rng)];
        Ok(Problem::new(inputs, store, move |t, st, v| {
            let y = aan.cross_aan(t, st, v[0], v[1])?;
            project(t, y, s)
        }))
    })?);
    out.push(run_cases("total_loss", cases, seed + 4, |rng, _| loss_problem(rng))?);
    Ok(out)
}

/// Primitive and composite suites together.
pub fn full_suite(cases: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = primitive_suite(cases, seed)?;
    out.extend(composite_suite(cases, seed.wrapping_add(1000))?);
    Ok(out)
}
