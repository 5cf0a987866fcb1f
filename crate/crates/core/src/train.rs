//! Toy-scale training: template/search triples cut from a synthetic
//! sequence, SGD with momentum and weight decay, per-step loss log.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::bbox::BBox;
use crate::config::{Config, TrackerConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::heads::{assign_labels, total_loss, LossTerms, LossValues};
use crate::image::crop;
use crate::model::SiamModel;
use crate::param::{ParamId, ParamStore};
use crate::synth::{gen_sequence, SyntheticSequence};
use crate::tensor::Tensor;
use crate::tracker::{search_window, template_window};

/// One training example. `gt` is in search-crop coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Triple {
    pub template: Tensor,
    pub search: Tensor,
    pub gt: BBox,
}

/// Cut `count` triples from random frame pairs of `seq`. Each search crop
/// is centered on the target shifted by up to `jitter` crop pixels and
/// rescaled by a log-uniform factor within `exp(+-scale_jitter)`.
pub fn make_triples<R: Rng + ?Sized>(
    seq: &SyntheticSequence,
    cfg: &TrackerConfig,
    count: usize,
    jitter: f64,
    scale_jitter: f64,
    rng: &mut R,
) -> Result<Vec<Triple>> {
    if seq.frames.is_empty() {
        return Err(Error::InvalidArgument("sequence has no frames".into()));
    }
    let n = seq.frames.len();
    (0..count)
        .map(|_| {
            let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
            let template = crop(&seq.frames[i], &template_window(&seq.gt[i], cfg));
            let target = seq.gt[j];
            let mut window = search_window(&target, cfg);
            if scale_jitter > 0.0 {
                window.side *= rng.gen_range(-scale_jitter..=scale_jitter).exp();
            }
            let (dx, dy) = if jitter > 0.0 {
                (rng.gen_range(-jitter..=jitter), rng.gen_range(-jitter..=jitter))
            } else {
                (0.0, 0.0)
            };
            window.cx -= dx * window.scale();
            window.cy -= dy * window.scale();
            Ok(Triple {
                template,
                search: crop(&seq.frames[j], &window),
                gt: window.box_to_crop(&target),
            })
        })
        .collect()
}

fn stack(items: &[&Tensor]) -> Tensor {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&shape, data).expect("equal item shapes")
}

/// Build the batched loss for `batch` on a fresh section of `tape`.
pub fn batch_loss(model: &SiamModel, tape: &mut Tape, batch: &[&Triple]) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let z = tape.input(stack(&batch.iter().map(|t| &t.template).collect::<Vec<_>>()));
    let x = tape.input(stack(&batch.iter().map(|t| &t.search).collect::<Vec<_>>()));
    let out = model.forward_images(tape, z, x)?;
    let grid = out.anchors.grid;
    let gts: Vec<BBox> = batch.iter().map(|t| t.gt).collect();
    let labels: Vec<_> = gts
        .iter()
        .enumerate()
        .map(|(n, gt)| assign_labels(&out.anchors.boxes_for(tape, n), &grid, gt, &model.config.loss))
        .collect();
    total_loss(tape, &out.heads, out.anchors.boxes, &labels, &gts, &model.config.loss)
}

/// Momentum SGD with L2 weight decay folded into the gradient:
/// `v = mu * v + (g + wd * p)`, `p -= lr * v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor> {
        self.velocity.get(id.index()).and_then(Option::as_ref)
    }

    /// Apply accumulated gradients (scaled by `grad_scale`) and clear them.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, grad_scale: f64) {
        self.velocity.resize(store.len(), None);
        for (id, p) in store.iter_mut() {
            let Some(grad) = p.grad.take() else { continue };
            if !p.trainable {
                continue;
            }
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(p.tensor.shape()));
            for ((vi, &gi), &pi) in v.data_mut().iter_mut().zip(grad.data()).zip(p.tensor.data()) {
                let g = gi * grad_scale + self.weight_decay * pi;
                *vi = self.momentum * *vi + g;
            }
            for (pi, &vi) in p.tensor.data_mut().iter_mut().zip(v.data()) {
                *pi -= lr * vi;
            }
        }
    }
}

/// Global L2 norm of all accumulated gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Geometric decay from `lr` at step 0 to `lr_end` at the last step.
pub fn learning_rate(hp: &TrainConfig, step: usize) -> f64 {
    if hp.lr == 0.0 || hp.steps <= 1 || hp.lr_end <= 0.0 {
        return hp.lr;
    }
    let t = step as f64 / (hp.steps - 1) as f64;
    hp.lr * (hp.lr_end / hp.lr).powf(t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: LossValues,
}

/// Run `hp.steps` SGD steps over `triples`, reshuffling each epoch.
pub fn train(model: &mut SiamModel, triples: &[Triple], hp: &TrainConfig) -> Result<Vec<LossRecord>> {
    if triples.is_empty() || hp.batch_size == 0 {
        return Err(Error::InvalidArgument("need triples and a positive batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed ^ 0x5eed);
    let mut order: Vec<usize> = Vec::new();
    let mut sgd = Sgd::new(hp.momentum, hp.weight_decay);
    let mut log = Vec::with_capacity(hp.steps);
    model.store.zero_grad();
    for step in 0..hp.steps {
        let mut batch = Vec::with_capacity(hp.batch_size);
        while batch.len() < hp.batch_size.min(triples.len()) {
            if order.is_empty() {
                order = (0..triples.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&triples[order.pop().expect("refilled")]);
        }
        let mut tape = Tape::new();
        let terms = batch_loss(model, &mut tape, &batch)?;
        let loss = terms.values(&tape);
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!(
                    "total={} cls1={} cls2={} cls3={} reg={}",
                    loss.total, loss.cls1, loss.cls2, loss.cls3, loss.reg
                ),
            });
        }
        let grads = tape.backward(terms.total)?;
        grads.accumulate_into(&mut model.store);
        let norm = grad_norm(&model.store);
        let scale = if hp.grad_clip > 0.0 && norm > hp.grad_clip {
            hp.grad_clip / norm
        } else {
            1.0
        };
        sgd.step(&mut model.store, learning_rate(hp, step), scale);
        log.push(LossRecord { step, loss });
    }
    Ok(log)
}

/// Everything a toy run produces.
#[derive(Clone, Debug)]
pub struct ToyRun {
    pub model: SiamModel,
    pub log: Vec<LossRecord>,
    pub sequence: SyntheticSequence,
}

/// Untrained starting point of a toy run.
#[derive(Clone, Debug)]
pub struct ToySetup {
    pub model: SiamModel,
    pub triples: Vec<Triple>,
    pub sequence: SyntheticSequence,
}

/// Generate the training sequence, cut triples and build a calibrated
/// fresh model, all from `config.train.seed`.
pub fn prepare_toy(config: &Config) -> Result<ToySetup> {
    let hp = &config.train;
    let sequence = gen_sequence(hp.seed, &hp.sequence)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed.wrapping_add(1));
    let triples = make_triples(
        &sequence,
        &config.tracker,
        hp.num_triples,
        hp.search_jitter,
        hp.scale_jitter,
        &mut rng,
    )?;
    let mut model = SiamModel::new(config.clone(), hp.seed)?;
    if triples.is_empty() {
        return Err(Error::Config("train.num_triples must be positive".into()));
    }
    let probe = &triples[..hp.batch_size.clamp(1, triples.len())];
    let templates: Vec<&Tensor> = probe.iter().map(|t| &t.template).collect();
    let searches: Vec<&Tensor> = probe.iter().map(|t| &t.search).collect();
    model.calibrate(&stack(&templates), &stack(&searches))?;
    Ok(ToySetup {
        model,
        triples,
        sequence,
    })
}

pub fn train_toy(config: &Config) -> Result<ToyRun> {
    let ToySetup {
        mut model,
        triples,
        sequence,
    } = prepare_toy(config)?;
    let log = train(&mut model, &triples, &config.train)?;
    Ok(ToyRun { model, log, sequence })
}

pub const CSV_HEADER: &str = "step,total,cls1,cls2,cls3,reg";

pub fn loss_csv(log: &[LossRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in log {
        let l = &r.loss;
        writeln!(s, "{},{},{},{},{},{}", r.step, l.total, l.cls1, l.cls2, l.cls3, l.reg).expect("write to string");
    }
    s
}
