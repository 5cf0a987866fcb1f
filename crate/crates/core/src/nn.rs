//! Parameterized layers used by the network blocks.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Conv with bias; weights He-uniform, bias zero.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_conv_weight(format!("{name}.weight"), [cout, cin, kernel, kernel], rng)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// 1x1 conv, the channel-reduction `F` used throughout.
    pub fn pointwise<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(store, name, cin, cout, 1, 1, 0, rng)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.tensor(self.weight).shape()[0]
    }

    /// Multiply weight and bias by `factor`, scaling the output likewise.
    pub fn scale(&self, store: &mut ParamStore, factor: f64) {
        for id in [self.weight, self.bias] {
            for v in store.tensor_mut(id).data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Root mean square of all entries; 0 for an empty tensor.
pub fn rms(t: &Tensor) -> f64 {
    if t.is_empty() {
        return 0.0;
    }
    (t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt()
}

/// Rescale a reduce-then-correlate pair so `dwxcorr(search(x), template(z))`
/// has unit RMS. The map is bilinear in the two convs, so each is scaled by
/// the square root of the factor.
pub fn calibrate_correlation(store: &mut ParamStore, search: &Conv, template: &Conv, x: &Tensor, z: &Tensor) -> Result<()> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let zv = tape.input(z.clone());
    let xs = search.forward(&mut tape, store, xv)?;
    let zs = template.forward(&mut tape, store, zv)?;
    let corr = tape.dwxcorr(xs, zs)?;
    let factor = unit_factor(rms(tape.value(corr))).sqrt();
    search.scale(store, factor);
    template.scale(store, factor);
    Ok(())
}

/// Factor that brings `rms` to 1, or 1 when `rms` is zero or not finite.
pub fn unit_factor(rms: f64) -> f64 {
    if rms > 0.0 && rms.is_finite() {
        rms.recip()
    } else {
        1.0
    }
}

/// Two-layer bottleneck on `[N,C,1,1]` vectors: `C -> hidden -> C` with a
/// ReLU in between and no output nonlinearity.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Conv,
    pub fc2: Conv,
}

impl Ffn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Conv::pointwise(store, &format!("{name}.fc1"), channels, hidden, rng)?,
            fc2: Conv::pointwise(store, &format!("{name}.fc2"), hidden, channels, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.fc2.forward(tape, store, h)
    }
}

/// Two stacked 3x3 convs (padding 1) with a ReLU between them.
#[derive(Clone, Debug)]
pub struct ConvPair {
    pub first: Conv,
    pub second: Conv,
}

impl ConvPair {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            first: Conv::new(store, &format!("{name}.0"), cin, hidden, 3, 1, 1, rng)?,
            second: Conv::new(store, &format!("{name}.1"), hidden, cout, 3, 1, 1, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.second.forward(tape, store, h)
    }

    /// Scale the output layer's initial weights, so predictions start near
    /// the bias.
    pub fn damp_output(&self, store: &mut ParamStore, factor: f64) {
        for v in store.tensor_mut(self.second.weight).data_mut() {
            *v *= factor;
        }
    }
}

/// Initial weight scale of prediction layers.
pub const OUTPUT_DAMPING: f64 = 0.01;

/// Scalar gate parameter, initialized to zero so the gated branch starts
/// switched off.
pub fn gate(store: &mut ParamStore, name: &str) -> Result<ParamId> {
    store.add(name, Tensor::scalar(0.0))
}
