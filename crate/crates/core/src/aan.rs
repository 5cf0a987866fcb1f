//! Attentional aggregation: self-attention over space and channels on a
//! second level-5 similarity map, then cross aggregation with `R_A`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::FeaturePair;
use crate::error::{Error, Result};
use crate::nn::{calibrate_correlation, gate, Conv, Ffn};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AanParams {
    pub reduce5_search: Conv,
    pub reduce5_template: Conv,
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    /// Shared by the GAP and GMP paths.
    pub channel_ffn: Ffn,
    pub cross_ffn: Ffn,
    pub cross_cat: Conv,
    pub gamma3: ParamId,
    pub gamma4: ParamId,
    pub gamma5: ParamId,
    pub gamma6: ParamId,
}

/// Intermediate maps of one AAN pass.
#[derive(Clone, Copy, Debug)]
pub struct AanOutput {
    pub r5p: Var,
    pub rs: Var,
    pub rc: Var,
    pub r: Var,
}

impl AanParams {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        c5: usize,
        ffn_hidden: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let c = channels;
        Ok(Self {
            reduce5_search: Conv::pointwise(store, "aan.reduce5_search", c5, c, rng)?,
            reduce5_template: Conv::pointwise(store, "aan.reduce5_template", c5, c, rng)?,
            query: Conv::pointwise(store, "aan.query", c, c, rng)?,
            key: Conv::pointwise(store, "aan.key", c, c, rng)?,
            value: Conv::pointwise(store, "aan.value", c, c, rng)?,
            channel_ffn: Ffn::new(store, "aan.channel_ffn", c, ffn_hidden, rng)?,
            cross_ffn: Ffn::new(store, "aan.cross_ffn", c, ffn_hidden, rng)?,
            cross_cat: Conv::pointwise(store, "aan.cross_cat", 2 * c, c, rng)?,
            gamma3: gate(store, "aan.gamma3")?,
            gamma4: gate(store, "aan.gamma4")?,
            gamma5: gate(store, "aan.gamma5")?,
            gamma6: gate(store, "aan.gamma6")?,
        })
    }

    /// Level-5 similarity with its own reduction convs.
    pub fn compute_r5prime(&self, tape: &mut Tape, store: &ParamStore, zf: &FeaturePair, xf: &FeaturePair) -> Result<Var> {
        let xs = self.reduce5_search.forward(tape, store, xf.f5)?;
        let zs = self.reduce5_template.forward(tape, store, zf.f5)?;
        tape.dwxcorr(xs, zs)
    }

    /// Rescale the reduction pair so `R'5` has unit RMS on the given
    /// level-5 features.
    pub fn calibrate(&self, store: &mut ParamStore, z5: &Tensor, x5: &Tensor) -> Result<()> {
        calibrate_correlation(store, &self.reduce5_search, &self.reduce5_template, x5, z5)
    }

    /// Row-normalized attention over spatial positions, `[N,HW,HW]`.
    /// Row `j` holds query position `j`'s weights over key positions.
    pub fn attention_map(&self, tape: &mut Tape, store: &ParamStore, r5p: Var) -> Result<Var> {
        let (n, c, hw) = flat_dims(tape, r5p)?;
        let q = self.query.forward(tape, store, r5p)?;
        let k = self.key.forward(tape, store, r5p)?;
        let q = tape.reshape(q, &[n, c, hw])?;
        let k = tape.reshape(k, &[n, c, hw])?;
        let qt = tape.transpose(q)?;
        let energy = tape.matmul(qt, k)?;
        tape.softmax_lastaxis(energy)
    }

    /// `R^s = g3 * (R^v x (R^a)^T) + R'5`.
    pub fn spatial_attention(&self, tape: &mut Tape, store: &ParamStore, r5p: Var) -> Result<Var> {
        let shape = tape.shape(r5p).to_vec();
        let (n, c, hw) = flat_dims(tape, r5p)?;
        let attn = self.attention_map(tape, store, r5p)?;
        let v = self.value.forward(tape, store, r5p)?;
        let v = tape.reshape(v, &[n, c, hw])?;
        let attn_t = tape.transpose(attn)?;
        let agg = tape.matmul(v, attn_t)?;
        let agg = tape.reshape(agg, &shape)?;
        let g3 = tape.param(store, self.gamma3);
        let gated = tape.scale(agg, g3)?;
        tape.add(gated, r5p)
    }

    /// `w = FFN(GAP(R^s)) + FFN(GMP(R^s))`, `R_c = R^s + g4 * sigmoid(w) (.) R^s`.
    pub fn channel_attention(&self, tape: &mut Tape, store: &ParamStore, rs: Var) -> Result<Var> {
        let avg = tape.gap(rs)?;
        let max = tape.gmp(rs)?;
        let wa = self.channel_ffn.forward(tape, store, avg)?;
        let wm = self.channel_ffn.forward(tape, store, max)?;
        let w = tape.add(wa, wm)?;
        let w = tape.sigmoid(w)?;
        let weighted = tape.mul_channelwise(rs, w)?;
        let g4 = tape.param(store, self.gamma4);
        let gated = tape.scale(weighted, g4)?;
        tape.add(rs, gated)
    }

    /// `R = R_c + g5 * FFN(GAP(R_A)) (.) R_c + g6 * F(Cat(R_A, R_c))`.
    pub fn cross_aan(&self, tape: &mut Tape, store: &ParamStore, rc: Var, ra: Var) -> Result<Var> {
        if tape.shape(rc) != tape.shape(ra) {
            return Err(Error::shape("cross_aan", tape.shape(rc), tape.shape(ra)));
        }
        let pooled = tape.gap(ra)?;
        let weights = self.cross_ffn.forward(tape, store, pooled)?;
        let weighted = tape.mul_channelwise(rc, weights)?;
        let g5 = tape.param(store, self.gamma5);
        let branch1 = tape.scale(weighted, g5)?;

        let cat = tape.concat_channels(ra, rc)?;
        let mixed = self.cross_cat.forward(tape, store, cat)?;
        let g6 = tape.param(store, self.gamma6);
        let branch2 = tape.scale(mixed, g6)?;

        let out = tape.add(rc, branch1)?;
        tape.add(out, branch2)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        zf: &FeaturePair,
        xf: &FeaturePair,
        ra: Var,
    ) -> Result<AanOutput> {
        let r5p = self.compute_r5prime(tape, store, zf, xf)?;
        let rs = self.spatial_attention(tape, store, r5p)?;
        let rc = self.channel_attention(tape, store, rs)?;
        let r = self.cross_aan(tape, store, rc, ra)?;
        Ok(AanOutput { r5p, rs, rc, r })
    }
}

fn flat_dims(tape: &Tape, x: Var) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = tape.value(x).dims4("spatial_attention")?;
    Ok((n, c, h * w))
}
