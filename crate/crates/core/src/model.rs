//! The full network: backbone, anchor proposal, attentional aggregation and
//! heads over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aan::{AanOutput, AanParams};
use crate::apn::{AnchorGrid, AnchorSet, ApnDf, FusedMap};
use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, FeaturePair};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::heads::{HeadOutputs, Heads};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SiamModel {
    pub config: Config,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub apn: ApnDf,
    pub aan: AanParams,
    pub heads: Heads,
}

/// Every intermediate of one template/search pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub fused: FusedMap,
    pub anchors: AnchorSet,
    pub aan: AanOutput,
    pub heads: HeadOutputs,
}

impl SiamModel {
    /// Fresh model with weights drawn from `seed`.
    pub fn new(config: Config, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&config.backbone, &mut store, &mut rng)?;
        let (c4, c5) = (config.backbone.f4_channels(), config.backbone.f5_channels());
        let apn = ApnDf::new(&config.apn, c4, c5, &mut store, &mut rng)?;
        let aan = AanParams::new(config.apn.channels, c5, config.aan.ffn_hidden, &mut store, &mut rng)?;
        let heads = Heads::new(config.apn.channels, config.heads.hidden_channels, &mut store, &mut rng)?;
        Ok(Self {
            config,
            store,
            backbone,
            apn,
            aan,
            heads,
        })
    }

    /// Data-dependent initialization on a batch of template and search
    /// images: unit-RMS backbone stages, then unit-RMS `R4`, `R5` and `R'5`.
    /// Only positive rescalings are applied.
    pub fn calibrate(&mut self, templates: &Tensor, searches: &Tensor) -> Result<()> {
        self.backbone.calibrate(&mut self.store, searches)?;
        let extract = |img: &Tensor| -> Result<FeaturePair<Tensor>> {
            let mut tape = Tape::new();
            let x = tape.input(img.clone());
            let f = self.features(&mut tape, x)?;
            Ok(FeaturePair {
                f4: tape.value(f.f4).clone(),
                f5: tape.value(f.f5).clone(),
            })
        };
        let zf = extract(templates)?;
        let xf = extract(searches)?;
        self.apn.calibrate(&mut self.store, &zf, &xf)?;
        self.aan.calibrate(&mut self.store, &zf.f5, &xf.f5)
    }

    pub fn features(&self, tape: &mut Tape, image: Var) -> Result<FeaturePair> {
        self.backbone.extract(tape, &self.store, image)
    }

    /// Correlate template features `zf` with search features `xf`.
    pub fn forward(&self, tape: &mut Tape, zf: &FeaturePair, xf: &FeaturePair) -> Result<ForwardOutput> {
        let fused = self.apn.forward(tape, &self.store, zf, xf)?;
        let anchors = self.apn.propose(
            tape,
            &self.store,
            fused.ra,
            self.config.backbone.total_stride(),
            self.config.tracker.search_size,
        )?;
        let aan = self.aan.forward(tape, &self.store, zf, xf, fused.ra)?;
        let heads = self.heads.forward(tape, &self.store, aan.r)?;
        Ok(ForwardOutput {
            fused,
            anchors,
            aan,
            heads,
        })
    }

    /// Backbone on both images, then [`SiamModel::forward`].
    pub fn forward_images(&self, tape: &mut Tape, template: Var, search: Var) -> Result<ForwardOutput> {
        let zf = self.features(tape, template)?;
        let xf = self.features(tape, search)?;
        self.forward(tape, &zf, &xf)
    }

    /// Anchor grid of the default search size.
    pub fn grid(&self) -> Result<AnchorGrid> {
        let t = &self.config.tracker;
        let b = &self.config.backbone;
        let xs = b.feature_size(t.search_size)?;
        let zs = b.feature_size(t.template_size)?;
        if zs > xs {
            return Err(Error::Config("template features larger than search features".into()));
        }
        let side = xs - zs + 1;
        Ok(AnchorGrid::new(
            side,
            side,
            b.total_stride() as f64,
            t.search_size as f64,
            self.config.apn.anchor_base,
        ))
    }

    /// Named shapes of every stage for a `[1,3,T,T]` / `[1,3,S,S]` pass.
    pub fn shape_report(&self) -> Result<Vec<(&'static str, Vec<usize>)>> {
        let t = &self.config.tracker;
        let mut tape = Tape::new();
        let z = tape.input(Tensor::zeros(&[1, 3, t.template_size, t.template_size]));
        let x = tape.input(Tensor::zeros(&[1, 3, t.search_size, t.search_size]));
        let zf = self.features(&mut tape, z)?;
        let xf = self.features(&mut tape, x)?;
        let out = self.forward(&mut tape, &zf, &xf)?;
        let vars = [
            ("template", z),
            ("search", x),
            ("template.f4", zf.f4),
            ("template.f5", zf.f5),
            ("search.f4", xf.f4),
            ("search.f5", xf.f5),
            ("apn.r4", out.fused.r4),
            ("apn.r5", out.fused.r5),
            ("apn.ra", out.fused.ra),
            ("apn.anchors", out.anchors.boxes),
            ("aan.r5prime", out.aan.r5p),
            ("aan.rs", out.aan.rs),
            ("aan.rc", out.aan.rc),
            ("aan.r", out.aan.r),
            ("heads.cls1", out.heads.cls1),
            ("heads.cls2", out.heads.cls2),
            ("heads.cls3", out.heads.cls3),
            ("heads.reg", out.heads.reg),
        ];
        Ok(vars.into_iter().map(|(n, v)| (n, tape.shape(v).to_vec())).collect())
    }
}
