//! AlexNet-style five-stage feature extractor.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::nn::{rms, unit_factor, Conv};
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// The last two feature levels of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair<T = Var> {
    pub f4: T,
    pub f5: T,
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv,
    pool: Option<(usize, usize)>,
    relu: bool,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut cin = 3;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for (i, s) in cfg.stages.iter().enumerate() {
            let conv = Conv::new(
                store,
                &format!("backbone.conv{}", i + 1),
                cin,
                s.out_channels,
                s.kernel,
                s.stride,
                s.pad,
                rng,
            )?;
            stages.push(Stage {
                conv,
                pool: s.pool.map(|p| (p.kernel, p.stride)),
                // the last stage feeds correlations directly
                relu: i + 1 < cfg.stages.len(),
            });
            cin = s.out_channels;
        }
        Ok(Self { stages })
    }

    fn run_stage(&self, i: usize, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let stage = &self.stages[i];
        let mut x = stage.conv.forward(tape, store, x)?;
        if stage.relu {
            x = tape.relu(x)?;
        }
        if let Some((k, s)) = stage.pool {
            x = tape.max_pool2d(x, k, s)?;
        }
        Ok(x)
    }

    /// Data-dependent rescaling: stage by stage, divide weight and bias by
    /// the RMS of that stage's output on `images`, so every stage emits
    /// unit-RMS features. Each stage is positively homogeneous in its
    /// parameters, so only the scale changes. Returns the factors applied.
    pub fn calibrate(&self, store: &mut ParamStore, images: &Tensor) -> Result<Vec<f64>> {
        let mut x = images.clone();
        let mut factors = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let mut tape = Tape::new();
            let input = tape.input(x);
            let out = self.run_stage(i, &mut tape, store, input)?;
            let mut y = tape.value(out).clone();
            let factor = unit_factor(rms(&y));
            stage.conv.scale(store, factor);
            for v in y.data_mut() {
                *v *= factor;
            }
            factors.push(factor);
            x = y;
        }
        Ok(factors)
    }

    /// Run all stages on `image` (`[N,3,H,W]`) and return stage 4 and 5 outputs.
    pub fn extract(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<FeaturePair> {
        let shape = tape.shape(image);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::invalid_shape(
                "backbone",
                format!("expected a [N,3,H,W] image, got {shape:?}"),
            ));
        }
        let mut x = image;
        let mut f4 = None;
        for i in 0..self.stages.len() {
            x = self.run_stage(i, tape, store, x)?;
            if i == 3 {
                f4 = Some(x);
            }
        }
        Ok(FeaturePair {
            f4: f4.expect("backbone has five stages"),
            f5: x,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_non_rgb_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&Config::toy().backbone, &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 1, 127, 127]));
        assert!(bb.extract(&mut tape, &store, x).is_err());
    }

    #[test]
    fn zero_image_zero_features() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&Config::toy().backbone, &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 3, 127, 127]));
        let f = bb.extract(&mut tape, &store, x).unwrap();
        assert!(tape.value(f.f4).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(f.f5).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(f.f4), &[1, 16, 6, 6]);
        assert_eq!(tape.shape(f.f5), &[1, 16, 6, 6]);
    }

    #[test]
    fn calibrate_gives_unit_rms_and_preserves_direction() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bb = Backbone::new(&Config::toy().backbone, &mut store, &mut rng).unwrap();
        let data: Vec<f64> = (0..2 * 3 * 127 * 127).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let images = Tensor::new(&[2, 3, 127, 127], data).unwrap();

        let before = {
            let mut tape = Tape::new();
            let x = tape.input(images.clone());
            let f = bb.extract(&mut tape, &store, x).unwrap();
            tape.value(f.f5).clone()
        };
        let factors = bb.calibrate(&mut store, &images).unwrap();
        assert_eq!(factors.len(), 5);
        assert!(factors.iter().all(|&f| f > 0.0));

        let mut tape = Tape::new();
        let x = tape.input(images);
        let f = bb.extract(&mut tape, &store, x).unwrap();
        let after = tape.value(f.f5);
        let rms = (after.data().iter().map(|v| v * v).sum::<f64>() / after.len() as f64).sqrt();
        assert!((rms - 1.0).abs() < 1e-9, "rms {rms}");
        let total: f64 = factors.iter().product();
        for (a, b) in after.data().iter().zip(before.data()) {
            assert!((a - b * total).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }
}
