//! Scripted synthetic sequences: a textured rectangle moving over a static
//! noise background, with optional scale drift and an occluding bar.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::image::Image;

pub const MIN_FRAME_SIDE: usize = 320;

/// Vertical bar drawn over everything for frames `start..end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub start: usize,
    pub end: usize,
    pub x: f64,
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequenceSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub target_w: f64,
    pub target_h: f64,
    /// Initial center; frame center when absent.
    pub start: Option<[f64; 2]>,
    /// Pixels per frame. The target bounces off the frame border.
    pub velocity: [f64; 2],
    /// Multiplicative size change per frame.
    pub scale_per_frame: f64,
    pub occluder: Option<Occluder>,
    /// Amplitude of the uniform background noise.
    pub noise: f64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        Self {
            width: 320,
            height: 320,
            frames: 60,
            target_w: 48.0,
            target_h: 40.0,
            start: None,
            velocity: [2.0, 1.0],
            scale_per_frame: 1.0,
            occluder: None,
            noise: 60.0,
        }
    }
}

impl SequenceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < MIN_FRAME_SIDE || self.height < MIN_FRAME_SIDE {
            return Err(Error::Config(format!(
                "frame {}x{} below {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}",
                self.width, self.height
            )));
        }
        if !(self.target_w > 0.0 && self.target_h > 0.0) || self.scale_per_frame <= 0.0 {
            return Err(Error::Config("target size and scale must be positive".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("sequence needs at least one frame".into()));
        }
        Ok(())
    }

    /// Ground-truth boxes without rendering.
    pub fn trajectory(&self) -> Result<Vec<BBox>> {
        self.validate()?;
        let (fw, fh) = (self.width as f64, self.height as f64);
        let [mut cx, mut cy] = self.start.unwrap_or([fw / 2.0, fh / 2.0]);
        let [mut vx, mut vy] = self.velocity;
        let mut scale = 1.0;
        let mut out = Vec::with_capacity(self.frames);
        for t in 0..self.frames {
            let (w, h) = (self.target_w * scale, self.target_h * scale);
            if w > fw || h > fh {
                return Err(Error::Config(format!(
                    "target {w:.1}x{h:.1} at frame {t} larger than frame {}x{}",
                    self.width, self.height
                )));
            }
            if t > 0 {
                cx += vx;
                cy += vy;
            }
            (cx, vx) = bounce(cx, vx, w / 2.0, fw - w / 2.0);
            (cy, vy) = bounce(cy, vy, h / 2.0, fh - h / 2.0);
            out.push(BBox::new(cx, cy, w, h));
            scale *= self.scale_per_frame;
        }
        Ok(out)
    }
}

fn bounce(mut p: f64, mut v: f64, lo: f64, hi: f64) -> (f64, f64) {
    if p < lo {
        p = 2.0 * lo - p;
        v = -v;
    }
    if p > hi {
        p = 2.0 * hi - p;
        v = -v;
    }
    (p.clamp(lo, hi), v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub frames: Vec<Image>,
    pub gt: Vec<BBox>,
    pub seed: u64,
    pub spec: SequenceSpec,
}

const TEXTURE: usize = 8;

/// Render the sequence described by `spec`; bit-identical for equal inputs.
pub fn gen_sequence(seed: u64, spec: &SequenceSpec) -> Result<SyntheticSequence> {
    let gt = spec.trajectory()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);

    let mut background = Image::new(w, h);
    let base = [90.0, 100.0, 110.0];
    for y in 0..h {
        for x in 0..w {
            let n: f64 = rng.gen_range(-0.5..0.5) * spec.noise;
            let rgb = base.map(|b| (b + n + rng.gen_range(-0.1..0.1) * spec.noise).clamp(0.0, 255.0) as u8);
            background.set_pixel(x, y, rgb);
        }
    }
    let texture: Vec<[u8; 3]> = (0..TEXTURE * TEXTURE)
        .map(|k| {
            let (i, j) = (k % TEXTURE, k / TEXTURE);
            if (i + j) % 2 == 0 {
                [rng.gen_range(200..=255), rng.gen_range(40..120), rng.gen_range(0..60)]
            } else {
                [rng.gen_range(0..60), rng.gen_range(150..230), rng.gen_range(200..=255)]
            }
        })
        .collect();

    let frames = gt
        .iter()
        .enumerate()
        .map(|(t, b)| {
            let mut frame = background.clone();
            let (x1, y1, x2, y2) = b.corners();
            let cols = pixel_span(x1, x2, w);
            let rows = pixel_span(y1, y2, h);
            for y in rows.clone() {
                let v = ((y as f64 + 0.5 - y1) / b.h * TEXTURE as f64) as usize;
                for x in cols.clone() {
                    let u = ((x as f64 + 0.5 - x1) / b.w * TEXTURE as f64) as usize;
                    frame.set_pixel(x, y, texture[v.min(TEXTURE - 1) * TEXTURE + u.min(TEXTURE - 1)]);
                }
            }
            if let Some(occ) = spec.occluder.as_ref().filter(|o| (o.start..o.end).contains(&t)) {
                for x in pixel_span(occ.x, occ.x + occ.width, w) {
                    for y in 0..h {
                        frame.set_pixel(x, y, [128, 128, 128]);
                    }
                }
            }
            frame
        })
        .collect();

    Ok(SyntheticSequence {
        frames,
        gt,
        seed,
        spec: spec.clone(),
    })
}

/// Pixels whose centers fall in `[lo, hi)`.
fn pixel_span(lo: f64, hi: f64, limit: usize) -> std::ops::Range<usize> {
    let first = (lo - 0.5).ceil().max(0.0) as usize;
    let end = ((hi - 0.5).ceil().max(0.0) as usize).min(limit);
    first.min(end)..end
}
