//! 8-bit RGB frames and the crop/resize used to build network inputs.

use std::path::Path;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "{} bytes for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn channel_mean(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c] as f64;
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        acc.map(|s| s / n)
    }

    /// Whether `b` lies inside the frame with positive area.
    pub fn contains_box(&self, b: &BBox) -> bool {
        let (x1, y1, x2, y2) = b.corners();
        b.is_valid() && x1 >= 0.0 && y1 >= 0.0 && x2 <= self.width as f64 && y2 <= self.height as f64
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let fmt = |e: png::DecodingError| Error::Format {
            what: "png",
            msg: format!("{}: {e}", path.display()),
        };
        let mut reader = decoder.read_info().map_err(fmt)?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(fmt)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let buf = &buf[..info.buffer_size()];
        let data = match info.color_type {
            png::ColorType::Rgb => buf.to_vec(),
            png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            png::ColorType::Indexed => {
                return Err(Error::Format {
                    what: "png",
                    msg: format!("{}: unexpanded palette", path.display()),
                })
            }
        };
        Self::from_raw(w, h, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let fmt = |e: png::EncodingError| Error::Format {
            what: "png",
            msg: format!("{}: {e}", path.display()),
        };
        let mut writer = encoder.write_header().map_err(fmt)?;
        writer.write_image_data(&self.data).map_err(fmt)?;
        writer.finish().map_err(fmt)
    }
}

/// Square crop window in frame coordinates (pixel centers at `i + 0.5`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub out_size: usize,
}

impl CropWindow {
    /// Frame pixels per crop pixel.
    pub fn scale(&self) -> f64 {
        self.side / self.out_size as f64
    }

    /// Crop coordinate to frame coordinate.
    pub fn to_frame(&self, u: f64, v: f64) -> (f64, f64) {
        let half = self.out_size as f64 / 2.0;
        (self.cx + (u - half) * self.scale(), self.cy + (v - half) * self.scale())
    }

    /// Frame coordinate to crop coordinate.
    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        let half = self.out_size as f64 / 2.0;
        ((x - self.cx) / self.scale() + half, (y - self.cy) / self.scale() + half)
    }

    pub fn box_to_frame(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.to_frame(b.cx, b.cy);
        BBox::new(cx, cy, b.w * self.scale(), b.h * self.scale())
    }

    pub fn box_to_crop(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.to_crop(b.cx, b.cy);
        BBox::new(cx, cy, b.w / self.scale(), b.h / self.scale())
    }
}

/// Map raw 8-bit intensity to network input range.
pub fn normalize(v: f64) -> f64 {
    v / 255.0 - 0.5
}

/// Bilinear crop of `window` into a `[3, S, S]` tensor (normalized).
/// Samples that fall outside the frame take the per-channel mean color.
pub fn crop(image: &Image, window: &CropWindow) -> Tensor {
    let s = window.out_size;
    let mean = image.channel_mean();
    let (w, h) = (image.width as isize, image.height as isize);
    let mut out = vec![0.0; 3 * s * s];
    let plane = s * s;
    for row in 0..s {
        for col in 0..s {
            let (x, y) = window.to_frame(col as f64 + 0.5, row as f64 + 0.5);
            // pixel-index space: centers at integers
            let (u, v) = (x - 0.5, y - 0.5);
            let (u0, v0) = (u.floor(), v.floor());
            let (fu, fv) = (u - u0, v - v0);
            let (u0, v0) = (u0 as isize, v0 as isize);
            let mut acc = [0.0; 3];
            for (dy, wy) in [(0, 1.0 - fv), (1, fv)] {
                for (dx, wx) in [(0, 1.0 - fu), (1, fu)] {
                    let weight = wx * wy;
                    if weight == 0.0 {
                        continue;
                    }
                    let (px, py) = (u0 + dx, v0 + dy);
                    let rgb = if px >= 0 && py >= 0 && px < w && py < h {
                        let p = image.pixel(px as usize, py as usize);
                        [p[0] as f64, p[1] as f64, p[2] as f64]
                    } else {
                        mean
                    };
                    for c in 0..3 {
                        acc[c] += weight * rgb[c];
                    }
                }
            }
            for c in 0..3 {
                out[c * plane + row * s + col] = normalize(acc[c]);
            }
        }
    }
    Tensor::from_parts(vec![3, s, s], out)
}
