//! Sequence directories on disk: numbered PNG frames plus
//! `groundtruth.txt` with one top-left `x,y,w,h` line per frame.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::synth::SyntheticSequence;

pub const GROUNDTRUTH: &str = "groundtruth.txt";

/// Parse `x,y,w,h` lines (comma, tab or space separated). Blank lines are
/// skipped.
pub fn parse_boxes(text: &str) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        let bad = |msg: String| Error::Format {
            what: "box list",
            msg: format!("line {}: {msg}", i + 1),
        };
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", fields.len())));
        }
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| bad(format!("`{f}` is not a number")))?;
        }
        out.push(BBox::from_xywh(v[0], v[1], v[2], v[3]));
    }
    Ok(out)
}

/// Top-left `x,y,w,h` lines with four decimals.
pub fn format_boxes(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let [x, y, w, h] = b.to_xywh();
        writeln!(s, "{x:.4},{y:.4},{w:.4},{h:.4}").expect("write to string");
    }
    s
}

pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_boxes(&text)
}

pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    std::fs::write(path, format_boxes(boxes)).map_err(|e| Error::io(path, e))
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        let index = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u64>().ok());
        if let (true, Some(index)) = (is_png, index) {
            frames.push((index, path));
        }
    }
    frames.sort();
    Ok(frames.into_iter().map(|(_, p)| p).collect())
}

/// Frames in numeric order and their ground truth.
pub fn read_sequence(dir: &Path) -> Result<(Vec<Image>, Vec<BBox>)> {
    let frames = frame_paths(dir)?
        .iter()
        .map(|p| Image::load_png(p))
        .collect::<Result<Vec<_>>>()?;
    if frames.is_empty() {
        return Err(Error::Format {
            what: "sequence",
            msg: format!("no numbered PNG frames in {}", dir.display()),
        });
    }
    let gt = read_boxes(&dir.join(GROUNDTRUTH))?;
    if gt.len() != frames.len() {
        return Err(Error::Format {
            what: "sequence",
            msg: format!("{} frames but {} ground-truth boxes", frames.len(), gt.len()),
        });
    }
    Ok((frames, gt))
}

/// Write frames as `00000001.png`, ... and the ground truth.
pub fn write_sequence(dir: &Path, seq: &SyntheticSequence) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in seq.frames.iter().enumerate() {
        frame.save_png(&dir.join(format!("{:08}.png", i + 1)))?;
    }
    write_boxes(&dir.join(GROUNDTRUTH), &seq.gt)
}
