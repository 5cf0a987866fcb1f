//! One-pass evaluation: precision over center-error thresholds and success
//! over IoU thresholds.

use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};

/// Center-error thresholds `0..=50` px.
pub const PRECISION_THRESHOLDS: usize = 51;
/// IoU thresholds `0, 0.05, ..., 1`.
pub const SUCCESS_THRESHOLDS: usize = 21;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpeResult {
    /// Fraction of frames with center error strictly below 20 px.
    pub precision_at_20: f64,
    /// `precision_curve[t]`: fraction with center error `< t`.
    pub precision_curve: Vec<f64>,
    /// Mean of `success_curve`.
    pub success_auc: f64,
    /// `success_curve[k]`: fraction with IoU `>= k * 0.05`.
    pub success_curve: Vec<f64>,
}

pub fn success_threshold(k: usize) -> f64 {
    k as f64 / (SUCCESS_THRESHOLDS - 1) as f64
}

pub fn eval_ope(pred: &[BBox], gt: &[BBox]) -> Result<OpeResult> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::InvalidArgument("eval_ope needs at least one frame".into()));
    }
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len() as f64;
    let errors: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.center_distance(g)).collect();
    let overlaps: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();

    let precision_curve: Vec<f64> = (0..PRECISION_THRESHOLDS)
        .map(|t| errors.iter().filter(|&&e| e < t as f64).count() as f64 / n)
        .collect();
    let success_curve: Vec<f64> = (0..SUCCESS_THRESHOLDS)
        .map(|k| {
            let t = success_threshold(k);
            overlaps.iter().filter(|&&o| o >= t).count() as f64 / n
        })
        .collect();
    let success_auc = success_curve.iter().sum::<f64>() / SUCCESS_THRESHOLDS as f64;
    Ok(OpeResult {
        precision_at_20: precision_curve[20],
        precision_curve,
        success_auc,
        success_curve,
    })
}

/// Mean per-frame IoU.
pub fn mean_iou(pred: &[BBox], gt: &[BBox]) -> f64 {
    let n = pred.len().min(gt.len());
    if n == 0 {
        return 0.0;
    }
    pred.iter().zip(gt).map(|(p, g)| iou(p, g)).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_tracking() {
        let gt: Vec<BBox> = (0..10).map(|k| BBox::new(50.0 + k as f64, 60.0, 20.0, 30.0)).collect();
        let r = eval_ope(&gt, &gt).unwrap();
        assert_eq!(r.precision_at_20, 1.0);
        assert_eq!(r.success_auc, 1.0);
        assert_eq!(r.precision_curve[0], 0.0);
    }

    #[test]
    fn constant_offset_of_25() {
        let gt: Vec<BBox> = (0..10).map(|k| BBox::new(50.0 + k as f64, 60.0, 20.0, 30.0)).collect();
        let pred: Vec<BBox> = gt.iter().map(|b| BBox::new(b.cx + 15.0, b.cy + 20.0, b.w, b.h)).collect();
        let r = eval_ope(&pred, &gt).unwrap();
        assert_eq!(r.precision_at_20, 0.0);
        assert_eq!(r.precision_curve[25], 0.0);
        assert_eq!(r.precision_curve[26], 1.0);
    }

    #[test]
    fn errors() {
        assert!(eval_ope(&[], &[]).is_err());
        let b = BBox::new(1.0, 1.0, 1.0, 1.0);
        assert!(eval_ope(&[b], &[b, b]).is_err());
    }
}
