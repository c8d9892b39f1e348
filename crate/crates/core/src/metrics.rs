//! Weighted confusion scores, PSNR and before/after delta reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forensics::HeatMap;
use crate::image::ImageTensor;
use crate::scalar::Scalar;

pub const PSNR_CAP: f64 = 80.0;

/// Binary ground-truth mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Values must be 0 or 1.
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "mask data length {} for {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::param("mask values must be 0 or 1"));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
}

/// Weighted confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionW {
    pub tp: f64,
    pub fp: f64,
    pub tn: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
}

impl ConfusionW {
    pub fn total(&self) -> f64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Same counts with the false-positive and false-negative labels exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            fp: self.fn_,
            fn_: self.fp,
            ..*self
        }
    }
}

/// `TP = sum H M`, `FN = sum (1 - H) M`, `FP = sum H (1 - M)`, `TN = sum (1 - H)(1 - M)`.
pub fn weighted_confusion<T: Scalar>(heat: &HeatMap<T>, mask: &Mask) -> Result<ConfusionW> {
    if heat.height() != mask.height || heat.width() != mask.width {
        return Err(Error::param(format!(
            "heatmap {}x{} vs mask {}x{}",
            heat.height(),
            heat.width(),
            mask.height,
            mask.width
        )));
    }
    let mut c = ConfusionW::default();
    for (&h, &m) in heat.data().iter().zip(&mask.data) {
        let h = h.to_f64_lossy();
        if !(0.0..=1.0).contains(&h) {
            return Err(Error::param(format!("heat value {h} outside [0, 1]")));
        }
        if m == 1 {
            c.tp += h;
            c.fn_ += 1.0 - h;
        } else {
            c.fp += h;
            c.tn += 1.0 - h;
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub iou: f64,
    pub mcc: f64,
    pub f1: f64,
}

/// IoU, MCC and F1; degenerate denominators give 0.
pub fn score(c: &ConfusionW) -> Scores {
    let ConfusionW { tp, fp, tn, fn_ } = *c;
    let union = tp + fn_ + fp;
    let (iou, f1) = if union > 0.0 {
        (tp / union, 2.0 * tp / (2.0 * tp + fp + fn_))
    } else {
        (0.0, 0.0)
    };
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    let mcc = if factors.iter().any(|&f| f <= 0.0) {
        0.0
    } else {
        let d = factors.iter().product::<f64>().sqrt();
        ((tp * tn - fp * fn_) / d).clamp(-1.0, 1.0)
    };
    Scores { iou, mcc, f1 }
}

/// `10 log10(peak^2 / mse)`, capped at 80 dB (also for `mse = 0`).
pub fn psnr<T: Scalar>(x: &ImageTensor<T>, y: &ImageTensor<T>, peak: f64) -> Result<f64> {
    x.ensure_same_shape(y, "psnr")?;
    let n = x.len().max(1) as f64;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Per-detector comparison of a metric before and after purification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub before: BTreeMap<String, f64>,
    pub after: BTreeMap<String, f64>,
    pub delta: BTreeMap<String, f64>,
    /// Deltas averaged with weights equal to the detectors' scores before
    /// purification (negative weights clipped to 0; 0 if all weights vanish).
    pub avg_w: f64,
}

/// Per-detector means of the after and before sets, their differences and `avg_w`.
///
/// Each input maps detector name to per-image values keyed by image id.
pub fn delta_report(
    before: &BTreeMap<String, BTreeMap<String, f64>>,
    after: &BTreeMap<String, BTreeMap<String, f64>>,
) -> Result<DeltaReport> {
    if before.keys().ne(after.keys()) {
        return Err(Error::param("before and after cover different detectors"));
    }
    let mut report = DeltaReport {
        before: BTreeMap::new(),
        after: BTreeMap::new(),
        delta: BTreeMap::new(),
        avg_w: 0.0,
    };
    let (mut num, mut den) = (0.0, 0.0);
    for (det, b) in before {
        let a = &after[det];
        if b.keys().ne(a.keys()) {
            return Err(Error::param(format!("detector {det}: image sets differ")));
        }
        if b.is_empty() {
            return Err(Error::param(format!("detector {det}: no images")));
        }
        let mb = b.values().sum::<f64>() / b.len() as f64;
        let ma = a.values().sum::<f64>() / a.len() as f64;
        let d = ma - mb;
        let w = mb.max(0.0);
        num += w * d;
        den += w;
        report.before.insert(det.clone(), mb);
        report.after.insert(det.clone(), ma);
        report.delta.insert(det.clone(), d);
    }
    report.avg_w = if den > 0.0 { num / den } else { 0.0 };
    Ok(report)
}
