//! SNR, SSIM and empirical CDF.

use num_complex::Complex64;
use thiserror::Error;

use crate::renderer::SpectrumGrid;

pub const SNR_CAP_DB: f64 = 100.0;
const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("ground truth has zero power")]
    ZeroSignal,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no values")]
    Empty,
    #[error("non-finite input")]
    NonFinite,
}

/// `10·log10(Σ|gt|² / Σ|gt − pred|²)`, capped at [`SNR_CAP_DB`].
pub fn snr_db(pred: &[Complex64], gt: &[Complex64]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(MetricError::Shape(format!("{} predictions for {} targets", pred.len(), gt.len())));
    }
    if pred.iter().chain(gt).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let signal: f64 = gt.iter().map(Complex64::norm_sqr).sum();
    if signal == 0.0 {
        return Err(MetricError::ZeroSignal);
    }
    let residual: f64 = pred.iter().zip(gt).map(|(p, g)| (g - p).norm_sqr()).sum();
    if residual < 1e-10 * signal {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (signal / residual).log10()).min(SNR_CAP_DB))
}

/// Mean local SSIM over every valid 7×7 window, with `L` the joint data
/// range of both grids (1 when both are constant and equal).
pub fn ssim(a: &SpectrumGrid, b: &SpectrumGrid) -> Result<f64, MetricError> {
    let (rows, cols) = (a.az_bins, a.el_bins);
    if (rows, cols) != (b.az_bins, b.el_bins) {
        return Err(MetricError::Shape(format!("{rows}×{cols} against {}×{}", b.az_bins, b.el_bins)));
    }
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(MetricError::Shape(format!("{rows}×{cols} grid is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window")));
    }
    if a.values.iter().chain(&b.values).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let (lo, hi) = a.values.iter().chain(&b.values).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=rows - SSIM_WINDOW {
        for c in 0..=cols - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in r..r + SSIM_WINDOW {
                for j in c..c + SSIM_WINDOW {
                    let (x, y) = (a.get(i, j), b.get(i, j));
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Ascending `(value, fraction ≤ value)` pairs; tied values all carry the
/// fraction at the end of their run.
pub fn cdf(values: &[f64]) -> Result<Vec<(f64, f64)>, MetricError> {
    if values.is_empty() {
        return Err(MetricError::Empty);
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(MetricError::NonFinite);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let frac = (j + 1) as f64 / n as f64;
        out.extend((i..=j).map(|k| (sorted[k], frac)));
        i = j + 1;
    }
    Ok(out)
}
