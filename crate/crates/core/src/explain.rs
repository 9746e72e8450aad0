//! Voxel-coordinate attributions: rendered-output Jacobians, importance
//! scores and MoRF/LeRF perturbation curves.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldError, FieldModel, RayBatch, RaySample};
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::renderer::{render_rays_var, RenderError};

const NORM_EPS: f64 = 1e-12;
const SCHEDULE_DEDUP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("non-finite Jacobian entry for output {output}")]
    NonFinite { output: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid mask fractions: {0}")]
    Fractions(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Order {
    /// Most relevant first.
    MoRF,
    /// Least relevant first.
    LeRF,
}

impl fmt::Display for Order {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Order::MoRF => "morf",
            Order::LeRF => "lerf",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceCurve {
    pub order: Order,
    pub fractions: Vec<f64>,
    pub distortions: Vec<f64>,
    /// Set when an output norm fell below the normalization epsilon.
    pub degenerate: bool,
}

/// Rendered, scaled output of one ray as a `1 × 2K` var: real parts, then
/// imaginary parts.
fn ray_output<'t>(
    model: &FieldModel,
    tape: &'t Tape,
    positions: &Var<'t>,
    batch: &RayBatch,
    freqs: &[usize],
) -> Result<Var<'t>, ExplainError> {
    let p = model.store.bind(tape, false);
    let vox = model.forward(&p, positions, batch, freqs)?;
    Ok(render_rays_var(&vox.delta, &vox.xi_re, &vox.xi_im, batch.samples)?.scale(model.output_scale))
}

fn plain_output(model: &FieldModel, positions: Tensor, batch: &RayBatch, freqs: &[usize]) -> Result<Vec<f64>, ExplainError> {
    let tape = Tape::new();
    let pos = tape.constant(positions);
    Ok(ray_output(model, &tape, &pos, batch, freqs)?.to_tensor().into_data())
}

/// `∂ output_o / ∂ voxel coordinate`, shape `2K × 3S`. Column `3s + a` is axis
/// `a` of sample `s`; rows follow the output layout of the renderer.
pub fn jacobian(model: &FieldModel, ray: &RaySample, freqs: &[usize]) -> Result<Tensor, ExplainError> {
    let batch = RayBatch::from_rays(std::slice::from_ref(ray))?;
    let tape = Tape::new();
    let pos = tape.var(batch.positions.clone());
    let out = ray_output(model, &tape, &pos, &batch, freqs)?;
    let (rows, cols) = (out.cols(), 3 * batch.samples);
    let mut data = Vec::with_capacity(rows * cols);
    for o in 0..rows {
        let grads = tape.backward(&out.slice_cols(o, o + 1)?.sum())?;
        let g = grads.wrt(&pos);
        if !g.is_finite() {
            return Err(ExplainError::NonFinite { output: o });
        }
        data.extend_from_slice(g.data());
    }
    Ok(Tensor::matrix(rows, cols, data)?)
}

/// `Σ_o |J[o, f]|` per feature.
pub fn importance_scores(j: &Tensor) -> Vec<f64> {
    let cols = j.cols();
    let mut out = vec![0.0; cols];
    for r in 0..j.rows() {
        for (s, v) in out.iter_mut().zip(j.row(r)) {
            *s += v.abs();
        }
    }
    out
}

/// Sorted union of `{0, 1}`, `n_log` geometric points from `1/n_features`
/// to 1, and the percentiles `i/n_linear`.
pub fn mask_schedule(n_features: usize, n_log: usize, n_linear: usize) -> Vec<f64> {
    let n = n_features.max(1) as f64;
    let mut pts = vec![0.0, 1.0];
    match n_log {
        0 => {}
        1 => pts.push(1.0 / n),
        _ => pts.extend((0..n_log).map(|i| ((1.0 / n).ln() * (1.0 - i as f64 / (n_log - 1) as f64)).exp())),
    }
    if n_linear > 0 {
        pts.extend((0..=n_linear).map(|i| i as f64 / n_linear as f64));
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|a, b| (*a - *b).abs() < SCHEDULE_DEDUP);
    pts
}

/// Feature indices in masking order; ties go to the lower index.
pub fn masking_order(scores: &[f64], order: Order) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    match order {
        Order::MoRF => idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))),
        Order::LeRF => idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))),
    }
    idx
}

fn normalized(v: &[f64]) -> (Vec<f64>, bool) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (v.iter().map(|x| x / n.max(NORM_EPS)).collect(), n < NORM_EPS)
}

/// Masks the leading `round(fraction · 3S)` features of the chosen order with
/// the scene-centre coordinate and records the MSE between L2-normalized
/// masked and unmasked outputs.
pub fn perturbation_curve(
    model: &FieldModel,
    ray: &RaySample,
    scores: &[f64],
    order: Order,
    fractions: &[f64],
    freqs: &[usize],
) -> Result<ImportanceCurve, ExplainError> {
    let batch = RayBatch::from_rays(std::slice::from_ref(ray))?;
    let n = 3 * batch.samples;
    if scores.len() != n {
        return Err(ExplainError::Shape(format!("{} scores for {n} features", scores.len())));
    }
    if fractions.first() != Some(&0.0) {
        return Err(ExplainError::Fractions("schedule must start at 0".into()));
    }
    if fractions.windows(2).any(|w| !(w[1] > w[0])) || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(ExplainError::Fractions("fractions must increase strictly within [0, 1]".into()));
    }
    let center = model.position_encoder.bounds.center();
    let ranked = masking_order(scores, order);
    let (base, mut degenerate) = normalized(&plain_output(model, batch.positions.clone(), &batch, freqs)?);
    let mut distortions = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let count = ((f * n as f64).round() as usize).min(n);
        if count == 0 {
            distortions.push(0.0);
            continue;
        }
        let mut pos = batch.positions.clone();
        for &feat in &ranked[..count] {
            pos.data_mut()[feat] = center.0[feat % 3];
        }
        let (out, d) = normalized(&plain_output(model, pos, &batch, freqs)?);
        degenerate |= d;
        let mse = out.iter().zip(&base).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / out.len() as f64;
        distortions.push(mse);
    }
    Ok(ImportanceCurve { order, fractions: fractions.to_vec(), distortions, degenerate })
}

/// Trapezoidal area under distortion against fraction.
pub fn aopc(curve: &ImportanceCurve) -> f64 {
    curve
        .fractions
        .windows(2)
        .zip(curve.distortions.windows(2))
        .map(|(f, d)| (f[1] - f[0]) * (d[0] + d[1]) / 2.0)
        .sum()
}

/// Columns `order, fraction, distortion`.
pub fn write_curves_csv(w: impl Write, curves: &[ImportanceCurve]) -> Result<(), ExplainError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["order", "fraction", "distortion"])?;
    for c in curves {
        for (f, d) in c.fractions.iter().zip(&c.distortions) {
            out.write_record([c.order.to_string(), f.to_string(), d.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Matrix with a header of voxel coordinates (`x0, y0, z0, x1, …`) and one
/// labelled row per output (`re[k]`, then `im[k]`).
pub fn write_jacobian_csv(w: impl Write, j: &Tensor, freqs: &[usize]) -> Result<(), ExplainError> {
    if j.rows() != 2 * freqs.len() || j.cols() % 3 != 0 {
        return Err(ExplainError::Shape(format!("{:?} Jacobian for {} subcarriers", j.shape(), freqs.len())));
    }
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["output".to_string()];
    header.extend((0..j.cols()).map(|c| format!("{}{}", ["x", "y", "z"][c % 3], c / 3)));
    out.write_record(&header)?;
    for r in 0..j.rows() {
        let part = if r < freqs.len() { "re" } else { "im" };
        let mut row = vec![format!("{part}[{}]", freqs[r % freqs.len()])];
        row.extend(j.row(r).iter().map(|v| v.to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}
