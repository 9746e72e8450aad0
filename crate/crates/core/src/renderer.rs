//! Discrete volumetric integration of `(δ, ξ)` along rays.
//!
//! A ray's received signal is `I = Σ_i T_i ξ_i` with complex transmittance
//! `T_i = exp(Σ_{j<i} δ_j)`. Channels sum the rays of a fixed direction grid
//! around the receiver; spectra keep one value per direction bin.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::io::{Read, Write};

use num_complex::Complex64;
use thiserror::Error;

use crate::field::{sample_ray, FieldError, FieldModel, RayBatch};
use crate::geometry::Vec3;
use crate::numerics::{Bound, CustomOp, NumericsError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("sample {index} has positive attenuation {value}")]
    PositiveAttenuation { index: usize, value: f64 },
    #[error("render input shape: {0}")]
    Shape(String),
    #[error("spectrum file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Received complex value per subcarrier.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSignal(pub Vec<Complex64>);

fn check_inputs(delta: &[Complex64], xi: &[Complex64], k: usize) -> Result<(), RenderError> {
    if xi.len() != delta.len() * k {
        return Err(RenderError::Shape(format!("{} samples × {k} subcarriers vs {} emissions", delta.len(), xi.len())));
    }
    if let Some((index, d)) = delta.iter().enumerate().find(|(_, d)| !(d.re <= 0.0)) {
        return Err(RenderError::PositiveAttenuation { index, value: d.re });
    }
    Ok(())
}

/// `Σ_i exp(Σ_{j<i} δ_j) ξ_i`, with `xi` row-major `S × K`.
pub fn render_ray(delta: &[Complex64], xi: &[Complex64], k: usize) -> Result<RenderedSignal, RenderError> {
    check_inputs(delta, xi, k)?;
    let mut out = vec![Complex64::new(0.0, 0.0); k];
    let mut acc = Complex64::new(0.0, 0.0);
    for (i, d) in delta.iter().enumerate() {
        let t = acc.exp();
        out.iter_mut().zip(&xi[i * k..(i + 1) * k]).for_each(|(o, x)| *o += t * x);
        acc += d;
    }
    Ok(RenderedSignal(out))
}

/// Same sum, recomputing every cumulative attenuation from scratch.
pub fn render_ray_reference(delta: &[Complex64], xi: &[Complex64], k: usize) -> Result<RenderedSignal, RenderError> {
    check_inputs(delta, xi, k)?;
    let s = delta.len();
    let mut out = vec![Complex64::new(0.0, 0.0); k];
    for (f, o) in out.iter_mut().enumerate() {
        for i in 0..s {
            let mut sum = Complex64::new(0.0, 0.0);
            for d in &delta[..i] {
                sum += d;
            }
            *o += sum.exp() * xi[i * k + f];
        }
    }
    Ok(RenderedSignal(out))
}

struct RenderOp {
    samples: usize,
}

/// Transmittance of every sample, `T_i` for rows grouped into rays.
fn transmittances(delta: &Tensor, samples: usize) -> Vec<Complex64> {
    let n = delta.rows();
    let mut t = Vec::with_capacity(n);
    for ray in delta.data().chunks(2 * samples) {
        let mut acc = Complex64::new(0.0, 0.0);
        for d in ray.chunks(2) {
            t.push(acc.exp());
            acc += Complex64::new(d[0], d[1]);
        }
    }
    t
}

impl CustomOp for RenderOp {
    fn name(&self) -> &'static str {
        "render_rays"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (delta, xr, xim) = (inputs[0], inputs[1], inputs[2]);
        let (n, k, s) = (delta.rows(), xr.cols(), self.samples);
        let t = transmittances(delta, s);
        let mut dd = vec![0.0; n * 2];
        let mut dxr = vec![0.0; n * k];
        let mut dxi = vec![0.0; n * k];
        for ray in 0..n / s {
            let g = &grad[ray * 2 * k..(ray + 1) * 2 * k];
            let gk = |f: usize| Complex64::new(g[f], g[k + f]);
            // Gradient with respect to each sample's cumulative exponent.
            let mut gc = vec![Complex64::new(0.0, 0.0); s];
            for (i, gci) in gc.iter_mut().enumerate() {
                let row = ray * s + i;
                let ti = t[row];
                for f in 0..k {
                    let xi = Complex64::new(xr.get(row, f), xim.get(row, f));
                    let dx = ti.conj() * gk(f);
                    dxr[row * k + f] = dx.re;
                    dxi[row * k + f] = dx.im;
                    *gci += (ti * xi).conj() * gk(f);
                }
            }
            // δ_j feeds every later exponent.
            let mut suffix = Complex64::new(0.0, 0.0);
            for j in (0..s).rev() {
                let row = ray * s + j;
                dd[row * 2] = suffix.re;
                dd[row * 2 + 1] = suffix.im;
                suffix += gc[j];
            }
        }
        vec![Some(dd), Some(dxr), Some(dxi)]
    }
}

/// Differentiable rendering of `rows / samples` rays. Inputs are `δ` as
/// `n × 2` and `ξ` as separate `n × K` real and imaginary parts; the output
/// is `rays × 2K`, real parts first.
pub fn render_rays_var<'t>(
    delta: &Var<'t>,
    xi_re: &Var<'t>,
    xi_im: &Var<'t>,
    samples: usize,
) -> Result<Var<'t>, RenderError> {
    let n = delta.rows();
    if delta.shape() != [n, 2] || xi_re.rows() != n || xi_im.shape() != xi_re.shape() {
        return Err(RenderError::Shape(format!(
            "δ {:?}, ξ {:?} / {:?}",
            delta.shape(),
            xi_re.shape(),
            xi_im.shape()
        )));
    }
    if samples == 0 || n % samples != 0 {
        return Err(RenderError::Shape(format!("{n} samples do not split into rays of {samples}")));
    }
    let out = {
        let d = delta.value();
        if let Some((index, v)) = d.data().chunks(2).enumerate().find(|(_, v)| !(v[0] <= 0.0)) {
            return Err(RenderError::PositiveAttenuation { index, value: v[0] });
        }
        let (xr, xi) = (xi_re.value(), xi_im.value());
        let k = xr.cols();
        let t = transmittances(&d, samples);
        let rays = n / samples;
        let mut out = vec![0.0; rays * 2 * k];
        for row in 0..n {
            let ray = row / samples;
            let o = &mut out[ray * 2 * k..(ray + 1) * 2 * k];
            for f in 0..k {
                let v = t[row] * Complex64::new(xr.get(row, f), xi.get(row, f));
                o[f] += v.re;
                o[k + f] += v.im;
            }
        }
        Tensor::matrix(rays, 2 * k, out)?
    };
    Ok(Var::custom(&[*delta, *xi_re, *xi_im], out, Box::new(RenderOp { samples })))
}

/// Equal-area grid over the full sphere: azimuth uniform, sine of elevation
/// uniform, cell centres.
pub fn direction_grid(az_bins: usize, el_bins: usize) -> Vec<Vec3> {
    let mut dirs = Vec::with_capacity(az_bins * el_bins);
    for a in 0..az_bins {
        let az = (a as f64 + 0.5) * TAU / az_bins as f64;
        for e in 0..el_bins {
            let el = (-1.0 + (e as f64 + 0.5) * 2.0 / el_bins as f64).asin();
            dirs.push(Vec3::from_az_el(az, el));
        }
    }
    dirs
}

/// Renders a batch of `(rx, tx)` links, each summed over `directions`.
/// Returns `links × 2K'` (real parts, then imaginary), scaled by the model's
/// output scale.
pub fn render_links_var<'t>(
    model: &FieldModel,
    p: &Bound<'t>,
    tape: &'t Tape,
    links: &[(Vec3, Vec3)],
    directions: &[Vec3],
    freqs: &[usize],
) -> Result<Var<'t>, RenderError> {
    if directions.is_empty() || links.is_empty() {
        return Err(RenderError::Shape("need at least one link and one direction".into()));
    }
    let (s, d) = (model.config.samples, model.config.max_depth);
    let mut rays = Vec::with_capacity(links.len() * directions.len());
    for &(rx, tx) in links {
        for &dir in directions {
            rays.push(sample_ray(rx, dir, tx, s, d)?);
        }
    }
    let batch = RayBatch::from_rays(&rays)?;
    let positions = tape.constant(batch.positions.clone());
    let vox = model.forward(p, &positions, &batch, freqs)?;
    let per_ray = render_rays_var(&vox.delta, &vox.xi_re, &vox.xi_im, s)?;
    Ok(per_ray.segment_sum(directions.len())?.scale(model.output_scale))
}

fn unpack(row: &[f64]) -> Vec<Complex64> {
    let k = row.len() / 2;
    (0..k).map(|f| Complex64::new(row[f], row[k + f])).collect()
}

/// Predicted channel at `freqs` for one link.
pub fn render_channel(
    model: &FieldModel,
    rx: Vec3,
    tx: Vec3,
    directions: &[Vec3],
    freqs: &[usize],
) -> Result<Vec<Complex64>, RenderError> {
    let tape = Tape::new();
    let p = model.store.bind(&tape, false);
    let out = render_links_var(model, &p, &tape, &[(rx, tx)], directions, freqs)?;
    let t = out.value();
    Ok(unpack(t.row(0)))
}

/// Per-direction grid indexed `[az][el]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumGrid {
    pub az_bins: usize,
    pub el_bins: usize,
    pub values: Vec<f64>,
}

impl SpectrumGrid {
    pub fn zeros(az_bins: usize, el_bins: usize) -> Self {
        Self { az_bins, el_bins, values: vec![0.0; az_bins * el_bins] }
    }

    pub fn get(&self, a: usize, e: usize) -> f64 {
        self.values[a * self.el_bins + e]
    }

    /// Centre direction of bin `(a, e)`; elevation bins split `[−90°, 90°]`
    /// uniformly in angle.
    pub fn bin_direction(&self, a: usize, e: usize) -> Vec3 {
        let az = (a as f64 + 0.5) * TAU / self.az_bins as f64;
        let el = -FRAC_PI_2 + (e as f64 + 0.5) * PI / self.el_bins as f64;
        Vec3::from_az_el(az, el)
    }

    /// Bin containing a direction.
    pub fn bin_of(&self, dir: Vec3) -> (usize, usize) {
        let (az, el) = dir.az_el();
        let a = ((az / TAU * self.az_bins as f64) as usize).min(self.az_bins - 1);
        let e = (((el + FRAC_PI_2) / PI * self.el_bins as f64) as usize).min(self.el_bins - 1);
        (a, e)
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Rows of `el_bins` values, one per azimuth bin.
    pub fn as_rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.el_bins).map(<[f64]>::to_vec).collect()
    }

    /// `u32 az_bins`, `u32 el_bins` (little-endian), then `f32` values.
    pub fn write_binary(&self, mut w: impl Write) -> Result<(), RenderError> {
        w.write_all(&(self.az_bins as u32).to_le_bytes())?;
        w.write_all(&(self.el_bins as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(4 * self.values.len());
        self.values.iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes()));
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self, RenderError> {
        let mut h = [0u8; 8];
        r.read_exact(&mut h)?;
        let az = u32::from_le_bytes(h[..4].try_into().expect("4 bytes")) as usize;
        let el = u32::from_le_bytes(h[4..].try_into().expect("4 bytes")) as usize;
        let n = az.checked_mul(el).filter(|&n| n > 0 && n < 1 << 28);
        let n = n.ok_or_else(|| RenderError::Format(format!("bad grid header {az} × {el}")))?;
        let mut raw = vec![0u8; 4 * n];
        r.read_exact(&mut raw)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        Ok(Self { az_bins: az, el_bins: el, values })
    }

    /// CSV with columns `az_bin,el_bin,value`.
    pub fn write_csv(&self, w: impl Write) -> Result<(), RenderError> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["az_bin", "el_bin", "value"]).map_err(|e| RenderError::Format(e.to_string()))?;
        for a in 0..self.az_bins {
            for e in 0..self.el_bins {
                csv.write_record(&[a.to_string(), e.to_string(), self.get(a, e).to_string()])
                    .map_err(|e| RenderError::Format(e.to_string()))?;
            }
        }
        csv.flush()?;
        Ok(())
    }
}

const SPECTRUM_CHUNK: usize = 256;

/// Mean power over subcarriers of each bin's single-ray render.
pub fn render_spectrum(
    model: &FieldModel,
    rx: Vec3,
    tx: Vec3,
    az_bins: usize,
    el_bins: usize,
) -> Result<SpectrumGrid, RenderError> {
    if az_bins == 0 || el_bins == 0 {
        return Err(RenderError::Shape("spectrum needs at least one bin per axis".into()));
    }
    let mut grid = SpectrumGrid::zeros(az_bins, el_bins);
    let dirs: Vec<Vec3> = (0..az_bins).flat_map(|a| (0..el_bins).map(move |e| (a, e))).map(|(a, e)| grid.bin_direction(a, e)).collect();
    let freqs: Vec<usize> = (0..model.n_subcarriers).collect();
    let (s, d) = (model.config.samples, model.config.max_depth);
    for (c, chunk) in dirs.chunks(SPECTRUM_CHUNK).enumerate() {
        let rays = chunk.iter().map(|&dir| sample_ray(rx, dir, tx, s, d)).collect::<Result<Vec<_>, _>>()?;
        let batch = RayBatch::from_rays(&rays)?;
        let tape = Tape::new();
        let p = model.store.bind(&tape, false);
        let vox = model.forward(&p, &tape.constant(batch.positions.clone()), &batch, &freqs)?;
        let out = render_rays_var(&vox.delta, &vox.xi_re, &vox.xi_im, s)?.scale(model.output_scale).to_tensor();
        for r in 0..chunk.len() {
            let power = unpack(out.row(r)).iter().map(|v| v.norm_sqr()).sum::<f64>() / freqs.len() as f64;
            grid.values[c * SPECTRUM_CHUNK + r] = power;
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use crate::geometry::Aabb;
    use crate::numerics::finite_difference_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_instance(rng: &mut ChaCha8Rng, s: usize, k: usize) -> (Vec<Complex64>, Vec<Complex64>) {
        let delta = (0..s).map(|_| c(-rng.random_range(0.0..0.5), rng.random_range(-PI..PI))).collect();
        let xi = (0..s * k).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        (delta, xi)
    }

    #[test]
    fn single_emitter_with_unit_transmittance() {
        let delta = vec![c(0.0, 0.0); 5];
        let mut xi = vec![c(0.0, 0.0); 5 * 3];
        xi[2 * 3 + 1] = c(1.0, 0.0);
        let out = render_ray(&delta, &xi, 3).unwrap();
        assert_eq!(out.0, vec![c(0.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)]);
    }

    #[test]
    fn zero_attenuation_sums_emissions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, xi) = random_instance(&mut rng, 6, 2);
        let out = render_ray(&[c(0.0, 0.0); 6], &xi, 2).unwrap();
        for f in 0..2 {
            let want: Complex64 = (0..6).map(|i| xi[i * 2 + f]).sum();
            assert!((out.0[f] - want).norm() < 1e-15);
        }
    }

    #[test]
    fn reference_examples() {
        let xi = vec![c(0.3, -0.7)];
        assert_eq!(render_ray_reference(&[c(-0.4, 1.0)], &xi, 1).unwrap().0, xi);
        let out = render_ray_reference(&[c(-50.0, 0.0), c(0.0, 0.0)], &[c(0.0, 0.0), c(1.0, 0.0)], 1).unwrap();
        assert!(out.0[0].norm() < 1e-20);
    }

    #[test]
    fn positive_attenuation_rejected() {
        let err = render_ray(&[c(-0.1, 0.0), c(0.2, 0.0)], &[c(1.0, 0.0); 2], 1).unwrap_err();
        assert!(matches!(err, RenderError::PositiveAttenuation { index: 1, .. }));
    }

    #[test]
    fn vectorized_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let (delta, xi) = random_instance(&mut rng, 16, 4);
            let a = render_ray(&delta, &xi, 4).unwrap();
            let b = render_ray_reference(&delta, &xi, 4).unwrap();
            for (x, y) in a.0.iter().zip(&b.0) {
                worst = worst.max((x - y).norm());
            }
        }
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn tape_renderer_matches_plain_and_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (s, k, rays) = (5, 3, 2);
        let mut d = Vec::new();
        let mut xr = Vec::new();
        let mut xim = Vec::new();
        let mut plain = Vec::new();
        for _ in 0..rays {
            let (delta, xi) = random_instance(&mut rng, s, k);
            plain.push(render_ray(&delta, &xi, k).unwrap());
            delta.iter().for_each(|v| d.extend([v.re, v.im]));
            xi.iter().for_each(|v| {
                xr.push(v.re);
                xim.push(v.im);
            });
        }
        let d = Tensor::matrix(rays * s, 2, d).unwrap();
        let xr = Tensor::matrix(rays * s, k, xr).unwrap();
        let xim = Tensor::matrix(rays * s, k, xim).unwrap();
        let tape = Tape::new();
        let out = render_rays_var(&tape.constant(d.clone()), &tape.constant(xr.clone()), &tape.constant(xim.clone()), s)
            .unwrap()
            .to_tensor();
        for (r, sig) in plain.iter().enumerate() {
            assert_eq!(unpack(out.row(r)), sig.0);
        }
        // |I|² summed over subcarriers and rays.
        for which in 0..3 {
            let x = [&d, &xr, &xim][which];
            let r = finite_difference_check(
                |t, v: Var<'_>| {
                    let mut ins = [t.constant(d.clone()), t.constant(xr.clone()), t.constant(xim.clone())];
                    ins[which] = v;
                    Ok::<_, RenderError>(render_rays_var(&ins[0], &ins[1], &ins[2], s)?.square()?.sum())
                },
                x,
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "input {which}: {}", r.max_rel_error);
        }
    }

    proptest! {
        #[test]
        fn transmittance_magnitude_never_increases(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (delta, _) = random_instance(&mut rng, 12, 1);
            let d = Tensor::matrix(12, 2, delta.iter().flat_map(|v| [v.re, v.im]).collect()).unwrap();
            let t = transmittances(&d, 12);
            for w in t.windows(2) {
                prop_assert!(w[1].norm() <= w[0].norm());
            }
        }

        #[test]
        fn rendering_is_linear_in_emission(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (delta, x1) = random_instance(&mut rng, 8, 3);
            let (_, x2) = random_instance(&mut rng, 8, 3);
            let mix: Vec<Complex64> = x1.iter().zip(&x2).map(|(p, q)| p * a + q * b).collect();
            let lhs = render_ray(&delta, &mix, 3).unwrap();
            let r1 = render_ray(&delta, &x1, 3).unwrap();
            let r2 = render_ray(&delta, &x2, 3).unwrap();
            for f in 0..3 {
                prop_assert!((lhs.0[f] - (r1.0[f] * a + r2.0[f] * b)).norm() < 1e-12);
            }
        }
    }

    fn tiny_model() -> FieldModel {
        let cfg = FieldConfig {
            samples: 5,
            max_depth: 3.0,
            att_depth: 2,
            att_width: 8,
            feature_dim: 4,
            rad_depth: 1,
            rad_width: 8,
            random_features: 8,
            pos_bands: 2,
            dir_bands: 2,
            freq_bands: 2,
            ..FieldConfig::default()
        };
        let mut m = FieldModel::new(cfg, Aabb::new(Vec3::ZERO, Vec3::new(5.0, 4.0, 3.0)), 6).unwrap();
        let w = m.rad_head().w;
        m.store.get_mut(w).scale_in_place(20.0);
        m
    }

    #[test]
    fn direction_grid_is_unit_and_sized() {
        let g = direction_grid(36, 9);
        assert_eq!(g.len(), 324);
        assert!(g.iter().all(|d| (d.norm() - 1.0).abs() < 1e-12));
        let mean_z: f64 = g.iter().map(|d| d.z()).sum::<f64>() / g.len() as f64;
        assert!(mean_z.abs() < 1e-12);
    }

    #[test]
    fn channel_with_one_direction_is_one_ray() {
        let m = tiny_model();
        let (rx, tx) = (Vec3::new(2.0, 2.0, 1.0), Vec3::new(1.2, 2.0, 1.5));
        let dir = Vec3::from_az_el(0.4, 0.1);
        let h = render_channel(&m, rx, tx, &[dir], &[0, 2, 5]).unwrap();
        let ray = sample_ray(rx, dir, tx, m.config.samples, m.config.max_depth).unwrap();
        let v = m.evaluate(&[ray], &[0, 2, 5]).unwrap();
        let delta: Vec<Complex64> = v.delta.data().chunks(2).map(|d| c(d[0], d[1])).collect();
        let xi: Vec<Complex64> = v.xi_re.data().iter().zip(v.xi_im.data()).map(|(&a, &b)| c(a, b)).collect();
        let want = render_ray(&delta, &xi, 3).unwrap();
        for (a, b) in h.iter().zip(&want.0) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    fn zero_emission(m: &mut FieldModel) {
        let head = m.rad_head().clone();
        for id in [head.w, head.b] {
            m.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    #[test]
    fn zero_emission_renders_zero() {
        let mut m = tiny_model();
        zero_emission(&mut m);
        let h = render_channel(&m, Vec3::new(2.0, 2.0, 1.0), Vec3::new(1.0, 1.0, 1.0), &direction_grid(4, 2), &[0, 1]).unwrap();
        assert!(h.iter().all(|v| v.norm() == 0.0));
        let g = render_spectrum(&m, Vec3::new(2.0, 2.0, 1.0), Vec3::new(1.0, 1.0, 1.0), 6, 3).unwrap();
        assert_eq!(g.values.len(), 18);
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_emission_doubles_channel() {
        let m = tiny_model();
        let mut m2 = m.clone();
        let head = m2.rad_head().clone();
        let (bre, bim) = m2.xi_bias();
        for id in [head.w, head.b, bre, bim] {
            m2.store.get_mut(id).scale_in_place(2.0);
        }
        let args = (Vec3::new(2.5, 1.0, 1.0), Vec3::new(1.2, 2.0, 1.5));
        let dirs = direction_grid(3, 2);
        let h1 = render_channel(&m, args.0, args.1, &dirs, &[0, 3, 4]).unwrap();
        let h2 = render_channel(&m2, args.0, args.1, &dirs, &[0, 3, 4]).unwrap();
        for (a, b) in h1.iter().zip(&h2) {
            assert!((a * 2.0 - b).norm() <= 1e-12 * b.norm().max(1e-300));
        }
    }

    #[test]
    fn spectrum_sizes_and_binning() {
        let g = SpectrumGrid::zeros(360, 90);
        assert_eq!(g.values.len(), 32400);
        assert_eq!(SpectrumGrid::zeros(36, 9).values.len(), 324);
        for a in [0, 17, 35] {
            for e in [0, 4, 8] {
                let g = SpectrumGrid::zeros(36, 9);
                assert_eq!(g.bin_of(g.bin_direction(a, e)), (a, e));
            }
        }
    }

    #[test]
    fn spectrum_binary_and_csv_export() {
        let mut g = SpectrumGrid::zeros(3, 2);
        g.values = vec![0.5, 1.0, 2.0, 0.0, 0.25, 8.0];
        let mut buf = Vec::new();
        g.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..8], &[3, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(buf.len(), 8 + 4 * 6);
        assert_eq!(SpectrumGrid::read_binary(buf.as_slice()).unwrap(), g);
        let mut csv = Vec::new();
        g.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("az_bin,el_bin,value\n0,0,0.5\n"));
        assert_eq!(text.lines().count(), 7);
    }
}
