//! The ray-in-ray-out network pair.
//!
//! Each ray is a sequence of voxels ordered by distance from the receiver.
//! The attenuation network maps encoded voxel positions to a complex
//! log-transmittance `δ` and a feature vector `f`; the radiance network maps
//! `f` together with the encoded direction and transmitter position to a
//! complex emission `ξ` per subcarrier. Both run causal attention along the
//! ray, so voxel `i` only sees voxels at or before it.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionBlock, AttentionError};
use crate::geometry::{Aabb, Vec3};
use crate::numerics::{softplus, Bound, NumericsError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::powermlp::{bound_for_variance, uniform_tensor, NormKind, PowerMlpError, PowerMlpStack};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("voxel {index} at {position:?} lies outside the encoder bounds")]
    OutOfBounds { index: usize, position: [f64; 3] },
    #[error("field input shape: {0}")]
    Shape(String),
    #[error("field configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    PowerMlp(#[from] PowerMlpError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    /// Samples per ray.
    pub samples: usize,
    /// Depth of the farthest sample, meters.
    pub max_depth: f64,
    pub ell: u32,
    pub att_depth: usize,
    pub att_width: usize,
    pub feature_dim: usize,
    pub rad_depth: usize,
    pub rad_width: usize,
    pub attention_blocks: usize,
    pub heads: usize,
    pub random_features: usize,
    pub orthogonal_features: bool,
    pub pos_bands: usize,
    pub dir_bands: usize,
    pub freq_bands: usize,
    pub attention: bool,
    pub residual: bool,
    pub norm: NormKind,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            max_depth: 8.0,
            ell: 3,
            att_depth: 8,
            att_width: 256,
            feature_dim: 128,
            rad_depth: 2,
            rad_width: 512,
            attention_blocks: 2,
            heads: 1,
            random_features: 64,
            orthogonal_features: true,
            pos_bands: 10,
            dir_bands: 4,
            freq_bands: 4,
            attention: true,
            residual: true,
            norm: NormKind::None,
            seed: 0,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        let positive = [
            ("samples", self.samples),
            ("att_depth", self.att_depth),
            ("att_width", self.att_width),
            ("feature_dim", self.feature_dim),
            ("rad_depth", self.rad_depth),
            ("rad_width", self.rad_width),
            ("heads", self.heads),
            ("random_features", self.random_features),
            ("pos_bands", self.pos_bands),
            ("dir_bands", self.dir_bands),
            ("freq_bands", self.freq_bands),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(FieldError::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.max_depth > 0.0 && self.max_depth.is_finite()) {
            return Err(FieldError::Config("max_depth must be positive".into()));
        }
        if !(1..=8).contains(&self.ell) {
            return Err(FieldError::Config(format!("ell must be in 1..=8, got {}", self.ell)));
        }
        if self.pos_bands > 24 || self.dir_bands > 24 || self.freq_bands > 24 {
            return Err(FieldError::Config("encoder bands above 24 lose all precision".into()));
        }
        if self.attention {
            for (name, w) in [("feature_dim", self.feature_dim), ("rad_width", self.rad_width)] {
                if w % self.heads != 0 {
                    return Err(FieldError::Config(format!("{name} {w} is not divisible by {} heads", self.heads)));
                }
            }
        }
        Ok(())
    }
}

/// Sinusoidal encoding of already-normalized coordinates: per coordinate
/// `p`, `(sin(2^k π p), cos(2^k π p))` for `k = 0..bands`.
pub fn positional_encode(v: &[f64], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len() * 2 * bands);
    for &p in v {
        for k in 0..bands {
            let a = p * band_freq(k);
            out.push(a.sin());
            out.push((a + FRAC_PI_2).sin());
        }
    }
    out
}

fn band_freq(k: usize) -> f64 {
    (1u64 << k) as f64 * PI
}

/// Maps world coordinates in `bounds` to `[−1, 1]` before encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct PointEncoder {
    pub bounds: Aabb,
    pub bands: usize,
    center: Vec3,
    inv_half: Vec3,
}

impl PointEncoder {
    pub fn new(bounds: Aabb, bands: usize) -> Result<Self, FieldError> {
        if !bounds.is_valid() {
            return Err(FieldError::Config(format!("degenerate encoder bounds {bounds:?}")));
        }
        let h = bounds.half_extent();
        Ok(Self { bounds, bands, center: bounds.center(), inv_half: Vec3::new(1.0 / h.x(), 1.0 / h.y(), 1.0 / h.z()) })
    }

    pub fn width(&self) -> usize {
        6 * self.bands
    }

    pub fn normalize(&self, p: Vec3) -> [f64; 3] {
        let d = p - self.center;
        [d.x() * self.inv_half.x(), d.y() * self.inv_half.y(), d.z() * self.inv_half.z()]
    }

    pub fn encode(&self, p: Vec3, index: usize) -> Result<Vec<f64>, FieldError> {
        self.check(p, index)?;
        Ok(positional_encode(&self.normalize(p), self.bands))
    }

    fn check(&self, p: Vec3, index: usize) -> Result<(), FieldError> {
        if !self.bounds.contains(p) {
            return Err(FieldError::OutOfBounds { index, position: p.0 });
        }
        Ok(())
    }

    /// Differentiable encoding of `n × 3` positions.
    pub fn encode_var<'t>(&self, x: &Var<'t>) -> Result<Var<'t>, FieldError> {
        if x.shape().len() != 2 || x.cols() != 3 {
            return Err(FieldError::Shape(format!("positions must be n × 3, got {:?}", x.shape())));
        }
        for (i, row) in x.value().data().chunks(3).enumerate() {
            self.check(Vec3::new(row[0], row[1], row[2]), i)?;
        }
        let tape = x.tape();
        let w = self.width();
        let l = self.bands;
        let mut m = Tensor::zeros(&[3, w]);
        let mut phase = vec![0.0; w];
        for c in 0..3 {
            for k in 0..l {
                let col = c * 2 * l + 2 * k;
                m.set(c, col, band_freq(k));
                m.set(c, col + 1, band_freq(k));
                phase[col + 1] = FRAC_PI_2;
            }
        }
        let neg_center = tape.constant(Tensor::vector((-self.center).0.to_vec()));
        let inv_half = tape.constant(Tensor::vector(self.inv_half.0.to_vec()));
        let normalized = x.add_row(&neg_center)?.mul_row(&inv_half)?;
        Ok(normalized.matmul(&tape.constant(m))?.add_row(&tape.constant(Tensor::vector(phase)))?.sin())
    }
}

/// Subcarrier index normalized over the full band to `[−1, 1]`.
pub fn normalized_frequency(k: usize, n_subcarriers: usize) -> f64 {
    if n_subcarriers <= 1 {
        0.0
    } else {
        2.0 * k as f64 / (n_subcarriers - 1) as f64 - 1.0
    }
}

/// `δ = (−softplus(raw_re), raw_im)` per sample.
pub fn constrain_delta(raw: &[[f64; 2]]) -> Vec<[f64; 2]> {
    raw.iter().map(|&[re, im]| [-softplus(re), im]).collect()
}

pub fn constrain_delta_var<'t>(raw: &Var<'t>) -> Result<Var<'t>, NumericsError> {
    let re = raw.slice_cols(0, 1)?.softplus().neg();
    let im = raw.slice_cols(1, 2)?;
    Var::concat_cols(&[re, im])
}

/// One ray's sample positions.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySample {
    pub rx: Vec3,
    pub direction: Vec3,
    pub tx: Vec3,
    pub depths: Vec<f64>,
    pub voxels: Vec<Vec3>,
}

/// Midpoint-rule samples at depths `(i − 0.5)·D/S` along `rx + r·ω`.
pub fn sample_ray(rx: Vec3, direction: Vec3, tx: Vec3, samples: usize, max_depth: f64) -> Result<RaySample, FieldError> {
    if samples == 0 || !(max_depth > 0.0) {
        return Err(FieldError::Config(format!("need samples ≥ 1 and depth > 0, got {samples}, {max_depth}")));
    }
    let direction = direction.normalized().ok_or_else(|| FieldError::Config("zero ray direction".into()))?;
    let depths: Vec<f64> = (1..=samples).map(|i| (i as f64 - 0.5) * max_depth / samples as f64).collect();
    let voxels = depths.iter().map(|&r| rx + direction * r).collect();
    Ok(RaySample { rx, direction, tx, depths, voxels })
}

/// Shared per-ray context for a batch of rays with equal sample counts.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub samples: usize,
    pub directions: Vec<Vec3>,
    pub tx: Vec<Vec3>,
    /// `(rays·samples) × 3`.
    pub positions: Tensor,
}

impl RayBatch {
    pub fn from_rays(rays: &[RaySample]) -> Result<Self, FieldError> {
        let samples = rays.first().map_or(0, |r| r.voxels.len());
        if samples == 0 || rays.iter().any(|r| r.voxels.len() != samples) {
            return Err(FieldError::Shape("rays must be nonempty with equal sample counts".into()));
        }
        let data = rays.iter().flat_map(|r| r.voxels.iter().flat_map(|v| v.0)).collect();
        Ok(Self {
            samples,
            directions: rays.iter().map(|r| r.direction).collect(),
            tx: rays.iter().map(|r| r.tx).collect(),
            positions: Tensor::matrix(rays.len() * samples, 3, data)?,
        })
    }

    pub fn rays(&self) -> usize {
        self.directions.len()
    }
}

/// Per-voxel outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct VoxelOutputs<'t> {
    /// `n × 2`, constrained.
    pub delta: Var<'t>,
    pub feature: Var<'t>,
    /// `n × K'` for the requested subcarriers.
    pub xi_re: Var<'t>,
    pub xi_im: Var<'t>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let w = uniform_tensor(rng, &[in_dim, out_dim], bound_for_variance(gain / in_dim as f64));
        Self {
            w: store.add(format!("{prefix}.w"), w),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, x: &Var<'t>, p: &Bound<'t>) -> Result<Var<'t>, NumericsError> {
        x.matmul(&p.var(self.w))?.add_row(&p.var(self.b))
    }
}

const HEAD_GAIN: f64 = 0.01;
/// `softplus(−3) ≈ 0.049`, so voxels start nearly transparent.
const DELTA_BIAS_INIT: f64 = -3.0;

/// Attenuation and radiance networks with their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldModel {
    pub config: FieldConfig,
    pub n_subcarriers: usize,
    pub store: ParamStore,
    pub position_encoder: PointEncoder,
    /// Non-trainable multiplier on the rendered channel.
    pub output_scale: f64,
    att_stack: PowerMlpStack,
    att_blocks: Vec<AttentionBlock>,
    att_head: Linear,
    rad_stack: PowerMlpStack,
    rad_blocks: Vec<AttentionBlock>,
    rad_head: Linear,
    xi_bias_re: ParamId,
    xi_bias_im: ParamId,
}

impl FieldModel {
    /// `scene` is the room; the encoder covers it padded by the maximum ray
    /// depth so every sample along any ray from inside the room is legal.
    pub fn new(config: FieldConfig, scene: Aabb, n_subcarriers: usize) -> Result<Self, FieldError> {
        config.validate()?;
        if n_subcarriers == 0 {
            return Err(FieldError::Config("at least one subcarrier required".into()));
        }
        let position_encoder = PointEncoder::new(scene.padded(config.max_depth), config.pos_bands)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = &config;
        let pos_w = 6 * c.pos_bands;
        let dir_w = 6 * c.dir_bands;
        let basis = 1 + 2 * c.freq_bands;

        let att_stack = PowerMlpStack::build(
            &mut store, "att.stack", c.att_depth, c.att_width, c.ell, pos_w, c.feature_dim, c.norm, &mut rng,
        )?;
        let att_blocks = Self::blocks(&mut store, "att", c, c.feature_dim, 0, &mut rng)?;
        let att_in = c.feature_dim + if c.residual { pos_w } else { 0 };
        let att_head = Linear::new(&mut store, "att.head", att_in, 2 + c.feature_dim, HEAD_GAIN, &mut rng);
        store.get_mut(att_head.b).data_mut()[0] = DELTA_BIAS_INIT;

        let rad_in = c.feature_dim + dir_w + pos_w;
        let rad_stack =
            PowerMlpStack::build(&mut store, "rad.stack", c.rad_depth, c.rad_width, c.ell, rad_in, c.rad_width, c.norm, &mut rng)?;
        let rad_blocks = Self::blocks(&mut store, "rad", c, c.rad_width, 1000, &mut rng)?;
        let rad_head_in = c.rad_width + if c.residual { pos_w + dir_w + pos_w } else { 0 };
        let rad_head = Linear::new(&mut store, "rad.head", rad_head_in, 2 * basis, HEAD_GAIN, &mut rng);
        let xi_bias_re = store.add("rad.xi_bias_re", Tensor::scalar(0.0));
        let xi_bias_im = store.add("rad.xi_bias_im", Tensor::scalar(0.0));

        Ok(Self {
            config,
            n_subcarriers,
            store,
            position_encoder,
            output_scale: 1.0,
            att_stack,
            att_blocks,
            att_head,
            rad_stack,
            rad_blocks,
            rad_head,
            xi_bias_re,
            xi_bias_im,
        })
    }

    fn blocks(
        store: &mut ParamStore,
        prefix: &str,
        c: &FieldConfig,
        width: usize,
        seed_offset: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<AttentionBlock>, FieldError> {
        if !c.attention {
            return Ok(Vec::new());
        }
        (0..c.attention_blocks)
            .map(|i| {
                let seed = c.seed.wrapping_mul(0x9E37_79B9).wrapping_add(seed_offset + 100 * i as u64);
                AttentionBlock::new(
                    store,
                    &format!("{prefix}.block{i}"),
                    width,
                    c.heads,
                    c.random_features,
                    c.orthogonal_features,
                    seed,
                    rng,
                )
                .map_err(FieldError::from)
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    /// Encoded voxel positions, differentiable in `positions`.
    pub fn encode_positions<'t>(&self, positions: &Var<'t>) -> Result<Var<'t>, FieldError> {
        self.position_encoder.encode_var(positions)
    }

    fn per_sample_rows(&self, batch: &RayBatch, f: impl Fn(usize) -> Result<Vec<f64>, FieldError>) -> Result<Tensor, FieldError> {
        let mut data = Vec::new();
        let mut width = 0;
        for r in 0..batch.rays() {
            let row = f(r)?;
            width = row.len();
            for _ in 0..batch.samples {
                data.extend_from_slice(&row);
            }
        }
        Ok(Tensor::matrix(batch.rays() * batch.samples, width, data)?)
    }

    /// `[1, E(f_k)]` columns for each requested subcarrier: `B × K'`.
    fn frequency_basis(&self, freqs: &[usize]) -> Result<Tensor, FieldError> {
        let b = 1 + 2 * self.config.freq_bands;
        let mut t = Tensor::zeros(&[b, freqs.len()]);
        for (col, &k) in freqs.iter().enumerate() {
            if k >= self.n_subcarriers {
                return Err(FieldError::Shape(format!("subcarrier {k} outside 0..{}", self.n_subcarriers)));
            }
            let e = positional_encode(&[normalized_frequency(k, self.n_subcarriers)], self.config.freq_bands);
            t.set(0, col, 1.0);
            for (j, v) in e.into_iter().enumerate() {
                t.set(j + 1, col, v);
            }
        }
        Ok(t)
    }

    /// Runs both networks over every voxel of the batch.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        positions: &Var<'t>,
        batch: &RayBatch,
        freqs: &[usize],
    ) -> Result<VoxelOutputs<'t>, FieldError> {
        let n = batch.rays() * batch.samples;
        if positions.shape() != [n, 3] {
            return Err(FieldError::Shape(format!("positions {:?} for {n} voxels", positions.shape())));
        }
        if freqs.is_empty() {
            return Err(FieldError::Shape("no subcarriers requested".into()));
        }
        let tape = positions.tape();
        let s = batch.samples;
        let enc_p = self.encode_positions(positions)?;
        let dir_bands = self.config.dir_bands;
        let enc_dir = tape.constant(self.per_sample_rows(batch, |r| Ok(positional_encode(&batch.directions[r].0, dir_bands)))?);
        let enc_tx = tape.constant(self.per_sample_rows(batch, |r| self.position_encoder.encode(batch.tx[r], r))?);

        let mut h = self.att_stack.forward(&enc_p, p)?;
        for block in &self.att_blocks {
            h = block.forward(&h, s, p)?;
        }
        let head_in = if self.config.residual { Var::concat_cols(&[h, enc_p])? } else { h };
        let out = self.att_head.forward(&head_in, p)?;
        let delta = constrain_delta_var(&out.slice_cols(0, 2)?)?;
        let feature = out.slice_cols(2, 2 + self.config.feature_dim)?;

        let x = Var::concat_cols(&[feature, enc_dir, enc_tx])?;
        let mut g = self.rad_stack.forward(&x, p)?;
        for block in &self.rad_blocks {
            g = block.forward(&g, s, p)?;
        }
        let head_in = if self.config.residual { Var::concat_cols(&[g, enc_p, enc_dir, enc_tx])? } else { g };
        let coeffs = self.rad_head.forward(&head_in, p)?;
        let b = 1 + 2 * self.config.freq_bands;
        let basis = tape.constant(self.frequency_basis(freqs)?);
        let xi_re = coeffs.slice_cols(0, b)?.matmul(&basis)?.add_scalar_var(&p.var(self.xi_bias_re))?;
        let xi_im = coeffs.slice_cols(b, 2 * b)?.matmul(&basis)?.add_scalar_var(&p.var(self.xi_bias_im))?;
        Ok(VoxelOutputs { delta, feature, xi_re, xi_im })
    }

    /// Plain forward pass for a set of rays.
    pub fn evaluate(&self, rays: &[RaySample], freqs: &[usize]) -> Result<PlainVoxels, FieldError> {
        let batch = RayBatch::from_rays(rays)?;
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let pos = tape.constant(batch.positions.clone());
        let out = self.forward(&p, &pos, &batch, freqs)?;
        Ok(PlainVoxels {
            delta: out.delta.to_tensor(),
            feature: out.feature.to_tensor(),
            xi_re: out.xi_re.to_tensor(),
            xi_im: out.xi_im.to_tensor(),
        })
    }

    pub fn att_head(&self) -> &Linear {
        &self.att_head
    }

    pub fn rad_head(&self) -> &Linear {
        &self.rad_head
    }

    pub fn xi_bias(&self) -> (ParamId, ParamId) {
        (self.xi_bias_re, self.xi_bias_im)
    }

    pub fn att_stack(&self) -> &PowerMlpStack {
        &self.att_stack
    }

    pub fn rad_stack(&self) -> &PowerMlpStack {
        &self.rad_stack
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlainVoxels {
    pub delta: Tensor,
    pub feature: Tensor,
    pub xi_re: Tensor,
    pub xi_im: Tensor,
}

const MAGIC: &[u8; 8] = b"KANRFCK1";

/// Parameters plus the configuration that produced them.
///
/// Layout, all integers little-endian: magic `KANRFCK1`; u32 length and UTF-8
/// bytes of the fingerprint; the same for the config text; f64 output scale;
/// u32 tensor count; per tensor a u32-length name, u32 rank, u64 dims and
/// f64 values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub config_text: String,
    pub output_scale: f64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &FieldModel, fingerprint: &str, config_text: &str) -> Self {
        Self {
            fingerprint: fingerprint.to_string(),
            config_text: config_text.to_string(),
            output_scale: model.output_scale,
            tensors: model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Copies the stored parameters into a model built from the same config.
    pub fn apply(&self, model: &mut FieldModel) -> Result<(), FieldError> {
        model.store.load(self.tensors.clone()).map_err(|e| FieldError::Checkpoint(e.to_string()))?;
        model.output_scale = self.output_scale;
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), FieldError> {
        w.write_all(MAGIC)?;
        write_str(&mut w, &self.fingerprint)?;
        write_str(&mut w, &self.config_text)?;
        w.write_all(&self.output_scale.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str(&mut w, name)?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(8 * t.len());
            t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, FieldError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(FieldError::Checkpoint("not a checkpoint file".into()));
        }
        let fingerprint = read_str(&mut r)?;
        let config_text = read_str(&mut r)?;
        let output_scale = f64::from_le_bytes(read_array(&mut r)?);
        let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let rank = u32::from_le_bytes(read_array(&mut r)?) as usize;
            if rank > 8 {
                return Err(FieldError::Checkpoint(format!("tensor {name} has rank {rank}")));
            }
            let shape: Vec<usize> =
                (0..rank).map(|_| read_array(&mut r).map(|b| u64::from_le_bytes(b) as usize)).collect::<Result<_, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n < 1 << 31);
            let n = n.ok_or_else(|| FieldError::Checkpoint(format!("tensor {name} is implausibly large")))?;
            let mut raw = vec![0u8; 8 * n];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { fingerprint, config_text, output_scale, tensors })
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_array<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_str(r: &mut impl Read) -> Result<String, FieldError> {
    let len = u32::from_le_bytes(read_array(r)?) as usize;
    if len > 1 << 24 {
        return Err(FieldError::Checkpoint("string field too long".into()));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| FieldError::Checkpoint("invalid UTF-8".into()))
}
