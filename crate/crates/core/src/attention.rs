//! Causally masked linear attention with positive random features.
//!
//! `φ(x) = r^{−1/2} exp(Ωx − ‖x‖²/2)` gives an unbiased estimate of the
//! softmax kernel, `E[φ(x)ᵀφ(y)] = exp(xᵀy)`, so attention reduces to one
//! forward sweep of prefix sums over the sequence. Queries and keys are
//! pre-scaled by `d^{−1/4}` so the kernel matches `softmax(QKᵀ/√d)`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::numerics::{Bound, CustomOp, NumericsError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::powermlp::{bound_for_variance, uniform_tensor};

const MIN_NORMALIZER: f64 = 1e-30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("attention inputs disagree: {0}")]
    Shape(String),
    #[error("attention normalizer vanished at sequence {sequence}, position {position}")]
    DegenerateNormalizer { sequence: usize, position: usize },
    #[error("reference attention has zero norm")]
    ZeroReference,
    #[error("non-finite feature map")]
    NonFinite,
    #[error("invalid attention configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Random projection for the feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct PerformerParams {
    pub dim: usize,
    pub features: usize,
    pub orthogonal: bool,
    pub seed: u64,
    /// `features × dim`.
    pub omega: Tensor,
}

impl PerformerParams {
    pub fn new(dim: usize, features: usize, orthogonal: bool, seed: u64) -> Result<Self, AttentionError> {
        if dim == 0 || features == 0 {
            return Err(AttentionError::Config("dimension and feature count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
        let mut data = Vec::with_capacity(features * dim);
        if orthogonal {
            // Blocks of `dim` orthonormal rows, each rescaled to the norm of a
            // fresh Gaussian vector so row lengths keep their chi distribution.
            while data.len() < features * dim {
                let g = DMatrix::from_fn(dim, dim, |_, _| gauss());
                let q = g.qr().q();
                let take = (features - data.len() / dim).min(dim);
                for row in 0..take {
                    let norm = (0..dim).map(|_| gauss().powi(2)).sum::<f64>().sqrt();
                    // Columns of Q are orthonormal; use them as rows.
                    data.extend((0..dim).map(|c| q[(c, row)] * norm));
                }
            }
        } else {
            data.extend((0..features * dim).map(|_| gauss()));
        }
        Ok(Self { dim, features, orthogonal, seed, omega: Tensor::matrix(features, dim, data)? })
    }
}

/// Positive features `r^{−1/2} exp(Ωx − ‖x‖²/2)`.
pub fn feature_map(x: &[f64], params: &PerformerParams) -> Result<Vec<f64>, AttentionError> {
    if x.len() != params.dim {
        return Err(AttentionError::Shape(format!("x has {} entries, Ω expects {}", x.len(), params.dim)));
    }
    let half_sq = 0.5 * x.iter().map(|v| v * v).sum::<f64>();
    let norm = (params.features as f64).sqrt().recip();
    let out: Vec<f64> = (0..params.features)
        .map(|j| {
            let w = params.omega.row(j);
            let dot: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            norm * (dot - half_sq).exp()
        })
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(AttentionError::NonFinite);
    }
    Ok(out)
}

/// Queries, keys and values, one row per position.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionIo {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl AttentionIo {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self, AttentionError> {
        let io = Self { q, k, v };
        io.validate()?;
        Ok(io)
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<(), AttentionError> {
        for (name, t) in [("q", &self.q), ("k", &self.k), ("v", &self.v)] {
            if t.ndim() != 2 {
                return Err(AttentionError::Shape(format!("{name} must be a matrix")));
            }
            if !t.is_finite() {
                return Err(AttentionError::Shape(format!("{name} has non-finite entries")));
            }
        }
        if self.q.rows() != self.k.rows() || self.q.rows() != self.v.rows() {
            return Err(AttentionError::Shape(format!(
                "lengths {} / {} / {}",
                self.q.rows(),
                self.k.rows(),
                self.v.rows()
            )));
        }
        if self.q.cols() != self.k.cols() {
            return Err(AttentionError::Shape(format!("q width {} vs k width {}", self.q.cols(), self.k.cols())));
        }
        Ok(())
    }
}

/// Per-row state saved by the forward sweep.
#[derive(Clone, Debug, Default)]
struct SweepCache {
    /// Running per-feature key-logit maximum through each position (n × r).
    key_max: Vec<f64>,
    /// Query shift `max_j (a_ij + key_max_ij)` of each row.
    query_shift: Vec<f64>,
    /// Stabilized normalizer of each row, at least 1.
    den: Vec<f64>,
}

/// Query logits `a` (n × r), key logits `b` (n × r) and values (n × dv), with
/// rows grouped into independent sequences of `seq_len`.
///
/// Key features of column `j` are kept relative to their running maximum
/// `M_ij`, and row `i` is weighted by `exp(a_ij + M_ij − c_i)` with `c_i` the
/// largest such exponent. Shifts cancel in each output row, only look at the
/// prefix, and leave every normalizer ≥ 1.
fn sweep_forward(
    a: &Tensor,
    b: &Tensor,
    v: &Tensor,
    seq_len: usize,
) -> Result<(Tensor, SweepCache), AttentionError> {
    let n = a.rows();
    let r = a.cols();
    let dv = v.cols();
    let mut out = vec![0.0; n * dv];
    let mut cache =
        SweepCache { key_max: vec![0.0; n * r], query_shift: vec![0.0; n], den: vec![0.0; n] };
    let mut s = vec![0.0; r * dv];
    let mut z = vec![0.0; r];
    let mut m = vec![0.0; r];
    let mut phq = vec![0.0; r];
    for seq in 0..n / seq_len {
        s.iter_mut().for_each(|x| *x = 0.0);
        z.iter_mut().for_each(|x| *x = 0.0);
        m.iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
        for t in 0..seq_len {
            let i = seq * seq_len + t;
            let vi = v.row(i);
            for (j, &bj) in b.row(i).iter().enumerate() {
                let srow = &mut s[j * dv..(j + 1) * dv];
                if bj > m[j] {
                    let f = (m[j] - bj).exp();
                    srow.iter_mut().for_each(|x| *x *= f);
                    z[j] *= f;
                    m[j] = bj;
                }
                let phk = (bj - m[j]).exp();
                z[j] += phk;
                srow.iter_mut().zip(vi).for_each(|(x, &vc)| *x += phk * vc);
            }
            let ai = a.row(i);
            let shift = ai.iter().zip(&m).map(|(x, y)| x + y).fold(f64::NEG_INFINITY, f64::max);
            ai.iter().zip(&m).zip(phq.iter_mut()).for_each(|((&x, &y), p)| *p = (x + y - shift).exp());
            let den: f64 = phq.iter().zip(&z).map(|(p, zz)| p * zz).sum();
            if !(den >= MIN_NORMALIZER) {
                return Err(AttentionError::DegenerateNormalizer { sequence: seq, position: t });
            }
            let o = &mut out[i * dv..(i + 1) * dv];
            for (j, &p) in phq.iter().enumerate() {
                let w = p / den;
                o.iter_mut().zip(&s[j * dv..(j + 1) * dv]).for_each(|(x, &sc)| *x += w * sc);
            }
            cache.key_max[i * r..(i + 1) * r].copy_from_slice(&m);
            cache.query_shift[i] = shift;
            cache.den[i] = den;
        }
    }
    Ok((Tensor::matrix(n, dv, out)?, cache))
}

struct CausalAttentionOp {
    seq_len: usize,
    cache: SweepCache,
}

impl CustomOp for CausalAttentionOp {
    fn name(&self) -> &'static str {
        "causal_linear_attention"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (a, b, v) = (inputs[0], inputs[1], inputs[2]);
        let (n, r, dv) = (a.rows(), a.cols(), v.cols());
        let l = self.seq_len;
        let c = &self.cache;
        let mut da = vec![0.0; n * r];
        let mut db = vec![0.0; n * r];
        let mut dvv = vec![0.0; n * dv];
        // g_i · out_i
        let go: Vec<f64> = (0..n)
            .map(|i| grad[i * dv..(i + 1) * dv].iter().zip(output.row(i)).map(|(x, y)| x * y).sum())
            .collect();
        let phq_row = |i: usize, buf: &mut [f64]| {
            let mi = &c.key_max[i * r..(i + 1) * r];
            a.row(i)
                .iter()
                .zip(mi)
                .zip(buf.iter_mut())
                .for_each(|((&x, &y), p)| *p = (x + y - c.query_shift[i]).exp());
        };
        let mut phq = vec![0.0; r];
        let mut s = vec![0.0; r * dv];
        let mut z = vec![0.0; r];
        let mut pmat = vec![0.0; r * dv];
        let mut pvec = vec![0.0; r];
        for seq in 0..n / l {
            // Forward pass again for the query side.
            s.iter_mut().for_each(|x| *x = 0.0);
            z.iter_mut().for_each(|x| *x = 0.0);
            for t in 0..l {
                let i = seq * l + t;
                let vi = v.row(i);
                for (j, &bj) in b.row(i).iter().enumerate() {
                    let mij = c.key_max[i * r + j];
                    let srow = &mut s[j * dv..(j + 1) * dv];
                    if t > 0 {
                        let f = (c.key_max[(i - 1) * r + j] - mij).exp();
                        srow.iter_mut().for_each(|x| *x *= f);
                        z[j] *= f;
                    }
                    let phk = (bj - mij).exp();
                    z[j] += phk;
                    srow.iter_mut().zip(vi).for_each(|(x, &vc)| *x += phk * vc);
                }
                phq_row(i, &mut phq);
                let gi = &grad[i * dv..(i + 1) * dv];
                let inv = 1.0 / c.den[i];
                for j in 0..r {
                    let sg: f64 = s[j * dv..(j + 1) * dv].iter().zip(gi).map(|(x, y)| x * y).sum();
                    da[i * r + j] = phq[j] * (sg - z[j] * go[i]) * inv;
                }
            }
            // Suffix sweep for keys and values.
            pmat.iter_mut().for_each(|x| *x = 0.0);
            pvec.iter_mut().for_each(|x| *x = 0.0);
            for t in (0..l).rev() {
                let i = seq * l + t;
                if t + 1 < l {
                    for j in 0..r {
                        let f = (c.key_max[i * r + j] - c.key_max[(i + 1) * r + j]).exp();
                        pmat[j * dv..(j + 1) * dv].iter_mut().for_each(|x| *x *= f);
                        pvec[j] *= f;
                    }
                }
                phq_row(i, &mut phq);
                let gi = &grad[i * dv..(i + 1) * dv];
                let inv = 1.0 / c.den[i];
                for j in 0..r {
                    let w = phq[j] * inv;
                    pmat[j * dv..(j + 1) * dv].iter_mut().zip(gi).for_each(|(x, &g)| *x += w * g);
                    pvec[j] += w * go[i];
                }
                let vi = v.row(i);
                let dvi = &mut dvv[i * dv..(i + 1) * dv];
                for (j, &bj) in b.row(i).iter().enumerate() {
                    let ek = (bj - c.key_max[i * r + j]).exp();
                    let prow = &pmat[j * dv..(j + 1) * dv];
                    dvi.iter_mut().zip(prow).for_each(|(x, &p)| *x += ek * p);
                    let pv: f64 = prow.iter().zip(vi).map(|(x, y)| x * y).sum();
                    db[i * r + j] = ek * (pv - pvec[j]);
                }
            }
        }
        vec![Some(da), Some(db), Some(dvv)]
    }
}

fn check_seq(n: usize, seq_len: usize) -> Result<(), AttentionError> {
    if seq_len == 0 || n % seq_len != 0 {
        return Err(AttentionError::Shape(format!("{n} rows do not split into sequences of {seq_len}")));
    }
    Ok(())
}

/// Row-wise logits `x̃Ωᵀ − ‖x̃‖²/2` with `x̃ = x·d^{−1/4}`.
fn logits(x: &Tensor, params: &PerformerParams) -> Result<Tensor, AttentionError> {
    if x.cols() != params.dim {
        return Err(AttentionError::Shape(format!("width {} vs Ω width {}", x.cols(), params.dim)));
    }
    let s = (params.dim as f64).powf(-0.25);
    let xs = x.map(|v| v * s);
    let mut out = xs.matmul(&params.omega.transpose())?;
    let r = params.features;
    for i in 0..xs.rows() {
        let h = 0.5 * xs.row(i).iter().map(|v| v * v).sum::<f64>();
        out.data_mut()[i * r..(i + 1) * r].iter_mut().for_each(|x| *x -= h);
    }
    Ok(out)
}

/// Linear-time causal attention over a single sequence.
pub fn causal_linear_attention(io: &AttentionIo, params: &PerformerParams) -> Result<Tensor, AttentionError> {
    io.validate()?;
    let n = io.len();
    if n == 0 {
        return Ok(Tensor::zeros(&[0, io.v.cols()]));
    }
    let a = logits(&io.q, params)?;
    let b = logits(&io.k, params)?;
    Ok(sweep_forward(&a, &b, &io.v, n)?.0)
}

/// Differentiable causal attention over `rows / seq_len` independent
/// sequences stacked row-wise.
pub fn causal_linear_attention_var<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    seq_len: usize,
    params: &PerformerParams,
) -> Result<Var<'t>, AttentionError> {
    let n = q.rows();
    if k.rows() != n || v.rows() != n {
        return Err(AttentionError::Shape(format!("lengths {n} / {} / {}", k.rows(), v.rows())));
    }
    check_seq(n, seq_len)?;
    if q.cols() != params.dim || k.cols() != params.dim {
        return Err(AttentionError::Shape(format!("q/k width vs Ω width {}", params.dim)));
    }
    let tape = q.tape();
    let omega_t = tape.constant(params.omega.transpose());
    let s = (params.dim as f64).powf(-0.25);
    let logit = |x: &Var<'t>| -> Result<Var<'t>, NumericsError> {
        let xs = x.scale(s);
        let half = xs.square()?.sum_cols()?.scale(-0.5);
        xs.matmul(&omega_t)?.add_col(&half)
    };
    let a = logit(q)?;
    let b = logit(k)?;
    let (out, cache) = sweep_forward(&a.value(), &b.value(), &v.value(), seq_len)?;
    Ok(Var::custom(&[a, b, *v], out, Box::new(CausalAttentionOp { seq_len, cache })))
}

/// Causal softmax attention, `softmax(scale · QKᵀ)` restricted to `j ≤ i`.
pub fn exact_masked_softmax_attention(io: &AttentionIo, scale: f64) -> Result<Tensor, AttentionError> {
    io.validate()?;
    let (n, dv) = (io.len(), io.v.cols());
    let mut out = vec![0.0; n * dv];
    let mut scores = vec![0.0; n];
    for i in 0..n {
        let qi = io.q.row(i);
        for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
            *s = scale * qi.iter().zip(io.k.row(j)).map(|(a, b)| a * b).sum::<f64>();
        }
        let mx = scores[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in scores[..=i].iter_mut() {
            *s = (*s - mx).exp();
            total += *s;
        }
        let o = &mut out[i * dv..(i + 1) * dv];
        for (j, &w) in scores[..=i].iter().enumerate() {
            o.iter_mut().zip(io.v.row(j)).for_each(|(x, &vc)| *x += w / total * vc);
        }
    }
    Ok(Tensor::matrix(n, dv, out)?)
}

/// `‖approx − exact‖_F / ‖exact‖_F`.
pub fn attention_error(approx: &Tensor, exact: &Tensor) -> Result<f64, AttentionError> {
    if approx.shape() != exact.shape() {
        return Err(AttentionError::Shape(format!("{:?} vs {:?}", approx.shape(), exact.shape())));
    }
    let norm = exact.frobenius_norm();
    if norm == 0.0 {
        return Err(AttentionError::ZeroReference);
    }
    let diff: f64 = approx.data().iter().zip(exact.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(diff.sqrt() / norm)
}

/// Residual block `X + Att(XWq, XWk, XWv)·Wo`; heads take contiguous column
/// slices of the projections, each with its own random projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub width: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: Vec<PerformerParams>,
}

impl AttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        features: usize,
        orthogonal: bool,
        seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, AttentionError> {
        if heads == 0 || width % heads != 0 {
            return Err(AttentionError::Config(format!("width {width} is not divisible into {heads} heads")));
        }
        let bound = bound_for_variance(1.0 / width as f64);
        let mut mk = |name: &str| store.add(format!("{prefix}.{name}"), uniform_tensor(rng, &[width, width], bound));
        let (wq, wk, wv, wo) = (mk("wq"), mk("wk"), mk("wv"), mk("wo"));
        let dh = width / heads;
        let heads = (0..heads)
            .map(|h| PerformerParams::new(dh, features, orthogonal, seed.wrapping_add(h as u64)))
            .collect::<Result<_, _>>()?;
        Ok(Self { width, wq, wk, wv, wo, heads })
    }

    pub fn forward<'t>(&self, x: &Var<'t>, seq_len: usize, p: &Bound<'t>) -> Result<Var<'t>, AttentionError> {
        if x.cols() != self.width {
            return Err(AttentionError::Shape(format!("block width {} vs input {}", self.width, x.cols())));
        }
        let q = x.matmul(&p.var(self.wq))?;
        let k = x.matmul(&p.var(self.wk))?;
        let v = x.matmul(&p.var(self.wv))?;
        let dh = self.width / self.heads.len();
        let att = if self.heads.len() == 1 {
            causal_linear_attention_var(&q, &k, &v, seq_len, &self.heads[0])?
        } else {
            let parts = self
                .heads
                .iter()
                .enumerate()
                .map(|(h, hp)| {
                    let (lo, hi) = (h * dh, (h + 1) * dh);
                    causal_linear_attention_var(
                        &q.slice_cols(lo, hi)?,
                        &k.slice_cols(lo, hi)?,
                        &v.slice_cols(lo, hi)?,
                        seq_len,
                        hp,
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            Var::concat_cols(&parts)?
        };
        Ok(x.add(&att.matmul(&p.var(self.wo))?)?)
    }
}

/// Convenience for callers that only need a plain forward pass.
pub fn block_forward(block: &AttentionBlock, store: &ParamStore, x: &Tensor, seq_len: usize) -> Result<Tensor, AttentionError> {
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    Ok(block.forward(&tape.constant(x.clone()), seq_len, &p)?.to_tensor())
}
