//! KAN-style layers built from power-of-ReLU activations.
//!
//! A layer computes `affine_out(ρ_ℓ(affine_in(x))) + shortcut(x)` with
//! `ρ_ℓ(z) = max(0, z)^ℓ`. The B-spline helpers at the bottom of the module
//! evaluate spline activations directly and recover their expansion into
//! shifted `ρ_{L−1}` terms, which is the identity the layer relies on.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Bound, NumericsError, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerMlpError {
    #[error("input width {got} does not match layer width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("invalid layer configuration: {0}")]
    Config(String),
    #[error("spline: {0}")]
    Spline(String),
    #[error("relu-power fit is rank deficient (condition {condition:.3e})")]
    RankDeficient { condition: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Optional per-layer normalization, present only for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    None,
    Batch,
    Layer,
}

const NORM_EPS: f64 = 1e-5;
/// Fixed multiplier on the branch output weights; `BRANCH_SCALE² = 0.005` is
/// the branch's variance gain at init. Stored weights stay at unit-gain scale,
/// which keeps optimizer steps proportionate to them.
const BRANCH_SCALE: f64 = 0.070_710_678_118_654_75;

/// `E[ρ_ℓ(z)²]` for standard normal `z`, i.e. `(2ℓ−1)!! / 2`.
pub fn relu_pow_second_moment(ell: u32) -> f64 {
    let mut dfact = 1.0;
    let mut k = 2 * ell as i64 - 1;
    while k > 1 {
        dfact *= k as f64;
        k -= 2;
    }
    dfact / 2.0
}

pub(crate) fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 }).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Uniform bound whose variance is `var`.
pub(crate) fn bound_for_variance(var: f64) -> f64 {
    (3.0 * var).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerMlpLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub ell: u32,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub w_short: ParamId,
}

impl PowerMlpLayer {
    /// Allocates a layer in `store`.
    ///
    /// Pre-activations start at the input's variance and the shortcut is
    /// variance-preserving. The nonlinear branch adds `BRANCH_SCALE² · s^{2ℓ}`
    /// to a row of scale `s²`; it has to start small because the `s^{2ℓ}`
    /// growth compounds across layers.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        ell: u32,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, PowerMlpError> {
        if ell == 0 {
            return Err(NumericsError::InvalidPower.into());
        }
        if in_dim == 0 || out_dim == 0 {
            return Err(PowerMlpError::Config(format!("layer {prefix} has zero width")));
        }
        let hidden = out_dim;
        let moment = relu_pow_second_moment(ell);
        let w_in = uniform_tensor(rng, &[in_dim, hidden], bound_for_variance(1.0 / in_dim as f64));
        let w_out =
            uniform_tensor(rng, &[hidden, out_dim], bound_for_variance(1.0 / (hidden as f64 * moment)));
        let w_short =
            uniform_tensor(rng, &[in_dim, out_dim], bound_for_variance(1.0 / in_dim as f64));
        Ok(Self {
            in_dim,
            out_dim,
            ell,
            w_in: store.add(format!("{prefix}.w_in"), w_in),
            b_in: store.add(format!("{prefix}.b_in"), Tensor::zeros(&[hidden])),
            w_out: store.add(format!("{prefix}.w_out"), w_out),
            b_out: store.add(format!("{prefix}.b_out"), Tensor::zeros(&[out_dim])),
            w_short: store.add(format!("{prefix}.w_short"), w_short),
        })
    }

    /// `x: [batch × in_dim] -> [batch × out_dim]`.
    pub fn forward<'t>(&self, x: &Var<'t>, p: &Bound<'t>) -> Result<Var<'t>, PowerMlpError> {
        if x.shape().len() != 2 || x.cols() != self.in_dim {
            return Err(PowerMlpError::WidthMismatch { expected: self.in_dim, got: x.cols() });
        }
        let pre = x.matmul(&p.var(self.w_in))?.add_row(&p.var(self.b_in))?;
        let act = pre.relu_pow(self.ell)?;
        let branch = act.matmul(&p.var(self.w_out))?.scale(BRANCH_SCALE).add_row(&p.var(self.b_out))?;
        let short = x.matmul(&p.var(self.w_short))?;
        Ok(branch.add(&short)?)
    }
}

/// Normalization with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub kind: NormKind,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, prefix: &str, kind: NormKind, width: usize) -> Option<Self> {
        if kind == NormKind::None {
            return None;
        }
        Some(Self {
            kind,
            gamma: store.add(format!("{prefix}.gamma"), Tensor::filled(&[width], 1.0)),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[width])),
        })
    }

    /// Layer norm standardizes each row; batch norm standardizes each column
    /// using the statistics of the rows in this call.
    pub fn forward<'t>(&self, x: &Var<'t>, p: &Bound<'t>) -> Result<Var<'t>, NumericsError> {
        let normalized = match self.kind {
            NormKind::None => return Ok(*x),
            NormKind::Layer => {
                let m = x.cols() as f64;
                let mean = x.sum_cols()?.scale(1.0 / m);
                let centered = x.add_col(&mean.neg())?;
                let var = centered.square()?.sum_cols()?.scale(1.0 / m);
                centered.mul_col(&var.add_scalar(NORM_EPS).powf(-0.5))?
            }
            NormKind::Batch => {
                let n = x.rows() as f64;
                let mean = x.sum_rows()?.scale(1.0 / n);
                let centered = x.add_row(&mean.neg())?;
                let var = centered.square()?.sum_rows()?.scale(1.0 / n);
                centered.mul_row(&var.add_scalar(NORM_EPS).powf(-0.5))?
            }
        };
        normalized.mul_row(&p.var(self.gamma))?.add_row(&p.var(self.beta))
    }
}

/// Sequential PowerMLP layers, each optionally followed by a normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerMlpStack {
    pub layers: Vec<PowerMlpLayer>,
    pub norms: Vec<Option<Norm>>,
}

impl PowerMlpStack {
    /// First layer maps `in_dim -> width`, the last `width -> out_dim`; a
    /// depth-1 stack is a single `in_dim -> out_dim` layer.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        depth: usize,
        width: usize,
        ell: u32,
        in_dim: usize,
        out_dim: usize,
        norm: NormKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, PowerMlpError> {
        if depth == 0 {
            return Err(PowerMlpError::Config("stack depth must be at least 1".into()));
        }
        let mut layers = Vec::with_capacity(depth);
        let mut norms = Vec::with_capacity(depth);
        for i in 0..depth {
            let d = if i == 0 { in_dim } else { width };
            let m = if i + 1 == depth { out_dim } else { width };
            let name = format!("{prefix}.layer{i}");
            layers.push(PowerMlpLayer::new(store, &name, d, m, ell, rng)?);
            norms.push(Norm::new(store, &format!("{name}.norm"), norm, m));
        }
        Ok(Self { layers, norms })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward<'t>(&self, x: &Var<'t>, p: &Bound<'t>) -> Result<Var<'t>, PowerMlpError> {
        let mut h = *x;
        for (layer, norm) in self.layers.iter().zip(&self.norms) {
            h = layer.forward(&h, p)?;
            if let Some(n) = norm {
                h = n.forward(&h, p)?;
            }
        }
        Ok(h)
    }
}

/// Builds a standalone stack with its own parameter store, seeded
/// deterministically.
pub fn make_stack(
    depth: usize,
    width: usize,
    ell: u32,
    in_dim: usize,
    out_dim: usize,
    seed: u64,
) -> Result<(ParamStore, PowerMlpStack), PowerMlpError> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stack =
        PowerMlpStack::build(&mut store, "stack", depth, width, ell, in_dim, out_dim, NormKind::None, &mut rng)?;
    Ok((store, stack))
}

/// Spline `S(x) = Σ_k a_k B_k(x)` over a knot vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineSpec {
    pub knots: Vec<f64>,
    pub degree: usize,
    pub coeffs: Vec<f64>,
}

impl SplineSpec {
    pub fn new(knots: Vec<f64>, degree: usize, coeffs: Vec<f64>) -> Result<Self, PowerMlpError> {
        if degree == 0 {
            return Err(PowerMlpError::Spline("degree must be at least 1".into()));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PowerMlpError::Spline("knots must be strictly increasing".into()));
        }
        if knots.len() < degree + 2 {
            return Err(PowerMlpError::Spline(format!(
                "degree {degree} needs at least {} knots, got {}",
                degree + 2,
                knots.len()
            )));
        }
        let basis = knots.len() - degree - 1;
        if coeffs.len() != basis {
            return Err(PowerMlpError::Spline(format!("{basis} basis functions but {} coefficients", coeffs.len())));
        }
        Ok(Self { knots, degree, coeffs })
    }

    /// Single basis function `B_index` with unit coefficient.
    pub fn basis(knots: Vec<f64>, degree: usize, index: usize) -> Result<Self, PowerMlpError> {
        let n = knots.len().saturating_sub(degree + 1);
        let mut coeffs = vec![0.0; n];
        if index >= n {
            return Err(PowerMlpError::Spline(format!("basis index {index} out of {n}")));
        }
        coeffs[index] = 1.0;
        Self::new(knots, degree, coeffs)
    }

    pub fn basis_count(&self) -> usize {
        self.coeffs.len()
    }

    pub fn span(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }
}

/// Cox–de Boor evaluation of `Σ a_k B_k(x)`; zero outside the knot span.
///
/// Intervals are half-open except the last, which includes the right end.
pub fn eval_bspline(spec: &SplineSpec, x: f64) -> f64 {
    let t = &spec.knots;
    let (lo, hi) = spec.span();
    if !(lo..=hi).contains(&x) {
        return 0.0;
    }
    let p = spec.degree;
    // Active interval index i with t[i] <= x < t[i+1].
    let mut i = t.partition_point(|&k| k <= x).saturating_sub(1);
    if i >= t.len() - 1 {
        i = t.len() - 2;
    }
    // Degree-0 values on intervals i-p..=i, then raise degree in place.
    // n[j] holds B_{i-p+j, d}(x) after the pass for degree d.
    let mut n = vec![0.0; p + 1];
    n[p] = 1.0;
    for d in 1..=p {
        for j in (p - d)..=p {
            let k = i as isize - p as isize + j as isize; // basis index
            let mut v = 0.0;
            if k >= 0 {
                let k = k as usize;
                if k + d < t.len() {
                    let left = t[k + d] - t[k];
                    if left > 0.0 {
                        v += (x - t[k]) / left * n[j];
                    }
                }
                if j < p && k + d + 1 < t.len() {
                    let right = t[k + d + 1] - t[k + 1];
                    if right > 0.0 {
                        v += (t[k + d + 1] - x) / right * n[j + 1];
                    }
                }
            } else if j < p {
                let k1 = (k + 1) as usize;
                if k + 1 >= 0 && k1 + d < t.len() {
                    let right = t[k1 + d] - t[k1];
                    if right > 0.0 {
                        v += (t[k1 + d] - x) / right * n[j + 1];
                    }
                }
            }
            n[j] = v;
        }
    }
    let mut sum = 0.0;
    for (j, &b) in n.iter().enumerate() {
        let k = i as isize - p as isize + j as isize;
        if k >= 0 && (k as usize) < spec.coeffs.len() {
            sum += spec.coeffs[k as usize] * b;
        }
    }
    sum
}

/// Relu-power expansion of a spline.
#[derive(Clone, Debug, PartialEq)]
pub struct ReluPowerFit {
    /// Shift `t_k` and coefficient `c_k` of each `c_k · ρ_p(x − t_k)` term.
    pub terms: Vec<(f64, f64)>,
    /// Coefficients of `1, x, …, x^{p−1}`.
    pub poly: Vec<f64>,
    pub power: u32,
    pub max_residual: f64,
}

impl ReluPowerFit {
    pub fn eval(&self, x: f64) -> f64 {
        let mut y: f64 = self.terms.iter().map(|&(t, c)| c * crate::numerics::relu_pow_scalar(x - t, self.power)).sum();
        let mut xp = 1.0;
        for &c in &self.poly {
            y += c * xp;
            xp *= x;
        }
        y
    }
}

const FIT_GRID: usize = 1000;

/// Least-squares fit of `Σ c_k ρ_p(x − t_k) + poly_{<p}(x)` to the spline,
/// with one shift per knot and `p` the spline degree.
///
/// The grid covers the knot span padded by one mean knot spacing on each
/// side, so the spline's zero extension pins down every shift coefficient.
pub fn fit_bspline_as_relu_powers(spec: &SplineSpec) -> Result<ReluPowerFit, PowerMlpError> {
    let p = spec.degree;
    let (lo, hi) = spec.span();
    let pad = (hi - lo) / (spec.knots.len() - 1) as f64;
    let (a, b) = (lo - pad, hi + pad);
    let xs: Vec<f64> = (0..FIT_GRID).map(|i| a + (b - a) * i as f64 / (FIT_GRID - 1) as f64).collect();
    let n_shift = spec.knots.len();
    let cols = n_shift + p;
    let power = p as u32;

    // Columns are centred and scaled by the span so powers stay O(1).
    let scale = 1.0 / (b - a);
    let design = DMatrix::from_fn(FIT_GRID, cols, |r, c| {
        let x = xs[r];
        if c < n_shift {
            crate::numerics::relu_pow_scalar((x - spec.knots[c]) * scale, power)
        } else {
            (x * scale).powi((c - n_shift) as i32)
        }
    });
    let target = DVector::from_iterator(FIT_GRID, xs.iter().map(|&x| eval_bspline(spec, x)));

    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition < 1e12) {
        return Err(PowerMlpError::RankDeficient { condition });
    }
    let sol = svd.solve(&target, 0.0).map_err(|e| PowerMlpError::Spline(e.to_string()))?;

    let sp = scale.powi(power as i32);
    let terms = (0..n_shift).map(|k| (spec.knots[k], sol[k] * sp)).collect();
    let poly = (0..p).map(|j| sol[n_shift + j] * scale.powi(j as i32)).collect();
    let residual = &design * &sol - &target;
    let max_residual = residual.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    Ok(ReluPowerFit { terms, poly, power, max_residual })
}
