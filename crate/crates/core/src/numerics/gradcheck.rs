//! Central-difference oracle for tape gradients.

use std::fmt::Display;

use super::{NumericsError, Tape, Tensor, Var};

/// Outcome of [`finite_difference_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, floor)` over the
    /// checked coordinates, where `floor` is `1e-3` times the largest analytic
    /// magnitude (or `1e-12`). The floor keeps exactly-zero components from
    /// turning central-difference round-off into unbounded relative error.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval_scalar<F, E>(f: &F, x: &Tensor) -> Result<f64, NumericsError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, E>,
    E: Display,
{
    let tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&tape, v).map_err(|e| NumericsError::Callback(e.to_string()))?;
    let val = out.value();
    if val.len() != 1 {
        return Err(NumericsError::NonScalarLoss { shape: val.shape().to_vec() });
    }
    let y = val.data()[0];
    if !y.is_finite() {
        return Err(NumericsError::NonFinite { context: "finite-difference evaluation".into() });
    }
    Ok(y)
}

/// Compares the tape gradient of scalar `f` at `x` against central differences
/// over every coordinate of `x`.
pub fn finite_difference_check<F, E>(f: F, x: &Tensor, step: f64) -> Result<GradCheck, NumericsError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, E>,
    E: Display,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_difference_check_at(f, x, step, &coords)
}

/// As [`finite_difference_check`], restricted to the listed coordinates.
pub fn finite_difference_check_at<F, E>(
    f: F,
    x: &Tensor,
    step: f64,
    coords: &[usize],
) -> Result<GradCheck, NumericsError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, E>,
    E: Display,
{
    if !(step > 0.0) {
        return Err(NumericsError::InvalidArgument("finite-difference step must be positive".into()));
    }
    let tape = Tape::new();
    let v = tape.var(x.clone());
    let out = f(&tape, v).map_err(|e| NumericsError::Callback(e.to_string()))?;
    let grads = tape.backward(&out)?;
    let full = grads.wrt(&v);
    if !full.is_finite() || !out.value().is_finite() {
        return Err(NumericsError::NonFinite { context: "analytic gradient".into() });
    }

    let scale = coords.iter().map(|&i| full.data()[i].abs()).fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(1e-12);
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut max_rel_error = 0.0;
    let mut worst_index = coords.first().copied().unwrap_or(0);
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let a = full.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
        analytic.push(a);
        numeric.push(fd);
    }
    Ok(GradCheck { max_rel_error, worst_index, analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::vector((0..12).map(|_| rng.random_range(-2.0..2.0)).collect());
        let r = finite_difference_check(|_, v: Var<'_>| v.square().map(|s| s.sum()), &x, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-7, "{}", r.max_rel_error);
        for (a, xi) in r.analytic.iter().zip(x.data()) {
            assert!((a - 2.0 * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let r = finite_difference_check(
            |t, _v: Var<'_>| Ok::<_, NumericsError>(t.constant(Tensor::scalar(7.0)).sum()),
            &x,
            1e-6,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn relu_pow_chain_away_from_kink() {
        let step = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Keep every coordinate more than 10 steps away from the kink.
        let x = Tensor::vector(
            (0..16)
                .map(|_| {
                    let m: f64 = rng.random_range(10.0 * step + 1e-3..1.5);
                    if rng.random_bool(0.5) { m } else { -m }
                })
                .collect(),
        );
        for ell in 1..=3 {
            let r = finite_difference_check(
                |_, v: Var<'_>| {
                    let y = v.relu_pow(ell)?.scale(0.7).add_scalar(0.2).relu_pow(2)?;
                    Ok::<_, NumericsError>(y.sum())
                },
                &x,
                step,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "ell={ell}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn non_finite_output_is_a_failure() {
        let x = Tensor::vector(vec![1000.0]);
        let r = finite_difference_check(|_, v: Var<'_>| Ok::<_, NumericsError>(v.exp().sum()), &x, 1e-6);
        assert!(matches!(r, Err(NumericsError::NonFinite { .. })));
    }
}
