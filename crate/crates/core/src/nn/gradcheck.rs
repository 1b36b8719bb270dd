//! Central finite-difference verification of analytic gradients (float64).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Step used throughout the gradient suites.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Which coordinate produced the maximum (parameter name, flat index).
    pub worst: (String, usize),
    /// Analytic and central-difference values at `worst`.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

/// How many significant digits a gradient must carry, relative to the
/// resolution of its difference quotient, before its relative error is
/// trusted.
const RESOLVABLE: f64 = 1e4;
/// Assumed rounding error of one loss evaluation, in ulps; long reductions
/// accumulate a few.
const EVAL_ULPS: f64 = 8.0;

/// `|a - n| / max(1e-8, |a| + |n|)`, with the floor raised to `RESOLVABLE`
/// times the rounding resolution of the central difference. Gradients below
/// that (typically parameters the loss is invariant to) are compared on an
/// absolute scale instead of amplifying rounding noise.
fn coordinate_error(analytic: f64, numeric: f64, up: f64, down: f64, h: f64) -> f64 {
    let resolution = EVAL_ULPS * f64::EPSILON * up.abs().max(down.abs()).max(1.0) / (2.0 * h);
    let floor = (RESOLVABLE * resolution).max(1e-8);
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Compare `analytic` (the gradient of `f` at `x`) against central
/// differences of `f`; returns the max relative error over coordinates.
pub fn finite_difference_check(
    f: impl Fn(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    h: f64,
) -> Result<f64> {
    if analytic.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "gradient shape {:?} vs input {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        worst = worst.max(coordinate_error(a, numeric, up, down, h));
    }
    Ok(worst)
}

/// Gradient check of a scalar function built on a tape from a single input.
pub fn check_input_gradient(
    x: &Tensor<f64>,
    build: impl Fn(&mut Tape<'_, f64>, Var) -> Result<Var>,
    h: f64,
) -> Result<f64> {
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = build(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let out = build(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    finite_difference_check(eval, x, &analytic, h)
}

/// Gradient check over every trainable parameter of `store`.
pub fn check_param_gradients(
    store: &ParamStore<f64>,
    build: impl Fn(&mut Tape<'_, f64>) -> Result<Var>,
    h: f64,
) -> Result<GradCheck> {
    check_coordinates(store, build, h, |_, len| (0..len).collect())
}

/// Like [`check_param_gradients`] but only at up to `per_tensor` seeded
/// random coordinates of each trainable tensor, for models too large to
/// difference exhaustively.
pub fn check_param_gradients_sampled(
    store: &ParamStore<f64>,
    build: impl Fn(&mut Tape<'_, f64>) -> Result<Var>,
    h: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = std::collections::BTreeMap::new();
    for (name, p) in store.iter().filter(|(_, p)| p.trainable) {
        let len = p.value.len();
        let chosen = if len <= per_tensor {
            (0..len).collect()
        } else {
            let mut c = rand::seq::index::sample(&mut rng, len, per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        picks.insert(name.to_string(), chosen);
    }
    check_coordinates(store, build, h, |name, _| picks[name].clone())
}

fn check_coordinates(
    store: &ParamStore<f64>,
    build: impl Fn(&mut Tape<'_, f64>) -> Result<Var>,
    h: f64,
    select: impl Fn(&str, usize) -> Vec<usize>,
) -> Result<GradCheck> {
    let analytic = {
        let mut tape = Tape::with_params(store);
        let out = build(&mut tape)?;
        tape.backward(out)?.into_params()
    };
    let mut probe = store.clone();
    let mut result = GradCheck {
        max_relative_error: 0.0,
        worst: (String::new(), 0),
        worst_values: (0.0, 0.0),
        coordinates: 0,
    };
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let len = store.get(&name)?.len();
        let grad = analytic
            .get(&name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(&name).unwrap().shape()));
        for i in select(&name, len) {
            let orig = store.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + h;
            let up = eval_store(&probe, &build)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - h;
            let down = eval_store(&probe, &build)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFiniteGradient);
            }
            let err = coordinate_error(a, numeric, up, down, h);
            result.coordinates += 1;
            if err > result.max_relative_error {
                result.max_relative_error = err;
                result.worst = (name.clone(), i);
                result.worst_values = (a, numeric);
            }
        }
    }
    Ok(result)
}

fn eval_store(store: &ParamStore<f64>, build: &impl Fn(&mut Tape<'_, f64>) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::with_params(store);
    let out = build(&mut tape)?;
    Ok(tape.value(out).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let analytic = Tensor::from_f64(&[2], &[2.0, 4.0]).unwrap();
        let err = finite_difference_check(
            |t| Ok(t.data().iter().map(|v| v * v).sum()),
            &x,
            &analytic,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn sigmoid_sum_matches() {
        let x = Tensor::from_f64(&[5], &[-2.0, -0.5, 0.0, 0.7, 3.0]).unwrap();
        let err = check_input_gradient(
            &x,
            |tape, v| {
                let s = tape.sigmoid(v);
                Ok(tape.sum_all(s))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn invariant_coordinates_do_not_count() {
        // f ignores x[1]; only rounding noise reaches its difference quotient
        let x = Tensor::from_f64(&[2], &[0.3, 0.7]).unwrap();
        let analytic = Tensor::from_f64(&[2], &[2.0 * 0.3, 1e-17]).unwrap();
        let err = finite_difference_check(
            |t| Ok(t.data()[0] * t.data()[0] + (t.data()[1] - t.data()[1])),
            &x,
            &analytic,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
        let wrong = Tensor::from_f64(&[2], &[2.0 * 0.3, 1e-3]).unwrap();
        assert!(finite_difference_check(|t| Ok(t.data()[0] * t.data()[0]), &x, &wrong, DEFAULT_STEP).unwrap() > 0.9);
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let analytic = Tensor::from_f64(&[1], &[f64::NAN]).unwrap();
        assert!(matches!(
            finite_difference_check(|t| Ok(t.data()[0]), &x, &analytic, 1e-5),
            Err(Error::NonFiniteGradient)
        ));
    }
}
