//! Learnable building blocks assembled from tape primitives.

use rand::Rng;

use super::params::{Init, ParamStore, WEIGHT_STD};
use super::tape::{Activation, Tape, Var};
use super::tensor::Real;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub prefix: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        Linear {
            prefix: prefix.into(),
            input,
            output,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        store.insert(
            self.weight_name(),
            Init::TruncNormal(WEIGHT_STD).tensor(&[self.input, self.output], rng),
            true,
        )?;
        store.insert(self.bias_name(), Init::Zeros.tensor(&[self.output], rng), true)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let got = *tape.shape(x).last().unwrap_or(&0);
        if got != self.input {
            return Err(Error::MlpDimensionMismatch {
                expected: self.input,
                got,
            });
        }
        let w = tape.param(&self.weight_name())?;
        let b = tape.param(&self.bias_name())?;
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Stack of affine layers with an activation between consecutive layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub prefix: String,
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Apply the activation after the last layer too.
    pub activate_last: bool,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, widths: &[usize], activation: Activation) -> Self {
        assert!(widths.len() >= 2, "an mlp needs at least input and output widths");
        Mlp {
            prefix: prefix.into(),
            widths: widths.to_vec(),
            activation,
            activate_last: false,
        }
    }

    pub fn layers(&self) -> Vec<Linear> {
        self.widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{}.fc{i}", self.prefix), w[0], w[1]))
            .collect()
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.layers().iter().try_for_each(|l| l.init(store, rng))
    }

    /// Apply to `x [..., in]`, producing `[..., out]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut h = x;
        for (i, layer) in layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last || self.activate_last {
                h = tape.activation(h, self.activation);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub prefix: String,
    pub width: usize,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, width: usize) -> Self {
        LayerNorm {
            prefix: prefix.into(),
            width,
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        store.insert(format!("{}.gain", self.prefix), Init::Ones.tensor(&[self.width], rng), true)?;
        store.insert(format!("{}.bias", self.prefix), Init::Zeros.tensor(&[self.width], rng), true)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(&format!("{}.gain", self.prefix))?;
        let b = tape.param(&format!("{}.bias", self.prefix))?;
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Reduction used by [`pooled_stats`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Max,
    Mean,
}

pub fn pooled_stats<T: Real>(tape: &mut Tape<'_, T>, x: Var, axis: usize, mode: Pool) -> Result<Var> {
    match mode {
        Pool::Max => tape.max_axis(x, axis),
        Pool::Mean => tape.mean_axis(x, axis),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_mlp_gives_zero_output() {
        let mlp = Mlp::new("m", &[3, 5, 2], Activation::Gelu);
        let mut store = ParamStore::<f64>::new();
        mlp.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (_, p) in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::from_fn(&[4, 7, 3], |i| i as f64));
        let y = mlp.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[4, 7, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_is_pass_through() {
        let mlp = Mlp::new("id", &[3, 3], Activation::Gelu);
        let mut store = ParamStore::<f64>::new();
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        store.insert("id.fc0.weight", eye, true).unwrap();
        store.insert("id.fc0.bias", Tensor::zeros(&[3]), true).unwrap();
        let mut tape = Tape::with_params(&store);
        let input = Tensor::from_f64(&[2, 3], &[1.5, -2.0, 0.25, 3.0, 4.0, -5.0]).unwrap();
        let x = tape.constant(input.clone());
        let y = mlp.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn width_mismatch_is_reported() {
        let mlp = Mlp::new("m", &[4, 2], Activation::Relu);
        let mut store = ParamStore::<f32>::new();
        mlp.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            mlp.forward(&mut tape, x),
            Err(Error::MlpDimensionMismatch { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn layer_norm_cases() {
        let ln = LayerNorm::new("ln", 2);
        let mut store = ParamStore::<f64>::new();
        ln.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 3.0, 7.0, 7.0]).unwrap());
        let y = ln.forward(&mut tape, x).unwrap();
        let out = tape.value(y).data();
        // (1,3): mean 2, std 1 -> (-1, 1) up to eps
        assert!((out[0] + 1.0).abs() < 1e-5 && (out[1] - 1.0).abs() < 1e-5);
        // constant row -> zeros
        assert_eq!(&out[2..], &[0.0, 0.0]);
    }

    #[test]
    fn pooling_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 3], &[0.0, 4.0, 0.0]).unwrap());
        let m = pooled_stats(&mut tape, x, 1, Pool::Max).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0]);
        let y = tape.constant(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let mean = pooled_stats(&mut tape, y, 0, Pool::Mean).unwrap();
        assert_eq!(tape.value(mean).item(), 2.0);
        let z = tape.constant(Tensor::zeros(&[2, 0]));
        assert!(pooled_stats(&mut tape, z, 1, Pool::Max).is_err());
    }
}
