//! Geometric and adaptive token embedding: patch points and center
//! descriptors are embedded separately, the patch features are gated by
//! channel and spatial saliency, and everything is fused and max-pooled into
//! one token per patch.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{spfh_descriptor, PatchSet, PointCloud, SpfhDescriptor};
use crate::nn::{Activation, Mlp, ParamStore, Real, Tape, Tensor, Var};

/// Channel reduction of the channel-saliency bottleneck.
pub const CHANNEL_REDUCTION: usize = 8;
/// Hidden width of the per-position spatial-saliency MLP.
pub const SPATIAL_HIDDEN: usize = 8;

/// Numeric inputs of the tokenizer for one cloud.
#[derive(Clone, Debug)]
pub struct GateInput<T> {
    /// `[g, k, 3]` centered neighborhoods.
    pub neighborhoods: Tensor<T>,
    /// `[g, 3 * bins]` center descriptors.
    pub descriptors: Tensor<T>,
    /// `[g, 3]` patch centers.
    pub centers: Tensor<T>,
}

impl<T: Real> GateInput<T> {
    pub fn new(patches: &PatchSet, descriptors: &[SpfhDescriptor]) -> Result<Self> {
        let g = patches.groups();
        let k = patches.group_size();
        if descriptors.len() != g {
            return Err(Error::Shape(format!("{} descriptors for {g} patches", descriptors.len())));
        }
        let width = descriptors.first().map_or(0, |d| d.histogram.len());
        let mut hood = Vec::with_capacity(g * k * 3);
        for row in &patches.neighborhoods {
            for p in row {
                hood.extend([p.x, p.y, p.z]);
            }
        }
        let mut desc = Vec::with_capacity(g * width);
        for d in descriptors {
            if d.histogram.len() != width {
                return Err(Error::Shape("descriptors of differing lengths".into()));
            }
            desc.extend_from_slice(&d.histogram);
        }
        let centers: Vec<f64> = patches.centers.iter().flat_map(|c| [c.x, c.y, c.z]).collect();
        Ok(GateInput {
            neighborhoods: Tensor::from_f64(&[g, k, 3], &hood)?,
            descriptors: Tensor::from_f64(&[g, width], &desc)?,
            centers: Tensor::from_f64(&[g, 3], &centers)?,
        })
    }
}

/// SPFH of every patch center over its patch neighbors.
pub fn patch_descriptors(cloud: &PointCloud, patches: &PatchSet, cfg: &ModelConfig) -> Result<Vec<SpfhDescriptor>> {
    patches
        .center_indices
        .iter()
        .zip(&patches.neighbor_indices)
        .map(|(&c, nbrs)| spfh_descriptor(cloud, c, nbrs, cfg.bins, cfg.pair_feature_variant))
        .collect()
}

/// Gate values produced by the saliency stage.
#[derive(Clone, Copy, Debug)]
pub struct SaliencyWeights {
    /// `[g, 1, c_p]`
    pub channel: Var,
    /// `[g, k, 1]`
    pub spatial: Var,
}

/// Per-patch tokens with the centers they came from.
#[derive(Clone, Debug)]
pub struct TokenSequence<T> {
    /// `[g, d]`
    pub tokens: Var,
    /// `[g, 3]`
    pub centers: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Gate {
    pub patch_embed: Mlp,
    pub descriptor_embed: Mlp,
    pub channel_saliency: Mlp,
    pub spatial_saliency: Mlp,
    pub fusion: Mlp,
}

impl Gate {
    pub fn new(cfg: &ModelConfig) -> Self {
        let cp = cfg.patch_channels;
        let cd = cfg.descriptor_channels;
        let act = Activation::Gelu;
        Gate {
            patch_embed: Mlp::new("gate.patch_embed", &[3, cfg.embed_hidden, cp], act),
            descriptor_embed: Mlp::new("gate.descriptor_embed", &[cfg.descriptor_len(), cfg.embed_hidden, cd], act),
            channel_saliency: Mlp::new("gate.channel_saliency", &[cp, (cp / CHANNEL_REDUCTION).max(1), cp], act),
            spatial_saliency: Mlp::new("gate.spatial_saliency", &[1, SPATIAL_HIDDEN, 1], act),
            fusion: Mlp::new("gate.fusion", &[2 * cp + cd, cfg.d, cfg.d], act),
        }
    }

    fn mlps(&self) -> [&Mlp; 5] {
        [
            &self.patch_embed,
            &self.descriptor_embed,
            &self.channel_saliency,
            &self.spatial_saliency,
            &self.fusion,
        ]
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.mlps().into_iter().try_for_each(|m| m.init(store, rng))
    }

    /// `[g, k, 3]` centered points to per-point features `[g, k, c_p]`.
    pub fn embed_patch_points<T: Real>(&self, tape: &mut Tape<'_, T>, neighborhoods: Var) -> Result<Var> {
        let s = tape.shape(neighborhoods);
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Shape(format!("patch points must be [g, k, 3], got {s:?}")));
        }
        self.patch_embed.forward(tape, neighborhoods)
    }

    /// `[g, 3 * bins]` descriptors to `[g, c_d]`.
    pub fn embed_descriptor<T: Real>(&self, tape: &mut Tape<'_, T>, descriptors: Var) -> Result<Var> {
        let s = tape.shape(descriptors);
        if s.len() != 2 || s[1] != self.descriptor_embed.input() {
            return Err(Error::Shape(format!(
                "descriptors must be [g, {}], got {s:?}",
                self.descriptor_embed.input()
            )));
        }
        self.descriptor_embed.forward(tape, descriptors)
    }

    /// Channel gate from statistics pooled over the points of each patch,
    /// spatial gate from statistics pooled over channels; returns the gates
    /// and `P_T * W_ca * W_sa`.
    pub fn adaptive_saliency<T: Real>(&self, tape: &mut Tape<'_, T>, p_t: Var) -> Result<(SaliencyWeights, Var)> {
        let s = tape.shape(p_t).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!("patch tokens must be [g, k, c], got {s:?}")));
        }
        let (g, k, c) = (s[0], s[1], s[2]);

        let avg = tape.mean_axis(p_t, 1)?;
        let max = tape.max_axis(p_t, 1)?;
        let a = self.channel_saliency.forward(tape, avg)?;
        let b = self.channel_saliency.forward(tape, max)?;
        let logits = tape.add(a, b)?;
        let gate = tape.sigmoid(logits);
        let channel = tape.reshape(gate, &[g, 1, c])?;

        let avg = tape.mean_axis(p_t, 2)?;
        let max = tape.max_axis(p_t, 2)?;
        let avg = tape.reshape(avg, &[g, k, 1])?;
        let max = tape.reshape(max, &[g, k, 1])?;
        let a = self.spatial_saliency.forward(tape, avg)?;
        let b = self.spatial_saliency.forward(tape, max)?;
        let logits = tape.add(a, b)?;
        let spatial = tape.sigmoid(logits);

        let gated = tape.mul(p_t, channel)?;
        let salient = tape.mul(gated, spatial)?;
        Ok((SaliencyWeights { channel, spatial }, salient))
    }

    /// Concatenate `P_T`, `S_T` and the broadcast `D_T`, fuse per point and
    /// max-pool over each patch: `[g, d]`.
    pub fn latent_tokens<T: Real>(&self, tape: &mut Tape<'_, T>, p_t: Var, s_t: Var, d_t: Var) -> Result<Var> {
        let s = tape.shape(p_t).to_vec();
        let ds = tape.shape(d_t).to_vec();
        if s.len() != 3 || tape.shape(s_t) != s.as_slice() || ds.len() != 2 || ds[0] != s[0] {
            return Err(Error::Shape(format!(
                "latent fusion of {s:?}, {:?}, {ds:?}",
                tape.shape(s_t)
            )));
        }
        let (g, k) = (s[0], s[1]);
        let d_row = tape.reshape(d_t, &[g, 1, ds[1]])?;
        let d_b = tape.broadcast_to(d_row, &[g, k, ds[1]])?;
        let cat = tape.concat(&[p_t, s_t, d_b], 2)?;
        let fused = self.fusion.forward(tape, cat)?;
        tape.max_axis(fused, 1)
    }

    /// Full tokenizer.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, input: &GateInput<T>) -> Result<TokenSequence<T>> {
        let hood = tape.constant(input.neighborhoods.clone());
        let desc = tape.constant(input.descriptors.clone());
        self.forward_vars(tape, hood, desc, input.centers.clone())
    }

    pub(crate) fn forward_vars<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        hood: Var,
        desc: Var,
        centers: Tensor<T>,
    ) -> Result<TokenSequence<T>> {
        let p_t = self.embed_patch_points(tape, hood)?;
        let d_t = self.embed_descriptor(tape, desc)?;
        let (_, s_t) = self.adaptive_saliency(tape, p_t)?;
        let tokens = self.latent_tokens(tape, p_t, s_t, d_t)?;
        Ok(TokenSequence { tokens, centers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_param_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig::gradcheck()
    }

    fn store(cfg: &ModelConfig, seed: u64) -> (Gate, ParamStore<f64>) {
        let gate = Gate::new(cfg);
        let mut s = ParamStore::new();
        gate.init(&mut s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (gate, s)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn default_shapes() {
        let cfg = ModelConfig::default();
        let gate = Gate::new(&cfg);
        let mut s = ParamStore::<f32>::new();
        gate.init(&mut s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::with_params(&s);
        let hood = tape.constant(random(&[64, 32, 3], 1).cast());
        let desc = tape.constant(random(&[64, 33], 2).cast());
        let p_t = gate.embed_patch_points(&mut tape, hood).unwrap();
        assert_eq!(tape.shape(p_t), &[64, 32, 128]);
        let d_t = gate.embed_descriptor(&mut tape, desc).unwrap();
        assert_eq!(tape.shape(d_t), &[64, 128]);
        let (_, s_t) = gate.adaptive_saliency(&mut tape, p_t).unwrap();
        let t = gate.latent_tokens(&mut tape, p_t, s_t, d_t).unwrap();
        assert_eq!(tape.shape(t), &[64, 384]);
    }

    #[test]
    fn zero_saliency_halves_twice() {
        let cfg = small();
        let (gate, mut s) = store(&cfg, 0);
        for (name, p) in s.iter_mut() {
            if name.contains("saliency") {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::with_params(&s);
        let p_t = tape.constant(random(&[4, 8, 16], 3));
        let (w, s_t) = gate.adaptive_saliency(&mut tape, p_t).unwrap();
        assert!(tape.value(w.channel).data().iter().all(|&v| v == 0.5));
        assert!(tape.value(w.spatial).data().iter().all(|&v| v == 0.5));
        for (a, b) in tape.value(s_t).data().iter().zip(tape.value(p_t).data()) {
            assert_eq!(*a, 0.25 * b);
        }
    }

    #[test]
    fn wrong_descriptor_width_is_rejected() {
        let cfg = small();
        let (gate, s) = store(&cfg, 0);
        let mut tape = Tape::with_params(&s);
        let desc = tape.constant(Tensor::zeros(&[4, 30]));
        assert!(gate.embed_descriptor(&mut tape, desc).is_err());
    }

    #[test]
    fn identical_descriptors_give_identical_rows() {
        let cfg = small();
        let (gate, s) = store(&cfg, 1);
        let row = random(&[1, 33], 4);
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(row.data());
        }
        let mut tape = Tape::with_params(&s);
        let desc = tape.constant(Tensor::new(vec![4, 33], data).unwrap());
        let d_t = gate.embed_descriptor(&mut tape, desc).unwrap();
        let out = tape.value(d_t).data();
        let w = cfg.descriptor_channels;
        for r in 1..4 {
            assert_eq!(&out[..w], &out[r * w..(r + 1) * w]);
        }
    }

    #[test]
    fn saliency_gradient_matches_differences() {
        let cfg = small();
        let (gate, s) = store(&cfg, 2);
        let mut params = s.subset("gate.channel_saliency");
        params.merge(s.subset("gate.spatial_saliency")).unwrap();
        let x = random(&[2, 5, 16], 5);
        let res = check_param_gradients(
            &params,
            |tape| {
                let p = tape.constant(x.clone());
                let (_, s_t) = gate.adaptive_saliency(tape, p)?;
                Ok(tape.mean_all(s_t))
            },
            1e-5,
        )
        .unwrap();
        assert!(res.max_relative_error < 1e-4, "{res:?}");
    }
}
