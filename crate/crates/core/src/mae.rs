//! Masked-autoencoder pretraining forward pass and feature extraction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{Decoder, Encoder};
use crate::config::{masked_count, ModelConfig};
use crate::error::{Error, Result};
use crate::gate::{patch_descriptors, Gate, GateInput};
use crate::geometry::{build_patches, estimate_normals, PatchSet, PointCloud, Vec3};
use crate::nn::{Linear, ParamStore, Real, Tape, Tensor, Var};

/// Which patch tokens the encoder sees.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLayout {
    pub masked_indices: Vec<usize>,
    pub visible_indices: Vec<usize>,
    pub ratio: f64,
}

/// Uniformly random mask of `floor(r * g)` of the `g` patches.
pub fn random_mask(groups: usize, ratio: f64, seed: u64) -> Result<MaskLayout> {
    let masked = masked_count(groups, ratio);
    if !(ratio > 0.0 && ratio < 1.0) || masked == 0 || masked >= groups {
        return Err(Error::DegenerateMaskRatio { ratio, groups });
    }
    let mut order: Vec<usize> = (0..groups).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut masked_indices = order[..masked].to_vec();
    let mut visible_indices = order[masked..].to_vec();
    masked_indices.sort_unstable();
    visible_indices.sort_unstable();
    Ok(MaskLayout {
        masked_indices,
        visible_indices,
        ratio,
    })
}

/// Affine map from decoded tokens to `k` points per patch in the centered frame.
#[derive(Clone, Debug)]
pub struct ReconstructionHead {
    pub linear: Linear,
    pub k: usize,
}

impl ReconstructionHead {
    pub const PREFIX: &'static str = "recon.head";

    pub fn new(d: usize, k: usize) -> Self {
        ReconstructionHead {
            linear: Linear::new(Self::PREFIX, d, 3 * k),
            k,
        }
    }

    /// `[m, d] -> [m, k, 3]`
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, t_d: Var) -> Result<Var> {
        let m = tape.shape(t_d)[0];
        let flat = self.linear.forward(tape, t_d)?;
        tape.reshape(flat, &[m, self.k, 3])
    }
}

/// Squared-L2 Chamfer distance between two point sets.
pub fn chamfer_distance(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let one_way = |xs: &[Vec3], ys: &[Vec3]| {
        xs.iter()
            .map(|x| ys.iter().map(|y| (x - y).norm_squared()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / xs.len() as f64
    };
    Ok(one_way(a, b) + one_way(b, a))
}

/// Result of one masked reconstruction pass.
#[derive(Clone, Debug)]
pub struct PretrainOutput<T> {
    /// Scalar Chamfer loss averaged over the masked patches.
    pub loss: Var,
    pub mask: MaskLayout,
    /// `[masked, k, 3]` predicted patches.
    pub prediction: Var,
    /// `[masked, k, 3]` centered ground-truth patches.
    pub target: Tensor<T>,
}

/// Seeds for the patch sampler and the mask, derived from one step seed.
pub fn split_seed(seed: u64) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (rng.random(), rng.random())
}

/// Seed of the patch sampler used for feature extraction.
pub const EXTRACT_SEED: u64 = 0;

/// Ensure the cloud carries normals, estimating them when absent.
pub fn with_normals(cloud: &PointCloud, cfg: &ModelConfig) -> Result<PointCloud> {
    if cloud.normals().is_some() {
        return Ok(cloud.clone());
    }
    Ok(estimate_normals(cloud, cfg.k_n.min(cloud.len()))?.cloud)
}

/// Tokenizer, encoder, decoder and reconstruction head.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub gate: Gate,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: ReconstructionHead,
}

impl Model {
    /// Prefixes of the parameters reused by downstream tasks.
    pub const BACKBONE: [&'static str; 2] = ["gate.", "encoder."];

    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            cfg: cfg.clone(),
            gate: Gate::new(cfg),
            encoder: Encoder::new(cfg),
            decoder: Decoder::new(cfg),
            head: ReconstructionHead::new(cfg.d, cfg.k),
        })
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.gate.init(&mut store, &mut rng)?;
        self.encoder.init(&mut store, &mut rng)?;
        self.decoder.init(&mut store, &mut rng)?;
        self.head.linear.init(&mut store, &mut rng)?;
        Ok(store)
    }

    pub fn is_backbone(name: &str) -> bool {
        Self::BACKBONE.iter().any(|p| name.starts_with(p))
    }

    /// Patches and tokenizer inputs of a cloud that already carries normals.
    pub fn gate_input<T: Real>(&self, cloud: &PointCloud, patch_seed: u64) -> Result<(PatchSet, GateInput<T>)> {
        let patches = build_patches(cloud, self.cfg.g, self.cfg.k, patch_seed)?;
        let descriptors = patch_descriptors(cloud, &patches, &self.cfg)?;
        let input = GateInput::new(&patches, &descriptors)?;
        Ok((patches, input))
    }

    /// Masked reconstruction loss of one cloud (normals required).
    pub fn pretrain_forward<T: Real>(&self, tape: &mut Tape<'_, T>, cloud: &PointCloud, seed: u64) -> Result<PretrainOutput<T>> {
        let (patch_seed, mask_seed) = split_seed(seed);
        let (_, input) = self.gate_input::<T>(cloud, patch_seed)?;
        let mask = random_mask(self.cfg.g, self.cfg.r, mask_seed)?;
        self.pretrain_from_input(tape, &input, mask)
    }

    /// Reconstruction loss for precomputed tokenizer inputs and mask.
    pub fn pretrain_from_input<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        input: &GateInput<T>,
        mask: MaskLayout,
    ) -> Result<PretrainOutput<T>> {
        let tokens = self.gate.forward(tape, input)?;
        let visible = tape.select_rows(tokens.tokens, &mask.visible_indices)?;
        let centers_visible = tokens.centers.select_rows(&mask.visible_indices)?;
        let centers_masked = tokens.centers.select_rows(&mask.masked_indices)?;
        let encoded = self.encoder.forward(tape, visible, &centers_visible)?;
        let mask_tokens = self.decoder.mask_tokens(tape, mask.masked_indices.len())?;
        let decoded = self
            .decoder
            .forward(tape, encoded, mask_tokens, &centers_visible, &centers_masked)?;
        let prediction = self.head.forward(tape, decoded)?;
        let target = input.neighborhoods.select_rows(&mask.masked_indices)?;
        let gt = tape.constant(target.clone());
        let loss = tape.chamfer_l2(prediction, gt)?;
        Ok(PretrainOutput {
            loss,
            mask,
            prediction,
            target,
        })
    }

    /// Encoded tokens `[g, d]` of every patch, no masking.
    pub fn encode_all<T: Real>(&self, tape: &mut Tape<'_, T>, input: &GateInput<T>) -> Result<Var> {
        let tokens = self.gate.forward(tape, input)?;
        self.encoder.forward(tape, tokens.tokens, &tokens.centers)
    }

    /// Max- and mean-pooled encoder output, `[2d]`.
    pub fn global_feature<T: Real>(&self, tape: &mut Tape<'_, T>, input: &GateInput<T>) -> Result<Var> {
        let encoded = self.encode_all(tape, input)?;
        let max = tape.max_axis(encoded, 0)?;
        let mean = tape.mean_axis(encoded, 0)?;
        tape.concat(&[max, mean], 0)
    }

    /// Global feature of a cloud with the fixed extraction seed.
    pub fn extract_global_feature<T: Real>(&self, cloud: &PointCloud, params: &ParamStore<T>) -> Result<Vec<T>> {
        let cloud = with_normals(cloud, &self.cfg)?;
        let (_, input) = self.gate_input::<T>(&cloud, EXTRACT_SEED)?;
        let mut tape = Tape::with_params(params);
        let f = self.global_feature(&mut tape, &input)?;
        Ok(tape.value(f).data().to_vec())
    }
}
