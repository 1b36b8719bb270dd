//! Positional embedding, self/external attention, pre-norm transformer
//! blocks and the encoder/decoder stacks.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Activation, Init, LayerNorm, Linear, Mlp, ParamStore, Real, Tape, Tensor, Var};
use crate::nn::params::WEIGHT_STD;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    External,
    SelfAttention,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub d: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub depth: usize,
    pub s_mem: usize,
    pub query_projection: bool,
}

impl BlockConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d ({}) not divisible by heads ({})", self.d, self.heads)));
        }
        if self.mlp_ratio == 0 || self.s_mem == 0 {
            return Err(Error::Config("mlp ratio and memory slots must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder(cfg: &ModelConfig) -> Self {
        BlockConfig {
            d: cfg.d,
            heads: cfg.heads,
            mlp_ratio: cfg.mlp_ratio,
            depth: cfg.encoder_depth,
            s_mem: cfg.s_mem,
            query_projection: cfg.ea_query_projection,
        }
    }

    pub fn decoder(cfg: &ModelConfig) -> Self {
        BlockConfig {
            depth: cfg.decoder_depth,
            ..Self::encoder(cfg)
        }
    }
}

/// `[m, d] -> [heads, m, d / heads]`
fn split_heads<T: Real>(tape: &mut Tape<'_, T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let x = tape.reshape(x, &[s[0], heads, s[1] / heads])?;
    tape.permute(x, &[1, 0, 2])
}

/// `[heads, m, d_h] -> [m, heads * d_h]`
fn merge_heads<T: Real>(tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let x = tape.permute(x, &[1, 0, 2])?;
    tape.reshape(x, &[s[1], s[0] * s[2]])
}

/// Multi-head scaled dot-product self-attention.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub prefix: String,
    pub d: usize,
    pub heads: usize,
}

impl SelfAttention {
    fn proj(&self, name: &str) -> Linear {
        Linear::new(format!("{}.{name}", self.prefix), self.d, self.d)
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        for name in ["query", "key", "value", "out"] {
            self.proj(name).init(store, rng)?;
        }
        Ok(())
    }

    /// Softmax attention weights `[heads, m, m]`, rows over keys.
    pub fn weights<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<(Var, Var)> {
        let q = self.proj("query").forward(tape, x)?;
        let k = self.proj("key").forward(tape, x)?;
        let v = self.proj("value").forward(tape, x)?;
        let q = split_heads(tape, q, self.heads)?;
        let k = split_heads(tape, k, self.heads)?;
        let v = split_heads(tape, v, self.heads)?;
        let scores = tape.bmm(q, k, true)?;
        let scale = T::from_f64_lossy(1.0 / ((self.d / self.heads) as f64).sqrt());
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores, 2)?;
        Ok((attn, v))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (attn, v) = self.weights(tape, x)?;
        let out = tape.bmm(attn, v, false)?;
        let out = merge_heads(tape, out)?;
        self.proj("out").forward(tape, out)
    }
}

/// Multi-head attention against learnable external key/value memories with
/// softmax-over-tokens then l1-over-slots normalization.
#[derive(Clone, Debug)]
pub struct ExternalAttention {
    pub prefix: String,
    pub d: usize,
    pub heads: usize,
    pub slots: usize,
    pub query_projection: bool,
}

impl ExternalAttention {
    fn proj(&self, name: &str) -> Linear {
        Linear::new(format!("{}.{name}", self.prefix), self.d, self.d)
    }

    pub fn memory_key_name(&self) -> String {
        format!("{}.memory_key", self.prefix)
    }

    pub fn memory_value_name(&self) -> String {
        format!("{}.memory_value", self.prefix)
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        if self.query_projection {
            self.proj("query").init(store, rng)?;
        }
        self.proj("out").init(store, rng)?;
        let shape = [self.heads, self.slots, self.d / self.heads];
        store.insert(self.memory_key_name(), Init::TruncNormal(WEIGHT_STD).tensor(&shape, rng), true)?;
        store.insert(self.memory_value_name(), Init::TruncNormal(WEIGHT_STD).tensor(&shape, rng), true)
    }

    /// Double-normalized attention map `[heads, m, slots]`.
    pub fn weights<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let q = if self.query_projection {
            self.proj("query").forward(tape, x)?
        } else {
            x
        };
        let q = split_heads(tape, q, self.heads)?;
        let mk = tape.param(&self.memory_key_name())?;
        let raw = tape.bmm(q, mk, true)?;
        let over_tokens = tape.softmax(raw, 1)?;
        tape.l1_normalize(over_tokens, 2)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let attn = self.weights(tape, x)?;
        let mv = tape.param(&self.memory_value_name())?;
        let out = tape.bmm(attn, mv, false)?;
        let out = merge_heads(tape, out)?;
        self.proj("out").forward(tape, out)
    }
}

#[derive(Clone, Debug)]
enum Attention {
    External(ExternalAttention),
    SelfAttention(SelfAttention),
}

/// Pre-norm residual block:
/// `x += attn(norm1(x + pos))`, then `x += mlp(norm2(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub prefix: String,
    attention: Attention,
    norm1: LayerNorm,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(prefix: impl Into<String>, kind: AttentionKind, cfg: &BlockConfig) -> Self {
        let prefix = prefix.into();
        let attn_prefix = format!("{prefix}.attn");
        let attention = match kind {
            AttentionKind::External => Attention::External(ExternalAttention {
                prefix: attn_prefix,
                d: cfg.d,
                heads: cfg.heads,
                slots: cfg.s_mem,
                query_projection: cfg.query_projection,
            }),
            AttentionKind::SelfAttention => Attention::SelfAttention(SelfAttention {
                prefix: attn_prefix,
                d: cfg.d,
                heads: cfg.heads,
            }),
        };
        TransformerBlock {
            norm1: LayerNorm::new(format!("{prefix}.norm1"), cfg.d),
            norm2: LayerNorm::new(format!("{prefix}.norm2"), cfg.d),
            mlp: Mlp::new(format!("{prefix}.mlp"), &[cfg.d, cfg.d * cfg.mlp_ratio, cfg.d], Activation::Gelu),
            attention,
            prefix,
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.norm1.init(store, rng)?;
        match &self.attention {
            Attention::External(a) => a.init(store, rng)?,
            Attention::SelfAttention(a) => a.init(store, rng)?,
        }
        self.norm2.init(store, rng)?;
        self.mlp.init(store, rng)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, pos: Var) -> Result<Var> {
        if tape.shape(x) != tape.shape(pos) {
            return Err(Error::Shape(format!(
                "positional tokens {:?} for input {:?}",
                tape.shape(pos),
                tape.shape(x)
            )));
        }
        let h = tape.add(x, pos)?;
        let h = self.norm1.forward(tape, h)?;
        let h = match &self.attention {
            Attention::External(a) => a.forward(tape, h)?,
            Attention::SelfAttention(a) => a.forward(tape, h)?,
        };
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, x)?;
        let h = self.mlp.forward(tape, h)?;
        tape.add(x, h)
    }
}

/// Center coordinates `[m, 3]` to positional tokens `[m, d]`.
pub fn positional_mlp(prefix: &str, cfg: &ModelConfig) -> Mlp {
    Mlp::new(format!("{prefix}.pos_embed"), &[3, cfg.embed_hidden, cfg.d], Activation::Gelu)
}

pub fn positional_embed<T: Real>(tape: &mut Tape<'_, T>, mlp: &Mlp, centers: &Tensor<T>) -> Result<Var> {
    let c = tape.constant(centers.clone());
    mlp.forward(tape, c)
}

/// External-attention encoder over the visible tokens.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub pos_embed: Mlp,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub const PREFIX: &'static str = "encoder";

    pub fn new(cfg: &ModelConfig) -> Self {
        let bc = BlockConfig::encoder(cfg);
        Encoder {
            pos_embed: positional_mlp(Self::PREFIX, cfg),
            blocks: (0..bc.depth)
                .map(|i| TransformerBlock::new(format!("{}.blocks.{i}", Self::PREFIX), AttentionKind::External, &bc))
                .collect(),
            norm: LayerNorm::new(format!("{}.norm", Self::PREFIX), cfg.d),
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.pos_embed.init(store, rng)?;
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        self.norm.init(store, rng)
    }

    /// `tokens [m, d]` with `centers [m, 3]` to encoded tokens `[m, d]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, tokens: Var, centers: &Tensor<T>) -> Result<Var> {
        if tape.shape(tokens).first().copied().unwrap_or(0) == 0 {
            return Err(Error::NoVisibleTokens);
        }
        let pos = positional_embed(tape, &self.pos_embed, centers)?;
        let mut x = tokens;
        for b in &self.blocks {
            x = b.forward(tape, x, pos)?;
        }
        self.norm.forward(tape, x)
    }
}

/// Self-attention decoder that fills in the masked tokens.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub pos_embed: Mlp,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub d: usize,
}

impl Decoder {
    pub const PREFIX: &'static str = "decoder";
    pub const MASK_TOKEN: &'static str = "decoder.mask_token";

    pub fn new(cfg: &ModelConfig) -> Self {
        let bc = BlockConfig::decoder(cfg);
        Decoder {
            pos_embed: positional_mlp(Self::PREFIX, cfg),
            blocks: (0..bc.depth)
                .map(|i| TransformerBlock::new(format!("{}.blocks.{i}", Self::PREFIX), AttentionKind::SelfAttention, &bc))
                .collect(),
            norm: LayerNorm::new(format!("{}.norm", Self::PREFIX), cfg.d),
            d: cfg.d,
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        store.insert(Self::MASK_TOKEN, Init::TruncNormal(WEIGHT_STD).tensor(&[self.d], rng), true)?;
        self.pos_embed.init(store, rng)?;
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        self.norm.init(store, rng)
    }

    /// `masked_count` copies of the learnable mask token: `[masked_count, d]`.
    pub fn mask_tokens<T: Real>(&self, tape: &mut Tape<'_, T>, masked_count: usize) -> Result<Var> {
        let token = tape.param(Self::MASK_TOKEN)?;
        let row = tape.reshape(token, &[1, self.d])?;
        tape.broadcast_to(row, &[masked_count, self.d])
    }

    /// Decode `[encoded; mask_tokens]` and return the rows at masked positions.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        encoded: Var,
        mask_tokens: Var,
        centers_visible: &Tensor<T>,
        centers_masked: &Tensor<T>,
    ) -> Result<Var> {
        let visible = tape.shape(encoded)[0];
        let masked = tape.shape(mask_tokens)[0];
        if masked == 0 {
            return Err(Error::NothingToReconstruct);
        }
        let mut centers = centers_visible.data().to_vec();
        centers.extend_from_slice(centers_masked.data());
        let centers = Tensor::new(vec![visible + masked, 3], centers)?;
        let pos = positional_embed(tape, &self.pos_embed, &centers)?;
        let mut x = tape.concat(&[encoded, mask_tokens], 0)?;
        for b in &self.blocks {
            x = b.forward(tape, x, pos)?;
        }
        let x = self.norm.forward(tape, x)?;
        let rows: Vec<usize> = (visible..visible + masked).collect();
        tape.select_rows(x, &rows)
    }
}

/// Closed-form multiply-accumulate count of one attention layer (projections
/// included) over `m` tokens.
pub fn attention_macs(kind: AttentionKind, m: usize, cfg: &BlockConfig) -> u64 {
    let (m, d, s) = (m as u64, cfg.d as u64, cfg.s_mem as u64);
    match kind {
        // query, key, value, output projections + QK^T + AV
        AttentionKind::SelfAttention => 4 * m * d * d + 2 * m * m * d,
        // optional query projection + output projection + Q M_k^T + A M_v
        AttentionKind::External => {
            let projections = if cfg.query_projection { 2 } else { 1 };
            projections * m * d * d + 2 * m * s * d
        }
    }
}

/// Least-squares fit of `y = c0 + c1 x + c2 x^2`.
pub fn fit_quadratic(xs: &[f64], ys: &[f64]) -> [f64; 3] {
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut aty = nalgebra::Vector3::<f64>::zeros();
    for (&x, &y) in xs.iter().zip(ys) {
        let row = nalgebra::Vector3::new(1.0, x, x * x);
        ata += row * row.transpose();
        aty += row * y;
    }
    let sol = ata.lu().solve(&aty).unwrap_or_else(nalgebra::Vector3::zeros);
    [sol[0], sol[1], sol[2]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_param_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bc(d: usize, heads: usize) -> BlockConfig {
        BlockConfig {
            d,
            heads,
            mlp_ratio: 2,
            depth: 1,
            s_mem: 5,
            query_projection: true,
        }
    }

    fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
    }

    fn randomized(store: &mut ParamStore<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }

    #[test]
    fn external_rows_sum_to_one() {
        let cfg = bc(8, 2);
        let ea = ExternalAttention {
            prefix: "ea".into(),
            d: 8,
            heads: 2,
            slots: 5,
            query_projection: true,
        };
        let mut store = ParamStore::<f64>::new();
        ea.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        randomized(&mut store, 1);
        for m in [1, 3, 7] {
            let mut tape = Tape::with_params(&store);
            let x = tape.constant(random(&[m, cfg.d], m as u64, 2.0));
            let a = ea.weights(&mut tape, x).unwrap();
            assert_eq!(tape.shape(a), &[2, m, 5]);
            for row in tape.value(a).data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn lone_token_self_attention_is_value_chain() {
        let sa = SelfAttention {
            prefix: "sa".into(),
            d: 4,
            heads: 2,
        };
        let mut store = ParamStore::<f64>::new();
        sa.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        randomized(&mut store, 2);
        let x = random(&[1, 4], 3, 1.0);
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(x.clone());
        let (attn, _) = sa.weights(&mut tape, xv).unwrap();
        assert!(tape.value(attn).data().iter().all(|&a| (a - 1.0).abs() < 1e-15));
        let out = sa.forward(&mut tape, xv).unwrap();
        let v = sa.proj("value").forward(&mut tape, xv).unwrap();
        let expected = sa.proj("out").forward(&mut tape, v).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(tape.value(expected).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_output_projections_make_identity_blocks() {
        for kind in [AttentionKind::External, AttentionKind::SelfAttention] {
            let cfg = bc(8, 2);
            let block = TransformerBlock::new("b", kind, &cfg);
            let mut store = ParamStore::<f64>::new();
            block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            randomized(&mut store, 3);
            for (name, p) in store.iter_mut() {
                if name.starts_with("b.attn.out") || name.starts_with("b.mlp.fc1") {
                    p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
            let x = random(&[5, 8], 4, 1.0);
            let mut tape = Tape::with_params(&store);
            let xv = tape.constant(x.clone());
            let pos = tape.constant(random(&[5, 8], 5, 1.0));
            let y = block.forward(&mut tape, xv, pos).unwrap();
            assert_eq!(tape.value(y), &x);
        }
    }

    #[test]
    fn block_gradients_match_differences() {
        for kind in [AttentionKind::External, AttentionKind::SelfAttention] {
            let cfg = bc(8, 2);
            let block = TransformerBlock::new("b", kind, &cfg);
            let mut store = ParamStore::<f64>::new();
            block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            randomized(&mut store, 6);
            let x = random(&[3, 8], 7, 1.0);
            let pos = random(&[3, 8], 8, 1.0);
            let res = check_param_gradients(
                &store,
                |tape| {
                    let xv = tape.constant(x.clone());
                    let pv = tape.constant(pos.clone());
                    let y = block.forward(tape, xv, pv)?;
                    let sq = tape.mul(y, y)?;
                    Ok(tape.mean_all(sq))
                },
                1e-5,
            )
            .unwrap();
            assert!(res.max_relative_error < 1e-4, "{kind:?}: {res:?}");
        }
    }

    #[test]
    fn mac_accounting_matches_instrumented_tape() {
        let cfg = bc(12, 3);
        for (kind, prefix) in [(AttentionKind::External, "ea"), (AttentionKind::SelfAttention, "sa")] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let ea = ExternalAttention {
                prefix: prefix.into(),
                d: 12,
                heads: 3,
                slots: 5,
                query_projection: true,
            };
            let sa = SelfAttention {
                prefix: prefix.into(),
                d: 12,
                heads: 3,
            };
            match kind {
                AttentionKind::External => ea.init(&mut store, &mut rng).unwrap(),
                AttentionKind::SelfAttention => sa.init(&mut store, &mut rng).unwrap(),
            }
            for m in [2, 9] {
                let mut tape = Tape::with_params(&store);
                let x = tape.constant(Tensor::zeros(&[m, 12]));
                match kind {
                    AttentionKind::External => ea.forward(&mut tape, x).unwrap(),
                    AttentionKind::SelfAttention => sa.forward(&mut tape, x).unwrap(),
                };
                assert_eq!(tape.mac_count(), attention_macs(kind, m, &cfg));
            }
        }
    }

    #[test]
    fn quadratic_fit_recovers_coefficients() {
        let xs = [16.0, 32.0, 64.0, 128.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 + 2.0 * x + 0.5 * x * x).collect();
        let c = fit_quadratic(&xs, &ys);
        assert!((c[0] - 3.0).abs() < 1e-6 && (c[1] - 2.0).abs() < 1e-8 && (c[2] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn decoder_returns_masked_rows() {
        let cfg = ModelConfig::gradcheck();
        let dec = Decoder::new(&cfg);
        let mut store = ParamStore::<f64>::new();
        dec.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::with_params(&store);
        let enc = tape.constant(random(&[2, cfg.d], 1, 1.0));
        let mask = dec.mask_tokens(&mut tape, 3).unwrap();
        let rows = tape.value(mask).data().chunks(cfg.d).collect::<Vec<_>>();
        assert!(rows.windows(2).all(|w| w[0] == w[1]));
        let out = dec
            .forward(&mut tape, enc, mask, &random(&[2, 3], 2, 1.0), &random(&[3, 3], 3, 1.0))
            .unwrap();
        assert_eq!(tape.shape(out), &[3, cfg.d]);
        let none = dec.mask_tokens(&mut tape, 0).unwrap();
        assert!(matches!(
            dec.forward(&mut tape, enc, none, &random(&[2, 3], 2, 1.0), &Tensor::zeros(&[0, 3])),
            Err(Error::NothingToReconstruct)
        ));
    }
}
