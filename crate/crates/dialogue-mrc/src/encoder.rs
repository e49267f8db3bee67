//! Mini transformer encoder: token + learned position + segment embeddings
//! with layer norm, then post-layer-norm self-attention blocks. Padding
//! positions are masked out as attention keys with the same additive-mask
//! kernel the speaker channels use.

use rand::Rng;

use crate::autodiff::{Tensor, MASK_BLOCK};
use crate::corpus::EncodedExample;
use crate::error::{Error, Result};
use crate::speaker_attention::{init_weight, masked_mhsa, MhsaParams};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

pub struct EncoderLayerParams {
    pub attn: MhsaParams,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

pub struct EncoderParams {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub segment_embedding: Tensor,
    pub embed_ln_gamma: Tensor,
    pub embed_ln_beta: Tensor,
    pub layers: Vec<EncoderLayerParams>,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut impl Rng) -> EncoderParams {
        let d = cfg.hidden;
        let layers = (0..cfg.layers)
            .map(|_| EncoderLayerParams {
                attn: MhsaParams::init(d, cfg.heads, rng),
                ln1_gamma: Tensor::full(1, d, 1.0),
                ln1_beta: Tensor::zeros(1, d),
                ffn_w1: init_weight(d, cfg.ffn, rng),
                ffn_b1: Tensor::zeros(1, cfg.ffn),
                ffn_w2: init_weight(cfg.ffn, d, rng),
                ffn_b2: Tensor::zeros(1, d),
                ln2_gamma: Tensor::full(1, d, 1.0),
                ln2_beta: Tensor::zeros(1, d),
            })
            .collect();
        EncoderParams {
            token_embedding: init_weight(cfg.vocab_size, d, rng),
            position_embedding: init_weight(cfg.max_len, d, rng),
            segment_embedding: init_weight(2, d, rng),
            embed_ln_gamma: Tensor::full(1, d, 1.0),
            embed_ln_beta: Tensor::zeros(1, d),
            layers,
        }
    }

    pub fn named_parameters(&self, out: &mut Vec<(String, Tensor)>) {
        out.push(("encoder.token_embedding".into(), self.token_embedding.clone()));
        out.push((
            "encoder.position_embedding".into(),
            self.position_embedding.clone(),
        ));
        out.push((
            "encoder.segment_embedding".into(),
            self.segment_embedding.clone(),
        ));
        out.push(("encoder.embed_ln.gamma".into(), self.embed_ln_gamma.clone()));
        out.push(("encoder.embed_ln.beta".into(), self.embed_ln_beta.clone()));
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("encoder.layer{i}");
            l.attn.named_parameters(&format!("{p}.attn"), out);
            out.push((format!("{p}.ln1.gamma"), l.ln1_gamma.clone()));
            out.push((format!("{p}.ln1.beta"), l.ln1_beta.clone()));
            out.push((format!("{p}.ffn.w1"), l.ffn_w1.clone()));
            out.push((format!("{p}.ffn.b1"), l.ffn_b1.clone()));
            out.push((format!("{p}.ffn.w2"), l.ffn_w2.clone()));
            out.push((format!("{p}.ffn.b2"), l.ffn_b2.clone()));
            out.push((format!("{p}.ln2.gamma"), l.ln2_gamma.clone()));
            out.push((format!("{p}.ln2.beta"), l.ln2_beta.clone()));
        }
    }

    /// Closed-form parameter count; a test asserts it matches enumeration.
    pub fn parameter_count(cfg: &EncoderConfig) -> usize {
        let d = cfg.hidden;
        let embeddings = (cfg.vocab_size + cfg.max_len + 2) * d + 2 * d;
        let per_layer = 4 * d * d               // attention projections
            + 2 * d                             // ln1
            + d * cfg.ffn + cfg.ffn             // ffn in
            + cfg.ffn * d + d                   // ffn out
            + 2 * d; // ln2
        embeddings + cfg.layers * per_layer
    }
}

/// Sum of token, position, and segment embeddings before the embedding
/// layer norm. Exposed for the structural tests on the padding tail.
pub fn embed_sums(e: &EncodedExample, p: &EncoderParams) -> Result<Tensor> {
    let l = e.len();
    let positions: Vec<usize> = (0..l).collect();
    let tok = p.token_embedding.embedding_lookup(&e.token_ids)?;
    let pos = p.position_embedding.embedding_lookup(&positions)?;
    let seg = p.segment_embedding.embedding_lookup(&e.segment_ids)?;
    tok.add(&pos)?.add(&seg)
}

/// Embedding stage: summed embeddings followed by layer norm.
pub fn embed(e: &EncodedExample, p: &EncoderParams) -> Result<Tensor> {
    embed_sums(e, p)?.layer_norm(&p.embed_ln_gamma, &p.embed_ln_beta, LAYER_NORM_EPS)
}

/// Additive mask blocking pad columns for every query row.
pub fn pad_key_mask(e: &EncodedExample) -> Tensor {
    let l = e.len();
    let mut m = vec![0.0f64; l * l];
    for j in 0..l {
        if !e.attention_pad_mask[j] {
            for i in 0..l {
                m[i * l + j] = MASK_BLOCK;
            }
        }
    }
    Tensor::from_vec(l, l, m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Full encoder pass producing H (L x D). Dropout applies only in
/// [`Mode::Train`] and draws from `rng`; evaluation and gradient checking
/// never touch the RNG.
pub fn encode(
    e: &EncodedExample,
    p: &EncoderParams,
    cfg: &EncoderConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let drop = |x: Tensor, rng: &mut dyn rand::RngCore| -> Tensor {
        if mode == Mode::Train && cfg.dropout > 0.0 {
            x.dropout(cfg.dropout, rng)
        } else {
            x
        }
    };

    let mask = pad_key_mask(e);
    let mut h = drop(embed(e, p)?, rng);
    for layer in &p.layers {
        let attn = drop(masked_mhsa(&h, &mask, &layer.attn)?, rng);
        h = h
            .add(&attn)?
            .layer_norm(&layer.ln1_gamma, &layer.ln1_beta, LAYER_NORM_EPS)?;
        let ffn = h
            .matmul(&layer.ffn_w1)?
            .add(&layer.ffn_b1)?
            .relu()
            .matmul(&layer.ffn_w2)?
            .add(&layer.ffn_b2)?;
        let ffn = drop(ffn, rng);
        h = h
            .add(&ffn)?
            .layer_norm(&layer.ln2_gamma, &layer.ln2_beta, LAYER_NORM_EPS)?;
    }
    Ok(h)
}
