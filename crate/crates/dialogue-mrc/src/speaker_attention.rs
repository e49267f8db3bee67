//! Dual-channel speaker-aware attention: additive masks that split attention
//! into a same-speaker channel and a different-speaker channel, the shared
//! masked multi-head self-attention kernel (also used by the encoder with a
//! plain padding mask), and the gate that fuses the two channels.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tensor, MASK_BLOCK};
use crate::corpus::EncodedExample;
use crate::error::{Error, Result};

/// Additive masks for the two channels, each L x L with entries in
/// {0, MASK_BLOCK}. M1 allows same-speaker keys, M2 different-speaker keys.
pub struct SpeakerMasks {
    pub m1: Tensor,
    pub m2: Tensor,
}

/// Mask construction rules, applied per (query i, key j):
/// - pad keys are blocked everywhere, in both masks;
/// - queries without a speaker (question tokens, [CLS], the question's
///   [SEP], padding) see every non-pad key in both channels;
/// - keys without a speaker are visible to every query in both channels;
/// - for real-speaker pairs, M1 allows same speaker (diagonal included),
///   M2 allows different speaker;
/// - a real-speaker row left without any allowed real-speaker key gets its
///   diagonal unblocked, so single-speaker dialogues keep M2 usable.
pub fn build_masks(e: &EncodedExample) -> SpeakerMasks {
    let l = e.len();
    let mut m1 = vec![0.0f64; l * l];
    let mut m2 = vec![0.0f64; l * l];
    for i in 0..l {
        let qi = e.speaker_of_token[i];
        let mut m1_has_real_key = false;
        let mut m2_has_real_key = false;
        for j in 0..l {
            let (b1, b2) = if !e.attention_pad_mask[j] {
                (true, true)
            } else {
                match (qi, e.speaker_of_token[j]) {
                    (None, _) | (_, None) => (false, false),
                    (Some(a), Some(b)) => {
                        let same = a == b;
                        if same {
                            m1_has_real_key = true;
                        } else {
                            m2_has_real_key = true;
                        }
                        (!same, same)
                    }
                }
            };
            if b1 {
                m1[i * l + j] = MASK_BLOCK;
            }
            if b2 {
                m2[i * l + j] = MASK_BLOCK;
            }
        }
        if qi.is_some() {
            if !m1_has_real_key {
                m1[i * l + i] = 0.0;
            }
            if !m2_has_real_key {
                m2[i * l + i] = 0.0;
            }
        }
    }
    SpeakerMasks {
        m1: Tensor::from_vec(l, l, m1),
        m2: Tensor::from_vec(l, l, m2),
    }
}

/// Projection weights for one attention block. Head h reads columns
/// `h*d_k..(h+1)*d_k` of the Q/K/V projections; outputs re-concatenate and
/// pass through `wo`. No bias terms.
pub struct MhsaParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
}

pub(crate) fn init_weight(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, 0.02).expect("valid stddev");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

/// Initializer for embeddings that stand in for activations (graph node
/// seeds): unit-ish scale to match LayerNorm output rather than weight scale.
pub(crate) fn init_state_embedding(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, 0.5).expect("valid stddev");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

impl MhsaParams {
    pub fn init(hidden: usize, heads: usize, rng: &mut impl Rng) -> MhsaParams {
        MhsaParams {
            wq: init_weight(hidden, hidden, rng),
            wk: init_weight(hidden, hidden, rng),
            wv: init_weight(hidden, hidden, rng),
            wo: init_weight(hidden, hidden, rng),
            heads,
        }
    }

    pub fn named_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.wq"), self.wq.clone()));
        out.push((format!("{prefix}.wk"), self.wk.clone()));
        out.push((format!("{prefix}.wv"), self.wv.clone()));
        out.push((format!("{prefix}.wo"), self.wo.clone()));
    }
}

/// Masked multi-head self-attention:
/// per head, softmax(Q K^T / sqrt(d_k) + M) V; heads concatenated, then the
/// output projection. `mask` must be L x L additive with 0 = allowed.
pub fn masked_mhsa(h: &Tensor, mask: &Tensor, p: &MhsaParams) -> Result<Tensor> {
    Ok(masked_mhsa_with_weights(h, mask, p)?.0)
}

/// Same as [`masked_mhsa`] but also returns each head's L x L attention
/// weight matrix, for inspection and the brute-force oracle tests.
pub fn masked_mhsa_with_weights(
    h: &Tensor,
    mask: &Tensor,
    p: &MhsaParams,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (l, d) = h.shape();
    if mask.shape() != (l, l) {
        return Err(Error::Shape {
            op: "masked_mhsa",
            lhs: (l, d),
            rhs: mask.shape(),
        });
    }
    if p.heads == 0 || d % p.heads != 0 {
        return Err(Error::ConfigMismatch(format!(
            "hidden size {d} not divisible by {} attention heads",
            p.heads
        )));
    }
    let dk = d / p.heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let q = h.matmul(&p.wq)?;
    let k = h.matmul(&p.wk)?;
    let v = h.matmul(&p.wv)?;

    let mut head_outputs = Vec::with_capacity(p.heads);
    let mut head_weights = Vec::with_capacity(p.heads);
    for head in 0..p.heads {
        let (a, b) = (head * dk, (head + 1) * dk);
        let qh = q.slice_cols(a, b)?;
        let kh = k.slice_cols(a, b)?;
        let vh = v.slice_cols(a, b)?;
        let scores = qh.matmul(&kh.transpose())?.scale(scale).add(mask)?;
        let weights = scores.softmax_rows();
        head_outputs.push(weights.matmul(&vh)?);
        head_weights.push(weights);
    }
    let refs: Vec<&Tensor> = head_outputs.iter().collect();
    let concat = Tensor::concat_cols(&refs)?;
    Ok((concat.matmul(&p.wo)?, head_weights))
}

/// Fusion FCs: E1/E2 compress `[H, C, H-C, H*C]` (4D -> D), the gate maps
/// `[E1, E2]` (2D -> D).
pub struct FusionParams {
    pub e1_w: Tensor,
    pub e1_b: Tensor,
    pub e2_w: Tensor,
    pub e2_b: Tensor,
    pub gate_w: Tensor,
    pub gate_b: Tensor,
}

impl FusionParams {
    pub fn init(hidden: usize, rng: &mut impl Rng) -> FusionParams {
        FusionParams {
            e1_w: init_weight(4 * hidden, hidden, rng),
            e1_b: Tensor::zeros(1, hidden),
            e2_w: init_weight(4 * hidden, hidden, rng),
            e2_b: Tensor::zeros(1, hidden),
            gate_w: init_weight(2 * hidden, hidden, rng),
            gate_b: Tensor::zeros(1, hidden),
        }
    }

    pub fn named_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.e1.w"), self.e1_w.clone()));
        out.push((format!("{prefix}.e1.b"), self.e1_b.clone()));
        out.push((format!("{prefix}.e2.w"), self.e2_w.clone()));
        out.push((format!("{prefix}.e2.b"), self.e2_b.clone()));
        out.push((format!("{prefix}.gate.w"), self.gate_w.clone()));
        out.push((format!("{prefix}.gate.b"), self.gate_b.clone()));
    }
}

/// Gated channel fusion:
/// E1 = ReLU(FC([H, C1, H-C1, H*C1])), E2 likewise from C2,
/// G = sigmoid(FC([E1, E2])), H_C = G*C1 + (1-G)*C2.
pub fn gated_fusion(h: &Tensor, c1: &Tensor, c2: &Tensor, p: &FusionParams) -> Result<Tensor> {
    let e1 = Tensor::concat_cols(&[h, c1, &h.sub(c1)?, &h.mul(c1)?])?
        .matmul(&p.e1_w)?
        .add(&p.e1_b)?
        .relu();
    let e2 = Tensor::concat_cols(&[h, c2, &h.sub(c2)?, &h.mul(c2)?])?
        .matmul(&p.e2_w)?
        .add(&p.e2_b)?
        .relu();
    let g = Tensor::concat_cols(&[&e1, &e2])?
        .matmul(&p.gate_w)?
        .add(&p.gate_b)?
        .sigmoid();
    let ones = Tensor::full(g.rows(), g.cols(), 1.0);
    g.mul(c1)?.add(&ones.sub(&g)?.mul(c2)?)
}

/// Both channels' parameters plus the fusion gate.
pub struct ChannelParams {
    pub same: MhsaParams,
    pub diff: MhsaParams,
    pub fusion: FusionParams,
}

impl ChannelParams {
    pub fn init(hidden: usize, heads: usize, rng: &mut impl Rng) -> ChannelParams {
        ChannelParams {
            same: MhsaParams::init(hidden, heads, rng),
            diff: MhsaParams::init(hidden, heads, rng),
            fusion: FusionParams::init(hidden, rng),
        }
    }

    pub fn named_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.same.named_parameters(&format!("{prefix}.channel1"), out);
        self.diff.named_parameters(&format!("{prefix}.channel2"), out);
        self.fusion.named_parameters(&format!("{prefix}.fusion"), out);
    }
}

/// Full speaker-channel block: build masks from the example, run each
/// channel, fuse. Produces H_C.
pub fn speaker_channels(h: &Tensor, e: &EncodedExample, p: &ChannelParams) -> Result<Tensor> {
    let masks = build_masks(e);
    let c1 = masked_mhsa(h, &masks.m1, &p.same)?;
    let c2 = masked_mhsa(h, &masks.m2, &p.diff)?;
    gated_fusion(h, &c1, &c2, &p.fusion)
}
