//! Full model assembly: encoder, optional speaker channels, optional
//! speaker/discourse graphs, fusion, span head.

use rand::Rng;

use crate::autodiff::Tensor;
use crate::corpus::{Dialogue, EncodedExample};
use crate::encoder::{encode, EncoderConfig, EncoderParams, Mode};
use crate::error::Result;
use crate::relational_graphs::{
    broadcast_to_tokens, build_discourse_graph, build_speaker_graph, run_graph, RgcnParams,
    DISCOURSE_EDGE_TYPES, SPEAKER_EDGE_TYPES,
};
use crate::span_model::{fuse, span_logits, span_loss, AblationConfig, SpanLogits, SpanParams};
use crate::speaker_attention::{speaker_channels, ChannelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub ablation: AblationConfig,
    pub graph_layers: usize,
    /// Rows in the relation-label embedding table (registry size).
    pub num_relation_labels: usize,
}

pub struct ModelParams {
    pub encoder: EncoderParams,
    pub speaker: Option<ChannelParams>,
    pub speaker_graph: Option<RgcnParams>,
    pub discourse_graph: Option<RgcnParams>,
    pub span: SpanParams,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ModelParams> {
        cfg.encoder.validate()?;
        let d = cfg.encoder.hidden;
        let encoder = EncoderParams::init(&cfg.encoder, rng);
        let speaker = cfg
            .ablation
            .use_speaker_masking
            .then(|| ChannelParams::init(d, cfg.encoder.heads, rng));
        let speaker_graph = cfg.ablation.use_speaker_graph.then(|| {
            RgcnParams::init(d, SPEAKER_EDGE_TYPES.len(), cfg.graph_layers, None, rng)
        });
        let discourse_graph = cfg.ablation.use_discourse_graph.then(|| {
            RgcnParams::init(
                d,
                DISCOURSE_EDGE_TYPES.len(),
                cfg.graph_layers,
                Some(cfg.num_relation_labels),
                rng,
            )
        });
        let span = SpanParams::init(cfg.ablation.fused_blocks() * d, rng);
        Ok(ModelParams {
            encoder,
            speaker,
            speaker_graph,
            discourse_graph,
            span,
        })
    }

    /// Every parameter with its dotted path, in a fixed deterministic order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.encoder.named_parameters(&mut out);
        if let Some(sp) = &self.speaker {
            sp.named_parameters("speaker_attn", &mut out);
        }
        if let Some(g) = &self.speaker_graph {
            g.named_parameters("speaker_graph", &SPEAKER_EDGE_TYPES, &mut out);
        }
        if let Some(g) = &self.discourse_graph {
            g.named_parameters("discourse_graph", &DISCOURSE_EDGE_TYPES, &mut out);
        }
        self.span.named_parameters(&mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters()
            .iter()
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.named_parameters() {
            p.zero_grad();
        }
    }
}

pub struct ForwardOutput {
    pub logits: SpanLogits,
    pub loss: Tensor,
}

/// One example's forward pass to span logits and loss. `rng` is consulted
/// only for dropout in [`Mode::Train`].
pub fn forward(
    d: &Dialogue,
    e: &EncodedExample,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<ForwardOutput> {
    let h = encode(e, &params.encoder, &cfg.encoder, mode, rng)?;

    let h_c = match &params.speaker {
        Some(sp) => Some(speaker_channels(&h, e, sp)?),
        None => None,
    };
    let h_s = match &params.speaker_graph {
        Some(gp) => {
            let g = build_speaker_graph(e);
            let out = run_graph(&g, &h, e, gp)?;
            Some(broadcast_to_tokens(&out.utterances, &out.global, e)?)
        }
        None => None,
    };
    let h_g = match &params.discourse_graph {
        Some(gp) => {
            let (g, _warnings) = build_discourse_graph(d, e);
            let out = run_graph(&g, &h, e, gp)?;
            Some(broadcast_to_tokens(&out.utterances, &out.global, e)?)
        }
        None => None,
    };

    let fused = fuse(h_c.as_ref(), h_s.as_ref(), h_g.as_ref(), &h, &cfg.ablation)?;
    let logits = span_logits(&fused, e, &params.span)?;
    let loss = span_loss(&logits, e.gold_start, e.gold_end)?;
    Ok(ForwardOutput { logits, loss })
}
