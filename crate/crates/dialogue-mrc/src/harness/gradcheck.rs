//! Prebuilt finite-difference gradient checks, shared by the CLI and the
//! test suite. Each scenario builds a small fixed example (two utterances,
//! two speakers, one discourse relation), wires up one module or the whole
//! model, and compares analytic gradients against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::autodiff::{grad_check, GradCheckReport, Tensor};
use crate::corpus::{
    build_vocabulary, encode_example, render_context, Answer, Dialogue, DiscourseRelation,
    EncodedExample, Question, Utterance, Vocabulary,
};
use crate::encoder::{encode, EncoderConfig, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelParams};
use crate::relational_graphs::{
    broadcast_to_tokens, build_discourse_graph, build_speaker_graph, run_graph, RgcnParams,
    DISCOURSE_EDGE_TYPES, SPEAKER_EDGE_TYPES,
};
use crate::span_model::{span_logits, span_loss, SpanParams};
use crate::speaker_attention::{speaker_channels, ChannelParams};

pub const MODULES: [&str; 6] = [
    "full",
    "encoder",
    "speaker-attention",
    "speaker-graph",
    "discourse-graph",
    "span",
];

/// Two speakers, two utterances, one relation, one answerable question.
pub fn tiny_dialogue() -> Dialogue {
    let utterances = vec![
        Utterance {
            index: 0,
            speaker: "ann".to_string(),
            text: "the build is broken".to_string(),
        },
        Utterance {
            index: 1,
            speaker: "ben".to_string(),
            text: "i fixed it just now".to_string(),
        },
    ];
    let (context, _) = render_context(&utterances);
    let answer = "i fixed it just now";
    let char_start = context
        .find(answer)
        .expect("answer text present in rendered context");
    Dialogue {
        id: "tiny".to_string(),
        utterances,
        relations: vec![DiscourseRelation {
            source: 1,
            target: 0,
            label: "Result".to_string(),
        }],
        questions: vec![Question {
            id: "tiny-q0".to_string(),
            text: "who fixed the build ?".to_string(),
            answerable: true,
            answers: vec![Answer {
                text: answer.to_string(),
                char_start,
            }],
        }],
    }
}

fn tiny_setup(hidden: usize) -> Result<(Dialogue, Vocabulary, EncodedExample, ModelConfig)> {
    let d = tiny_dialogue();
    let vocab = build_vocabulary(std::slice::from_ref(&d), 1);
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            vocab_size: vocab.tokens().len(),
            hidden,
            heads: 2,
            layers: 2,
            ffn: 2 * hidden,
            max_len: 28,
            dropout: 0.0,
        },
        ablation: Default::default(),
        graph_layers: 2,
        num_relation_labels: vocab.relation_labels().len(),
    };
    let e = encode_example(&d, &d.questions[0], &vocab, cfg.encoder.max_len)?;
    Ok((d, vocab, e, cfg))
}

/// A fixed random activation matrix to feed modules that sit downstream of
/// the encoder. Unit-ish scale, like real LayerNorm output — it keeps ReLU
/// preactivations comfortably away from the kink the finite-difference probe
/// would otherwise straddle.
fn random_states(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = rand_distr::Normal::new(0.0, 0.5).unwrap();
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data)
}

#[derive(Debug)]
pub struct CheckOutcome {
    pub module: String,
    pub threshold: f64,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < self.threshold
    }
}

/// Run the named scenario ("full" or one module). Thresholds: 1e-4 for the
/// full model, 1e-6 per module. `samples_per_param` coordinates of every
/// parameter are probed with step 1e-5 in 64-bit.
pub fn check_module(name: &str, hidden: usize, samples_per_param: usize, seed: u64) -> Result<CheckOutcome> {
    let (d, _vocab, e, cfg) = tiny_setup(hidden)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // The full model's loss is a small cross-entropy, so a finer step costs
    // no precision and shrinks the window in which a ReLU kink can sit; the
    // module probes sum over all outputs and want the larger step.
    let (eps, threshold) = if name == "full" {
        (1e-6, 1e-4)
    } else {
        (1e-5, 1e-6)
    };

    let report = match name {
        "full" => {
            let params = ModelParams::init(&cfg, &mut rng)?;
            let named = params.named_parameters();
            let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
            grad_check(&named, eps, samples_per_param, seed, || {
                Ok(forward(&d, &e, &params, &cfg, Mode::Eval, &mut eval_rng)?.loss)
            })?
        }
        "encoder" => {
            let params = EncoderParams::init(&cfg.encoder, &mut rng);
            let mut named = Vec::new();
            params.named_parameters(&mut named);
            let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
            grad_check(&named, eps, samples_per_param, seed, || {
                Ok(encode(&e, &params, &cfg.encoder, Mode::Eval, &mut eval_rng)?.sum())
            })?
        }
        "speaker-attention" => {
            let h = random_states(e.len(), hidden, &mut rng);
            let params = ChannelParams::init(hidden, cfg.encoder.heads, &mut rng);
            let mut named = Vec::new();
            params.named_parameters("speaker_attn", &mut named);
            grad_check(&named, eps, samples_per_param, seed, || {
                Ok(speaker_channels(&h, &e, &params)?.sum())
            })?
        }
        "speaker-graph" => {
            let h = random_states(e.len(), hidden, &mut rng);
            let params = RgcnParams::init(hidden, SPEAKER_EDGE_TYPES.len(), cfg.graph_layers, None, &mut rng);
            let mut named = Vec::new();
            params.named_parameters("speaker_graph", &SPEAKER_EDGE_TYPES, &mut named);
            let g = build_speaker_graph(&e);
            grad_check(&named, eps, samples_per_param, seed, || {
                let out = run_graph(&g, &h, &e, &params)?;
                Ok(broadcast_to_tokens(&out.utterances, &out.global, &e)?.sum())
            })?
        }
        "discourse-graph" => {
            let h = random_states(e.len(), hidden, &mut rng);
            let params = RgcnParams::init(
                hidden,
                DISCOURSE_EDGE_TYPES.len(),
                cfg.graph_layers,
                Some(cfg.num_relation_labels),
                &mut rng,
            );
            let mut named = Vec::new();
            params.named_parameters("discourse_graph", &DISCOURSE_EDGE_TYPES, &mut named);
            let (g, _) = build_discourse_graph(&d, &e);
            grad_check(&named, eps, samples_per_param, seed, || {
                let out = run_graph(&g, &h, &e, &params)?;
                Ok(broadcast_to_tokens(&out.utterances, &out.global, &e)?.sum())
            })?
        }
        "span" => {
            let p = random_states(e.len(), hidden, &mut rng);
            let params = SpanParams::init(hidden, &mut rng);
            let mut named = Vec::new();
            params.named_parameters(&mut named);
            grad_check(&named, eps, samples_per_param, seed, || {
                let logits = span_logits(&p, &e, &params)?;
                span_loss(&logits, e.gold_start, e.gold_end)
            })?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown grad-check module {other:?} (expected one of {})",
                MODULES.join(", ")
            )))
        }
    };

    Ok(CheckOutcome {
        module: name.to_string(),
        threshold,
        report,
    })
}
