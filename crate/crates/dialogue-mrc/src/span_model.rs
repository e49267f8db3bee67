//! Representation fusion and extractive span prediction.
//!
//! The fused matrix P concatenates, in fixed order, the channel-fusion
//! output H_C, the broadcast speaker-graph states H_S, the broadcast
//! discourse-graph states H_G, and the raw encoder output H, with ablated
//! blocks omitted. A single FC maps each row to start/end logits; padding
//! positions are forced to the mask floor so they can never win, and
//! position 0 ([CLS]) is the no-answer slot.

use rand::Rng;

use crate::autodiff::{Tensor, MASK_BLOCK};
use crate::corpus::EncodedExample;
use crate::error::{Error, Result};
use crate::speaker_attention::init_weight;

/// Which of the three speaker-aware blocks are active. The spec's "w/o X"
/// ablations correspond to exactly one flag turned off; the plain-encoder
/// baseline turns off all three.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationConfig {
    pub use_speaker_masking: bool,
    pub use_speaker_graph: bool,
    pub use_discourse_graph: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_speaker_masking: true,
            use_speaker_graph: true,
            use_discourse_graph: true,
        }
    }
}

impl AblationConfig {
    /// Number of D-wide blocks in P: the active modules plus H itself.
    pub fn fused_blocks(&self) -> usize {
        1 + usize::from(self.use_speaker_masking)
            + usize::from(self.use_speaker_graph)
            + usize::from(self.use_discourse_graph)
    }
}

/// Concatenate the active blocks in the fixed order [H_C | H_S | H_G | H].
/// Presence of each optional block must match the ablation flags.
pub fn fuse(
    h_c: Option<&Tensor>,
    h_s: Option<&Tensor>,
    h_g: Option<&Tensor>,
    h: &Tensor,
    ablation: &AblationConfig,
) -> Result<Tensor> {
    let check = |present: bool, enabled: bool, name: &str| -> Result<()> {
        if present != enabled {
            return Err(Error::ConfigMismatch(format!(
                "{name} is {} but the ablation config says {}",
                if present { "present" } else { "absent" },
                if enabled { "enabled" } else { "disabled" },
            )));
        }
        Ok(())
    };
    check(h_c.is_some(), ablation.use_speaker_masking, "H_C")?;
    check(h_s.is_some(), ablation.use_speaker_graph, "H_S")?;
    check(h_g.is_some(), ablation.use_discourse_graph, "H_G")?;

    let mut parts: Vec<&Tensor> = Vec::with_capacity(4);
    if let Some(t) = h_c {
        parts.push(t);
    }
    if let Some(t) = h_s {
        parts.push(t);
    }
    if let Some(t) = h_g {
        parts.push(t);
    }
    parts.push(h);
    if parts.len() == 1 {
        return Ok(h.clone());
    }
    Tensor::concat_cols(&parts)
}

/// Span FC: (blocks * D) -> 2. Column 0 produces start logits, column 1 end
/// logits. Parameter count is (blocks * D) * 2 + 2.
pub struct SpanParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl SpanParams {
    pub fn init(fused_width: usize, rng: &mut impl Rng) -> SpanParams {
        SpanParams {
            w: init_weight(fused_width, 2, rng),
            b: Tensor::zeros(1, 2),
        }
    }

    pub fn named_parameters(&self, out: &mut Vec<(String, Tensor)>) {
        out.push(("span.w".into(), self.w.clone()));
        out.push(("span.b".into(), self.b.clone()));
    }
}

/// Start/end logits as 1 x L rows.
pub struct SpanLogits {
    pub start: Tensor,
    pub end: Tensor,
}

pub fn span_logits(p: &Tensor, e: &EncodedExample, sp: &SpanParams) -> Result<SpanLogits> {
    let logits = p.matmul(&sp.w)?.add(&sp.b)?;
    let l = e.len();
    let pad_floor: Vec<f64> = e
        .attention_pad_mask
        .iter()
        .map(|&real| if real { 0.0 } else { MASK_BLOCK })
        .collect();
    let floor = Tensor::from_vec(1, l, pad_floor);
    let start = logits.slice_cols(0, 1)?.transpose().add(&floor)?;
    let end = logits.slice_cols(1, 2)?.transpose().add(&floor)?;
    Ok(SpanLogits { start, end })
}

/// Mean of the start and end cross-entropies against the gold positions
/// (position 0 for unanswerable examples).
pub fn span_loss(logits: &SpanLogits, gold_start: usize, gold_end: usize) -> Result<Tensor> {
    let ls = logits.start.cross_entropy_from_logits(gold_start)?;
    let le = logits.end.cross_entropy_from_logits(gold_end)?;
    Ok(ls.add(&le)?.scale(0.5))
}

/// Decoded prediction. `text` is None for the no-answer outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedAnswer {
    pub text: Option<String>,
    /// Best span score start[s] + end[t], or the null score when no span
    /// qualifies.
    pub score: f64,
    pub null_score: f64,
}

impl DecodedAnswer {
    pub fn text_or_empty(&self) -> &str {
        self.text.as_deref().unwrap_or("")
    }
}

/// Greedy span decoding: the best (s, t) with s <= t, both context text
/// tokens, and span length at most `max_answer_len` tokens. The no-answer
/// score is start[0] + end[0]; prediction is NO_ANSWER when
/// `null_score - best_span >= null_threshold` or no candidate span exists.
/// Ties prefer the earlier, shorter span (scan order).
pub fn decode_answer(
    start_logits: &[f64],
    end_logits: &[f64],
    e: &EncodedExample,
    context: &str,
    max_answer_len: usize,
    null_threshold: f64,
) -> DecodedAnswer {
    let l = e.len();
    debug_assert_eq!(start_logits.len(), l);
    debug_assert_eq!(end_logits.len(), l);
    let null_score = start_logits[0] + end_logits[0];

    let mut best: Option<(usize, usize, f64)> = None;
    for s in 0..l {
        if e.token_char_span[s].is_none() {
            continue;
        }
        let t_max = (s + max_answer_len).min(l);
        for t in s..t_max {
            if e.token_char_span[t].is_none() {
                continue;
            }
            let score = start_logits[s] + end_logits[t];
            if best.map_or(true, |(_, _, b)| score > b) {
                best = Some((s, t, score));
            }
        }
    }

    match best {
        Some((s, t, score)) if null_score - score < null_threshold => {
            let cs = e.token_char_span[s].unwrap().0;
            let ce = e.token_char_span[t].unwrap().1;
            let text: String = context.chars().skip(cs).take(ce - cs).collect();
            DecodedAnswer {
                text: Some(text),
                score,
                null_score,
            }
        }
        Some((_, _, score)) => DecodedAnswer {
            text: None,
            score,
            null_score,
        },
        None => DecodedAnswer {
            text: None,
            score: null_score,
            null_score,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{set_precision, Precision};

    #[test]
    fn fused_blocks_counts_active_modules() {
        let mut a = AblationConfig::default();
        assert_eq!(a.fused_blocks(), 4);
        a.use_speaker_graph = false;
        assert_eq!(a.fused_blocks(), 3);
        let off = AblationConfig {
            use_speaker_masking: false,
            use_speaker_graph: false,
            use_discourse_graph: false,
        };
        assert_eq!(off.fused_blocks(), 1);
    }

    #[test]
    fn fuse_orders_blocks_and_checks_presence() {
        set_precision(Precision::F64);
        let h_c = Tensor::from_vec(1, 1, vec![1.0]);
        let h_s = Tensor::from_vec(1, 1, vec![2.0]);
        let h_g = Tensor::from_vec(1, 1, vec![3.0]);
        let h = Tensor::from_vec(1, 1, vec![4.0]);
        let all = AblationConfig::default();
        let p = fuse(Some(&h_c), Some(&h_s), Some(&h_g), &h, &all).unwrap();
        assert_eq!(p.value(), vec![1.0, 2.0, 3.0, 4.0]);

        assert!(matches!(
            fuse(None, Some(&h_s), Some(&h_g), &h, &all),
            Err(Error::ConfigMismatch(_))
        ));

        let off = AblationConfig {
            use_speaker_masking: false,
            use_speaker_graph: false,
            use_discourse_graph: false,
        };
        let p = fuse(None, None, None, &h, &off).unwrap();
        assert_eq!(p.value(), vec![4.0]);
        assert!(matches!(
            fuse(Some(&h_c), None, None, &h, &off),
            Err(Error::ConfigMismatch(_))
        ));
    }

    fn example_with_spans(spans: Vec<Option<(usize, usize)>>) -> EncodedExample {
        let l = spans.len();
        EncodedExample {
            dialogue_id: "d0".into(),
            question_id: "q0".into(),
            token_ids: vec![0; l],
            segment_ids: vec![0; l],
            utterance_of_token: vec![None; l],
            speaker_of_token: vec![None; l],
            sep_position_of_utterance: vec![],
            attention_pad_mask: spans.iter().map(|s| s.is_some()).collect(),
            token_char_span: spans,
            relation_label_ids: vec![],
            gold_start: 0,
            gold_end: 0,
            answerable: false,
        }
    }

    #[test]
    fn span_logits_floor_padding_positions() {
        set_precision(Precision::F64);
        let mut e = example_with_spans(vec![
            None,
            Some((0, 2)),
            Some((3, 5)),
            None,
            None,
        ]);
        e.attention_pad_mask = vec![true, true, true, false, false];
        let l = e.len();
        let p = Tensor::from_vec(l, 1, (0..l).map(|i| 0.1 * i as f64).collect());
        let sp = SpanParams {
            w: Tensor::from_vec(1, 2, vec![1.0, 2.0]),
            b: Tensor::from_vec(1, 2, vec![0.0, 0.5]),
        };
        let logits = span_logits(&p, &e, &sp).unwrap();
        assert_eq!(logits.start.shape(), (1, l));
        let start = logits.start.value();
        let end = logits.end.value();
        for i in 0..3 {
            assert!((start[i] - 0.1 * i as f64).abs() < 1e-12);
            assert!((end[i] - (0.2 * i as f64 + 0.5)).abs() < 1e-12);
        }
        for i in 3..5 {
            assert!(start[i] < -1e8);
            assert!(end[i] < -1e8);
        }
    }

    #[test]
    fn uniform_span_loss_is_log_length() {
        set_precision(Precision::F64);
        let logits = SpanLogits {
            start: Tensor::zeros(1, 4),
            end: Tensor::zeros(1, 4),
        };
        let loss = span_loss(&logits, 0, 0).unwrap();
        assert!((loss.item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn decode_picks_the_best_span() {
        let e = example_with_spans(vec![
            None,
            Some((0, 2)),
            Some((3, 5)),
            Some((6, 8)),
            None,
            None,
        ]);
        let context = "ab cd ef";
        let start = vec![0.0, 5.0, 1.0, 0.0, 0.0, 0.0];
        let end = vec![0.0, 0.0, 4.0, 0.0, 0.0, 0.0];
        let d = decode_answer(&start, &end, &e, context, 30, 0.0);
        assert_eq!(d.text.as_deref(), Some("ab cd"));
        assert_eq!(d.score, 9.0);
        assert_eq!(d.null_score, 0.0);
    }

    #[test]
    fn decode_respects_the_null_threshold() {
        let e = example_with_spans(vec![None, Some((0, 2)), None]);
        let start = vec![1.0, 2.0, 0.0];
        let end = vec![1.0, 2.0, 0.0];
        // Span scores 4, null scores 2: a threshold of -2 flips to NO_ANSWER.
        let keep = decode_answer(&start, &end, &e, "ab", 30, 0.0);
        assert_eq!(keep.text.as_deref(), Some("ab"));
        let flip = decode_answer(&start, &end, &e, "ab", 30, -2.0);
        assert_eq!(flip.text, None);
        assert_eq!(flip.score, 4.0);
        assert_eq!(flip.null_score, 2.0);
    }

    #[test]
    fn decode_caps_span_length_and_prefers_the_earlier_tie() {
        let e = example_with_spans(vec![
            None,
            Some((0, 2)),
            Some((3, 5)),
            Some((6, 8)),
            None,
        ]);
        let start = vec![0.0, 5.0, 1.0, 0.0, 0.0];
        let end = vec![0.0, 0.0, 4.0, 5.0, 0.0];
        // Unlimited, (1, 3) wins with 10; capped at 1 token the candidates
        // (1, 1) and (2, 2) tie at 5 and the scan keeps the earlier one.
        let unlimited = decode_answer(&start, &end, &e, "ab cd ef", 30, 0.0);
        assert_eq!(unlimited.text.as_deref(), Some("ab cd ef"));
        let capped = decode_answer(&start, &end, &e, "ab cd ef", 1, 0.0);
        assert_eq!(capped.text.as_deref(), Some("ab"));
        assert_eq!(capped.score, 5.0);
    }

    #[test]
    fn decode_without_candidates_returns_no_answer() {
        let e = example_with_spans(vec![None, None, None]);
        let d = decode_answer(&[1.0, 2.0, 3.0], &[1.0, 0.0, 0.0], &e, "", 30, 0.0);
        assert_eq!(d.text, None);
        assert_eq!(d.score, 2.0);
        assert_eq!(d.null_score, 2.0);
    }

    #[test]
    fn span_parameter_names() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let sp = SpanParams::init(8, &mut rng);
        let mut named = Vec::new();
        sp.named_parameters(&mut named);
        let names: Vec<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["span.w", "span.b"]);
        assert_eq!(named[0].1.shape(), (8, 2));
    }
}
