//! Dialogue corpus ingestion: JSON loading and validation, context
//! rendering, tokenization, vocabulary construction, and packing of one
//! (dialogue, question) pair into the fixed-length encoded form the model
//! consumes.
//!
//! All character offsets (answer starts, token spans, the per-char utterance
//! map) count Unicode scalar values, not bytes.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

/// Reserved row 0 of the relation-label registry; unseen labels at eval time
/// resolve here so the label embedding lookup stays in range.
pub const UNK_RELATION_LABEL: &str = "<unk>";

#[derive(Debug, Clone)]
pub struct Utterance {
    pub index: usize,
    pub speaker: String,
    pub text: String,
}

impl Utterance {
    /// Empty-text utterances are tolerated but flagged; they still render a
    /// speaker prefix and occupy a graph node.
    pub fn is_degenerate(&self) -> bool {
        self.text.is_empty()
    }
}

/// Directed discourse link `source -> target` with a label such as "QAP".
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DiscourseRelation {
    pub source: usize,
    pub target: usize,
    pub label: String,
}

#[derive(Debug, Clone)]
pub struct Answer {
    pub text: String,
    pub char_start: usize,
}

#[derive(Debug, Clone)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub answerable: bool,
    /// Gold answers; empty exactly when unanswerable.
    pub answers: Vec<Answer>,
}

#[derive(Debug, Clone)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub relations: Vec<DiscourseRelation>,
    pub questions: Vec<Question>,
}

// Serde mirror of the on-disk schema.

#[derive(Debug, Serialize, Deserialize)]
pub struct CorpusFile {
    pub dialogues: Vec<DialogueJson>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DialogueJson {
    pub id: String,
    pub edus: Vec<EduJson>,
    #[serde(default)]
    pub relations: Vec<RelationJson>,
    #[serde(default)]
    pub qas: Vec<QaJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EduJson {
    pub speaker: String,
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RelationJson {
    pub x: i64,
    pub y: i64,
    #[serde(rename = "type")]
    pub label: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QaJson {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub is_impossible: bool,
    #[serde(default)]
    pub answers: Vec<AnswerJson>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnswerJson {
    pub text: String,
    pub answer_start: i64,
}

/// Read and validate a corpus file. JSON syntax problems surface as
/// [`Error::Parse`] with the offending location; structural problems surface
/// as [`Error::Schema`] naming the first violated field.
pub fn load_corpus(path: &Path) -> Result<Vec<Dialogue>> {
    let raw = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: CorpusFile = serde_json::from_str(&raw).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    validate_corpus(file)
}

pub fn validate_corpus(file: CorpusFile) -> Result<Vec<Dialogue>> {
    let mut dialogues = Vec::with_capacity(file.dialogues.len());
    for (di, dj) in file.dialogues.into_iter().enumerate() {
        let field = |suffix: &str| format!("dialogues[{di}].{suffix}");
        if dj.edus.is_empty() {
            return Err(Error::Schema {
                field: field("edus"),
                detail: "a dialogue needs at least one utterance".into(),
            });
        }
        let n = dj.edus.len();
        let mut utterances = Vec::with_capacity(n);
        for (ui, edu) in dj.edus.into_iter().enumerate() {
            if edu.speaker.is_empty() {
                return Err(Error::Schema {
                    field: field(&format!("edus[{ui}].speaker")),
                    detail: "speaker must be non-empty".into(),
                });
            }
            utterances.push(Utterance {
                index: ui,
                speaker: edu.speaker,
                text: edu.text,
            });
        }

        let mut relations = Vec::with_capacity(dj.relations.len());
        for (ri, rj) in dj.relations.into_iter().enumerate() {
            let rfield = |suffix: &str| field(&format!("relations[{ri}].{suffix}"));
            let src = usize::try_from(rj.x).map_err(|_| Error::Schema {
                field: rfield("x"),
                detail: format!("negative utterance index {}", rj.x),
            })?;
            let tgt = usize::try_from(rj.y).map_err(|_| Error::Schema {
                field: rfield("y"),
                detail: format!("negative utterance index {}", rj.y),
            })?;
            if src >= n || tgt >= n {
                return Err(Error::Schema {
                    field: rfield(if src >= n { "x" } else { "y" }),
                    detail: format!("utterance index out of range (n = {n})"),
                });
            }
            if src == tgt {
                return Err(Error::Schema {
                    field: rfield("y"),
                    detail: "relation source and target must differ".into(),
                });
            }
            if rj.label.is_empty() {
                return Err(Error::Schema {
                    field: rfield("type"),
                    detail: "relation label must be non-empty".into(),
                });
            }
            relations.push(DiscourseRelation {
                source: src,
                target: tgt,
                label: rj.label,
            });
        }

        let context = render_context(&utterances).0;
        let context_chars: Vec<char> = context.chars().collect();
        let mut questions = Vec::with_capacity(dj.qas.len());
        for (qi, qa) in dj.qas.into_iter().enumerate() {
            let qfield = |suffix: &str| field(&format!("qas[{qi}].{suffix}"));
            if qa.is_impossible && !qa.answers.is_empty() {
                return Err(Error::Schema {
                    field: qfield("answers"),
                    detail: "impossible question must have no answers".into(),
                });
            }
            if !qa.is_impossible && qa.answers.is_empty() {
                return Err(Error::Schema {
                    field: qfield("answers"),
                    detail: "answerable question must list at least one answer".into(),
                });
            }
            let mut answers = Vec::with_capacity(qa.answers.len());
            for (ai, aj) in qa.answers.into_iter().enumerate() {
                let afield = qfield(&format!("answers[{ai}].answer_start"));
                let start = usize::try_from(aj.answer_start).map_err(|_| Error::Schema {
                    field: afield.clone(),
                    detail: format!("negative answer_start {}", aj.answer_start),
                })?;
                let alen = aj.text.chars().count();
                let window: String = context_chars
                    .iter()
                    .skip(start)
                    .take(alen)
                    .collect();
                if start + alen > context_chars.len() || window != aj.text {
                    return Err(Error::Schema {
                        field: afield,
                        detail: format!(
                            "answer text {:?} does not match rendered context at char {start}",
                            aj.text
                        ),
                    });
                }
                answers.push(Answer {
                    text: aj.text,
                    char_start: start,
                });
            }
            questions.push(Question {
                id: qa.id,
                text: qa.question,
                answerable: !qa.is_impossible,
                answers,
            });
        }

        dialogues.push(Dialogue {
            id: dj.id,
            utterances,
            relations,
            questions,
        });
    }
    Ok(dialogues)
}

/// Flatten a dialogue into one context string: `<speaker>: <text>` segments
/// joined by single spaces. Also returns a per-character utterance index;
/// joining spaces belong to the utterance they follow.
pub fn render_context(utterances: &[Utterance]) -> (String, Vec<usize>) {
    let mut text = String::new();
    let mut char_to_utterance = Vec::new();
    for (i, u) in utterances.iter().enumerate() {
        if i > 0 {
            text.push(' ');
            char_to_utterance.push(i - 1);
        }
        let segment = format!("{}: {}", u.speaker, u.text);
        for _ in segment.chars() {
            char_to_utterance.push(i);
        }
        text.push_str(&segment);
    }
    (text, char_to_utterance)
}

/// One surface token with `[start, end)` character offsets into the original
/// string. Text is lowercased; offsets are not affected by the lowering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Whitespace tokenization with every ASCII punctuation character split off
/// as its own token.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;
    let mut word = String::new();
    let flush = |tokens: &mut Vec<Token>, word: &mut String, start: &mut Option<usize>, end: usize| {
        if let Some(s) = start.take() {
            tokens.push(Token {
                text: std::mem::take(word).to_lowercase(),
                start: s,
                end,
            });
        }
    };
    for (ci, ch) in text.chars().enumerate() {
        if ch.is_whitespace() {
            flush(&mut tokens, &mut word, &mut word_start, ci);
        } else if ch.is_ascii_punctuation() {
            flush(&mut tokens, &mut word, &mut word_start, ci);
            tokens.push(Token {
                text: ch.to_string(),
                start: ci,
                end: ci + 1,
            });
        } else {
            if word_start.is_none() {
                word_start = Some(ci);
            }
            word.push(ch);
        }
    }
    let total = text.chars().count();
    flush(&mut tokens, &mut word, &mut word_start, total);
    tokens
}

/// Token/speaker/relation-label registries. Token ids 0..=3 are reserved;
/// the rest are ordered by descending corpus frequency, ties broken
/// lexicographically. Relation-label id 0 is the reserved unknown label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_ids: HashMap<String, usize>,
    speakers: Vec<String>,
    speaker_ids: HashMap<String, usize>,
    relation_labels: Vec<String>,
    relation_label_ids: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, speakers: Vec<String>, relation_labels: Vec<String>) -> Vocabulary {
        let token_ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let speaker_ids = speakers
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        let relation_label_ids = relation_labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            token_ids,
            speakers,
            speaker_ids,
            relation_labels,
            relation_label_ids,
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.token_ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn speaker_id(&self, name: &str) -> Option<usize> {
        self.speaker_ids.get(name).copied()
    }

    pub fn num_relation_labels(&self) -> usize {
        self.relation_labels.len()
    }

    pub fn relation_label_id(&self, label: &str) -> usize {
        self.relation_label_ids
            .get(label)
            .copied()
            .unwrap_or(0)
    }

    pub fn relation_label(&self, id: usize) -> Option<&str> {
        self.relation_labels.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn relation_labels(&self) -> &[String] {
        &self.relation_labels
    }

    /// Rebuild from serialized registries (checkpoint load, TSV load).
    pub fn from_registries(
        tokens: Vec<String>,
        speakers: Vec<String>,
        relation_labels: Vec<String>,
    ) -> Result<Vocabulary> {
        let reserved = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN];
        for (i, want) in reserved.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*want) {
                return Err(Error::Checkpoint(format!(
                    "vocabulary is missing reserved token {want} at id {i}"
                )));
            }
        }
        if relation_labels.first().map(String::as_str) != Some(UNK_RELATION_LABEL) {
            return Err(Error::Checkpoint(
                "relation-label registry is missing the reserved unknown label at id 0".into(),
            ));
        }
        Ok(Vocabulary::from_parts(tokens, speakers, relation_labels))
    }

    /// Line-oriented `token<TAB>id` serialization of the token registry.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }
}

/// Count tokens over every rendered context and question, then assign ids:
/// reserved specials first, then frequency-descending / lexicographic order
/// over tokens meeting `min_freq`. Speakers and relation labels register in
/// first-appearance order.
pub fn build_vocabulary(dialogues: &[Dialogue], min_freq: usize) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut speakers = Vec::new();
    let mut seen_speakers = HashMap::new();
    let mut labels = vec![UNK_RELATION_LABEL.to_string()];
    let mut seen_labels: HashMap<String, usize> = HashMap::new();
    seen_labels.insert(UNK_RELATION_LABEL.to_string(), 0);

    for d in dialogues {
        let (context, _) = render_context(&d.utterances);
        for tok in tokenize(&context) {
            *counts.entry(tok.text).or_insert(0) += 1;
        }
        for q in &d.questions {
            for tok in tokenize(&q.text) {
                *counts.entry(tok.text).or_insert(0) += 1;
            }
        }
        for u in &d.utterances {
            if !seen_speakers.contains_key(&u.speaker) {
                seen_speakers.insert(u.speaker.clone(), speakers.len());
                speakers.push(u.speaker.clone());
            }
        }
        for r in &d.relations {
            if !seen_labels.contains_key(&r.label) {
                seen_labels.insert(r.label.clone(), labels.len());
                labels.push(r.label.clone());
            }
        }
    }

    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_freq)
        .collect();
    ranked.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));

    let mut tokens = vec![
        PAD_TOKEN.to_string(),
        UNK_TOKEN.to_string(),
        CLS_TOKEN.to_string(),
        SEP_TOKEN.to_string(),
    ];
    tokens.extend(ranked.into_iter().map(|(t, _)| t));
    Vocabulary::from_parts(tokens, speakers, labels)
}

/// Map an answer given by character span onto the covering token range:
/// first and last context token whose span intersects
/// `[char_start, char_start + len)`.
pub fn align_answer(
    char_start: usize,
    answer_text: &str,
    tokens: &[Token],
) -> Result<(usize, usize)> {
    let char_end = char_start + answer_text.chars().count();
    let mut first = None;
    let mut last = None;
    for (i, t) in tokens.iter().enumerate() {
        if t.start < char_end && t.end > char_start {
            if first.is_none() {
                first = Some(i);
            }
            last = Some(i);
        }
    }
    match (first, last) {
        (Some(f), Some(l)) => Ok((f, l)),
        _ => Err(Error::Alignment {
            char_start,
            char_end,
        }),
    }
}

/// One (dialogue, question) pair packed to a fixed length:
/// `[CLS] question [SEP] u0-tokens [SEP] u1-tokens [SEP] ... [PAD]*`.
/// Each utterance's trailing `[SEP]` inherits that utterance's identity
/// (speaker and utterance index); the question's `[SEP]`, `[CLS]`, question
/// tokens, and padding carry neither.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub dialogue_id: String,
    pub question_id: String,
    pub token_ids: Vec<usize>,
    /// 0 on the question block ([CLS] q [SEP]) and padding, 1 on context.
    pub segment_ids: Vec<usize>,
    pub utterance_of_token: Vec<Option<usize>>,
    pub speaker_of_token: Vec<Option<usize>>,
    /// Index of each utterance's trailing [SEP], None if truncated away.
    pub sep_position_of_utterance: Vec<Option<usize>>,
    /// True on real tokens, false on padding.
    pub attention_pad_mask: Vec<bool>,
    /// Character span into the rendered context for context text tokens;
    /// None on specials and padding. Span decoding draws candidates from
    /// positions where this is set.
    pub token_char_span: Vec<Option<(usize, usize)>>,
    /// Relation label ids aligned with `Dialogue::relations`.
    pub relation_label_ids: Vec<usize>,
    pub gold_start: usize,
    pub gold_end: usize,
    /// True when a gold span survived truncation; unanswerable questions and
    /// truncated-away golds train toward the [CLS] convention (0, 0).
    pub answerable: bool,
}

impl EncodedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Count of real (non-pad) positions.
    pub fn non_pad_len(&self) -> usize {
        self.attention_pad_mask.iter().filter(|&&b| b).count()
    }

    /// Utterance indices that survived truncation with their trailing [SEP]
    /// intact, ascending. Graph construction keys off this list.
    pub fn utterances_with_sep(&self) -> Vec<usize> {
        self.sep_position_of_utterance
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|_| i))
            .collect()
    }
}

/// Per-utterance speaker ids for one dialogue. Registered speakers use their
/// registry id; unseen speakers get fresh dialogue-local ids past the
/// registry (speaker ids are only ever compared for equality within one
/// example, so local ids are safe at eval time).
pub fn speaker_ids_for(dialogue: &Dialogue, vocab: &Vocabulary) -> Vec<usize> {
    let mut local: HashMap<&str, usize> = HashMap::new();
    let mut next_local = vocab.num_speakers();
    dialogue
        .utterances
        .iter()
        .map(|u| {
            vocab.speaker_id(&u.speaker).unwrap_or_else(|| {
                *local.entry(u.speaker.as_str()).or_insert_with(|| {
                    let id = next_local;
                    next_local += 1;
                    id
                })
            })
        })
        .collect()
}

pub fn encode_example(
    dialogue: &Dialogue,
    question: &Question,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EncodedExample> {
    let q_tokens = tokenize(&question.text);
    // [CLS] + question + [SEP] + at least one context slot must fit.
    if q_tokens.len() + 3 >= max_len {
        return Err(Error::QuestionTooLong {
            id: question.id.clone(),
            needed: q_tokens.len() + 3,
            max_len,
        });
    }

    let (context, char_to_utterance) = render_context(&dialogue.utterances);
    let context_tokens = tokenize(&context);
    let speaker_ids = speaker_ids_for(dialogue, vocab);
    let n = dialogue.utterances.len();

    let mut token_ids = vec![CLS_ID];
    let mut segment_ids = vec![0usize];
    let mut utterance_of_token: Vec<Option<usize>> = vec![None];
    let mut speaker_of_token: Vec<Option<usize>> = vec![None];
    let mut token_char_span: Vec<Option<(usize, usize)>> = vec![None];

    for t in &q_tokens {
        token_ids.push(vocab.token_id(&t.text));
        segment_ids.push(0);
        utterance_of_token.push(None);
        speaker_of_token.push(None);
        token_char_span.push(None);
    }
    token_ids.push(SEP_ID);
    segment_ids.push(0);
    utterance_of_token.push(None);
    speaker_of_token.push(None);
    token_char_span.push(None);

    // Context tokens in order, with a [SEP] after each utterance's last
    // token. Truncation drops whole tokens from the tail; the cut can land
    // mid-utterance, leaving that utterance without its [SEP].
    let mut sep_position_of_utterance: Vec<Option<usize>> = vec![None; n];
    // Example position of each context token, None once truncated.
    let mut context_token_pos: Vec<Option<usize>> = vec![None; context_tokens.len()];

    let mut ct = 0;
    'outer: for (ui, _) in dialogue.utterances.iter().enumerate() {
        while ct < context_tokens.len() && char_to_utterance[context_tokens[ct].start] == ui {
            if token_ids.len() >= max_len {
                break 'outer;
            }
            let tok = &context_tokens[ct];
            context_token_pos[ct] = Some(token_ids.len());
            token_ids.push(vocab.token_id(&tok.text));
            segment_ids.push(1);
            utterance_of_token.push(Some(ui));
            speaker_of_token.push(Some(speaker_ids[ui]));
            token_char_span.push(Some((tok.start, tok.end)));
            ct += 1;
        }
        if token_ids.len() >= max_len {
            break;
        }
        sep_position_of_utterance[ui] = Some(token_ids.len());
        token_ids.push(SEP_ID);
        segment_ids.push(1);
        utterance_of_token.push(Some(ui));
        speaker_of_token.push(Some(speaker_ids[ui]));
        token_char_span.push(None);
    }

    let real_len = token_ids.len();
    let mut attention_pad_mask = vec![true; real_len];
    while token_ids.len() < max_len {
        token_ids.push(PAD_ID);
        segment_ids.push(0);
        utterance_of_token.push(None);
        speaker_of_token.push(None);
        token_char_span.push(None);
        attention_pad_mask.push(false);
    }

    let (gold_start, gold_end, answerable) = if question.answerable {
        let gold = &question.answers[0];
        let (first, last) = align_answer(gold.char_start, &gold.text, &context_tokens)?;
        match (context_token_pos[first], context_token_pos[last]) {
            (Some(s), Some(e)) => (s, e, true),
            _ => (0, 0, false),
        }
    } else {
        (0, 0, false)
    };

    let relation_label_ids = dialogue
        .relations
        .iter()
        .map(|r| vocab.relation_label_id(&r.label))
        .collect();

    Ok(EncodedExample {
        dialogue_id: dialogue.id.clone(),
        question_id: question.id.clone(),
        token_ids,
        segment_ids,
        utterance_of_token,
        speaker_of_token,
        sep_position_of_utterance,
        attention_pad_mask,
        token_char_span,
        relation_label_ids,
        gold_start,
        gold_end,
        answerable,
    })
}
