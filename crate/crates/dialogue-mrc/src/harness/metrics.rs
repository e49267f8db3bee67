//! SQuAD-style answer normalization and EM/F1 scoring.

use std::collections::HashMap;

/// Lowercase, strip punctuation characters, drop the articles a/an/the, and
/// collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Exact match after normalization, best over the gold set. An empty gold
/// set means unanswerable: a NO_ANSWER prediction (empty string) scores 1.
pub fn compute_em(prediction: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(prediction);
    if golds.is_empty() {
        return if p.is_empty() { 1.0 } else { 0.0 };
    }
    golds
        .iter()
        .map(|g| f64::from(normalize_answer(g) == p))
        .fold(0.0, f64::max)
}

fn token_counts(s: &str) -> HashMap<&str, usize> {
    let mut counts = HashMap::new();
    for tok in s.split_whitespace() {
        *counts.entry(tok).or_insert(0) += 1;
    }
    counts
}

fn f1_single(prediction: &str, gold: &str) -> f64 {
    let p = token_counts(prediction);
    let g = token_counts(gold);
    let p_total: usize = p.values().sum();
    let g_total: usize = g.values().sum();
    if p_total == 0 || g_total == 0 {
        // Degenerate after normalization: score 1 only when both are empty.
        return f64::from(p_total == g_total);
    }
    let common: usize = p
        .iter()
        .map(|(tok, &c)| c.min(g.get(tok).copied().unwrap_or(0)))
        .sum();
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p_total as f64;
    let recall = common as f64 / g_total as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-multiset F1 after normalization, best over the gold set; the
/// unanswerable convention matches [`compute_em`].
pub fn compute_f1(prediction: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(prediction);
    if golds.is_empty() {
        return if p.is_empty() { 1.0 } else { 0.0 };
    }
    golds
        .iter()
        .map(|g| f1_single(&p, &normalize_answer(g)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionRecord {
    pub question_id: String,
    pub prediction: String,
    pub golds: Vec<String>,
    pub em: f64,
    pub f1: f64,
    pub answerable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean EM/F1 in percent (0..=100); 0 with `empty` set when there were
    /// no questions to score.
    pub em: f64,
    pub f1: f64,
    pub n_questions: usize,
    pub n_answerable: usize,
    pub n_unanswerable: usize,
    pub empty: bool,
    pub records: Vec<QuestionRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<QuestionRecord>) -> EvalReport {
        let n = records.len();
        if n == 0 {
            return EvalReport {
                em: 0.0,
                f1: 0.0,
                n_questions: 0,
                n_answerable: 0,
                n_unanswerable: 0,
                empty: true,
                records,
            };
        }
        let em = records.iter().map(|r| r.em).sum::<f64>() / n as f64 * 100.0;
        let f1 = records.iter().map(|r| r.f1).sum::<f64>() / n as f64 * 100.0;
        let n_answerable = records.iter().filter(|r| r.answerable).count();
        EvalReport {
            em,
            f1,
            n_questions: n,
            n_answerable,
            n_unanswerable: n - n_answerable,
            empty: false,
            records,
        }
    }

    /// Human-readable summary with metrics shown to 0.1.
    pub fn summary(&self) -> String {
        if self.empty {
            return "EM n/a F1 n/a (no questions)".to_string();
        }
        format!(
            "EM {:.1} F1 {:.1} ({} questions: {} answerable, {} unanswerable)",
            self.em, self.f1, self.n_questions, self.n_answerable, self.n_unanswerable
        )
    }

    /// Predictions as a question-id keyed JSON object, NO_ANSWER as "".
    /// Keys are emitted in sorted order so the bytes are stable.
    pub fn predictions_json(&self) -> String {
        let map: std::collections::BTreeMap<&str, &str> = self
            .records
            .iter()
            .map(|r| (r.question_id.as_str(), r.prediction.as_str()))
            .collect();
        serde_json::to_string_pretty(&map).expect("string map serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn golds(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization_strips_articles_punctuation_and_case() {
        assert_eq!(normalize_answer("By the mount options"), "by mount options");
        assert_eq!(normalize_answer("  Linux!  "), "linux");
        assert_eq!(normalize_answer("a an the"), "");
        assert_eq!(normalize_answer("chown -R"), "chown r");
    }

    #[test]
    fn exact_match_after_normalization() {
        assert_eq!(compute_em("the mount options", &golds(&["mount options"])), 1.0);
        assert_eq!(compute_em("mount", &golds(&["mount options"])), 0.0);
        // max over golds
        assert_eq!(compute_em("swap", &golds(&["a partition", "Swap!"])), 1.0);
    }

    #[test]
    fn f1_counts_shared_tokens() {
        // prediction "mount options" vs gold "by the mount options":
        // precision 1, recall 2/3 (article dropped from the gold).
        let f1 = compute_f1("mount options", &golds(&["by the mount options"]));
        assert!((f1 - 0.8).abs() < 1e-12);
        assert_eq!(compute_f1("x y", &golds(&["z w"])), 0.0);
        assert_eq!(compute_f1("same words", &golds(&["same words"])), 1.0);
    }

    #[test]
    fn unanswerable_scores_empty_predictions() {
        assert_eq!(compute_em("", &[]), 1.0);
        assert_eq!(compute_f1("", &[]), 1.0);
        assert_eq!(compute_em("the", &[]), 1.0); // normalizes to empty
        assert_eq!(compute_em("something", &[]), 0.0);
        assert_eq!(compute_f1("something", &[]), 0.0);
    }

    #[test]
    fn report_aggregates_percentages() {
        let records = vec![
            QuestionRecord {
                question_id: "q1".into(),
                prediction: "mount options".into(),
                golds: golds(&["by the mount options"]),
                em: 0.0,
                f1: 0.8,
                answerable: true,
            },
            QuestionRecord {
                question_id: "q0".into(),
                prediction: "".into(),
                golds: vec![],
                em: 1.0,
                f1: 1.0,
                answerable: false,
            },
        ];
        let report = EvalReport::from_records(records);
        assert!((report.em - 50.0).abs() < 1e-9);
        assert!((report.f1 - 90.0).abs() < 1e-9);
        assert_eq!(report.n_answerable, 1);
        assert_eq!(report.n_unanswerable, 1);
        assert_eq!(
            report.summary(),
            "EM 50.0 F1 90.0 (2 questions: 1 answerable, 1 unanswerable)"
        );
        // Sorted keys regardless of record order.
        assert_eq!(
            report.predictions_json(),
            "{\n  \"q0\": \"\",\n  \"q1\": \"mount options\"\n}"
        );
    }

    #[test]
    fn empty_report_says_so() {
        let report = EvalReport::from_records(vec![]);
        assert!(report.empty);
        assert_eq!(report.summary(), "EM n/a F1 n/a (no questions)");
    }
}
