//! Synthetic dialogue corpus generator.
//!
//! Emits small multi-party troubleshooting dialogues with planted structure,
//! so training and signal-sensitivity checks need no external data. Three
//! templates:
//!
//! * **Relation twins** — two dialogues with byte-identical utterances,
//!   speakers, and question, differing only in the discourse relations and in
//!   which remedy is the gold answer. The answer-bearing utterance is always
//!   the source of a `Result` relation, so only a model that reads the
//!   discourse graph can answer both twins of a pair.
//! * **Same-speaker cue** — the person who reports a problem later states
//!   the remedy that worked; another speaker offers a decoy suggestion.
//! * **Plain facts** — a short exchange with one answerable lookup question
//!   and one unanswerable question.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    validate_corpus, AnswerJson, CorpusFile, DialogueJson, EduJson, QaJson, RelationJson,
};
use crate::error::{Error, Result};

const NAMES: &[&str] = &[
    "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy", "kim",
    "leo", "mallory", "nina", "oscar", "peggy",
];

const PROBLEMS: &[&str] = &[
    "my laptop fan rattles loudly",
    "the wifi drops every hour",
    "my screen flickers at night",
    "the printer jams constantly",
    "my disk fills up overnight",
    "the build fails on boot",
    "my mouse lags in games",
    "the backup stalls midway",
    "my audio crackles on calls",
    "the vpn disconnects randomly",
    "my keyboard repeats keys",
    "the monitor sleeps too soon",
];

const REMEDIES: &[&str] = &[
    "swapping the hdmi cable",
    "reseating the ram",
    "flashing the bios",
    "rebooting the router",
    "clearing the cache",
    "replacing the fan",
    "updating the driver",
    "disabling the overlay",
    "reinstalling the package",
    "rotating the logs",
    "patching the kernel",
    "remounting the share",
    "repairing the index",
    "cleaning the heatsink",
    "downgrading the firmware",
    "resetting the modem",
    "tightening the connector",
    "purging the queue",
    "renewing the lease",
    "trimming the partition",
    "recompiling the module",
    "unplugging the dongle",
    "raising the timeout",
    "widening the swap",
];

/// (statement by the first speaker, question with a {name} placeholder,
/// answer substring of the statement)
const FACTS: &[(&str, &str, &str)] = &[
    ("i run debian on my tower", "which distro does {name} run ?", "debian"),
    ("i edit everything in neovim", "which editor does {name} use ?", "neovim"),
    ("i type on an ergodox at work", "which keyboard does {name} type on ?", "ergodox"),
    ("i moved the box to gentoo", "which distro is the box of {name} on ?", "gentoo"),
    ("i try helix for quick edits", "which editor does {name} try ?", "helix"),
    ("i test images under qemu", "what does {name} test images under ?", "qemu"),
    ("i mirror photos with rsync", "what does {name} mirror photos with ?", "rsync"),
    ("i keep notes in postgres", "where does {name} keep notes ?", "postgres"),
];

const IMPOSSIBLE: &[&str] = &[
    "what size is the monitor ?",
    "which city is the office in ?",
    "what color is the chassis ?",
    "how old is the machine ?",
    "which browser crashed today ?",
    "what brand is the webcam ?",
];

/// Draws items from a shuffled cycle: any run of up to `items.len()`
/// consecutive draws is collision-free, and the whole sequence is a pure
/// function of the seed.
struct Pool<'a> {
    items: &'a [&'a str],
    order: Vec<usize>,
    next: usize,
}

impl<'a> Pool<'a> {
    fn new(items: &'a [&'a str], rng: &mut ChaCha8Rng) -> Pool<'a> {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(rng);
        Pool {
            items,
            order,
            next: 0,
        }
    }

    fn draw(&mut self) -> &'a str {
        if self.next == self.order.len() {
            self.next = 0;
        }
        let item = self.items[self.order[self.next]];
        self.next += 1;
        item
    }
}

fn edu(speaker: &str, text: String) -> EduJson {
    EduJson {
        speaker: speaker.to_string(),
        text,
    }
}

fn rel(x: usize, y: usize, label: &str) -> RelationJson {
    RelationJson {
        x: x as i64,
        y: y as i64,
        label: label.to_string(),
    }
}

/// Char offset, within the rendered `speaker: text [speaker: text ...]`
/// context, of character `within` of utterance `ui`'s text. The pools are
/// ASCII so chars and bytes agree.
fn answer_pos(edus: &[EduJson], ui: usize, within: usize) -> i64 {
    let mut pos = 0usize;
    for e in &edus[..ui] {
        pos += e.speaker.chars().count() + 2 + e.text.chars().count() + 1;
    }
    (pos + edus[ui].speaker.chars().count() + 2 + within) as i64
}

fn answerable(id: String, question: String, text: &str, start: i64) -> QaJson {
    QaJson {
        id,
        question,
        is_impossible: false,
        answers: vec![AnswerJson {
            text: text.to_string(),
            answer_start: start,
        }],
    }
}

fn twin_pair(pair: usize, names: &mut Pool, problems: &mut Pool, remedies: &mut Pool) -> [DialogueJson; 2] {
    let a = names.draw();
    let b = names.draw();
    let c = names.draw();
    let problem = problems.draw();
    let r1 = remedies.draw();
    let r2 = remedies.draw();
    let edus = vec![
        edu(a, problem.to_string()),
        edu(b, format!("maybe {r1}")),
        edu(c, format!("or {r2}")),
        edu(a, "great it works now".to_string()),
    ];
    let question = "which suggestion actually worked ?".to_string();
    let mk = |variant: &str, winner: usize, remedy: &str, offset: usize| {
        let mut relations = vec![rel(0, 1, "QAP"), rel(0, 2, "QAP")];
        relations.push(rel(winner, 3, "Result"));
        DialogueJson {
            id: format!("synth-pair{pair}{variant}"),
            qas: vec![answerable(
                format!("synth-pair{pair}{variant}-q0"),
                question.clone(),
                remedy,
                answer_pos(&edus, winner, offset),
            )],
            edus: edus.clone(),
            relations,
        }
    };
    // "maybe " is 6 chars, "or " is 3.
    [mk("a", 1, r1, 6), mk("b", 2, r2, 3)]
}

fn cue_dialogue(i: usize, names: &mut Pool, problems: &mut Pool, remedies: &mut Pool) -> DialogueJson {
    let a = names.draw();
    let b = names.draw();
    let problem = problems.draw();
    let fix = remedies.draw();
    let decoy = remedies.draw();
    let edus = vec![
        edu(a, problem.to_string()),
        edu(b, format!("maybe try {decoy}")),
        edu(a, format!("{fix} fixed it for me")),
        edu(b, "good to know".to_string()),
    ];
    let start = answer_pos(&edus, 2, 0);
    DialogueJson {
        id: format!("synth-cue{i}"),
        qas: vec![answerable(
            format!("synth-cue{i}-q0"),
            format!("what fixed the issue for {a} ?"),
            fix,
            start,
        )],
        edus,
        relations: vec![
            rel(0, 1, "QAP"),
            rel(2, 0, "Result"),
            rel(2, 3, "Acknowledgement"),
        ],
    }
}

fn plain_dialogue(
    i: usize,
    fact: &(&str, &str, &str),
    impossible: &str,
    names: &mut Pool,
) -> DialogueJson {
    let a = names.draw();
    let b = names.draw();
    let (statement, q_template, answer) = *fact;
    let edus = vec![
        edu(a, statement.to_string()),
        edu(b, "nice choice".to_string()),
        edu(a, "it has been stable for years".to_string()),
    ];
    let within = statement.find(answer).expect("fact answer is a substring");
    let start = answer_pos(&edus, 0, within);
    DialogueJson {
        id: format!("synth-plain{i}"),
        qas: vec![
            answerable(
                format!("synth-plain{i}-q0"),
                q_template.replace("{name}", a),
                answer,
                start,
            ),
            QaJson {
                id: format!("synth-plain{i}-q1"),
                question: impossible.to_string(),
                is_impossible: true,
                answers: Vec::new(),
            },
        ],
        edus,
        relations: vec![rel(0, 1, "Comment"), rel(0, 2, "Continuation")],
    }
}

/// Build a corpus of `n_dialogues` dialogues: a quarter of them twin pairs
/// (so half the dialogues), a quarter same-speaker-cue, the rest plain.
pub fn generate(n_dialogues: usize, seed: u64) -> CorpusFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Pool::new(NAMES, &mut rng);
    let mut problems = Pool::new(PROBLEMS, &mut rng);
    let mut remedies = Pool::new(REMEDIES, &mut rng);
    let mut impossible = Pool::new(IMPOSSIBLE, &mut rng);
    let mut fact_order: Vec<usize> = (0..FACTS.len()).collect();
    fact_order.shuffle(&mut rng);

    let n_pairs = n_dialogues / 4;
    let n_cue = n_pairs.min(n_dialogues - 2 * n_pairs);
    let n_plain = n_dialogues - 2 * n_pairs - n_cue;

    let mut dialogues = Vec::with_capacity(n_dialogues);
    for p in 0..n_pairs {
        let [a, b] = twin_pair(p, &mut names, &mut problems, &mut remedies);
        dialogues.push(a);
        dialogues.push(b);
    }
    for i in 0..n_cue {
        dialogues.push(cue_dialogue(i, &mut names, &mut problems, &mut remedies));
    }
    for i in 0..n_plain {
        let fact = &FACTS[fact_order[i % fact_order.len()]];
        dialogues.push(plain_dialogue(i, fact, impossible.draw(), &mut names));
    }
    CorpusFile { dialogues }
}

/// Generate and write a corpus file, validating it through the same loader
/// path the trainer uses.
pub fn write_corpus(path: &Path, n_dialogues: usize, seed: u64) -> Result<()> {
    let file = generate(n_dialogues, seed);
    let json = serde_json::to_string_pretty(&file).expect("corpus serializes");
    let reparsed: CorpusFile =
        serde_json::from_str(&json).expect("round-trips through serde");
    validate_corpus(reparsed)?;
    std::fs::write(path, json).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::validate_corpus;

    #[test]
    fn generated_corpora_validate_and_split_by_kind() {
        let file = generate(16, 7);
        assert_eq!(file.dialogues.len(), 16);
        let count = |prefix: &str| {
            file.dialogues
                .iter()
                .filter(|d| d.id.starts_with(prefix))
                .count()
        };
        assert_eq!(count("synth-pair"), 8);
        assert_eq!(count("synth-cue"), 4);
        assert_eq!(count("synth-plain"), 4);

        let dialogues = validate_corpus(generate(16, 7)).unwrap();
        let questions: usize = dialogues.iter().map(|d| d.questions.len()).sum();
        assert_eq!(questions, 20);
        let unanswerable = dialogues
            .iter()
            .flat_map(|d| &d.questions)
            .filter(|q| !q.answerable)
            .count();
        assert_eq!(unanswerable, 4);
    }

    #[test]
    fn twins_share_their_surface_but_not_their_gold() {
        let dialogues = validate_corpus(generate(8, 3)).unwrap();
        let a = dialogues.iter().find(|d| d.id == "synth-pair0a").unwrap();
        let b = dialogues.iter().find(|d| d.id == "synth-pair0b").unwrap();
        for (ua, ub) in a.utterances.iter().zip(&b.utterances) {
            assert_eq!(ua.speaker, ub.speaker);
            assert_eq!(ua.text, ub.text);
        }
        assert_eq!(a.questions[0].text, b.questions[0].text);
        // The discourse relations are the only distinguishing signal.
        assert_ne!(a.relations, b.relations);
        assert_ne!(a.questions[0].answers[0].text, b.questions[0].answers[0].text);
    }

    #[test]
    fn same_seed_reproduces_the_corpus() {
        let x = serde_json::to_string(&generate(12, 5)).unwrap();
        let y = serde_json::to_string(&generate(12, 5)).unwrap();
        assert_eq!(x, y);
        let z = serde_json::to_string(&generate(12, 6)).unwrap();
        assert_ne!(x, z);
    }

    #[test]
    fn write_corpus_emits_a_loadable_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.json");
        write_corpus(&path, 8, 1).unwrap();
        let loaded = crate::corpus::load_corpus(&path).unwrap();
        assert_eq!(loaded.len(), 8);
    }
}
