use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dialogue_mrc::autodiff::set_precision;
use dialogue_mrc::corpus::{load_corpus, Dialogue};
use dialogue_mrc::error::{Error, Result};
use dialogue_mrc::harness::gradcheck::check_module;
use dialogue_mrc::harness::train::{encode_corpus, evaluate_model, model_config_for};
use dialogue_mrc::harness::{load_checkpoint, restore_params, synth, train, TrainConfig};
use dialogue_mrc::model::ModelParams;
use dialogue_mrc::relational_graphs::{build_discourse_graph, build_speaker_graph};
use dialogue_mrc::speaker_attention::build_masks;

#[derive(Parser)]
#[command(
    name = "dialogue-mrc",
    version,
    about = "Speaker-aware extractive QA over multi-party dialogues"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphKind {
    Speaker,
    Discourse,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a loss log.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// key=value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override one config key (repeatable), e.g. --set learning_rate=1e-3
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint on a corpus: EM/F1 plus a predictions file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Where to write the {question_id: answer} JSON.
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Decode answers without scoring them.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Print the speaker or discourse graph of one dialogue.
    InspectGraph {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dialogue: String,
        #[arg(long, value_enum)]
        kind: GraphKind,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Print the two speaker attention masks for one encoded question.
    InspectMasks {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dialogue: String,
        #[arg(long)]
        question: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Verify analytic gradients against finite differences.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// full (default), encoder, speaker-attention, speaker-graph,
        /// discourse-graph, or span.
        #[arg(long)]
        module: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Generate a synthetic training corpus.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        dialogues: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let usage_ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            std::process::exit(if usage_ok { 0 } else { 1 });
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    apply_overrides(&mut cfg, overrides)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut TrainConfig, overrides: &[String]) -> Result<()> {
    for kv in overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set wants key=value, got {kv:?}")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    Ok(())
}

fn find_dialogue<'a>(dialogues: &'a [Dialogue], id: &str) -> Result<&'a Dialogue> {
    dialogues
        .iter()
        .find(|d| d.id == id)
        .ok_or_else(|| Error::Config(format!("no dialogue with id {id:?} in the corpus")))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Shared by eval and predict: restore the checkpointed model and decode
/// every question in the corpus.
fn run_checkpoint(
    checkpoint: &Path,
    corpus: &Path,
    overrides: &[String],
) -> Result<(TrainConfig, dialogue_mrc::harness::EvalReport)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let mut cfg = ckpt.config.clone();
    apply_overrides(&mut cfg, overrides)?;
    set_precision(cfg.precision);

    let dialogues = load_corpus(corpus)?;
    let model_cfg = model_config_for(&cfg, &ckpt.vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(&model_cfg, &mut rng)?;
    restore_params(&params.named_parameters(), &ckpt)?;

    let examples = encode_corpus(&dialogues, &ckpt.vocab, cfg.max_len)?;
    let report = evaluate_model(&dialogues, &examples, &params, &model_cfg, &cfg)?;
    Ok((cfg, report))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            corpus,
            config,
            out,
            set,
        } => {
            let cfg = load_config(config.as_deref(), &set)?;
            let (_, outcome) = train(&corpus, &cfg, &out)?;
            let last = outcome.loss_log.last().map_or(f64::NAN, |&(_, l)| l);
            println!(
                "trained {} steps{}, final batch loss {last:.6}",
                outcome.steps,
                if outcome.stopped_early {
                    " (stopped early)"
                } else {
                    ""
                }
            );
            if let Some(report) = &outcome.train_eval {
                println!("train-set {}", report.summary());
            }
            println!("checkpoint written to {}", out.join("model.ckpt").display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            corpus,
            out,
            set,
        } => {
            let (_, report) = run_checkpoint(&checkpoint, &corpus, &set)?;
            write_file(&out, &report.predictions_json())?;
            println!("{}", report.summary());
            println!("predictions written to {}", out.display());
            Ok(())
        }
        Command::Predict {
            checkpoint,
            corpus,
            out,
            set,
        } => {
            let (_, report) = run_checkpoint(&checkpoint, &corpus, &set)?;
            write_file(&out, &report.predictions_json())?;
            println!(
                "{} predictions written to {}",
                report.n_questions,
                out.display()
            );
            Ok(())
        }
        Command::InspectGraph {
            corpus,
            dialogue,
            kind,
            set,
        } => {
            let cfg = load_config(None, &set)?;
            let dialogues = load_corpus(&corpus)?;
            let d = find_dialogue(&dialogues, &dialogue)?;
            let vocab = dialogue_mrc::corpus::build_vocabulary(&dialogues, cfg.vocab_min_freq);
            let question = d.questions.first().cloned().unwrap_or_else(|| {
                dialogue_mrc::corpus::Question {
                    id: "inspect".to_string(),
                    text: String::new(),
                    answerable: false,
                    answers: Vec::new(),
                }
            });
            let e = dialogue_mrc::corpus::encode_example(d, &question, &vocab, cfg.max_len)?;
            match kind {
                GraphKind::Speaker => print!("{}", build_speaker_graph(&e).render_text()),
                GraphKind::Discourse => {
                    let (g, dropped) = build_discourse_graph(d, &e);
                    print!("{}", g.render_text());
                    if dropped > 0 {
                        println!("# {dropped} relation endpoint(s) dropped by truncation");
                    }
                }
            }
            Ok(())
        }
        Command::InspectMasks {
            corpus,
            dialogue,
            question,
            set,
        } => {
            let cfg = load_config(None, &set)?;
            let dialogues = load_corpus(&corpus)?;
            let d = find_dialogue(&dialogues, &dialogue)?;
            let q = d
                .questions
                .iter()
                .find(|q| q.id == question)
                .ok_or_else(|| {
                    Error::Config(format!("no question with id {question:?} in {dialogue:?}"))
                })?;
            let e = dialogue_mrc::corpus::encode_example(
                d,
                q,
                &dialogue_mrc::corpus::build_vocabulary(&dialogues, cfg.vocab_min_freq),
                cfg.max_len,
            )?;
            print!("{}", render_masks(&e));
            Ok(())
        }
        Command::GradCheck {
            config,
            module,
            set,
        } => {
            let cfg = load_config(config.as_deref(), &set)?;
            let module = module.as_deref().unwrap_or("full");
            // The scenarios are fixed-size (width 16); the config contributes
            // the coordinate-sampling seed.
            let outcome = check_module(module, 16, 8, cfg.seed)?;
            for (name, err) in &outcome.report.per_param {
                println!("  {name}: {err:.3e}");
            }
            println!(
                "module {}: max relative error {:.3e} over {} coordinates (threshold {:.0e})",
                outcome.module,
                outcome.report.max_rel_err,
                outcome.report.coords_checked,
                outcome.threshold
            );
            if !outcome.passed() {
                return Err(Error::GradCheckFailed {
                    max_rel_err: outcome.report.max_rel_err,
                    threshold: outcome.threshold,
                });
            }
            println!("ok");
            Ok(())
        }
        Command::GenSynth {
            out,
            dialogues,
            seed,
        } => {
            synth::write_corpus(&out, dialogues, seed)?;
            println!("wrote {dialogues} dialogues to {}", out.display());
            Ok(())
        }
    }
}

/// Character grid per channel: rows are queries, columns are keys, `.` means
/// the pair may attend and `#` means blocked. Pads are trimmed.
fn render_masks(e: &dialogue_mrc::corpus::EncodedExample) -> String {
    let masks = build_masks(e);
    let n = e.non_pad_len();
    let l = e.len();
    let mut out = String::new();
    out.push_str(&format!(
        "{} tokens ({} padded); tokens with speakers:\n",
        n,
        l - n
    ));
    for i in 0..n {
        if let (Some(u), Some(s)) = (e.utterance_of_token[i], e.speaker_of_token[i]) {
            out.push_str(&format!("  token {i}: utterance {u}, speaker {s}\n"));
        }
    }
    for (name, mask) in [("same-speaker channel", &masks.m1), ("different-speaker channel", &masks.m2)] {
        out.push_str(&format!("{name}:\n"));
        let v = mask.value();
        for qi in 0..n {
            out.push_str("  ");
            for ki in 0..n {
                out.push(if v[qi * l + ki] == 0.0 { '.' } else { '#' });
            }
            out.push('\n');
        }
    }
    out
}
