//! Training loop and whole-corpus evaluation.
//!
//! Batches are gradient accumulation over per-example tapes: each example in
//! a batch runs its own forward/backward with the loss scaled by 1/batch, so
//! one optimizer step sees the mean-gradient of the batch. Runs are
//! deterministic for a fixed seed, including the epoch shuffle and dropout.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::set_precision;
use crate::corpus::{
    build_vocabulary, encode_example, load_corpus, render_context, Dialogue, EncodedExample,
    Vocabulary,
};
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::harness::checkpoint::save_checkpoint;
use crate::harness::config::TrainConfig;
use crate::harness::metrics::{compute_em, compute_f1, EvalReport, QuestionRecord};
use crate::harness::optim::AdamW;
use crate::model::{forward, ModelConfig, ModelParams};
use crate::span_model::decode_answer;

/// One encoded question, remembering where it came from.
pub struct Example {
    pub dialogue: usize,
    pub question: usize,
    pub encoded: EncodedExample,
}

pub fn model_config_for(cfg: &TrainConfig, vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        encoder: cfg.encoder_config(vocab.tokens().len()),
        ablation: cfg.ablation(),
        graph_layers: cfg.graph_layers,
        num_relation_labels: vocab.relation_labels().len(),
    }
}

pub fn encode_corpus(
    dialogues: &[Dialogue],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Example>> {
    let mut examples = Vec::new();
    for (di, d) in dialogues.iter().enumerate() {
        for (qi, q) in d.questions.iter().enumerate() {
            examples.push(Example {
                dialogue: di,
                question: qi,
                encoded: encode_example(d, q, vocab, max_len)?,
            });
        }
    }
    Ok(examples)
}

/// Decode every example in eval mode and score it against the gold answers.
pub fn evaluate_model(
    dialogues: &[Dialogue],
    examples: &[Example],
    params: &ModelParams,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let contexts: Vec<String> = dialogues
        .iter()
        .map(|d| render_context(&d.utterances).0)
        .collect();
    // Eval mode never samples, but forward still wants an rng.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut records = Vec::with_capacity(examples.len());
    for ex in examples {
        let d = &dialogues[ex.dialogue];
        let q = &d.questions[ex.question];
        let out = forward(d, &ex.encoded, params, model_cfg, Mode::Eval, &mut rng)?;
        let decoded = decode_answer(
            &out.logits.start.value(),
            &out.logits.end.value(),
            &ex.encoded,
            &contexts[ex.dialogue],
            cfg.max_answer_len,
            cfg.null_threshold,
        );
        let prediction = decoded.text_or_empty().to_string();
        let golds: Vec<String> = q.answers.iter().map(|a| a.text.clone()).collect();
        records.push(QuestionRecord {
            em: compute_em(&prediction, &golds),
            f1: compute_f1(&prediction, &golds),
            question_id: q.id.clone(),
            prediction,
            golds,
            answerable: q.answerable,
        });
    }
    Ok(EvalReport::from_records(records))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    /// (step, mean batch loss) — also written to `loss.csv`.
    pub loss_log: Vec<(u64, f64)>,
    /// Last training-set evaluation, when `eval_every` was on.
    pub train_eval: Option<EvalReport>,
    pub stopped_early: bool,
}

pub struct TrainedModel {
    pub params: ModelParams,
    pub model_cfg: ModelConfig,
    pub vocab: Vocabulary,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn train(corpus_path: &Path, cfg: &TrainConfig, out_dir: &Path) -> Result<(TrainedModel, TrainOutcome)> {
    let dialogues = load_corpus(corpus_path)?;
    train_on(&dialogues, cfg, out_dir)
}

pub fn train_on(
    dialogues: &[Dialogue],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(TrainedModel, TrainOutcome)> {
    set_precision(cfg.precision);
    let vocab = build_vocabulary(dialogues, cfg.vocab_min_freq);
    let examples = encode_corpus(dialogues, &vocab, cfg.max_len)?;
    if examples.is_empty() {
        return Err(Error::Schema {
            field: "dialogues".to_string(),
            detail: "corpus has no questions to train on".to_string(),
        });
    }

    let model_cfg = model_config_for(cfg, &vocab);
    model_cfg.encoder.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(&model_cfg, &mut init_rng)?;
    let named = params.named_parameters();
    let mut optimizer = AdamW::new(
        cfg.learning_rate,
        cfg.weight_decay,
        cfg.clip_norm,
        &named,
    );
    // Separate stream for data order and dropout so adding a parameter
    // never reshuffles the corpus.
    let mut run_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let config_path = out_dir.join("config.txt");
    fs::write(&config_path, cfg.to_text()).map_err(io_err(&config_path))?;
    let loss_path = out_dir.join("loss.csv");
    let mut loss_file = fs::File::create(&loss_path).map_err(io_err(&loss_path))?;
    writeln!(loss_file, "step,loss").map_err(io_err(&loss_path))?;

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut loss_log = Vec::new();
    let mut step: u64 = 0;
    let mut epoch: usize = 0;
    let mut train_eval = None;
    let mut stopped_early = false;

    'training: loop {
        if cfg.max_epochs > 0 && epoch >= cfg.max_epochs {
            break;
        }
        epoch += 1;
        order.shuffle(&mut run_rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            step += 1;
            params.zero_grad();
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &examples[i];
                let d = &dialogues[ex.dialogue];
                let out = forward(d, &ex.encoded, &params, &model_cfg, Mode::Train, &mut run_rng)?;
                let loss = out.loss.item();
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        what: "loss",
                        name: format!(
                            "step {step}, question {}",
                            d.questions[ex.question].id
                        ),
                    });
                }
                batch_loss += loss;
                out.loss.scale(1.0 / batch.len() as f64).backward()?;
            }
            batch_loss /= batch.len() as f64;
            optimizer.step(&named)?;
            writeln!(loss_file, "{step},{batch_loss}").map_err(io_err(&loss_path))?;
            loss_log.push((step, batch_loss));

            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every as u64 == 0 {
                let path = out_dir.join(format!("step{step}.ckpt"));
                save_checkpoint(&path, cfg, step, &vocab, &named, optimizer.moments())?;
            }
            if cfg.eval_every > 0 && step % cfg.eval_every as u64 == 0 {
                let report = evaluate_model(dialogues, &examples, &params, &model_cfg, cfg)?;
                let stop = cfg.stop_train_em.is_some_and(|t| report.em >= t);
                train_eval = Some(report);
                if stop {
                    stopped_early = true;
                    break 'training;
                }
            }
            if cfg.max_steps > 0 && step >= cfg.max_steps as u64 {
                break 'training;
            }
        }
    }

    let final_path = out_dir.join("model.ckpt");
    save_checkpoint(&final_path, cfg, step, &vocab, &named, optimizer.moments())?;

    Ok((
        TrainedModel {
            params,
            model_cfg,
            vocab,
        },
        TrainOutcome {
            steps: step,
            loss_log,
            train_eval,
            stopped_early,
        },
    ))
}
