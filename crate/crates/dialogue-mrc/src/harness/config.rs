//! Flat `key=value` run configuration. Files may contain blank lines and
//! `#` comments; CLI `--set key=value` flags override file values.

use std::path::Path;

use crate::autodiff::Precision;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::span_model::AblationConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// 0 means no epoch cap.
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub precision: Precision,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub graph_layers: usize,
    pub use_speaker_masking: bool,
    pub use_speaker_graph: bool,
    pub use_discourse_graph: bool,
    pub vocab_min_freq: usize,
    pub max_answer_len: usize,
    pub null_threshold: f64,
    /// Evaluate on the training set every this many steps (0 = never).
    pub eval_every: usize,
    /// Stop early once train EM reaches this percentage (NaN = disabled).
    pub stop_train_em: Option<f64>,
    /// Checkpoint every this many steps in addition to the final one
    /// (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            learning_rate: 3e-5,
            batch_size: 8,
            max_steps: 1000,
            max_epochs: 0,
            weight_decay: 0.01,
            clip_norm: 1.0,
            precision: Precision::F32,
            hidden: 64,
            heads: 4,
            layers: 2,
            ffn: 256,
            max_len: 348,
            dropout: 0.1,
            graph_layers: 2,
            use_speaker_masking: true,
            use_speaker_graph: true,
            use_discourse_graph: true,
            vocab_min_freq: 1,
            max_answer_len: 30,
            null_threshold: 0.0,
            eval_every: 0,
            stop_train_em: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn ablation(&self) -> AblationConfig {
        AblationConfig {
            use_speaker_masking: self.use_speaker_masking,
            use_speaker_graph: self.use_speaker_graph,
            use_discourse_graph: self.use_discourse_graph,
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            hidden: self.hidden,
            heads: self.heads,
            layers: self.layers,
            ffn: self.ffn,
            max_len: self.max_len,
            dropout: self.dropout,
        }
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply one override. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => {
                        return Err(Error::Config(format!(
                            "invalid value {value:?} for key precision (want f32 or f64)"
                        )))
                    }
                }
            }
            "hidden" => self.hidden = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "ffn" => self.ffn = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "graph_layers" => self.graph_layers = parse(key, value)?,
            "use_speaker_masking" => self.use_speaker_masking = parse(key, value)?,
            "use_speaker_graph" => self.use_speaker_graph = parse(key, value)?,
            "use_discourse_graph" => self.use_discourse_graph = parse(key, value)?,
            "vocab_min_freq" => self.vocab_min_freq = parse(key, value)?,
            "max_answer_len" => self.max_answer_len = parse(key, value)?,
            "null_threshold" => self.null_threshold = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "stop_train_em" => {
                self.stop_train_em = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Canonical `key=value` rendering; `apply_text` of this text
    /// reconstructs the config exactly.
    pub fn to_text(&self) -> String {
        let precision = match self.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let stop = self
            .stop_train_em
            .map_or("none".to_string(), |v| format!("{v}"));
        format!(
            "seed={}\nlearning_rate={}\nbatch_size={}\nmax_steps={}\nmax_epochs={}\n\
             weight_decay={}\nclip_norm={}\nprecision={precision}\nhidden={}\nheads={}\n\
             layers={}\nffn={}\nmax_len={}\ndropout={}\ngraph_layers={}\n\
             use_speaker_masking={}\nuse_speaker_graph={}\nuse_discourse_graph={}\n\
             vocab_min_freq={}\nmax_answer_len={}\nnull_threshold={}\neval_every={}\n\
             stop_train_em={stop}\ncheckpoint_every={}\n",
            self.seed,
            self.learning_rate,
            self.batch_size,
            self.max_steps,
            self.max_epochs,
            self.weight_decay,
            self.clip_norm,
            self.hidden,
            self.heads,
            self.layers,
            self.ffn,
            self.max_len,
            self.dropout,
            self.graph_layers,
            self.use_speaker_masking,
            self.use_speaker_graph,
            self.use_discourse_graph,
            self.vocab_min_freq,
            self.max_answer_len,
            self.null_threshold,
            self.eval_every,
            self.checkpoint_every,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let cfg = TrainConfig::default();
        let mut parsed = TrainConfig::default();
        parsed.learning_rate = 999.0; // make sure apply_text really overwrites
        parsed.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("# a comment\n\nseed = 7\n  max_steps=3  \n")
            .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.max_steps, 3);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(matches!(cfg.set("learning_rte", "0.1"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("batch_size", "lots"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("precision", "f16"), Err(Error::Config(_))));
        assert!(matches!(
            cfg.apply_text("seed 42"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn precision_and_early_stop_parse_their_special_forms() {
        let mut cfg = TrainConfig::default();
        cfg.set("precision", "f64").unwrap();
        assert_eq!(cfg.precision, Precision::F64);
        cfg.set("precision", "f32").unwrap();
        assert_eq!(cfg.precision, Precision::F32);

        cfg.set("stop_train_em", "99.5").unwrap();
        assert_eq!(cfg.stop_train_em, Some(99.5));
        cfg.set("stop_train_em", "none").unwrap();
        assert_eq!(cfg.stop_train_em, None);
        cfg.set("stop_train_em", "").unwrap();
        assert_eq!(cfg.stop_train_em, None);
    }

    #[test]
    fn derived_configs_follow_the_flags() {
        let mut cfg = TrainConfig::default();
        cfg.use_speaker_graph = false;
        let ab = cfg.ablation();
        assert!(ab.use_speaker_masking);
        assert!(!ab.use_speaker_graph);
        let enc = cfg.encoder_config(123);
        assert_eq!(enc.vocab_size, 123);
        assert_eq!(enc.hidden, cfg.hidden);
        assert_eq!(enc.max_len, cfg.max_len);
    }
}
