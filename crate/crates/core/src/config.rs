//! Flat `key = value` experiment configuration files.
//!
//! Keys are dotted paths grouped by prefix (`model.hidden_size = 768`,
//! `train.steps = 2000`). Blank lines and `#` comments are ignored. Unknown
//! keys are rejected with the offending line number so typos surface early.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::schedule::TrainSchedule;
use crate::scheme::InitScheme;

/// Everything a CLI run needs, read from one file.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub scheme: InitScheme,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub seed: u64,
    pub vocab_path: Option<PathBuf>,
    pub output_vocab_path: Option<PathBuf>,
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    pub encoder_archive: Option<PathBuf>,
    pub decoder_archive: Option<PathBuf>,
    pub subsample_fraction: f64,
    pub beam_size: usize,
    pub length_penalty_alpha: f64,
    pub max_output_length: usize,
    pub freeze: Vec<String>,
    pub unfreeze_at_step: usize,
    pub uncased_metrics: bool,
    /// raw key/value pairs, kept for hashing into output headers
    pub raw: BTreeMap<String, String>,
}

impl Default for Experiment {
    fn default() -> Self {
        Experiment {
            scheme: InitScheme::Rnd2Rnd,
            model: ModelConfig::toy(32),
            schedule: TrainSchedule {
                base_rate: 0.05,
                warmup_steps: 40,
                hidden_size: 8,
                total_steps: 400,
                batch_size: 8,
            },
            seed: 1,
            vocab_path: None,
            output_vocab_path: None,
            train_path: None,
            eval_path: None,
            encoder_archive: None,
            decoder_archive: None,
            subsample_fraction: 1.0,
            beam_size: 4,
            length_penalty_alpha: 0.6,
            max_output_length: 16,
            freeze: Vec::new(),
            unfreeze_at_step: 0,
            uncased_metrics: false,
            raw: BTreeMap::new(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!("line {line}: bad value {value:?} for {key}"))
    })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "line {line}: bad boolean {value:?} for {key}"
        ))),
    }
}

impl Experiment {
    pub fn parse(text: &str) -> Result<Experiment> {
        let mut exp = Experiment::default();
        for (idx, raw_line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {lineno}: expected key = value, got {line:?}"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if value.is_empty() {
                return Err(Error::Config(format!("line {lineno}: empty value for {key}")));
            }
            if exp.raw.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!("line {lineno}: duplicate key {key}")));
            }
            match key {
                "scheme" => exp.scheme = value.parse()?,
                "seed" => exp.seed = parse_num(lineno, key, value)?,
                "model.num_layers" => exp.model.num_layers = parse_num(lineno, key, value)?,
                "model.hidden_size" => exp.model.hidden_size = parse_num(lineno, key, value)?,
                "model.filter_size" => exp.model.filter_size = parse_num(lineno, key, value)?,
                "model.num_heads" => exp.model.num_heads = parse_num(lineno, key, value)?,
                "model.input_vocab_size" => {
                    exp.model.input_vocab_size = parse_num(lineno, key, value)?
                }
                "model.output_vocab_size" => {
                    exp.model.output_vocab_size = parse_num(lineno, key, value)?
                }
                "model.max_positions" => exp.model.max_positions = parse_num(lineno, key, value)?,
                "model.dropout" => exp.model.dropout = parse_num(lineno, key, value)?,
                "model.tie_output_to_embedding" => {
                    exp.model.tie_output_to_embedding = parse_bool(lineno, key, value)?
                }
                "train.base_rate" => exp.schedule.base_rate = parse_num(lineno, key, value)?,
                "train.warmup_steps" => {
                    exp.schedule.warmup_steps = parse_num(lineno, key, value)?
                }
                "train.steps" => exp.schedule.total_steps = parse_num(lineno, key, value)?,
                "train.batch_size" => exp.schedule.batch_size = parse_num(lineno, key, value)?,
                "train.subsample_fraction" => {
                    exp.subsample_fraction = parse_num(lineno, key, value)?
                }
                "train.freeze" => {
                    exp.freeze = value.split(',').map(|s| s.trim().to_string()).collect()
                }
                "train.unfreeze_at_step" => {
                    exp.unfreeze_at_step = parse_num(lineno, key, value)?
                }
                "decode.beam_size" => exp.beam_size = parse_num(lineno, key, value)?,
                "decode.length_penalty_alpha" => {
                    exp.length_penalty_alpha = parse_num(lineno, key, value)?
                }
                "decode.max_output_length" => {
                    exp.max_output_length = parse_num(lineno, key, value)?
                }
                "metrics.uncased" => exp.uncased_metrics = parse_bool(lineno, key, value)?,
                "data.vocab" => exp.vocab_path = Some(PathBuf::from(value)),
                "data.output_vocab" => exp.output_vocab_path = Some(PathBuf::from(value)),
                "data.train" => exp.train_path = Some(PathBuf::from(value)),
                "data.eval" => exp.eval_path = Some(PathBuf::from(value)),
                "archive.encoder" => exp.encoder_archive = Some(PathBuf::from(value)),
                "archive.decoder" => exp.decoder_archive = Some(PathBuf::from(value)),
                _ => {
                    return Err(Error::Config(format!("line {lineno}: unknown key {key:?}")));
                }
            }
        }
        // the schedule scales with the model width
        exp.schedule.hidden_size = exp.model.hidden_size;
        if !(0.0..=1.0).contains(&exp.subsample_fraction) {
            return Err(Error::Config(format!(
                "train.subsample_fraction {} outside [0, 1]",
                exp.subsample_fraction
            )));
        }
        if exp.beam_size == 0 {
            return Err(Error::Config("decode.beam_size must be at least 1".into()));
        }
        exp.model.validate()?;
        Ok(exp)
    }

    pub fn load(path: &Path) -> Result<Experiment> {
        let text = std::fs::read_to_string(path)?;
        Experiment::parse(&text)
    }

    /// Stable fingerprint of the raw key/value pairs for output headers.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (k, v) in &self.raw {
            for b in k.bytes().chain([b'='].into_iter()).chain(v.bytes()).chain([b'\n']) {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}
