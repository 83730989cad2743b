//! Fine-tuning and toy pre-training loops.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::{SourceFamily, TensorArchive};
use crate::convert::glob_match;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{lm_loss, LossItem, ModelConfig, Seq2SeqModel};
use crate::optim::AdamState;
use crate::schedule::TrainSchedule;
use crate::vocab::Vocabulary;
use crate::warmstart::{export_bert_like, export_gpt_like};

/// Name patterns excluded from updates. `until_step == 0` keeps them frozen
/// for the whole run; otherwise the freeze lifts after that step.
#[derive(Debug, Clone, Default)]
pub struct FreezeSpec {
    pub patterns: Vec<String>,
    pub until_step: usize,
}

impl FreezeSpec {
    pub fn is_frozen(&self, name: &str, step: usize) -> bool {
        if self.patterns.is_empty() {
            return false;
        }
        if self.until_step != 0 && step > self.until_step {
            return false;
        }
        self.patterns.iter().any(|p| glob_match(p, name))
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    /// (step, mean batch loss) pairs, one per step taken.
    pub losses: Vec<(usize, f64)>,
    pub stopped_early_at: Option<usize>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (step, loss) in &self.losses {
            out.push_str(&format!("{step},{loss}\n"));
        }
        out
    }
}

/// Turn a text pair into a teacher-forcing item, truncating to what the
/// model's position table can hold.
pub fn encode_pair(
    vocab_in: &Vocabulary,
    vocab_out: &Vocabulary,
    source: &str,
    target: &str,
    cfg: &ModelConfig,
) -> LossItem {
    let mut src = vocab_in.tokenize(source);
    let mut tgt = vocab_out.tokenize(target);
    if cfg.decoder_only {
        // one stream: source ++ BOS ++ target ++ EOS must fit
        let budget = cfg.max_positions.saturating_sub(2);
        let keep_src = src.len().min(budget / 2 + budget % 2);
        let keep_tgt = tgt.len().min(budget - keep_src.min(budget));
        src.truncate(keep_src);
        tgt.truncate(keep_tgt);
        LossItem::decoder_only_stream(&src, &tgt, vocab_out.bos_id, vocab_out.eos_id)
    } else {
        src.truncate(cfg.max_positions);
        tgt.truncate(cfg.max_positions.saturating_sub(1));
        LossItem::teacher_forced(&src, &tgt, vocab_out.bos_id, vocab_out.eos_id)
    }
}

/// Run Adam over the items with the inverse-sqrt schedule. The callback sees
/// the model after every step and may stop training by returning false.
pub fn train_items(
    model: &mut Seq2SeqModel,
    items: &[LossItem],
    schedule: &TrainSchedule,
    freeze: &FreezeSpec,
    seed: u64,
    mut on_step: impl FnMut(usize, &Seq2SeqModel, f64) -> Result<bool>,
) -> Result<TrainLog> {
    if items.is_empty() {
        return Err(Error::DegenerateDataset);
    }
    let mut adam = AdamState::new();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5b21_9c4d);
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0usize;

    for step in 1..=schedule.total_steps as usize {
        let mut batch = Vec::with_capacity(schedule.batch_size);
        for _ in 0..schedule.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            batch.push(items[order[cursor]].clone());
            cursor += 1;
        }

        let dropout_rng = if model.config.dropout > 0.0 {
            Some(ChaCha8Rng::seed_from_u64(seed ^ (step as u64) << 1))
        } else {
            None
        };
        let (fp, loss_node) = lm_loss(model, &batch, dropout_rng)
            .map_err(|e| Error::Training { step, msg: e.to_string() })?;
        let loss = fp.graph.value(loss_node).data()[0];
        if !loss.is_finite() {
            return Err(Error::Training { step, msg: "non-finite loss".into() });
        }
        let grads = fp.graph.backward(loss_node)?;

        let mut named_grads = std::collections::HashMap::new();
        for (name, node) in &fp.param_nodes {
            if freeze.is_frozen(name, step) {
                continue;
            }
            if let Some(g) = grads.get(*node) {
                named_grads.insert(name.clone(), g.clone());
            }
        }
        let lr = schedule.learning_rate(step as u64);
        let mut params: Vec<(String, &mut Tensor)> = model
            .params_iter_mut()
            .map(|(n, t)| (n.clone(), t))
            .collect();
        adam
            .step(&mut params, &named_grads, lr)
            .map_err(|e| Error::Training { step, msg: e.to_string() })?;

        log.losses.push((step, loss));
        if !on_step(step, model, loss)? {
            log.stopped_early_at = Some(step);
            break;
        }
    }
    Ok(log)
}

use crate::tensor::Tensor;

/// Fine-tune on a text dataset.
pub fn train(
    model: &mut Seq2SeqModel,
    dataset: &Dataset,
    vocab_in: &Vocabulary,
    vocab_out: &Vocabulary,
    schedule: &TrainSchedule,
    freeze: &FreezeSpec,
    seed: u64,
    on_step: impl FnMut(usize, &Seq2SeqModel, f64) -> Result<bool>,
) -> Result<TrainLog> {
    let cfg = model.config.clone();
    let items: Vec<LossItem> = dataset
        .pairs
        .iter()
        .map(|p| encode_pair(vocab_in, vocab_out, &p.source, &p.target, &cfg))
        .collect();
    train_items(model, &items, schedule, freeze, seed, on_step)
}

const MASK_RATE: f64 = 0.15;

/// Small-scale pre-training that yields a warm-start archive.
///
/// `BertLike`: denoising — the encoder reads text with 15% of tokens masked
/// (the unknown token stands in as the mask) and the decoder reconstructs the
/// original. `GptLike`: plain next-token prediction on a decoder-only model.
pub fn toy_pretrain(
    cfg: &ModelConfig,
    family: SourceFamily,
    vocab: &Vocabulary,
    texts: &[String],
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<TensorArchive> {
    if texts.is_empty() {
        return Err(Error::DegenerateDataset);
    }
    let mut cfg = cfg.clone();
    cfg.share_encoder_decoder = false;
    cfg.separate_embeddings = false;
    cfg.input_vocab_size = vocab.len();
    cfg.output_vocab_size = vocab.len();
    cfg.decoder_only = family == SourceFamily::GptLike;
    cfg.validate()?;
    let mut model = Seq2SeqModel::new_random(cfg.clone(), seed)?;

    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b);
    let items: Vec<LossItem> = texts
        .iter()
        .map(|text| {
            let mut ids = vocab.tokenize(text);
            ids.truncate(cfg.max_positions.saturating_sub(2).max(1));
            match family {
                SourceFamily::GptLike => {
                    LossItem::decoder_only_stream(&[], &ids, vocab.bos_id, vocab.eos_id)
                }
                _ => {
                    let masked: Vec<usize> = ids
                        .iter()
                        .map(|&id| {
                            if mask_rng.gen::<f64>() < MASK_RATE {
                                vocab.unk_id
                            } else {
                                id
                            }
                        })
                        .collect();
                    LossItem::teacher_forced(&masked, &ids, vocab.bos_id, vocab.eos_id)
                }
            }
        })
        .collect();

    train_items(
        &mut model,
        &items,
        schedule,
        &FreezeSpec::default(),
        seed,
        |_, _, _| Ok(true),
    )?;

    match family {
        SourceFamily::GptLike => export_gpt_like(&model),
        _ => export_bert_like(&model),
    }
}
