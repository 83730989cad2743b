//! Name-mapped warm-starting of models from tensor archives.
//!
//! Encoder-only (bert-like) archives carry `embed/*` and `encoder/*`
//! tensors; decoder-only (gpt-like) archives carry `embed/word`,
//! `embed/pos` and `decoder/*` self-attention/feed-forward tensors.
//! Cross-attention never exists in either family and always stays at its
//! random initialization.

use crate::archive::{SourceFamily, TensorArchive};
use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
    Both,
}

impl Side {
    fn covers_encoder(self) -> bool {
        matches!(self, Side::Encoder | Side::Both)
    }

    fn covers_decoder(self) -> bool {
        matches!(self, Side::Decoder | Side::Both)
    }
}

/// Which archive tensor (if any) feeds a model parameter, given the side
/// being warm-started and the archive family.
pub fn archive_source_name(
    model_name: &str,
    side: Side,
    family: SourceFamily,
) -> Option<String> {
    if family == SourceFamily::Native {
        // native archives use model naming directly
        let encoder_side = model_name.starts_with("embed/")
            || model_name.starts_with("embed_in/")
            || model_name.starts_with("encoder/");
        let decoder_side = model_name.starts_with("embed/")
            || model_name.starts_with("embed_out/")
            || model_name.starts_with("decoder/")
            || model_name.starts_with("output/");
        if (encoder_side && side.covers_encoder()) || (decoder_side && side.covers_decoder()) {
            return Some(model_name.to_string());
        }
        return None;
    }

    // embedding tables
    for (prefix, on_encoder_side) in [("embed/", true), ("embed_in/", true), ("embed_out/", false)]
    {
        if let Some(rest) = model_name.strip_prefix(prefix) {
            let side_ok = if prefix == "embed/" {
                side.covers_encoder() || side.covers_decoder()
            } else if on_encoder_side {
                side.covers_encoder()
            } else {
                side.covers_decoder()
            };
            if !side_ok {
                return None;
            }
            return match family {
                SourceFamily::BertLike => Some(format!("embed/{rest}")),
                SourceFamily::GptLike if rest == "word" || rest == "pos" => {
                    Some(format!("embed/{rest}"))
                }
                _ => None,
            };
        }
    }

    if model_name.starts_with("encoder/") && side.covers_encoder() {
        return match family {
            SourceFamily::BertLike => Some(model_name.to_string()),
            _ => None,
        };
    }

    if let Some(rest) = model_name.strip_prefix("decoder/") {
        if !side.covers_decoder() {
            return None;
        }
        if rest.contains("/cross/") {
            return None;
        }
        return match family {
            SourceFamily::BertLike => Some(format!("encoder/{rest}")),
            SourceFamily::GptLike => Some(model_name.to_string()),
            SourceFamily::Native => unreachable!(),
        };
    }

    None
}

/// Whether a complete archive of this family would contain the tensor.
/// Used by the closed-form accounting to predict warm/random partitions.
pub fn family_provides(family: SourceFamily, archive_name: &str) -> bool {
    match family {
        SourceFamily::Native => true,
        SourceFamily::BertLike => {
            archive_name.starts_with("embed/") || archive_name.starts_with("encoder/")
        }
        SourceFamily::GptLike => {
            archive_name == "embed/word"
                || archive_name == "embed/pos"
                || (archive_name.starts_with("decoder/")
                    && (archive_name.contains("/self/") || archive_name.contains("/ffn/")))
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct InitReport {
    /// Model tensor names copied from an archive.
    pub copied: Vec<String>,
    /// Model tensor names left at their random initialization.
    pub random: Vec<String>,
    pub copied_params: usize,
    pub random_params: usize,
}

impl InitReport {
    pub fn merge(mut self, other: InitReport) -> InitReport {
        let mut copied = self.copied;
        copied.extend(other.copied);
        copied.sort();
        copied.dedup();
        self.random = Vec::new();
        self.random_params = 0;
        self.copied = copied;
        self
    }

    /// Recompute the random partition from the model after merging.
    pub fn finish(mut self, model: &Seq2SeqModel) -> InitReport {
        self.copied_params = 0;
        self.random_params = 0;
        self.random.clear();
        for (name, tensor) in model.params_iter() {
            if self.copied.iter().any(|c| c == name) {
                self.copied_params += tensor.numel();
            } else {
                self.random.push(name.to_string());
                self.random_params += tensor.numel();
            }
        }
        self
    }
}

/// Copy matched archive tensors into the model. Positional tables longer
/// than the model's maximum are prefix-truncated; any other shape mismatch
/// on a matched name is an incompatibility error.
pub fn warm_start(
    model: &mut Seq2SeqModel,
    archive: &TensorArchive,
    side: Side,
) -> Result<InitReport> {
    let names: Vec<String> = model.param_names().map(|s| s.to_string()).collect();
    let mut report = InitReport::default();
    for name in names {
        let source = match archive_source_name(&name, side, archive.family) {
            Some(s) => s,
            None => continue,
        };
        let entry = match archive.get(&source) {
            Some(e) => e,
            None => continue,
        };
        let slot_shape = model.param(&name).unwrap().shape().to_vec();
        let mut tensor = entry.to_tensor();
        let is_positional = name.ends_with("/pos");
        if is_positional
            && tensor.shape().len() == 2
            && slot_shape.len() == 2
            && tensor.shape()[1] == slot_shape[1]
            && tensor.shape()[0] > slot_shape[0]
        {
            let cols = slot_shape[1];
            let data = tensor.data()[..slot_shape[0] * cols].to_vec();
            tensor = Tensor::new(slot_shape.clone(), data).unwrap();
        }
        if tensor.shape() != slot_shape.as_slice() {
            return Err(Error::Incompatible(format!(
                "tensor {name} (from archive {source}): model shape {:?} vs archive {:?}",
                slot_shape,
                tensor.shape()
            )));
        }
        model.set_param(&name, tensor)?;
        report.copied.push(name);
    }
    Ok(report.finish(model))
}

/// Export every model parameter to a native archive.
pub fn export_native(model: &Seq2SeqModel) -> TensorArchive {
    let mut archive = TensorArchive::new(SourceFamily::Native);
    for (name, tensor) in model.params_iter() {
        archive
            .push(crate::archive::ArchiveEntry::from_tensor(name, tensor))
            .unwrap();
    }
    archive
}

/// Export the encoder stack plus embeddings as a bert-like archive.
pub fn export_bert_like(model: &Seq2SeqModel) -> Result<TensorArchive> {
    if model.config.decoder_only {
        return Err(Error::Scheme("decoder-only model has no encoder to export".into()));
    }
    let mut archive = TensorArchive::new(SourceFamily::BertLike);
    for (name, tensor) in model.params_iter() {
        let out_name = if let Some(rest) = name.strip_prefix("embed/") {
            format!("embed/{rest}")
        } else if let Some(rest) = name.strip_prefix("embed_in/") {
            format!("embed/{rest}")
        } else if name.starts_with("encoder/") {
            name.to_string()
        } else {
            continue;
        };
        archive.push(crate::archive::ArchiveEntry::from_tensor(out_name, tensor))?;
    }
    Ok(archive)
}

/// Export the decoder stack plus word/positional embeddings as a gpt-like
/// archive.
pub fn export_gpt_like(model: &Seq2SeqModel) -> Result<TensorArchive> {
    let mut archive = TensorArchive::new(SourceFamily::GptLike);
    for (name, tensor) in model.params_iter() {
        let out_name = if name == "embed/word" || name == "embed/pos" {
            name.to_string()
        } else if name.starts_with("decoder/")
            && (name.contains("/self/") || name.contains("/ffn/"))
        {
            name.to_string()
        } else if model.config.share_encoder_decoder && name.starts_with("encoder/") {
            name.replacen("encoder/", "decoder/", 1)
        } else {
            continue;
        };
        archive.push(crate::archive::ArchiveEntry::from_tensor(out_name, tensor))?;
    }
    Ok(archive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy_bert_archive(seed: u64) -> TensorArchive {
        let model = Seq2SeqModel::new_random(ModelConfig::toy(16), seed).unwrap();
        export_bert_like(&model).unwrap()
    }

    #[test]
    fn bert2bert_mapping_copies_both_sides_and_reports_cross_random() {
        let archive = toy_bert_archive(100);
        let mut model = Seq2SeqModel::new_random(ModelConfig::toy(16), 1).unwrap();
        let report = warm_start(&mut model, &archive, Side::Both).unwrap();

        assert!(report.copied.iter().any(|n| n == "encoder/layer_0/self/q_w"));
        assert!(report.copied.iter().any(|n| n == "decoder/layer_0/self/q_w"));
        assert!(report.copied.iter().any(|n| n == "embed/word"));
        assert!(report.random.iter().all(|n| !report.copied.contains(n)));
        assert!(report.random.iter().any(|n| n.contains("/cross/")));
        assert!(!report.copied.iter().any(|n| n.contains("/cross/")));

        // decoder self-attention actually equals the archive's encoder tensors
        let dec = model.param("decoder/layer_1/ffn/w1").unwrap();
        let src = archive.get("encoder/layer_1/ffn/w1").unwrap().to_tensor();
        assert_eq!(dec, &src);
    }

    #[test]
    fn hidden_size_mismatch_is_incompatibility() {
        let archive = toy_bert_archive(100);
        let mut cfg = ModelConfig::toy(16);
        cfg.hidden_size = 16;
        cfg.filter_size = 64;
        let mut model = Seq2SeqModel::new_random(cfg, 1).unwrap();
        let err = warm_start(&mut model, &archive, Side::Both).unwrap_err();
        assert!(matches!(err, Error::Incompatible(_)));
    }

    #[test]
    fn copied_tensors_round_trip_through_export() {
        let archive = toy_bert_archive(100);
        let mut model = Seq2SeqModel::new_random(ModelConfig::toy(16), 1).unwrap();
        let report = warm_start(&mut model, &archive, Side::Encoder).unwrap();
        let exported = export_bert_like(&model).unwrap();
        for name in &report.copied {
            if name.starts_with("encoder/") || name.starts_with("embed/") {
                assert_eq!(
                    exported.get(name).unwrap().data,
                    archive.get(name).unwrap().data,
                    "tensor {name} altered in copy-through"
                );
            }
        }
    }

    #[test]
    fn positional_table_is_prefix_truncated() {
        let big = Seq2SeqModel::new_random(
            ModelConfig {
                max_positions: 16,
                ..ModelConfig::toy(16)
            },
            5,
        )
        .unwrap();
        let archive = export_bert_like(&big).unwrap();
        let mut cfg = ModelConfig::toy(16);
        cfg.max_positions = 8;
        let mut model = Seq2SeqModel::new_random(cfg, 1).unwrap();
        warm_start(&mut model, &archive, Side::Both).unwrap();
        let pos = model.param("embed/pos").unwrap();
        assert_eq!(pos.shape(), &[8, 8]);
        let src = archive.get("embed/pos").unwrap().to_tensor();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(pos.at2(i, j), src.at2(i, j));
            }
        }
    }

    #[test]
    fn gpt_like_archive_leaves_type_embedding_random() {
        let mut cfg = ModelConfig::toy(16);
        cfg.decoder_only = true;
        let donor = Seq2SeqModel::new_random(cfg.clone(), 7).unwrap();
        let archive = export_gpt_like(&donor).unwrap();

        let mut model = Seq2SeqModel::new_random(cfg, 8).unwrap();
        let report = warm_start(&mut model, &archive, Side::Decoder).unwrap();
        assert!(report.copied.iter().any(|n| n == "embed/word"));
        assert!(report.random.iter().any(|n| n == "embed/type"));
        assert!(report.random.iter().any(|n| n == "embed/ln_g"));
        assert!(report.copied.iter().any(|n| n == "decoder/layer_0/self/q_w"));
    }

    #[test]
    fn report_partitions_every_parameter() {
        let archive = toy_bert_archive(3);
        let mut model = Seq2SeqModel::new_random(ModelConfig::toy(16), 4).unwrap();
        let report = warm_start(&mut model, &archive, Side::Both).unwrap();
        assert_eq!(
            report.copied_params + report.random_params,
            model.total_params()
        );
        assert_eq!(
            report.copied.len() + report.random.len(),
            model.param_names().count()
        );
    }
}
