//! The ten initialization setups, model assembly, and parameter accounting.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::archive::{SourceFamily, TensorArchive};
use crate::error::{Error, Result};
use crate::model::{tensor_inventory, Component, ModelConfig, Seq2SeqModel};
use crate::warmstart::{
    archive_source_name, family_provides, warm_start, InitReport, Side,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitScheme {
    Rnd2Rnd,
    Bert2Rnd,
    Rnd2Bert,
    Bert2Bert,
    BertShare,
    RobertaShare,
    Gpt,
    Rnd2Gpt,
    Bert2Gpt,
    Roberta2Gpt,
}

pub const ALL_SCHEMES: [InitScheme; 10] = [
    InitScheme::Rnd2Rnd,
    InitScheme::Bert2Rnd,
    InitScheme::Rnd2Bert,
    InitScheme::Bert2Bert,
    InitScheme::BertShare,
    InitScheme::RobertaShare,
    InitScheme::Gpt,
    InitScheme::Rnd2Gpt,
    InitScheme::Bert2Gpt,
    InitScheme::Roberta2Gpt,
];

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InitScheme::Rnd2Rnd => "RND2RND",
            InitScheme::Bert2Rnd => "BERT2RND",
            InitScheme::Rnd2Bert => "RND2BERT",
            InitScheme::Bert2Bert => "BERT2BERT",
            InitScheme::BertShare => "BERTSHARE",
            InitScheme::RobertaShare => "ROBERTASHARE",
            InitScheme::Gpt => "GPT",
            InitScheme::Rnd2Gpt => "RND2GPT",
            InitScheme::Bert2Gpt => "BERT2GPT",
            InitScheme::Roberta2Gpt => "ROBERTA2GPT",
        };
        f.write_str(s)
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RND2RND" => Ok(InitScheme::Rnd2Rnd),
            "BERT2RND" => Ok(InitScheme::Bert2Rnd),
            "RND2BERT" => Ok(InitScheme::Rnd2Bert),
            "BERT2BERT" => Ok(InitScheme::Bert2Bert),
            "BERTSHARE" => Ok(InitScheme::BertShare),
            "ROBERTASHARE" => Ok(InitScheme::RobertaShare),
            "GPT" => Ok(InitScheme::Gpt),
            "RND2GPT" => Ok(InitScheme::Rnd2Gpt),
            "BERT2GPT" => Ok(InitScheme::Bert2Gpt),
            "ROBERTA2GPT" => Ok(InitScheme::Roberta2Gpt),
            other => Err(Error::Scheme(format!("unknown scheme {other:?}"))),
        }
    }
}

/// Where each side of the model draws its initial weights from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchemeShape {
    pub encoder_family: Option<SourceFamily>,
    pub decoder_family: Option<SourceFamily>,
    pub share_encoder_decoder: bool,
    pub decoder_only: bool,
    /// Two embedding tables even under one shared vocabulary.
    pub separate_embeddings: bool,
    /// Input and output vocabularies differ.
    pub dual_vocab: bool,
}

impl InitScheme {
    pub fn shape(self) -> SchemeShape {
        use SourceFamily::{BertLike, GptLike};
        let base = SchemeShape {
            encoder_family: None,
            decoder_family: None,
            share_encoder_decoder: false,
            decoder_only: false,
            separate_embeddings: false,
            dual_vocab: false,
        };
        match self {
            InitScheme::Rnd2Rnd => base,
            InitScheme::Bert2Rnd => SchemeShape {
                encoder_family: Some(BertLike),
                ..base
            },
            InitScheme::Rnd2Bert => SchemeShape {
                decoder_family: Some(BertLike),
                ..base
            },
            InitScheme::Bert2Bert => SchemeShape {
                encoder_family: Some(BertLike),
                decoder_family: Some(BertLike),
                ..base
            },
            InitScheme::BertShare | InitScheme::RobertaShare => SchemeShape {
                encoder_family: Some(BertLike),
                decoder_family: Some(BertLike),
                share_encoder_decoder: true,
                ..base
            },
            InitScheme::Gpt => SchemeShape {
                decoder_family: Some(GptLike),
                decoder_only: true,
                ..base
            },
            InitScheme::Rnd2Gpt => SchemeShape {
                decoder_family: Some(GptLike),
                ..base
            },
            InitScheme::Bert2Gpt => SchemeShape {
                encoder_family: Some(BertLike),
                decoder_family: Some(GptLike),
                separate_embeddings: true,
                dual_vocab: true,
                ..base
            },
            InitScheme::Roberta2Gpt => SchemeShape {
                encoder_family: Some(BertLike),
                decoder_family: Some(GptLike),
                separate_embeddings: true,
                ..base
            },
        }
    }

    /// Adjust a base configuration to this scheme's structure.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let shape = self.shape();
        let mut cfg = base.clone();
        cfg.share_encoder_decoder = shape.share_encoder_decoder;
        cfg.decoder_only = shape.decoder_only;
        cfg.separate_embeddings = shape.separate_embeddings;
        if !shape.dual_vocab {
            // single-vocabulary schemes run entirely on the output vocab
            cfg.input_vocab_size = cfg.output_vocab_size;
        }
        cfg
    }
}

/// Archives referenced by a scheme; the same archive may serve both sides.
#[derive(Default)]
pub struct SchemeArchives<'a> {
    pub encoder: Option<&'a TensorArchive>,
    pub decoder: Option<&'a TensorArchive>,
}

/// Assemble a model under a scheme: allocate with seeded random init,
/// then warm-start each side from its archive.
pub fn build_model(
    base_config: &ModelConfig,
    scheme: InitScheme,
    archives: &SchemeArchives,
    seed: u64,
) -> Result<(Seq2SeqModel, InitReport)> {
    let shape = scheme.shape();
    let cfg = scheme.apply(base_config);
    cfg.validate()?;
    let mut model = Seq2SeqModel::new_random(cfg, seed)?;

    let mut report = InitReport::default();

    let check_family = |have: SourceFamily, want: SourceFamily, side: &str| -> Result<()> {
        if have != want && have != SourceFamily::Native {
            return Err(Error::Scheme(format!(
                "{side} archive family {have:?} cannot serve a {want:?} slot under {scheme}"
            )));
        }
        Ok(())
    };

    if shape.share_encoder_decoder {
        // one archive initializes the single shared stack
        let archive = archives
            .encoder
            .or(archives.decoder)
            .ok_or_else(|| Error::Scheme(format!("{scheme} needs an archive")))?;
        check_family(archive.family, SourceFamily::BertLike, "shared")?;
        report = report.merge(warm_start(&mut model, archive, Side::Both)?);
    } else {
        if let Some(family) = shape.encoder_family {
            let archive = archives
                .encoder
                .ok_or_else(|| Error::Scheme(format!("{scheme} needs an encoder archive")))?;
            check_family(archive.family, family, "encoder")?;
            report = report.merge(warm_start(&mut model, archive, Side::Encoder)?);
        }
        if let Some(family) = shape.decoder_family {
            let archive = archives
                .decoder
                .ok_or_else(|| Error::Scheme(format!("{scheme} needs a decoder archive")))?;
            check_family(archive.family, family, "decoder")?;
            report = report.merge(warm_start(&mut model, archive, Side::Decoder)?);
        }
    }

    let report = report.finish(&model);
    Ok((model, report))
}

/// Table-style parameter accounting for a configuration under a scheme.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub total: usize,
    /// All embedding tensors (tables, layer-norm); part of the breakdown sum.
    pub embedding: usize,
    /// Token-embedding matrices only (the headline "embed." column).
    pub token_embedding: usize,
    pub encoder: usize,
    pub decoder: usize,
    pub cross_attention: usize,
    pub output_head: usize,
    pub warm_started: usize,
    pub random: usize,
}

/// Closed-form accounting over the model's tensor inventory. The warm/random
/// split assumes complete archives of the scheme's families.
pub fn count_params(base_config: &ModelConfig, scheme: InitScheme) -> Result<ParamReport> {
    let shape = scheme.shape();
    let cfg = scheme.apply(base_config);
    cfg.validate()?;

    let mut report = ParamReport {
        total: 0,
        embedding: 0,
        token_embedding: 0,
        encoder: 0,
        decoder: 0,
        cross_attention: 0,
        output_head: 0,
        warm_started: 0,
        random: 0,
    };

    let sides: Vec<(Side, SourceFamily)> = if shape.share_encoder_decoder {
        vec![(Side::Both, SourceFamily::BertLike)]
    } else {
        let mut v = Vec::new();
        if let Some(f) = shape.encoder_family {
            v.push((Side::Encoder, f));
        }
        if let Some(f) = shape.decoder_family {
            v.push((Side::Decoder, f));
        }
        v
    };

    for spec in tensor_inventory(&cfg) {
        let n = spec.numel();
        report.total += n;
        match spec.component {
            Component::Embedding => {
                report.embedding += n;
                if spec.name.ends_with("/word") {
                    report.token_embedding += n;
                }
            }
            Component::Encoder => report.encoder += n,
            Component::Decoder => report.decoder += n,
            Component::CrossAttention => report.cross_attention += n,
            Component::OutputHead => report.output_head += n,
        }
        let warm = sides.iter().any(|(side, family)| {
            archive_source_name(&spec.name, *side, *family)
                .map(|src| family_provides(*family, &src))
                .unwrap_or(false)
        });
        if warm {
            report.warm_started += n;
        } else {
            report.random += n;
        }
    }
    Ok(report)
}

/// Sanity mapping used by tests and the CLI: a report keyed by column name.
pub fn report_columns(report: &ParamReport) -> HashMap<&'static str, usize> {
    HashMap::from([
        ("total", report.total),
        ("embed", report.token_embedding),
        ("init", report.warm_started),
        ("random", report.random),
    ])
}
