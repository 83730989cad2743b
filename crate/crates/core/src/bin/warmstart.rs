//! Command-line harness: data generation, pre-training, fine-tuning,
//! prediction, evaluation, checkpoint surgery and parameter accounting.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use warmstart::archive::{SourceFamily, TensorArchive};
use warmstart::config::Experiment;
use warmstart::convert::{
    convert_foreign, embeddings_only, select_layer_subset, MappingRules,
};
use warmstart::data::{self, Dataset};
use warmstart::decode::{decode_corpus, DecodeParams};
use warmstart::error::{Error, Result};
use warmstart::metrics::{bleu_corpus, exact_match, rouge, sari, RougeVariant};
use warmstart::model::Seq2SeqModel;
use warmstart::scheme::{build_model, count_params, SchemeArchives};
use warmstart::train::{toy_pretrain, train, FreezeSpec};
use warmstart::vocab::{self, Vocabulary};
use warmstart::warmstart::{export_native, warm_start, Side};

#[derive(Parser)]
#[command(name = "warmstart", about = "Warm-started seq2seq transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Fusion,
    Split,
    Copy,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Bert,
    Gpt,
    Native,
}

impl FamilyArg {
    fn family(self) -> SourceFamily {
        match self {
            FamilyArg::Bert => SourceFamily::BertLike,
            FamilyArg::Gpt => SourceFamily::GptLike,
            FamilyArg::Native => SourceFamily::Native,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its vocabulary.
    GenData {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, default_value_t = 512)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train a toy model and export a warm-start archive.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        family: FamilyArg,
        /// Plain-text corpus, one line per example; generated when omitted.
        #[arg(long)]
        text: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune under the configured initialization scheme.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode the sources of a TSV dataset with a trained model.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction file with SARI, BLEU, ROUGE and exact match.
    Evaluate {
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, default_value_t = false)]
        uncased: bool,
    },
    /// Apply mapping rules / layer selection to a checkpoint archive.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Keep only these 1-based layers, comma separated.
        #[arg(long)]
        layers: Option<String>,
        #[arg(long, default_value_t = false)]
        embeddings_only: bool,
        #[arg(long, value_enum)]
        family: Option<FamilyArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the parameter accounting table for the configured scheme.
    CountParams {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_vocab(exp: &Experiment) -> Result<Vocabulary> {
    match &exp.vocab_path {
        Some(p) => Vocabulary::load(p),
        None => default_vocab(),
    }
}

fn default_vocab() -> Result<Vocabulary> {
    let mut tokens: Vec<String> = [vocab::PAD, vocab::UNK, vocab::BOS, vocab::EOS]
        .iter()
        .map(|s| s.to_string())
        .collect();
    tokens.extend(data::toy_wordlist());
    Vocabulary::from_tokens(tokens, false)
}

fn output_vocab(exp: &Experiment, vocab_in: &Vocabulary) -> Result<Vocabulary> {
    match &exp.output_vocab_path {
        Some(p) => Vocabulary::load(p),
        None => Ok(vocab_in.clone()),
    }
}

fn header(exp: &Experiment, seed: u64) -> String {
    format!("# config {:016x} seed {seed}\n", exp.fingerprint())
}

/// Resolve vocab sizes into the model config from the loaded vocabularies.
/// Explicit `model.*_vocab_size` keys win when no vocabulary file is given.
fn sized_experiment(mut exp: Experiment, vin: &Vocabulary, vout: &Vocabulary) -> Experiment {
    if exp.vocab_path.is_some() || exp.train_path.is_some() {
        exp.model.input_vocab_size = vin.len();
        exp.model.output_vocab_size = vout.len();
    }
    exp
}

fn load_archives(exp: &Experiment) -> Result<(Option<TensorArchive>, Option<TensorArchive>)> {
    let enc = exp
        .encoder_archive
        .as_ref()
        .map(|p| TensorArchive::load(p))
        .transpose()?;
    let dec = exp
        .decoder_archive
        .as_ref()
        .map(|p| TensorArchive::load(p))
        .transpose()?;
    Ok((enc, dec))
}

fn build_from_experiment(exp: &Experiment, seed: u64) -> Result<Seq2SeqModel> {
    let (enc, dec) = load_archives(exp)?;
    let archives = SchemeArchives {
        encoder: enc.as_ref(),
        decoder: dec.as_ref(),
    };
    let (model, report) = build_model(&exp.model, exp.scheme, &archives, seed)?;
    eprintln!(
        "scheme {}: {} parameters warm-started, {} random",
        exp.scheme, report.copied_params, report.random_params
    );
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            task,
            count,
            seed,
            out,
        } => {
            std::fs::create_dir_all(&out)?;
            let dataset = match task {
                TaskArg::Fusion => data::generate_fusion(count, seed),
                TaskArg::Split => data::generate_split(count, seed),
                TaskArg::Copy => data::generate_copy(count, seed),
            };
            dataset.save(&out.join("train.tsv"))?;
            let holdout = match task {
                TaskArg::Fusion => data::generate_fusion(count / 4, seed + 1),
                TaskArg::Split => data::generate_split(count / 4, seed + 1),
                TaskArg::Copy => data::generate_copy(count / 4, seed + 1),
            };
            holdout.save(&out.join("test.tsv"))?;
            default_vocab()?.save(&out.join("vocab.txt"))?;
            println!(
                "wrote {} train and {} test pairs to {}",
                dataset.len(),
                holdout.len(),
                out.display()
            );
            Ok(())
        }
        Command::Pretrain {
            config,
            family,
            text,
            out,
            seed,
        } => {
            let exp = Experiment::load(&config)?;
            let seed = seed.unwrap_or(exp.seed);
            let vocab = load_vocab(&exp)?;
            let texts: Vec<String> = match text {
                Some(p) => std::fs::read_to_string(p)?
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| l.to_string())
                    .collect(),
                None => data::generate_text(512, seed),
            };
            let archive = toy_pretrain(
                &exp.model,
                family.family(),
                &vocab,
                &texts,
                &exp.schedule,
                seed,
            )?;
            archive.save(&out)?;
            println!(
                "pre-trained on {} lines; wrote {} tensors to {}",
                texts.len(),
                archive.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train { config, out, seed } => {
            let exp = Experiment::load(&config)?;
            let seed = seed.unwrap_or(exp.seed);
            let vin = load_vocab(&exp)?;
            let vout = output_vocab(&exp, &vin)?;
            let exp = sized_experiment(exp, &vin, &vout);
            let train_path = exp
                .train_path
                .clone()
                .ok_or_else(|| Error::Config("data.train is required".into()))?;
            let dataset = Dataset::load(&train_path)?;
            let dataset = if exp.subsample_fraction < 1.0 {
                data::subsample(&dataset, exp.subsample_fraction, seed)?
            } else {
                dataset
            };
            let mut model = build_from_experiment(&exp, seed)?;
            let freeze = FreezeSpec {
                patterns: exp.freeze.clone(),
                until_step: exp.unfreeze_at_step,
            };
            let log = train(
                &mut model,
                &dataset,
                &vin,
                &vout,
                &exp.schedule,
                &freeze,
                seed,
                |_, _, _| Ok(true),
            )?;
            std::fs::create_dir_all(&out)?;
            export_native(&model).save(&out.join("model.wsck"))?;
            std::fs::write(
                out.join("loss.csv"),
                format!("{}{}", header(&exp, seed), log.to_csv()),
            )?;
            let last = log.losses.last().map(|(_, l)| *l).unwrap_or(f64::NAN);
            println!(
                "trained {} steps on {} examples, final loss {last:.4}",
                log.losses.len(),
                dataset.len()
            );
            Ok(())
        }
        Command::Predict {
            config,
            model,
            input,
            out,
        } => {
            let exp = Experiment::load(&config)?;
            let vin = load_vocab(&exp)?;
            let vout = output_vocab(&exp, &vin)?;
            let exp = sized_experiment(exp, &vin, &vout);
            let dataset = Dataset::load(&input)?;

            let cfg = exp.scheme.apply(&exp.model);
            let mut net = Seq2SeqModel::new_random(cfg, exp.seed)?;
            let archive = TensorArchive::load(&model)?;
            warm_start(&mut net, &archive, Side::Both)?;

            let sources: Vec<Vec<usize>> = dataset
                .pairs
                .iter()
                .map(|p| {
                    let mut ids = vin.tokenize(&p.source);
                    ids.truncate(net.config.max_positions);
                    ids
                })
                .collect();
            let params = DecodeParams {
                beam_size: exp.beam_size,
                alpha: exp.length_penalty_alpha,
                max_output_length: exp.max_output_length.min(net.config.max_positions - 1),
                bos: vout.bos_id,
                eos: vout.eos_id,
            };
            let outputs = decode_corpus(&net, &sources, &params)?;
            let mut text = header(&exp, exp.seed);
            for (pair, ids) in dataset.pairs.iter().zip(&outputs) {
                let prediction = vout.detokenize(ids)?;
                text.push_str(&format!("{}\t{}\t{}\n", pair.source, prediction, pair.target));
            }
            std::fs::write(&out, text)?;
            println!("decoded {} sources to {}", outputs.len(), out.display());
            Ok(())
        }
        Command::Evaluate { eval, uncased } => {
            let text = std::fs::read_to_string(&eval)?;
            let body: String = text
                .lines()
                .filter(|l| !l.starts_with('#'))
                .map(|l| format!("{l}\n"))
                .collect();
            let rows = warmstart::data::parse_eval_file(&body)?;
            let cased = !uncased;
            println!("examples      {}", rows.len());
            println!("SARI          {:.2}", sari(&rows, 4, cased)?.corpus_score);
            println!("BLEU          {:.2}", bleu_corpus(&rows, 4, cased)?.corpus_score);
            for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::L] {
                println!(
                    "{:<13} {:.4}",
                    rouge(&rows, v, cased)?.name,
                    rouge(&rows, v, cased)?.corpus_score
                );
            }
            println!("ExactMatch    {:.4}", exact_match(&rows, cased)?.corpus_score);
            Ok(())
        }
        Command::Convert {
            input,
            rules,
            layers,
            embeddings_only: embeds,
            family,
            out,
        } => {
            let mut archive = TensorArchive::load(&input)?;
            if let Some(rules_path) = rules {
                let rules = MappingRules::load(&rules_path)?;
                let report = convert_foreign(&archive, &rules)?;
                for name in &report.unmatched {
                    eprintln!("unmatched: {name}");
                }
                archive = report.archive;
            }
            if let Some(spec) = layers {
                let picked: Vec<usize> = spec
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| Error::Selection(format!("bad layer index {s:?}")))
                    })
                    .collect::<Result<_>>()?;
                archive = select_layer_subset(&archive, &picked)?;
            }
            if embeds {
                archive = embeddings_only(&archive)?;
            }
            if let Some(f) = family {
                archive.family = f.family();
            }
            archive.save(&out)?;
            println!(
                "wrote {} tensors ({} parameters) to {}",
                archive.len(),
                archive.total_params(),
                out.display()
            );
            Ok(())
        }
        Command::CountParams { config } => {
            let exp = Experiment::load(&config)?;
            let vin = load_vocab(&exp)?;
            let vout = output_vocab(&exp, &vin)?;
            let exp = sized_experiment(exp, &vin, &vout);
            let report = count_params(&exp.model, exp.scheme)?;
            println!("scheme        {}", exp.scheme);
            println!("total         {}", report.total);
            println!("embed.        {}", report.token_embedding);
            println!("init.         {}", report.warm_started);
            println!("random        {}", report.random);
            println!("encoder       {}", report.encoder);
            println!("decoder       {}", report.decoder);
            println!("cross-attn    {}", report.cross_attention);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
