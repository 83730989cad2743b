//! wasm-bindgen bindings for the browser demo. Everything returns plain
//! strings (CSV or line-oriented text) so the page needs no JSON glue.

use wasm_bindgen::prelude::*;

use warmstart::model::ModelConfig;
use warmstart::schedule::TrainSchedule;
use warmstart::scheme::{count_params, InitScheme, ALL_SCHEMES};
use warmstart::vocab::Vocabulary;

/// Parameter accounting for one scheme at the given geometry.
/// Returns `key,value` lines; an `error,...` line on bad input.
#[wasm_bindgen]
pub fn param_table(
    scheme: &str,
    num_layers: usize,
    hidden_size: usize,
    filter_size: usize,
    num_heads: usize,
    vocab_size: usize,
    output_vocab_size: usize,
) -> String {
    let run = || -> warmstart::Result<String> {
        let scheme: InitScheme = scheme.parse()?;
        let cfg = ModelConfig {
            num_layers,
            hidden_size,
            filter_size,
            num_heads,
            input_vocab_size: vocab_size,
            output_vocab_size,
            ..ModelConfig::bert_base()
        };
        let r = count_params(&cfg, scheme)?;
        Ok(format!(
            "total,{}\nembed.,{}\ninit.,{}\nrandom,{}\nencoder,{}\ndecoder,{}\ncross-attn,{}\n",
            r.total,
            r.token_embedding,
            r.warm_started,
            r.random,
            r.encoder,
            r.decoder,
            r.cross_attention
        ))
    };
    run().unwrap_or_else(|e| format!("error,{e}\n"))
}

/// All ten schemes side by side: `scheme,total,embed,init,random` CSV.
#[wasm_bindgen]
pub fn scheme_overview(
    num_layers: usize,
    hidden_size: usize,
    filter_size: usize,
    num_heads: usize,
    vocab_size: usize,
    gpt_vocab_size: usize,
) -> String {
    let mut out = String::from("scheme,total,embed.,init.,random\n");
    for scheme in ALL_SCHEMES {
        let dual = scheme.shape().dual_vocab;
        let cfg = ModelConfig {
            num_layers,
            hidden_size,
            filter_size,
            num_heads,
            input_vocab_size: vocab_size,
            output_vocab_size: if dual { gpt_vocab_size } else { vocab_size },
            ..ModelConfig::bert_base()
        };
        match count_params(&cfg, scheme) {
            Ok(r) => out.push_str(&format!(
                "{scheme},{},{},{},{}\n",
                r.total, r.token_embedding, r.warm_started, r.random
            )),
            Err(e) => out.push_str(&format!("{scheme},error: {e},,,\n")),
        }
    }
    out
}

/// Learning-rate curve samples: `step,lr` CSV with `points` rows.
#[wasm_bindgen]
pub fn lr_curve(
    base_rate: f64,
    warmup_steps: u64,
    hidden_size: usize,
    total_steps: u64,
    points: usize,
) -> String {
    let schedule = TrainSchedule::new(base_rate, warmup_steps, hidden_size, total_steps, 1);
    let mut out = String::from("step,lr\n");
    let points = points.max(2);
    for i in 0..points {
        let step = 1 + i as u64 * (total_steps.saturating_sub(1)) / (points as u64 - 1);
        out.push_str(&format!("{step},{:e}\n", schedule.learning_rate(step)));
    }
    out
}

/// Greedy wordpiece segmentation of `input` against a newline-separated
/// vocabulary, one `token<TAB>id` line per piece.
#[wasm_bindgen]
pub fn tokenize_demo(vocab_text: &str, input: &str) -> String {
    let run = || -> warmstart::Result<String> {
        let vocab = Vocabulary::parse(vocab_text)?;
        let ids = vocab.tokenize(input);
        let mut out = String::new();
        for id in &ids {
            out.push_str(&format!("{}\t{}\n", vocab.token(*id)?, id));
        }
        out.push_str(&format!("round-trip\t{}\n", vocab.detokenize(&ids)?));
        Ok(out)
    };
    run().unwrap_or_else(|e| format!("error\t{e}\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_table_has_rows() {
        let t = param_table("BERT2BERT", 12, 768, 3072, 12, 30522, 30522);
        assert!(t.contains("total,"), "{t}");
        assert!(!t.contains("error"), "{t}");
    }

    #[test]
    fn bad_scheme_reports_error() {
        assert!(param_table("NOPE", 2, 8, 32, 2, 16, 16).starts_with("error,"));
    }

    #[test]
    fn overview_lists_all_schemes() {
        let t = scheme_overview(12, 768, 3072, 12, 30522, 50257);
        assert_eq!(t.lines().count(), 11);
    }

    #[test]
    fn lr_curve_is_csv() {
        let t = lr_curve(0.05, 40, 8, 400, 10);
        assert_eq!(t.lines().count(), 11);
        assert!(t.starts_with("step,lr"));
    }

    #[test]
    fn tokenizer_round_trips() {
        let vocab = "[PAD]\n[UNK]\n[BOS]\n[EOS]\nplay\n##ing\n";
        let t = tokenize_demo(vocab, "playing");
        assert!(t.contains("play\t4"));
        assert!(t.contains("##ing\t5"));
        assert!(t.contains("round-trip\tplaying"));
    }
}
