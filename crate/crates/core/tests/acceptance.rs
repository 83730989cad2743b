//! Acceptance gate: one test per criterion, each printing a PASS line with
//! the tolerance it was held to. Run with `--nocapture` to see them.

use std::collections::BTreeMap;
use std::process::Command;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use warmstart::archive::{ArchiveEntry, SourceFamily, TensorArchive};
use warmstart::convert::{convert_foreign, MappingRules, Rule};
use warmstart::data::{
    generate_fusion, generate_text, subsample, toy_wordlist, Dataset, EvalExample,
};
use warmstart::decode::{beam_decode, greedy_decode, length_penalty, DecodeParams};
use warmstart::metrics::{bleu_corpus, exact_match, rouge, sari, RougeVariant};
use warmstart::model::{lm_loss, LossItem, ModelConfig, Seq2SeqModel};
use warmstart::schedule::TrainSchedule;
use warmstart::scheme::{build_model, count_params, InitScheme, SchemeArchives, ALL_SCHEMES};
use warmstart::train::{toy_pretrain, train, FreezeSpec};
use warmstart::vocab::{Vocabulary, BOS, EOS, PAD, UNK};
use warmstart::warmstart::{export_bert_like, export_gpt_like};

fn toy_vocab() -> Vocabulary {
    let mut tokens: Vec<String> = [PAD, UNK, BOS, EOS].iter().map(|s| s.to_string()).collect();
    tokens.extend(toy_wordlist());
    Vocabulary::from_tokens(tokens, false).unwrap()
}

fn within(actual: f64, expected: f64, rel: f64) -> bool {
    (actual - expected).abs() / expected.abs() <= rel
}

#[test]
fn criterion_01_parameter_accounting() {
    let base = ModelConfig::bert_base();

    let rnd = count_params(&base, InitScheme::Rnd2Rnd).unwrap();
    assert!(within(rnd.total as f64, 221e6, 0.03), "RND2RND total {}", rnd.total);
    assert!(
        within(rnd.token_embedding as f64, 23e6, 0.03),
        "embedding column {}",
        rnd.token_embedding
    );

    let share = count_params(&base, InitScheme::BertShare).unwrap();
    assert!(within(share.total as f64, 136e6, 0.03), "BERTSHARE total {}", share.total);
    assert!(
        within(share.cross_attention as f64, 26e6, 0.10),
        "cross-attention {}",
        share.cross_attention
    );

    let mut gpt_cfg = base.clone();
    gpt_cfg.input_vocab_size = 50257;
    gpt_cfg.output_vocab_size = 50257;
    let gpt = count_params(&gpt_cfg, InitScheme::Gpt).unwrap();
    assert!(within(gpt.total as f64, 125e6, 0.03), "GPT total {}", gpt.total);
    assert!(
        within(gpt.token_embedding as f64, 39e6, 0.03),
        "GPT embedding column {}",
        gpt.token_embedding
    );
    println!(
        "PASS criterion 1: accounting vs published table \
         (221M/136M/125M ±3%, embeddings ±3%, cross-attn ±10%)"
    );
}

#[test]
fn criterion_02_enumeration_oracle() {
    // donor archives must match each case's geometry, so build them per case
    let bert_for = |cfg: &ModelConfig, vocab: usize, seed: u64| -> TensorArchive {
        let mut donor = cfg.clone();
        donor.decoder_only = false;
        donor.share_encoder_decoder = false;
        donor.separate_embeddings = false;
        donor.input_vocab_size = vocab;
        donor.output_vocab_size = vocab;
        export_bert_like(&Seq2SeqModel::new_random(donor, seed).unwrap()).unwrap()
    };
    let gpt_for = |cfg: &ModelConfig, vocab: usize, seed: u64| -> TensorArchive {
        let mut donor = cfg.clone();
        donor.decoder_only = true;
        donor.share_encoder_decoder = false;
        donor.separate_embeddings = false;
        donor.input_vocab_size = vocab;
        donor.output_vocab_size = vocab;
        export_gpt_like(&Seq2SeqModel::new_random(donor, seed).unwrap()).unwrap()
    };

    let mut wide = ModelConfig::toy(16);
    wide.num_layers = 3;
    wide.hidden_size = 12;
    wide.filter_size = 48;
    wide.num_heads = 3;
    let mut untied = ModelConfig::toy(16);
    untied.tie_output_to_embedding = false;
    let mut dual = ModelConfig::toy(16);
    dual.output_vocab_size = 24;

    let cases: Vec<(&str, ModelConfig, InitScheme)> = vec![
        ("plain", ModelConfig::toy(16), InitScheme::Rnd2Rnd),
        ("wide", wide, InitScheme::Bert2Rnd),
        ("untied", untied, InitScheme::Rnd2Bert),
        ("shared", ModelConfig::toy(16), InitScheme::BertShare),
        ("decoder-only", ModelConfig::toy(16), InitScheme::Gpt),
        ("dual-vocab", dual, InitScheme::Bert2Gpt),
        ("rnd2gpt", ModelConfig::toy(16), InitScheme::Rnd2Gpt),
    ];

    for (label, cfg, scheme) in cases {
        let predicted = count_params(&cfg, scheme).unwrap();
        let enc = bert_for(&cfg, cfg.input_vocab_size, 70);
        let dec = if scheme.shape().decoder_family == Some(SourceFamily::GptLike) {
            gpt_for(&cfg, cfg.output_vocab_size, 71)
        } else {
            bert_for(&cfg, cfg.output_vocab_size, 72)
        };
        let (model, report) = build_model(
            &cfg,
            scheme,
            &SchemeArchives {
                encoder: Some(&enc),
                decoder: Some(&dec),
            },
            5,
        )
        .unwrap();
        // the oracle: walk the allocated tensors and add them up
        let allocated: usize = model.params_iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(predicted.total, allocated, "total mismatch for {label}");
        assert_eq!(
            predicted.warm_started, report.copied_params,
            "warm mismatch for {label}"
        );
        assert_eq!(predicted.random, report.random_params, "random mismatch for {label}");
        assert_eq!(
            predicted.total,
            predicted.warm_started + predicted.random,
            "partition mismatch for {label}"
        );
    }
    println!("PASS criterion 2: count_params equals allocation oracle exactly on 7 configs");
}

#[test]
fn criterion_03_gradient_audit() {
    let mut cfg = ModelConfig::toy(12);
    cfg.hidden_size = 16;
    cfg.filter_size = 32;
    cfg.num_heads = 4;
    cfg.max_positions = 8;
    let donor = Seq2SeqModel::new_random(cfg.clone(), 33).unwrap();
    let archive = export_bert_like(&donor).unwrap();
    let (mut model, _) = build_model(
        &cfg,
        InitScheme::Bert2Bert,
        &SchemeArchives {
            encoder: Some(&archive),
            decoder: Some(&archive),
        },
        44,
    )
    .unwrap();

    let items = vec![LossItem::teacher_forced(&[4, 5, 6], &[7, 8, 9], 2, 3)];
    let (fp, loss_node) = lm_loss(&model, &items, None).unwrap();
    let grads = fp.graph.backward(loss_node).unwrap();
    let analytic: BTreeMap<String, Vec<f64>> = model
        .params_iter()
        .map(|(name, t)| {
            let g = fp
                .param_nodes
                .get(name)
                .and_then(|id| grads.get(*id))
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            (name.to_string(), g)
        })
        .collect();

    let names: Vec<String> = model.param_names().map(|s| s.to_string()).collect();
    let h = 1e-5;
    let mut checked = 0usize;
    for name in names {
        let n = model.param(&name).unwrap().numel();
        for e in 0..n {
            let orig = model.param(&name).unwrap().data()[e];
            model.param_mut(&name).unwrap().data_mut()[e] = orig + h;
            let (fpp, lp) = lm_loss(&model, &items, None).unwrap();
            let plus = fpp.graph.value(lp).data()[0];
            model.param_mut(&name).unwrap().data_mut()[e] = orig - h;
            let (fpm, lm) = lm_loss(&model, &items, None).unwrap();
            let minus = fpm.graph.value(lm).data()[0];
            model.param_mut(&name).unwrap().data_mut()[e] = orig;

            let fd = (plus - minus) / (2.0 * h);
            let a = analytic[&name][e];
            let denom = a.abs().max(fd.abs()).max(1e-4);
            assert!(
                (a - fd).abs() / denom < 1e-3,
                "{name}[{e}]: analytic {a} vs finite-difference {fd}"
            );
            checked += 1;
        }
    }
    println!(
        "PASS criterion 3: {checked} parameters pass finite-difference audit at rel 1e-3"
    );
}

#[test]
fn criterion_04_causality_and_masking() {
    let model = Seq2SeqModel::new_random(ModelConfig::toy(16), 99).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let source = vec![4usize, 5, 6, 7];

    // causality: edits strictly after position t leave logits at <= t bitwise
    for _ in 0..5000 {
        let len = rng.gen_range(2..=8usize);
        let t = rng.gen_range(0..len - 1);
        let prefix: Vec<usize> = (0..len).map(|_| rng.gen_range(4..16)).collect();
        let mut edited = prefix.clone();
        for item in edited.iter_mut().skip(t + 1) {
            *item = rng.gen_range(4..16);
        }
        let a = model.logits_for_prefix(&source, &prefix).unwrap();
        let b = model.logits_for_prefix(&source, &edited).unwrap();
        for row in 0..=t {
            for col in 0..16 {
                let (x, y) = (a.at2(row, col), b.at2(row, col));
                assert!(
                    x.to_bits() == y.to_bits(),
                    "causality leak at row {row} col {col}: {x} vs {y}"
                );
            }
        }
    }

    // padding: values at masked source positions never reach the encoder
    // outputs at kept positions (a pad position's own row still sees its
    // embedding through the residual path, so only kept rows are compared)
    for _ in 0..5000 {
        let len = rng.gen_range(2..=8usize);
        let mut mask: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.7)).collect();
        if !mask.iter().any(|&b| b) {
            mask[0] = true;
        }
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(4..16)).collect();
        let mut edited = ids.clone();
        for (i, keep) in mask.iter().enumerate() {
            if !keep {
                edited[i] = rng.gen_range(0..16);
            }
        }
        let run = |ids: &[usize]| {
            let mut fp = model.begin_forward(None);
            let out = model.encoder_forward(&mut fp, ids, &mask).unwrap();
            fp.graph.value(out).clone()
        };
        let a = run(&ids);
        let b = run(&edited);
        let h = a.shape()[1];
        for (row, keep) in mask.iter().enumerate() {
            if !keep {
                continue;
            }
            for col in 0..h {
                let (x, y) = (a.at2(row, col), b.at2(row, col));
                assert!(
                    x.to_bits() == y.to_bits(),
                    "pad leak into row {row} col {col}: {x} vs {y}"
                );
            }
        }
    }
    println!("PASS criterion 4: 10000 trials, causality and pad invariance bitwise");
}

#[test]
fn criterion_05_checkpoint_surgery() {
    let mut rng = ChaCha8Rng::seed_from_u64(555);
    for trial in 0..100 {
        let d = rng.gen_range(2..6usize) * 3;
        let e = rng.gen_range(2..7usize);
        let v = rng.gen_range(4..10usize);
        let mut rand_entry = |name: &str, shape: Vec<usize>| {
            let numel = shape.iter().product();
            let data: Vec<f32> = (0..numel).map(|_| rng.gen_range(-2.0..2.0)).collect();
            ArchiveEntry::new(name, shape, data).unwrap()
        };
        let mut archive = TensorArchive::new(SourceFamily::Native);
        archive.push(rand_entry("embed/tok", vec![v, d])).unwrap();
        archive.push(rand_entry("enc/att/qkv", vec![3 * d, d])).unwrap();
        archive.push(rand_entry("enc/out", vec![d, e])).unwrap();

        // byte-exact round trip
        let bytes = archive.to_bytes();
        let reread = TensorArchive::from_bytes(&bytes).unwrap();
        assert_eq!(reread, archive, "round trip failed on trial {trial}");

        // qkv split followed by merge is the identity
        let split_merge = MappingRules {
            rules: vec![
                Rule::Split3 {
                    name: "enc/att/qkv".into(),
                    axis: 0,
                },
                Rule::Merge3 {
                    base: "enc/att/qkv".into(),
                    axis: 0,
                },
            ],
        };
        let back = convert_foreign(&archive, &split_merge).unwrap().archive;
        assert_eq!(back.to_bytes(), bytes, "split/merge not a bijection on trial {trial}");

        // rename + transpose composed with its inverse is the identity
        let forward = MappingRules::parse(
            "skip embed/*\nrename enc/* dec/*\ntranspose dec/out\n",
        )
        .unwrap();
        let inverse = MappingRules::parse(
            "skip embed/*\ntranspose dec/out\nrename dec/* enc/*\n",
        )
        .unwrap();
        let once = convert_foreign(&archive, &forward).unwrap().archive;
        let twice = convert_foreign(&once, &inverse).unwrap().archive;
        assert_eq!(twice.to_bytes(), bytes, "rename/transpose inverse failed on trial {trial}");
    }
    println!("PASS criterion 5: surgery bijections and byte round trips on 100 random archives");
}

#[test]
fn criterion_06_scheme_correctness() {
    let cfg = ModelConfig::toy(16);
    let bert = export_bert_like(&Seq2SeqModel::new_random(cfg.clone(), 80).unwrap()).unwrap();
    let mut dec_cfg = cfg.clone();
    dec_cfg.decoder_only = true;
    let gpt = export_gpt_like(&Seq2SeqModel::new_random(dec_cfg, 81).unwrap()).unwrap();

    for scheme in ALL_SCHEMES {
        let wants_gpt = scheme.shape().decoder_family == Some(SourceFamily::GptLike);
        let archives = SchemeArchives {
            encoder: Some(&bert),
            decoder: Some(if wants_gpt { &gpt } else { &bert }),
        };
        let (_, report) = build_model(&cfg, scheme, &archives, 6).unwrap();
        let predicted = count_params(&cfg, scheme).unwrap();
        assert_eq!(report.copied_params, predicted.warm_started, "{scheme} warm");
        assert_eq!(report.random_params, predicted.random, "{scheme} random");
    }

    // shared-stack aliasing: the decoder has no self/ffn storage of its own,
    // and one optimizer step moves the single shared tensor both views read
    let vocab = toy_vocab();
    let mut cfg16 = cfg.clone();
    cfg16.input_vocab_size = vocab.len();
    cfg16.output_vocab_size = vocab.len();
    let bert_v = export_bert_like(&Seq2SeqModel::new_random(cfg16.clone(), 82).unwrap()).unwrap();
    let (mut shared, _) = build_model(
        &cfg16,
        InitScheme::BertShare,
        &SchemeArchives {
            encoder: Some(&bert_v),
            decoder: Some(&bert_v),
        },
        6,
    )
    .unwrap();
    assert!(shared.param("decoder/layer_0/self/q_w").is_none());
    let before = shared.param("encoder/layer_0/self/q_w").unwrap().clone();
    let dataset = generate_fusion(8, 60);
    let one_step = TrainSchedule::new(0.05, 10, cfg16.hidden_size, 1, 4);
    train(
        &mut shared,
        &dataset,
        &vocab,
        &vocab,
        &one_step,
        &FreezeSpec::default(),
        1,
        |_, _, _| Ok(true),
    )
    .unwrap();
    let after = shared.param("encoder/layer_0/self/q_w").unwrap().clone();
    assert_ne!(after, before, "shared tensor did not move under one Adam step");
    // both exported views of the shared stack carry the identical values
    let enc_view = export_bert_like(&shared).unwrap();
    let dec_view = export_gpt_like(&shared).unwrap();
    assert_eq!(
        enc_view.get("encoder/layer_0/self/q_w").unwrap().data,
        dec_view.get("decoder/layer_0/self/q_w").unwrap().data,
        "encoder and decoder views diverged"
    );
    println!("PASS criterion 6: all 10 schemes partition-exact; shared aliasing under Adam");
}

/// Decode an eval set greedily and compute (exact match, SARI).
fn decode_scores(model: &Seq2SeqModel, vocab: &Vocabulary, eval: &Dataset) -> (f64, f64) {
    let params = DecodeParams {
        beam_size: 1,
        alpha: 0.6,
        max_output_length: 10,
        bos: vocab.bos_id,
        eos: vocab.eos_id,
    };
    let rows: Vec<EvalExample> = eval
        .pairs
        .iter()
        .map(|p| {
            let src = vocab.tokenize(&p.source);
            let out = greedy_decode(model, &src, &params).unwrap();
            EvalExample {
                source: p.source.clone(),
                prediction: vocab.detokenize(&out).unwrap(),
                references: vec![p.target.clone()],
            }
        })
        .collect();
    (
        exact_match(&rows, true).unwrap().corpus_score,
        sari(&rows, 4, true).unwrap().corpus_score,
    )
}

#[test]
fn criterion_07_warm_start_benefit() {
    let vocab = toy_vocab();
    let cfg = ModelConfig {
        num_layers: 2,
        hidden_size: 32,
        filter_size: 128,
        num_heads: 4,
        input_vocab_size: vocab.len(),
        output_vocab_size: vocab.len(),
        max_positions: 16,
        share_encoder_decoder: false,
        tie_output_to_embedding: true,
        decoder_only: false,
        separate_embeddings: false,
        dropout: 0.0,
    };
    let pre_sched = TrainSchedule::new(0.15, 40, cfg.hidden_size, 300, 8);
    let texts = generate_text(256, 900);
    let archive =
        toy_pretrain(&cfg, SourceFamily::BertLike, &vocab, &texts, &pre_sched, 900).unwrap();

    let train_set = generate_fusion(64, 901);
    let eval_set = generate_fusion(32, 902);
    let fine_sched = TrainSchedule::new(0.15, 40, cfg.hidden_size, 600, 8);

    let steps_to_target = |scheme: InitScheme, seed: u64| -> usize {
        let archives = SchemeArchives {
            encoder: if scheme == InitScheme::Bert2Rnd {
                Some(&archive)
            } else {
                None
            },
            decoder: None,
        };
        let (mut model, _) = build_model(&cfg, scheme, &archives, seed).unwrap();
        let mut reached = fine_sched.total_steps as usize + 1;
        train(
            &mut model,
            &train_set,
            &vocab,
            &vocab,
            &fine_sched,
            &FreezeSpec::default(),
            seed,
            |step, m, _| {
                if step % 10 == 0 {
                    let (em, _) = decode_scores(m, &vocab, &eval_set);
                    if em >= 0.8 {
                        reached = step;
                        return Ok(false);
                    }
                }
                Ok(true)
            },
        )
        .unwrap();
        reached
    };

    let median = |mut v: Vec<usize>| -> usize {
        v.sort_unstable();
        v[v.len() / 2]
    };
    let warm: Vec<usize> = [1, 2, 3]
        .iter()
        .map(|&s| steps_to_target(InitScheme::Bert2Rnd, s))
        .collect();
    let rand: Vec<usize> = [1, 2, 3]
        .iter()
        .map(|&s| steps_to_target(InitScheme::Rnd2Rnd, s))
        .collect();
    let (mw, mr) = (median(warm.clone()), median(rand.clone()));
    assert!(
        mw < mr,
        "warm-start not faster: warm {warm:?} (median {mw}) vs random {rand:?} (median {mr})"
    );

    // 10% of the data: the warm model rewrites better after a short budget
    let small = subsample(&generate_fusion(320, 905), 0.10, 7).unwrap();
    let short = TrainSchedule::new(0.15, 40, cfg.hidden_size, 60, 8);
    let sari_for = |scheme: InitScheme| -> f64 {
        let archives = SchemeArchives {
            encoder: if scheme == InitScheme::Bert2Rnd {
                Some(&archive)
            } else {
                None
            },
            decoder: None,
        };
        let (mut model, _) = build_model(&cfg, scheme, &archives, 5).unwrap();
        train(
            &mut model,
            &small,
            &vocab,
            &vocab,
            &short,
            &FreezeSpec::default(),
            5,
            |_, _, _| Ok(true),
        )
        .unwrap();
        decode_scores(&model, &vocab, &eval_set).1
    };
    let warm_sari = sari_for(InitScheme::Bert2Rnd);
    let rand_sari = sari_for(InitScheme::Rnd2Rnd);
    assert!(
        warm_sari > rand_sari,
        "10% subsample: warm SARI {warm_sari:.2} not above random {rand_sari:.2}"
    );
    println!(
        "PASS criterion 7: 80% exact match at median step {mw} warm vs {mr} random; \
         10% subsample SARI {warm_sari:.1} > {rand_sari:.1}"
    );
}

/// Brute-force best hypothesis by full enumeration.
fn exhaustive_best(
    model: &Seq2SeqModel,
    source: &[usize],
    params: &DecodeParams,
    vocab: usize,
) -> Vec<usize> {
    fn log_probs(model: &Seq2SeqModel, source: &[usize], prefix: &[usize]) -> Vec<f64> {
        let logits = model.logits_for_prefix(source, prefix).unwrap();
        let row = logits.shape()[0] - 1;
        let vals: Vec<f64> = (0..logits.shape()[1]).map(|j| logits.at2(row, j)).collect();
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        vals.iter().map(|v| v - lse).collect()
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut stack: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((ids, logp)) = stack.pop() {
        let done = ids.last() == Some(&params.eos) || ids.len() == params.max_output_length;
        if done {
            let score = logp / length_penalty(ids.len(), params.alpha);
            let replace = match &best {
                None => true,
                Some((s, b)) => score > *s || (score == *s && ids < *b),
            };
            if replace {
                best = Some((score, ids));
            }
            continue;
        }
        let mut prefix = vec![params.bos];
        prefix.extend_from_slice(&ids);
        let lp = log_probs(model, source, &prefix);
        for id in 0..vocab {
            let mut next = ids.clone();
            next.push(id);
            stack.push((next, logp + lp[id]));
        }
    }
    let ids = best.unwrap().1;
    let cut = ids.iter().position(|&i| i == params.eos).unwrap_or(ids.len());
    ids[..cut].to_vec()
}

#[test]
fn criterion_08_decoding() {
    // beam=1 equals greedy on 500 random sources
    let model = Seq2SeqModel::new_random(ModelConfig::toy(16), 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let params = DecodeParams {
        beam_size: 1,
        alpha: 0.6,
        max_output_length: 6,
        bos: 2,
        eos: 3,
    };
    for trial in 0..500 {
        let len = rng.gen_range(1..=6usize);
        let source: Vec<usize> = (0..len).map(|_| rng.gen_range(4..16)).collect();
        assert_eq!(
            greedy_decode(&model, &source, &params).unwrap(),
            beam_decode(&model, &source, &params).unwrap(),
            "trial {trial}"
        );
    }

    // beam=4 on a 3-token vocabulary, length cap 4, matches exhaustive search
    let mut tiny_cfg = ModelConfig::toy(3);
    tiny_cfg.num_heads = 2;
    let tiny = Seq2SeqModel::new_random(tiny_cfg, 23).unwrap();
    let tiny_params = DecodeParams {
        beam_size: 4,
        alpha: 0.6,
        max_output_length: 4,
        bos: 1,
        eos: 2,
    };
    for source in [vec![0], vec![0, 1], vec![2, 0], vec![1, 1, 0]] {
        assert_eq!(
            beam_decode(&tiny, &source, &tiny_params).unwrap(),
            exhaustive_best(&tiny, &source, &tiny_params, 3),
            "beam-4 mismatch on source {source:?}"
        );
    }

    // alpha = 0 ranks purely by raw log-probability
    let zero_params = DecodeParams {
        beam_size: 30, // above the widest frontier for V=3, length 4
        alpha: 0.0,
        ..tiny_params
    };
    for source in [vec![0], vec![1, 2], vec![0, 0, 1]] {
        assert_eq!(
            beam_decode(&tiny, &source, &zero_params).unwrap(),
            exhaustive_best(&tiny, &source, &zero_params, 3),
            "alpha=0 mismatch on source {source:?}"
        );
    }
    println!("PASS criterion 8: beam1==greedy x500; beam4 and alpha=0 match enumeration");
}

// ---- independent metric oracles (naive, BTreeMap-based) ----

fn oracle_tokens(s: &str) -> Vec<String> {
    s.chars()
        .map(|c| match c {
            '\u{2018}' | '\u{2019}' => '\'',
            '\u{201c}' | '\u{201d}' => '"',
            c => c,
        })
        .collect::<String>()
        .split_whitespace()
        .map(|w| w.to_string())
        .collect()
}

fn oracle_grams(t: &[String], n: usize) -> BTreeMap<String, i64> {
    let mut m = BTreeMap::new();
    if t.len() >= n {
        for i in 0..=t.len() - n {
            *m.entry(t[i..i + n].join("\u{1}")).or_insert(0) += 1;
        }
    }
    m
}

fn oracle_min(a: &BTreeMap<String, i64>, b: &BTreeMap<String, i64>) -> i64 {
    a.iter()
        .map(|(k, &v)| v.min(*b.get(k).unwrap_or(&0)))
        .filter(|&v| v > 0)
        .sum()
}

fn oracle_diff(a: &BTreeMap<String, i64>, b: &BTreeMap<String, i64>) -> BTreeMap<String, i64> {
    let mut out = BTreeMap::new();
    for (k, &v) in a {
        let d = v - b.get(k).copied().unwrap_or(0);
        if d > 0 {
            out.insert(k.clone(), d);
        }
    }
    out
}

fn oracle_isect(a: &BTreeMap<String, i64>, b: &BTreeMap<String, i64>) -> BTreeMap<String, i64> {
    let mut out = BTreeMap::new();
    for (k, &v) in a {
        let m = v.min(b.get(k).copied().unwrap_or(0));
        if m > 0 {
            out.insert(k.clone(), m);
        }
    }
    out
}

fn oracle_total(a: &BTreeMap<String, i64>) -> i64 {
    a.values().sum()
}

fn oracle_f1(tp: i64, pred: i64, tgt: i64) -> f64 {
    if pred == 0 || tgt == 0 {
        return if pred == 0 && tgt == 0 { 1.0 } else { 0.0 };
    }
    let p = tp as f64 / pred as f64;
    let r = tp as f64 / tgt as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn oracle_sari(rows: &[EvalExample]) -> f64 {
    let mut sum = 0.0;
    for row in rows {
        let src = oracle_tokens(&row.source);
        let pred = oracle_tokens(&row.prediction);
        let refs: Vec<Vec<String>> = row.references.iter().map(|r| oracle_tokens(r)).collect();
        let mut ex = 0.0;
        for n in 1..=4 {
            let i = oracle_grams(&src, n);
            let o = oracle_grams(&pred, n);
            let mut r = BTreeMap::new();
            for rr in &refs {
                for (k, &v) in &oracle_grams(rr, n) {
                    let e = r.entry(k.clone()).or_insert(0);
                    *e = (*e).max(v);
                }
            }
            let keep_p = oracle_isect(&i, &o);
            let keep_t = oracle_isect(&i, &r);
            let keep = oracle_f1(
                oracle_min(&keep_p, &keep_t),
                oracle_total(&keep_p),
                oracle_total(&keep_t),
            );
            let add_p = oracle_diff(&o, &i);
            let add_t = oracle_diff(&r, &i);
            let add = oracle_f1(
                oracle_min(&add_p, &add_t),
                oracle_total(&add_p),
                oracle_total(&add_t),
            );
            let del_p = oracle_diff(&i, &o);
            let del_t = oracle_diff(&i, &r);
            let del = if oracle_total(&del_p) == 0 {
                if oracle_total(&del_t) == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                oracle_min(&del_p, &del_t) as f64 / oracle_total(&del_p) as f64
            };
            ex += (keep + add + del) / 3.0;
        }
        sum += 100.0 * ex / 4.0;
    }
    sum / rows.len() as f64
}

fn oracle_bleu(rows: &[EvalExample]) -> f64 {
    let mut matched = [0i64; 4];
    let mut attempted = [0i64; 4];
    let mut c_len = 0i64;
    let mut r_len = 0i64;
    for row in rows {
        let pred = oracle_tokens(&row.prediction);
        let refs: Vec<Vec<String>> = row.references.iter().map(|r| oracle_tokens(r)).collect();
        c_len += pred.len() as i64;
        let mut best = i64::MAX;
        let mut best_diff = i64::MAX;
        for r in &refs {
            let diff = (r.len() as i64 - pred.len() as i64).abs();
            if diff < best_diff || (diff == best_diff && (r.len() as i64) < best) {
                best_diff = diff;
                best = r.len() as i64;
            }
        }
        r_len += best;
        for n in 1..=4 {
            let p = oracle_grams(&pred, n);
            let mut clip = BTreeMap::new();
            for r in &refs {
                for (k, &v) in &oracle_grams(r, n) {
                    let e = clip.entry(k.clone()).or_insert(0);
                    *e = (*e).max(v);
                }
            }
            matched[n - 1] += oracle_min(&p, &clip);
            attempted[n - 1] += oracle_total(&p);
        }
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..4 {
        if attempted[n] == 0 {
            continue;
        }
        if matched[n] == 0 {
            return 0.0;
        }
        orders += 1;
        log_sum += (matched[n] as f64 / attempted[n] as f64).ln();
    }
    if orders == 0 {
        return 0.0;
    }
    let bp = if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    100.0 * bp * (log_sum / orders as f64).exp()
}

fn oracle_lcs(a: &[String], b: &[String]) -> usize {
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 0..a.len() {
        for j in 0..b.len() {
            table[i + 1][j + 1] = if a[i] == b[j] {
                table[i][j] + 1
            } else {
                table[i][j + 1].max(table[i + 1][j])
            };
        }
    }
    table[a.len()][b.len()]
}

fn oracle_rouge(rows: &[EvalExample], variant: RougeVariant) -> f64 {
    let mut sum = 0.0;
    for row in rows {
        let pred = oracle_tokens(&row.prediction);
        let mut best = 0.0f64;
        for r in &row.references {
            let reference = oracle_tokens(r);
            let (tp, pt, rt) = match variant {
                RougeVariant::One | RougeVariant::Two => {
                    let n = if variant == RougeVariant::One { 1 } else { 2 };
                    let p = oracle_grams(&pred, n);
                    let q = oracle_grams(&reference, n);
                    (oracle_min(&p, &q), oracle_total(&p), oracle_total(&q))
                }
                RougeVariant::L => (
                    oracle_lcs(&pred, &reference) as i64,
                    pred.len() as i64,
                    reference.len() as i64,
                ),
            };
            let f1 = if pt == 0 || rt == 0 || tp == 0 {
                0.0
            } else {
                let p = tp as f64 / pt as f64;
                let r = tp as f64 / rt as f64;
                2.0 * p * r / (p + r)
            };
            best = best.max(f1);
        }
        sum += best;
    }
    sum / rows.len() as f64
}

fn metric_fixture() -> Vec<EvalExample> {
    let raw: [(&str, &str, &[&str]); 20] = [
        ("the cat sat on the mat", "the cat sat", &["the cat sat"]),
        ("a b c d", "a b c d", &["a b c d"]),
        ("he said hello to her", "he said hi", &["he said hi", "he greeted her"]),
        ("one two three", "one three", &["one three"]),
        ("x y z", "", &["x y"]),
        ("the the the cat", "the the cat", &["the cat"]),
        ("quick brown fox jumps", "quick fox jumps high", &["quick fox leaps"]),
        ("alpha beta gamma delta", "alpha gamma", &["alpha gamma", "alpha beta"]),
        ("i like green apples", "i like apples", &["i like apples a lot"]),
        ("to be or not to be", "to be", &["to be or not"]),
        ("sentence with many many words", "sentence with words", &["sentence with words"]),
        ("short", "short", &["short"]),
        ("remove some words here", "remove words", &["remove here"]),
        ("keep everything the same", "keep everything the same", &["keep everything the same"]),
        ("swap word order here", "order word swap here", &["swap order here"]),
        ("add new tokens", "add brand new tokens", &["add brand new tokens"]),
        ("u v w x y", "u w y", &["u w y", "u v y"]),
        ("p q", "p q r s", &["p q"]),
        ("m n o", "m o n", &["m n o"]),
        ("final row of fixture", "final row fixture", &["final row of fixture", "last row"]),
    ];
    raw.iter()
        .map(|(s, p, r)| EvalExample {
            source: s.to_string(),
            prediction: p.to_string(),
            references: r.iter().map(|x| x.to_string()).collect(),
        })
        .collect()
}

#[test]
fn criterion_09_metrics_vs_oracles() {
    let rows = metric_fixture();
    assert!(
        (sari(&rows, 4, true).unwrap().corpus_score - oracle_sari(&rows)).abs() < 1e-9,
        "SARI diverged from oracle"
    );
    assert!(
        (bleu_corpus(&rows, 4, true).unwrap().corpus_score - oracle_bleu(&rows)).abs() < 1e-9,
        "BLEU diverged from oracle"
    );
    for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::L] {
        assert!(
            (rouge(&rows, v, true).unwrap().corpus_score - oracle_rouge(&rows, v)).abs() < 1e-9,
            "{v:?} diverged from oracle"
        );
    }
    let oracle_em = rows
        .iter()
        .filter(|r| r.references.iter().any(|x| oracle_tokens(x) == oracle_tokens(&r.prediction)))
        .count() as f64
        / rows.len() as f64;
    assert!((exact_match(&rows, true).unwrap().corpus_score - oracle_em).abs() < 1e-9);

    // spot values
    let identity = vec![EvalExample {
        source: "s".into(),
        prediction: "a b c d e".into(),
        references: vec!["a b c d e".into()],
    }];
    assert!((bleu_corpus(&identity, 4, true).unwrap().corpus_score - 100.0).abs() < 1e-9);
    let cat = vec![EvalExample {
        source: "s".into(),
        prediction: "the cat".into(),
        references: vec!["the cat sat".into()],
    }];
    assert!((rouge(&cat, RougeVariant::One, true).unwrap().corpus_score - 0.8).abs() < 1e-9);
    println!("PASS criterion 9: metrics equal independent oracles to 1e-9 on 20-example fixture");
}

#[test]
fn criterion_10_freeze_then_finetune() {
    let vocab = toy_vocab();
    let mut cfg = ModelConfig::toy(vocab.len());
    cfg.hidden_size = 16;
    cfg.filter_size = 32;
    let mut model = Seq2SeqModel::new_random(cfg.clone(), 40).unwrap();
    let init_q = model.param("encoder/layer_0/self/q_w").unwrap().clone();
    let init_emb = model.param("embed/word").unwrap().clone();

    let dataset = generate_fusion(24, 41);
    let schedule = TrainSchedule::new(0.05, 20, cfg.hidden_size, 110, 4);
    let freeze = FreezeSpec {
        patterns: vec!["encoder/*".into(), "embed/*".into()],
        until_step: 100,
    };
    let mut at_100: Option<(bool, bool)> = None;
    train(
        &mut model,
        &dataset,
        &vocab,
        &vocab,
        &schedule,
        &freeze,
        42,
        |step, m, _| {
            if step == 100 {
                let q_same = m.param("encoder/layer_0/self/q_w").unwrap() == &init_q;
                let e_same = m.param("embed/word").unwrap() == &init_emb;
                at_100 = Some((q_same, e_same));
            }
            Ok(true)
        },
    )
    .unwrap();
    let (q_same, e_same) = at_100.unwrap();
    assert!(q_same && e_same, "frozen tensors drifted before step 100");
    assert_ne!(
        model.param("encoder/layer_0/self/q_w").unwrap(),
        &init_q,
        "encoder never unfroze"
    );
    assert_ne!(model.param("embed/word").unwrap(), &init_emb, "embedding never unfroze");
    println!("PASS criterion 10: frozen tensors bitwise constant through step 100, change after");
}

#[test]
fn criterion_11_end_to_end_determinism() {
    let bin = env!("CARGO_BIN_EXE_warmstart");
    let config = "\
scheme = BERT2RND
seed = 11
model.num_layers = 2
model.hidden_size = 16
model.filter_size = 64
model.num_heads = 4
model.max_positions = 16
train.base_rate = 0.1
train.warmup_steps = 20
train.steps = 40
train.batch_size = 8
decode.beam_size = 2
decode.max_output_length = 10
data.vocab = vocab.txt
data.train = train.tsv
archive.encoder = pretrained.wsck
";

    let run_pipeline = |dir: &std::path::Path| -> Vec<Vec<u8>> {
        std::fs::create_dir_all(dir).unwrap();
        std::fs::write(dir.join("exp.cfg"), config).unwrap();
        let ok = |out: std::process::Output, what: &str| {
            assert!(
                out.status.success(),
                "{what} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            );
            out.stdout
        };
        ok(
            Command::new(bin)
                .current_dir(dir)
                .args(["gen-data", "--task", "fusion", "--count", "64", "--seed", "3", "--out", "."])
                .output()
                .unwrap(),
            "gen-data",
        );
        ok(
            Command::new(bin)
                .current_dir(dir)
                .args([
                    "pretrain",
                    "--config",
                    "exp.cfg",
                    "--family",
                    "bert",
                    "--out",
                    "pretrained.wsck",
                ])
                .output()
                .unwrap(),
            "pretrain",
        );
        ok(
            Command::new(bin)
                .current_dir(dir)
                .args(["train", "--config", "exp.cfg", "--out", "run"])
                .output()
                .unwrap(),
            "train",
        );
        ok(
            Command::new(bin)
                .current_dir(dir)
                .args([
                    "predict",
                    "--config",
                    "exp.cfg",
                    "--model",
                    "run/model.wsck",
                    "--input",
                    "test.tsv",
                    "--out",
                    "predictions.tsv",
                ])
                .output()
                .unwrap(),
            "predict",
        );
        let eval_stdout = ok(
            Command::new(bin)
                .current_dir(dir)
                .args(["evaluate", "--eval", "predictions.tsv"])
                .output()
                .unwrap(),
            "evaluate",
        );
        vec![
            std::fs::read(dir.join("pretrained.wsck")).unwrap(),
            std::fs::read(dir.join("run/model.wsck")).unwrap(),
            std::fs::read(dir.join("run/loss.csv")).unwrap(),
            std::fs::read(dir.join("predictions.tsv")).unwrap(),
            eval_stdout,
        ]
    };

    let base = tempfile::tempdir().unwrap();
    let a = run_pipeline(&base.path().join("a"));
    let b = run_pipeline(&base.path().join("b"));
    let labels = ["pretrained archive", "trained model", "loss curve", "predictions", "evaluation"];
    for ((x, y), label) in a.iter().zip(&b).zip(labels) {
        assert_eq!(x, y, "{label} differs between identical runs");
    }
    println!("PASS criterion 11: pretrain->train->predict->evaluate byte-identical across runs");
}
