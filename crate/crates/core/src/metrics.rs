//! Rewrite-quality metrics: SARI, corpus BLEU-4, ROUGE-1/2/L F1 and exact
//! match. All operate on whitespace tokens after quote normalization and
//! optional lowercasing.

use std::collections::HashMap;

use crate::data::EvalExample;
use crate::error::{Error, Result};

/// Metric tokenization: fold typographic quotes to ascii, optionally
/// lowercase, then split on whitespace.
pub fn metric_tokens(text: &str, lowercase: bool) -> Vec<String> {
    let normalized: String = text
        .chars()
        .map(|c| match c {
            '\u{2018}' | '\u{2019}' => '\'',
            '\u{201c}' | '\u{201d}' => '"',
            other => other,
        })
        .collect();
    let normalized = if lowercase {
        normalized.to_lowercase()
    } else {
        normalized
    };
    normalized.split_whitespace().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub name: String,
    pub corpus_score: f64,
    pub per_example: Vec<f64>,
    pub max_n: usize,
    pub cased: bool,
}

type Counts = HashMap<Vec<String>, usize>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts {
    let mut counts = Counts::new();
    if tokens.len() >= n && n > 0 {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

fn total(counts: &Counts) -> usize {
    counts.values().sum()
}

/// Multiset intersection: per-gram minimum of the two counts.
fn intersect(a: &Counts, b: &Counts) -> Counts {
    let mut out = Counts::new();
    for (g, &ca) in a {
        if let Some(&cb) = b.get(g) {
            out.insert(g.clone(), ca.min(cb));
        }
    }
    out
}

/// Multiset difference: counts of `a` not covered by `b`.
fn subtract(a: &Counts, b: &Counts) -> Counts {
    let mut out = Counts::new();
    for (g, &ca) in a {
        let cb = b.get(g).copied().unwrap_or(0);
        if ca > cb {
            out.insert(g.clone(), ca - cb);
        }
    }
    out
}

/// Per-gram maximum count over all references.
fn max_over_refs(refs: &[Counts]) -> Counts {
    let mut out = Counts::new();
    for r in refs {
        for (g, &c) in r {
            let e = out.entry(g.clone()).or_insert(0);
            *e = (*e).max(c);
        }
    }
    out
}

/// Precision/recall style ratio with empty-set smoothing: both sides empty
/// counts as a perfect 1, only one side empty as 0.
fn smoothed_ratio(tp: usize, denom: usize, other_side: usize) -> f64 {
    if denom == 0 {
        return if other_side == 0 { 1.0 } else { 0.0 };
    }
    tp as f64 / denom as f64
}

fn smoothed_f1(tp: usize, pred_total: usize, target_total: usize) -> f64 {
    if pred_total == 0 || target_total == 0 {
        return if pred_total == 0 && target_total == 0 { 1.0 } else { 0.0 };
    }
    let p = tp as f64 / pred_total as f64;
    let r = tp as f64 / target_total as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn sari_example(example: &EvalExample, max_n: usize, lowercase: bool) -> f64 {
    let src = metric_tokens(&example.source, lowercase);
    let pred = metric_tokens(&example.prediction, lowercase);
    let refs: Vec<Vec<String>> = example
        .references
        .iter()
        .map(|r| metric_tokens(r, lowercase))
        .collect();

    let mut sum = 0.0;
    for n in 1..=max_n {
        let i = ngram_counts(&src, n);
        let o = ngram_counts(&pred, n);
        let r = max_over_refs(&refs.iter().map(|t| ngram_counts(t, n)).collect::<Vec<_>>());

        // keep: source grams retained by the prediction vs by the references
        let keep_pred = intersect(&i, &o);
        let keep_target = intersect(&i, &r);
        let keep_tp = total(&intersect(&keep_pred, &keep_target));
        let keep = smoothed_f1(keep_tp, total(&keep_pred), total(&keep_target));

        // add: grams introduced beyond the source
        let add_pred = subtract(&o, &i);
        let add_target = subtract(&r, &i);
        let add_tp = total(&intersect(&add_pred, &add_target));
        let add = smoothed_f1(add_tp, total(&add_pred), total(&add_target));

        // delete: source grams dropped, scored by precision only
        let del_pred = subtract(&i, &o);
        let del_target = subtract(&i, &r);
        let del_tp = total(&intersect(&del_pred, &del_target));
        let del = smoothed_ratio(del_tp, total(&del_pred), total(&del_target));

        sum += (add + keep + del) / 3.0;
    }
    100.0 * sum / max_n as f64
}

pub fn sari(examples: &[EvalExample], max_n: usize, cased: bool) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(Error::DegenerateCorpus);
    }
    let per_example: Vec<f64> = examples
        .iter()
        .map(|e| sari_example(e, max_n, !cased))
        .collect();
    let corpus = per_example.iter().sum::<f64>() / per_example.len() as f64;
    Ok(MetricReport {
        name: "SARI".into(),
        corpus_score: corpus,
        per_example,
        max_n,
        cased,
    })
}

pub fn bleu_corpus(examples: &[EvalExample], max_n: usize, cased: bool) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(Error::DegenerateCorpus);
    }
    let lowercase = !cased;
    let mut matched = vec![0usize; max_n];
    let mut attempted = vec![0usize; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for example in examples {
        let pred = metric_tokens(&example.prediction, lowercase);
        let refs: Vec<Vec<String>> = example
            .references
            .iter()
            .map(|r| metric_tokens(r, lowercase))
            .collect();
        cand_len += pred.len();
        // effective reference length: closest to the candidate, shorter wins ties
        let best_ref = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| {
                (
                    (l as i64 - pred.len() as i64).abs(),
                    l,
                )
            })
            .unwrap_or(0);
        ref_len += best_ref;
        for n in 1..=max_n {
            let p = ngram_counts(&pred, n);
            let clip = max_over_refs(&refs.iter().map(|t| ngram_counts(t, n)).collect::<Vec<_>>());
            matched[n - 1] += total(&intersect(&p, &clip));
            attempted[n - 1] += total(&p);
        }
    }
    if cand_len == 0 {
        return Err(Error::DegenerateCorpus);
    }

    // orders the corpus is too short to attempt drop out of the mean; an
    // attempted order with zero matches still zeroes the whole product
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    let mut any_zero = false;
    for n in 0..max_n {
        if attempted[n] == 0 {
            continue;
        }
        orders += 1;
        if matched[n] == 0 {
            any_zero = true;
            break;
        }
        log_sum += (matched[n] as f64 / attempted[n] as f64).ln();
    }
    let precision_mean = if any_zero || orders == 0 {
        0.0
    } else {
        (log_sum / orders as f64).exp()
    };
    let brevity = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(MetricReport {
        name: "BLEU".into(),
        corpus_score: 100.0 * brevity * precision_mean,
        per_example: Vec::new(),
        max_n,
        cased,
    })
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for x in a {
        let mut prev = 0usize;
        for (j, y) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if x == y { prev + 1 } else { dp[j + 1].max(dp[j]) };
            prev = cur;
        }
    }
    dp[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeVariant {
    One,
    Two,
    L,
}

impl RougeVariant {
    fn label(self) -> &'static str {
        match self {
            RougeVariant::One => "ROUGE-1",
            RougeVariant::Two => "ROUGE-2",
            RougeVariant::L => "ROUGE-L",
        }
    }
}

fn rouge_pair(pred: &[String], reference: &[String], variant: RougeVariant) -> f64 {
    let (tp, pred_total, ref_total) = match variant {
        RougeVariant::One | RougeVariant::Two => {
            let n = if variant == RougeVariant::One { 1 } else { 2 };
            let p = ngram_counts(pred, n);
            let r = ngram_counts(reference, n);
            (total(&intersect(&p, &r)), total(&p), total(&r))
        }
        RougeVariant::L => (lcs_len(pred, reference), pred.len(), reference.len()),
    };
    if pred_total == 0 || ref_total == 0 || tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / pred_total as f64;
    let r = tp as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

pub fn rouge(examples: &[EvalExample], variant: RougeVariant, cased: bool) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(Error::DegenerateCorpus);
    }
    let lowercase = !cased;
    let per_example: Vec<f64> = examples
        .iter()
        .map(|e| {
            let pred = metric_tokens(&e.prediction, lowercase);
            e.references
                .iter()
                .map(|r| rouge_pair(&pred, &metric_tokens(r, lowercase), variant))
                .fold(0.0, f64::max)
        })
        .collect();
    let corpus = per_example.iter().sum::<f64>() / per_example.len() as f64;
    Ok(MetricReport {
        name: variant.label().into(),
        corpus_score: corpus,
        per_example,
        max_n: match variant {
            RougeVariant::One => 1,
            RougeVariant::Two => 2,
            RougeVariant::L => 0,
        },
        cased,
    })
}

pub fn exact_match(examples: &[EvalExample], cased: bool) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(Error::DegenerateCorpus);
    }
    let lowercase = !cased;
    let per_example: Vec<f64> = examples
        .iter()
        .map(|e| {
            let pred = metric_tokens(&e.prediction, lowercase);
            let hit = e
                .references
                .iter()
                .any(|r| metric_tokens(r, lowercase) == pred);
            if hit {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let corpus = per_example.iter().sum::<f64>() / per_example.len() as f64;
    Ok(MetricReport {
        name: "ExactMatch".into(),
        corpus_score: corpus,
        per_example,
        max_n: 0,
        cased,
    })
}
