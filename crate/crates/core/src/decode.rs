//! Greedy and beam-search decoding.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct DecodeParams {
    pub beam_size: usize,
    /// Length-penalty exponent; 0 disables the penalty.
    pub alpha: f64,
    pub max_output_length: usize,
    pub bos: usize,
    pub eos: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            beam_size: 4,
            alpha: 0.6,
            max_output_length: 16,
            bos: 2,
            eos: 3,
        }
    }
}

/// `((5 + len) / 6)^alpha`, the usual sequence-length normalizer.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

fn log_softmax_row(logits: &Tensor, row: usize) -> Vec<f64> {
    let cols = logits.shape()[1];
    let vals: Vec<f64> = (0..cols).map(|j| logits.at2(row, j)).collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    vals.iter().map(|v| v - lse).collect()
}

fn last_row_log_probs(
    model: &Seq2SeqModel,
    source_ids: &[usize],
    prefix: &[usize],
) -> Result<Vec<f64>> {
    let logits = model.logits_for_prefix(source_ids, prefix)?;
    Ok(log_softmax_row(&logits, logits.shape()[0] - 1))
}

/// Argmax continuation at every step; ties go to the lowest token id.
/// Returns output ids with BOS/EOS stripped.
pub fn greedy_decode(
    model: &Seq2SeqModel,
    source_ids: &[usize],
    params: &DecodeParams,
) -> Result<Vec<usize>> {
    let mut prefix = vec![params.bos];
    for _ in 0..params.max_output_length {
        let lp = last_row_log_probs(model, source_ids, &prefix)?;
        let mut best = 0usize;
        for (id, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = id;
            }
        }
        if best == params.eos {
            break;
        }
        prefix.push(best);
    }
    Ok(prefix[1..].to_vec())
}

#[derive(Debug, Clone)]
struct Hypothesis {
    /// Generated ids after BOS; a finished hypothesis ends with EOS.
    ids: Vec<usize>,
    log_prob: f64,
    finished: bool,
}

impl Hypothesis {
    fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.ids.len(), alpha)
    }
}

/// Prefer higher score; break ties toward the lexicographically smaller
/// id sequence so decoding is fully deterministic.
fn better(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> bool {
    let (sa, sb) = (a.score(alpha), b.score(alpha));
    if sa != sb {
        return sa > sb;
    }
    a.ids < b.ids
}

/// Beam search with the length-penalized score `log P / lp(|Y|)`. With
/// `beam_size == 1` this reduces exactly to greedy decoding.
pub fn beam_decode(
    model: &Seq2SeqModel,
    source_ids: &[usize],
    params: &DecodeParams,
) -> Result<Vec<usize>> {
    if params.beam_size == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let mut alive = vec![Hypothesis {
        ids: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..params.max_output_length {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &alive {
            let mut prefix = Vec::with_capacity(hyp.ids.len() + 1);
            prefix.push(params.bos);
            prefix.extend_from_slice(&hyp.ids);
            let lp = last_row_log_probs(model, source_ids, &prefix)?;
            for (id, &logp) in lp.iter().enumerate() {
                let mut ids = hyp.ids.clone();
                ids.push(id);
                candidates.push(Hypothesis {
                    ids,
                    log_prob: hyp.log_prob + logp,
                    finished: id == params.eos,
                });
            }
        }
        // rank expansions by raw log-probability; the length penalty only
        // reorders hypotheses of different lengths at the end
        candidates.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap()
                .then_with(|| a.ids.cmp(&b.ids))
        });
        // only the top beam_size expansions survive; finished ones retire
        candidates.truncate(params.beam_size);
        alive = Vec::new();
        for cand in candidates {
            if cand.finished {
                finished.push(cand);
            } else {
                alive.push(cand);
            }
        }
        if alive.is_empty() {
            break;
        }
    }
    // hypotheses still alive at the length cap compete as they stand
    finished.extend(alive);

    let mut best: Option<Hypothesis> = None;
    for hyp in finished {
        let replace = match &best {
            None => true,
            Some(b) => better(&hyp, b, params.alpha),
        };
        if replace {
            best = Some(hyp);
        }
    }
    let best = best.ok_or_else(|| Error::Config("no hypothesis produced".into()))?;
    let cut = best
        .ids
        .iter()
        .position(|&id| id == params.eos)
        .unwrap_or(best.ids.len());
    Ok(best.ids[..cut].to_vec())
}

/// Decode a batch of sources in parallel. `WARMSTART_THREADS` caps the
/// worker count; decoding stays deterministic because outputs are indexed.
pub fn decode_corpus(
    model: &Seq2SeqModel,
    sources: &[Vec<usize>],
    params: &DecodeParams,
) -> Result<Vec<Vec<usize>>> {
    let threads = std::env::var("WARMSTART_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    let run = || {
        sources
            .par_iter()
            .map(|src| beam_decode(model, src, params))
            .collect::<Result<Vec<_>>>()
    };
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy_model(seed: u64) -> Seq2SeqModel {
        Seq2SeqModel::new_random(ModelConfig::toy(8), seed).unwrap()
    }

    fn toy_params() -> DecodeParams {
        DecodeParams {
            beam_size: 1,
            alpha: 0.6,
            max_output_length: 5,
            bos: 2,
            eos: 3,
        }
    }

    /// Brute-force best sequence by scoring every id sequence up to the
    /// length cap with the same penalized score the beam uses.
    fn exhaustive_best(
        model: &Seq2SeqModel,
        source: &[usize],
        params: &DecodeParams,
        vocab: usize,
    ) -> Vec<usize> {
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut consider = |ids: &[usize], log_prob: f64| {
            let score = log_prob / length_penalty(ids.len(), params.alpha);
            let replace = match &best {
                None => true,
                Some((s, b)) => score > *s || (score == *s && ids < b.as_slice()),
            };
            if replace {
                best = Some((score, ids.to_vec()));
            }
        };
        // depth-first over all sequences; stop a branch at EOS
        fn walk(
            model: &Seq2SeqModel,
            source: &[usize],
            params: &DecodeParams,
            vocab: usize,
            prefix: &mut Vec<usize>,
            log_prob: f64,
            consider: &mut dyn FnMut(&[usize], f64),
        ) {
            if prefix.len() > 1 {
                let gen = &prefix[1..];
                if gen.last() == Some(&params.eos) || gen.len() == params.max_output_length {
                    consider(gen, log_prob);
                    return;
                }
            } else if params.max_output_length == 0 {
                consider(&[], log_prob);
                return;
            }
            let lp = last_row_log_probs(model, source, prefix).unwrap();
            for id in 0..vocab {
                prefix.push(id);
                walk(model, source, params, vocab, prefix, log_prob + lp[id], consider);
                prefix.pop();
            }
        }
        let mut prefix = vec![params.bos];
        walk(model, source, params, vocab, &mut prefix, 0.0, &mut consider);
        let ids = best.unwrap().1;
        let cut = ids.iter().position(|&id| id == params.eos).unwrap_or(ids.len());
        ids[..cut].to_vec()
    }

    #[test]
    fn beam_one_equals_greedy() {
        for seed in [1u64, 2, 3, 4, 5] {
            let model = toy_model(seed);
            let params = toy_params();
            let source = vec![4, 5, 6];
            assert_eq!(
                greedy_decode(&model, &source, &params).unwrap(),
                beam_decode(&model, &source, &params).unwrap(),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn wide_beam_matches_exhaustive_search() {
        // vocab 8, length cap 3: small enough to enumerate fully
        let model = toy_model(7);
        let params = DecodeParams {
            beam_size: 400, // wider than the worst-case candidate frontier (7^2 * 8)
            alpha: 0.6,
            max_output_length: 3,
            bos: 2,
            eos: 3,
        };
        let source = vec![1, 4];
        let beam = beam_decode(&model, &source, &params).unwrap();
        let brute = exhaustive_best(&model, &source, &params, 8);
        assert_eq!(beam, brute);
    }

    #[test]
    fn alpha_zero_ranks_by_raw_log_prob() {
        let model = toy_model(9);
        let params = DecodeParams {
            beam_size: 400,
            alpha: 0.0,
            max_output_length: 3,
            bos: 2,
            eos: 3,
        };
        let source = vec![6];
        let beam = beam_decode(&model, &source, &params).unwrap();
        let brute = exhaustive_best(&model, &source, &params, 8);
        assert_eq!(beam, brute);
    }

    #[test]
    fn length_penalty_values() {
        assert!((length_penalty(1, 0.6) - 1.0).abs() < 1e-12);
        assert!((length_penalty(7, 1.0) - 2.0).abs() < 1e-12);
        assert!((length_penalty(13, 0.0) - 1.0).abs() < 1e-12);
        let lp = length_penalty(10, 0.6);
        assert!((lp - (15.0f64 / 6.0).powf(0.6)).abs() < 1e-12);
    }

    #[test]
    fn decode_is_deterministic_and_parallel_matches_serial() {
        let model = toy_model(3);
        let params = DecodeParams {
            beam_size: 4,
            ..toy_params()
        };
        let sources: Vec<Vec<usize>> = (0..6).map(|i| vec![1 + i % 5, 4]).collect();
        let serial: Vec<Vec<usize>> = sources
            .iter()
            .map(|s| beam_decode(&model, s, &params).unwrap())
            .collect();
        let parallel = decode_corpus(&model, &sources, &params).unwrap();
        assert_eq!(serial, parallel);
        let again = decode_corpus(&model, &sources, &params).unwrap();
        assert_eq!(parallel, again);
    }

    #[test]
    fn max_length_caps_output() {
        let model = toy_model(12);
        let mut params = toy_params();
        params.max_output_length = 2;
        let out = greedy_decode(&model, &[4], &params).unwrap();
        assert!(out.len() <= 2);
    }
}
