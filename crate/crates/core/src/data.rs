//! Datasets: tab-separated source/target pairs, evaluation files with
//! references, and seeded synthetic corpora for smoke training.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub pairs: Vec<Pair>,
}

impl Dataset {
    pub fn parse(text: &str) -> Result<Dataset> {
        let mut pairs = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (source, target) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!("line {}: expected source<TAB>target", idx + 1))
            })?;
            pairs.push(Pair {
                source: source.to_string(),
                target: target.to_string(),
            });
        }
        if pairs.is_empty() {
            return Err(Error::DegenerateDataset);
        }
        Ok(Dataset { pairs })
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&p.source);
            out.push('\t');
            out.push_str(&p.target);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Pick `round(fraction * n)` examples deterministically. Each index gets a
/// seeded priority; the smallest priorities win, so a smaller fraction's
/// selection is always a subset of a larger one's under the same seed.
pub fn subsample_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    let keep = (fraction * n as f64).round() as usize;
    if keep == 0 {
        return Err(Error::DegenerateDataset);
    }
    let mut ranked: Vec<(u64, usize)> = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15));
            (rng.gen::<u64>(), i)
        })
        .collect();
    ranked.sort();
    let mut picked: Vec<usize> = ranked[..keep.min(n)].iter().map(|&(_, i)| i).collect();
    picked.sort();
    Ok(picked)
}

pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    let idx = subsample_indices(dataset.len(), fraction, seed)?;
    Ok(Dataset {
        pairs: idx.iter().map(|&i| dataset.pairs[i].clone()).collect(),
    })
}

/// One evaluation row: a source, the system output, and reference outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalExample {
    pub source: String,
    pub prediction: String,
    pub references: Vec<String>,
}

/// Parse `source<TAB>prediction<TAB>ref1|||ref2...` rows.
pub fn parse_eval_file(text: &str) -> Result<Vec<EvalExample>> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Config(format!(
                "line {}: expected source<TAB>prediction<TAB>references",
                idx + 1
            )));
        }
        rows.push(EvalExample {
            source: fields[0].to_string(),
            prediction: fields[1].to_string(),
            references: fields[2].split("|||").map(|s| s.to_string()).collect(),
        });
    }
    if rows.is_empty() {
        return Err(Error::DegenerateCorpus);
    }
    Ok(rows)
}

pub fn load_eval_file(path: &Path) -> Result<Vec<EvalExample>> {
    parse_eval_file(&std::fs::read_to_string(path)?)
}

const TOY_SUBJECTS: [&str; 6] = ["alice", "bob", "carol", "dave", "erin", "frank"];
const TOY_VERBS: [&str; 5] = ["sees", "likes", "helps", "calls", "meets"];
const TOY_OBJECTS: [&str; 6] = ["dogs", "cats", "birds", "books", "games", "songs"];

/// Vocabulary word list covering every toy generator below.
pub fn toy_wordlist() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    words.extend(TOY_SUBJECTS.iter().map(|s| s.to_string()));
    words.extend(TOY_VERBS.iter().map(|s| s.to_string()));
    words.extend(TOY_OBJECTS.iter().map(|s| s.to_string()));
    words.push("and".to_string());
    words.push("also".to_string());
    words
}

fn toy_clause(rng: &mut ChaCha8Rng) -> (String, &'static str, &'static str, &'static str) {
    let s = TOY_SUBJECTS[rng.gen_range(0..TOY_SUBJECTS.len())];
    let v = TOY_VERBS[rng.gen_range(0..TOY_VERBS.len())];
    let o = TOY_OBJECTS[rng.gen_range(0..TOY_OBJECTS.len())];
    (format!("{s} {v} {o}"), s, v, o)
}

/// Sentence fusion: two clauses about the same subject in, one coordinated
/// clause out. "alice sees dogs also alice likes cats" -> "alice sees dogs
/// and likes cats".
pub fn generate_fusion(count: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let (first, s, _, _) = toy_clause(&mut rng);
        let v2 = TOY_VERBS[rng.gen_range(0..TOY_VERBS.len())];
        let o2 = TOY_OBJECTS[rng.gen_range(0..TOY_OBJECTS.len())];
        pairs.push(Pair {
            source: format!("{first} also {s} {v2} {o2}"),
            target: format!("{first} and {v2} {o2}"),
        });
    }
    Dataset { pairs }
}

/// Sentence splitting: the inverse direction of fusion.
pub fn generate_split(count: usize, seed: u64) -> Dataset {
    let fused = generate_fusion(count, seed);
    Dataset {
        pairs: fused
            .pairs
            .into_iter()
            .map(|p| Pair {
                source: p.target,
                target: p.source,
            })
            .collect(),
    }
}

/// Identity corpus: target equals source. Useful for copy-ability probes.
pub fn generate_copy(count: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let (clause, ..) = toy_clause(&mut rng);
        pairs.push(Pair {
            source: clause.clone(),
            target: clause,
        });
    }
    Dataset { pairs }
}

/// Plain text drawn from the same clause distribution, for pre-training.
pub fn generate_text(count: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let (first, s, _, _) = toy_clause(&mut rng);
            if rng.gen_bool(0.5) {
                let v2 = TOY_VERBS[rng.gen_range(0..TOY_VERBS.len())];
                let o2 = TOY_OBJECTS[rng.gen_range(0..TOY_OBJECTS.len())];
                if rng.gen_bool(0.5) {
                    format!("{first} also {s} {v2} {o2}")
                } else {
                    format!("{first} and {v2} {o2}")
                }
            } else {
                first
            }
        })
        .collect()
}
