//! Labelled token-sequence datasets: a seeded synthetic generator and a
//! whitespace/hash tokenizer for plain text files.

use std::collections::HashSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::PAD_TOKEN;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: usize,
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// Samples plus the split between the federated training pool and the
/// held-out pool that supplies non-member candidates.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub train_ids: Vec<usize>,
    pub holdout_ids: Vec<usize>,
}

impl Dataset {
    pub fn sample(&self, id: usize) -> &Sample {
        &self.samples[id]
    }

    pub fn tokens_and_labels(&self, ids: &[usize]) -> (Vec<&[usize]>, Vec<usize>) {
        ids.iter()
            .map(|&i| (self.samples[i].tokens.as_slice(), self.samples[i].label))
            .unzip()
    }

    fn split(samples: Vec<Sample>, num_classes: usize, num_holdout: usize, seed: u64) -> Result<Self> {
        if num_holdout >= samples.len() {
            return Err(Error::validation(format!(
                "holdout of {num_holdout} leaves no training samples out of {}",
                samples.len()
            )));
        }
        let mut ids: Vec<usize> = (0..samples.len()).collect();
        ids.shuffle(&mut rng::stream(seed, &[rng::TAG_DATA, 1]));
        let holdout_ids = {
            let mut h = ids.split_off(samples.len() - num_holdout);
            h.sort_unstable();
            h
        };
        ids.sort_unstable();
        Ok(Self {
            samples,
            num_classes,
            train_ids: ids,
            holdout_ids,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_samples: usize,
    pub num_holdout: usize,
    pub min_len: usize,
    pub max_len: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
}

fn default_classes() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextFileSpec {
    /// One sample per line: `<label>\t<text>`.
    pub path: PathBuf,
    pub num_holdout: usize,
    #[serde(default)]
    pub split_seed: u64,
    /// Sequences longer than this are truncated.
    #[serde(default)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    TextFile(TextFileSpec),
}

impl DatasetSpec {
    pub fn build(&self, vocab_size: usize) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic(s) => synthetic(s, vocab_size),
            DatasetSpec::TextFile(t) => {
                let text = std::fs::read_to_string(&t.path)?;
                from_text(&text, t, vocab_size)
            }
        }
    }
}

/// Distinct random sequences whose labels are the arg-max of a seeded
/// per-token score table summed over the sequence.
pub fn synthetic(spec: &SyntheticSpec, vocab_size: usize) -> Result<Dataset> {
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::validation(format!(
            "invalid length range {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    if vocab_size < 3 {
        return Err(Error::validation("synthetic data needs vocab_size >= 3"));
    }
    if spec.num_classes < 2 {
        return Err(Error::validation("num_classes must be at least 2"));
    }
    let mut r = rng::stream(spec.seed, &[rng::TAG_DATA, 0]);
    let scores = Matrix::random_normal(vocab_size, spec.num_classes, 1.0, &mut r);
    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(spec.num_samples);
    let mut attempts = 0usize;
    while samples.len() < spec.num_samples {
        attempts += 1;
        if attempts > spec.num_samples * 100 + 1000 {
            return Err(Error::validation(
                "could not draw enough distinct sequences; widen vocab or length range",
            ));
        }
        let len = r.random_range(spec.min_len..=spec.max_len);
        let tokens: Vec<usize> = (0..len).map(|_| r.random_range(1..vocab_size)).collect();
        if !seen.insert(tokens.clone()) {
            continue;
        }
        let mut totals = vec![0.0; spec.num_classes];
        for &t in &tokens {
            for (acc, s) in totals.iter_mut().zip(scores.row(t)) {
                *acc += s;
            }
        }
        let label = (0..spec.num_classes).fold(0, |b, c| if totals[c] > totals[b] { c } else { b });
        samples.push(Sample {
            id: samples.len(),
            tokens,
            label,
        });
    }
    Dataset::split(samples, spec.num_classes, spec.num_holdout, spec.seed)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Lowercased whitespace tokens hashed into `1..vocab_size`.
pub fn hash_tokenize(text: &str, vocab_size: usize) -> Vec<usize> {
    text.split_whitespace()
        .map(|w| (fnv1a(w.to_lowercase().as_bytes()) % (vocab_size as u64 - 1)) as usize + 1)
        .collect()
}

pub fn from_text(text: &str, spec: &TextFileSpec, vocab_size: usize) -> Result<Dataset> {
    if vocab_size < 2 {
        return Err(Error::validation("vocab_size must be at least 2"));
    }
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line.split_once('\t').ok_or_else(|| {
            Error::validation(format!("line {}: expected `<label>\\t<text>`", lineno + 1))
        })?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| Error::validation(format!("line {}: bad label {label:?}", lineno + 1)))?;
        let mut tokens = hash_tokenize(body, vocab_size);
        if let Some(max) = spec.max_len {
            tokens.truncate(max);
        }
        if tokens.is_empty() {
            return Err(Error::validation(format!("line {}: no tokens", lineno + 1)));
        }
        debug_assert!(!tokens.contains(&PAD_TOKEN));
        samples.push(Sample {
            id: samples.len(),
            tokens,
            label,
        });
    }
    let num_classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0).max(2);
    Dataset::split(samples, num_classes, spec.num_holdout, spec.split_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            seed: 1,
            num_samples: 120,
            num_holdout: 20,
            min_len: 2,
            max_len: 6,
            num_classes: 2,
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_distinct() {
        let a = synthetic(&spec(), 100).unwrap();
        let b = synthetic(&spec(), 100).unwrap();
        assert_eq!(a.samples, b.samples);
        let distinct: HashSet<_> = a.samples.iter().map(|s| s.tokens.clone()).collect();
        assert_eq!(distinct.len(), 120);
        assert_eq!(a.train_ids.len(), 100);
        assert_eq!(a.holdout_ids.len(), 20);
        assert!(a.samples.iter().all(|s| (2..=6).contains(&s.tokens.len())));
        assert!(a.samples.iter().any(|s| s.label == 0) && a.samples.iter().any(|s| s.label == 1));
    }

    #[test]
    fn text_ingestion() {
        let spec = TextFileSpec {
            path: PathBuf::new(),
            num_holdout: 1,
            split_seed: 0,
            max_len: Some(3),
        };
        let d = from_text("1\tThe cat sat down\n0\tthe dog\n\n1\tcat", &spec, 97).unwrap();
        assert_eq!(d.samples.len(), 3);
        assert_eq!(d.samples[0].tokens.len(), 3);
        assert_eq!(d.samples[0].tokens[0], d.samples[1].tokens[0]);
        assert_eq!(d.samples[0].tokens[1], d.samples[2].tokens[0]);
        assert!(from_text("no tab here", &spec, 97).is_err());
    }
}
