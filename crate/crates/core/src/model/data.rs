//! Synthetic multi-domain instruction corpus.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{instruction_id, EOS, PAYLOAD_BASE, SEP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Copy,
    Reverse,
    SortAscending,
    AddKModV,
    LastTokenRepeat,
}

impl Domain {
    pub const ALL: [Domain; 5] = [
        Domain::Copy,
        Domain::Reverse,
        Domain::SortAscending,
        Domain::AddKModV,
        Domain::LastTokenRepeat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Copy => "copy",
            Domain::Reverse => "reverse",
            Domain::SortAscending => "sort_ascending",
            Domain::AddKModV => "add_k_mod_v",
            Domain::LastTokenRepeat => "last_token_repeat",
        }
    }

    pub fn parse(name: &str) -> Result<Domain> {
        Domain::ALL
            .into_iter()
            .find(|d| d.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown domain {name:?}")))
    }

    /// Fixed instruction words; related tasks share words, no two tasks share all three.
    fn instruction_words(self) -> [&'static str; 3] {
        match self {
            Domain::Copy => ["copy", "seq", "plain"],
            Domain::LastTokenRepeat => ["copy", "seq", "repeat_last"],
            Domain::Reverse => ["reorder", "seq", "backward"],
            Domain::SortAscending => ["reorder", "seq", "ascending"],
            Domain::AddKModV => ["shift", "seq", "plus_k"],
        }
    }
}

/// One synthetic task family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub domain: Domain,
    pub instruction: [usize; 3],
    pub length_range: (usize, usize),
    pub alphabet: usize,
    pub add_k: usize,
}

impl SyntheticTask {
    pub fn new(domain: Domain, cfg: &CorpusConfig) -> Self {
        let words = domain.instruction_words();
        SyntheticTask {
            domain,
            instruction: words.map(|w| instruction_id(w).expect("built-in word")),
            length_range: (cfg.min_len, cfg.max_len),
            alphabet: cfg.alphabet,
            add_k: cfg.add_k,
        }
    }

    /// Applies the task to payload symbols given as alphabet indices.
    pub fn transform(&self, payload: &[usize]) -> Vec<usize> {
        match self.domain {
            Domain::Copy => payload.to_vec(),
            Domain::Reverse => payload.iter().rev().copied().collect(),
            Domain::SortAscending => {
                let mut v = payload.to_vec();
                v.sort_unstable();
                v
            }
            Domain::AddKModV => payload.iter().map(|&x| (x + self.add_k) % self.alphabet).collect(),
            Domain::LastTokenRepeat => {
                let mut v = payload.to_vec();
                v.extend(payload.last());
                v
            }
        }
    }

    /// Builds `[instr][sep][payload][sep] -> [transformed][eos]` for one payload.
    pub fn example(&self, id: String, payload: &[usize]) -> Example {
        let mut prompt = self.instruction.to_vec();
        prompt.push(SEP);
        prompt.extend(payload.iter().map(|&x| x + PAYLOAD_BASE));
        prompt.push(SEP);
        let mut target: Vec<usize> = self.transform(payload).iter().map(|&x| x + PAYLOAD_BASE).collect();
        target.push(EOS);
        Example {
            id,
            domain: self.domain.name().to_string(),
            prompt,
            target,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let len = rng.random_range(self.length_range.0..=self.length_range.1);
        (0..len).map(|_| rng.random_range(0..self.alphabet)).collect()
    }
}

/// One instruction/target pair. The domain label is for analysis only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub domain: String,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.prompt.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompt.is_empty() && self.target.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub domains: Vec<String>,
    pub n_per_domain: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub seed: u64,
    pub alphabet: usize,
    pub add_k: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Domain kept out of the training split.
    pub held_out: Option<String>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            domains: ["copy", "reverse", "add_k_mod_v", "last_token_repeat"]
                .map(String::from)
                .to_vec(),
            n_per_domain: 2000,
            split: [0.8, 0.1, 0.1],
            seed: 0,
            alphabet: 16,
            add_k: 3,
            min_len: 3,
            max_len: 8,
            held_out: None,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.n_per_domain == 0 {
            return Err(Error::Config("n_per_domain must be at least 1".into()));
        }
        if self.split.iter().any(|f| *f < 0.0) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {:?} must sum to 1", self.split)));
        }
        if self.alphabet == 0 || PAYLOAD_BASE + self.alphabet > vocab {
            return Err(Error::Config(format!(
                "alphabet {} does not fit a vocabulary of {vocab}",
                self.alphabet
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "bad payload length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        for d in &self.domains {
            Domain::parse(d)?;
        }
        if let Some(h) = &self.held_out {
            Domain::parse(h)?;
        }
        Ok(())
    }

    /// Longest prompt + target any task can produce.
    pub fn max_example_len(&self) -> usize {
        3 + 1 + self.max_len + 1 + self.max_len + 2
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn generate_corpus(cfg: &CorpusConfig, vocab: usize) -> Result<Splits> {
    cfg.validate(vocab)?;
    let mut domains: Vec<Domain> = cfg.domains.iter().map(|d| Domain::parse(d)).collect::<Result<_>>()?;
    if let Some(h) = &cfg.held_out {
        let h = Domain::parse(h)?;
        if !domains.contains(&h) {
            domains.push(h);
        }
    }
    let held_out = cfg.held_out.as_deref().map(Domain::parse).transpose()?;
    let mut splits = Splits::default();
    for (di, &domain) in domains.iter().enumerate() {
        let task = SyntheticTask::new(domain, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ di as u64);
        let mut examples: Vec<Example> = (0..cfg.n_per_domain)
            .map(|i| {
                let payload = task.sample(&mut rng);
                task.example(format!("{}-{i:05}", domain.name()), &payload)
            })
            .collect();
        examples.shuffle(&mut rng);
        let n = examples.len();
        let n_train = (cfg.split[0] * n as f64).round() as usize;
        let n_val = ((cfg.split[1] * n as f64).round() as usize).min(n - n_train);
        let mut rest = examples.split_off(n_train);
        let test = rest.split_off(n_val);
        if Some(domain) != held_out {
            splits.train.extend(examples);
        }
        splits.val.extend(rest);
        splits.test.extend(test);
    }
    Ok(splits)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_corpus(dir: &Path, splits: &Splits) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join("train.jsonl"), &splits.train)?;
    write_jsonl(&dir.join("val.jsonl"), &splits.val)?;
    write_jsonl(&dir.join("test.jsonl"), &splits.test)
}

pub fn read_corpus(dir: &Path) -> Result<Splits> {
    Ok(Splits {
        train: read_jsonl(&dir.join("train.jsonl"))?,
        val: read_jsonl(&dir.join("val.jsonl"))?,
        test: read_jsonl(&dir.join("test.jsonl"))?,
    })
}
