//! Synthetic sequence-to-sequence tasks and their line-delimited file format.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tokens::{BOS, EOS, FIRST_CONTENT, MARKER, PAD};

/// Redraws allowed per example before giving up.
pub const MAX_REDRAWS: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub source: Vec<u32>,
    /// Target tokens followed by the end token.
    pub target: Vec<u32>,
    /// Number of target tokens before the end token.
    pub l: usize,
}

impl TrainingExample {
    pub fn new(source: Vec<u32>, mut content: Vec<u32>) -> Result<Self> {
        content.push(EOS);
        let l = content.len() - 1;
        let ex = TrainingExample { source, target: content, l };
        ex.validate()?;
        Ok(ex)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 {
            return Err(Error::InvalidTargetLength(0));
        }
        if self.target.len() != self.l + 1 {
            return Err(Error::Config(format!(
                "l = {} but target has {} tokens",
                self.l,
                self.target.len()
            )));
        }
        if self.target.last() != Some(&EOS) || self.target[..self.l].contains(&EOS) {
            return Err(Error::Config("target must end with the single end token".into()));
        }
        if self.source.is_empty() {
            return Err(Error::Empty("source"));
        }
        Ok(())
    }

    /// Target tokens without the end token.
    pub fn content(&self) -> &[u32] {
        &self.target[..self.l]
    }

    pub fn max_token(&self) -> u32 {
        self.source.iter().chain(&self.target).copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// Target is the first `l` source tokens.
    PrefixCopy,
    /// Target is the first `l` tokens that follow a marker.
    MarkedExtract,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::PrefixCopy => "prefix_copy",
            Task::MarkedExtract => "marked_extract",
        }
    }

    /// Tokens of the source that a length-`l` target may draw from.
    pub fn reference(self, source: &[u32], l: usize) -> Vec<u32> {
        match self {
            Task::PrefixCopy => source.iter().take(l).copied().collect(),
            Task::MarkedExtract => marked_tokens(source).take(l).collect(),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "prefix_copy" => Ok(Task::PrefixCopy),
            "marked_extract" => Ok(Task::MarkedExtract),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

fn marked_tokens(source: &[u32]) -> impl Iterator<Item = u32> + '_ {
    source
        .windows(2)
        .filter(|w| w[0] == MARKER && w[1] >= FIRST_CONTENT)
        .map(|w| w[1])
}

/// Truncated normal over integers: round, reject outside `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LengthDistribution {
    pub mean: f64,
    pub sd: f64,
    pub min: usize,
    pub max: usize,
}

impl LengthDistribution {
    pub fn validate(&self) -> Result<()> {
        if self.min == 0 || self.min > self.max || !(self.sd > 0.0) || !self.mean.is_finite() {
            return Err(Error::Config(format!("invalid length distribution {self:?}")));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<usize> {
        let normal = Normal::new(self.mean, self.sd).map_err(|e| Error::Config(e.to_string()))?;
        for _ in 0..MAX_REDRAWS * 100 {
            let x = normal.sample(rng).round();
            if x >= self.min as f64 && x <= self.max as f64 {
                return Ok(x as usize);
            }
        }
        Err(Error::Unrealizable(MAX_REDRAWS * 100))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub task: Task,
    pub vocab_size: usize,
    pub n_examples: usize,
    /// Inclusive source length range.
    pub source_len: (usize, usize),
    pub lengths: LengthDistribution,
    /// Probability that a marked-extract source slot is a marker pair.
    pub marker_rate: f64,
    pub rng_seed: u64,
}

impl CorpusSpec {
    pub fn prefix_copy(vocab_size: usize, n_examples: usize, rng_seed: u64) -> Self {
        CorpusSpec {
            task: Task::PrefixCopy,
            vocab_size,
            n_examples,
            source_len: (80, 90),
            lengths: LengthDistribution {
                mean: 40.0,
                sd: 10.0,
                min: 8,
                max: 80,
            },
            marker_rate: 0.5,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lengths.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size <= FIRST_CONTENT as usize {
            return bad(format!("vocab_size {} leaves no content ids", self.vocab_size));
        }
        let (lo, hi) = self.source_len;
        if lo == 0 || lo > hi {
            return bad(format!("invalid source length range [{lo}, {hi}]"));
        }
        if self.task == Task::PrefixCopy && self.lengths.max > lo {
            return bad(format!(
                "target length max {} exceeds source length min {lo}",
                self.lengths.max
            ));
        }
        if self.task == Task::MarkedExtract && !(self.marker_rate > 0.0 && self.marker_rate <= 1.0) {
            return bad(format!("marker_rate {} outside (0, 1]", self.marker_rate));
        }
        Ok(())
    }

    fn content_token(&self, rng: &mut ChaCha8Rng) -> u32 {
        rng.random_range(FIRST_CONTENT..self.vocab_size as u32)
    }

    fn draw_source(&self, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let n = rng.random_range(self.source_len.0..=self.source_len.1);
        match self.task {
            Task::PrefixCopy => (0..n).map(|_| self.content_token(rng)).collect(),
            Task::MarkedExtract => {
                let mut s = Vec::with_capacity(n);
                while s.len() < n {
                    if s.len() + 1 < n && rng.random_bool(self.marker_rate) {
                        s.push(MARKER);
                    }
                    s.push(self.content_token(rng));
                }
                s
            }
        }
    }

    /// Example `index`, deterministic in `(rng_seed, index)`.
    pub fn example(&self, index: usize) -> Result<TrainingExample> {
        let mut rng = seed::rng(seed::derive_indexed(self.rng_seed, index as u64));
        let l = self.lengths.sample(&mut rng)?;
        for _ in 0..MAX_REDRAWS {
            let source = self.draw_source(&mut rng);
            let content = self.task.reference(&source, l);
            if content.len() == l {
                return TrainingExample::new(source, content);
            }
        }
        Err(Error::Unrealizable(MAX_REDRAWS))
    }

    pub fn generate(&self) -> Result<Vec<TrainingExample>> {
        self.validate()?;
        (0..self.n_examples).map(|i| self.example(i)).collect()
    }

    /// The `#` comment line that opens a corpus file.
    pub fn header(&self) -> String {
        format!(
            "# lenctl corpus task={} vocab={} seed={} pad={PAD} bos={BOS} eos={EOS} marker={MARKER} first_content={FIRST_CONTENT}",
            self.task, self.vocab_size, self.rng_seed
        )
    }
}

pub fn write_corpus<W: Write>(examples: &[TrainingExample], header: &str, mut out: W) -> Result<()> {
    if !header.is_empty() {
        writeln!(out, "{}", header.trim_end())?;
    }
    for ex in examples {
        let line = serde_json::to_string(ex).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads examples, skipping blank and `#` lines; errors name the line.
pub fn read_corpus<R: BufRead>(input: R) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let s = line.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let parse = |msg: String| Error::Parse { line: i + 1, msg };
        let ex: TrainingExample = serde_json::from_str(s).map_err(|e| parse(e.to_string()))?;
        ex.validate().map_err(|e| parse(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

/// Index ranges of consecutive train / validation / test splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: std::ops::Range<usize>,
    pub valid: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
}

impl Splits {
    pub fn new(n_train: usize, n_valid: usize, n_test: usize) -> Self {
        Splits {
            train: 0..n_train,
            valid: n_train..n_train + n_valid,
            test: n_train + n_valid..n_train + n_valid + n_test,
        }
    }

    pub fn total(&self) -> usize {
        self.test.end
    }
}
