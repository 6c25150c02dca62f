//! Length fidelity and quality measurement, plus the report files.

mod metrics;
mod stats;

pub use metrics::{
    bucket_report, lcs_len, length_histogram, length_mae, mean_rouge, outlier_rate, rouge, rouge_n, BucketReport,
    GenerationRecord, HistogramRow, MaeSummary, Rouge,
};
pub use stats::{incomplete_beta, ln_gamma, paired_t_test, student_t_two_sided, TTest};

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::corpus::{Task, TrainingExample};
use crate::error::{Error, Result};
use crate::model::{DecodePolicy, Model};
use crate::scalar::Scalar;
use crate::seed;

/// Outlier threshold in tokens used when none is given.
pub const DEFAULT_OUTLIER_THRESHOLD: usize = 20;

/// How each example's requested length is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthPolicy {
    /// The example's own target length.
    Reference,
    /// Uniform over `[lo, hi]`, seeded per example.
    RandomOod { lo: usize, hi: usize, seed: u64 },
}

impl LengthPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            LengthPolicy::Reference => "REFERENCE",
            LengthPolicy::RandomOod { .. } => "RANDOM_OOD",
        }
    }

    pub fn length_for(&self, ex: &TrainingExample, id: usize) -> usize {
        match *self {
            LengthPolicy::Reference => ex.l,
            LengthPolicy::RandomOod { lo, hi, seed } => {
                seed::rng(seed::derive_indexed(seed, id as u64)).random_range(lo..=hi)
            }
        }
    }
}

impl fmt::Display for LengthPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LengthPolicy {
    type Err = Error;

    /// `reference` or `random_ood:LO-HI` (seed 0; set it afterwards).
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if lower == "reference" {
            return Ok(LengthPolicy::Reference);
        }
        let bad = || Error::Config(format!("unknown length policy {s:?}"));
        let range = lower.strip_prefix("random_ood:").ok_or_else(bad)?;
        let (lo, hi) = range.split_once('-').ok_or_else(bad)?;
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        if lo == 0 || lo > hi {
            return Err(bad());
        }
        Ok(LengthPolicy::RandomOod { lo, hi, seed: 0 })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub task: Task,
    pub policy: LengthPolicy,
    pub decode: DecodePolicy,
    pub bucket_width: usize,
    pub outlier_threshold: usize,
    pub histogram_width: usize,
    pub workers: usize,
}

impl EvalConfig {
    pub fn new(task: Task, policy: LengthPolicy) -> Self {
        EvalConfig {
            task,
            policy,
            decode: DecodePolicy::Greedy,
            bucket_width: 10,
            outlier_threshold: DEFAULT_OUTLIER_THRESHOLD,
            histogram_width: 5,
            workers: 1,
        }
    }
}

fn record<T: Scalar>(model: &Model<T>, ex: &TrainingExample, id: usize, cfg: &EvalConfig) -> Result<GenerationRecord> {
    let l = cfg.policy.length_for(ex, id);
    let reference = match cfg.policy {
        LengthPolicy::Reference => ex.content().to_vec(),
        LengthPolicy::RandomOod { .. } => cfg.task.reference(&ex.source, l),
    };
    let decode = match cfg.decode {
        DecodePolicy::Sample { temperature, seed } => DecodePolicy::Sample {
            temperature,
            seed: seed::derive_indexed(seed, id as u64),
        },
        greedy => greedy,
    };
    let g = model.generate(&ex.source, l, decode)?;
    Ok(GenerationRecord {
        id,
        l,
        generated_len: g.tokens.len(),
        cap_hit: g.cap_hit,
        generated: g.tokens,
        reference,
    })
}

/// Generates for every example; records come back ordered by id.
pub fn evaluate<T: Scalar>(model: &Model<T>, examples: &[TrainingExample], cfg: &EvalConfig) -> Result<Vec<GenerationRecord>> {
    let vocab = model.config().vocab_size;
    if let Some(top) = examples.iter().map(TrainingExample::max_token).max() {
        if top as usize >= vocab {
            return Err(Error::VocabMismatch {
                model: vocab,
                corpus: top as usize,
            });
        }
    }
    let ids: Vec<usize> = (0..examples.len()).collect();
    let mut out: Vec<Result<GenerationRecord>> = if cfg.workers <= 1 || examples.len() < 2 {
        ids.iter().map(|&i| record(model, &examples[i], i, cfg)).collect()
    } else {
        let chunk = examples.len().div_ceil(cfg.workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = ids
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(|&i| record(model, &examples[i], i, cfg)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut records = out.drain(..).collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| r.id);
    Ok(records)
}

/// Per-example absolute length errors in id order.
pub fn abs_errors(records: &[GenerationRecord]) -> Vec<f64> {
    records.iter().map(|r| r.abs_error() as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub mae: MaeSummary,
    pub outlier_rate: f64,
    pub cap_hits: usize,
    pub count: usize,
    pub rouge: Rouge,
}

pub fn summarize(records: &[GenerationRecord], outlier_threshold: usize) -> Result<Summary> {
    Ok(Summary {
        mae: length_mae(records)?,
        outlier_rate: outlier_rate(records, outlier_threshold),
        cap_hits: records.iter().filter(|r| r.cap_hit).count(),
        count: records.len(),
        rouge: mean_rouge(records),
    })
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(body.as_bytes())?;
    Ok(())
}

/// Writes `mae_summary.csv`, `buckets.csv`, `rouge.csv`,
/// `length_density.csv` and `records.jsonl` into `dir`.
pub fn write_reports(dir: &Path, records: &[GenerationRecord], cfg: &EvalConfig) -> Result<Summary> {
    fs::create_dir_all(dir)?;
    let s = summarize(records, cfg.outlier_threshold)?;
    write_file(
        &dir.join("mae_summary.csv"),
        &format!(
            "policy,count,mae,sd,outlier_threshold,outlier_rate,cap_hits\n{},{},{:.6},{:.6},{},{:.6},{}\n",
            cfg.policy, s.count, s.mae.mae, s.mae.sd, cfg.outlier_threshold, s.outlier_rate, s.cap_hits
        ),
    )?;
    let mut b = String::from("bucket_lo,bucket_hi,mae,sd,count,outlier_rate\n");
    for r in bucket_report(records, cfg.bucket_width, cfg.outlier_threshold)? {
        b += &format!("{},{},{:.6},{:.6},{},{:.6}\n", r.lo, r.hi, r.mae, r.sd, r.count, r.outlier_rate);
    }
    write_file(&dir.join("buckets.csv"), &b)?;
    write_file(
        &dir.join("rouge.csv"),
        &format!("r1,r2,rl\n{:.6},{:.6},{:.6}\n", s.rouge.r1, s.rouge.r2, s.rouge.rl),
    )?;
    let mut h = String::from("series,bin_lo,bin_hi,count,density\n");
    for r in length_histogram(records, cfg.histogram_width)? {
        h += &format!("{},{},{},{},{:.9}\n", r.series, r.lo, r.hi, r.count, r.density);
    }
    write_file(&dir.join("length_density.csv"), &h)?;
    let mut j = String::new();
    for r in records {
        j += &serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?;
        j.push('\n');
    }
    write_file(&dir.join("records.jsonl"), &j)?;
    Ok(s)
}

/// Paired t-test of absolute length errors, `a` minus `b`, written to
/// `dir/ttest.csv`.
pub fn write_ttest(dir: &Path, name_a: &str, a: &[GenerationRecord], name_b: &str, b: &[GenerationRecord]) -> Result<TTest> {
    if a.iter().map(|r| (r.id, r.l)).ne(b.iter().map(|r| (r.id, r.l))) {
        return Err(Error::Config("t-test needs records for the same examples and lengths".into()));
    }
    let t = paired_t_test(&abs_errors(a), &abs_errors(b))?;
    fs::create_dir_all(dir)?;
    write_file(
        &dir.join("ttest.csv"),
        &format!(
            "a,b,n,mean_diff,t,df,p,zero_variance\n{name_a},{name_b},{},{:.6},{:.6},{},{:.6e},{}\n",
            a.len(),
            t.mean_diff,
            t.t,
            t.df,
            t.p,
            t.zero_variance
        ),
    )?;
    Ok(t)
}

/// Reads a `records.jsonl` file.
pub fn read_records(text: &str) -> Result<Vec<GenerationRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LengthControlMode, ModelConfig};

    fn model() -> Model<f32> {
        let mut cfg = ModelConfig::new(16, 12, LengthControlMode::Pre).unwrap();
        cfg.d_ff = 32;
        Model::new(cfg, 2).unwrap()
    }

    fn examples() -> Vec<TrainingExample> {
        (0..5u32)
            .map(|i| TrainingExample::new(vec![4 + i, 5, 6, 7, 8, 9], vec![4 + i, 5, 6]).unwrap())
            .collect()
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("reference".parse::<LengthPolicy>().unwrap(), LengthPolicy::Reference);
        assert_eq!(
            "RANDOM_OOD:100-320".parse::<LengthPolicy>().unwrap(),
            LengthPolicy::RandomOod { lo: 100, hi: 320, seed: 0 }
        );
        assert!("random_ood:5-2".parse::<LengthPolicy>().is_err());
        assert!("oracle".parse::<LengthPolicy>().is_err());
    }

    #[test]
    fn random_lengths_stay_in_range_and_are_seeded() {
        let p = LengthPolicy::RandomOod { lo: 3, hi: 6, seed: 9 };
        let ex = &examples()[0];
        let ls: Vec<usize> = (0..50).map(|i| p.length_for(ex, i)).collect();
        assert!(ls.iter().all(|l| (3..=6).contains(l)));
        assert_eq!(ls, (0..50).map(|i| p.length_for(ex, i)).collect::<Vec<_>>());
        assert!(ls.contains(&3) && ls.contains(&6));
    }

    #[test]
    fn evaluation_is_deterministic_across_workers() {
        let m = model();
        let ex = examples();
        let mut cfg = EvalConfig::new(Task::PrefixCopy, LengthPolicy::Reference);
        let a = evaluate(&m, &ex, &cfg).unwrap();
        cfg.workers = 3;
        assert_eq!(a, evaluate(&m, &ex, &cfg).unwrap());
        assert_eq!(a.iter().map(|r| r.id).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert!(a.iter().all(|r| r.generated_len == r.generated.len() && r.l == 3));

        let dir = tempfile::tempdir().unwrap();
        write_reports(dir.path(), &a, &cfg).unwrap();
        let first = fs::read(dir.path().join("records.jsonl")).unwrap();
        write_reports(dir.path(), &evaluate(&m, &ex, &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(first, fs::read(dir.path().join("records.jsonl")).unwrap());
        assert_eq!(read_records(&String::from_utf8(first).unwrap()).unwrap(), a);
        for f in ["mae_summary.csv", "buckets.csv", "rouge.csv", "length_density.csv"] {
            assert!(dir.path().join(f).exists());
        }
    }

    #[test]
    fn vocab_mismatch_is_reported() {
        let m = model();
        let ex = vec![TrainingExample::new(vec![4, 40], vec![4]).unwrap()];
        let cfg = EvalConfig::new(Task::PrefixCopy, LengthPolicy::Reference);
        assert!(matches!(evaluate(&m, &ex, &cfg), Err(Error::VocabMismatch { model: 12, corpus: 40 })));
    }

    #[test]
    fn ttest_requires_matching_records() {
        let dir = tempfile::tempdir().unwrap();
        let r = |id, l, g| GenerationRecord {
            id,
            l,
            generated_len: g,
            cap_hit: false,
            generated: vec![],
            reference: vec![],
        };
        let a = vec![r(0, 10, 12), r(1, 10, 14), r(2, 10, 16), r(3, 10, 18)];
        let b = vec![r(0, 10, 11), r(1, 10, 12), r(2, 10, 13), r(3, 10, 14)];
        let t = write_ttest(dir.path(), "a", &a, "b", &b).unwrap();
        assert!((t.t - 3.872983346207417).abs() < 1e-9);
        assert!(write_ttest(dir.path(), "a", &a[..3], "b", &b).is_err());
    }
}
