use std::collections::BTreeMap;
use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome of generating toward one requested length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: usize,
    /// Requested length.
    pub l: usize,
    pub generated_len: usize,
    pub cap_hit: bool,
    pub generated: Vec<u32>,
    pub reference: Vec<u32>,
}

impl GenerationRecord {
    pub fn abs_error(&self) -> usize {
        self.generated_len.abs_diff(self.l)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaeSummary {
    pub mae: f64,
    /// Population standard deviation of the absolute errors.
    pub sd: f64,
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = values.clone().count();
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt(), n)
}

pub fn length_mae(records: &[GenerationRecord]) -> Result<MaeSummary> {
    if records.is_empty() {
        return Err(Error::Empty("records"));
    }
    let (mae, sd, _) = mean_sd(records.iter().map(|r| r.abs_error() as f64));
    Ok(MaeSummary { mae, sd })
}

/// Fraction of records whose absolute length error exceeds `threshold`.
pub fn outlier_rate(records: &[GenerationRecord], threshold: usize) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.abs_error() > threshold).count() as f64 / records.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketReport {
    /// Inclusive lower bound on the requested length.
    pub lo: usize,
    /// Exclusive upper bound.
    pub hi: usize,
    pub mae: f64,
    pub sd: f64,
    pub count: usize,
    pub outlier_rate: f64,
}

/// Groups records by requested length into `[k w, (k + 1) w)` buckets;
/// only populated buckets are reported, in ascending order.
pub fn bucket_report(records: &[GenerationRecord], width: usize, threshold: usize) -> Result<Vec<BucketReport>> {
    if width == 0 {
        return Err(Error::Config("bucket width must be at least 1".into()));
    }
    let mut groups: BTreeMap<usize, Vec<&GenerationRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.l / width).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|(k, rs)| {
            let (mae, sd, count) = mean_sd(rs.iter().map(|r| r.abs_error() as f64));
            BucketReport {
                lo: k * width,
                hi: (k + 1) * width,
                mae,
                sd,
                count,
                outlier_rate: rs.iter().filter(|r| r.abs_error() > threshold).count() as f64 / count as f64,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Rouge {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
}

fn f1(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts<T: Hash + Eq + Copy>(xs: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if xs.len() >= n {
        for w in xs.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram overlap F1.
pub fn rouge_n<T: Hash + Eq + Copy>(cand: &[T], reference: &[T], n: usize) -> f64 {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let overlap: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    f1(overlap, c.values().sum(), r.values().sum())
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-1, ROUGE-2 and ROUGE-L F1 on raw token ids.
pub fn rouge<T: Hash + Eq + Copy>(cand: &[T], reference: &[T]) -> Rouge {
    Rouge {
        r1: rouge_n(cand, reference, 1),
        r2: rouge_n(cand, reference, 2),
        rl: f1(lcs_len(cand, reference), cand.len(), reference.len()),
    }
}

/// Mean ROUGE over records.
pub fn mean_rouge(records: &[GenerationRecord]) -> Rouge {
    if records.is_empty() {
        return Rouge::default();
    }
    let n = records.len() as f64;
    let mut acc = Rouge::default();
    for r in records {
        let s = rouge(&r.generated, &r.reference);
        acc.r1 += s.r1;
        acc.r2 += s.r2;
        acc.rl += s.rl;
    }
    Rouge {
        r1: acc.r1 / n,
        r2: acc.r2 / n,
        rl: acc.rl / n,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramRow {
    /// `reference` or `generated`.
    pub series: &'static str,
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub density: f64,
}

/// Density histograms of requested and generated lengths on a shared grid.
pub fn length_histogram(records: &[GenerationRecord], width: usize) -> Result<Vec<HistogramRow>> {
    if width == 0 {
        return Err(Error::Config("bin width must be at least 1".into()));
    }
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let top = records.iter().map(|r| r.l.max(r.generated_len)).max().unwrap_or(0);
    let bins = top / width + 1;
    let n = records.len() as f64;
    let mut rows = Vec::with_capacity(2 * bins);
    for (series, len) in [
        ("reference", (|r: &GenerationRecord| r.l) as fn(&GenerationRecord) -> usize),
        ("generated", |r: &GenerationRecord| r.generated_len),
    ] {
        let mut counts = vec![0usize; bins];
        for r in records {
            counts[len(r) / width] += 1;
        }
        for (k, &count) in counts.iter().enumerate() {
            rows.push(HistogramRow {
                series,
                lo: k * width,
                hi: (k + 1) * width,
                count,
                density: count as f64 / (n * width as f64),
            });
        }
    }
    Ok(rows)
}
