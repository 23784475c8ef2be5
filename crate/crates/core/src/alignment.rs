//! Max-cosine alignment between two feature dictionaries.
//!
//! For every source row `r` the table stores the best cosine over target
//! rows and its arg-max `u`. Tables are directional: `align(A, B)` and
//! `align(B, A)` answer different questions and are never merged. The
//! unaligned set of `A → B` is the complementarity set `A \ B`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coders::{FeatureCoder, FeatureCoderHandle};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentEntry {
    pub feature: usize,
    pub score: f64,
    pub matched: usize,
    /// The source row (or every target row) is zero; score is 0.
    pub zero_norm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTable {
    pub source: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_handle: Option<FeatureCoderHandle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_handle: Option<FeatureCoderHandle>,
    pub target_size: usize,
    pub entries: Vec<AlignmentEntry>,
}

impl AlignmentTable {
    pub fn direction(&self) -> String {
        format!("{}→{}", self.source, self.target)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `r,mcs,u,zero_norm` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("r,mcs,u,zero_norm\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{},{}\n", e.feature, e.score, e.matched, e.zero_norm));
        }
        s
    }
}

fn unit_rows(m: &Matrix) -> (Vec<Vec<f64>>, Vec<bool>) {
    m.row_iter()
        .map(|r| {
            let n = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if n == 0.0 {
                (vec![0.0; r.len()], false)
            } else {
                (r.iter().map(|&v| v as f64 / n).collect(), true)
            }
        })
        .unzip()
}

/// Normalize once, then scan the target in cache-sized blocks.
pub fn align_dictionaries(a: &Matrix, b: &Matrix) -> Result<AlignmentTable> {
    if a.cols() != b.cols() {
        return Err(Error::shape(format!(
            "dictionaries live in {}- and {}-dimensional spaces",
            a.cols(),
            b.cols()
        )));
    }
    if b.rows() == 0 {
        return Err(Error::Empty("target dictionary"));
    }
    let (ua, a_live) = unit_rows(a);
    let (ub, b_live) = unit_rows(b);
    const BLOCK: usize = 64;
    let entries = (0..a.rows())
        .into_par_iter()
        .map(|r| {
            if !a_live[r] {
                return AlignmentEntry {
                    feature: r,
                    score: 0.0,
                    matched: 0,
                    zero_norm: true,
                };
            }
            let x = &ua[r];
            let mut best: Option<(f64, usize)> = None;
            for start in (0..ub.len()).step_by(BLOCK) {
                for (k, y) in ub[start..(start + BLOCK).min(ub.len())].iter().enumerate() {
                    let k = start + k;
                    if !b_live[k] {
                        continue;
                    }
                    let c = x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>().clamp(-1.0, 1.0);
                    if best.is_none_or(|(s, _)| c > s) {
                        best = Some((c, k));
                    }
                }
            }
            match best {
                Some((score, matched)) => AlignmentEntry {
                    feature: r,
                    score,
                    matched,
                    zero_norm: false,
                },
                None => AlignmentEntry {
                    feature: r,
                    score: 0.0,
                    matched: 0,
                    zero_norm: true,
                },
            }
        })
        .collect();
    Ok(AlignmentTable {
        source: "A".into(),
        target: "B".into(),
        source_handle: None,
        target_handle: None,
        target_size: b.rows(),
        entries,
    })
}

/// Align the dictionaries of two coders (W_V or W_dec rows).
pub fn align_coders(a: &FeatureCoder, b: &FeatureCoder) -> Result<AlignmentTable> {
    let mut t = align_dictionaries(a.dictionary(), b.dictionary())?;
    t.source = a.kind().to_string();
    t.target = b.kind().to_string();
    t.source_handle = Some(a.handle());
    t.target_handle = Some(b.handle());
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub direction: String,
    pub low: f64,
    pub high: f64,
    /// MCS > high.
    pub aligned: Vec<usize>,
    /// MCS < low.
    pub unaligned: Vec<usize>,
    pub middle: Vec<usize>,
    pub total: usize,
}

impl PartitionReport {
    pub fn fraction_aligned(&self) -> f64 {
        self.aligned.len() as f64 / self.total.max(1) as f64
    }

    pub fn fraction_unaligned(&self) -> f64 {
        self.unaligned.len() as f64 / self.total.max(1) as f64
    }

    pub fn fraction_middle(&self) -> f64 {
        self.middle.len() as f64 / self.total.max(1) as f64
    }
}

pub const DEFAULT_LOW: f64 = 0.3;
pub const DEFAULT_HIGH: f64 = 0.9;

pub fn partition(table: &AlignmentTable, low: f64, high: f64) -> Result<PartitionReport> {
    if !(low < high) {
        return Err(Error::invalid(format!("thresholds ({low}, {high}) are not increasing")));
    }
    let mut r = PartitionReport {
        direction: table.direction(),
        low,
        high,
        aligned: Vec::new(),
        unaligned: Vec::new(),
        middle: Vec::new(),
        total: table.len(),
    };
    for e in &table.entries {
        if e.score > high {
            r.aligned.push(e.feature);
        } else if e.score < low {
            r.unaligned.push(e.feature);
        } else {
            r.middle.push(e.feature);
        }
    }
    Ok(r)
}

/// Partitions of both directions of a dictionary pair.
pub fn partition_both(
    forward: &AlignmentTable,
    reverse: &AlignmentTable,
    low: f64,
    high: f64,
) -> Result<[PartitionReport; 2]> {
    Ok([partition(forward, low, high)?, partition(reverse, low, high)?])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub direction: String,
    /// Bin `i` covers `[i/bins, (i+1)/bins)`; the last bin is closed.
    pub counts: Vec<usize>,
    /// Negative scores counted in bin 0.
    pub clamped_negative: usize,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bounds(&self, bin: usize) -> (f64, f64) {
        let n = self.bins() as f64;
        (bin as f64 / n, (bin + 1) as f64 / n)
    }
}

fn bin_of(score: f64, bins: usize) -> usize {
    ((score.max(0.0) * bins as f64).floor() as usize).min(bins - 1)
}

pub fn bin_histogram(table: &AlignmentTable, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    let mut counts = vec![0; bins];
    let mut clamped_negative = 0;
    for e in &table.entries {
        if e.score < 0.0 {
            clamped_negative += 1;
        }
        counts[bin_of(e.score, bins)] += 1;
    }
    Ok(Histogram {
        direction: table.direction(),
        counts,
        clamped_negative,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationPair {
    pub source_feature: usize,
    pub target_feature: usize,
    pub bin: usize,
    pub score: f64,
}

/// Up to `per_bin` pairs drawn without replacement from every bin.
pub fn sample_pairs_for_annotation(
    table: &AlignmentTable,
    bins: usize,
    per_bin: usize,
    seed: u64,
) -> Result<Vec<AnnotationPair>> {
    if bins == 0 || per_bin == 0 {
        return Err(Error::invalid("bins and per_bin must be positive"));
    }
    let mut members: Vec<Vec<&AlignmentEntry>> = vec![Vec::new(); bins];
    for e in table.entries.iter().filter(|e| !e.zero_norm) {
        members[bin_of(e.score, bins)].push(e);
    }
    let root = RngStream::new(seed, 0xb1);
    let mut out = Vec::new();
    for (bin, m) in members.iter().enumerate() {
        if m.is_empty() {
            continue;
        }
        if m.len() < per_bin {
            log::info!("bin {bin} holds {} features, fewer than {per_bin}", m.len());
        }
        let mut rng = root.fork(bin as u64);
        for i in rng.sample_indices(m.len(), per_bin.min(m.len())) {
            out.push(AnnotationPair {
                source_feature: m[i].feature,
                target_feature: m[i].matched,
                bin,
                score: m[i].score,
            });
        }
    }
    Ok(out)
}

/// Everything the alignment step writes for one dictionary pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub forward: AlignmentTable,
    pub reverse: AlignmentTable,
    pub partitions: [PartitionReport; 2],
    pub histograms: [Histogram; 2],
}

impl AlignmentReport {
    pub fn build(forward: AlignmentTable, reverse: AlignmentTable, low: f64, high: f64, bins: usize) -> Result<Self> {
        Ok(Self {
            partitions: partition_both(&forward, &reverse, low, high)?,
            histograms: [bin_histogram(&forward, bins)?, bin_histogram(&reverse, bins)?],
            forward,
            reverse,
        })
    }
}
