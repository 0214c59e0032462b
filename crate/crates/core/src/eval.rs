//! ROUGE scoring, abstractness and corpus statistics.
//!
//! Text is normalized by lowercasing and splitting on non-alphanumeric
//! characters. No stemming and no stopword removal.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Largest fraction of samples that may be skipped before a report fails.
pub const MAX_SKIPPED_FRACTION: f64 = 0.10;
pub const ABSTRACTNESS_ORDERS: [usize; 4] = [1, 2, 3, 4];

pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_counts(overlap: usize, candidate: usize, reference: usize) -> Self {
        if candidate == 0 || reference == 0 {
            return Self::default();
        }
        let p = overlap as f64 / candidate as f64;
        let r = overlap as f64 / reference as f64;
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        Self { precision: p, recall: r, f1 }
    }

    /// Precision, recall and F1 as percentages rounded to two decimals.
    pub fn percent(&self) -> [f64; 3] {
        [self.precision, self.recall, self.f1].map(|v| round_half_up(v * 100.0, 2))
    }
}

/// Rounds non-negative `x` to `decimals` places, halves going up.
pub fn round_half_up(x: f64, decimals: u32) -> f64 {
    let s = 10f64.powi(decimals as i32);
    // The nudge absorbs representation error in values like 0.125·100.
    ((x * s) + 0.5 + 1e-9).floor() / s
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if n == 0 {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w).or_insert(0) += 1;
    }
    out
}

/// Clipped n-gram overlap.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> RougeScore {
    let (c, r) = (normalize(candidate), normalize(reference));
    let (cc, rc) = (ngram_counts(&c, n), ngram_counts(&r, n));
    let overlap = cc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum();
    RougeScore::from_counts(overlap, cc.values().sum(), rc.values().sum())
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    let (c, r) = (normalize(candidate), normalize(reference));
    RougeScore::from_counts(lcs_len(&c, &r), c.len(), r.len())
}

/// Percentage of distinct target n-grams (over all `orders`) that never
/// occur in the source.
pub fn novel_ngram_pct(source: &str, target: &str, orders: &[usize]) -> Result<f64> {
    let (s, t) = (normalize(source), normalize(target));
    if t.is_empty() {
        return Err(Error::InvalidArgument("abstractness of an empty target".into()));
    }
    let mut total = 0usize;
    let mut novel = 0usize;
    for &n in orders {
        let src: HashSet<&[String]> = ngram_counts(&s, n).into_keys().collect();
        for g in ngram_counts(&t, n).into_keys() {
            total += 1;
            if !src.contains(g) {
                novel += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument("target has no n-grams of the requested orders".into()));
    }
    Ok(100.0 * novel as f64 / total as f64)
}

/// Produces a summary for one sample.
pub trait Summarizer: Sync {
    fn summarize(&self, sample: &EvalSample) -> Result<String>;
}

/// A corpus entry. `source` is `None` when its text could not be read.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub id: String,
    pub split: String,
    pub source: Option<String>,
    pub target: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusStats {
    pub samples: usize,
    pub avg_source_tokens: f64,
    pub avg_target_tokens: f64,
    pub novel_ngram_pct: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RougeMeans {
    pub count: usize,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub id: String,
    pub split: String,
    pub prediction: String,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusReport {
    pub stats: CorpusStats,
    /// Mean scores per split, present only when a summarizer was given.
    pub rouge: BTreeMap<String, RougeMeans>,
    pub scores: Vec<SampleScore>,
    /// `(id, reason)` for every sample left out.
    pub skipped: Vec<(String, String)>,
}

fn mean_score(scores: &[RougeScore]) -> RougeScore {
    let n = scores.len().max(1) as f64;
    let mut m = RougeScore::default();
    for s in scores {
        m.precision += s.precision;
        m.recall += s.recall;
        m.f1 += s.f1;
    }
    RougeScore { precision: m.precision / n, recall: m.recall / n, f1: m.f1 / n }
}

enum Outcome {
    Stats { src: usize, tgt: usize, novel: f64, score: Option<SampleScore> },
    Skipped(String),
}

/// Corpus statistics and, with a summarizer, per-split mean ROUGE.
/// Samples are processed in parallel and aggregated in index order.
pub fn corpus_report(samples: &[EvalSample], summarizer: Option<&dyn Summarizer>) -> Result<CorpusReport> {
    let outcomes: Vec<Outcome> = samples
        .par_iter()
        .map(|s| {
            let Some(source) = &s.source else {
                return Outcome::Skipped("source text is missing".into());
            };
            let novel = match novel_ngram_pct(source, &s.target, &ABSTRACTNESS_ORDERS) {
                Ok(v) => v,
                Err(e) => return Outcome::Skipped(e.to_string()),
            };
            let score = match summarizer.map(|m| m.summarize(s)) {
                None => None,
                Some(Err(e)) => return Outcome::Skipped(format!("summarization failed: {e}")),
                Some(Ok(pred)) => Some(SampleScore {
                    id: s.id.clone(),
                    split: s.split.clone(),
                    rouge1: rouge_n(&pred, &s.target, 1),
                    rouge2: rouge_n(&pred, &s.target, 2),
                    rouge_l: rouge_l(&pred, &s.target),
                    prediction: pred,
                }),
            };
            Outcome::Stats { src: normalize(source).len(), tgt: normalize(&s.target).len(), novel, score }
        })
        .collect();

    let mut report = CorpusReport::default();
    let (mut src, mut tgt, mut novel) = (0usize, 0usize, 0.0);
    for (s, o) in samples.iter().zip(outcomes) {
        match o {
            Outcome::Skipped(why) => report.skipped.push((s.id.clone(), why)),
            Outcome::Stats { src: a, tgt: b, novel: c, score } => {
                report.stats.samples += 1;
                src += a;
                tgt += b;
                novel += c;
                report.scores.extend(score);
            }
        }
    }
    if !samples.is_empty() && report.skipped.len() as f64 > MAX_SKIPPED_FRACTION * samples.len() as f64 {
        let ids: Vec<&str> = report.skipped.iter().map(|(id, _)| id.as_str()).collect();
        return Err(Error::Data(format!(
            "{} of {} samples skipped: {}",
            report.skipped.len(),
            samples.len(),
            ids.join(", ")
        )));
    }
    let n = report.stats.samples;
    if n > 0 {
        report.stats.avg_source_tokens = src as f64 / n as f64;
        report.stats.avg_target_tokens = tgt as f64 / n as f64;
        report.stats.novel_ngram_pct = novel / n as f64;
    }
    let mut by_split: BTreeMap<String, Vec<&SampleScore>> = BTreeMap::new();
    for s in &report.scores {
        by_split.entry(s.split.clone()).or_default().push(s);
    }
    for (split, v) in by_split {
        let pick = |f: fn(&SampleScore) -> RougeScore| mean_score(&v.iter().map(|s| f(s)).collect::<Vec<_>>());
        let means = RougeMeans {
            count: v.len(),
            rouge1: pick(|s| s.rouge1),
            rouge2: pick(|s| s.rouge2),
            rouge_l: pick(|s| s.rouge_l),
        };
        report.rouge.insert(split, means);
    }
    Ok(report)
}

impl CorpusReport {
    /// One row per split with F1 and recall percentages.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,count,r1_f1,r2_f1,rl_f1,r1_recall,r2_recall,rl_recall\n");
        for (split, m) in &self.rouge {
            let [_, r1r, r1] = m.rouge1.percent();
            let [_, r2r, r2] = m.rouge2.percent();
            let [_, rlr, rl] = m.rouge_l.percent();
            let _ = writeln!(s, "{split},{},{r1:.2},{r2:.2},{rl:.2},{r1r:.2},{r2r:.2},{rlr:.2}", m.count);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let st = &self.stats;
        let mut s = String::new();
        let _ = writeln!(s, "samples            {}", st.samples);
        let _ = writeln!(s, "avg source tokens  {:.2}", round_half_up(st.avg_source_tokens, 2));
        let _ = writeln!(s, "avg target tokens  {:.2}", round_half_up(st.avg_target_tokens, 2));
        let _ = writeln!(s, "novel n-grams %    {:.2}", round_half_up(st.novel_ngram_pct, 2));
        if !self.rouge.is_empty() {
            let _ = writeln!(s, "\n{:<8} {:>5} {:>7} {:>7} {:>7}", "split", "n", "R-1", "R-2", "R-L");
            for (split, m) in &self.rouge {
                let _ = writeln!(
                    s,
                    "{:<8} {:>5} {:>7.2} {:>7.2} {:>7.2}",
                    split,
                    m.count,
                    m.rouge1.percent()[2],
                    m.rouge2.percent()[2],
                    m.rouge_l.percent()[2]
                );
            }
        }
        for (id, why) in &self.skipped {
            let _ = writeln!(s, "skipped {id}: {why}");
        }
        s
    }
}
