//! Corpus-level BLEU-1..4, ROUGE-L and CIDEr over multi-reference captions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{CaptionDataset, Split};

pub const ROUGE_BETA: f64 = 1.2;

/// One candidate caption with its references.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalInstance {
    pub image_id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub count: usize,
}

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Reference length closest to `c`, preferring the shorter one on ties.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Corpus BLEU-1 through BLEU-`n_max`.
pub fn bleu(instances: &[EvalInstance], n_max: usize) -> Vec<f64> {
    let mut matched = vec![0usize; n_max];
    let mut total = vec![0usize; n_max];
    let (mut c, mut r) = (0usize, 0usize);
    for inst in instances {
        c += inst.candidate.len();
        r += closest_ref_len(inst.candidate.len(), &inst.references);
        for n in 1..=n_max {
            let cand = ngram_counts(&inst.candidate, n);
            let mut max_ref: Counts<'_> = BTreeMap::new();
            for rf in &inst.references {
                for (g, k) in ngram_counts(rf, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in cand {
                matched[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    let bp = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let mut out = Vec::with_capacity(n_max);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..n_max {
        if matched[n] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n] as f64 / total[n] as f64).ln();
        }
        out.push(if zero {
            0.0
        } else {
            bp * (log_sum / (n + 1) as f64).exp()
        });
    }
    out
}

pub(crate) fn lcs_len(a: &[String], b: &[String]) -> usize {
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

/// LCS F-measure of one candidate against one reference.
pub fn rouge_l_pair(cand: &[String], reference: &[String], beta: f64) -> f64 {
    let lcs = lcs_len(cand, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over instances of the best per-reference ROUGE-L F score.
pub fn rouge_l(instances: &[EvalInstance], beta: f64) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    let sum: f64 = instances
        .iter()
        .map(|inst| {
            inst.references
                .iter()
                .map(|r| rouge_l_pair(&inst.candidate, r, beta))
                .fold(0.0, f64::max)
        })
        .sum();
    sum / instances.len() as f64
}

fn tfidf<'a>(
    counts: &Counts<'a>,
    idf: &BTreeMap<&'a [String], f64>,
    fallback: f64,
) -> (BTreeMap<&'a [String], f64>, f64) {
    let vec: BTreeMap<&[String], f64> = counts
        .iter()
        .map(|(g, &k)| (*g, k as f64 * idf.get(g).copied().unwrap_or(fallback)))
        .collect();
    let norm = vec.values().map(|v| v * v).sum::<f64>().sqrt();
    (vec, norm)
}

/// CIDEr, basic variant: raw-count tf, idf over the images' reference sets,
/// cosine averaged over references and over n = 1..=`n_max`, scaled by 10.
pub fn cider(instances: &[EvalInstance], n_max: usize) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    let images = instances.len() as f64;
    if instances.len() < 2 {
        log::warn!("CIDEr over a single image: idf is zero for every n-gram, score is 0");
    }
    let mut total = 0.0;
    let mut per_image = vec![0.0; instances.len()];
    for n in 1..=n_max {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for inst in instances {
            let mut seen = BTreeSet::new();
            for r in &inst.references {
                seen.extend(ngram_counts(r, n).into_keys());
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf: BTreeMap<&[String], f64> = df
            .iter()
            .map(|(g, &d)| (*g, images.ln() - (d.max(1) as f64).ln()))
            .collect();
        let unseen = images.ln();
        for (i, inst) in instances.iter().enumerate() {
            let (cv, cn) = tfidf(&ngram_counts(&inst.candidate, n), &idf, unseen);
            let mut s = 0.0;
            for r in &inst.references {
                let (rv, rn) = tfidf(&ngram_counts(r, n), &idf, unseen);
                if cn > 0.0 && rn > 0.0 {
                    let dot: f64 = cv.iter().map(|(g, v)| v * rv.get(g).copied().unwrap_or(0.0)).sum();
                    s += dot / (cn * rn);
                }
            }
            per_image[i] += s / inst.references.len() as f64;
        }
    }
    for v in per_image {
        total += 10.0 * v / n_max as f64;
    }
    total / images
}

pub fn report(instances: &[EvalInstance]) -> MetricReport {
    let b = bleu(instances, 4);
    MetricReport {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        rouge_l: rouge_l(instances, ROUGE_BETA),
        cider: cider(instances, 4),
        count: instances.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub id: String,
    pub tokens: Vec<String>,
}

pub fn read_candidates(reader: impl BufRead) -> Result<Vec<CandidateRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Data(format!("candidates line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Scores candidates against the references of `split`.
pub fn evaluate_corpus(candidates: &[CandidateRecord], dataset: &CaptionDataset, split: Split) -> Result<MetricReport> {
    if candidates.is_empty() {
        return Err(Error::Data("no candidates to evaluate".into()));
    }
    let refs: BTreeMap<&str, &Vec<Vec<String>>> = dataset.split(split).map(|r| (r.id.as_str(), &r.captions)).collect();
    let mut seen = BTreeSet::new();
    let mut instances = Vec::with_capacity(candidates.len());
    for c in candidates {
        if !seen.insert(c.id.as_str()) {
            return Err(Error::Data(format!("duplicate candidate id {:?}", c.id)));
        }
        let references = refs
            .get(c.id.as_str())
            .ok_or_else(|| Error::Data(format!("candidate id {:?} is not in the {split} split", c.id)))?;
        instances.push(EvalInstance {
            image_id: c.id.clone(),
            candidate: c.tokens.clone(),
            references: (*references).clone(),
        });
    }
    if seen.len() < refs.len() {
        log::warn!(
            "{} of {} {split} images have no candidate",
            refs.len() - seen.len(),
            refs.len()
        );
    }
    Ok(report(&instances))
}

pub const TABLE_COLUMNS: [&str; 7] = ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "CIDEr", "ROUGE-L"];

/// Aligned text table, one row per labelled report; `None` marks a failed row.
pub fn format_table(label_header: &str, rows: &[(String, Option<MetricReport>)]) -> String {
    let mut cells: Vec<Vec<String>> = Vec::with_capacity(rows.len() + 1);
    let mut header = vec![label_header.to_string()];
    header.extend(TABLE_COLUMNS.iter().map(|s| s.to_string()));
    cells.push(header);
    for (label, rep) in rows {
        let mut row = vec![label.clone()];
        match rep {
            Some(r) => {
                for v in [r.bleu1, r.bleu2, r.bleu3, r.bleu4] {
                    row.push(format!("{v:.4}"));
                }
                row.push("n/a".into());
                row.push(format!("{:.4}", r.cider));
                row.push(format!("{:.4}", r.rouge_l));
            }
            None => row.extend(std::iter::repeat_n("failed".to_string(), TABLE_COLUMNS.len())),
        }
        cells.push(row);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i == 0 {
                    format!("{s:<w$}", w = widths[i])
                } else {
                    format!("{s:>w$}", w = widths[i])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  "));
    }
    out
}
