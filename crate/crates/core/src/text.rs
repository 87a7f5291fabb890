//! Tokenization, vocabulary, caption datasets and the maximum-length
//! caption selection policy used to build training pairs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const START: usize = 0;
pub const END: usize = 1;
pub const UNK: usize = 2;
pub const PAD: usize = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<start>", "<end>", "<unk>", "<pad>"];

/// Lowercases, splits on whitespace and strips leading/trailing ASCII
/// punctuation from each token. Interior punctuation is kept.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    /// Stable 80/10/10 assignment from the id's FNV-1a hash.
    pub fn for_id(id: &str) -> Split {
        match crate::seed::fnv1a(id) % 10 {
            8 => Split::Dev,
            9 => Split::Test,
            _ => Split::Train,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// One image together with its reference captions.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub split: Split,
    pub captions: Vec<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    split: Split,
    captions: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CaptionDataset {
    records: Vec<ImageRecord>,
}

impl CaptionDataset {
    /// Validates and wraps a set of records.
    pub fn new(records: Vec<ImageRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate image id {:?}", r.id)));
            }
            if r.captions.is_empty() {
                return Err(Error::Data(format!("image {:?} has no captions", r.id)));
            }
            if r.captions.iter().any(Vec::is_empty) {
                return Err(Error::Data(format!("image {:?} has an empty caption", r.id)));
            }
        }
        Ok(CaptionDataset { records })
    }

    /// Reads the JSON Lines captions format, one image per line.
    pub fn read_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RecordLine =
                serde_json::from_str(&line).map_err(|e| Error::Data(format!("captions line {}: {e}", lineno + 1)))?;
            records.push(ImageRecord {
                id: rec.id,
                split: rec.split,
                captions: rec.captions.iter().map(|c| tokenize(c)).collect(),
            });
        }
        CaptionDataset::new(records)
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            let line = RecordLine {
                id: r.id.clone(),
                split: r.split,
                captions: r.captions.iter().map(|c| c.join(" ")).collect(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Bidirectional token/index map. Indices `0..4` are the special tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    min_count: usize,
    /// Retained tokens in index order, specials first.
    tokens: Vec<String>,
    /// Training-split frequency of each retained non-special token.
    counts: BTreeMap<String, usize>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds the vocabulary from the training split, keeping tokens seen at
    /// least `min_count` times. Order: specials, then descending frequency,
    /// then ascending lexicographic.
    pub fn build(dataset: &CaptionDataset, min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for rec in dataset.split(Split::Train) {
            any = true;
            for tok in rec.captions.iter().flatten() {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::Data("cannot build a vocabulary without a train split".into()));
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && !SPECIAL_TOKENS.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(kept.iter().map(|(t, _)| t.to_string()));
        let counts = kept.iter().map(|&(t, c)| (t.to_string(), c)).collect();
        Ok(Vocabulary::from_parts(min_count, tokens, counts))
    }

    fn from_parts(min_count: usize, tokens: Vec<String>, counts: BTreeMap<String, usize>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            min_count,
            tokens,
            counts,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn count(&self, token: &str) -> Option<usize> {
        self.counts.get(token).copied()
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.index_of(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.tokens.get(i).cloned().ok_or(Error::Range {
                    index: i,
                    len: self.tokens.len(),
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: Vocabulary = serde_json::from_str(s)?;
        if v.tokens.len() < SPECIAL_TOKENS.len() || v.tokens.iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b) {
            return Err(Error::Format("vocabulary must start with the special tokens".into()));
        }
        Ok(Vocabulary::from_parts(v.min_count, v.tokens, v.counts))
    }
}

/// Teacher-forcing pair for one caption, padded to `max_len + 1` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub image_id: String,
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TrainingPair {
    /// `ids` must not be longer than `max_len`.
    pub fn new(image_id: &str, ids: &[usize], max_len: usize) -> Result<Self> {
        if ids.len() > max_len {
            return Err(Error::Data(format!(
                "caption of {} tokens exceeds max_len {max_len}",
                ids.len()
            )));
        }
        let steps = max_len + 1;
        let mut input_ids = vec![PAD; steps];
        let mut target_ids = vec![PAD; steps];
        let mut mask = vec![false; steps];
        input_ids[0] = START;
        input_ids[1..=ids.len()].copy_from_slice(ids);
        target_ids[..ids.len()].copy_from_slice(ids);
        target_ids[ids.len()] = END;
        mask[..=ids.len()].iter_mut().for_each(|m| *m = true);
        Ok(TrainingPair {
            image_id: image_id.to_string(),
            input_ids,
            target_ids,
            mask,
        })
    }

    /// Number of positions that contribute to the loss (caption length + 1).
    pub fn active_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Applies the maximum-length policy to one image's captions.
///
/// Captions of at most `max_len` tokens are kept. Longer ones are replaced
/// by a uniformly drawn sibling that fits; when no sibling fits, the shortest
/// caption truncated to `max_len` is used. The caption count never changes.
pub fn select_captions<R: Rng + ?Sized>(captions: &[Vec<String>], max_len: usize, rng: &mut R) -> Vec<Vec<String>> {
    let fitting: Vec<&Vec<String>> = captions.iter().filter(|c| c.len() <= max_len).collect();
    captions
        .iter()
        .map(|c| {
            if c.len() <= max_len {
                c.clone()
            } else if !fitting.is_empty() {
                fitting[rng.gen_range(0..fitting.len())].clone()
            } else {
                let shortest = captions
                    .iter()
                    .min_by_key(|c| c.len())
                    .expect("records have at least one caption");
                shortest[..max_len].to_vec()
            }
        })
        .collect()
}

/// Builds teacher-forcing pairs for every caption of `split`, applying the
/// maximum-length policy.
pub fn select_training_captions<R: Rng + ?Sized>(
    dataset: &CaptionDataset,
    vocab: &Vocabulary,
    split: Split,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<TrainingPair>> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut pairs = Vec::new();
    for rec in dataset.split(split) {
        for caption in select_captions(&rec.captions, max_len, rng) {
            pairs.push(TrainingPair::new(&rec.id, &vocab.encode(&caption), max_len)?);
        }
    }
    Ok(pairs)
}
