//! Negative examples: single-slot corruptions of the true form (role deletion,
//! filler deletion, filler swap) and mismatched forms borrowed from other
//! sentences. Builds the balanced classification corpus and the triplet corpus.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::linearize::linearize_form;
use crate::rng::{substream, Rng};
use crate::semform::{form_to_value, parse_form_value, SemanticForm, SemformError, SentenceRecord};

/// Anchors per independently seeded partition when building corpora.
pub const PARTITION_SIZE: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum CorruptError {
    #[error("form has {0} roles; role deletion needs at least 2")]
    TooFewRoles(usize),
    #[error("form has no filled role")]
    NoFiller,
    #[error("form has no two filled roles with different fillers")]
    NotSwappable,
    #[error("corpus too small: no eligible form for sentence `{0}`")]
    CorpusTooSmall(String),
    #[error("invalid corruption mix: {0}")]
    Mix(String),
    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    DeleteRole,
    DeleteFiller,
    SwapFillers,
    Mismatch,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::DeleteRole,
        CorruptionKind::DeleteFiller,
        CorruptionKind::SwapFillers,
        CorruptionKind::Mismatch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::DeleteRole => "delete_role",
            CorruptionKind::DeleteFiller => "delete_filler",
            CorruptionKind::SwapFillers => "swap_fillers",
            CorruptionKind::Mismatch => "mismatch",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = CorruptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CorruptError::Mix(format!("unknown corruption kind `{s}`")))
    }
}

pub fn delete_role(form: &SemanticForm, rng: &mut Rng) -> Result<SemanticForm, CorruptError> {
    if form.roles.len() < 2 {
        return Err(CorruptError::TooFewRoles(form.roles.len()));
    }
    let i = rng.gen_range(0..form.roles.len());
    Ok(delete_role_at(form, i))
}

pub fn delete_role_at(form: &SemanticForm, index: usize) -> SemanticForm {
    let mut out = form.clone();
    out.roles.remove(index);
    out
}

pub fn delete_filler(form: &SemanticForm, rng: &mut Rng) -> Result<SemanticForm, CorruptError> {
    let filled: Vec<usize> = form
        .roles
        .iter()
        .enumerate()
        .filter(|(_, r)| r.filler.is_some())
        .map(|(i, _)| i)
        .collect();
    let &i = filled.choose(rng).ok_or(CorruptError::NoFiller)?;
    let mut out = form.clone();
    out.roles[i].filler = None;
    Ok(out)
}

pub fn swap_fillers(form: &SemanticForm, rng: &mut Rng) -> Result<SemanticForm, CorruptError> {
    let mut pairs = Vec::new();
    for i in 0..form.roles.len() {
        for j in i + 1..form.roles.len() {
            let (a, b) = (&form.roles[i].filler, &form.roles[j].filler);
            if a.is_some() && b.is_some() && a != b {
                pairs.push((i, j));
            }
        }
    }
    let &(i, j) = pairs.choose(rng).ok_or(CorruptError::NotSwappable)?;
    let mut out = form.clone();
    let tmp = out.roles[i].filler.take();
    out.roles[i].filler = out.roles[j].filler.take();
    out.roles[j].filler = tmp;
    Ok(out)
}

/// Uniform sampling of forms that belong to a different sentence.
pub struct MismatchSampler<'a> {
    forms: Vec<&'a SemanticForm>,
    per_source: HashMap<&'a str, usize>,
}

impl<'a> MismatchSampler<'a> {
    pub fn new(forms: impl IntoIterator<Item = &'a SemanticForm>) -> Self {
        let forms: Vec<_> = forms.into_iter().collect();
        let mut per_source = HashMap::new();
        for f in &forms {
            *per_source.entry(f.source_sentence_id.as_str()).or_default() += 1;
        }
        MismatchSampler { forms, per_source }
    }

    pub fn from_records(records: &'a [SentenceRecord]) -> Self {
        Self::new(records.iter().flat_map(|r| r.forms.iter()))
    }

    pub fn eligible(&self, anchor_id: &str) -> usize {
        self.forms.len() - self.per_source.get(anchor_id).copied().unwrap_or(0)
    }

    pub fn sample(&self, anchor_id: &str, rng: &mut Rng) -> Result<&'a SemanticForm, CorruptError> {
        if self.eligible(anchor_id) == 0 {
            return Err(CorruptError::CorpusTooSmall(anchor_id.to_string()));
        }
        loop {
            let f = self.forms[rng.gen_range(0..self.forms.len())];
            if f.source_sentence_id != anchor_id {
                return Ok(f);
            }
        }
    }

    fn forms(&self) -> &[&'a SemanticForm] {
        &self.forms
    }
}

pub fn sample_mismatch(
    corpus: &[SentenceRecord],
    anchor_id: &str,
    rng: &mut Rng,
) -> Result<SemanticForm, CorruptError> {
    MismatchSampler::from_records(corpus)
        .sample(anchor_id, rng)
        .cloned()
}

/// One (sentence, form) alignment unit per form.
pub fn pairs_from_records(records: &[SentenceRecord]) -> Vec<(String, SemanticForm)> {
    records
        .iter()
        .flat_map(|r| r.forms.iter().map(|f| (r.sentence_id.clone(), f.clone())))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub sentence_id: String,
    pub form: SemanticForm,
    /// 1 = the form belongs to the sentence, 0 = mismatched.
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletExample {
    pub anchor_id: String,
    pub positive: SemanticForm,
    pub negative: SemanticForm,
    pub negative_kind: CorruptionKind,
    /// Kind originally drawn from the mix when it was inapplicable and the
    /// negative fell back to a mismatch.
    pub fallback_from: Option<CorruptionKind>,
}

fn partitions<T: Sync, R: Send>(
    items: &[T],
    seed: u64,
    f: impl Fn(&[T], &mut Rng) -> Result<Vec<R>, CorruptError> + Sync,
) -> Result<Vec<R>, CorruptError> {
    let chunks: Vec<Result<Vec<R>, CorruptError>> = items
        .par_chunks(PARTITION_SIZE)
        .enumerate()
        .map(|(i, chunk)| f(chunk, &mut substream(seed, i as u64)))
        .collect();
    let mut out = Vec::new();
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Balanced matched/mismatched corpus: every input pair contributes itself
/// with label 1 and one mismatched form with label 0. Output order is shuffled.
pub fn build_classification_corpus(
    pairs: &[(String, SemanticForm)],
    seed: u64,
) -> Result<Vec<PairExample>, CorruptError> {
    let sampler = MismatchSampler::new(pairs.iter().map(|(_, f)| f));
    let mut out = partitions(pairs, seed, |chunk, rng| {
        let mut v = Vec::with_capacity(chunk.len() * 2);
        for (sid, form) in chunk {
            v.push(PairExample {
                sentence_id: sid.clone(),
                form: form.clone(),
                label: 1,
            });
            v.push(PairExample {
                sentence_id: sid.clone(),
                form: sampler.sample(sid, rng)?.clone(),
                label: 0,
            });
        }
        Ok(v)
    })?;
    out.shuffle(&mut substream(seed, u64::MAX));
    Ok(out)
}

/// Sampling weights over the four corruption kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionMix {
    weights: [f64; 4],
}

impl CorruptionMix {
    pub fn new(weights: [f64; 4]) -> Result<Self, CorruptError> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CorruptError::Mix("weights must be finite and non-negative".into()));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(CorruptError::Mix("weights must not all be zero".into()));
        }
        Ok(CorruptionMix { weights })
    }

    pub fn uniform() -> Self {
        CorruptionMix {
            weights: [1.0; 4],
        }
    }

    pub fn only(kind: CorruptionKind) -> Self {
        let mut weights = [0.0; 4];
        weights[kind as usize] = 1.0;
        CorruptionMix { weights }
    }

    pub fn weight(&self, kind: CorruptionKind) -> f64 {
        self.weights[kind as usize]
    }
}

impl Default for CorruptionMix {
    fn default() -> Self {
        Self::uniform()
    }
}

/// Parses `kind=weight` entries separated by commas, e.g.
/// `delete_role=1,mismatch=2`. Unlisted kinds get weight 0.
impl FromStr for CorruptionMix {
    type Err = CorruptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim() == "uniform" {
            return Ok(Self::uniform());
        }
        let mut weights = [0.0; 4];
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, w) = part
                .split_once('=')
                .ok_or_else(|| CorruptError::Mix(format!("expected kind=weight, got `{part}`")))?;
            let kind: CorruptionKind = k.trim().parse()?;
            weights[kind as usize] = w
                .trim()
                .parse()
                .map_err(|_| CorruptError::Mix(format!("bad weight `{w}`")))?;
        }
        Self::new(weights)
    }
}

impl fmt::Display for CorruptionMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = CorruptionKind::ALL
            .iter()
            .map(|k| format!("{}={}", k, self.weight(*k)))
            .collect();
        f.write_str(&parts.join(","))
    }
}

pub fn corrupt(
    kind: CorruptionKind,
    form: &SemanticForm,
    rng: &mut Rng,
) -> Option<Result<SemanticForm, CorruptError>> {
    match kind {
        CorruptionKind::DeleteRole => Some(delete_role(form, rng)),
        CorruptionKind::DeleteFiller => Some(delete_filler(form, rng)),
        CorruptionKind::SwapFillers => Some(swap_fillers(form, rng)),
        CorruptionKind::Mismatch => None,
    }
}

fn same_linearization(a: &SemanticForm, b: &SemanticForm) -> bool {
    match (linearize_form(a), linearize_form(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => a.frame_name == b.frame_name && a.predicate == b.predicate && a.roles == b.roles,
    }
}

/// A mismatched form whose linearization differs from `positive`'s.
fn distinct_mismatch(
    sampler: &MismatchSampler<'_>,
    anchor_id: &str,
    positive: &SemanticForm,
    rng: &mut Rng,
) -> Result<SemanticForm, CorruptError> {
    for _ in 0..64 {
        let f = sampler.sample(anchor_id, rng)?;
        if !same_linearization(f, positive) {
            return Ok(f.clone());
        }
    }
    let eligible: Vec<&SemanticForm> = sampler
        .forms()
        .iter()
        .copied()
        .filter(|f| f.source_sentence_id != anchor_id && !same_linearization(f, positive))
        .collect();
    eligible
        .choose(rng)
        .map(|f| (*f).clone())
        .ok_or_else(|| CorruptError::CorpusTooSmall(anchor_id.to_string()))
}

/// `negatives_per_anchor` triplets per input pair, kinds drawn from `mix`.
/// An inapplicable corruption falls back to a mismatch and records the kind it
/// replaced.
pub fn build_triplet_corpus(
    pairs: &[(String, SemanticForm)],
    mix: &CorruptionMix,
    negatives_per_anchor: usize,
    seed: u64,
) -> Result<Vec<TripletExample>, CorruptError> {
    let sampler = MismatchSampler::new(pairs.iter().map(|(_, f)| f));
    let dist = WeightedIndex::new(mix.weights).map_err(|e| CorruptError::Mix(e.to_string()))?;
    partitions(pairs, seed, |chunk, rng| {
        let mut v = Vec::with_capacity(chunk.len() * negatives_per_anchor);
        for (sid, positive) in chunk {
            for _ in 0..negatives_per_anchor {
                let drawn = CorruptionKind::ALL[dist.sample(rng)];
                let (negative, kind, fallback_from) = match corrupt(drawn, positive, rng) {
                    Some(Ok(n)) => (n, drawn, None),
                    Some(Err(_)) => (
                        distinct_mismatch(&sampler, sid, positive, rng)?,
                        CorruptionKind::Mismatch,
                        Some(drawn),
                    ),
                    None => (
                        distinct_mismatch(&sampler, sid, positive, rng)?,
                        CorruptionKind::Mismatch,
                        None,
                    ),
                };
                v.push(TripletExample {
                    anchor_id: sid.clone(),
                    positive: positive.clone(),
                    negative,
                    negative_kind: kind,
                    fallback_from,
                });
            }
        }
        Ok(v)
    })
}

// Dataset files -------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PairLine {
    sentence_id: String,
    form: Value,
    label: u8,
}

#[derive(Serialize, Deserialize)]
struct TripletLine {
    anchor_id: String,
    positive: Value,
    negative: Value,
    kind: CorruptionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fallback_from: Option<CorruptionKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Classification(Vec<PairExample>),
    Triplet(Vec<TripletExample>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Classification(v) => v.len(),
            Dataset::Triplet(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn objective_name(&self) -> &'static str {
        match self {
            Dataset::Classification(_) => "classification",
            Dataset::Triplet(_) => "triplet",
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        match self {
            Dataset::Classification(v) => {
                for e in v {
                    let line = PairLine {
                        sentence_id: e.sentence_id.clone(),
                        form: form_to_value(&e.form),
                        label: e.label,
                    };
                    out.push_str(&serde_json::to_string(&line).unwrap());
                    out.push('\n');
                }
            }
            Dataset::Triplet(v) => {
                for e in v {
                    let line = TripletLine {
                        anchor_id: e.anchor_id.clone(),
                        positive: form_to_value(&e.positive),
                        negative: form_to_value(&e.negative),
                        kind: e.negative_kind,
                        fallback_from: e.fallback_from,
                    };
                    out.push_str(&serde_json::to_string(&line).unwrap());
                    out.push('\n');
                }
            }
        }
        out
    }

    /// Reads either dataset file; the kind is decided by the first record and
    /// every later record must match it.
    pub fn from_jsonl(text: &str) -> Result<Dataset, CorruptError> {
        let mut pairs = Vec::new();
        let mut triplets = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| CorruptError::Dataset {
                line: i + 1,
                message,
            };
            let form_err = |e: SemformError| err(e.to_string());
            let value: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            let is_triplet = value.get("anchor_id").is_some();
            if (is_triplet && !pairs.is_empty()) || (!is_triplet && !triplets.is_empty()) {
                return Err(err("mixed classification and triplet records".into()));
            }
            if is_triplet {
                let t: TripletLine =
                    serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
                triplets.push(TripletExample {
                    positive: parse_form_value(t.positive, &t.anchor_id).map_err(form_err)?,
                    negative: parse_form_value(t.negative, "").map_err(form_err)?,
                    anchor_id: t.anchor_id,
                    negative_kind: t.kind,
                    fallback_from: t.fallback_from,
                });
            } else {
                let p: PairLine = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
                if p.label > 1 {
                    return Err(err(format!("label must be 0 or 1, got {}", p.label)));
                }
                pairs.push(PairExample {
                    form: parse_form_value(p.form, "").map_err(form_err)?,
                    sentence_id: p.sentence_id,
                    label: p.label,
                });
            }
        }
        Ok(if triplets.is_empty() {
            Dataset::Classification(pairs)
        } else {
            Dataset::Triplet(triplets)
        })
    }
}
