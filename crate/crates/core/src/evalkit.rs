//! Desk-scale evaluation: a synthetic corpus with exact forms, correlation
//! metrics, frozen-embedding linear probes and alignment diagnostics.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corrupt::{corrupt, pairs_from_records, CorruptionKind, MismatchSampler, PairExample};
use crate::encoder::{DualEncoder, Embedding, EncoderError, Side};
use crate::linearize::{encode, linearize_form, linearize_sentence, EncodedInput, LinearizeError, Vocabulary};
use crate::numcore::{adam_step, AdamConfig, AdamState, Graph, NumError, ParamStore, Tensor};
use crate::objectives::{classifier_logit, ClassifierHead};
use crate::rng::{seeded, substream};
use crate::semform::{RoleSlot, SemanticForm, SentenceRecord};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot generate {requested} unique sentences: the slot product space has {capacity}")]
    Capacity { requested: usize, capacity: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Linearize(#[from] LinearizeError),
    #[error(transparent)]
    Num(#[from] NumError),
}

// Synthetic corpus ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verb {
    pub surface: String,
    pub frame: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Modifier {
    pub label: String,
    pub text: String,
}

/// Slot vocabularies for "SUBJ VERB OBJ [MODIFIER]". Each sentence takes
/// either no modifier or one of `modifiers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub subjects: Vec<String>,
    pub verbs: Vec<Verb>,
    pub objects: Vec<String>,
    #[serde(default)]
    pub modifiers: Vec<Modifier>,
}

impl Template {
    pub fn capacity(&self) -> usize {
        self.subjects.len() * self.verbs.len() * self.objects.len() * (self.modifiers.len() + 1)
    }

    fn is_empty(&self) -> bool {
        self.subjects.is_empty() || self.verbs.is_empty() || self.objects.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_sentences: usize,
    pub templates: Vec<Template>,
    pub seed: u64,
    #[serde(default = "yes")]
    pub unique: bool,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

fn yes() -> bool {
    true
}

fn default_prefix() -> String {
    "syn-".into()
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl Template {
    /// The built-in everyday-actions template (12·10·12·9 = 12,960 sentences).
    pub fn everyday() -> Self {
        let verbs = [
            ("painted", "paint.01"),
            ("repaired", "repair.01"),
            ("carried", "carry.01"),
            ("sold", "sell.01"),
            ("found", "find.01"),
            ("cleaned", "clean.01"),
            ("opened", "open.01"),
            ("moved", "move.01"),
            ("watched", "watch.01"),
            ("built", "build.01"),
        ];
        let modifiers = [
            ("ARGM-LOC", "in the park"),
            ("ARGM-LOC", "near the river"),
            ("ARGM-LOC", "at the station"),
            ("ARGM-TMP", "yesterday"),
            ("ARGM-TMP", "after lunch"),
            ("ARGM-TMP", "on sunday morning"),
            ("ARGM-MNR", "carefully"),
            ("ARGM-MNR", "with great care"),
        ];
        Template {
            subjects: strings(&[
                "the teacher",
                "a young farmer",
                "my neighbor",
                "the old sailor",
                "a tired nurse",
                "the mayor",
                "our coach",
                "the quiet student",
                "a clever engineer",
                "the baker",
                "her brother",
                "the pilot",
            ]),
            verbs: verbs
                .iter()
                .map(|(s, f)| Verb {
                    surface: s.to_string(),
                    frame: f.to_string(),
                })
                .collect(),
            objects: strings(&[
                "the fence",
                "a wooden boat",
                "the red door",
                "an old piano",
                "the kitchen table",
                "a small bicycle",
                "the garden gate",
                "two heavy boxes",
                "the broken window",
                "a green tent",
                "the letter",
                "a large map",
            ]),
            modifiers: modifiers
                .iter()
                .map(|(l, t)| Modifier {
                    label: l.to_string(),
                    text: t.to_string(),
                })
                .collect(),
        }
    }
}

impl SyntheticSpec {
    pub fn new(n_sentences: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_sentences,
            templates: vec![Template::everyday()],
            seed,
            unique: true,
            id_prefix: default_prefix(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.templates.iter().map(Template::capacity).sum()
    }
}

/// (template, subject, verb, object, modifier + 1 or 0 for none)
type Combo = (usize, usize, usize, usize, usize);

fn combo_at(templates: &[Template], mut flat: usize) -> Combo {
    for (t, tpl) in templates.iter().enumerate() {
        let cap = tpl.capacity();
        if flat < cap {
            let m = flat % (tpl.modifiers.len() + 1);
            flat /= tpl.modifiers.len() + 1;
            let o = flat % tpl.objects.len();
            flat /= tpl.objects.len();
            let v = flat % tpl.verbs.len();
            return (t, flat / tpl.verbs.len(), v, o, m);
        }
        flat -= cap;
    }
    unreachable!("flat index beyond capacity")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn realize(templates: &[Template], combo: Combo, id: String) -> SentenceRecord {
    let (t, s, v, o, m) = combo;
    let tpl = &templates[t];
    let (subj, verb, obj) = (&tpl.subjects[s], &tpl.verbs[v], &tpl.objects[o]);
    let mut text = format!("{subj} {} {obj}", verb.surface);
    let mut roles = vec![RoleSlot::new("ARG0", subj), RoleSlot::new("ARG1", obj)];
    if m > 0 {
        let md = &tpl.modifiers[m - 1];
        text.push(' ');
        text.push_str(&md.text);
        roles.push(RoleSlot::new(md.label.clone(), &md.text));
    }
    SentenceRecord {
        forms: vec![SemanticForm {
            frame_name: verb.frame.clone(),
            predicate: verb.surface.clone(),
            roles,
            source_sentence_id: id.clone(),
        }],
        sentence_id: id,
        text: capitalize(&text) + ".",
    }
}

/// Sentences and their exact forms, deterministic in `spec.seed`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<Vec<SentenceRecord>, EvalError> {
    if spec.templates.is_empty() || spec.templates.iter().any(Template::is_empty) {
        return Err(EvalError::Input("every template needs subjects, verbs and objects".into()));
    }
    let capacity = spec.capacity();
    if spec.unique && spec.n_sentences > capacity {
        return Err(EvalError::Capacity {
            requested: spec.n_sentences,
            capacity,
        });
    }
    let mut rng = seeded(spec.seed);
    let flat: Vec<usize> = if !spec.unique {
        (0..spec.n_sentences).map(|_| rng.gen_range(0..capacity)).collect()
    } else if spec.n_sentences * 2 >= capacity {
        let mut all: Vec<usize> = (0..capacity).collect();
        all.shuffle(&mut rng);
        all.truncate(spec.n_sentences);
        all
    } else {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(spec.n_sentences);
        while out.len() < spec.n_sentences {
            let i = rng.gen_range(0..capacity);
            if seen.insert(i) {
                out.push(i);
            }
        }
        out
    };
    let width = spec.n_sentences.saturating_sub(1).to_string().len().max(4);
    Ok(flat
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            realize(
                &spec.templates,
                combo_at(&spec.templates, f),
                format!("{}{:0width$}", spec.id_prefix, i),
            )
        })
        .collect())
}

// Correlation -----------------------------------------------------------------

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::Input(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(EvalError::Input("need at least 2 points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(EvalError::Input("non-finite value".into()));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::Degenerate("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    check_pair(x, y)?;
    pearson(&ranks(x), &ranks(y))
}

// Probes ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub folds: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            folds: 5,
            steps: 300,
            lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Correct predictions over all held-out folds divided by the number of points.
    pub accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    pub n_classes: usize,
    pub majority_rate: f64,
}

/// Stratified fold assignment: classes are shuffled internally and dealt
/// round-robin.
fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = seeded(seed);
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        for &i in idx.iter() {
            fold[i] = next % folds;
            next += 1;
        }
    }
    fold
}

/// Softmax regression on standardized features, full batch.
fn fit_and_score(
    x: &[Vec<f64>],
    labels: &[usize],
    train: &[usize],
    test: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<usize, EvalError> {
    let d = x[0].len();
    let nt = train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in train {
        for (m, v) in mean.iter_mut().zip(&x[i]) {
            *m += v / nt;
        }
    }
    let mut sd = vec![0.0; d];
    for &i in train {
        for k in 0..d {
            sd[k] += (x[i][k] - mean[k]).powi(2) / nt;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    let standardize = |rows: &[usize]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|&i| (0..d).map(|k| (x[i][k] - mean[k]) / sd[k]).collect())
            .collect()
    };
    let xt = Tensor::from_rows(&standardize(train))?;
    let mut onehot = Tensor::zeros(&[train.len(), n_classes]);
    for (r, &i) in train.iter().enumerate() {
        onehot.data_mut()[r * n_classes + labels[i]] = 1.0;
    }

    let mut store = ParamStore::new();
    let w = store.add("probe.w", Tensor::zeros(&[d, n_classes]))?;
    let b = store.add("probe.b", Tensor::zeros(&[n_classes]))?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &store,
    );
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let xv = g.constant(xt.clone());
        let wv = g.param(&store, w);
        let bv = g.param(&store, b);
        let z = g.matmul(xv, wv)?;
        let z = g.add_row(z, bv)?;
        let p = g.softmax_rows(z, None)?;
        let y = g.constant(onehot.clone());
        let picked = g.mul(p, y)?;
        // row mean of the one-hot product is p_true / C
        let picked = g.mean(picked, 1)?;
        let logp = g.log(picked);
        let ll = g.mean(logp, 0)?;
        let loss = g.scale(ll, -1.0);
        g.backward_into(loss, &mut store)?;
        adam_step(&mut store, &mut adam)?;
    }

    let (wt, bt) = (store.value(w), store.value(b));
    let mut correct = 0;
    for (row, &i) in standardize(test).iter().zip(test) {
        let mut best = (f64::NEG_INFINITY, 0);
        for c in 0..n_classes {
            let z = bt.data()[c] + (0..d).map(|k| row[k] * wt.data()[k * n_classes + c]).sum::<f64>();
            if z > best.0 {
                best = (z, c);
            }
        }
        correct += usize::from(best.1 == labels[i]);
    }
    Ok(correct)
}

/// k-fold cross-validated accuracy of a linear softmax probe over frozen
/// embeddings. The embeddings are only read.
pub fn train_probe(embeddings: &[Vec<f64>], labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeResult, EvalError> {
    if embeddings.len() != labels.len() {
        return Err(EvalError::Input(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if embeddings.is_empty() || embeddings[0].is_empty() {
        return Err(EvalError::Input("no embeddings".into()));
    }
    if embeddings.iter().any(|e| e.len() != embeddings[0].len()) {
        return Err(EvalError::Input("embeddings have different dimensions".into()));
    }
    if cfg.folds < 2 || cfg.folds > labels.len() {
        return Err(EvalError::Input(format!("cannot make {} folds of {} points", cfg.folds, labels.len())));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(EvalError::Degenerate("probe labels contain a single class".into()));
    }
    let n_classes = counts.keys().max().unwrap() + 1;
    let fold = stratified_folds(labels, cfg.folds, cfg.seed);
    let per_fold: Vec<(usize, usize)> = (0..cfg.folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..labels.len()).filter(|&i| fold[i] != f).collect();
            let test: Vec<usize> = (0..labels.len()).filter(|&i| fold[i] == f).collect();
            Ok((fit_and_score(embeddings, labels, &train, &test, n_classes, cfg)?, test.len()))
        })
        .collect::<Result<_, EvalError>>()?;
    let correct: usize = per_fold.iter().map(|p| p.0).sum();
    Ok(ProbeResult {
        accuracy: correct as f64 / labels.len() as f64,
        fold_accuracies: per_fold.iter().map(|&(c, n)| c as f64 / n as f64).collect(),
        n_classes: counts.len(),
        majority_rate: *counts.values().max().unwrap() as f64 / labels.len() as f64,
    })
}

/// Token-count bucket per sentence, with cut points at the count quantiles.
pub fn length_labels(records: &[SentenceRecord], buckets: usize) -> Vec<usize> {
    let lens: Vec<usize> = records
        .iter()
        .map(|r| crate::linearize::word_tokens(&r.text).len())
        .collect();
    let mut sorted = lens.clone();
    sorted.sort_unstable();
    let cuts: Vec<usize> = (1..buckets.max(1))
        .map(|q| sorted[q * sorted.len() / buckets])
        .collect();
    lens.iter().map(|l| cuts.iter().filter(|&&c| *l >= c).count()).collect()
}

/// Class index of each record's ARG1 filler, numbered in order of first
/// appearance. Records without an ARG1 get their own class.
pub fn role_content_labels(records: &[SentenceRecord], role: &str) -> Vec<usize> {
    let mut classes: HashMap<Option<Vec<String>>, usize> = HashMap::new();
    records
        .iter()
        .map(|r| {
            let key = r.forms.first().and_then(|f| f.role(role)).and_then(|s| s.filler.clone());
            let n = classes.len();
            *classes.entry(key).or_insert(n)
        })
        .collect()
}

// Model-based diagnostics -----------------------------------------------------

pub fn encode_sentences(
    model: &DualEncoder,
    records: &[SentenceRecord],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Embedding>, EvalError> {
    let inputs = records
        .iter()
        .map(|r| Ok(encode(&linearize_sentence(&r.text)?, vocab, max_len)?.trimmed()))
        .collect::<Result<Vec<EncodedInput>, LinearizeError>>()?;
    Ok(model.encode_batch(Side::Sentence, &inputs)?)
}

pub fn encode_forms(
    model: &DualEncoder,
    forms: &[SemanticForm],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Embedding>, EvalError> {
    let inputs = forms
        .iter()
        .map(|f| Ok(encode(&linearize_form(f)?, vocab, max_len)?.trimmed()))
        .collect::<Result<Vec<EncodedInput>, LinearizeError>>()?;
    Ok(model.encode_batch(Side::Form, &inputs)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindDistance {
    pub kind: CorruptionKind,
    /// `None` when the kind could not be applied to any held-out form.
    pub mean_distance: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub pairs: usize,
    pub mean_positive_distance: f64,
    pub negatives: Vec<KindDistance>,
    /// Share of sentences whose nearest candidate form is one of their own.
    pub retrieval_at_1: f64,
    pub candidates: usize,
}

impl AlignmentReport {
    pub fn negative_distance(&self, kind: CorruptionKind) -> Option<f64> {
        self.negatives.iter().find(|k| k.kind == kind).and_then(|k| k.mean_distance)
    }

    /// Whether every present kind sits farther from the sentence than the true form.
    pub fn separates_all_kinds(&self) -> bool {
        self.negatives
            .iter()
            .all(|k| k.mean_distance.map_or(true, |d| d > self.mean_positive_distance))
    }
}

/// Distances between each held-out sentence and its true form versus one
/// negative per corruption kind, plus retrieval@1 over the whole form pool.
pub fn alignment_report(
    model: &DualEncoder,
    heldout: &[SentenceRecord],
    vocab: &Vocabulary,
    max_len: usize,
    seed: u64,
) -> Result<AlignmentReport, EvalError> {
    let pairs = pairs_from_records(heldout);
    if pairs.is_empty() {
        return Err(EvalError::Input("held-out corpus has no forms".into()));
    }
    let sid_index: HashMap<&str, usize> = heldout
        .iter()
        .enumerate()
        .map(|(i, r)| (r.sentence_id.as_str(), i))
        .collect();
    let sentences = encode_sentences(model, heldout, vocab, max_len)?;
    let forms: Vec<SemanticForm> = pairs.iter().map(|(_, f)| f.clone()).collect();
    let form_emb = encode_forms(model, &forms, vocab, max_len)?;
    let owner: Vec<usize> = pairs.iter().map(|(s, _)| sid_index[s.as_str()]).collect();

    let positive: Vec<f64> = (0..pairs.len())
        .map(|i| sentences[owner[i]].euclidean(&form_emb[i]))
        .collect();

    let sampler = MismatchSampler::new(forms.iter());
    let mut negatives = Vec::new();
    for kind in CorruptionKind::ALL {
        let mut negs = Vec::new();
        let mut anchors = Vec::new();
        for (i, (sid, form)) in pairs.iter().enumerate() {
            let mut rng = substream(seed, (i * CorruptionKind::ALL.len() + kind as usize) as u64);
            let neg = match corrupt(kind, form, &mut rng) {
                Some(r) => r.ok(),
                None => sampler.sample(sid, &mut rng).ok().cloned(),
            };
            if let Some(n) = neg {
                negs.push(n);
                anchors.push(owner[i]);
            }
        }
        let emb = encode_forms(model, &negs, vocab, max_len)?;
        let d: Vec<f64> = emb.iter().zip(&anchors).map(|(e, &a)| sentences[a].euclidean(e)).collect();
        negatives.push(KindDistance {
            kind,
            mean_distance: (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64),
            count: d.len(),
        });
    }

    let hits = sentences
        .par_iter()
        .enumerate()
        .filter(|(si, s)| {
            let mut best = (f64::INFINITY, usize::MAX);
            for (fi, f) in form_emb.iter().enumerate() {
                let d = s.euclidean(f);
                if d < best.0 {
                    best = (d, fi);
                }
            }
            best.1 != usize::MAX && owner[best.1] == *si
        })
        .count();

    Ok(AlignmentReport {
        pairs: pairs.len(),
        mean_positive_distance: positive.iter().sum::<f64>() / positive.len() as f64,
        negatives,
        retrieval_at_1: hits as f64 / heldout.len() as f64,
        candidates: forms.len(),
    })
}

/// Share of pairs whose classifier logit has the sign of the label.
pub fn classification_accuracy(
    model: &DualEncoder,
    records: &[SentenceRecord],
    pairs: &[PairExample],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<f64, EvalError> {
    let head = ClassifierHead::bind(&model.store)
        .ok_or_else(|| EvalError::Input("model has no classifier head".into()))?;
    if pairs.is_empty() {
        return Err(EvalError::Input("no pairs".into()));
    }
    let index: HashMap<&str, &SentenceRecord> = records.iter().map(|r| (r.sentence_id.as_str(), r)).collect();
    let correct = pairs
        .par_iter()
        .map(|p| -> Result<bool, EvalError> {
            let rec = index
                .get(p.sentence_id.as_str())
                .ok_or_else(|| EvalError::Input(format!("unknown sentence `{}`", p.sentence_id)))?;
            let s_in = encode(&linearize_sentence(&rec.text)?, vocab, max_len)?.trimmed();
            let r_in = encode(&linearize_form(&p.form)?, vocab, max_len)?.trimmed();
            let mut g = Graph::new();
            let s = model.encode_var(&mut g, Side::Sentence, &s_in)?;
            let r = model.encode_var(&mut g, Side::Form, &r_in)?;
            let z = classifier_logit(&mut g, &model.store, s, r, &head)?;
            Ok((g.value(z).item() > 0.0) == (p.label == 1))
        })
        .collect::<Result<Vec<bool>, EvalError>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / pairs.len() as f64)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Jaccard overlap of the (label, filler) slots of two forms, predicate included.
pub fn slot_overlap(a: &SemanticForm, b: &SemanticForm) -> f64 {
    let slots = |f: &SemanticForm| -> HashSet<(String, Option<Vec<String>>)> {
        let mut s: HashSet<_> = f.roles.iter().map(|r| (r.label.clone(), r.filler.clone())).collect();
        s.insert(("V".into(), Some(vec![f.predicate.to_lowercase()])));
        s
    };
    let (sa, sb) = (slots(a), slots(b));
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson: f64,
    pub spearman: f64,
    pub pairs: usize,
}

/// Correlation between sentence-embedding cosine and gold slot overlap over
/// `n_pairs` random sentence pairs.
pub fn similarity_correlation(
    embeddings: &[Embedding],
    records: &[SentenceRecord],
    n_pairs: usize,
    seed: u64,
) -> Result<Correlation, EvalError> {
    if records.len() < 2 || embeddings.len() != records.len() {
        return Err(EvalError::Input("need at least 2 embedded records".into()));
    }
    let mut rng = seeded(seed);
    let (mut model, mut gold) = (Vec::with_capacity(n_pairs), Vec::with_capacity(n_pairs));
    while model.len() < n_pairs {
        let i = rng.gen_range(0..records.len());
        let j = rng.gen_range(0..records.len());
        if i == j {
            continue;
        }
        let (Some(fa), Some(fb)) = (records[i].forms.first(), records[j].forms.first()) else {
            continue;
        };
        model.push(cosine(embeddings[i].as_slice(), embeddings[j].as_slice()));
        gold.push(slot_overlap(fa, fb));
    }
    Ok(Correlation {
        pearson: pearson(&model, &gold)?,
        spearman: spearman(&model, &gold)?,
        pairs: n_pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub name: String,
    pub result: ProbeResult,
}

impl ProbeReport {
    /// Probe CSV rows `probe,fold,accuracy`.
    pub fn csv(reports: &[ProbeReport]) -> String {
        let mut s = String::from("probe,fold,accuracy\n");
        for r in reports {
            for (f, a) in r.result.fold_accuracies.iter().enumerate() {
                s.push_str(&format!("{},{},{}\n", r.name, f, a));
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub alignment: AlignmentReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification_accuracy: Option<f64>,
    pub probes: Vec<ProbeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation: Option<Correlation>,
    pub model_digest: String,
    pub config_digest: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semform::validate_form;

    fn tiny() -> Template {
        Template {
            subjects: strings(&["ann", "bob"]),
            verbs: vec![
                Verb { surface: "saw".into(), frame: "see.01".into() },
                Verb { surface: "met".into(), frame: "meet.01".into() },
            ],
            objects: strings(&["cats", "dogs"]),
            modifiers: vec![],
        }
    }

    #[test]
    fn exhaustive_small_space() {
        let spec = SyntheticSpec {
            n_sentences: 8,
            templates: vec![tiny()],
            seed: 3,
            unique: true,
            id_prefix: "t".into(),
        };
        let recs = generate_synthetic_corpus(&spec).unwrap();
        let texts: HashSet<_> = recs.iter().map(|r| r.text.clone()).collect();
        assert_eq!(texts.len(), 8);
        assert!(texts.contains("Ann saw cats."));
        let over = SyntheticSpec { n_sentences: 9, ..spec };
        assert!(matches!(
            generate_synthetic_corpus(&over),
            Err(EvalError::Capacity { requested: 9, capacity: 8 })
        ));
    }

    #[test]
    fn generated_forms_are_valid_and_deterministic() {
        let spec = SyntheticSpec::new(300, 11);
        let a = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(a, generate_synthetic_corpus(&spec).unwrap());
        for r in &a {
            assert!(validate_form(&r.forms[0]).is_empty());
            assert_eq!(r.forms[0].source_sentence_id, r.sentence_id);
        }
        let texts: HashSet<_> = a.iter().map(|r| &r.text).collect();
        assert_eq!(texts.len(), 300);
    }

    #[test]
    fn form_matches_text() {
        let recs = generate_synthetic_corpus(&SyntheticSpec::new(50, 1)).unwrap();
        for r in &recs {
            let f = &r.forms[0];
            let lower = r.text.to_lowercase();
            let subj = f.role("ARG0").unwrap().filler.as_ref().unwrap().join(" ");
            let obj = f.role("ARG1").unwrap().filler.as_ref().unwrap().join(" ");
            assert!(lower.starts_with(&format!("{subj} {} {obj}", f.predicate)), "{lower}");
        }
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(EvalError::Degenerate(_))));
        assert!(matches!(pearson(&[1.0], &[1.0]), Err(EvalError::Input(_))));
    }

    #[test]
    fn average_ranks() {
        assert_eq!(ranks(&[1.0, 1.0, 2.0]), [1.5, 1.5, 3.0]);
        assert_eq!(ranks(&[3.0, 1.0, 2.0, 1.0]), [4.0, 1.5, 3.0, 1.5]);
    }

    #[test]
    fn length_buckets_cover_range() {
        let recs = generate_synthetic_corpus(&SyntheticSpec::new(200, 2)).unwrap();
        let labels = length_labels(&recs, 3);
        let distinct: HashSet<_> = labels.iter().collect();
        assert!(distinct.len() >= 2);
        assert!(labels.iter().all(|&l| l < 3));
    }
}
