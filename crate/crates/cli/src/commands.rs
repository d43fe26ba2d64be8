use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use midtune::corrupt::{build_classification_corpus, build_triplet_corpus, pairs_from_records, CorruptionMix, Dataset};
use midtune::encoder::{DualEncoder, EncoderConfig, Side};
use midtune::evalkit::{
    alignment_report, classification_accuracy, encode_sentences, generate_synthetic_corpus, length_labels,
    role_content_labels, similarity_correlation, train_probe, EvalError, EvalReport, ProbeConfig, ProbeReport,
    SyntheticSpec,
};
use midtune::linearize::{build_vocab, linearize_form, linearize_sentence, Vocabulary, DEFAULT_MAX_LEN};
use midtune::numcore::checkpoint::sha256_hex;
use midtune::retrieval::{build_index, EmbeddingIndex, RetrievalError};
use midtune::semform::{read_conll, read_corpus, write_corpus, SentenceRecord};
use midtune::train::{
    export_sentence_encoder, load_model, load_sentence_encoder, midtune as run_midtune, prepare, save_model,
    CheckpointSink, Objective, TrainConfig, TrainError, MODEL_CHECKPOINT,
};
use serde::{Deserialize, Serialize};

use crate::settings::{manifest_path, write_atomic, RunManifest};
use crate::CliError;

pub const VOCAB_FILE: &str = "vocab.txt";

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| CliError::Usage(format!("missing required --{flag}")))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_corpus(path: &Path) -> Result<Vec<SentenceRecord>, CliError> {
    read_corpus(&read_text(path)?).map_err(|(line, e)| CliError::Data(format!("{}:{line}: {e}", path.display())))
}

fn load_vocab(path: &Path) -> Result<Vocabulary, CliError> {
    Vocabulary::from_file_string(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn parse_objective(s: &str) -> Result<Objective, CliError> {
    s.parse().map_err(CliError::Usage)
}

// ingest -----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestSettings {
    pub input: Option<PathBuf>,
    pub format: Option<String>,
    pub id_prefix: String,
    pub output: Option<PathBuf>,
}

impl Default for IngestSettings {
    fn default() -> Self {
        IngestSettings {
            input: None,
            format: None,
            id_prefix: "conll-".into(),
            output: None,
        }
    }
}

pub fn ingest(s: IngestSettings) -> Result<(), CliError> {
    let start = Instant::now();
    let input = required(&s.input, "input")?;
    let output = required(&s.output, "output")?;
    let format = match s.format.as_deref() {
        Some(f) => f.to_string(),
        None => match input.extension().and_then(|e| e.to_str()) {
            Some("conll") | Some("conllu") | Some("txt") => "conll".into(),
            _ => "jsonl".into(),
        },
    };
    let text = read_text(&input)?;
    let records = match format.as_str() {
        "jsonl" => read_corpus(&text).map_err(|(l, e)| CliError::Data(format!("{}:{l}: {e}", input.display())))?,
        "conll" => read_conll(&text, &s.id_prefix).map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?,
        other => return Err(CliError::Usage(format!("unknown format `{other}` (jsonl|conll)"))),
    };
    write_text(&output, &write_corpus(&records))?;
    println!("{} records -> {}", records.len(), output.display());
    RunManifest::new("ingest", &s, None)
        .inputs([input])
        .outputs([output.clone()])
        .write(&manifest_path(&output), start.elapsed())
}

// synth ------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSettings {
    pub n: usize,
    pub heldout: usize,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub heldout_output: Option<PathBuf>,
    pub id_prefix: String,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            n: 500,
            heldout: 0,
            seed: 7,
            output: None,
            heldout_output: None,
            id_prefix: "syn-".into(),
        }
    }
}

pub fn synth(s: SynthSettings) -> Result<(), CliError> {
    let start = Instant::now();
    let output = required(&s.output, "output")?;
    if s.heldout > 0 && s.heldout_output.is_none() {
        return Err(CliError::Usage("--heldout needs --heldout-output".into()));
    }
    if s.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let mut spec = SyntheticSpec::new(s.n + s.heldout, s.seed);
    spec.id_prefix = s.id_prefix.clone();
    let records = generate_synthetic_corpus(&spec).map_err(data)?;
    let (train, held) = records.split_at(s.n);
    write_text(&output, &write_corpus(train))?;
    let mut outputs = vec![output.clone()];
    if let Some(h) = &s.heldout_output {
        write_text(h, &write_corpus(held))?;
        outputs.push(h.clone());
    }
    println!("{} training and {} held-out records", train.len(), held.len());
    RunManifest::new("synth", &s, Some(s.seed))
        .outputs(outputs)
        .write(&manifest_path(&output), start.elapsed())
}

// vocab ------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabSettings {
    pub corpus: Vec<PathBuf>,
    pub min_count: usize,
    pub output: Option<PathBuf>,
}

impl Default for VocabSettings {
    fn default() -> Self {
        VocabSettings {
            corpus: Vec::new(),
            min_count: 1,
            output: None,
        }
    }
}

pub fn vocab(s: VocabSettings) -> Result<(), CliError> {
    let start = Instant::now();
    let output = required(&s.output, "output")?;
    if s.corpus.is_empty() {
        return Err(CliError::Usage("missing required --corpus".into()));
    }
    let mut seqs = Vec::new();
    for path in &s.corpus {
        for r in load_corpus(path)? {
            seqs.push(linearize_sentence(&r.text).map_err(data)?);
            for f in &r.forms {
                seqs.push(linearize_form(f).map_err(data)?);
            }
        }
    }
    let v = build_vocab(seqs, s.min_count);
    write_text(&output, &v.to_file_string())?;
    println!("{} tokens -> {}", v.len(), output.display());
    RunManifest::new("vocab", &s, None)
        .inputs(s.corpus.clone())
        .outputs([output.clone()])
        .write(&manifest_path(&output), start.elapsed())
}

// build-dataset ----------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildDatasetSettings {
    pub corpus: Option<PathBuf>,
    pub objective: String,
    pub mix: String,
    pub negatives_per_anchor: usize,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl Default for BuildDatasetSettings {
    fn default() -> Self {
        BuildDatasetSettings {
            corpus: None,
            objective: "triplet".into(),
            mix: "uniform".into(),
            negatives_per_anchor: 1,
            seed: 7,
            output: None,
        }
    }
}

pub fn build_dataset(s: BuildDatasetSettings) -> Result<(), CliError> {
    let start = Instant::now();
    let corpus = required(&s.corpus, "corpus")?;
    let output = required(&s.output, "output")?;
    let objective = parse_objective(&s.objective)?;
    let mix: CorruptionMix = s.mix.parse().map_err(|e| CliError::Usage(format!("--mix: {e}")))?;
    if s.negatives_per_anchor == 0 {
        return Err(CliError::Usage("--negatives-per-anchor must be at least 1".into()));
    }
    let pairs = pairs_from_records(&load_corpus(&corpus)?);
    let dataset = match objective {
        Objective::Classification => Dataset::Classification(build_classification_corpus(&pairs, s.seed).map_err(data)?),
        Objective::Triplet => {
            Dataset::Triplet(build_triplet_corpus(&pairs, &mix, s.negatives_per_anchor, s.seed).map_err(data)?)
        }
    };
    write_text(&output, &dataset.to_jsonl())?;
    println!("{} {} examples -> {}", dataset.len(), dataset.objective_name(), output.display());
    RunManifest::new("build-dataset", &s, Some(s.seed))
        .inputs([corpus])
        .outputs([output.clone()])
        .write(&manifest_path(&output), start.elapsed())
}

// midtune ----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MidtuneSettings {
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub objective: String,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub tied: bool,
    pub margin: f64,
    pub warmup_steps: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub export_form_encoder: bool,
}

impl Default for MidtuneSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        let e = EncoderConfig::toy(0);
        MidtuneSettings {
            corpus: None,
            dataset: None,
            vocab: None,
            output: None,
            objective: t.objective.as_str().into(),
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr: t.lr,
            seed: t.seed,
            tied: t.tied,
            margin: t.margin,
            warmup_steps: t.warmup_steps,
            d_model: e.d_model,
            n_heads: e.n_heads,
            n_layers: e.n_layers,
            d_ff: e.d_ff,
            max_len: DEFAULT_MAX_LEN,
            export_form_encoder: false,
        }
    }
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
        other => data(other),
    }
}

pub fn midtune(s: MidtuneSettings) -> Result<(), CliError> {
    let start = Instant::now();
    let corpus = required(&s.corpus, "corpus")?;
    let dataset_path = required(&s.dataset, "dataset")?;
    let vocab_path = required(&s.vocab, "vocab")?;
    let output = required(&s.output, "output")?;
    let cfg = TrainConfig {
        objective: parse_objective(&s.objective)?,
        batch_size: s.batch_size,
        epochs: s.epochs,
        lr: s.lr,
        seed: s.seed,
        tied: s.tied,
        margin: s.margin,
        warmup_steps: s.warmup_steps,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let records = load_corpus(&corpus)?;
    let vocab = load_vocab(&vocab_path)?;
    let dataset = Dataset::from_jsonl(&read_text(&dataset_path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", dataset_path.display())))?;
    let enc = EncoderConfig {
        vocab_size: vocab.len(),
        d_model: s.d_model,
        n_heads: s.n_heads,
        n_layers: s.n_layers,
        d_ff: s.d_ff,
        max_len: s.max_len,
        seed: s.seed,
    };
    enc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let data_set = prepare(&dataset, &records, &vocab, s.max_len).map_err(train_error)?;
    let mut model = DualEncoder::init(enc, s.tied).map_err(data)?;

    fs::create_dir_all(&output).map_err(|e| CliError::Data(format!("{}: {e}", output.display())))?;
    let sink = CheckpointSink {
        path: Some(output.join(MODEL_CHECKPOINT)),
    };
    let report = run_midtune(&cfg, &data_set, &mut model, &sink).map_err(train_error)?;
    save_model(&model, &output).map_err(data)?;
    export_sentence_encoder(&model, &output, s.export_form_encoder).map_err(data)?;
    write_text(&output.join(VOCAB_FILE), &vocab.to_file_string())?;
    write_text(&output.join("metrics.csv"), &report.metrics_csv())?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_atomic(&output.join("train_report.json"), json.as_bytes())?;

    let losses = report.losses();
    println!(
        "{} steps, loss {:.6} -> {:.6}, checkpoint {}",
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        report.checkpoint_digest
    );
    RunManifest::new("midtune", &s, Some(s.seed))
        .inputs([corpus, dataset_path, vocab_path])
        .outputs([output.clone()])
        .write(&output.join("manifest.json"), start.elapsed())
}

// embed / knn ------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedSettings {
    pub model: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

pub fn embed(s: EmbedSettings) -> Result<(), CliError> {
    let start = Instant::now();
    let model = required(&s.model, "model")?;
    let corpus = required(&s.corpus, "corpus")?;
    let output = required(&s.output, "output")?;
    let encoder = load_sentence_encoder(&model).map_err(data)?;
    let vocab = load_vocab(&model.join(VOCAB_FILE))?;
    let index = build_index(&load_corpus(&corpus)?, &encoder, &vocab).map_err(data)?;
    index.save(&output).map_err(data)?;
    println!("{} vectors, index digest {}", index.len(), index.digest());
    RunManifest::new("embed", &s, None)
        .inputs([model, corpus])
        .outputs([output.clone(), EmbeddingIndex::sidecar_path(&output)])
        .write(&manifest_path(&output), start.elapsed())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnSettings {
    pub model: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub query: Option<String>,
    pub k: usize,
}

impl Default for KnnSettings {
    fn default() -> Self {
        KnnSettings {
            model: None,
            index: None,
            query: None,
            k: 5,
        }
    }
}

pub fn knn(s: KnnSettings) -> Result<(), CliError> {
    let model = required(&s.model, "model")?;
    let index_path = required(&s.index, "index")?;
    let query = required(&s.query, "query")?;
    if s.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let encoder = load_sentence_encoder(&model).map_err(data)?;
    let vocab = load_vocab(&model.join(VOCAB_FILE))?;
    let index = EmbeddingIndex::load(&index_path).map_err(data)?;
    let hits = index.knn(&query, s.k, &encoder, &vocab).map_err(|e| match e {
        RetrievalError::Range { .. } => CliError::Usage(e.to_string()),
        other => data(other),
    })?;
    for h in hits {
        println!("{}\t{:.6}\t{}", h.rank, h.score, h.text);
    }
    Ok(())
}

// eval -------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub model: Option<PathBuf>,
    pub heldout: Option<PathBuf>,
    pub probe_corpus: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub probe_output: Option<PathBuf>,
    pub seed: u64,
    pub folds: usize,
    pub probe_steps: usize,
    pub length_buckets: usize,
    pub correlation_pairs: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let p = ProbeConfig::default();
        EvalSettings {
            model: None,
            heldout: None,
            probe_corpus: None,
            output: None,
            probe_output: None,
            seed: 7,
            folds: p.folds,
            probe_steps: p.steps,
            length_buckets: 3,
            correlation_pairs: 1000,
        }
    }
}

fn optional<T>(name: &str, r: Result<T, EvalError>) -> Result<Option<T>, CliError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(EvalError::Degenerate(m)) => {
            eprintln!("warning: {name} skipped: {m}");
            Ok(None)
        }
        Err(e) => Err(data(e)),
    }
}

pub fn eval(s: EvalSettings) -> Result<(), CliError> {
    let start = Instant::now();
    let model_dir = required(&s.model, "model")?;
    let heldout_path = required(&s.heldout, "heldout")?;
    let output = required(&s.output, "output")?;
    if s.folds < 2 {
        return Err(CliError::Usage("--folds must be at least 2".into()));
    }
    let model = load_model(&model_dir).map_err(data)?;
    let vocab = load_vocab(&model_dir.join(VOCAB_FILE))?;
    let max_len = model.config.max_len;
    let heldout = load_corpus(&heldout_path)?;
    let alignment = alignment_report(&model, &heldout, &vocab, max_len, s.seed).map_err(data)?;

    let classification = if midtune::objectives::ClassifierHead::bind(&model.store).is_some() {
        let pairs = build_classification_corpus(&pairs_from_records(&heldout), s.seed).map_err(data)?;
        Some(classification_accuracy(&model, &heldout, &pairs, &vocab, max_len).map_err(data)?)
    } else {
        None
    };

    let probe_path = s.probe_corpus.clone().unwrap_or_else(|| heldout_path.clone());
    let probe_records = if s.probe_corpus.is_some() { load_corpus(&probe_path)? } else { heldout.clone() };
    let embeddings = encode_sentences(&model, &probe_records, &vocab, max_len).map_err(data)?;
    let matrix: Vec<Vec<f64>> = embeddings.iter().map(|e| e.0.clone()).collect();
    let pcfg = ProbeConfig {
        folds: s.folds,
        steps: s.probe_steps,
        seed: s.seed,
        ..ProbeConfig::default()
    };
    let mut probes = Vec::new();
    for (name, labels) in [
        ("length", length_labels(&probe_records, s.length_buckets)),
        ("role_content", role_content_labels(&probe_records, "ARG1")),
    ] {
        if let Some(result) = optional(name, train_probe(&matrix, &labels, &pcfg))? {
            probes.push(ProbeReport {
                name: name.into(),
                result,
            });
        }
    }
    let correlation = optional(
        "correlation",
        similarity_correlation(&embeddings, &probe_records, s.correlation_pairs, s.seed),
    )?;

    let report = EvalReport {
        alignment,
        classification_accuracy: classification,
        probes,
        correlation,
        model_digest: model.extract(Side::Sentence).digest(),
        config_digest: sha256_hex(serde_json::to_string(&s).expect("settings serialize").as_bytes()),
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_atomic(&output, json.as_bytes())?;
    let mut outputs = vec![output.clone()];
    if let Some(p) = &s.probe_output {
        write_text(p, &ProbeReport::csv(&report.probes))?;
        outputs.push(p.clone());
    }
    println!(
        "retrieval@1 {:.3}, d(s,r+) {:.4}",
        report.alignment.retrieval_at_1, report.alignment.mean_positive_distance
    );
    for k in &report.alignment.negatives {
        match k.mean_distance {
            Some(d) => println!("d(s,r-) {:<13} {:.4}", k.kind.as_str(), d),
            None => println!("d(s,r-) {:<13} absent", k.kind.as_str()),
        }
    }
    for p in &report.probes {
        println!("probe {:<12} {:.3} (majority {:.3})", p.name, p.result.accuracy, p.result.majority_rate);
    }
    RunManifest::new("eval", &s, Some(s.seed))
        .inputs([model_dir, heldout_path, probe_path])
        .outputs(outputs)
        .write(&manifest_path(&output), start.elapsed())
}
