//! The mid-tuning loop: shuffled batches, per-example forward/backward in
//! parallel, a fixed-order gradient reduction, and Adam.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corrupt::Dataset;
use crate::encoder::{DualEncoder, EncoderConfig, EncoderError, SentenceEncoder, Side};
use crate::linearize::{encode, linearize_form, linearize_sentence, EncodedInput, LinearizeError, Vocabulary};
use crate::numcore::{adam_step, checkpoint, AdamConfig, AdamState, Graph, NumError, ParamId, ParamStore, Tensor};
use crate::objectives::{bce_loss, classifier_logit, triplet_loss, ClassifierHead, TripletConfig};
use crate::rng::substream;
use crate::semform::SentenceRecord;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("loss became non-finite ({loss}) at step {step}{}", match .checkpoint {
        Some(p) => format!("; last good parameters saved to {}", p.display()),
        None => String::new(),
    })]
    Divergence {
        step: usize,
        loss: f64,
        checkpoint: Option<PathBuf>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Linearize(#[from] LinearizeError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Triplet,
    Classification,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Triplet => "triplet",
            Objective::Classification => "classification",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "triplet" => Ok(Objective::Triplet),
            "classification" => Ok(Objective::Classification),
            other => Err(format!("unknown objective `{other}` (triplet|classification)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub tied: bool,
    pub margin: f64,
    /// Linear warmup over this many optimizer steps; 0 disables it.
    #[serde(default)]
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Triplet,
            batch_size: 64,
            epochs: 1,
            lr: DEFAULT_LR,
            seed: 7,
            tied: true,
            margin: 1.0,
            warmup_steps: 0,
        }
    }
}

pub const DEFAULT_LR: f64 = 1e-3;

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(TrainError::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !self.margin.is_finite() || self.margin < 0.0 {
            return Err(TrainError::Config(format!("margin must be non-negative, got {}", self.margin)));
        }
        Ok(())
    }
}

/// One index batch per step: a permutation of `0..n` seeded by `(seed, epoch)`,
/// cut into `batch_size` chunks with the short tail kept.
pub fn shuffle_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, epoch as u64));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum PreparedExample {
    Pair {
        sentence: usize,
        form: EncodedInput,
        label: u8,
    },
    Triplet {
        sentence: usize,
        positive: EncodedInput,
        negative: EncodedInput,
    },
}

/// Encoded training corpus. Inputs are stored without their padded suffix;
/// the forward pass is invariant to trailing padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub objective: Objective,
    pub sentences: Vec<EncodedInput>,
    pub examples: Vec<PreparedExample>,
}

impl TrainData {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

pub fn prepare(
    dataset: &Dataset,
    records: &[SentenceRecord],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TrainData, TrainError> {
    let mut index = HashMap::new();
    let mut sentences = Vec::new();
    for r in records {
        let toks = linearize_sentence(&r.text)?;
        index.insert(r.sentence_id.as_str(), sentences.len());
        sentences.push(encode(&toks, vocab, max_len)?.trimmed());
    }
    let lookup = |id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| TrainError::Config(format!("dataset references unknown sentence `{id}`")))
    };
    let form_input = |f| -> Result<EncodedInput, TrainError> {
        Ok(encode(&linearize_form(f)?, vocab, max_len)?.trimmed())
    };
    let (objective, examples) = match dataset {
        Dataset::Classification(v) => (
            Objective::Classification,
            v.iter()
                .map(|e| {
                    Ok(PreparedExample::Pair {
                        sentence: lookup(&e.sentence_id)?,
                        form: form_input(&e.form)?,
                        label: e.label,
                    })
                })
                .collect::<Result<Vec<_>, TrainError>>()?,
        ),
        Dataset::Triplet(v) => (
            Objective::Triplet,
            v.iter()
                .map(|e| {
                    Ok(PreparedExample::Triplet {
                        sentence: lookup(&e.anchor_id)?,
                        positive: form_input(&e.positive)?,
                        negative: form_input(&e.negative)?,
                    })
                })
                .collect::<Result<Vec<_>, TrainError>>()?,
        ),
    };
    Ok(TrainData {
        objective,
        sentences,
        examples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub wall_ms: u64,
    pub checkpoint_digest: String,
    pub config: TrainConfig,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Metrics log as CSV `step,epoch,loss,wall_ms`.
    pub fn metrics_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.steps {
            w.serialize(s).expect("in-memory CSV write");
        }
        String::from_utf8(w.into_inner().expect("in-memory CSV flush")).expect("CSV is UTF-8")
    }
}

/// Adds the classifier head to the model's store when it is missing.
pub fn ensure_head(model: &mut DualEncoder, seed: u64) -> Result<ClassifierHead, TrainError> {
    if let Some(h) = ClassifierHead::bind(&model.store) {
        return Ok(h);
    }
    Ok(ClassifierHead::register(
        &mut model.store,
        model.config.d_model,
        &mut substream(seed, 0x4845_4144),
    )?)
}

/// Loss of one example on its own graph.
pub fn example_loss(
    g: &mut Graph,
    model: &DualEncoder,
    data: &TrainData,
    ex: &PreparedExample,
    cfg: &TrainConfig,
    head: Option<&ClassifierHead>,
) -> Result<crate::numcore::Var, TrainError> {
    match ex {
        PreparedExample::Triplet {
            sentence,
            positive,
            negative,
        } => {
            let s = model.encode_var(g, Side::Sentence, &data.sentences[*sentence])?;
            let p = model.encode_var(g, Side::Form, positive)?;
            let n = model.encode_var(g, Side::Form, negative)?;
            Ok(triplet_loss(g, s, p, n, &TripletConfig { margin: cfg.margin })?)
        }
        PreparedExample::Pair {
            sentence,
            form,
            label,
        } => {
            let head = head.ok_or_else(|| TrainError::Config("classification needs a classifier head".into()))?;
            let s = model.encode_var(g, Side::Sentence, &data.sentences[*sentence])?;
            let r = model.encode_var(g, Side::Form, form)?;
            let z = classifier_logit(g, &model.store, s, r, head)?;
            Ok(bce_loss(g, z, *label)?)
        }
    }
}

type ExampleGrad = (f64, Vec<(ParamId, Tensor)>);

fn batch_gradients(
    model: &DualEncoder,
    data: &TrainData,
    batch: &[usize],
    cfg: &TrainConfig,
    head: Option<&ClassifierHead>,
) -> Result<Vec<ExampleGrad>, TrainError> {
    batch
        .par_iter()
        .map(|&i| {
            let mut g = Graph::new();
            let loss = example_loss(&mut g, model, data, &data.examples[i], cfg, head)?;
            let value = g.value(loss).item();
            let grads = g.backward(loss)?;
            Ok((value, grads.param_grads().map(|(id, t)| (id, t.clone())).collect()))
        })
        .collect()
}

/// Where `midtune` writes the end-of-epoch checkpoint.
#[derive(Debug, Clone, Default)]
pub struct CheckpointSink {
    pub path: Option<PathBuf>,
}

/// Mid-tunes `model` in place on `data`.
///
/// Each step encodes the batch's sentences with E1 and forms with E2, averages
/// the per-example losses, backpropagates and takes one Adam step. The
/// per-example gradients are computed in parallel and summed in batch order,
/// so the run is bit-reproducible regardless of thread count.
pub fn midtune(
    cfg: &TrainConfig,
    data: &TrainData,
    model: &mut DualEncoder,
    sink: &CheckpointSink,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if data.objective != cfg.objective {
        return Err(TrainError::Config(format!(
            "dataset is a {} corpus but the objective is {}",
            data.objective.as_str(),
            cfg.objective.as_str()
        )));
    }
    if cfg.tied != model.tied {
        return Err(TrainError::Config(format!(
            "config tied={} but model tied={}",
            cfg.tied, model.tied
        )));
    }
    if data.is_empty() {
        return Err(TrainError::Config("training corpus is empty".into()));
    }
    let head = match cfg.objective {
        Objective::Classification => Some(ensure_head(model, cfg.seed)?),
        Objective::Triplet => None,
    };
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let start = Instant::now();
    let mut steps = Vec::new();
    let mut previous: Option<ParamStore> = None;
    let mut digest = String::new();
    for epoch in 0..cfg.epochs {
        for batch in shuffle_batches(data.len(), cfg.batch_size, cfg.seed, epoch) {
            let step = steps.len() + 1;
            let per_example = batch_gradients(model, data, &batch, cfg, head.as_ref())?;
            let inv = 1.0 / batch.len() as f64;
            let loss = per_example.iter().map(|(l, _)| l).sum::<f64>() * inv;
            if !loss.is_finite() {
                let checkpoint = match (&sink.path, &previous) {
                    (Some(path), Some(good)) => {
                        checkpoint::save(path, good)?;
                        Some(path.clone())
                    }
                    _ => None,
                };
                return Err(TrainError::Divergence {
                    step,
                    loss,
                    checkpoint,
                });
            }
            model.store.zero_grads();
            for (_, grads) in &per_example {
                for (id, t) in grads {
                    model.store.accumulate_grad(*id, t);
                }
            }
            for id in model.store.ids().collect::<Vec<_>>() {
                if let Some(g) = model.store.get_mut(id).grad.as_mut() {
                    g.data_mut().iter_mut().for_each(|v| *v *= inv);
                }
            }
            match &mut previous {
                Some(p) => p.copy_values_from(&model.store),
                None => previous = Some(model.store.clone()),
            }
            adam.config.lr = if cfg.warmup_steps > 0 {
                cfg.lr * (step as f64 / cfg.warmup_steps as f64).min(1.0)
            } else {
                cfg.lr
            };
            adam_step(&mut model.store, &mut adam)?;
            steps.push(StepLog {
                step,
                epoch,
                loss,
                wall_ms: start.elapsed().as_millis() as u64,
            });
        }
        let bytes = checkpoint::to_bytes(&model.store);
        digest = checkpoint::header_digest(&bytes)?;
        if let Some(path) = &sink.path {
            checkpoint::write_bytes(path, &bytes)?;
        }
    }
    model.store.clear_grads();
    Ok(TrainReport {
        steps,
        wall_ms: start.elapsed().as_millis() as u64,
        checkpoint_digest: digest,
        config: cfg.clone(),
    })
}

// Model files -----------------------------------------------------------------

pub const MODEL_CHECKPOINT: &str = "dual.ckpt";
pub const MODEL_SIDECAR: &str = "model.json";
pub const ENCODER_CHECKPOINT: &str = "encoder.ckpt";
pub const FORM_ENCODER_CHECKPOINT: &str = "form_encoder.ckpt";
pub const ENCODER_SIDECAR: &str = "encoder.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub config: EncoderConfig,
    pub tied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSidecar {
    pub config: EncoderConfig,
    pub tied: bool,
    pub side: Side,
    pub digest: String,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), TrainError> {
    let s = serde_json::to_string_pretty(value).expect("sidecar serialization");
    fs::write(path, s + "\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, TrainError> {
    let s = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&s).map_err(|e| TrainError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes the full dual model (both encoders and any head) into `dir`.
pub fn save_model(model: &DualEncoder, dir: &Path) -> Result<String, TrainError> {
    write_json(
        &dir.join(MODEL_SIDECAR),
        &ModelSidecar {
            config: model.config,
            tied: model.tied,
        },
    )?;
    Ok(checkpoint::save(&dir.join(MODEL_CHECKPOINT), &model.store)?)
}

pub fn load_model(dir: &Path) -> Result<DualEncoder, TrainError> {
    let side: ModelSidecar = read_json(&dir.join(MODEL_SIDECAR))?;
    let store = checkpoint::load(&dir.join(MODEL_CHECKPOINT))?;
    Ok(DualEncoder::from_store(side.config, side.tied, store)?)
}

fn export_side(model: &DualEncoder, side: Side, path: &Path) -> Result<String, TrainError> {
    let enc = model.extract(side);
    let bytes = enc.to_checkpoint_bytes();
    checkpoint::write_bytes(path, &bytes)?;
    Ok(checkpoint::header_digest(&bytes)?)
}

/// Writes E1 as `encoder.ckpt` plus its JSON sidecar; with
/// `include_form_encoder`, E2 is also written as `form_encoder.ckpt`.
pub fn export_sentence_encoder(
    model: &DualEncoder,
    dir: &Path,
    include_form_encoder: bool,
) -> Result<String, TrainError> {
    if !dir.is_dir() {
        return Err(TrainError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "directory does not exist"),
        });
    }
    let digest = export_side(model, Side::Sentence, &dir.join(ENCODER_CHECKPOINT))?;
    if include_form_encoder {
        export_side(model, Side::Form, &dir.join(FORM_ENCODER_CHECKPOINT))?;
    }
    write_json(
        &dir.join(ENCODER_SIDECAR),
        &EncoderSidecar {
            config: model.config,
            tied: model.tied,
            side: Side::Sentence,
            digest: digest.clone(),
        },
    )?;
    Ok(digest)
}

pub fn load_sentence_encoder(dir: &Path) -> Result<SentenceEncoder, TrainError> {
    let side: EncoderSidecar = read_json(&dir.join(ENCODER_SIDECAR))?;
    let store = checkpoint::load(&dir.join(ENCODER_CHECKPOINT))?;
    Ok(SentenceEncoder::from_store(side.config, store)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes_keep_short_tail() {
        let b = shuffle_batches(5, 2, 1, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [2, 2, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn permutation_depends_on_seed_and_epoch() {
        assert_eq!(shuffle_batches(50, 8, 3, 0), shuffle_batches(50, 8, 3, 0));
        assert_ne!(shuffle_batches(50, 8, 3, 0), shuffle_batches(50, 8, 3, 1));
        assert_ne!(shuffle_batches(50, 8, 3, 0), shuffle_batches(50, 8, 4, 0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { lr: -1.0, ..Default::default() },
            TrainConfig { lr: f64::NAN, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        }
        assert_eq!("triplet".parse::<Objective>(), Ok(Objective::Triplet));
        assert!("x".parse::<Objective>().is_err());
    }

    #[test]
    fn metrics_csv_header() {
        let r = TrainReport {
            steps: vec![StepLog { step: 1, epoch: 0, loss: 0.5, wall_ms: 3 }],
            wall_ms: 3,
            checkpoint_digest: String::new(),
            config: TrainConfig::default(),
        };
        assert_eq!(r.metrics_csv(), "step,epoch,loss,wall_ms\n1,0,0.5,3\n");
    }
}
