//! Small pre-norm transformer encoder with sinusoidal positions and masked
//! mean pooling, and the sentence/form dual encoder built from two of them.

use rand::distributions::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linearize::EncodedInput;
use crate::numcore::{checkpoint, Graph, NumError, ParamId, ParamStore, Tensor, Var};
use crate::rng::{substream, Rng};

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    Vocab { id: usize, vocab_size: usize },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("{path}: {message}")]
    Sidecar { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Defaults sized for minutes-scale CPU training.
    pub fn toy(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            max_len: 128,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(EncoderError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(EncoderError::Config(format!(
                "max_len must be at least 2, got {}",
                self.max_len
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which encoder of the pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Sentence,
    Form,
}

/// Pooled sequence embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn euclidean(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Parameter handles of one encoder stack inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub prefix: String,
    pub tok_emb: ParamId,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
}

/// (suffix, shape, kind) for every parameter of an encoder, in store order.
fn layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let mut out = vec![("tok_emb".to_string(), vec![cfg.vocab_size, d], Init::Uniform)];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.extend([
            (p("ln1.g"), vec![d], Init::One),
            (p("ln1.b"), vec![d], Init::Zero),
            (p("attn.wq"), vec![d, d], Init::Uniform),
            (p("attn.bq"), vec![d], Init::Zero),
            (p("attn.wk"), vec![d, d], Init::Uniform),
            (p("attn.bk"), vec![d], Init::Zero),
            (p("attn.wv"), vec![d, d], Init::Uniform),
            (p("attn.bv"), vec![d], Init::Zero),
            (p("attn.wo"), vec![d, d], Init::Uniform),
            (p("attn.bo"), vec![d], Init::Zero),
            (p("ln2.g"), vec![d], Init::One),
            (p("ln2.b"), vec![d], Init::Zero),
            (p("ff.w1"), vec![d, cfg.d_ff], Init::Uniform),
            (p("ff.b1"), vec![cfg.d_ff], Init::Zero),
            (p("ff.w2"), vec![cfg.d_ff, d], Init::Uniform),
            (p("ff.b2"), vec![d], Init::Zero),
        ]);
    }
    out.push(("lnf.g".into(), vec![d], Init::One));
    out.push(("lnf.b".into(), vec![d], Init::Zero));
    out
}

#[derive(Clone, Copy)]
enum Init {
    Uniform,
    One,
    Zero,
}

impl EncoderWeights {
    /// Adds freshly initialized parameters named `{prefix}.*` to `store`:
    /// weights uniform in ±1/√d_model, layer-norm gains 1, biases 0.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &EncoderConfig,
        rng: &mut Rng,
    ) -> Result<Self, EncoderError> {
        let a = 1.0 / (cfg.d_model as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a);
        for (suffix, shape, init) in layout(cfg) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Uniform => (0..n).map(|_| dist.sample(rng)).collect(),
                Init::One => vec![1.0; n],
                Init::Zero => vec![0.0; n],
            };
            store.add(format!("{prefix}.{suffix}"), Tensor::new(shape, data)?)?;
        }
        Self::bind(store, prefix, cfg)
    }

    /// Looks up existing `{prefix}.*` parameters, checking their shapes.
    pub fn bind(store: &ParamStore, prefix: &str, cfg: &EncoderConfig) -> Result<Self, EncoderError> {
        let get = |suffix: &str, shape: &[usize]| -> Result<ParamId, EncoderError> {
            let name = format!("{prefix}.{suffix}");
            let id = store
                .id(&name)
                .ok_or_else(|| EncoderError::MissingParameter(name.clone()))?;
            if store.value(id).shape() != shape {
                return Err(EncoderError::Config(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    store.value(id).shape()
                )));
            }
            Ok(id)
        };
        let lay = layout(cfg);
        let mut it = lay.iter();
        let mut next = || {
            let (s, sh, _) = it.next().expect("layout is complete");
            get(s, sh)
        };
        let tok_emb = next()?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerWeights {
                ln1_g: next()?,
                ln1_b: next()?,
                wq: next()?,
                bq: next()?,
                wk: next()?,
                bk: next()?,
                wv: next()?,
                bv: next()?,
                wo: next()?,
                bo: next()?,
                ln2_g: next()?,
                ln2_b: next()?,
                w1: next()?,
                b1: next()?,
                w2: next()?,
                b2: next()?,
            });
        }
        let lnf_g = next()?;
        let lnf_b = next()?;
        Ok(EncoderWeights {
            prefix: prefix.to_string(),
            tok_emb,
            layers,
            lnf_g,
            lnf_b,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.tok_emb];
        for l in &self.layers {
            v.extend([
                l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2_g,
                l.ln2_b, l.w1, l.b1, l.w2, l.b2,
            ]);
        }
        v.extend([self.lnf_g, self.lnf_b]);
        v
    }

    /// Final-layer token vectors (`[len, d_model]`) for `input`, after the
    /// closing layer norm.
    pub fn forward_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &EncoderConfig,
        input: &EncodedInput,
    ) -> Result<Var, EncoderError> {
        check_input(cfg, input)?;
        let key_mask: Vec<bool> = input.mask.iter().map(|&m| m == 1).collect();
        let table = g.param(store, self.tok_emb);
        let emb = g.embedding(table, &input.ids)?;
        let pos = g.constant(positional_encoding(input.ids.len(), cfg.d_model));
        let mut x = g.add(emb, pos)?;
        for layer in &self.layers {
            x = block(g, store, cfg, layer, x, &key_mask)?.0;
        }
        let gain = g.param(store, self.lnf_g);
        let bias = g.param(store, self.lnf_b);
        Ok(g.layernorm_rows(x, gain, bias, LAYERNORM_EPS)?)
    }

    /// Mean-pooled embedding over unmasked positions (`[d_model]`).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &EncoderConfig,
        input: &EncodedInput,
    ) -> Result<Var, EncoderError> {
        let tokens = self.forward_tokens(g, store, cfg, input)?;
        mean_pool(g, tokens, &input.mask)
    }
}

fn check_input(cfg: &EncoderConfig, input: &EncodedInput) -> Result<(), EncoderError> {
    if input.ids.is_empty() || input.ids.len() != input.mask.len() {
        return Err(EncoderError::Input(format!(
            "{} ids with {} mask entries",
            input.ids.len(),
            input.mask.len()
        )));
    }
    if input.ids.len() > cfg.max_len {
        return Err(EncoderError::Input(format!(
            "sequence length {} exceeds max_len {}",
            input.ids.len(),
            cfg.max_len
        )));
    }
    let real = input.real_len();
    if real == 0 || input.mask[real..].iter().any(|&m| m != 0) {
        return Err(EncoderError::Input(
            "mask must be 1 on a non-empty prefix and 0 after it".into(),
        ));
    }
    if let Some(&id) = input.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(EncoderError::Vocab {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for p in 0..len {
        for j in 0..d {
            let i2 = (j / 2 * 2) as f64;
            let angle = p as f64 / 10000f64.powf(i2 / d as f64);
            data[p * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, d, data).expect("shape matches data")
}

/// Mean of the rows of `tokens` where `mask` is 1 (the mask is a prefix).
pub fn mean_pool(g: &mut Graph, tokens: Var, mask: &[u8]) -> Result<Var, EncoderError> {
    let real = mask.iter().take_while(|&&m| m == 1).count();
    if real == 0 {
        return Err(EncoderError::Input("nothing to pool: empty mask".into()));
    }
    let rows = g.slice_rows(tokens, 0, real)?;
    Ok(g.mean(rows, 0)?)
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var, NumError> {
    let wv = g.param(store, w);
    let bv = g.param(store, b);
    let y = g.matmul(x, wv)?;
    g.add_row(y, bv)
}

/// Multi-head scaled dot-product self-attention over `h` (`[len, d_model]`).
/// Returns the projected output and each head's attention weights.
pub fn attention(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    layer: &LayerWeights,
    h: Var,
    key_mask: &[bool],
) -> Result<(Var, Vec<Var>), EncoderError> {
    let q = linear(g, store, h, layer.wq, layer.bq)?;
    let k = linear(g, store, h, layer.wk, layer.bk)?;
    let v = linear(g, store, h, layer.wv, layer.bv)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut weights = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let (s, e) = (head * dh, (head + 1) * dh);
        let qh = g.slice_cols(q, s, e)?;
        let kh = g.slice_cols(k, s, e)?;
        let vh = g.slice_cols(v, s, e)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let w = g.softmax_rows(scores, Some(key_mask))?;
        heads.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat(&heads, 1)?
    };
    Ok((linear(g, store, merged, layer.wo, layer.bo)?, weights))
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + ff(ln2(x))`.
pub fn block(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    layer: &LayerWeights,
    x: Var,
    key_mask: &[bool],
) -> Result<(Var, Vec<Var>), EncoderError> {
    let g1 = g.param(store, layer.ln1_g);
    let b1 = g.param(store, layer.ln1_b);
    let h = g.layernorm_rows(x, g1, b1, LAYERNORM_EPS)?;
    let (attn, weights) = attention(g, store, cfg, layer, h, key_mask)?;
    let x = g.add(x, attn)?;
    let g2 = g.param(store, layer.ln2_g);
    let b2 = g.param(store, layer.ln2_b);
    let h = g.layernorm_rows(x, g2, b2, LAYERNORM_EPS)?;
    let f = linear(g, store, h, layer.w1, layer.b1)?;
    let f = g.gelu(f);
    let f = linear(g, store, f, layer.w2, layer.b2)?;
    Ok((g.add(x, f)?, weights))
}

/// Sentence encoder E1 and form encoder E2 over one parameter store. When tied
/// both sides resolve to the same parameters.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub config: EncoderConfig,
    pub tied: bool,
    pub store: ParamStore,
    e1: EncoderWeights,
    e2: EncoderWeights,
}

pub fn init_model(config: EncoderConfig, tied: bool) -> Result<DualEncoder, EncoderError> {
    DualEncoder::init(config, tied)
}

impl DualEncoder {
    pub fn init(config: EncoderConfig, tied: bool) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut store = ParamStore::new();
        if tied {
            let e = EncoderWeights::register(&mut store, "shared", &config, &mut substream(config.seed, 1))?;
            Ok(DualEncoder {
                config,
                tied,
                store,
                e1: e.clone(),
                e2: e,
            })
        } else {
            let e1 = EncoderWeights::register(&mut store, "e1", &config, &mut substream(config.seed, 1))?;
            let e2 = EncoderWeights::register(&mut store, "e2", &config, &mut substream(config.seed, 2))?;
            Ok(DualEncoder {
                config,
                tied,
                store,
                e1,
                e2,
            })
        }
    }

    /// Rebinds a model to a store loaded from a checkpoint.
    pub fn from_store(config: EncoderConfig, tied: bool, store: ParamStore) -> Result<Self, EncoderError> {
        config.validate()?;
        let (e1, e2) = if tied {
            let e = EncoderWeights::bind(&store, "shared", &config)?;
            (e.clone(), e)
        } else {
            (
                EncoderWeights::bind(&store, "e1", &config)?,
                EncoderWeights::bind(&store, "e2", &config)?,
            )
        };
        Ok(DualEncoder {
            config,
            tied,
            store,
            e1,
            e2,
        })
    }

    pub fn weights(&self, side: Side) -> &EncoderWeights {
        match side {
            Side::Sentence => &self.e1,
            Side::Form => &self.e2,
        }
    }

    /// Scalar count of encoder parameters (excluding any other parameters,
    /// e.g. a classifier head, that share the store).
    pub fn encoder_param_count(&self) -> usize {
        let mut ids = self.e1.param_ids();
        if !self.tied {
            ids.extend(self.e2.param_ids());
        }
        ids.iter().map(|&id| self.store.value(id).numel()).sum()
    }

    pub fn encode_var(&self, g: &mut Graph, side: Side, input: &EncodedInput) -> Result<Var, EncoderError> {
        self.weights(side).forward(g, &self.store, &self.config, input)
    }

    pub fn encode_sequence(&self, side: Side, input: &EncodedInput) -> Result<Embedding, EncoderError> {
        let mut g = Graph::new();
        let v = self.encode_var(&mut g, side, input)?;
        Ok(Embedding(g.value(v).data().to_vec()))
    }

    /// Encodes many inputs in parallel; output order matches input order.
    pub fn encode_batch(&self, side: Side, inputs: &[EncodedInput]) -> Result<Vec<Embedding>, EncoderError> {
        inputs
            .par_iter()
            .map(|x| self.encode_sequence(side, x))
            .collect()
    }

    /// Standalone copy of one side, parameters renamed to `encoder.*`.
    pub fn extract(&self, side: Side) -> SentenceEncoder {
        let w = self.weights(side);
        let mut store = ParamStore::new();
        for id in w.param_ids() {
            let p = self.store.get(id);
            let suffix = &p.name[w.prefix.len() + 1..];
            store
                .add(format!("encoder.{suffix}"), p.value.clone())
                .expect("names unique within one encoder");
        }
        SentenceEncoder::from_store(self.config, store).expect("extracted layout is complete")
    }
}

/// A single exported encoder (normally E1), used for embedding and retrieval.
#[derive(Debug, Clone)]
pub struct SentenceEncoder {
    pub config: EncoderConfig,
    pub store: ParamStore,
    weights: EncoderWeights,
}

impl SentenceEncoder {
    pub fn from_store(config: EncoderConfig, store: ParamStore) -> Result<Self, EncoderError> {
        config.validate()?;
        let weights = EncoderWeights::bind(&store, "encoder", &config)?;
        Ok(SentenceEncoder {
            config,
            store,
            weights,
        })
    }

    pub fn encode_sequence(&self, input: &EncodedInput) -> Result<Embedding, EncoderError> {
        let mut g = Graph::new();
        let v = self.weights.forward(&mut g, &self.store, &self.config, input)?;
        Ok(Embedding(g.value(v).data().to_vec()))
    }

    pub fn encode_batch(&self, inputs: &[EncodedInput]) -> Result<Vec<Embedding>, EncoderError> {
        inputs.par_iter().map(|x| self.encode_sequence(x)).collect()
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes(&self.store)
    }

    /// Header digest of this encoder's checkpoint serialization.
    pub fn digest(&self) -> String {
        checkpoint::header_digest(&self.to_checkpoint_bytes()).expect("freshly framed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linearize::{Marker, PAD_ID};

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 20,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_len: 16,
            seed: 3,
        }
    }

    fn input(ids: &[usize]) -> EncodedInput {
        EncodedInput {
            ids: ids.to_vec(),
            mask: vec![1; ids.len()],
            marker: Marker::Sentence,
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let mut c = cfg();
        c.n_heads = 3;
        assert!(matches!(DualEncoder::init(c, true), Err(EncoderError::Config(_))));
        let mut c = cfg();
        c.max_len = 1;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.d_ff = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = DualEncoder::init(cfg(), false).unwrap();
        let b = DualEncoder::init(cfg(), false).unwrap();
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn tied_and_untied_param_counts() {
        let tied = DualEncoder::init(cfg(), true).unwrap();
        let untied = DualEncoder::init(cfg(), false).unwrap();
        assert_eq!(tied.encoder_param_count(), tied.store.num_scalars());
        assert_eq!(untied.encoder_param_count(), 2 * tied.encoder_param_count());
        let e1: Vec<_> = untied.weights(Side::Sentence).param_ids();
        let e2: Vec<_> = untied.weights(Side::Form).param_ids();
        assert!(e1.iter().all(|id| !e2.contains(id)));
        assert_eq!(tied.weights(Side::Sentence), tied.weights(Side::Form));
    }

    #[test]
    fn layernorm_gains_and_biases_initialized() {
        let m = DualEncoder::init(cfg(), true).unwrap();
        let w = m.weights(Side::Sentence);
        assert!(m.store.value(w.lnf_g).data().iter().all(|&v| v == 1.0));
        assert!(m.store.value(w.layers[0].bq).data().iter().all(|&v| v == 0.0));
        let a = 1.0 / 8f64.sqrt();
        assert!(m.store.value(w.layers[1].wq).data().iter().all(|v| v.abs() <= a));
    }

    #[test]
    fn mean_pool_of_two_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = mean_pool(&mut g, x, &[1, 1]).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 3.0]);
        let p = mean_pool(&mut g, x, &[1, 0]).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0]);
    }

    #[test]
    fn single_token_pools_to_its_vector() {
        let m = DualEncoder::init(cfg(), true).unwrap();
        let x = input(&[2]);
        let mut g = Graph::new();
        let toks = m.weights(Side::Sentence).forward_tokens(&mut g, &m.store, &m.config, &x).unwrap();
        let tok = g.value(toks).data().to_vec();
        let emb = m.encode_sequence(Side::Sentence, &x).unwrap();
        assert_eq!(emb.0, tok);
    }

    #[test]
    fn trailing_pad_does_not_change_embedding() {
        let m = DualEncoder::init(cfg(), false).unwrap();
        let x = input(&[2, 9, 4, 11]);
        let base = m.encode_sequence(Side::Sentence, &x).unwrap();
        for len in 5..=16 {
            let padded = x.padded_to(len);
            assert_eq!(padded.ids[len - 1], PAD_ID);
            let e = m.encode_sequence(Side::Sentence, &padded).unwrap();
            let diff = base.0.iter().zip(&e.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-10, "len {len}: {diff}");
        }
    }

    #[test]
    fn swapping_tokens_changes_embedding() {
        let m = DualEncoder::init(cfg(), true).unwrap();
        let a = m.encode_sequence(Side::Sentence, &input(&[2, 9, 4])).unwrap();
        let b = m.encode_sequence(Side::Sentence, &input(&[2, 4, 9])).unwrap();
        assert!(a.euclidean(&b) > 1e-6);
    }

    #[test]
    fn tied_sides_agree() {
        let m = DualEncoder::init(cfg(), true).unwrap();
        let x = input(&[3, 5, 7]);
        assert_eq!(
            m.encode_sequence(Side::Sentence, &x).unwrap(),
            m.encode_sequence(Side::Form, &x).unwrap()
        );
    }

    #[test]
    fn out_of_range_id() {
        let m = DualEncoder::init(cfg(), true).unwrap();
        assert!(matches!(
            m.encode_sequence(Side::Sentence, &input(&[2, 20])),
            Err(EncoderError::Vocab { id: 20, vocab_size: 20 })
        ));
        let bad = EncodedInput {
            ids: vec![2, 3, 4],
            mask: vec![1, 0, 1],
            marker: Marker::Sentence,
        };
        assert!(matches!(m.encode_sequence(Side::Sentence, &bad), Err(EncoderError::Input(_))));
    }

    fn layer_store(c: &EncoderConfig) -> (ParamStore, LayerWeights) {
        let mut store = ParamStore::new();
        let w = EncoderWeights::register(&mut store, "t", c, &mut substream(5, 0)).unwrap();
        (store, w.layers[0].clone())
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let c = cfg();
        let (mut store, layer) = layer_store(&c);
        for id in [layer.wq, layer.wk] {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let h = g.constant(positional_encoding(5, c.d_model));
        let mask = [true, true, true, false, false];
        let (_, weights) = attention(&mut g, &store, &c, &layer, h, &mask).unwrap();
        for w in weights {
            let t = g.value(w);
            for i in 0..5 {
                assert_eq!(t.row(i), &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn single_valid_position_passes_value_through() {
        let c = cfg();
        let (store, layer) = layer_store(&c);
        let mut g = Graph::new();
        let h = g.constant(positional_encoding(3, c.d_model));
        let mask = [true, false, false];
        let (_, weights) = attention(&mut g, &store, &c, &layer, h, &mask).unwrap();
        for w in weights {
            for i in 0..3 {
                assert_eq!(g.value(w).row(i), &[1.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let c = cfg();
        let (store, layer) = layer_store(&c);
        let mut rng = substream(8, 0);
        for len in 2..8 {
            let data = (0..len * c.d_model)
                .map(|_| Uniform::new(-2.0, 2.0).sample(&mut rng))
                .collect();
            let mut g = Graph::new();
            let h = g.constant(Tensor::matrix(len, c.d_model, data).unwrap());
            let mask: Vec<bool> = (0..len).map(|i| i < len - 1).collect();
            let (_, weights) = attention(&mut g, &store, &c, &layer, h, &mask).unwrap();
            for w in weights {
                for i in 0..len {
                    let s: f64 = g.value(w).row(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn extracted_encoder_matches_dual_side() {
        let m = DualEncoder::init(cfg(), false).unwrap();
        let x = input(&[2, 8, 1]);
        let e = m.extract(Side::Sentence);
        assert_eq!(
            e.encode_sequence(&x).unwrap(),
            m.encode_sequence(Side::Sentence, &x).unwrap()
        );
        let tied = DualEncoder::init(cfg(), true).unwrap();
        assert_eq!(
            tied.extract(Side::Sentence).to_checkpoint_bytes(),
            tied.extract(Side::Form).to_checkpoint_bytes()
        );
    }
}
