//! Transformer text encoder with shared parameters across all task inputs.
//!
//! Pre-norm blocks with GELU feed-forwards, learned absolute positions, and
//! a final layer norm. On top of the encoder sit the task heads: a relation
//! embedding table, four bias-free two-layer projection heads (one
//! query/candidate pair for each knowledge task), and a weight-tied MLM
//! output head. One [`Parameters`] value serves every role; nothing is
//! copied per task.

mod forward;

pub use forward::{
    encode, encode_on_tape, mlm_logits, mlm_logits_on_tape, project_candidate_mep,
    project_candidate_oe, project_on_tape, project_query_mep, project_query_oe, relation_embed,
    EncodeNodes, ForwardMode, ProjectionHead,
};

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Scalar, Tape};
use crate::error::{Result, XlmkError};
use crate::rng::substream;

/// Width of the feed-forward inner layer relative to `d_w`.
const FFN_MULT: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Hidden width.
    pub d_w: usize,
    /// Projection-head inner width.
    pub d_p: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    /// `"gelu"` or `"relu"` for the feed-forward nonlinearity.
    pub activation: String,
    pub vocab_size: usize,
    pub n_relations: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        // Desk-scale defaults; the full-scale reference setting is
        // 768 wide, 12 heads, 12 layers.
        EncoderConfig {
            d_w: 64,
            d_p: 32,
            n_layers: 2,
            n_heads: 4,
            max_len: 257,
            dropout_rate: 0.1,
            activation: "gelu".to_string(),
            vocab_size: 0,
            n_relations: 0,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_w == 0 || self.n_heads == 0 || !self.d_w.is_multiple_of(self.n_heads) {
            return Err(XlmkError::InvalidConfig(format!(
                "d_w {} must be a positive multiple of n_heads {}",
                self.d_w, self.n_heads
            )));
        }
        if self.d_p == 0 {
            return Err(XlmkError::InvalidConfig("d_p must be >= 1".to_string()));
        }
        if self.max_len < 257 {
            return Err(XlmkError::InvalidConfig(format!(
                "max_len {} is below the knowledge-task minimum of 257",
                self.max_len
            )));
        }
        if self.n_layers == 0 {
            return Err(XlmkError::InvalidConfig("n_layers must be >= 1".to_string()));
        }
        if self.vocab_size == 0 {
            return Err(XlmkError::InvalidConfig("vocab_size must be set".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(XlmkError::InvalidConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        match self.activation.as_str() {
            "gelu" | "relu" => Ok(()),
            other => Err(XlmkError::InvalidConfig(format!(
                "unknown activation {other:?}"
            ))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_w / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_w * FFN_MULT
    }
}

/// All trainable tensors, stored by stable name.
///
/// Names: `token_emb`, `pos_emb`, `relation_table`, `w1`..`w8`, `mlm_bias`,
/// and per layer `layer{i}.{attn.{wq,bq,wk,bk,wv,bv,wo,bo},ln1,ln2}.*`,
/// plus the final `ln_f.gamma` / `ln_f.beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F: Scalar> {
    tensors: IndexMap<String, Array2<F>>,
    config: EncoderConfig,
}

impl<F: Scalar> Parameters<F> {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> &Array2<F> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<F> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<F>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Convert precision (f32 <-> f64), e.g. for double-precision checks.
    pub fn cast<G: Scalar>(&self) -> Parameters<G> {
        Parameters {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| G::from_f64(x.to_f64()))))
                .collect(),
            config: self.config.clone(),
        }
    }

    pub(crate) fn from_named_tensors(
        config: EncoderConfig,
        tensors: IndexMap<String, Array2<F>>,
    ) -> Self {
        Parameters { tensors, config }
    }
}

fn xavier_uniform<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Array2<F> {
    let limit = gain * (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        F::from_f64(rng.gen_range(-limit..limit))
    })
}

fn normal<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<F> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("valid normal");
    Array2::from_shape_fn((rows, cols), |_| F::from_f64(dist.sample(rng)))
}

/// Projection heads start small so that raw dot-product logits of a fresh
/// model sit near zero and the contrastive loss starts near ln(N).
const PROJECTION_GAIN: f64 = 0.25;
const EMBED_STD: f64 = 0.02;

/// Deterministic initialization: every tensor draws from its own named
/// sub-stream of `config.seed`.
pub fn init_parameters<F: Scalar>(config: &EncoderConfig) -> Result<Parameters<F>> {
    config.validate()?;
    let mut tensors: IndexMap<String, Array2<F>> = IndexMap::new();
    let seed = config.seed;
    let mut put = |name: String, t: Array2<F>| {
        tensors.insert(name, t);
    };
    let stream = |name: &str| substream(seed, &format!("init.{name}"));

    put(
        "token_emb".into(),
        normal(&mut stream("token_emb"), config.vocab_size, config.d_w, EMBED_STD),
    );
    put(
        "pos_emb".into(),
        normal(&mut stream("pos_emb"), config.max_len, config.d_w, EMBED_STD),
    );

    for i in 0..config.n_layers {
        let lp = format!("layer{i}");
        for w in ["wq", "wk", "wv", "wo"] {
            put(
                format!("{lp}.attn.{w}"),
                xavier_uniform(&mut stream(&format!("{lp}.attn.{w}")), config.d_w, config.d_w, 1.0),
            );
            put(
                format!("{lp}.attn.{}", w.replace('w', "b")),
                Array2::zeros((1, config.d_w)),
            );
        }
        put(format!("{lp}.ln1.gamma"), Array2::ones((1, config.d_w)));
        put(format!("{lp}.ln1.beta"), Array2::zeros((1, config.d_w)));
        put(
            format!("{lp}.ffn.w1"),
            xavier_uniform(&mut stream(&format!("{lp}.ffn.w1")), config.d_w, config.ffn_dim(), 1.0),
        );
        put(format!("{lp}.ffn.b1"), Array2::zeros((1, config.ffn_dim())));
        put(
            format!("{lp}.ffn.w2"),
            xavier_uniform(&mut stream(&format!("{lp}.ffn.w2")), config.ffn_dim(), config.d_w, 1.0),
        );
        put(format!("{lp}.ffn.b2"), Array2::zeros((1, config.d_w)));
        put(format!("{lp}.ln2.gamma"), Array2::ones((1, config.d_w)));
        put(format!("{lp}.ln2.beta"), Array2::zeros((1, config.d_w)));
    }
    put("ln_f.gamma".into(), Array2::ones((1, config.d_w)));
    put("ln_f.beta".into(), Array2::zeros((1, config.d_w)));

    put(
        "relation_table".into(),
        normal(
            &mut stream("relation_table"),
            config.n_relations.max(1),
            config.d_w,
            EMBED_STD,
        ),
    );

    // Query/candidate projection pairs: odd names map d_w -> d_p, even names
    // map d_p -> d_w. No bias terms.
    for (name, rows, cols) in [
        ("w1", config.d_w, config.d_p),
        ("w2", config.d_p, config.d_w),
        ("w3", config.d_w, config.d_p),
        ("w4", config.d_p, config.d_w),
        ("w5", config.d_w, config.d_p),
        ("w6", config.d_p, config.d_w),
        ("w7", config.d_w, config.d_p),
        ("w8", config.d_p, config.d_w),
    ] {
        put(
            name.into(),
            xavier_uniform(&mut stream(name), rows, cols, PROJECTION_GAIN),
        );
    }

    put("mlm_bias".into(), Array2::zeros((1, config.vocab_size)));

    Ok(Parameters {
        tensors,
        config: config.clone(),
    })
}

/// Final hidden states plus the pooled [CLS] row.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<F: Scalar> {
    pub hidden: Array2<F>,
    pub cls: ndarray::Array1<F>,
}

/// Parameter-name-keyed gradients. A fresh value is sparse (only tensors the
/// loss actually touched); `materialize` fills the rest with zeros.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients<F: Scalar> {
    map: IndexMap<String, Array2<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn empty() -> Self {
        Gradients {
            map: IndexMap::new(),
        }
    }

    /// Collect the gradients of every parameter bound on `binder`'s tape.
    pub fn from_backward(
        binder: &Binder<'_, F>,
        grads: &[Option<Array2<F>>],
    ) -> Self {
        let mut map = IndexMap::new();
        for (name, node) in binder.bound() {
            if let Some(g) = &grads[node] {
                map.insert(name.to_string(), g.clone());
            }
        }
        Gradients { map }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Array2<F>) {
        self.map.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<F>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Add `other` into `self`, keeping insertion order stable.
    pub fn accumulate(&mut self, other: &Gradients<F>) {
        for (name, g) in other.iter() {
            match self.map.get_mut(name) {
                Some(acc) => *acc += g,
                None => {
                    self.map.insert(name.to_string(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, k: F) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }

    /// Zero-filled gradient for every parameter missing from this set;
    /// parameters unreachable from the loss end up with exact zeros.
    pub fn materialize(&self, params: &Parameters<F>) -> Gradients<F> {
        let mut map = IndexMap::new();
        for (name, tensor) in params.iter() {
            let g = self
                .map
                .get(name)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(tensor.raw_dim()));
            map.insert(name.to_string(), g);
        }
        Gradients { map }
    }

    pub fn global_norm(&self) -> F {
        self.map
            .values()
            .fold(F::zero(), |acc, g| {
                acc + g.iter().fold(F::zero(), |a, &v| a + v * v)
            })
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Name of the first non-finite tensor, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.map
            .iter()
            .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
            .map(|(k, _)| k.as_str())
    }
}

/// Lazily binds parameters into a tape, one leaf per distinct tensor, and
/// remembers which node holds which name so gradients can be read back out.
pub struct Binder<'p, F: Scalar> {
    params: &'p Parameters<F>,
    bound: IndexMap<String, NodeId>,
}

impl<'p, F: Scalar> Binder<'p, F> {
    pub fn new(params: &'p Parameters<F>) -> Self {
        Binder {
            params,
            bound: IndexMap::new(),
        }
    }

    pub fn params(&self) -> &'p Parameters<F> {
        self.params
    }

    pub fn config(&self) -> &EncoderConfig {
        self.params.config()
    }

    pub fn get(&mut self, tape: &mut Tape<F>, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let id = tape.param(self.params.get(name).clone());
        self.bound.insert(name.to_string(), id);
        id
    }

    /// (name, node) pairs for every parameter touched by this tape.
    pub fn bound(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
