//! Attention encoder-decoder scorer.
//!
//! A bidirectional LSTM encodes the input; an LSTM decoder with MLP attention
//! produces output-token logits through a one-hidden-layer output MLP.
//! Optional extras: a lexical bias term `ln(P' α + ε)` built from the inverse
//! translation table, and a copy action per input position whose logit is the
//! attention score rescaled by two learned scalars.
//!
//! The forward pass is written once against [`exec::Exec`] and evaluated
//! either directly on vectors (inference) or on a reverse-mode tape (training).

pub mod exec;
pub mod model;
mod io;
pub mod train;

use std::collections::{BTreeSet, HashMap};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};

pub use model::{DecoderStepState, EncoderOutput, NeuralScorer, Prediction, StepOutput};
pub use train::{train, TrainOptions, TrainReport};

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";

/// Sizes and switches. Widths default to 64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralConfig {
    pub embedding: usize,
    pub hidden: usize,
    pub attention: usize,
    pub mlp: usize,
    /// Added inside the bias logarithm.
    pub epsilon: f64,
    pub bias: bool,
    pub copy: bool,
    /// Weights are drawn uniformly from `±init_scale · sqrt(6 / (rows + cols))`.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        NeuralConfig {
            embedding: 64,
            hidden: 64,
            attention: 64,
            mlp: 64,
            epsilon: 1e-3,
            bias: false,
            copy: false,
            init_scale: 1.0,
            seed: 1,
        }
    }
}

/// Token list with reserved entries first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Model(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Model("vocabulary must start with <unk>".into()));
        }
        Ok(Vocab { tokens, ids })
    }

    fn with_reserved<'a>(reserved: &[&str], words: impl IntoIterator<Item = &'a String>) -> Self {
        let rest: BTreeSet<&String> = words
            .into_iter()
            .filter(|w| !reserved.contains(&w.as_str()))
            .collect();
        let tokens = reserved
            .iter()
            .map(|s| s.to_string())
            .chain(rest.into_iter().cloned())
            .collect();
        Vocab::new(tokens).expect("reserved tokens are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    /// Id of `token`, or of `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(0)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Parameter tensors, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Param {
    SourceEmbedding,
    EncoderForwardW,
    EncoderForwardB,
    EncoderBackwardW,
    EncoderBackwardB,
    DecoderInitW,
    DecoderInitB,
    TargetEmbedding,
    DecoderW,
    DecoderB,
    AttentionQuery,
    AttentionKey,
    AttentionB,
    AttentionV,
    OutputMlpW,
    OutputMlpB,
    OutputW,
    OutputB,
    CopyScale,
    CopyShift,
}

/// Parameter groups used for reporting and gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Embeddings,
    Encoder,
    Decoder,
    Attention,
    OutputMlp,
    OutputWeights,
    OutputBias,
    Copy,
}

impl Param {
    pub const ALL: [Param; 20] = [
        Param::SourceEmbedding,
        Param::EncoderForwardW,
        Param::EncoderForwardB,
        Param::EncoderBackwardW,
        Param::EncoderBackwardB,
        Param::DecoderInitW,
        Param::DecoderInitB,
        Param::TargetEmbedding,
        Param::DecoderW,
        Param::DecoderB,
        Param::AttentionQuery,
        Param::AttentionKey,
        Param::AttentionB,
        Param::AttentionV,
        Param::OutputMlpW,
        Param::OutputMlpB,
        Param::OutputW,
        Param::OutputB,
        Param::CopyScale,
        Param::CopyShift,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Param::SourceEmbedding => "source_embedding",
            Param::EncoderForwardW => "encoder.forward.w",
            Param::EncoderForwardB => "encoder.forward.b",
            Param::EncoderBackwardW => "encoder.backward.w",
            Param::EncoderBackwardB => "encoder.backward.b",
            Param::DecoderInitW => "decoder.init.w",
            Param::DecoderInitB => "decoder.init.b",
            Param::TargetEmbedding => "target_embedding",
            Param::DecoderW => "decoder.w",
            Param::DecoderB => "decoder.b",
            Param::AttentionQuery => "attention.query",
            Param::AttentionKey => "attention.key",
            Param::AttentionB => "attention.b",
            Param::AttentionV => "attention.v",
            Param::OutputMlpW => "output_mlp.w",
            Param::OutputMlpB => "output_mlp.b",
            Param::OutputW => "output.w",
            Param::OutputB => "output.b",
            Param::CopyScale => "copy.scale",
            Param::CopyShift => "copy.shift",
        }
    }

    pub fn group(self) -> ParamGroup {
        use Param::*;
        match self {
            SourceEmbedding | TargetEmbedding => ParamGroup::Embeddings,
            EncoderForwardW | EncoderForwardB | EncoderBackwardW | EncoderBackwardB => ParamGroup::Encoder,
            DecoderInitW | DecoderInitB | DecoderW | DecoderB => ParamGroup::Decoder,
            AttentionQuery | AttentionKey | AttentionB | AttentionV => ParamGroup::Attention,
            OutputMlpW | OutputMlpB => ParamGroup::OutputMlp,
            OutputW => ParamGroup::OutputWeights,
            OutputB => ParamGroup::OutputBias,
            CopyScale | CopyShift => ParamGroup::Copy,
        }
    }

    fn shape(self, c: &NeuralConfig, src: usize, tgt: usize) -> (usize, usize) {
        let (e, h, a, m) = (c.embedding, c.hidden, c.attention, c.mlp);
        match self {
            Param::SourceEmbedding => (src, e),
            Param::EncoderForwardW | Param::EncoderBackwardW => (4 * h, e + h),
            Param::EncoderForwardB | Param::EncoderBackwardB => (4 * h, 1),
            Param::DecoderInitW => (h, 2 * h),
            Param::DecoderInitB => (h, 1),
            Param::TargetEmbedding => (tgt, e),
            Param::DecoderW => (4 * h, e + 2 * h + h),
            Param::DecoderB => (4 * h, 1),
            Param::AttentionQuery => (a, h),
            Param::AttentionKey => (a, 2 * h),
            Param::AttentionB => (a, 1),
            Param::AttentionV => (1, a),
            Param::OutputMlpW => (m, 2 * h + h),
            Param::OutputMlpB => (m, 1),
            Param::OutputW => (tgt, m),
            Param::OutputB => (tgt, 1),
            Param::CopyScale | Param::CopyShift => (1, 1),
        }
    }
}

/// A row-major matrix (vectors are `n × 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// All trainable weights plus the vocabularies and configuration they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralParameters {
    pub config: NeuralConfig,
    pub source_vocab: Vocab,
    pub target_vocab: Vocab,
    pub tensors: Vec<Tensor>,
}

impl NeuralParameters {
    /// Randomly initialized parameters for the vocabularies of `corpus`.
    pub fn new(config: NeuralConfig, corpus: &ParallelCorpus) -> Result<Self> {
        let source_vocab = Vocab::with_reserved(&[UNK], &corpus.source_vocab);
        let target_vocab =
            Vocab::with_reserved(&[UNK, BOS, crate::automaton::EOS], &corpus.target_vocab);
        Self::with_vocabs(config, source_vocab, target_vocab)
    }

    pub fn with_vocabs(config: NeuralConfig, source_vocab: Vocab, target_vocab: Vocab) -> Result<Self> {
        if [config.embedding, config.hidden, config.attention, config.mlp].contains(&0) {
            return Err(Error::InvalidInput("network widths must be positive".into()));
        }
        if config.epsilon.is_nan() || config.epsilon <= 0.0 {
            return Err(Error::InvalidInput("epsilon must be positive".into()));
        }
        if target_vocab.get(BOS).is_none() || target_vocab.get(crate::automaton::EOS).is_none() {
            return Err(Error::Model("target vocabulary lacks <s> or </s>".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = config.init_scale;
        let tensors = Param::ALL
            .iter()
            .map(|&p| {
                let (r, c) = p.shape(&config, source_vocab.len(), target_vocab.len());
                let mut t = Tensor::zeros(r, c);
                match p {
                    Param::CopyScale => t.data[0] = 1.0,
                    Param::CopyShift => {}
                    _ => {
                        let bound = s * (6.0 / (r + c) as f64).sqrt();
                        t.data.iter_mut().for_each(|v| *v = rng.random_range(-bound..=bound));
                    }
                }
                t
            })
            .collect();
        Ok(NeuralParameters { config, source_vocab, target_vocab, tensors })
    }

    pub fn tensor(&self, p: Param) -> &Tensor {
        &self.tensors[p.index()]
    }

    pub fn tensor_mut(&mut self, p: Param) -> &mut Tensor {
        &mut self.tensors[p.index()]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn eos_id(&self) -> usize {
        self.target_vocab.id(crate::automaton::EOS)
    }

    pub fn bos_id(&self) -> usize {
        self.target_vocab.id(BOS)
    }

    /// Checks tensor shapes against the configuration.
    pub fn validate(&self) -> Result<()> {
        if self.tensors.len() != Param::ALL.len() {
            return Err(Error::Model("wrong number of tensors".into()));
        }
        for &p in &Param::ALL {
            let want = p.shape(&self.config, self.source_vocab.len(), self.target_vocab.len());
            let t = self.tensor(p);
            if (t.rows, t.cols) != want || t.data.len() != want.0 * want.1 {
                return Err(Error::Model(format!(
                    "{} has shape {}x{}, expected {}x{}",
                    p.name(),
                    t.rows,
                    t.cols,
                    want.0,
                    want.1
                )));
            }
        }
        if !self.is_finite() {
            return Err(Error::Model("non-finite weights".into()));
        }
        Ok(())
    }
}

/// Gradient buffers shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(params: &NeuralParameters) -> Self {
        Gradients {
            tensors: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn get(&self, p: Param) -> &[f64] {
        &self.tensors[p.index()]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }
}

pub use io::{load_parameters, save_parameters};
