//! Neural stance classifiers: LSTM, target-augmented attention BiLSTM (TAN),
//! its target-free ablation (TAN-), and a Kim-style CNN. Also embedding
//! loading, training with Adam, and the attention target-invariance check.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{grad_check, Adam, Axis, GradCheckOptions, Gradients, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::evaluation::macro_f1_favor_against;
use crate::label::StanceLabel;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Range of the uniform distribution used for out-of-vocabulary vectors.
pub const OOV_BOUND: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Lstm,
    Tan,
    TanMinus,
    Cnn,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [Architecture::Tan, Architecture::TanMinus, Architecture::Lstm, Architecture::Cnn];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Lstm => "LSTM",
            Architecture::Tan => "TAN",
            Architecture::TanMinus => "TAN-",
            Architecture::Cnn => "CNN",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lstm" => Ok(Architecture::Lstm),
            "tan" => Ok(Architecture::Tan),
            "tan-" | "tan_minus" | "tanminus" => Ok(Architecture::TanMinus),
            "cnn" => Ok(Architecture::Cnn),
            other => Err(Error::Validation(format!("unknown neural architecture `{other}`"))),
        }
    }
}

/// Deterministic vector for a word missing from the pretrained table:
/// uniform in `[-OOV_BOUND, OOV_BOUND]`, seeded by a digest of `(seed, word)`.
pub fn oov_vector(word: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(word.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    (0..dim).map(|_| rng.gen_range(-OOV_BOUND..=OOV_BOUND)).collect()
}

/// Pretrained word vectors with a deterministic fallback for unknown words.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    index: HashMap<String, usize>,
    vectors: Vec<f64>,
    oov_seed: u64,
}

impl EmbeddingTable {
    pub fn new(dim: usize, oov_seed: u64) -> Self {
        EmbeddingTable {
            dim,
            index: HashMap::new(),
            vectors: Vec::new(),
            oov_seed,
        }
    }

    /// Later entries for the same word replace earlier ones.
    pub fn insert(&mut self, word: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector for `{word}` has {} values, table dimension is {}",
                vector.len(),
                self.dim
            )));
        }
        match self.index.get(word) {
            Some(&row) => self.vectors[row * self.dim..(row + 1) * self.dim].copy_from_slice(vector),
            None => {
                self.index.insert(word.to_string(), self.index.len());
                self.vectors.extend_from_slice(vector);
            }
        }
        Ok(())
    }

    /// Parses `word v1 ... vd` lines; `d` is fixed by the first line.
    pub fn parse(content: &str, origin: &str, oov_seed: u64) -> Result<Self> {
        Self::from_lines(content.lines().map(|l| Ok(l.to_string())), origin, oov_seed, None)
    }

    pub fn load(path: &Path, oov_seed: u64) -> Result<Self> {
        Self::load_filtered(path, oov_seed, None)
    }

    /// Streams the file, keeping only the words in `keep` (all words when `None`).
    /// Skipped lines are still checked for a consistent dimension.
    pub fn load_filtered(path: &Path, oov_seed: u64, keep: Option<&HashSet<String>>) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let lines = BufReader::new(file).lines().map(|l| l.map_err(|e| Error::io(path, e)));
        Self::from_lines(lines, &path.display().to_string(), oov_seed, keep)
    }

    fn from_lines<I>(lines: I, origin: &str, oov_seed: u64, keep: Option<&HashSet<String>>) -> Result<Self>
    where
        I: Iterator<Item = Result<String>>,
    {
        let mut table: Option<EmbeddingTable> = None;
        for (i, line) in lines.enumerate() {
            let line = line?;
            let line_no = i + 1;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let wanted = keep.is_none_or(|k| k.contains(word));
            let values: Vec<f64> = if wanted || table.is_none() {
                parts
                    .map(|p| {
                        p.parse::<f64>()
                            .map_err(|_| Error::parse(origin, line_no, format!("`{p}` is not a number")))
                    })
                    .collect::<Result<_>>()?
            } else {
                let n = parts.count();
                let dim = table.as_ref().map_or(0, |t| t.dim);
                if n != dim {
                    return Err(Error::parse(origin, line_no, format!("expected {dim} values, found {n}")));
                }
                continue;
            };
            if values.is_empty() {
                return Err(Error::parse(origin, line_no, "line has no vector values"));
            }
            let t = table.get_or_insert_with(|| EmbeddingTable::new(values.len(), oov_seed));
            if values.len() != t.dim {
                return Err(Error::parse(
                    origin,
                    line_no,
                    format!("expected {} values, found {}", t.dim, values.len()),
                ));
            }
            if wanted {
                t.insert(word, &values)?;
            }
        }
        table.ok_or_else(|| Error::parse(origin, 0, "embedding file is empty"))
    }

    /// Random table for experiments without pretrained vectors: every word is out of vocabulary.
    pub fn random(dim: usize, oov_seed: u64) -> Self {
        EmbeddingTable::new(dim, oov_seed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Pretrained vector, or the word's deterministic OOV vector.
    pub fn lookup(&self, word: &str) -> Vec<f64> {
        match self.index.get(word) {
            Some(&row) => self.vectors[row * self.dim..(row + 1) * self.dim].to_vec(),
            None => oov_vector(word, self.dim, self.oov_seed),
        }
    }

    /// Mean of the words' vectors; the target encoding `z`.
    pub fn mean_vector<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<f64>> {
        if words.is_empty() {
            return Err(Error::Validation("target has no words".into()));
        }
        let mut z = vec![0.0; self.dim];
        for w in words {
            for (a, v) in z.iter_mut().zip(self.lookup(w.as_ref())) {
                *a += v;
            }
        }
        let n = words.len() as f64;
        z.iter_mut().for_each(|v| *v /= n);
        Ok(z)
    }
}

/// Lower-cased alphanumeric words of a target phrase.
pub fn target_words(target: &str) -> Vec<String> {
    target
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeuralConfig {
    pub architecture: Architecture,
    /// LSTM hidden size per direction.
    pub hidden: usize,
    /// Optional ReLU layer between the encoder and the output affine map.
    pub head_hidden: Option<usize>,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Coefficient of `||W_out||^2 / 2` added to the summed training loss.
    pub l2: f64,
    pub epochs: usize,
    pub filter_widths: Vec<usize>,
    pub filters: usize,
    /// Upper bound on the squared norm of each class's output weight vector (CNN).
    pub norm_limit: Option<f64>,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: Option<f64>,
    pub trainable_embeddings: bool,
    pub seed: u64,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        NeuralConfig {
            architecture: Architecture::Tan,
            hidden: 128,
            head_hidden: None,
            dropout: 0.5,
            learning_rate: 5e-4,
            batch_size: 50,
            l2: 0.0,
            epochs: 50,
            filter_widths: vec![3, 4, 5],
            filters: 100,
            norm_limit: None,
            lr_decay: None,
            trainable_embeddings: false,
            seed: 13,
        }
    }
}

impl NeuralConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("hidden, batch_size and epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.l2 >= 0.0) {
            return bad(format!("l2 must be non-negative, got {}", self.l2));
        }
        if self.head_hidden == Some(0) {
            return bad("head_hidden must be positive".into());
        }
        if self.architecture == Architecture::Cnn && (self.filters == 0 || self.filter_widths.contains(&0) || self.filter_widths.is_empty()) {
            return bad("CNN needs at least one positive filter width and a positive filter count".into());
        }
        if let Some(s) = self.norm_limit {
            if !(s > 0.0) {
                return bad(format!("norm_limit must be positive, got {s}"));
            }
        }
        if let Some(d) = self.lr_decay {
            if !(d > 0.0 && d <= 1.0) {
                return bad(format!("lr_decay must be in (0, 1], got {d}"));
            }
        }
        Ok(())
    }

    /// Defaults for an architecture on a topic, with the per-topic values of
    /// the published hyperparameter table where it gives them.
    pub fn for_topic(architecture: Architecture, topic: &str) -> Self {
        let mut cfg = NeuralConfig {
            architecture,
            ..Default::default()
        };
        let s = topic_schedule(architecture, topic);
        cfg.l2 = s.l2;
        cfg.epochs = s.epochs.1;
        cfg.norm_limit = s.norm_limit;
        if architecture == Architecture::Cnn {
            cfg.lr_decay = Some(0.95);
        }
        cfg
    }
}

/// Per-topic training schedule: L2 coefficient, checkpoint epoch range
/// (inclusive) and CNN squared-norm limit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopicSchedule {
    pub l2: f64,
    pub epochs: (usize, usize),
    pub norm_limit: Option<f64>,
}

fn pick<T: Copy>(topic: &str, table: &[(&[&str], T)], fallback: T) -> T {
    table
        .iter()
        .find(|(topics, _)| topics.contains(&topic))
        .map(|&(_, v)| v)
        .unwrap_or(fallback)
}

/// Published per-topic schedule; unknown topics get middle-of-the-table values.
pub fn topic_schedule(architecture: Architecture, topic: &str) -> TopicSchedule {
    let topic = topic.to_ascii_uppercase();
    let topic = topic.as_str();
    match architecture {
        Architecture::Tan | Architecture::TanMinus => TopicSchedule {
            l2: pick(
                topic,
                &[
                    (&["AT", "HRT"], 1.25),
                    (&["CC", "LA", "HC"], 1.0),
                    (&["FM"], 0.75),
                    (&["MMR", "SC", "VC", "EC"], 0.25),
                ],
                1.0,
            ),
            epochs: pick(
                topic,
                &[
                    (&["AT", "LA", "VC"], (40, 50)),
                    (&["CC", "FM", "HC", "MMR", "HRT", "SC", "EC"], (50, 60)),
                ],
                (50, 60),
            ),
            norm_limit: None,
        },
        Architecture::Lstm => TopicSchedule {
            l2: pick(
                topic,
                &[
                    (&["AT", "HC", "VC", "EC"], 0.25),
                    (&["CC", "LA", "MMR", "HRT", "SC"], 0.5),
                    (&["FM"], 0.75),
                ],
                0.5,
            ),
            epochs: pick(
                topic,
                &[
                    (&["AT", "CC", "FM", "LA", "HC", "SC"], (50, 60)),
                    (&["MMR", "HRT", "VC", "EC"], (30, 40)),
                ],
                (50, 60),
            ),
            norm_limit: None,
        },
        Architecture::Cnn => TopicSchedule {
            l2: 0.0,
            epochs: (20, 25),
            norm_limit: Some(pick(
                topic,
                &[
                    (&["AT", "FM", "LA", "MMR", "VC", "EC"], 7.0),
                    (&["CC", "HC", "HRT"], 8.0),
                    (&["SC"], 9.0),
                ],
                9.0,
            )),
        },
    }
}

/// Word list with a lookup index; serializes as the list.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
struct WordIndex {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for WordIndex {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        WordIndex { words, index }
    }
}

impl From<WordIndex> for Vec<String> {
    fn from(w: WordIndex) -> Self {
        w.words
    }
}

impl WordIndex {
    fn get(&self, w: &str) -> Option<usize> {
        self.index.get(w).copied()
    }

    fn push(&mut self, w: &str) -> usize {
        let i = self.words.len();
        self.words.push(w.to_string());
        self.index.insert(w.to_string(), i);
        i
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct LstmParams {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Params {
    embedding: ParamId,
    lstm_fwd: Option<LstmParams>,
    lstm_bwd: Option<LstmParams>,
    attn_w: Option<ParamId>,
    attn_b: Option<ParamId>,
    convs: Vec<(usize, ParamId, ParamId)>,
    head: Option<(ParamId, ParamId)>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Glorot-uniform initialization.
fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(rows, cols, bound, rng)
}

fn add_lstm(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> LstmParams {
    let w = store.add(format!("{prefix}.w"), glorot(input, 4 * hidden, rng), true);
    let u = store.add(format!("{prefix}.u"), glorot(hidden, 4 * hidden, rng), true);
    // gate order: input, forget, candidate, output; forget bias starts at 1
    let mut bias = Tensor::zeros(1, 4 * hidden);
    bias.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
    let b = store.add(format!("{prefix}.b"), bias, true);
    LstmParams { w, u, b }
}

/// Output of one forward pass.
pub struct Forward {
    pub probs: Var,
    /// `1×T` attention weights (TAN and TAN- only).
    pub attention: Option<Var>,
}

/// A trained or freshly initialized neural classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralModel {
    config: NeuralConfig,
    dim: usize,
    vocab: WordIndex,
    /// Target encoding `z`, the mean of the target word vectors.
    target: Vec<f64>,
    oov_seed: u64,
    store: ParamStore,
    params: Params,
}

impl NeuralModel {
    /// Initializes parameters from `config.seed`. The vocabulary starts with
    /// `words`; the target vector is the mean embedding of `target_words`.
    pub fn new<S: AsRef<str>, T: AsRef<str>>(
        config: NeuralConfig,
        table: &EmbeddingTable,
        words: &[S],
        target_words: &[T],
    ) -> Result<Self> {
        config.validate()?;
        let target = table.mean_vector(target_words)?;
        Self::with_target(config, table, words, target)
    }

    pub fn with_target<S: AsRef<str>>(config: NeuralConfig, table: &EmbeddingTable, words: &[S], target: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let d = table.dim();
        if d == 0 {
            return Err(Error::Shape("embedding dimension is zero".into()));
        }
        if target.len() != d {
            return Err(Error::Shape(format!("target vector has {} values, embeddings {d}", target.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut vocab = WordIndex::default();
        let mut rows = Vec::new();
        for w in words {
            let w = w.as_ref();
            if vocab.get(w).is_none() {
                vocab.push(w);
                rows.extend(table.lookup(w));
            }
        }
        let n_words = vocab.words.len();
        let embedding = store.add("embedding", Tensor::from_vec(n_words, d, rows)?, config.trainable_embeddings);
        let h = config.hidden;
        let (lstm_fwd, lstm_bwd, attn_w, attn_b, convs, enc_dim) = match config.architecture {
            Architecture::Lstm => (Some(add_lstm(&mut store, "lstm", d, h, &mut rng)), None, None, None, vec![], h),
            Architecture::Tan | Architecture::TanMinus => {
                let f = add_lstm(&mut store, "fwd", d, h, &mut rng);
                let b = add_lstm(&mut store, "bwd", d, h, &mut rng);
                let in_dim = if config.architecture == Architecture::Tan { 2 * d } else { d };
                let aw = store.add("attn.w", glorot(in_dim, 1, &mut rng), true);
                let ab = store.add("attn.b", Tensor::zeros(1, 1), true);
                (Some(f), Some(b), Some(aw), Some(ab), vec![], 2 * h)
            }
            Architecture::Cnn => {
                let convs = config
                    .filter_widths
                    .iter()
                    .map(|&w| {
                        let fw = store.add(format!("conv{w}.w"), glorot(w * d, config.filters, &mut rng), true);
                        let fb = store.add(format!("conv{w}.b"), Tensor::zeros(1, config.filters), true);
                        (w, fw, fb)
                    })
                    .collect();
                (None, None, None, None, convs, config.filter_widths.len() * config.filters)
            }
        };
        let (head, out_in) = match config.head_hidden {
            Some(k) => {
                let hw = store.add("head.w", glorot(enc_dim, k, &mut rng), true);
                let hb = store.add("head.b", Tensor::zeros(1, k), true);
                (Some((hw, hb)), k)
            }
            None => (None, enc_dim),
        };
        let out_w = store.add("out.w", glorot(out_in, 3, &mut rng), true);
        let out_b = store.add("out.b", Tensor::zeros(1, 3), true);
        Ok(NeuralModel {
            config,
            dim: d,
            vocab,
            target,
            oov_seed: table.oov_seed,
            store,
            params: Params {
                embedding,
                lstm_fwd,
                lstm_bwd,
                attn_w,
                attn_b,
                convs,
                head,
                out_w,
                out_b,
            },
        })
    }

    pub fn config(&self) -> &NeuralConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn set_target(&mut self, z: Vec<f64>) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::Shape(format!("target vector has {} values, embeddings {}", z.len(), self.dim)));
        }
        self.target = z;
        Ok(())
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.words.len()
    }

    /// Adds rows for words not yet in the vocabulary, taken from `table`.
    pub fn extend_vocab<S: AsRef<str>>(&mut self, words: &[S], table: &EmbeddingTable) -> Result<()> {
        if table.dim() != self.dim {
            return Err(Error::Shape(format!("table dimension {} differs from model {}", table.dim(), self.dim)));
        }
        let mut extra = Vec::new();
        for w in words {
            let w = w.as_ref();
            if self.vocab.get(w).is_none() {
                self.vocab.push(w);
                extra.extend(table.lookup(w));
            }
        }
        if extra.is_empty() {
            return Ok(());
        }
        let old = self.store.value(self.params.embedding);
        let mut data = old.data().to_vec();
        data.extend(extra);
        let t = Tensor::from_vec(self.vocab.words.len(), self.dim, data)?;
        self.store.set_value(self.params.embedding, t);
        Ok(())
    }

    /// `T×d` embedding rows for the tokens. Words outside the vocabulary get
    /// their OOV vector as constants.
    fn embed<S: AsRef<str>>(&self, tape: &mut Tape<'_>, tokens: &[S]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Validation("cannot classify an empty token sequence".into()));
        }
        let ids: Vec<Option<usize>> = tokens.iter().map(|t| self.vocab.get(t.as_ref())).collect();
        let emb = tape.param(self.params.embedding);
        if ids.iter().all(Option::is_some) {
            let idx: Vec<usize> = ids.into_iter().flatten().collect();
            return tape.gather_rows(emb, &idx);
        }
        let mut rows = Vec::with_capacity(tokens.len());
        for (tok, id) in tokens.iter().zip(ids) {
            let row = match id {
                Some(i) => tape.gather_rows(emb, &[i])?,
                None => tape.constant(Tensor::row_vector(oov_vector(tok.as_ref(), self.dim, self.oov_seed))),
            };
            rows.push(row);
        }
        tape.concat(&rows, Axis::Rows)
    }

    /// Hidden states of a unidirectional LSTM over the rows of `x`, in input order.
    fn lstm(&self, tape: &mut Tape<'_>, p: LstmParams, x: Var, reverse: bool) -> Result<Vec<Var>> {
        let h_size = self.config.hidden;
        let w = tape.param(p.w);
        let u = tape.param(p.u);
        let b = tape.param(p.b);
        let xw = tape.matmul(x, w)?;
        let xw = tape.add_row(xw, b)?;
        let steps = tape.value(x).rows();
        let mut h = tape.constant(Tensor::zeros(1, h_size));
        let mut c = tape.constant(Tensor::zeros(1, h_size));
        let mut out = vec![h; steps];
        let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for t in order {
            let xt = tape.row(xw, t)?;
            let hu = tape.matmul(h, u)?;
            let gates = tape.add(xt, hu)?;
            let i = tape.slice_cols(gates, 0, h_size)?;
            let i = tape.sigmoid(i);
            let f = tape.slice_cols(gates, h_size, h_size)?;
            let f = tape.sigmoid(f);
            let g = tape.slice_cols(gates, 2 * h_size, h_size)?;
            let g = tape.tanh(g);
            let o = tape.slice_cols(gates, 3 * h_size, h_size)?;
            let o = tape.sigmoid(o);
            let fc = tape.mul(f, c)?;
            let ig = tape.mul(i, g)?;
            c = tape.add(fc, ig)?;
            let tc = tape.tanh(c);
            h = tape.mul(o, tc)?;
            out[t] = h;
        }
        Ok(out)
    }

    /// Attention weights `softmax_t(W_a e_t + b_a)` with `e_t = [x_t; z]` for
    /// TAN and `e_t = x_t` for TAN-.
    fn attention(&self, tape: &mut Tape<'_>, x: Var, z: &[f64]) -> Result<Var> {
        let steps = tape.value(x).rows();
        let e = match self.config.architecture {
            Architecture::Tan => {
                let zv = tape.constant(Tensor::row_vector(z.to_vec()));
                let zr = tape.repeat_rows(zv, steps)?;
                tape.concat(&[x, zr], Axis::Cols)?
            }
            Architecture::TanMinus => x,
            _ => return Err(Error::Validation("attention is defined for TAN and TAN- only".into())),
        };
        let wa = tape.param(self.params.attn_w.expect("attention params"));
        let ba = tape.param(self.params.attn_b.expect("attention params"));
        let scores = tape.matmul(e, wa)?;
        let scores = tape.add_row(scores, ba)?;
        let scores = tape.transpose(scores);
        Ok(tape.softmax(scores))
    }

    /// Builds the classifier graph for one post with an explicit target vector.
    pub fn forward_with_target<S: AsRef<str>>(&self, tape: &mut Tape<'_>, tokens: &[S], z: &[f64]) -> Result<Forward> {
        if z.len() != self.dim {
            return Err(Error::Shape(format!("target vector has {} values, embeddings {}", z.len(), self.dim)));
        }
        let x = self.embed(tape, tokens)?;
        let mut attention = None;
        let encoded = match self.config.architecture {
            Architecture::Lstm => {
                let hs = self.lstm(tape, self.params.lstm_fwd.expect("lstm params"), x, false)?;
                *hs.last().expect("nonempty sequence")
            }
            Architecture::Tan | Architecture::TanMinus => {
                let fwd = self.lstm(tape, self.params.lstm_fwd.expect("lstm params"), x, false)?;
                let bwd = self.lstm(tape, self.params.lstm_bwd.expect("lstm params"), x, true)?;
                let hf = tape.concat(&fwd, Axis::Rows)?;
                let hb = tape.concat(&bwd, Axis::Rows)?;
                let hidden = tape.concat(&[hf, hb], Axis::Cols)?;
                let a = self.attention(tape, x, z)?;
                attention = Some(a);
                tape.matmul(a, hidden)?
            }
            Architecture::Cnn => {
                let max_width = self.config.filter_widths.iter().copied().max().unwrap_or(1);
                let steps = tape.value(x).rows();
                let x = if steps < max_width {
                    let pad = tape.constant(Tensor::zeros(max_width - steps, self.dim));
                    tape.concat(&[x, pad], Axis::Rows)?
                } else {
                    x
                };
                let mut pooled = Vec::with_capacity(self.params.convs.len());
                for &(width, fw, fb) in &self.params.convs {
                    let windows = tape.im2col(x, width)?;
                    let w = tape.param(fw);
                    let b = tape.param(fb);
                    let maps = tape.matmul(windows, w)?;
                    let maps = tape.add_row(maps, b)?;
                    let maps = tape.relu(maps);
                    pooled.push(tape.max_over_time(maps)?);
                }
                tape.concat(&pooled, Axis::Cols)?
            }
        };
        let mut h = tape.dropout(encoded, self.config.dropout)?;
        if let Some((hw, hb)) = self.params.head {
            let w = tape.param(hw);
            let b = tape.param(hb);
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = tape.relu(z);
        }
        let w = tape.param(self.params.out_w);
        let b = tape.param(self.params.out_b);
        let logits = tape.matmul(h, w)?;
        let logits = tape.add_row(logits, b)?;
        Ok(Forward {
            probs: tape.softmax(logits),
            attention,
        })
    }

    pub fn forward<S: AsRef<str>>(&self, tape: &mut Tape<'_>, tokens: &[S]) -> Result<Forward> {
        let z = self.target.clone();
        self.forward_with_target(tape, tokens, &z)
    }

    /// Cross-entropy for one example plus `l2_scale * ||W_out||^2 / 2`.
    pub fn example_loss<S: AsRef<str>>(&self, tape: &mut Tape<'_>, tokens: &[S], label: StanceLabel, l2_scale: f64) -> Result<Var> {
        let fwd = self.forward(tape, tokens)?;
        let mut target = Tensor::zeros(1, 3);
        target.set(0, label.index(), 1.0);
        let ce = tape.cross_entropy(fwd.probs, target)?;
        if l2_scale == 0.0 {
            return Ok(ce);
        }
        let w = tape.param(self.params.out_w);
        let sq = tape.sq_norm(w);
        let reg = tape.scale(sq, 0.5 * l2_scale);
        tape.add(ce, reg)
    }

    /// Class probabilities in the order Favor, Against, None (evaluation mode).
    pub fn predict_proba<S: AsRef<str>>(&self, tokens: &[S]) -> Result<[f64; 3]> {
        let mut tape = Tape::new(&self.store, false, 0);
        let fwd = self.forward(&mut tape, tokens)?;
        let p = tape.value(fwd.probs).data();
        Ok([p[0], p[1], p[2]])
    }

    /// Most probable class; ties go to the earlier of Favor, Against, None.
    pub fn predict<S: AsRef<str>>(&self, tokens: &[S]) -> Result<StanceLabel> {
        let p = self.predict_proba(tokens)?;
        let mut best = 0;
        for i in 1..3 {
            if p[i] > p[best] {
                best = i;
            }
        }
        Ok(StanceLabel::from_index(best).expect("three classes"))
    }

    /// Attention weights for a post under an explicit target vector (TAN, TAN-).
    pub fn attention_weights<S: AsRef<str>>(&self, tokens: &[S], z: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store, false, 0);
        let fwd = self.forward_with_target(&mut tape, tokens, z)?;
        let a = fwd
            .attention
            .ok_or_else(|| Error::Validation(format!("{} has no attention layer", self.architecture())))?;
        Ok(tape.value(a).data().to_vec())
    }

    /// Mean cross-entropy (no regularization) in evaluation mode.
    pub fn mean_loss(&self, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Validation("no examples".into()));
        }
        let mut total = 0.0;
        for ex in examples {
            let mut tape = Tape::new(&self.store, false, 0);
            let loss = self.example_loss(&mut tape, &ex.tokens, ex.label, 0.0)?;
            total += tape.value(loss).item();
        }
        Ok(total / examples.len() as f64)
    }

    /// Rescales each class's output weight vector whose squared norm exceeds `limit`.
    fn apply_norm_limit(&mut self, limit: f64) {
        let w = self.store.value_mut(self.params.out_w);
        let (rows, cols) = w.shape();
        for c in 0..cols {
            let sq: f64 = (0..rows).map(|r| w.get(r, c).powi(2)).sum();
            if sq > limit {
                let k = (limit / sq).sqrt();
                for r in 0..rows {
                    let v = w.get(r, c);
                    w.set(r, c, v * k);
                }
            }
        }
    }

    /// Squared norms of the per-class output weight vectors.
    pub fn output_sq_norms(&self) -> Vec<f64> {
        let w = self.store.value(self.params.out_w);
        (0..w.cols()).map(|c| (0..w.rows()).map(|r| w.get(r, c).powi(2)).sum()).collect()
    }

    pub fn to_json(&self, config_hash: &str) -> Result<String> {
        let file = CheckpointRef {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config_hash,
            model: self,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(json: &str) -> Result<(Self, String)> {
        let file: Checkpoint = serde_json::from_str(json)?;
        if file.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint format version {}",
                file.format_version
            )));
        }
        file.model.config.validate()?;
        if !file.model.store.all_finite() {
            return Err(Error::Validation("checkpoint contains non-finite parameters".into()));
        }
        Ok((file.model, file.config_hash))
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        std::fs::write(path, self.to_json(config_hash)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        Self::from_json(&crate::error::read_to_string(path)?)
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format_version: u32,
    config_hash: &'a str,
    model: &'a NeuralModel,
}

#[derive(Deserialize)]
struct Checkpoint {
    format_version: u32,
    config_hash: String,
    model: NeuralModel,
}

/// A tokenized training or evaluation post.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<String>,
    pub label: StanceLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's batches (dropout active).
    pub train_loss: f64,
    pub validation_f1: Option<f64>,
    pub learning_rate: f64,
}

fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Trains with Adam on mini-batches, calling `on_epoch(epoch, model)` after
/// every epoch (1-based). Deterministic for a fixed config seed.
pub fn train<F>(model: &mut NeuralModel, train: &[Example], validation: &[Example], mut on_epoch: F) -> Result<Vec<EpochRecord>>
where
    F: FnMut(usize, &NeuralModel) -> Result<()>,
{
    if train.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let cfg = model.config.clone();
    cfg.validate()?;
    let l2_scale = cfg.l2 / train.len() as f64;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 1]));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let model_ref = &*model;
            let results: Vec<Result<(f64, Gradients)>> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let mut tape = Tape::new(&model_ref.store, true, mix_seed(&[cfg.seed, step, k as u64]));
                    let loss = model_ref.example_loss(&mut tape, &train[i].tokens, train[i].label, l2_scale)?;
                    let value = tape.value(loss).item();
                    Ok((value, tape.backward(loss)?))
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            model.store.zero_grads();
            for r in results {
                let (loss, grads) = r?;
                epoch_loss += loss;
                model.store.accumulate(&grads, scale);
            }
            opt.step(&mut model.store);
            if let Some(limit) = cfg.norm_limit {
                model.apply_norm_limit(limit);
            }
            if !model.store.all_finite() {
                return Err(Error::Training(format!("parameters became non-finite in epoch {epoch}")));
            }
        }
        let validation_f1 = if validation.is_empty() {
            None
        } else {
            let preds = validation.iter().map(|ex| model.predict(&ex.tokens)).collect::<Result<Vec<_>>>()?;
            let gold: Vec<StanceLabel> = validation.iter().map(|ex| ex.label).collect();
            Some(macro_f1_favor_against(&preds, &gold)?.official)
        };
        records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            validation_f1,
            learning_rate: opt.lr,
        });
        on_epoch(epoch, model)?;
        if let Some(decay) = cfg.lr_decay {
            opt.lr *= decay;
        }
    }
    Ok(records)
}

/// Outcome of the attention target-invariance suite.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremReport {
    pub models: usize,
    pub posts_per_model: usize,
    /// Largest `|a_t(z1) - a_t(z2)|` seen.
    pub max_attention_deviation: f64,
    /// Largest class-probability gap between paired TAN and TAN- models.
    pub max_output_deviation: f64,
}

/// Maximum absolute difference between the attention vectors produced under two targets.
pub fn check_attention_target_invariance<S: AsRef<str>>(model: &NeuralModel, tokens: &[S], z1: &[f64], z2: &[f64]) -> Result<f64> {
    let a1 = model.attention_weights(tokens, z1)?;
    let a2 = model.attention_weights(tokens, z2)?;
    Ok(a1.iter().zip(&a2).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// A TAN- model sharing every parameter of `tan` except the target half of `W_a`.
pub fn paired_tan_minus(tan: &NeuralModel) -> Result<NeuralModel> {
    if tan.architecture() != Architecture::Tan {
        return Err(Error::Validation("pairing needs a TAN model".into()));
    }
    let mut minus = tan.clone();
    minus.config.architecture = Architecture::TanMinus;
    let wa = tan.store.value(tan.params.attn_w.expect("attention params"));
    let wx = Tensor::from_vec(tan.dim, 1, wa.data()[..tan.dim].to_vec())?;
    minus.store.set_value(minus.params.attn_w.expect("attention params"), wx);
    Ok(minus)
}

/// Random TAN models and posts; each post is scored under two random targets,
/// and each TAN is compared against its paired TAN-.
pub fn theorem_suite(models: usize, posts_per_model: usize, seed: u64) -> Result<TheoremReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TheoremReport {
        models,
        posts_per_model,
        max_attention_deviation: 0.0,
        max_output_deviation: 0.0,
    };
    let vocab: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    for m in 0..models {
        let dim = rng.gen_range(3..=12);
        let table = EmbeddingTable::random(dim, rng.gen());
        let cfg = NeuralConfig {
            architecture: Architecture::Tan,
            hidden: rng.gen_range(2..=10),
            head_hidden: if m % 2 == 0 { None } else { Some(rng.gen_range(2..=6)) },
            seed: rng.gen(),
            ..Default::default()
        };
        let z0: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tan = NeuralModel::with_target(cfg, &table, &vocab, z0)?;
        // larger attention weights make the scores vary more across words
        let aw = tan.params.attn_w.expect("attention params");
        let scaled = tan.store.value(aw).map(|v| v * 4.0);
        tan.store.set_value(aw, scaled);
        let ab = tan.params.attn_b.expect("attention params");
        tan.store.set_value(ab, Tensor::scalar(rng.gen_range(-1.0..1.0)));
        let minus = paired_tan_minus(&tan)?;
        for _ in 0..posts_per_model {
            let len = rng.gen_range(1..=15);
            let tokens: Vec<&str> = (0..len).map(|_| vocab[rng.gen_range(0..vocab.len())].as_str()).collect();
            let scale = rng.gen_range(0.1..10.0);
            let z1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-scale..scale)).collect();
            let z2: Vec<f64> = (0..dim).map(|_| rng.gen_range(-scale..scale)).collect();
            let dev = check_attention_target_invariance(&tan, &tokens, &z1, &z2)?;
            report.max_attention_deviation = report.max_attention_deviation.max(dev);

            let mut tape = Tape::new(&tan.store, false, 0);
            let p_tan = tan.forward_with_target(&mut tape, &tokens, &z1)?;
            let p_tan = tape.value(p_tan.probs).data().to_vec();
            let p_minus = minus.predict_proba(&tokens)?;
            let gap = p_tan.iter().zip(p_minus).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            report.max_output_deviation = report.max_output_deviation.max(gap);
        }
    }
    Ok(report)
}

/// Gradient check of the full training loss of every architecture, with and
/// without the hidden head layer; returns `(graph, max relative error)`.
pub fn model_grad_checks(opts: GradCheckOptions) -> Result<Vec<(String, f64)>> {
    let table = EmbeddingTable::random(5, 3);
    let vocab: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
    let tokens = ["w1", "w4", "w2", "w9", "w4"];
    let mut out = Vec::new();
    for arch in Architecture::ALL {
        for head in [None, Some(3)] {
            let cfg = NeuralConfig {
                architecture: arch,
                hidden: 4,
                head_hidden: head,
                filters: 3,
                filter_widths: vec![2, 3],
                trainable_embeddings: true,
                seed: 11,
                ..Default::default()
            };
            let mut model = NeuralModel::new(cfg, &table, &vocab, &["target", "words"])?;
            let probe = model.clone();
            let report = grad_check(model.store_mut(), opts, |tape: &mut Tape<'_>| {
                probe.example_loss(tape, &tokens, StanceLabel::Against, 0.3)
            })?;
            let name = match head {
                None => arch.name().to_string(),
                Some(h) => format!("{} +head{h}", arch.name()),
            };
            out.push((name, report.max_rel_error()));
        }
    }
    Ok(out)
}
