//! Run configuration: one TOML file with global sections and per-topic
//! override tables. Unknown keys are rejected with the key's name.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{MpchiFormat, SplitSpec};
use crate::error::{read_to_string, Error, Result};
use crate::features::{sen_features, FeatureSpec};
use crate::neural::{topic_schedule, Architecture, NeuralConfig};
use crate::preprocess::{MarkerHandling, Mode, PreprocessConfig};
use crate::svm::{CascadeConfig, SvmTrainConfig};
use crate::vote::VoteConfig;

/// Every model the toolkit can train, plus externally produced predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "sen")]
    Sen,
    #[serde(rename = "two-step")]
    TwoStep,
    #[serde(rename = "lstm")]
    Lstm,
    #[serde(rename = "tan")]
    Tan,
    #[serde(rename = "tan-")]
    TanMinus,
    #[serde(rename = "cnn")]
    Cnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Tan,
        ModelKind::TanMinus,
        ModelKind::Lstm,
        ModelKind::Sen,
        ModelKind::Cnn,
        ModelKind::TwoStep,
    ];

    /// Command-line and file-name spelling.
    pub fn key(self) -> &'static str {
        match self {
            ModelKind::Sen => "sen",
            ModelKind::TwoStep => "two-step",
            ModelKind::Lstm => "lstm",
            ModelKind::Tan => "tan",
            ModelKind::TanMinus => "tan-",
            ModelKind::Cnn => "cnn",
        }
    }

    /// Row label used in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Sen => "SEN",
            ModelKind::TwoStep => "Two-step SVM",
            ModelKind::Lstm => "LSTM",
            ModelKind::Tan => "TAN",
            ModelKind::TanMinus => "TAN-",
            ModelKind::Cnn => "CNN",
        }
    }

    pub fn architecture(self) -> Option<Architecture> {
        match self {
            ModelKind::Lstm => Some(Architecture::Lstm),
            ModelKind::Tan => Some(Architecture::Tan),
            ModelKind::TanMinus => Some(Architecture::TanMinus),
            ModelKind::Cnn => Some(Architecture::Cnn),
            ModelKind::Sen | ModelKind::TwoStep => None,
        }
    }

    pub fn is_neural(self) -> bool {
        self.architecture().is_some()
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "sen" | "sen-svm" => Ok(ModelKind::Sen),
            "two-step" | "two_step" | "twostep" | "two-step-svm" => Ok(ModelKind::TwoStep),
            _ => lower
                .parse::<Architecture>()
                .map(ModelKind::from)
                .map_err(|_| Error::Validation(format!("unknown model `{s}` (expected sen, two-step, lstm, tan, tan-, cnn)"))),
        }
    }
}

impl From<Architecture> for ModelKind {
    fn from(a: Architecture) -> Self {
        match a {
            Architecture::Lstm => ModelKind::Lstm,
            Architecture::Tan => ModelKind::Tan,
            Architecture::TanMinus => ModelKind::TanMinus,
            Architecture::Cnn => ModelKind::Cnn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    /// The official tab-separated train and test files.
    Semeval { train: PathBuf, test: PathBuf },
    /// One delimited file per topic, split into train and test here.
    Mpchi {
        files: BTreeMap<String, PathBuf>,
        #[serde(default)]
        format: MpchiFormat,
        #[serde(default)]
        split: SplitSpec,
        /// Optional per-topic `post_id<TAB>train|test` files fixing the split.
        #[serde(default)]
        manifests: BTreeMap<String, PathBuf>,
    },
}

impl DatasetConfig {
    pub fn is_microblog(&self) -> bool {
        matches!(self, DatasetConfig::Semeval { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    pub normalization: bool,
    pub hashtag_split: bool,
    /// Remove stopwords in classical mode.
    pub stopwords: bool,
    pub semst: MarkerHandling,
    /// Replaces the bundled normalization lexicon.
    pub normalization_lexicon: Option<PathBuf>,
    /// Replaces the bundled stopword list.
    pub stopword_list: Option<PathBuf>,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            normalization: true,
            hashtag_split: true,
            stopwords: true,
            semst: MarkerHandling::Drop,
            normalization_lexicon: None,
            stopword_list: None,
        }
    }
}

impl PreprocessSection {
    /// Preprocessing for `mode`; `stopwords` is the list already loaded.
    pub fn build(&self, mode: Mode, microblog: bool, stopwords: &std::collections::BTreeSet<String>) -> PreprocessConfig {
        let mut cfg = PreprocessConfig::new(mode, microblog);
        cfg.apply_normalization = self.normalization;
        cfg.apply_hashtag_split = self.hashtag_split;
        cfg.semst = self.semst;
        if self.stopwords && mode == Mode::Classical {
            cfg.stopwords = stopwords.clone();
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SenSection {
    pub features: Vec<FeatureSpec>,
    pub svm: SvmTrainConfig,
}

impl Default for SenSection {
    fn default() -> Self {
        SenSection {
            features: sen_features(),
            svm: SvmTrainConfig::default(),
        }
    }
}

/// Neural settings shared by all topics. Per-topic values (L2, epoch
/// range, squared-norm limit) live in the topic tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeuralSection {
    /// Pretrained `word v1 .. vd` file; when absent every word gets its OOV vector.
    pub embeddings: Option<PathBuf>,
    /// Vector size used when no embedding file is given.
    pub embedding_dim: usize,
    pub oov_seed: u64,
    pub hidden: usize,
    pub head_hidden: Option<usize>,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub filter_widths: Vec<usize>,
    pub filters: usize,
    /// Per-epoch learning-rate decay for the CNN.
    pub cnn_lr_decay: f64,
    pub trainable_embeddings: bool,
}

impl Default for NeuralSection {
    fn default() -> Self {
        let d = NeuralConfig::default();
        NeuralSection {
            embeddings: None,
            embedding_dim: 300,
            oov_seed: 13,
            hidden: d.hidden,
            head_hidden: d.head_hidden,
            dropout: d.dropout,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            filter_widths: d.filter_widths,
            filters: d.filters,
            cnn_lr_decay: 0.95,
            trainable_embeddings: d.trainable_embeddings,
        }
    }
}

/// Per-topic overrides; absent values fall back to the built-in schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicOverride {
    pub l2: Option<f64>,
    /// Inclusive checkpoint epoch range; training runs to its upper end.
    pub epochs: Option<(usize, usize)>,
    pub norm_limit: Option<f64>,
    /// Per-architecture overrides keyed by model name (`tan`, `cnn`, ...).
    #[serde(default)]
    pub models: BTreeMap<ModelKind, ModelOverride>,
    pub svm_lambda: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverride {
    pub l2: Option<f64>,
    pub epochs: Option<(usize, usize)>,
    pub norm_limit: Option<f64>,
}

/// Grid searched by `tune`; every key is a neural or SVM hyperparameter name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneSection {
    pub folds: usize,
    pub grid: BTreeMap<String, Vec<f64>>,
    /// Epoch budget per fold for neural models; `None` keeps the schedule's.
    pub epochs: Option<usize>,
}

impl Default for TuneSection {
    fn default() -> Self {
        TuneSection {
            folds: 5,
            grid: BTreeMap::new(),
            epochs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    /// Topics to run; empty means every topic in the dataset.
    #[serde(default)]
    pub topics: Vec<String>,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub preprocess: PreprocessSection,
    #[serde(default)]
    pub sen: SenSection,
    #[serde(default)]
    pub two_step: CascadeConfig,
    #[serde(default)]
    pub neural: NeuralSection,
    #[serde(default)]
    pub vote: VoteConfig,
    #[serde(default)]
    pub tune: TuneSection,
    #[serde(default)]
    pub topic: BTreeMap<String, TopicOverride>,
}

fn default_models() -> Vec<ModelKind> {
    ModelKind::ALL.to_vec()
}
fn default_seed() -> u64 {
    13
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn parse(content: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(content).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&read_to_string(path)?, &path.display().to_string())?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    /// A config for the given SemEval files with every other value defaulted.
    pub fn semeval(train: impl Into<PathBuf>, test: impl Into<PathBuf>) -> Self {
        RunConfig {
            dataset: DatasetConfig::Semeval {
                train: train.into(),
                test: test.into(),
            },
            topics: Vec::new(),
            models: default_models(),
            seed: default_seed(),
            output_dir: default_output(),
            preprocess: PreprocessSection::default(),
            sen: SenSection::default(),
            two_step: CascadeConfig::default(),
            neural: NeuralSection::default(),
            vote: VoteConfig::default(),
            tune: TuneSection::default(),
            topic: BTreeMap::new(),
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetConfig::Semeval { train, test } => {
                fix(train);
                fix(test);
            }
            DatasetConfig::Mpchi { files, manifests, .. } => {
                files.values_mut().for_each(fix);
                manifests.values_mut().for_each(fix);
            }
        }
        for p in [
            &mut self.preprocess.normalization_lexicon,
            &mut self.preprocess.stopword_list,
            &mut self.neural.embeddings,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        self.vote.validate()?;
        if self.models.is_empty() {
            return Err(Error::Config("models list is empty".into()));
        }
        if self.tune.folds < 2 {
            return Err(Error::Config(format!("tune.folds must be at least 2, got {}", self.tune.folds)));
        }
        if self.neural.embedding_dim == 0 {
            return Err(Error::Config("neural.embedding_dim must be positive".into()));
        }
        for key in self.tune.grid.keys() {
            if !TUNABLE.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "tune.grid key `{key}` is not tunable (expected one of {})",
                    TUNABLE.join(", ")
                )));
            }
        }
        for (topic, o) in &self.topic {
            let ranges = std::iter::once(o.epochs).chain(o.models.values().map(|m| m.epochs));
            for (lo, hi) in ranges.flatten() {
                if lo == 0 || lo > hi {
                    return Err(Error::Config(format!("topic.{topic}.epochs range {lo}-{hi} is empty")));
                }
            }
        }
        for &arch in &Architecture::ALL {
            if self.models.contains(&ModelKind::from(arch)) {
                self.neural_config(arch, "AT").validate()?;
            }
        }
        Ok(())
    }

    /// Hex SHA-256 over the canonical JSON form; stamped into every output.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.vote.master_seed = seed;
        self
    }

    /// Resolved neural configuration and checkpoint range for a topic.
    pub fn neural_schedule(&self, arch: Architecture, topic: &str) -> (NeuralConfig, (usize, usize)) {
        let n = &self.neural;
        let base = topic_schedule(arch, topic);
        let o = self.topic.get(topic);
        let m = o.and_then(|o| o.models.get(&ModelKind::from(arch)));
        let l2 = m.and_then(|m| m.l2).or(o.and_then(|o| o.l2)).unwrap_or(base.l2);
        let epochs = m.and_then(|m| m.epochs).or(o.and_then(|o| o.epochs)).unwrap_or(base.epochs);
        let norm_limit = m
            .and_then(|m| m.norm_limit)
            .or(o.and_then(|o| o.norm_limit))
            .or(base.norm_limit);
        let cfg = NeuralConfig {
            architecture: arch,
            hidden: n.hidden,
            head_hidden: n.head_hidden,
            dropout: n.dropout,
            learning_rate: n.learning_rate,
            batch_size: n.batch_size,
            l2,
            epochs: epochs.1,
            filter_widths: n.filter_widths.clone(),
            filters: n.filters,
            norm_limit: if arch == Architecture::Cnn { norm_limit } else { None },
            lr_decay: (arch == Architecture::Cnn).then_some(n.cnn_lr_decay),
            trainable_embeddings: n.trainable_embeddings,
            seed: self.seed,
        };
        (cfg, epochs)
    }

    pub fn neural_config(&self, arch: Architecture, topic: &str) -> NeuralConfig {
        self.neural_schedule(arch, topic).0
    }

    pub fn sen_svm(&self, topic: &str) -> SvmTrainConfig {
        let mut svm = self.sen.svm.clone();
        if let Some(l) = self.topic.get(topic).and_then(|o| o.svm_lambda) {
            svm.lambda = l;
        }
        svm
    }

    pub fn cascade(&self, topic: &str) -> CascadeConfig {
        let mut c = self.two_step.clone();
        if let Some(l) = self.topic.get(topic).and_then(|o| o.svm_lambda) {
            c.stage1.lambda = l;
            c.stage2.lambda = l;
        }
        c
    }
}

/// Hyperparameter names accepted in `tune.grid`.
pub const TUNABLE: [&str; 6] = ["l2", "dropout", "learning_rate", "hidden", "norm_limit", "svm_lambda"];

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[dataset]
kind = "semeval"
train = "train.txt"
test = "test.txt"
"#;

    #[test]
    fn minimal_config_gets_table_defaults() {
        let cfg = RunConfig::parse(MINIMAL, "t").unwrap();
        let (tan, range) = cfg.neural_schedule(Architecture::Tan, "AT");
        assert_eq!(tan.l2, 1.25);
        assert_eq!(range.1, tan.epochs);
        let cnn = cfg.neural_config(Architecture::Cnn, "AT");
        assert_eq!(cnn.lr_decay, Some(0.95));
        assert!(cnn.norm_limit.is_some());
        assert_eq!(cfg.vote.num_runs, 10);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse(&format!("{MINIMAL}\n[neural]\nhiden = 3\n"), "t").unwrap_err();
        assert!(err.to_string().contains("hiden"), "{err}");
        let err = RunConfig::parse(&format!("{MINIMAL}\nsede = 3\n"), "t").unwrap_err();
        assert!(err.to_string().contains("sede"), "{err}");
        let err = RunConfig::parse(&format!("{MINIMAL}\n[topic.AT]\nl3 = 1\n"), "t").unwrap_err();
        assert!(err.to_string().contains("l3"), "{err}");
    }

    #[test]
    fn topic_overrides_layer() {
        let text = format!(
            "{MINIMAL}\n[topic.AT]\nl2 = 0.5\nepochs = [3, 4]\n[topic.AT.models.cnn]\nl2 = 0.1\n"
        );
        let cfg = RunConfig::parse(&text, "t").unwrap();
        let (tan, r) = cfg.neural_schedule(Architecture::Tan, "AT");
        assert_eq!((tan.l2, r), (0.5, (3, 4)));
        assert_eq!(cfg.neural_config(Architecture::Cnn, "AT").l2, 0.1);
        assert_eq!(cfg.neural_config(Architecture::Tan, "CC").l2, 1.0);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::parse(MINIMAL, "t").unwrap();
        let b = a.clone().with_seed(99);
        assert_eq!(a.hash(), RunConfig::parse(MINIMAL, "t").unwrap().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn model_names_parse() {
        for m in ModelKind::ALL {
            assert_eq!(m.key().parse::<ModelKind>().unwrap(), m);
        }
        assert!("bert".parse::<ModelKind>().is_err());
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::parse(&format!("{MINIMAL}\n[topic.AT]\nepochs = [5, 2]\n"), "t").is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}\n[tune.grid]\nwidth = [1.0]\n"), "t").is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}\n[neural]\ndropout = 1.5\n"), "t").is_err());
    }
}
