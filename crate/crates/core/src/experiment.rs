//! Orchestration from a [`RunConfig`]: loading, preprocessing, training,
//! prediction and the artifact layout under the output directory.
//!
//! Layout: `<out>/<TOPIC>/<model>/` holds `model.json` (SVM) or
//! `run-NN.json`, `trace-NN.tsv` and `matrix.tsv` (neural), plus
//! `predictions.tsv` and `report.txt`. Every text artifact starts with
//! `# config_hash=` and `# seed=` lines.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::config::{DatasetConfig, ModelKind, RunConfig};
use crate::corpus::{load_mpchi, load_semeval, target_phrase, Post, SplitManifest, TopicDataset};
use crate::error::{read_to_string, Error, Result};
use crate::evaluation::{macro_f1_favor_against, parse_predictions, write_predictions, MetricReport};
use crate::features::{FeatureResources, PreparedPost};
use crate::label::StanceLabel;
use crate::neural::{target_words, train, Architecture, EmbeddingTable, EpochRecord, Example, NeuralConfig, NeuralModel};
use crate::preprocess::{load_word_list, preprocess_post, Mode, NormalizationLexicon, PreprocessConfig, Token};
use crate::resources;
use crate::svm::{cascade_train, PipelineModel, SvmArtifact};
use crate::tune::{grid_search, GridPoint, GuardedDataset, TuneReport};
use crate::vote::{default_tie_break, run_vote_scheme, PredictionMatrix, VoteOutcome};

/// Stands in for posts whose preprocessing leaves no tokens.
pub const EMPTY_POST_TOKEN: &str = "<empty>";

/// Grid keys each model family understands.
const NEURAL_KEYS: [&str; 5] = ["l2", "dropout", "learning_rate", "hidden", "norm_limit"];
const SVM_KEYS: [&str; 1] = ["svm_lambda"];

pub struct Experiment {
    config: RunConfig,
    hash: String,
    normalization: Option<NormalizationLexicon>,
    stopwords: BTreeSet<String>,
}

/// Everything a neural vote-scheme training produces.
#[derive(Clone, Debug)]
pub struct NeuralOutcome {
    pub vote: VoteOutcome,
    /// Final-epoch model of every run, in run order.
    pub models: Vec<NeuralModel>,
    pub traces: Vec<Vec<EpochRecord>>,
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let normalization = config
            .preprocess
            .normalization_lexicon
            .as_deref()
            .map(NormalizationLexicon::load)
            .transpose()?;
        let stopwords = match &config.preprocess.stopword_list {
            Some(p) => load_word_list(p)?,
            None => resources::stopwords().clone(),
        };
        let hash = config.hash();
        Ok(Experiment {
            config,
            hash,
            normalization,
            stopwords,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    /// Header lines stamped into every artifact, followed by `extra`.
    pub fn header(&self, extra: &[(&'static str, String)]) -> Vec<(&'static str, String)> {
        let mut h = vec![("config_hash", self.hash.clone()), ("seed", self.config.seed.to_string())];
        h.extend(extra.iter().cloned());
        h
    }

    pub fn header_text(&self, extra: &[(&'static str, String)]) -> String {
        self.header(extra).iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
    }

    /// The configured datasets, restricted to the configured topics (in that order).
    pub fn load_datasets(&self) -> Result<Vec<TopicDataset>> {
        let all = match &self.config.dataset {
            DatasetConfig::Semeval { train, test } => load_semeval(train, test)?,
            DatasetConfig::Mpchi {
                files,
                format,
                split,
                manifests,
            } => {
                if let Some(t) = manifests.keys().find(|t| !files.contains_key(*t)) {
                    return Err(Error::Config(format!("manifest given for topic {t}, which has no file")));
                }
                files
                    .iter()
                    .map(|(topic, path)| {
                        let manifest = manifests.get(topic).map(|p| SplitManifest::load(p)).transpose()?;
                        load_mpchi(path, format, topic, split, manifest.as_ref())
                    })
                    .collect::<Result<_>>()?
            }
        };
        self.select_topics(all, &self.config.topics)
    }

    /// Keeps the requested topics, in request order; empty keeps everything.
    pub fn select_topics(&self, all: Vec<TopicDataset>, topics: &[String]) -> Result<Vec<TopicDataset>> {
        if topics.is_empty() {
            return Ok(all);
        }
        let mut by_topic: BTreeMap<String, TopicDataset> = all.into_iter().map(|d| (d.topic.clone(), d)).collect();
        topics
            .iter()
            .map(|t| {
                let available: Vec<String> = by_topic.keys().cloned().collect();
                by_topic.remove(t).ok_or_else(|| {
                    Error::Validation(format!("topic `{t}` not in dataset (available: {})", available.join(", ")))
                })
            })
            .collect()
    }

    fn lexicon(&self) -> &NormalizationLexicon {
        self.normalization.as_ref().unwrap_or_else(|| resources::normalization_lexicon())
    }

    pub fn preprocess_config(&self, mode: Mode) -> PreprocessConfig {
        self.config
            .preprocess
            .build(mode, self.config.dataset.is_microblog(), &self.stopwords)
    }

    /// Preprocessed posts; an empty token sequence gets [`EMPTY_POST_TOKEN`].
    pub fn prepare(&self, posts: &[Post], mode: Mode) -> Vec<PreparedPost> {
        let cfg = self.preprocess_config(mode);
        let freq = resources::frequency_table();
        posts
            .iter()
            .map(|p| {
                let mut tokens = preprocess_post(p, &cfg, self.lexicon(), freq);
                if tokens.is_empty() {
                    tokens.tokens.push(Token::plain(EMPTY_POST_TOKEN));
                }
                PreparedPost {
                    raw: p.text.clone(),
                    tokens,
                }
            })
            .collect()
    }

    pub fn examples(&self, posts: &[Post]) -> Vec<Example> {
        self.prepare(posts, Mode::Embedding)
            .into_iter()
            .zip(posts)
            .map(|(p, post)| Example {
                tokens: p.tokens.texts().into_iter().map(str::to_string).collect(),
                label: post.gold,
            })
            .collect()
    }

    pub fn train_svm(&self, kind: ModelKind, topic: &str, posts: &[Post]) -> Result<SvmArtifact> {
        let prepared = self.prepare(posts, Mode::Classical);
        let labels: Vec<StanceLabel> = posts.iter().map(|p| p.gold).collect();
        self.fit_svm(kind, topic, &prepared, &labels, &GridPoint::new())
    }

    fn fit_svm(
        &self,
        kind: ModelKind,
        topic: &str,
        prepared: &[PreparedPost],
        labels: &[StanceLabel],
        point: &GridPoint,
    ) -> Result<SvmArtifact> {
        let target = target_phrase(topic);
        let res = FeatureResources::default();
        let lambda = point.get("svm_lambda").copied();
        match kind {
            ModelKind::Sen => {
                let mut svm = self.config.sen_svm(topic);
                if let Some(l) = lambda {
                    svm.lambda = l;
                }
                let m = PipelineModel::train(&self.config.sen.features, prepared, labels, target, &svm, res)?;
                Ok(SvmArtifact::OneVsRest(m))
            }
            ModelKind::TwoStep => {
                let mut c = self.config.cascade(topic);
                if let Some(l) = lambda {
                    c.stage1.lambda = l;
                    c.stage2.lambda = l;
                }
                Ok(SvmArtifact::Cascade(cascade_train(prepared, labels, target, &c, res)?))
            }
            other => Err(Error::Validation(format!("{other} is not an SVM model"))),
        }
    }

    pub fn predict_svm(&self, artifact: &SvmArtifact, posts: &[Post]) -> Result<Vec<StanceLabel>> {
        let res = FeatureResources::default();
        self.prepare(posts, Mode::Classical)
            .iter()
            .map(|p| artifact.predict(p, res))
            .collect()
    }

    /// Embedding table holding the vectors for every word of `posts` and the
    /// topics' targets; without an embedding file, an all-OOV table.
    pub fn embedding_table(&self, posts: &[&[Post]], topics: &[&str]) -> Result<EmbeddingTable> {
        let n = &self.config.neural;
        let Some(path) = &n.embeddings else {
            return Ok(EmbeddingTable::random(n.embedding_dim, n.oov_seed));
        };
        let mut keep: HashSet<String> = HashSet::new();
        for set in posts {
            for ex in self.examples(set) {
                keep.extend(ex.tokens);
            }
        }
        for t in topics {
            keep.extend(target_words(target_phrase(t)));
        }
        EmbeddingTable::load_filtered(path, n.oov_seed, Some(&keep))
    }

    /// One training run: fits on `train_ex`, and at each epoch in `checkpoints`
    /// predicts `predict_ex`. The vocabulary covers both sets so words of the
    /// predicted posts use their pretrained vectors; rows of words that never
    /// occur in training receive no gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn neural_run(
        &self,
        config: NeuralConfig,
        table: &EmbeddingTable,
        topic: &str,
        train_ex: &[Example],
        validation: &[Example],
        predict_ex: &[Example],
        checkpoints: (usize, usize),
    ) -> Result<(NeuralModel, Vec<EpochRecord>, Vec<(usize, Vec<StanceLabel>)>)> {
        let words: Vec<&str> = train_ex
            .iter()
            .chain(predict_ex)
            .flat_map(|e| e.tokens.iter().map(String::as_str))
            .collect();
        let targets = target_words(target_phrase(topic));
        let mut model = NeuralModel::new(config, table, &words, &targets)?;
        let mut predictions = Vec::new();
        let trace = train(&mut model, train_ex, validation, |epoch, m| {
            if (checkpoints.0..=checkpoints.1).contains(&epoch) {
                let labels = predict_ex.iter().map(|e| m.predict(&e.tokens)).collect::<Result<Vec<_>>>()?;
                predictions.push((epoch, labels));
            }
            Ok(())
        })?;
        Ok((model, trace, predictions))
    }

    /// Trains the vote-scheme ensemble for one architecture and topic.
    pub fn train_neural(&self, arch: Architecture, ds: &TopicDataset, table: &EmbeddingTable) -> Result<NeuralOutcome> {
        let (base, range) = self.config.neural_schedule(arch, &ds.topic);
        let train_ex = self.examples(&ds.train);
        let test_ex = self.examples(&ds.test);
        let train_labels: Vec<StanceLabel> = ds.train.iter().map(|p| p.gold).collect();
        let ids: Vec<String> = ds.test.iter().map(|p| p.id.clone()).collect();
        let slots: Mutex<BTreeMap<usize, (NeuralModel, Vec<EpochRecord>)>> = Mutex::new(BTreeMap::new());
        let vote = run_vote_scheme(&train_labels, &ids, &self.config.vote, range, |spec| {
            let cfg = NeuralConfig {
                seed: spec.seed,
                epochs: spec.checkpoint_epochs.1,
                ..base.clone()
            };
            let tr: Vec<Example> = spec.train.iter().map(|&i| train_ex[i].clone()).collect();
            let va: Vec<Example> = spec.validation.iter().map(|&i| train_ex[i].clone()).collect();
            let (model, trace, preds) = self.neural_run(cfg, table, &ds.topic, &tr, &va, &test_ex, spec.checkpoint_epochs)?;
            slots.lock().expect("no poisoned runs").insert(spec.run, (model, trace));
            Ok(preds)
        })?;
        let (models, traces) = slots.into_inner().expect("no poisoned runs").into_values().unzip();
        Ok(NeuralOutcome { vote, models, traces })
    }

    /// Cross-validated grid search on the training split only.
    pub fn tune(&self, kind: ModelKind, data: &GuardedDataset<'_>, table: Option<&EmbeddingTable>) -> Result<TuneReport> {
        let posts = data.train();
        let topic = data.topic();
        let labels: Vec<StanceLabel> = posts.iter().map(|p| p.gold).collect();
        let keys: &[&str] = if kind.is_neural() { &NEURAL_KEYS } else { &SVM_KEYS };
        let grid: BTreeMap<String, Vec<f64>> = self
            .config
            .tune
            .grid
            .iter()
            .filter(|(k, _)| keys.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let k = self.config.tune.folds;
        let model = kind.display_name();
        match kind.architecture() {
            None => {
                let prepared = self.prepare(posts, Mode::Classical);
                let res = FeatureResources::default();
                grid_search(topic, model, &labels, &grid, k, self.config.seed, |point, tr, va| {
                    let p: Vec<PreparedPost> = tr.iter().map(|&i| prepared[i].clone()).collect();
                    let l: Vec<StanceLabel> = tr.iter().map(|&i| labels[i]).collect();
                    let artifact = self.fit_svm(kind, topic, &p, &l, point)?;
                    let preds = va.iter().map(|&i| artifact.predict(&prepared[i], res)).collect::<Result<Vec<_>>>()?;
                    let gold: Vec<StanceLabel> = va.iter().map(|&i| labels[i]).collect();
                    Ok(macro_f1_favor_against(&preds, &gold)?.official)
                })
            }
            Some(arch) => {
                let owned;
                let table = match table {
                    Some(t) => t,
                    None => {
                        owned = self.embedding_table(&[posts], &[topic])?;
                        &owned
                    }
                };
                let examples = self.examples(posts);
                let (base, _) = self.config.neural_schedule(arch, topic);
                grid_search(topic, model, &labels, &grid, k, self.config.seed, |point, tr, va| {
                    let mut cfg = apply_point(base.clone(), point);
                    if let Some(e) = self.config.tune.epochs {
                        cfg.epochs = e;
                    }
                    let last = cfg.epochs;
                    let t: Vec<Example> = tr.iter().map(|&i| examples[i].clone()).collect();
                    let v: Vec<Example> = va.iter().map(|&i| examples[i].clone()).collect();
                    let (_, _, preds) = self.neural_run(cfg, table, topic, &t, &[], &v, (last, last))?;
                    let gold: Vec<StanceLabel> = v.iter().map(|e| e.label).collect();
                    Ok(macro_f1_favor_against(&preds[0].1, &gold)?.official)
                })
            }
        }
    }

    pub fn topic_dir(&self, topic: &str) -> PathBuf {
        self.config.output_dir.join(topic)
    }

    /// Directory for a model's artifacts; `name` is a model key or an external model name.
    pub fn model_dir(&self, topic: &str, name: &str) -> PathBuf {
        self.topic_dir(topic).join(sanitize(name))
    }

    pub fn predictions_path(&self, topic: &str, name: &str) -> PathBuf {
        self.model_dir(topic, name).join("predictions.tsv")
    }

    /// Trains `kind` on one topic and writes its artifacts; returns the files written.
    pub fn run_train(&self, kind: ModelKind, ds: &TopicDataset, table: Option<&EmbeddingTable>) -> Result<Vec<PathBuf>> {
        let dir = self.model_dir(&ds.topic, kind.key());
        let mut written = Vec::new();
        match kind.architecture() {
            None => {
                let artifact = self.train_svm(kind, &ds.topic, &ds.train)?;
                let path = dir.join("model.json");
                write_file(&path, &artifact.to_json(&self.hash)?)?;
                written.push(path);
            }
            Some(arch) => {
                let owned;
                let table = match table {
                    Some(t) => t,
                    None => {
                        owned = self.embedding_table(&[&ds.train, &ds.test], &[&ds.topic])?;
                        &owned
                    }
                };
                let out = self.train_neural(arch, ds, table)?;
                for (run, (model, trace)) in out.models.iter().zip(&out.traces).enumerate() {
                    let path = dir.join(format!("run-{run:02}.json"));
                    write_file(&path, &model.to_json(&self.hash)?)?;
                    written.push(path);
                    let path = dir.join(format!("trace-{run:02}.tsv"));
                    write_file(&path, &self.trace_text(kind, &ds.topic, run, trace))?;
                    written.push(path);
                }
                let path = dir.join("matrix.tsv");
                let header = self.header_text(&[("model", kind.key().into()), ("topic", ds.topic.clone())]);
                write_file(&path, &format!("{header}{}", out.vote.matrix.to_tsv()))?;
                written.push(path);
            }
        }
        Ok(written)
    }

    fn trace_text(&self, kind: ModelKind, topic: &str, run: usize, trace: &[EpochRecord]) -> String {
        let mut out = self.header_text(&[("model", kind.key().into()), ("topic", topic.into()), ("run", run.to_string())]);
        out.push_str("epoch\ttrain_loss\tvalidation_f1\tlearning_rate\n");
        for r in trace {
            let f1 = r.validation_f1.map_or("-".to_string(), |v| format!("{v:.6}"));
            writeln!(out, "{}\t{:.6}\t{f1}\t{:e}", r.epoch, r.train_loss, r.learning_rate).unwrap();
        }
        out
    }

    /// Test-set labels from the trained artifacts of `kind` (SVM model file or
    /// the neural prediction matrix, re-voted without retraining).
    pub fn predict_from_artifacts(&self, kind: ModelKind, ds: &TopicDataset) -> Result<Vec<StanceLabel>> {
        let dir = self.model_dir(&ds.topic, kind.key());
        if kind.is_neural() {
            let path = dir.join("matrix.tsv");
            let matrix = PredictionMatrix::parse_tsv(&read_to_string(&path)?, &path.display().to_string())?;
            self.check_stamp(&read_to_string(&path)?, &path)?;
            let ids: Vec<String> = ds.test.iter().map(|p| p.id.clone()).collect();
            if matrix.post_ids != ids {
                return Err(Error::Validation(format!(
                    "{}: post ids differ from the {} test set",
                    path.display(),
                    ds.topic
                )));
            }
            let train_labels: Vec<StanceLabel> = ds.train.iter().map(|p| p.gold).collect();
            let tie = self.config.vote.tie_break.clone().unwrap_or_else(|| default_tie_break(&train_labels));
            matrix.vote(&tie)
        } else {
            let path = dir.join("model.json");
            let (artifact, hash) = SvmArtifact::load(&path)?;
            if hash != self.hash {
                return Err(Error::Validation(format!(
                    "{} was trained under config {hash}, current config is {}",
                    path.display(),
                    self.hash
                )));
            }
            self.predict_svm(&artifact, &ds.test)
        }
    }

    fn check_stamp(&self, content: &str, path: &Path) -> Result<()> {
        let stamp = format!("# config_hash={}", self.hash);
        if content.lines().any(|l| l == stamp) {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "{} was not produced under the current config {}",
                path.display(),
                self.hash
            )))
        }
    }

    /// Writes a predictions file for `name` on the topic's test posts.
    pub fn write_predictions(&self, ds: &TopicDataset, name: &str, labels: &[StanceLabel]) -> Result<PathBuf> {
        let path = self.predictions_path(&ds.topic, name);
        let ids: Vec<String> = ds.test.iter().map(|p| p.id.clone()).collect();
        let mut buf = Vec::new();
        write_predictions(&mut buf, &self.header(&[("model", name.into()), ("topic", ds.topic.clone())]), &ids, labels)?;
        write_file(&path, &String::from_utf8(buf).expect("utf-8 predictions"))?;
        Ok(path)
    }

    /// Reads the predictions of `name`, aligned with the topic's test posts.
    pub fn read_predictions(&self, ds: &TopicDataset, name: &str) -> Result<Vec<StanceLabel>> {
        let path = self.predictions_path(&ds.topic, name);
        let rows = parse_predictions(&read_to_string(&path)?, &path.display().to_string())?;
        align(&rows, ds, &path.display().to_string())
    }

    /// Scores stored predictions and writes `report.txt` next to them.
    pub fn evaluate(&self, ds: &TopicDataset, name: &str) -> Result<(MetricReport, Vec<StanceLabel>)> {
        let preds = self.read_predictions(ds, name)?;
        let gold: Vec<StanceLabel> = ds.test.iter().map(|p| p.gold).collect();
        let report = macro_f1_favor_against(&preds, &gold)?;
        let text = format!(
            "{}{}",
            self.header_text(&[("model", name.into()), ("topic", ds.topic.clone())]),
            report.to_text()
        );
        write_file(&self.model_dir(&ds.topic, name).join("report.txt"), &text)?;
        Ok((report, preds))
    }
}

/// Neural config with grid values applied.
pub fn apply_point(mut cfg: NeuralConfig, point: &GridPoint) -> NeuralConfig {
    for (k, &v) in point {
        match k.as_str() {
            "l2" => cfg.l2 = v,
            "dropout" => cfg.dropout = v,
            "learning_rate" => cfg.learning_rate = v,
            "hidden" => cfg.hidden = v.round().max(1.0) as usize,
            "norm_limit" => cfg.norm_limit = Some(v),
            _ => {}
        }
    }
    cfg
}

/// Aligns `id, label` rows with the test posts, requiring exact coverage.
pub fn align(rows: &[(String, StanceLabel)], ds: &TopicDataset, origin: &str) -> Result<Vec<StanceLabel>> {
    let map: BTreeMap<&str, StanceLabel> = rows.iter().map(|(i, l)| (i.as_str(), *l)).collect();
    if map.len() != rows.len() {
        return Err(Error::Validation(format!("{origin}: duplicate post ids")));
    }
    if rows.len() != ds.test.len() {
        return Err(Error::Validation(format!(
            "{origin}: {} predictions for {} test posts",
            rows.len(),
            ds.test.len()
        )));
    }
    ds.test
        .iter()
        .map(|p| {
            map.get(p.id.as_str())
                .copied()
                .ok_or_else(|| Error::Validation(format!("{origin}: no prediction for post `{}`", p.id)))
        })
        .collect()
}

/// File-system friendly model name: lower-case, `/` and spaces replaced.
pub fn sanitize(name: &str) -> String {
    name.trim()
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' || c == '+' { c } else { '_' })
        .collect()
}

pub fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}
