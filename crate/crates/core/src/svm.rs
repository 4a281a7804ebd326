//! Linear SVMs trained with the Pegasos stochastic subgradient method,
//! one-vs-rest multiclass wrapping, and the two-step relevance/polarity
//! cascade.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeaturePipeline, FeatureResources, FeatureSpec, FeatureVector, PreparedPost};
use crate::label::StanceLabel;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvmTrainConfig {
    /// Regularization strength; must be positive.
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    /// RBF kernel width. Kept for configuration parity; the linear solver ignores it.
    pub gamma: f64,
    /// Weight each sample by inverse class frequency.
    pub class_weighting: bool,
    /// L2-normalize every feature vector before training and prediction.
    pub normalize: bool,
}

impl Default for SvmTrainConfig {
    fn default() -> Self {
        SvmTrainConfig {
            lambda: 1e-3,
            epochs: 50,
            seed: 13,
            gamma: 0.001,
            class_weighting: false,
            normalize: true,
        }
    }
}

impl SvmTrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// `w·x + b`, positive side is the class the model was trained to detect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryLinear {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl BinaryLinear {
    pub fn zeros(dim: usize) -> Self {
        BinaryLinear {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn margin(&self, x: &FeatureVector) -> Result<f64> {
        check_dim(self.dim(), x)?;
        Ok(x.dot(&self.weights) + self.bias)
    }
}

fn check_dim(dim: usize, x: &FeatureVector) -> Result<()> {
    if x.dim() != dim {
        return Err(Error::Shape(format!("model dimension {dim}, feature dimension {}", x.dim())));
    }
    Ok(())
}

/// Result of a Pegasos run: the selected weights and the objective after every epoch.
#[derive(Clone, Debug)]
pub struct PegasosFit {
    pub model: BinaryLinear,
    pub initial_objective: f64,
    pub epoch_objectives: Vec<f64>,
    pub final_objective: f64,
}

/// `lambda/2 (|w|^2 + b^2) + 1/n sum_i c_i max(0, 1 - y_i (w·x_i + b))`.
///
/// The bias is treated as the weight of a constant feature, so it is
/// regularized along with `w`.
pub fn svm_objective(model: &BinaryLinear, xs: &[FeatureVector], ys: &[bool], costs: &[f64], lambda: f64) -> f64 {
    let reg = 0.5 * lambda * (model.weights.iter().map(|w| w * w).sum::<f64>() + model.bias * model.bias);
    let loss: f64 = xs
        .iter()
        .zip(ys)
        .zip(costs)
        .map(|((x, &y), c)| {
            let s = if y { 1.0 } else { -1.0 };
            c * (1.0 - s * (x.dot(&model.weights) + model.bias)).max(0.0)
        })
        .sum();
    reg + loss / xs.len() as f64
}

fn prepare(xs: &[FeatureVector], normalize: bool) -> Vec<FeatureVector> {
    if normalize {
        xs.iter().map(FeatureVector::l2_normalized).collect()
    } else {
        xs.to_vec()
    }
}

fn check_inputs(xs: &[FeatureVector], n_labels: usize) -> Result<usize> {
    if xs.is_empty() || xs.len() != n_labels {
        return Err(Error::Shape(format!("{} feature vectors for {} labels", xs.len(), n_labels)));
    }
    let dim = xs[0].dim();
    if dim == 0 {
        return Err(Error::Shape("feature dimension is zero".into()));
    }
    if let Some(bad) = xs.iter().find(|x| x.dim() != dim) {
        return Err(Error::Shape(format!("inconsistent feature dimensions {dim} and {}", bad.dim())));
    }
    Ok(dim)
}

/// Binary Pegasos: step `1/(lambda t)`, projection onto the ball of radius
/// `sqrt(max_c / lambda)`, one pass over a shuffled permutation per epoch.
///
/// Returns the iterate with the lowest epoch-end objective, or the zero
/// model if no epoch improved on it. Inputs are used as given (no
/// normalization).
pub fn train_pegasos(xs: &[FeatureVector], ys: &[bool], costs: Option<&[f64]>, cfg: &SvmTrainConfig) -> Result<PegasosFit> {
    cfg.validate()?;
    let dim = check_inputs(xs, ys.len())?;
    let unit;
    let costs = match costs {
        Some(c) => {
            if c.len() != xs.len() {
                return Err(Error::Shape("sample cost count differs from sample count".into()));
            }
            c
        }
        None => {
            unit = vec![1.0; xs.len()];
            &unit
        }
    };
    let n = xs.len();
    let zero = BinaryLinear::zeros(dim);
    let initial_objective = svm_objective(&zero, xs, ys, costs, cfg.lambda);

    if ys.iter().all(|&y| y == ys[0]) {
        let model = BinaryLinear {
            weights: vec![0.0; dim],
            bias: if ys[0] { 1.0 } else { -1.0 },
        };
        let obj = svm_objective(&model, xs, ys, costs, cfg.lambda);
        return Ok(PegasosFit {
            model,
            initial_objective,
            epoch_objectives: vec![obj],
            final_objective: obj,
        });
    }

    let lambda = cfg.lambda;
    let radius_sq = costs.iter().cloned().fold(0.0, f64::max) / lambda;
    // w = scale * v, b = scale * vb
    let mut v = vec![0.0; dim];
    let mut vb = 0.0;
    let mut scale = 1.0;
    let mut v_norm_sq = 0.0;
    let mut t: u64 = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = (initial_objective, zero);
    let mut epoch_objectives = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let x = &xs[i];
            let y = if ys[i] { 1.0 } else { -1.0 };
            let vx = x.dot(&v) + vb;
            let margin = y * scale * vx;
            let shrink = 1.0 - eta * lambda;
            if shrink <= 0.0 {
                v.iter_mut().for_each(|w| *w = 0.0);
                vb = 0.0;
                v_norm_sq = 0.0;
                scale = 1.0;
            } else {
                scale *= shrink;
            }
            if margin < 1.0 {
                let a = eta * y * costs[i] / scale;
                let x_sq = x.entries().iter().map(|(_, v)| v * v).sum::<f64>() + 1.0;
                let v_dot_x = if shrink <= 0.0 { 0.0 } else { vx };
                for &(j, xv) in x.entries() {
                    v[j] += a * xv;
                }
                vb += a;
                v_norm_sq += 2.0 * a * v_dot_x + a * a * x_sq;
            }
            let w_norm_sq = scale * scale * v_norm_sq;
            if w_norm_sq > radius_sq {
                scale *= (radius_sq / w_norm_sq).sqrt();
            }
            if scale < 1e-9 {
                v.iter_mut().for_each(|w| *w *= scale);
                vb *= scale;
                v_norm_sq *= scale * scale;
                scale = 1.0;
            }
        }
        v_norm_sq = v.iter().map(|w| w * w).sum::<f64>() + vb * vb;
        let model = BinaryLinear {
            weights: v.iter().map(|w| w * scale).collect(),
            bias: vb * scale,
        };
        let obj = svm_objective(&model, xs, ys, costs, lambda);
        if !obj.is_finite() {
            return Err(Error::Training(format!("Pegasos objective became non-finite at step {t}")));
        }
        epoch_objectives.push(obj);
        if obj < best.0 {
            best = (obj, model);
        }
    }
    Ok(PegasosFit {
        model: best.1,
        initial_objective,
        epoch_objectives,
        final_objective: best.0,
    })
}

fn class_costs(ys: &[bool], weighting: bool) -> Option<Vec<f64>> {
    if !weighting {
        return None;
    }
    let n = ys.len() as f64;
    let pos = ys.iter().filter(|&&y| y).count() as f64;
    let neg = n - pos;
    Some(
        ys.iter()
            .map(|&y| {
                let count = if y { pos } else { neg };
                n / (2.0 * count)
            })
            .collect(),
    )
}

/// Trains a binary model with the configured normalization and class weighting.
pub fn train_binary(xs: &[FeatureVector], ys: &[bool], cfg: &SvmTrainConfig) -> Result<BinaryLinear> {
    let prepared = prepare(xs, cfg.normalize);
    let costs = class_costs(ys, cfg.class_weighting);
    Ok(train_pegasos(&prepared, ys, costs.as_deref(), cfg)?.model)
}

/// One weight row and bias per class, rows in the fixed order Favor, Against, None.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub classes: Vec<StanceLabel>,
    pub dim: usize,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub normalize: bool,
    /// Digest of the feature pipeline the model was trained with (empty when trained on raw vectors).
    #[serde(default)]
    pub feature_hash: String,
}

impl LinearModel {
    pub fn zeros(dim: usize) -> Self {
        LinearModel {
            classes: StanceLabel::ALL.to_vec(),
            dim,
            weights: vec![vec![0.0; dim]; 3],
            biases: vec![0.0; 3],
            normalize: false,
            feature_hash: String::new(),
        }
    }

    pub fn scores(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        check_dim(self.dim, x)?;
        let x = if self.normalize { x.l2_normalized() } else { x.clone() };
        Ok(self.weights.iter().zip(&self.biases).map(|(w, b)| x.dot(w) + b).collect())
    }

    /// Argmax of class scores; ties go to the earlier class in Favor, Against, None.
    pub fn predict(&self, x: &FeatureVector) -> Result<StanceLabel> {
        let scores = self.scores(x)?;
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = i;
            }
        }
        Ok(self.classes[best])
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().flatten().chain(&self.biases).all(|v| v.is_finite())
    }
}

pub fn predict(model: &LinearModel, x: &FeatureVector) -> Result<StanceLabel> {
    model.predict(x)
}

/// One binary Pegasos model per class (that class vs the rest), trained in parallel.
pub fn train_one_vs_rest(xs: &[FeatureVector], ys: &[StanceLabel], cfg: &SvmTrainConfig) -> Result<LinearModel> {
    cfg.validate()?;
    let dim = check_inputs(xs, ys.len())?;
    let prepared = prepare(xs, cfg.normalize);
    let columns: Vec<Result<BinaryLinear>> = StanceLabel::ALL
        .par_iter()
        .map(|&class| {
            let targets: Vec<bool> = ys.iter().map(|&y| y == class).collect();
            let costs = class_costs(&targets, cfg.class_weighting);
            let column_cfg = SvmTrainConfig {
                seed: cfg.seed.wrapping_add(class.index() as u64),
                ..cfg.clone()
            };
            Ok(train_pegasos(&prepared, &targets, costs.as_deref(), &column_cfg)?.model)
        })
        .collect();
    let mut model = LinearModel::zeros(dim);
    model.normalize = cfg.normalize;
    for (i, col) in columns.into_iter().enumerate() {
        let col = col?;
        model.weights[i] = col.weights;
        model.biases[i] = col.bias;
    }
    if !model.is_finite() {
        return Err(Error::Training("one-vs-rest weights are not finite".into()));
    }
    Ok(model)
}

/// A feature pipeline bundled with the one-vs-rest model trained on its output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineModel {
    pub pipeline: FeaturePipeline,
    pub model: LinearModel,
}

impl PipelineModel {
    pub fn train(
        specs: &[FeatureSpec],
        posts: &[PreparedPost],
        labels: &[StanceLabel],
        target: &str,
        cfg: &SvmTrainConfig,
        res: FeatureResources<'_>,
    ) -> Result<Self> {
        let pipeline = FeaturePipeline::fit(specs, posts, target, res)?;
        let xs: Vec<FeatureVector> = posts.iter().map(|p| pipeline.transform(p, res)).collect();
        let mut model = train_one_vs_rest(&xs, labels, cfg)?;
        model.feature_hash = pipeline.config_hash();
        Ok(PipelineModel { pipeline, model })
    }

    pub fn predict(&self, post: &PreparedPost, res: FeatureResources<'_>) -> Result<StanceLabel> {
        self.model.predict(&self.pipeline.transform(post, res))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    pub stage1_features: Vec<FeatureSpec>,
    pub stage2_features: Vec<FeatureSpec>,
    pub stage1: SvmTrainConfig,
    pub stage2: SvmTrainConfig,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            stage1_features: crate::features::two_step_stage1_features(),
            stage2_features: crate::features::two_step_stage2_features(),
            stage1: SvmTrainConfig::default(),
            stage2: SvmTrainConfig::default(),
        }
    }
}

/// Relevance stage (None vs relevant) followed by a polarity stage (Favor vs Against).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeModel {
    /// Positive margin means relevant.
    pub stage1: BinaryLinear,
    /// Positive margin means Favor.
    pub stage2: BinaryLinear,
    pub stage1_pipeline: FeaturePipeline,
    pub stage2_pipeline: FeaturePipeline,
    pub normalize: bool,
}

/// Stage 1 None is terminal; zero margins resolve to relevant and Favor.
pub fn cascade_decide(stage1_margin: f64, stage2_margin: f64) -> StanceLabel {
    if stage1_margin < 0.0 {
        StanceLabel::None
    } else if stage2_margin >= 0.0 {
        StanceLabel::Favor
    } else {
        StanceLabel::Against
    }
}

pub fn cascade_train(
    posts: &[PreparedPost],
    labels: &[StanceLabel],
    target: &str,
    cfg: &CascadeConfig,
    res: FeatureResources<'_>,
) -> Result<CascadeModel> {
    if posts.len() != labels.len() {
        return Err(Error::Shape(format!("{} posts for {} labels", posts.len(), labels.len())));
    }
    let relevant: Vec<bool> = labels.iter().map(|&l| l != StanceLabel::None).collect();
    if !relevant.iter().any(|&r| r) || relevant.iter().all(|&r| r) {
        return Err(Error::Validation(
            "stage 1 needs at least one None and one Favor/Against training post".into(),
        ));
    }
    let polar: Vec<usize> = (0..posts.len()).filter(|&i| relevant[i]).collect();
    let stage2_posts: Vec<PreparedPost> = polar.iter().map(|&i| posts[i].clone()).collect();
    let stage2_targets: Vec<bool> = polar.iter().map(|&i| labels[i] == StanceLabel::Favor).collect();
    if stage2_targets.iter().all(|&f| f) || !stage2_targets.iter().any(|&f| f) {
        return Err(Error::Validation(
            "stage 2 needs at least one Favor and one Against training post".into(),
        ));
    }
    let stage1_pipeline = FeaturePipeline::fit(&cfg.stage1_features, posts, target, res)?;
    let stage2_pipeline = FeaturePipeline::fit(&cfg.stage2_features, &stage2_posts, target, res)?;
    let xs1: Vec<FeatureVector> = posts.iter().map(|p| stage1_pipeline.transform(p, res)).collect();
    let xs2: Vec<FeatureVector> = stage2_posts.iter().map(|p| stage2_pipeline.transform(p, res)).collect();
    let stage1 = train_binary(&xs1, &relevant, &cfg.stage1)?;
    let stage2 = train_binary(&xs2, &stage2_targets, &cfg.stage2)?;
    Ok(CascadeModel {
        stage1,
        stage2,
        stage1_pipeline,
        stage2_pipeline,
        normalize: cfg.stage1.normalize,
    })
}

impl CascadeModel {
    fn margin(&self, model: &BinaryLinear, x: FeatureVector) -> Result<f64> {
        let x = if self.normalize { x.l2_normalized() } else { x };
        model.margin(&x)
    }

    pub fn predict(&self, post: &PreparedPost, res: FeatureResources<'_>) -> Result<StanceLabel> {
        let m1 = self.margin(&self.stage1, self.stage1_pipeline.transform(post, res))?;
        if m1 < 0.0 {
            return Ok(StanceLabel::None);
        }
        let m2 = self.margin(&self.stage2, self.stage2_pipeline.transform(post, res))?;
        Ok(cascade_decide(m1, m2))
    }
}

pub fn cascade_predict(model: &CascadeModel, post: &PreparedPost, res: FeatureResources<'_>) -> Result<StanceLabel> {
    model.predict(post, res)
}

/// Serialized SVM model with its feature pipelines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SvmArtifact {
    OneVsRest(PipelineModel),
    Cascade(CascadeModel),
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    class_order: Vec<StanceLabel>,
    feature_hashes: Vec<String>,
    config_hash: String,
    artifact: SvmArtifact,
}

impl SvmArtifact {
    fn feature_hashes(&self) -> Vec<String> {
        match self {
            SvmArtifact::OneVsRest(m) => vec![m.pipeline.config_hash()],
            SvmArtifact::Cascade(c) => vec![c.stage1_pipeline.config_hash(), c.stage2_pipeline.config_hash()],
        }
    }

    pub fn predict(&self, post: &PreparedPost, res: FeatureResources<'_>) -> Result<StanceLabel> {
        match self {
            SvmArtifact::OneVsRest(m) => m.predict(post, res),
            SvmArtifact::Cascade(c) => c.predict(post, res),
        }
    }

    pub fn to_json(&self, config_hash: &str) -> Result<String> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            class_order: StanceLabel::ALL.to_vec(),
            feature_hashes: self.feature_hashes(),
            config_hash: config_hash.to_string(),
            artifact: self.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Parses a model file, checking the format version, class order and
    /// that each stored feature hash matches the embedded pipeline.
    pub fn from_json(json: &str) -> Result<(Self, String)> {
        let file: ModelFile = serde_json::from_str(json)?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported model format version {}",
                file.format_version
            )));
        }
        if file.class_order != StanceLabel::ALL {
            return Err(Error::Validation("model class order differs from FAVOR, AGAINST, NONE".into()));
        }
        if file.feature_hashes != file.artifact.feature_hashes() {
            return Err(Error::Validation("feature pipeline hash mismatch".into()));
        }
        if let SvmArtifact::OneVsRest(m) = &file.artifact {
            if m.model.feature_hash != file.feature_hashes[0] {
                return Err(Error::Validation("model was trained with a different feature pipeline".into()));
            }
        }
        Ok((file.artifact, file.config_hash))
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        std::fs::write(path, self.to_json(config_hash)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        Self::from_json(&crate::error::read_to_string(path)?)
    }
}
