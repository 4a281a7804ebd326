//! Hyperparameter grid search by k-fold cross-validation on the training
//! split. Datasets are accessed through [`GuardedDataset`], which counts
//! reads per split so callers can prove the test split was never touched.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{Post, TopicDataset};
use crate::error::{Error, Result};
use crate::label::StanceLabel;

#[derive(Debug, Default)]
pub struct SplitAccessLog {
    train: AtomicUsize,
    test: AtomicUsize,
}

impl SplitAccessLog {
    pub fn train_reads(&self) -> usize {
        self.train.load(Ordering::SeqCst)
    }

    pub fn test_reads(&self) -> usize {
        self.test.load(Ordering::SeqCst)
    }
}

/// A topic dataset whose split accessors record every read.
#[derive(Debug)]
pub struct GuardedDataset<'a> {
    dataset: &'a TopicDataset,
    log: SplitAccessLog,
}

impl<'a> GuardedDataset<'a> {
    pub fn new(dataset: &'a TopicDataset) -> Self {
        GuardedDataset {
            dataset,
            log: SplitAccessLog::default(),
        }
    }

    pub fn topic(&self) -> &str {
        &self.dataset.topic
    }

    pub fn train(&self) -> &'a [Post] {
        self.log.train.fetch_add(1, Ordering::SeqCst);
        &self.dataset.train
    }

    pub fn test(&self) -> &'a [Post] {
        self.log.test.fetch_add(1, Ordering::SeqCst);
        &self.dataset.test
    }

    pub fn log(&self) -> &SplitAccessLog {
        &self.log
    }
}

pub type GridPoint = BTreeMap<String, f64>;

/// Cartesian product of the grid, in key order then value order.
/// An empty grid yields one empty point (the defaults).
pub fn grid_points(grid: &BTreeMap<String, Vec<f64>>) -> Vec<GridPoint> {
    let mut points = vec![GridPoint::new()];
    for (key, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.insert(key.clone(), v);
                    q
                })
            })
            .collect();
    }
    points
}

/// Stratified folds: each class is shuffled and dealt round-robin.
pub fn stratified_folds(labels: &[StanceLabel], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::Validation(format!("{} training posts cannot fill {k} folds", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for class in StanceLabel::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[next % k].push(i);
            next += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PointScore {
    pub point: GridPoint,
    pub fold_scores: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TuneReport {
    pub topic: String,
    pub model: String,
    pub folds: usize,
    pub scores: Vec<PointScore>,
    /// Index into `scores` of the highest mean (first on ties).
    pub best: usize,
}

impl TuneReport {
    pub fn best_point(&self) -> &GridPoint {
        &self.scores[self.best].point
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "topic = {}", self.topic).unwrap();
        writeln!(out, "model = {}", self.model).unwrap();
        writeln!(out, "folds = {}", self.folds).unwrap();
        for (i, s) in self.scores.iter().enumerate() {
            let point: Vec<String> = s.point.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let point = if point.is_empty() { "defaults".to_string() } else { point.join(" ") };
            let mark = if i == self.best { " *" } else { "" };
            writeln!(out, "{:.4}\t{point}{mark}", s.mean).unwrap();
        }
        out
    }
}

/// Scores every grid point with `score(point, train_indices, validation_indices)`
/// on each fold and averages. Folds and points run concurrently.
pub fn grid_search<F>(
    topic: &str,
    model: &str,
    labels: &[StanceLabel],
    grid: &BTreeMap<String, Vec<f64>>,
    k: usize,
    seed: u64,
    score: F,
) -> Result<TuneReport>
where
    F: Fn(&GridPoint, &[usize], &[usize]) -> Result<f64> + Sync,
{
    let folds = stratified_folds(labels, k, seed)?;
    let points = grid_points(grid);
    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|p| (0..k).map(move |f| (p, f))).collect();
    let results: Vec<f64> = jobs
        .par_iter()
        .map(|&(p, f)| {
            let validation = &folds[f];
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, fold)| fold.iter().copied())
                .collect();
            score(&points[p], &train, validation)
        })
        .collect::<Result<_>>()?;
    let scores: Vec<PointScore> = points
        .into_iter()
        .enumerate()
        .map(|(p, point)| {
            let fold_scores = results[p * k..(p + 1) * k].to_vec();
            let mean = fold_scores.iter().sum::<f64>() / k as f64;
            PointScore { point, fold_scores, mean }
        })
        .collect();
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.mean > scores[best].mean {
            best = i;
        }
    }
    Ok(TuneReport {
        topic: topic.to_string(),
        model: model.to_string(),
        folds: k,
        scores,
        best,
    })
}
