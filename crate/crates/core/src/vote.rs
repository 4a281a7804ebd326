//! Two-level majority voting: over checkpoints within each independent run,
//! then over runs.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::StanceLabel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoteConfig {
    pub num_runs: usize,
    /// Share of the training set held out as each run's validation fold.
    pub validation_fraction: f64,
    /// Inclusive epoch range whose checkpoints predict the test set; `None`
    /// uses the model's per-topic schedule.
    pub checkpoint_epochs: Option<(usize, usize)>,
    /// Explicit tie-break order; `None` derives it from training label frequencies.
    pub tie_break: Option<Vec<StanceLabel>>,
    pub master_seed: u64,
}

impl Default for VoteConfig {
    fn default() -> Self {
        VoteConfig {
            num_runs: 10,
            validation_fraction: 0.1,
            checkpoint_epochs: None,
            tie_break: None,
            master_seed: 13,
        }
    }
}

impl VoteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_runs == 0 {
            return Err(Error::Config("num_runs must be at least 1".into()));
        }
        if !(self.validation_fraction >= 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction must be in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.num_runs as f64 * self.validation_fraction > 1.0 + 1e-9 {
            return Err(Error::Config(format!(
                "{} runs with validation fraction {} cannot have disjoint folds",
                self.num_runs, self.validation_fraction
            )));
        }
        if let Some((lo, hi)) = self.checkpoint_epochs {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("checkpoint epoch range {lo}-{hi} is empty")));
            }
        }
        if let Some(order) = &self.tie_break {
            let mut sorted = order.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != 3 || order.len() != 3 {
                return Err(Error::Config("tie_break must list FAVOR, AGAINST and NONE once each".into()));
            }
        }
        Ok(())
    }
}

/// Labels by descending training frequency; equal counts fall back to Against, Favor, None.
pub fn default_tie_break(train_labels: &[StanceLabel]) -> Vec<StanceLabel> {
    let fixed = [StanceLabel::Against, StanceLabel::Favor, StanceLabel::None];
    let mut order = fixed.to_vec();
    let count = |l: StanceLabel| train_labels.iter().filter(|&&x| x == l).count();
    order.sort_by_key(|&l| std::cmp::Reverse(count(l)));
    order
}

/// Most frequent label; ties go to whichever tied label comes first in `tie_break`.
pub fn majority(labels: &[StanceLabel], tie_break: &[StanceLabel]) -> Result<StanceLabel> {
    if labels.is_empty() {
        return Err(Error::Validation("majority of an empty label list".into()));
    }
    let mut counts = [0usize; 3];
    for l in labels {
        counts[l.index()] += 1;
    }
    let top = *counts.iter().max().expect("three counts");
    tie_break
        .iter()
        .chain(StanceLabel::ALL.iter())
        .find(|l| counts[l.index()] == top)
        .copied()
        .ok_or_else(|| Error::Validation("tie_break order is empty".into()))
}

/// Pairwise-disjoint validation folds, one per run, each `floor(fraction·n)` indices.
pub fn validation_folds(n: usize, runs: usize, fraction: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    let size = (fraction * n as f64 + 1e-9).floor() as usize;
    if runs * size > n {
        return Err(Error::Config(format!("{runs} folds of {size} exceed {n} training posts")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..runs)
        .map(|r| {
            let mut fold = perm[r * size..(r + 1) * size].to_vec();
            fold.sort_unstable();
            fold
        })
        .collect())
}

/// Predictions of one run at each checkpoint epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunPredictions {
    pub run: usize,
    pub checkpoints: Vec<(usize, Vec<StanceLabel>)>,
}

/// Every run × checkpoint × test post prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    pub post_ids: Vec<String>,
    pub runs: Vec<RunPredictions>,
}

impl PredictionMatrix {
    /// Rejects missing runs, empty checkpoint sets and ragged rows.
    pub fn check_complete(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::Validation("prediction matrix has no runs".into()));
        }
        for run in &self.runs {
            if run.checkpoints.is_empty() {
                return Err(Error::Config(format!("run {} has no checkpoints", run.run)));
            }
            for (epoch, labels) in &run.checkpoints {
                if labels.len() != self.post_ids.len() {
                    return Err(Error::Validation(format!(
                        "run {} checkpoint {epoch} has {} predictions for {} posts",
                        run.run,
                        labels.len(),
                        self.post_ids.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checkpoint majority within each run, then majority across runs.
    pub fn vote(&self, tie_break: &[StanceLabel]) -> Result<Vec<StanceLabel>> {
        self.check_complete()?;
        let per_run: Vec<Vec<StanceLabel>> = self
            .runs
            .iter()
            .map(|run| {
                (0..self.post_ids.len())
                    .map(|i| {
                        let votes: Vec<StanceLabel> = run.checkpoints.iter().map(|(_, l)| l[i]).collect();
                        majority(&votes, tie_break)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        (0..self.post_ids.len())
            .map(|i| {
                let votes: Vec<StanceLabel> = per_run.iter().map(|r| r[i]).collect();
                majority(&votes, tie_break)
            })
            .collect()
    }

    /// `run<TAB>checkpoint<TAB>post_id<TAB>label` rows after a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("run\tcheckpoint\tpost_id\tlabel\n");
        for run in &self.runs {
            for (epoch, labels) in &run.checkpoints {
                for (id, l) in self.post_ids.iter().zip(labels) {
                    writeln!(out, "{}\t{epoch}\t{id}\t{l}", run.run).unwrap();
                }
            }
        }
        out
    }

    pub fn parse_tsv(content: &str, origin: &str) -> Result<Self> {
        let mut post_ids: Vec<String> = Vec::new();
        let mut runs: Vec<RunPredictions> = Vec::new();
        for (i, line) in content.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') || line.starts_with("run\t") {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::parse(origin, i + 1, format!("expected 4 columns, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(origin, i + 1, format!("`{s}` is not a number")));
            let (run, epoch) = (num(f[0])?, num(f[1])?);
            let label: StanceLabel = f[3].parse().map_err(|e: Error| Error::parse(origin, i + 1, e.to_string()))?;
            if runs.last().is_none_or(|r| r.run != run) {
                runs.push(RunPredictions { run, checkpoints: Vec::new() });
            }
            let r = runs.last_mut().expect("just pushed");
            if r.checkpoints.last().is_none_or(|(e, _)| *e != epoch) {
                r.checkpoints.push((epoch, Vec::new()));
            }
            let defining_ids = runs.len() == 1 && runs[0].checkpoints.len() == 1;
            let (_, labels) = runs.last_mut().and_then(|r| r.checkpoints.last_mut()).expect("just pushed");
            if defining_ids {
                post_ids.push(f[2].to_string());
            } else if post_ids.get(labels.len()).map(String::as_str) != Some(f[2]) {
                return Err(Error::parse(origin, i + 1, format!("post `{}` out of order", f[2])));
            }
            labels.push(label);
        }
        let m = PredictionMatrix { post_ids, runs };
        m.check_complete()?;
        Ok(m)
    }
}

/// What a trainer sees for one run.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub run: usize,
    pub seed: u64,
    /// Training indices with the validation fold removed.
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub checkpoint_epochs: (usize, usize),
}

pub fn run_seed(master_seed: u64, run: usize) -> u64 {
    master_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(run as u64 + 1)
}

/// Final labels plus the full matrix they were voted from.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteOutcome {
    pub labels: Vec<StanceLabel>,
    pub matrix: PredictionMatrix,
    pub tie_break: Vec<StanceLabel>,
}

/// Runs the independent trainers (concurrently) and votes over their
/// checkpoint predictions. `trainer` returns `(epoch, test labels)` pairs.
pub fn run_vote_scheme<F>(
    train_labels: &[StanceLabel],
    test_ids: &[String],
    cfg: &VoteConfig,
    checkpoint_epochs: (usize, usize),
    trainer: F,
) -> Result<VoteOutcome>
where
    F: Fn(&RunSpec) -> Result<Vec<(usize, Vec<StanceLabel>)>> + Sync,
{
    cfg.validate()?;
    let (lo, hi) = cfg.checkpoint_epochs.unwrap_or(checkpoint_epochs);
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!("checkpoint epoch range {lo}-{hi} is empty")));
    }
    let n = train_labels.len();
    let folds = validation_folds(n, cfg.num_runs, cfg.validation_fraction, cfg.master_seed)?;
    let specs: Vec<RunSpec> = folds
        .into_iter()
        .enumerate()
        .map(|(run, validation)| {
            let mut held = vec![false; n];
            validation.iter().for_each(|&i| held[i] = true);
            RunSpec {
                run,
                seed: run_seed(cfg.master_seed, run),
                train: (0..n).filter(|&i| !held[i]).collect(),
                validation,
                checkpoint_epochs: (lo, hi),
            }
        })
        .collect();
    let runs: Vec<RunPredictions> = specs
        .par_iter()
        .map(|spec| {
            Ok(RunPredictions {
                run: spec.run,
                checkpoints: trainer(spec)?,
            })
        })
        .collect::<Result<_>>()?;
    let matrix = PredictionMatrix {
        post_ids: test_ids.to_vec(),
        runs,
    };
    let tie_break = cfg.tie_break.clone().unwrap_or_else(|| default_tie_break(train_labels));
    let labels = matrix.vote(&tie_break)?;
    Ok(VoteOutcome {
        labels,
        matrix,
        tie_break,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use StanceLabel::{Against as A, Favor as F, None as N};

    #[test]
    fn majority_examples() {
        assert_eq!(majority(&[F, F, N], &[A, F, N]).unwrap(), F);
        assert_eq!(majority(&[F, A], &[A, F, N]).unwrap(), A);
        assert!(majority(&[], &[A, F, N]).is_err());
    }

    #[test]
    fn tie_break_by_frequency() {
        assert_eq!(default_tie_break(&[F, F, N, A, F, N]), vec![F, N, A]);
        assert_eq!(default_tie_break(&[]), vec![A, F, N]);
        assert_eq!(default_tie_break(&[N, F]), vec![F, N, A]);
    }

    #[test]
    fn folds_are_disjoint() {
        let folds = validation_folds(95, 10, 0.1, 3).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for f in &folds {
            assert_eq!(f.len(), 9);
            for &i in f {
                assert!(seen.insert(i));
            }
        }
        assert!(validation_folds(10, 10, 0.2, 3).is_err());
    }

    #[test]
    fn config_checks() {
        let cfg = VoteConfig {
            checkpoint_epochs: Some((5, 4)),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = VoteConfig {
            num_runs: 11,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let m = PredictionMatrix {
            post_ids: vec!["a".into(), "b".into()],
            runs: vec![
                RunPredictions {
                    run: 0,
                    checkpoints: vec![(3, vec![F, A]), (4, vec![N, A])],
                },
                RunPredictions {
                    run: 1,
                    checkpoints: vec![(3, vec![F, F])],
                },
            ],
        };
        assert_eq!(PredictionMatrix::parse_tsv(&m.to_tsv(), "m").unwrap(), m);
    }

    #[test]
    fn ten_way_tie_uses_order() {
        let ids = vec!["p".to_string()];
        let cfg = VoteConfig {
            validation_fraction: 0.0,
            ..Default::default()
        };
        // training labels make Against the most frequent
        let train = [A, A, F, N];
        let out = run_vote_scheme(&train, &ids, &cfg, (1, 1), |spec| {
            Ok(vec![(1, vec![if spec.run % 2 == 0 { F } else { A }])])
        })
        .unwrap();
        assert_eq!(out.labels, vec![A]);
    }
}
