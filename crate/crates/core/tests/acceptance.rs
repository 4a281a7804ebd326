//! Acceptance suite: one line per criterion.
//!
//! Criteria that need the official SemEval files read their paths from
//! `STANCE_SEMEVAL_TRAIN` and `STANCE_SEMEVAL_TEST` (and, optionally, word
//! vectors from `STANCE_EMBEDDINGS`). Without them those criteria report
//! `FAIL (data unavailable)`; the process exits non-zero only when a criterion
//! that could run has failed.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stance_core::autodiff::{primitive_grad_checks, GradCheckOptions};
use stance_core::config::{ModelKind, RunConfig, TopicOverride};
use stance_core::corpus::{dataset_stats, load_semeval, reference_counts};
use stance_core::evaluation::{macro_f1_favor_against, reference_rows, ReferenceDataset};
use stance_core::experiment::Experiment;
use stance_core::features::{FeatureResources, FeatureSpec, FeatureVector, PreparedPost};
use stance_core::neural::{model_grad_checks, theorem_suite, train, Architecture, EmbeddingTable, Example, NeuralConfig, NeuralModel};
use stance_core::preprocess::{segment_hashtag, segmentation_key, Token, TokenSequence, UnigramFrequencyTable};
use stance_core::resources;
use stance_core::svm::{cascade_train, train_pegasos, CascadeConfig, SvmTrainConfig};
use stance_core::vote::{majority, VoteConfig};
use stance_core::StanceLabel::{self, Against as A, Favor as F, None as N};

enum Status {
    Pass,
    Fail,
    Unavailable(String),
}

struct Check {
    status: Status,
    detail: String,
}

impl Check {
    fn new(ok: bool, detail: impl Into<String>) -> Self {
        Check {
            status: if ok { Status::Pass } else { Status::Fail },
            detail: detail.into(),
        }
    }

    fn error(e: impl std::fmt::Display) -> Self {
        Check::new(false, format!("error: {e}"))
    }
}

/// Runs a criterion and fails it if it exceeds its time budget.
fn timed(budget: Option<Duration>, f: impl FnOnce() -> Check) -> (Check, Duration) {
    let start = Instant::now();
    let mut c = f();
    let elapsed = start.elapsed();
    if let (Some(b), Status::Pass) = (budget, &c.status) {
        if elapsed > b {
            c.status = Status::Fail;
            c.detail = format!("{}; over the {:.0} s budget", c.detail, b.as_secs_f64());
        }
    }
    (c, elapsed)
}

fn semeval_paths() -> Result<(PathBuf, PathBuf), String> {
    match (std::env::var_os("STANCE_SEMEVAL_TRAIN"), std::env::var_os("STANCE_SEMEVAL_TEST")) {
        (Some(tr), Some(te)) => Ok((tr.into(), te.into())),
        _ => Err("set STANCE_SEMEVAL_TRAIN and STANCE_SEMEVAL_TEST to the official files".into()),
    }
}

const SEMEVAL_TOPICS: [&str; 5] = ["AT", "CC", "FM", "HC", "LA"];

fn dataset_fidelity() -> Check {
    let (train, test) = match semeval_paths() {
        Ok(p) => p,
        Err(e) => {
            return Check {
                status: Status::Unavailable(e),
                detail: String::new(),
            }
        }
    };
    let datasets = match load_semeval(&train, &test) {
        Ok(d) => d,
        Err(e) => return Check::error(e),
    };
    let mut wrong = Vec::new();
    for topic in SEMEVAL_TOPICS {
        match datasets.iter().find(|d| d.topic == topic) {
            None => wrong.push(format!("{topic} missing")),
            Some(ds) => {
                let got = dataset_stats(ds);
                if Some(got) != reference_counts(topic) {
                    wrong.push(format!("{topic} {got:?}"));
                }
            }
        }
    }
    Check::new(wrong.is_empty(), if wrong.is_empty() { "all counts exact".into() } else { wrong.join("; ") })
}

fn theorem() -> Check {
    match theorem_suite(100, 10, 2016) {
        Ok(r) => Check::new(
            r.max_attention_deviation <= 1e-10 && r.max_output_deviation <= 1e-12,
            format!(
                "max attention deviation {:.2e}, max TAN/TAN- output gap {:.2e}",
                r.max_attention_deviation, r.max_output_deviation
            ),
        ),
        Err(e) => Check::error(e),
    }
}

fn gradients() -> Check {
    let opts = GradCheckOptions::default();
    let mut all: Vec<(String, f64)> = match primitive_grad_checks(opts) {
        Ok(v) => v.into_iter().map(|(n, e)| (n.to_string(), e)).collect(),
        Err(e) => return Check::error(e),
    };
    match model_grad_checks(opts) {
        Ok(v) => all.extend(v),
        Err(e) => return Check::error(e),
    }
    let (worst, err) = all.iter().max_by(|a, b| a.1.total_cmp(&b.1)).cloned().unwrap();
    let bad: Vec<String> = all.iter().filter(|(_, e)| *e > 1e-5).map(|(n, e)| format!("{n} {e:.2e}")).collect();
    Check::new(
        bad.is_empty(),
        format!("{} graphs, worst {worst} {err:.2e}{}", all.len(), if bad.is_empty() { String::new() } else { format!("; over tolerance: {}", bad.join(", ")) }),
    )
}

fn random_label(rng: &mut ChaCha8Rng) -> StanceLabel {
    [F, A, N][rng.gen_range(0..3)]
}

/// Per-class counting, then the textbook precision and recall formulas.
fn counting_oracle(pred: &[StanceLabel], gold: &[StanceLabel]) -> f64 {
    let f1 = |c: StanceLabel| {
        let pairs = || pred.iter().zip(gold);
        let tp = pairs().filter(|(p, g)| **p == c && **g == c).count() as f64;
        let fp = pairs().filter(|(p, g)| **p == c && **g != c).count() as f64;
        let fn_ = pairs().filter(|(p, g)| **p != c && **g == c).count() as f64;
        let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let r = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    };
    (f1(F) + f1(A)) / 2.0
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=60);
        let pred: Vec<StanceLabel> = (0..n).map(|_| random_label(&mut rng)).collect();
        let gold: Vec<StanceLabel> = (0..n).map(|_| random_label(&mut rng)).collect();
        if macro_f1_favor_against(&pred, &gold).unwrap().official != counting_oracle(&pred, &gold) {
            mismatches += 1;
        }
    }
    let hand = macro_f1_favor_against(&[F, A, A, A, N, F], &[F, F, A, A, N, N]).unwrap().official;
    Check::new(
        mismatches == 0 && hand == 0.65,
        format!("{mismatches}/1000 mismatches, hand example {hand}"),
    )
}

fn brute_force(s: &str, table: &UnigramFrequencyTable) -> Vec<String> {
    let chars: Vec<(usize, char)> = s.char_indices().collect();
    let n = chars.len();
    let mut best: Option<(u64, usize, Vec<String>)> = None;
    for mask in 0u32..(1 << (n - 1)) {
        let mut pieces = Vec::new();
        let mut start = 0;
        for k in 1..n {
            if mask & (1 << (k - 1)) != 0 {
                pieces.push(&s[chars[start].0..chars[k].0]);
                start = k;
            }
        }
        pieces.push(&s[chars[start].0..]);
        if let Some((cost, len, words)) = segmentation_key(table, &pieces) {
            let cand = (cost, len, words.iter().map(|w| w.to_string()).collect::<Vec<_>>());
            if best.as_ref().is_none_or(|b| cand < *b) {
                best = Some(cand);
            }
        }
    }
    best.expect("singleton pieces are always valid").2
}

fn segmentation() -> Check {
    let shipped = segment_hashtag("powertowomen", resources::frequency_table());
    let table = UnigramFrequencyTable::from_ranked(["a", "ab", "b", "ba", "abba", "bb", "aab", "bab", "baa"]);
    let mut checked = 0;
    let mut mismatches = Vec::new();
    // every string over {a, b} up to length 12
    for len in 1..=12u32 {
        for bits in 0u32..(1 << len) {
            let s: String = (0..len).map(|k| if bits & (1 << k) != 0 { 'b' } else { 'a' }).collect();
            checked += 1;
            if segment_hashtag(&s, &table) != brute_force(&s, &table) {
                mismatches.push(s);
            }
        }
    }
    Check::new(
        shipped == ["power", "to", "women"] && mismatches.is_empty(),
        format!(
            "powertowomen -> {}; DP vs brute force on {checked} strings, {} mismatches",
            shipped.join(" "),
            mismatches.len()
        ),
    )
}

fn post(words: &[&str]) -> PreparedPost {
    PreparedPost {
        raw: words.join(" "),
        tokens: TokenSequence {
            tokens: words.iter().map(|w| Token::plain(*w)).collect(),
        },
    }
}

fn svm_sanity() -> Check {
    // two jittered clusters either side of the diagonal
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..80 {
        let y = i % 2 == 0;
        let c = if y { 1.0 } else { -1.0 };
        xs.push(FeatureVector::from_dense(&[c + rng.gen_range(-0.4..0.4), c + rng.gen_range(-0.4..0.4), 0.2]));
        ys.push(y);
    }
    let cfg = SvmTrainConfig {
        epochs: 200,
        normalize: false,
        ..Default::default()
    };
    let fit = match train_pegasos(&xs, &ys, None, &cfg) {
        Ok(f) => f,
        Err(e) => return Check::error(e),
    };
    let correct = xs.iter().zip(&ys).filter(|(x, &y)| (fit.model.margin(x).unwrap() > 0.0) == y).count();

    let vocab = ["good", "bad", "meh", "weather", "love", "hate"];
    let (posts, labels): (Vec<PreparedPost>, Vec<StanceLabel>) = (0..60)
        .map(|i| match i % 3 {
            0 => (post(&["good", "love"]), F),
            1 => (post(&["bad", "hate"]), A),
            _ => (post(&["meh", "weather"]), N),
        })
        .unzip();
    let ccfg = CascadeConfig {
        stage1_features: vec![FeatureSpec::WordNgrams { min: 1, max: 1 }],
        stage2_features: vec![FeatureSpec::WordNgrams { min: 1, max: 1 }],
        ..Default::default()
    };
    let res = FeatureResources::default();
    let model = match cascade_train(&posts, &labels, "Atheism", &ccfg, res) {
        Ok(m) => m,
        Err(e) => return Check::error(e),
    };
    let mut violations = 0;
    let mut stage1_none = 0;
    for mask in 1u32..(1 << vocab.len()) {
        let words: Vec<&str> = (0..vocab.len()).filter(|k| mask & (1 << k) != 0).map(|k| vocab[k]).collect();
        let p = post(&words);
        let x = model.stage1_pipeline.transform(&p, res).l2_normalized();
        let m1 = model.stage1.margin(&x).unwrap();
        let label = model.predict(&p, res).unwrap();
        if m1 < 0.0 {
            stage1_none += 1;
            if label != N {
                violations += 1;
            }
        }
    }
    Check::new(
        correct == xs.len() && violations == 0 && stage1_none > 0,
        format!(
            "separable fixture {correct}/{} correct; cascade {violations} violations over {stage1_none} stage-1 None posts",
            xs.len()
        ),
    )
}

fn vote_scheme() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = common::write_corpus(dir.path(), &["AT"], 40, 12);
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let mut cfg = RunConfig::semeval(&train, &test);
        cfg.output_dir = dir.path().join("out");
        cfg.neural.embedding_dim = 6;
        cfg.neural.hidden = 4;
        cfg.vote = VoteConfig {
            num_runs: 10,
            ..Default::default()
        };
        cfg.topic.insert(
            "AT".into(),
            TopicOverride {
                epochs: Some((2, 3)),
                ..Default::default()
            },
        );
        let run = || -> stance_core::Result<String> {
            let exp = Experiment::new(cfg)?;
            let ds = exp.load_datasets()?.remove(0);
            exp.run_train(ModelKind::Tan, &ds, None)?;
            let labels = exp.predict_from_artifacts(ModelKind::Tan, &ds)?;
            let path = exp.write_predictions(&ds, "tan", &labels)?;
            Ok(std::fs::read_to_string(&path).expect("predictions file was just written"))
        };
        match run() {
            Ok(s) => outputs.push(s),
            Err(e) => return Check::error(e),
        }
    }
    let identical = outputs[0] == outputs[1];

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let labels: Vec<StanceLabel> = (0..rng.gen_range(1..30)).map(|_| random_label(&mut rng)).collect();
        let mut tie = vec![F, A, N];
        tie.rotate_left(rng.gen_range(0..3));
        let count = |l: StanceLabel| labels.iter().filter(|&&x| x == l).count();
        let top = [F, A, N].iter().map(|&l| count(l)).max().unwrap();
        let expected = *tie.iter().find(|&&l| count(l) == top).unwrap();
        if majority(&labels, &tie).unwrap() != expected {
            mismatches += 1;
        }
    }
    Check::new(
        identical && mismatches == 0,
        format!(
            "two TAN vote runs {}; majority {mismatches}/1000 mismatches",
            if identical { "byte-identical" } else { "differ" }
        ),
    )
}

fn desk_scale() -> Check {
    let (train, test) = match semeval_paths() {
        Ok(p) => p,
        Err(e) => {
            return Check {
                status: Status::Unavailable(e),
                detail: String::new(),
            }
        }
    };
    let mut cfg = RunConfig::semeval(train, test);
    cfg.neural.embeddings = std::env::var_os("STANCE_EMBEDDINGS").map(PathBuf::from);
    let dir = tempfile::tempdir().unwrap();
    cfg.output_dir = dir.path().to_path_buf();
    cfg.topics = SEMEVAL_TOPICS.iter().map(|t| t.to_string()).collect();
    let seed = cfg.seed;
    let exp = match Experiment::new(cfg) {
        Ok(e) => e,
        Err(e) => return Check::error(e),
    };
    let datasets = match exp.load_datasets() {
        Ok(d) => d,
        Err(e) => return Check::error(e),
    };
    let reference = reference_rows(ReferenceDataset::SemEval);
    let mut ok = true;
    let mut parts = Vec::new();
    for (arch, name) in [(Architecture::Cnn, "CNN"), (Architecture::TanMinus, "TAN-")] {
        let row = &reference.iter().find(|(m, _)| *m == name).expect("reference row").1;
        let mut within = 0;
        let mut beats_at = false;
        let mut scores = Vec::new();
        for ds in &datasets {
            let result = exp
                .embedding_table(&[&ds.train, &ds.test], &[&ds.topic])
                .and_then(|table| exp.train_neural(arch, ds, &table));
            let out = match result {
                Ok(o) => o,
                Err(e) => return Check::error(e),
            };
            let gold: Vec<StanceLabel> = ds.test.iter().map(|p| p.gold).collect();
            let score = macro_f1_favor_against(&out.vote.labels, &gold).unwrap().official;
            let train_labels: Vec<StanceLabel> = ds.train.iter().map(|p| p.gold).collect();
            let top = majority(&train_labels, &[A, F, N]).unwrap();
            let baseline = macro_f1_favor_against(&vec![top; gold.len()], &gold).unwrap().official;
            let paper = row.iter().find(|(t, _)| *t == ds.topic).map(|&(_, v)| v).unwrap_or(f64::NAN);
            if (score - paper).abs() <= 0.08 {
                within += 1;
            }
            if ds.topic == "AT" {
                beats_at = score > baseline;
            }
            scores.push(format!("{} {score:.3} (ref {paper:.3}, majority {baseline:.3})", ds.topic));
        }
        ok &= beats_at && within >= 3;
        parts.push(format!("{name}: {}; {within}/5 within 0.08", scores.join(", ")));
    }
    Check::new(ok, format!("seed {seed}; {}", parts.join(" | ")))
}

fn memorization() -> Check {
    let labels = [F, A, N, A, F, N, A, F, A, N];
    let data: Vec<Example> = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| Example {
            tokens: (0..3 + i % 4).map(|k| format!("w{}", (i + 5 * k) % 12)).collect(),
            label,
        })
        .collect();
    let vocab: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
    let table = EmbeddingTable::random(8, 4);
    let mut parts = Vec::new();
    let mut ok = true;
    for arch in Architecture::ALL {
        let cfg = NeuralConfig {
            architecture: arch,
            hidden: 16,
            filters: 16,
            dropout: 0.0,
            learning_rate: 1e-2,
            batch_size: 10,
            epochs: 500,
            seed: 2,
            ..Default::default()
        };
        let mut reached = None;
        let result = NeuralModel::new(cfg, &table, &vocab, &["target"]).and_then(|mut m| {
            train(&mut m, &data, &[], |epoch, model| {
                if reached.is_none() && model.mean_loss(&data)? < 0.05 {
                    reached = Some(epoch);
                }
                Ok(())
            })
        });
        if let Err(e) = result {
            return Check::error(e);
        }
        match reached {
            Some(e) => parts.push(format!("{arch} epoch {e}")),
            None => {
                ok = false;
                parts.push(format!("{arch} never"));
            }
        }
    }
    Check::new(ok, format!("loss < 0.05 reached: {}", parts.join(", ")))
}

fn main() {
    // `cargo test` passes filter arguments; `--list` must print nothing here.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, Option<Duration>, fn() -> Check); 9] = [
        ("dataset fidelity", Some(Duration::from_secs(1)), dataset_fidelity),
        ("attention target invariance", Some(Duration::from_secs(30)), theorem),
        ("gradient correctness", Some(Duration::from_secs(300)), gradients),
        ("metric oracle", None, metric_oracle),
        ("hashtag segmentation", None, segmentation),
        ("SVM sanity", None, svm_sanity),
        ("vote scheme", None, vote_scheme),
        ("desk-scale end-to-end", Some(Duration::from_secs(1800)), desk_scale),
        ("memorization", None, memorization),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.into_iter().enumerate() {
        let (check, elapsed) = timed(budget, run);
        let secs = elapsed.as_secs_f64();
        match check.status {
            Status::Pass => println!("criterion {} {name}: PASS ({secs:.2} s) {}", i + 1, check.detail),
            Status::Fail => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({secs:.2} s) {}", i + 1, check.detail);
            }
            Status::Unavailable(why) => println!("criterion {} {name}: FAIL (data unavailable: {why})", i + 1),
        }
    }
    if failed > 0 {
        eprintln!("{failed} runnable acceptance criteria failed");
        std::process::exit(1);
    }
}
