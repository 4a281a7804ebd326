use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use stance_core::autodiff::{primitive_grad_checks, GradCheckOptions};
use stance_core::config::{DatasetConfig, ModelKind, RunConfig};
use stance_core::corpus::{dataset_stats, reference_counts, TopicDataset};
use stance_core::evaluation::{
    pooled_overall, reference_rows, render_comparison, ErrorAnalysisReport, ReferenceDataset, TOTAL_COLUMN,
};
use stance_core::experiment::{write_file, Experiment};
use stance_core::external::import_predictions;
use stance_core::neural::{model_grad_checks, theorem_suite};
use stance_core::preprocess::Mode;
use stance_core::tune::GuardedDataset;
use stance_core::StanceLabel;

use crate::{Cli, Command, GlobalArgs};

const GRAD_TOLERANCE: f64 = 1e-5;
const ATTENTION_TOLERANCE: f64 = 1e-10;
const OUTPUT_TOLERANCE: f64 = 1e-12;

/// A check that ran to completion and did not hold.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(String);

/// 1 for bad input, 2 for failures while running.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 2;
    }
    match err.downcast_ref::<stance_core::Error>() {
        Some(e) if !e.is_validation() => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::GradCheck => grad_check(),
        Command::TheoremCheck { trials, posts } => theorem_check(trials, posts, g.seed.unwrap_or(13)),
        Command::Ingest => ingest(&experiment(g)?),
        Command::Stats => stats(&experiment(g)?),
        Command::Preprocess => preprocess(&experiment(g)?),
        Command::Train => train(&experiment(g)?, g),
        Command::Predict => predict(&experiment(g)?, g),
        Command::Evaluate => evaluate(&experiment(g)?, g),
        Command::Compare => compare(&experiment(g)?, g),
        Command::ErrorAnalysis => error_analysis(&experiment(g)?, g),
        Command::ImportExternal { path } => import_external(&experiment(g)?, g, &path),
        Command::Tune => tune(&experiment(g)?, g),
    }
}

fn experiment(g: &GlobalArgs) -> Result<Experiment> {
    let Some(path) = &g.config else {
        return Err(stance_core::Error::Validation("this command needs --config PATH".into()).into());
    };
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = g.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    if !g.topics.is_empty() {
        cfg.topics = g.topics.clone();
    }
    Ok(Experiment::new(cfg)?)
}

/// Models to train: `--model` when given, else the config's list.
fn model_kinds(exp: &Experiment, g: &GlobalArgs) -> Result<Vec<ModelKind>> {
    if g.models.is_empty() {
        return Ok(exp.config().models.clone());
    }
    Ok(g.models.iter().map(|m| m.parse()).collect::<stance_core::Result<_>>()?)
}

/// Names whose predictions are read: model keys or external names.
fn prediction_names(exp: &Experiment, g: &GlobalArgs) -> Vec<(String, String)> {
    if g.models.is_empty() {
        return exp
            .config()
            .models
            .iter()
            .map(|k| (k.key().to_string(), k.display_name().to_string()))
            .collect();
    }
    g.models
        .iter()
        .map(|m| match m.parse::<ModelKind>() {
            Ok(k) => (k.key().to_string(), k.display_name().to_string()),
            Err(_) => (m.clone(), m.clone()),
        })
        .collect()
}

fn gold(ds: &TopicDataset) -> Vec<StanceLabel> {
    ds.test.iter().map(|p| p.gold).collect()
}

fn write_stamped(exp: &Experiment, path: &Path, extra: &[(&'static str, String)], body: &str) -> Result<()> {
    write_file(path, &format!("{}{body}", exp.header_text(extra)))?;
    Ok(())
}

fn ingest(exp: &Experiment) -> Result<()> {
    for ds in exp.load_datasets()? {
        let path = exp.topic_dir(&ds.topic).join("dataset.json");
        let doc = serde_json::json!({
            "config_hash": exp.config_hash(),
            "seed": exp.seed(),
            "dataset": ds,
        });
        write_file(&path, &serde_json::to_string_pretty(&doc)?)?;
        println!("{}: {} train, {} test -> {}", ds.topic, ds.train.len(), ds.test.len(), path.display());
    }
    Ok(())
}

fn stats(exp: &Experiment) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "topic\ttrain_favor\ttrain_against\ttrain_none\ttest_favor\ttest_against\ttest_none")?;
    let check_reference = matches!(exp.config().dataset, DatasetConfig::Semeval { .. });
    for ds in exp.load_datasets()? {
        let s = dataset_stats(&ds);
        let (tr, te) = (s.train, s.test);
        write!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            ds.topic, tr.favor, tr.against, tr.none, te.favor, te.against, te.none
        )?;
        if check_reference {
            match reference_counts(&ds.topic) {
                Some(r) if r == s => out.push_str("\t(matches reference)"),
                Some(_) => out.push_str("\t(differs from reference)"),
                None => {}
            }
        }
        out.push('\n');
    }
    print!("{out}");
    write_stamped(exp, &exp.config().output_dir.join("stats.tsv"), &[], &out)
}

fn preprocess(exp: &Experiment) -> Result<()> {
    for ds in exp.load_datasets()? {
        let mut out = String::from("split\tpost_id\tmode\ttokens\n");
        for (split, posts) in [("train", &ds.train), ("test", &ds.test)] {
            for (mode, name) in [(Mode::Classical, "classical"), (Mode::Embedding, "embedding")] {
                for (post, prepared) in posts.iter().zip(exp.prepare(posts, mode)) {
                    writeln!(out, "{split}\t{}\t{name}\t{}", post.id, prepared.tokens.texts().join(" "))?;
                }
            }
        }
        let path = exp.topic_dir(&ds.topic).join("preprocessed.tsv");
        write_stamped(exp, &path, &[("topic", ds.topic.clone())], &out)?;
        println!("{} -> {}", ds.topic, path.display());
    }
    Ok(())
}

fn train(exp: &Experiment, g: &GlobalArgs) -> Result<()> {
    let kinds = model_kinds(exp, g)?;
    for ds in exp.load_datasets()? {
        let table = if kinds.iter().any(|k| k.is_neural()) {
            Some(exp.embedding_table(&[&ds.train, &ds.test], &[&ds.topic])?)
        } else {
            None
        };
        for &kind in &kinds {
            let files = exp
                .run_train(kind, &ds, table.as_ref())
                .with_context(|| format!("training {} on {}", kind.display_name(), ds.topic))?;
            println!("{} {}: {} artifacts in {}", ds.topic, kind.display_name(), files.len(), exp.model_dir(&ds.topic, kind.key()).display());
        }
    }
    Ok(())
}

fn predict(exp: &Experiment, g: &GlobalArgs) -> Result<()> {
    let kinds = model_kinds(exp, g)?;
    for ds in exp.load_datasets()? {
        for &kind in &kinds {
            let labels = exp
                .predict_from_artifacts(kind, &ds)
                .with_context(|| format!("predicting {} on {}", kind.display_name(), ds.topic))?;
            let path = exp.write_predictions(&ds, kind.key(), &labels)?;
            println!("{} {} -> {}", ds.topic, kind.display_name(), path.display());
        }
    }
    Ok(())
}

fn evaluate(exp: &Experiment, g: &GlobalArgs) -> Result<()> {
    let datasets = exp.load_datasets()?;
    for (name, display) in prediction_names(exp, g) {
        let mut per_topic = Vec::new();
        for ds in &datasets {
            let (report, preds) = exp.evaluate(ds, &name)?;
            println!("[{} {display}]\n{}", ds.topic, report.to_text());
            per_topic.push((preds, gold(ds)));
        }
        if per_topic.len() > 1 {
            let refs: Vec<(&[StanceLabel], &[StanceLabel])> = per_topic.iter().map(|(p, g)| (&p[..], &g[..])).collect();
            let pooled = pooled_overall(&refs)?;
            println!("[{TOTAL_COLUMN} {display}]\n{}", pooled.to_text());
        }
    }
    Ok(())
}

fn compare(exp: &Experiment, g: &GlobalArgs) -> Result<()> {
    let datasets = exp.load_datasets()?;
    let mut reports: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (name, display) in prediction_names(exp, g) {
        let mut row = BTreeMap::new();
        let mut pooled = Vec::new();
        for ds in &datasets {
            if !exp.predictions_path(&ds.topic, &name).exists() {
                eprintln!("note: no {display} predictions for {}", ds.topic);
                continue;
            }
            let preds = exp.read_predictions(ds, &name)?;
            let gold = gold(ds);
            row.insert(ds.topic.clone(), stance_core::evaluation::macro_f1_favor_against(&preds, &gold)?.official);
            pooled.push((preds, gold));
        }
        if row.is_empty() {
            continue;
        }
        if pooled.len() == datasets.len() && datasets.len() > 1 {
            let refs: Vec<(&[StanceLabel], &[StanceLabel])> = pooled.iter().map(|(p, g)| (&p[..], &g[..])).collect();
            row.insert(TOTAL_COLUMN.to_string(), pooled_overall(&refs)?.official);
        }
        reports.insert(display, row);
    }
    if reports.is_empty() {
        bail!(stance_core::Error::Validation("no predictions found; run `predict` or `import-external` first".into()));
    }
    let reference = if g.reference_rows {
        let dataset = match exp.config().dataset {
            DatasetConfig::Semeval { .. } => ReferenceDataset::SemEval,
            DatasetConfig::Mpchi { .. } => ReferenceDataset::Mpchi,
        };
        reference_rows(dataset)
    } else {
        Vec::new()
    };
    let table = render_comparison(&reports, &reference);
    let text = table.to_text();
    print!("{text}");
    write_stamped(exp, &exp.config().output_dir.join("comparison.txt"), &[], &text)?;
    write_stamped(exp, &exp.config().output_dir.join("comparison.tsv"), &[], &table.to_tsv())
}

fn error_analysis(exp: &Experiment, g: &GlobalArgs) -> Result<()> {
    let names = prediction_names(exp, g);
    let mut report = ErrorAnalysisReport::default();
    for ds in exp.load_datasets()? {
        let mut preds = BTreeMap::new();
        for (name, display) in &names {
            preds.insert(display.clone(), exp.read_predictions(&ds, name)?);
        }
        let ids: Vec<String> = ds.test.iter().map(|p| p.id.clone()).collect();
        let texts: Vec<String> = ds.test.iter().map(|p| p.text.clone()).collect();
        report.add_topic(&ds.topic, &ids, &texts, &gold(&ds), &preds)?;
    }
    let text = report.to_text();
    print!("{text}");
    write_stamped(exp, &exp.config().output_dir.join("error_analysis.txt"), &[], &text)
}

fn import_external(exp: &Experiment, g: &GlobalArgs, path: &Path) -> Result<()> {
    let [model] = g.models.as_slice() else {
        bail!(stance_core::Error::Validation("import-external needs exactly one --model NAME".into()));
    };
    let datasets = exp.load_datasets()?;
    if path.is_file() && datasets.len() != 1 {
        bail!(stance_core::Error::Validation(format!(
            "{} is a single file; select its topic with --topic",
            path.display()
        )));
    }
    for ds in &datasets {
        let file = if path.is_dir() { path.join(format!("{}.tsv", ds.topic)) } else { path.to_path_buf() };
        let set = import_predictions(&file, ds, model)?;
        let labels = set.aligned(ds)?;
        let out = exp.write_predictions(ds, model, &labels)?;
        println!("{} {model}: {} predictions from {} -> {}", ds.topic, labels.len(), set.provenance, out.display());
    }
    Ok(())
}

fn tune(exp: &Experiment, g: &GlobalArgs) -> Result<()> {
    let kinds = model_kinds(exp, g)?;
    for ds in exp.load_datasets()? {
        let guarded = GuardedDataset::new(&ds);
        let table = if kinds.iter().any(|k| k.is_neural()) {
            Some(exp.embedding_table(&[guarded.train()], &[&ds.topic])?)
        } else {
            None
        };
        for &kind in &kinds {
            let report = exp.tune(kind, &guarded, table.as_ref())?;
            let body = format!("{}test_reads={}\n", report.to_text(), guarded.log().test_reads());
            print!("[{} {}]\n{body}", ds.topic, kind.display_name());
            write_stamped(
                exp,
                &exp.model_dir(&ds.topic, kind.key()).join("tune.txt"),
                &[("model", kind.key().into()), ("topic", ds.topic.clone())],
                &body,
            )?;
        }
        if guarded.log().test_reads() != 0 {
            bail!(CheckFailed(format!("tuning on {} read the test split", ds.topic)));
        }
    }
    Ok(())
}

fn grad_check() -> Result<()> {
    let opts = GradCheckOptions::default();
    let mut results: Vec<(String, f64)> = primitive_grad_checks(opts)?.into_iter().map(|(n, e)| (n.to_string(), e)).collect();
    results.extend(model_grad_checks(opts)?);
    let mut failed = 0;
    for (name, err) in &results {
        let ok = *err <= GRAD_TOLERANCE;
        failed += usize::from(!ok);
        println!("{name:<20} {err:.3e} {}", if ok { "ok" } else { "FAIL" });
    }
    if failed > 0 {
        bail!(CheckFailed(format!("{failed} gradient checks exceed {GRAD_TOLERANCE:e}")));
    }
    Ok(())
}

fn theorem_check(trials: usize, posts: usize, seed: u64) -> Result<()> {
    let r = theorem_suite(trials, posts, seed)?;
    println!("trials = {trials}, posts per trial = {posts}, seed = {seed}");
    println!("max attention deviation = {:.3e}", r.max_attention_deviation);
    println!("max TAN/TAN- output deviation = {:.3e}", r.max_output_deviation);
    if r.max_attention_deviation > ATTENTION_TOLERANCE || r.max_output_deviation > OUTPUT_TOLERANCE {
        bail!(CheckFailed("attention invariance check failed".into()));
    }
    Ok(())
}
