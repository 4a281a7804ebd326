//! Official stance metric, comparison tables, and cross-model error analysis.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::StanceLabel;

/// Gold × predicted counts in the order Favor, Against, None.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 3]; 3],
}

impl ConfusionMatrix {
    pub fn from_labels(preds: &[StanceLabel], gold: &[StanceLabel]) -> Result<Self> {
        if preds.len() != gold.len() {
            return Err(Error::Validation(format!(
                "{} predictions for {} gold labels",
                preds.len(),
                gold.len()
            )));
        }
        let mut cm = ConfusionMatrix::default();
        for (&p, &g) in preds.iter().zip(gold) {
            cm.add(g, p);
        }
        Ok(cm)
    }

    pub fn add(&mut self, gold: StanceLabel, pred: StanceLabel) {
        self.counts[gold.index()][pred.index()] += 1;
    }

    pub fn get(&self, gold: StanceLabel, pred: StanceLabel) -> usize {
        self.counts[gold.index()][pred.index()]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for g in 0..3 {
            for p in 0..3 {
                self.counts[g][p] += other.counts[g][p];
            }
        }
    }

    pub fn true_positives(&self, class: StanceLabel) -> usize {
        self.get(class, class)
    }

    pub fn predicted(&self, class: StanceLabel) -> usize {
        (0..3).map(|g| self.counts[g][class.index()]).sum()
    }

    pub fn actual(&self, class: StanceLabel) -> usize {
        self.counts[class.index()].iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(cm: &ConfusionMatrix, class: StanceLabel) -> ClassMetrics {
    let tp = cm.true_positives(class);
    let precision = ratio(tp, cm.predicted(class));
    let recall = ratio(tp, cm.actual(class));
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        support: cm.actual(class),
    }
}

/// Per-class scores plus the official metric `(F1_favor + F1_against) / 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub favor: ClassMetrics,
    pub against: ClassMetrics,
    pub none: ClassMetrics,
    pub official: f64,
    pub confusion: ConfusionMatrix,
}

impl MetricReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        let favor = class_metrics(&confusion, StanceLabel::Favor);
        let against = class_metrics(&confusion, StanceLabel::Against);
        let none = class_metrics(&confusion, StanceLabel::None);
        MetricReport {
            official: (favor.f1 + against.f1) / 2.0,
            favor,
            against,
            none,
            confusion,
        }
    }

    pub fn class(&self, label: StanceLabel) -> &ClassMetrics {
        match label {
            StanceLabel::Favor => &self.favor,
            StanceLabel::Against => &self.against,
            StanceLabel::None => &self.none,
        }
    }

    /// `key = value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "official = {:.6}", self.official).unwrap();
        for label in StanceLabel::ALL {
            let m = self.class(label);
            let name = label.as_str().to_ascii_lowercase();
            writeln!(out, "{name}.precision = {:.6}", m.precision).unwrap();
            writeln!(out, "{name}.recall = {:.6}", m.recall).unwrap();
            writeln!(out, "{name}.f1 = {:.6}", m.f1).unwrap();
            writeln!(out, "{name}.support = {}", m.support).unwrap();
        }
        for gold in StanceLabel::ALL {
            let row: Vec<String> = StanceLabel::ALL.iter().map(|&p| self.confusion.get(gold, p).to_string()).collect();
            writeln!(out, "confusion.{} = {}", gold.as_str().to_ascii_lowercase(), row.join(" ")).unwrap();
        }
        writeln!(out, "total = {}", self.confusion.total()).unwrap();
        out
    }
}

/// Official metric with per-class details.
pub fn macro_f1_favor_against(preds: &[StanceLabel], gold: &[StanceLabel]) -> Result<MetricReport> {
    if gold.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty prediction list".into()));
    }
    Ok(MetricReport::from_confusion(ConfusionMatrix::from_labels(preds, gold)?))
}

/// Metric over the concatenation of several topics' predictions.
pub fn pooled_overall(per_topic: &[(&[StanceLabel], &[StanceLabel])]) -> Result<MetricReport> {
    if per_topic.is_empty() {
        return Err(Error::Validation("pooling needs at least one topic".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (preds, gold) in per_topic {
        cm.merge(&ConfusionMatrix::from_labels(preds, gold)?);
    }
    if cm.total() == 0 {
        return Err(Error::Validation("cannot evaluate an empty prediction list".into()));
    }
    Ok(MetricReport::from_confusion(cm))
}

/// Indices of posts where every model's label differs from gold.
pub fn all_models_missed(model_predictions: &BTreeMap<String, Vec<StanceLabel>>, gold: &[StanceLabel]) -> Result<Vec<usize>> {
    for (model, preds) in model_predictions {
        if preds.len() != gold.len() {
            return Err(Error::Validation(format!(
                "model `{model}` has {} predictions for {} posts",
                preds.len(),
                gold.len()
            )));
        }
    }
    Ok((0..gold.len())
        .filter(|&i| model_predictions.values().all(|p| p[i] != gold[i]))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MissedPost {
    pub post_id: String,
    pub text: String,
    pub gold: StanceLabel,
    pub predictions: BTreeMap<String, StanceLabel>,
}

/// Posts no evaluated model labeled correctly, grouped by topic.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ErrorAnalysisReport {
    pub models: Vec<String>,
    pub topics: BTreeMap<String, Vec<MissedPost>>,
}

impl ErrorAnalysisReport {
    /// Adds one topic; `ids`, `texts` and `gold` are aligned with every prediction list.
    pub fn add_topic(
        &mut self,
        topic: &str,
        ids: &[String],
        texts: &[String],
        gold: &[StanceLabel],
        model_predictions: &BTreeMap<String, Vec<StanceLabel>>,
    ) -> Result<()> {
        if ids.len() != gold.len() || texts.len() != gold.len() {
            return Err(Error::Validation("ids, texts and gold labels are misaligned".into()));
        }
        for m in model_predictions.keys() {
            if !self.models.contains(m) {
                self.models.push(m.clone());
            }
        }
        self.models.sort();
        let missed = all_models_missed(model_predictions, gold)?;
        let posts = missed
            .into_iter()
            .map(|i| MissedPost {
                post_id: ids[i].clone(),
                text: texts[i].clone(),
                gold: gold[i],
                predictions: model_predictions.iter().map(|(m, p)| (m.clone(), p[i])).collect(),
            })
            .collect();
        self.topics.insert(topic.to_string(), posts);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.topics.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "models = {}", self.models.join(", ")).unwrap();
        writeln!(out, "missed = {}", self.len()).unwrap();
        for (topic, posts) in &self.topics {
            writeln!(out, "\n[{topic}] {} posts", posts.len()).unwrap();
            for p in posts {
                let preds: Vec<String> = p.predictions.iter().map(|(m, l)| format!("{m}={l}")).collect();
                writeln!(out, "{}\tgold={}\t{}\t{}", p.post_id, p.gold, preds.join(" "), p.text).unwrap();
            }
        }
        out
    }
}

pub const TOTAL_COLUMN: &str = "TOTAL";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub model: String,
    /// True for values quoted from published results rather than computed here.
    pub reference: bool,
    pub cells: Vec<Option<f64>>,
}

/// Models × topics table of official metric values.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn new(columns: Vec<String>) -> Self {
        ComparisonTable {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn add_row(&mut self, model: &str, reference: bool, values: &BTreeMap<String, f64>) {
        let cells = self.columns.iter().map(|c| values.get(c).copied()).collect();
        self.rows.push(ComparisonRow {
            model: model.to_string(),
            reference,
            cells,
        });
    }

    /// Row index of the highest value per column (first row wins ties).
    pub fn best_per_column(&self) -> Vec<Option<usize>> {
        (0..self.columns.len())
            .map(|c| {
                let mut best: Option<(usize, f64)> = None;
                for (r, row) in self.rows.iter().enumerate() {
                    if let Some(v) = row.cells[c] {
                        if best.is_none_or(|(_, b)| v > b) {
                            best = Some((r, v));
                        }
                    }
                }
                best.map(|(r, _)| r)
            })
            .collect()
    }

    fn row_label(row: &ComparisonRow) -> String {
        if row.reference {
            format!("{} (reported)", row.model)
        } else {
            row.model.clone()
        }
    }

    /// Aligned text; best value per column marked with `*`, missing cells as `—`.
    pub fn to_text(&self) -> String {
        let best = self.best_per_column();
        let labels: Vec<String> = self.rows.iter().map(Self::row_label).collect();
        let first = labels.iter().map(|l| l.chars().count()).chain(["Model".len()]).max().unwrap_or(5);
        let width = self.columns.iter().map(|c| c.len()).chain([6]).max().unwrap_or(6) + 1;
        let mut out = String::new();
        write!(out, "{:<first$}", "Model").unwrap();
        for c in &self.columns {
            write!(out, "  {c:>width$}").unwrap();
        }
        out.push('\n');
        for (r, row) in self.rows.iter().enumerate() {
            write!(out, "{:<first$}", labels[r]).unwrap();
            for (c, cell) in row.cells.iter().enumerate() {
                let text = match cell {
                    Some(v) if best[c] == Some(r) => format!("*{v:.3}"),
                    Some(v) => format!("{v:.3}"),
                    None => "—".to_string(),
                };
                let pad = width.saturating_sub(text.chars().count());
                write!(out, "  {}{}", " ".repeat(pad), text).unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Tab-separated values with a `best` marker column list.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("model\treference");
        for c in &self.columns {
            write!(out, "\t{c}").unwrap();
        }
        out.push('\n');
        for row in &self.rows {
            write!(out, "{}\t{}", row.model, row.reference).unwrap();
            for cell in &row.cells {
                match cell {
                    Some(v) => write!(out, "\t{v:.6}").unwrap(),
                    None => out.push('\t'),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Builds a comparison table from per-model, per-column official metrics.
/// Columns are the union of topics in sorted order with TOTAL last.
pub fn render_comparison(reports: &BTreeMap<String, BTreeMap<String, f64>>, reference_rows: &[(&str, Vec<(&str, f64)>)]) -> ComparisonTable {
    let mut topics: Vec<String> = reports
        .values()
        .flat_map(|m| m.keys().cloned())
        .filter(|k| k != TOTAL_COLUMN)
        .collect();
    topics.sort();
    topics.dedup();
    let has_total = reports.values().any(|m| m.contains_key(TOTAL_COLUMN)) || !reference_rows.is_empty();
    if has_total {
        topics.push(TOTAL_COLUMN.to_string());
    }
    let mut table = ComparisonTable::new(topics);
    for (model, values) in reports {
        table.add_row(model, false, values);
    }
    for (model, values) in reference_rows {
        let map: BTreeMap<String, f64> = values.iter().map(|&(k, v)| (k.to_string(), v)).collect();
        table.add_row(model, true, &map);
    }
    table
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferenceDataset {
    SemEval,
    Mpchi,
}

/// Published official-metric values per model and topic.
pub fn reference_rows(dataset: ReferenceDataset) -> Vec<(&'static str, Vec<(&'static str, f64)>)> {
    let (topics, rows): (&[&str], &[(&str, [f64; 6])]) = match dataset {
        ReferenceDataset::SemEval => (
            &["AT", "CC", "LA", "FM", "HC", TOTAL_COLUMN],
            &[
                ("TAN", [0.628, 0.430, 0.567, 0.590, 0.728, 0.690]),
                ("TAN-", [0.638, 0.440, 0.572, 0.542, 0.724, 0.692]),
                ("LSTM", [0.629, 0.429, 0.628, 0.571, 0.611, 0.687]),
                ("SEN", [0.590, 0.39, 0.575, 0.510, 0.565, 0.630]),
                ("CNN", [0.641, 0.445, 0.684, 0.552, 0.675, 0.706]),
                ("BERT", [0.743, 0.446, 0.657, 0.650, 0.713, 0.751]),
                ("Two-step SVM", [0.410, 0.419, 0.436, 0.496, 0.488, 0.631]),
            ],
        ),
        ReferenceDataset::Mpchi => (
            &["HRT", "EC", "VC", "SC", "MMR", TOTAL_COLUMN],
            &[
                ("TAN", [0.347, 0.580, 0.421, 0.507, 0.671, 0.586]),
                ("TAN-", [0.569, 0.583, 0.578, 0.468, 0.608, 0.589]),
                ("LSTM", [0.464, 0.609, 0.592, 0.575, 0.665, 0.631]),
                ("SEN", [0.480, 0.605, 0.405, 0.445, 0.615, 0.540]),
                ("CNN", [0.359, 0.539, 0.524, 0.252, 0.524, 0.551]),
                ("BERT", [0.669, 0.780, 0.647, 0.769, 0.782, 0.756]),
                ("Two-step SVM", [0.470, 0.297, 0.409, 0.293, 0.455, 0.519]),
            ],
        ),
    };
    rows.iter()
        .map(|(m, vals)| (*m, topics.iter().copied().zip(vals.iter().copied()).collect()))
        .collect()
}

/// Published SemEval TOTAL values before and after the tweet preprocessing.
pub const PREPROCESSING_REFERENCE: [(&str, f64, f64); 3] = [("TAN", 0.6879, 0.690), ("LSTM", 0.6321, 0.687), ("CNN", 0.6733, 0.706)];

/// `after - before` for every metric.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricDelta {
    pub official: f64,
    pub favor_f1: f64,
    pub against_f1: f64,
    pub none_f1: f64,
    pub favor_precision: f64,
    pub favor_recall: f64,
    pub against_precision: f64,
    pub against_recall: f64,
}

pub fn preprocessing_effect(before: &MetricReport, after: &MetricReport) -> MetricDelta {
    MetricDelta {
        official: after.official - before.official,
        favor_f1: after.favor.f1 - before.favor.f1,
        against_f1: after.against.f1 - before.against.f1,
        none_f1: after.none.f1 - before.none.f1,
        favor_precision: after.favor.precision - before.favor.precision,
        favor_recall: after.favor.recall - before.favor.recall,
        against_precision: after.against.precision - before.against.precision,
        against_recall: after.against.recall - before.against.recall,
    }
}

/// Writes `post_id<TAB>label` lines, preceded by `# key=value` header lines.
pub fn write_predictions<W: Write>(out: &mut W, header: &[(&str, String)], ids: &[String], labels: &[StanceLabel]) -> Result<()> {
    if ids.len() != labels.len() {
        return Err(Error::Validation("ids and labels are misaligned".into()));
    }
    let io = |e| Error::io("<predictions>", e);
    for (k, v) in header {
        writeln!(out, "# {k}={v}").map_err(io)?;
    }
    for (id, l) in ids.iter().zip(labels) {
        writeln!(out, "{id}\t{l}").map_err(io)?;
    }
    Ok(())
}

/// Parses a predictions file, skipping blank and `#` lines.
pub fn parse_predictions(content: &str, origin: &str) -> Result<Vec<(String, StanceLabel)>> {
    let mut rows = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((id, label)) = line.split_once('\t') else {
            return Err(Error::parse(origin, i + 1, "expected `post_id<TAB>label`"));
        };
        let label: StanceLabel = label
            .parse()
            .map_err(|e: Error| Error::parse(origin, i + 1, e.to_string()))?;
        rows.push((id.trim().to_string(), label));
    }
    Ok(rows)
}

pub fn read_predictions(path: &Path) -> Result<Vec<(String, StanceLabel)>> {
    parse_predictions(&crate::error::read_to_string(path)?, &path.display().to_string())
}
