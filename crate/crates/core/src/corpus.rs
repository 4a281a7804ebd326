//! Corpus loading, validation and splitting for the SemEval-2016 Task 6A
//! tweet files and the MPCHI consumer-health sentence files.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};
use crate::label::StanceLabel;

/// One labeled text instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub topic: String,
    pub text: String,
    pub gold: StanceLabel,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicDataset {
    pub topic: String,
    pub train: Vec<Post>,
    pub test: Vec<Post>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub favor: usize,
    pub against: usize,
    pub none: usize,
}

impl ClassCounts {
    pub const fn new(favor: usize, against: usize, none: usize) -> Self {
        ClassCounts { favor, against, none }
    }

    pub fn of<'a>(labels: impl IntoIterator<Item = &'a StanceLabel>) -> Self {
        let mut counts = ClassCounts::default();
        for label in labels {
            *counts.get_mut(*label) += 1;
        }
        counts
    }

    pub fn get(&self, label: StanceLabel) -> usize {
        match label {
            StanceLabel::Favor => self.favor,
            StanceLabel::Against => self.against,
            StanceLabel::None => self.none,
        }
    }

    fn get_mut(&mut self, label: StanceLabel) -> &mut usize {
        match label {
            StanceLabel::Favor => &mut self.favor,
            StanceLabel::Against => &mut self.against,
            StanceLabel::None => &mut self.none,
        }
    }

    pub fn total(&self) -> usize {
        self.favor + self.against + self.none
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub train: ClassCounts,
    pub test: ClassCounts,
}

impl TopicDataset {
    pub fn new(topic: impl Into<String>) -> Self {
        TopicDataset {
            topic: topic.into(),
            ..Default::default()
        }
    }

    /// Checks id uniqueness per split, nonempty text and train/test disjointness.
    pub fn validate(&self) -> Result<()> {
        let mut train_ids = HashSet::new();
        for (split, posts) in [("train", &self.train), ("test", &self.test)] {
            let mut seen = HashSet::new();
            for post in posts.iter() {
                if post.id.trim().is_empty() {
                    return Err(Error::Validation(format!("{}/{split}: empty post id", self.topic)));
                }
                if post.text.trim().is_empty() {
                    return Err(Error::Validation(format!(
                        "{}/{split}: post {} has empty text",
                        self.topic, post.id
                    )));
                }
                if !seen.insert(post.id.as_str()) {
                    return Err(Error::Validation(format!(
                        "{}/{split}: duplicate post id {}",
                        self.topic, post.id
                    )));
                }
            }
            if split == "train" {
                train_ids = seen;
            } else if let Some(shared) = seen.intersection(&train_ids).next() {
                return Err(Error::Validation(format!(
                    "{}: post id {shared} appears in both train and test",
                    self.topic
                )));
            }
        }
        Ok(())
    }
}

pub fn dataset_stats(ds: &TopicDataset) -> DatasetStats {
    DatasetStats {
        train: ClassCounts::of(ds.train.iter().map(|p| &p.gold)),
        test: ClassCounts::of(ds.test.iter().map(|p| &p.gold)),
    }
}

/// Published per-topic class counts (train, test) for the ten benchmark topics.
pub const REFERENCE_COUNTS: [(&str, ClassCounts, ClassCounts); 10] = [
    ("AT", ClassCounts::new(92, 304, 117), ClassCounts::new(32, 160, 28)),
    ("CC", ClassCounts::new(212, 15, 168), ClassCounts::new(123, 11, 35)),
    ("FM", ClassCounts::new(210, 328, 126), ClassCounts::new(58, 183, 44)),
    ("HC", ClassCounts::new(112, 361, 166), ClassCounts::new(45, 172, 78)),
    ("LA", ClassCounts::new(105, 334, 164), ClassCounts::new(46, 189, 45)),
    ("MMR", ClassCounts::new(48, 61, 72), ClassCounts::new(24, 33, 21)),
    ("SC", ClassCounts::new(68, 51, 117), ClassCounts::new(35, 26, 42)),
    ("EC", ClassCounts::new(60, 118, 111), ClassCounts::new(33, 47, 44)),
    ("VC", ClassCounts::new(74, 52, 68), ClassCounts::new(37, 16, 31)),
    ("HRT", ClassCounts::new(33, 95, 44), ClassCounts::new(9, 41, 24)),
];

pub fn reference_counts(topic: &str) -> Option<DatasetStats> {
    REFERENCE_COUNTS
        .iter()
        .find(|(t, _, _)| *t == topic)
        .map(|&(_, train, test)| DatasetStats { train, test })
}

const TOPIC_TARGETS: [(&str, &str); 10] = [
    ("AT", "Atheism"),
    ("CC", "Climate Change is a Real Concern"),
    ("FM", "Feminist Movement"),
    ("HC", "Hillary Clinton"),
    ("LA", "Legalization of Abortion"),
    ("MMR", "MMR vaccination can cause autism"),
    ("EC", "E-cigarettes are safer than normal cigarettes"),
    ("HRT", "Women should take HRT post menopause"),
    ("VC", "Vitamin C prevents common cold"),
    ("SC", "Sun exposure leads to skin cancer"),
];

/// Short topic code for a SemEval target string; unknown targets map to themselves.
pub fn topic_code(target: &str) -> String {
    let target = target.trim();
    TOPIC_TARGETS
        .iter()
        .find(|(code, phrase)| phrase.eq_ignore_ascii_case(target) || code.eq_ignore_ascii_case(target))
        .map(|(code, _)| code.to_string())
        .unwrap_or_else(|| target.to_string())
}

/// The natural-language target (claim) for a topic code.
pub fn target_phrase(topic: &str) -> &str {
    TOPIC_TARGETS
        .iter()
        .find(|(code, _)| *code == topic)
        .map(|(_, phrase)| *phrase)
        .unwrap_or(topic)
}

const SEMEVAL_COLUMNS: [&str; 4] = ["ID", "Target", "Tweet", "Stance"];

/// Reads one SemEval tab-separated file (header `ID\tTarget\tTweet\tStance`).
pub fn read_semeval(path: &Path) -> Result<Vec<Post>> {
    let content = read_to_string(path)?;
    parse_semeval(&content, &path.display().to_string())
}

pub fn parse_semeval(content: &str, origin: &str) -> Result<Vec<Post>> {
    let mut lines = content.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let header: Vec<&str> = header.trim_start_matches('\u{feff}').split('\t').map(str::trim).collect();
    let mut column = [0usize; 4];
    for (slot, name) in column.iter_mut().zip(SEMEVAL_COLUMNS) {
        *slot = header
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::parse(origin, 1, format!("header lacks column {name}")))?;
    }
    let mut posts = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
        if fields.len() != header.len() {
            return Err(Error::parse(
                origin,
                line_no,
                format!("expected {} columns, found {}", header.len(), fields.len()),
            ));
        }
        let gold = fields[column[3]]
            .parse::<StanceLabel>()
            .map_err(|e| Error::Validation(format!("{origin}:{line_no}: {e}")))?;
        posts.push(Post {
            id: fields[column[0]].trim().to_string(),
            topic: topic_code(fields[column[1]]),
            text: fields[column[2]].to_string(),
            gold,
        });
    }
    Ok(posts)
}

/// Groups train and test posts per topic (sorted by topic code) and validates each dataset.
pub fn group_topics(train: Vec<Post>, test: Vec<Post>) -> Result<Vec<TopicDataset>> {
    let mut by_topic: BTreeMap<String, TopicDataset> = BTreeMap::new();
    for post in train {
        by_topic
            .entry(post.topic.clone())
            .or_insert_with(|| TopicDataset::new(post.topic.clone()))
            .train
            .push(post);
    }
    for post in test {
        by_topic
            .entry(post.topic.clone())
            .or_insert_with(|| TopicDataset::new(post.topic.clone()))
            .test
            .push(post);
    }
    let datasets: Vec<TopicDataset> = by_topic.into_values().collect();
    for ds in &datasets {
        ds.validate()?;
    }
    Ok(datasets)
}

/// Loads the official SemEval train and test files, grouped per topic.
pub fn load_semeval(train: &Path, test: &Path) -> Result<Vec<TopicDataset>> {
    group_topics(read_semeval(train)?, read_semeval(test)?)
}

/// Writes posts in the SemEval layout; reading the output back yields the same posts.
pub fn write_semeval<W: Write>(posts: &[Post], mut out: W) -> Result<()> {
    let io = |e| Error::io("<semeval writer>", e);
    writeln!(out, "{}", SEMEVAL_COLUMNS.join("\t")).map_err(io)?;
    for post in posts {
        if post.text.contains(['\t', '\n', '\r']) || post.id.contains(['\t', '\n']) {
            return Err(Error::Validation(format!(
                "post {} contains a tab or newline and cannot be written as SemEval",
                post.id
            )));
        }
        writeln!(out, "{}\t{}\t{}\t{}", post.id, target_phrase(&post.topic), post.text, post.gold).map_err(io)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    /// SemEval's overall train share is 2914 / (2914 + 1249), roughly 0.70.
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.7,
            seed: 13,
            stratified: true,
        }
    }
}

/// Deterministic (optionally stratified) train/test split.
///
/// Posts are sorted by id before shuffling, so the partition depends only on
/// the multiset of posts and the seed. Each class contributes
/// `round(fraction * n_class)` posts to train when stratified.
pub fn stratified_split(posts: &[Post], spec: &SplitSpec) -> Result<(Vec<Post>, Vec<Post>)> {
    if posts.is_empty() {
        return Err(Error::Validation("cannot split an empty post list".into()));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let mut sorted: Vec<&Post> = posts.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let groups: Vec<Vec<&Post>> = if spec.stratified {
        StanceLabel::ALL
            .iter()
            .map(|&label| sorted.iter().copied().filter(|p| p.gold == label).collect())
            .collect()
    } else {
        vec![sorted]
    };

    let mut train_ids = HashSet::new();
    for mut group in groups {
        group.shuffle(&mut rng);
        let n_train = (spec.train_fraction * group.len() as f64).round() as usize;
        train_ids.extend(group[..n_train].iter().map(|p| p.id.as_str()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut ordered: Vec<&Post> = posts.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    for post in ordered {
        if train_ids.contains(post.id.as_str()) {
            train.push(post.clone());
        } else {
            test.push(post.clone());
        }
    }
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Explicit per-post split assignment (`id<TAB>train|test`), overriding random splits.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitManifest {
    pub assignment: HashMap<String, Split>,
}

impl SplitManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let origin = path.display().to_string();
        Self::parse(&read_to_string(path)?, &origin)
    }

    pub fn parse(content: &str, origin: &str) -> Result<Self> {
        let mut assignment = HashMap::new();
        for (idx, line) in content.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(id), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::parse(origin, idx + 1, "expected `id<TAB>train|test`"));
            };
            let split = match split.to_lowercase().as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::parse(origin, idx + 1, format!("unknown split {other:?}"))),
            };
            if assignment.insert(id.to_string(), split).is_some() {
                return Err(Error::parse(origin, idx + 1, format!("duplicate id {id}")));
            }
        }
        Ok(SplitManifest { assignment })
    }

    pub fn apply(&self, posts: Vec<Post>) -> Result<(Vec<Post>, Vec<Post>)> {
        let known: HashSet<&str> = posts.iter().map(|p| p.id.as_str()).collect();
        if let Some(extra) = self.assignment.keys().find(|id| !known.contains(id.as_str())) {
            return Err(Error::Validation(format!("split manifest names unknown post {extra}")));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for post in posts {
            match self.assignment.get(&post.id) {
                Some(Split::Train) => train.push(post),
                Some(Split::Test) => test.push(post),
                None => {
                    return Err(Error::Validation(format!(
                        "split manifest does not assign post {}",
                        post.id
                    )))
                }
            }
        }
        Ok((train, test))
    }
}

/// Column layout of an MPCHI-style delimited file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpchiFormat {
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_text_column")]
    pub text_column: String,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    /// When absent, ids are `row-<n>` with `n` the 1-based data row.
    #[serde(default)]
    pub id_column: Option<String>,
}

fn default_delimiter() -> char {
    ','
}
fn default_text_column() -> String {
    "text".into()
}
fn default_label_column() -> String {
    "stance".into()
}

impl Default for MpchiFormat {
    fn default() -> Self {
        MpchiFormat {
            delimiter: default_delimiter(),
            text_column: default_text_column(),
            label_column: default_label_column(),
            id_column: None,
        }
    }
}

pub fn read_mpchi(path: &Path, format: &MpchiFormat, topic: &str) -> Result<Vec<Post>> {
    let content = read_to_string(path)?;
    parse_mpchi(&content, &path.display().to_string(), format, topic)
}

pub fn parse_mpchi(content: &str, origin: &str, format: &MpchiFormat, topic: &str) -> Result<Vec<Post>> {
    if !format.delimiter.is_ascii() {
        return Err(Error::Config(format!("delimiter {:?} must be ASCII", format.delimiter)));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter as u8)
        .has_headers(true)
        .flexible(false)
        .from_reader(content.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(origin, 1, e.to_string()))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::parse(origin, 1, format!("header lacks column {name}")))
    };
    let text_col = find(&format.text_column)?;
    let label_col = find(&format.label_column)?;
    let id_col = format.id_column.as_deref().map(find).transpose()?;

    let mut posts = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(row_idx + 2);
            Error::parse(origin, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(row_idx + 2);
        let gold = record[label_col]
            .parse::<StanceLabel>()
            .map_err(|e| Error::Validation(format!("{origin}:{line}: {e}")))?;
        let id = match id_col {
            Some(c) => record[c].trim().to_string(),
            None => format!("row-{}", row_idx + 1),
        };
        posts.push(Post {
            id,
            topic: topic.to_string(),
            text: record[text_col].to_string(),
            gold,
        });
    }
    Ok(posts)
}

/// Loads one MPCHI topic file and splits it, by manifest when given, else by `split`.
pub fn load_mpchi(
    path: &Path,
    format: &MpchiFormat,
    topic: &str,
    split: &SplitSpec,
    manifest: Option<&SplitManifest>,
) -> Result<TopicDataset> {
    let posts = read_mpchi(path, format, topic)?;
    split_posts(topic, posts, split, manifest)
}

pub fn split_posts(
    topic: &str,
    posts: Vec<Post>,
    split: &SplitSpec,
    manifest: Option<&SplitManifest>,
) -> Result<TopicDataset> {
    let (train, test) = match manifest {
        Some(m) => m.apply(posts)?,
        None if posts.is_empty() => (Vec::new(), Vec::new()),
        None => stratified_split(&posts, split)?,
    };
    let ds = TopicDataset {
        topic: topic.to_string(),
        train,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(id: &str, gold: StanceLabel) -> Post {
        Post {
            id: id.into(),
            topic: "T".into(),
            text: format!("text {id}"),
            gold,
        }
    }

    #[test]
    fn header_only_semeval_file_is_empty() {
        let posts = parse_semeval("ID\tTarget\tTweet\tStance\n", "f").unwrap();
        assert!(posts.is_empty());
        let ds = group_topics(posts, vec![]).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn trailing_space_label_is_accepted() {
        let content = "ID\tTarget\tTweet\tStance\n\
                       1\tAtheism\tGod is great #SemST\tAGAINST \n\
                       2\tAtheism\tReason wins #SemST\tFAVOR\n\
                       3\tAtheism\tNice weather #SemST\tNONE\n";
        let posts = parse_semeval(content, "f").unwrap();
        assert_eq!(posts.len(), 3);
        assert_eq!(posts[0].gold, StanceLabel::Against);
        assert_eq!(posts[0].topic, "AT");
        assert!(posts[0].text.ends_with("#SemST"));
    }

    #[test]
    fn wrong_column_count_reports_line() {
        let content = "ID\tTarget\tTweet\tStance\n1\tAtheism\tok\tNONE\n2\tAtheism\tmissing\n";
        match parse_semeval(content, "f") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_label_is_validation_error() {
        let content = "ID\tTarget\tTweet\tStance\n1\tAtheism\tok\tMAYBE\n";
        assert!(matches!(parse_semeval(content, "f"), Err(Error::Validation(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let train = vec![post("a", StanceLabel::Favor), post("a", StanceLabel::None)];
        assert!(group_topics(train, vec![]).is_err());
    }

    #[test]
    fn stratified_split_hits_class_quotas() {
        let mut posts = Vec::new();
        for i in 0..100 {
            let gold = match i {
                0..=49 => StanceLabel::Favor,
                50..=79 => StanceLabel::Against,
                _ => StanceLabel::None,
            };
            posts.push(post(&format!("p{i:03}"), gold));
        }
        let spec = SplitSpec {
            train_fraction: 0.8,
            seed: 7,
            stratified: true,
        };
        let (train, test) = stratified_split(&posts, &spec).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        assert_eq!(ClassCounts::of(train.iter().map(|p| &p.gold)), ClassCounts::new(40, 24, 16));
        let again = stratified_split(&posts, &spec).unwrap();
        assert_eq!(again.0, train);

        let mut reversed = posts.clone();
        reversed.reverse();
        assert_eq!(stratified_split(&reversed, &spec).unwrap().0, train);
    }

    #[test]
    fn split_fraction_must_be_open_interval() {
        let posts = vec![post("a", StanceLabel::Favor)];
        for f in [0.0, 1.0, 1.5] {
            let spec = SplitSpec {
                train_fraction: f,
                ..Default::default()
            };
            assert!(stratified_split(&posts, &spec).is_err());
        }
        assert!(stratified_split(&[], &SplitSpec::default()).is_err());
    }

    #[test]
    fn mpchi_small_files() {
        let fmt = MpchiFormat::default();
        let one = "text,stance\nMMR shots are safe,against\n";
        let ds = split_posts("MMR", parse_mpchi(one, "f", &fmt, "MMR").unwrap(), &SplitSpec::default(), None).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (1, 0));

        // 4 favor, 3 against, 3 none: round(2.8) + round(2.1) + round(2.1) = 7 train.
        let mut ten = String::from("text,stance\n");
        for (i, label) in ["favor"; 4].iter().chain(&["against"; 3]).chain(&["none"; 3]).enumerate() {
            ten.push_str(&format!("\"sentence {i}, with comma\",{label}\n"));
        }
        let posts = parse_mpchi(&ten, "f", &fmt, "MMR").unwrap();
        assert_eq!(posts[0].text, "sentence 0, with comma");
        let ds = split_posts("MMR", posts, &SplitSpec::default(), None).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (7, 3));
    }

    #[test]
    fn mpchi_configurable_columns_and_errors() {
        let fmt = MpchiFormat {
            delimiter: ';',
            text_column: "Sentence".into(),
            label_column: "Label".into(),
            id_column: Some("Id".into()),
        };
        let posts = parse_mpchi("Id;Sentence;Label\nx1;Sun is bad;FAVOR\n", "f", &fmt, "SC").unwrap();
        assert_eq!(posts[0].id, "x1");
        assert_eq!(posts[0].topic, "SC");
        assert!(matches!(
            parse_mpchi("Id;Sentence;Label\nx1;only two\n", "f", &fmt, "SC"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn manifest_overrides_split() {
        let posts = vec![post("a", StanceLabel::Favor), post("b", StanceLabel::None)];
        let m = SplitManifest::parse("a\ttest\nb\ttrain\n", "m").unwrap();
        let ds = split_posts("T", posts.clone(), &SplitSpec::default(), Some(&m)).unwrap();
        assert_eq!(ds.train[0].id, "b");
        assert_eq!(ds.test[0].id, "a");
        let partial = SplitManifest::parse("a\ttest\n", "m").unwrap();
        assert!(partial.apply(posts).is_err());
    }

    #[test]
    fn stats_on_empty_dataset_are_zero() {
        let stats = dataset_stats(&TopicDataset::new("AT"));
        assert_eq!(stats, DatasetStats::default());
        assert_eq!(reference_counts("HC").unwrap().test, ClassCounts::new(45, 172, 78));
        assert_eq!(reference_counts("CC").unwrap().train.total(), 395);
    }
}
