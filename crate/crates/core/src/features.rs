//! Sparse feature extraction for the linear SVM models.
//!
//! Vocabulary-backed blocks (BoW, n-grams, stance vector) are fitted on the
//! training split and frozen; transforming unseen text never grows them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_to_string, Error, Result};
use crate::preprocess::{porter_stem, TokenSequence};
use crate::resources;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    keys: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(keys: Vec<String>) -> Self {
        let index = keys.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        Vocabulary { keys, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.keys
    }
}

impl Vocabulary {
    /// Builds a vocabulary from keys in first-seen order.
    pub fn fit<I, S>(keys: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary::default();
        for key in keys {
            let key = key.into();
            if !vocab.index.contains_key(&key) {
                vocab.index.insert(key.clone(), vocab.keys.len());
                vocab.keys.push(key);
            }
        }
        vocab
    }

    pub fn get(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }
}

/// Sparse vector with strictly increasing indices and no explicit zeros.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    dim: usize,
    entries: Vec<(usize, f64)>,
}

impl FeatureVector {
    pub fn zeros(dim: usize) -> Self {
        FeatureVector { dim, entries: Vec::new() }
    }

    /// Sums duplicate indices, sorts and drops zeros.
    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for (i, v) in pairs {
            if i >= dim {
                return Err(Error::Shape(format!("feature index {i} out of range for dimension {dim}")));
            }
            *acc.entry(i).or_insert(0.0) += v;
        }
        Ok(FeatureVector {
            dim,
            entries: acc.into_iter().filter(|&(_, v)| v != 0.0).collect(),
        })
    }

    pub fn from_dense(values: &[f64]) -> Self {
        FeatureVector {
            dim: values.len(),
            entries: values.iter().copied().enumerate().filter(|&(_, v)| v != 0.0).collect(),
        }
    }

    fn counts(dim: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for i in indices {
            *acc.entry(i).or_insert(0.0) += 1.0;
        }
        FeatureVector {
            dim,
            entries: acc.into_iter().collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn l2_normalized(&self) -> Self {
        let n = self.norm();
        if n == 0.0 {
            return self.clone();
        }
        FeatureVector {
            dim: self.dim,
            entries: self.entries.iter().map(|&(i, v)| (i, v / n)).collect(),
        }
    }

    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| v * dense[i]).sum()
    }

    /// Concatenates blocks, shifting each block's indices by the preceding dimensions.
    pub fn concat(blocks: &[FeatureVector]) -> Self {
        let mut offset = 0;
        let mut entries = Vec::new();
        for b in blocks {
            entries.extend(b.entries.iter().map(|&(i, v)| (i + offset, v)));
            offset += b.dim;
        }
        FeatureVector { dim: offset, entries }
    }
}

/// Term-frequency counts of tokens known to `vocab`; unknown tokens are skipped.
pub fn bow_unigrams<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> FeatureVector {
    FeatureVector::counts(vocab.len(), tokens.iter().filter_map(|t| vocab.get(t.as_ref())))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NgramLevel {
    Word,
    Char,
}

/// Contiguous n-gram keys; char level runs over the space-joined token string.
pub fn ngram_keys<S: AsRef<str>>(tokens: &[S], n: usize, level: NgramLevel) -> Vec<String> {
    if n == 0 {
        return Vec::new();
    }
    match level {
        NgramLevel::Word => tokens
            .windows(n)
            .map(|w| w.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" "))
            .collect(),
        NgramLevel::Char => {
            let joined: Vec<char> = tokens
                .iter()
                .map(AsRef::as_ref)
                .collect::<Vec<_>>()
                .join(" ")
                .chars()
                .collect();
            joined.windows(n).map(|w| w.iter().collect()).collect()
        }
    }
}

pub fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize, level: NgramLevel, vocab: &Vocabulary) -> FeatureVector {
    let keys = ngram_keys(tokens, n, level);
    FeatureVector::counts(vocab.len(), keys.iter().filter_map(|k| vocab.get(k)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoarsePosTag {
    Noun,
    Verb,
    Adjective,
    Adverb,
    Other,
}

impl CoarsePosTag {
    pub fn is_content(self) -> bool {
        self != CoarsePosTag::Other
    }
}

impl FromStr for CoarsePosTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "noun" | "n" => Ok(CoarsePosTag::Noun),
            "verb" | "v" => Ok(CoarsePosTag::Verb),
            "adjective" | "adj" | "a" => Ok(CoarsePosTag::Adjective),
            "adverb" | "adv" | "r" => Ok(CoarsePosTag::Adverb),
            "other" | "o" => Ok(CoarsePosTag::Other),
            other => Err(Error::Validation(format!("unknown POS tag {other:?}"))),
        }
    }
}

const CLOSED_CLASS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "i", "me", "my", "mine", "we", "us", "our", "ours", "you",
    "your", "yours", "he", "him", "his", "she", "her", "hers", "it", "its", "they", "them", "their", "theirs",
    "and", "or", "but", "nor", "so", "yet", "if", "because", "although", "while", "of", "in", "on", "at", "by",
    "for", "with", "about", "against", "between", "into", "through", "during", "before", "after", "above",
    "below", "to", "from", "up", "down", "over", "under", "than", "as", "be", "is", "am", "are", "was", "were",
    "been", "being", "do", "does", "did", "have", "has", "had", "will", "would", "shall", "should", "can",
    "could", "may", "might", "must", "not", "no", "who", "whom", "whose", "which", "what", "there", "here",
];

/// Dictionary-first coarse tagger with suffix fallbacks.
#[derive(Clone, Debug, Default)]
pub struct PosTagger {
    dictionary: HashMap<String, CoarsePosTag>,
}

impl PosTagger {
    pub fn new(dictionary: HashMap<String, CoarsePosTag>) -> Self {
        PosTagger { dictionary }
    }

    /// `word<TAB>tag` per line.
    pub fn parse(content: &str, origin: &str) -> Result<Self> {
        let mut dictionary = HashMap::new();
        for (idx, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, tag) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(origin, idx + 1, "expected `word<TAB>tag`"))?;
            let tag = tag.parse().map_err(|e: Error| Error::parse(origin, idx + 1, e.to_string()))?;
            dictionary.insert(word.trim().to_lowercase(), tag);
        }
        Ok(PosTagger { dictionary })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?, &path.display().to_string())
    }

    pub fn tag(&self, token: &str) -> CoarsePosTag {
        if let Some(&tag) = self.dictionary.get(token) {
            return tag;
        }
        if !token.chars().any(char::is_alphabetic) || token.starts_with('<') {
            return CoarsePosTag::Other;
        }
        if CLOSED_CLASS.contains(&token) {
            return CoarsePosTag::Other;
        }
        if token.ends_with("ly") {
            CoarsePosTag::Adverb
        } else if ["ous", "ful", "ive"].iter().any(|s| token.ends_with(s)) {
            CoarsePosTag::Adjective
        } else if token.ends_with("ing") || token.ends_with("ed") {
            CoarsePosTag::Verb
        } else {
            CoarsePosTag::Noun
        }
    }
}

pub fn coarse_pos_tag<S: AsRef<str>>(tokens: &[S], tagger: &PosTagger) -> Vec<CoarsePosTag> {
    tokens.iter().map(|t| tagger.tag(t.as_ref())).collect()
}

/// BoW restricted to tokens tagged noun, verb, adjective or adverb.
pub fn stance_vector<S: AsRef<str>>(tokens: &[S], tags: &[CoarsePosTag], vocab: &Vocabulary) -> Result<FeatureVector> {
    Ok(bow_unigrams(&content_tokens(tokens, tags)?, vocab))
}

fn content_tokens<'a, S: AsRef<str>>(tokens: &'a [S], tags: &[CoarsePosTag]) -> Result<Vec<&'a str>> {
    if tokens.len() != tags.len() {
        return Err(Error::Shape(format!(
            "{} tokens but {} POS tags",
            tokens.len(),
            tags.len()
        )));
    }
    Ok(tokens
        .iter()
        .zip(tags)
        .filter(|(_, t)| t.is_content())
        .map(|(w, _)| w.as_ref())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Strong,
    Weak,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

#[derive(Clone, Debug, Default)]
pub struct SubjectivityLexicon {
    entries: HashMap<String, (Strength, Polarity)>,
}

impl SubjectivityLexicon {
    pub fn from_entries<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, Strength, Polarity)>,
        S: AsRef<str>,
    {
        SubjectivityLexicon {
            entries: entries
                .into_iter()
                .map(|(w, s, p)| (w.as_ref().to_lowercase(), (s, p)))
                .collect(),
        }
    }

    /// `word<TAB>strength<TAB>polarity` per line (strength strong|weak; polarity positive|negative|neutral).
    pub fn parse(content: &str, origin: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (idx, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            let [word, strength, polarity] = cols[..] else {
                return Err(Error::parse(origin, idx + 1, "expected `word<TAB>strength<TAB>polarity`"));
            };
            let strength = match strength.to_lowercase().as_str() {
                "strong" | "strongsubj" => Strength::Strong,
                "weak" | "weaksubj" => Strength::Weak,
                other => return Err(Error::parse(origin, idx + 1, format!("unknown strength {other:?}"))),
            };
            let polarity = match polarity.to_lowercase().as_str() {
                "positive" | "pos" => Polarity::Positive,
                "negative" | "neg" => Polarity::Negative,
                "neutral" | "both" => Polarity::Neutral,
                other => return Err(Error::parse(origin, idx + 1, format!("unknown polarity {other:?}"))),
            };
            entries.insert(word.to_lowercase(), (strength, polarity));
        }
        Ok(SubjectivityLexicon { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?, &path.display().to_string())
    }

    pub fn get(&self, word: &str) -> Option<(Strength, Polarity)> {
        self.entries.get(word).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Positive when positive hits outnumber negative hits, Negative for the reverse, else Neutral.
pub fn sentiment_polarity<S: AsRef<str>>(tokens: &[S], lex: &SubjectivityLexicon) -> Polarity {
    let (mut pos, mut neg) = (0usize, 0usize);
    for t in tokens {
        match lex.get(t.as_ref()) {
            Some((_, Polarity::Positive)) => pos += 1,
            Some((_, Polarity::Negative)) => neg += 1,
            _ => {}
        }
    }
    match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => Polarity::Positive,
        std::cmp::Ordering::Less => Polarity::Negative,
        std::cmp::Ordering::Equal => Polarity::Neutral,
    }
}

/// One-hot over [positive, negative, neutral].
pub fn sentiment_feature<S: AsRef<str>>(tokens: &[S], lex: &SubjectivityLexicon) -> FeatureVector {
    let slot = match sentiment_polarity(tokens, lex) {
        Polarity::Positive => 0,
        Polarity::Negative => 1,
        Polarity::Neutral => 2,
    };
    FeatureVector::counts(3, [slot])
}

/// Counts over [strong-pos, strong-neg, weak-pos, weak-neg].
pub fn subjectivity_features<S: AsRef<str>>(tokens: &[S], lex: &SubjectivityLexicon) -> FeatureVector {
    let slots = tokens.iter().filter_map(|t| match lex.get(t.as_ref())? {
        (Strength::Strong, Polarity::Positive) => Some(0),
        (Strength::Strong, Polarity::Negative) => Some(1),
        (Strength::Weak, Polarity::Positive) => Some(2),
        (Strength::Weak, Polarity::Negative) => Some(3),
        (_, Polarity::Neutral) => None,
    });
    FeatureVector::counts(4, slots)
}

const EMOTICONS: &[&str] = &[
    ":)", ":-)", ":(", ":-(", ":d", ":-d", ";)", ";-)", ":p", ":-p", ":'(", ":/", ":-/", ":o", ":|", "=)", "=(",
    "<3", "xd", ":*", "^_^", "-_-",
];

/// [hashtags, mentions, URL present, emoticons, question mark present, exclamation marks],
/// computed on the raw text.
pub fn surface_features(raw_text: &str) -> FeatureVector {
    let mut hashtags = 0.0;
    let mut mentions = 0.0;
    let mut url = 0.0;
    let mut emoticons = 0.0;
    for chunk in raw_text.split_whitespace() {
        let lower = chunk.to_lowercase();
        if lower.starts_with("http://") || lower.starts_with("https://") || lower.starts_with("www.") {
            url = 1.0;
            continue;
        }
        if EMOTICONS.contains(&lower.as_str()) {
            emoticons += 1.0;
        }
        let chars: Vec<char> = chunk.chars().collect();
        for (i, &c) in chars.iter().enumerate() {
            let starts_word = chars.get(i + 1).is_some_and(|n| n.is_alphanumeric() || *n == '_');
            let boundary = i == 0 || !(chars[i - 1].is_alphanumeric() || chars[i - 1] == '_');
            if starts_word && boundary {
                match c {
                    '#' => hashtags += 1.0,
                    '@' => mentions += 1.0,
                    _ => {}
                }
            }
        }
    }
    let question = if raw_text.contains('?') { 1.0 } else { 0.0 };
    let exclamations = raw_text.matches('!').count() as f64;
    FeatureVector::from_dense(&[hashtags, mentions, url, emoticons, question, exclamations])
}

/// Content words of a target phrase (lowercase, alphabetic, not stopwords).
pub fn target_terms(target: &str) -> Vec<String> {
    let stop = resources::stopwords();
    let mut out: Vec<String> = Vec::new();
    for w in target.split(|c: char| !c.is_alphanumeric()) {
        let w = w.to_lowercase();
        if !w.is_empty() && !stop.contains(&w) && !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

/// Binary presence of each target term (matched on surface form or Porter stem).
pub fn target_presence(tokens: &TokenSequence, terms: &[String]) -> FeatureVector {
    let slots = terms.iter().enumerate().filter_map(|(i, term)| {
        let stem = porter_stem(term);
        tokens
            .tokens
            .iter()
            .any(|t| t.surface == *term || t.text == stem || porter_stem(&t.surface) == stem)
            .then_some(i)
    });
    FeatureVector::counts(terms.len(), slots)
}

/// One feature block of a pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpec {
    StanceVector,
    Sentiment,
    Bow,
    Subjectivity,
    Surface,
    WordNgrams { min: usize, max: usize },
    CharNgrams { min: usize, max: usize },
    TargetTerms,
}

impl FromStr for FeatureSpec {
    type Err = Error;

    /// Names: `stance_vector`, `sentiment`, `bow`, `subjectivity`, `surface`,
    /// `target_terms`, `word_ngrams:MIN-MAX`, `char_ngrams:MIN-MAX`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, range) = match s.split_once(':') {
            Some((n, r)) => (n.trim(), Some(r.trim())),
            None => (s.trim(), None),
        };
        let parse_range = |default: (usize, usize)| -> Result<(usize, usize)> {
            let Some(r) = range else { return Ok(default) };
            let (a, b) = r.split_once('-').unwrap_or((r, r));
            let a: usize = a.parse().map_err(|_| Error::Config(format!("bad n-gram range in {s:?}")))?;
            let b: usize = b.parse().map_err(|_| Error::Config(format!("bad n-gram range in {s:?}")))?;
            if a == 0 || b < a {
                return Err(Error::Config(format!("bad n-gram range in {s:?}")));
            }
            Ok((a, b))
        };
        let spec = match name {
            "stance_vector" => FeatureSpec::StanceVector,
            "sentiment" => FeatureSpec::Sentiment,
            "bow" => FeatureSpec::Bow,
            "subjectivity" => FeatureSpec::Subjectivity,
            "surface" => FeatureSpec::Surface,
            "target_terms" => FeatureSpec::TargetTerms,
            "word_ngrams" => {
                let (min, max) = parse_range((1, 3))?;
                FeatureSpec::WordNgrams { min, max }
            }
            "char_ngrams" => {
                let (min, max) = parse_range((2, 4))?;
                FeatureSpec::CharNgrams { min, max }
            }
            other => return Err(Error::Config(format!("unknown feature {other:?}"))),
        };
        if range.is_some() && !matches!(spec, FeatureSpec::WordNgrams { .. } | FeatureSpec::CharNgrams { .. }) {
            return Err(Error::Config(format!("feature {name:?} takes no range")));
        }
        Ok(spec)
    }
}

impl fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSpec::StanceVector => f.write_str("stance_vector"),
            FeatureSpec::Sentiment => f.write_str("sentiment"),
            FeatureSpec::Bow => f.write_str("bow"),
            FeatureSpec::Subjectivity => f.write_str("subjectivity"),
            FeatureSpec::Surface => f.write_str("surface"),
            FeatureSpec::TargetTerms => f.write_str("target_terms"),
            FeatureSpec::WordNgrams { min, max } => write!(f, "word_ngrams:{min}-{max}"),
            FeatureSpec::CharNgrams { min, max } => write!(f, "char_ngrams:{min}-{max}"),
        }
    }
}

pub fn parse_feature_set<S: AsRef<str>>(names: &[S]) -> Result<Vec<FeatureSpec>> {
    if names.is_empty() {
        return Err(Error::Config("feature set is empty".into()));
    }
    names.iter().map(|n| n.as_ref().parse()).collect()
}

/// stance vector + sentiment + unigram BoW.
pub fn sen_features() -> Vec<FeatureSpec> {
    vec![FeatureSpec::StanceVector, FeatureSpec::Sentiment, FeatureSpec::Bow]
}

/// Relevance stage of the two-step model.
pub fn two_step_stage1_features() -> Vec<FeatureSpec> {
    vec![FeatureSpec::Subjectivity, FeatureSpec::Surface]
}

/// Polarity stage of the two-step model (frame semantics excluded).
pub fn two_step_stage2_features() -> Vec<FeatureSpec> {
    vec![
        FeatureSpec::Subjectivity,
        FeatureSpec::WordNgrams { min: 1, max: 3 },
        FeatureSpec::CharNgrams { min: 2, max: 4 },
        FeatureSpec::TargetTerms,
    ]
}

/// A post ready for feature extraction: raw text plus its preprocessed tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPost {
    pub raw: String,
    pub tokens: TokenSequence,
}

#[derive(Clone, Copy, Debug)]
pub struct FeatureResources<'a> {
    pub subjectivity: &'a SubjectivityLexicon,
    pub tagger: &'a PosTagger,
}

impl Default for FeatureResources<'static> {
    fn default() -> Self {
        FeatureResources {
            subjectivity: resources::subjectivity_lexicon(),
            tagger: resources::pos_tagger(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Block {
    spec: FeatureSpec,
    vocab: Vocabulary,
}

/// A fitted, frozen feature pipeline: blocks concatenated at stable offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePipeline {
    blocks: Vec<Block>,
    target_terms: Vec<String>,
}

impl FeaturePipeline {
    /// Fits block vocabularies on training posts only.
    pub fn fit(specs: &[FeatureSpec], train: &[PreparedPost], target: &str, res: FeatureResources<'_>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("feature set is empty".into()));
        }
        let terms = target_terms(target);
        let blocks = specs
            .iter()
            .map(|&spec| {
                let keys: Vec<String> = train.iter().flat_map(|p| block_keys(spec, p, res)).collect();
                Block {
                    spec,
                    vocab: Vocabulary::fit(keys),
                }
            })
            .collect();
        Ok(FeaturePipeline {
            blocks,
            target_terms: terms,
        })
    }

    pub fn specs(&self) -> Vec<FeatureSpec> {
        self.blocks.iter().map(|b| b.spec).collect()
    }

    pub fn block_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| self.block_dim(b)).collect()
    }

    fn block_dim(&self, block: &Block) -> usize {
        match block.spec {
            FeatureSpec::Sentiment => 3,
            FeatureSpec::Subjectivity => 4,
            FeatureSpec::Surface => 6,
            FeatureSpec::TargetTerms => self.target_terms.len(),
            _ => block.vocab.len(),
        }
    }

    pub fn dim(&self) -> usize {
        self.block_dims().iter().sum()
    }

    pub fn transform(&self, post: &PreparedPost, res: FeatureResources<'_>) -> FeatureVector {
        let texts = post.tokens.texts();
        let surfaces = post.tokens.surfaces();
        let parts: Vec<FeatureVector> = self
            .blocks
            .iter()
            .map(|block| match block.spec {
                FeatureSpec::Bow => bow_unigrams(&texts, &block.vocab),
                FeatureSpec::StanceVector => {
                    let tags = coarse_pos_tag(&surfaces, res.tagger);
                    stance_vector(&texts, &tags, &block.vocab).expect("tags aligned with tokens")
                }
                FeatureSpec::Sentiment => sentiment_feature(&surfaces, res.subjectivity),
                FeatureSpec::Subjectivity => subjectivity_features(&surfaces, res.subjectivity),
                FeatureSpec::Surface => surface_features(&post.raw),
                FeatureSpec::TargetTerms => target_presence(&post.tokens, &self.target_terms),
                FeatureSpec::WordNgrams { min, max } => {
                    let keys: Vec<String> = (min..=max).flat_map(|n| ngram_keys(&texts, n, NgramLevel::Word)).collect();
                    bow_unigrams(&keys, &block.vocab)
                }
                FeatureSpec::CharNgrams { min, max } => {
                    let keys: Vec<String> = (min..=max).flat_map(|n| ngram_keys(&texts, n, NgramLevel::Char)).collect();
                    bow_unigrams(&keys, &block.vocab)
                }
            })
            .collect();
        FeatureVector::concat(&parts)
    }

    /// Stable digest of block specs, vocabularies and target terms.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("pipeline serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

fn block_keys(spec: FeatureSpec, post: &PreparedPost, res: FeatureResources<'_>) -> Vec<String> {
    let texts = post.tokens.texts();
    match spec {
        FeatureSpec::Bow => texts.iter().map(|s| s.to_string()).collect(),
        FeatureSpec::StanceVector => {
            let tags = coarse_pos_tag(&post.tokens.surfaces(), res.tagger);
            content_tokens(&texts, &tags)
                .expect("aligned")
                .into_iter()
                .map(str::to_string)
                .collect()
        }
        FeatureSpec::WordNgrams { min, max } => (min..=max).flat_map(|n| ngram_keys(&texts, n, NgramLevel::Word)).collect(),
        FeatureSpec::CharNgrams { min, max } => (min..=max).flat_map(|n| ngram_keys(&texts, n, NgramLevel::Char)).collect(),
        _ => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::Token;

    fn seq(words: &[&str]) -> TokenSequence {
        TokenSequence {
            tokens: words.iter().map(|w| Token::plain(*w)).collect(),
        }
    }

    #[test]
    fn bow_examples() {
        let vocab = Vocabulary::fit(["run", "fast"]);
        assert_eq!(bow_unigrams(&["run", "run", "fast"], &vocab).entries(), &[(0, 2.0), (1, 1.0)]);
        assert_eq!(bow_unigrams::<&str>(&[], &vocab).nnz(), 0);
        let v = bow_unigrams(&["zzz", "run"], &vocab);
        assert_eq!(v.entries(), &[(0, 1.0)]);
        assert_eq!(vocab.len(), 2);
    }

    #[test]
    fn ngram_examples() {
        assert_eq!(ngram_keys(&["a", "b", "c"], 2, NgramLevel::Word), ["a b", "b c"]);
        assert_eq!(ngram_keys(&["abcd"], 3, NgramLevel::Char), ["abc", "bcd"]);
        assert!(ngram_keys(&["a", "b", "c"], 5, NgramLevel::Word).is_empty());
        assert_eq!(ngram_keys(&["ab", "c"], 3, NgramLevel::Char), ["ab ", "b c"]);
    }

    #[test]
    fn stance_vector_filters_content_words() {
        use CoarsePosTag::*;
        let vocab = Vocabulary::fit(["vaccines", "cause", "autism", "the"]);
        let v = stance_vector(&["vaccines", "cause", "autism", "the"], &[Noun, Verb, Noun, Other], &vocab).unwrap();
        assert_eq!(v.entries(), &[(0, 1.0), (1, 1.0), (2, 1.0)]);
        assert_eq!(stance_vector(&["the", "a"], &[Other, Other], &vocab).unwrap().nnz(), 0);
        let v = stance_vector(&["autism", "autism"], &[Noun, Noun], &vocab).unwrap();
        assert_eq!(v.entries(), &[(2, 2.0)]);
        assert!(stance_vector(&["x"], &[], &vocab).is_err());
    }

    #[test]
    fn sentiment_and_subjectivity() {
        let lex = SubjectivityLexicon::from_entries([
            ("good", Strength::Weak, Polarity::Positive),
            ("great", Strength::Strong, Polarity::Positive),
            ("awful", Strength::Strong, Polarity::Negative),
        ]);
        assert_eq!(sentiment_polarity(&["good", "great", "day"], &lex), Polarity::Positive);
        assert_eq!(sentiment_polarity(&["day"], &lex), Polarity::Neutral);
        assert_eq!(sentiment_polarity(&["good", "awful"], &lex), Polarity::Neutral);
        assert_eq!(sentiment_feature(&["awful"], &lex).to_dense(), [0.0, 1.0, 0.0]);
        assert_eq!(subjectivity_features(&["awful"], &lex).entries(), &[(1, 1.0)]);
        assert_eq!(subjectivity_features::<&str>(&[], &lex).to_dense(), [0.0; 4]);
        assert_eq!(subjectivity_features(&["good", "x", "good"], &lex).entries(), &[(2, 2.0)]);
    }

    #[test]
    fn surface_examples() {
        let fm = "@BOZARbrussels is this how @UN_Women sees #genderequality ? Only #women with arms like #men ?#stopmarriagebill #fakecases @UN #SemST";
        let v = surface_features(fm).to_dense();
        assert_eq!(v, [6.0, 3.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(surface_features("A plain sentence.").nnz(), 0);
        assert_eq!(surface_features(":) :)").to_dense()[3], 2.0);
        assert_eq!(surface_features("see https://t.co/abc !!").to_dense(), [0.0, 0.0, 1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn tagger_rules() {
        let tagger = PosTagger::default();
        assert_eq!(tagger.tag("quickly"), CoarsePosTag::Adverb);
        assert_eq!(tagger.tag("the"), CoarsePosTag::Other);
        assert_eq!(tagger.tag("vaccination"), CoarsePosTag::Noun);
        assert_eq!(tagger.tag("dangerous"), CoarsePosTag::Adjective);
        assert_eq!(tagger.tag("marched"), CoarsePosTag::Verb);
        assert_eq!(tagger.tag("?"), CoarsePosTag::Other);
        let bundled = resources::pos_tagger();
        assert_eq!(bundled.tag("quickly"), CoarsePosTag::Adverb);
        assert_eq!(bundled.tag("the"), CoarsePosTag::Other);
    }

    #[test]
    fn feature_spec_parsing() {
        assert_eq!("word_ngrams:1-3".parse::<FeatureSpec>().unwrap(), FeatureSpec::WordNgrams { min: 1, max: 3 });
        assert!("frame_semantics".parse::<FeatureSpec>().is_err());
        assert!("bow:1-2".parse::<FeatureSpec>().is_err());
        assert!(parse_feature_set::<&str>(&[]).is_err());
        for spec in two_step_stage2_features() {
            assert_eq!(spec.to_string().parse::<FeatureSpec>().unwrap(), spec);
        }
    }

    #[test]
    fn sen_pipeline_dimension() {
        let posts = vec![
            PreparedPost {
                raw: "vaccines cause autism".into(),
                tokens: seq(&["vaccines", "cause", "autism"]),
            },
            PreparedPost {
                raw: "the good news".into(),
                tokens: seq(&["the", "good", "news"]),
            },
        ];
        let res = FeatureResources::default();
        let p = FeaturePipeline::fit(&sen_features(), &posts, "MMR vaccination can cause autism", res).unwrap();
        let dims = p.block_dims();
        assert_eq!(dims[1], 3);
        assert_eq!(p.dim(), dims[0] + 3 + dims[2]);
        assert_eq!(dims[2], 6);
        assert_eq!(dims[0], 5);
        for post in &posts {
            assert_eq!(p.transform(post, res).dim(), p.dim());
        }
        assert!(FeaturePipeline::fit(&[], &posts, "x", res).is_err());
    }

    #[test]
    fn target_terms_presence() {
        assert_eq!(target_terms("Hillary Clinton"), ["hillary", "clinton"]);
        assert_eq!(target_terms("Legalization of Abortion"), ["legalization", "abortion"]);
        let v = target_presence(&seq(&["abortions", "are", "fine"]), &target_terms("Legalization of Abortion"));
        assert_eq!(v.to_dense(), [0.0, 1.0]);
    }
}
