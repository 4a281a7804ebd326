//! Shared text preprocessing: case-folding, tokenization, lexicon
//! normalization, hashtag segmentation, stopword removal and Porter stemming.

mod porter;
mod segment;

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Post;
use crate::error::{read_to_string, Error, Result};

pub use porter::porter_stem;
pub use segment::{segment_hashtag, segmentation_key, Cost, UnigramFrequencyTable};

pub const URL_PLACEHOLDER: &str = "<url>";
pub const USER_PLACEHOLDER: &str = "<user>";
const SEMST_MARKER: &str = "semst";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    /// Form before stemming (equal to `text` when the stemmer did not run).
    pub surface: String,
    pub from_hashtag: bool,
    pub normalized: bool,
    pub stemmed: bool,
}

impl Token {
    pub fn plain(text: impl Into<String>) -> Self {
        let text = text.into();
        Token {
            surface: text.clone(),
            text,
            from_hashtag: false,
            normalized: false,
            stemmed: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    pub fn surfaces(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.surface.as_str()).collect()
    }

    fn push(&mut self, token: Token) {
        if !token.text.is_empty() {
            self.tokens.push(token);
        }
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn is_url(chunk: &str) -> bool {
    let lower = chunk.to_lowercase();
    lower.starts_with("http://") || lower.starts_with("https://") || lower.starts_with("www.")
}

/// Splits on whitespace, then separates punctuation into single-character
/// tokens. Word-internal apostrophes stay attached (`we're`). With
/// `microblog`, URLs stay whole and `#`/`@` directly followed by a word
/// character stay attached to that word.
///
/// No case-folding happens here.
pub fn tokenize(text: &str, microblog: bool) -> TokenSequence {
    let mut seq = TokenSequence::default();
    for chunk in text.split_whitespace() {
        if microblog && is_url(chunk) {
            seq.push(Token::plain(chunk));
            continue;
        }
        let chars: Vec<char> = chunk.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let sigil = microblog && (c == '#' || c == '@') && chars.get(i + 1).is_some_and(|&n| is_word_char(n));
            if sigil || is_word_char(c) {
                let start = i;
                i += 1;
                while i < chars.len() {
                    let ch = chars[i];
                    let inner_apostrophe = (ch == '\'' || ch == '\u{2019}')
                        && chars.get(i + 1).is_some_and(|&n| n.is_alphanumeric())
                        && i > start
                        && is_word_char(chars[i - 1]);
                    if is_word_char(ch) || inner_apostrophe {
                        i += 1;
                    } else {
                        break;
                    }
                }
                seq.push(Token::plain(chars[start..i].iter().collect::<String>()));
            } else {
                seq.push(Token::plain(c.to_string()));
                i += 1;
            }
        }
    }
    seq
}

/// Exact-match lexicon from informal tokens to replacement phrases.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NormalizationLexicon {
    entries: HashMap<String, Vec<String>>,
}

impl NormalizationLexicon {
    pub fn from_pairs<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let entries = pairs
            .into_iter()
            .map(|(k, v)| {
                let words = v.as_ref().split_whitespace().map(str::to_lowercase).collect();
                (k.as_ref().trim().to_lowercase(), words)
            })
            .collect();
        NormalizationLexicon { entries }
    }

    /// `oov<TAB>replacement phrase` per line; blank lines and `#` comments skipped.
    pub fn parse(content: &str, origin: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (idx, line) in content.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((oov, phrase)) = line.split_once('\t') else {
                return Err(Error::parse(origin, idx + 1, "expected `oov<TAB>replacement`"));
            };
            if phrase.trim().is_empty() {
                return Err(Error::parse(origin, idx + 1, "empty replacement"));
            }
            pairs.push((oov.to_string(), phrase.to_string()));
        }
        Ok(Self::from_pairs(pairs))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?, &path.display().to_string())
    }

    pub fn get(&self, token: &str) -> Option<&[String]> {
        self.entries.get(token).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Lexicon replacement for a case-folded token, or the token itself.
pub fn normalize_token(token: &str, lex: &NormalizationLexicon) -> Vec<String> {
    match lex.get(token) {
        Some(words) => words.to_vec(),
        None => vec![token.to_string()],
    }
}

pub fn parse_word_list(content: &str) -> BTreeSet<String> {
    content
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

pub fn load_word_list(path: &Path) -> Result<BTreeSet<String>> {
    Ok(parse_word_list(&read_to_string(path)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Stopword removal and stemming enabled (SVM pipelines).
    #[default]
    Classical,
    /// Surface forms kept for pre-trained embedding lookup (neural models).
    Embedding,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkerHandling {
    #[default]
    Drop,
    Keep,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreprocessConfig {
    pub mode: Mode,
    pub apply_normalization: bool,
    pub apply_hashtag_split: bool,
    pub stopwords: BTreeSet<String>,
    pub microblog: bool,
    /// What to do with the `#SemST` marker that ends every SemEval tweet.
    pub semst: MarkerHandling,
}

impl PreprocessConfig {
    pub fn new(mode: Mode, microblog: bool) -> Self {
        PreprocessConfig {
            mode,
            apply_normalization: true,
            apply_hashtag_split: true,
            stopwords: BTreeSet::new(),
            microblog,
            semst: MarkerHandling::Drop,
        }
    }

    pub fn with_stopwords(mut self, stopwords: BTreeSet<String>) -> Self {
        self.stopwords = stopwords;
        self
    }

    fn stems(&self) -> bool {
        self.mode == Mode::Classical
    }
}

/// Runs the full pipeline on raw text:
/// case-fold, tokenize, then (microblog only) placeholder mapping,
/// normalization and hashtag splitting, then (classical mode only)
/// stopword removal and stemming.
///
/// Hashtag pieces bypass the normalization lexicon.
pub fn preprocess_text(
    text: &str,
    cfg: &PreprocessConfig,
    lex: &NormalizationLexicon,
    freq: &UnigramFrequencyTable,
) -> TokenSequence {
    let folded = text.to_lowercase();
    let raw = tokenize(&folded, cfg.microblog);
    let mut seq = TokenSequence::default();
    for token in raw.tokens {
        let t = token.text;
        if !cfg.microblog {
            seq.push(Token::plain(t));
            continue;
        }
        if is_url(&t) {
            seq.push(Token::plain(URL_PLACEHOLDER));
        } else if t.len() > 1 && t.starts_with('@') {
            seq.push(Token::plain(USER_PLACEHOLDER));
        } else if t.len() > 1 && t.starts_with('#') {
            let body = &t[1..];
            if body == SEMST_MARKER && cfg.semst == MarkerHandling::Drop {
                continue;
            }
            let pieces = if cfg.apply_hashtag_split {
                segment_hashtag(body, freq)
            } else {
                vec![body.to_string()]
            };
            for piece in pieces {
                let mut tok = Token::plain(piece);
                tok.from_hashtag = true;
                seq.push(tok);
            }
        } else if cfg.apply_normalization && lex.get(&t).is_some() {
            for word in normalize_token(&t, lex) {
                let mut tok = Token::plain(word);
                tok.normalized = true;
                seq.push(tok);
            }
        } else {
            seq.push(Token::plain(t));
        }
    }
    if cfg.stems() {
        seq.tokens.retain(|t| !cfg.stopwords.contains(&t.text));
        for tok in &mut seq.tokens {
            tok.text = porter_stem(&tok.surface);
            tok.stemmed = true;
        }
    }
    seq
}

pub fn preprocess_post(
    post: &Post,
    cfg: &PreprocessConfig,
    lex: &NormalizationLexicon,
    freq: &UnigramFrequencyTable,
) -> TokenSequence {
    preprocess_text(&post.text, cfg, lex, freq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(seq: &TokenSequence) -> Vec<String> {
        seq.tokens.iter().map(|t| t.text.clone()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(texts(&tokenize(&"I like girls.".to_lowercase(), false)), ["i", "like", "girls", "."]);
        assert!(tokenize("", true).is_empty());
        assert_eq!(texts(&tokenize("#powertowomen rocks", true)), ["#powertowomen", "rocks"]);
        assert_eq!(texts(&tokenize("#powertowomen rocks", false)), ["#", "powertowomen", "rocks"]);
        assert_eq!(
            texts(&tokenize("we're @UN_Women https://t.co/x?y=1 ?#men", true)),
            ["we're", "@UN_Women", "https://t.co/x?y=1", "?", "#men"]
        );
    }

    #[test]
    fn normalize_examples() {
        let lex = NormalizationLexicon::from_pairs([("aaf", "as a friend"), ("u", "you")]);
        assert_eq!(normalize_token("aaf", &lex), ["as", "a", "friend"]);
        assert_eq!(normalize_token("hello", &lex), ["hello"]);
        assert_eq!(normalize_token("u", &lex), ["you"]);
    }

    #[test]
    fn lexicon_file_errors() {
        assert!(NormalizationLexicon::parse("aaf as a friend\n", "lex").is_err());
        let lex = NormalizationLexicon::parse("AAF\tas a friend\n\n", "lex").unwrap();
        assert_eq!(lex.get("aaf").unwrap(), ["as", "a", "friend"]);
    }

    fn toy_freq() -> UnigramFrequencyTable {
        UnigramFrequencyTable::from_ranked(["god", "is", "to", "power", "women", "sem", "st", "created"])
    }

    #[test]
    fn semst_marker_handling() {
        let lex = NormalizationLexicon::default();
        let text = "#God created #trinity #SemST";
        let mut cfg = PreprocessConfig::new(Mode::Embedding, true);
        let dropped = preprocess_text(text, &cfg, &lex, &toy_freq());
        assert_eq!(dropped.texts().last(), Some(&"y"));
        cfg.semst = MarkerHandling::Keep;
        let kept = preprocess_text(text, &cfg, &lex, &toy_freq());
        assert_eq!(&kept.texts()[kept.len() - 2..], ["sem", "st"]);
        assert!(kept.tokens.last().unwrap().from_hashtag);
    }

    #[test]
    fn mode_controls_stemming() {
        let lex = NormalizationLexicon::default();
        let cfg = PreprocessConfig::new(Mode::Embedding, false);
        assert_eq!(preprocess_text("running fast", &cfg, &lex, &toy_freq()).texts(), ["running", "fast"]);
        let cfg = PreprocessConfig::new(Mode::Classical, false).with_stopwords(["fast".to_string()].into());
        let out = preprocess_text("running fast", &cfg, &lex, &toy_freq());
        assert_eq!(out.texts(), ["run"]);
        assert_eq!(out.surfaces(), ["running"]);
        assert!(out.tokens[0].stemmed);
    }

    #[test]
    fn placeholders_and_normalization() {
        let lex = NormalizationLexicon::from_pairs([("aaf", "as a friend")]);
        let cfg = PreprocessConfig::new(Mode::Embedding, true);
        let out = preprocess_text("@bob aaf http://x.co #powertowomen", &cfg, &lex, &toy_freq());
        assert_eq!(out.texts(), ["<user>", "as", "a", "friend", "<url>", "power", "to", "women"]);
        assert!(out.tokens[1].normalized);
        assert!(out.tokens[7].from_hashtag);
        // Hashtag pieces bypass the lexicon.
        let lex = NormalizationLexicon::from_pairs([("to", "TWO")]);
        let out = preprocess_text("#powertowomen", &cfg, &lex, &toy_freq());
        assert_eq!(out.texts(), ["power", "to", "women"]);
    }
}
