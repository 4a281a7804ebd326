//! Hashtag segmentation by minimum total word cost over a Zipf-ranked
//! unigram list.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{read_to_string, Result};

/// Costs are stored as integer micro-nats so that sums are exact and
/// comparisons between segmentations do not depend on summation order.
pub type Cost = u64;

const SCALE: f64 = 1e6;
/// Added to the cost of the worst-ranked word to price an out-of-vocabulary character.
const UNKNOWN_CHAR_PENALTY: f64 = 10.0;

/// Words ranked by descending corpus frequency; `cost(w) = ln((rank + 1) * ln V)`.
#[derive(Clone, Debug)]
pub struct UnigramFrequencyTable {
    words: Vec<String>,
    cost: HashMap<String, Cost>,
    max_len: usize,
    unknown_char: Cost,
}

fn quantise(x: f64) -> Cost {
    (x * SCALE).round() as Cost
}

impl UnigramFrequencyTable {
    /// Builds the table from words in rank order; duplicates keep their first rank.
    pub fn from_ranked<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut ranked: Vec<String> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for w in words {
            let w = w.as_ref().trim().to_lowercase();
            if !w.is_empty() && seen.insert(w.clone()) {
                ranked.push(w);
            }
        }
        // ln V must exceed 1 for every cost to be positive, so tables smaller than 3 words use V = 3.
        let log_v = (ranked.len().max(3) as f64).ln();
        let word_cost = |rank: usize| ((rank as f64 + 1.0) * log_v).ln();
        let cost = ranked
            .iter()
            .enumerate()
            .map(|(rank, w)| (w.clone(), quantise(word_cost(rank))))
            .collect();
        let max_len = ranked.iter().map(|w| w.chars().count()).max().unwrap_or(1);
        let unknown_char = quantise(word_cost(ranked.len()) + UNKNOWN_CHAR_PENALTY);
        UnigramFrequencyTable {
            words: ranked,
            cost,
            max_len,
            unknown_char,
        }
    }

    /// One word per line, most frequent first. Extra whitespace-separated columns are ignored.
    pub fn parse(content: &str) -> Self {
        Self::from_ranked(content.lines().filter_map(|l| l.split_whitespace().next()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::parse(&read_to_string(path)?))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn rank(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn word_cost(&self, word: &str) -> Option<Cost> {
        self.cost.get(word).copied()
    }

    /// Cost of a candidate piece: dictionary words at their rank cost, single
    /// unknown characters at the penalty, anything else is not a valid piece.
    pub fn piece_cost(&self, piece: &str) -> Option<Cost> {
        self.word_cost(piece)
            .or_else(|| (piece.chars().count() == 1).then_some(self.unknown_char))
    }

    pub fn max_word_len(&self) -> usize {
        self.max_len
    }
}

/// Ordering key for segmentations: total cost, then fewest words, then
/// lexicographically smallest word list.
pub fn segmentation_key<'a>(table: &UnigramFrequencyTable, pieces: &'a [&'a str]) -> Option<(Cost, usize, &'a [&'a str])> {
    let mut total: Cost = 0;
    for p in pieces {
        total += table.piece_cost(p)?;
    }
    Some((total, pieces.len(), pieces))
}

/// Splits a (sigil-free, lowercase) hashtag body into its minimum-cost word sequence.
///
/// Dynamic programming runs over suffixes: `best[i]` is the optimal
/// segmentation of `tag[i..]`. Because candidates starting at `i` differ in
/// their first word, comparing `(cost, word count, words)` of the suffix
/// solution is enough to reproduce the global tie-break exactly.
pub fn segment_hashtag(tag: &str, table: &UnigramFrequencyTable) -> Vec<String> {
    let bounds: Vec<usize> = tag.char_indices().map(|(i, _)| i).chain(std::iter::once(tag.len())).collect();
    let n = bounds.len() - 1;
    if n == 0 {
        return Vec::new();
    }
    // best[i] = (cost, word count, next boundary index)
    let mut best: Vec<Option<(Cost, usize, usize)>> = vec![None; n + 1];
    best[n] = Some((0, 0, n));
    for i in (0..n).rev() {
        let mut choice: Option<(Cost, usize, usize)> = None;
        for j in (i + 1)..=n.min(i + table.max_word_len().max(1)) {
            let piece = &tag[bounds[i]..bounds[j]];
            let Some(c) = table.piece_cost(piece) else { continue };
            let (rest_cost, rest_words, _) = best[j].expect("suffix solved");
            let candidate = (c + rest_cost, rest_words + 1, j);
            choice = match choice {
                None => Some(candidate),
                Some(current) => {
                    if better(tag, &bounds, i, candidate, current) {
                        Some(candidate)
                    } else {
                        Some(current)
                    }
                }
            };
        }
        best[i] = choice;
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let (_, _, j) = best[i].expect("every position is segmentable");
        out.push(tag[bounds[i]..bounds[j]].to_string());
        i = j;
    }
    out
}

/// Candidates share the start `i`, so on equal (cost, length) the first words decide.
fn better(tag: &str, bounds: &[usize], i: usize, a: (Cost, usize, usize), b: (Cost, usize, usize)) -> bool {
    if (a.0, a.1) != (b.0, b.1) {
        return (a.0, a.1) < (b.0, b.1);
    }
    tag[bounds[i]..bounds[a.2]] < tag[bounds[i]..bounds[b.2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_table_prefers_cat_dog() {
        let table = UnigramFrequencyTable::from_ranked(["cat", "dog", "catd"]);
        assert_eq!(segment_hashtag("catdog", &table), vec!["cat", "dog"]);
    }

    #[test]
    fn single_dictionary_word() {
        let table = UnigramFrequencyTable::from_ranked(["the", "women", "power"]);
        assert_eq!(segment_hashtag("women", &table), vec!["women"]);
        assert!(segment_hashtag("", &table).is_empty());
    }

    #[test]
    fn unknown_characters_fall_back_to_singletons() {
        let table = UnigramFrequencyTable::from_ranked(["cat"]);
        assert_eq!(segment_hashtag("xcat", &table), vec!["x", "cat"]);
    }

    #[test]
    fn costs_increase_with_rank() {
        let table = UnigramFrequencyTable::from_ranked(["a", "b", "c", "d"]);
        let costs: Vec<Cost> = ["a", "b", "c", "d"].iter().map(|w| table.word_cost(w).unwrap()).collect();
        assert!(costs.windows(2).all(|w| w[0] < w[1]));
    }
}
