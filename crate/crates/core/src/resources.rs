//! Bundled default lexicons and word lists (see `data/NOTICE.md`).

use std::collections::BTreeSet;
use std::sync::OnceLock;

use crate::features::{PosTagger, SubjectivityLexicon};
use crate::preprocess::{parse_word_list, NormalizationLexicon, UnigramFrequencyTable};

pub const UNIGRAM_FREQUENCY: &str = include_str!("../data/unigram_frequency.txt");
pub const STOPWORDS: &str = include_str!("../data/stopwords.txt");
pub const NORMALIZATION: &str = include_str!("../data/normalization.tsv");
pub const SUBJECTIVITY: &str = include_str!("../data/subjectivity.tsv");
pub const TAG_DICTIONARY: &str = include_str!("../data/tag_dictionary.tsv");

pub fn frequency_table() -> &'static UnigramFrequencyTable {
    static TABLE: OnceLock<UnigramFrequencyTable> = OnceLock::new();
    TABLE.get_or_init(|| UnigramFrequencyTable::parse(UNIGRAM_FREQUENCY))
}

pub fn stopwords() -> &'static BTreeSet<String> {
    static WORDS: OnceLock<BTreeSet<String>> = OnceLock::new();
    WORDS.get_or_init(|| parse_word_list(STOPWORDS))
}

pub fn normalization_lexicon() -> &'static NormalizationLexicon {
    static LEX: OnceLock<NormalizationLexicon> = OnceLock::new();
    LEX.get_or_init(|| NormalizationLexicon::parse(NORMALIZATION, "normalization.tsv").expect("bundled lexicon parses"))
}

pub fn subjectivity_lexicon() -> &'static SubjectivityLexicon {
    static LEX: OnceLock<SubjectivityLexicon> = OnceLock::new();
    LEX.get_or_init(|| SubjectivityLexicon::parse(SUBJECTIVITY, "subjectivity.tsv").expect("bundled lexicon parses"))
}

pub fn pos_tagger() -> &'static PosTagger {
    static TAGGER: OnceLock<PosTagger> = OnceLock::new();
    TAGGER.get_or_init(|| PosTagger::parse(TAG_DICTIONARY, "tag_dictionary.tsv").expect("bundled dictionary parses"))
}
