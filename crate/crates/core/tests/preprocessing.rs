use proptest::prelude::*;
use stance_core::corpus::Post;
use stance_core::preprocess::{
    porter_stem, preprocess_post, preprocess_text, segment_hashtag, segmentation_key, Mode, PreprocessConfig,
    UnigramFrequencyTable,
};
use stance_core::{resources, StanceLabel};

fn toy_table() -> UnigramFrequencyTable {
    UnigramFrequencyTable::from_ranked(["a", "ab", "b", "abc", "ba", "cab", "c", "bad", "dab", "d", "abba", "bb"])
}

/// Exhaustive search over all 2^(n-1) cut sets.
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
    best.expect("singleton pieces always valid").2
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn dp_equals_brute_force(s in "[abcde]{1,12}") {
        let table = toy_table();
        prop_assert_eq!(segment_hashtag(&s, &table), brute_force(&s, &table));
    }
}

proptest! {
    #[test]
    fn segmentation_concatenates_back(s in "[a-z]{1,20}") {
        let pieces = segment_hashtag(&s, resources::frequency_table());
        prop_assert_eq!(pieces.concat(), s);
        prop_assert!(pieces.iter().all(|p| !p.is_empty()));
    }

    #[test]
    fn preprocessing_never_emits_empty_tokens(text in "[ -~]{0,60}") {
        let lex = resources::normalization_lexicon();
        let freq = resources::frequency_table();
        for mode in [Mode::Classical, Mode::Embedding] {
            for microblog in [true, false] {
                let cfg = PreprocessConfig::new(mode, microblog).with_stopwords(resources::stopwords().clone());
                let seq = preprocess_text(&text, &cfg, lex, freq);
                prop_assert!(seq.tokens.iter().all(|t| !t.text.is_empty()));
                prop_assert_eq!(&seq, &preprocess_text(&text, &cfg, lex, freq));
            }
        }
    }
}

#[test]
fn powertowomen_with_shipped_table() {
    assert_eq!(segment_hashtag("powertowomen", resources::frequency_table()), ["power", "to", "women"]);
    let post = Post {
        id: "1".into(),
        topic: "FM".into(),
        text: "#powertowomen aaf #SemST".into(),
        gold: StanceLabel::Favor,
    };
    let cfg = PreprocessConfig::new(Mode::Embedding, true);
    let seq = preprocess_post(&post, &cfg, resources::normalization_lexicon(), resources::frequency_table());
    assert_eq!(seq.texts(), ["power", "to", "women", "as", "a", "friend"]);
}

/// Published input/output pairs of the reference stemmer.
const PORTER_PAIRS: [(&str, &str); 60] = [
    ("caresses", "caress"),
    ("ponies", "poni"),
    ("ties", "ti"),
    ("caress", "caress"),
    ("cats", "cat"),
    ("feed", "feed"),
    ("agreed", "agre"),
    ("plastered", "plaster"),
    ("bled", "bled"),
    ("motoring", "motor"),
    ("sing", "sing"),
    ("conflated", "conflat"),
    ("troubled", "troubl"),
    ("sized", "size"),
    ("hopping", "hop"),
    ("tanned", "tan"),
    ("falling", "fall"),
    ("hissing", "hiss"),
    ("fizzed", "fizz"),
    ("failing", "fail"),
    ("filing", "file"),
    ("happy", "happi"),
    ("sky", "sky"),
    ("relational", "relat"),
    ("conditional", "condit"),
    ("rational", "ration"),
    ("valenci", "valenc"),
    ("hesitanci", "hesit"),
    ("digitizer", "digit"),
    ("conformabli", "conform"),
    ("radicalli", "radic"),
    ("differentli", "differ"),
    ("vileli", "vile"),
    ("analogousli", "analog"),
    ("vietnamization", "vietnam"),
    ("predication", "predic"),
    ("operator", "oper"),
    ("feudalism", "feudal"),
    ("decisiveness", "decis"),
    ("hopefulness", "hope"),
    ("callousness", "callous"),
    ("formaliti", "formal"),
    ("sensitiviti", "sensit"),
    ("sensibiliti", "sensibl"),
    ("triplicate", "triplic"),
    ("formative", "form"),
    ("formalize", "formal"),
    ("electriciti", "electr"),
    ("electrical", "electr"),
    ("hopeful", "hope"),
    ("goodness", "good"),
    ("revival", "reviv"),
    ("allowance", "allow"),
    ("inference", "infer"),
    ("airliner", "airlin"),
    ("adjustable", "adjust"),
    ("replacement", "replac"),
    ("adoption", "adopt"),
    ("probate", "probat"),
    ("generalizations", "gener"),
];

#[test]
fn porter_reference_pairs() {
    let wrong: Vec<String> = PORTER_PAIRS
        .iter()
        .filter(|(w, s)| porter_stem(w) != *s)
        .map(|(w, s)| format!("{w}: got {} want {s}", porter_stem(w)))
        .collect();
    assert!(wrong.is_empty(), "{wrong:#?}");
}

#[test]
fn classical_mode_drops_stopwords_and_stems() {
    let cfg = PreprocessConfig::new(Mode::Classical, false).with_stopwords(resources::stopwords().clone());
    let seq = preprocess_text(
        "The studies were relating to hopeful outcomes",
        &cfg,
        resources::normalization_lexicon(),
        resources::frequency_table(),
    );
    assert_eq!(seq.texts(), ["studi", "relat", "hope", "outcom"]);
}
