#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stance_core::corpus::{write_semeval, Post};
use stance_core::StanceLabel::{self, Against as A, Favor as F, None as N};

const FAVOR_WORDS: [&str; 4] = ["great", "love", "support", "proud"];
const AGAINST_WORDS: [&str; 4] = ["awful", "hate", "oppose", "shame"];
const FILLER: [&str; 8] = ["today", "people", "think", "really", "news", "morning", "talk", "world"];

/// Short posts whose stance is signalled by one cue word among filler.
pub fn cue_posts(topic: &str, n: usize, prefix: &str, seed: u64) -> Vec<Post> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let gold = [F, A, N, A][i % 4];
            let mut words: Vec<&str> = (0..rng.gen_range(3..7)).map(|_| FILLER[rng.gen_range(0..FILLER.len())]).collect();
            let cue = match gold {
                F => Some(FAVOR_WORDS[rng.gen_range(0..4)]),
                A => Some(AGAINST_WORDS[rng.gen_range(0..4)]),
                N => None,
            };
            if let Some(c) = cue {
                words.insert(rng.gen_range(0..=words.len()), c);
            }
            Post {
                id: format!("{prefix}{i}"),
                topic: topic.to_string(),
                text: words.join(" "),
                gold,
            }
        })
        .collect()
}

/// Writes SemEval-format train and test files for the given topics.
pub fn write_corpus(dir: &Path, topics: &[&str], n_train: usize, n_test: usize) -> (PathBuf, PathBuf) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (k, t) in topics.iter().enumerate() {
        train.extend(cue_posts(t, n_train, &format!("{t}-tr"), 100 + k as u64));
        test.extend(cue_posts(t, n_test, &format!("{t}-te"), 200 + k as u64));
    }
    let tp = dir.join("train.txt");
    let sp = dir.join("test.txt");
    write_semeval(&train, std::fs::File::create(&tp).unwrap()).unwrap();
    write_semeval(&test, std::fs::File::create(&sp).unwrap()).unwrap();
    (tp, sp)
}

pub fn labels(posts: &[Post]) -> Vec<StanceLabel> {
    posts.iter().map(|p| p.gold).collect()
}
