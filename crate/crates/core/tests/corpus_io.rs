use proptest::prelude::*;
use stance_core::corpus::{
    dataset_stats, group_topics, load_semeval, parse_mpchi, parse_semeval, reference_counts, split_posts, stratified_split,
    write_semeval, ClassCounts, MpchiFormat, Post, SplitManifest, SplitSpec, REFERENCE_COUNTS,
};
use stance_core::external::{import_predictions, parse_external};
use stance_core::StanceLabel::{self, Against as A, Favor as F, None as N};

fn label() -> impl Strategy<Value = StanceLabel> {
    prop_oneof![Just(F), Just(A), Just(N)]
}

fn post() -> impl Strategy<Value = Post> {
    (
        "[a-z0-9]{1,8}",
        prop::sample::select(vec!["AT", "CC", "FM", "HC", "LA"]),
        "[a-zA-Z0-9 #@!.,'?]{1,80}",
        label(),
    )
        .prop_map(|(id, topic, text, gold)| Post {
            id,
            topic: topic.to_string(),
            text,
            gold,
        })
}

proptest! {
    #[test]
    fn semeval_write_read_round_trip(posts in prop::collection::vec(post(), 0..30)) {
        let mut buf = Vec::new();
        write_semeval(&posts, &mut buf).unwrap();
        let back = parse_semeval(std::str::from_utf8(&buf).unwrap(), "mem").unwrap();
        prop_assert_eq!(back, posts);
    }

    #[test]
    fn stratified_split_partitions_by_class(n in 10usize..120, seed in any::<u64>()) {
        let posts: Vec<Post> = (0..n)
            .map(|i| Post { id: format!("{i:04}"), topic: "EC".into(), text: format!("text {i}"), gold: [F, A, A, N][i % 4] })
            .collect();
        let spec = SplitSpec { seed, ..Default::default() };
        let (train, test) = stratified_split(&posts, &spec).unwrap();
        prop_assert_eq!(train.len() + test.len(), n);
        for l in [F, A, N] {
            let total = posts.iter().filter(|p| p.gold == l).count();
            let in_train = train.iter().filter(|p| p.gold == l).count();
            prop_assert_eq!(in_train, (0.7 * total as f64).round() as usize);
        }
        let mut reversed = posts.clone();
        reversed.reverse();
        prop_assert_eq!(stratified_split(&reversed, &spec).unwrap(), (train, test));
    }
}

/// Posts in the SemEval layout whose per-class counts are `counts`.
fn synthetic(topic: &str, counts: ClassCounts, prefix: &str) -> Vec<Post> {
    let mut posts = Vec::new();
    for l in [F, A, N] {
        for k in 0..counts.get(l) {
            posts.push(Post {
                id: format!("{prefix}{topic}-{l}-{k}"),
                topic: topic.to_string(),
                text: format!("post {k} about {topic} #tag"),
                gold: l,
            });
        }
    }
    posts
}

#[test]
fn table_shaped_files_reproduce_reference_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (topic, tr, te) in REFERENCE_COUNTS.iter().take(5) {
        train.extend(synthetic(topic, *tr, "tr"));
        test.extend(synthetic(topic, *te, "te"));
    }
    let (tp, sp) = (dir.path().join("train.txt"), dir.path().join("test.txt"));
    write_semeval(&train, std::fs::File::create(&tp).unwrap()).unwrap();
    write_semeval(&test, std::fs::File::create(&sp).unwrap()).unwrap();
    let datasets = load_semeval(&tp, &sp).unwrap();
    assert_eq!(datasets.len(), 5);
    for ds in &datasets {
        assert_eq!(Some(dataset_stats(ds)), reference_counts(&ds.topic), "{}", ds.topic);
    }
    let at = reference_counts("AT").unwrap();
    assert_eq!(at.train, ClassCounts::new(92, 304, 117));
    assert_eq!(reference_counts("HC").unwrap().test, ClassCounts::new(45, 172, 78));
}

#[test]
fn malformed_semeval_names_file_and_line() {
    let text = "ID\tTarget\tTweet\tStance\n1\tAtheism\tok\tFAVOR\n2\tAtheism\tmissing column\n";
    let err = parse_semeval(text, "bad.txt").unwrap_err().to_string();
    assert!(err.contains("bad.txt") && err.contains('3'), "{err}");
    let text = "ID\tTarget\tTweet\tStance\n1\tAtheism\tok\tMAYBE\n";
    assert!(parse_semeval(text, "bad.txt").is_err());
    assert!(parse_semeval("ID\tTweet\tStance\n", "h.txt").unwrap_err().to_string().contains("Target"));
}

#[test]
fn duplicate_ids_across_splits_rejected() {
    let p = |id: &str| Post {
        id: id.into(),
        topic: "AT".into(),
        text: "x".into(),
        gold: F,
    };
    assert!(group_topics(vec![p("1")], vec![p("1")]).is_err());
}

#[test]
fn mpchi_csv_with_manifest() {
    let csv = "id,text,stance\na,\"Does vitamin C, daily, help?\",FAVOR\nb,No effect at all,AGAINST\nc,Unrelated query,NONE\n";
    let format = MpchiFormat {
        id_column: Some("id".into()),
        ..Default::default()
    };
    let posts = parse_mpchi(csv, "vc.csv", &format, "VC").unwrap();
    assert_eq!(posts[0].text, "Does vitamin C, daily, help?");
    let manifest = SplitManifest::parse("a\ttrain\nb\ttest\nc\ttrain\n", "m.tsv").unwrap();
    let ds = split_posts("VC", posts.clone(), &SplitSpec::default(), Some(&manifest)).unwrap();
    assert_eq!(ds.train.iter().map(|p| p.id.as_str()).collect::<Vec<_>>(), ["a", "c"]);
    assert_eq!(ds.test[0].id, "b");
    let partial = SplitManifest::parse("a\ttrain\n", "m.tsv").unwrap();
    assert!(split_posts("VC", posts, &SplitSpec::default(), Some(&partial)).is_err());
}

#[test]
fn external_import_of_full_hc_test_set() {
    let hc = reference_counts("HC").unwrap();
    let train = synthetic("HC", hc.train, "tr");
    let test = synthetic("HC", hc.test, "te");
    let ds = group_topics(train, test).unwrap().remove(0);
    assert_eq!(ds.test.len(), 295);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bert_hc.tsv");
    let mut content = String::from("# produced elsewhere\n");
    // reversed order; alignment follows the test set
    for p in ds.test.iter().rev() {
        content.push_str(&format!("{}\t{}\n", p.id, p.gold));
    }
    std::fs::write(&path, &content).unwrap();
    let set = import_predictions(&path, &ds, "BERT").unwrap();
    assert_eq!(set.labels.len(), 295);
    let gold: Vec<StanceLabel> = ds.test.iter().map(|p| p.gold).collect();
    assert_eq!(set.aligned(&ds).unwrap(), gold);

    let missing: String = content.lines().skip(2).map(|l| format!("{l}\n")).collect();
    let err = parse_external(&missing, "x.tsv", &ds, "BERT").unwrap_err().to_string();
    assert!(err.contains("1 test posts"), "{err}");
    let extra = format!("{content}ghost\tNONE\n");
    assert!(parse_external(&extra, "x.tsv", &ds, "BERT").unwrap_err().to_string().contains("ghost"));
}
