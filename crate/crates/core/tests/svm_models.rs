use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stance_core::features::{FeatureResources, FeatureSpec, FeatureVector, PreparedPost};
use stance_core::preprocess::{Token, TokenSequence};
use stance_core::svm::{
    cascade_decide, cascade_train, svm_objective, train_one_vs_rest, train_pegasos, CascadeConfig, PipelineModel,
    SvmArtifact, SvmTrainConfig,
};
use stance_core::StanceLabel::{self, Against as A, Favor as F, None as N};

/// Two clusters around (1, 1, 0.2) and (-1, -1, 0.2) with ±0.4 jitter.
fn separable_fixture(seed: u64) -> (Vec<FeatureVector>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..80 {
        let y = i % 2 == 0;
        let c = if y { 1.0 } else { -1.0 };
        let v = [c + rng.gen_range(-0.4..0.4), c + rng.gen_range(-0.4..0.4), 0.2];
        xs.push(FeatureVector::from_dense(&v));
        ys.push(y);
    }
    (xs, ys)
}

#[test]
fn pegasos_separates_fixture_within_200_epochs() {
    let (xs, ys) = separable_fixture(4);
    let cfg = SvmTrainConfig {
        epochs: 200,
        normalize: false,
        ..Default::default()
    };
    let fit = train_pegasos(&xs, &ys, None, &cfg).unwrap();
    let correct = xs
        .iter()
        .zip(&ys)
        .filter(|(x, &y)| (fit.model.margin(x).unwrap() > 0.0) == y)
        .count();
    assert_eq!(correct, xs.len());
    let costs = vec![1.0; xs.len()];
    let direct = svm_objective(&fit.model, &xs, &ys, &costs, cfg.lambda);
    assert_eq!(direct, fit.final_objective);
    assert!(fit.final_objective <= fit.initial_objective);
}

#[test]
fn one_vs_rest_on_three_clusters() {
    let centers = [(F, [3.0, 0.0, 0.0]), (A, [0.0, 3.0, 0.0]), (N, [0.0, 0.0, 3.0])];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..90 {
        let (l, c) = centers[i % 3];
        let v: Vec<f64> = c.iter().map(|x| x + rng.gen_range(-0.5..0.5)).collect();
        xs.push(FeatureVector::from_dense(&v));
        ys.push(l);
    }
    let cfg = SvmTrainConfig {
        epochs: 100,
        ..Default::default()
    };
    let model = train_one_vs_rest(&xs, &ys, &cfg).unwrap();
    for (x, &y) in xs.iter().zip(&ys) {
        assert_eq!(model.predict(x).unwrap(), y);
    }
    let again = train_one_vs_rest(&xs, &ys, &cfg).unwrap();
    assert_eq!(model, again);
}

proptest! {
    #[test]
    fn normalized_prediction_is_scale_invariant(scale in 0.01f64..100.0, seed in 0u64..50) {
        let (xs, ys) = separable_fixture(seed);
        let labels: Vec<StanceLabel> = ys.iter().map(|&y| if y { F } else { A }).collect();
        let cfg = SvmTrainConfig { epochs: 5, ..Default::default() };
        let model = train_one_vs_rest(&xs, &labels, &cfg).unwrap();
        for x in &xs {
            let scaled = FeatureVector::from_dense(&x.to_dense().iter().map(|v| v * scale).collect::<Vec<_>>());
            prop_assert_eq!(model.predict(x).unwrap(), model.predict(&scaled).unwrap());
        }
    }
}

#[test]
fn cascade_decision_table_exhaustive() {
    let margins = [-2.0, -1e-12, 0.0, 1e-12, 2.0];
    for &m1 in &margins {
        for &m2 in &margins {
            let l = cascade_decide(m1, m2);
            if m1 < 0.0 {
                assert_eq!(l, N, "m1={m1} m2={m2}");
            } else {
                assert_eq!(l, if m2 >= 0.0 { F } else { A });
            }
        }
    }
}

fn post(words: &[&str]) -> PreparedPost {
    PreparedPost {
        raw: words.join(" "),
        tokens: TokenSequence {
            tokens: words.iter().map(|w| Token::plain(*w)).collect(),
        },
    }
}

#[test]
fn trained_cascade_never_polarizes_after_stage1_none() {
    let vocab = ["good", "bad", "meh", "weather", "love", "hate"];
    let mut posts = Vec::new();
    let mut labels = Vec::new();
    for i in 0..60 {
        let (w, l) = match i % 3 {
            0 => (["good", "love"], F),
            1 => (["bad", "hate"], A),
            _ => (["meh", "weather"], N),
        };
        posts.push(post(&w));
        labels.push(l);
    }
    let cfg = CascadeConfig {
        stage1_features: vec![FeatureSpec::WordNgrams { min: 1, max: 1 }],
        stage2_features: vec![FeatureSpec::WordNgrams { min: 1, max: 1 }],
        ..Default::default()
    };
    let res = FeatureResources::default();
    let model = cascade_train(&posts, &labels, "Atheism", &cfg, res).unwrap();
    // every nonempty subset of the vocabulary, in vocabulary order
    for mask in 1u32..(1 << vocab.len()) {
        let words: Vec<&str> = (0..vocab.len()).filter(|k| mask & (1 << k) != 0).map(|k| vocab[k]).collect();
        let p = post(&words);
        let x = model.stage1_pipeline.transform(&p, res).l2_normalized();
        let m1 = model.stage1.margin(&x).unwrap();
        let label = model.predict(&p, res).unwrap();
        if m1 < 0.0 {
            assert_eq!(label, N, "{words:?}");
        } else {
            assert_ne!(label, N, "{words:?}");
        }
    }
    for (p, l) in posts.iter().zip(&labels) {
        assert_eq!(model.predict(p, res).unwrap(), *l);
    }
}

#[test]
fn model_file_round_trip_preserves_predictions() {
    let posts: Vec<PreparedPost> = (0..30)
        .map(|i| post(&[["yes", "no", "maybe"][i % 3], "common"]))
        .collect();
    let labels: Vec<StanceLabel> = (0..30).map(|i| [F, A, N][i % 3]).collect();
    let res = FeatureResources::default();
    let specs = vec![FeatureSpec::WordNgrams { min: 1, max: 2 }, FeatureSpec::Surface];
    let m = PipelineModel::train(&specs, &posts, &labels, "Atheism", &SvmTrainConfig::default(), res).unwrap();
    let artifact = SvmArtifact::OneVsRest(m);
    let json = artifact.to_json("cafe").unwrap();
    let (back, hash) = SvmArtifact::from_json(&json).unwrap();
    assert_eq!(hash, "cafe");
    assert_eq!(back, artifact);
    for p in &posts {
        assert_eq!(back.predict(p, res).unwrap(), artifact.predict(p, res).unwrap());
    }
    let tampered = json.replace("\"format_version\":1", "\"format_version\":9");
    assert!(SvmArtifact::from_json(&tampered).is_err());
}
