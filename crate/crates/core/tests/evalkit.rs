use midtune::encoder::{DualEncoder, EncoderConfig, Side};
use midtune::evalkit::{
    alignment_report, generate_synthetic_corpus, pearson, spearman, train_probe, EvalError, ProbeConfig,
    SyntheticSpec,
};
use midtune::linearize::{build_vocab, encode, linearize_form, linearize_sentence};
use midtune::rng::seeded;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// Average ranks straight from the definition: 1 + #smaller + (#equal - 1) / 2.
fn naive_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let smaller = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

proptest! {
    #[test]
    fn correlations_are_symmetric_and_affine_invariant(
        xy in (3usize..40).prop_flat_map(|n| (
            prop::collection::vec(-8i32..8, n),
            prop::collection::vec(-100.0f64..100.0, n),
        )),
        a in 0.1f64..20.0,
        b in -50.0f64..50.0,
    ) {
        let x: Vec<f64> = xy.0.iter().map(|&v| v as f64 / 2.0).collect();
        let y = xy.1;
        let (Ok(p), Ok(s)) = (pearson(&x, &y), spearman(&x, &y)) else { return Ok(()) };
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&p));
        prop_assert!((pearson(&y, &x).unwrap() - p).abs() < 1e-12);
        let xt: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((pearson(&xt, &y).unwrap() - p).abs() < 1e-10);
        prop_assert!((spearman(&xt, &y).unwrap() - s).abs() < 1e-12);
        let oracle = pearson(&naive_ranks(&x), &naive_ranks(&y)).unwrap();
        prop_assert!((s - oracle).abs() < 1e-12);
    }
}

#[test]
fn degenerate_inputs() {
    assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(EvalError::Degenerate(_))));
    assert!(matches!(pearson(&[1.0], &[1.0]), Err(EvalError::Input(_))));
    assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
}

fn blobs(n: usize, sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = seeded(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let c = i % 3;
        x.push((0..8).map(|j| if j == c { sep } else { 0.0 } + rng.gen_range(-1.0..1.0)).collect());
        y.push(c);
    }
    (x, y)
}

#[test]
fn probe_separates_blobs() {
    let (x, y) = blobs(150, 6.0, 1);
    let r = train_probe(&x, &y, &ProbeConfig::default()).unwrap();
    assert!(r.accuracy >= 0.95, "{r:?}");
    assert_eq!(r.fold_accuracies.len(), 5);
    assert_eq!(r.n_classes, 3);
}

#[test]
fn probe_on_shuffled_labels_is_near_chance() {
    let (x, mut y) = blobs(300, 6.0, 2);
    y.shuffle(&mut seeded(3));
    let r = train_probe(&x, &y, &ProbeConfig::default()).unwrap();
    assert!(r.accuracy < 0.5, "{r:?}");
}

#[test]
fn probe_on_identical_embeddings_scores_the_majority_rate() {
    let x = vec![vec![0.5, -1.0, 2.0]; 40];
    let y: Vec<usize> = (0..40).map(|i| usize::from(i % 4 == 0)).collect();
    let r = train_probe(&x, &y, &ProbeConfig::default()).unwrap();
    assert!((r.majority_rate - 0.75).abs() < 1e-12);
    assert!((r.accuracy - r.majority_rate).abs() < 1e-12, "{r:?}");
}

#[test]
fn probe_does_not_touch_its_inputs() {
    let (x, y) = blobs(60, 3.0, 4);
    let (x0, y0) = (x.clone(), y.clone());
    train_probe(&x, &y, &ProbeConfig::default()).unwrap();
    assert_eq!(x, x0);
    assert_eq!(y, y0);
}

#[test]
fn single_class_probe_is_degenerate() {
    let (x, _) = blobs(20, 3.0, 5);
    assert!(matches!(train_probe(&x, &[1; 20], &ProbeConfig::default()), Err(EvalError::Degenerate(_))));
}

#[test]
fn untrained_model_retrieval_is_near_chance() {
    let recs = generate_synthetic_corpus(&SyntheticSpec::new(100, 8)).unwrap();
    let mut seqs = Vec::new();
    for r in &recs {
        seqs.push(linearize_sentence(&r.text).unwrap());
        seqs.extend(r.forms.iter().map(|f| linearize_form(f).unwrap()));
    }
    let vocab = build_vocab(seqs, 1);
    let model = DualEncoder::init(EncoderConfig::toy(vocab.len()), true).unwrap();
    let rep = alignment_report(&model, &recs, &vocab, 128, 1).unwrap();
    assert_eq!(rep.pairs, 100);
    assert!(rep.retrieval_at_1 <= 0.05, "{}", rep.retrieval_at_1);
}

#[test]
fn tied_encoders_agree_on_identical_input() {
    let recs = generate_synthetic_corpus(&SyntheticSpec::new(5, 9)).unwrap();
    let vocab = build_vocab(recs.iter().map(|r| linearize_sentence(&r.text).unwrap()), 1);
    let model = DualEncoder::init(EncoderConfig::toy(vocab.len()), true).unwrap();
    let x = encode(&linearize_sentence(&recs[0].text).unwrap(), &vocab, 128).unwrap();
    let a = model.encode_sequence(Side::Sentence, &x).unwrap();
    let b = model.encode_sequence(Side::Form, &x).unwrap();
    assert_eq!(a.euclidean(&b), 0.0);
}
