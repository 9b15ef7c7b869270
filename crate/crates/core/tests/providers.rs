mod common;

use common::{bigram_pair, CLEAN_WORDS, TOXIC_WORDS};
use detox_core::providers::{
    DistributionProvider, NgramModel, ProviderError, TableProvider, TokenizerMode, Vocabulary,
};
use detox_core::TokenId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_probs(got: &[f64], want: &[f64]) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
    }
}

#[test]
fn bigram_counts_match_the_counting_oracle() {
    // Exact fractions from tests/oracles/ngram_oracle.py.
    let m = NgramModel::train("a b a b a", 2, 1.0, TokenizerMode::Whitespace).unwrap();
    let v = m.vocabulary();
    assert_eq!(v.tokens(), &["<eos>", "<unk>", "a", "b"]);
    let (eos, a, b) = (v.eos(), v.id_of("a").unwrap(), v.id_of("b").unwrap());
    assert_eq!(m.count(&[a], b), 2);
    assert_eq!(m.count(&[a], eos), 1);
    assert_eq!(m.count(&[b], a), 2);
    assert_probs(&m.next_probs(&[a]).unwrap(), &[2.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0, 3.0 / 7.0]);
    assert_probs(&m.next_probs(&[b]).unwrap(), &[1.0 / 6.0, 1.0 / 6.0, 0.5, 1.0 / 6.0]);
    assert_probs(&m.next_probs(&[eos]).unwrap(), &[0.2, 0.2, 0.4, 0.2]);
    let logits = m.next_logits(&[a]).unwrap();
    assert!((logits[3] - (3.0f64 / 7.0).ln()).abs() < 1e-15);
}

#[test]
fn trigram_counts_match_the_counting_oracle() {
    let m = NgramModel::train("x y z\nx y x", 3, 0.5, TokenizerMode::Whitespace).unwrap();
    let v = m.vocabulary();
    let id = |t: &str| v.id_of(t).unwrap();
    let ninth = 1.0 / 9.0;
    assert_probs(
        &m.next_probs(&[id("x"), id("y")]).unwrap(),
        &[ninth, ninth, 1.0 / 3.0, ninth, 1.0 / 3.0],
    );
    assert_probs(
        &m.next_probs(&[v.eos(), id("x")]).unwrap(),
        &[ninth, ninth, ninth, 5.0 / 9.0, ninth],
    );
}

#[test]
fn minimal_corpus() {
    let m = NgramModel::train("x", 1, 1.0, TokenizerMode::Whitespace).unwrap();
    assert_eq!(m.vocabulary().tokens(), &["<eos>", "<unk>", "x"]);
}

#[test]
fn training_errors() {
    let ws = TokenizerMode::Whitespace;
    assert!(matches!(NgramModel::train("", 2, 1.0, ws), Err(ProviderError::Parameter(_))));
    assert!(matches!(NgramModel::train("\n  \n", 2, 1.0, ws), Err(ProviderError::Parameter(_))));
    assert!(NgramModel::train("a", 0, 1.0, ws).is_err());
    assert!(NgramModel::train("a", 6, 1.0, ws).is_err());
    assert!(NgramModel::train("a", 2, 0.0, ws).is_err());
    assert!(NgramModel::train("a", 2, f64::NAN, ws).is_err());
}

#[test]
fn same_file_gives_byte_identical_models() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, "the cat sat\non the mat\nthe end\n").unwrap();
    let ws = TokenizerMode::Whitespace;
    let a = NgramModel::train_file(&corpus, 3, 0.5, ws, None).unwrap();
    let b = NgramModel::train_file(&corpus, 3, 0.5, ws, None).unwrap();
    let (pa, pb) = (dir.path().join("a.ngram"), dir.path().join("b.ngram"));
    a.save(&pa).unwrap();
    b.save(&pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    assert_eq!(NgramModel::load(&pa).unwrap(), a);
}

#[test]
fn serialisation_round_trips_for_every_order_and_mode() {
    for order in 1..=5 {
        for mode in [TokenizerMode::Whitespace, TokenizerMode::Char] {
            let m = NgramModel::train("say \"hi\"\tthere\nü ö ß", order, 0.25, mode).unwrap();
            let back = NgramModel::from_text(&m.to_text()).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_text(), m.to_text());
        }
    }
}

#[test]
fn malformed_model_files_are_rejected_with_a_line() {
    let good = NgramModel::train("a b", 2, 1.0, TokenizerMode::Whitespace)
        .unwrap()
        .to_text();
    let cases = [
        good.replace("detox-ngram v1", "detox-ngram v9"),
        good.replace("order 2", "order x"),
        good.replace("order 2", "order 7"),
        good.replace("smoothing_k 1", "smoothing_k -1"),
        good.replace("\nend\n", "\n"),
        good.replace("level 1 ", "level 3 "),
        good.lines().take(4).collect::<Vec<_>>().join("\n"),
    ];
    for bad in cases {
        match NgramModel::from_text(&bad) {
            Err(ProviderError::Format { .. }) => {}
            other => panic!("expected a format error for\n{bad}\ngot {other:?}"),
        }
    }
}

#[test]
fn providers_are_pure_and_normalised() {
    let (base, toxic) = bigram_pair();
    let table = TableProvider::new(
        base.vocabulary().clone(),
        (0..base.vocab_size()).map(|i| (i % 7) as f64 * 0.3).collect(),
    )
    .unwrap();
    let providers: [&dyn DistributionProvider; 3] = [&base, &toxic, &table];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for p in providers {
        for _ in 0..200 {
            let len = rng.random_range(0..6);
            let ctx: Vec<TokenId> = (0..len)
                .map(|_| rng.random_range(0..p.vocab_size() as TokenId))
                .collect();
            let a = p.next_logits(&ctx).unwrap();
            assert_eq!(a, p.next_logits(&ctx).unwrap());
            assert_eq!(a.len(), p.vocab_size());
            let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = a.iter().map(|v| (v - m).exp()).sum();
            let sum: f64 = a.iter().map(|v| (v - m).exp() / z).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        assert!(matches!(
            p.next_logits(&[p.vocab_size() as TokenId]),
            Err(ProviderError::TokenOutOfRange { .. })
        ));
    }
}

#[test]
fn toxic_model_prefers_lexicon_words() {
    let (base, toxic) = bigram_pair();
    let v = base.vocabulary();
    let ctx = [v.id_of("a").unwrap()];
    let pb = base.next_probs(&ctx).unwrap();
    let pt = toxic.next_probs(&ctx).unwrap();
    for w in TOXIC_WORDS {
        let i = v.id_of(w).unwrap() as usize;
        assert!(pt[i] > pb[i], "{w}");
    }
    for w in CLEAN_WORDS {
        let i = v.id_of(w).unwrap() as usize;
        assert!(pt[i] < pb[i], "{w}");
    }
    assert_eq!(base.tokenizer_id(), toxic.tokenizer_id());
}

#[test]
fn untrained_contexts_back_off() {
    let m = NgramModel::train("a b c\nc b a", 3, 1.0, TokenizerMode::Whitespace).unwrap();
    let v = m.vocabulary();
    let id = |t: &str| v.id_of(t).unwrap();
    // (a, a) was never seen but (a) was.
    assert_eq!(m.next_logits(&[id("a"), id("a")]).unwrap(), m.next_logits(&[id("a")]).unwrap());
    // Nothing follows <unk>, so only the unigram level is left.
    assert_eq!(m.next_logits(&[v.unk()]).unwrap(), m.next_logits(&[]).unwrap());
}

#[test]
fn table_rows_use_the_longest_suffix() {
    let v = Vocabulary::from_tokens(TokenizerMode::Whitespace, ["a", "b"]);
    let uniform = TableProvider::uniform(v.clone());
    let logits = uniform.next_logits(&[2, 3]).unwrap();
    assert!(logits.iter().all(|l| *l == logits[0]));

    let t = TableProvider::uniform(v.clone())
        .with_row(vec![3], vec![1.0, 0.0, 0.0, 0.0])
        .unwrap()
        .with_row(vec![2, 3], vec![2.0, 0.0, 0.0, 0.0])
        .unwrap();
    assert_eq!(t.next_logits(&[3]).unwrap()[0], 1.0);
    assert_eq!(t.next_logits(&[3, 3]).unwrap()[0], 1.0);
    assert_eq!(t.next_logits(&[2, 3]).unwrap()[0], 2.0);
    assert_eq!(t.next_logits(&[2]).unwrap()[0], 0.0);

    assert!(TableProvider::new(v.clone(), vec![0.0; 3]).is_err());
    assert!(TableProvider::new(v, vec![0.0, 0.0, f64::NAN, 0.0]).is_err());
}

#[test]
fn vocabulary_behaviour() {
    let v = Vocabulary::from_tokens(TokenizerMode::Char, ["b", "a"]);
    assert_eq!(v.tokens(), &["<eos>", "<unk>", "a", "b"]);
    assert_eq!(v.encode("abz"), vec![2, 3, 1]);
    assert_eq!(v.decode(&[2, 3, 0]).unwrap(), "ab");
    assert!(v.decode(&[9]).is_err());
    assert_ne!(
        v.tokenizer_id(),
        Vocabulary::from_tokens(TokenizerMode::Whitespace, ["a", "b"]).tokenizer_id()
    );
    assert!(Vocabulary::from_ordered(TokenizerMode::Char, vec!["a".into(), "b".into()]).is_err());
    assert_eq!("char".parse::<TokenizerMode>().unwrap(), TokenizerMode::Char);
    assert!("bpe".parse::<TokenizerMode>().is_err());
}
