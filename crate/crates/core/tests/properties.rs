use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use delib::asr::{wer, edit_distance, AsrErrorModel, AsrStub, AsrTier};
use delib::corpus::UtteranceRecord;
use delib::datagen::{generate_corpus, split, DatagenConfig, Grammar, generate_dataset};
use delib::eval::score;
use delib::parse::{exact_match, normalize, parse_annotation, serialize, Child, OntologySymbol, ParseNode};
use delib::tensor::{Graph, Tensor};
use delib::tokenizer::build_vocab;
use delib::training::{build_pairs, Strategy as PairStrategy};

const WORDS: [&str; 8] = ["play", "Jacques", "station", "to", "the", "park", "Eagles", "game"];

/// Random trees obeying the alternation rule: intents hold slots and
/// words, slots hold words or a single nested intent.
fn tree(depth: u32) -> BoxedStrategy<ParseNode> {
    let word = prop::sample::select(&WORDS[..]).prop_map(|w| Child::Text(w.to_string()));
    let label = prop::sample::select(&["A", "PLAY_MUSIC", "GET_EVENT", "X_Y"][..]);
    let leaf_slot = (label.clone(), prop::collection::vec(word.clone(), 0..3))
        .prop_map(|(l, kids)| ParseNode::new(OntologySymbol::slot(l).unwrap(), kids).unwrap());
    let slot = if depth == 0 {
        leaf_slot.boxed()
    } else {
        let nested = (label.clone(), tree(depth - 1))
            .prop_map(|(l, inner)| ParseNode::new(OntologySymbol::slot(l).unwrap(), vec![Child::Node(inner)]).unwrap());
        prop_oneof![3 => leaf_slot, 1 => nested].boxed()
    };
    let child = prop_oneof![word, slot.prop_map(Child::Node)];
    (label, prop::collection::vec(child, 0..4))
        .prop_map(|(l, kids)| ParseNode::new(OntologySymbol::intent(l).unwrap(), kids).unwrap())
        .boxed()
}

fn record(i: usize, err: bool) -> UtteranceRecord {
    UtteranceRecord {
        id: format!("u{i}"),
        audio: Vec::new(),
        ref_text: "a b".into(),
        hyp_text: if err { "a c".into() } else { "a b".into() },
        annotation: "[IN:A ]".into(),
        has_asr_error: err,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn parse_round_trip(t in tree(2)) {
        let s = serialize(&t);
        let back = parse_annotation(&s).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(serialize(&back), s);
    }

    #[test]
    fn single_bracket_deletion_is_rejected(t in tree(2), pick in any::<prop::sample::Index>()) {
        let s = serialize(&t);
        let brackets: Vec<usize> = s.char_indices().filter(|(_, c)| *c == '[' || *c == ']').map(|(i, _)| i).collect();
        let cut = brackets[pick.index(brackets.len())];
        let mutant = format!("{}{}", &s[..cut], &s[cut + 1..]);
        prop_assert!(parse_annotation(&mutant).is_err(), "accepted {}", mutant);
    }

    #[test]
    fn exact_match_reflexive_and_symmetric(a in "[ a-zA-Z\\[\\]:.!?]{0,24}", b in "[ a-zA-Z\\[\\]:.!?]{0,24}") {
        prop_assert!(exact_match(&a, &a));
        prop_assert!(exact_match(&a, &normalize(&a)));
        prop_assert_eq!(exact_match(&a, &b), exact_match(&b, &a));
    }

    #[test]
    fn wer_zero_on_identity_and_distance_subadditive(
        x in prop::collection::vec(0u8..4, 1..10),
        y in prop::collection::vec(0u8..4, 0..10),
        u in prop::collection::vec(10u8..14, 1..10),
        v in prop::collection::vec(10u8..14, 0..10),
    ) {
        prop_assert_eq!(wer(&x, &x).unwrap(), 0.0);
        // Aligning segment by segment is one admissible alignment of the
        // concatenation, so the joint distance never exceeds the sum.
        let xu: Vec<u8> = x.iter().chain(&u).copied().collect();
        let yv: Vec<u8> = y.iter().chain(&v).copied().collect();
        prop_assert!(edit_distance(&yv, &xu) <= edit_distance(&y, &x) + edit_distance(&v, &u));
        let doubled: Vec<u8> = x.iter().chain(&x).copied().collect();
        prop_assert_eq!(edit_distance(&doubled, &xu), edit_distance(&x, &u));
    }

    #[test]
    fn corrupt_is_reproducible(seed in any::<u64>(), rate in 0.0f64..0.5) {
        let model = AsrErrorModel::for_target_wer(rate, Default::default(), vec!["uh".into()]).unwrap();
        let words: Vec<String> = WORDS.iter().map(|w| w.to_string()).collect();
        prop_assert_eq!(model.corrupt(&words, seed), model.corrupt(&words, seed));
    }

    #[test]
    fn union_count_is_records_plus_errorful(flags in prop::collection::vec(any::<bool>(), 0..60)) {
        let records: Vec<_> = flags.iter().enumerate().map(|(i, &e)| record(i, e)).collect();
        let errors = flags.iter().filter(|&&e| e).count();
        prop_assert_eq!(build_pairs(&records, PairStrategy::Union).len(), records.len() + errors);
        prop_assert_eq!(build_pairs(&records, PairStrategy::Ref).len(), records.len());
        prop_assert_eq!(build_pairs(&records, PairStrategy::Hyp).len(), records.len());
    }

    #[test]
    fn overall_em_is_weighted_bucket_mean(cases in prop::collection::vec((any::<bool>(), any::<bool>()), 1..80)) {
        let records: Vec<_> = cases.iter().enumerate().map(|(i, &(e, _))| record(i, e)).collect();
        let preds: Vec<String> = cases.iter().map(|&(_, hit)| if hit { "[IN:A ]" } else { "[IN:B ]" }.to_string()).collect();
        let r = score(&records, &preds).unwrap();
        prop_assert_eq!(r.no_error.n + r.error.n, r.overall.n);
        let weighted = (r.no_error.em() * r.no_error.n as f64 + r.error.em() * r.error.n as f64) / r.overall.n as f64;
        prop_assert!((r.em_overall() - weighted).abs() < 1e-15);
        for b in [r.overall, r.no_error, r.error] {
            prop_assert!((0.0..=1.0).contains(&b.em()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn vocabulary_is_deterministic_and_round_trips(seed in any::<u64>(), pieces in 60usize..160) {
        let grammar = Grammar::builtin();
        let records = generate_corpus(&grammar, 80, 0.3, seed).unwrap();
        let corpus: Vec<&str> = records.iter().map(|r| r.ref_text.as_str()).collect();
        let ontology = grammar.ontology();
        let a = build_vocab(&corpus, pieces, &ontology).unwrap();
        let b = build_vocab(&corpus, pieces, &ontology).unwrap();
        prop_assert_eq!(a.to_file_string(), b.to_file_string());
        for s in &corpus {
            prop_assert_eq!(a.decode(&a.encode(s)), *s);
        }
        for id in 0..a.len() {
            prop_assert!(!(a.is_text_id(id) && a.is_ontology_id(id)));
        }
    }

    #[test]
    fn generated_records_parse_and_splits_partition(seed in any::<u64>()) {
        let grammar = Grammar::builtin();
        let records = generate_corpus(&grammar, 60, 0.3, seed).unwrap();
        for r in &records {
            prop_assert!(parse_annotation(&r.annotation).is_ok());
        }
        let ids: BTreeSet<String> = records.iter().map(|r| r.id.clone()).collect();
        let parts = split(records, [0.7, 0.15, 0.15], seed).unwrap();
        let mut seen = BTreeSet::new();
        for part in &parts {
            for r in part {
                prop_assert!(seen.insert(r.id.clone()), "{} in two splits", r.id);
            }
        }
        prop_assert_eq!(seen, ids);
    }
}

#[test]
fn corpus_statistics_reproducible_per_seed() {
    let config = DatagenConfig {
        train: 40,
        valid: 10,
        test: 10,
        ..DatagenConfig::default()
    };
    let grammar = config.load_grammar().unwrap();
    let a = generate_dataset(&grammar, &config, 9).unwrap();
    let b = generate_dataset(&grammar, &config, 9).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.test, b.test);
    assert_eq!(a.train_mismatched, b.train_mismatched);
    let c = generate_dataset(&grammar, &config, 10).unwrap();
    assert_ne!(a.train, c.train);
}

#[test]
fn stub_encoders_produce_no_parameter_gradients() {
    let stub = AsrStub::new(AsrTier::Tier1, 30, 6, 8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let frames = Tensor::matrix(9, 6, (0..54).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect()).unwrap();
    let mut g = Graph::new(stub.audio.params());
    let x = g.variable(frames);
    let y = stub.audio.forward(&mut g, x).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.params().count(), 0);
    assert!(grads.var(x).is_some_and(|d| d.iter().any(|&v| v != 0.0)));

    let mut g = Graph::new(stub.text.params());
    let ids: Vec<usize> = (0..5).map(|_| rand::Rng::gen_range(&mut rng, 4..30)).collect();
    let y = stub.text.forward(&mut g, &ids).unwrap();
    let s = g.sum(y);
    // Nothing upstream of the text encoder requires a gradient.
    let grads = g.backward(s).map(|gr| gr.params().count()).unwrap_or(0);
    assert_eq!(grads, 0);
}
