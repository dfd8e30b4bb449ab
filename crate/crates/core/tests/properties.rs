//! Properties of the public API checked on generated inputs.

use std::collections::BTreeMap;

use proptest::prelude::*;

use mlmkit::batching::{apply_dynamic_masking, pack_full_sentences, MaskPolicy};
use mlmkit::bbpe::{train_bbpe, ByteVocab};
use mlmkit::corpus::{
    block_shuffle, ingest_conllu, kfold_split, write_conllu, Corpus, Document, EntitySpan, Sentence, Token,
};
use mlmkit::heads::{
    crf_decode, crf_log_partition, crf_path_score, decode_tree, CrfScores, DepArcScores, RootConstraint,
};
use mlmkit::metrics::span_f1;
use mlmkit::neural::{adam_step, AdamConfig, AdamState, ParamSet, Tensor};

fn word() -> impl Strategy<Value = String> {
    "[abcdeěščřž]{1,6}"
}

fn sentence() -> impl Strategy<Value = Sentence> {
    prop::collection::vec(word(), 1..8).prop_map(|w| Sentence::from_forms(&w))
}

fn corpus() -> impl Strategy<Value = Corpus> {
    prop::collection::vec(prop::collection::vec(sentence(), 1..6), 1..4).prop_map(|docs| {
        Corpus::new(
            docs.into_iter()
                .enumerate()
                .map(|(i, s)| Document::new(format!("d{i}"), s))
                .collect(),
        )
    })
}

fn id_count(vocab: &ByteVocab, corpus: &Corpus) -> usize {
    corpus.sentences().map(|s| vocab.encode(&s.text()).ids.len()).sum()
}

fn annotated_sentence() -> impl Strategy<Value = Sentence> {
    prop::collection::vec(
        (
            word(),
            word(),
            "(NOUN|VERB|ADJ|ADP)",
            "[A-Z]{2}",
            prop::option::of("(Case=Nom|Case=Gen\\|Number=Sing)"),
        ),
        1..7,
    )
    .prop_flat_map(|rows| {
        let n = rows.len();
        (Just(rows), prop::collection::vec(0..=n, n))
    })
    .prop_map(|(rows, heads)| {
        let mut s = Sentence::from_forms(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>());
        for (tok, ((_, lemma, upos, xpos, feats), head)) in s.tokens.iter_mut().zip(rows.into_iter().zip(heads)) {
            let feats = feats.map(|f| {
                f.split('|')
                    .map(|kv| {
                        let (k, v) = kv.split_once('=').unwrap();
                        (k.to_string(), v.to_string())
                    })
                    .collect()
            });
            *tok = Token {
                lemma: Some(lemma),
                upos: Some(upos),
                xpos: Some(xpos),
                ufeats: feats,
                head: Some(head),
                deprel: Some(if head == 0 { "root".into() } else { "dep".into() }),
                ..Token::new(tok.form.clone())
            };
        }
        s
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conllu_write_then_read_is_identity(sentences in prop::collection::vec(annotated_sentence(), 1..5)) {
        let corpus = Corpus::from_sentences(sentences);
        let text = write_conllu(&corpus);
        let back = ingest_conllu(text.as_bytes()).unwrap();
        prop_assert_eq!(write_conllu(&back), text);
        prop_assert_eq!(back.token_count(), corpus.token_count());
    }

    #[test]
    fn block_shuffle_keeps_every_sentence(sentences in prop::collection::vec(sentence(), 1..30), max_words in 1usize..20, seed: u64) {
        let doc = Document::new("d", sentences);
        let shuffled = block_shuffle(&doc, max_words, seed);
        let key = |d: &Document| {
            let mut v: Vec<String> = d.sentences.iter().map(Sentence::text).collect();
            v.sort();
            v
        };
        prop_assert_eq!(key(&shuffled), key(&doc));
        prop_assert_eq!(&block_shuffle(&doc, max_words, seed), &shuffled);
    }

    #[test]
    fn kfold_test_parts_partition_the_items(n in 2usize..80, k in 2usize..11, seed: u64) {
        prop_assume!(k <= n);
        let ids: Vec<usize> = (0..n).collect();
        let folds = kfold_split(&ids, k, 0.1, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut tested = vec![0; n];
        for f in &folds {
            for &i in &f.test_ids {
                tested[i] += 1;
            }
            let mut all: Vec<usize> = f.train_ids.iter().chain(&f.dev_ids).chain(&f.test_ids).copied().collect();
            all.sort();
            prop_assert_eq!(all, ids.clone(), "fold parts must be disjoint and cover every item");
            let rest = (f.train_ids.len() + f.dev_ids.len()) as f64;
            prop_assert_eq!(f.dev_ids.len(), (0.1 * rest).round() as usize);
        }
        prop_assert!(tested.iter().all(|&c| c == 1));
        prop_assert_eq!(kfold_split(&ids, k, 0.1, seed).unwrap(), folds);
    }

    #[test]
    fn tokenizer_inventory_replays_from_merges(c in corpus(), cap in 261usize..400) {
        let vocab = train_bbpe(&c, cap).unwrap();
        prop_assert!(vocab.len() <= cap);
        let mut replayed: Vec<Vec<u8>> = ByteVocab::bytes_only().tokens().to_vec();
        for m in vocab.merges() {
            prop_assert_eq!(m.result as usize, replayed.len());
            let mut joined = replayed[m.left as usize].clone();
            joined.extend_from_slice(&replayed[m.right as usize]);
            replayed.push(joined);
        }
        prop_assert_eq!(replayed.as_slice(), vocab.tokens());
    }

    #[test]
    fn larger_vocabularies_never_lengthen_their_corpus(c in corpus(), small in 261usize..320, extra in 1usize..80) {
        let a = train_bbpe(&c, small).unwrap();
        let b = train_bbpe(&c, small + extra).unwrap();
        prop_assert!(id_count(&b, &c) <= id_count(&a, &c));
        for s in c.sentences() {
            let text = s.text();
            prop_assert_eq!(b.decode(&b.encode(&text).ids).unwrap(), text);
        }
    }

    #[test]
    fn masking_corrupts_only_selected_ordinary_positions(c in corpus(), p in 0.05f64..0.9, seed: u64) {
        let vocab = train_bbpe(&c, 300).unwrap();
        let samples = pack_full_sentences(&c, &vocab, 32).unwrap();
        for (i, s) in samples.iter().enumerate() {
            let row = apply_dynamic_masking(s, &vocab, p, MaskPolicy::default(), seed ^ i as u64);
            prop_assert_eq!(&row, &apply_dynamic_masking(s, &vocab, p, MaskPolicy::default(), seed ^ i as u64));
            for (pos, (&orig, &input)) in s.ids.iter().zip(&row.input_ids).enumerate() {
                let selected = row.mask_positions.contains(&pos);
                prop_assert_eq!(row.targets[pos], selected.then_some(orig));
                if selected {
                    prop_assert!(!vocab.is_special(orig));
                } else {
                    prop_assert_eq!(input, orig);
                }
            }
        }
    }

    #[test]
    fn log_partition_dominates_every_path(
        n in 1usize..7,
        l in 1usize..5,
        values in prop::collection::vec(-4.0f64..4.0, 6 * 4 + 16),
        path_seed in prop::collection::vec(0usize..4, 6),
    ) {
        let emissions = (0..n).map(|t| (0..l).map(|j| values[t * 4 + j]).collect()).collect();
        let transitions = (0..l).map(|i| (0..l).map(|j| values[24 + i * 4 + j]).collect()).collect();
        let scores = CrfScores { emissions, transitions };
        let z = crf_log_partition(&scores, None);
        let path: Vec<usize> = path_seed[..n].iter().map(|&j| j % l).collect();
        prop_assert!(z + 1e-12 >= crf_path_score(&scores, &path));
        let best = crf_decode(&scores, None);
        prop_assert!(crf_path_score(&scores, &best) + 1e-12 >= crf_path_score(&scores, &path));
        prop_assert!(z + 1e-12 >= crf_path_score(&scores, &best));
    }

    #[test]
    fn decoded_trees_are_arborescences(n in 1usize..15, values in prop::collection::vec(-5.0f64..5.0, 16 * 15), single: bool) {
        let arcs: Vec<Vec<f64>> = (0..=n).map(|h| (0..n).map(|d| values[h * 15 + d]).collect()).collect();
        let root = if single { RootConstraint::Single } else { RootConstraint::Any };
        let tree = decode_tree(&DepArcScores { arcs, labels: Vec::new() }, root);
        prop_assert_eq!(tree.heads.len(), n);
        for d in 1..=n {
            let mut node = d;
            for _ in 0..=n {
                if node == 0 {
                    break;
                }
                prop_assert!(tree.heads[node - 1] != node);
                node = tree.heads[node - 1];
            }
            prop_assert_eq!(node, 0, "token {} does not reach the root", d);
        }
        let root_children = tree.heads.iter().filter(|&&h| h == 0).count();
        prop_assert!(root_children >= 1);
        if single {
            prop_assert_eq!(root_children, 1);
        }
    }

    #[test]
    fn span_scores_move_the_right_way(
        gold in prop::collection::vec((0usize..6, 0usize..4, 0usize..2), 0..6),
        system in prop::collection::vec((0usize..6, 0usize..4, 0usize..2), 0..6),
        pick in 0usize..6,
    ) {
        let spans = |v: &[(usize, usize, usize)]| -> Vec<EntitySpan> {
            v.iter().map(|&(s, w, l)| EntitySpan::new(s + 1, s + 1 + w, ["PER", "LOC"][l])).collect()
        };
        let (gold, system) = (spans(&gold), spans(&system));
        let base = span_f1(&gold, &system);
        prop_assert!((0.0..=1.0).contains(&base.f1()));
        prop_assert!(base.correct <= base.system_total.min(base.gold_total));

        let count = |set: &[EntitySpan], s: &EntitySpan| set.iter().filter(|x| *x == s).count();
        if let Some(missing) = gold.iter().cycle().skip(pick).take(gold.len()).find(|g| count(&system, g) < count(&gold, g)) {
            let mut more = system.clone();
            more.push(missing.clone());
            prop_assert!(span_f1(&gold, &more).f1() >= base.f1());
        }
        let wrong = EntitySpan::new(50, 51, "ORG");
        let mut more = system.clone();
        more.push(wrong);
        prop_assert!(span_f1(&gold, &more).precision() <= base.precision());
    }

    #[test]
    fn lazy_and_plain_adam_agree_on_dense_gradients(
        rows in 1usize..5,
        cols in 1usize..5,
        grads in prop::collection::vec(prop::collection::vec(prop_oneof![-2.0f64..-0.01, 0.01f64..2.0], 16), 3),
    ) {
        let run = |lazy: bool| {
            let mut params = ParamSet::new();
            params.insert("emb", Tensor::new(vec![rows, cols], (0..rows * cols).map(|i| i as f64 * 0.1).collect()));
            let mut state = AdamState::new();
            let config = AdamConfig { lazy, ..AdamConfig::default() };
            for g in &grads {
                params.get_mut("emb").unwrap().grad = Some(g[..rows * cols].to_vec());
                adam_step(&mut params, &mut state, &config, 1e-2).unwrap();
            }
            params.get("emb").unwrap().values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(true), run(false));
    }
}

#[test]
fn packing_is_deterministic_and_bounded() {
    let text = include_str!("../../../data/corpus.txt");
    let corpus = mlmkit::corpus::ingest_plaintext(text.as_bytes(), mlmkit::corpus::DocSeparator::BlankLine).unwrap();
    let vocab = train_bbpe(&corpus, 600).unwrap();
    let a = pack_full_sentences(&corpus, &vocab, 48).unwrap();
    assert_eq!(a, pack_full_sentences(&corpus, &vocab, 48).unwrap());
    let specials = vocab.specials();
    let mut per_id: BTreeMap<u32, usize> = BTreeMap::new();
    for s in &a {
        assert!(s.ids.len() <= 48);
        assert_eq!((s.ids[0], *s.ids.last().unwrap()), (specials.bos, specials.eos));
        for &id in &s.ids[1..s.ids.len() - 1] {
            *per_id.entry(id).or_default() += 1;
        }
    }
    let direct: usize = corpus.sentences().map(|s| vocab.encode(&s.text()).ids.len()).sum();
    assert_eq!(
        per_id.values().sum::<usize>(),
        direct,
        "every sentence is packed once, none truncated"
    );
}
