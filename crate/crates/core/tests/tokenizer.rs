mod common;

use std::collections::HashSet;

use medlm_core::tokenizer::{
    compare_tokenizers, train_tokenizer, TokenizerModel, TokenizerTrainConfig, END_OF_TEXT,
};
use proptest::prelude::*;

fn cfg(vocab_size: usize, min_frequency: u64, specials: &[&str]) -> TokenizerTrainConfig {
    TokenizerTrainConfig {
        vocab_size,
        min_frequency,
        special_tokens: specials.iter().map(|s| s.to_string()).collect(),
        ..Default::default()
    }
}

fn merge_pairs(m: &TokenizerModel) -> Vec<(Vec<u8>, Vec<u8>)> {
    m.merges().into_iter().map(|r| (r.left, r.right)).collect()
}

const CLINICAL: &str = "thrombin cleaves fibrinogen to fibrin. the myocardium contracts. \
    probiotic supplements alter the gut flora. thrombin generation assays measure thrombin. \
    immunohistochemistry of the myocardium shows fibrin deposits.";

#[test]
fn aaab_corpus_merges_aa_then_ab() {
    let corpus = vec!["aaab aaab aaab aaab aaab".to_string()];
    let config = cfg(258, 2, &[]);
    let m = train_tokenizer(&corpus, &config).unwrap();
    let oracle = common::bpe_oracle(&corpus, 258, 2, &[]);
    let expected = vec![(b"a".to_vec(), b"a".to_vec()), (b"a".to_vec(), b"b".to_vec())];
    assert_eq!(merge_pairs(&m), expected);
    let oracle_pairs: Vec<_> = oracle.iter().map(|o| (o.left.clone(), o.right.clone())).collect();
    assert_eq!(oracle_pairs, expected);
    assert_eq!(oracle[0].count, 10);
    assert_eq!(oracle[1].count, 5);
}

#[test]
fn thrombin_becomes_one_token() {
    let corpus = vec!["thrombin ".repeat(100)];
    let m = train_tokenizer(&corpus, &cfg(256 + 7, 2, &[])).unwrap();
    assert_eq!(m.num_merges(), 7);
    assert!(m.id_of(b"thrombin").is_some());
    assert_eq!(m.encode("thrombin").len(), 1);
    // one more merge attaches the leading space variant
    let m8 = train_tokenizer(&corpus, &cfg(256 + 8, 2, &[])).unwrap();
    assert!(m8.id_of(b" thrombin").is_some());
}

#[test]
fn training_is_deterministic() {
    let corpus: Vec<String> = CLINICAL.split(". ").map(str::to_string).collect();
    let a = train_tokenizer(&corpus, &cfg(320, 2, &[END_OF_TEXT])).unwrap();
    let b = train_tokenizer(&corpus, &cfg(320, 2, &[END_OF_TEXT])).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    let mut reversed = corpus.clone();
    reversed.reverse();
    let c = train_tokenizer(&reversed, &cfg(320, 2, &[END_OF_TEXT])).unwrap();
    assert_eq!(a.to_json(), c.to_json());
}

#[test]
fn vocab_never_exceeds_budget_and_bytes_stay() {
    let corpus = vec![CLINICAL.to_string()];
    for budget in [257, 270, 300, 1000] {
        let m = train_tokenizer(&corpus, &cfg(budget, 1, &[END_OF_TEXT])).unwrap();
        assert!(m.vocab_size() <= budget);
        for b in 0..=255u8 {
            assert_eq!(m.id_of(&[b]), Some(b as u32));
        }
    }
}

#[test]
fn merge_ranks_only_reference_earlier_tokens() {
    let corpus = vec![CLINICAL.to_string()];
    let m = train_tokenizer(&corpus, &cfg(400, 2, &[])).unwrap();
    let mut known: HashSet<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    for (rank, rule) in m.merges().into_iter().enumerate() {
        assert_eq!(rule.rank, rank);
        assert!(known.contains(&rule.left), "rank {rank} left unseen");
        assert!(known.contains(&rule.right), "rank {rank} right unseen");
        known.insert([rule.left, rule.right].concat());
    }
}

#[test]
fn adopted_merges_respect_min_frequency() {
    let corpus: Vec<String> = CLINICAL.split(' ').map(str::to_string).collect();
    for min_frequency in [1, 2, 3, 5] {
        let m = train_tokenizer(&corpus, &cfg(600, min_frequency, &[])).unwrap();
        let oracle = common::bpe_oracle(&corpus, 600, min_frequency, &[]);
        assert_eq!(m.num_merges(), oracle.len());
        assert!(oracle.iter().all(|o| o.count >= min_frequency));
    }
}

#[test]
fn special_literal_encodes_to_its_id_in_place() {
    let corpus = vec![format!("alpha beta{END_OF_TEXT}gamma alpha")];
    let m = train_tokenizer(&corpus, &cfg(300, 1, &[END_OF_TEXT])).unwrap();
    let eot = m.special_id(END_OF_TEXT).unwrap();
    let text = format!("beta{END_OF_TEXT} alpha");
    let enc = m.encode(&text);
    let pos = enc.ids.iter().position(|&id| id == eot).unwrap();
    assert_eq!(enc.ids.iter().filter(|&&id| id == eot).count(), 1);
    assert_eq!(enc.offsets[pos], 4..4 + END_OF_TEXT.len());
    assert_eq!(m.decode(&enc.ids).unwrap(), text);
    for rule in m.merges() {
        assert_ne!([rule.left, rule.right].concat(), END_OF_TEXT.as_bytes());
    }
}

#[test]
fn offsets_ascend_and_skip_attached_spaces() {
    let m = train_tokenizer(vec![CLINICAL], &cfg(400, 2, &[])).unwrap();
    let text = "the  thrombin\tassay of  fibrin";
    let enc = m.encode(text);
    let mut last_end = 0;
    for (r, &id) in enc.offsets.iter().zip(&enc.ids) {
        assert!(r.start >= last_end && r.start <= r.end);
        last_end = r.end;
        let bytes = m.token_bytes(id).unwrap();
        if bytes.len() > 1 && bytes[0] == b' ' {
            // attached space excluded from the reported range
            assert_eq!(r.end - r.start, bytes.len() - 1);
            assert_ne!(text.as_bytes()[r.start], b' ');
        }
    }
}

#[test]
fn fragmentation_report_against_byte_model() {
    let corpus = vec!["thrombin ".repeat(100)];
    let trained = train_tokenizer(&corpus, &cfg(300, 2, &[])).unwrap();
    let bytes = TokenizerModel::byte_level(cfg(300, 2, &[])).unwrap();
    let report = compare_tokenizers(&trained, &bytes, &["thrombin"]);
    assert_eq!(report.rows[0].count_a, 1);
    assert_eq!(report.rows[0].count_b, 8);
    assert_eq!(report.mean_difference(), Some(-7.0));
}

#[test]
fn decode_of_encode_myocardium() {
    let m = train_tokenizer(vec![CLINICAL], &cfg(350, 2, &[])).unwrap();
    assert_eq!(m.decode(&m.encode("myocardium").ids).unwrap(), "myocardium");
}

#[test]
fn saved_model_loads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tok.json");
    let m = train_tokenizer(vec![CLINICAL], &cfg(350, 2, &[END_OF_TEXT])).unwrap();
    m.save(&path).unwrap();
    let back = TokenizerModel::load(&path).unwrap();
    assert_eq!(back.to_json(), m.to_json());
    assert_eq!(back.content_hash(), m.content_hash());
    assert_eq!(back.encode(CLINICAL), m.encode(CLINICAL));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trained_merges_match_bruteforce(seed in any::<u64>(), vocab_extra in 0usize..60, min_frequency in 1u64..4) {
        let mut rng = common::rng(seed);
        let corpus = common::random_corpus(&mut rng, 200);
        let specials = [END_OF_TEXT];
        let vocab_size = 257 + vocab_extra;
        let m = train_tokenizer(&corpus, &cfg(vocab_size, min_frequency, &specials)).unwrap();
        let oracle = common::bpe_oracle(&corpus, vocab_size, min_frequency, &[END_OF_TEXT.to_string()]);
        let oracle_pairs: Vec<_> = oracle.into_iter().map(|o| (o.left, o.right)).collect();
        prop_assert_eq!(merge_pairs(&m), oracle_pairs);
    }

    #[test]
    fn roundtrip_any_text(text in any::<String>()) {
        let m = train_tokenizer(vec![CLINICAL], &cfg(400, 2, &[END_OF_TEXT])).unwrap();
        prop_assert_eq!(m.decode(&m.encode(&text).ids).unwrap(), text);
    }
}
