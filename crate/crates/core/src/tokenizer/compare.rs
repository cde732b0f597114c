use serde::Serialize;

use super::model::TokenizerModel;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FragmentationRow {
    pub term: String,
    pub tokens_a: Vec<String>,
    pub tokens_b: Vec<String>,
    pub count_a: usize,
    pub count_b: usize,
}

/// Per-term token counts under two tokenizers.
///
/// Means are `None` when there are no terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FragmentationReport {
    pub rows: Vec<FragmentationRow>,
    pub mean_tokens_a: Option<f64>,
    pub mean_tokens_b: Option<f64>,
}

impl FragmentationReport {
    /// `mean_tokens_a - mean_tokens_b`, when defined.
    pub fn mean_difference(&self) -> Option<f64> {
        Some(self.mean_tokens_a? - self.mean_tokens_b?)
    }
}

pub fn compare_tokenizers<S: AsRef<str>>(
    model_a: &TokenizerModel,
    model_b: &TokenizerModel,
    terms: &[S],
) -> FragmentationReport {
    let pieces = |m: &TokenizerModel, term: &str| -> Vec<String> {
        m.encode(term)
            .ids
            .iter()
            .map(|&id| m.token_text(id).expect("encoded ids are in vocab"))
            .collect()
    };
    let rows: Vec<FragmentationRow> = terms
        .iter()
        .map(|t| {
            let term = t.as_ref();
            let tokens_a = pieces(model_a, term);
            let tokens_b = pieces(model_b, term);
            FragmentationRow {
                term: term.to_string(),
                count_a: tokens_a.len(),
                count_b: tokens_b.len(),
                tokens_a,
                tokens_b,
            }
        })
        .collect();
    let mean = |f: fn(&FragmentationRow) -> usize| {
        (!rows.is_empty()).then(|| rows.iter().map(f).sum::<usize>() as f64 / rows.len() as f64)
    };
    FragmentationReport {
        mean_tokens_a: mean(|r| r.count_a),
        mean_tokens_b: mean(|r| r.count_b),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::TokenizerTrainConfig;

    fn cfg() -> TokenizerTrainConfig {
        TokenizerTrainConfig {
            vocab_size: 400,
            special_tokens: vec![],
            ..Default::default()
        }
    }

    #[test]
    fn no_terms_leaves_means_undefined() {
        let m = TokenizerModel::byte_level(cfg()).unwrap();
        let r = compare_tokenizers(&m, &m, &Vec::<String>::new());
        assert!(r.rows.is_empty());
        assert_eq!(r.mean_tokens_a, None);
        assert_eq!(r.mean_difference(), None);
    }

    #[test]
    fn same_model_gives_equal_counts() {
        let m = TokenizerModel::from_merges(cfg(), &[(b"t".to_vec(), b"h".to_vec())]).unwrap();
        let r = compare_tokenizers(&m, &m, &["thrombin", "myocardium", ""]);
        assert!(r.rows.iter().all(|row| row.count_a == row.count_b));
        assert_eq!(r.mean_difference(), Some(0.0));
    }

    #[test]
    fn whole_word_versus_three_pieces() {
        let b = |s: &str| s.as_bytes().to_vec();
        // a: merges build "probiotic" completely
        let whole = TokenizerModel::from_merges(
            cfg(),
            &[
                (b("p"), b("r")),
                (b("pr"), b("o")),
                (b("b"), b("i")),
                (b("bi"), b("o")),
                (b("t"), b("i")),
                (b("ti"), b("c")),
                (b("pro"), b("bio")),
                (b("probio"), b("tic")),
            ],
        )
        .unwrap();
        // b: stops at "pro" / "bio" / "tic"
        let split = TokenizerModel::from_merges(
            cfg(),
            &[
                (b("p"), b("r")),
                (b("pr"), b("o")),
                (b("b"), b("i")),
                (b("bi"), b("o")),
                (b("t"), b("i")),
                (b("ti"), b("c")),
            ],
        )
        .unwrap();
        let r = compare_tokenizers(&whole, &split, &["probiotic"]);
        assert_eq!(r.rows[0].count_a, 1);
        assert_eq!(r.rows[0].count_b, 3);
        assert_eq!(r.rows[0].tokens_b, vec!["pro", "bio", "tic"]);
        assert_eq!(r.mean_difference(), Some(-2.0));
    }
}
