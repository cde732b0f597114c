use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use super::model::{TokenId, TokenizerModel};
use super::pretokenize::{pretokenize, split_specials, Segment};
use super::{TokenizerError, TokenizerTrainConfig};

type Pair = (TokenId, TokenId);

/// Heap entry: highest count first, then the lexicographically smallest
/// `(left, right)` token texts.
#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: Vec<u8>,
    right: Vec<u8>,
    pair: Pair,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Word {
    symbols: Vec<TokenId>,
    count: u64,
}

fn pair_counts(symbols: &[TokenId]) -> HashMap<Pair, u64> {
    let mut out = HashMap::new();
    for w in symbols.windows(2) {
        *out.entry((w[0], w[1])).or_insert(0) += 1;
    }
    out
}

fn merge_symbols(symbols: &[TokenId], pair: Pair, out_id: TokenId) -> Vec<TokenId> {
    let mut merged = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            merged.push(out_id);
            i += 2;
        } else {
            merged.push(symbols[i]);
            i += 1;
        }
    }
    merged
}

/// Counts every pre-token of the corpus, keyed by its bytes.
fn word_counts<I, D>(corpus: I, config: &TokenizerTrainConfig) -> HashMap<Vec<u8>, u64>
where
    I: IntoIterator<Item = D>,
    D: AsRef<str>,
{
    let specials: Vec<Vec<u8>> = config
        .special_tokens
        .iter()
        .map(|s| s.as_bytes().to_vec())
        .collect();
    let mut counts: HashMap<Vec<u8>, u64> = HashMap::new();
    for doc in corpus {
        let text = doc.as_ref().as_bytes();
        for (si, seg) in split_specials(text, &specials).into_iter().enumerate() {
            let Segment::Text(range) = seg else {
                continue;
            };
            let mut piece = text[range.clone()].to_vec();
            if config.add_prefix_space && si == 0 && range.start == 0 {
                piece.insert(0, b' ');
            }
            for pre in pretokenize(&piece) {
                *counts.entry(piece[pre.range].to_vec()).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Learns merges by repeatedly adopting the most frequent adjacent pair.
///
/// Pair frequencies are weighted by pre-token frequency. Training stops when
/// the vocabulary reaches `vocab_size`, when the best pair occurs fewer than
/// `min_frequency` times, or when no pair is left. Ties go to the pair whose
/// `(left, right)` texts sort first, so the result depends only on the
/// multiset of pre-tokens.
pub fn train_tokenizer<I, D>(
    corpus: I,
    config: &TokenizerTrainConfig,
) -> Result<TokenizerModel, TokenizerError>
where
    I: IntoIterator<Item = D>,
    D: AsRef<str>,
{
    config.validate()?;
    let mut model = TokenizerModel::byte_level(config.clone())?;

    let mut entries: Vec<(Vec<u8>, u64)> = word_counts(corpus, config).into_iter().collect();
    entries.sort();
    let mut words: Vec<Word> = entries
        .into_iter()
        .map(|(bytes, count)| Word {
            symbols: bytes.iter().map(|&b| b as TokenId).collect(),
            count,
        })
        .collect();

    let mut counts: HashMap<Pair, u64> = HashMap::new();
    let mut occurs: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (wi, word) in words.iter().enumerate() {
        for (pair, n) in pair_counts(&word.symbols) {
            *counts.entry(pair).or_insert(0) += n * word.count;
            occurs.entry(pair).or_default().insert(wi);
        }
    }

    let mut heap = BinaryHeap::new();
    let candidate = |model: &TokenizerModel, pair: Pair, count: u64| Candidate {
        count,
        left: model.token_bytes(pair.0).unwrap().to_vec(),
        right: model.token_bytes(pair.1).unwrap().to_vec(),
        pair,
    };
    for (&pair, &count) in &counts {
        heap.push(candidate(&model, pair, count));
    }

    let special_bytes: Vec<&[u8]> = config.special_tokens.iter().map(|s| s.as_bytes()).collect();
    while model.vocab_size() < config.vocab_size {
        let Some(best) = heap.pop() else {
            break;
        };
        // stale entry: the pair's count changed after this was pushed
        if counts.get(&best.pair).copied() != Some(best.count) {
            continue;
        }
        if best.count < config.min_frequency {
            break;
        }
        let mut merged_bytes = best.left.clone();
        merged_bytes.extend_from_slice(&best.right);
        if special_bytes.contains(&merged_bytes.as_slice()) {
            counts.remove(&best.pair);
            continue;
        }
        // a pair can reappear when a later merge re-creates an existing token;
        // it then reuses its rule instead of adding a new one
        let out_id = match model.merge_output(best.pair) {
            Some(id) => id,
            None => model.push_merge(best.pair.0, best.pair.1)?,
        };
        counts.remove(&best.pair);

        let mut affected: Vec<usize> = occurs
            .remove(&best.pair)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        let mut changed: HashSet<Pair> = HashSet::new();
        for wi in affected {
            let word = &mut words[wi];
            let merged = merge_symbols(&word.symbols, best.pair, out_id);
            if merged.len() == word.symbols.len() {
                continue;
            }
            let before = pair_counts(&word.symbols);
            let after = pair_counts(&merged);
            word.symbols = merged;
            let mut keys: Vec<Pair> = before.keys().chain(after.keys()).copied().collect();
            keys.sort_unstable();
            keys.dedup();
            for pair in keys {
                if pair == best.pair {
                    continue;
                }
                let b = before.get(&pair).copied().unwrap_or(0);
                let a = after.get(&pair).copied().unwrap_or(0);
                if a == b {
                    continue;
                }
                let c = counts.entry(pair).or_insert(0);
                *c = *c + a * word.count - b * word.count;
                changed.insert(pair);
                if a == 0 {
                    if let Some(set) = occurs.get_mut(&pair) {
                        set.remove(&wi);
                    }
                } else {
                    occurs.entry(pair).or_default().insert(wi);
                }
            }
        }
        let mut changed: Vec<Pair> = changed.into_iter().collect();
        changed.sort_unstable();
        for pair in changed {
            match counts.get(&pair).copied() {
                Some(0) | None => {
                    counts.remove(&pair);
                }
                Some(c) => heap.push(candidate(&model, pair, c)),
            }
        }
    }
    log::debug!(
        "trained tokenizer: {} tokens, {} merges",
        model.vocab_size(),
        model.num_merges()
    );
    Ok(model)
}

/// Reads a corpus from a file or a directory tree.
///
/// Every non-empty line is one document. Directory entries are visited in
/// sorted path order so the document stream is deterministic.
pub fn read_corpus(path: &Path) -> Result<Vec<String>, TokenizerError> {
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    let mut docs = Vec::new();
    for file in files {
        let text = fs::read_to_string(&file)
            .map_err(|e| TokenizerError::Input(format!("{}: {e}", file.display())))?;
        docs.extend(
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string),
        );
    }
    Ok(docs)
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<(), TokenizerError> {
    let meta = fs::metadata(path)
        .map_err(|e| TokenizerError::Input(format!("{}: {e}", path.display())))?;
    if meta.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| TokenizerError::Input(format!("{}: {e}", path.display())))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(|e| TokenizerError::Input(format!("{}: {e}", path.display())))?;
    entries.sort();
    for entry in entries {
        collect_files(&entry, out)?;
    }
    Ok(())
}
