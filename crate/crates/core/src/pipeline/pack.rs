use super::PipelineError;

/// Joins documents with `separator` and cuts the stream into full windows of
/// `seq_len` tokens. The trailing partial window is dropped.
pub fn pack_corpus<D: AsRef<[u32]>>(
    docs: &[D],
    separator: u32,
    seq_len: usize,
) -> Result<Vec<Vec<u32>>, PipelineError> {
    if seq_len == 0 {
        return Err(PipelineError::Config("sequence length must be positive".into()));
    }
    let docs: Vec<&[u32]> = docs.iter().map(|d| d.as_ref()).filter(|d| !d.is_empty()).collect();
    if docs.is_empty() {
        return Err(PipelineError::Input("corpus has no tokens".into()));
    }
    let mut stream = Vec::with_capacity(docs.iter().map(|d| d.len() + 1).sum());
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            stream.push(separator);
        }
        stream.extend_from_slice(d);
    }
    if stream.len() < seq_len {
        log::warn!(
            "corpus of {} tokens is shorter than one {seq_len}-token window; nothing to train on",
            stream.len()
        );
    }
    Ok(stream.chunks_exact(seq_len).map(<[u32]>::to_vec).collect())
}
