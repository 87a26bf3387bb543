use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusDoc, CorpusError, ScriptId, Vocab};

/// A padded matrix of token IDs; every row is one script, tag first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Row-major `rows x width` token IDs, padded with `pad_id`.
    pub tokens: Vec<u32>,
    pub width: usize,
    pub scripts: Vec<ScriptId>,
    /// Valid length of each row, tag included.
    pub lengths: Vec<usize>,
    pub pad_id: u32,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    /// Valid (unpadded) IDs of row `i`.
    pub fn row(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.width..i * self.width + self.lengths[i]]
    }

    pub fn is_pad(&self, i: usize, j: usize) -> bool {
        j >= self.lengths[i]
    }
}

/// How documents of one script are laid out in rows.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Packing {
    /// Shuffled documents are concatenated and cut every `max_len` bytes.
    #[default]
    Concat,
    /// Every document starts a fresh row; only long documents are split.
    PerDocument,
}

/// Packs documents into single-script rows of at most `max_len` content bytes.
///
/// Documents of one script are shuffled, concatenated and cut at codepoint
/// boundaries; each row gets the script tag prepended. Rows from all scripts
/// are then shuffled and chunked into batches. Fully determined by `seed`.
pub fn make_batches(
    docs: &[CorpusDoc],
    max_len: usize,
    batch_size: usize,
    seed: u64,
    vocab: &Vocab,
) -> Result<Vec<Batch>, CorpusError> {
    make_batches_with(docs, max_len, batch_size, seed, vocab, Packing::Concat)
}

pub fn make_batches_with(
    docs: &[CorpusDoc],
    max_len: usize,
    batch_size: usize,
    seed: u64,
    vocab: &Vocab,
    packing: Packing,
) -> Result<Vec<Batch>, CorpusError> {
    if max_len < 2 {
        return Err(CorpusError::InvalidArgument(format!("max_len {max_len} < 2")));
    }
    if batch_size == 0 {
        return Err(CorpusError::InvalidArgument("batch_size must be positive".into()));
    }
    if docs.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_script: BTreeMap<ScriptId, Vec<&CorpusDoc>> = BTreeMap::new();
    for doc in docs {
        by_script.entry(doc.script).or_default().push(doc);
    }

    let mut rows: Vec<(ScriptId, Vec<u32>)> = Vec::new();
    for (script, mut group) in by_script {
        group.shuffle(&mut rng);
        let tag = vocab.tag_id(script);
        let streams: Vec<String> = match packing {
            Packing::Concat => vec![group.iter().map(|d| d.text.as_str()).collect()],
            Packing::PerDocument => group.iter().map(|d| d.text.clone()).collect(),
        };
        for stream in &streams {
            split_rows(stream, max_len, |head| {
                let mut row = Vec::with_capacity(head.len() + 1);
                row.push(tag);
                row.extend(head.bytes().map(u32::from));
                rows.push((script, row));
            })?;
        }
    }
    rows.shuffle(&mut rng);

    let width = max_len + 1;
    let pad_id = vocab.pad_id();
    Ok(rows
        .chunks(batch_size)
        .map(|chunk| {
            let mut tokens = vec![pad_id; chunk.len() * width];
            for (i, (_, row)) in chunk.iter().enumerate() {
                tokens[i * width..i * width + row.len()].copy_from_slice(row);
            }
            Batch {
                tokens,
                width,
                scripts: chunk.iter().map(|(s, _)| *s).collect(),
                lengths: chunk.iter().map(|(_, r)| r.len()).collect(),
                pad_id,
            }
        })
        .collect())
}

fn split_rows(stream: &str, max_len: usize, mut emit: impl FnMut(&str)) -> Result<(), CorpusError> {
    let mut rest = stream;
    while !rest.is_empty() {
        let mut cut = rest.len().min(max_len);
        while !rest.is_char_boundary(cut) {
            cut -= 1;
        }
        if cut == 0 {
            return Err(CorpusError::InvalidArgument(format!(
                "max_len {max_len} is shorter than one codepoint"
            )));
        }
        let (head, tail) = rest.split_at(cut);
        emit(head);
        rest = tail;
    }
    Ok(())
}
