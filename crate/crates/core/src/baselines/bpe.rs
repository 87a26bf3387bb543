//! Byte-level BPE over documents sampled by language weight.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BaselineError, SamplingWeights};

type Pair = (u32, u32);

/// Ordered merges over the 256 byte ids. Merge `r` creates id `256 + r`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<Pair>,
    vocab: Vec<Vec<u8>>,
    ranks: HashMap<Pair, u32>,
}

#[derive(Serialize, Deserialize)]
struct BpeFile {
    merges: Vec<Pair>,
    vocab: Vec<Vec<u8>>,
}

impl Default for BpeModel {
    fn default() -> Self {
        Self::from_merges(Vec::new()).expect("empty merge list is valid")
    }
}

impl BpeModel {
    /// Rebuilds the vocabulary from `merges`; each pair may only reference earlier ids.
    pub fn from_merges(merges: Vec<Pair>) -> Result<Self, BaselineError> {
        let mut vocab: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (r, &(a, b)) in merges.iter().enumerate() {
            let n = vocab.len() as u32;
            if a >= n || b >= n {
                return Err(BaselineError::InvalidBpe(format!("merge {r} references unknown id ({a}, {b})")));
            }
            if ranks.insert((a, b), r as u32).is_some() {
                return Err(BaselineError::InvalidBpe(format!("merge {r} repeats ({a}, {b})")));
            }
            let mut bytes = vocab[a as usize].clone();
            bytes.extend_from_slice(&vocab[b as usize]);
            vocab.push(bytes);
        }
        Ok(BpeModel { merges, vocab, ranks })
    }

    pub fn merges(&self) -> &[Pair] {
        &self.merges
    }

    pub fn vocab(&self) -> &[Vec<u8>] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Applies merges in rank order; every occurrence of the best pair is
    /// merged left to right before the next rank is considered.
    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        let mut seq: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        loop {
            let best = seq
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let pair = self.merges[rank as usize];
            seq = merge_pair(&seq, pair, 256 + rank);
        }
        seq
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>, BaselineError> {
        let mut out = Vec::new();
        for &id in ids {
            let piece = self
                .vocab
                .get(id as usize)
                .ok_or_else(|| BaselineError::InvalidBpe(format!("unknown token id {id}")))?;
            out.extend_from_slice(piece);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&BpeFile { merges: self.merges.clone(), vocab: self.vocab.clone() })
            .expect("plain data serializes")
    }

    /// Parses `{"merges": [...], "vocab": [...]}`; the vocab must match the merges.
    pub fn from_json(s: &str) -> Result<Self, BaselineError> {
        let file: BpeFile = serde_json::from_str(s).map_err(|e| BaselineError::InvalidBpe(e.to_string()))?;
        let model = Self::from_merges(file.merges)?;
        if model.vocab != file.vocab {
            return Err(BaselineError::InvalidBpe("vocab does not match the merge list".into()));
        }
        Ok(model)
    }
}

fn merge_pair(seq: &[u32], pair: Pair, new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

/// One training document with the language it belongs to.
#[derive(Clone, Debug)]
pub struct BpeDoc<'a> {
    pub lang: &'a str,
    pub bytes: &'a [u8],
}

#[derive(Clone, Debug)]
pub struct BpeTrainConfig {
    pub target_vocab: usize,
    /// Number of documents drawn (with replacement) into the training stream.
    pub samples: usize,
    pub seed: u64,
}

/// Draws `cfg.samples` documents: a language by `weights`, then a document
/// uniformly within it. Returns distinct document indices with multiplicity.
pub fn sample_documents(
    docs: &[BpeDoc<'_>],
    weights: &SamplingWeights,
    samples: usize,
    seed: u64,
) -> Result<BTreeMap<usize, u64>, BaselineError> {
    let mut by_lang: Vec<Vec<usize>> = vec![Vec::new(); weights.langs.len()];
    for (i, d) in docs.iter().enumerate() {
        let li = weights
            .langs
            .iter()
            .position(|l| l == d.lang)
            .ok_or_else(|| BaselineError::InvalidArgument(format!("document language {} has no sampling weight", d.lang)))?;
        by_lang[li].push(i);
    }
    let q: Vec<f64> = weights
        .q
        .iter()
        .zip(&by_lang)
        .map(|(&q, ds)| if ds.is_empty() { 0.0 } else { q })
        .collect();
    let lang_dist = WeightedIndex::new(&q).map_err(|_| BaselineError::InvalidArgument("no sampled language has documents".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = BTreeMap::new();
    for _ in 0..samples {
        let ds = &by_lang[lang_dist.sample(&mut rng)];
        *picked.entry(ds[rng.gen_range(0..ds.len())]).or_insert(0) += 1;
    }
    Ok(picked)
}

/// Greedy merging of the most frequent adjacent pair (ties to the lowest
/// pair) until the vocabulary holds `target_vocab` entries. Stops early with
/// a warning once no pair occurs at least twice.
pub fn bpe_train(docs: &[BpeDoc<'_>], weights: &SamplingWeights, cfg: &BpeTrainConfig) -> Result<BpeModel, BaselineError> {
    if cfg.target_vocab < 256 {
        return Err(BaselineError::InvalidArgument(format!("target_vocab {} below the 256 byte ids", cfg.target_vocab)));
    }
    let picked = sample_documents(docs, weights, cfg.samples, cfg.seed)?;
    let stream: Vec<(Vec<u32>, u64)> = picked
        .into_iter()
        .map(|(i, n)| (docs[i].bytes.iter().map(|&b| b as u32).collect(), n))
        .collect();
    train_on_stream(stream, cfg.target_vocab)
}

fn train_on_stream(mut seqs: Vec<(Vec<u32>, u64)>, target_vocab: usize) -> Result<BpeModel, BaselineError> {
    let mut counts: HashMap<Pair, u64> = HashMap::new();
    let mut where_: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (i, (s, n)) in seqs.iter().enumerate() {
        for w in s.windows(2) {
            *counts.entry((w[0], w[1])).or_default() += n;
            where_.entry((w[0], w[1])).or_default().insert(i);
        }
    }
    let mut heap: BinaryHeap<(u64, Reverse<Pair>)> = counts.iter().map(|(&p, &c)| (c, Reverse(p))).collect();
    let mut merges = Vec::new();

    while 256 + merges.len() < target_vocab {
        let best = loop {
            match heap.pop() {
                None => break None,
                Some((c, Reverse(p))) if counts.get(&p) == Some(&c) => break Some((c, p)),
                Some(_) => continue,
            }
        };
        let Some((c, pair)) = best.filter(|&(c, _)| c >= 2) else {
            if merges.is_empty() && target_vocab > 256 {
                return Err(BaselineError::CorpusTooSmall { merges: 0, target: target_vocab });
            }
            log::warn!(
                "bpe: no pair occurs twice after {} merges; stopping below target vocab {target_vocab}",
                merges.len()
            );
            break;
        };
        debug_assert!(c >= 2);
        let new_id = 256 + merges.len() as u32;
        merges.push(pair);

        let mut touched: Vec<usize> = where_.remove(&pair).unwrap_or_default().into_iter().collect();
        touched.sort_unstable();
        let mut changed: HashSet<Pair> = HashSet::new();
        for i in touched {
            let (s, n) = &seqs[i];
            let n = *n;
            for w in s.windows(2) {
                let p = (w[0], w[1]);
                let e = counts.get_mut(&p).expect("pair was counted");
                *e -= n;
                changed.insert(p);
            }
            let merged = merge_pair(s, pair, new_id);
            for w in s.windows(2) {
                if let Some(set) = where_.get_mut(&(w[0], w[1])) {
                    set.remove(&i);
                }
            }
            for w in merged.windows(2) {
                let p = (w[0], w[1]);
                *counts.entry(p).or_default() += n;
                where_.entry(p).or_default().insert(i);
                changed.insert(p);
            }
            seqs[i].0 = merged;
        }
        counts.remove(&pair);
        for p in changed {
            match counts.get(&p) {
                Some(&0) => {
                    counts.remove(&p);
                    where_.remove(&p);
                }
                Some(&c) => heap.push((c, Reverse(p))),
                None => {}
            }
        }
    }
    BpeModel::from_merges(merges)
}
