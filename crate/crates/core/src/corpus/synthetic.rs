//! Sentence-parallel synthetic corpora with controlled bytes-per-word.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusDoc, CorpusError, ScriptId};

struct Inventory {
    consonants: &'static [char],
    vowels: &'static [char],
}

const LATIN: Inventory = Inventory {
    consonants: &[
        'b', 'c', 'd', 'f', 'g', 'h', 'j', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z',
    ],
    vowels: &['a', 'e', 'i', 'o', 'u'],
};

const CYRILLIC: Inventory = Inventory {
    consonants: &[
        'б', 'в', 'г', 'д', 'ж', 'з', 'к', 'л', 'м', 'н', 'п', 'р', 'с', 'т', 'ф', 'х', 'ц', 'ч', 'ш',
    ],
    vowels: &['а', 'е', 'и', 'о', 'у', 'ы', 'э', 'ю', 'я'],
};

// Telugu consonants and dependent vowel signs.
const INDIC: Inventory = Inventory {
    consonants: &[
        'క', 'ఖ', 'గ', 'ఘ', 'చ', 'ఛ', 'జ', 'ఝ', 'ట', 'ఠ', 'డ', 'ఢ', 'ణ', 'త', 'థ', 'ద', 'ధ', 'న',
        'ప', 'ఫ', 'బ', 'భ', 'మ', 'య', 'ర', 'ల', 'వ', 'శ', 'ష', 'స', 'హ',
    ],
    vowels: &['ా', 'ి', 'ీ', 'ు', 'ూ', 'ె', 'ే', 'ై', 'ొ', 'ో', 'ౌ'],
};

fn inventory(script: ScriptId) -> Result<&'static Inventory, CorpusError> {
    match script {
        ScriptId::LATIN => Ok(&LATIN),
        ScriptId::CYRILLIC => Ok(&CYRILLIC),
        ScriptId::INDIC => Ok(&INDIC),
        other => Err(CorpusError::UnsupportedScript(other)),
    }
}

/// UTF-8 width shared by every codepoint of the script's inventory.
pub fn codepoint_width(script: ScriptId) -> Result<usize, CorpusError> {
    let inv = inventory(script)?;
    Ok(inv.consonants[0].len_utf8())
}

/// Parameters of a synthetic parallel corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_sentences: usize,
    pub words_per_sentence: usize,
    pub bytes_per_word: BTreeMap<ScriptId, usize>,
    /// Distinct words per script; sentences index into a shared word list.
    pub lexicon_size: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n_sentences: usize, words_per_sentence: usize, bytes_per_word: BTreeMap<ScriptId, usize>, seed: u64) -> Self {
        SyntheticSpec {
            n_sentences,
            words_per_sentence,
            bytes_per_word,
            lexicon_size: 128,
            seed,
        }
    }

    /// Language label used for documents of `script`.
    pub fn lang_label(script: ScriptId) -> String {
        format!("syn-{script}")
    }

    pub fn generate(&self) -> Result<Vec<CorpusDoc>, CorpusError> {
        if self.words_per_sentence == 0 || self.lexicon_size == 0 {
            return Err(CorpusError::InvalidArgument(
                "words_per_sentence and lexicon_size must be positive".into(),
            ));
        }
        let mut lexicons = Vec::new();
        for (&script, &bytes) in &self.bytes_per_word {
            let width = codepoint_width(script)?;
            if bytes == 0 || bytes % width != 0 {
                return Err(CorpusError::UnrealizableLength { script, bytes, width });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(script.0 as u64 + 1)));
            let inv = inventory(script)?;
            let words: Vec<String> = (0..self.lexicon_size)
                .map(|_| make_word(inv, bytes / width, &mut rng))
                .collect();
            lexicons.push((script, words));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut docs = Vec::with_capacity(self.n_sentences * lexicons.len());
        for _ in 0..self.n_sentences {
            let picks: Vec<usize> = (0..self.words_per_sentence)
                .map(|_| rng.gen_range(0..self.lexicon_size))
                .collect();
            for (script, words) in &lexicons {
                let text = picks
                    .iter()
                    .map(|&i| words[i].as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                docs.push(CorpusDoc {
                    text,
                    lang: Self::lang_label(*script),
                    script: *script,
                });
            }
        }
        Ok(docs)
    }
}

fn make_word(inv: &Inventory, codepoints: usize, rng: &mut ChaCha8Rng) -> String {
    let mut word = String::new();
    for i in 0..codepoints {
        let pool = if i % 2 == 0 { inv.consonants } else { inv.vowels };
        word.push(pool[rng.gen_range(0..pool.len())]);
    }
    word
}

/// One document per script per sentence, words drawn from per-script
/// syllable lexicons. Deterministic in `seed`.
pub fn gen_synthetic_parallel(
    n_sentences: usize,
    words_per_sentence: usize,
    bytes_per_word: &BTreeMap<ScriptId, usize>,
    seed: u64,
) -> Result<Vec<CorpusDoc>, CorpusError> {
    SyntheticSpec::new(n_sentences, words_per_sentence, bytes_per_word.clone(), seed).generate()
}
