//! Writing-script identifiers and codepoint-block classification.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use super::CorpusError;

/// Stable integer identifier of a writing script.
///
/// The integer doubles as the index of the script's tag in the vocabulary
/// (`256 + id`) and as the routing key for boundary predictors.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScriptId(pub u16);

impl ScriptId {
    pub const LATIN: ScriptId = ScriptId(0);
    pub const CYRILLIC: ScriptId = ScriptId(1);
    pub const INDIC: ScriptId = ScriptId(2);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ScriptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ScriptId::LATIN => f.write_str("latin"),
            ScriptId::CYRILLIC => f.write_str("cyrillic"),
            ScriptId::INDIC => f.write_str("indic"),
            ScriptId(n) => write!(f, "script{n}"),
        }
    }
}

/// One registered script: its name and the codepoint ranges counted as its letters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub name: String,
    pub blocks: Vec<(u32, u32)>,
}

impl ScriptEntry {
    fn contains(&self, cp: u32) -> bool {
        self.blocks.iter().any(|&(lo, hi)| lo <= cp && cp <= hi)
    }
}

/// Static mapping from Unicode block ranges to scripts.
///
/// | script   | ranges                                                      |
/// |----------|-------------------------------------------------------------|
/// | latin    | A-Z, a-z, U+00C0-U+024F (minus × ÷), U+1E00-U+1EFF          |
/// | cyrillic | U+0400-U+052F, U+1C80-U+1C8F, U+2DE0-U+2DFF, U+A640-U+A69F  |
/// | indic    | U+0900-U+0DFF (Devanagari through Sinhala), U+A8E0-U+A8FF   |
///
/// Whitespace, ASCII digits and punctuation, Latin-1 symbols, combining
/// diacritics, general punctuation (including ZWJ/ZWNJ) and currency signs
/// are script-neutral. Further scripts are added with [`ScriptTable::register`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptTable {
    entries: Vec<ScriptEntry>,
}

const LATIN_BLOCKS: &[(u32, u32)] = &[
    (0x41, 0x5A),
    (0x61, 0x7A),
    (0xC0, 0xD6),
    (0xD8, 0xF6),
    (0xF8, 0x24F),
    (0x1E00, 0x1EFF),
];
const CYRILLIC_BLOCKS: &[(u32, u32)] = &[
    (0x400, 0x52F),
    (0x1C80, 0x1C8F),
    (0x2DE0, 0x2DFF),
    (0xA640, 0xA69F),
];
const INDIC_BLOCKS: &[(u32, u32)] = &[(0x900, 0xDFF), (0xA8E0, 0xA8FF)];

const NEUTRAL_BLOCKS: &[RangeInclusive<u32>] = &[
    0xA0..=0xBF,
    0xD7..=0xD7,
    0xF7..=0xF7,
    0x300..=0x36F,
    0x2000..=0x206F,
    0x20A0..=0x20CF,
    0x3000..=0x3000,
    0xFEFF..=0xFEFF,
];

impl Default for ScriptTable {
    fn default() -> Self {
        let entry = |name: &str, blocks: &[(u32, u32)]| ScriptEntry {
            name: name.to_string(),
            blocks: blocks.to_vec(),
        };
        ScriptTable {
            entries: vec![
                entry("latin", LATIN_BLOCKS),
                entry("cyrillic", CYRILLIC_BLOCKS),
                entry("indic", INDIC_BLOCKS),
            ],
        }
    }
}

impl ScriptTable {
    /// Adds a script and returns its id. Ranges overlapping an existing
    /// script are rejected so that classification stays a function.
    pub fn register(&mut self, name: &str, blocks: Vec<(u32, u32)>) -> Result<ScriptId, CorpusError> {
        if self.by_name(name).is_some() {
            return Err(CorpusError::DuplicateScript(name.to_string()));
        }
        for &(lo, hi) in &blocks {
            if lo > hi || self.entries.iter().any(|e| e.blocks.iter().any(|&(a, b)| lo <= b && a <= hi)) {
                return Err(CorpusError::DuplicateScript(name.to_string()));
            }
        }
        self.entries.push(ScriptEntry {
            name: name.to_string(),
            blocks,
        });
        Ok(ScriptId((self.entries.len() - 1) as u16))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ScriptId> + '_ {
        (0..self.entries.len()).map(|i| ScriptId(i as u16))
    }

    pub fn name(&self, id: ScriptId) -> Option<&str> {
        self.entries.get(id.index()).map(|e| e.name.as_str())
    }

    pub fn by_name(&self, name: &str) -> Option<ScriptId> {
        let name = name.to_ascii_lowercase();
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| ScriptId(i as u16))
    }

    /// Script owning `c`, `None` for neutral characters.
    pub fn classify(&self, c: char) -> Result<Option<ScriptId>, CorpusError> {
        let cp = c as u32;
        if let Some(i) = self.entries.iter().position(|e| e.contains(cp)) {
            return Ok(Some(ScriptId(i as u16)));
        }
        if is_neutral(c) {
            Ok(None)
        } else {
            Err(CorpusError::UnknownScript { codepoint: cp })
        }
    }

    /// Majority script of `text` over its script-bearing codepoints.
    ///
    /// A tie between the two leading scripts, or a runner-up holding more
    /// than 10% of the letters, is reported as [`CorpusError::AmbiguousScript`].
    pub fn detect(&self, text: &str) -> Result<ScriptId, CorpusError> {
        let mut counts: BTreeMap<ScriptId, usize> = BTreeMap::new();
        for c in text.chars() {
            if let Some(id) = self.classify(c)? {
                *counts.entry(id).or_default() += 1;
            }
        }
        let total: usize = counts.values().sum();
        if total == 0 {
            return Err(CorpusError::NoScriptLetters);
        }
        let mut ranked: Vec<(ScriptId, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let (best, best_n) = ranked[0];
        if let Some(&(second, second_n)) = ranked.get(1) {
            // second_n / total > 0.1
            if second_n == best_n || second_n * 10 > total {
                return Err(CorpusError::AmbiguousScript {
                    first: best,
                    second,
                });
            }
        }
        Ok(best)
    }
}

fn is_neutral(c: char) -> bool {
    if c.is_ascii() {
        return !c.is_ascii_alphabetic();
    }
    if c.is_whitespace() {
        return true;
    }
    let cp = c as u32;
    NEUTRAL_BLOCKS.iter().any(|r| r.contains(&cp))
}

/// [`ScriptTable::detect`] against the built-in table.
pub fn detect_script(text: &str) -> Result<ScriptId, CorpusError> {
    ScriptTable::default().detect(text)
}
