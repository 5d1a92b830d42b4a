//! Pronunciation lexicon ingestion and feature decomposition.
//!
//! A lexicon maps each text token (one character or unit) to a romanized
//! pronunciation and an optional tone. Pronunciations are split into a
//! leading consonant cluster and the remaining suffix using a longest-prefix
//! match against an explicit consonant inventory, e.g. with the pinyin
//! inventory `"zhang"` splits into `"zh"` + `"ang"`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest tone category accepted in a lexicon file.
pub const MAX_TONE: u8 = 9;

/// Pronunciation assigned to vocabulary tokens that have no lexicon entry.
pub const NOPRON: &str = "<nopron>";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LexiconError {
    #[error("line {line}: duplicate token {token:?}")]
    DuplicateToken { line: usize, token: String },
    #[error("line {line}: malformed pronunciation {pron:?} (only lowercase a-z allowed)")]
    MalformedPronunciation { line: usize, pron: String },
    #[error("line {line}: token {token:?} has no tone but the lexicon is tonal")]
    MissingTone { line: usize, token: String },
    #[error("line {line}: invalid tone {tone:?} (expected 1..={max})", max = MAX_TONE)]
    InvalidTone { line: usize, tone: String },
    #[error("line {line}: expected `token<TAB>pronunciation[<TAB>tone]`")]
    MalformedLine { line: usize },
    #[error("line {line}: malformed consonant {consonant:?}")]
    MalformedConsonant { line: usize, consonant: String },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("lexicon is empty")]
    Empty,
}

fn is_romanized(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase())
}

/// One dictionary line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub token: String,
    pub pron: String,
    pub tone: Option<u8>,
}

/// Ordered set of consonant strings used for the consonant/suffix split.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConsonantInventory {
    consonants: Vec<String>,
}

impl ConsonantInventory {
    pub fn new<I, S>(consonants: I) -> Result<Self, LexiconError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out: Vec<String> = Vec::new();
        for (i, c) in consonants.into_iter().enumerate() {
            let c = c.into();
            if !is_romanized(&c) {
                return Err(LexiconError::MalformedConsonant { line: i + 1, consonant: c });
            }
            if !out.contains(&c) {
                out.push(c);
            }
        }
        Ok(Self { consonants: out })
    }

    /// Parses an inventory file: one consonant per line, `#` comments.
    pub fn parse(source: &str) -> Result<Self, LexiconError> {
        let mut out: Vec<String> = Vec::new();
        for (i, raw) in source.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !is_romanized(line) {
                return Err(LexiconError::MalformedConsonant { line: i + 1, consonant: line.to_string() });
            }
            if !out.iter().any(|c| c == line) {
                out.push(line.to_string());
            }
        }
        Ok(Self { consonants: out })
    }

    /// Standard Mandarin pinyin initials.
    pub fn pinyin() -> Self {
        Self::parse(PINYIN_INVENTORY).expect("bundled inventory is valid")
    }

    pub fn consonants(&self) -> &[String] {
        &self.consonants
    }

    pub fn is_empty(&self) -> bool {
        self.consonants.is_empty()
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for c in &self.consonants {
            s.push_str(c);
            s.push('\n');
        }
        s
    }

    /// Longest consonant prefix of `pron` that leaves a non-empty suffix.
    ///
    /// A pronunciation consisting solely of a consonant (syllabic "m", "ng")
    /// is treated as vowel-initial so the suffix stays non-empty.
    pub fn split<'a>(&self, pron: &'a str) -> (&'a str, &'a str) {
        let best = self
            .consonants
            .iter()
            .filter(|c| c.len() < pron.len() && pron.starts_with(c.as_str()))
            .map(String::len)
            .max()
            .unwrap_or(0);
        pron.split_at(best)
    }
}

/// Embedding feature short-hands: word identity, pronunciation, tone,
/// leading consonant(s) and pronunciation suffix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Feature {
    W,
    P,
    T,
    C,
    V,
}

impl Feature {
    /// Canonical order used everywhere features are iterated.
    pub const ALL: [Feature; 5] = [Feature::W, Feature::P, Feature::T, Feature::C, Feature::V];

    pub fn letter(self) -> char {
        match self {
            Feature::W => 'W',
            Feature::P => 'P',
            Feature::T => 'T',
            Feature::C => 'C',
            Feature::V => 'V',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'W' => Some(Feature::W),
            'P' => Some(Feature::P),
            'T' => Some(Feature::T),
            'C' => Some(Feature::C),
            'V' => Some(Feature::V),
            _ => None,
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// The per-feature decomposition of one token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenFeatures {
    pub w: String,
    pub p: String,
    pub t: Option<u8>,
    pub c: String,
    pub v: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    entries: Vec<LexiconEntry>,
    index: HashMap<String, usize>,
    inventory: ConsonantInventory,
    tonal: bool,
}

impl Lexicon {
    /// Builds a lexicon from already-parsed entries.
    pub fn from_entries(entries: Vec<LexiconEntry>, inventory: ConsonantInventory) -> Result<Self, LexiconError> {
        let mut index = HashMap::with_capacity(entries.len());
        let tonal = entries.iter().any(|e| e.tone.is_some());
        for (i, e) in entries.iter().enumerate() {
            let line = i + 1;
            if !is_romanized(&e.pron) {
                return Err(LexiconError::MalformedPronunciation { line, pron: e.pron.clone() });
            }
            match e.tone {
                None if tonal => return Err(LexiconError::MissingTone { line, token: e.token.clone() }),
                Some(t) if t == 0 || t > MAX_TONE => {
                    return Err(LexiconError::InvalidTone { line, tone: t.to_string() })
                }
                _ => {}
            }
            if index.insert(e.token.clone(), i).is_some() {
                return Err(LexiconError::DuplicateToken { line, token: e.token.clone() });
            }
        }
        Ok(Self { entries, index, inventory, tonal })
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn inventory(&self) -> &ConsonantInventory {
        &self.inventory
    }

    pub fn is_tonal(&self) -> bool {
        self.tonal
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&LexiconEntry> {
        self.index.get(token).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Tokens in file order.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.token.as_str())
    }

    pub fn distinct_pronunciations(&self) -> usize {
        self.entries.iter().map(|e| e.pron.as_str()).collect::<HashSet<_>>().len()
    }

    pub fn extract_features(&self, token: &str) -> Result<TokenFeatures, LexiconError> {
        let entry = self.get(token).ok_or_else(|| LexiconError::UnknownToken(token.to_string()))?;
        let (c, v) = self.inventory.split(&entry.pron);
        Ok(TokenFeatures {
            w: entry.token.clone(),
            p: entry.pron.clone(),
            t: entry.tone,
            c: c.to_string(),
            v: v.to_string(),
        })
    }

    /// Value of `feature` for `token`, used as the embedding-table key.
    ///
    /// Tokens without a lexicon entry map to the reserved [`NOPRON`] value for
    /// every pronunciation feature; the W feature is always the token itself.
    pub fn feature_value(&self, token: &str, feature: Feature) -> String {
        if feature == Feature::W {
            return token.to_string();
        }
        match self.extract_features(token) {
            Ok(f) => match feature {
                Feature::W => unreachable!(),
                Feature::P => f.p,
                Feature::T => f.t.map_or_else(|| NOPRON.to_string(), |t| t.to_string()),
                Feature::C => f.c,
                Feature::V => f.v,
            },
            Err(_) => NOPRON.to_string(),
        }
    }

    /// Groups entries by pronunciation and counts group sizes.
    pub fn homophone_histogram(&self, tone_sensitive: bool) -> Result<HomophoneHistogram, LexiconError> {
        if self.entries.is_empty() {
            return Err(LexiconError::Empty);
        }
        let mut groups: HashMap<(&str, Option<u8>), usize> = HashMap::new();
        for e in &self.entries {
            let key = (e.pron.as_str(), if tone_sensitive { e.tone } else { None });
            *groups.entry(key).or_default() += 1;
        }
        let mut buckets = BTreeMap::new();
        for size in groups.into_values() {
            *buckets.entry(size).or_default() += 1;
        }
        Ok(HomophoneHistogram { buckets })
    }

    /// Serializes in the tab-separated lexicon file format.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&e.token);
            s.push('\t');
            s.push_str(&e.pron);
            if let Some(t) = e.tone {
                s.push('\t');
                s.push_str(&t.to_string());
            }
            s.push('\n');
        }
        s
    }
}

/// Small tonal Mandarin lexicon shipped with the crate.
pub const TOY_LEXICON: &str = include_str!("../data/toy_lexicon.tsv");
/// Pinyin initials in inventory-file format.
pub const PINYIN_INVENTORY: &str = include_str!("../data/pinyin_consonants.txt");

pub fn toy_lexicon() -> Lexicon {
    load_lexicon(TOY_LEXICON, ConsonantInventory::pinyin()).expect("bundled lexicon parses")
}

/// Parses a lexicon file: `token<TAB>pronunciation<TAB>tone` per line.
///
/// Fields are whitespace-trimmed; the tone field may be missing or empty for
/// non-tonal languages. Lines starting with `#` are comments.
pub fn load_lexicon(source: &str, inventory: ConsonantInventory) -> Result<Lexicon, LexiconError> {
    let mut entries = Vec::new();
    let mut lines = Vec::new();
    for (i, raw) in source.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').map(str::trim).collect();
        if fields.len() < 2 || fields.len() > 3 || fields[0].is_empty() {
            return Err(LexiconError::MalformedLine { line });
        }
        let pron = fields[1];
        if !is_romanized(pron) {
            return Err(LexiconError::MalformedPronunciation { line, pron: pron.to_string() });
        }
        let tone = match fields.get(2) {
            None | Some(&"") => None,
            Some(t) => match t.parse::<u8>() {
                Ok(v) if (1..=MAX_TONE).contains(&v) => Some(v),
                _ => return Err(LexiconError::InvalidTone { line, tone: t.to_string() }),
            },
        };
        entries.push(LexiconEntry { token: fields[0].to_string(), pron: pron.to_string(), tone });
        lines.push(line);
    }
    // Re-map entry indices to file line numbers in errors.
    Lexicon::from_entries(entries, inventory).map_err(|e| relabel(e, &lines))
}

fn relabel(err: LexiconError, lines: &[usize]) -> LexiconError {
    let fix = |l: usize| lines.get(l - 1).copied().unwrap_or(l);
    match err {
        LexiconError::DuplicateToken { line, token } => LexiconError::DuplicateToken { line: fix(line), token },
        LexiconError::MissingTone { line, token } => LexiconError::MissingTone { line: fix(line), token },
        LexiconError::MalformedPronunciation { line, pron } => {
            LexiconError::MalformedPronunciation { line: fix(line), pron }
        }
        LexiconError::InvalidTone { line, tone } => LexiconError::InvalidTone { line: fix(line), tone },
        other => other,
    }
}

/// `buckets[x] = y`: exactly `y` pronunciations are shared by exactly `x` tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HomophoneHistogram {
    pub buckets: BTreeMap<usize, usize>,
}

impl HomophoneHistogram {
    pub fn total_entries(&self) -> usize {
        self.buckets.iter().map(|(x, y)| x * y).sum()
    }

    pub fn distinct_pronunciations(&self) -> usize {
        self.buckets.values().sum()
    }

    /// Two-column `x<TAB>y` text, one bucket per line in increasing x.
    pub fn to_columns(&self) -> String {
        let mut s = String::new();
        for (x, y) in &self.buckets {
            s.push_str(&format!("{x}\t{y}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Lexicon {
        let src = "# toy\n他\tta\t1\n她\tta\t1\n妈\tma\t1\n安\tan\t1\n";
        load_lexicon(src, ConsonantInventory::pinyin()).unwrap()
    }

    #[test]
    fn parses_entry_with_spaces_around_tabs() {
        let lex = load_lexicon("他 \t ta \t 1\n", ConsonantInventory::pinyin()).unwrap();
        assert_eq!(lex.entries()[0], LexiconEntry { token: "他".into(), pron: "ta".into(), tone: Some(1) });
        assert!(lex.is_tonal());
    }

    #[test]
    fn rejects_duplicate_token() {
        let err = load_lexicon("他\tta\t1\n他\tta\t1\n", ConsonantInventory::pinyin()).unwrap_err();
        assert_eq!(err, LexiconError::DuplicateToken { line: 2, token: "他".into() });
    }

    #[test]
    fn rejects_bad_pronunciation_and_tone() {
        let inv = ConsonantInventory::pinyin();
        assert!(matches!(
            load_lexicon("他\tTa\t1\n", inv.clone()),
            Err(LexiconError::MalformedPronunciation { line: 1, .. })
        ));
        assert!(matches!(load_lexicon("他\tta2\t1\n", inv.clone()), Err(LexiconError::MalformedPronunciation { .. })));
        assert!(matches!(load_lexicon("他\tta\t0\n", inv.clone()), Err(LexiconError::InvalidTone { .. })));
        assert!(matches!(load_lexicon("他\n", inv), Err(LexiconError::MalformedLine { line: 1 })));
    }

    #[test]
    fn tonal_lexicon_requires_every_tone() {
        let err = load_lexicon("# c\n他\tta\t1\n妈\tma\n", ConsonantInventory::pinyin()).unwrap_err();
        assert_eq!(err, LexiconError::MissingTone { line: 3, token: "妈".into() });
        let lex = load_lexicon("가\tga\n나\tna\t\n", ConsonantInventory::pinyin()).unwrap();
        assert!(!lex.is_tonal());
    }

    #[test]
    fn counts_distinct_pronunciations() {
        assert_eq!(toy().distinct_pronunciations(), 3);
    }

    #[test]
    fn extracts_table_one_features() {
        let f = toy().extract_features("他").unwrap();
        assert_eq!(f, TokenFeatures { w: "他".into(), p: "ta".into(), t: Some(1), c: "t".into(), v: "a".into() });
        let an = toy().extract_features("安").unwrap();
        assert_eq!((an.c.as_str(), an.v.as_str()), ("", "an"));
        assert_eq!(toy().extract_features("猫"), Err(LexiconError::UnknownToken("猫".into())));
    }

    #[test]
    fn longest_consonant_match() {
        let inv = ConsonantInventory::new(["z", "zh", "h"]).unwrap();
        assert_eq!(inv.split("zhang"), ("zh", "ang"));
        assert_eq!(inv.split("zang"), ("z", "ang"));
        // A consonant-only pronunciation keeps a non-empty suffix.
        let inv = ConsonantInventory::new(["m", "ng"]).unwrap();
        assert_eq!(inv.split("m"), ("", "m"));
        assert_eq!(inv.split("ng"), ("", "ng"));
    }

    #[test]
    fn nopron_fallback_for_unknown_tokens() {
        let lex = toy();
        assert_eq!(lex.feature_value("，", Feature::P), NOPRON);
        assert_eq!(lex.feature_value("，", Feature::V), NOPRON);
        assert_eq!(lex.feature_value("，", Feature::W), "，");
        assert_eq!(lex.feature_value("他", Feature::T), "1");
    }

    #[test]
    fn histogram_examples() {
        let inv = ConsonantInventory::pinyin();
        let lex = load_lexicon("a\tta\nb\tta\nc\tma\n", inv.clone()).unwrap();
        let h = lex.homophone_histogram(false).unwrap();
        assert_eq!(h.buckets, BTreeMap::from([(1, 1), (2, 1)]));

        let lex = load_lexicon("a\tta\nb\tma\nc\tan\n", inv.clone()).unwrap();
        assert_eq!(lex.homophone_histogram(false).unwrap().buckets, BTreeMap::from([(1, 3)]));

        let src: String = (0..6).map(|i| format!("t{i}\tta\n")).collect();
        let lex = load_lexicon(&src, inv.clone()).unwrap();
        assert_eq!(lex.homophone_histogram(false).unwrap().buckets, BTreeMap::from([(6, 1)]));

        let empty = load_lexicon("", inv).unwrap();
        assert_eq!(empty.homophone_histogram(false), Err(LexiconError::Empty));
    }

    #[test]
    fn tone_sensitive_grouping_splits_by_tone() {
        let lex = load_lexicon("a\tma\t1\nb\tma\t3\nc\tma\t1\n", ConsonantInventory::pinyin()).unwrap();
        assert_eq!(lex.homophone_histogram(false).unwrap().buckets, BTreeMap::from([(3, 1)]));
        assert_eq!(lex.homophone_histogram(true).unwrap().buckets, BTreeMap::from([(1, 1), (2, 1)]));
    }

    #[test]
    fn file_round_trip() {
        let lex = toy();
        let again = load_lexicon(&lex.to_file_string(), lex.inventory().clone()).unwrap();
        assert_eq!(lex, again);
        let inv = ConsonantInventory::parse(&ConsonantInventory::pinyin().to_file_string()).unwrap();
        assert_eq!(inv, ConsonantInventory::pinyin());
    }
}
