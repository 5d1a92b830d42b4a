//! Synthetic homophone-rich transcription task.
//!
//! Tokens are assigned round-robin to pronunciations, so with `V = 60` and
//! 20 pronunciations every pronunciation is shared by exactly 3 tokens.
//! Acoustic frames depend only on the pronunciation (consonant, suffix and
//! tone prototypes plus Gaussian noise), so homophones are acoustically
//! identical and only context tells them apart.
//!
//! The text comes from a first-order generator: each token has a small set
//! of likely successor pronunciations, and the homophone used for the next
//! pronunciation is chosen by the suffix (V feature) of the previous token.
//! Noise bursts spanning several tokens make some stretches of audio hard.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TrainingError;
use crate::lexicon::{load_lexicon, ConsonantInventory, Lexicon, LexiconEntry};
use crate::transducer::AcousticSequence;

const CONSONANTS: [&str; 17] = ["b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "zh", "ch", "sh", "z", "c", "s"];
const SUFFIXES: [&str; 12] = ["a", "o", "e", "i", "u", "ai", "ei", "ao", "ou", "an", "en", "ang"];

/// How the text generator picks the next token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextRule {
    /// Likely successor pronunciations per token.
    pub branching: usize,
    /// Probability of drawing the next pronunciation from the successor set
    /// rather than uniformly.
    pub successor_prob: f64,
    /// Probability that the homophone is the one preferred by the previous
    /// token's suffix; otherwise uniform within the homophone group.
    pub homophone_bias: f64,
}

impl Default for ContextRule {
    fn default() -> Self {
        Self { branching: 3, successor_prob: 0.97, homophone_bias: 0.98 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub n_pronunciations: usize,
    /// 0 for a non-tonal language.
    pub tone_count: u8,
    pub frames_per_token: (usize, usize),
    pub tokens_per_utterance: (usize, usize),
    pub feature_dim: usize,
    pub noise_std: f64,
    /// Noise level inside a burst.
    pub burst_noise_std: f64,
    /// Per-token probability of entering / staying in a burst.
    pub burst_start_prob: f64,
    pub burst_continue_prob: f64,
    pub context_rule: ContextRule,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 60,
            n_pronunciations: 20,
            tone_count: 0,
            frames_per_token: (2, 3),
            tokens_per_utterance: (4, 8),
            feature_dim: 16,
            noise_std: 0.3,
            burst_noise_std: 1.2,
            burst_start_prob: 0.06,
            burst_continue_prob: 0.75,
            context_rule: ContextRule::default(),
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |msg: &str| Err(TrainingError::InvalidSpec(msg.to_string()));
        if self.n_pronunciations == 0 || self.n_pronunciations >= self.vocab_size {
            return bad("need 0 < n_pronunciations < vocab_size so that homophones exist");
        }
        if self.n_pronunciations > CONSONANTS.len() * SUFFIXES.len() {
            return bad("too many pronunciations for the syllable inventory");
        }
        let (f0, f1) = self.frames_per_token;
        let (t0, t1) = self.tokens_per_utterance;
        if f0 == 0 || f1 < f0 || t0 == 0 || t1 < t0 {
            return bad("frame and token ranges must be positive and ordered");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if !(self.noise_std >= 0.0 && self.burst_noise_std >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        let probs = [
            self.burst_start_prob,
            self.burst_continue_prob,
            self.context_rule.successor_prob,
            self.context_rule.homophone_bias,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.context_rule.branching == 0 || self.context_rule.branching >= self.n_pronunciations {
            return bad("branching must be in 1..n_pronunciations");
        }
        if usize::from(self.tone_count) > crate::lexicon::MAX_TONE as usize {
            return bad("tone_count exceeds the lexicon tone range");
        }
        Ok(())
    }
}

/// One transcribed utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub frames: AcousticSequence,
    pub tokens: Vec<usize>,
}

/// Utterances plus the lexicon and vocabulary they are written in.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub lexicon: Lexicon,
    pub vocab: Vec<String>,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Deterministic shuffle-and-split; the first part is the training set.
    pub fn split(&self, valid_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_valid = ((self.len() as f64) * valid_fraction).round() as usize;
        let n_valid = n_valid.min(self.len());
        let pick = |idx: &[usize]| Dataset {
            lexicon: self.lexicon.clone(),
            vocab: self.vocab.clone(),
            utterances: idx.iter().map(|&i| self.utterances[i].clone()).collect(),
        };
        let (valid, train) = order.split_at(n_valid);
        let mut train = train.to_vec();
        let mut valid = valid.to_vec();
        train.sort_unstable();
        valid.sort_unstable();
        (pick(&train), pick(&valid))
    }

    pub fn subset(&self, n: usize) -> Dataset {
        Dataset {
            lexicon: self.lexicon.clone(),
            vocab: self.vocab.clone(),
            utterances: self.utterances.iter().take(n).cloned().collect(),
        }
    }

    pub fn transcript(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.vocab[t].as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// The fixed generative structure behind a spec: lexicon, prototypes and
/// grammar tables.
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    pub lexicon: Lexicon,
    pub vocab: Vec<String>,
    /// Pronunciation index of each token.
    pub pron_of: Vec<usize>,
    /// Tokens sharing each pronunciation, in id order.
    pub homophones: Vec<Vec<usize>>,
    /// Suffix-class index of each token.
    pub suffix_of: Vec<usize>,
    prototypes: Array2<f64>,
    successors: Vec<Vec<usize>>,
    /// `preferred[suffix_class + 1][pron]`, row 0 for utterance start.
    preferred: Vec<Vec<usize>>,
}

/// Token symbols: consecutive CJK ideographs.
pub fn token_symbol(i: usize) -> String {
    char::from_u32(0x4E00 + i as u32).expect("valid CJK code point").to_string()
}

impl SyntheticTask {
    pub fn new(spec: &SyntheticTaskSpec) -> Result<Self, TrainingError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n_pron = spec.n_pronunciations;

        // Syllables from a small grid so that consonants and suffixes are shared.
        let side = (n_pron as f64).sqrt().ceil() as usize;
        let n_suffix = (side + 1).min(SUFFIXES.len());
        let n_cons = n_pron.div_ceil(n_suffix).max(1).min(CONSONANTS.len());
        let mut cons: Vec<&str> = CONSONANTS.to_vec();
        cons.shuffle(&mut rng);
        let mut cons: Vec<&str> = cons.into_iter().take(n_cons).collect();
        let mut sufs: Vec<&str> = SUFFIXES.to_vec();
        sufs.shuffle(&mut rng);
        let sufs: Vec<&str> = sufs.into_iter().take(n_suffix).collect();
        if n_cons * n_suffix < n_pron {
            cons = CONSONANTS.to_vec();
        }
        let mut grid: Vec<(usize, usize)> =
            (0..cons.len()).flat_map(|c| (0..sufs.len()).map(move |s| (c, s))).collect();
        grid.shuffle(&mut rng);
        grid.truncate(n_pron);
        grid.sort_unstable();

        let prons: Vec<String> = grid.iter().map(|&(c, s)| format!("{}{}", cons[c], sufs[s])).collect();
        let tone_of = |p: usize| (spec.tone_count > 0).then(|| (p % spec.tone_count as usize) as u8 + 1);

        let vocab: Vec<String> = (0..spec.vocab_size).map(token_symbol).collect();
        let pron_of: Vec<usize> = (0..spec.vocab_size).map(|i| i % n_pron).collect();
        let entries = vocab
            .iter()
            .zip(&pron_of)
            .map(|(tok, &p)| LexiconEntry { token: tok.clone(), pron: prons[p].clone(), tone: tone_of(p) })
            .collect();
        let inventory = ConsonantInventory::new(cons.iter().copied()).map_err(TrainingError::Lexicon)?;
        let lexicon = Lexicon::from_entries(entries, inventory).map_err(TrainingError::Lexicon)?;

        let mut homophones = vec![Vec::new(); n_pron];
        for (tok, &p) in pron_of.iter().enumerate() {
            homophones[p].push(tok);
        }
        let suffix_of: Vec<usize> = pron_of.iter().map(|&p| grid[p].1).collect();

        // Acoustic prototypes: consonant + suffix (+ tone) components.
        let d = spec.feature_dim;
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let mut draw = |n: usize| Array2::from_shape_fn((n, d), |_| unit.sample(&mut rng));
        let cons_proto = draw(cons.len());
        let suf_proto = draw(sufs.len());
        let tone_proto = draw(spec.tone_count as usize);
        let mut prototypes = Array2::zeros((n_pron, d));
        for (p, &(c, s)) in grid.iter().enumerate() {
            let mut row = &cons_proto.row(c) + &suf_proto.row(s);
            if let Some(t) = tone_of(p) {
                row += &tone_proto.row(t as usize - 1);
            }
            prototypes.row_mut(p).assign(&row);
        }

        let successors = (0..spec.vocab_size)
            .map(|tok| {
                let mut options: Vec<usize> = (0..n_pron).filter(|&p| p != pron_of[tok]).collect();
                options.shuffle(&mut rng);
                options.truncate(spec.context_rule.branching);
                options
            })
            .collect();
        let preferred = (0..=sufs.len())
            .map(|_| (0..n_pron).map(|p| homophones[p][rng.random_range(0..homophones[p].len())]).collect())
            .collect();

        Ok(Self {
            spec: spec.clone(),
            lexicon,
            vocab,
            pron_of,
            homophones,
            suffix_of,
            prototypes,
            successors,
            preferred,
        })
    }

    /// Acoustic prototype of a pronunciation.
    pub fn prototype(&self, pron: usize) -> Array1<f64> {
        self.prototypes.row(pron).to_owned()
    }

    fn next_token<R: Rng>(&self, prev: Option<usize>, rng: &mut R) -> usize {
        let rule = &self.spec.context_rule;
        let n_pron = self.spec.n_pronunciations;
        let pron = match prev {
            Some(p) if rng.random_bool(rule.successor_prob) => {
                let s = &self.successors[p];
                s[rng.random_range(0..s.len())]
            }
            Some(p) => loop {
                let q = rng.random_range(0..n_pron);
                if q != self.pron_of[p] {
                    break q;
                }
            },
            None => rng.random_range(0..n_pron),
        };
        let group = &self.homophones[pron];
        if rng.random_bool(rule.homophone_bias) {
            let ctx = prev.map_or(0, |p| self.suffix_of[p] + 1);
            self.preferred[ctx][pron]
        } else {
            group[rng.random_range(0..group.len())]
        }
    }

    /// Draws one utterance with its own random stream.
    pub fn sample_utterance(&self, index: usize) -> Utterance {
        let spec = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(index as u64 + 1);
        let (t0, t1) = spec.tokens_per_utterance;
        let n_tokens = rng.random_range(t0..=t1);
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let tok = self.next_token(tokens.last().copied(), &mut rng);
            tokens.push(tok);
        }

        let (f0, f1) = spec.frames_per_token;
        let mut rows: Vec<f64> = Vec::new();
        let mut in_burst = false;
        for &tok in &tokens {
            in_burst = if in_burst {
                rng.random_bool(spec.burst_continue_prob)
            } else {
                rng.random_bool(spec.burst_start_prob)
            };
            let std = if in_burst { spec.burst_noise_std } else { spec.noise_std };
            let proto = self.prototypes.row(self.pron_of[tok]);
            for _ in 0..rng.random_range(f0..=f1) {
                for &p in proto {
                    let noise: f64 =
                        if std > 0.0 { rng.sample::<f64, _>(rand_distr::StandardNormal) * std } else { 0.0 };
                    rows.push(p + noise);
                }
            }
        }
        let n_frames = rows.len() / spec.feature_dim;
        let frames = Array2::from_shape_vec((n_frames, spec.feature_dim), rows).expect("frame buffer shape");
        Utterance { id: format!("utt{index:06}"), frames: AcousticSequence::new(frames), tokens }
    }
}

/// Builds the task and draws `n_utterances` utterances.
pub fn generate_dataset(spec: &SyntheticTaskSpec, n_utterances: usize) -> Result<Dataset, TrainingError> {
    let task = SyntheticTask::new(spec)?;
    let utterances = (0..n_utterances).map(|i| task.sample_utterance(i)).collect();
    Ok(Dataset { lexicon: task.lexicon, vocab: task.vocab, utterances })
}

const FRAME_MAGIC: &[u8; 4] = b"PETF";
const DTYPE_F64_LE: u8 = 1;

/// Frame matrix file: magic `PETF`, dtype byte (1 = little-endian f64),
/// `u32` rows, `u32` cols (little-endian), then row-major data.
pub fn write_frames(path: &Path, frames: &Array2<f64>) -> io::Result<()> {
    let (r, c) = frames.dim();
    let mut buf = Vec::with_capacity(13 + 8 * r * c);
    buf.extend_from_slice(FRAME_MAGIC);
    buf.push(DTYPE_F64_LE);
    buf.extend_from_slice(&(r as u32).to_le_bytes());
    buf.extend_from_slice(&(c as u32).to_le_bytes());
    for x in frames.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)
}

pub fn read_frames(path: &Path) -> io::Result<Array2<f64>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let invalid = |m: &str| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {m}", path.display()));
    if buf.len() < 13 || &buf[..4] != FRAME_MAGIC {
        return Err(invalid("not a frame matrix file"));
    }
    if buf[4] != DTYPE_F64_LE {
        return Err(invalid("unsupported dtype"));
    }
    let r = u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(buf[9..13].try_into().unwrap()) as usize;
    let body = &buf[13..];
    if body.len() != 8 * r * c {
        return Err(invalid("payload size does not match header"));
    }
    let data = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    Array2::from_shape_vec((r, c), data).map_err(|e| invalid(&e.to_string()))
}

pub const MANIFEST: &str = "manifest.tsv";
pub const LEXICON_FILE: &str = "lexicon.tsv";
pub const INVENTORY_FILE: &str = "consonants.txt";

/// Writes `manifest.tsv` (`id<TAB>frame file<TAB>space-separated transcript`),
/// one frame file per utterance under `frames/`, the lexicon and the
/// consonant inventory.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<(), TrainingError> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir)?;
    fs::write(dir.join(LEXICON_FILE), data.lexicon.to_file_string())?;
    fs::write(dir.join(INVENTORY_FILE), data.lexicon.inventory().to_file_string())?;
    let mut manifest = String::new();
    for u in &data.utterances {
        let rel = PathBuf::from("frames").join(format!("{}.bin", u.id));
        write_frames(&dir.join(&rel), &u.frames.frames)?;
        manifest.push_str(&format!("{}\t{}\t{}\n", u.id, rel.display(), data.transcript(&u.tokens)));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Reads a dataset directory written by [`save_dataset`]. The vocabulary is
/// the lexicon's token order.
pub fn load_dataset(dir: &Path) -> Result<Dataset, TrainingError> {
    let inventory = ConsonantInventory::parse(&fs::read_to_string(dir.join(INVENTORY_FILE))?)?;
    let lexicon = load_lexicon(&fs::read_to_string(dir.join(LEXICON_FILE))?, inventory)?;
    let vocab: Vec<String> = lexicon.tokens().map(String::from).collect();
    let index: std::collections::HashMap<&str, usize> =
        vocab.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let mut utterances = Vec::new();
    for (n, line) in fs::read_to_string(dir.join(MANIFEST))?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(TrainingError::Manifest(format!("line {}: expected 3 fields", n + 1)));
        }
        let tokens = fields[2]
            .split_whitespace()
            .map(|t| {
                index
                    .get(t)
                    .copied()
                    .ok_or_else(|| TrainingError::Manifest(format!("line {}: unknown token {t:?}", n + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let frames = read_frames(&dir.join(fields[1]))?;
        utterances.push(Utterance { id: fields[0].to_string(), frames: AcousticSequence::new(frames), tokens });
    }
    Ok(Dataset { lexicon, vocab, utterances })
}
