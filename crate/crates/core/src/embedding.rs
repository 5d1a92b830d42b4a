//! Pronunciation-aware embeddings.
//!
//! Each selected feature (W, P, T, C, V) owns its own embedding table, and the
//! final embedding of a token is the plain sum of the rows selected by the
//! token's feature values. Tokens that agree on every selected feature get
//! bitwise-identical embeddings, so with a pronunciation-only decoder config
//! homophones are tied. After training the sums can be folded into a single
//! `[V, d]` (decoder) or `[V + 1, d]` (joiner, blank last) table.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{Feature, Lexicon, NOPRON};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EmbeddingError {
    #[error("unknown feature letter {0:?} (expected one of W, P, T, C, V)")]
    UnknownFeatureLetter(char),
    #[error("feature {0} listed twice")]
    DuplicateFeature(Feature),
    #[error("empty feature set")]
    EmptyFeatureSet,
    #[error("joiner features must include W")]
    JoinerMissingW,
    #[error("tone feature requested on a non-tonal lexicon")]
    ToneOnNonTonal,
    #[error("malformed feature config {0:?}")]
    MalformedConfig(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("embedding dimension must be at least 1")]
    ZeroDimension,
}

/// A subset of {W, P, T, C, V}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FeatureSet(u8);

impl FeatureSet {
    fn bit(f: Feature) -> u8 {
        1 << (f as u8)
    }

    pub fn empty() -> Self {
        Self(0)
    }

    pub fn of(features: &[Feature]) -> Self {
        features.iter().fold(Self::empty(), |s, &f| s.with(f))
    }

    pub fn with(self, f: Feature) -> Self {
        Self(self.0 | Self::bit(f))
    }

    pub fn contains(self, f: Feature) -> bool {
        self.0 & Self::bit(f) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Selected features in canonical (summation) order W, P, T, C, V.
    pub fn iter(self) -> impl Iterator<Item = Feature> {
        Feature::ALL.into_iter().filter(move |&f| self.contains(f))
    }

    pub fn uses_pronunciation(self) -> bool {
        self.iter().any(|f| f != Feature::W)
    }
}

impl fmt::Display for FeatureSet {
    /// Letters in the conventional P, C, V, T, W order ("PW", "CVTW").
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for feat in [Feature::P, Feature::C, Feature::V, Feature::T, Feature::W] {
            if self.contains(feat) {
                write!(f, "{feat}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for FeatureSet {
    type Err = EmbeddingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = FeatureSet::empty();
        for ch in s.trim().chars() {
            let f = Feature::from_letter(ch).ok_or(EmbeddingError::UnknownFeatureLetter(ch))?;
            if set.contains(f) {
                return Err(EmbeddingError::DuplicateFeature(f));
            }
            set = set.with(f);
        }
        if set.is_empty() {
            return Err(EmbeddingError::EmptyFeatureSet);
        }
        Ok(set)
    }
}

impl Serialize for FeatureSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for FeatureSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Feature sets for the decoder input embedding and the joiner output projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub decoder: FeatureSet,
    pub joiner: FeatureSet,
}

impl FeatureConfig {
    pub fn baseline() -> Self {
        let w = FeatureSet::of(&[Feature::W]);
        Self { decoder: w, joiner: w }
    }

    pub fn validate(&self, tonal: bool) -> Result<(), EmbeddingError> {
        if self.decoder.is_empty() || self.joiner.is_empty() {
            return Err(EmbeddingError::EmptyFeatureSet);
        }
        if !self.joiner.contains(Feature::W) {
            return Err(EmbeddingError::JoinerMissingW);
        }
        if !tonal && (self.decoder.contains(Feature::T) || self.joiner.contains(Feature::T)) {
            return Err(EmbeddingError::ToneOnNonTonal);
        }
        Ok(())
    }
}

impl fmt::Display for FeatureConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.decoder, self.joiner)
    }
}

impl FromStr for FeatureConfig {
    type Err = EmbeddingError;

    /// `"<decoder>[-<joiner>]"`; the joiner side defaults to `W`.
    ///
    /// Parsing checks letters and the joiner W rule; tone availability
    /// depends on the lexicon and is checked by [`FeatureConfig::validate`].
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.trim().split('-');
        let decoder: FeatureSet = parts.next().unwrap_or("").parse()?;
        let joiner = match parts.next() {
            Some(j) => j.parse()?,
            None => FeatureSet::of(&[Feature::W]),
        };
        if parts.next().is_some() {
            return Err(EmbeddingError::MalformedConfig(s.to_string()));
        }
        let cfg = FeatureConfig { decoder, joiner };
        if !cfg.joiner.contains(Feature::W) {
            return Err(EmbeddingError::JoinerMissingW);
        }
        Ok(cfg)
    }
}

/// Ordered list of distinct strings with a reverse index.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct SymbolTable {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl SymbolTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id of `s`, adding it if absent.
    pub fn intern(&mut self, s: &str) -> usize {
        if let Some(&i) = self.index.get(s) {
            return i;
        }
        self.symbols.push(s.to_string());
        self.index.insert(s.to_string(), self.symbols.len() - 1);
        self.symbols.len() - 1
    }

    pub fn id(&self, s: &str) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

impl PartialEq for SymbolTable {
    fn eq(&self, other: &Self) -> bool {
        self.symbols == other.symbols
    }
}

impl From<Vec<String>> for SymbolTable {
    fn from(v: Vec<String>) -> Self {
        let mut t = SymbolTable::new();
        for s in &v {
            t.intern(s);
        }
        t
    }
}

impl From<SymbolTable> for Vec<String> {
    fn from(t: SymbolTable) -> Self {
        t.symbols
    }
}

/// Embedding rows for the values of one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEmbeddingTable {
    pub feature: Feature,
    pub values: SymbolTable,
    pub rows: Array2<f64>,
}

impl FeatureEmbeddingTable {
    pub fn row_of(&self, value: &str) -> Option<ArrayView1<'_, f64>> {
        self.values.id(value).map(|i| self.rows.row(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Decoder,
    Joiner,
}

/// Per-feature tables for one side of the model, composed by summation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedEmbedding {
    pub side: Side,
    pub features: FeatureSet,
    pub vocab: SymbolTable,
    pub tables: Vec<FeatureEmbeddingTable>,
    /// `token_rows[v][k]` is the row of `tables[k]` used by token `v`.
    pub token_rows: Vec<Vec<usize>>,
    /// Independent blank projection row (joiner side only).
    pub blank_row: Option<Array1<f64>>,
}

fn uniform_matrix<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> Array2<f64> {
    let bound = 1.0 / (dim as f64).sqrt();
    Array2::from_shape_fn((rows, dim), |_| rng.random_range(-bound..=bound))
}

impl ComposedEmbedding {
    /// Allocates one table per selected feature, one row per feature value
    /// observed over `vocab`. Pronunciation features always get a fallback
    /// row for tokens without a lexicon entry.
    pub fn init<R: Rng>(
        lex: &Lexicon,
        vocab: &[String],
        features: FeatureSet,
        side: Side,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDimension);
        }
        if features.is_empty() {
            return Err(EmbeddingError::EmptyFeatureSet);
        }
        let vocab_table = SymbolTable::from(vocab.to_vec());
        let mut token_rows = vec![Vec::with_capacity(features.len()); vocab.len()];
        let mut tables = Vec::with_capacity(features.len());
        for feature in features.iter() {
            let mut values = SymbolTable::new();
            for (v, tok) in vocab.iter().enumerate() {
                token_rows[v].push(values.intern(&lex.feature_value(tok, feature)));
            }
            if feature != Feature::W {
                values.intern(NOPRON);
            }
            let rows = uniform_matrix(rng, values.len(), dim);
            tables.push(FeatureEmbeddingTable { feature, values, rows });
        }
        let blank_row = match side {
            Side::Joiner => Some(uniform_matrix(rng, 1, dim).row(0).to_owned()),
            Side::Decoder => None,
        };
        Ok(Self { side, features, vocab: vocab_table, tables, token_rows, blank_row })
    }

    pub fn dim(&self) -> usize {
        self.tables[0].rows.ncols()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn table(&self, feature: Feature) -> Option<&FeatureEmbeddingTable> {
        self.tables.iter().find(|t| t.feature == feature)
    }

    pub fn table_mut(&mut self, feature: Feature) -> Option<&mut FeatureEmbeddingTable> {
        self.tables.iter_mut().find(|t| t.feature == feature)
    }

    pub fn token_id(&self, token: &str) -> Result<usize, EmbeddingError> {
        self.vocab.id(token).ok_or_else(|| EmbeddingError::UnknownToken(token.to_string()))
    }

    /// Writes the composed embedding of token `id` into `out`.
    pub fn compose_into(&self, id: usize, out: &mut [f64]) {
        out.fill(0.0);
        for (table, &row) in self.tables.iter().zip(&self.token_rows[id]) {
            for (o, r) in out.iter_mut().zip(table.rows.row(row)) {
                *o += r;
            }
        }
    }

    pub fn compose_id(&self, id: usize) -> Array1<f64> {
        let mut out = Array1::zeros(self.dim());
        self.compose_into(id, out.as_slice_mut().expect("contiguous"));
        out
    }

    pub fn compose(&self, token: &str) -> Result<Array1<f64>, EmbeddingError> {
        Ok(self.compose_id(self.token_id(token)?))
    }

    /// Precomputes the final table; the joiner side appends the blank row last.
    pub fn fold(&self) -> FoldedTable {
        let extra = usize::from(self.blank_row.is_some());
        let mut rows = Array2::zeros((self.vocab_size() + extra, self.dim()));
        for v in 0..self.vocab_size() {
            let mut row = rows.row_mut(v);
            self.compose_into(v, row.as_slice_mut().expect("contiguous"));
        }
        if let Some(b) = &self.blank_row {
            rows.row_mut(self.vocab_size()).assign(b);
        }
        FoldedTable { side: self.side, vocab: self.vocab.clone(), rows }
    }

    /// Zero-valued copy with identical shapes and row assignments, used as a
    /// gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tables.iter_mut().for_each(|t| t.rows.fill(0.0));
        if let Some(b) = z.blank_row.as_mut() {
            b.fill(0.0);
        }
        z
    }

    /// Adds `grad_out` to every feature row that token `id` selects.
    ///
    /// Because the final embedding is a sum, its Jacobian onto each selected
    /// row is the identity; homophones accumulate into shared rows.
    pub fn accumulate_gradient(&mut self, id: usize, grad_out: &[f64]) {
        for k in 0..self.tables.len() {
            let row = self.token_rows[id][k];
            let mut dst = self.tables[k].rows.row_mut(row);
            for (d, g) in dst.iter_mut().zip(grad_out) {
                *d += g;
            }
        }
    }

    pub fn accumulate_blank_gradient(&mut self, grad_out: &[f64]) {
        if let Some(b) = self.blank_row.as_mut() {
            for (d, g) in b.iter_mut().zip(grad_out) {
                *d += g;
            }
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.tables.iter().map(|t| t.rows.as_slice().expect("contiguous")).collect();
        if let Some(b) = &self.blank_row {
            out.push(b.as_slice().expect("contiguous"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> =
            self.tables.iter_mut().map(|t| t.rows.as_slice_mut().expect("contiguous")).collect();
        if let Some(b) = self.blank_row.as_mut() {
            out.push(b.as_slice_mut().expect("contiguous"));
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let side = match self.side {
            Side::Decoder => "decoder",
            Side::Joiner => "joiner",
        };
        let mut names: Vec<String> = self.tables.iter().map(|t| format!("{side}.emb.{}", t.feature)).collect();
        if self.blank_row.is_some() {
            names.push(format!("{side}.emb.blank"));
        }
        names
    }
}

/// Builds decoder and joiner embeddings for `config`, drawing all rows from
/// `rng` (decoder first).
pub fn init_tables<R: Rng>(
    lex: &Lexicon,
    vocab: &[String],
    config: &FeatureConfig,
    dim: usize,
    rng: &mut R,
) -> Result<(ComposedEmbedding, ComposedEmbedding), EmbeddingError> {
    config.validate(lex.is_tonal())?;
    let dec = ComposedEmbedding::init(lex, vocab, config.decoder, Side::Decoder, dim, rng)?;
    let join = ComposedEmbedding::init(lex, vocab, config.joiner, Side::Joiner, dim, rng)?;
    Ok((dec, join))
}

/// Precomputed final embedding table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldedTable {
    pub side: Side,
    pub vocab: SymbolTable,
    pub rows: Array2<f64>,
}

/// Either trainable per-feature tables or a folded table; the network uses
/// both through the same interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TokenEmbedding {
    Composed(ComposedEmbedding),
    Folded(FoldedTable),
}

impl TokenEmbedding {
    pub fn dim(&self) -> usize {
        match self {
            TokenEmbedding::Composed(c) => c.dim(),
            TokenEmbedding::Folded(f) => f.rows.ncols(),
        }
    }

    pub fn vocab(&self) -> &SymbolTable {
        match self {
            TokenEmbedding::Composed(c) => &c.vocab,
            TokenEmbedding::Folded(f) => &f.vocab,
        }
    }

    pub fn is_folded(&self) -> bool {
        matches!(self, TokenEmbedding::Folded(_))
    }

    /// Final embedding of token `id` (or the blank row when `id == V` on the joiner side).
    pub fn row_into(&self, id: usize, out: &mut [f64]) {
        match self {
            TokenEmbedding::Composed(c) => match &c.blank_row {
                Some(b) if id == c.vocab_size() => out.copy_from_slice(b.as_slice().expect("contiguous")),
                _ => c.compose_into(id, out),
            },
            TokenEmbedding::Folded(f) => out.copy_from_slice(f.rows.row(id).as_slice().expect("contiguous")),
        }
    }

    /// The full final table (`[V, d]`, or `[V + 1, d]` on the joiner side).
    pub fn matrix(&self) -> Array2<f64> {
        match self {
            TokenEmbedding::Composed(c) => c.fold().rows,
            TokenEmbedding::Folded(f) => f.rows.clone(),
        }
    }

    pub fn fold(&self) -> TokenEmbedding {
        match self {
            TokenEmbedding::Composed(c) => TokenEmbedding::Folded(c.fold()),
            TokenEmbedding::Folded(f) => TokenEmbedding::Folded(f.clone()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            TokenEmbedding::Composed(c) => TokenEmbedding::Composed(c.zeros_like()),
            TokenEmbedding::Folded(f) => {
                let mut z = f.clone();
                z.rows.fill(0.0);
                TokenEmbedding::Folded(z)
            }
        }
    }

    /// Adds `grad_out` to the gradient of row `id` of the final table.
    pub fn accumulate_row_gradient(&mut self, id: usize, grad_out: &[f64]) {
        match self {
            TokenEmbedding::Composed(c) => {
                if c.blank_row.is_some() && id == c.vocab_size() {
                    c.accumulate_blank_gradient(grad_out);
                } else {
                    c.accumulate_gradient(id, grad_out);
                }
            }
            TokenEmbedding::Folded(f) => {
                for (d, g) in f.rows.row_mut(id).iter_mut().zip(grad_out) {
                    *d += g;
                }
            }
        }
    }

    /// Accumulates a gradient for the whole final table.
    pub fn accumulate_table_gradient(&mut self, grad: &Array2<f64>) {
        for (id, row) in grad.rows().into_iter().enumerate() {
            self.accumulate_row_gradient(id, row.as_slice().expect("contiguous"));
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        match self {
            TokenEmbedding::Composed(c) => c.tensors(),
            TokenEmbedding::Folded(f) => vec![f.rows.as_slice().expect("contiguous")],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            TokenEmbedding::Composed(c) => c.tensors_mut(),
            TokenEmbedding::Folded(f) => vec![f.rows.as_slice_mut().expect("contiguous")],
        }
    }

    pub fn tensor_names(&self) -> Vec<String> {
        match self {
            TokenEmbedding::Composed(c) => c.tensor_names(),
            TokenEmbedding::Folded(f) => vec![match f.side {
                Side::Decoder => "decoder.emb.folded".to_string(),
                Side::Joiner => "joiner.emb.folded".to_string(),
            }],
        }
    }
}
