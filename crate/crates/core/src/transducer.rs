//! A minimal neural transducer with an exact lattice loss.
//!
//! Architecture:
//! - encoder: two tanh layers over a ±1 frame context window,
//! - decoder: one Elman recurrent layer over composed token embeddings with a
//!   learned start state (history position 0 embeds no token),
//! - joiner: `tanh(enc_proj·h_t + dec_proj·g_u + b)` projected onto `V + 1`
//!   logits by the joiner embedding table (blank is the last row).
//!
//! Everything runs in `f64`; the loss recursions stay in log space.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{init_tables, EmbeddingError, FeatureConfig, TokenEmbedding};
use crate::lexicon::Lexicon;

#[derive(Debug, Error, PartialEq)]
pub enum TransducerError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NumericalUnderflow(&'static str),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Stable `log(exp(a) + exp(b))`.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn log_sum_exp(xs: ArrayView1<'_, f64>) -> f64 {
    let m = xs.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Synthetic acoustic frames, `[T, d_in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticSequence {
    pub frames: Array2<f64>,
}

impl AcousticSequence {
    pub fn new(frames: Array2<f64>) -> Self {
        Self { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub input_dim: usize,
    pub encoder_dim: usize,
    /// Shared by every embedding table and the joiner hidden layer.
    pub embed_dim: usize,
    pub decoder_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { input_dim: 16, encoder_dim: 32, embed_dim: 24, decoder_dim: 32 }
    }
}

/// Frames visible to the encoder on each side of `t`.
pub const CONTEXT_RADIUS: usize = 1;
const CONTEXT_WIDTH: usize = 2 * CONTEXT_RADIUS + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub embedding: TokenEmbedding,
    pub w_in: Array2<f64>,
    pub w_rec: Array2<f64>,
    pub bias: Array1<f64>,
    pub start: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joiner {
    pub enc_proj: Array2<f64>,
    pub dec_proj: Array2<f64>,
    pub bias: Array1<f64>,
    /// `[V + 1, embed_dim]` output projection, blank last.
    pub embedding: TokenEmbedding,
    pub out_bias: Array1<f64>,
}

/// All transducer parameters. Gradients use the same type (see [`Transducer::zeros_like`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transducer {
    pub features: FeatureConfig,
    pub dims: ModelDims,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub joiner: Joiner,
}

fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

fn tanh_inplace<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) {
    a.mapv_inplace(f64::tanh);
}

/// `d_pre = d_out * (1 - y²)` for `y = tanh(pre)`.
fn tanh_backward<D: ndarray::Dimension>(
    y: &ndarray::Array<f64, D>,
    d_out: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut d = d_out.clone();
    Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
    d
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    context: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    dec_inputs: Array2<f64>,
    dec_states: Array2<f64>,
    joint_hidden: Array3<f64>,
    joiner_table: Array2<f64>,
}

/// Output log-distributions over the `T × (U + 1)` lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    /// `[T, U + 1, V + 1]`, blank at index `V`.
    pub log_probs: Array3<f64>,
    pub targets: Vec<usize>,
}

impl Lattice {
    pub fn new(log_probs: Array3<f64>, targets: Vec<usize>) -> Result<Self, TransducerError> {
        let (t, u1, v1) = log_probs.dim();
        if t == 0 || u1 != targets.len() + 1 || v1 < 1 {
            return Err(TransducerError::ShapeMismatch(format!(
                "lattice {:?} for {} targets",
                log_probs.dim(),
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v1 - 1) {
            return Err(TransducerError::ShapeMismatch(format!("target id {bad} >= vocabulary size {}", v1 - 1)));
        }
        Ok(Self { log_probs, targets })
    }

    pub fn frames(&self) -> usize {
        self.log_probs.dim().0
    }

    pub fn blank(&self) -> usize {
        self.log_probs.dim().2 - 1
    }

    /// Largest `|logsumexp(log_probs[t, u, :])|` over the lattice.
    pub fn max_normalization_error(&self) -> f64 {
        self.log_probs.lanes(Axis(2)).into_iter().map(|l| log_sum_exp(l).abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransducerLoss {
    /// `-log P(y | x)`.
    pub loss: f64,
    /// `∂loss / ∂log_probs`, same shape as the lattice.
    pub grad: Array3<f64>,
    /// `alpha[t, u]`: log-probability of reaching `(t, u)`.
    pub alpha: Array2<f64>,
    /// `beta[t, u]`: log-probability of finishing from `(t, u)`, final blank included.
    pub beta: Array2<f64>,
}

impl TransducerLoss {
    pub fn forward_total(&self, lattice: &Lattice) -> f64 {
        let (t, u1) = self.alpha.dim();
        self.alpha[[t - 1, u1 - 1]] + lattice.log_probs[[t - 1, u1 - 1, lattice.blank()]]
    }

    pub fn backward_total(&self) -> f64 {
        self.beta[[0, 0]]
    }
}

/// Negative log-likelihood summed over all monotonic alignments, with its
/// gradient with respect to the lattice log-probabilities.
pub fn transducer_loss(lattice: &Lattice) -> Result<TransducerLoss, TransducerError> {
    let lp = &lattice.log_probs;
    if lp.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(TransducerError::NumericalUnderflow("lattice log-probabilities"));
    }
    let (tn, u1, _) = lp.dim();
    let blank = lattice.blank();
    let y = &lattice.targets;

    let mut alpha = Array2::from_elem((tn, u1), f64::NEG_INFINITY);
    alpha[[0, 0]] = 0.0;
    for t in 0..tn {
        for u in 0..u1 {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 { alpha[[t - 1, u]] + lp[[t - 1, u, blank]] } else { f64::NEG_INFINITY };
            let from_label = if u > 0 { alpha[[t, u - 1]] + lp[[t, u - 1, y[u - 1]]] } else { f64::NEG_INFINITY };
            alpha[[t, u]] = log_add(from_blank, from_label);
        }
    }

    let mut beta = Array2::from_elem((tn, u1), f64::NEG_INFINITY);
    beta[[tn - 1, u1 - 1]] = lp[[tn - 1, u1 - 1, blank]];
    for t in (0..tn).rev() {
        for u in (0..u1).rev() {
            if t == tn - 1 && u == u1 - 1 {
                continue;
            }
            let via_blank = if t + 1 < tn { beta[[t + 1, u]] + lp[[t, u, blank]] } else { f64::NEG_INFINITY };
            let via_label = if u + 1 < u1 { beta[[t, u + 1]] + lp[[t, u, y[u]]] } else { f64::NEG_INFINITY };
            beta[[t, u]] = log_add(via_blank, via_label);
        }
    }

    let log_like = beta[[0, 0]];
    if !log_like.is_finite() {
        return Err(TransducerError::NumericalUnderflow("total log-likelihood"));
    }

    let mut grad = Array3::zeros(lp.dim());
    for t in 0..tn {
        for u in 0..u1 {
            let a = alpha[[t, u]];
            let next_blank = if t + 1 < tn {
                beta[[t + 1, u]]
            } else if u == u1 - 1 {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            grad[[t, u, blank]] = -(a + lp[[t, u, blank]] + next_blank - log_like).exp();
            if u + 1 < u1 {
                grad[[t, u, y[u]]] = -(a + lp[[t, u, y[u]]] + beta[[t, u + 1]] - log_like).exp();
            }
        }
    }

    Ok(TransducerLoss { loss: -log_like, grad, alpha, beta })
}

impl Transducer {
    /// Randomly initialized model; `vocab` fixes token ids and may contain
    /// tokens missing from `lex` (they use the fallback pronunciation rows).
    pub fn new(
        lex: &Lexicon,
        vocab: &[String],
        features: FeatureConfig,
        dims: ModelDims,
        seed: u64,
    ) -> Result<Self, TransducerError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dec_emb, join_emb) = init_tables(lex, vocab, &features, dims.embed_dim, &mut rng)?;
        let ModelDims { input_dim, encoder_dim, embed_dim, decoder_dim } = dims;
        let encoder = Encoder {
            w1: glorot(&mut rng, encoder_dim, CONTEXT_WIDTH * input_dim),
            b1: Array1::zeros(encoder_dim),
            w2: glorot(&mut rng, encoder_dim, encoder_dim),
            b2: Array1::zeros(encoder_dim),
        };
        let decoder = Decoder {
            embedding: TokenEmbedding::Composed(dec_emb),
            w_in: glorot(&mut rng, decoder_dim, embed_dim),
            w_rec: glorot(&mut rng, decoder_dim, decoder_dim),
            bias: Array1::zeros(decoder_dim),
            start: Array1::zeros(decoder_dim),
        };
        let joiner = Joiner {
            enc_proj: glorot(&mut rng, embed_dim, encoder_dim),
            dec_proj: glorot(&mut rng, embed_dim, decoder_dim),
            bias: Array1::zeros(embed_dim),
            embedding: TokenEmbedding::Composed(join_emb),
            out_bias: Array1::zeros(vocab.len() + 1),
        };
        Ok(Self { features, dims, encoder, decoder, joiner })
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.embedding.vocab().len()
    }

    pub fn blank(&self) -> usize {
        self.vocab_size()
    }

    pub fn vocab(&self) -> &[String] {
        self.decoder.embedding.vocab().symbols()
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.decoder.embedding.vocab().id(token)
    }

    pub fn is_folded(&self) -> bool {
        self.decoder.embedding.is_folded() && self.joiner.embedding.is_folded()
    }

    /// Replaces both embedding sides by their precomputed final tables.
    pub fn fold(&self) -> Transducer {
        let mut m = self.clone();
        m.decoder.embedding = self.decoder.embedding.fold();
        m.joiner.embedding = self.joiner.embedding.fold();
        m
    }

    pub fn zeros_like(&self) -> Transducer {
        let mut z = self.clone();
        z.decoder.embedding = self.decoder.embedding.zeros_like();
        z.joiner.embedding = self.joiner.embedding.zeros_like();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every parameter tensor as a flat slice, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let e = &self.encoder;
        let d = &self.decoder;
        let j = &self.joiner;
        let mut v: Vec<&[f64]> = vec![
            e.w1.as_slice().unwrap(),
            e.b1.as_slice().unwrap(),
            e.w2.as_slice().unwrap(),
            e.b2.as_slice().unwrap(),
        ];
        v.extend(d.embedding.tensors());
        v.extend([
            d.w_in.as_slice().unwrap(),
            d.w_rec.as_slice().unwrap(),
            d.bias.as_slice().unwrap(),
            d.start.as_slice().unwrap(),
            j.enc_proj.as_slice().unwrap(),
            j.dec_proj.as_slice().unwrap(),
            j.bias.as_slice().unwrap(),
        ]);
        v.extend(j.embedding.tensors());
        v.push(j.out_bias.as_slice().unwrap());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let e = &mut self.encoder;
        let d = &mut self.decoder;
        let j = &mut self.joiner;
        let mut v: Vec<&mut [f64]> = vec![
            e.w1.as_slice_mut().unwrap(),
            e.b1.as_slice_mut().unwrap(),
            e.w2.as_slice_mut().unwrap(),
            e.b2.as_slice_mut().unwrap(),
        ];
        v.extend(d.embedding.tensors_mut());
        v.extend([
            d.w_in.as_slice_mut().unwrap(),
            d.w_rec.as_slice_mut().unwrap(),
            d.bias.as_slice_mut().unwrap(),
            d.start.as_slice_mut().unwrap(),
            j.enc_proj.as_slice_mut().unwrap(),
            j.dec_proj.as_slice_mut().unwrap(),
            j.bias.as_slice_mut().unwrap(),
        ]);
        v.extend(j.embedding.tensors_mut());
        v.push(j.out_bias.as_slice_mut().unwrap());
        v
    }

    /// Names aligned with [`Transducer::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["encoder.w1", "encoder.b1", "encoder.w2", "encoder.b2"].map(String::from).to_vec();
        v.extend(self.decoder.embedding.tensor_names());
        v.extend(
            [
                "decoder.w_in",
                "decoder.w_rec",
                "decoder.bias",
                "decoder.start",
                "joiner.enc_proj",
                "joiner.dec_proj",
                "joiner.bias",
            ]
            .map(String::from),
        );
        v.extend(self.joiner.embedding.tensor_names());
        v.push("joiner.out_bias".to_string());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    fn check_input(&self, x: &AcousticSequence) -> Result<(), TransducerError> {
        if x.is_empty() {
            return Err(TransducerError::ShapeMismatch("acoustic sequence has no frames".into()));
        }
        if x.frames.ncols() != self.dims.input_dim {
            return Err(TransducerError::ShapeMismatch(format!(
                "frame dim {} != model input dim {}",
                x.frames.ncols(),
                self.dims.input_dim
            )));
        }
        Ok(())
    }

    fn context_window(&self, x: &AcousticSequence) -> Array2<f64> {
        let (tn, d) = x.frames.dim();
        let mut z = Array2::zeros((tn, CONTEXT_WIDTH * d));
        for t in 0..tn {
            for k in 0..CONTEXT_WIDTH {
                let src = t as isize + k as isize - CONTEXT_RADIUS as isize;
                if src >= 0 && (src as usize) < tn {
                    z.slice_mut(s![t, k * d..(k + 1) * d]).assign(&x.frames.row(src as usize));
                }
            }
        }
        z
    }

    /// Encoder output `[T, encoder_dim]` plus the intermediates.
    fn encode(&self, x: &AcousticSequence) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let e = &self.encoder;
        let z = self.context_window(x);
        let mut h1 = z.dot(&e.w1.t()) + &e.b1;
        tanh_inplace(&mut h1);
        let mut h2 = h1.dot(&e.w2.t()) + &e.b2;
        tanh_inplace(&mut h2);
        (z, h1, h2)
    }

    /// One decoder step from `prev` after consuming token `id`.
    pub fn decoder_step(&self, prev: ArrayView1<'_, f64>, id: usize) -> Array1<f64> {
        let d = &self.decoder;
        let mut emb = Array1::zeros(self.dims.embed_dim);
        d.embedding.row_into(id, emb.as_slice_mut().unwrap());
        let mut g = d.w_in.dot(&emb) + d.w_rec.dot(&prev) + &d.bias;
        tanh_inplace(&mut g);
        g
    }

    /// Decoder states `[U + 1, decoder_dim]` (row 0 is the start state) and
    /// the embedded inputs `[U, embed_dim]`.
    fn run_decoder(&self, targets: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let d = &self.decoder;
        let mut inputs = Array2::zeros((targets.len(), self.dims.embed_dim));
        let mut states = Array2::zeros((targets.len() + 1, self.dims.decoder_dim));
        states.row_mut(0).assign(&d.start);
        for (u, &y) in targets.iter().enumerate() {
            d.embedding.row_into(y, inputs.row_mut(u).as_slice_mut().unwrap());
            let mut g = d.w_in.dot(&inputs.row(u)) + d.w_rec.dot(&states.row(u)) + &d.bias;
            tanh_inplace(&mut g);
            states.row_mut(u + 1).assign(&g);
        }
        (inputs, states)
    }

    /// Computes the output lattice and the cache needed by [`Transducer::backward`].
    pub fn forward(&self, x: &AcousticSequence, targets: &[usize]) -> Result<(Lattice, ForwardCache), TransducerError> {
        self.check_input(x)?;
        let vocab = self.vocab_size();
        if let Some(&bad) = targets.iter().find(|&&y| y >= vocab) {
            return Err(TransducerError::ShapeMismatch(format!("target id {bad} >= vocabulary size {vocab}")));
        }
        let (context, h1, h2) = self.encode(x);
        let (dec_inputs, dec_states) = self.run_decoder(targets);
        let j = &self.joiner;
        let enc_part = h2.dot(&j.enc_proj.t());
        let dec_part = dec_states.dot(&j.dec_proj.t()) + &j.bias;
        let table = j.embedding.matrix();

        let (tn, u1, v1, e) = (x.len(), targets.len() + 1, vocab + 1, self.dims.embed_dim);
        let mut joint_hidden = Array3::zeros((tn, u1, e));
        let mut log_probs = Array3::zeros((tn, u1, v1));
        for t in 0..tn {
            let mut hid = &dec_part + &enc_part.row(t);
            tanh_inplace(&mut hid);
            let mut logits = hid.dot(&table.t()) + &j.out_bias;
            for mut row in logits.rows_mut() {
                let lse = log_sum_exp(row.view());
                row.mapv_inplace(|z| z - lse);
            }
            joint_hidden.index_axis_mut(Axis(0), t).assign(&hid);
            log_probs.index_axis_mut(Axis(0), t).assign(&logits);
        }
        let lattice = Lattice { log_probs, targets: targets.to_vec() };
        let cache = ForwardCache { context, h1, h2, dec_inputs, dec_states, joint_hidden, joiner_table: table };
        Ok((lattice, cache))
    }

    pub fn forward_lattice(&self, x: &AcousticSequence, targets: &[usize]) -> Result<Lattice, TransducerError> {
        self.forward(x, targets).map(|(l, _)| l)
    }

    /// Loss for one utterance.
    pub fn loss(&self, x: &AcousticSequence, targets: &[usize]) -> Result<f64, TransducerError> {
        transducer_loss(&self.forward_lattice(x, targets)?).map(|l| l.loss)
    }

    /// Backpropagates `lattice_grad = ∂L/∂log_probs` and adds the parameter
    /// gradients into `grads` (a buffer from [`Transducer::zeros_like`]).
    pub fn backward(
        &self,
        lattice: &Lattice,
        cache: &ForwardCache,
        lattice_grad: &Array3<f64>,
        grads: &mut Transducer,
    ) -> Result<(), TransducerError> {
        if lattice_grad.dim() != lattice.log_probs.dim() {
            return Err(TransducerError::ShapeMismatch(format!(
                "lattice grad {:?} != lattice {:?}",
                lattice_grad.dim(),
                lattice.log_probs.dim()
            )));
        }
        let (tn, u1, v1) = lattice.log_probs.dim();
        let e = self.dims.embed_dim;
        let j = &self.joiner;

        let mut d_table = Array2::<f64>::zeros((v1, e));
        let mut d_enc_part = Array2::<f64>::zeros((tn, e));
        let mut d_dec_part = Array2::<f64>::zeros((u1, e));
        let mut d_out_bias = Array1::<f64>::zeros(v1);
        for t in 0..tn {
            // log-softmax backward: dz = g - softmax * Σg
            let lp = lattice.log_probs.index_axis(Axis(0), t);
            let g = lattice_grad.index_axis(Axis(0), t);
            let mut d_logits = g.to_owned();
            for ((mut dz, lp_row), g_row) in d_logits.rows_mut().into_iter().zip(lp.rows()).zip(g.rows()) {
                let total: f64 = g_row.sum();
                if total != 0.0 {
                    Zip::from(&mut dz).and(&lp_row).for_each(|dz, &l| *dz -= l.exp() * total);
                }
            }
            let hid = cache.joint_hidden.index_axis(Axis(0), t);
            d_table += &d_logits.t().dot(&hid);
            d_out_bias += &d_logits.sum_axis(Axis(0));
            let d_hid = d_logits.dot(&cache.joiner_table);
            let d_pre = tanh_backward(&hid.to_owned(), &d_hid);
            d_enc_part.row_mut(t).assign(&d_pre.sum_axis(Axis(0)));
            d_dec_part += &d_pre;
        }

        grads.joiner.embedding.accumulate_table_gradient(&d_table);
        grads.joiner.out_bias += &d_out_bias;
        grads.joiner.bias += &d_dec_part.sum_axis(Axis(0));
        grads.joiner.enc_proj += &d_enc_part.t().dot(&cache.h2);
        grads.joiner.dec_proj += &d_dec_part.t().dot(&cache.dec_states);
        let d_h2 = d_enc_part.dot(&j.enc_proj);
        let mut d_states = d_dec_part.dot(&j.dec_proj);

        // Decoder, back through time.
        let d = &self.decoder;
        for u in (1..u1).rev() {
            let g = cache.dec_states.row(u);
            let mut d_pre = d_states.row(u).to_owned();
            Zip::from(&mut d_pre).and(&g).for_each(|dp, &y| *dp *= 1.0 - y * y);
            outer_add(&mut grads.decoder.w_in, d_pre.view(), cache.dec_inputs.row(u - 1));
            outer_add(&mut grads.decoder.w_rec, d_pre.view(), cache.dec_states.row(u - 1));
            grads.decoder.bias += &d_pre;
            let d_emb = d.w_in.t().dot(&d_pre);
            grads.decoder.embedding.accumulate_row_gradient(lattice.targets[u - 1], d_emb.as_slice().unwrap());
            let d_prev = d.w_rec.t().dot(&d_pre);
            let mut prev = d_states.row_mut(u - 1);
            prev += &d_prev;
        }
        grads.decoder.start += &d_states.row(0);

        // Encoder.
        let enc = &self.encoder;
        let d_pre2 = tanh_backward(&cache.h2, &d_h2);
        grads.encoder.w2 += &d_pre2.t().dot(&cache.h1);
        grads.encoder.b2 += &d_pre2.sum_axis(Axis(0));
        let d_h1 = d_pre2.dot(&enc.w2);
        let d_pre1 = tanh_backward(&cache.h1, &d_h1);
        grads.encoder.w1 += &d_pre1.t().dot(&cache.context);
        grads.encoder.b1 += &d_pre1.sum_axis(Axis(0));
        Ok(())
    }

    /// Forward, loss and backward for one utterance; gradients are added into `grads`.
    pub fn loss_and_grad(
        &self,
        x: &AcousticSequence,
        targets: &[usize],
        grads: &mut Transducer,
    ) -> Result<f64, TransducerError> {
        let (lattice, cache) = self.forward(x, targets)?;
        let out = transducer_loss(&lattice)?;
        self.backward(&lattice, &cache, &out.grad, grads)?;
        Ok(out.loss)
    }

    /// Frame-synchronous greedy decoding.
    ///
    /// At each frame the joiner's argmax (ties to the lowest id) is emitted
    /// and fed back to the decoder if it is not blank; blank, or reaching
    /// `max_symbols_per_frame` emissions, advances to the next frame.
    pub fn greedy_decode(
        &self,
        x: &AcousticSequence,
        max_symbols_per_frame: usize,
    ) -> Result<Vec<usize>, TransducerError> {
        self.check_input(x)?;
        if max_symbols_per_frame == 0 {
            return Err(TransducerError::ShapeMismatch("max_symbols_per_frame must be >= 1".into()));
        }
        let (_, _, h2) = self.encode(x);
        let j = &self.joiner;
        let enc_part = h2.dot(&j.enc_proj.t());
        let table = j.embedding.matrix();
        let blank = self.blank();

        let mut state = self.decoder.start.clone();
        let mut dec_part = j.dec_proj.dot(&state) + &j.bias;
        let mut out = Vec::new();
        for t in 0..x.len() {
            let mut emitted = 0;
            while emitted < max_symbols_per_frame {
                let mut hid = &dec_part + &enc_part.row(t);
                tanh_inplace(&mut hid);
                let logits = table.dot(&hid) + &j.out_bias;
                let best = argmax(logits.view());
                if best == blank {
                    break;
                }
                out.push(best);
                emitted += 1;
                state = self.decoder_step(state.view(), best);
                dec_part = j.dec_proj.dot(&state) + &j.bias;
            }
        }
        Ok(out)
    }
}

fn outer_add(dst: &mut Array2<f64>, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) {
    for (mut row, &ai) in dst.rows_mut().into_iter().zip(a) {
        if ai != 0.0 {
            row.scaled_add(ai, &b);
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Convenience view used by tests and tools: the lattice slice at frame `t`.
pub fn frame_slice(lattice: &Lattice, t: usize) -> ArrayView2<'_, f64> {
    lattice.log_probs.index_axis(Axis(0), t)
}
