//! Independent reference computations shared by the integration tests.
//!
//! Nothing here calls into the code paths it is used to check: the loss
//! oracle enumerates alignments explicitly, the edit-distance oracle is the
//! textbook recurrence, and the forward oracle recomputes the network with
//! scalar loops over the public parameter fields.

#![allow(dead_code, clippy::needless_range_loop)]

use ndarray::{Array2, Array3, Axis};
use pet_core::lexicon::{load_lexicon, ConsonantInventory, Lexicon};
use pet_core::transducer::{AcousticSequence, ModelDims, Transducer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `-log Σ_paths Π p(step)`, enumerating every monotonic alignment.
pub fn brute_force_loss(log_probs: &Array3<f64>, targets: &[usize]) -> f64 {
    let (tn, _, v1) = log_probs.dim();
    let blank = v1 - 1;
    let u_max = targets.len();
    let mut path_scores = Vec::new();
    let mut stack = vec![(0usize, 0usize, 0.0f64)];
    while let Some((t, u, score)) = stack.pop() {
        if t == tn - 1 && u == u_max {
            path_scores.push(score + log_probs[[t, u, blank]]);
            continue;
        }
        if u < u_max {
            stack.push((t, u + 1, score + log_probs[[t, u, targets[u]]]));
        }
        if t + 1 < tn {
            stack.push((t + 1, u, score + log_probs[[t, u, blank]]));
        }
    }
    let m = path_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    -(m + path_scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln())
}

/// Number of monotonic alignments of `u` labels over `t` frames.
pub fn path_count(t: usize, u: usize) -> u64 {
    // choose(t - 1 + u, u)
    let n = (t - 1 + u) as u64;
    (0..u as u64).fold(1, |acc, k| acc * (n - k) / (k + 1))
}

pub fn random_lattice<R: Rng>(rng: &mut R, t: usize, u: usize, v: usize) -> (Array3<f64>, Vec<usize>) {
    let mut lp = Array3::from_shape_fn((t, u + 1, v + 1), |_| rng.random_range(-4.0..4.0));
    for mut lane in lp.lanes_mut(Axis(2)) {
        let m = lane.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = m + lane.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        lane.mapv_inplace(|x| x - lse);
    }
    let targets = (0..u).map(|_| rng.random_range(0..v)).collect();
    (lp, targets)
}

/// Textbook Levenshtein distance with unit costs.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

/// Scalar re-implementation of the network forward pass: `[T][U+1][V+1]` log-probabilities.
pub fn scalar_forward(m: &Transducer, x: &AcousticSequence, targets: &[usize]) -> Vec<Vec<Vec<f64>>> {
    let tn = x.frames.nrows();
    let din = x.frames.ncols();
    let enc = &m.encoder;
    let dec = &m.decoder;
    let j = &m.joiner;
    let de = enc.b1.len();
    let e = m.dims.embed_dim;
    let dd = dec.bias.len();
    let vocab = m.vocab_size();

    let frame = |t: isize, k: usize| -> f64 {
        if t < 0 || t >= tn as isize {
            0.0
        } else {
            x.frames[[t as usize, k]]
        }
    };
    let mut h2 = vec![vec![0.0; de]; tn];
    for t in 0..tn {
        let mut h1 = vec![0.0; de];
        for (i, h) in h1.iter_mut().enumerate() {
            let mut acc = enc.b1[i];
            for w in 0..3 {
                for k in 0..din {
                    acc += enc.w1[[i, w * din + k]] * frame(t as isize + w as isize - 1, k);
                }
            }
            *h = acc.tanh();
        }
        for i in 0..de {
            let mut acc = enc.b2[i];
            for k in 0..de {
                acc += enc.w2[[i, k]] * h1[k];
            }
            h2[t][i] = acc.tanh();
        }
    }

    // Final embeddings via per-token composition (no folding).
    let dec_row = |id: usize| -> Vec<f64> {
        let mut out = vec![0.0; e];
        dec.embedding.row_into(id, &mut out);
        out
    };
    let join_row = |id: usize| -> Vec<f64> {
        let mut out = vec![0.0; e];
        j.embedding.row_into(id, &mut out);
        out
    };

    let mut g = vec![dec.start.to_vec()];
    for &y in targets {
        let emb = dec_row(y);
        let prev = g.last().unwrap().clone();
        let mut next = vec![0.0; dd];
        for (i, n) in next.iter_mut().enumerate() {
            let mut acc = dec.bias[i];
            for k in 0..e {
                acc += dec.w_in[[i, k]] * emb[k];
            }
            for k in 0..dd {
                acc += dec.w_rec[[i, k]] * prev[k];
            }
            *n = acc.tanh();
        }
        g.push(next);
    }

    let rows: Vec<Vec<f64>> = (0..=vocab).map(join_row).collect();
    let mut out = vec![vec![vec![0.0; vocab + 1]; targets.len() + 1]; tn];
    for t in 0..tn {
        for u in 0..=targets.len() {
            let mut hid = vec![0.0; e];
            for (i, h) in hid.iter_mut().enumerate() {
                let mut acc = j.bias[i];
                for k in 0..de {
                    acc += j.enc_proj[[i, k]] * h2[t][k];
                }
                for k in 0..dd {
                    acc += j.dec_proj[[i, k]] * g[u][k];
                }
                *h = acc.tanh();
            }
            let logits: Vec<f64> = (0..=vocab)
                .map(|v| j.out_bias[v] + rows[v].iter().zip(&hid).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            for v in 0..=vocab {
                out[t][u][v] = logits[v] - lse;
            }
        }
    }
    out
}

/// Tonal toy lexicon with homophones; pinyin inventory.
pub fn toy_lexicon() -> Lexicon {
    let src = "他\tta\t1\n她\tta\t1\n它\tta\t1\n妈\tma\t1\n马\tma\t3\n安\tan\t1\n张\tzhang\t1\n章\tzhang\t1\n";
    load_lexicon(src, ConsonantInventory::pinyin()).unwrap()
}

pub fn small_model(features: &str, seed: u64) -> Transducer {
    let lex = toy_lexicon();
    let vocab: Vec<String> = lex.tokens().map(String::from).collect();
    let dims = ModelDims { input_dim: 3, encoder_dim: 5, embed_dim: 4, decoder_dim: 5 };
    let mut m = Transducer::new(&lex, &vocab, features.parse().unwrap(), dims, seed).unwrap();
    // Non-zero biases so every parameter group carries gradient signal.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in m.tensors_mut() {
        for x in t.iter_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    m
}

pub fn random_utterance<R: Rng>(
    rng: &mut R,
    frames: usize,
    input_dim: usize,
    u: usize,
    vocab: usize,
) -> (AcousticSequence, Vec<usize>) {
    let x = Array2::from_shape_fn((frames, input_dim), |_| rng.random_range(-1.0..1.0));
    let y = (0..u).map(|_| rng.random_range(0..vocab)).collect();
    (AcousticSequence::new(x), y)
}

pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Relative error with a floor on the denominator so that vanishing
/// gradients are compared in absolute terms.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences (`h = 1e-5`) on up to `per_group` coordinates of every
/// parameter tensor, against the analytic gradient of the summed loss.
pub fn finite_difference_check(
    model: &Transducer,
    batch: &[(AcousticSequence, Vec<usize>)],
    per_group: usize,
    seed: u64,
) -> Vec<GradCheck> {
    let h = 1e-5;
    let mut grads = model.zeros_like();
    for (x, y) in batch {
        model.loss_and_grad(x, y, &mut grads).unwrap();
    }
    let total = |m: &Transducer| batch.iter().map(|(x, y)| m.loss(x, y).unwrap()).sum::<f64>();
    let names = model.tensor_names();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let len = analytic[k].len();
        let coords: Vec<usize> = if len <= per_group {
            (0..len).collect()
        } else {
            (0..per_group).map(|_| rng.random_range(0..len)).collect()
        };
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let mut plus = model.clone();
            plus.tensors_mut()[k][i] += h;
            let mut minus = model.clone();
            minus.tensors_mut()[k][i] -= h;
            let numeric = (total(&plus) - total(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[k][i], numeric));
        }
        out.push(GradCheck { name: name.clone(), checked: coords.len(), max_rel_err: worst });
    }
    out
}
