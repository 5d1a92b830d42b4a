//! Error analysis: edit alignment, CER, conditional error rates and error clusters.
//!
//! Every reference position is flagged correct or erroneous. A position is an
//! error when it is substituted or deleted, or when an insertion sits directly
//! before it; insertions after the final reference token flag the final
//! position. Chains are counted over consecutive reference positions within
//! one utterance, and the first position of every utterance is treated as
//! following a correct token.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("need at least two reports to compare, got {0}")]
    TooFewReports(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditKind {
    Match,
    Sub,
    Ins,
    Del,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOp {
    pub kind: EditKind,
    /// Reference position consumed (`Match`, `Sub`, `Del`) or the position an
    /// insertion precedes (`Ins`; equals `ref.len()` after the last token).
    pub ref_pos: usize,
    /// Hypothesis position consumed (`Match`, `Sub`, `Ins`) or the position a
    /// deletion precedes (`Del`).
    pub hyp_pos: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub ops: Vec<EditOp>,
    /// One flag per reference token; `true` means recognized correctly.
    pub correct: Vec<bool>,
}

impl Alignment {
    pub fn count(&self, kind: EditKind) -> usize {
        self.ops.iter().filter(|o| o.kind == kind).count()
    }

    /// Substitutions + deletions + insertions.
    pub fn edits(&self) -> usize {
        self.ops.iter().filter(|o| o.kind != EditKind::Match).count()
    }

    pub fn ref_len(&self) -> usize {
        self.correct.len()
    }

    pub fn cer(&self) -> f64 {
        self.edits() as f64 / self.ref_len().max(1) as f64
    }
}

/// Minimal unit-cost alignment. On equal cost the backtrace prefers a
/// diagonal step (match or substitution), then insertion, then deletion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Alignment {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = i;
    }
    for (j, c) in cost.iter_mut().take(w).enumerate() {
        *c = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let ins = cost[i * w + j - 1] + 1;
            let del = cost[(i - 1) * w + j] + 1;
            cost[i * w + j] = diag.min(ins).min(del);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if cost[(i - 1) * w + j - 1] + usize::from(!same) == here {
                let kind = if same { EditKind::Match } else { EditKind::Sub };
                ops.push(EditOp { kind, ref_pos: i - 1, hyp_pos: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && cost[i * w + j - 1] + 1 == here {
            ops.push(EditOp { kind: EditKind::Ins, ref_pos: i, hyp_pos: j - 1 });
            j -= 1;
        } else {
            ops.push(EditOp { kind: EditKind::Del, ref_pos: i - 1, hyp_pos: j });
            i -= 1;
        }
    }
    ops.reverse();

    let mut correct = vec![true; n];
    for op in &ops {
        match op.kind {
            EditKind::Match => {}
            EditKind::Sub | EditKind::Del => correct[op.ref_pos] = false,
            EditKind::Ins => {
                if n > 0 {
                    correct[op.ref_pos.min(n - 1)] = false;
                }
            }
        }
    }
    Alignment { ops, correct }
}

/// Conditional error statistics over consecutive reference positions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    /// previous error, current error
    pub n_ee: u64,
    /// previous error, current correct
    pub n_ec: u64,
    /// previous correct, current error
    pub n_ce: u64,
    /// previous correct, current correct
    pub n_cc: u64,
    pub p_e_given_e: f64,
    pub p_e_given_c: f64,
    /// No position followed an error, so `p_e_given_e` is reported as 0.
    pub e_given_e_undefined: bool,
    pub e_given_c_undefined: bool,
    pub substitutions: u64,
    pub deletions: u64,
    pub insertions: u64,
    pub ref_tokens: u64,
    pub cer: f64,
}

impl ChainStats {
    pub fn transitions(&self) -> u64 {
        self.n_ee + self.n_ec + self.n_ce + self.n_cc
    }

    /// `P(E|E) / P(E|C)`, or `None` when `P(E|C)` is zero.
    pub fn chain_ratio(&self) -> Option<f64> {
        (self.p_e_given_c > 0.0).then(|| self.p_e_given_e / self.p_e_given_c)
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Counts are aggregated over the corpus before dividing.
pub fn chain_stats(alignments: &[Alignment]) -> Result<ChainStats, AnalysisError> {
    if alignments.is_empty() {
        return Err(AnalysisError::EmptyCorpus);
    }
    let mut s = ChainStats::default();
    for a in alignments {
        let mut prev_correct = true;
        for &cur in &a.correct {
            match (prev_correct, cur) {
                (false, false) => s.n_ee += 1,
                (false, true) => s.n_ec += 1,
                (true, false) => s.n_ce += 1,
                (true, true) => s.n_cc += 1,
            }
            prev_correct = cur;
        }
        s.substitutions += a.count(EditKind::Sub) as u64;
        s.deletions += a.count(EditKind::Del) as u64;
        s.insertions += a.count(EditKind::Ins) as u64;
        s.ref_tokens += a.ref_len() as u64;
    }
    (s.p_e_given_e, s.e_given_e_undefined) = ratio(s.n_ee, s.n_ee + s.n_ec);
    (s.p_e_given_c, s.e_given_c_undefined) = ratio(s.n_ce, s.n_ce + s.n_cc);
    let edits = s.substitutions + s.deletions + s.insertions;
    s.cer = edits as f64 / s.ref_tokens.max(1) as f64;
    Ok(s)
}

/// Maximal runs of consecutive erroneous reference positions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub cluster_lengths: Vec<usize>,
    /// Mean cluster length; 0 when `empty`.
    pub avg_length: f64,
    pub empty: bool,
}

impl ClusterStats {
    pub fn error_positions(&self) -> usize {
        self.cluster_lengths.iter().sum()
    }
}

pub fn cluster_stats(alignments: &[Alignment]) -> Result<ClusterStats, AnalysisError> {
    if alignments.is_empty() {
        return Err(AnalysisError::EmptyCorpus);
    }
    let mut lengths = Vec::new();
    for a in alignments {
        let mut run = 0;
        for &ok in &a.correct {
            if ok {
                if run > 0 {
                    lengths.push(run);
                }
                run = 0;
            } else {
                run += 1;
            }
        }
        if run > 0 {
            lengths.push(run);
        }
    }
    let empty = lengths.is_empty();
    let avg_length = if empty { 0.0 } else { lengths.iter().sum::<usize>() as f64 / lengths.len() as f64 };
    Ok(ClusterStats { cluster_lengths: lengths, avg_length, empty })
}

/// One labelled row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub decoder_emb: String,
    pub joiner_emb: String,
    pub chain: ChainStats,
    pub clusters: ClusterStats,
}

impl ModelReport {
    /// Aligns every (reference, hypothesis) pair and summarizes it.
    pub fn from_pairs<T: PartialEq>(
        decoder_emb: &str,
        joiner_emb: &str,
        pairs: &[(Vec<T>, Vec<T>)],
    ) -> Result<Self, AnalysisError> {
        let alignments: Vec<Alignment> = pairs.iter().map(|(r, h)| align(r, h)).collect();
        Ok(Self {
            decoder_emb: decoder_emb.to_string(),
            joiner_emb: joiner_emb.to_string(),
            chain: chain_stats(&alignments)?,
            clusters: cluster_stats(&alignments)?,
        })
    }
}

/// Tab-separated table: decoder-emb, joiner-emb, P(E|E), P(E|C), CER and
/// average error-cluster length. Probabilities and CER are percentages.
pub fn compare_models(reports: &[ModelReport]) -> Result<String, AnalysisError> {
    if reports.len() < 2 {
        return Err(AnalysisError::TooFewReports(reports.len()));
    }
    let mut out = String::from("decoder-emb\tjoiner-emb\tP(E|E)\tP(E|C)\tCER\tavg-cluster\n");
    for r in reports {
        let flag = |undefined: bool| if undefined { "*" } else { "" };
        let _ = writeln!(
            out,
            "{}\t{}\t{:.2}{}\t{:.2}{}\t{:.2}\t{:.3}",
            r.decoder_emb,
            r.joiner_emb,
            100.0 * r.chain.p_e_given_e,
            flag(r.chain.e_given_e_undefined),
            100.0 * r.chain.p_e_given_c,
            flag(r.chain.e_given_c_undefined),
            100.0 * r.chain.cer,
            r.clusters.avg_length,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(s: &str) -> Alignment {
        let correct: Vec<bool> = s.chars().map(|c| c == 'C').collect();
        Alignment { ops: Vec::new(), correct }
    }

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn identical_sequences_align_as_matches() {
        let a = align(&chars("abc"), &chars("abc"));
        assert!(a.ops.iter().all(|o| o.kind == EditKind::Match));
        assert_eq!(a.cer(), 0.0);
    }

    #[test]
    fn single_substitution() {
        let a = align(&chars("abc"), &chars("axc"));
        assert_eq!(a.correct, vec![true, false, true]);
        assert!((a.cer() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.count(EditKind::Sub), 1);
    }

    #[test]
    fn empty_hypothesis_deletes_everything() {
        let a = align(&chars("ab"), &[]);
        assert_eq!(a.count(EditKind::Del), 2);
        assert_eq!(a.correct, vec![false, false]);
        assert_eq!(a.cer(), 1.0);
        let b = align::<char>(&[], &[]);
        assert!(b.ops.is_empty() && b.correct.is_empty());
        let c = align(&[], &chars("xy"));
        assert_eq!(c.count(EditKind::Ins), 2);
        assert!(c.correct.is_empty());
    }

    #[test]
    fn insertion_marks_following_position() {
        let a = align(&chars("abc"), &chars("axbc"));
        assert_eq!(a.count(EditKind::Ins), 1);
        assert_eq!(a.correct, vec![true, false, true]);
        let tail = align(&chars("ab"), &chars("abz"));
        assert_eq!(tail.correct, vec![true, false]);
    }

    #[test]
    fn tie_break_prefers_substitution_over_indels() {
        // "ab" vs "ba": two substitutions and ins+del both cost 2.
        let a = align(&chars("ab"), &chars("ba"));
        assert_eq!(a.count(EditKind::Sub), 2);
    }

    #[test]
    fn chain_fixture() {
        let s = chain_stats(&[flags("EECC")]).unwrap();
        assert_eq!((s.n_ce, s.n_ee, s.n_ec, s.n_cc), (1, 1, 1, 1));
        assert_eq!(s.p_e_given_e, 0.5);
        assert_eq!(s.p_e_given_c, 0.5);
        assert_eq!(s.transitions(), 4);
    }

    #[test]
    fn all_correct_corpus_flags_undefined_conditional() {
        let s = chain_stats(&[flags("CCC"), flags("CC")]).unwrap();
        assert_eq!(s.p_e_given_c, 0.0);
        assert_eq!(s.p_e_given_e, 0.0);
        assert!(s.e_given_e_undefined && !s.e_given_c_undefined);
        assert_eq!(chain_stats(&[]), Err(AnalysisError::EmptyCorpus));
    }

    #[test]
    fn utterances_restart_as_correct() {
        // Without the restart the second utterance's first E would count as E->E.
        let s = chain_stats(&[flags("CE"), flags("EC")]).unwrap();
        assert_eq!((s.n_ee, s.n_ce, s.n_ec, s.n_cc), (0, 2, 1, 1));
    }

    #[test]
    fn cluster_fixtures() {
        let c = cluster_stats(&[flags("EECE")]).unwrap();
        assert_eq!(c.cluster_lengths, vec![2, 1]);
        assert_eq!(c.avg_length, 1.5);
        let none = cluster_stats(&[flags("CCC")]).unwrap();
        assert!(none.empty && none.avg_length == 0.0);
        let full = cluster_stats(&[flags("EEEEE")]).unwrap();
        assert_eq!(full.cluster_lengths, vec![5]);
        assert_eq!(full.avg_length, 5.0);
        // runs never span utterances
        let split = cluster_stats(&[flags("CE"), flags("EC")]).unwrap();
        assert_eq!(split.cluster_lengths, vec![1, 1]);
    }

    #[test]
    fn comparison_table() {
        let a = ModelReport::from_pairs("W", "W", &[(chars("abcd"), chars("xycd"))]).unwrap();
        let b = ModelReport::from_pairs("V", "W", &[(chars("abcd"), chars("xbcy"))]).unwrap();
        let table = compare_models(&[a.clone(), b]).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[1], "W\tW\t50.00\t50.00\t50.00\t2.000");
        assert_eq!(lines[2], "V\tW\t0.00\t66.67\t50.00\t1.000");
        assert_eq!(compare_models(&[a]), Err(AnalysisError::TooFewReports(1)));
    }
}
