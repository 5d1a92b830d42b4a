//! Baseline-vs-PET comparison: every config trained on the same data per seed.

use std::fmt::Write as _;

use pet_core::analysis::{chain_stats, cluster_stats, ChainStats, ClusterStats};
use pet_core::training::{
    evaluate, generate_dataset, train_with_progress, Dataset, EvalPoint, SyntheticTaskSpec, TrainConfig, TrainingError,
};
use pet_core::transducer::Transducer;
use serde::{Deserialize, Serialize};

use crate::{parse_feature_string, CliError, ExperimentConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub features: String,
    pub decoder_emb: String,
    pub joiner_emb: String,
    pub seed: u64,
    pub best_step: usize,
    pub valid_cer: f64,
    pub chain: ChainStats,
    pub clusters: ClusterStats,
}

/// Seed-averaged statistics for one config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigMean {
    pub features: String,
    pub decoder_emb: String,
    pub joiner_emb: String,
    pub p_e_given_e: f64,
    pub p_e_given_c: f64,
    pub cer: f64,
    pub avg_cluster: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub runs: Vec<RunResult>,
    pub means: Vec<ConfigMean>,
}

/// The three data splits for one seed. Utterances are drawn from
/// independent per-index streams, so the splits never overlap.
pub fn benchmark_splits(
    spec: &SyntheticTaskSpec,
    cfg: &ExperimentConfig,
) -> Result<(Dataset, Dataset, Dataset), CliError> {
    let all = generate_dataset(spec, cfg.n_train + cfg.n_valid + cfg.n_eval)?;
    let part = |from: usize, to: usize| Dataset { utterances: all.utterances[from..to].to_vec(), ..all.clone() };
    let a = cfg.n_train;
    let b = a + cfg.n_valid;
    Ok((part(0, a), part(a, b), part(b, all.len())))
}

/// Trains every config on every seed and analyses the averaged checkpoint on
/// the held-out evaluation split. `log` receives progress lines.
pub fn benchmark(cfg: &ExperimentConfig, mut log: impl FnMut(&str)) -> Result<BenchmarkReport, CliError> {
    cfg.validate()?;
    if cfg.configs.is_empty() || cfg.seeds.is_empty() {
        return Err(CliError::Usage("benchmark needs at least one config and one seed".into()));
    }
    if cfg.n_eval == 0 {
        return Err(CliError::Usage("benchmark needs n_eval > 0".into()));
    }
    let tonal = cfg.data.tone_count > 0;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let spec = SyntheticTaskSpec { seed, ..cfg.data.clone() };
        let (tr, va, ev) = benchmark_splits(&spec, cfg)?;
        for features in &cfg.configs {
            let fc = parse_feature_string(features, tonal)?;
            let model = Transducer::new(&tr.lexicon, &tr.vocab, fc, cfg.dims, seed).map_err(TrainingError::from)?;
            let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
            let label = format!("{features} seed {seed}");
            let out = train_with_progress(model, &tr, &va, &train_cfg, |p: &EvalPoint| {
                log(&format!("{label}: step {} loss {:.4} valid CER {:.4}", p.step, p.train_loss, p.valid_cer))
            })?;
            let eval = evaluate(&out.averaged, &ev, train_cfg.max_symbols_per_frame)?;
            let chain = chain_stats(&eval.alignments).map_err(|e| CliError::Data(e.to_string()))?;
            let clusters = cluster_stats(&eval.alignments).map_err(|e| CliError::Data(e.to_string()))?;
            log(&format!(
                "{label}: eval CER {:.4} P(E|E) {:.4} P(E|C) {:.4} avg cluster {:.3}",
                chain.cer, chain.p_e_given_e, chain.p_e_given_c, clusters.avg_length
            ));
            runs.push(RunResult {
                features: features.clone(),
                decoder_emb: fc.decoder.to_string(),
                joiner_emb: fc.joiner.to_string(),
                seed,
                best_step: out.best[0].step,
                valid_cer: out.best[0].valid_cer,
                chain,
                clusters,
            });
        }
    }
    let means = cfg
        .configs
        .iter()
        .map(|features| {
            let rs: Vec<&RunResult> = runs.iter().filter(|r| &r.features == features).collect();
            let mean = |f: &dyn Fn(&RunResult) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
            ConfigMean {
                features: features.clone(),
                decoder_emb: rs[0].decoder_emb.clone(),
                joiner_emb: rs[0].joiner_emb.clone(),
                p_e_given_e: mean(&|r| r.chain.p_e_given_e),
                p_e_given_c: mean(&|r| r.chain.p_e_given_c),
                cer: mean(&|r| r.chain.cer),
                avg_cluster: mean(&|r| r.clusters.avg_length),
            }
        })
        .collect();
    Ok(BenchmarkReport { runs, means })
}

impl BenchmarkReport {
    pub fn mean_for(&self, features: &str) -> Option<&ConfigMean> {
        self.means.iter().find(|m| m.features == features)
    }

    /// Per-run rows followed by per-config means; probabilities and CER in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::from("decoder-emb\tjoiner-emb\tseed\tP(E|E)\tP(E|C)\tCER\tavg-cluster\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.3}",
                r.decoder_emb,
                r.joiner_emb,
                r.seed,
                100.0 * r.chain.p_e_given_e,
                100.0 * r.chain.p_e_given_c,
                100.0 * r.chain.cer,
                r.clusters.avg_length
            );
        }
        for m in &self.means {
            let _ = writeln!(
                s,
                "{}\t{}\tmean\t{:.2}\t{:.2}\t{:.2}\t{:.3}",
                m.decoder_emb,
                m.joiner_emb,
                100.0 * m.p_e_given_e,
                100.0 * m.p_e_given_c,
                100.0 * m.cer,
                m.avg_cluster
            );
        }
        s
    }
}
