//! Subcommand definitions and implementations.
//!
//! Every command returns the text it prints on stdout and writes its files
//! (including a JSON summary) under `--out-dir`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pet_core::analysis::{align, chain_stats, cluster_stats, Alignment, ChainStats, ClusterStats, EditKind};
use pet_core::lexicon::{load_lexicon, ConsonantInventory, HomophoneHistogram, Lexicon};
use pet_core::training::{
    evaluate, generate_dataset, load_dataset, save_dataset, train_with_progress, Checkpoint, Dataset, TrainingError,
};
use pet_core::transducer::Transducer;
use serde::Serialize;

use crate::{benchmark, parse_feature_string, CliError, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "pet", version, about = "Transducers with pronunciation-aware embeddings")]
pub struct Cli {
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (manifest, frame files, lexicon).
    GenData(GenDataArgs),
    /// Train a model and keep the best checkpoints plus their average.
    Train(TrainArgs),
    /// Greedy-decode a dataset with a checkpoint.
    Decode(DecodeArgs),
    /// Replace composed embeddings by precomputed final tables.
    Fold(FoldArgs),
    /// Homophone histogram of a lexicon as two-column text.
    LexiconStats(LexiconStatsArgs),
    /// Error-chain analysis of reference/hypothesis files.
    Analyze(AnalyzeArgs),
    /// Train every config on every seed and compare error chains.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of utterances (default: n_train + n_valid from the config).
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory; generated from the config when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Feature string, overriding the config.
    #[arg(long)]
    pub features: Option<String>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub max_symbols_per_frame: usize,
}

#[derive(Debug, Args)]
pub struct FoldArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LexiconStatsArgs {
    #[arg(long)]
    pub lexicon: PathBuf,
    /// Consonant inventory file (default: pinyin initials).
    #[arg(long)]
    pub inventory: Option<PathBuf>,
    /// Count homophones only when tones also match.
    #[arg(long)]
    pub tone_sensitive: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub hyp: PathBuf,
    /// Treat every non-space character as a token.
    #[arg(long)]
    pub per_char: bool,
    /// Lexicon for counting homophone substitutions.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub inventory: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Comma-separated feature strings, overriding the config.
    #[arg(long, value_delimiter = ',')]
    pub configs: Option<Vec<String>>,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Suppress progress lines on stderr.
    #[arg(long)]
    pub quiet: bool,
}

/// Parses `argv` and runs the command, returning its stdout text.
pub fn run<I, T>(argv: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Usage(e.to_string()))?;
    execute(&cli)
}

pub fn execute(cli: &Cli) -> Result<String, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
        cfg.train.seed = seed;
        cfg.seeds = vec![seed];
    }
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::GenData(a) => gen_data(&cfg, a, out),
        Command::Train(a) => train_cmd(&cfg, a, out),
        Command::Decode(a) => decode(a, out),
        Command::Fold(a) => fold(a),
        Command::LexiconStats(a) => lexicon_stats(a, out),
        Command::Analyze(a) => analyze(a, out),
        Command::Benchmark(a) => benchmark_cmd(cfg, a, out),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn gen_data(cfg: &ExperimentConfig, a: &GenDataArgs, out: &Path) -> Result<String, CliError> {
    let n = a.n.unwrap_or(cfg.n_train + cfg.n_valid);
    let data = generate_dataset(&cfg.data, n)?;
    create_dir(out)?;
    save_dataset(out, &data)?;
    write_json(&out.join("spec.json"), &cfg.data)?;
    Ok(format!("wrote {} utterances ({} tokens in the lexicon) to {}\n", data.len(), data.lexicon.len(), out.display()))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    features: &'a str,
    steps_run: usize,
    best: Vec<(usize, f64)>,
    averaged_checkpoint: String,
    averaged_valid_cer: f64,
    parameters: usize,
}

fn train_cmd(cfg: &ExperimentConfig, a: &TrainArgs, out: &Path) -> Result<String, CliError> {
    let features = a.features.clone().unwrap_or_else(|| cfg.features.clone());
    let (train_set, valid_set) = match &a.data {
        Some(dir) => {
            let data = load_dataset(dir)?;
            if data.len() < 2 {
                return Err(CliError::Data("dataset needs at least two utterances".into()));
            }
            let frac = cfg.n_valid as f64 / (cfg.n_train + cfg.n_valid) as f64;
            data.split(frac, cfg.train.seed)
        }
        None => {
            let data = generate_dataset(&cfg.data, cfg.n_train + cfg.n_valid)?;
            data.split(cfg.n_valid as f64 / data.len() as f64, cfg.train.seed)
        }
    };
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(CliError::Data("train/validation split left an empty side".into()));
    }
    let fc = parse_feature_string(&features, train_set.lexicon.is_tonal())?;
    let input_dim = train_set.utterances[0].frames.frames.ncols();
    let dims = pet_core::transducer::ModelDims { input_dim, ..cfg.dims };
    let model =
        Transducer::new(&train_set.lexicon, &train_set.vocab, fc, dims, cfg.train.seed).map_err(TrainingError::from)?;
    let parameters = model.parameter_count();
    let result = train_with_progress(model, &train_set, &valid_set, &cfg.train, |p| {
        eprintln!("step {} loss {:.4} valid CER {:.4}", p.step, p.train_loss, p.valid_cer)
    })?;

    let ck_dir = out.join("checkpoints");
    create_dir(&ck_dir)?;
    for c in &result.best {
        c.save(&ck_dir.join(format!("step-{:06}.json", c.step)))?;
    }
    let avg_cer = pet_core::training::evaluate(&result.averaged, &valid_set, cfg.train.max_symbols_per_frame)?.cer();
    let averaged = Checkpoint { step: result.best[0].step, valid_cer: avg_cer, model: result.averaged };
    let avg_path = out.join("averaged.json");
    averaged.save(&avg_path)?;

    let mut history = String::from("step\ttrain_loss\tvalid_cer\n");
    for p in &result.history {
        let _ = writeln!(history, "{}\t{:.6}\t{:.6}", p.step, p.train_loss, p.valid_cer);
    }
    fs::write(out.join("history.tsv"), &history)?;
    write_json(
        &out.join("summary.json"),
        &TrainSummary {
            features: &features,
            steps_run: result.history.last().map_or(0, |p| p.step),
            best: result.best.iter().map(|c| (c.step, c.valid_cer)).collect(),
            averaged_checkpoint: avg_path.display().to_string(),
            averaged_valid_cer: avg_cer,
            parameters,
        },
    )?;
    Ok(format!("{history}averaged checkpoint: {} (valid CER {avg_cer:.4})\n", avg_path.display()))
}

#[derive(Serialize)]
struct DecodeSummary {
    utterances: usize,
    cer: f64,
    chain: ChainStats,
    clusters: ClusterStats,
}

fn decode(a: &DecodeArgs, out: &Path) -> Result<String, CliError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data: Dataset = load_dataset(&a.data)?;
    if ck.model.vocab() != data.vocab.as_slice() {
        return Err(CliError::Data("checkpoint and dataset vocabularies differ".into()));
    }
    if a.max_symbols_per_frame == 0 {
        return Err(CliError::Usage("--max-symbols-per-frame must be at least 1".into()));
    }
    let eval = evaluate(&ck.model, &data, a.max_symbols_per_frame)?;
    let (mut refs, mut hyps, mut table) = (String::new(), String::new(), String::from("id\tref\thyp\n"));
    for (u, h) in data.utterances.iter().zip(&eval.hypotheses) {
        let (r, h) = (data.transcript(&u.tokens), data.transcript(h));
        let _ = writeln!(refs, "{r}");
        let _ = writeln!(hyps, "{h}");
        let _ = writeln!(table, "{}\t{r}\t{h}", u.id);
    }
    create_dir(out)?;
    fs::write(out.join("ref.txt"), refs)?;
    fs::write(out.join("hyp.txt"), hyps)?;
    fs::write(out.join("decode.tsv"), &table)?;
    let chain = chain_stats(&eval.alignments).map_err(|e| CliError::Data(e.to_string()))?;
    let clusters = cluster_stats(&eval.alignments).map_err(|e| CliError::Data(e.to_string()))?;
    let cer = eval.cer();
    write_json(&out.join("decode.json"), &DecodeSummary { utterances: data.len(), cer, chain, clusters })?;
    Ok(format!("decoded {} utterances, CER {:.4}\n", data.len(), cer))
}

fn fold(a: &FoldArgs) -> Result<String, CliError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let folded = Checkpoint { model: ck.model.fold(), ..ck };
    folded.save(&a.out)?;
    Ok(format!(
        "folded tables: decoder {} rows, joiner {} rows -> {}\n",
        folded.model.decoder.embedding.matrix().nrows(),
        folded.model.joiner.embedding.matrix().nrows(),
        a.out.display()
    ))
}

fn load_lexicon_file(lexicon: &Path, inventory: Option<&Path>) -> Result<Lexicon, CliError> {
    let inv = match inventory {
        Some(p) => ConsonantInventory::parse(&read_text(p)?).map_err(|e| CliError::Data(e.to_string()))?,
        None => ConsonantInventory::pinyin(),
    };
    load_lexicon(&read_text(lexicon)?, inv).map_err(|e| CliError::Data(format!("{}: {e}", lexicon.display())))
}

#[derive(Serialize)]
struct LexiconSummary {
    entries: usize,
    distinct_pronunciations: usize,
    tone_sensitive: bool,
    histogram: HomophoneHistogram,
}

fn lexicon_stats(a: &LexiconStatsArgs, out: &Path) -> Result<String, CliError> {
    let lex = load_lexicon_file(&a.lexicon, a.inventory.as_deref())?;
    let h = lex.homophone_histogram(a.tone_sensitive).map_err(|e| CliError::Data(e.to_string()))?;
    let columns = h.to_columns();
    create_dir(out)?;
    fs::write(out.join("histogram.tsv"), &columns)?;
    write_json(
        &out.join("lexicon_stats.json"),
        &LexiconSummary {
            entries: lex.len(),
            distinct_pronunciations: h.distinct_pronunciations(),
            tone_sensitive: a.tone_sensitive,
            histogram: h,
        },
    )?;
    Ok(columns)
}

fn tokenize(line: &str, per_char: bool) -> Vec<String> {
    if per_char {
        line.chars().filter(|c| !c.is_whitespace()).map(String::from).collect()
    } else {
        line.split_whitespace().map(String::from).collect()
    }
}

#[derive(Serialize)]
struct AnalysisSummary {
    utterances: usize,
    chain: ChainStats,
    clusters: ClusterStats,
    homophone_substitutions: Option<u64>,
}

fn analyze(a: &AnalyzeArgs, out: &Path) -> Result<String, CliError> {
    let refs: Vec<Vec<String>> = read_text(&a.reference)?.lines().map(|l| tokenize(l, a.per_char)).collect();
    let hyps: Vec<Vec<String>> = read_text(&a.hyp)?.lines().map(|l| tokenize(l, a.per_char)).collect();
    if refs.len() != hyps.len() {
        return Err(CliError::Data(format!("{} reference lines but {} hypothesis lines", refs.len(), hyps.len())));
    }
    if refs.is_empty() {
        return Err(CliError::Data("no utterances to analyze".into()));
    }
    let lexicon = a.lexicon.as_deref().map(|p| load_lexicon_file(p, a.inventory.as_deref())).transpose()?;
    let alignments: Vec<Alignment> = refs.iter().zip(&hyps).map(|(r, h)| align(r, h)).collect();

    let mut report = String::from("utt\tref\thyp\tflags\n");
    let mut homophone_subs = 0u64;
    for (i, ((r, h), al)) in refs.iter().zip(&hyps).zip(&alignments).enumerate() {
        let flags: String = al.correct.iter().map(|&ok| if ok { 'C' } else { 'E' }).collect();
        let _ = writeln!(report, "{i}\t{}\t{}\t{flags}", r.join(" "), h.join(" "));
        if let Some(lex) = &lexicon {
            for op in al.ops.iter().filter(|o| o.kind == EditKind::Sub) {
                let (rt, ht) = (&r[op.ref_pos], &h[op.hyp_pos]);
                if let (Some(x), Some(y)) = (lex.get(rt), lex.get(ht)) {
                    homophone_subs += u64::from(x.pron == y.pron);
                }
            }
        }
    }
    let chain = chain_stats(&alignments).map_err(|e| CliError::Data(e.to_string()))?;
    let clusters = cluster_stats(&alignments).map_err(|e| CliError::Data(e.to_string()))?;
    create_dir(out)?;
    fs::write(out.join("alignment.tsv"), report)?;
    let summary = AnalysisSummary {
        utterances: refs.len(),
        chain,
        clusters,
        homophone_substitutions: lexicon.map(|_| homophone_subs),
    };
    write_json(&out.join("analysis.json"), &summary)?;

    let flag = |u: bool| if u { " (undefined)" } else { "" };
    let mut s = String::new();
    let _ = writeln!(s, "utterances\t{}", summary.utterances);
    let _ = writeln!(s, "CER\t{:.4}", chain.cer);
    let _ = writeln!(s, "P(E|E)\t{:.4}{}", chain.p_e_given_e, flag(chain.e_given_e_undefined));
    let _ = writeln!(s, "P(E|C)\t{:.4}{}", chain.p_e_given_c, flag(chain.e_given_c_undefined));
    let _ = writeln!(s, "avg-cluster\t{:.3}", summary.clusters.avg_length);
    let _ = writeln!(s, "sub/del/ins\t{}/{}/{}", chain.substitutions, chain.deletions, chain.insertions);
    if let Some(n) = summary.homophone_substitutions {
        let _ = writeln!(s, "homophone-substitutions\t{n}");
    }
    Ok(s)
}

fn benchmark_cmd(mut cfg: ExperimentConfig, a: &BenchmarkArgs, out: &Path) -> Result<String, CliError> {
    if let Some(c) = &a.configs {
        cfg.configs = c.clone();
    }
    if let Some(s) = &a.seeds {
        cfg.seeds = s.clone();
    }
    let quiet = a.quiet;
    let report = benchmark(&cfg, |line| {
        if !quiet {
            eprintln!("{line}")
        }
    })?;
    let table = report.to_table();
    create_dir(out)?;
    fs::write(out.join("benchmark.tsv"), &table)?;
    write_json(&out.join("benchmark.json"), &report)?;
    Ok(table)
}
