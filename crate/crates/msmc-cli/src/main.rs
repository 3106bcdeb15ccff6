//! Command-line harness: corpus generation, training, analysis, synthesis,
//! and reporting.
//!
//! Exit codes: 0 success, 2 configuration error, 3 training divergence,
//! 1 anything else.

use clap::{Args, Parser, Subcommand};
use msmc::analyzer::Analyzer;
use msmc::checkpoint::{
    self, file_sha256, load_analyzer, load_predictor, RngState,
};
use msmc::config::{ExperimentConfig, Preset};
use msmc::corpus::{generate_corpus, Corpus};
use msmc::error::Error;
use msmc::metrics::representation_report;
use msmc::pipeline::{
    assemble_vocoder_input, decode_waveform, msmcr_pack, write_features, write_wav,
    DecoderRegistry,
};
use msmc::predictor::Predictor;
use msmc::train::{self, Adam, LogRecord};
use msmc::vq::mix_seed;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const OUT_ROOT_ENV: &str = "MSMC_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "msmc",
    about = "Multi-stage multi-codebook representation pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigSource {
    /// Path to an experiment config (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset: V1, V2, V3, M1, M2, M3, reference.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the training seed from the config/preset.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigSource {
    fn load(&self) -> msmc::Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), None) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name.parse::<Preset>()?),
            (None, None) => {
                return Err(Error::config("one of --config or --preset is required"))
            }
            (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
        };
        if let Some(seed) = self.seed {
            cfg.training.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generates the synthetic paired corpus described by the config.
    GenCorpus {
        #[command(flatten)]
        source: ConfigSource,
        /// Output directory (under $MSMC_OUT_ROOT when relative).
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the feature analyzer and writes checkpoints + loss log.
    TrainAnalyzer {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        out: PathBuf,
        /// Resumes from an analyzer checkpoint (its config wins).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Trains the multi-stage predictor against a trained analyzer.
    TrainPredictor {
        #[command(flatten)]
        source: ConfigSource,
        /// Trained analyzer checkpoint.
        #[arg(long)]
        analyzer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resumes from a predictor checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Extracts representations for every corpus item.
    Analyze {
        /// Trained analyzer checkpoint.
        #[arg(long)]
        analyzer: PathBuf,
        /// Corpus directory (defaults to the checkpoint's data source).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Text to representation + vocoder features + stub waveform.
    Synthesize {
        /// Trained predictor checkpoint.
        #[arg(long)]
        predictor: PathBuf,
        /// Token-id lines, whitespace separated.
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Analyzer checkpoint to cross-check the training hash against.
        #[arg(long)]
        analyzer: Option<PathBuf>,
    },
    /// Compactness/completeness report for a trained analyzer.
    Report {
        /// Trained analyzer checkpoint.
        #[arg(long)]
        analyzer: PathBuf,
        /// Eval corpus directory (defaults to the checkpoint's data source).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn corpus_from_config(cfg: &ExperimentConfig) -> msmc::Result<Corpus> {
    if let Some(spec) = &cfg.data.synthetic {
        return generate_corpus(spec);
    }
    if let Some(dir) = &cfg.data.corpus_dir {
        return Corpus::load_dir(dir);
    }
    Err(Error::config("config has no data source"))
}

fn write_loss_log(dir: &Path, log: &[LogRecord]) -> msmc::Result<()> {
    let mut text = String::new();
    for record in log {
        text.push_str(&serde_json::to_string(record).expect("log record json"));
        text.push('\n');
    }
    fs::write(dir.join("loss_log.jsonl"), text)?;
    Ok(())
}

fn echo_progress(log: &[LogRecord], every: usize) {
    for record in log {
        if record.iter % every as u64 == 0 {
            println!(
                "iter {:>6}  lr {:.3e}  total {:.6}",
                record.iter, record.lr, record.total
            );
        }
    }
}

fn cmd_gen_corpus(source: &ConfigSource, out: &Path) -> msmc::Result<()> {
    let cfg = source.load()?;
    let spec = cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::config("gen-corpus needs a [data.synthetic] section"))?;
    let corpus = generate_corpus(spec)?;
    let out = resolve_out(out);
    corpus.save_dir(&out)?;
    println!(
        "wrote {} items (vocab {}, feature dim {}) to {}",
        corpus.items.len(),
        corpus.vocab_size,
        corpus.feature_dim,
        out.display()
    );
    Ok(())
}

fn cmd_train_analyzer(
    source: &ConfigSource,
    out: &Path,
    resume: Option<&Path>,
) -> msmc::Result<()> {
    let out = resolve_out(out);
    fs::create_dir_all(&out)?;

    let ckpt_dir = out.clone();
    let (cfg, analyzer, opt, rng, log) = match resume {
        Some(path) => {
            let ckpt = load_analyzer(path)?;
            if source.config.is_some() || source.preset.is_some() {
                let given = source.load()?;
                if given.analyzer.fingerprint() != ckpt.experiment.analyzer.fingerprint() {
                    return Err(Error::Mismatch(
                        "provided config disagrees with the resume checkpoint".into(),
                    ));
                }
            }
            let cfg = ckpt.experiment;
            let mut analyzer = ckpt.analyzer;
            let mut opt = ckpt
                .adam
                .unwrap_or_else(|| Adam::from_config(&cfg.training));
            let mut rng = ckpt.rng.restore();
            cfg.save(&out.join("config.toml"))?;
            let corpus = corpus_from_config(&cfg)?;
            let experiment = cfg.clone();
            let mut hook = move |iter: u64, a: &Analyzer, opt: &Adam, rng: &ChaCha20Rng| {
                let path = ckpt_dir.join(format!("analyzer_{iter:06}.msmcckpt"));
                checkpoint::save_analyzer(&path, &experiment, a, Some(opt), &RngState::capture(rng))
            };
            let log = train::train_analyzer(
                &mut analyzer,
                &corpus.feature_views(),
                &cfg.training,
                &mut opt,
                &mut rng,
                Some(&mut hook),
            )?;
            (cfg, analyzer, opt, rng, log)
        }
        None => {
            let cfg = source.load()?;
            cfg.save(&out.join("config.toml"))?;
            let corpus = corpus_from_config(&cfg)?;
            let experiment = cfg.clone();
            let mut hook = move |iter: u64, a: &Analyzer, opt: &Adam, rng: &ChaCha20Rng| {
                let path = ckpt_dir.join(format!("analyzer_{iter:06}.msmcckpt"));
                checkpoint::save_analyzer(&path, &experiment, a, Some(opt), &RngState::capture(rng))
            };
            let run = train::run_analyzer_experiment(&cfg, &corpus.feature_views(), Some(&mut hook))?;
            (cfg, run.analyzer, run.opt, run.rng, run.log)
        }
    };
    echo_progress(&log, cfg.training.log_every);
    write_loss_log(&out, &log)?;
    let final_path = out.join("analyzer.msmcckpt");
    checkpoint::save_analyzer(&final_path, &cfg, &analyzer, Some(&opt), &RngState::capture(&rng))?;
    println!("analyzer checkpoint: {}", final_path.display());
    Ok(())
}

fn cmd_train_predictor(
    source: &ConfigSource,
    analyzer_path: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> msmc::Result<()> {
    let out = resolve_out(out);
    fs::create_dir_all(&out)?;
    let analyzer_ckpt = load_analyzer(analyzer_path)?;
    let analyzer_hash = file_sha256(analyzer_path)?;
    let analyzer = analyzer_ckpt.analyzer;

    let ckpt_dir = out.clone();
    let (cfg, mut predictor, mut opt, mut rng) = match resume {
        Some(path) => {
            let ckpt = load_predictor(path)?;
            if ckpt.predictor.analyzer_ckpt_hash() != Some(analyzer_hash) {
                return Err(Error::Mismatch(
                    "resume checkpoint was trained against a different analyzer".into(),
                ));
            }
            let opt = ckpt
                .adam
                .unwrap_or_else(|| Adam::from_config(&ckpt.experiment.training));
            let rng = ckpt.rng.restore();
            (ckpt.experiment, ckpt.predictor, opt, rng)
        }
        None => {
            let mut cfg = source.load()?;
            if cfg.analyzer.fingerprint() != analyzer_ckpt.experiment.analyzer.fingerprint() {
                return Err(Error::Mismatch(
                    "config analyzer section disagrees with the analyzer checkpoint".into(),
                ));
            }
            // the checkpoint's analyzer config is authoritative
            cfg.analyzer = analyzer_ckpt.experiment.analyzer.clone();
            let seed = cfg.training.seed;
            let mut predictor = Predictor::new(
                cfg.predictor.clone(),
                &analyzer,
                mix_seed(seed, train::seed_tags::PREDICTOR_PARAMS),
            )?;
            predictor.set_analyzer_ckpt_hash(analyzer_hash);
            let opt = Adam::from_config(&cfg.training);
            let rng =
                ChaCha20Rng::seed_from_u64(mix_seed(seed, train::seed_tags::PREDICTOR_BATCHES));
            (cfg, predictor, opt, rng)
        }
    };
    cfg.save(&out.join("config.toml"))?;
    let corpus = corpus_from_config(&cfg)?;
    if corpus.vocab_size > cfg.predictor.vocab_size {
        return Err(Error::config(format!(
            "corpus vocabulary {} exceeds predictor vocab_size {}",
            corpus.vocab_size, cfg.predictor.vocab_size
        )));
    }
    let teachers = corpus
        .items
        .iter()
        .map(|item| analyzer.analyze(&item.features))
        .collect::<msmc::Result<Vec<_>>>()?;

    let experiment = cfg.clone();
    let mut hook = move |iter: u64, p: &Predictor, opt: &Adam, rng: &ChaCha20Rng| {
        let path = ckpt_dir.join(format!("predictor_{iter:06}.msmcckpt"));
        checkpoint::save_predictor(&path, &experiment, p, Some(opt), &RngState::capture(rng))
    };
    let log = train::train_predictor(
        &mut predictor,
        &corpus.items,
        &teachers,
        &cfg.training,
        &mut opt,
        &mut rng,
        Some(&mut hook),
    )?;
    echo_progress(&log, cfg.training.log_every);
    write_loss_log(&out, &log)?;
    let final_path = out.join("predictor.msmcckpt");
    checkpoint::save_predictor(&final_path, &cfg, &predictor, Some(&opt), &RngState::capture(&rng))?;
    println!("predictor checkpoint: {}", final_path.display());
    Ok(())
}

fn cmd_analyze(analyzer_path: &Path, corpus: Option<&Path>, out: &Path) -> msmc::Result<()> {
    let ckpt = load_analyzer(analyzer_path)?;
    let corpus = match corpus {
        Some(dir) => Corpus::load_dir(dir)?,
        None => corpus_from_config(&ckpt.experiment)?,
    };
    let out = resolve_out(out);
    fs::create_dir_all(&out)?;
    for (i, item) in corpus.items.iter().enumerate() {
        let msmcr = ckpt.analyzer.analyze(&item.features)?;
        let bytes = msmcr_pack(&msmcr, ckpt.analyzer.config())?;
        fs::write(out.join(format!("item_{i:04}.msmcr")), bytes)?;
    }
    println!(
        "analyzed {} items into {}",
        corpus.items.len(),
        out.display()
    );
    Ok(())
}

fn read_text_file(path: &Path) -> msmc::Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let tokens = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>().map_err(|_| {
                    Error::input(format!("line {}: {tok:?} is not a token id", lineno + 1))
                })
            })
            .collect::<msmc::Result<Vec<_>>>()?;
        lines.push(tokens);
    }
    if lines.is_empty() {
        return Err(Error::input("text file contains no utterances"));
    }
    Ok(lines)
}

fn cmd_synthesize(
    predictor_path: &Path,
    text: &Path,
    out: &Path,
    analyzer_path: Option<&Path>,
) -> msmc::Result<()> {
    let ckpt = load_predictor(predictor_path)?;
    if let Some(analyzer_path) = analyzer_path {
        let hash = file_sha256(analyzer_path)?;
        match ckpt.predictor.analyzer_ckpt_hash() {
            Some(stored) if stored == hash => {}
            Some(_) => {
                return Err(Error::Mismatch(
                    "predictor was trained against a different analyzer checkpoint".into(),
                ))
            }
            None => {
                return Err(Error::Mismatch(
                    "predictor checkpoint carries no analyzer hash".into(),
                ))
            }
        }
    }
    let utterances = read_text_file(text)?;
    let out = resolve_out(out);
    fs::create_dir_all(&out)?;
    let structure = ckpt.predictor.structure().clone();
    let registry = DecoderRegistry::with_default_stub();
    for (i, tokens) in utterances.iter().enumerate() {
        let msmcr = ckpt.predictor.synthesize(tokens)?;
        let bytes = msmcr_pack(&msmcr, &structure)?;
        fs::write(out.join(format!("utt_{i:04}.msmcr")), bytes)?;
        let features = assemble_vocoder_input(&msmcr, &structure.downsample)?;
        write_features(&out.join(format!("utt_{i:04}.feat")), &features)?;
        let mel = &ckpt.experiment.mel;
        let wave = decode_waveform(&features, mel, &registry, "griffin-lim-stub")?;
        write_wav(&out.join(format!("utt_{i:04}.wav")), &wave, mel.sample_rate)?;
    }
    println!(
        "synthesized {} utterances into {}",
        utterances.len(),
        out.display()
    );
    Ok(())
}

fn cmd_report(analyzer_path: &Path, corpus: Option<&Path>, out: &Path) -> msmc::Result<()> {
    let ckpt = load_analyzer(analyzer_path)?;
    let corpus = match corpus {
        Some(dir) => Corpus::load_dir(dir)?,
        None => corpus_from_config(&ckpt.experiment)?,
    };
    let features = corpus.feature_views();
    let report = representation_report(
        &ckpt.analyzer,
        &features,
        ckpt.experiment.preset.clone(),
        32,
        false,
    )?;
    let out = resolve_out(out);
    fs::create_dir_all(&out)?;
    fs::write(out.join("report.txt"), report.to_table())?;
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report json"),
    )?;
    print!("{}", report.to_table());
    Ok(())
}

fn run() -> msmc::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenCorpus { source, out } => cmd_gen_corpus(source, out),
        Command::TrainAnalyzer {
            source,
            out,
            resume,
        } => cmd_train_analyzer(source, out, resume.as_deref()),
        Command::TrainPredictor {
            source,
            analyzer,
            out,
            resume,
        } => cmd_train_predictor(source, analyzer, out, resume.as_deref()),
        Command::Analyze {
            analyzer,
            corpus,
            out,
        } => cmd_analyze(analyzer, corpus.as_deref(), out),
        Command::Synthesize {
            predictor,
            text,
            out,
            analyzer,
        } => cmd_synthesize(predictor, text, out, analyzer.as_deref()),
        Command::Report {
            analyzer,
            corpus,
            out,
        } => cmd_report(analyzer, corpus.as_deref(), out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => ExitCode::from(2),
                Error::Divergence { .. } => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
