use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use rdal::corpus::{build_corpus, render_example, write_wav_f32, CorpusManifest, Split};
use rdal::harness::{
    featurize, load_mask, pretrain_masknet, report_text, reports, run_matrix, save_mask, write_atomic, Artifact,
    ExperimentLedger, RunSpec, Variant, MANIFEST_FILE, MASK_FILE,
};
use rdal::models::ModelCheckpoint;
use rdal::privacy_eval::{evaluate, format_table, metrics_tsv, EvalCorpus};
use rdal::training::{fit, ExperimentConfig, Method};

#[derive(Parser)]
#[command(
    name = "rdal",
    version,
    about = "Privacy-preserving audio representations with probe-reset adversarial training"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run specification (TOML). Defaults to the desk-scale matrix.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the one in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training seed; replaces the seed list of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the corpus manifest, optionally rendering the mixtures as WAV.
    SynthCorpus {
        #[arg(long)]
        wav: bool,
    },
    /// Compute (and cache) log-mel features of the corpus.
    Featurize,
    /// Pre-train the speech-suppressing mask network.
    PretrainMask,
    /// Train one model.
    Train {
        #[arg(long, default_value = "rdal")]
        method: String,
        #[arg(long)]
        tau: Option<usize>,
    },
    /// Attack a trained checkpoint and report SED/SAD/GD metrics.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Attacker runs; defaults to the config value.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Print the results table of a finished or partial matrix.
    Report,
    /// Gather ROC and density curves of every evaluated method into long-format tables.
    Plots,
    /// Run or resume the full method matrix.
    Matrix,
}

fn load_spec(common: &Common) -> Result<RunSpec> {
    let mut spec = match &common.config {
        Some(path) => RunSpec::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunSpec::desk("runs/desk"),
    };
    if let Some(out) = &common.out {
        spec.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        spec.seeds = vec![seed];
    }
    spec.validate()?;
    Ok(spec)
}

fn manifest(spec: &RunSpec) -> Result<CorpusManifest> {
    let m = build_corpus(&spec.corpus)?;
    fs::create_dir_all(&spec.out_dir)?;
    write_atomic(&spec.out_dir.join(MANIFEST_FILE), m.to_tsv()?.as_bytes())?;
    Ok(m)
}

fn features(spec: &RunSpec, m: &CorpusManifest, masked: bool) -> Result<EvalCorpus> {
    let cache = spec.feature_cache();
    if !masked {
        return Ok(featurize(m, Variant::Plain, Some(&cache))?);
    }
    let path = spec.out_dir.join(MASK_FILE);
    if !path.exists() {
        bail!("{} not found; run `pretrain-mask` first", path.display());
    }
    let (net, tag) = load_mask(&path, &spec.experiment.architecture.mask_channels)?;
    Ok(featurize(m, Variant::Masked { mask: &net, tag: &tag }, Some(&cache))?)
}

fn synth_corpus(spec: &RunSpec, wav: bool) -> Result<()> {
    let m = manifest(spec)?;
    if wav {
        for entry in &m.entries {
            let ex = render_example(entry)?;
            write_wav_f32(&spec.out_dir.join("audio").join(&entry.path), &ex.mixture.samples)?;
        }
    }
    for split in Split::ALL {
        println!(
            "{:<10} {:>5} examples, {:>5} with speech",
            split.as_str(),
            m.split(split).count(),
            m.speech_count(split)
        );
    }
    println!(
        "manifest {} written to {}",
        m.id(),
        spec.out_dir.join(MANIFEST_FILE).display()
    );
    Ok(())
}

fn train(spec: &RunSpec, method: &str, tau: Option<usize>) -> Result<()> {
    let method = Method::parse(method)?;
    let m = manifest(spec)?;
    let corpus = features(spec, &m, method.masked())?;
    let mut config = spec.experiment.clone();
    config.method = method;
    config.seed = spec.seeds[0];
    if let Some(t) = tau {
        config.tau = t;
    }
    let dir = spec
        .out_dir
        .join(format!("{}-tau{}-seed{}", method.as_str(), config.tau, config.seed));
    let outcome = fit(
        &config,
        &corpus.split_set(Split::Train),
        &corpus.split_set(Split::Validation),
        Some(&dir),
    )?;
    outcome.best.save(&dir.join("model.ckpt"))?;
    println!(
        "best epoch {} (score {:.5}), stopped at epoch {}; checkpoint {}",
        outcome.best_epoch,
        outcome.best_score,
        outcome.stopped_epoch,
        dir.join("model.ckpt").display()
    );
    Ok(())
}

fn evaluate_checkpoint(spec: &RunSpec, path: &Path, runs: Option<usize>) -> Result<()> {
    let ck = ModelCheckpoint::load(path)?;
    let method = ck
        .metadata
        .get("method")
        .and_then(|v| v.as_str())
        .map(Method::parse)
        .transpose()?;
    let config = ExperimentConfig::from_checkpoint(&ck)?.unwrap_or_else(|| spec.experiment.clone());
    let m = manifest(spec)?;
    let corpus = features(spec, &m, method.is_some_and(|m| m.masked()))?;
    let mut spec = spec.clone();
    if let Some(r) = runs {
        spec.attacker_runs = r;
    }
    let label = method.map_or("checkpoint", |m| m.as_str());
    let ev = evaluate(
        &ck,
        &config.architecture,
        &corpus,
        &spec.attacker_seeds(config.seed),
        &spec.attacker,
        label,
    )?;
    let name = path
        .parent()
        .and_then(|p| p.file_name())
        .map_or_else(|| "checkpoint".into(), |s| s.to_os_string());
    let dir = spec.out_dir.join("eval").join(name);
    ev.write_artifacts(&dir)?;
    write_atomic(&dir.join("metrics.tsv"), metrics_tsv(&ev.records).as_bytes())?;
    print!("{}", format_table(&[ev.report]));
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn plots(spec: &RunSpec) -> Result<()> {
    let ledger = ExperimentLedger::open(&spec.out_dir)?;
    if ledger.evaluated.is_empty() {
        bail!("no evaluated cells in {}", spec.out_dir.display());
    }
    let dir = spec.out_dir.join("plots");
    for (file, header) in [
        ("roc_sad.tsv", "fpr\ttpr"),
        ("roc_gd.tsv", "fpr\ttpr"),
        ("density_sad.tsv", "probability\tspeech\tnon_speech"),
    ] {
        let mut out = format!("method\tseed\t{header}\n");
        for e in &ledger.evaluated {
            let src = spec
                .out_dir
                .join(e.metrics.path.parent().unwrap_or(Path::new("")))
                .join(file);
            let text = fs::read_to_string(&src).with_context(|| format!("reading {}", src.display()))?;
            for line in text.lines().skip(1) {
                out.push_str(&format!("{}\t{}\t{line}\n", e.key.method.as_str(), e.key.seed));
            }
        }
        write_atomic(&dir.join(file), out.as_bytes())?;
    }
    println!("plot tables written to {}", dir.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let spec = load_spec(&cli.common)?;
    match cli.command {
        Command::SynthCorpus { wav } => synth_corpus(&spec, wav)?,
        Command::Featurize => {
            let m = manifest(&spec)?;
            let corpus = features(&spec, &m, false)?;
            println!(
                "{} feature matrices of {}x{}",
                corpus.features.len(),
                corpus.features.bands,
                corpus.features.frames
            );
        }
        Command::PretrainMask => {
            let m = manifest(&spec)?;
            let outcome = pretrain_masknet(&m, &spec.experiment.architecture.mask_channels, &spec.mask)?;
            let path = spec.out_dir.join(MASK_FILE);
            save_mask(&outcome, &spec.mask, &path)?;
            info!("mask checksum {}", Artifact::record(&spec.out_dir, MASK_FILE)?.sha256);
            println!(
                "validation MSE {:.5} vs {:.5} for the identity mask ({} epochs); saved {}",
                outcome.val_mse,
                outcome.identity_val_mse,
                outcome.epochs,
                path.display()
            );
        }
        Command::Train { method, tau } => train(&spec, &method, tau)?,
        Command::Evaluate { checkpoint, runs } => evaluate_checkpoint(&spec, &checkpoint, runs)?,
        Command::Report => {
            let ledger = ExperimentLedger::open(&spec.out_dir)?;
            print!("{}", report_text(&ledger, &reports(&spec, &ledger)?));
        }
        Command::Plots => plots(&spec)?,
        Command::Matrix => {
            let outcome = run_matrix(&spec)?;
            info!(
                "trained {} cells, evaluated {}",
                outcome.trained_now, outcome.evaluated_now
            );
            print!("{}", report_text(&outcome.ledger, &outcome.reports));
        }
    }
    Ok(())
}
