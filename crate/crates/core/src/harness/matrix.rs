use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::data::{cache_root, featurize, Variant};
use super::ledger::{write_atomic, Artifact, CellKey, EvaluatedCell, ExperimentLedger, MaskRecord, TrainedCell};
use super::mask::{load_mask, pretrain_masknet, save_mask, MaskTrainingConfig};
use crate::corpus::{build_corpus, derive_seed, CorpusConfig, CorpusManifest, Split};
use crate::features::FeatureCache;
use crate::models::ModelCheckpoint;
use crate::privacy_eval::{
    evaluate, format_table, metrics_tsv, AggregateReport, AttackerConfig, EvalCorpus, MetricsRecord,
};
use crate::training::{fit, ExperimentConfig, Method};
use crate::{Error, Result};

const SEED_ATTACKER: u64 = 7;
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MASK_FILE: &str = "mask.ckpt";
pub const REPORT_FILE: &str = "report.txt";

/// One experiment matrix: corpus, base training configuration, the methods,
/// the τ grid of the probe-swapping methods, and the evaluation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub out_dir: PathBuf,
    /// Feature cache root; the environment override wins over this field.
    pub cache_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    /// Base configuration; method, τ and seed are set per cell.
    pub experiment: ExperimentConfig,
    pub methods: Vec<Method>,
    /// Candidate τ values for the probe-swapping methods. The baseline and
    /// the naive method use `experiment.tau`.
    pub tau_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub attacker: AttackerConfig,
    pub attacker_runs: usize,
    pub mask: MaskTrainingConfig,
    /// Largest validation SED accuracy deficit tolerated by τ selection.
    pub sed_guard: f64,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            out_dir: PathBuf::from("runs"),
            cache_dir: None,
            corpus: CorpusConfig::default(),
            experiment: ExperimentConfig::default(),
            methods: Method::ALL.to_vec(),
            tau_grid: vec![10, 20, 30, 50, 70, 100],
            seeds: vec![0],
            attacker: AttackerConfig::default(),
            attacker_runs: 10,
            mask: MaskTrainingConfig::default(),
            sed_guard: 0.02,
        }
    }
}

impl RunSpec {
    /// The CPU-sized matrix on the default synthetic corpus.
    pub fn desk(out_dir: impl Into<PathBuf>) -> Self {
        let experiment = ExperimentConfig::desk(Method::Rdal, 0);
        RunSpec {
            out_dir: out_dir.into(),
            tau_grid: vec![experiment.tau],
            experiment,
            attacker_runs: 3,
            mask: MaskTrainingConfig {
                max_epochs: 12,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: RunSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        self.experiment.validate()?;
        if self.methods.is_empty() {
            return bad("at least one method is required");
        }
        if (1..self.methods.len()).any(|i| self.methods[..i].contains(&self.methods[i])) {
            return bad("methods must not repeat");
        }
        if self.methods.iter().any(|m| m.swaps_probe()) && self.tau_grid.is_empty() {
            return bad("tau_grid must be non-empty for the probe-swapping methods");
        }
        if self.tau_grid.contains(&0) {
            return bad("tau values must be positive");
        }
        if self.seeds.is_empty() || self.attacker_runs == 0 {
            return bad("seeds and attacker_runs must be non-empty");
        }
        if !(0.0..=1.0).contains(&self.sed_guard) {
            return bad("sed_guard must lie in [0, 1]");
        }
        let classes = match &self.corpus {
            CorpusConfig::Synthetic { synthetic, .. } => synthetic.classes,
            CorpusConfig::Real(r) => r.classes.len(),
        };
        if classes != self.experiment.classes {
            return Err(Error::Config(format!(
                "corpus has {classes} classes but the experiment expects {}",
                self.experiment.classes
            )));
        }
        Ok(())
    }

    /// τ values trained for `method`.
    pub fn taus(&self, method: Method) -> Vec<usize> {
        if method.swaps_probe() {
            self.tau_grid.clone()
        } else {
            vec![self.experiment.tau]
        }
    }

    /// Configuration of one cell.
    pub fn cell_config(&self, key: &CellKey) -> ExperimentConfig {
        ExperimentConfig {
            method: key.method,
            tau: key.tau,
            seed: key.seed,
            ..self.experiment.clone()
        }
    }

    /// Attacker seeds of the evaluation runs of training seed `seed`.
    pub fn attacker_seeds(&self, seed: u64) -> Vec<u64> {
        (0..self.attacker_runs as u64)
            .map(|r| derive_seed(seed, &[SEED_ATTACKER, r]))
            .collect()
    }

    /// Feature cache honouring the environment override.
    pub fn feature_cache(&self) -> FeatureCache {
        let fallback = self.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("cache"));
        FeatureCache::new(cache_root(&fallback))
    }
}

/// Validation summary of one τ candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauCandidate {
    pub tau: usize,
    /// Converged probe validation loss; higher means less speech leakage.
    pub l_sp: f64,
    pub sed_accuracy: f64,
}

/// Picks the τ with the highest probe loss among the candidates whose
/// validation SED accuracy is within `sed_guard` of the best one. Ties go
/// to the smaller τ.
pub fn select_tau(candidates: &[TauCandidate], sed_guard: f64) -> Result<usize> {
    let best_sed = candidates
        .iter()
        .map(|c| c.sed_accuracy)
        .reduce(f64::max)
        .ok_or_else(|| Error::InvalidArgument("tau selection needs at least one candidate".into()))?;
    let mut eligible: Vec<&TauCandidate> = candidates
        .iter()
        .filter(|c| c.sed_accuracy >= best_sed - sed_guard)
        .collect();
    eligible.sort_by_key(|c| c.tau);
    let mut pick = eligible[0];
    for c in &eligible[1..] {
        if c.l_sp > pick.l_sp {
            pick = c;
        }
    }
    Ok(pick.tau)
}

/// What a [`run_matrix`] call did and produced.
#[derive(Debug, Clone)]
pub struct MatrixOutcome {
    pub ledger: ExperimentLedger,
    pub reports: Vec<AggregateReport>,
    /// Training cells run by this call; zero when resuming a finished matrix.
    pub trained_now: usize,
    pub evaluated_now: usize,
    pub mask_trained_now: bool,
}

/// Parses a file written by [`metrics_tsv`].
pub fn parse_metrics_tsv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(text.as_bytes());
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<MetricsRecord>, _>>()
        .map_err(|e| Error::InvalidArgument(format!("metrics table: {e}")))
}

fn features_for(
    spec: &RunSpec,
    manifest: &CorpusManifest,
    ledger: &mut ExperimentLedger,
    cache: &FeatureCache,
    mask_trained: &mut bool,
) -> Result<(EvalCorpus, Option<EvalCorpus>)> {
    let plain = featurize(manifest, Variant::Plain, Some(cache))?;
    if !spec.methods.iter().any(|m| m.masked()) {
        return Ok((plain, None));
    }
    let channels = &spec.experiment.architecture.mask_channels;
    let path = spec.out_dir.join(MASK_FILE);
    if ledger.mask.is_none() {
        info!("pre-training the mask network");
        let outcome = pretrain_masknet(manifest, channels, &spec.mask)?;
        save_mask(&outcome, &spec.mask, &path)?;
        ledger.mask = Some(MaskRecord {
            checkpoint: Artifact::record(&spec.out_dir, MASK_FILE)?,
            val_mse: outcome.val_mse,
            identity_val_mse: outcome.identity_val_mse,
        });
        ledger.save(&spec.out_dir)?;
        *mask_trained = true;
    }
    let (net, tag) = load_mask(&path, channels)?;
    let masked = featurize(manifest, Variant::Masked { mask: &net, tag: &tag }, Some(cache))?;
    Ok((plain, Some(masked)))
}

fn train_cell(spec: &RunSpec, key: CellKey, corpus: &EvalCorpus) -> Result<TrainedCell> {
    let config = spec.cell_config(&key);
    let rel = PathBuf::from("cells").join(key.dir_name());
    let dir = spec.out_dir.join(&rel);
    info!("training {}", key.dir_name());
    // gender never enters training: the split sets carry classes and speech only
    let outcome = fit(
        &config,
        &corpus.split_set(Split::Train),
        &corpus.split_set(Split::Validation),
        Some(&dir),
    )?;
    let ck_rel = rel.join("model.ckpt");
    outcome.best.save(&spec.out_dir.join(&ck_rel))?;
    let at_best = outcome.log.cycles.iter().find(|c| c.epoch == outcome.best_epoch);
    let val_sed_accuracy = at_best
        .map(|c| c.val_sed_accuracy)
        .or_else(|| outcome.log.epochs.last().map(|e| e.val_sed_accuracy))
        .unwrap_or(f64::NAN);
    Ok(TrainedCell {
        key,
        config,
        checkpoint: Artifact::record(&spec.out_dir, ck_rel)?,
        best_epoch: outcome.best_epoch,
        stopped_epoch: outcome.stopped_epoch,
        val_l_sp: at_best.and_then(|c| c.l_sp),
        val_sed_accuracy,
    })
}

fn evaluate_cell(
    spec: &RunSpec,
    ledger: &ExperimentLedger,
    method: Method,
    seed: u64,
    corpus: &EvalCorpus,
) -> Result<EvaluatedCell> {
    let cells: Vec<&TrainedCell> = spec
        .taus(method)
        .iter()
        .filter_map(|&tau| ledger.trained(&CellKey { method, tau, seed }))
        .collect();
    let (tau, selection) = if cells.len() == 1 {
        (cells[0].key.tau, format!("single candidate tau={}", cells[0].key.tau))
    } else {
        let candidates: Vec<TauCandidate> = cells
            .iter()
            .map(|c| TauCandidate {
                tau: c.key.tau,
                l_sp: c.val_l_sp.unwrap_or(f64::NEG_INFINITY),
                sed_accuracy: c.val_sed_accuracy,
            })
            .collect();
        let tau = select_tau(&candidates, spec.sed_guard)?;
        let detail: Vec<String> = candidates
            .iter()
            .map(|c| format!("tau={} l_sp={:.4} sed={:.3}", c.tau, c.l_sp, c.sed_accuracy))
            .collect();
        (
            tau,
            format!(
                "tau={tau}: max validation probe loss with validation SED within {} of the best [{}]",
                spec.sed_guard,
                detail.join(", ")
            ),
        )
    };
    let key = CellKey { method, tau, seed };
    let cell = ledger
        .trained(&key)
        .ok_or_else(|| Error::MissingData(format!("no trained cell {}", key.dir_name())))?;
    let ck = ModelCheckpoint::load(&spec.out_dir.join(&cell.checkpoint.path))?;
    info!("evaluating {} ({selection})", key.dir_name());
    let ev = evaluate(
        &ck,
        &cell.config.architecture,
        corpus,
        &spec.attacker_seeds(seed),
        &spec.attacker,
        method.as_str(),
    )?;
    let rel = PathBuf::from("eval").join(format!("{}-seed{seed}", method.as_str()));
    ev.write_artifacts(&spec.out_dir.join(&rel))?;
    write_atomic(
        &spec.out_dir.join(&rel).join("metrics.tsv"),
        metrics_tsv(&ev.records).as_bytes(),
    )?;
    Ok(EvaluatedCell {
        key,
        selection,
        metrics: Artifact::record(&spec.out_dir, rel.join("metrics.tsv"))?,
    })
}

/// Per-method reports pooling the attacker runs of every seed.
pub fn reports(spec: &RunSpec, ledger: &ExperimentLedger) -> Result<Vec<AggregateReport>> {
    let mut out = Vec::new();
    for &method in &spec.methods {
        let mut records = Vec::new();
        for e in ledger
            .evaluated
            .iter()
            .filter(|e| e.key.method == method && spec.seeds.contains(&e.key.seed))
        {
            let path = spec.out_dir.join(&e.metrics.path);
            records.extend(parse_metrics_tsv(
                &fs::read_to_string(&path).map_err(|err| Error::io(&path, err))?,
            )?);
        }
        if !records.is_empty() {
            out.push(AggregateReport::from_records(method.as_str(), &records));
        }
    }
    Ok(out)
}

/// Report text: the results table followed by the τ selection of each cell.
pub fn report_text(ledger: &ExperimentLedger, reports: &[AggregateReport]) -> String {
    let mut s = format_table(reports);
    s.push('\n');
    for e in &ledger.evaluated {
        s.push_str(&format!(
            "{} seed {}: {}\n",
            e.key.method.as_str(),
            e.key.seed,
            e.selection
        ));
    }
    s
}

/// Runs (or resumes) the whole matrix: corpus, features, optional mask
/// pre-training, every training cell, τ selection and attacker evaluation.
/// Finished cells recorded in the ledger are skipped.
pub fn run_matrix(spec: &RunSpec) -> Result<MatrixOutcome> {
    spec.validate()?;
    let out = &spec.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut ledger = ExperimentLedger::open(out)?;
    let manifest = build_corpus(&spec.corpus)?;
    let text = manifest.to_tsv()?;
    match &ledger.manifest {
        Some(a) => {
            a.verify(out)?;
            if fs::read_to_string(out.join(&a.path)).map_err(|e| Error::io(out.join(&a.path), e))? != text {
                return Err(Error::Corrupt {
                    path: out.join(&a.path),
                    reason: "the corpus configuration no longer matches the recorded manifest".into(),
                });
            }
        }
        None => {
            write_atomic(&out.join(MANIFEST_FILE), text.as_bytes())?;
            ledger.manifest = Some(Artifact::record(out, MANIFEST_FILE)?);
            ledger.save(out)?;
        }
    }
    let cache = spec.feature_cache();
    let mut mask_trained_now = false;
    let (plain, masked) = features_for(spec, &manifest, &mut ledger, &cache, &mut mask_trained_now)?;

    let mut trained_now = 0;
    let mut evaluated_now = 0;
    for &method in &spec.methods {
        let corpus = if method.masked() {
            masked.as_ref().expect("masked features")
        } else {
            &plain
        };
        for &seed in &spec.seeds {
            for tau in spec.taus(method) {
                let key = CellKey { method, tau, seed };
                if ledger.trained(&key).is_some() {
                    continue;
                }
                let cell = train_cell(spec, key, corpus)?;
                ledger.record_trained(cell);
                ledger.save(out)?;
                trained_now += 1;
            }
            if ledger.evaluated(method, seed).is_none() {
                let cell = evaluate_cell(spec, &ledger, method, seed, corpus)?;
                ledger.record_evaluated(cell);
                ledger.save(out)?;
                evaluated_now += 1;
            }
        }
    }
    let reports = reports(spec, &ledger)?;
    write_atomic(&out.join(REPORT_FILE), report_text(&ledger, &reports).as_bytes())?;
    Ok(MatrixOutcome {
        ledger,
        reports,
        trained_now,
        evaluated_now,
        mask_trained_now,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(tau: usize, l_sp: f64, sed: f64) -> TauCandidate {
        TauCandidate {
            tau,
            l_sp,
            sed_accuracy: sed,
        }
    }

    #[test]
    fn tau_selection_table() {
        let cases: &[(&[TauCandidate], usize)] = &[
            (&[c(50, 0.3, 0.6)], 50),
            (&[c(10, 0.5, 0.9), c(20, 0.6, 0.95), c(30, 0.4, 0.8)], 20),
            // SED tie: highest probe loss wins
            (&[c(10, 0.5, 0.9), c(20, 0.7, 0.9), c(30, 0.6, 0.9)], 20),
            // guard excludes the leakiest-looking but SED-poor candidate
            (&[c(10, 0.5, 0.9), c(20, 0.69, 0.85), c(30, 0.6, 0.89)], 30),
            // exact tie goes to the smaller tau
            (&[c(70, 0.6, 0.9), c(30, 0.6, 0.9)], 30),
        ];
        for (cands, want) in cases {
            assert_eq!(select_tau(cands, 0.02).unwrap(), *want, "{cands:?}");
        }
        assert!(select_tau(&[], 0.02).is_err());
    }

    #[test]
    fn tau_selection_picks_the_argmax_within_the_guard() {
        let cands = [c(10, 0.2, 0.91), c(20, 0.65, 0.9), c(30, 0.5, 0.92), c(50, 0.69, 0.93)];
        let pick = select_tau(&cands, 0.02).unwrap();
        let best_sed = 0.93;
        let argmax = cands
            .iter()
            .filter(|c| c.sed_accuracy >= best_sed - 0.02)
            .max_by(|a, b| a.l_sp.total_cmp(&b.l_sp));
        assert_eq!(Some(pick), argmax.map(|c| c.tau));
    }

    #[test]
    fn run_spec_toml_round_trip_and_schema() {
        let spec = RunSpec::desk("out");
        let text = spec.to_toml().unwrap();
        assert_eq!(RunSpec::from_toml(&text).unwrap(), spec);
        let partial = "out_dir = \"x\"\ntau_grid = [5, 10]\n[corpus]\nmode = \"synthetic\"\nseed = 3\nclasses = 4\n\
                       [experiment]\nclasses = 4\n";
        let s = RunSpec::from_toml(partial).unwrap();
        assert_eq!(s.tau_grid, vec![5, 10]);
        assert!(RunSpec::from_toml("bogus = 1").is_err());
        assert!(RunSpec::from_toml("tau_grid = []\n[experiment]\nclasses = 4").is_err());
        assert!(RunSpec::from_toml("[experiment]\nclasses = 5").is_err());
    }

    #[test]
    fn metrics_table_round_trips() {
        let r = MetricsRecord {
            run_seed: 9,
            sed_accuracy: 0.9,
            sad_accuracy: 0.1 + 0.2,
            sad_auc: 0.75,
            gd_accuracy: 0.5,
            gd_auc: 0.5,
            sad_overlap: 0.25,
        };
        assert_eq!(parse_metrics_tsv(&metrics_tsv(&[r, r])).unwrap(), vec![r, r]);
    }

    fn tiny_spec(out: &Path) -> RunSpec {
        let mut experiment = ExperimentConfig::desk(Method::Rdal, 0);
        experiment.classes = 2;
        experiment.batch_size = 16;
        experiment.warmup_epochs = 1;
        experiment.max_epochs = 4;
        experiment.probe_max_epochs = 10;
        RunSpec {
            out_dir: out.to_path_buf(),
            corpus: CorpusConfig::Synthetic {
                seed: 2,
                synthetic: crate::corpus::SyntheticConfig {
                    classes: 2,
                    segments_per_class: 80,
                    ..Default::default()
                },
            },
            experiment,
            methods: vec![Method::Baseline, Method::Rdal],
            tau_grid: vec![1, 2],
            attacker: AttackerConfig {
                max_epochs: 10,
                ..Default::default()
            },
            attacker_runs: 1,
            ..Default::default()
        }
    }

    #[test]
    fn matrix_resumes_and_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(dir.path());
        let first = run_matrix(&spec).unwrap();
        assert_eq!((first.trained_now, first.evaluated_now), (3, 2));
        let rdal = first.ledger.evaluated(Method::Rdal, 0).unwrap();
        assert!(
            rdal.selection.contains("tau=1") && rdal.selection.contains("tau=2"),
            "{}",
            rdal.selection
        );

        let again = run_matrix(&spec).unwrap();
        assert_eq!((again.trained_now, again.evaluated_now), (0, 0));
        assert_eq!(again.reports, first.reports);

        let ck = dir.path().join(&first.ledger.trained[0].checkpoint.path);
        fs::write(&ck, b"truncated").unwrap();
        assert!(matches!(run_matrix(&spec), Err(Error::Corrupt { .. })));
    }
}
