use std::path::{Path, PathBuf};

use log::info;

use crate::corpus::{render_example, CorpusManifest};
use crate::features::FeatureCache;
use crate::features::{Featurizer, LogMelFeature};
use crate::models::MaskNet;
use crate::privacy_eval::EvalCorpus;
use crate::training::FeatureSet;
use crate::{Error, Result};

/// Environment variable overriding the feature cache location.
pub const CACHE_ENV: &str = "RDAL_CACHE_DIR";

/// Cache root: the environment override if set, else `fallback`.
pub fn cache_root(fallback: &Path) -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| fallback.to_path_buf())
}

/// Which front-end produced the features.
#[derive(Debug, Clone, Copy)]
pub enum Variant<'a> {
    Plain,
    /// Magnitudes multiplied by a frozen mask before the mel projection.
    /// The tag names the mask parameters in the cache.
    Masked {
        mask: &'a MaskNet<f32>,
        tag: &'a str,
    },
}

impl Variant<'_> {
    fn name(&self) -> String {
        match self {
            Variant::Plain => "plain".into(),
            Variant::Masked { tag, .. } => format!("masked-{tag}"),
        }
    }
}

fn compute(featurizer: &Featurizer, manifest: &CorpusManifest, id: usize, variant: Variant) -> Result<LogMelFeature> {
    let entry = &manifest.entries[id];
    let example = render_example(entry)?;
    let spec = featurizer.stft.magnitude(&example.mixture)?;
    match variant {
        Variant::Plain => featurizer.log_mel.apply(&spec),
        Variant::Masked { mask, .. } => featurizer.log_mel.apply(&mask.apply(&spec)),
    }
}

/// Features of every manifest entry, read from `cache` when present.
pub fn featurize(manifest: &CorpusManifest, variant: Variant, cache: Option<&FeatureCache>) -> Result<EvalCorpus> {
    let featurizer = Featurizer::default();
    let (id, name) = (manifest.id(), variant.name());
    let bands = featurizer.log_mel.filterbank.bands;
    let mut features: Option<FeatureSet> = None;
    let mut hits = 0;
    for (i, entry) in manifest.entries.iter().enumerate() {
        if entry.id != i {
            return Err(Error::InvalidArgument(format!(
                "manifest entry {i} carries id {}",
                entry.id
            )));
        }
        let cached = match cache {
            Some(c) => c.get(&id, &name, i)?,
            None => None,
        };
        let feat = match cached {
            Some(f) => {
                hits += 1;
                f
            }
            None => {
                let f = compute(&featurizer, manifest, i, variant)?;
                if let Some(c) = cache {
                    c.put(&id, &name, i, &f)?;
                }
                f
            }
        };
        if feat.bands != bands {
            return Err(Error::shape(bands, feat.bands));
        }
        let set = features.get_or_insert_with(|| FeatureSet::new(feat.bands, feat.frames));
        if feat.frames != set.frames {
            return Err(Error::shape(set.frames, feat.frames));
        }
        set.push(&feat.values, entry.event_class, entry.has_speech);
    }
    info!(
        "features [{name}]: {} examples, {hits} from cache",
        manifest.entries.len()
    );
    let features = features.ok_or_else(|| Error::DegenerateInput("empty manifest".into()))?;
    Ok(EvalCorpus {
        features,
        gender: manifest.entries.iter().map(|e| e.speaker_gender).collect(),
        split: manifest.entries.iter().map(|e| e.split).collect(),
    })
}
