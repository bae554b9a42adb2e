use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Gender, Split};
use crate::{Error, Result};

/// Where a segment comes from, sufficient to re-render it bit-exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceRef {
    /// Synthetic event of the entry's class.
    SynthEvent { seed: u64 },
    /// Synthetic utterance of a synthetic speaker.
    SynthSpeech { speaker_seed: u64, utterance_seed: u64 },
    /// One-second window of a WAV file starting at `offset` samples.
    File { path: String, offset: usize },
}

impl SourceRef {
    fn encode(&self) -> String {
        match self {
            SourceRef::SynthEvent { seed } => format!("synth-event:{seed}"),
            SourceRef::SynthSpeech {
                speaker_seed,
                utterance_seed,
            } => {
                format!("synth-speech:{speaker_seed}:{utterance_seed}")
            }
            SourceRef::File { path, offset } => format!("file:{offset}:{path}"),
        }
    }

    fn decode(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed source reference '{s}'"));
        let num = |v: &str| v.parse::<u64>().map_err(|_| bad());
        if let Some(rest) = s.strip_prefix("synth-event:") {
            Ok(SourceRef::SynthEvent { seed: num(rest)? })
        } else if let Some(rest) = s.strip_prefix("synth-speech:") {
            let (a, b) = rest.split_once(':').ok_or_else(bad)?;
            Ok(SourceRef::SynthSpeech {
                speaker_seed: num(a)?,
                utterance_seed: num(b)?,
            })
        } else if let Some(rest) = s.strip_prefix("file:") {
            let (off, path) = rest.split_once(':').ok_or_else(bad)?;
            Ok(SourceRef::File {
                path: path.to_string(),
                offset: num(off)? as usize,
            })
        } else {
            Err(bad())
        }
    }
}

/// One mixture of the corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: usize,
    /// Mixture file relative to the corpus directory.
    pub path: String,
    /// Zero-based event class.
    pub event_class: usize,
    pub has_speech: bool,
    /// Present iff `has_speech`.
    pub speaker_gender: Option<Gender>,
    pub speaker: Option<String>,
    pub split: Split,
    pub event_source: SourceRef,
    pub speech_source: Option<SourceRef>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: usize,
    path: String,
    class: usize,
    speech: u8,
    gender: String,
    speaker: String,
    split: Split,
    event_source: String,
    speech_source: String,
}

/// The full corpus description. Entries are ordered by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusManifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// `(class, split) -> (total, with speech)`.
    pub fn counts(&self) -> BTreeMap<(usize, Split), (usize, usize)> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            let c = out.entry((e.event_class, e.split)).or_insert((0, 0));
            c.0 += 1;
            c.1 += e.has_speech as usize;
        }
        out
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_classes()];
        for e in &self.entries {
            out[e.event_class] += 1;
        }
        out
    }

    pub fn speech_count(&self, split: Split) -> usize {
        self.split(split).filter(|e| e.has_speech).count()
    }

    /// Checks the structural invariants: gender present iff speech, and a
    /// 1:1 speech balance (within one example) per class and split.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if e.event_class >= self.num_classes() {
                return Err(Error::InvalidArgument(format!(
                    "entry {} has class {} out of range",
                    e.id, e.event_class
                )));
            }
            if e.has_speech != e.speaker_gender.is_some() || e.has_speech != e.speech_source.is_some() {
                return Err(Error::InvalidArgument(format!(
                    "entry {} has inconsistent speech metadata",
                    e.id
                )));
            }
        }
        for ((class, split), (total, speech)) in self.counts() {
            let non = total - speech;
            if speech.abs_diff(non) > 1 {
                return Err(Error::InvalidArgument(format!(
                    "class {class} split {} is unbalanced: {speech} speech vs {non} non-speech",
                    split.as_str()
                )));
            }
        }
        Ok(())
    }

    /// Tab-separated text, one record per example, after a `# classes` line.
    pub fn to_tsv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(Record {
                id: e.id,
                path: e.path.clone(),
                class: e.event_class,
                speech: e.has_speech as u8,
                gender: match e.speaker_gender {
                    Some(Gender::Male) => "male".into(),
                    Some(Gender::Female) => "female".into(),
                    None => String::new(),
                },
                speaker: e.speaker.clone().unwrap_or_default(),
                split: e.split,
                event_source: e.event_source.encode(),
                speech_source: e.speech_source.as_ref().map(SourceRef::encode).unwrap_or_default(),
            })
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?)
            .expect("csv output is utf-8");
        Ok(format!("# classes\t{}\n{body}", self.class_names.join("\t")))
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let (first, body) = text.split_once('\n').unwrap_or((text, ""));
        let class_names: Vec<String> = first
            .strip_prefix("# classes\t")
            .ok_or_else(|| Error::InvalidArgument("manifest is missing the '# classes' line".into()))?
            .split('\t')
            .map(str::to_string)
            .collect();
        let mut rdr = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(body.as_bytes());
        let mut entries = Vec::new();
        for rec in rdr.deserialize::<Record>() {
            let r = rec.map_err(|e| Error::InvalidArgument(format!("manifest record: {e}")))?;
            entries.push(ManifestEntry {
                id: r.id,
                path: r.path,
                event_class: r.class,
                has_speech: r.speech != 0,
                speaker_gender: if r.gender.is_empty() {
                    None
                } else {
                    Some(Gender::parse(&r.gender)?)
                },
                speaker: (!r.speaker.is_empty()).then_some(r.speaker),
                split: r.split,
                event_source: SourceRef::decode(&r.event_source)?,
                speech_source: if r.speech_source.is_empty() {
                    None
                } else {
                    Some(SourceRef::decode(&r.speech_source)?)
                },
            });
        }
        let m = CorpusManifest { class_names, entries };
        m.validate()?;
        Ok(m)
    }

    /// Short content hash used to key feature caches.
    pub fn id(&self) -> String {
        let text = self.to_tsv().expect("manifest serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}
