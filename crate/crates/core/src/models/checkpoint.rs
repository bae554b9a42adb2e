use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::nn::{Module, Real, Sgd};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"RDCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named `f32` tensors plus free-form JSON metadata.
///
/// Binary layout: magic, version, metadata length and JSON bytes, tensor
/// count, then per tensor its name, rank, dims and little-endian data.
/// A SHA-256 of everything before it closes the file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, TensorRecord>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl ModelCheckpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        ModelCheckpoint {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    /// Stores every parameter and buffer of `module` under `prefix`.
    pub fn insert_module<T: Real, M: Module<T> + ?Sized>(&mut self, prefix: &str, module: &M) {
        let tensors = &mut self.tensors;
        module.visit(prefix, &mut |name, p| {
            tensors.insert(
                name.to_string(),
                TensorRecord {
                    shape: p.shape.clone(),
                    data: p.value.iter().map(|v| v.to_f() as f32).collect(),
                },
            );
        });
    }

    /// Restores every parameter of `module` from `prefix`, checking shapes.
    pub fn load_module<T: Real, M: Module<T> + ?Sized>(&self, prefix: &str, module: &mut M) -> Result<()> {
        let mut err = None;
        module.visit_mut(prefix, &mut |name, p| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(name) {
                None => err = Some(Error::Checkpoint(format!("missing tensor '{name}'"))),
                Some(t) if t.shape != p.shape => {
                    err = Some(Error::Checkpoint(format!(
                        "tensor '{name}' has shape {:?}, model expects {:?}",
                        t.shape, p.shape
                    )))
                }
                Some(t) => p
                    .value
                    .iter_mut()
                    .zip(&t.data)
                    .for_each(|(v, &d)| *v = T::from_f(d as f64)),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let dotted = format!("{prefix}.");
        self.tensors.keys().any(|k| k.starts_with(&dotted))
    }

    pub fn insert_optimizer<T: Real>(&mut self, prefix: &str, opt: &Sgd<T>) {
        for (name, v) in &opt.velocity {
            self.tensors.insert(
                format!("{prefix}.{name}"),
                TensorRecord {
                    shape: vec![v.len()],
                    data: v.iter().map(|x| x.to_f() as f32).collect(),
                },
            );
        }
    }

    pub fn load_optimizer<T: Real>(&self, prefix: &str, opt: &mut Sgd<T>) {
        let dotted = format!("{prefix}.");
        opt.velocity = self
            .tensors
            .iter()
            .filter_map(|(k, t)| {
                k.strip_prefix(&dotted)
                    .map(|n| (n.to_string(), t.data.iter().map(|&d| T::from_f(d as f64)).collect()))
            })
            .collect();
    }

    /// SHA-256 over the tensors under `prefix`, for freeze checks.
    pub fn digest(&self, prefix: &str) -> String {
        let dotted = format!("{prefix}.");
        let mut h = Sha256::new();
        for (k, t) in self.tensors.iter().filter(|(k, _)| k.starts_with(&dotted)) {
            h.update(k.as_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' data does not match its shape"
                )));
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            let rank = r.u32()?;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, TensorRecord { shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(ModelCheckpoint { metadata, tensors })
    }

    /// Writes via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(reason) => Error::Corrupt {
                path: path.into(),
                reason,
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ArchitectureConfig, FeatureExtractor, SpeechClassifier};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (ModelCheckpoint, FeatureExtractor<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let arch = ArchitectureConfig {
            conv_widths: vec![2, 2, 3, 3],
            ..Default::default()
        };
        let f = FeatureExtractor::<f32>::new(&arch, &mut rng);
        let mut opt = Sgd::<f32>::new(0.01, 0.9);
        opt.velocity
            .insert("head.weight".into(), vec![0.25, -1.5e-8, f32::MIN_POSITIVE]);
        let mut ck = ModelCheckpoint::new(serde_json::json!({"epoch": 12, "lambda": 0.462117}));
        ck.insert_module("extractor", &f);
        ck.insert_optimizer("opt.extractor", &opt);
        (ck, f)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (ck, f) = sample();
        let back = ModelCheckpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let arch = ArchitectureConfig {
            conv_widths: vec![2, 2, 3, 3],
            ..Default::default()
        };
        let mut g = FeatureExtractor::<f32>::new(&arch, &mut rng);
        back.load_module("extractor", &mut g).unwrap();
        assert_eq!(g.flat_params(), f.flat_params());
        let mut opt = Sgd::<f32>::new(0.01, 0.9);
        back.load_optimizer("opt.extractor", &mut opt);
        assert_eq!(opt.velocity["head.weight"], vec![0.25, -1.5e-8, f32::MIN_POSITIVE]);
    }

    #[test]
    fn corruption_and_shape_mismatch_are_detected() {
        let (ck, _) = sample();
        let mut bytes = ck.to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(ModelCheckpoint::from_bytes(&bytes).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut wrong = SpeechClassifier::<f32>::new(8, &[4], &mut rng);
        assert!(ck.load_module("extractor", &mut wrong).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let (ck, _) = sample();
        let path = dir.path().join("a/model.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(ModelCheckpoint::load(&path).unwrap(), ck);
        assert_eq!(
            ck.digest("extractor"),
            ModelCheckpoint::load(&path).unwrap().digest("extractor")
        );
    }
}
