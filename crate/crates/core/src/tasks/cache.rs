//! Per-sample teacher outputs, either computed live or read from disk.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::nets::checkpoint::sha256_hex;
use crate::nets::Network;
use crate::tensor::{io, BatchNormMode, Tensor};
use crate::{Error, Result};

pub const CACHE_MANIFEST: &str = "cache.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub id: usize,
    pub logits: String,
    pub features: String,
    pub logits_sha256: String,
    pub features_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub samples: usize,
    pub entries: Vec<CacheEntry>,
}

/// Teacher score maps and features, one [C, W', H'] / [N, W', H'] tensor per sample.
#[derive(Clone, Debug)]
pub struct TeacherCache {
    pub logits: Vec<Tensor>,
    pub features: Vec<Tensor>,
}

fn split(t: &Tensor) -> Result<Vec<Tensor>> {
    let b = t.shape()[0];
    let per = t.numel() / b;
    (0..b)
        .map(|i| Tensor::new(t.data()[i * per..(i + 1) * per].to_vec(), &t.shape()[1..]))
        .collect()
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Empty("no cached samples requested".into()))?;
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(parts.len() * first.numel());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(data, &shape)
}

impl TeacherCache {
    /// Runs a frozen teacher over the dataset in eval mode.
    pub fn compute(teacher: &mut Network, ds: &Dataset, batch: usize) -> Result<TeacherCache> {
        if !teacher.is_frozen() {
            return Err(Error::InvalidArgument("teacher must be frozen before caching".into()));
        }
        if ds.is_empty() {
            return Err(Error::Empty("dataset".into()));
        }
        let mut logits = Vec::with_capacity(ds.len());
        let mut features = Vec::with_capacity(ds.len());
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let b = ds.batch(chunk)?;
            let out = teacher.forward_dense(&b.images, BatchNormMode::Eval)?;
            logits.extend(split(&out.logits)?);
            features.extend(split(&out.features)?);
        }
        Ok(TeacherCache { logits, features })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Stacked (logits, features) for the given sample ids.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        fn pick<'a>(v: &'a [Tensor], indices: &[usize]) -> Result<Vec<&'a Tensor>> {
            indices
                .iter()
                .map(|&i| v.get(i).ok_or_else(|| Error::InvalidArgument(format!("sample {i} not in cache of {}", v.len()))))
                .collect()
        }
        Ok((stack(&pick(&self.logits, indices)?)?, stack(&pick(&self.features, indices)?)?))
    }

    pub fn save(&self, dir: &Path) -> Result<CacheManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.len());
        for (id, (l, f)) in self.logits.iter().zip(&self.features).enumerate() {
            let write = |name: String, t: &Tensor| -> Result<(String, String)> {
                let bytes = io::encode(t);
                let path = dir.join(&name);
                fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
                Ok((name, sha256_hex(&bytes)))
            };
            let (logits, logits_sha256) = write(format!("{id:05}.logits.stkd"), l)?;
            let (features, features_sha256) = write(format!("{id:05}.features.stkd"), f)?;
            entries.push(CacheEntry {
                id,
                logits,
                features,
                logits_sha256,
                features_sha256,
            });
        }
        let m = CacheManifest {
            samples: entries.len(),
            entries,
        };
        let path = dir.join(CACHE_MANIFEST);
        let text = toml::to_string(&m).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<TeacherCache> {
        let path = dir.join(CACHE_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: CacheManifest = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let read = |name: &str, sha: &str| -> Result<Tensor> {
            let p = dir.join(name);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if sha256_hex(&bytes) != sha {
                return Err(Error::Format(format!("{}: checksum mismatch", p.display())));
            }
            io::decode(&bytes)
        };
        let mut logits = Vec::with_capacity(m.samples);
        let mut features = Vec::with_capacity(m.samples);
        for e in &m.entries {
            logits.push(read(&e.logits, &e.logits_sha256)?);
            features.push(read(&e.features, &e.features_sha256)?);
        }
        if logits.len() != m.samples {
            return Err(Error::Format(format!("{}: {} entries for {} samples", path.display(), logits.len(), m.samples)));
        }
        Ok(TeacherCache { logits, features })
    }
}

/// Computes the cache for a frozen teacher and writes it to `dir`.
pub fn cache_teacher_outputs(teacher: &mut Network, ds: &Dataset, dir: &Path, batch: usize) -> Result<CacheManifest> {
    TeacherCache::compute(teacher, ds, batch)?.save(dir)
}
