//! Checkpoints: one STKD file per parameter plus a `manifest.toml`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Network, NetworkSpec};
use crate::tensor::{io, RunningStats};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsEntry {
    pub name: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Stored as a string: TOML integers stop at `i64::MAX`.
    #[serde(with = "u64_string")]
    pub seed: u64,
    pub iteration: u64,
    pub frozen: bool,
    pub spec: NetworkSpec,
    pub params: Vec<ParamEntry>,
    pub stats: Vec<StatsEntry>,
}

mod u64_string {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save(net: &Network, dir: &Path, iteration: u64) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    for p in net.params() {
        let file = format!("{}.stkd", p.name);
        let bytes = io::encode(&p.value);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        params.push(ParamEntry {
            name: p.name.clone(),
            file,
            shape: p.value.shape().to_vec(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        seed: net.seed(),
        iteration,
        frozen: net.is_frozen(),
        spec: net.spec().clone(),
        params,
        stats: net
            .stats()
            .iter()
            .map(|(name, s)| StatsEntry {
                name: name.clone(),
                mean: s.mean.clone(),
                var: s.var.clone(),
            })
            .collect(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Rebuilds the network and overwrites its parameters and BN statistics.
pub fn load(dir: &Path) -> Result<(Network, Manifest)> {
    let m = read_manifest(dir)?;
    let mut net = Network::build(&m.spec, m.seed)?;
    if m.params.len() != net.params.len() || m.stats.len() != net.stats.len() {
        return Err(Error::Format(format!("{}: manifest does not match its spec", dir.display())));
    }
    for (slot, entry) in net.params.iter_mut().zip(&m.params) {
        if slot.name != entry.name {
            return Err(Error::Format(format!("expected parameter {}, found {}", slot.name, entry.name)));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Format(format!("{}: checksum mismatch", path.display())));
        }
        let t = io::decode(&bytes)?;
        if t.shape() != slot.value.shape() {
            return Err(Error::shape("checkpoint::load", slot.value.shape(), t.shape()));
        }
        slot.value = t.detach_var();
    }
    for (slot, entry) in net.stats.iter_mut().zip(&m.stats) {
        if slot.0 != entry.name || slot.1.mean.len() != entry.mean.len() || entry.var.len() != entry.mean.len() {
            return Err(Error::Format(format!("bad running statistics for {}", slot.0)));
        }
        slot.1 = RunningStats {
            mean: entry.mean.clone(),
            var: entry.var.clone(),
        };
    }
    if m.frozen {
        net.freeze();
    }
    Ok((net, m))
}
