//! Synthetic dense-prediction data, batching, persistence and teacher caches.

pub mod cache;
mod depth;
mod shapes;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nets::checkpoint::sha256_hex;
use crate::tensor::{io, Tensor};
use crate::{Error, Result};

pub use depth::{gen_depth, DepthBinning, DepthScene, Ramp, Sphere, DEFAULT_BINS, D_MAX, D_MIN};
pub use shapes::{gen_shapes, kind_of, ShapeKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segmentation,
    Depth,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    /// Row-major class indices.
    Classes(Vec<usize>),
    /// Row-major positive depths.
    Depth(Vec<f32>),
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// [3, H, W] with values in [0, 1].
    pub image: Tensor,
    pub label: Label,
    pub labeled: bool,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub task: Task,
    /// Segmentation classes; 0 for depth.
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// [B, 3, H, W]
    pub images: Tensor,
    /// Concatenated per-sample labels (empty for depth).
    pub classes: Vec<usize>,
    /// Concatenated per-sample depths (empty for segmentation).
    pub depth: Vec<f32>,
    pub labeled: Vec<bool>,
}

impl Dataset {
    pub fn segmentation(seed: u64, n: usize, h: usize, w: usize, classes: usize) -> Result<Dataset> {
        Ok(Dataset {
            task: Task::Segmentation,
            classes,
            height: h,
            width: w,
            samples: gen_shapes(seed, n, h, w, classes)?,
        })
    }

    pub fn depth(seed: u64, n: usize, h: usize, w: usize) -> Result<Dataset> {
        Ok(Dataset {
            task: Task::Depth,
            classes: 0,
            height: h,
            width: w,
            samples: gen_depth(seed, n, h, w)?,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Withholds every label; the samples then only feed distillation terms.
    pub fn into_unlabeled(mut self) -> Dataset {
        for s in &mut self.samples {
            s.labeled = false;
        }
        self
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Empty("batch with no samples".into()));
        }
        let (h, w) = (self.height, self.width);
        let mut images = Vec::with_capacity(indices.len() * 3 * h * w);
        let mut classes = Vec::new();
        let mut depth = Vec::new();
        let mut labeled = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("sample {i} out of range for {} samples", self.len())))?;
            images.extend_from_slice(s.image.data());
            match &s.label {
                Label::Classes(c) => classes.extend_from_slice(c),
                Label::Depth(d) => depth.extend_from_slice(d),
            }
            labeled.push(s.labeled);
        }
        Ok(Batch {
            indices: indices.to_vec(),
            images: Tensor::new(images, &[indices.len(), 3, h, w])?,
            classes,
            depth,
            labeled,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<DatasetManifest> {
        if self.is_empty() {
            return Err(Error::Empty("dataset".into()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (n, h, w) = (self.len(), self.height, self.width);
        let mut img = Vec::with_capacity(n * 3 * h * w);
        let mut lab = Vec::with_capacity(n * h * w);
        for s in &self.samples {
            img.extend_from_slice(s.image.data());
            match &s.label {
                Label::Classes(c) => lab.extend(c.iter().map(|&v| v as f32)),
                Label::Depth(d) => lab.extend_from_slice(d),
            }
        }
        let write = |name: &str, t: Tensor| -> Result<String> {
            let bytes = io::encode(&t);
            let path = dir.join(name);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            Ok(sha256_hex(&bytes))
        };
        let images_sha256 = write("images.stkd", Tensor::new(img, &[n, 3, h, w])?)?;
        let labels_sha256 = write("labels.stkd", Tensor::new(lab, &[n, h, w])?)?;
        let m = DatasetManifest {
            task: self.task,
            samples: n,
            height: h,
            width: w,
            classes: self.classes,
            labeled: self.samples.iter().map(|s| s.labeled).collect(),
            images_sha256,
            labels_sha256,
        };
        let path = dir.join("dataset.toml");
        fs::write(&path, toml::to_string(&m).map_err(|e| Error::Format(e.to_string()))?).map_err(|e| Error::io(&path, e))?;
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join("dataset.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let read = |name: &str, sha: &str| -> Result<Tensor> {
            let p = dir.join(name);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if sha256_hex(&bytes) != sha {
                return Err(Error::Format(format!("{}: checksum mismatch", p.display())));
            }
            io::decode(&bytes)
        };
        let (n, h, w) = (m.samples, m.height, m.width);
        let img = read("images.stkd", &m.images_sha256)?;
        let lab = read("labels.stkd", &m.labels_sha256)?;
        if img.shape() != [n, 3, h, w] || lab.shape() != [n, h, w] || m.labeled.len() != n {
            return Err(Error::Format(format!("{}: tensors do not match the manifest", dir.display())));
        }
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let pix = &lab.data()[i * h * w..(i + 1) * h * w];
            let label = match m.task {
                Task::Segmentation => Label::Classes(pix.iter().map(|&v| v as usize).collect()),
                Task::Depth => Label::Depth(pix.to_vec()),
            };
            samples.push(Sample {
                image: Tensor::new(img.data()[i * 3 * h * w..(i + 1) * 3 * h * w].to_vec(), &[3, h, w])?,
                label,
                labeled: m.labeled[i],
            });
        }
        Ok(Dataset {
            task: m.task,
            classes: m.classes,
            height: h,
            width: w,
            samples,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: Task,
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub labeled: Vec<bool>,
    pub images_sha256: String,
    pub labels_sha256: String,
}

/// Worker threads for data work, from `STRUCTKD_THREADS` (default 1).
pub fn worker_threads() -> usize {
    std::env::var("STRUCTKD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// One independent generator seed per sample.
fn sample_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}

/// Maps contiguous chunks on worker threads; output order is input order.
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    par_map_n(worker_threads(), items, f)
}

fn par_map_n<T: Sync, U: Send>(threads: usize, items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let threads = threads.min(items.len()).max(1);
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// The sample order of one epoch.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Endless mini-batches walking consecutive shuffled epochs.
#[derive(Clone, Debug)]
pub struct Sampler {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Sampler> {
        if n == 0 || batch == 0 {
            return Err(Error::Empty("sampler needs samples and a positive batch size".into()));
        }
        Ok(Sampler {
            n,
            batch,
            seed,
            epoch: 0,
            order: epoch_permutation(seed, 0, n),
            pos: 0,
        })
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.n {
                self.epoch += 1;
                self.order = epoch_permutation(self.seed, self.epoch, self.n);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worker_count_does_not_change_results() {
        let seeds = sample_seeds(5, 13);
        let f = |&s: &u64| Ok(s.wrapping_mul(31) ^ 7);
        let one = par_map_n(1, &seeds, f).unwrap();
        for t in [2, 3, 8, 40] {
            assert_eq!(par_map_n(t, &seeds, f).unwrap(), one);
        }
        let err = par_map_n(3, &seeds, |&s| if s == seeds[9] { Err(Error::Empty("x".into())) } else { Ok(s) });
        assert!(err.is_err());
    }

    #[test]
    fn epochs_are_permutations() {
        for epoch in 0..5 {
            let mut p = epoch_permutation(3, epoch, 50);
            p.sort();
            assert_eq!(p, (0..50).collect::<Vec<_>>());
        }
        assert_ne!(epoch_permutation(3, 0, 50), epoch_permutation(3, 1, 50));
    }

    #[test]
    fn sampler_visits_each_sample_once_per_epoch() {
        let mut s = Sampler::new(10, 5, 1).unwrap();
        let mut first: Vec<usize> = s.next_indices().into_iter().chain(s.next_indices()).collect();
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let mut s = Sampler::new(10, 4, 1).unwrap();
        let all: Vec<usize> = (0..5).flat_map(|_| s.next_indices()).collect();
        let mut e0 = all[..10].to_vec();
        e0.sort();
        assert_eq!(e0, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batches_stack_samples() {
        let ds = Dataset::segmentation(0, 4, 16, 16, 3).unwrap();
        let b = ds.batch(&[2, 0]).unwrap();
        assert_eq!(b.images.shape(), &[2, 3, 16, 16]);
        assert_eq!(&b.images.data()[..768], ds.samples[2].image.data());
        assert_eq!(b.classes.len(), 512);
        assert!(ds.batch(&[9]).is_err());
        assert!(ds.batch(&[]).is_err());
        let un = ds.into_unlabeled();
        assert!(un.samples.iter().all(|s| !s.labeled));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for ds in [Dataset::segmentation(1, 3, 16, 20, 4).unwrap(), Dataset::depth(2, 3, 16, 16).unwrap()] {
            ds.save(dir.path()).unwrap();
            let back = Dataset::load(dir.path()).unwrap();
            assert_eq!(back.task, ds.task);
            for (a, b) in back.samples.iter().zip(&ds.samples) {
                assert_eq!(a.image.data(), b.image.data());
                assert_eq!(a.label, b.label);
            }
        }
    }
}
