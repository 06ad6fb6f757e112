use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{OptimizerKind, TrainConfig};
use super::optim::{poly_lr, Adam, Optimizer, Sgd};
use crate::distill::{
    attention_transfer_loss, holistic_d_loss, holistic_s_term, local_pairwise_loss, mimic_loss, pair_wise_distill,
    pixel_wise_loss, student_objective, Adapter, LossWeights,
};
use crate::metrics::{ConfusionMatrix, DepthAccumulator, MetricsReport};
use crate::nets::{checkpoint, DenseOutput, Network, NetworkSpec};
use crate::tasks::cache::TeacherCache;
use crate::tasks::{Batch, Dataset, DepthBinning, Sampler, Task, D_MAX, D_MIN};
use crate::tensor::{no_grad, BatchNormMode, GradStore, Tensor};
use crate::{Error, Result};

/// Independent random streams derived from one seed.
fn stream(seed: u64, k: u64) -> u64 {
    seed.rotate_left(17) ^ k.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

const DATA_TRAIN: u64 = 1;
const DATA_TEST: u64 = 2;
const DATA_UNLABELED: u64 = 3;
const RUN_INIT: u64 = 11;
const RUN_ORDER: u64 = 12;
const RUN_DISC: u64 = 13;
const RUN_GP: u64 = 14;
const RUN_ADAPTER: u64 = 15;

#[derive(Clone, Debug)]
pub struct Splits {
    /// Labeled training samples followed by any unlabeled ones.
    pub train: Dataset,
    pub test: Dataset,
    pub labeled: usize,
}

fn generate(task: Task, cfg: &TrainConfig, seed: u64, n: usize) -> Result<Dataset> {
    let d = &cfg.data;
    match task {
        Task::Segmentation => Dataset::segmentation(seed, n, d.height, d.width, d.classes),
        Task::Depth => Dataset::depth(seed, n, d.height, d.width),
    }
}

/// Generates the three data splits from the data seed.
pub fn generate_splits(cfg: &TrainConfig) -> Result<(Dataset, Dataset, Option<Dataset>)> {
    let s = cfg.seeds.data;
    let train = generate(cfg.task, cfg, stream(s, DATA_TRAIN), cfg.data.train)?;
    let test = generate(cfg.task, cfg, stream(s, DATA_TEST), cfg.data.test)?;
    let unlabeled = match cfg.data.unlabeled {
        0 => None,
        n => Some(generate(cfg.task, cfg, stream(s, DATA_UNLABELED), n)?.into_unlabeled()),
    };
    Ok((train, test, unlabeled))
}

/// Loads the splits from `paths.data`, or generates them.
pub fn load_splits(cfg: &TrainConfig) -> Result<Splits> {
    let (train, test, unlabeled) = match &cfg.paths.data {
        None => generate_splits(cfg)?,
        Some(root) => {
            let unlabeled_dir = root.join("unlabeled");
            let unlabeled = if cfg.data.unlabeled > 0 && unlabeled_dir.exists() {
                Some(Dataset::load(&unlabeled_dir)?.into_unlabeled())
            } else {
                None
            };
            (Dataset::load(&root.join("train"))?, Dataset::load(&root.join("test"))?, unlabeled)
        }
    };
    for ds in [&train, &test] {
        if ds.task != cfg.task {
            return Err(Error::TaskMismatch {
                expected: format!("{:?}", cfg.task),
                found: format!("{:?}", ds.task),
            });
        }
    }
    let mut train = if cfg.weights.unlabeled { train.into_unlabeled() } else { train };
    let labeled = train.samples.iter().filter(|s| s.labeled).count();
    if let Some(u) = unlabeled {
        train.samples.extend(u.samples);
    }
    Ok(Splits { train, test, labeled })
}

pub fn binning(cfg: &TrainConfig) -> Result<DepthBinning> {
    DepthBinning::log_uniform(cfg.data.depth_bins, D_MIN, D_MAX)
}

pub fn teacher_spec(cfg: &TrainConfig) -> NetworkSpec {
    NetworkSpec::teacher(cfg.head_classes())
}

pub fn student_spec(cfg: &TrainConfig) -> NetworkSpec {
    NetworkSpec::student(cfg.head_classes())
}

pub fn discriminator_spec(cfg: &TrainConfig) -> Result<NetworkSpec> {
    NetworkSpec::discriminator(cfg.discriminator.attention, cfg.discriminator.blocks, cfg.map_channels() + 3)
}

/// Per-pixel targets of a batch: classes, or depth bins.
fn targets(batch: &Batch, task: Task, bins: &DepthBinning) -> Vec<usize> {
    match task {
        Task::Segmentation => batch.classes.clone(),
        Task::Depth => bins.depth_to_bins(&batch.depth).0,
    }
}

/// Cross-entropy of upsampled logits over the labeled samples of a batch;
/// `None` when none are labeled.
pub fn task_loss(upsampled_logits: &Tensor, batch: &Batch, task: Task, bins: &DepthBinning) -> Result<Option<Tensor>> {
    let s = upsampled_logits.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let labeled = batch.labeled.iter().filter(|&&l| l).count();
    if labeled == 0 {
        return Ok(None);
    }
    let t = targets(batch, task, bins);
    if t.len() != b * hw {
        return Err(Error::shape("task_loss", &[b * hw], &[t.len()]));
    }
    let mut onehot = vec![0f32; b * c * hw];
    for n in 0..b {
        if !batch.labeled[n] {
            continue;
        }
        for p in 0..hw {
            let k = t[n * hw + p];
            if k >= c {
                return Err(Error::InvalidArgument(format!("target {k} outside {c} classes")));
            }
            onehot[(n * c + k) * hw + p] = 1.0;
        }
    }
    let mask = Tensor::new(onehot, s)?;
    let ll = upsampled_logits.log_softmax(1)?.mul(&mask)?.sum_all();
    Ok(Some(ll.scale(-1.0 / (labeled * hw) as f32)))
}

/// The map the discriminator scores: logits, or the soft-sum depth map.
pub fn score_map(out: &DenseOutput, task: Task, bins: &DepthBinning) -> Result<Tensor> {
    match task {
        Task::Segmentation => Ok(out.upsampled_logits.clone()),
        Task::Depth => bins.bins_to_depth(&out.upsampled_logits.softmax(1)?),
    }
}

fn check_compatible(net: &Network, ds: &Dataset, bins: &DepthBinning) -> Result<()> {
    let have = net.spec().classes();
    let want = match ds.task {
        Task::Segmentation => ds.classes,
        Task::Depth => bins.bins(),
    };
    if have != Some(want) {
        return Err(Error::TaskMismatch {
            expected: format!("{:?} head with {want} outputs", ds.task),
            found: match have {
                Some(c) => format!("head with {c} outputs"),
                None => "a network without a dense head".into(),
            },
        });
    }
    Ok(())
}

/// Full-dataset metrics with BN running statistics.
pub fn evaluate(net: &mut Network, ds: &Dataset, bins: &DepthBinning, batch: usize) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(Error::Empty("evaluation dataset".into()));
    }
    check_compatible(net, ds, bins)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut cm = ConfusionMatrix::new(ds.classes.max(1));
    let mut acc = DepthAccumulator::default();
    for chunk in idx.chunks(batch.max(1)) {
        let b = ds.batch(chunk)?;
        let out = no_grad(|| net.forward_dense(&b.images, BatchNormMode::Eval))?;
        match ds.task {
            Task::Segmentation => cm.update(&out.upsampled_logits.argmax(1)?, &b.classes)?,
            Task::Depth => {
                let d = no_grad(|| score_map(&out, Task::Depth, bins))?;
                acc.update(d.data(), &b.depth)?;
            }
        }
    }
    Ok(match ds.task {
        Task::Segmentation => MetricsReport {
            segmentation: Some(cm.finalize()?),
            ..MetricsReport::default()
        },
        Task::Depth => MetricsReport {
            depth: Some(acc.finalize()?),
            ..MetricsReport::default()
        },
    })
}

/// Where distillation reads teacher outputs from.
pub enum TeacherSource<'a> {
    Live(&'a mut Network),
    /// Outputs indexed like the training split.
    Cached(&'a TeacherCache),
}

impl TeacherSource<'_> {
    fn outputs(&mut self, batch: &Batch, hw: (usize, usize)) -> Result<DenseOutput> {
        match self {
            TeacherSource::Live(t) => {
                if !t.is_frozen() {
                    return Err(Error::InvalidArgument("teacher must be frozen".into()));
                }
                t.forward_dense(&batch.images, BatchNormMode::Eval)
            }
            TeacherSource::Cached(c) => {
                let (logits, features) = c.gather(&batch.indices)?;
                let upsampled_logits = logits.upsample_bilinear(hw.0, hw.1)?;
                Ok(DenseOutput {
                    features,
                    logits,
                    upsampled_logits,
                })
            }
        }
    }

    fn assert_untouched(&self, grads: &GradStore) -> Result<()> {
        if let TeacherSource::Live(t) = self {
            if !t.is_frozen() || t.params().iter().any(|p| grads.get(&p.value).is_some()) {
                return Err(Error::Numeric("teacher parameters received a gradient".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Teacher,
    Distill,
}

/// Per-iteration loss values; a series stays empty when its term is off.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Traces {
    pub lr: Vec<f32>,
    /// `None` for batches without labels.
    pub task: Vec<Option<f32>>,
    pub pi: Vec<f32>,
    pub pa: Vec<f32>,
    pub local: Vec<f32>,
    pub mimic: Vec<f32>,
    pub at: Vec<f32>,
    pub ho_s: Vec<f32>,
    pub total: Vec<f32>,
    pub d_loss: Vec<f32>,
    pub gp: Vec<f32>,
    /// E[D(q_t)] − E[D(q_s)] at the last discriminator step of each iteration.
    pub score_gap: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: RunKind,
    pub scheme: String,
    pub config: TrainConfig,
    pub traces: Traces,
    /// Held-out metrics of the trained network.
    pub metrics: MetricsReport,
    pub checkpoints: Vec<PathBuf>,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<RunRecord> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

pub const RUN_RECORD: &str = "run.json";

/// A trained network with its record; `discriminator` only for holistic runs.
pub struct Outcome {
    pub network: Network,
    pub discriminator: Option<Network>,
    pub record: RunRecord,
}

fn apply(net: &mut Network, updates: Vec<Option<Vec<f32>>>) -> Result<()> {
    for (i, u) in updates.into_iter().enumerate() {
        if let Some(data) = u {
            net.set_param(i, data)?;
        }
    }
    Ok(())
}

fn finite(name: &str, it: u64, v: f32) -> Result<f32> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{name} became {v} at iteration {it}")))
    }
}

fn save_last_good(net: &Network, cfg: &TrainConfig, it: u64) -> Option<PathBuf> {
    let dir = cfg.paths.out_dir.as_ref()?.join("last_good");
    match checkpoint::save(net, &dir, it) {
        Ok(_) => Some(dir),
        Err(e) => {
            warn!("could not keep the last good checkpoint: {e}");
            None
        }
    }
}

fn all_finite(updates: &[Option<Vec<f32>>]) -> bool {
    updates.iter().flatten().all(|u| u.iter().all(|v| v.is_finite()))
}

fn diverged(what: &str, net: &Network, cfg: &TrainConfig, it: u64) -> Error {
    let kept = save_last_good(net, cfg, it);
    Error::Numeric(format!(
        "{what} update diverged at iteration {it}{}",
        kept.map(|p| format!("; last good checkpoint kept at {}", p.display())).unwrap_or_default()
    ))
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    splits: &'a Splits,
    bins: DepthBinning,
}

impl Loop<'_> {
    fn run(&self, spec: &NetworkSpec, kind: RunKind, mut teacher: Option<TeacherSource<'_>>) -> Result<Outcome> {
        let cfg = self.cfg;
        let t = cfg.toggles;
        let train = &self.splits.train;
        if train.is_empty() {
            return Err(Error::Empty("training dataset".into()));
        }
        check_compatible(&Network::build(spec, 0)?, train, &self.bins)?;
        let distilling = kind == RunKind::Distill && t.any();
        if distilling && teacher.is_none() {
            return Err(Error::InvalidArgument("distillation terms need a teacher".into()));
        }
        let run = cfg.seeds.run;
        let mut net = Network::build(spec, stream(run, RUN_INIT))?;
        let mut opt = Sgd::new(net.params().len(), cfg.momentum, cfg.weight_decay);
        let mut sampler = Sampler::new(train.len(), cfg.batch_size, stream(run, RUN_ORDER))?;

        let mut disc = if distilling && t.ho {
            let d = Network::build(&discriminator_spec(cfg)?, stream(run, RUN_DISC))?;
            let dc = &cfg.discriminator;
            let n = d.params().len();
            let dopt = match dc.optimizer {
                OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(n, dc.momentum, dc.weight_decay)),
                OptimizerKind::Adam => Optimizer::Adam(Adam::new(n, dc.momentum, dc.beta2, dc.weight_decay)),
            };
            Some((d, dopt, ChaCha8Rng::seed_from_u64(stream(run, RUN_GP))))
        } else {
            None
        };
        let mut adapter = if distilling && t.mimic {
            let mut rng = ChaCha8Rng::seed_from_u64(stream(run, RUN_ADAPTER));
            let tc = teacher_spec(cfg).feature_channels();
            let a = Adapter::new(spec.feature_channels(), tc, &mut rng);
            Some((a, Sgd::new(2, cfg.momentum, cfg.weight_decay)))
        } else {
            None
        };

        let hw = (train.height, train.width);
        let zero = Tensor::scalar(0.0);
        let mut tr = Traces::default();
        for it in 0..cfg.iterations {
            let lr = poly_lr(it, cfg.iterations, cfg.lr0, cfg.lr_power);
            let batch = train.batch(&sampler.next_indices())?;
            let out = net.forward_dense(&batch.images, BatchNormMode::Train)?;
            let task = task_loss(&out.upsampled_logits, &batch, cfg.task, &self.bins)?;
            tr.lr.push(lr);
            tr.task.push(task.as_ref().map(|l| l.item()).transpose()?);

            let mut pi = zero.clone();
            let mut feat = zero.clone();
            let mut ho_s = zero.clone();
            if distilling {
                let tout = teacher.as_mut().expect("checked above").outputs(&batch, hw)?;
                if t.pi {
                    pi = pixel_wise_loss(&out.logits, &tout.logits, cfg.pixel)?;
                    tr.pi.push(pi.item()?);
                }
                let mut add = |term: Tensor, series: &mut Vec<f32>| -> Result<()> {
                    series.push(term.item()?);
                    feat = feat.add(&term)?;
                    Ok(())
                };
                if t.pa {
                    add(pair_wise_distill(&out.features, &tout.features, cfg.alpha, cfg.beta)?, &mut tr.pa)?;
                }
                if t.local {
                    add(local_pairwise_loss(&out.features, &tout.features)?, &mut tr.local)?;
                }
                if let Some((a, _)) = &adapter {
                    add(mimic_loss(&out.features, &tout.features, a)?, &mut tr.mimic)?;
                }
                if t.at {
                    add(attention_transfer_loss(&out.features, &tout.features)?, &mut tr.at)?;
                }
                if let Some((d, dopt, gp_rng)) = &mut disc {
                    let q_s = score_map(&out, cfg.task, &self.bins)?;
                    let q_t = score_map(&tout, cfg.task, &self.bins)?;
                    let d_lr = poly_lr(it, cfg.iterations, cfg.discriminator.lr0, cfg.lr_power);
                    for _ in 0..cfg.d_steps_per_g_step {
                        let h = holistic_d_loss(d, &q_s, &q_t, &batch.images, cfg.weights.gp_coeff, gp_rng)?;
                        let loss = finite("discriminator loss", it, h.loss.item()?)?;
                        let g = h.loss.backward_wrt(&d.param_tensors())?;
                        let upd = dopt.step(&d.param_tensors(), &g, d_lr)?;
                        if !all_finite(&upd) {
                            return Err(diverged("discriminator", &net, cfg, it));
                        }
                        apply(d, upd)?;
                        tr.d_loss.push(loss);
                        tr.gp.push(h.gp);
                        tr.score_gap.push(-h.wasserstein);
                    }
                    ho_s = holistic_s_term(d, &q_s, &batch.images)?;
                    tr.ho_s.push(ho_s.item()?);
                }
            }

            let weights = LossWeights {
                unlabeled: cfg.weights.unlabeled || task.is_none(),
                ..cfg.weights
            };
            let total = student_objective(task.as_ref().unwrap_or(&zero), &pi, &feat, &ho_s, &weights)?;
            let total_v = total.item()?;
            if !total_v.is_finite() {
                let kept = save_last_good(&net, cfg, it);
                return Err(Error::Numeric(format!(
                    "student objective became {total_v} at iteration {it}{}",
                    kept.map(|p| format!("; last good checkpoint kept at {}", p.display())).unwrap_or_default()
                )));
            }
            tr.total.push(total_v);

            let mut targets = net.param_tensors();
            if let Some((a, _)) = &adapter {
                targets.extend(a.params());
            }
            if total.requires_grad() {
                let g = total.backward_wrt(&targets)?;
                if let Some(src) = &teacher {
                    src.assert_untouched(&g)?;
                }
                let upd = opt.step(&net.param_tensors(), &g, lr)?;
                if !all_finite(&upd) {
                    return Err(diverged("student", &net, cfg, it));
                }
                apply(&mut net, upd)?;
                if let Some((a, aopt)) = &mut adapter {
                    let upd = aopt.step(&a.params(), &g, lr)?;
                    let [w, b]: [Option<Vec<f32>>; 2] = upd.try_into().expect("two adapter parameters");
                    if let Some(w) = w {
                        a.w = Tensor::var(w, a.w.shape())?;
                    }
                    if let Some(b) = b {
                        a.b = Tensor::var(b, a.b.shape())?;
                    }
                }
            }
            if cfg.log_every > 0 && (it + 1) % cfg.log_every == 0 {
                info!("iter {} lr {lr:.5} total {total_v:.4}", it + 1);
            }
        }

        let metrics = evaluate(&mut net, &self.splits.test, &self.bins, cfg.batch_size)?;
        let mut checkpoints = Vec::new();
        let record_dir = cfg.paths.out_dir.clone();
        if let Some(dir) = &record_dir {
            let name = match kind {
                RunKind::Teacher => "teacher",
                RunKind::Distill => "student",
            };
            let p = dir.join(name);
            checkpoint::save(&net, &p, cfg.iterations)?;
            checkpoints.push(p);
            if let Some((d, _, _)) = &disc {
                let p = dir.join("discriminator");
                checkpoint::save(d, &p, cfg.iterations)?;
                checkpoints.push(p);
            }
        }
        let record = RunRecord {
            kind,
            scheme: match kind {
                RunKind::Teacher => "teacher".into(),
                RunKind::Distill => t.scheme(),
            },
            config: cfg.clone(),
            traces: tr,
            metrics,
            checkpoints,
        };
        if let Some(dir) = &record_dir {
            record.save(&dir.join(RUN_RECORD))?;
        }
        Ok(Outcome {
            network: net,
            discriminator: disc.map(|(d, _, _)| d),
            record,
        })
    }
}

/// Trains `spec` on the task loss alone; the returned network is frozen.
pub fn train_dense(cfg: &TrainConfig, splits: &Splits, spec: &NetworkSpec) -> Result<Outcome> {
    cfg.validate()?;
    let l = Loop {
        cfg,
        splits,
        bins: binning(cfg)?,
    };
    let mut out = l.run(spec, RunKind::Teacher, None)?;
    out.network.freeze();
    Ok(out)
}

/// Pretrains the teacher on labeled data.
pub fn train_teacher(cfg: &TrainConfig, splits: &Splits) -> Result<Outcome> {
    if splits.labeled == 0 {
        return Err(Error::Config("teacher training needs labeled samples".into()));
    }
    info!("training teacher for {} iterations", cfg.iterations);
    train_dense(cfg, splits, &teacher_spec(cfg))
}

/// Trains a student by alternating discriminator and student updates.
pub fn distill_train(cfg: &TrainConfig, splits: &Splits, teacher: TeacherSource<'_>) -> Result<Outcome> {
    cfg.validate()?;
    if let TeacherSource::Live(t) = &teacher {
        if !t.is_frozen() {
            return Err(Error::InvalidArgument("teacher must be frozen".into()));
        }
        crate::nets::check_capacity(t.spec(), &student_spec(cfg))?;
    }
    info!("distilling {} for {} iterations", cfg.toggles.scheme(), cfg.iterations);
    let l = Loop {
        cfg,
        splits,
        bins: binning(cfg)?,
    };
    l.run(&student_spec(cfg), RunKind::Distill, Some(teacher))
}
