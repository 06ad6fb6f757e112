//! Ablation tables and score histograms from run records.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::RunRecord;
use crate::metrics::histogram_svg;
use crate::tasks::Task;
use crate::{Error, Result};

/// Row order of the ablation table; other schemes follow alphabetically.
pub const SCHEME_ORDER: [&str; 4] = ["baseline", "+PI", "+PI+PA", "+PI+PA+HO"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub scheme: String,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation; absent for a single run.
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub task: Task,
    /// `miou` for segmentation, `rel` for depth.
    pub metric: &'static str,
    pub rows: Vec<AblationRow>,
}

fn headline(r: &RunRecord) -> Result<f64> {
    match r.config.task {
        Task::Segmentation => r.metrics.segmentation.as_ref().map(|m| m.miou),
        Task::Depth => r.metrics.depth.as_ref().map(|m| m.rel),
    }
    .ok_or_else(|| Error::InvalidArgument(format!("{} record has no {:?} metrics", r.scheme, r.config.task)))
}

pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

fn rank(scheme: &str) -> (usize, String) {
    let i = SCHEME_ORDER.iter().position(|s| *s == scheme).unwrap_or(SCHEME_ORDER.len());
    (i, scheme.to_string())
}

/// Groups records by scheme, one row per scheme with mean and spread over seeds.
pub fn ablation_table(records: &[RunRecord]) -> Result<AblationTable> {
    let first = records.first().ok_or_else(|| Error::Empty("report needs at least one run record".into()))?;
    let task = first.config.task;
    if let Some(r) = records.iter().find(|r| r.config.task != task) {
        return Err(Error::TaskMismatch {
            expected: format!("{task:?} records only"),
            found: format!("a {:?} record ({})", r.config.task, r.scheme),
        });
    }
    let mut schemes: Vec<&str> = records.iter().map(|r| r.scheme.as_str()).collect();
    schemes.sort_by_key(|s| rank(s));
    schemes.dedup();
    let mut rows = Vec::with_capacity(schemes.len());
    for s in schemes {
        let values = records
            .iter()
            .filter(|r| r.scheme == s)
            .map(headline)
            .collect::<Result<Vec<f64>>>()?;
        let (mean, std) = mean_std(&values);
        rows.push(AblationRow {
            scheme: s.to_string(),
            runs: values.len(),
            mean,
            std,
        });
    }
    Ok(AblationTable {
        task,
        metric: match task {
            Task::Segmentation => "miou",
            Task::Depth => "rel",
        },
        rows,
    })
}

pub fn write_csv<W: Write>(table: &AblationTable, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let fail = |e: csv::Error| Error::Format(e.to_string());
    for row in &table.rows {
        out.serialize(row).map_err(fail)?;
    }
    out.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<AblationRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<Vec<AblationRow>, _>>()
        .map_err(|e| Error::Format(e.to_string()))
}

/// Writes `ablation.csv` plus one score histogram per record carrying a
/// score analysis; returns the written paths.
pub fn write_report(records: &[RunRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    let table = ablation_table(records)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("ablation.csv");
    let f = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_csv(&table, f)?;
    let mut written = vec![csv_path];
    for (i, r) in records.iter().enumerate() {
        if let Some(s) = &r.metrics.scores {
            let title = format!("{} seed {}: teacher - student = {:.3}", r.scheme, r.config.seeds.run, s.score_difference);
            let p = dir.join(format!("scores_{i}.svg"));
            fs::write(&p, histogram_svg(&s.histogram, &title)).map_err(|e| Error::io(&p, e))?;
            written.push(p);
        }
    }
    Ok(written)
}
