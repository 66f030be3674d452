//! Dataset-level evaluation: dehaze every hazy image of a manifest and score it against
//! its clean reference, alongside the untouched hazy input as a baseline.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haze::{manifest_root, DatasetManifest};
use crate::i2i::{dehaze, Pipeline};
use crate::image::load_image;
use crate::metrics::{score, MetricPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub source_id: String,
    pub level: u8,
    pub dehazed: MetricPair,
    /// Hazy input scored against the same reference.
    pub original: MetricPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// `None` for the overall mean.
    pub level: Option<u8>,
    pub count: usize,
    pub dehazed: MetricPair,
    pub original: MetricPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// One entry per level present, ascending.
    pub per_level: Vec<Aggregate>,
    pub overall: Aggregate,
    /// Pairs that could not be read, with the reason.
    pub skipped: Vec<String>,
}

impl EvalReport {
    /// Builds the aggregates from `rows`.
    pub fn from_rows(rows: Vec<EvalRow>, skipped: Vec<String>) -> Self {
        let mut levels: Vec<u8> = rows.iter().map(|r| r.level).collect();
        levels.sort_unstable();
        levels.dedup();
        let per_level = levels
            .iter()
            .map(|&l| aggregate(Some(l), rows.iter().filter(|r| r.level == l)))
            .collect();
        let overall = aggregate(None, rows.iter());
        EvalReport { rows, per_level, overall, skipped }
    }

    pub fn warnings(&self) -> usize {
        self.skipped.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table: one line per row, then the per-level and overall means.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>5} {:>10} {:>10} {:>10} {:>10}",
            "source", "level", "SSIM", "PSNR", "orig SSIM", "orig PSNR"
        );
        let line = |out: &mut String, name: &str, level: &str, d: &MetricPair, o: &MetricPair| {
            let _ = writeln!(
                out,
                "{:<24} {:>5} {:>10.4} {:>10.3} {:>10.4} {:>10.3}",
                name, level, d.ssim, d.psnr, o.ssim, o.psnr
            );
        };
        for r in &self.rows {
            line(&mut out, &r.source_id, &r.level.to_string(), &r.dehazed, &r.original);
        }
        for a in &self.per_level {
            let name = format!("mean (n={})", a.count);
            line(&mut out, &name, &a.level.map_or("-".into(), |l| l.to_string()), &a.dehazed, &a.original);
        }
        let name = format!("overall (n={})", self.overall.count);
        line(&mut out, &name, "all", &self.overall.dehazed, &self.overall.original);
        if !self.skipped.is_empty() {
            let _ = writeln!(out, "warnings: {} pair(s) skipped", self.skipped.len());
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.txt` next to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = path.with_extension("json");
        let txt = path.with_extension("txt");
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))
    }
}

fn aggregate<'a>(level: Option<u8>, rows: impl Iterator<Item = &'a EvalRow>) -> Aggregate {
    let mut n = 0usize;
    let mut sums = [0.0f64; 4];
    for r in rows {
        n += 1;
        sums[0] += r.dehazed.psnr;
        sums[1] += r.dehazed.ssim;
        sums[2] += r.original.psnr;
        sums[3] += r.original.ssim;
    }
    let d = n.max(1) as f64;
    Aggregate {
        level,
        count: n,
        dehazed: MetricPair { psnr: sums[0] / d, ssim: sums[1] / d },
        original: MetricPair { psnr: sums[2] / d, ssim: sums[3] / d },
    }
}

/// Evaluates `pipeline` on every pair of the manifest at `manifest_path`. Unreadable pairs
/// are skipped and listed in the report.
pub fn evaluate(manifest_path: &Path, pipeline: &Pipeline<'_>) -> Result<EvalReport> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_root(manifest_path);
    // Outer error aborts (model failure); inner error skips an unreadable pair.
    let results: Vec<std::result::Result<EvalRow, String>> = manifest
        .pairs
        .par_iter()
        .map(|rec| {
            let load = |rel: &str| load_image(&root.join(rel)).map_err(|e| format!("{}: {e}", rec.source_id));
            let (clean, hazy) = match (load(&rec.clean_path), load(&rec.hazy_path)) {
                (Ok(c), Ok(h)) => (c, h),
                (Err(e), _) | (_, Err(e)) => return Ok(Err(e)),
            };
            let out = dehaze(pipeline, &hazy, false)?.dehazed;
            Ok(Ok(EvalRow {
                source_id: rec.source_id.clone(),
                level: rec.level,
                dehazed: score(&out, &clean)?,
                original: score(&hazy, &clean)?,
            }))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(msg) => {
                log::warn!("skipping pair: {msg}");
                skipped.push(msg);
            }
        }
    }
    Ok(EvalReport::from_rows(rows, skipped))
}
