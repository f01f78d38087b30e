//! Metric result records and their aggregation.
//!
//! One [`MetricReport`] per (SAE, metric) pair, serialized as a single JSON
//! object with stable key order: struct fields serialize in declaration
//! order, map-like content lives in `BTreeMap`s (alphabetical), and per-k
//! rows are emitted in construction order. Reruns with the same seed are
//! byte-identical except `wall_clock_seconds`, the one timestamp-like field.
//!
//! Files are append-only and named by a content hash of
//! (sae id, metric, seed, config echo): re-running an eval rewrites nothing
//! that already succeeded, and changing any input changes the name instead
//! of clobbering history.

use crate::error::{Result, SaeForgeError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const REPORT_FORMAT_VERSION: u32 = 1;

// ── The record ──────────────────────────────────────────────────────────────

/// Which SAE a report talks about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeIdentifier {
    pub arch: String,
    pub width: usize,
    /// `None` for models without an L0 knob (pca).
    pub target_l0: Option<u32>,
    pub checkpoint_step: u64,
    /// Checkpoint path as recorded at eval time.
    pub checkpoint: String,
}

/// One (curve name, k, score) row of a per-k breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerKEntry {
    pub name: String,
    pub k: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub format_version: u32,
    pub metric: String,
    pub sae: SaeIdentifier,
    pub seed: u64,
    /// Headline numbers, alphabetical by name.
    pub scalars: BTreeMap<String, f64>,
    /// Score-vs-k curves (empty for scalar-only metrics).
    pub per_k: Vec<PerKEntry>,
    /// The metric module's full typed report, verbatim.
    pub detail: serde_json::Value,
    /// Set when the metric failed; scalars/per_k are empty then.
    pub error: Option<String>,
    /// The run configuration that produced this report.
    pub config_echo: serde_json::Value,
    /// Excluded from determinism comparisons.
    pub wall_clock_seconds: f64,
}

impl MetricReport {
    /// Content-hash part of the filename: everything identity-bearing, no
    /// results, no wall clock.
    pub fn content_hash(&self) -> Result<String> {
        let key = serde_json::to_string(&(
            &self.metric,
            &self.sae,
            self.seed,
            &self.config_echo,
        ))
        .map_err(|e| SaeForgeError::Metric(format!("hashing report identity: {e}")))?;
        let digest = Sha256::digest(key.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    /// `<metric>-<arch>-w<width>[-l0<t>]-<hash>.json`
    pub fn file_name(&self) -> Result<String> {
        let l0 = match self.sae.target_l0 {
            Some(t) => format!("-l0{t}"),
            None => String::new(),
        };
        Ok(format!(
            "{}-{}-w{}{}-{}.json",
            self.metric,
            self.sae.arch,
            self.sae.width,
            l0,
            self.content_hash()?
        ))
    }
}

/// Write a report into `dir`, honoring the append-only contract: an existing
/// *successful* report with the same name is left untouched (cache hit); an
/// existing failure is replaced so a fixed environment can supersede it.
pub fn write_report(dir: &Path, report: &MetricReport) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| SaeForgeError::io(dir, e))?;
    let path = dir.join(report.file_name()?);
    if path.exists() {
        if let Ok(existing) = read_report(&path) {
            if existing.error.is_none() {
                eprintln!("[report] cache hit, keeping {}", path.display());
                return Ok(path);
            }
        }
    }
    let file = std::fs::File::create(&path).map_err(|e| SaeForgeError::io(&path, e))?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, report)
        .map_err(|e| SaeForgeError::Metric(format!("serializing report: {e}")))?;
    w.write_all(b"\n").map_err(|e| SaeForgeError::io(&path, e))?;
    w.flush().map_err(|e| SaeForgeError::io(&path, e))?;
    Ok(path)
}

pub fn read_report(path: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(path).map_err(|e| SaeForgeError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        SaeForgeError::Metric(format!("malformed report {}: {e}", path.display()))
    })
}

/// Every readable report under `dir`, sorted by file name; malformed files
/// are skipped with a stderr warning.
pub fn load_reports(dir: &Path) -> Result<Vec<MetricReport>> {
    let entries = std::fs::read_dir(dir).map_err(|e| SaeForgeError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut reports = Vec::new();
    for path in paths {
        match read_report(&path) {
            Ok(r) => reports.push(r),
            Err(e) => eprintln!("[report] skipping: {e}"),
        }
    }
    Ok(reports)
}

// ── Aggregation ─────────────────────────────────────────────────────────────

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Tidy CSV: one row per sae × metric × result name (× k for curve entries;
/// scalars leave the k column empty). Rows sort on every identity column so
/// the bytes are stable across report orderings.
pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut rows: Vec<[String; 9]> = Vec::new();
    for r in reports {
        if r.error.is_some() {
            continue;
        }
        let base = |name: &str, k: String, score: f64| {
            [
                r.sae.arch.clone(),
                r.sae.width.to_string(),
                r.sae.target_l0.map(|t| t.to_string()).unwrap_or_default(),
                r.sae.checkpoint_step.to_string(),
                r.metric.clone(),
                name.to_string(),
                k,
                format!("{score}"),
                r.seed.to_string(),
            ]
        };
        for (name, &score) in &r.scalars {
            rows.push(base(name, String::new(), score));
        }
        for entry in &r.per_k {
            rows.push(base(&entry.name, entry.k.to_string(), entry.score));
        }
    }
    rows.sort();
    let mut out = String::from("arch,width,target_l0,checkpoint_step,metric,name,k,score,seed\n");
    for row in rows {
        let line: Vec<String> = row.iter().map(|f| csv_field(f)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Plot-ready JSON: for every result name, one series per (arch, width),
/// points = (L0, score) sorted by L0. The x coordinate is the SAE's measured
/// `l0_mean` when a core report for it exists, else its target L0; SAEs with
/// neither are skipped with a warning.
pub fn reports_to_plot_data(reports: &[MetricReport]) -> serde_json::Value {
    // sae identity key → measured L0 from its core report.
    let sae_key = |sae: &SaeIdentifier| {
        format!(
            "{}|{}|{}|{}",
            sae.arch,
            sae.width,
            sae.target_l0.map(|t| t.to_string()).unwrap_or_default(),
            sae.checkpoint_step
        )
    };
    let mut measured_l0: BTreeMap<String, f64> = BTreeMap::new();
    for r in reports {
        if r.metric == "core" && r.error.is_none() {
            if let Some(&l0) = r.scalars.get("l0_mean") {
                measured_l0.insert(sae_key(&r.sae), l0);
            }
        }
    }

    // (result name → series key → points)
    let mut curves: BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for r in reports {
        if r.error.is_some() {
            continue;
        }
        let x = match measured_l0
            .get(&sae_key(&r.sae))
            .copied()
            .or(r.sae.target_l0.map(f64::from))
        {
            Some(x) => x,
            None => {
                eprintln!(
                    "[report] no L0 coordinate for {} (w{}), skipping its points",
                    r.sae.arch, r.sae.width
                );
                continue;
            }
        };
        let series = format!("{}-w{}", r.sae.arch, r.sae.width);
        for (name, &score) in &r.scalars {
            curves
                .entry(format!("{}.{}", r.metric, name))
                .or_default()
                .entry(series.clone())
                .or_default()
                .push((x, score));
        }
        for entry in &r.per_k {
            curves
                .entry(format!("{}.{}@k={}", r.metric, entry.name, entry.k))
                .or_default()
                .entry(series.clone())
                .or_default()
                .push((x, entry.score));
        }
    }

    let mut out = serde_json::Map::new();
    for (name, series) in curves {
        let mut series_obj = serde_json::Map::new();
        for (key, mut points) in series {
            points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let arr: Vec<serde_json::Value> = points
                .into_iter()
                .map(|(x, y)| serde_json::json!([x, y]))
                .collect();
            series_obj.insert(key, serde_json::Value::Array(arr));
        }
        out.insert(name, serde_json::Value::Object(series_obj));
    }
    serde_json::json!({ "x_axis": "l0", "curves": serde_json::Value::Object(out) })
}
