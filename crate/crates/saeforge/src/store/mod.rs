//! Activation storage: the SAEB on-disk format, streaming row access, the
//! shuffled training buffer, and activation-norm estimation.
//!
//! A dataset is a dense `n_rows × d_model` matrix of 32-bit floats (one model
//! activation vector per token position, row-major) plus optional sidecars:
//!
//! * `seq_lens`  — row counts per sequence, in order; `Σ seq_lens == n_rows`
//! * `token_ids` — one vocabulary id per row
//! * `vocab`     — id → token string table
//! * `labels`    — named per-row integer label columns (concept class, ...)
//! * `mask`      — per-row usability flag; masked rows (BOS/EOS/PAD in real
//!                 dumps) are excluded from training and every metric
//!
//! Masked rows are never physically removed: readers keep the full matrix and
//! expose usable-row index lists, so sidecar alignment stays trivial.

mod buffer;
mod format;

pub use buffer::{ActivationBuffer, MemorySource, RowSource};
pub use format::{read_dataset, read_dataset_head, write_dataset, DatasetStream};

use crate::error::{Result, SaeForgeError};
use ndarray::{Array1, Array2};

/// A named per-row integer label column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelColumn {
    pub name: String,
    /// Total number of classes; every value is `< n_classes`.
    pub n_classes: u32,
    /// Class index reserved for "no concept fired / ambiguous", if any.
    /// Supervised metrics skip this class when enumerating concepts.
    pub background: Option<u32>,
    pub values: Vec<u32>,
}

impl LabelColumn {
    /// Class indices that denote real concepts (background excluded).
    pub fn concept_classes(&self) -> Vec<u32> {
        (0..self.n_classes)
            .filter(|c| Some(*c) != self.background)
            .collect()
    }
}

/// An in-memory activation dataset with sidecars. See the module docs for the
/// field contracts; [`ActivationDataset::validate`] enforces them.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    pub d_model: usize,
    /// `n_rows × d_model`, row-major.
    pub data: Array2<f32>,
    pub seq_lens: Option<Vec<u32>>,
    pub token_ids: Option<Vec<u32>>,
    pub vocab: Option<Vec<String>>,
    pub labels: Vec<LabelColumn>,
    /// `true` = usable row. Absent means all rows usable.
    pub mask: Option<Vec<bool>>,
}

impl ActivationDataset {
    /// Dataset with just a data matrix, no sidecars.
    pub fn bare(data: Array2<f32>) -> Self {
        ActivationDataset {
            d_model: data.ncols(),
            data,
            seq_lens: None,
            token_ids: None,
            vocab: None,
            labels: Vec::new(),
            mask: None,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    /// Check every cross-field invariant; called by readers and the writer.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_rows();
        let fail = |msg: String| Err(SaeForgeError::InvalidDataset(msg));
        if self.data.ncols() != self.d_model {
            return fail(format!(
                "data has {} columns but d_model is {}",
                self.data.ncols(),
                self.d_model
            ));
        }
        if let Some(seq_lens) = &self.seq_lens {
            if seq_lens.iter().any(|&l| l == 0) {
                return fail("seq_lens contains a zero-length sequence".into());
            }
            let total: u64 = seq_lens.iter().map(|&l| u64::from(l)).sum();
            if total != n as u64 {
                return fail(format!("seq_lens sum to {total} but dataset has {n} rows"));
            }
        }
        if let Some(token_ids) = &self.token_ids {
            if token_ids.len() != n {
                return fail(format!("token_ids has {} entries, want {n}", token_ids.len()));
            }
            if let Some(vocab) = &self.vocab {
                if let Some(&bad) = token_ids.iter().find(|&&t| t as usize >= vocab.len()) {
                    return fail(format!("token id {bad} out of range for vocab of {}", vocab.len()));
                }
            }
        }
        for col in &self.labels {
            if col.values.len() != n {
                return fail(format!(
                    "label column {:?} has {} entries, want {n}",
                    col.name,
                    col.values.len()
                ));
            }
            if let Some(&bad) = col.values.iter().find(|&&v| v >= col.n_classes) {
                return fail(format!(
                    "label column {:?} holds value {bad} >= n_classes {}",
                    col.name, col.n_classes
                ));
            }
            if let Some(bg) = col.background {
                if bg >= col.n_classes {
                    return fail(format!(
                        "label column {:?} background class {bg} >= n_classes {}",
                        col.name, col.n_classes
                    ));
                }
            }
        }
        if let Some(mask) = &self.mask {
            if mask.len() != n {
                return fail(format!("mask has {} entries, want {n}", mask.len()));
            }
        }
        Ok(())
    }

    /// Indices of usable rows (mask absent or `true`).
    pub fn usable_rows(&self) -> Vec<usize> {
        match &self.mask {
            None => (0..self.n_rows()).collect(),
            Some(m) => (0..self.n_rows()).filter(|&i| m[i]).collect(),
        }
    }

    pub fn is_usable(&self, row: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[row])
    }

    /// Row as f64 (all in-memory math runs in f64; f32 is a storage format).
    pub fn row_f64(&self, i: usize) -> Array1<f64> {
        self.data.row(i).mapv(f64::from)
    }

    /// Per-sequence row ranges. Without `seq_lens` every row is its own
    /// sequence of length one.
    pub fn sequence_ranges(&self) -> Vec<std::ops::Range<usize>> {
        match &self.seq_lens {
            None => (0..self.n_rows()).map(|i| i..i + 1).collect(),
            Some(lens) => {
                let mut out = Vec::with_capacity(lens.len());
                let mut start = 0usize;
                for &l in lens {
                    out.push(start..start + l as usize);
                    start += l as usize;
                }
                out
            }
        }
    }

    pub fn label(&self, name: &str) -> Result<&LabelColumn> {
        self.labels
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| SaeForgeError::MissingLabel(name.to_string()))
    }
}

/// Root-mean-square activation norm `c = sqrt(mean ‖x‖²)` over the first
/// `sample_rows` usable rows (fewer if the dataset is smaller).
///
/// This is the normalization constant folded into trained SAEs; training
/// operates on `x / c` so that `mean ‖x/c‖² = 1` on the sampled prefix.
pub fn estimate_norm_scale(dataset: &ActivationDataset, sample_rows: usize) -> Result<f64> {
    let mut sum_sq = 0.0f64;
    let mut count = 0usize;
    for i in 0..dataset.n_rows() {
        if count == sample_rows {
            break;
        }
        if !dataset.is_usable(i) {
            continue;
        }
        let row = dataset.data.row(i);
        sum_sq += row.iter().map(|&v| {
            let v = f64::from(v);
            v * v
        }).sum::<f64>();
        count += 1;
    }
    finish_norm_scale(sum_sq, count)
}

/// Streaming variant of [`estimate_norm_scale`] for datasets too large to load.
pub fn estimate_norm_scale_from_source(src: &mut dyn RowSource, sample_rows: usize) -> Result<f64> {
    let d = src.d_model();
    let mut row = vec![0.0f64; d];
    let mut sum_sq = 0.0f64;
    let mut count = 0usize;
    while count < sample_rows && src.next_row(&mut row)? {
        sum_sq += row.iter().map(|v| v * v).sum::<f64>();
        count += 1;
    }
    finish_norm_scale(sum_sq, count)
}

fn finish_norm_scale(sum_sq: f64, count: usize) -> Result<f64> {
    if count == 0 {
        return Err(SaeForgeError::InvalidDataset(
            "norm-scale estimation found no usable rows".into(),
        ));
    }
    let c = (sum_sq / count as f64).sqrt();
    if c <= 0.0 {
        return Err(SaeForgeError::InvalidDataset(
            "norm-scale estimation hit all-zero activations (c = 0)".into(),
        ));
    }
    Ok(c)
}
