//! k-sparse probing: can a handful of latents linearly recover a labeled
//! concept? Sequences are mean-pooled in latent space, the top-k latents are
//! picked by mean difference on the train split, and a logistic probe on just
//! those k activations is scored on held-out sequences (one-vs-all per class,
//! macro-averaged).

use crate::error::{Result, SaeForgeError};
use crate::metrics::probe::{
    probe_accuracy, select_topk_mean_diff, train_probe, ProbeTrainConfig,
};
use crate::sae::{EncodeMode, SaeParams};
use crate::store::ActivationDataset;
use crate::util::shuffled_indices;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

/// Sequence budget matching the published evaluation; smaller datasets fall
/// back to an 80/20 split.
const FULL_TRAIN_SEQS: usize = 4000;
const FULL_TEST_SEQS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseProbingReport {
    pub column: String,
    pub ks: Vec<usize>,
    /// Macro-averaged held-out accuracy, aligned with `ks`.
    pub accuracy_per_k: Vec<f64>,
    pub classes: Vec<u32>,
    pub n_train_sequences: usize,
    pub n_test_sequences: usize,
    /// Sequences dropped for being fully masked or label-inconsistent.
    pub skipped_sequences: usize,
}

/// Pooled latent representations plus one label per surviving sequence.
struct PooledTask {
    pooled: Array2<f64>,
    labels: Vec<u32>,
    skipped: usize,
}

/// Encode every row, mean-pool latents per sequence, and attach the
/// sequence-constant label. Sequences whose usable rows disagree on the label
/// are dropped with a warning — the metric is only defined for
/// sequence-scoped concepts.
fn pool_latents(params: &SaeParams, ds: &ActivationDataset, column: &str) -> Result<PooledTask> {
    let col = ds.label(column)?;
    let n = ds.n_rows();
    let seq_lens: Vec<u32> = match &ds.seq_lens {
        Some(l) => l.clone(),
        None => vec![1; n],
    };

    // Stream in chunks of whole sequences: never materialize the full n×width
    // latent matrix (inference is row-wise, so chunking is exact).
    let mut pooled_rows: Vec<Array1<f64>> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    let mut skipped = 0usize;

    let mut pending: Vec<usize> = Vec::new(); // usable-row counts per kept sequence
    let mut chunk_rows: Vec<usize> = Vec::new();
    let flush = |pending: &mut Vec<usize>,
                     chunk_rows: &mut Vec<usize>,
                     pooled_rows: &mut Vec<Array1<f64>>|
     -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let x = super::gather_rows(ds, chunk_rows);
        let h = params.encode(&x.view(), EncodeMode::Infer)?;
        let mut offset = 0usize;
        for &count in pending.iter() {
            let block = h.slice(ndarray::s![offset..offset + count, ..]);
            pooled_rows.push(block.mean_axis(Axis(0)).expect("count > 0"));
            offset += count;
        }
        pending.clear();
        chunk_rows.clear();
        Ok(())
    };

    let mut start = 0usize;
    for (s, &len) in seq_lens.iter().enumerate() {
        let rows: Vec<usize> =
            (start..start + len as usize).filter(|&i| ds.is_usable(i)).collect();
        start += len as usize;
        if rows.is_empty() {
            eprintln!("sparse_probing: sequence {s} has no usable rows, skipping");
            skipped += 1;
            continue;
        }
        let label = col.values[rows[0]];
        if rows.iter().any(|&i| col.values[i] != label) {
            eprintln!(
                "sparse_probing: sequence {s} has inconsistent '{column}' labels, skipping"
            );
            skipped += 1;
            continue;
        }
        labels.push(label);
        pending.push(rows.len());
        chunk_rows.extend(rows);
        if chunk_rows.len() >= super::METRIC_CHUNK {
            flush(&mut pending, &mut chunk_rows, &mut pooled_rows)?;
        }
    }
    flush(&mut pending, &mut chunk_rows, &mut pooled_rows)?;

    let mut pooled = Array2::zeros((pooled_rows.len(), params.width));
    for (r, row) in pooled_rows.into_iter().enumerate() {
        pooled.row_mut(r).assign(&row);
    }
    Ok(PooledTask { pooled, labels, skipped })
}

/// k-sparse probing over a label column; see module docs for the pipeline.
pub fn sparse_probing_eval(
    params: &SaeParams,
    ds: &ActivationDataset,
    column: &str,
    ks: &[usize],
    cfg: &ProbeTrainConfig,
) -> Result<SparseProbingReport> {
    let task = pool_latents(params, ds, column)?;
    let n_seq = task.labels.len();
    if n_seq < 5 {
        return Err(SaeForgeError::TooFewRows {
            metric: "sparse_probing",
            needed: 5,
            have: n_seq,
        });
    }
    let order = shuffled_indices(n_seq, cfg.seed, "probing-split");
    let (n_train, n_test) = if n_seq >= FULL_TRAIN_SEQS + FULL_TEST_SEQS {
        (FULL_TRAIN_SEQS, FULL_TEST_SEQS)
    } else {
        let n_test = (n_seq / 5).max(1);
        (n_seq - n_test, n_test)
    };
    let train_idx = &order[..n_train];
    let test_idx = &order[n_train..n_train + n_test];
    let train = task.pooled.select(Axis(0), train_idx);
    let test = task.pooled.select(Axis(0), test_idx);

    let classes = ds.label(column)?.concept_classes();
    if classes.is_empty() {
        return Err(SaeForgeError::DegenerateTask(format!(
            "label column '{column}' has no concept classes"
        )));
    }

    let mut accuracy_per_k = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut sum = 0.0;
        for &c in &classes {
            let y_train: Vec<bool> = train_idx.iter().map(|&i| task.labels[i] == c).collect();
            let y_test: Vec<bool> = test_idx.iter().map(|&i| task.labels[i] == c).collect();
            for (split, y) in [("train", &y_train), ("test", &y_test)] {
                if !y.iter().any(|&t| t) {
                    return Err(SaeForgeError::DegenerateTask(format!(
                        "class {c} of '{column}' is absent from the {split} split"
                    )));
                }
            }
            let selected = select_topk_mean_diff(train.view(), &y_train, k.min(params.width))?;
            let sub_train = train.select(Axis(1), &selected);
            let sub_test = test.select(Axis(1), &selected);
            let probe = train_probe(sub_train.view(), &y_train, cfg)?;
            sum += probe_accuracy(&probe, sub_test.view(), &y_test);
        }
        accuracy_per_k.push(sum / classes.len() as f64);
    }

    Ok(SparseProbingReport {
        column: column.to_string(),
        ks: ks.to_vec(),
        accuracy_per_k,
        classes,
        n_train_sequences: n_train,
        n_test_sequences: n_test,
        skipped_sequences: task.skipped,
    })
}
