//! Targeted Probe Perturbation. For an m-class column, train one-vs-rest
//! probes C_j on activations, ablate each class i's top attributed latents,
//! and compare the accuracy damage on the matching probe (i = j) against the
//! collateral damage on the others (i ≠ j):
//!
//!   score = mean_{i=j}(A_j − A_{i,j}) − mean_{i≠j}(A_j − A_{i,j})
//!
//! Larger = better isolation. The appendix formula carries the opposite sign
//! convention; both readings are reported.

use crate::error::{Result, SaeForgeError};
use crate::metrics::probe::{
    ablate_reconstruct, latent_attribution, mean_latents, probe_accuracy, train_probe,
    ProbeParams, ProbeTrainConfig,
};
use crate::sae::SaeParams;
use crate::store::ActivationDataset;
use crate::util::shuffled_indices;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Published k grid; callers may override.
pub const TPP_DEFAULT_KS: [usize; 6] = [5, 10, 20, 50, 100, 500];

/// Classes with fewer usable rows than this are skipped with a warning.
const MIN_CLASS_ROWS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TppReport {
    pub column: String,
    /// Classes that actually entered the evaluation.
    pub classes: Vec<u32>,
    pub skipped_classes: Vec<u32>,
    pub ks: Vec<usize>,
    /// Implemented sign: larger = better isolation.
    pub tpp_per_k: Vec<f64>,
    /// The appendix's sign convention (negated), recorded for comparison.
    pub appendix_sign_per_k: Vec<f64>,
    /// Held-out baseline accuracy A_j per class, aligned with `classes`.
    pub baseline_accuracy: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
}

/// The TPP formula on its own, from a baseline vector A_j and the ablated
/// accuracy matrix A_{i,j} (row i = latents ablated for class i, column j =
/// probe evaluated).
pub fn tpp_score_from_accuracies(baseline: &[f64], ablated: &Array2<f64>) -> Result<f64> {
    let m = baseline.len();
    if ablated.nrows() != m || ablated.ncols() != m || m < 2 {
        return Err(SaeForgeError::ShapeMismatch {
            context: "tpp_score_from_accuracies",
            expected: format!("{m}×{m} matrix, m ≥ 2"),
            found: format!("{}×{}", ablated.nrows(), ablated.ncols()),
        });
    }
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..m {
        for j in 0..m {
            let drop = baseline[j] - ablated[[i, j]];
            if i == j {
                diag += drop;
            } else {
                off += drop;
            }
        }
    }
    Ok(diag / m as f64 - off / (m * (m - 1)) as f64)
}

pub fn tpp_eval(
    params: &SaeParams,
    ds: &ActivationDataset,
    column: &str,
    ks: &[usize],
    cfg: &ProbeTrainConfig,
) -> Result<TppReport> {
    let col = ds.label(column)?;
    // Background rows are not a class; they are excluded entirely.
    let mut rows_per_class: Vec<(u32, Vec<usize>)> = col
        .concept_classes()
        .into_iter()
        .map(|c| (c, Vec::new()))
        .collect();
    for i in ds.usable_rows() {
        if let Some((_, rows)) = rows_per_class.iter_mut().find(|(c, _)| *c == col.values[i]) {
            rows.push(i);
        }
    }
    let mut skipped_classes = Vec::new();
    rows_per_class.retain(|(c, rows)| {
        if rows.len() < MIN_CLASS_ROWS {
            eprintln!(
                "tpp_eval: class {c} of '{column}' has only {} rows, skipping",
                rows.len()
            );
            skipped_classes.push(*c);
            false
        } else {
            true
        }
    });
    if rows_per_class.len() < 2 {
        return Err(SaeForgeError::DegenerateTask(format!(
            "TPP needs at least two populated classes in '{column}'"
        )));
    }

    // Stratified 80/20 split so every class appears in both halves.
    let mut train_rows: Vec<usize> = Vec::new();
    let mut test_rows: Vec<usize> = Vec::new();
    for (c, rows) in &rows_per_class {
        let order = shuffled_indices(rows.len(), cfg.seed, &format!("tpp-split-{c}"));
        let cut = rows.len() * 4 / 5;
        train_rows.extend(order[..cut].iter().map(|&j| rows[j]));
        test_rows.extend(order[cut..].iter().map(|&j| rows[j]));
    }

    let x_train = super::gather_rows(ds, &train_rows);
    let x_test = super::gather_rows(ds, &test_rows);
    let classes: Vec<u32> = rows_per_class.iter().map(|(c, _)| *c).collect();
    let m = classes.len();

    let mut probes: Vec<ProbeParams> = Vec::with_capacity(m);
    let mut baseline = Vec::with_capacity(m);
    let mut y_test_per_class: Vec<Vec<bool>> = Vec::with_capacity(m);
    for &c in &classes {
        let y_train: Vec<bool> = train_rows.iter().map(|&i| col.values[i] == c).collect();
        let y_test: Vec<bool> = test_rows.iter().map(|&i| col.values[i] == c).collect();
        let probe = train_probe(x_train.view(), &y_train, cfg)?;
        baseline.push(probe_accuracy(&probe, x_test.view(), &y_test));
        probes.push(probe);
        y_test_per_class.push(y_test);
    }

    let mean_h = mean_latents(params, x_train.view())?;
    // Signed attribution, best-first; ties toward the lower index.
    let rankings: Vec<Vec<usize>> = probes
        .iter()
        .map(|p| {
            let scores = latent_attribution(p, params, mean_h.view())?;
            let mut idx: Vec<usize> = (0..params.width).collect();
            idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            Ok(idx)
        })
        .collect::<Result<_>>()?;

    let mut tpp_per_k = Vec::with_capacity(ks.len());
    let mut appendix_sign_per_k = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut ablated_acc = Array2::zeros((m, m));
        for i in 0..m {
            let chosen = &rankings[i][..k.min(params.width)];
            let x_abl = ablate_reconstruct(params, x_test.view(), chosen)?;
            for j in 0..m {
                ablated_acc[[i, j]] =
                    probe_accuracy(&probes[j], x_abl.view(), &y_test_per_class[j]);
            }
        }
        let score = tpp_score_from_accuracies(&baseline, &ablated_acc)?;
        tpp_per_k.push(score);
        appendix_sign_per_k.push(-score);
    }

    Ok(TppReport {
        column: column.to_string(),
        classes,
        skipped_classes,
        ks: ks.to_vec(),
        tpp_per_k,
        appendix_sign_per_k,
        baseline_accuracy: baseline,
        n_train: train_rows.len(),
        n_test: test_rows.len(),
    })
}
