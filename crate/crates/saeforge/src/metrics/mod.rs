//! The metric suite: unsupervised core statistics (L0, FVU, loss recovered,
//! KL, reconstruction bias, latent similarity/frequency), probe-based
//! metrics (k-sparse probing, SCR, TPP), and feature absorption.
//!
//! Every metric sees only the public dataset (activations + sidecars) and the
//! SAE parameters; ground-truth generator internals stay in `synth` and are
//! consumed exclusively by oracle constructions inside tests. Masked rows are
//! excluded everywhere. All reductions are sequential and deterministic.

mod absorption;
mod core;
mod probe;
mod probing;
mod scr;
mod tpp;

pub use self::core::{
    core_stats, kl_score, kl_score_from, loss_recovered, loss_recovered_from, recon_bias_gamma,
    CoreMetricsReport, CoreStats, Readout,
};
pub use absorption::{absorption_eval, AbsorptionConfig, AbsorptionReport, ConceptAbsorption};
pub use probe::{
    ablate_reconstruct, latent_attribution, mean_latents, mean_pool, probe_accuracy, probe_f1,
    select_topk_mean_diff, train_probe, MeanPooled, ProbeParams, ProbeTrainConfig,
};
pub use probing::{sparse_probing_eval, SparseProbingReport};
pub use scr::{scr_eval, scr_shift, ScrReport, SCR_DEFAULT_KS};
pub use tpp::{tpp_eval, tpp_score_from_accuracies, TppReport, TPP_DEFAULT_KS};

use crate::store::ActivationDataset;
use ndarray::Array2;

/// Rows per chunk when streaming a dataset through an SAE.
pub(crate) const METRIC_CHUNK: usize = 4096;

/// Gather the usable rows listed in `rows` as an owned f64 matrix.
pub(crate) fn gather_rows(ds: &ActivationDataset, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), ds.d_model));
    for (r, &i) in rows.iter().enumerate() {
        for j in 0..ds.d_model {
            out[[r, j]] = f64::from(ds.data[[i, j]]);
        }
    }
    out
}
