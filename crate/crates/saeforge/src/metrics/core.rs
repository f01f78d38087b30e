//! Core unsupervised metrics.
//!
//! Definitions (means are over usable rows):
//!
//! * `l0_mean`   — mean count of strictly positive latents per row
//! * `mse`       — mean ‖x − x̂‖²
//! * `fvu`       — mse / mean ‖x − x̄‖² (fraction of variance unexplained)
//! * `max_latent_cosine` — per latent, the max cosine of its decoder column
//!   against every other column, averaged over latents
//! * `high_freq_fraction` — latents with firing frequency > 0.01
//! * `dead_fraction`      — latents that never fire
//! * `loss_recovered` — (H* − H₀) / (H_orig − H₀), cross-entropies of the
//!   readout's softmax against next-token targets with x, x̂, and the zero
//!   vector substituted (zero-ablation is literal: the all-zeros activation)
//! * `kl_score`  — (KL_abl − KL_SAE) / KL_abl, each KL taken against the
//!   original distribution and averaged over rows
//! * `recon_bias_gamma` — mean‖x̂‖² / mean(x̂·x), the closed-form minimizer
//!   of mean‖x̂/γ − x‖²; γ < 1 indicates shrinkage

use super::{gather_rows, METRIC_CHUNK};
use crate::error::{Result, SaeForgeError};
use crate::sae::{EncodeMode, SaeParams};
use crate::store::ActivationDataset;
use crate::synth::GroundTruthModel;
use crate::util::{cosine, kl_divergence, logsumexp, softmax};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

/// Anything that maps activations to vocabulary logits — the stand-in for
/// the host model's tail.
pub trait Readout {
    fn vocab_size(&self) -> usize;
    /// `n × d` activations → `n × V` logits.
    fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

impl Readout for GroundTruthModel {
    fn vocab_size(&self) -> usize {
        GroundTruthModel::vocab_size(self)
    }

    fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.surrogate_logits_batch(x)
    }
}

/// The data-statistics half of the core report (no readout involved).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreStats {
    pub l0_mean: f64,
    pub mse: f64,
    pub fvu: f64,
    pub max_latent_cosine: f64,
    pub high_freq_fraction: f64,
    pub dead_fraction: f64,
}

/// The full core metric set, including readout-based scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreMetricsReport {
    pub l0_mean: f64,
    pub mse: f64,
    pub fvu: f64,
    pub loss_recovered: f64,
    pub kl_score: f64,
    pub recon_bias_gamma: f64,
    pub max_latent_cosine: f64,
    pub high_freq_fraction: f64,
    pub dead_fraction: f64,
}

impl CoreMetricsReport {
    pub fn assemble(stats: &CoreStats, loss_recovered: f64, kl_score: f64, gamma: f64) -> Self {
        CoreMetricsReport {
            l0_mean: stats.l0_mean,
            mse: stats.mse,
            fvu: stats.fvu,
            loss_recovered,
            kl_score,
            recon_bias_gamma: gamma,
            max_latent_cosine: stats.max_latent_cosine,
            high_freq_fraction: stats.high_freq_fraction,
            dead_fraction: stats.dead_fraction,
        }
    }
}

// ── Data statistics ─────────────────────────────────────────────────────────

/// One streaming pass over the usable rows: sparsity, reconstruction error,
/// variance, firing frequencies; plus decoder-column similarity.
pub fn core_stats(params: &SaeParams, ds: &ActivationDataset) -> Result<CoreStats> {
    let rows = ds.usable_rows();
    if rows.is_empty() {
        return Err(SaeForgeError::TooFewRows { metric: "core_stats", needed: 1, have: 0 });
    }
    let n = rows.len() as f64;
    let mut l0_sum = 0.0f64;
    let mut mse_sum = 0.0f64;
    let mut sum_x: Array1<f64> = Array1::zeros(ds.d_model);
    let mut sum_xsq = 0.0f64;
    let mut fires = vec![0u64; params.width];

    for chunk in rows.chunks(METRIC_CHUNK) {
        let x = gather_rows(ds, chunk);
        let h = params.encode(&x.view(), EncodeMode::Infer)?;
        let xhat = params.decode(&h.view())?;
        for r in 0..x.nrows() {
            for j in 0..params.width {
                if h[[r, j]] != 0.0 {
                    l0_sum += 1.0;
                    fires[j] += 1;
                }
            }
            let mut err = 0.0;
            for c in 0..ds.d_model {
                let d = x[[r, c]] - xhat[[r, c]];
                err += d * d;
                sum_xsq += x[[r, c]] * x[[r, c]];
            }
            mse_sum += err;
        }
        sum_x += &x.sum_axis(Axis(0));
    }

    let mse = mse_sum / n;
    // mean‖x − x̄‖² = mean‖x‖² − ‖x̄‖²  (population variance, one pass)
    let mean_x = &sum_x / n;
    let variance = sum_xsq / n - mean_x.dot(&mean_x);
    if variance <= 0.0 {
        return Err(SaeForgeError::Metric(
            "core_stats: dataset variance is zero, fvu undefined".into(),
        ));
    }

    let mut high = 0usize;
    let mut dead = 0usize;
    for &c in &fires {
        let freq = c as f64 / n;
        if freq > 0.01 {
            high += 1;
        }
        if c == 0 {
            dead += 1;
        }
    }

    Ok(CoreStats {
        l0_mean: l0_sum / n,
        mse,
        fvu: mse / variance,
        max_latent_cosine: mean_max_decoder_cosine(params),
        high_freq_fraction: high as f64 / params.width as f64,
        dead_fraction: dead as f64 / params.width as f64,
    })
}

fn mean_max_decoder_cosine(params: &SaeParams) -> f64 {
    let f = params.width;
    if f < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..f {
        let mut best = f64::NEG_INFINITY;
        for j in 0..f {
            if i != j {
                best = best.max(cosine(params.w_d.column(i), params.w_d.column(j)));
            }
        }
        total += best;
    }
    total / f as f64
}

// ── Cross-entropy metrics ───────────────────────────────────────────────────

struct CeAccum {
    h_orig: f64,
    h_star: f64,
    h_zero: f64,
    n: usize,
}

impl CeAccum {
    fn new() -> Self {
        CeAccum { h_orig: 0.0, h_star: 0.0, h_zero: 0.0, n: 0 }
    }

    fn add(
        &mut self,
        readout: &dyn Readout,
        x: ArrayView2<'_, f64>,
        xhat: ArrayView2<'_, f64>,
        zero_logits: &Array1<f64>,
        targets: &[u32],
    ) -> Result<()> {
        let lo = readout.logits(x)?;
        let ls = readout.logits(xhat)?;
        let zero_lse = logsumexp(zero_logits.as_slice().expect("contiguous"));
        for (r, &t) in targets.iter().enumerate() {
            let t = t as usize;
            let row_o = lo.row(r);
            let row_s = ls.row(r);
            self.h_orig += logsumexp(row_o.as_slice().expect("contiguous")) - row_o[t];
            self.h_star += logsumexp(row_s.as_slice().expect("contiguous")) - row_s[t];
            self.h_zero += zero_lse - zero_logits[t];
        }
        self.n += targets.len();
        Ok(())
    }

    fn score(&self) -> Result<f64> {
        let n = self.n as f64;
        let (h_orig, h_star, h_zero) = (self.h_orig / n, self.h_star / n, self.h_zero / n);
        if (h_orig - h_zero).abs() < 1e-12 {
            return Err(SaeForgeError::Metric(format!(
                "uninformative readout: H_orig = H_0 = {h_orig}"
            )));
        }
        Ok((h_star - h_zero) / (h_orig - h_zero))
    }
}

fn zero_logits(readout: &dyn Readout, d_model: usize) -> Result<Array1<f64>> {
    let z = Array2::zeros((1, d_model));
    Ok(readout.logits(z.view())?.row(0).to_owned())
}

/// Loss recovered for explicit `x`/`x̂` matrices (targets aligned by row).
/// The SAE-facing entry point is [`loss_recovered`].
pub fn loss_recovered_from(
    x: ArrayView2<'_, f64>,
    xhat: ArrayView2<'_, f64>,
    readout: &dyn Readout,
    targets: &[u32],
) -> Result<f64> {
    check_targets(targets, x.nrows(), readout.vocab_size())?;
    let zl = zero_logits(readout, x.ncols())?;
    let mut acc = CeAccum::new();
    acc.add(readout, x, xhat, &zl, targets)?;
    acc.score()
}

/// Fraction of the readout's cross-entropy degradation repaired by the SAE
/// reconstruction. `targets` has one entry per dataset row (masked rows are
/// skipped along with their targets).
pub fn loss_recovered(
    params: &SaeParams,
    ds: &ActivationDataset,
    readout: &dyn Readout,
    targets: &[u32],
) -> Result<f64> {
    check_targets(targets, ds.n_rows(), readout.vocab_size())?;
    let rows = ds.usable_rows();
    if rows.is_empty() {
        return Err(SaeForgeError::TooFewRows { metric: "loss_recovered", needed: 1, have: 0 });
    }
    let zl = zero_logits(readout, ds.d_model)?;
    let mut acc = CeAccum::new();
    for chunk in rows.chunks(METRIC_CHUNK) {
        let x = gather_rows(ds, chunk);
        let xhat = params.reconstruct(&x.view())?;
        let t: Vec<u32> = chunk.iter().map(|&i| targets[i]).collect();
        acc.add(readout, x.view(), xhat.view(), &zl, &t)?;
    }
    acc.score()
}

fn check_targets(targets: &[u32], n: usize, v: usize) -> Result<()> {
    if targets.len() != n {
        return Err(SaeForgeError::ShapeMismatch {
            context: "next-token targets",
            expected: format!("{n} targets"),
            found: format!("{}", targets.len()),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(SaeForgeError::Metric(format!(
            "target {bad} out of range for vocabulary of {v}"
        )));
    }
    Ok(())
}

struct KlAccum {
    kl_abl: f64,
    kl_sae: f64,
    n: usize,
}

impl KlAccum {
    fn new() -> Self {
        KlAccum { kl_abl: 0.0, kl_sae: 0.0, n: 0 }
    }

    fn add(
        &mut self,
        readout: &dyn Readout,
        x: ArrayView2<'_, f64>,
        xhat: ArrayView2<'_, f64>,
        p_abl: &[f64],
    ) -> Result<()> {
        let lo = readout.logits(x)?;
        let ls = readout.logits(xhat)?;
        for r in 0..x.nrows() {
            let p_orig = softmax(lo.row(r).as_slice().expect("contiguous"));
            let p_sae = softmax(ls.row(r).as_slice().expect("contiguous"));
            self.kl_abl += kl_divergence(p_abl, &p_orig);
            self.kl_sae += kl_divergence(&p_sae, &p_orig);
        }
        self.n += x.nrows();
        Ok(())
    }

    fn score(&self) -> Result<f64> {
        let n = self.n as f64;
        let (kl_abl, kl_sae) = (self.kl_abl / n, self.kl_sae / n);
        if kl_abl <= 1e-15 {
            return Err(SaeForgeError::Metric(
                "kl_score: zero-ablation leaves the readout unchanged (KL_abl = 0)".into(),
            ));
        }
        Ok((kl_abl - kl_sae) / kl_abl)
    }
}

/// KL score for explicit `x`/`x̂` matrices; see [`kl_score`].
pub fn kl_score_from(
    x: ArrayView2<'_, f64>,
    xhat: ArrayView2<'_, f64>,
    readout: &dyn Readout,
) -> Result<f64> {
    let zl = zero_logits(readout, x.ncols())?;
    let p_abl = softmax(zl.as_slice().expect("contiguous"));
    let mut acc = KlAccum::new();
    acc.add(readout, x, xhat, &p_abl)?;
    acc.score()
}

/// (KL_abl − KL_SAE) / KL_abl with all KLs taken against the original
/// distribution and averaged over usable rows.
pub fn kl_score(params: &SaeParams, ds: &ActivationDataset, readout: &dyn Readout) -> Result<f64> {
    let rows = ds.usable_rows();
    if rows.is_empty() {
        return Err(SaeForgeError::TooFewRows { metric: "kl_score", needed: 1, have: 0 });
    }
    let zl = zero_logits(readout, ds.d_model)?;
    let p_abl = softmax(zl.as_slice().expect("contiguous"));
    let mut acc = KlAccum::new();
    for chunk in rows.chunks(METRIC_CHUNK) {
        let x = gather_rows(ds, chunk);
        let xhat = params.reconstruct(&x.view())?;
        acc.add(readout, x.view(), xhat.view(), &p_abl)?;
    }
    acc.score()
}

// ── Reconstruction bias ─────────────────────────────────────────────────────

/// γ = mean‖x̂‖² / mean(x̂·x); errors when the reconstruction is orthogonal
/// to the input on average.
pub fn recon_bias_gamma(params: &SaeParams, ds: &ActivationDataset) -> Result<f64> {
    let rows = ds.usable_rows();
    if rows.is_empty() {
        return Err(SaeForgeError::TooFewRows { metric: "recon_bias_gamma", needed: 1, have: 0 });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for chunk in rows.chunks(METRIC_CHUNK) {
        let x = gather_rows(ds, chunk);
        let xhat = params.reconstruct(&x.view())?;
        for r in 0..x.nrows() {
            num += xhat.row(r).dot(&xhat.row(r));
            den += xhat.row(r).dot(&x.row(r));
        }
    }
    let n = rows.len() as f64;
    if (den / n).abs() < 1e-12 {
        return Err(SaeForgeError::Metric(
            "recon_bias_gamma: reconstruction is orthogonal to the input on average".into(),
        ));
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::{pca_fit, ArchSpec};
    use crate::synth::{build_model, sample_dataset, GeneratorConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    fn test_model() -> GroundTruthModel {
        build_model(&GeneratorConfig {
            d_model: 8,
            f_true: 6,
            firing_prob: 0.3,
            noise_sigma: 0.01,
            hierarchy: vec![],
            concept_labels: vec![],
            spurious_labels: vec![],
            token_features: vec![0, 1, 2],
            seed: 5,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    fn dataset(n: usize) -> (GroundTruthModel, ActivationDataset) {
        let model = test_model();
        let (ds, _) = sample_dataset(&model, n).unwrap();
        (model, ds)
    }

    fn pca_params(ds: &ActivationDataset) -> SaeParams {
        let x = ds.data.mapv(f64::from);
        pca_fit(&x.view(), ds.d_model).unwrap().0
    }

    /// An SAE whose reconstruction is identically zero (W_D = 0, b_D = 0).
    fn zero_recon_params(d: usize) -> SaeParams {
        let mut p = SaeParams::zeros(d, 4, ArchSpec::Relu { lambda: 0.0 });
        p.w_e.fill(0.3);
        p.b_e.fill(1.0); // latents fire, decode still lands on 0
        p
    }

    #[test]
    fn topk_l0_is_exactly_k() {
        let (_, ds) = dataset(200);
        let mut p = SaeParams::zeros(8, 6, ArchSpec::TopK { k: 3 });
        let mut rng_state = 1u64;
        for v in p.w_e.iter_mut() {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            *v = ((rng_state >> 33) as f64 / 2f64.powi(31)) - 0.5;
        }
        p.b_e.fill(2.0); // every pre-activation positive → k survivors per row
        p.w_d.fill(0.1);
        let stats = core_stats(&p, &ds).unwrap();
        assert_eq!(stats.l0_mean, 3.0);
    }

    #[test]
    fn pca_reconstructs_with_negligible_fvu_and_dense_l0() {
        let (_, ds) = dataset(300);
        let p = pca_params(&ds);
        let stats = core_stats(&p, &ds).unwrap();
        assert!(stats.fvu <= 1e-6, "fvu {}", stats.fvu);
        let d = ds.d_model as f64;
        assert!((stats.l0_mean - d).abs() / d <= 0.05, "l0 {}", stats.l0_mean);
        assert_eq!(stats.dead_fraction, 0.0);
    }

    #[test]
    fn duplicated_decoder_column_maxes_cosine() {
        let (_, ds) = dataset(50);
        let mut p = SaeParams::zeros(8, 2, ArchSpec::Relu { lambda: 0.0 });
        p.w_e.fill(0.2);
        p.b_e.fill(1.0);
        for i in 0..8 {
            p.w_d[[i, 0]] = (i as f64 + 1.0) * 0.1;
            p.w_d[[i, 1]] = (i as f64 + 1.0) * 0.3; // same direction, scaled
        }
        let stats = core_stats(&p, &ds).unwrap();
        assert_abs_diff_eq!(stats.max_latent_cosine, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn frequency_stats_match_hand_enumeration() {
        // Three latents via identity-ish encoder on three hand rows:
        // latent 0 fires on 3/3 rows, latent 1 on 1/3, latent 2 never.
        let data = arr2(&[
            [1.0f32, -1.0, -2.0],
            [2.0, 0.5, -2.0],
            [3.0, -0.5, -2.0],
        ]);
        let ds = ActivationDataset::bare(data);
        let mut p = SaeParams::zeros(3, 3, ArchSpec::Relu { lambda: 0.0 });
        for i in 0..3 {
            p.w_e[[i, i]] = 1.0;
            p.w_d[[i, i]] = 1.0;
        }
        let stats = core_stats(&p, &ds).unwrap();
        assert_abs_diff_eq!(stats.l0_mean, 4.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.dead_fraction, 1.0 / 3.0, epsilon = 1e-12);
        // frequencies 1.0 and 1/3 are > 0.01; the dead latent is not
        assert_abs_diff_eq!(stats.high_freq_fraction, 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn masked_rows_are_excluded_from_stats() {
        let (_, mut ds) = dataset(120);
        let p = pca_params(&ds);
        // Reference: the same params scored on just the first 100 rows.
        let head = ActivationDataset::bare(
            ds.data.slice(ndarray::s![..100, ..]).to_owned(),
        );
        let clean = core_stats(&p, &head).unwrap();
        // Poison the last 20 rows, then mask them out: stats must not move.
        for i in 100..120 {
            for j in 0..ds.d_model {
                ds.data[[i, j]] = 1e6;
            }
        }
        let mut mask = vec![true; 120];
        for m in mask.iter_mut().skip(100) {
            *m = false;
        }
        ds.mask = Some(mask);
        let masked = core_stats(&p, &ds).unwrap();
        assert_abs_diff_eq!(masked.mse, clean.mse, epsilon = 1e-9);
        assert_abs_diff_eq!(masked.l0_mean, clean.l0_mean, epsilon = 1e-9);
    }

    #[test]
    fn loss_recovered_anchors() {
        let (model, ds) = dataset(250);
        let targets: Vec<u32> = ds.labels.iter().find(|c| c.name == "next_token").unwrap().values.clone();
        // x̂ = x (PCA at full width) → 1; x̂ = 0 → 0, both within 1e-6.
        let perfect = loss_recovered(&pca_params(&ds), &ds, &model, &targets).unwrap();
        assert_abs_diff_eq!(perfect, 1.0, epsilon = 1e-6);
        let zero = loss_recovered(&zero_recon_params(8), &ds, &model, &targets).unwrap();
        assert_abs_diff_eq!(zero, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn kl_score_anchors() {
        let (model, ds) = dataset(250);
        let perfect = kl_score(&pca_params(&ds), &ds, &model).unwrap();
        assert_abs_diff_eq!(perfect, 1.0, epsilon = 1e-6);
        let zero = kl_score(&zero_recon_params(8), &ds, &model).unwrap();
        assert_abs_diff_eq!(zero, 0.0, epsilon = 1e-6);
    }

    /// Readout with explicit weights for hand-computed cases.
    struct FixedReadout {
        w: Array2<f64>,
        b: Array1<f64>,
    }

    impl Readout for FixedReadout {
        fn vocab_size(&self) -> usize {
            self.b.len()
        }
        fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
            Ok(x.dot(&self.w) + &self.b)
        }
    }

    #[test]
    fn loss_recovered_matches_hand_cross_entropies() {
        // d = 1, V = 2, logits = [x, −x]. One row x = 1, target 0; x̂ = 0.5.
        // H(x)    = ln(1 + e^{−2})            (logit gap 2)
        // H(x̂)   = ln(1 + e^{−1})
        // H(0)    = ln 2
        let readout =
            FixedReadout { w: arr2(&[[1.0, -1.0]]), b: Array1::zeros(2) };
        let x = arr2(&[[1.0]]);
        let xhat = arr2(&[[0.5]]);
        let got = loss_recovered_from(x.view(), xhat.view(), &readout, &[0]).unwrap();
        let h_orig = (1.0 + (-2.0f64).exp()).ln();
        let h_star = (1.0 + (-1.0f64).exp()).ln();
        let h_zero = 2.0f64.ln();
        assert_abs_diff_eq!(got, (h_star - h_zero) / (h_orig - h_zero), epsilon = 1e-12);
    }

    #[test]
    fn kl_score_matches_hand_arithmetic() {
        let readout =
            FixedReadout { w: arr2(&[[1.0, -1.0]]), b: Array1::zeros(2) };
        let x = arr2(&[[1.0]]);
        let xhat = arr2(&[[0.5]]);
        let got = kl_score_from(x.view(), xhat.view(), &readout).unwrap();
        let p = softmax(&[1.0, -1.0]);
        let q = softmax(&[0.5, -0.5]);
        let z = softmax(&[0.0, 0.0]);
        let want = (kl_divergence(&z, &p) - kl_divergence(&q, &p)) / kl_divergence(&z, &p);
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn kl_score_is_monotone_along_interpolation() {
        // x̂_t = t·x sweeps from ablation to perfection; the score must be
        // non-decreasing in t.
        let (model, ds) = dataset(60);
        let x = gather_rows(&ds, &ds.usable_rows());
        let mut last = f64::NEG_INFINITY;
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let xhat = &x * t;
            let s = kl_score_from(x.view(), xhat.view(), &model).unwrap();
            assert!(s >= last - 1e-12, "t={t}: {s} < {last}");
            last = s;
        }
        assert_abs_diff_eq!(last, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn gamma_anchors_and_degenerate_case() {
        let (_, ds) = dataset(150);
        // x̂ = x → γ = 1
        assert_abs_diff_eq!(recon_bias_gamma(&pca_params(&ds), &ds).unwrap(), 1.0, epsilon = 1e-6);
        // x̂ = x/2 → γ = 0.5: center the data (so the PCA reconstruction is
        // purely linear), then halve the decoder.
        let x = ds.data.mapv(f64::from);
        let mean = x.mean_axis(Axis(0)).unwrap();
        let centered = &x - &mean.view().insert_axis(Axis(0));
        let cds = ActivationDataset::bare(centered.mapv(|v| v as f32));
        let (mut p, _) = pca_fit(&cds.data.mapv(f64::from).view(), cds.d_model).unwrap();
        p.w_d.mapv_inplace(|v| v * 0.5);
        p.b_d.mapv_inplace(|v| v * 0.5);
        let gamma = recon_bias_gamma(&p, &cds).unwrap();
        assert_abs_diff_eq!(gamma, 0.5, epsilon = 1e-6);
        // orthogonal-on-average reconstruction errors out
        assert!(recon_bias_gamma(&zero_recon_params(8), &ds).is_err());
    }

    #[test]
    fn fold_round_trip_leaves_ce_metrics_invariant() {
        let (model, ds) = dataset(120);
        let targets: Vec<u32> =
            ds.labels.iter().find(|c| c.name == "next_token").unwrap().values.clone();
        let base = pca_params(&ds);
        let mut folded = base.clone();
        folded.fold_norm_scale(3.7).unwrap();
        folded.fold_norm_scale(1.0 / 3.7).unwrap();
        let lr_a = loss_recovered(&base, &ds, &model, &targets).unwrap();
        let lr_b = loss_recovered(&folded, &ds, &model, &targets).unwrap();
        assert_abs_diff_eq!(lr_a, lr_b, epsilon = 1e-6);
        let kl_a = kl_score(&base, &ds, &model).unwrap();
        let kl_b = kl_score(&folded, &ds, &model).unwrap();
        assert_abs_diff_eq!(kl_a, kl_b, epsilon = 1e-6);
    }

    #[test]
    fn degenerate_readout_is_reported() {
        // A readout that ignores its input: H_orig = H_0 exactly.
        let readout = FixedReadout { w: arr2(&[[0.0, 0.0]]), b: Array1::zeros(2) };
        let x = arr2(&[[1.0]]);
        let err = loss_recovered_from(x.view(), x.view(), &readout, &[0]).unwrap_err();
        assert!(err.to_string().contains("uninformative"), "{err}");
        assert!(kl_score_from(x.view(), x.view(), &readout).is_err());
    }
}
