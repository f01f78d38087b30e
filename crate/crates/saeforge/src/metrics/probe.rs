//! Probe primitives shared by the supervised metrics: logistic probes
//! trained with plain minibatch gradient descent (exactly the published
//! hyperparameters — no momentum, no schedule), sequence mean-pooling,
//! mean-difference latent selection, probe attribution, and latent ablation.

use crate::error::{Result, SaeForgeError};
use crate::sae::{EncodeMode, SaeParams};
use crate::util::rng_for;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// A binary logistic probe: P(positive) = σ(w·x + b). Prediction is
/// `logit > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    pub w: Array1<f64>,
    pub b: f64,
}

impl ProbeParams {
    pub fn logit(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.w.dot(&x) + self.b
    }

    pub fn predict(&self, x: ArrayView1<'_, f64>) -> bool {
        self.logit(x) > 0.0
    }
}

/// Published probe-training hyperparameters; see the SCR/TPP table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub l1_penalty: f64,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig { batch_size: 16, epochs: 20, lr: 1e-3, l1_penalty: 1e-3, seed: 0 }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression by minibatch gradient descent with an L1 penalty.
/// Deterministic given the config seed (one RNG drives every epoch's
/// shuffle). Errors if only one class is present.
pub fn train_probe(
    reps: ArrayView2<'_, f64>,
    targets: &[bool],
    cfg: &ProbeTrainConfig,
) -> Result<ProbeParams> {
    if reps.nrows() != targets.len() {
        return Err(SaeForgeError::ShapeMismatch {
            context: "train_probe",
            expected: format!("{} labels", reps.nrows()),
            found: format!("{}", targets.len()),
        });
    }
    let pos = targets.iter().filter(|&&t| t).count();
    if pos == 0 || pos == targets.len() {
        return Err(SaeForgeError::DegenerateTask(
            "probe training set contains a single class".into(),
        ));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 || cfg.lr <= 0.0 {
        return Err(SaeForgeError::Metric("probe config values must be positive".into()));
    }

    let d = reps.ncols();
    let mut w: Array1<f64> = Array1::zeros(d);
    let mut b = 0.0f64;
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut rng = rng_for(cfg.seed, "probe");

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let inv = 1.0 / batch.len() as f64;
            let mut grad_w: Array1<f64> = Array1::zeros(d);
            let mut grad_b = 0.0;
            for &i in batch {
                let resid = sigmoid(w.dot(&reps.row(i)) + b) - f64::from(u8::from(targets[i]));
                grad_w.scaled_add(resid * inv, &reps.row(i));
                grad_b += resid * inv;
            }
            for (gw, &wj) in grad_w.iter_mut().zip(w.iter()) {
                *gw += cfg.l1_penalty * wj.signum() * f64::from(wj != 0.0);
            }
            w.scaled_add(-cfg.lr, &grad_w);
            b -= cfg.lr * grad_b;
        }
    }
    Ok(ProbeParams { w, b })
}

/// Fraction of rows the probe classifies correctly.
pub fn probe_accuracy(probe: &ProbeParams, reps: ArrayView2<'_, f64>, targets: &[bool]) -> f64 {
    let correct = targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| probe.predict(reps.row(i)) == t)
        .count();
    correct as f64 / targets.len().max(1) as f64
}

/// Binary F1 = 2TP / (2TP + FP + FN); 0 when the denominator is 0.
pub fn probe_f1(probe: &ProbeParams, reps: ArrayView2<'_, f64>, targets: &[bool]) -> f64 {
    let (mut tp, mut fp, mut fal_n) = (0u64, 0u64, 0u64);
    for (i, &t) in targets.iter().enumerate() {
        match (probe.predict(reps.row(i)), t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fal_n += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fal_n;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

// ── Pooling ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct MeanPooled {
    /// One row per kept sequence.
    pub pooled: Array2<f64>,
    /// Original sequence index of each pooled row.
    pub seq_indices: Vec<usize>,
    /// All-masked sequences dropped (warned on stderr).
    pub skipped: usize,
}

/// Mean over each sequence's unmasked rows. `rows` may be activations or
/// SAE latents — anything row-aligned with the dataset.
pub fn mean_pool(
    rows: ArrayView2<'_, f64>,
    seq_lens: &[u32],
    mask: Option<&[bool]>,
) -> Result<MeanPooled> {
    let total: usize = seq_lens.iter().map(|&l| l as usize).sum();
    if total != rows.nrows() {
        return Err(SaeForgeError::ShapeMismatch {
            context: "mean_pool",
            expected: format!("{} rows (sum of seq_lens)", total),
            found: format!("{}", rows.nrows()),
        });
    }
    if let Some(m) = mask {
        if m.len() != rows.nrows() {
            return Err(SaeForgeError::ShapeMismatch {
                context: "mean_pool",
                expected: format!("mask of {}", rows.nrows()),
                found: format!("{}", m.len()),
            });
        }
    }
    let width = rows.ncols();
    let mut pooled_rows: Vec<f64> = Vec::new();
    let mut seq_indices = Vec::new();
    let mut skipped = 0;
    let mut start = 0usize;
    for (s, &len) in seq_lens.iter().enumerate() {
        let len = len as usize;
        let mut acc: Array1<f64> = Array1::zeros(width);
        let mut live = 0usize;
        for i in start..start + len {
            if mask.map_or(true, |m| m[i]) {
                acc += &rows.row(i);
                live += 1;
            }
        }
        if live == 0 {
            eprintln!("mean_pool: sequence {s} is fully masked, skipping");
            skipped += 1;
        } else {
            acc /= live as f64;
            pooled_rows.extend(acc.iter());
            seq_indices.push(s);
        }
        start += len;
    }
    let pooled = Array2::from_shape_vec((seq_indices.len(), width), pooled_rows)
        .expect("pooled shape");
    Ok(MeanPooled { pooled, seq_indices, skipped })
}

// ── Latent selection & attribution ──────────────────────────────────────────

/// The `k` latents maximizing mean(h | positive) − mean(h | negative),
/// returned in rank order; ties break toward the lower index.
pub fn select_topk_mean_diff(
    h: ArrayView2<'_, f64>,
    targets: &[bool],
    k: usize,
) -> Result<Vec<usize>> {
    if h.nrows() != targets.len() {
        return Err(SaeForgeError::ShapeMismatch {
            context: "select_topk_mean_diff",
            expected: format!("{} labels", h.nrows()),
            found: format!("{}", targets.len()),
        });
    }
    if k > h.ncols() {
        return Err(SaeForgeError::Metric(format!(
            "select_topk_mean_diff: k = {k} exceeds width {}",
            h.ncols()
        )));
    }
    let pos = targets.iter().filter(|&&t| t).count();
    let neg = targets.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(SaeForgeError::DegenerateTask(
            "mean-difference selection needs both classes".into(),
        ));
    }
    let width = h.ncols();
    let mut sum_pos: Array1<f64> = Array1::zeros(width);
    let mut sum_neg: Array1<f64> = Array1::zeros(width);
    for (i, &t) in targets.iter().enumerate() {
        if t {
            sum_pos += &h.row(i);
        } else {
            sum_neg += &h.row(i);
        }
    }
    let mut idx: Vec<usize> = (0..width).collect();
    let diff: Vec<f64> =
        (0..width).map(|j| sum_pos[j] / pos as f64 - sum_neg[j] / neg as f64).collect();
    idx.sort_by(|&a, &b| diff[b].total_cmp(&diff[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Mean latent activation over a row set — the `mean_rows(h_j)` factor of
/// attribution scores.
pub fn mean_latents(params: &SaeParams, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let h = params.encode(&x, EncodeMode::Infer)?;
    Ok(h.mean_axis(Axis(0)).expect("nonempty batch"))
}

/// Per-latent probe attribution: score_j = mean_rows(h_j) · (w · column_j of
/// W_D) — the mean contribution of latent j to the probe logit. SCR ranks by
/// |score|, TPP by signed score.
pub fn latent_attribution(
    probe: &ProbeParams,
    params: &SaeParams,
    mean_h: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    if probe.w.len() != params.d_model {
        return Err(SaeForgeError::ShapeMismatch {
            context: "latent_attribution",
            expected: format!("probe of width {}", params.d_model),
            found: format!("{}", probe.w.len()),
        });
    }
    if mean_h.len() != params.width {
        return Err(SaeForgeError::ShapeMismatch {
            context: "latent_attribution",
            expected: format!("mean_h of width {}", params.width),
            found: format!("{}", mean_h.len()),
        });
    }
    let proj = probe.w.dot(&params.w_d); // w·column_j for all j
    Ok(&mean_h * &proj)
}

/// Zero-ablate a latent set in activation space:
/// x' = x − Σ_{j∈L} h_j · column_j(W_D). Duplicate indices are collapsed
/// (set semantics); the reconstruction error term is implicitly kept.
pub fn ablate_reconstruct(
    params: &SaeParams,
    x: ArrayView2<'_, f64>,
    latents: &[usize],
) -> Result<Array2<f64>> {
    let mut set: Vec<usize> = latents.to_vec();
    set.sort_unstable();
    set.dedup();
    if let Some(&bad) = set.iter().find(|&&j| j >= params.width) {
        return Err(SaeForgeError::Metric(format!(
            "ablate_reconstruct: latent {bad} out of range for width {}",
            params.width
        )));
    }
    let h = params.encode(&x, EncodeMode::Infer)?;
    let mut out = x.to_owned();
    for r in 0..x.nrows() {
        for &j in &set {
            let hj = h[[r, j]];
            if hj != 0.0 {
                let col = params.w_d.column(j);
                let mut row = out.row_mut(r);
                row.scaled_add(-hj, &col);
            }
        }
    }
    Ok(out)
}
