//! Dictionary models: the seven trainable architectures plus the PCA baseline.
//!
//! Every model shares one parameter container ([`SaeParams`]):
//!
//! ```text
//!   encode:  h = act(W_E x + b_E)        W_E: F×d   b_E: F
//!   decode:  x̂ = W_D h + b_D             W_D: d×F   b_D: d
//! ```
//!
//! with `act` determined by the architecture:
//!
//! * ReLU / P-anneal —  h = ReLU(u)
//! * TopK            —  z = ReLU(u); keep the k largest per row (ties → lower index)
//! * BatchTopK       —  training: keep the B·k largest of z across the batch;
//!                      inference: h_j = z_j · [z_j > θ_infer]
//! * JumpReLU        —  h_j = u_j · [u_j > θ_j]   (no ReLU on u)
//! * Gated           —  z = W_E x (no b_E);
//!                      h_j = [z_j + b_gate_j > 0] · ReLU(z_j e^{r_mag_j} + b_mag_j)
//! * Matryoshka      —  BatchTopK selection over the full width; the loss
//!                      reconstructs every prefix group (see `loss`)
//! * PCA             —  linear pass, no nonlinearity (baseline; not trainable)
//!
//! Per-latent trainable extras (θ for JumpReLU; b_gate/r_mag/b_mag for Gated)
//! live inside [`ArchSpec`] so a checkpoint is a single self-describing object.

mod checkpoint;
mod loss;
mod pca;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, OptimizerBlob};
pub use loss::{loss_and_grads, ExtraGrads, LossBreakdown, SaeGrads, SparsitySchedule};
pub use pca::pca_fit;

use crate::error::{Result, SaeForgeError};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

/// Architecture discriminant (no parameters), used for CLI names and tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Relu,
    TopK,
    BatchTopK,
    JumpRelu,
    Gated,
    PAnneal,
    Matryoshka,
    Pca,
}

impl ArchKind {
    pub const ALL: [ArchKind; 8] = [
        ArchKind::Relu,
        ArchKind::TopK,
        ArchKind::BatchTopK,
        ArchKind::JumpRelu,
        ArchKind::Gated,
        ArchKind::PAnneal,
        ArchKind::Matryoshka,
        ArchKind::Pca,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Relu => "relu",
            ArchKind::TopK => "topk",
            ArchKind::BatchTopK => "batchtopk",
            ArchKind::JumpRelu => "jumprelu",
            ArchKind::Gated => "gated",
            ArchKind::PAnneal => "panneal",
            ArchKind::Matryoshka => "matryoshka",
            ArchKind::Pca => "pca",
        }
    }
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ArchKind {
    type Err = SaeForgeError;
    fn from_str(s: &str) -> Result<Self> {
        ArchKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SaeForgeError::Config {
                key_path: "arch".into(),
                message: format!(
                    "unknown architecture {s:?}; expected one of {}",
                    ArchKind::ALL.map(|k| k.name()).join(", ")
                ),
            })
    }
}

/// Architecture tag plus its hyperparameters and per-latent trainable extras.
#[derive(Debug, Clone, PartialEq)]
pub enum ArchSpec {
    Relu {
        lambda: f64,
    },
    TopK {
        k: usize,
    },
    BatchTopK {
        k: usize,
        /// Inference threshold; `None` until calibrated.
        theta_infer: Option<f64>,
    },
    JumpRelu {
        /// Per-latent firing thresholds (trainable).
        theta: Array1<f64>,
        /// Straight-through rectangle-kernel width.
        epsilon: f64,
        lambda: f64,
    },
    Gated {
        b_gate: Array1<f64>,
        r_mag: Array1<f64>,
        b_mag: Array1<f64>,
        lambda: f64,
    },
    PAnneal {
        lambda: f64,
        p_start: f64,
        p_end: f64,
    },
    Matryoshka {
        k: usize,
        /// Strictly increasing prefix widths; the last equals the full width.
        group_boundaries: Vec<usize>,
        theta_infer: Option<f64>,
    },
    Pca,
}

impl ArchSpec {
    pub fn kind(&self) -> ArchKind {
        match self {
            ArchSpec::Relu { .. } => ArchKind::Relu,
            ArchSpec::TopK { .. } => ArchKind::TopK,
            ArchSpec::BatchTopK { .. } => ArchKind::BatchTopK,
            ArchSpec::JumpRelu { .. } => ArchKind::JumpRelu,
            ArchSpec::Gated { .. } => ArchKind::Gated,
            ArchSpec::PAnneal { .. } => ArchKind::PAnneal,
            ArchSpec::Matryoshka { .. } => ArchKind::Matryoshka,
            ArchSpec::Pca => ArchKind::Pca,
        }
    }

    /// Architectures whose decoder columns are pinned to unit norm during
    /// training (the L1-penalized ones, where column norm trades off against
    /// latent magnitude).
    pub fn unit_decoder_columns(&self) -> bool {
        matches!(self, ArchSpec::Relu { .. } | ArchSpec::PAnneal { .. })
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            ArchSpec::Relu { lambda }
            | ArchSpec::JumpRelu { lambda, .. }
            | ArchSpec::Gated { lambda, .. }
            | ArchSpec::PAnneal { lambda, .. } => Some(*lambda),
            _ => None,
        }
    }

    pub fn set_lambda(&mut self, value: f64) {
        match self {
            ArchSpec::Relu { lambda }
            | ArchSpec::JumpRelu { lambda, .. }
            | ArchSpec::Gated { lambda, .. }
            | ArchSpec::PAnneal { lambda, .. } => *lambda = value,
            _ => {}
        }
    }

    /// Sparsity is set by an explicit k rather than a penalty.
    pub fn k(&self) -> Option<usize> {
        match self {
            ArchSpec::TopK { k }
            | ArchSpec::BatchTopK { k, .. }
            | ArchSpec::Matryoshka { k, .. } => Some(*k),
            _ => None,
        }
    }

    /// Default Matryoshka prefix widths for a dictionary of `width` latents:
    /// {width/16, width/4, width}, deduplicated, each at least 1.
    pub fn default_group_boundaries(width: usize) -> Vec<usize> {
        let mut b = vec![(width / 16).max(1), (width / 4).max(1), width];
        b.dedup();
        b.retain(|&x| x >= 1);
        let mut out: Vec<usize> = Vec::new();
        for x in b {
            if out.last().map_or(true, |&l| x > l) {
                out.push(x);
            }
        }
        if out.last() != Some(&width) {
            out.push(width);
        }
        out
    }
}

/// How BatchTopK-style architectures activate: batch-global selection during
/// training, per-row thresholding at inference. All other architectures behave
/// identically in both modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    Train,
    Infer,
}

/// Full parameter set of one dictionary model.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    pub d_model: usize,
    /// Dictionary width F.
    pub width: usize,
    /// F × d encoder weights.
    pub w_e: Array2<f64>,
    /// F encoder bias.
    pub b_e: Array1<f64>,
    /// d × F decoder weights (columns are latent directions).
    pub w_d: Array2<f64>,
    /// d decoder bias.
    pub b_d: Array1<f64>,
    pub arch: ArchSpec,
}

impl SaeParams {
    /// Zero-initialized container with the right shapes (callers fill it in).
    pub fn zeros(d_model: usize, width: usize, arch: ArchSpec) -> Self {
        SaeParams {
            d_model,
            width,
            w_e: Array2::zeros((width, d_model)),
            b_e: Array1::zeros(width),
            w_d: Array2::zeros((d_model, width)),
            b_d: Array1::zeros(d_model),
            arch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (f, d) = (self.width, self.d_model);
        let shape_err = |context: &'static str, expected: String, found: String| {
            Err(SaeForgeError::ShapeMismatch {
                context,
                expected,
                found,
            })
        };
        if self.w_e.dim() != (f, d) {
            return shape_err("w_e", format!("{f}×{d}"), format!("{:?}", self.w_e.dim()));
        }
        if self.b_e.len() != f {
            return shape_err("b_e", f.to_string(), self.b_e.len().to_string());
        }
        if self.w_d.dim() != (d, f) {
            return shape_err("w_d", format!("{d}×{f}"), format!("{:?}", self.w_d.dim()));
        }
        if self.b_d.len() != d {
            return shape_err("b_d", d.to_string(), self.b_d.len().to_string());
        }
        match &self.arch {
            ArchSpec::TopK { k } | ArchSpec::BatchTopK { k, .. } => {
                if *k == 0 || *k > f {
                    return Err(SaeForgeError::InvalidDataset(format!(
                        "k = {k} outside 1..={f}"
                    )));
                }
            }
            ArchSpec::JumpRelu { theta, epsilon, .. } => {
                if theta.len() != f {
                    return shape_err("theta", f.to_string(), theta.len().to_string());
                }
                if *epsilon <= 0.0 {
                    return Err(SaeForgeError::InvalidDataset(
                        "JumpReLU epsilon must be positive".into(),
                    ));
                }
            }
            ArchSpec::Gated {
                b_gate,
                r_mag,
                b_mag,
                ..
            } => {
                for (name, v) in [("b_gate", b_gate), ("r_mag", r_mag), ("b_mag", b_mag)] {
                    if v.len() != f {
                        return shape_err("gated extras", format!("{name} of len {f}"), v.len().to_string());
                    }
                }
            }
            ArchSpec::PAnneal { p_start, p_end, .. } => {
                if !(0.0 < *p_end && *p_end <= *p_start && *p_start <= 1.0) {
                    return Err(SaeForgeError::InvalidDataset(format!(
                        "p-anneal schedule needs 0 < p_end <= p_start <= 1, got {p_start} → {p_end}"
                    )));
                }
            }
            ArchSpec::Matryoshka {
                k,
                group_boundaries,
                ..
            } => {
                if *k == 0 || *k > f {
                    return Err(SaeForgeError::InvalidDataset(format!(
                        "k = {k} outside 1..={f}"
                    )));
                }
                let increasing = group_boundaries.windows(2).all(|w| w[0] < w[1]);
                if group_boundaries.is_empty()
                    || !increasing
                    || *group_boundaries.last().unwrap() != f
                    || group_boundaries[0] == 0
                {
                    return Err(SaeForgeError::InvalidDataset(format!(
                        "group boundaries {group_boundaries:?} must be strictly increasing and end at {f}"
                    )));
                }
            }
            ArchSpec::Relu { .. } | ArchSpec::Pca => {}
        }
        Ok(())
    }

    /// Linear pre-activations `W_E x + b_E` (the Gated gate path omits `b_E`).
    fn preactivations(&self, x: &ArrayView2<'_, f64>) -> Array2<f64> {
        let mut u = x.dot(&self.w_e.t());
        if !matches!(self.arch, ArchSpec::Gated { .. }) {
            u += &self.b_e;
        }
        crate::util::standard_layout(u)
    }

    /// Encode a batch of rows (B × d) into latent activations (B × F).
    pub fn encode(&self, x: &ArrayView2<'_, f64>, mode: EncodeMode) -> Result<Array2<f64>> {
        if x.ncols() != self.d_model {
            return Err(SaeForgeError::ShapeMismatch {
                context: "encode input",
                expected: format!("B×{}", self.d_model),
                found: format!("{:?}", x.dim()),
            });
        }
        let mut z = self.preactivations(x);
        match &self.arch {
            ArchSpec::Pca => Ok(z),
            ArchSpec::Relu { .. } | ArchSpec::PAnneal { .. } => {
                z.mapv_inplace(|v| v.max(0.0));
                Ok(z)
            }
            ArchSpec::TopK { k } => {
                z.mapv_inplace(|v| v.max(0.0));
                for mut row in z.axis_iter_mut(Axis(0)) {
                    let keep = top_indices(row.as_slice().expect("row is contiguous"), *k);
                    let mut kept = vec![false; row.len()];
                    for &i in &keep {
                        kept[i] = true;
                    }
                    for (j, v) in row.iter_mut().enumerate() {
                        if !kept[j] {
                            *v = 0.0;
                        }
                    }
                }
                Ok(z)
            }
            ArchSpec::BatchTopK { k, theta_infer }
            | ArchSpec::Matryoshka { k, theta_infer, .. } => {
                z.mapv_inplace(|v| v.max(0.0));
                match mode {
                    EncodeMode::Train => {
                        apply_batch_topk(&mut z, *k);
                        Ok(z)
                    }
                    EncodeMode::Infer => {
                        let theta = theta_infer.ok_or(SaeForgeError::UncalibratedThreshold)?;
                        z.mapv_inplace(|v| if v > theta { v } else { 0.0 });
                        Ok(z)
                    }
                }
            }
            ArchSpec::JumpRelu { theta, .. } => {
                for mut row in z.axis_iter_mut(Axis(0)) {
                    for (v, &t) in row.iter_mut().zip(theta.iter()) {
                        if *v <= t {
                            *v = 0.0;
                        }
                    }
                }
                Ok(z)
            }
            ArchSpec::Gated {
                b_gate,
                r_mag,
                b_mag,
                ..
            } => {
                for mut row in z.axis_iter_mut(Axis(0)) {
                    for (j, v) in row.iter_mut().enumerate() {
                        let gate_open = *v + b_gate[j] > 0.0;
                        let mag = (*v * r_mag[j].exp() + b_mag[j]).max(0.0);
                        *v = if gate_open { mag } else { 0.0 };
                    }
                }
                Ok(z)
            }
        }
    }

    /// Decode latent activations (B × F) back to model space (B × d).
    pub fn decode(&self, h: &ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if h.ncols() != self.width {
            return Err(SaeForgeError::ShapeMismatch {
                context: "decode input",
                expected: format!("B×{}", self.width),
                found: format!("{:?}", h.dim()),
            });
        }
        let mut xhat = h.dot(&self.w_d.t());
        xhat += &self.b_d;
        Ok(xhat)
    }

    /// Encode-then-decode in inference mode.
    pub fn reconstruct(&self, x: &ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let h = self.encode(x, EncodeMode::Infer)?;
        self.decode(&h.view())
    }

    /// Fold a data normalization constant `c` into the weights so the folded
    /// model acts on raw activations:
    ///
    /// ```text
    ///   W_E ← W_E / c      W_D ← c · W_D      b_D ← c · b_D
    /// ```
    ///
    /// `b_E`, thresholds, and gates are untouched: pre-activations of the
    /// folded model on `x` equal those of the unfolded model on `x / c`, so
    /// every gate/threshold comparison is preserved exactly and
    /// `decode'(encode'(x)) = c · decode(encode(x / c))`.
    pub fn fold_norm_scale(&mut self, c: f64) -> Result<()> {
        if !(c.is_finite() && c > 0.0) {
            return Err(SaeForgeError::InvalidDataset(format!(
                "norm scale must be finite and positive, got {c}"
            )));
        }
        self.w_e.mapv_inplace(|v| v / c);
        self.w_d.mapv_inplace(|v| v * c);
        self.b_d.mapv_inplace(|v| v * c);
        Ok(())
    }

    /// Renormalize every decoder column to unit L2 norm. Zero-norm columns are
    /// left untouched; their indices are returned for dead-latent bookkeeping.
    pub fn renormalize_decoder_columns(&mut self) -> Vec<usize> {
        let mut zero_cols = Vec::new();
        for j in 0..self.width {
            let mut col = self.w_d.column_mut(j);
            let norm = col.dot(&col).sqrt();
            if norm == 0.0 {
                zero_cols.push(j);
            } else {
                col.mapv_inplace(|v| v / norm);
            }
        }
        zero_cols
    }
}

/// Indices of the `k` largest strictly-positive values, ties broken toward the
/// lower index. Returns fewer than `k` when there are not enough positives.
pub(crate) fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut cands: Vec<usize> = (0..values.len()).filter(|&i| values[i] > 0.0).collect();
    let m = k.min(cands.len());
    if m == 0 {
        return Vec::new();
    }
    if m < cands.len() {
        cands.select_nth_unstable_by(m - 1, |&a, &b| {
            values[b]
                .partial_cmp(&values[a])
                .expect("pre-activations are finite")
                .then(a.cmp(&b))
        });
        cands.truncate(m);
    }
    cands
}

/// Batch-global top-(B·k) selection over strictly positive entries of `z`,
/// ties broken toward the lower row-major index. Entries not selected are
/// zeroed in place.
fn apply_batch_topk(z: &mut Array2<f64>, k: usize) {
    let (b, f) = z.dim();
    let budget = b * k;
    let flat = z.as_slice_mut().expect("z is standard layout");
    let mut cands: Vec<u32> = (0..flat.len() as u32)
        .filter(|&i| flat[i as usize] > 0.0)
        .collect();
    if cands.len() > budget {
        cands.select_nth_unstable_by(budget - 1, |&a, &b| {
            flat[b as usize]
                .partial_cmp(&flat[a as usize])
                .expect("pre-activations are finite")
                .then(a.cmp(&b))
        });
        cands.truncate(budget);
    }
    let mut keep = vec![false; flat.len()];
    for &i in &cands {
        keep[i as usize] = true;
    }
    for (i, v) in flat.iter_mut().enumerate() {
        if !keep[i] {
            *v = 0.0;
        }
    }
    debug_assert_eq!(f * b, keep.len());
}

/// θ_infer calibration for BatchTopK-style models: the mean over calibration
/// batches of the minimum pre-activation value that batch-global selection
/// kept. Stores the result into the arch and returns it.
pub fn calibrate_batchtopk_threshold(
    params: &mut SaeParams,
    batches: &[Array2<f64>],
) -> Result<f64> {
    let k = match &params.arch {
        ArchSpec::BatchTopK { k, .. } | ArchSpec::Matryoshka { k, .. } => *k,
        other => {
            return Err(SaeForgeError::Unsupported {
                op: "calibrate_batchtopk_threshold",
                arch: other.kind().to_string(),
            })
        }
    };
    let mut mins = Vec::new();
    for batch in batches {
        let mut z = params.preactivations(&batch.view());
        z.mapv_inplace(|v| v.max(0.0));
        apply_batch_topk(&mut z, k);
        let min_selected = z
            .iter()
            .filter(|&&v| v > 0.0)
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_selected.is_finite() {
            mins.push(min_selected);
        }
    }
    if mins.is_empty() {
        return Err(SaeForgeError::InvalidDataset(
            "threshold calibration selected nothing on any batch".into(),
        ));
    }
    let theta = mins.iter().sum::<f64>() / mins.len() as f64;
    match &mut params.arch {
        ArchSpec::BatchTopK { theta_infer, .. } | ArchSpec::Matryoshka { theta_infer, .. } => {
            *theta_infer = Some(theta)
        }
        _ => unreachable!(),
    }
    Ok(theta)
}

/// Mean per-group reconstruction errors for a Matryoshka model: entry `g` is
/// `mean ‖x − (W_D[:, :g] h[:g] + b_D)‖²` over the batch. Exposed for the
/// prefix-monotonicity check (full width should beat every prefix).
pub fn matryoshka_group_mse(params: &SaeParams, x: &ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let boundaries = match &params.arch {
        ArchSpec::Matryoshka {
            group_boundaries, ..
        } => group_boundaries.clone(),
        other => {
            return Err(SaeForgeError::Unsupported {
                op: "matryoshka_group_mse",
                arch: other.kind().to_string(),
            })
        }
    };
    let h = params.encode(x, EncodeMode::Infer)?;
    let b = x.nrows() as f64;
    let mut out = Vec::with_capacity(boundaries.len());
    for &g in &boundaries {
        let xhat = h.slice(s![.., ..g]).dot(&params.w_d.slice(s![.., ..g]).t()) + &params.b_d;
        let err = (&xhat - x).mapv(|v| v * v).sum() / b;
        out.push(err);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2};

    fn identity_params(d: usize, arch: ArchSpec) -> SaeParams {
        let mut p = SaeParams::zeros(d, d, arch);
        for i in 0..d {
            p.w_e[[i, i]] = 1.0;
            p.w_d[[i, i]] = 1.0;
        }
        p
    }

    #[test]
    fn topk_keeps_two_largest_of_three() {
        // z = (3, 1, 2), k = 2 → (3, 0, 2)
        let p = identity_params(3, ArchSpec::TopK { k: 2 });
        let x = arr2(&[[3.0, 1.0, 2.0]]);
        let h = p.encode(&x.view(), EncodeMode::Infer).unwrap();
        assert_eq!(h, arr2(&[[3.0, 0.0, 2.0]]));
    }

    #[test]
    fn topk_breaks_ties_toward_lower_index() {
        let p = identity_params(3, ArchSpec::TopK { k: 1 });
        let x = arr2(&[[2.0, 2.0, 2.0]]);
        let h = p.encode(&x.view(), EncodeMode::Infer).unwrap();
        assert_eq!(h, arr2(&[[2.0, 0.0, 0.0]]));
    }

    #[test]
    fn topk_row_has_exactly_min_k_positive_nonzeros() {
        let p = identity_params(4, ArchSpec::TopK { k: 3 });
        // Only two positive pre-activations: row gets two nonzeros, not three.
        let x = arr2(&[[1.0, -5.0, 0.5, -0.1]]);
        let h = p.encode(&x.view(), EncodeMode::Infer).unwrap();
        let nnz = h.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nnz, 2);
    }

    #[test]
    fn batch_topk_selects_global_budget() {
        let p = identity_params(3, ArchSpec::BatchTopK { k: 1, theta_infer: None });
        // Batch of 2 → budget 2; the two largest positives sit in row 0.
        let x = arr2(&[[5.0, 4.0, 0.0], [1.0, 0.5, 0.2]]);
        let h = p.encode(&x.view(), EncodeMode::Train).unwrap();
        assert_eq!(h, arr2(&[[5.0, 4.0, 0.0], [0.0, 0.0, 0.0]]));
        let nnz = h.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nnz, 2);
    }

    #[test]
    fn batch_topk_inference_requires_calibration() {
        let p = identity_params(3, ArchSpec::BatchTopK { k: 1, theta_infer: None });
        let x = arr2(&[[1.0, 0.0, 0.0]]);
        assert!(matches!(
            p.encode(&x.view(), EncodeMode::Infer),
            Err(SaeForgeError::UncalibratedThreshold)
        ));
    }

    #[test]
    fn batch_topk_inference_thresholds_per_row() {
        let p = identity_params(3, ArchSpec::BatchTopK { k: 1, theta_infer: Some(0.5) });
        let x = arr2(&[[0.4, 0.6, 0.5]]);
        let h = p.encode(&x.view(), EncodeMode::Infer).unwrap();
        // Strict: z > θ keeps only 0.6 (0.5 is not > 0.5).
        assert_eq!(h, arr2(&[[0.0, 0.6, 0.0]]));
    }

    #[test]
    fn jumprelu_with_zero_theta_equals_relu() {
        let p = identity_params(2, ArchSpec::JumpRelu {
            theta: arr1(&[0.0, 0.0]),
            epsilon: 0.001,
            lambda: 0.1,
        });
        let x = arr2(&[[0.5, -0.3]]);
        let h = p.encode(&x.view(), EncodeMode::Infer).unwrap();
        assert_eq!(h, arr2(&[[0.5, 0.0]]));
    }

    #[test]
    fn jumprelu_threshold_is_strict() {
        let p = identity_params(2, ArchSpec::JumpRelu {
            theta: arr1(&[1.0, 1.0]),
            epsilon: 0.001,
            lambda: 0.1,
        });
        let x = arr2(&[[1.0, 1.5]]);
        let h = p.encode(&x.view(), EncodeMode::Infer).unwrap();
        assert_eq!(h, arr2(&[[0.0, 1.5]]));
    }

    #[test]
    fn gated_gate_and_magnitude_paths() {
        // z = x (identity encoder). gate: z + b_gate > 0; mag: ReLU(z·e^r + b_mag)
        let p = identity_params(2, ArchSpec::Gated {
            b_gate: arr1(&[-1.0, 0.5]),
            r_mag: arr1(&[2.0f64.ln(), 0.0]),
            b_mag: arr1(&[0.25, -0.2]),
            lambda: 0.1,
        });
        let x = arr2(&[[2.0, -0.4]]);
        let h = p.encode(&x.view(), EncodeMode::Infer).unwrap();
        // latent 0: gate 2-1>0 open, mag = 2·2+0.25 = 4.25
        // latent 1: gate -0.4+0.5>0 open, mag = ReLU(-0.4-0.2) = 0
        assert_abs_diff_eq!(h[[0, 0]], 4.25, epsilon = 1e-12);
        assert_abs_diff_eq!(h[[0, 1]], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pca_encode_is_linear() {
        let p = identity_params(2, ArchSpec::Pca);
        let x = arr2(&[[-1.5, 2.0]]);
        let h = p.encode(&x.view(), EncodeMode::Infer).unwrap();
        assert_eq!(h, x); // identity W_E, zero b_E, no nonlinearity
    }

    #[test]
    fn decode_matches_brute_force() {
        let mut p = SaeParams::zeros(2, 3, ArchSpec::Relu { lambda: 0.0 });
        p.w_d = arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        p.b_d = arr1(&[0.5, -0.5]);
        let h = arr2(&[[1.0, 0.0, 2.0]]);
        let xhat = p.decode(&h.view()).unwrap();
        // hand: [1·1 + 2·0 + 3·2 + 0.5, 4·1 + 5·0 + 6·2 − 0.5] = [7.5, 15.5]
        assert_abs_diff_eq!(xhat[[0, 0]], 7.5, epsilon = 1e-12);
        assert_abs_diff_eq!(xhat[[0, 1]], 15.5, epsilon = 1e-12);
    }

    #[test]
    fn fold_norm_scale_identity() {
        // decode'(encode'(x)) must equal c · decode(encode(x / c)) exactly,
        // for an architecture with thresholds (the sharp case).
        let mut p = SaeParams::zeros(2, 3, ArchSpec::JumpRelu {
            theta: arr1(&[0.1, 0.2, 0.05]),
            epsilon: 0.001,
            lambda: 0.1,
        });
        p.w_e = arr2(&[[0.3, -0.8], [1.1, 0.4], [-0.2, 0.9]]);
        p.b_e = arr1(&[0.05, -0.1, 0.2]);
        p.w_d = arr2(&[[0.5, -0.3, 0.8], [0.2, 0.7, -0.6]]);
        p.b_d = arr1(&[0.1, -0.2]);

        let c = 3.7;
        let x = arr2(&[[1.2, -0.7], [0.0, 2.5], [-3.0, 0.4]]);
        let x_scaled = x.mapv(|v| v / c);
        let unfolded = p.reconstruct(&x_scaled.view()).unwrap().mapv(|v| v * c);

        let mut folded = p.clone();
        folded.fold_norm_scale(c).unwrap();
        let direct = folded.reconstruct(&x.view()).unwrap();
        for (a, b) in direct.iter().zip(unfolded.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn renormalize_makes_unit_columns_and_flags_zeros() {
        let mut p = SaeParams::zeros(2, 2, ArchSpec::Relu { lambda: 0.0 });
        p.w_d = arr2(&[[3.0, 0.0], [4.0, 0.0]]);
        let zero_cols = p.renormalize_decoder_columns();
        assert_abs_diff_eq!(p.w_d[[0, 0]], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(p.w_d[[1, 0]], 0.8, epsilon = 1e-12);
        assert_eq!(zero_cols, vec![1]);
        assert_eq!(p.w_d[[0, 1]], 0.0);
    }

    #[test]
    fn calibration_averages_batch_minima() {
        let mut p = identity_params(2, ArchSpec::BatchTopK { k: 1, theta_infer: None });
        // Batch 1 selects {0.9, 0.4} (budget 2) → min 0.4
        // Batch 2 selects {1.0, 0.6} → min 0.6
        let b1 = arr2(&[[0.9, 0.1], [0.4, 0.2]]);
        let b2 = arr2(&[[1.0, 0.6], [0.1, 0.05]]);
        let theta = calibrate_batchtopk_threshold(&mut p, &[b1, b2]).unwrap();
        assert_abs_diff_eq!(theta, 0.5, epsilon = 1e-12);
        match p.arch {
            ArchSpec::BatchTopK { theta_infer, .. } => {
                assert_abs_diff_eq!(theta_infer.unwrap(), 0.5, epsilon = 1e-12)
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn calibration_rejects_wrong_arch() {
        let mut p = identity_params(2, ArchSpec::TopK { k: 1 });
        assert!(matches!(
            calibrate_batchtopk_threshold(&mut p, &[arr2(&[[1.0, 0.0]])]),
            Err(SaeForgeError::Unsupported { .. })
        ));
    }

    #[test]
    fn default_boundaries_cover_paper_shape() {
        assert_eq!(ArchSpec::default_group_boundaries(128), vec![8, 32, 128]);
        assert_eq!(ArchSpec::default_group_boundaries(16), vec![1, 4, 16]);
        // Degenerate small widths stay strictly increasing.
        assert_eq!(ArchSpec::default_group_boundaries(4), vec![1, 4]);
        assert_eq!(ArchSpec::default_group_boundaries(1), vec![1]);
    }

    #[test]
    fn validate_rejects_bad_shapes_and_ranges() {
        let p = SaeParams::zeros(2, 3, ArchSpec::TopK { k: 4 });
        assert!(p.validate().is_err()); // k > width
        let p = SaeParams::zeros(2, 3, ArchSpec::Matryoshka {
            k: 1,
            group_boundaries: vec![2, 2, 3],
            theta_infer: None,
        });
        assert!(p.validate().is_err()); // not strictly increasing
        let mut p = SaeParams::zeros(2, 3, ArchSpec::Relu { lambda: 0.0 });
        p.b_e = arr1(&[0.0; 4]);
        assert!(p.validate().is_err()); // b_e wrong length
    }
}
