//! Training loop: initialization, Adam, schedules, decoder-norm maintenance,
//! checkpointing, dead-latent tracking, and λ→L0 targeting.
//!
//! Determinism contract: given (seed, config, data) the run is bit-exact,
//! including across resume. Resume restores the parameter/optimizer state
//! from the checkpoint and replays the buffer's sampling history to put the
//! data stream, reservoir contents, and RNG back where they were; replay is
//! pure bookkeeping (no gradient math), so it costs a small fraction of the
//! steps it skips.

mod adam;
mod schedule;

pub use adam::Adam;
pub use schedule::{lr_at, sparsity_at};

use crate::error::{Result, SaeForgeError};
use crate::sae::{
    calibrate_batchtopk_threshold, loss_and_grads, write_checkpoint, ArchKind, ArchSpec,
    Checkpoint, EncodeMode, ExtraGrads, SaeGrads, SaeParams,
};
use crate::store::{estimate_norm_scale_from_source, ActivationBuffer, RowSource};
use crate::util::rng_for;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

// ── Configuration ───────────────────────────────────────────────────────────

/// Hyperparameters of one training run. The reference recipe is lr 3e-4 with
/// a 1000-step warmup, λ warmup over 5000 steps, decay over the final 20% of
/// steps, batch 2048 and 500M rows; the defaults here keep every schedule
/// constant but shrink the totals to desk scale (10k steps × batch 256).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total row draws for the run; steps = total_tokens / batch_size.
    pub total_tokens: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_warmup_steps: u64,
    pub sparsity_warmup_steps: u64,
    /// Final fraction of steps over which lr decays linearly to 0.
    pub lr_decay_fraction: f64,
    pub buffer_capacity: usize,
    pub seed: u64,
    /// L0 targets for sweep grids (k directly for the k-architectures,
    /// λ-bisection for the penalized ones).
    pub target_l0: Vec<u32>,
    /// Completed-update counts at which to write resumable checkpoints.
    pub checkpoint_steps: Vec<u64>,
    /// Rows used to estimate the activation norm scale before training.
    pub norm_sample_rows: usize,
    pub log_interval: u64,
    /// Batches drawn after training to calibrate BatchTopK-style thresholds.
    pub calibration_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_tokens: 2_560_000,
            batch_size: 256,
            lr: 3e-4,
            lr_warmup_steps: 1000,
            sparsity_warmup_steps: 5000,
            lr_decay_fraction: 0.2,
            buffer_capacity: 250_000,
            seed: 0,
            target_l0: vec![20, 40, 80, 160, 320, 640],
            checkpoint_steps: Vec::new(),
            norm_sample_rows: 100_000,
            log_interval: 200,
            calibration_batches: 8,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        self.total_tokens / self.batch_size as u64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key_path: &str, message: String| {
            Err(SaeForgeError::Config {
                key_path: key_path.into(),
                message,
            })
        };
        if self.batch_size == 0 {
            return bad("train.batch_size", "must be positive".into());
        }
        if self.buffer_capacity < self.batch_size {
            return bad(
                "train.buffer_capacity",
                format!(
                    "buffer ({}) must hold at least one batch ({})",
                    self.buffer_capacity, self.batch_size
                ),
            );
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("train.lr", format!("must be finite and positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.lr_decay_fraction) {
            return bad(
                "train.lr_decay_fraction",
                format!("must be in [0, 1), got {}", self.lr_decay_fraction),
            );
        }
        let total = self.total_steps();
        if total > 0 {
            if self.lr_warmup_steps >= total {
                return bad(
                    "train.lr_warmup_steps",
                    format!("warmup ({}) must be shorter than the run ({total})", self.lr_warmup_steps),
                );
            }
            if self.sparsity_warmup_steps >= total {
                return bad(
                    "train.sparsity_warmup_steps",
                    format!(
                        "warmup ({}) must be shorter than the run ({total})",
                        self.sparsity_warmup_steps
                    ),
                );
            }
            let decay_len = (total as f64 * self.lr_decay_fraction).round() as u64;
            if self.lr_warmup_steps > total - decay_len {
                return bad(
                    "train.lr_decay_fraction",
                    format!(
                        "decay window (last {decay_len} steps) overlaps the lr warmup ({})",
                        self.lr_warmup_steps
                    ),
                );
            }
        }
        Ok(())
    }

    /// Shorten the run to `steps` updates, scaling both warmups by the same
    /// fraction so the schedule keeps its shape (used for λ-search probes).
    ///
    /// The probe lr is scaled *up* by the inverse fraction: Adam moves each
    /// parameter by ≈ lr per step whatever the gradient magnitude, so a short
    /// probe at the original lr could not move weights far enough for λ to
    /// show up in L0 at all. Keeping `steps × lr` invariant preserves the full
    /// run's movement budget (capped at 1e-2 for stability).
    pub fn shortened(&self, steps: u64) -> TrainConfig {
        let total = self.total_steps().max(1);
        let scale = steps as f64 / total as f64;
        let mut cfg = self.clone();
        cfg.total_tokens = steps * self.batch_size as u64;
        cfg.lr = (self.lr / scale.max(f64::MIN_POSITIVE)).min(1e-2f64.max(self.lr));
        cfg.lr_warmup_steps = (self.lr_warmup_steps as f64 * scale).round() as u64;
        cfg.sparsity_warmup_steps = (self.sparsity_warmup_steps as f64 * scale).round() as u64;
        cfg.checkpoint_steps = Vec::new();
        cfg
    }
}

// ── Initialization ──────────────────────────────────────────────────────────

/// Fresh parameters: W_E Kaiming-uniform with fan-in scaling (bound 1/√d),
/// W_D = W_Eᵀ with columns renormalized to unit norm, zero biases, and
/// arch extras at neutral values (θ = 0.001·1 for JumpReLU, gates at 0,
/// uncalibrated inference thresholds).
pub fn init_params(arch: ArchSpec, d_model: usize, width: usize, seed: u64) -> SaeParams {
    let mut rng = rng_for(seed, "init");
    let mut params = SaeParams::zeros(d_model, width, neutral_extras(arch, width));
    let bound = 1.0 / (d_model as f64).sqrt();
    params.w_e.mapv_inplace(|_| rng.gen_range(-bound..bound));
    for j in 0..width {
        for i in 0..d_model {
            params.w_d[[i, j]] = params.w_e[[j, i]];
        }
    }
    params.renormalize_decoder_columns();
    params
}

fn neutral_extras(arch: ArchSpec, width: usize) -> ArchSpec {
    match arch {
        ArchSpec::JumpRelu {
            epsilon, lambda, ..
        } => ArchSpec::JumpRelu {
            theta: Array1::from_elem(width, 0.001),
            epsilon,
            lambda,
        },
        ArchSpec::Gated { lambda, .. } => ArchSpec::Gated {
            b_gate: Array1::zeros(width),
            r_mag: Array1::zeros(width),
            b_mag: Array1::zeros(width),
            lambda,
        },
        ArchSpec::BatchTopK { k, .. } => ArchSpec::BatchTopK {
            k,
            theta_infer: None,
        },
        ArchSpec::Matryoshka {
            k, group_boundaries, ..
        } => ArchSpec::Matryoshka {
            k,
            group_boundaries,
            theta_infer: None,
        },
        other => other,
    }
}

// ── Flat parameter vector (canonical order for Adam state) ─────────────────

fn param_count(p: &SaeParams) -> usize {
    let extras = match &p.arch {
        ArchSpec::JumpRelu { .. } => p.width,
        ArchSpec::Gated { .. } => 3 * p.width,
        _ => 0,
    };
    2 * p.width * p.d_model + p.width + p.d_model + extras
}

fn flatten_params(p: &SaeParams, out: &mut Vec<f64>) {
    out.clear();
    out.extend(p.w_e.iter());
    out.extend(p.b_e.iter());
    out.extend(p.w_d.iter());
    out.extend(p.b_d.iter());
    match &p.arch {
        ArchSpec::JumpRelu { theta, .. } => out.extend(theta.iter()),
        ArchSpec::Gated {
            b_gate,
            r_mag,
            b_mag,
            ..
        } => {
            out.extend(b_gate.iter());
            out.extend(r_mag.iter());
            out.extend(b_mag.iter());
        }
        _ => {}
    }
}

fn flatten_grads(g: &SaeGrads, out: &mut Vec<f64>) {
    out.clear();
    out.extend(g.w_e.iter());
    out.extend(g.b_e.iter());
    out.extend(g.w_d.iter());
    out.extend(g.b_d.iter());
    match &g.extra {
        ExtraGrads::None => {}
        ExtraGrads::JumpRelu { theta } => out.extend(theta.iter()),
        ExtraGrads::Gated {
            b_gate,
            r_mag,
            b_mag,
        } => {
            out.extend(b_gate.iter());
            out.extend(r_mag.iter());
            out.extend(b_mag.iter());
        }
    }
}

fn write_back(p: &mut SaeParams, flat: &[f64]) {
    let mut it = flat.iter();
    for v in p.w_e.iter_mut() {
        *v = *it.next().unwrap();
    }
    for v in p.b_e.iter_mut() {
        *v = *it.next().unwrap();
    }
    for v in p.w_d.iter_mut() {
        *v = *it.next().unwrap();
    }
    for v in p.b_d.iter_mut() {
        *v = *it.next().unwrap();
    }
    match &mut p.arch {
        ArchSpec::JumpRelu { theta, .. } => {
            for v in theta.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
        ArchSpec::Gated {
            b_gate,
            r_mag,
            b_mag,
            ..
        } => {
            for v in b_gate.iter_mut().chain(r_mag.iter_mut()).chain(b_mag.iter_mut()) {
                *v = *it.next().unwrap();
            }
        }
        _ => {}
    }
    debug_assert!(it.next().is_none(), "flat vector longer than parameters");
}

/// Remove the component of each decoder-column gradient parallel to the
/// column itself, so Adam's update cannot trade column norm against latent
/// scale (only applied to the unit-norm architectures).
fn project_decoder_grads(w_d: &Array2<f64>, g_wd: &mut Array2<f64>) {
    for j in 0..w_d.ncols() {
        let col = w_d.column(j);
        let norm_sq = col.dot(&col);
        if norm_sq == 0.0 {
            continue;
        }
        let scale = col.dot(&g_wd.column(j)) / norm_sq;
        let col = col.to_owned();
        g_wd.column_mut(j).scaled_add(-scale, &col);
    }
}

// ── The loop ────────────────────────────────────────────────────────────────

#[derive(serde::Serialize)]
struct LogRecord {
    step: u64,
    lr: f64,
    lambda_eff: f64,
    p_eff: f64,
    recon: f64,
    sparsity: f64,
    aux: f64,
    total: f64,
    l0: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Norm-folded (raw-input-space) parameters, thresholds calibrated.
    pub final_params: SaeParams,
    pub norm_scale: f64,
    /// Total loss at every executed step (starting at `start_step`).
    pub loss_by_step: Vec<f64>,
    pub start_step: u64,
    pub checkpoint_paths: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

/// Train from scratch. The source is rewound, sampled for norm estimation,
/// rewound again, and then feeds the shuffle buffer.
pub fn train<S: RowSource>(
    cfg: &TrainConfig,
    arch: ArchSpec,
    d_model: usize,
    width: usize,
    mut source: S,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if arch.kind() == ArchKind::Pca {
        return Err(SaeForgeError::NotTrainable {
            arch: "pca".into(),
            why: "fit it in closed form with pca_fit".into(),
        });
    }
    source.rewind()?;
    let norm_scale = estimate_norm_scale_from_source(&mut source, cfg.norm_sample_rows)?;
    source.rewind()?;
    let params = init_params(arch, d_model, width, cfg.seed);
    params.validate()?;
    let adam = Adam::new(param_count(&params));
    run_loop(cfg, params, adam, norm_scale, 0, source, out_dir)
}

/// Continue a run from an unfolded checkpoint; bit-exact with the
/// uninterrupted run over the same (seed, config, data).
pub fn resume<S: RowSource>(
    cfg: &TrainConfig,
    checkpoint: &Checkpoint,
    mut source: S,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if checkpoint.folded {
        return Err(SaeForgeError::Config {
            key_path: "resume.checkpoint".into(),
            message: "checkpoint is norm-folded; only unfolded checkpoints are resumable".into(),
        });
    }
    let blob = checkpoint.optimizer.as_ref().ok_or_else(|| SaeForgeError::Config {
        key_path: "resume.checkpoint".into(),
        message: "checkpoint carries no optimizer state".into(),
    })?;
    if blob.m.len() != param_count(&checkpoint.params) {
        return Err(SaeForgeError::Config {
            key_path: "resume.checkpoint".into(),
            message: format!(
                "optimizer state has {} entries but the model has {} parameters",
                blob.m.len(),
                param_count(&checkpoint.params)
            ),
        });
    }
    if checkpoint.step > cfg.total_steps() {
        return Err(SaeForgeError::Config {
            key_path: "resume.checkpoint".into(),
            message: format!(
                "checkpoint is at step {} but the run is only {} steps",
                checkpoint.step,
                cfg.total_steps()
            ),
        });
    }
    source.rewind()?;
    let norm_scale = estimate_norm_scale_from_source(&mut source, cfg.norm_sample_rows)?;
    if (norm_scale - checkpoint.norm_scale).abs() > 1e-9 * checkpoint.norm_scale.abs() {
        return Err(SaeForgeError::Config {
            key_path: "resume.checkpoint".into(),
            message: format!(
                "norm scale from this data ({norm_scale}) does not match the checkpoint ({}); \
                 resume needs the original dataset",
                checkpoint.norm_scale
            ),
        });
    }
    source.rewind()?;
    run_loop(
        cfg,
        checkpoint.params.clone(),
        Adam::from_blob(blob),
        checkpoint.norm_scale,
        checkpoint.step,
        source,
        out_dir,
    )
}

fn run_loop<S: RowSource>(
    cfg: &TrainConfig,
    mut params: SaeParams,
    mut adam: Adam,
    norm_scale: f64,
    start_step: u64,
    source: S,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| SaeForgeError::io(out_dir, e))?;
    let total = cfg.total_steps();
    let inv_scale = 1.0 / norm_scale;

    let mut buffer = ActivationBuffer::new(source, cfg.buffer_capacity, cfg.seed);
    // Replay the sampling history so stream position, reservoir contents, and
    // RNG state match the uninterrupted run exactly.
    for _ in 0..start_step {
        buffer.sample(cfg.batch_size)?;
    }

    let log_path = out_dir.join("train_log.jsonl");
    let log_file = File::create(&log_path).map_err(|e| SaeForgeError::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);

    let mut flat_params = Vec::new();
    let mut flat_grads = Vec::new();
    let mut loss_by_step = Vec::with_capacity((total - start_step) as usize);
    let mut checkpoint_paths = Vec::new();

    for step in start_step..total {
        let mut batch = buffer.sample(cfg.batch_size)?;
        batch.mapv_inplace(|v| v * inv_scale);

        let lr = lr_at(cfg, step);
        let sched = sparsity_at(cfg, &params.arch, step);
        let (loss, mut grads) = loss_and_grads(&params, &batch.view(), &sched)?;
        if !loss.total.is_finite() {
            return Err(SaeForgeError::NonFiniteLoss {
                step,
                recon: loss.recon,
                sparsity: loss.sparsity,
                aux: loss.aux,
            });
        }

        if params.arch.unit_decoder_columns() {
            project_decoder_grads(&params.w_d, &mut grads.w_d);
        }
        flatten_params(&params, &mut flat_params);
        flatten_grads(&grads, &mut flat_grads);
        adam.step(&mut flat_params, &flat_grads, lr);
        write_back(&mut params, &flat_params);
        if params.arch.unit_decoder_columns() {
            params.renormalize_decoder_columns();
        }

        loss_by_step.push(loss.total);
        let done = step + 1;

        if cfg.log_interval > 0 && (step % cfg.log_interval == 0 || done == total) {
            let h = params.encode(&batch.view(), EncodeMode::Train)?;
            let nonzero = h.iter().filter(|&&v| v != 0.0).count();
            let record = LogRecord {
                step,
                lr,
                lambda_eff: sched.lambda_eff,
                p_eff: sched.p_eff,
                recon: loss.recon,
                sparsity: loss.sparsity,
                aux: loss.aux,
                total: loss.total,
                l0: nonzero as f64 / batch.nrows() as f64,
            };
            let line = serde_json::to_string(&record).expect("log record serializes");
            writeln!(log, "{line}").map_err(|e| SaeForgeError::io(&log_path, e))?;
        }
        if done % 2000 == 0 {
            eprintln!(
                "[train] {} step {done}/{total} loss {:.6}",
                params.arch.kind(),
                loss.total
            );
        }

        if cfg.checkpoint_steps.contains(&done) {
            let path = out_dir.join(format!("step_{done:07}.saec"));
            write_checkpoint(
                &path,
                &Checkpoint {
                    params: params.clone(),
                    step: done,
                    norm_scale,
                    folded: false,
                    optimizer: Some(adam.to_blob()),
                },
            )?;
            checkpoint_paths.push(path);
        }
    }
    log.flush().map_err(|e| SaeForgeError::io(&log_path, e))?;

    // BatchTopK-style inference needs a threshold; calibrate on fresh batches.
    if matches!(
        params.arch,
        ArchSpec::BatchTopK { .. } | ArchSpec::Matryoshka { .. }
    ) {
        let mut batches = Vec::with_capacity(cfg.calibration_batches);
        for _ in 0..cfg.calibration_batches {
            let mut b = buffer.sample(cfg.batch_size)?;
            b.mapv_inplace(|v| v * inv_scale);
            batches.push(b);
        }
        calibrate_batchtopk_threshold(&mut params, &batches)?;
    }

    params.fold_norm_scale(norm_scale)?;
    let final_checkpoint = out_dir.join("final.saec");
    write_checkpoint(
        &final_checkpoint,
        &Checkpoint {
            params: params.clone(),
            step: total,
            norm_scale,
            folded: true,
            optimizer: None,
        },
    )?;

    Ok(TrainOutcome {
        final_params: params,
        norm_scale,
        loss_by_step,
        start_step,
        checkpoint_paths,
        final_checkpoint,
        log_path,
    })
}

// ── Dead-latent statistics ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DeadLatentStats {
    /// Fraction of rows on which each latent fires (h_j > 0).
    pub frequency: Array1<f64>,
    /// Fraction of latents that never fire.
    pub dead_fraction: f64,
    pub rows: usize,
}

/// Firing frequency per latent over `rows` (inference-mode encode, chunked to
/// bound memory).
pub fn dead_latent_stats(params: &SaeParams, rows: &ArrayView2<'_, f64>) -> Result<DeadLatentStats> {
    if rows.nrows() == 0 {
        return Err(SaeForgeError::InvalidDataset(
            "dead-latent stats need at least one row".into(),
        ));
    }
    let mut fired = vec![0usize; params.width];
    let chunk = 4096;
    let mut at = 0;
    while at < rows.nrows() {
        let end = (at + chunk).min(rows.nrows());
        let h = params.encode(&rows.slice(ndarray::s![at..end, ..]), EncodeMode::Infer)?;
        for row in h.axis_iter(Axis(0)) {
            for (j, &v) in row.iter().enumerate() {
                if v > 0.0 {
                    fired[j] += 1;
                }
            }
        }
        at = end;
    }
    let n = rows.nrows() as f64;
    let frequency = Array1::from_iter(fired.iter().map(|&c| c as f64 / n));
    let dead = fired.iter().filter(|&&c| c == 0).count();
    Ok(DeadLatentStats {
        frequency,
        dead_fraction: dead as f64 / params.width as f64,
        rows: rows.nrows(),
    })
}

// ── λ → target-L0 bisection ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LambdaFit {
    pub lambda: f64,
    pub achieved_l0: f64,
    /// Short training runs spent in the search.
    pub evaluations: usize,
}

/// Mean L0 of folded params on raw eval rows.
fn measured_l0(params: &SaeParams, eval_rows: &ArrayView2<'_, f64>) -> Result<f64> {
    let h = params.encode(eval_rows, EncodeMode::Infer)?;
    Ok(h.iter().filter(|&&v| v != 0.0).count() as f64 / eval_rows.nrows() as f64)
}

/// Pick λ for an L1-penalized architecture so that a short probe run lands
/// within ±20% of `target_l0`, by bisection on log λ (L0 is monotone
/// decreasing in λ). Probe runs are `search_steps` long with proportionally
/// scaled warmups; artifacts go to `scratch_dir`.
pub fn fit_lambda_for_target_l0<S: RowSource>(
    cfg: &TrainConfig,
    arch: &ArchSpec,
    d_model: usize,
    width: usize,
    source: &mut S,
    eval_rows: &ArrayView2<'_, f64>,
    target_l0: f64,
    search_steps: u64,
    scratch_dir: &Path,
) -> Result<LambdaFit> {
    if arch.lambda().is_none() {
        return Err(SaeForgeError::Unsupported {
            op: "lambda search",
            arch: arch.kind().name().into(),
        });
    }
    if !(target_l0 > 0.0 && target_l0 <= width as f64) {
        return Err(SaeForgeError::LambdaSearch(format!(
            "target L0 {target_l0} outside (0, width={width}]"
        )));
    }
    let short = cfg.shortened(search_steps);
    let mut evaluations = 0usize;
    let mut probe = |lambda: f64, source: &mut S| -> Result<f64> {
        let mut probe_arch = arch.clone();
        probe_arch.set_lambda(lambda);
        let outcome = train(&short, probe_arch, d_model, width, &mut *source, scratch_dir)?;
        evaluations += 1;
        let l0 = measured_l0(&outcome.final_params, eval_rows)?;
        eprintln!("[lambda-search] lambda {lambda:.6} -> L0 {l0:.2}");
        Ok(l0)
    };

    let within = |l0: f64| (l0 - target_l0).abs() <= 0.2 * target_l0;

    let (mut lo, mut hi) = (1e-4, 1.0);
    let mut l0_lo = probe(lo, source)?;
    if within(l0_lo) {
        return Ok(LambdaFit {
            lambda: lo,
            achieved_l0: l0_lo,
            evaluations,
        });
    }
    let mut l0_hi = probe(hi, source)?;
    if within(l0_hi) {
        return Ok(LambdaFit {
            lambda: hi,
            achieved_l0: l0_hi,
            evaluations,
        });
    }
    // Expand the bracket until the target is inside [L0(hi), L0(lo)].
    while l0_lo < target_l0 && lo > 1e-8 {
        lo /= 10.0;
        l0_lo = probe(lo, source)?;
        if within(l0_lo) {
            return Ok(LambdaFit { lambda: lo, achieved_l0: l0_lo, evaluations });
        }
    }
    while l0_hi > target_l0 && hi < 1e4 {
        hi *= 10.0;
        l0_hi = probe(hi, source)?;
        if within(l0_hi) {
            return Ok(LambdaFit { lambda: hi, achieved_l0: l0_hi, evaluations });
        }
    }
    if l0_lo < target_l0 || l0_hi > target_l0 {
        return Err(SaeForgeError::LambdaSearch(format!(
            "target L0 {target_l0} not bracketed: L0({lo:.2e}) = {l0_lo:.2}, L0({hi:.2e}) = {l0_hi:.2}"
        )));
    }

    let mut best = (lo, l0_lo);
    for _ in 0..14 {
        let mid = (lo * hi).sqrt(); // geometric midpoint of the λ bracket
        let l0_mid = probe(mid, source)?;
        if (l0_mid - target_l0).abs() < (best.1 - target_l0).abs() {
            best = (mid, l0_mid);
        }
        if within(l0_mid) {
            return Ok(LambdaFit {
                lambda: mid,
                achieved_l0: l0_mid,
                evaluations,
            });
        }
        if l0_mid > target_l0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(SaeForgeError::LambdaSearch(format!(
        "bisection did not reach ±20% of L0 {target_l0}; best λ {:.4e} gave L0 {:.2}",
        best.0, best.1
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{ActivationDataset, MemorySource};
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Dense toy activations: sparse nonnegative combinations of a fixed
    /// 3-feature dictionary in d = 8, plus small noise.
    fn toy_dataset(rows: usize, seed: u64) -> ActivationDataset {
        let dict = [
            [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Array2::<f32>::zeros((rows, 8));
        for mut row in data.axis_iter_mut(Axis(0)) {
            for feat in &dict {
                if rng.gen_range(0.0..1.0) < 0.4 {
                    let coeff = rng.gen_range(0.5..2.0) as f32;
                    for (o, &v) in row.iter_mut().zip(feat.iter()) {
                        *o += coeff * v as f32;
                    }
                }
            }
            for o in row.iter_mut() {
                *o += rng.gen_range(-0.01..0.01) as f32;
            }
        }
        ActivationDataset::bare(data)
    }

    fn tiny_cfg(steps: u64, batch: usize) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = batch;
        cfg.total_tokens = steps * batch as u64;
        cfg.lr_warmup_steps = steps / 10;
        cfg.sparsity_warmup_steps = steps / 2;
        cfg.buffer_capacity = 512;
        cfg.norm_sample_rows = 256;
        cfg.log_interval = 50;
        cfg.calibration_batches = 4;
        cfg
    }

    #[test]
    fn init_ties_decoder_to_encoder_transpose() {
        let p = init_params(ArchSpec::Relu { lambda: 0.1 }, 8, 16, 7);
        for j in 0..16 {
            let col = p.w_d.column(j);
            let row = p.w_e.row(j);
            let norm = row.dot(&row).sqrt();
            assert_abs_diff_eq!(col.dot(&col).sqrt(), 1.0, epsilon = 1e-12);
            for i in 0..8 {
                assert_abs_diff_eq!(col[i], row[i] / norm, epsilon = 1e-12);
            }
        }
        assert!(p.b_e.iter().all(|&v| v == 0.0));
        assert!(p.b_d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seed_deterministic_and_extras_are_neutral() {
        let arch = ArchSpec::JumpRelu {
            theta: Array1::zeros(0), // placeholder; init re-sizes extras
            epsilon: 0.001,
            lambda: 0.5,
        };
        let a = init_params(arch.clone(), 4, 8, 3);
        let b = init_params(arch.clone(), 4, 8, 3);
        let c = init_params(arch, 4, 8, 4);
        assert_eq!(a, b);
        assert_ne!(a.w_e, c.w_e);
        match &a.arch {
            ArchSpec::JumpRelu { theta, .. } => {
                assert!(theta.iter().all(|&t| t == 0.001));
                assert_eq!(theta.len(), 8);
            }
            _ => panic!("arch changed"),
        }
    }

    #[test]
    fn flat_roundtrip_covers_extras() {
        let mut p = init_params(
            ArchSpec::Gated {
                b_gate: Array1::zeros(0),
                r_mag: Array1::zeros(0),
                b_mag: Array1::zeros(0),
                lambda: 0.1,
            },
            4,
            6,
            1,
        );
        if let ArchSpec::Gated { b_gate, r_mag, b_mag, .. } = &mut p.arch {
            b_gate[2] = 0.5;
            r_mag[0] = -0.25;
            b_mag[5] = 1.5;
        }
        let mut flat = Vec::new();
        flatten_params(&p, &mut flat);
        assert_eq!(flat.len(), param_count(&p));
        let mut q = p.clone();
        q.w_e.fill(0.0);
        if let ArchSpec::Gated { b_gate, .. } = &mut q.arch {
            b_gate.fill(9.0);
        }
        write_back(&mut q, &flat);
        assert_eq!(q, p);
    }

    #[test]
    fn zero_step_run_returns_folded_init() {
        let ds = toy_dataset(512, 11);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(100, 32);
        cfg.total_tokens = 0;
        cfg.norm_sample_rows = 512;
        let outcome = train(
            &cfg,
            ArchSpec::Relu { lambda: 0.1 },
            8,
            16,
            MemorySource::new(&ds, true),
            dir.path(),
        )
        .unwrap();
        assert!(outcome.loss_by_step.is_empty());
        let mut expected = init_params(ArchSpec::Relu { lambda: 0.1 }, 8, 16, cfg.seed);
        expected.fold_norm_scale(outcome.norm_scale).unwrap();
        assert_eq!(outcome.final_params, expected);
        assert!(outcome.final_checkpoint.exists());
    }

    #[test]
    fn training_reduces_loss_and_keeps_decoder_columns_unit() {
        let ds = toy_dataset(2048, 5);
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(400, 32);
        let outcome = train(
            &cfg,
            ArchSpec::Relu { lambda: 0.01 },
            8,
            16,
            MemorySource::new(&ds, true),
            dir.path(),
        )
        .unwrap();
        let first: f64 = outcome.loss_by_step[..50].iter().sum::<f64>() / 50.0;
        let last: f64 = outcome.loss_by_step[350..].iter().sum::<f64>() / 50.0;
        assert!(
            last < first,
            "loss did not decrease: first-window {first}, last-window {last}"
        );
        // Folded params scale W_D by c, so check unit norms on the unfolded
        // training-space decoder: W_D_folded / c has unit columns.
        let c = outcome.norm_scale;
        for j in 0..16 {
            let col = outcome.final_params.w_d.column(j);
            assert_abs_diff_eq!(col.dot(&col).sqrt() / c, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn reruns_are_bit_identical() {
        let ds = toy_dataset(1024, 21);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(120, 32);
        let arch = ArchSpec::BatchTopK {
            k: 3,
            theta_infer: None,
        };
        let a = train(&cfg, arch.clone(), 8, 16, MemorySource::new(&ds, true), dir_a.path()).unwrap();
        let b = train(&cfg, arch, 8, 16, MemorySource::new(&ds, true), dir_b.path()).unwrap();
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(
            std::fs::read(&a.final_checkpoint).unwrap(),
            std::fs::read(&b.final_checkpoint).unwrap()
        );
        assert_eq!(
            std::fs::read(&a.log_path).unwrap(),
            std::fs::read(&b.log_path).unwrap()
        );
        // Calibration happened and folded into the final params.
        match a.final_params.arch {
            ArchSpec::BatchTopK { theta_infer, .. } => assert!(theta_infer.is_some()),
            _ => panic!("arch changed"),
        }
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run_bit_exactly() {
        let ds = toy_dataset(1024, 33);
        let cfg = {
            let mut c = tiny_cfg(150, 32);
            c.checkpoint_steps = vec![70];
            c
        };
        let arch = ArchSpec::JumpRelu {
            theta: Array1::zeros(0),
            epsilon: 0.001,
            lambda: 0.02,
        };

        let dir_full = tempfile::tempdir().unwrap();
        let full = train(
            &cfg,
            arch.clone(),
            8,
            16,
            MemorySource::new(&ds, true),
            dir_full.path(),
        )
        .unwrap();

        let dir_resumed = tempfile::tempdir().unwrap();
        let ckpt = crate::sae::read_checkpoint(&full.checkpoint_paths[0]).unwrap();
        assert_eq!(ckpt.step, 70);
        let resumed = resume(&cfg, &ckpt, MemorySource::new(&ds, true), dir_resumed.path()).unwrap();

        assert_eq!(resumed.final_params, full.final_params);
        assert_eq!(
            std::fs::read(&resumed.final_checkpoint).unwrap(),
            std::fs::read(&full.final_checkpoint).unwrap()
        );
        // The resumed loss trace must equal the tail of the full trace.
        assert_eq!(resumed.loss_by_step.as_slice(), &full.loss_by_step[70..]);
    }

    #[test]
    fn resume_refuses_folded_or_stateless_checkpoints() {
        let ds = toy_dataset(256, 2);
        let cfg = tiny_cfg(50, 16);
        let p = init_params(ArchSpec::Relu { lambda: 0.1 }, 8, 16, 0);
        let dir = tempfile::tempdir().unwrap();
        let folded = Checkpoint {
            params: p.clone(),
            step: 10,
            norm_scale: 1.0,
            folded: true,
            optimizer: Some(Adam::new(param_count(&p)).to_blob()),
        };
        assert!(resume(&cfg, &folded, MemorySource::new(&ds, true), dir.path()).is_err());
        let stateless = Checkpoint {
            params: p,
            step: 10,
            norm_scale: 1.0,
            folded: false,
            optimizer: None,
        };
        assert!(resume(&cfg, &stateless, MemorySource::new(&ds, true), dir.path()).is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_step_diagnostics() {
        // First rows are tame (norm estimation sees them); later rows are
        // non-finite, so the loss blows up once one reaches a batch.
        let mut data = Array2::<f32>::from_elem((64, 4), 0.5);
        for i in 8..64 {
            for j in 0..4 {
                data[[i, j]] = f32::INFINITY;
            }
        }
        let ds = ActivationDataset::bare(data);
        let mut cfg = tiny_cfg(40, 8);
        cfg.buffer_capacity = 16;
        cfg.norm_sample_rows = 8;
        let dir = tempfile::tempdir().unwrap();
        let err = train(
            &cfg,
            ArchSpec::Relu { lambda: 0.1 },
            4,
            8,
            MemorySource::new(&ds, true),
            dir.path(),
        )
        .unwrap_err();
        assert!(matches!(err, SaeForgeError::NonFiniteLoss { .. }), "got {err:?}");
    }

    #[test]
    fn dead_latent_stats_match_enumeration() {
        let mut p = SaeParams::zeros(2, 3, ArchSpec::Relu { lambda: 0.0 });
        p.w_e = arr2(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]);
        p.w_d = arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let rows = arr2(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let stats = dead_latent_stats(&p, &rows.view()).unwrap();
        assert_abs_diff_eq!(stats.frequency[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.frequency[1], 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(stats.frequency[2], 0.0);
        assert_abs_diff_eq!(stats.dead_fraction, 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn config_validation_rejects_overlapping_windows() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 256;
        cfg.total_tokens = 256 * 500; // 500 steps
        cfg.lr_warmup_steps = 600; // warmup longer than the run
        assert!(cfg.validate().is_err());

        cfg.lr_warmup_steps = 450; // inside the run but into the decay window
        cfg.sparsity_warmup_steps = 100;
        assert!(cfg.validate().is_err());

        cfg.lr_warmup_steps = 100;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn lambda_search_hits_target_within_tolerance() {
        let ds = toy_dataset(1024, 44);
        let eval = toy_dataset(256, 45);
        let eval_rows = eval.data.mapv(f64::from);
        let mut source = MemorySource::new(&ds, true);
        let cfg = tiny_cfg(200, 32);
        let dir = tempfile::tempdir().unwrap();
        let fit = fit_lambda_for_target_l0(
            &cfg,
            &ArchSpec::Relu { lambda: 0.0 },
            8,
            16,
            &mut source,
            &eval_rows.view(),
            3.0,
            120,
            dir.path(),
        )
        .unwrap();
        assert!(
            (fit.achieved_l0 - 3.0).abs() <= 0.6,
            "achieved L0 {} for lambda {}",
            fit.achieved_l0,
            fit.lambda
        );
    }
}
