//! Feature absorption. For each labeled concept, a ground-truth logistic
//! probe on raw activations defines the feature direction p; k-sparse probing
//! on the SAE's latents picks the "main" latents for the concept. A test row
//! is absorbed to the extent that latents outside the main set carry the
//! projection of the row onto p:
//!
//!   score = Σ_abs / (Σ_abs + Σ_main),  Σ_· = Σ h_i (d_i · p)
//!
//! counted only where the main set undershoots the model projection
//! (condition 2) and the absorbing candidates clear τ_pa (condition 3).
//! The report carries the complement (1 − mean), higher = healthier.

use crate::error::{Result, SaeForgeError};
use crate::metrics::probe::{
    probe_f1, select_topk_mean_diff, train_probe, ProbeTrainConfig,
};
use crate::sae::{EncodeMode, SaeParams};
use crate::store::ActivationDataset;
use crate::util::shuffled_indices;
use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

/// Published absorption hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbsorptionConfig {
    /// Minimum F1 gain for admitting the next k-sparse latent to the main set.
    pub tau_fs: f64,
    /// Minimum joint absorber share of the model projection (condition 3).
    pub tau_pa: f64,
    /// Minimum cosine between an absorber's decoder column and the probe.
    pub tau_ps: f64,
    /// Cap on the number of absorbing latents; `None` = dictionary size.
    pub a_max: Option<usize>,
    /// Upper bound on the k-sparse probing sweep.
    pub max_k: usize,
    pub probe: ProbeTrainConfig,
    /// Seed for the per-concept subsample/split shuffles.
    pub seed: u64,
}

impl Default for AbsorptionConfig {
    fn default() -> Self {
        AbsorptionConfig {
            tau_fs: 0.03,
            tau_pa: 0.0,
            tau_ps: -1.0,
            a_max: None,
            max_k: 10,
            probe: ProbeTrainConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptAbsorption {
    pub concept: u32,
    /// Probe-correct positive test rows — the denominator of `mean`.
    pub rows_scored: usize,
    /// Rows additionally meeting conditions 2–3 (nonzero-score candidates).
    pub qualifying_rows: usize,
    pub main_latents: Vec<usize>,
    /// Mean score over all probe-correct positive test rows.
    pub mean: f64,
    /// Mean over qualifying rows only (0 when none qualify).
    pub mean_over_qualifying: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionReport {
    pub column: String,
    /// Macro-average of the per-concept means.
    pub mean_absorption: f64,
    /// 1 − mean_absorption, the headline number (higher = healthier).
    pub complement: f64,
    pub per_concept: Vec<ConceptAbsorption>,
    /// Concepts dropped for lack of rows or probe-correct test rows.
    pub skipped_concepts: Vec<u32>,
}

/// Per-concept minimum positive/negative count before the metric is defined.
const MIN_SIDE_ROWS: usize = 10;

pub fn absorption_eval(
    params: &SaeParams,
    ds: &ActivationDataset,
    column: &str,
    cfg: &AbsorptionConfig,
) -> Result<AbsorptionReport> {
    if cfg.tau_fs < 0.0 || cfg.max_k == 0 {
        return Err(SaeForgeError::Metric(
            "absorption config requires tau_fs ≥ 0 and max_k ≥ 1".into(),
        ));
    }
    let col = ds.label(column)?;
    let concepts = col.concept_classes();
    if concepts.is_empty() {
        return Err(SaeForgeError::DegenerateTask(format!(
            "label column '{column}' has no concept classes"
        )));
    }
    let a_max = cfg.a_max.unwrap_or(params.width).max(1);

    let mut per_concept = Vec::new();
    let mut skipped_concepts = Vec::new();
    for &c in &concepts {
        match eval_concept(params, ds, col, c, cfg, a_max)? {
            Some(outcome) => per_concept.push(outcome),
            None => skipped_concepts.push(c),
        }
    }
    if per_concept.is_empty() {
        return Err(SaeForgeError::DegenerateTask(format!(
            "every concept of '{column}' was skipped; absorption undefined"
        )));
    }
    let mean_absorption =
        per_concept.iter().map(|p| p.mean).sum::<f64>() / per_concept.len() as f64;
    Ok(AbsorptionReport {
        column: column.to_string(),
        mean_absorption,
        complement: 1.0 - mean_absorption,
        per_concept,
        skipped_concepts,
    })
}

fn eval_concept(
    params: &SaeParams,
    ds: &ActivationDataset,
    col: &crate::store::LabelColumn,
    concept: u32,
    cfg: &AbsorptionConfig,
    a_max: usize,
) -> Result<Option<ConceptAbsorption>> {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for i in ds.usable_rows() {
        if col.values[i] == concept {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    // Balance 1:1, deterministically subsampling the larger side.
    let m = pos.len().min(neg.len());
    if m < MIN_SIDE_ROWS {
        eprintln!(
            "absorption: concept {concept} of '{}' has only {m} balanced rows, skipping",
            col.name
        );
        return Ok(None);
    }
    for (side, rows) in [("pos", &mut pos), ("neg", &mut neg)] {
        let order = shuffled_indices(rows.len(), cfg.seed, &format!("abs-{side}-{concept}"));
        *rows = order.into_iter().take(m).map(|j| rows[j]).collect();
    }
    let cut = m * 4 / 5;
    let train_rows: Vec<usize> =
        pos[..cut].iter().chain(neg[..cut].iter()).copied().collect();
    let test_rows: Vec<usize> = pos[cut..].iter().chain(neg[cut..].iter()).copied().collect();
    let y_train: Vec<bool> = train_rows.iter().map(|&i| col.values[i] == concept).collect();

    let x_train = super::gather_rows(ds, &train_rows);
    let x_test = super::gather_rows(ds, &test_rows);
    let probe = train_probe(x_train.view(), &y_train, &cfg.probe)?;

    let h_train = params.encode(&x_train.view(), EncodeMode::Infer)?;
    let h_test = params.encode(&x_test.view(), EncodeMode::Infer)?;

    // k-sparse probing sweep: keep admitting the next-ranked latent while it
    // buys more than τ_fs of train-split F1.
    let ranking = select_topk_mean_diff(
        h_train.view(),
        &y_train,
        cfg.max_k.min(params.width),
    )?;
    let mut main_latents = vec![ranking[0]];
    let mut prev_f1 = {
        let sub = h_train.select(Axis(1), &ranking[..1]);
        let p = train_probe(sub.view(), &y_train, &cfg.probe)?;
        probe_f1(&p, sub.view(), &y_train)
    };
    for k in 2..=ranking.len() {
        let sub = h_train.select(Axis(1), &ranking[..k]);
        let p = train_probe(sub.view(), &y_train, &cfg.probe)?;
        let f1 = probe_f1(&p, sub.view(), &y_train);
        if f1 > prev_f1 + cfg.tau_fs {
            main_latents.push(ranking[k - 1]);
            prev_f1 = f1;
        } else {
            break;
        }
    }

    // Precompute each latent's projection onto the probe direction and its
    // cosine with it.
    let proj: Array1<f64> = probe.w.dot(&params.w_d);
    let w_norm = probe.w.dot(&probe.w).sqrt();
    let cos: Vec<f64> = (0..params.width)
        .map(|j| {
            let col_norm = params.w_d.column(j).dot(&params.w_d.column(j)).sqrt();
            if w_norm < 1e-12 || col_norm < 1e-12 {
                0.0
            } else {
                proj[j] / (w_norm * col_norm)
            }
        })
        .collect();
    let in_main = {
        let mut v = vec![false; params.width];
        for &j in &main_latents {
            v[j] = true;
        }
        v
    };

    let mut rows_scored = 0usize;
    let mut qualifying_rows = 0usize;
    let mut score_sum = 0.0;
    for (t, &row) in test_rows.iter().enumerate() {
        if col.values[row] != concept {
            continue; // absorption is defined on the concept's own examples
        }
        let x = x_test.row(t);
        // Condition 1: the ground-truth probe gets the row right.
        if !probe.predict(x) {
            continue;
        }
        rows_scored += 1;

        let model_proj = probe.w.dot(&x);
        let h = h_test.row(t);
        let main_sum: f64 = main_latents.iter().map(|&j| h[j] * proj[j]).sum();
        // Condition 2: the main set undershoots the model projection.
        if main_sum >= model_proj {
            continue;
        }
        // Condition 3: top-A_max candidate absorbers jointly clear τ_pa.
        let mut candidates: Vec<(f64, usize)> = (0..params.width)
            .filter(|&j| !in_main[j] && cos[j] >= cfg.tau_ps)
            .filter_map(|j| {
                let contrib = h[j] * proj[j];
                (contrib > 0.0).then_some((contrib, j))
            })
            .collect();
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        candidates.truncate(a_max);
        let abs_sum: f64 = candidates.iter().map(|(v, _)| v).sum();
        if abs_sum < cfg.tau_pa * model_proj {
            continue;
        }
        // Degenerate denominators (main mass net-negative beyond the
        // absorbers) score 0 and do not qualify.
        if abs_sum + main_sum <= 0.0 {
            continue;
        }
        qualifying_rows += 1;
        score_sum += abs_sum / (abs_sum + main_sum);
    }

    if rows_scored == 0 {
        eprintln!(
            "absorption: concept {concept} of '{}' has no probe-correct test rows, skipping",
            col.name
        );
        return Ok(None);
    }
    Ok(Some(ConceptAbsorption {
        concept,
        rows_scored,
        qualifying_rows,
        main_latents,
        mean: score_sum / rows_scored as f64,
        mean_over_qualifying: if qualifying_rows == 0 {
            0.0
        } else {
            score_sum / qualifying_rows as f64
        },
    }))
}
