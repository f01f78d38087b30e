//! Two-phase automated interpretability.
//!
//! Phase 1 (generation): for each sampled non-dead latent, show a judge its
//! top-activating sequences plus activation-weighted samples, with firing
//! tokens wrapped as `<<token>>`, and ask for an explanation.
//!
//! Phase 2 (detection): build a 14-item test set — 10 random sequences
//! (preferring ones where the latent never fires), 2 max-activating, and
//! 2 importance-weighted — shuffle it, and ask the judge to predict from the
//! explanation alone which sequences activate the latent. The latent's score
//! is the fraction of the 14 predictions matching the hidden firing flags;
//! the run's score is the mean over latents.
//!
//! Judges are pluggable ([`Judge`]): deterministic mocks for tests and CI,
//! or a chat-completion HTTP endpoint. Judge calls are sequential; the
//! aggregation is keyed by latent id, so a concurrent driver would produce
//! identical reports.
//!
//! Masked rows are dropped from a sequence's tokens and activations; fully
//! masked sequences leave every pool.

mod judge;

pub use judge::{
    AlwaysFiresJudge, Judge, KeywordMockJudge, OracleMockJudge, RemoteJudge, RemoteJudgeConfig,
};

use crate::error::{Result, SaeForgeError};
use crate::sae::{EncodeMode, SaeParams};
use crate::store::ActivationDataset;
use crate::util::{rng_for, shuffled_indices};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Detection test-set composition (random / max-activating / importance).
pub const RANDOM_ITEMS: usize = 10;
pub const MAX_ITEMS: usize = 2;
pub const IMPORTANCE_ITEMS: usize = 2;

/// Generation-phase example budget.
pub const EXAMPLE_TOP: usize = 5;
pub const EXAMPLE_SAMPLED: usize = 5;

/// Importance weights use each sequence's max activation (the paper leaves
/// the weighting unstated; the choice is recorded in every report).
pub const WEIGHT_CHOICE: &str = "max_activation";

/// Default latent sample size.
const DEFAULT_SAMPLE: usize = 1000;

// ── Sequence plumbing ───────────────────────────────────────────────────────

/// One sequence's usable rows.
struct SeqView {
    rows: Vec<usize>,
}

/// Sequence table over usable rows; autointerp requires sequence structure,
/// token ids, and a vocabulary.
fn sequence_table(ds: &ActivationDataset) -> Result<Vec<SeqView>> {
    let seq_lens = ds.seq_lens.as_ref().ok_or_else(|| {
        SaeForgeError::Metric("autointerp requires sequence structure (seq_lens)".into())
    })?;
    if ds.token_ids.is_none() || ds.vocab.is_none() {
        return Err(SaeForgeError::Metric(
            "autointerp requires token_ids and a vocabulary".into(),
        ));
    }
    let mut out = Vec::with_capacity(seq_lens.len());
    let mut start = 0usize;
    for &len in seq_lens {
        let rows: Vec<usize> = (start..start + len as usize)
            .filter(|&i| ds.is_usable(i))
            .collect();
        out.push(SeqView { rows });
        start += len as usize;
    }
    Ok(out)
}

fn seq_tokens(ds: &ActivationDataset, seq: &SeqView) -> Vec<String> {
    let ids = ds.token_ids.as_ref().expect("checked by sequence_table");
    let vocab = ds.vocab.as_ref().expect("checked by sequence_table");
    seq.rows.iter().map(|&i| vocab[ids[i] as usize].clone()).collect()
}

/// Latent activations on one sequence's usable rows.
fn seq_latent_acts(
    params: &SaeParams,
    ds: &ActivationDataset,
    seq: &SeqView,
    latent: usize,
) -> Result<Vec<f64>> {
    let x = crate::metrics::gather_rows(ds, &seq.rows);
    let h = params.encode(&x.view(), EncodeMode::Infer)?;
    Ok(h.column(latent).to_vec())
}

/// Per-sequence max activation for every latent (n_seq × width).
fn max_table(
    params: &SaeParams,
    ds: &ActivationDataset,
    seqs: &[SeqView],
) -> Result<Array2<f64>> {
    let mut maxes = Array2::zeros((seqs.len(), params.width));
    for (s, seq) in seqs.iter().enumerate() {
        if seq.rows.is_empty() {
            continue;
        }
        let x = crate::metrics::gather_rows(ds, &seq.rows);
        let h = params.encode(&x.view(), EncodeMode::Infer)?;
        for r in 0..h.nrows() {
            for j in 0..params.width {
                if h[[r, j]] > maxes[[s, j]] {
                    maxes[[s, j]] = h[[r, j]];
                }
            }
        }
    }
    Ok(maxes)
}

/// Weighted sampling without replacement; weight-0 entries are never drawn.
fn sample_proportional(
    weights: &[(usize, f64)],
    count: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut pool: Vec<(usize, f64)> =
        weights.iter().filter(|&&(_, w)| w > 0.0).copied().collect();
    let mut chosen = Vec::new();
    while chosen.len() < count && !pool.is_empty() {
        let total: f64 = pool.iter().map(|&(_, w)| w).sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = pool.len() - 1;
        for (i, &(_, w)) in pool.iter().enumerate() {
            u -= w;
            if u <= 0.0 {
                pick = i;
                break;
            }
        }
        chosen.push(pool.remove(pick).0);
    }
    chosen
}

// ── Formatting ──────────────────────────────────────────────────────────────

/// Wrap tokens with activation > 0 as `<<token>>`, space-joined.
pub fn format_highlighted(tokens: &[String], activations: &[f64]) -> Result<String> {
    if tokens.len() != activations.len() {
        return Err(SaeForgeError::ShapeMismatch {
            context: "format_highlighted",
            expected: format!("{} activations", tokens.len()),
            found: format!("{}", activations.len()),
        });
    }
    Ok(tokens
        .iter()
        .zip(activations)
        .map(|(t, &a)| if a > 0.0 { format!("<<{t}>>") } else { t.clone() })
        .collect::<Vec<_>>()
        .join(" "))
}

// ── Example collection (generation phase) ───────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleSequence {
    pub seq_index: usize,
    pub tokens: Vec<String>,
    pub activations: Vec<f64>,
    pub max_activation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentExampleSet {
    pub latent: usize,
    /// Highest-max-activation sequences, ties by sequence index.
    pub top_sequences: Vec<ExampleSequence>,
    /// Drawn from the remainder with probability ∝ max activation.
    pub sampled_sequences: Vec<ExampleSequence>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExampleCounts {
    pub top: usize,
    pub sampled: usize,
}

impl Default for ExampleCounts {
    fn default() -> Self {
        ExampleCounts { top: EXAMPLE_TOP, sampled: EXAMPLE_SAMPLED }
    }
}

/// Sequence indices ordered by (max activation desc, index asc).
fn ranked_sequences(maxes_col: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..maxes_col.len()).collect();
    idx.sort_by(|&a, &b| maxes_col[b].total_cmp(&maxes_col[a]).then(a.cmp(&b)));
    idx
}

fn example_sequence(
    params: &SaeParams,
    ds: &ActivationDataset,
    seqs: &[SeqView],
    latent: usize,
    s: usize,
) -> Result<ExampleSequence> {
    let activations = seq_latent_acts(params, ds, &seqs[s], latent)?;
    let max_activation = activations.iter().copied().fold(0.0, f64::max);
    Ok(ExampleSequence {
        seq_index: s,
        tokens: seq_tokens(ds, &seqs[s]),
        activations,
        max_activation,
    })
}

/// Generation-phase example selection. `Ok(None)` = dead latent, skip it.
pub fn collect_examples(
    params: &SaeParams,
    ds: &ActivationDataset,
    latent: usize,
    counts: ExampleCounts,
    seed: u64,
) -> Result<Option<LatentExampleSet>> {
    let seqs = sequence_table(ds)?;
    let maxes = max_table(params, ds, &seqs)?;
    let col: Vec<f64> = maxes.column(latent).to_vec();
    collect_examples_from(params, ds, &seqs, &col, latent, counts, seed)
}

fn collect_examples_from(
    params: &SaeParams,
    ds: &ActivationDataset,
    seqs: &[SeqView],
    maxes_col: &[f64],
    latent: usize,
    counts: ExampleCounts,
    seed: u64,
) -> Result<Option<LatentExampleSet>> {
    if latent >= params.width {
        return Err(SaeForgeError::Metric(format!(
            "latent {latent} out of range for width {}",
            params.width
        )));
    }
    if !maxes_col.iter().any(|&m| m > 0.0) {
        return Ok(None);
    }
    let ranked = ranked_sequences(maxes_col);
    let top_idx: Vec<usize> = ranked
        .iter()
        .copied()
        .filter(|&s| maxes_col[s] > 0.0)
        .take(counts.top)
        .collect();
    let remainder: Vec<(usize, f64)> = ranked
        .iter()
        .copied()
        .filter(|s| !top_idx.contains(s))
        .map(|s| (s, maxes_col[s]))
        .collect();
    let mut rng = rng_for(seed, &format!("autointerp-sample-{latent}"));
    let sampled_idx = sample_proportional(&remainder, counts.sampled, &mut rng);

    let mut top_sequences = Vec::with_capacity(top_idx.len());
    for &s in &top_idx {
        top_sequences.push(example_sequence(params, ds, seqs, latent, s)?);
    }
    let mut sampled_sequences = Vec::with_capacity(sampled_idx.len());
    for &s in &sampled_idx {
        sampled_sequences.push(example_sequence(params, ds, seqs, latent, s)?);
    }
    Ok(Some(LatentExampleSet { latent, top_sequences, sampled_sequences }))
}

// ── Detection test set ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ItemKind {
    Random,
    MaxActivating,
    ImportanceWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionItem {
    pub seq_index: usize,
    pub tokens: Vec<String>,
    /// Hidden ground truth: the latent fires above 0 somewhere in the
    /// sequence. Present so oracle mocks can exist; honest judges must only
    /// read `tokens`.
    pub fires: bool,
    pub kind: ItemKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionTestSet {
    pub latent: usize,
    /// Shuffled items; 10 random + 2 max-activating + 2 importance-weighted
    /// when supply permits.
    pub items: Vec<DetectionItem>,
    /// True when the composition is not the full 10/2/2.
    pub degraded: bool,
}

pub fn build_detection_set(
    params: &SaeParams,
    ds: &ActivationDataset,
    latent: usize,
    seed: u64,
) -> Result<DetectionTestSet> {
    let seqs = sequence_table(ds)?;
    let maxes = max_table(params, ds, &seqs)?;
    let col: Vec<f64> = maxes.column(latent).to_vec();
    build_detection_set_from(ds, &seqs, &col, latent, seed)
}

fn build_detection_set_from(
    ds: &ActivationDataset,
    seqs: &[SeqView],
    maxes_col: &[f64],
    latent: usize,
    seed: u64,
) -> Result<DetectionTestSet> {
    let live: Vec<usize> = (0..seqs.len()).filter(|&s| !seqs[s].rows.is_empty()).collect();
    let ranked: Vec<usize> = {
        let mut idx = live.clone();
        idx.sort_by(|&a, &b| maxes_col[b].total_cmp(&maxes_col[a]).then(a.cmp(&b)));
        idx
    };
    let mut taken = vec![false; seqs.len()];
    let mut items: Vec<DetectionItem> = Vec::new();
    let mut push = |s: usize, kind: ItemKind, taken: &mut Vec<bool>| {
        taken[s] = true;
        items.push(DetectionItem {
            seq_index: s,
            tokens: seq_tokens(ds, &seqs[s]),
            fires: maxes_col[s] > 0.0,
            kind,
        });
    };

    // 2 max-activating (only genuinely firing sequences qualify).
    for &s in ranked.iter().filter(|&&s| maxes_col[s] > 0.0).take(MAX_ITEMS) {
        push(s, ItemKind::MaxActivating, &mut taken);
    }
    // 2 importance-weighted from the rest.
    let pool: Vec<(usize, f64)> = ranked
        .iter()
        .copied()
        .filter(|&s| !taken[s])
        .map(|s| (s, maxes_col[s]))
        .collect();
    let mut rng = rng_for(seed, &format!("autointerp-importance-{latent}"));
    for s in sample_proportional(&pool, IMPORTANCE_ITEMS, &mut rng) {
        push(s, ItemKind::ImportanceWeighted, &mut taken);
    }
    // 10 random, preferring sequences where the latent never fires.
    let mut quiet: Vec<usize> =
        live.iter().copied().filter(|&s| !taken[s] && maxes_col[s] == 0.0).collect();
    let mut loud: Vec<usize> =
        live.iter().copied().filter(|&s| !taken[s] && maxes_col[s] > 0.0).collect();
    let quiet_order = shuffled_indices(quiet.len(), seed, &format!("autointerp-random-{latent}"));
    quiet = quiet_order.into_iter().map(|i| quiet[i]).collect();
    let loud_order = shuffled_indices(loud.len(), seed, &format!("autointerp-fill-{latent}"));
    loud = loud_order.into_iter().map(|i| loud[i]).collect();
    for s in quiet.into_iter().chain(loud).take(RANDOM_ITEMS) {
        push(s, ItemKind::Random, &mut taken);
    }

    let degraded = items.len() != RANDOM_ITEMS + MAX_ITEMS + IMPORTANCE_ITEMS
        || items.iter().filter(|i| i.kind == ItemKind::Random).count() != RANDOM_ITEMS
        || items.iter().filter(|i| i.kind == ItemKind::MaxActivating).count() != MAX_ITEMS
        || items.iter().filter(|i| i.kind == ItemKind::ImportanceWeighted).count()
            != IMPORTANCE_ITEMS;

    // Shuffle so positional cues carry no information.
    let order = shuffled_indices(items.len(), seed, &format!("autointerp-shuffle-{latent}"));
    let items = order.into_iter().map(|i| items[i].clone()).collect();
    Ok(DetectionTestSet { latent, items, degraded })
}

// ── The pipeline ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentInterpRecord {
    pub latent: usize,
    pub accuracy: f64,
    pub explanation: String,
    pub degraded_test_set: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutointerpReport {
    /// Mean detection accuracy over successfully judged latents.
    pub mean_accuracy: f64,
    pub evaluated: usize,
    pub non_dead: usize,
    /// Latents whose judge calls failed after bounded retries.
    pub failed: Vec<usize>,
    /// Importance-weighting convention used (see [`WEIGHT_CHOICE`]).
    pub weight_choice: String,
    pub latents: Vec<LatentInterpRecord>,
}

/// Run the two-phase pipeline over `min(sample_size, non-dead)` latents
/// (default sample size 1000). Judge failures exclude the latent from the
/// mean but are counted in the report.
pub fn run_autointerp(
    params: &SaeParams,
    ds: &ActivationDataset,
    judge: &dyn Judge,
    sample_size: Option<usize>,
    seed: u64,
) -> Result<AutointerpReport> {
    let seqs = sequence_table(ds)?;
    let maxes = max_table(params, ds, &seqs)?;

    let non_dead: Vec<usize> = (0..params.width)
        .filter(|&j| maxes.column(j).iter().any(|&m| m > 0.0))
        .collect();
    if non_dead.is_empty() {
        return Err(SaeForgeError::DegenerateTask(
            "autointerp needs at least one non-dead latent".into(),
        ));
    }
    let n = sample_size.unwrap_or(DEFAULT_SAMPLE).min(non_dead.len()).max(1);
    let order = shuffled_indices(non_dead.len(), seed, "autointerp-latents");
    let mut chosen: Vec<usize> = order[..n].iter().map(|&i| non_dead[i]).collect();
    chosen.sort_unstable();

    let mut records = Vec::new();
    let mut failed = Vec::new();
    for (done, &latent) in chosen.iter().enumerate() {
        let col: Vec<f64> = maxes.column(latent).to_vec();
        let examples = collect_examples_from(
            params,
            ds,
            &seqs,
            &col,
            latent,
            ExampleCounts::default(),
            seed,
        )?
        .expect("latent is non-dead");
        let test_set = build_detection_set_from(ds, &seqs, &col, latent, seed)?;
        let outcome = judge.propose(latent, &examples).and_then(|explanation| {
            let predictions = judge.detect(&explanation, &test_set.items)?;
            if predictions.len() != test_set.items.len() {
                return Err(SaeForgeError::Judge {
                    attempts: 1,
                    message: format!(
                        "judge returned {} predictions for {} items",
                        predictions.len(),
                        test_set.items.len()
                    ),
                });
            }
            Ok((explanation, predictions))
        });
        match outcome {
            Ok((explanation, predictions)) => {
                let hits = predictions
                    .iter()
                    .zip(&test_set.items)
                    .filter(|(p, item)| **p == item.fires)
                    .count();
                records.push(LatentInterpRecord {
                    latent,
                    accuracy: hits as f64 / test_set.items.len() as f64,
                    explanation,
                    degraded_test_set: test_set.degraded,
                });
            }
            Err(e) => {
                eprintln!("autointerp: latent {latent} failed: {e}");
                failed.push(latent);
            }
        }
        if (done + 1) % 100 == 0 {
            eprintln!("autointerp: {}/{} latents judged", done + 1, chosen.len());
        }
    }
    if records.is_empty() {
        return Err(SaeForgeError::Judge {
            attempts: chosen.len() as u32,
            message: "every sampled latent failed judging".into(),
        });
    }
    let mean_accuracy =
        records.iter().map(|r| r.accuracy).sum::<f64>() / records.len() as f64;
    Ok(AutointerpReport {
        mean_accuracy,
        evaluated: records.len(),
        non_dead: non_dead.len(),
        failed,
        weight_choice: WEIGHT_CHOICE.to_string(),
        latents: records,
    })
}
