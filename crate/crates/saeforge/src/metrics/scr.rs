//! Spurious Correlation Removal. A classifier trained on a biased partition
//! (class and spurious attribute perfectly aligned) leans on the spurious
//! signal; SCR measures how much of the lost balanced-set accuracy comes back
//! when the latents most attributed to the spurious signal are zero-ablated:
//! S_SHIFT = (A_abl − A_base) / (A_oracle − A_base).

use crate::error::{Result, SaeForgeError};
use crate::metrics::probe::{
    ablate_reconstruct, latent_attribution, mean_latents, probe_accuracy, train_probe,
    ProbeTrainConfig,
};
use crate::sae::SaeParams;
use crate::store::ActivationDataset;
use crate::util::shuffled_indices;
use serde::{Deserialize, Serialize};

/// Published k grid; callers may override.
pub const SCR_DEFAULT_KS: [usize; 6] = [5, 10, 20, 50, 100, 500];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrReport {
    pub class_column: String,
    pub spurious_column: String,
    /// The two class / spurious-attribute values the partitions are built on.
    pub classes: (u32, u32),
    pub spurious_values: (u32, u32),
    pub ks: Vec<usize>,
    pub s_shift_per_k: Vec<f64>,
    pub a_base: f64,
    pub a_oracle: f64,
    pub a_abl_per_k: Vec<f64>,
    pub n_biased: usize,
    pub n_balanced_train: usize,
    pub n_balanced_test: usize,
}

/// The SCR formula on its own:
/// S_SHIFT = (A_abl − A_base) / (A_oracle − A_base).
pub fn scr_shift(a_base: f64, a_abl: f64, a_oracle: f64) -> Result<f64> {
    let denom = a_oracle - a_base;
    if denom.abs() < 1e-12 {
        return Err(SaeForgeError::DegenerateTask(
            "degenerate task: A_oracle equals A_base, no headroom to recover".into(),
        ));
    }
    Ok((a_abl - a_base) / denom)
}

pub fn scr_eval(
    params: &SaeParams,
    ds: &ActivationDataset,
    class_column: &str,
    spurious_column: &str,
    ks: &[usize],
    cfg: &ProbeTrainConfig,
) -> Result<ScrReport> {
    let class_col = ds.label(class_column)?;
    let spur_col = ds.label(spurious_column)?;
    let c_classes = class_col.concept_classes();
    let s_classes = spur_col.concept_classes();
    if c_classes.len() < 2 || s_classes.len() < 2 {
        return Err(SaeForgeError::DegenerateTask(format!(
            "SCR needs two class and two spurious values; '{class_column}' has {}, \
             '{spurious_column}' has {}",
            c_classes.len(),
            s_classes.len()
        )));
    }
    let (c0, c1) = (c_classes[0], c_classes[1]);
    let (s0, s1) = (s_classes[0], s_classes[1]);

    // Bucket usable rows into the four (class, spurious) cells, then shuffle
    // each cell deterministically so partition membership is order-free.
    let mut cells: [Vec<usize>; 4] = Default::default();
    for i in ds.usable_rows() {
        let c = class_col.values[i];
        let s = spur_col.values[i];
        let slot = match ((c == c0, c == c1), (s == s0, s == s1)) {
            ((true, _), (true, _)) => 0,  // c0 ∧ s0 (aligned)
            ((true, _), (_, true)) => 1,  // c0 ∧ s1
            ((_, true), (true, _)) => 2,  // c1 ∧ s0
            ((_, true), (_, true)) => 3,  // c1 ∧ s1 (aligned)
            _ => continue,
        };
        cells[slot].push(i);
    }
    for (idx, cell) in cells.iter_mut().enumerate() {
        let order = shuffled_indices(cell.len(), cfg.seed, &format!("scr-cell-{idx}"));
        *cell = order.into_iter().map(|j| cell[j]).collect();
    }

    // Aligned cells contribute their first half to the biased partition and
    // the rest to the balanced pool, keeping the partitions disjoint.
    let (bias0, pool0) = cells[0].split_at(cells[0].len() / 2);
    let (bias3, pool3) = cells[3].split_at(cells[3].len() / 2);
    let n_biased_per_cell = bias0.len().min(bias3.len());
    let pools: [&[usize]; 4] = [pool0, &cells[1], &cells[2], pool3];
    let m = pools.iter().map(|p| p.len()).min().unwrap();
    if n_biased_per_cell < 5 || m < 5 {
        return Err(SaeForgeError::TooFewRows {
            metric: "scr_eval",
            needed: 5,
            have: n_biased_per_cell.min(m),
        });
    }

    let mut biased: Vec<usize> = Vec::new();
    biased.extend_from_slice(&bias0[..n_biased_per_cell]);
    biased.extend_from_slice(&bias3[..n_biased_per_cell]);

    let cut = m * 4 / 5;
    let mut bal_train: Vec<usize> = Vec::new();
    let mut bal_test: Vec<usize> = Vec::new();
    for pool in pools {
        bal_train.extend_from_slice(&pool[..cut]);
        bal_test.extend_from_slice(&pool[cut..m]);
    }

    let x_biased = super::gather_rows(ds, &biased);
    let x_train = super::gather_rows(ds, &bal_train);
    let x_test = super::gather_rows(ds, &bal_test);
    let class_targets = |rows: &[usize]| -> Vec<bool> {
        rows.iter().map(|&i| class_col.values[i] == c1).collect()
    };
    let spur_targets: Vec<bool> = bal_train.iter().map(|&i| spur_col.values[i] == s1).collect();

    // C_b: the biased classifier under repair.
    let c_b = train_probe(x_biased.view(), &class_targets(&biased), cfg)?;
    // Oracle: same architecture, trained on unbiased data.
    let oracle = train_probe(x_train.view(), &class_targets(&bal_train), cfg)?;
    // Spurious-attribute probe drives the attribution ranking.
    let spur_probe = train_probe(x_train.view(), &spur_targets, cfg)?;

    let y_test = class_targets(&bal_test);
    let a_base = probe_accuracy(&c_b, x_test.view(), &y_test);
    let a_oracle = probe_accuracy(&oracle, x_test.view(), &y_test);

    let mean_h = mean_latents(params, x_train.view())?;
    let scores = latent_attribution(&spur_probe, params, mean_h.view())?;
    let mut ranked: Vec<usize> = (0..params.width).collect();
    ranked.sort_by(|&a, &b| scores[b].abs().total_cmp(&scores[a].abs()).then(a.cmp(&b)));

    let mut a_abl_per_k = Vec::with_capacity(ks.len());
    let mut s_shift_per_k = Vec::with_capacity(ks.len());
    for &k in ks {
        let chosen = &ranked[..k.min(params.width)];
        let ablated = ablate_reconstruct(params, x_test.view(), chosen)?;
        let a_abl = probe_accuracy(&c_b, ablated.view(), &y_test);
        a_abl_per_k.push(a_abl);
        s_shift_per_k.push(scr_shift(a_base, a_abl, a_oracle)?);
    }

    Ok(ScrReport {
        class_column: class_column.to_string(),
        spurious_column: spurious_column.to_string(),
        classes: (c0, c1),
        spurious_values: (s0, s1),
        ks: ks.to_vec(),
        s_shift_per_k,
        a_base,
        a_oracle,
        a_abl_per_k,
        n_biased: biased.len(),
        n_balanced_train: bal_train.len(),
        n_balanced_test: bal_test.len(),
    })
}
