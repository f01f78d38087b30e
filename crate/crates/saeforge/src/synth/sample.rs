//! Dataset sampling from a [`GroundTruthModel`].
//!
//! Row `i` is a pure function of `(model, i)`: a per-row RNG is derived from
//! the model seed and the row counter, and every draw the row makes comes
//! from that RNG in a fixed order (one firing uniform per feature in
//! ascending order, magnitudes for fired features in ascending order, noise,
//! label flip). Rows therefore never depend on `n` or on generation order.
//!
//! Indicator features (those referenced by `concept_map`/`spurious_map`) take
//! their firing draw at *sequence* scope from a per-sequence RNG — every row
//! of a sequence shares the concept, the way every token of a biography
//! shares the subject's profession — so labels are constant within a
//! sequence and mean-pooled probing is well-posed. Magnitudes still vary per
//! row. (The row RNG draws a uniform for every feature regardless, keeping
//! its stream layout independent of the label configuration; hierarchy
//! closure can still switch an indicator on per-row if a child fires.)
//!
//! The documented summation order for an activation is: start from `bias`,
//! add `m_f · d_f` for fired features in ascending feature index, then add
//! noise, then cast to f32. Tests and oracle recomputations rely on this
//! order for exact reproduction.

use super::oracle::OracleCoeffs;
use super::GroundTruthModel;
use crate::error::{Result, SaeForgeError};
use crate::store::{ActivationDataset, LabelColumn};
use crate::util::{derive_seed, splitmix64};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const PROGRESS_EVERY: usize = 250_000;

/// Draw `n` rows. Returns the public dataset (activations + sidecars) and the
/// hidden ground-truth coefficients, which callers must keep away from metric
/// code (they go into a separate `.saeo` file, never into the SAEB file).
pub fn sample_dataset(
    model: &GroundTruthModel,
    n: usize,
) -> Result<(ActivationDataset, OracleCoeffs)> {
    model.validate()?;
    if n == 0 {
        return Err(SaeForgeError::Generator("sample count must be at least 1".into()));
    }
    let ft = model.f_true;
    let d = model.d_model;
    let v = model.vocab_size();
    let n_tokens = model.token_features.len();

    let mut data: Array2<f32> = Array2::zeros((n, d));
    let mut coeffs = OracleCoeffs::new(model);
    let mut label_values: Vec<Vec<u32>> =
        vec![Vec::with_capacity(n); model.concept_map.len() + model.spurious_map.len()];
    let mut next_token: Vec<u32> = Vec::with_capacity(n);
    let mut token_ids: Vec<u32> = Vec::with_capacity(if n_tokens > 0 { n } else { 0 });

    let base = derive_seed(model.seed, "sample");
    let seq_base = derive_seed(model.seed, "sequence");
    let mut indicator = vec![false; ft];
    for spec in model.concept_map.iter().chain(&model.spurious_map) {
        for &f in &spec.indicators {
            indicator[f] = true;
        }
    }
    let mut fired = vec![false; ft];
    let mut seq_fired = vec![false; ft];
    let mut cached_seq = usize::MAX;
    let mut magnitude = vec![0.0f64; ft];
    let mut row_pairs: Vec<(u32, f64)> = Vec::with_capacity(16);
    let mut clean: Array1<f64> = Array1::zeros(d);

    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(base ^ (i as u64)));

        // 0. sequence-scoped indicator draws (one Bernoulli per indicator
        //    feature per sequence, ascending feature order)
        let seq = i / model.seq_len;
        if seq != cached_seq {
            let mut seq_rng = ChaCha8Rng::seed_from_u64(splitmix64(seq_base ^ (seq as u64)));
            for f in 0..ft {
                if indicator[f] {
                    seq_fired[f] = seq_rng.gen::<f64>() < model.firing_probs[f];
                }
            }
            cached_seq = seq;
        }
        // 1. independent Bernoulli firing (indicators inherit the sequence
        //    draw; the row uniform is drawn either way)
        for f in 0..ft {
            let u = rng.gen::<f64>();
            fired[f] = if indicator[f] { seq_fired[f] } else { u < model.firing_probs[f] };
        }
        // 2. hierarchy closure to a fixpoint (handles chains in any edge order)
        loop {
            let mut changed = false;
            for &(p, c) in &model.hierarchy {
                if fired[c] && !fired[p] {
                    fired[p] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        // 3. magnitudes, ascending feature order
        row_pairs.clear();
        for f in 0..ft {
            if fired[f] {
                let (a, b) = model.magnitude_laws[f];
                let m = a + rng.gen::<f64>() * (b - a);
                magnitude[f] = m;
                row_pairs.push((f as u32, m));
            } else {
                magnitude[f] = 0.0;
            }
        }
        // 4. activation
        clean.assign(&model.bias);
        for &(f, m) in &row_pairs {
            clean.scaled_add(m, &model.d_true.row(f as usize));
        }
        if model.noise_sigma > 0.0 {
            let mut out = data.row_mut(i);
            for j in 0..d {
                let noise = model.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                out[j] = (clean[j] + noise) as f32;
            }
        } else {
            let mut out = data.row_mut(i);
            for j in 0..d {
                out[j] = clean[j] as f32;
            }
        }
        // 5. concept/spurious labels: exactly one indicator fired → its class,
        //    zero or several → background (= indicators.len())
        for (col, spec) in
            model.concept_map.iter().chain(&model.spurious_map).enumerate()
        {
            let mut hit: Option<usize> = None;
            let mut ambiguous = false;
            for (class, &f) in spec.indicators.iter().enumerate() {
                if fired[f] {
                    ambiguous = hit.is_some();
                    if ambiguous {
                        break;
                    }
                    hit = Some(class);
                }
            }
            let class = match (hit, ambiguous) {
                (Some(c), false) => c,
                _ => spec.indicators.len(),
            };
            label_values[col].push(class as u32);
        }
        // 6. token id: strongest-firing designated token feature (ties and
        //    no-fire → background token)
        if n_tokens > 0 {
            let mut best: Option<(usize, f64)> = None;
            for (tok, &f) in model.token_features.iter().enumerate() {
                if fired[f] && best.map_or(true, |(_, m)| magnitude[f] > m) {
                    best = Some((tok, magnitude[f]));
                }
            }
            token_ids.push(best.map_or(n_tokens, |(tok, _)| tok) as u32);
        }
        // 7. next-token target: argmax of the surrogate logits on the clean
        //    (noise-free) activation, flipped with probability label_noise
        let logits = model.readout_w.t().dot(&clean) + &model.readout_b;
        let mut target = 0usize;
        for t in 1..v {
            if logits[t] > logits[target] {
                target = t;
            }
        }
        if model.label_noise > 0.0 && rng.gen::<f64>() < model.label_noise {
            target = rng.gen_range(0..v);
        }
        next_token.push(target as u32);

        coeffs.push_row(&row_pairs);
        if (i + 1) % PROGRESS_EVERY == 0 {
            eprintln!("synth: {} / {n} rows", i + 1);
        }
    }

    // Sequence structure: fixed-length runs, remainder in the last sequence.
    let mut seq_lens = Vec::with_capacity(n / model.seq_len + 1);
    let mut left = n;
    while left > 0 {
        let take = left.min(model.seq_len);
        seq_lens.push(take as u32);
        left -= take;
    }

    let mut labels: Vec<LabelColumn> = Vec::new();
    for (col, spec) in model.concept_map.iter().chain(&model.spurious_map).enumerate() {
        labels.push(LabelColumn {
            name: spec.name.clone(),
            n_classes: spec.indicators.len() as u32 + 1,
            background: Some(spec.indicators.len() as u32),
            values: std::mem::take(&mut label_values[col]),
        });
    }
    labels.push(LabelColumn {
        name: super::NEXT_TOKEN_COLUMN.into(),
        n_classes: v as u32,
        background: None,
        values: next_token,
    });

    let ds = ActivationDataset {
        d_model: d,
        data,
        seq_lens: Some(seq_lens),
        token_ids: if n_tokens > 0 { Some(token_ids) } else { None },
        vocab: if n_tokens > 0 { Some(model.vocab_strings()) } else { None },
        labels,
        mask: None,
    };
    ds.validate()?;
    Ok((ds, coeffs))
}
