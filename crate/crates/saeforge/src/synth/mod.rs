//! Synthetic ground truth: a sparse linear generative model whose dictionary,
//! hierarchy, labels, and readout are all known, so every downstream metric
//! can be checked against an oracle.
//!
//! A sample is built as `x = bias + Σ_f m_f · d_f + ε`: each feature `f`
//! fires independently with probability `firing_probs[f]`, firing is closed
//! under the hierarchy (a child forces its parents), fired features draw a
//! magnitude `m_f ~ uniform[a_f, b_f]`, and `ε ~ N(0, noise_sigma² I)`.
//! Rows are generated with per-row counter-derived RNGs, so row `i` of a
//! dataset depends only on `(model, i)` — generation order never matters.
//!
//! Alongside the activations the sampler emits:
//!
//! * label columns from `concept_map`/`spurious_map` — class = the single
//!   indicator feature that fired; zero or several fired → background class
//! * `token_ids` — the strongest-firing designated token feature (else a
//!   background token); token features and the surrogate readout share one
//!   vocabulary of `token_features.len() + 1` entries
//! * a `next_token` label column — argmax of the surrogate logits on the
//!   *noise-free* activation, flipped to a uniform token with probability
//!   `label_noise` (keeps the readout's cross-entropy away from zero)
//! * an [`OracleCoeffs`] sidecar holding the true sparse coefficients; it is
//!   stored separately (`.saeo`) precisely so metric code paths, which only
//!   see the dataset, cannot leak ground truth

mod oracle;
mod sample;

pub use oracle::{
    greedy_match_cosine, oracle_sae_params, read_oracle, write_oracle, DictionaryMatch,
    MatchReport, OracleCoeffs,
};
pub use sample::sample_dataset;

use crate::error::{Result, SaeForgeError};
use crate::util::rng_for;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Background token string; token `i` of `token_features` is `tok{i:03}`.
pub const BACKGROUND_TOKEN: &str = "<bg>";

/// Reserved label-column name for the surrogate next-token targets.
pub const NEXT_TOKEN_COLUMN: &str = "next_token";

// ── Configuration ───────────────────────────────────────────────────────────

/// One named label column: class `c` is indicated by feature `indicators[c]`;
/// an extra background class (index `indicators.len()`) is appended for rows
/// where zero or several indicators fire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelColumnSpec {
    pub name: String,
    pub indicators: Vec<usize>,
}

/// JSON-facing generator configuration. Every field has a desk-scale default
/// (`d_model`=64, `f_true`=128, expected true L0 ≈ 6); unknown keys are
/// rejected so config typos fail loudly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub d_model: usize,
    pub f_true: usize,
    /// Base Bernoulli firing probability applied to every feature.
    pub firing_prob: f64,
    /// Per-feature overrides as `[feature, prob]` pairs.
    pub firing_prob_overrides: Vec<(usize, f64)>,
    /// Uniform magnitude law `[a, b]` shared by all features.
    pub magnitude_range: (f64, f64),
    /// Scale of the N(0,1)-sampled activation bias vector.
    pub bias_scale: f64,
    pub noise_sigma: f64,
    /// Orthonormalize the dictionary rows (requires `f_true <= d_model`);
    /// needed by [`oracle_sae_params`].
    pub orthogonal_dictionary: bool,
    /// `(parent, child)` pairs: a firing child forces its parent to fire.
    pub hierarchy: Vec<(usize, usize)>,
    pub concept_labels: Vec<LabelColumnSpec>,
    pub spurious_labels: Vec<LabelColumnSpec>,
    /// Features designated as tokens; vocabulary id = position in this list.
    pub token_features: Vec<usize>,
    /// Rows per sequence in the emitted `seq_lens` sidecar.
    pub seq_len: usize,
    /// Probability that a row's next-token target is replaced by a uniform
    /// random token.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            d_model: 64,
            f_true: 128,
            firing_prob: 6.0 / 128.0,
            firing_prob_overrides: Vec::new(),
            magnitude_range: (1.0, 2.0),
            bias_scale: 0.1,
            noise_sigma: 0.05,
            orthogonal_dictionary: false,
            hierarchy: vec![(8, 9), (8, 10)],
            concept_labels: vec![LabelColumnSpec {
                name: "concept".into(),
                indicators: vec![0, 1, 2, 3],
            }],
            spurious_labels: vec![LabelColumnSpec {
                name: "spurious".into(),
                indicators: vec![4, 5],
            }],
            token_features: (16..32).collect(),
            seq_len: 16,
            label_noise: 0.1,
            seed: 0,
        }
    }
}

// ── Ground-truth model ──────────────────────────────────────────────────────

/// The fully materialized generative model. Deterministic in
/// `(GeneratorConfig, seed)`; see [`build_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthModel {
    pub f_true: usize,
    pub d_model: usize,
    /// `f_true × d_model`; rows are unit-norm true feature directions.
    pub d_true: Array2<f64>,
    pub bias: Array1<f64>,
    pub firing_probs: Vec<f64>,
    /// Per-feature uniform magnitude law `(a, b)`.
    pub magnitude_laws: Vec<(f64, f64)>,
    /// `(parent, child)` edges, acyclic.
    pub hierarchy: Vec<(usize, usize)>,
    pub concept_map: Vec<LabelColumnSpec>,
    pub spurious_map: Vec<LabelColumnSpec>,
    pub token_features: Vec<usize>,
    /// `d_model × V` surrogate readout weights.
    pub readout_w: Array2<f64>,
    /// `V` surrogate readout bias.
    pub readout_b: Array1<f64>,
    pub noise_sigma: f64,
    pub label_noise: f64,
    pub seq_len: usize,
    pub seed: u64,
}

impl GroundTruthModel {
    /// Surrogate vocabulary size: one id per token feature plus background.
    pub fn vocab_size(&self) -> usize {
        self.token_features.len() + 1
    }

    /// Vocabulary strings, index-aligned with token/label ids.
    pub fn vocab_strings(&self) -> Vec<String> {
        let mut v: Vec<String> =
            (0..self.token_features.len()).map(|i| format!("tok{i:03}")).collect();
        v.push(BACKGROUND_TOKEN.to_string());
        v
    }

    /// Logits of the surrogate readout: `readout_wᵀ·x + readout_b`.
    pub fn surrogate_logits(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if x.len() != self.d_model {
            return Err(SaeForgeError::ShapeMismatch {
                context: "surrogate_logits",
                expected: format!("{} entries", self.d_model),
                found: format!("{} entries", x.len()),
            });
        }
        Ok(self.readout_w.t().dot(&x) + &self.readout_b)
    }

    /// Batched surrogate logits: rows of `x` → rows of logits (`n × V`).
    pub fn surrogate_logits_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.d_model {
            return Err(SaeForgeError::ShapeMismatch {
                context: "surrogate_logits",
                expected: format!("n × {}", self.d_model),
                found: format!("n × {}", x.ncols()),
            });
        }
        Ok(crate::util::standard_layout(x.dot(&self.readout_w) + &self.readout_b))
    }

    /// Every structural invariant: unit dictionary rows, acyclic hierarchy,
    /// in-range disjoint indicators, probabilities in (0,1).
    pub fn validate(&self) -> Result<()> {
        for (f, row) in self.d_true.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(SaeForgeError::Generator(format!(
                    "dictionary row {f} has norm {norm}, want 1"
                )));
            }
        }
        check_acyclic(self.f_true, &self.hierarchy)?;
        for spec in self.concept_map.iter().chain(&self.spurious_map) {
            check_label_spec(spec, self.f_true)?;
        }
        for (f, &p) in self.firing_probs.iter().enumerate() {
            if !(p > 0.0 && p < 1.0) {
                return Err(SaeForgeError::Generator(format!(
                    "firing probability of feature {f} is {p}, want (0,1)"
                )));
            }
        }
        Ok(())
    }
}

// ── Model construction ──────────────────────────────────────────────────────

/// Build the generative model from a configuration. Deterministic in
/// `config.seed`; all validation happens before any sampling, so a returned
/// model is always internally consistent.
pub fn build_model(config: &GeneratorConfig) -> Result<GroundTruthModel> {
    validate_config(config)?;
    let (ft, d) = (config.f_true, config.d_model);

    let mut firing_probs = vec![config.firing_prob; ft];
    for &(f, p) in &config.firing_prob_overrides {
        firing_probs[f] = p;
    }

    let d_true = if config.orthogonal_dictionary {
        orthonormal_rows(ft, d, config.seed)
    } else {
        unit_rows(ft, d, config.seed)
    };

    let mut rng = rng_for(config.seed, "bias");
    let bias = Array1::from_shape_fn(d, |_| {
        config.bias_scale * rng.sample::<f64, _>(StandardNormal)
    });

    // Readout weights at 1/√d scale keep logits O(‖x‖); a small bias makes
    // the zero-ablation distribution non-uniform, which the KL score needs.
    let v = config.token_features.len() + 1;
    let mut rng = rng_for(config.seed, "readout");
    let scale = 1.0 / (d as f64).sqrt();
    let mut w = Vec::with_capacity(d * v);
    for _ in 0..d * v {
        w.push(scale * rng.sample::<f64, _>(StandardNormal));
    }
    let readout_w = Array2::from_shape_vec((d, v), w).expect("readout shape");
    let readout_b =
        Array1::from_shape_fn(v, |_| 0.1 * rng.sample::<f64, _>(StandardNormal));

    let model = GroundTruthModel {
        f_true: ft,
        d_model: d,
        d_true,
        bias,
        firing_probs,
        magnitude_laws: vec![config.magnitude_range; ft],
        hierarchy: config.hierarchy.clone(),
        concept_map: config.concept_labels.clone(),
        spurious_map: config.spurious_labels.clone(),
        token_features: config.token_features.clone(),
        readout_w,
        readout_b,
        noise_sigma: config.noise_sigma,
        label_noise: config.label_noise,
        seq_len: config.seq_len,
        seed: config.seed,
    };
    model.validate()?;
    Ok(model)
}

/// Random unit-norm dictionary rows (Gaussian directions).
fn unit_rows(ft: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_for(seed, "dictionary");
    let mut m = Array2::zeros((ft, d));
    for f in 0..ft {
        loop {
            let row: Vec<f64> =
                (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                for (j, x) in row.into_iter().enumerate() {
                    m[[f, j]] = x / norm;
                }
                break;
            }
        }
    }
    m
}

/// Gram–Schmidt orthonormal rows; requires `ft <= d` (validated upstream).
fn orthonormal_rows(ft: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_for(seed, "dictionary");
    let mut m: Array2<f64> = Array2::zeros((ft, d));
    let mut f = 0;
    while f < ft {
        let mut row: Array1<f64> =
            Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
        for prev in 0..f {
            let p = m.row(prev);
            let proj = row.dot(&p);
            row.scaled_add(-proj, &p);
        }
        let norm = row.dot(&row).sqrt();
        if norm > 1e-6 {
            row /= norm;
            m.row_mut(f).assign(&row);
            f += 1;
        }
        // else: degenerate draw, retry with fresh randomness
    }
    m
}

fn validate_config(config: &GeneratorConfig) -> Result<()> {
    let gen_err = |msg: String| Err(SaeForgeError::Generator(msg));
    let ft = config.f_true;
    if ft < 1 {
        return gen_err("f_true must be at least 1".into());
    }
    if config.d_model < 2 {
        return gen_err(format!("d_model is {}, want at least 2", config.d_model));
    }
    if !(config.firing_prob > 0.0 && config.firing_prob < 1.0) {
        return gen_err(format!("firing_prob is {}, want (0,1)", config.firing_prob));
    }
    let mut seen = vec![false; ft];
    for &(f, p) in &config.firing_prob_overrides {
        if f >= ft {
            return gen_err(format!("firing_prob override for feature {f} >= f_true {ft}"));
        }
        if seen[f] {
            return gen_err(format!("duplicate firing_prob override for feature {f}"));
        }
        seen[f] = true;
        if !(p > 0.0 && p < 1.0) {
            return gen_err(format!("firing_prob override {p} for feature {f}, want (0,1)"));
        }
    }
    let (a, b) = config.magnitude_range;
    if !(a > 0.0 && b >= a && b.is_finite()) {
        return gen_err(format!("magnitude_range ({a}, {b}) must satisfy 0 < a <= b"));
    }
    if !(config.noise_sigma >= 0.0 && config.noise_sigma.is_finite()) {
        return gen_err(format!("noise_sigma is {}, want >= 0", config.noise_sigma));
    }
    if !(0.0..1.0).contains(&config.label_noise) {
        return gen_err(format!("label_noise is {}, want [0,1)", config.label_noise));
    }
    if config.seq_len == 0 {
        return gen_err("seq_len must be at least 1".into());
    }
    if config.orthogonal_dictionary && ft > config.d_model {
        return gen_err(format!(
            "orthogonal_dictionary requires f_true <= d_model, got {ft} > {}",
            config.d_model
        ));
    }
    for &(p, c) in &config.hierarchy {
        if p >= ft || c >= ft {
            return gen_err(format!("hierarchy edge ({p}, {c}) out of range for f_true {ft}"));
        }
        if p == c {
            return Err(SaeForgeError::CyclicHierarchy { feature: p });
        }
    }
    check_acyclic(ft, &config.hierarchy)?;
    let mut names = std::collections::BTreeSet::new();
    for spec in config.concept_labels.iter().chain(&config.spurious_labels) {
        check_label_spec(spec, ft)?;
        if spec.name == NEXT_TOKEN_COLUMN {
            return gen_err(format!("label column name {NEXT_TOKEN_COLUMN:?} is reserved"));
        }
        if !names.insert(spec.name.clone()) {
            return gen_err(format!("duplicate label column name {:?}", spec.name));
        }
    }
    let mut seen_tok = vec![false; ft];
    for &f in &config.token_features {
        if f >= ft {
            return gen_err(format!("token feature {f} >= f_true {ft}"));
        }
        if seen_tok[f] {
            return gen_err(format!("duplicate token feature {f}"));
        }
        seen_tok[f] = true;
    }
    Ok(())
}

fn check_label_spec(spec: &LabelColumnSpec, ft: usize) -> Result<()> {
    if spec.name.is_empty() {
        return Err(SaeForgeError::Generator("label column with empty name".into()));
    }
    if spec.indicators.is_empty() {
        return Err(SaeForgeError::Generator(format!(
            "label column {:?} has no indicator features",
            spec.name
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &f in &spec.indicators {
        if f >= ft {
            return Err(SaeForgeError::Generator(format!(
                "label column {:?} indicator {f} >= f_true {ft}",
                spec.name
            )));
        }
        if !seen.insert(f) {
            return Err(SaeForgeError::Generator(format!(
                "label column {:?} repeats indicator feature {f}",
                spec.name
            )));
        }
    }
    Ok(())
}

/// Kahn's algorithm over the parent→child edge set; an unremovable remainder
/// means a cycle, reported at its smallest member feature.
fn check_acyclic(ft: usize, edges: &[(usize, usize)]) -> Result<()> {
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); ft];
    let mut indeg = vec![0usize; ft];
    for &(p, c) in edges {
        out[p].push(c);
        indeg[c] += 1;
    }
    let mut queue: Vec<usize> = (0..ft).filter(|&f| indeg[f] == 0).collect();
    let mut removed = 0;
    while let Some(f) = queue.pop() {
        removed += 1;
        for &c in &out[f] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                queue.push(c);
            }
        }
    }
    if removed < ft {
        let feature = (0..ft).find(|&f| indeg[f] > 0).unwrap_or(0);
        return Err(SaeForgeError::CyclicHierarchy { feature });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr1;

    fn tiny_config() -> GeneratorConfig {
        GeneratorConfig {
            d_model: 8,
            f_true: 6,
            firing_prob: 0.2,
            hierarchy: vec![],
            concept_labels: vec![],
            spurious_labels: vec![],
            token_features: vec![0, 1],
            seed: 42,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let a = build_model(&tiny_config()).unwrap();
        let b = build_model(&tiny_config()).unwrap();
        assert_eq!(a, b);
        let mut other = tiny_config();
        other.seed = 43;
        assert_ne!(build_model(&other).unwrap(), a);
    }

    #[test]
    fn cyclic_hierarchy_is_rejected() {
        let mut cfg = tiny_config();
        cfg.hierarchy = vec![(0, 1), (1, 0)];
        let err = build_model(&cfg).unwrap_err();
        assert!(err.to_string().contains("cycle"), "got: {err}");
        cfg.hierarchy = vec![(2, 2)];
        assert!(build_model(&cfg).is_err());
        // a chain is fine
        cfg.hierarchy = vec![(0, 1), (1, 2)];
        build_model(&cfg).unwrap();
    }

    #[test]
    fn single_feature_model_has_one_unit_row() {
        let mut cfg = tiny_config();
        cfg.f_true = 1;
        cfg.token_features = vec![0];
        let m = build_model(&cfg).unwrap();
        assert_eq!(m.d_true.nrows(), 1);
        let norm = m.d_true.row(0).dot(&m.d_true.row(0)).sqrt();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn dictionary_rows_are_unit_norm() {
        let m = build_model(&GeneratorConfig::default()).unwrap();
        for row in m.d_true.rows() {
            assert_abs_diff_eq!(row.dot(&row).sqrt(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn orthogonal_dictionary_has_identity_gram() {
        let mut cfg = tiny_config();
        cfg.orthogonal_dictionary = true;
        let m = build_model(&cfg).unwrap();
        let gram = m.d_true.dot(&m.d_true.t());
        for i in 0..m.f_true {
            for j in 0..m.f_true {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(gram[[i, j]], want, epsilon = 1e-9);
            }
        }
        cfg.f_true = 10; // > d_model = 8
        assert!(build_model(&cfg).is_err());
    }

    #[test]
    fn surrogate_logits_at_zero_equal_readout_bias() {
        let m = build_model(&tiny_config()).unwrap();
        let z = Array1::zeros(m.d_model);
        let logits = m.surrogate_logits(z.view()).unwrap();
        for (a, b) in logits.iter().zip(m.readout_b.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn surrogate_logits_are_affine() {
        // logits(a·x + b·y) = a·logits(x) + b·logits(y) − (a+b−1)·readout_b
        let m = build_model(&tiny_config()).unwrap();
        let x = Array1::from_shape_fn(m.d_model, |i| (i as f64 * 0.7).sin());
        let y = Array1::from_shape_fn(m.d_model, |i| (i as f64 * 1.3).cos());
        let (a, b) = (0.6, -1.9);
        let lhs = m.surrogate_logits((a * &x + b * &y).view()).unwrap();
        let rhs = a * m.surrogate_logits(x.view()).unwrap()
            + b * m.surrogate_logits(y.view()).unwrap()
            - (a + b - 1.0) * &m.readout_b;
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            assert_abs_diff_eq!(l, r, epsilon = 1e-10);
        }
    }

    #[test]
    fn surrogate_logits_match_brute_force_oracle() {
        let mut cfg = tiny_config();
        cfg.token_features = vec![0, 1]; // V = 3
        let m = build_model(&cfg).unwrap();
        let x = arr1(&[0.3, -1.2, 2.0, 0.0, 0.5, -0.7, 1.1, -0.4]);
        let got = m.surrogate_logits(x.view()).unwrap();
        assert_eq!(got.len(), 3);
        for vcol in 0..3 {
            let mut acc = m.readout_b[vcol];
            for i in 0..m.d_model {
                acc += m.readout_w[[i, vcol]] * x[i];
            }
            assert_abs_diff_eq!(got[vcol], acc, epsilon = 1e-12);
        }
        let batch = m
            .surrogate_logits_batch(x.view().insert_axis(ndarray::Axis(0)))
            .unwrap();
        for vcol in 0..3 {
            assert_abs_diff_eq!(batch[[0, vcol]], got[vcol], epsilon = 1e-12);
        }
    }

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let reject = |mutate: fn(&mut GeneratorConfig)| {
            let mut cfg = tiny_config();
            mutate(&mut cfg);
            assert!(build_model(&cfg).is_err(), "accepted: {cfg:?}");
        };
        reject(|c| c.f_true = 0);
        reject(|c| c.d_model = 1);
        reject(|c| c.firing_prob = 0.0);
        reject(|c| c.firing_prob = 1.0);
        reject(|c| c.firing_prob_overrides = vec![(9, 0.5)]);
        reject(|c| c.firing_prob_overrides = vec![(0, 0.5), (0, 0.6)]);
        reject(|c| c.magnitude_range = (0.0, 1.0));
        reject(|c| c.magnitude_range = (2.0, 1.0));
        reject(|c| c.noise_sigma = -0.1);
        reject(|c| c.label_noise = 1.0);
        reject(|c| c.seq_len = 0);
        reject(|c| c.hierarchy = vec![(0, 6)]);
        reject(|c| c.token_features = vec![0, 0]);
        reject(|c| c.token_features = vec![6]);
        reject(|c| {
            c.concept_labels = vec![LabelColumnSpec { name: "c".into(), indicators: vec![0, 0] }]
        });
        reject(|c| {
            c.concept_labels =
                vec![LabelColumnSpec { name: NEXT_TOKEN_COLUMN.into(), indicators: vec![0] }]
        });
        reject(|c| {
            let dup = LabelColumnSpec { name: "c".into(), indicators: vec![0] };
            c.concept_labels = vec![dup.clone()];
            c.spurious_labels = vec![dup];
        });
    }

    #[test]
    fn generator_config_json_rejects_unknown_keys() {
        let ok: GeneratorConfig = serde_json::from_str(r#"{"d_model": 16}"#).unwrap();
        assert_eq!(ok.d_model, 16);
        assert_eq!(ok.f_true, 128); // other fields take defaults
        let bad = serde_json::from_str::<GeneratorConfig>(r#"{"d_modle": 16}"#);
        assert!(bad.is_err());
    }
}
