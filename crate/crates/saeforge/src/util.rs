//! Small shared helpers: seed derivation, softmax/entropy kernels, cosine
//! similarity, deterministic index shuffles.
//!
//! Everything here is pure and deterministic; all randomness in the crate flows
//! through `ChaCha8Rng` instances seeded via [`derive_seed`] so that independent
//! subsystems (init, buffer, probes, judges, ...) never share or race a stream.

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Owned row-major version of `a`; no copy when already standard layout.
///
/// `Array2::dot` may hand back a column-major result for degenerate shapes,
/// and several hot paths take rows as contiguous slices — run matmul outputs
/// through here before relying on layout.
pub fn standard_layout<T: Clone>(a: Array2<T>) -> Array2<T> {
    if a.is_standard_layout() {
        a
    } else {
        let dim = a.raw_dim();
        Array2::from_shape_vec(dim, a.iter().cloned().collect())
            .expect("element count is unchanged")
    }
}

/// Derive an independent sub-seed from a root seed and a purpose tag.
///
/// FNV-1a over the tag, mixed with the root seed through splitmix64. Stable
/// across platforms and releases (documented contract: changing this breaks
/// byte-reproducibility of runs, so don't).
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(root ^ h)
}

/// One splitmix64 scramble step.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded RNG for a named purpose.
pub fn rng_for(root: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag))
}

/// log(Σ exp(x_i)) computed stably in f64.
pub fn logsumexp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = logits.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Softmax probabilities in f64.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|&x| (x - lse).exp()).collect()
}

/// KL(p ‖ q) for two probability vectors, in nats. Terms with p_i = 0
/// contribute zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            kl += pi * (pi.ln() - qi.ln());
        }
    }
    kl
}

/// Cosine similarity between two vectors; 0.0 if either has zero norm.
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Deterministically shuffled index vector `0..n`.
pub fn shuffled_indices(n: usize, seed: u64, tag: &str) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, tag));
    idx
}
