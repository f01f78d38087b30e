//! Oracle-side artifacts: the hidden coefficient sidecar (SAEO format), the
//! model fingerprint that ties a sidecar to the model that produced it, the
//! oracle SAE for orthonormal dictionaries, and greedy dictionary matching.
//!
//! SAEO layout (little-endian, no padding, no compression):
//!
//! ```text
//! offset size
//! 0      4    magic "SAEO"
//! 4      2    version      u16  (current = 1)
//! 6      32   model fingerprint (sha-256, see `model_fingerprint`)
//! 38     4    f_true       u32
//! 42     8    n_rows       u64
//! 50     …    counts       n_rows × u32   (nonzeros per row)
//!        …    indices      nnz × u32      (ascending within each row)
//!        …    values       nnz × f64      (strictly positive magnitudes)
//! ```
//!
//! Trailing bytes are rejected; identical coefficients always serialize to
//! identical bytes.

use super::GroundTruthModel;
use crate::error::{Result, SaeForgeError};
use crate::sae::{ArchSpec, SaeParams};
use ndarray::{Array1, ArrayView2};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

pub const ORACLE_MAGIC: [u8; 4] = *b"SAEO";
pub const ORACLE_VERSION: u16 = 1;

const READ_CHUNK: usize = 1 << 16;

// ── Coefficient sidecar ─────────────────────────────────────────────────────

/// True sparse coefficients per row, CSR-shaped. Lives in a separate file
/// from the dataset so nothing in the metric code paths can read it by
/// accident; only oracle constructions and tests consume it.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCoeffs {
    pub f_true: u32,
    /// Identifies the generating model; see [`model_fingerprint`].
    pub fingerprint: [u8; 32],
    offsets: Vec<u64>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl OracleCoeffs {
    pub fn new(model: &GroundTruthModel) -> Self {
        OracleCoeffs {
            f_true: model.f_true as u32,
            fingerprint: model_fingerprint(model),
            offsets: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Append one row; `pairs` must be ascending in feature index.
    pub(crate) fn push_row(&mut self, pairs: &[(u32, f64)]) {
        for &(f, m) in pairs {
            self.indices.push(f);
            self.values.push(m);
        }
        self.offsets.push(self.indices.len() as u64);
    }

    pub fn n_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Indices and magnitudes of the features fired in row `i`.
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (lo, hi) = (self.offsets[i] as usize, self.offsets[i + 1] as usize);
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    /// Magnitude of feature `f` in row `i`, 0.0 if it did not fire.
    pub fn value(&self, i: usize, f: u32) -> f64 {
        let (idx, val) = self.row(i);
        match idx.binary_search(&f) {
            Ok(pos) => val[pos],
            Err(_) => 0.0,
        }
    }

    /// Dense coefficient vector of row `i` (length `f_true`).
    pub fn dense_row(&self, i: usize) -> Array1<f64> {
        let mut out = Array1::zeros(self.f_true as usize);
        let (idx, val) = self.row(i);
        for (&f, &m) in idx.iter().zip(val) {
            out[f as usize] = m;
        }
        out
    }

    /// Confirm this sidecar was produced by `model` (fingerprint equality).
    pub fn verify(&self, model: &GroundTruthModel) -> Result<()> {
        if self.fingerprint != model_fingerprint(model) {
            return Err(SaeForgeError::SidecarMismatch {
                what: "oracle fingerprint does not match the generating model; \
                       the generator config changed since the dataset was written"
                    .into(),
            });
        }
        Ok(())
    }
}

/// SHA-256 over a canonical serialization of everything that defines the
/// generative model (dimensions, seed, probabilities, laws, hierarchy, label
/// maps, token features, dictionary, bias, readout). Any semantic change to
/// the model changes the fingerprint.
pub fn model_fingerprint(model: &GroundTruthModel) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"saeforge-model-v1");
    h.update((model.f_true as u32).to_le_bytes());
    h.update((model.d_model as u32).to_le_bytes());
    h.update(model.seed.to_le_bytes());
    h.update(model.noise_sigma.to_le_bytes());
    h.update(model.label_noise.to_le_bytes());
    h.update((model.seq_len as u64).to_le_bytes());
    for &p in &model.firing_probs {
        h.update(p.to_le_bytes());
    }
    for &(a, b) in &model.magnitude_laws {
        h.update(a.to_le_bytes());
        h.update(b.to_le_bytes());
    }
    h.update((model.hierarchy.len() as u32).to_le_bytes());
    for &(p, c) in &model.hierarchy {
        h.update((p as u32).to_le_bytes());
        h.update((c as u32).to_le_bytes());
    }
    for (section, specs) in [(b'c', &model.concept_map), (b's', &model.spurious_map)] {
        h.update([section]);
        h.update((specs.len() as u32).to_le_bytes());
        for spec in specs {
            h.update((spec.name.len() as u32).to_le_bytes());
            h.update(spec.name.as_bytes());
            h.update((spec.indicators.len() as u32).to_le_bytes());
            for &f in &spec.indicators {
                h.update((f as u32).to_le_bytes());
            }
        }
    }
    h.update((model.token_features.len() as u32).to_le_bytes());
    for &f in &model.token_features {
        h.update((f as u32).to_le_bytes());
    }
    for &x in model.d_true.iter() {
        h.update(x.to_le_bytes());
    }
    for &x in model.bias.iter() {
        h.update(x.to_le_bytes());
    }
    for &x in model.readout_w.iter() {
        h.update(x.to_le_bytes());
    }
    for &x in model.readout_b.iter() {
        h.update(x.to_le_bytes());
    }
    h.finalize().into()
}

// ── SAEO file i/o ───────────────────────────────────────────────────────────

/// Serialize oracle coefficients to `path`; returns the bytes written.
pub fn write_oracle(path: &Path, coeffs: &OracleCoeffs) -> Result<u64> {
    let file = File::create(path).map_err(|e| SaeForgeError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| SaeForgeError::io(path, e);
    let mut written: u64 = 0;
    let mut put = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
        w.write_all(bytes).map_err(io)?;
        written += bytes.len() as u64;
        Ok(())
    };

    put(&mut w, &ORACLE_MAGIC)?;
    put(&mut w, &ORACLE_VERSION.to_le_bytes())?;
    put(&mut w, &coeffs.fingerprint)?;
    put(&mut w, &coeffs.f_true.to_le_bytes())?;
    put(&mut w, &(coeffs.n_rows() as u64).to_le_bytes())?;
    for i in 0..coeffs.n_rows() {
        let count = (coeffs.offsets[i + 1] - coeffs.offsets[i]) as u32;
        put(&mut w, &count.to_le_bytes())?;
    }
    for &f in &coeffs.indices {
        put(&mut w, &f.to_le_bytes())?;
    }
    for &m in &coeffs.values {
        put(&mut w, &m.to_le_bytes())?;
    }
    w.flush().map_err(io)?;
    Ok(written)
}

/// Read and fully validate a SAEO file (magic, version, row structure,
/// index ranges and ordering, positive finite values, no trailing bytes).
pub fn read_oracle(path: &Path) -> Result<OracleCoeffs> {
    let file = File::open(path).map_err(|e| SaeForgeError::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, path, &mut magic, "oracle header")?;
    if magic != ORACLE_MAGIC {
        return Err(SaeForgeError::BadMagic { expected: ORACLE_MAGIC, found: magic });
    }
    let version = u16::from_le_bytes(read_array(&mut r, path, "oracle header")?);
    if version > ORACLE_VERSION {
        return Err(SaeForgeError::UnsupportedVersion {
            what: "oracle sidecar",
            found: version,
            supported: ORACLE_VERSION,
        });
    }
    let mut fingerprint = [0u8; 32];
    read_exact(&mut r, path, &mut fingerprint, "oracle header")?;
    let f_true = u32::from_le_bytes(read_array(&mut r, path, "oracle header")?);
    if f_true == 0 {
        return Err(SaeForgeError::SidecarMismatch { what: "oracle declares f_true = 0".into() });
    }
    let n_rows = u64::from_le_bytes(read_array(&mut r, path, "oracle header")?);

    // Counts are read in bounded chunks so a corrupt header cannot trigger a
    // giant up-front allocation: the vectors only grow as bytes arrive.
    let mut offsets: Vec<u64> = vec![0];
    let mut acc: u64 = 0;
    let mut left = n_rows;
    let mut buf = vec![0u8; READ_CHUNK * 4];
    while left > 0 {
        let take = (left as usize).min(READ_CHUNK);
        read_exact(&mut r, path, &mut buf[..take * 4], "oracle counts")?;
        for c in buf[..take * 4].chunks_exact(4) {
            acc += u64::from(u32::from_le_bytes(c.try_into().unwrap()));
            offsets.push(acc);
        }
        left -= take as u64;
    }
    let nnz = acc;

    let mut indices: Vec<u32> = Vec::new();
    let mut left = nnz;
    while left > 0 {
        let take = (left as usize).min(READ_CHUNK);
        read_exact(&mut r, path, &mut buf[..take * 4], "oracle indices")?;
        for c in buf[..take * 4].chunks_exact(4) {
            let f = u32::from_le_bytes(c.try_into().unwrap());
            if f >= f_true {
                return Err(SaeForgeError::SidecarMismatch {
                    what: format!("oracle index {f} out of range for f_true {f_true}"),
                });
            }
            indices.push(f);
        }
        left -= take as u64;
    }
    let mut values: Vec<f64> = Vec::new();
    let mut left = nnz;
    let mut vbuf = vec![0u8; READ_CHUNK * 8];
    while left > 0 {
        let take = (left as usize).min(READ_CHUNK);
        read_exact(&mut r, path, &mut vbuf[..take * 8], "oracle values")?;
        for c in vbuf[..take * 8].chunks_exact(8) {
            let m = f64::from_le_bytes(c.try_into().unwrap());
            if !(m > 0.0 && m.is_finite()) {
                return Err(SaeForgeError::SidecarMismatch {
                    what: format!("oracle magnitude {m} is not positive finite"),
                });
            }
            values.push(m);
        }
        left -= take as u64;
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(SaeForgeError::SidecarMismatch {
                what: "trailing bytes after oracle payload".into(),
            })
        }
        Err(e) => return Err(SaeForgeError::io(path, e)),
    }
    // Per-row ascending order.
    for i in 0..n_rows as usize {
        let (lo, hi) = (offsets[i] as usize, offsets[i + 1] as usize);
        for w in indices[lo..hi].windows(2) {
            if w[0] >= w[1] {
                return Err(SaeForgeError::SidecarMismatch {
                    what: format!("oracle row {i} indices are not strictly ascending"),
                });
            }
        }
    }
    Ok(OracleCoeffs { f_true, fingerprint, offsets, indices, values })
}

fn read_exact(r: &mut impl Read, path: &Path, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            SaeForgeError::Truncated { what: what.into() }
        } else {
            SaeForgeError::io(path, e)
        }
    })
}

fn read_array<const N: usize>(r: &mut impl Read, path: &Path, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, path, &mut buf, what)?;
    Ok(buf)
}

// ── Oracle SAE ──────────────────────────────────────────────────────────────

/// An SAE that recovers the true coefficients exactly (up to noise): encoder
/// rows = dictionary rows, decoder = dictionary transpose, biases centered at
/// the model bias, and a JumpReLU threshold at half the smallest magnitude
/// lower bound so noise projections never fire a latent.
///
/// Requires an orthonormal dictionary (build with `orthogonal_dictionary`),
/// since only then is `D·(x − bias)` the coefficient vector.
pub fn oracle_sae_params(model: &GroundTruthModel) -> Result<SaeParams> {
    let gram = model.d_true.dot(&model.d_true.t());
    for i in 0..model.f_true {
        for j in 0..model.f_true {
            let want = if i == j { 1.0 } else { 0.0 };
            if (gram[[i, j]] - want).abs() > 1e-6 {
                return Err(SaeForgeError::Generator(
                    "oracle SAE requires an orthonormal dictionary; \
                     set orthogonal_dictionary in the generator config"
                        .into(),
                ));
            }
        }
    }
    let min_low = model
        .magnitude_laws
        .iter()
        .map(|&(a, _)| a)
        .fold(f64::INFINITY, f64::min);
    let params = SaeParams {
        d_model: model.d_model,
        width: model.f_true,
        w_e: model.d_true.clone(),
        b_e: -model.d_true.dot(&model.bias),
        w_d: model.d_true.t().to_owned(),
        b_d: model.bias.clone(),
        arch: ArchSpec::JumpRelu {
            theta: Array1::from_elem(model.f_true, 0.5 * min_low),
            epsilon: 1e-3,
            lambda: 0.0,
        },
    };
    params.validate()?;
    Ok(params)
}

// ── Dictionary recovery ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryMatch {
    pub true_feature: usize,
    pub latent: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    /// Mean over ALL true features; features left unmatched (more true
    /// features than latents) contribute 0.
    pub mean_max_cosine: f64,
    /// One entry per matched pair, sorted by true feature.
    pub matches: Vec<DictionaryMatch>,
}

/// Greedy one-to-one matching between true dictionary rows (`f_true × d`)
/// and learned decoder columns (`d × width`) by descending cosine; ties break
/// toward the lower true feature, then the lower latent.
pub fn greedy_match_cosine(
    d_true: ArrayView2<'_, f64>,
    w_d: ArrayView2<'_, f64>,
) -> Result<MatchReport> {
    if d_true.ncols() != w_d.nrows() {
        return Err(SaeForgeError::ShapeMismatch {
            context: "greedy_match_cosine",
            expected: format!("decoder with {} rows", d_true.ncols()),
            found: format!("{} rows", w_d.nrows()),
        });
    }
    let ft = d_true.nrows();
    let width = w_d.ncols();
    let row_norm: Vec<f64> = (0..ft).map(|f| d_true.row(f).dot(&d_true.row(f)).sqrt()).collect();
    let col_norm: Vec<f64> =
        (0..width).map(|j| w_d.column(j).dot(&w_d.column(j)).sqrt()).collect();

    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(ft * width);
    for f in 0..ft {
        for j in 0..width {
            let denom = row_norm[f] * col_norm[j];
            let cos = if denom > 0.0 { d_true.row(f).dot(&w_d.column(j)) / denom } else { 0.0 };
            pairs.push((cos, f, j));
        }
    }
    pairs.sort_unstable_by(|a, b| {
        b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });

    let budget = ft.min(width);
    let mut feature_taken = vec![false; ft];
    let mut latent_taken = vec![false; width];
    let mut matches = Vec::with_capacity(budget);
    for &(cos, f, j) in &pairs {
        if matches.len() == budget {
            break;
        }
        if !feature_taken[f] && !latent_taken[j] {
            feature_taken[f] = true;
            latent_taken[j] = true;
            matches.push(DictionaryMatch { true_feature: f, latent: j, cosine: cos });
        }
    }
    matches.sort_by_key(|m| m.true_feature);
    let mean = matches.iter().map(|m| m.cosine).sum::<f64>() / ft as f64;
    Ok(MatchReport { mean_max_cosine: mean, matches })
}

#[cfg(test)]
mod tests {
    use super::super::{build_model, sample_dataset, GeneratorConfig};
    use super::*;
    use crate::sae::EncodeMode;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    fn ortho_config() -> GeneratorConfig {
        GeneratorConfig {
            d_model: 16,
            f_true: 8,
            firing_prob: 0.2,
            noise_sigma: 0.02,
            orthogonal_dictionary: true,
            hierarchy: vec![],
            concept_labels: vec![],
            spurious_labels: vec![],
            token_features: vec![0],
            seed: 11,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn saeo_roundtrip_preserves_everything() {
        let model = build_model(&ortho_config()).unwrap();
        let (_, coeffs) = sample_dataset(&model, 40).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.saeo");
        write_oracle(&path, &coeffs).unwrap();
        let back = read_oracle(&path).unwrap();
        assert_eq!(back, coeffs);
        back.verify(&model).unwrap();
        // Writing twice yields identical bytes.
        let path2 = dir.path().join("truth2.saeo");
        write_oracle(&path2, &coeffs).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn fingerprint_detects_model_drift() {
        let model = build_model(&ortho_config()).unwrap();
        let (_, coeffs) = sample_dataset(&model, 4).unwrap();
        let mut other_cfg = ortho_config();
        other_cfg.seed = 12;
        let other = build_model(&other_cfg).unwrap();
        assert!(coeffs.verify(&model).is_ok());
        assert!(coeffs.verify(&other).is_err());
    }

    #[test]
    fn read_rejects_corrupt_files() {
        let model = build_model(&ortho_config()).unwrap();
        let (_, coeffs) = sample_dataset(&model, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.saeo");
        write_oracle(&path, &coeffs).unwrap();
        let good = std::fs::read(&path).unwrap();

        let bad_magic = {
            let mut b = good.clone();
            b[0] = b'X';
            b
        };
        let truncated = good[..good.len() - 3].to_vec();
        let trailing = {
            let mut b = good.clone();
            b.push(0);
            b
        };
        let future_version = {
            let mut b = good.clone();
            b[4] = 9;
            b
        };
        for (bytes, want) in [
            (bad_magic, "bad magic"),
            (truncated, "truncated"),
            (trailing, "trailing"),
            (future_version, "version"),
        ] {
            let p = dir.path().join("bad.saeo");
            std::fs::write(&p, &bytes).unwrap();
            let err = read_oracle(&p).unwrap_err().to_string();
            assert!(err.to_lowercase().contains(want), "{want}: got {err}");
        }
    }

    #[test]
    fn coeff_accessors_match_hand_case() {
        let model = build_model(&ortho_config()).unwrap();
        let mut coeffs = OracleCoeffs::new(&model);
        coeffs.push_row(&[(1, 1.5), (4, 1.25)]);
        coeffs.push_row(&[]);
        assert_eq!(coeffs.n_rows(), 2);
        assert_eq!(coeffs.nnz(), 2);
        assert_eq!(coeffs.value(0, 4), 1.25);
        assert_eq!(coeffs.value(0, 2), 0.0);
        assert_eq!(coeffs.value(1, 1), 0.0);
        let dense = coeffs.dense_row(0);
        assert_eq!(dense.len(), 8);
        assert_eq!(dense[1], 1.5);
        assert_eq!(dense.sum(), 2.75);
    }

    #[test]
    fn oracle_sae_recovers_true_coefficients() {
        let model = build_model(&ortho_config()).unwrap();
        let params = oracle_sae_params(&model).unwrap();
        let (ds, coeffs) = sample_dataset(&model, 300).unwrap();
        let x = ds.data.mapv(f64::from);
        let h = params.encode(&x.view(), EncodeMode::Infer).unwrap();
        for i in 0..300 {
            for f in 0..model.f_true {
                let truth = coeffs.value(i, f as u32);
                let got = h[[i, f]];
                if truth > 0.0 {
                    // recovered value = m + (noise projection), σ = 0.02
                    assert!((got - truth).abs() < 0.15, "row {i} f {f}: {got} vs {truth}");
                } else {
                    assert_eq!(got, 0.0, "row {i} f {f} fired spuriously");
                }
            }
        }
        // Reconstruction error is bounded by the injected noise power.
        let xhat = params.reconstruct(&x.view()).unwrap();
        let mse = (&x - &xhat).mapv(|v| v * v).sum_axis(ndarray::Axis(1)).mean().unwrap();
        assert!(
            mse <= 2.0 * model.d_model as f64 * model.noise_sigma.powi(2),
            "mse {mse}"
        );
    }

    #[test]
    fn oracle_sae_requires_orthonormal_dictionary() {
        let mut cfg = ortho_config();
        cfg.orthogonal_dictionary = false;
        cfg.f_true = 24; // overcomplete, cannot be orthonormal
        let model = build_model(&cfg).unwrap();
        assert!(oracle_sae_params(&model).is_err());
    }

    #[test]
    fn greedy_matching_recovers_a_permutation() {
        let d_true = arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        // Columns are e2, e0, e1 scaled by 3 (cosine ignores scale).
        let w_d = arr2(&[[0.0, 3.0, 0.0], [0.0, 0.0, 3.0], [3.0, 0.0, 0.0]]);
        let report = greedy_match_cosine(d_true.view(), w_d.view()).unwrap();
        assert_abs_diff_eq!(report.mean_max_cosine, 1.0, epsilon = 1e-12);
        let latents: Vec<usize> = report.matches.iter().map(|m| m.latent).collect();
        assert_eq!(latents, vec![1, 2, 0]);
    }

    #[test]
    fn greedy_matching_hand_value() {
        // f0 ↔ col0 at cos 1 is taken first, forcing f1 ↔ col1 at cos 0.6:
        // mean = (1.0 + 0.6) / 2 = 0.8.
        let d_true = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let w_d = arr2(&[[1.0, 0.8], [0.0, 0.6]]);
        let report = greedy_match_cosine(d_true.view(), w_d.view()).unwrap();
        assert_abs_diff_eq!(report.mean_max_cosine, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn unmatched_true_features_count_as_zero() {
        let d_true = arr2(&[[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]);
        let w_d = arr2(&[[0.0], [1.0]]); // a single latent, aligned with f1
        let report = greedy_match_cosine(d_true.view(), w_d.view()).unwrap();
        assert_eq!(report.matches.len(), 1);
        assert_eq!(report.matches[0].true_feature, 1);
        assert_abs_diff_eq!(report.mean_max_cosine, 1.0 / 3.0, epsilon = 1e-12);
    }
}
