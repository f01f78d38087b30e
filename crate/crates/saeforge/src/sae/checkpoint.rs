//! Checkpoint container: an SAEB-style binary file ("SAEC") holding one
//! model's parameters plus enough trainer state to resume bit-exactly.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//!   offset  size  field
//!   0       4     magic "SAEC"
//!   4       2     format version (u16, currently 1)
//!   6       1     arch tag (u8; see ARCH_* below)
//!   7       1     flags (bit0 = norm folded, bit1 = optimizer state present,
//!                        bit2 = theta_infer present)
//!   8       4     d_model (u32)
//!   12      4     width (u32)
//!   16      8     training step (u64)
//!   24      8     norm_scale (f64)
//!   32      ...   W_E (width×d_model f64, row-major), b_E (width),
//!                 W_D (d_model×width, row-major), b_D (d_model)
//!   ...           architecture section (per-tag, fixed layout)
//!   ...           optimizer section if flagged: t u64, m f64×len, v f64×len
//! ```
//!
//! Every section's size is fully determined by the header, so the format
//! needs no length prefixes; trailing bytes are rejected.

use super::{ArchSpec, SaeParams};
use crate::error::{Result, SaeForgeError};
use ndarray::{Array1, Array2};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"SAEC";
const VERSION: u16 = 1;

const FLAG_FOLDED: u8 = 1 << 0;
const FLAG_OPTIMIZER: u8 = 1 << 1;
const FLAG_THETA_INFER: u8 = 1 << 2;

const ARCH_RELU: u8 = 0;
const ARCH_TOPK: u8 = 1;
const ARCH_BATCHTOPK: u8 = 2;
const ARCH_JUMPRELU: u8 = 3;
const ARCH_GATED: u8 = 4;
const ARCH_PANNEAL: u8 = 5;
const ARCH_MATRYOSHKA: u8 = 6;
const ARCH_PCA: u8 = 7;

/// Adam state flattened in parameter order (the trainer owns the ordering;
/// this container just round-trips the numbers).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerBlob {
    /// Number of Adam updates applied so far (bias-correction counter).
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One saved model. `folded` says whether `params` are already in raw-input
/// space (norm scale folded in) or still in normalized training space.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: SaeParams,
    pub step: u64,
    pub norm_scale: f64,
    pub folded: bool,
    pub optimizer: Option<OptimizerBlob>,
}

impl Checkpoint {
    /// Parameters ready for inference on raw (unnormalized) activations:
    /// folds `norm_scale` in if the checkpoint was saved unfolded.
    pub fn into_eval_params(self) -> Result<SaeParams> {
        let mut params = self.params;
        if !self.folded {
            params.fold_norm_scale(self.norm_scale)?;
        }
        Ok(params)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(|e| SaeForgeError::io(path, e))?;
    let mut w = Sink {
        inner: BufWriter::new(file),
        path,
    };

    let p = &ckpt.params;
    let mut flags = 0u8;
    if ckpt.folded {
        flags |= FLAG_FOLDED;
    }
    if ckpt.optimizer.is_some() {
        flags |= FLAG_OPTIMIZER;
    }
    if theta_infer_of(&p.arch).is_some() {
        flags |= FLAG_THETA_INFER;
    }

    w.bytes(&MAGIC)?;
    w.u16(VERSION)?;
    w.u8(arch_tag(&p.arch))?;
    w.u8(flags)?;
    w.u32(p.d_model as u32)?;
    w.u32(p.width as u32)?;
    w.u64(ckpt.step)?;
    w.f64(ckpt.norm_scale)?;

    w.f64_iter(p.w_e.iter().copied())?;
    w.f64_iter(p.b_e.iter().copied())?;
    w.f64_iter(p.w_d.iter().copied())?;
    w.f64_iter(p.b_d.iter().copied())?;

    match &p.arch {
        ArchSpec::Relu { lambda } => w.f64(*lambda)?,
        ArchSpec::TopK { k } => w.u32(*k as u32)?,
        ArchSpec::BatchTopK { k, theta_infer } => {
            w.u32(*k as u32)?;
            if let Some(t) = theta_infer {
                w.f64(*t)?;
            }
        }
        ArchSpec::JumpRelu {
            theta,
            epsilon,
            lambda,
        } => {
            w.f64(*epsilon)?;
            w.f64(*lambda)?;
            w.f64_iter(theta.iter().copied())?;
        }
        ArchSpec::Gated {
            b_gate,
            r_mag,
            b_mag,
            lambda,
        } => {
            w.f64(*lambda)?;
            w.f64_iter(b_gate.iter().copied())?;
            w.f64_iter(r_mag.iter().copied())?;
            w.f64_iter(b_mag.iter().copied())?;
        }
        ArchSpec::PAnneal {
            lambda,
            p_start,
            p_end,
        } => {
            w.f64(*lambda)?;
            w.f64(*p_start)?;
            w.f64(*p_end)?;
        }
        ArchSpec::Matryoshka {
            k,
            group_boundaries,
            theta_infer,
        } => {
            w.u32(*k as u32)?;
            w.u32(group_boundaries.len() as u32)?;
            for &g in group_boundaries {
                w.u32(g as u32)?;
            }
            if let Some(t) = theta_infer {
                w.f64(*t)?;
            }
        }
        ArchSpec::Pca => {}
    }

    if let Some(opt) = &ckpt.optimizer {
        w.u64(opt.t)?;
        w.u64(opt.m.len() as u64)?;
        w.f64_iter(opt.m.iter().copied())?;
        w.u64(opt.v.len() as u64)?;
        w.f64_iter(opt.v.iter().copied())?;
    }

    w.inner
        .flush()
        .map_err(|e| SaeForgeError::io(path, e))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| SaeForgeError::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
    };

    let magic = r.array::<4>("checkpoint magic")?;
    if magic != MAGIC {
        return Err(SaeForgeError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u16("checkpoint version")?;
    if version != VERSION {
        return Err(SaeForgeError::UnsupportedVersion {
            what: "checkpoint",
            found: version,
            supported: VERSION,
        });
    }
    let tag = r.u8("arch tag")?;
    let flags = r.u8("flags")?;
    if flags & !(FLAG_FOLDED | FLAG_OPTIMIZER | FLAG_THETA_INFER) != 0 {
        return Err(SaeForgeError::UnsupportedVersion {
            what: "checkpoint flags",
            found: flags as u16,
            supported: VERSION,
        });
    }
    let d_model = r.u32("d_model")? as usize;
    let width = r.u32("width")? as usize;
    if d_model == 0 || width == 0 {
        return Err(SaeForgeError::InvalidDataset(format!(
            "checkpoint header has degenerate shape {width}×{d_model}"
        )));
    }
    let step = r.u64("step")?;
    let norm_scale = r.f64("norm_scale")?;

    let w_e = r.matrix(width, d_model, "W_E")?;
    let b_e = r.vector(width, "b_E")?;
    let w_d = r.matrix(d_model, width, "W_D")?;
    let b_d = r.vector(d_model, "b_D")?;

    let has_theta = flags & FLAG_THETA_INFER != 0;
    let arch = match tag {
        ARCH_RELU => ArchSpec::Relu {
            lambda: r.f64("lambda")?,
        },
        ARCH_TOPK => ArchSpec::TopK {
            k: r.u32("k")? as usize,
        },
        ARCH_BATCHTOPK => ArchSpec::BatchTopK {
            k: r.u32("k")? as usize,
            theta_infer: if has_theta {
                Some(r.f64("theta_infer")?)
            } else {
                None
            },
        },
        ARCH_JUMPRELU => {
            let epsilon = r.f64("epsilon")?;
            let lambda = r.f64("lambda")?;
            let theta = r.vector(width, "theta")?;
            ArchSpec::JumpRelu {
                theta,
                epsilon,
                lambda,
            }
        }
        ARCH_GATED => {
            let lambda = r.f64("lambda")?;
            let b_gate = r.vector(width, "b_gate")?;
            let r_mag = r.vector(width, "r_mag")?;
            let b_mag = r.vector(width, "b_mag")?;
            ArchSpec::Gated {
                b_gate,
                r_mag,
                b_mag,
                lambda,
            }
        }
        ARCH_PANNEAL => ArchSpec::PAnneal {
            lambda: r.f64("lambda")?,
            p_start: r.f64("p_start")?,
            p_end: r.f64("p_end")?,
        },
        ARCH_MATRYOSHKA => {
            let k = r.u32("k")? as usize;
            let n_groups = r.u32("group count")? as usize;
            let mut group_boundaries = Vec::with_capacity(n_groups);
            for _ in 0..n_groups {
                group_boundaries.push(r.u32("group boundary")? as usize);
            }
            ArchSpec::Matryoshka {
                k,
                group_boundaries,
                theta_infer: if has_theta {
                    Some(r.f64("theta_infer")?)
                } else {
                    None
                },
            }
        }
        ARCH_PCA => ArchSpec::Pca,
        other => {
            return Err(SaeForgeError::UnsupportedVersion {
                what: "checkpoint arch tag",
                found: other as u16,
                supported: ARCH_PCA as u16,
            })
        }
    };

    let optimizer = if flags & FLAG_OPTIMIZER != 0 {
        let t = r.u64("optimizer t")?;
        let m_len = r.u64("optimizer m length")? as usize;
        let m = r.f64_vec(m_len, "optimizer m")?;
        let v_len = r.u64("optimizer v length")? as usize;
        let v = r.f64_vec(v_len, "optimizer v")?;
        Some(OptimizerBlob { t, m, v })
    } else {
        None
    };

    let mut probe = [0u8; 1];
    match r.inner.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(SaeForgeError::SidecarMismatch {
                what: "checkpoint has trailing bytes after the last section".into(),
            })
        }
        Err(e) => return Err(SaeForgeError::io(path, e)),
    }

    let params = SaeParams {
        d_model,
        width,
        w_e,
        b_e,
        w_d,
        b_d,
        arch,
    };
    params.validate()?;
    Ok(Checkpoint {
        params,
        step,
        norm_scale,
        folded: flags & FLAG_FOLDED != 0,
        optimizer,
    })
}

fn arch_tag(arch: &ArchSpec) -> u8 {
    match arch {
        ArchSpec::Relu { .. } => ARCH_RELU,
        ArchSpec::TopK { .. } => ARCH_TOPK,
        ArchSpec::BatchTopK { .. } => ARCH_BATCHTOPK,
        ArchSpec::JumpRelu { .. } => ARCH_JUMPRELU,
        ArchSpec::Gated { .. } => ARCH_GATED,
        ArchSpec::PAnneal { .. } => ARCH_PANNEAL,
        ArchSpec::Matryoshka { .. } => ARCH_MATRYOSHKA,
        ArchSpec::Pca => ARCH_PCA,
    }
}

fn theta_infer_of(arch: &ArchSpec) -> Option<f64> {
    match arch {
        ArchSpec::BatchTopK { theta_infer, .. }
        | ArchSpec::Matryoshka { theta_infer, .. } => *theta_infer,
        _ => None,
    }
}

// ── Little-endian plumbing ──────────────────────────────────────────────────

struct Sink<'a, W: Write> {
    inner: W,
    path: &'a Path,
}

impl<W: Write> Sink<'_, W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner
            .write_all(b)
            .map_err(|e| SaeForgeError::io(self.path, e))
    }
    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }
    fn u16(&mut self, v: u16) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64_iter(&mut self, vals: impl Iterator<Item = f64>) -> Result<()> {
        for v in vals {
            self.f64(v)?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                SaeForgeError::Truncated { what: what.into() }
            } else {
                SaeForgeError::io("<checkpoint>", e)
            }
        })?;
        Ok(buf)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }
    fn f64_vec(&mut self, len: usize, what: &str) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.f64(what)?);
        }
        Ok(out)
    }
    fn vector(&mut self, len: usize, what: &str) -> Result<Array1<f64>> {
        Ok(Array1::from_vec(self.f64_vec(len, what)?))
    }
    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
        let flat = self.f64_vec(rows * cols, what)?;
        Array2::from_shape_vec((rows, cols), flat).map_err(|e| SaeForgeError::ShapeMismatch {
            context: "checkpoint tensor",
            expected: format!("{rows}×{cols}"),
            found: e.to_string(),
        })
    }
}
