//! SAEB binary format: reader, writer, and a streaming row cursor.
//!
//! Layout (all integers and floats little-endian, no compression, no padding):
//!
//! ```text
//! offset size
//! 0      4    magic "SAEB"
//! 4      2    version        u16   (current = 1)
//! 6      4    d_model        u32
//! 10     8    n_rows         u64
//! 18     4    flags          u32   bit0 seq_lens, bit1 token_ids, bit2 vocab,
//!                                  bit3 labels,   bit4 mask
//! 22     …    data           n_rows × d_model × f32, row-major
//! then, for each flag bit set, in ascending bit order:
//!        8    section_len    u64   (payload bytes)
//!        …    payload
//! ```
//!
//! Section payloads:
//!
//! * `seq_lens`  — u32 per sequence (count = section_len / 4)
//! * `token_ids` — u32 per row
//! * `vocab`     — u32 count, then per entry: u32 byte length + UTF-8 bytes
//! * `labels`    — u32 column count, then per column: u16 name length + name,
//!                 u32 n_classes, u32 background (`u32::MAX` = none),
//!                 u32 per row
//! * `mask`      — u8 per row (1 usable, 0 masked)
//!
//! A file with the same logical content always serializes to identical bytes:
//! there are no timestamps, alignment gaps, or nondeterministic orderings.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::buffer::RowSource;
use super::{ActivationDataset, LabelColumn};
use crate::error::{Result, SaeForgeError};
use ndarray::Array2;

pub const MAGIC: [u8; 4] = *b"SAEB";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 22;

const FLAG_SEQ_LENS: u32 = 1 << 0;
const FLAG_TOKEN_IDS: u32 = 1 << 1;
const FLAG_VOCAB: u32 = 1 << 2;
const FLAG_LABELS: u32 = 1 << 3;
const FLAG_MASK: u32 = 1 << 4;
const ALL_FLAGS: u32 = FLAG_SEQ_LENS | FLAG_TOKEN_IDS | FLAG_VOCAB | FLAG_LABELS | FLAG_MASK;

const BACKGROUND_NONE: u32 = u32::MAX;
const WRITE_CHUNK_ROWS: usize = 8192;

// ── Writer ──────────────────────────────────────────────────────────────────

/// Serialize a dataset to `path`. Returns the number of bytes written.
/// The dataset is validated first; an invalid dataset is never written.
pub fn write_dataset(path: &Path, ds: &ActivationDataset) -> Result<u64> {
    ds.validate()?;
    let file = File::create(path).map_err(|e| SaeForgeError::io(path, e))?;
    let mut w = CountingWriter::new(BufWriter::new(file));
    let io = |e: std::io::Error| SaeForgeError::io(path, e);

    let mut flags = 0u32;
    if ds.seq_lens.is_some() {
        flags |= FLAG_SEQ_LENS;
    }
    if ds.token_ids.is_some() {
        flags |= FLAG_TOKEN_IDS;
    }
    if ds.vocab.is_some() {
        flags |= FLAG_VOCAB;
    }
    if !ds.labels.is_empty() {
        flags |= FLAG_LABELS;
    }
    if ds.mask.is_some() {
        flags |= FLAG_MASK;
    }

    w.write_all(&MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(ds.d_model as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(ds.n_rows() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&flags.to_le_bytes()).map_err(io)?;

    // Data matrix, chunked so huge datasets never need a full byte copy.
    let mut chunk = Vec::with_capacity(WRITE_CHUNK_ROWS * ds.d_model * 4);
    for block in ds.data.axis_chunks_iter(ndarray::Axis(0), WRITE_CHUNK_ROWS.max(1)) {
        chunk.clear();
        for &v in block.iter() {
            chunk.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&chunk).map_err(io)?;
    }

    if let Some(seq_lens) = &ds.seq_lens {
        let mut payload = Vec::with_capacity(seq_lens.len() * 4);
        for &l in seq_lens {
            payload.extend_from_slice(&l.to_le_bytes());
        }
        write_section(&mut w, &payload).map_err(io)?;
    }
    if let Some(token_ids) = &ds.token_ids {
        let mut payload = Vec::with_capacity(token_ids.len() * 4);
        for &t in token_ids {
            payload.extend_from_slice(&t.to_le_bytes());
        }
        write_section(&mut w, &payload).map_err(io)?;
    }
    if let Some(vocab) = &ds.vocab {
        let mut payload = Vec::new();
        payload.extend_from_slice(&(vocab.len() as u32).to_le_bytes());
        for s in vocab {
            payload.extend_from_slice(&(s.len() as u32).to_le_bytes());
            payload.extend_from_slice(s.as_bytes());
        }
        write_section(&mut w, &payload).map_err(io)?;
    }
    if !ds.labels.is_empty() {
        let mut payload = Vec::new();
        payload.extend_from_slice(&(ds.labels.len() as u32).to_le_bytes());
        for col in &ds.labels {
            payload.extend_from_slice(&(col.name.len() as u16).to_le_bytes());
            payload.extend_from_slice(col.name.as_bytes());
            payload.extend_from_slice(&col.n_classes.to_le_bytes());
            payload.extend_from_slice(&col.background.unwrap_or(BACKGROUND_NONE).to_le_bytes());
            for &v in &col.values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_section(&mut w, &payload).map_err(io)?;
    }
    if let Some(mask) = &ds.mask {
        let payload: Vec<u8> = mask.iter().map(|&b| u8::from(b)).collect();
        write_section(&mut w, &payload).map_err(io)?;
    }

    w.flush().map_err(io)?;
    Ok(w.written)
}

fn write_section<W: Write>(w: &mut W, payload: &[u8]) -> std::io::Result<()> {
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(payload)
}

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn new(inner: W) -> Self {
        CountingWriter { inner, written: 0 }
    }
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.written += n as u64;
        Ok(n)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

// ── Header / reader plumbing ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct Header {
    d_model: usize,
    n_rows: u64,
    flags: u32,
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<Header> {
    let mut buf = [0u8; HEADER_LEN as usize];
    read_exact_ctx(r, &mut buf, path, "header")?;
    let magic: [u8; 4] = buf[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(SaeForgeError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes(buf[4..6].try_into().unwrap());
    if version == 0 || version > VERSION {
        return Err(SaeForgeError::UnsupportedVersion {
            what: "SAEB",
            found: version,
            supported: VERSION,
        });
    }
    let d_model = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
    let n_rows = u64::from_le_bytes(buf[10..18].try_into().unwrap());
    let flags = u32::from_le_bytes(buf[18..22].try_into().unwrap());
    if flags & !ALL_FLAGS != 0 {
        return Err(SaeForgeError::SidecarMismatch {
            what: format!("unknown flag bits {:#x}", flags & !ALL_FLAGS),
        });
    }
    if d_model == 0 {
        return Err(SaeForgeError::InvalidDataset("d_model is zero".into()));
    }
    Ok(Header {
        d_model,
        n_rows,
        flags,
    })
}

fn read_exact_ctx(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            SaeForgeError::Truncated {
                what: format!("{what} in {}", path.display()),
            }
        } else {
            SaeForgeError::io(path, e)
        }
    })
}

/// Cursor over one section payload; every overrun is a sidecar mismatch.
struct SectionCursor<'a> {
    buf: &'a [u8],
    pos: usize,
    name: &'static str,
}

impl<'a> SectionCursor<'a> {
    fn new(buf: &'a [u8], name: &'static str) -> Self {
        SectionCursor { buf, pos: 0, name }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SaeForgeError::SidecarMismatch {
                what: format!("{} section shorter than its contents claim", self.name),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u32_vec(&mut self, count: usize) -> Result<Vec<u32>> {
        let raw = self.take(count * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(SaeForgeError::SidecarMismatch {
                what: format!(
                    "{} section has {} trailing byte(s)",
                    self.name,
                    self.buf.len() - self.pos
                ),
            });
        }
        Ok(())
    }
}

/// Raw sidecar payloads in file order.
#[derive(Default)]
struct RawSections {
    seq_lens: Option<Vec<u8>>,
    token_ids: Option<Vec<u8>>,
    vocab: Option<Vec<u8>>,
    labels: Option<Vec<u8>>,
    mask: Option<Vec<u8>>,
}

fn read_sections(r: &mut impl Read, header: Header, path: &Path) -> Result<RawSections> {
    let mut out = RawSections::default();
    for bit in 0..5 {
        let flag = 1u32 << bit;
        if header.flags & flag == 0 {
            continue;
        }
        let mut len_buf = [0u8; 8];
        read_exact_ctx(r, &mut len_buf, path, "sidecar length prefix")?;
        let len = u64::from_le_bytes(len_buf) as usize;
        let mut payload = vec![0u8; len];
        read_exact_ctx(r, &mut payload, path, "sidecar payload")?;
        match flag {
            FLAG_SEQ_LENS => out.seq_lens = Some(payload),
            FLAG_TOKEN_IDS => out.token_ids = Some(payload),
            FLAG_VOCAB => out.vocab = Some(payload),
            FLAG_LABELS => out.labels = Some(payload),
            FLAG_MASK => out.mask = Some(payload),
            _ => unreachable!(),
        }
    }
    // Exactly at EOF now; anything further is foreign.
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(out),
        Ok(_) => Err(SaeForgeError::SidecarMismatch {
            what: "trailing bytes after final section".into(),
        }),
        Err(e) => Err(SaeForgeError::io(path, e)),
    }
}

fn parse_seq_lens(raw: &[u8]) -> Result<Vec<u32>> {
    if raw.len() % 4 != 0 {
        return Err(SaeForgeError::SidecarMismatch {
            what: "seq_lens section length not a multiple of 4".into(),
        });
    }
    let mut c = SectionCursor::new(raw, "seq_lens");
    let v = c.u32_vec(raw.len() / 4)?;
    c.finish()?;
    Ok(v)
}

fn parse_token_ids(raw: &[u8], n_rows: usize) -> Result<Vec<u32>> {
    let mut c = SectionCursor::new(raw, "token_ids");
    let v = c.u32_vec(n_rows)?;
    c.finish()?;
    Ok(v)
}

fn parse_vocab(raw: &[u8]) -> Result<Vec<String>> {
    let mut c = SectionCursor::new(raw, "vocab");
    let count = c.u32()? as usize;
    let mut vocab = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let bytes = c.take(len)?;
        let s = std::str::from_utf8(bytes).map_err(|_| SaeForgeError::SidecarMismatch {
            what: "vocab entry is not valid UTF-8".into(),
        })?;
        vocab.push(s.to_string());
    }
    c.finish()?;
    Ok(vocab)
}

fn parse_labels(raw: &[u8], n_rows: usize) -> Result<Vec<LabelColumn>> {
    let mut c = SectionCursor::new(raw, "labels");
    let n_cols = c.u32()? as usize;
    let mut cols = Vec::with_capacity(n_cols);
    for _ in 0..n_cols {
        let name_len = c.u16()? as usize;
        let name_bytes = c.take(name_len)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| SaeForgeError::SidecarMismatch {
                what: "label column name is not valid UTF-8".into(),
            })?
            .to_string();
        let n_classes = c.u32()?;
        let background_raw = c.u32()?;
        let values = c.u32_vec(n_rows)?;
        cols.push(LabelColumn {
            name,
            n_classes,
            background: (background_raw != BACKGROUND_NONE).then_some(background_raw),
            values,
        });
    }
    c.finish()?;
    Ok(cols)
}

fn parse_mask(raw: &[u8], n_rows: usize) -> Result<Vec<bool>> {
    if raw.len() != n_rows {
        return Err(SaeForgeError::SidecarMismatch {
            what: format!("mask section has {} bytes for {} rows", raw.len(), n_rows),
        });
    }
    raw.iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(SaeForgeError::SidecarMismatch {
                what: format!("mask byte {other} is neither 0 nor 1"),
            }),
        })
        .collect()
}

// ── Whole-file reader ───────────────────────────────────────────────────────

/// Read a complete dataset into memory, validating every invariant.
pub fn read_dataset(path: &Path) -> Result<ActivationDataset> {
    read_dataset_head(path, None)
}

/// Read at most `max_rows` rows (rounded DOWN to a whole number of sequences
/// when `seq_lens` is present, but never below one sequence) plus sidecars
/// sliced to match. `None` reads everything.
pub fn read_dataset_head(path: &Path, max_rows: Option<usize>) -> Result<ActivationDataset> {
    let file = File::open(path).map_err(|e| SaeForgeError::io(path, e))?;
    let mut r = BufReader::new(file);
    let header = read_header(&mut r, path)?;
    let total_rows = usize::try_from(header.n_rows).map_err(|_| {
        SaeForgeError::InvalidDataset("n_rows exceeds addressable memory".into())
    })?;
    let data_bytes = total_rows as u64 * header.d_model as u64 * 4;

    // Jump past the matrix, collect sidecars, then come back for the rows we
    // actually want. (For a full read this is one extra seek; for a capped
    // read it avoids touching most of the file.)
    r.seek(SeekFrom::Start(HEADER_LEN + data_bytes))
        .map_err(|e| SaeForgeError::io(path, e))?;
    let raw = read_sections(&mut r, header, path)?;

    let seq_lens = raw.seq_lens.as_deref().map(parse_seq_lens).transpose()?;
    let mut rows_wanted = max_rows.map_or(total_rows, |m| m.min(total_rows));
    let mut seq_prefix = None;
    if let Some(lens) = &seq_lens {
        // Align the cut to a sequence boundary (at least one sequence).
        let mut rows = 0usize;
        let mut n_seqs = 0usize;
        for &l in lens {
            let next = rows + l as usize;
            if n_seqs > 0 && next > rows_wanted {
                break;
            }
            rows = next;
            n_seqs += 1;
            if rows >= rows_wanted {
                break;
            }
        }
        rows_wanted = rows.min(total_rows);
        seq_prefix = Some(n_seqs);
    }

    r.seek(SeekFrom::Start(HEADER_LEN))
        .map_err(|e| SaeForgeError::io(path, e))?;
    let data = read_matrix(&mut r, rows_wanted, header.d_model, path)?;

    let ds = ActivationDataset {
        d_model: header.d_model,
        data,
        seq_lens: match (seq_lens, seq_prefix) {
            (Some(lens), Some(k)) => Some(lens[..k].to_vec()),
            (Some(lens), None) => Some(lens),
            (None, _) => None,
        },
        token_ids: raw
            .token_ids
            .as_deref()
            .map(|b| parse_token_ids(b, total_rows))
            .transpose()?
            .map(|v| v[..rows_wanted].to_vec()),
        vocab: raw.vocab.as_deref().map(parse_vocab).transpose()?,
        labels: raw
            .labels
            .as_deref()
            .map(|b| parse_labels(b, total_rows))
            .transpose()?
            .unwrap_or_default()
            .into_iter()
            .map(|mut col| {
                col.values.truncate(rows_wanted);
                col
            })
            .collect(),
        mask: raw
            .mask
            .as_deref()
            .map(|b| parse_mask(b, total_rows))
            .transpose()?
            .map(|v| v[..rows_wanted].to_vec()),
    };
    ds.validate()?;
    Ok(ds)
}

fn read_matrix(
    r: &mut impl Read,
    rows: usize,
    d_model: usize,
    path: &Path,
) -> Result<Array2<f32>> {
    let mut values = Vec::with_capacity(rows * d_model);
    let mut remaining = rows * d_model;
    let mut chunk = vec![0u8; (WRITE_CHUNK_ROWS * d_model * 4).min(remaining.max(1) * 4)];
    while remaining > 0 {
        let take = remaining.min(chunk.len() / 4);
        let buf = &mut chunk[..take * 4];
        read_exact_ctx(r, buf, path, "data matrix")?;
        values.extend(
            buf.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        );
        remaining -= take;
    }
    Array2::from_shape_vec((rows, d_model), values)
        .map_err(|e| SaeForgeError::InvalidDataset(format!("data shape error: {e}")))
}

// ── Streaming row cursor ────────────────────────────────────────────────────

/// Sequential reader over the usable rows of a SAEB file. Masked rows are
/// skipped at the cursor, so downstream consumers (the training buffer) only
/// ever see usable rows. With `cycle = true` the cursor restarts at the first
/// row after the last, turning a finite dump into an epoch stream.
pub struct DatasetStream {
    reader: BufReader<File>,
    path: PathBuf,
    d_model: usize,
    n_rows: u64,
    next_row: u64,
    mask: Option<Vec<bool>>,
    n_usable: u64,
    cycle: bool,
    row_bytes: Vec<u8>,
}

impl DatasetStream {
    pub fn open(path: &Path, cycle: bool) -> Result<Self> {
        let file = File::open(path).map_err(|e| SaeForgeError::io(path, e))?;
        let mut reader = BufReader::new(file);
        let header = read_header(&mut reader, path)?;
        let data_bytes = header.n_rows * header.d_model as u64 * 4;

        let mask = if header.flags & FLAG_MASK != 0 {
            reader
                .seek(SeekFrom::Start(HEADER_LEN + data_bytes))
                .map_err(|e| SaeForgeError::io(path, e))?;
            let raw = read_sections(&mut reader, header, path)?;
            let mask_raw = raw.mask.ok_or_else(|| SaeForgeError::SidecarMismatch {
                what: "mask flag set but mask section missing".into(),
            })?;
            Some(parse_mask(&mask_raw, header.n_rows as usize)?)
        } else {
            None
        };
        let n_usable = match &mask {
            None => header.n_rows,
            Some(m) => m.iter().filter(|&&b| b).count() as u64,
        };

        reader
            .seek(SeekFrom::Start(HEADER_LEN))
            .map_err(|e| SaeForgeError::io(path, e))?;
        Ok(DatasetStream {
            reader,
            path: path.to_path_buf(),
            d_model: header.d_model,
            n_rows: header.n_rows,
            next_row: 0,
            mask,
            n_usable,
            cycle,
            row_bytes: vec![0u8; header.d_model * 4],
        })
    }

    pub fn n_rows(&self) -> u64 {
        self.n_rows
    }

    pub fn n_usable(&self) -> u64 {
        self.n_usable
    }

    fn rewind(&mut self) -> Result<()> {
        self.reader
            .seek(SeekFrom::Start(HEADER_LEN))
            .map_err(|e| SaeForgeError::io(&self.path, e))?;
        self.next_row = 0;
        Ok(())
    }
}

impl RowSource for DatasetStream {
    fn d_model(&self) -> usize {
        self.d_model
    }

    fn next_row(&mut self, out: &mut [f64]) -> Result<bool> {
        debug_assert_eq!(out.len(), self.d_model);
        if self.n_usable == 0 {
            return Ok(false);
        }
        loop {
            if self.next_row == self.n_rows {
                if !self.cycle {
                    return Ok(false);
                }
                self.rewind()?;
            }
            let i = self.next_row as usize;
            self.next_row += 1;
            let usable = self.mask.as_ref().map_or(true, |m| m[i]);
            if !usable {
                // Skip the row's bytes without leaving sequential access.
                self.reader
                    .seek_relative(self.row_bytes.len() as i64)
                    .map_err(|e| SaeForgeError::io(&self.path, e))?;
                continue;
            }
            let path = self.path.clone();
            read_exact_ctx(&mut self.reader, &mut self.row_bytes, &path, "data row")?;
            for (o, c) in out.iter_mut().zip(self.row_bytes.chunks_exact(4)) {
                *o = f64::from(f32::from_le_bytes(c.try_into().unwrap()));
            }
            return Ok(true);
        }
    }

    fn rewind(&mut self) -> Result<()> {
        DatasetStream::rewind(self)
    }
}
