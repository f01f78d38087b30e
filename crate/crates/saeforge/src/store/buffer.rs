//! The shuffled activation buffer that feeds training.
//!
//! The buffer holds up to `capacity` usable rows. Each `sample` call first
//! refills from the source if at most half the buffer is live (this is also
//! what fills it on first use), then draws `batch_size` distinct live rows
//! uniformly without replacement. Rows leave the buffer when drawn and only
//! come back if the (cycling) source produces them again, so within one fill
//! the draws never repeat a slot.
//!
//! Determinism: given the same seed, source contents, and call sequence the
//! produced batches are identical, byte for byte.

use crate::error::{Result, SaeForgeError};
use crate::store::ActivationDataset;
use crate::util::rng_for;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Anything that can hand out activation rows in a deterministic order.
pub trait RowSource {
    fn d_model(&self) -> usize;
    /// Write the next usable row into `out`; `Ok(false)` when exhausted.
    fn next_row(&mut self, out: &mut [f64]) -> Result<bool>;
    /// Return to the first row, so the same source can feed several passes
    /// (norm estimation, then training; repeated λ-search runs).
    fn rewind(&mut self) -> Result<()>;
}

impl<T: RowSource + ?Sized> RowSource for &mut T {
    fn d_model(&self) -> usize {
        (**self).d_model()
    }
    fn next_row(&mut self, out: &mut [f64]) -> Result<bool> {
        (**self).next_row(out)
    }
    fn rewind(&mut self) -> Result<()> {
        (**self).rewind()
    }
}

/// Row source over an in-memory dataset; skips masked rows, optionally cycles.
pub struct MemorySource<'a> {
    ds: &'a ActivationDataset,
    next: usize,
    cycle: bool,
    n_usable: usize,
}

impl<'a> MemorySource<'a> {
    pub fn new(ds: &'a ActivationDataset, cycle: bool) -> Self {
        let n_usable = ds.usable_rows().len();
        MemorySource {
            ds,
            next: 0,
            cycle,
            n_usable,
        }
    }
}

impl RowSource for MemorySource<'_> {
    fn d_model(&self) -> usize {
        self.ds.d_model
    }

    fn next_row(&mut self, out: &mut [f64]) -> Result<bool> {
        if self.n_usable == 0 {
            return Ok(false);
        }
        loop {
            if self.next == self.ds.n_rows() {
                if !self.cycle {
                    return Ok(false);
                }
                self.next = 0;
            }
            let i = self.next;
            self.next += 1;
            if !self.ds.is_usable(i) {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(self.ds.data.row(i)) {
                *o = f64::from(v);
            }
            return Ok(true);
        }
    }

    fn rewind(&mut self) -> Result<()> {
        self.next = 0;
        Ok(())
    }
}

/// Shuffled training buffer. See the module docs for the refill/draw contract.
pub struct ActivationBuffer<S: RowSource> {
    source: S,
    /// `capacity × d` backing storage; rows `0..live` are live.
    storage: Array2<f64>,
    live: usize,
    capacity: usize,
    rng: ChaCha8Rng,
    source_done: bool,
    rows_drawn: u64,
}

impl<S: RowSource> ActivationBuffer<S> {
    pub fn new(source: S, capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        let d = source.d_model();
        ActivationBuffer {
            source,
            storage: Array2::zeros((capacity, d)),
            live: 0,
            capacity,
            rng: rng_for(seed, "activation-buffer"),
            source_done: false,
            rows_drawn: 0,
        }
    }

    pub fn live(&self) -> usize {
        self.live
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn rows_drawn(&self) -> u64 {
        self.rows_drawn
    }

    fn refill(&mut self) -> Result<()> {
        let d = self.storage.ncols();
        let mut row = vec![0.0f64; d];
        while self.live < self.capacity {
            if !self.source.next_row(&mut row)? {
                self.source_done = true;
                break;
            }
            self.storage
                .row_mut(self.live)
                .iter_mut()
                .zip(&row)
                .for_each(|(dst, &v)| *dst = v);
            self.live += 1;
        }
        Ok(())
    }

    /// Draw a batch of `batch_size` rows (each row appears at most once per
    /// buffer fill). Refills first whenever `live ≤ capacity / 2`.
    pub fn sample(&mut self, batch_size: usize) -> Result<Array2<f64>> {
        if self.live <= self.capacity / 2 && !self.source_done {
            self.refill()?;
        }
        if self.live < batch_size {
            return Err(SaeForgeError::DataExhausted {
                live: self.live,
                needed: batch_size,
            });
        }
        let d = self.storage.ncols();
        let mut out = Array2::zeros((batch_size, d));
        for b in 0..batch_size {
            let j = self.rng.gen_range(0..self.live);
            for (dst, &v) in out.row_mut(b).iter_mut().zip(self.storage.row(j)) {
                *dst = v;
            }
            // Plug the hole with the last live row.
            if j != self.live - 1 {
                let last = self.storage.row(self.live - 1).to_owned();
                self.storage.row_mut(j).assign(&last);
            }
            self.live -= 1;
        }
        self.rows_drawn += batch_size as u64;
        Ok(out)
    }
}
