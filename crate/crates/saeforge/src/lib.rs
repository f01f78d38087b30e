//! saeforge — train sparse autoencoders on activation dumps and score them with a
//! reproducible metric suite, verified end to end against a synthetic generative
//! model with known ground truth.
//!
//! The library is organized around one data artery:
//!
//! ```text
//!   synth ──► store (SAEB files) ──► train ──► sae checkpoints ──► metrics / autointerp
//!                                                                        │
//!                                                                 report (JSON/CSV)
//! ```
//!
//! * [`store`]    — the SAEB activation format, streaming readers, the shuffled
//!                  training buffer, and activation-norm estimation.
//! * [`synth`]    — sparse-feature generative model: ground-truth dictionary,
//!                  Bernoulli firing with hierarchy closure, label/token sidecars,
//!                  a surrogate readout, and the hidden coefficient oracle.
//! * [`sae`]      — the seven dictionary architectures plus the PCA baseline:
//!                  encode/decode, losses with analytic gradients, norm folding,
//!                  threshold calibration, and the SAEC checkpoint container.
//! * [`train`]    — Adam, LR/sparsity schedules, the training loop (decoder
//!                  column projection + renormalization), resume, λ targeting.
//! * [`metrics`]  — unsupervised core stats, loss recovered / KL scores, and the
//!                  supervised suite (sparse probing, SCR, TPP, absorption).
//! * [`autointerp`] — two-phase explanation/detection scoring with mock and
//!                  remote judges.
//! * [`config`]   — the run-config JSON schema shared by the CLI subcommands.
//! * [`report`]   — metric report records, aggregation to CSV and plot data.

pub mod autointerp;
pub mod config;
pub mod error;
pub mod metrics;
pub mod report;
pub mod sae;
pub mod store;
pub mod synth;
pub mod train;
pub mod util;

pub use error::SaeForgeError;
