//! Run configuration: one JSON document drives `synth`, `train`, `eval` and
//! `report`.
//!
//! Shape (see `schemas/run_config.schema.json` for the full field list):
//!
//! ```json
//! {
//!   "seed": 0,
//!   "synth":  { "n_rows": 2000000, "generator": { ... } },
//!   "train":  { "archs": ["topk"], "width": 256, "hyperparameters": { ... } },
//!   "eval":   { "metrics": ["all-local"], ... },
//!   "judge":  { "mode": "mock", ... },
//!   "output": { "dir": "saeforge-out" }
//! }
//! ```
//!
//! Every field has a default, so `{}` is a valid document. Unknown keys are
//! rejected with the offending key path in the message. The run-level `seed`
//! is the only seed: nested seed fields must stay 0 (their defaults) and the
//! loader derives section seeds from the global one, so two configs differing
//! only in `seed` shift every stage coherently.

use crate::autointerp::RemoteJudgeConfig;
use crate::error::{Result, SaeForgeError};
use crate::metrics::{AbsorptionConfig, ProbeTrainConfig, SCR_DEFAULT_KS, TPP_DEFAULT_KS};
use crate::synth::GeneratorConfig;
use crate::train::TrainConfig;
use crate::util::derive_seed;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Probing grid default (the SCR/TPP grids live with their metrics).
pub const PROBING_DEFAULT_KS: [usize; 6] = [1, 2, 5, 10, 20, 50];

/// Metric selector names accepted by `eval`.
pub const METRIC_NAMES: [&str; 7] =
    ["core", "probing", "scr", "tpp", "absorption", "autointerp", "all-local"];

/// Architecture names accepted by `train`.
pub const ARCH_NAMES: [&str; 8] =
    ["relu", "topk", "batchtopk", "jumprelu", "gated", "panneal", "matryoshka", "pca"];

// ── Sections ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_rows: u64,
    pub generator: GeneratorConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection { n_rows: 2_000_000, generator: GeneratorConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Architectures in the sweep grid; the full grid is archs ×
    /// `hyperparameters.target_l0` (pca ignores the L0 axis).
    pub archs: Vec<String>,
    pub width: usize,
    pub hyperparameters: TrainConfig,
    /// Probe-run length for the λ → target-L0 bisection (penalized archs).
    pub lambda_search_steps: u64,
    /// JumpReLU straight-through kernel width.
    pub jumprelu_epsilon: f64,
    /// PAnneal exponent schedule endpoints.
    pub panneal_p_start: f64,
    pub panneal_p_end: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            archs: vec!["topk".into()],
            width: 256,
            hyperparameters: TrainConfig::default(),
            lambda_search_steps: 300,
            jumprelu_epsilon: 1e-3,
            panneal_p_start: 1.0,
            panneal_p_end: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Metric selectors; `--metric` on the command line overrides this list.
    pub metrics: Vec<String>,
    /// Checkpoints to score; empty means every `*/final.saec` under the
    /// output checkpoint directory.
    pub checkpoints: Vec<PathBuf>,
    pub concept_column: String,
    pub spurious_column: String,
    pub probing_ks: Vec<usize>,
    pub scr_ks: Vec<usize>,
    pub tpp_ks: Vec<usize>,
    /// Probe recipe shared by probing/SCR/TPP.
    pub probe: ProbeTrainConfig,
    pub absorption: AbsorptionConfig,
    /// Latents sampled by autointerp.
    pub autointerp_sample: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            metrics: vec!["all-local".into()],
            checkpoints: Vec::new(),
            concept_column: "concept".into(),
            spurious_column: "spurious".into(),
            probing_ks: PROBING_DEFAULT_KS.to_vec(),
            scr_ks: SCR_DEFAULT_KS.to_vec(),
            tpp_ks: TPP_DEFAULT_KS.to_vec(),
            probe: ProbeTrainConfig::default(),
            absorption: AbsorptionConfig::default(),
            autointerp_sample: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeMode {
    Mock,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockKind {
    /// Text-only keyword judge (the CI default).
    Keyword,
    /// Reads the hidden firing flags; pipeline upper bound.
    Oracle,
    /// Answers "fires" for everything; pipeline lower bound.
    AlwaysFires,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeSection {
    /// `--judge` on the command line overrides this.
    pub mode: JudgeMode,
    pub mock: MockKind,
    pub remote: RemoteJudgeConfig,
}

impl Default for JudgeSection {
    fn default() -> Self {
        JudgeSection {
            mode: JudgeMode::Mock,
            mock: MockKind::Keyword,
            remote: RemoteJudgeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Root directory; the layout below it is fixed:
    /// `dataset.saeb`, `oracle.saeo`, `checkpoints/<run>/`, `reports/`.
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("saeforge-out") }
    }
}

impl OutputSection {
    pub fn dataset_path(&self) -> PathBuf {
        self.dir.join("dataset.saeb")
    }

    pub fn oracle_path(&self) -> PathBuf {
        self.dir.join("oracle.saeo")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.dir.join("reports")
    }
}

// ── The document ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// The one seed. Section seeds are derived from it by stable tags.
    pub seed: u64,
    pub synth: SynthSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub judge: JudgeSection,
    pub output: OutputSection,
}

impl RunConfig {
    /// Parse + schema-validate a JSON document. Unknown or ill-typed keys
    /// surface with their full key path.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig =
            serde_path_to_error::deserialize(de).map_err(|e| SaeForgeError::Config {
                key_path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| SaeForgeError::io(path, e))?;
        RunConfig::from_json(&text)
    }

    /// Structural checks beyond what serde can express.
    pub fn validate(&self) -> Result<()> {
        let bad = |key_path: &str, message: String| {
            Err(SaeForgeError::Config { key_path: key_path.into(), message })
        };
        if self.synth.n_rows == 0 {
            return bad("synth.n_rows", "must be at least 1".into());
        }
        if self.train.width == 0 {
            return bad("train.width", "must be at least 1".into());
        }
        if self.train.archs.is_empty() {
            return bad("train.archs", "grid needs at least one architecture".into());
        }
        for (i, arch) in self.train.archs.iter().enumerate() {
            if !ARCH_NAMES.contains(&arch.as_str()) {
                return bad(
                    &format!("train.archs[{i}]"),
                    format!("unknown architecture {arch:?}; expected one of {ARCH_NAMES:?}"),
                );
            }
        }
        if self.train.lambda_search_steps == 0 {
            return bad("train.lambda_search_steps", "must be at least 1".into());
        }
        if self.eval.metrics.is_empty() {
            return bad("eval.metrics", "select at least one metric".into());
        }
        for (i, m) in self.eval.metrics.iter().enumerate() {
            if !METRIC_NAMES.contains(&m.as_str()) {
                return bad(
                    &format!("eval.metrics[{i}]"),
                    format!("unknown metric {m:?}; expected one of {METRIC_NAMES:?}"),
                );
            }
        }
        if self.eval.autointerp_sample == 0 {
            return bad("eval.autointerp_sample", "must be at least 1".into());
        }
        // One seed to rule them all: nested seeds stay at their 0 default.
        let nested = [
            ("synth.generator.seed", self.synth.generator.seed),
            ("train.hyperparameters.seed", self.train.hyperparameters.seed),
            ("eval.probe.seed", self.eval.probe.seed),
            ("eval.absorption.seed", self.eval.absorption.seed),
            ("eval.absorption.probe.seed", self.eval.absorption.probe.seed),
        ];
        for (key_path, value) in nested {
            if value != 0 {
                return bad(
                    key_path,
                    format!("set the run-level `seed` instead (found {value})"),
                );
            }
        }
        self.train.hyperparameters.validate()?;
        Ok(())
    }

    // ── Derived, seed-resolved section views ────────────────────────────────

    /// Generator with its seed filled in from the global seed.
    pub fn generator_resolved(&self) -> GeneratorConfig {
        let mut g = self.synth.generator.clone();
        g.seed = derive_seed(self.seed, "synth");
        g
    }

    /// Trainer hyperparameters with the derived training seed (shared by the
    /// whole grid so every run sees identical data in identical order).
    pub fn train_resolved(&self) -> TrainConfig {
        let mut t = self.train.hyperparameters.clone();
        t.seed = derive_seed(self.seed, "train");
        t
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, "eval")
    }

    pub fn probe_resolved(&self) -> ProbeTrainConfig {
        let mut p = self.eval.probe.clone();
        p.seed = self.eval_seed();
        p
    }

    pub fn absorption_resolved(&self) -> AbsorptionConfig {
        let mut a = self.eval.absorption.clone();
        a.seed = self.eval_seed();
        a.probe.seed = self.eval_seed();
        a
    }
}
