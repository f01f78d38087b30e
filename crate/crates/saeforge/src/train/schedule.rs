//! Learning-rate and sparsity schedules.
//!
//! Shapes are linear throughout: lr warms up from 0, holds, then decays to 0
//! over the final `lr_decay_fraction` of steps; the sparsity coefficient
//! ramps 0 → λ over `sparsity_warmup_steps`; P-anneal's exponent interpolates
//! p_start → p_end linearly from the end of the sparsity warmup to the final
//! step.
//!
//! Anchor values (exact):
//!   lr_at(0) = 0, lr_at(warmup) = lr, lr_at(total) = 0;
//!   λ_eff(0) = 0, λ_eff(warmup) = λ (and beyond).

use super::TrainConfig;
use crate::sae::{ArchSpec, SparsitySchedule};

/// Learning rate for the update performed at `step` (0-based; `total` is the
/// number of updates in the run).
pub fn lr_at(cfg: &TrainConfig, step: u64) -> f64 {
    let total = cfg.total_steps();
    if total == 0 {
        return 0.0;
    }
    let warmup = cfg.lr_warmup_steps;
    if warmup > 0 && step < warmup {
        // Ratio first: it is ≤ 1 exactly, so the result never exceeds lr.
        return cfg.lr * (step as f64 / warmup as f64);
    }
    let decay_len = (total as f64 * cfg.lr_decay_fraction).round() as u64;
    let decay_start = total - decay_len;
    if decay_len > 0 && step >= decay_start {
        return cfg.lr * ((total - step) as f64 / decay_len as f64);
    }
    cfg.lr
}

/// Effective sparsity coefficient (and P-anneal exponent) at `step`.
pub fn sparsity_at(cfg: &TrainConfig, arch: &ArchSpec, step: u64) -> SparsitySchedule {
    let lambda = arch.lambda().unwrap_or(0.0);
    let warmup = cfg.sparsity_warmup_steps;
    let ramp = if warmup == 0 {
        1.0
    } else {
        (step as f64 / warmup as f64).min(1.0)
    };
    let p_eff = match arch {
        ArchSpec::PAnneal { p_start, p_end, .. } => {
            let total = cfg.total_steps();
            if step <= warmup || total <= warmup {
                *p_start
            } else {
                let frac = (step - warmup) as f64 / (total - warmup) as f64;
                p_start + (p_end - p_start) * frac.min(1.0)
            }
        }
        _ => 1.0,
    };
    SparsitySchedule {
        lambda_eff: lambda * ramp,
        p_eff,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg_with_total(total_steps: u64) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 256;
        cfg.total_tokens = total_steps * 256;
        cfg
    }

    #[test]
    fn lr_anchors_match_table_values() {
        let cfg = cfg_with_total(10_000);
        assert_eq!(lr_at(&cfg, 0), 0.0);
        assert_eq!(lr_at(&cfg, 1000), 3e-4);
        assert_eq!(lr_at(&cfg, 10_000), 0.0);
        // Mid-decay: total 10000, step 9500 → 3e-4·(10000−9500)/2000.
        assert_abs_diff_eq!(lr_at(&cfg, 9500), 7.5e-5, epsilon = 1e-18);
    }

    #[test]
    fn lr_is_flat_between_warmup_and_decay() {
        let cfg = cfg_with_total(10_000);
        for step in [1000, 2500, 5000, 7999] {
            assert_eq!(lr_at(&cfg, step), 3e-4);
        }
        assert!(lr_at(&cfg, 8001) < 3e-4);
    }

    #[test]
    fn lr_warmup_is_linear() {
        let cfg = cfg_with_total(10_000);
        assert_abs_diff_eq!(lr_at(&cfg, 500), 1.5e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(lr_at(&cfg, 250), 7.5e-5, epsilon = 1e-18);
    }

    #[test]
    fn sparsity_ramp_hits_half_and_full() {
        let cfg = cfg_with_total(10_000);
        let arch = ArchSpec::Relu { lambda: 0.8 };
        assert_eq!(sparsity_at(&cfg, &arch, 0).lambda_eff, 0.0);
        assert_abs_diff_eq!(
            sparsity_at(&cfg, &arch, 2500).lambda_eff,
            0.4,
            epsilon = 1e-15
        );
        assert_eq!(sparsity_at(&cfg, &arch, 5000).lambda_eff, 0.8);
        assert_eq!(sparsity_at(&cfg, &arch, 9000).lambda_eff, 0.8);
    }

    #[test]
    fn k_architectures_have_zero_lambda() {
        let cfg = cfg_with_total(10_000);
        let arch = ArchSpec::TopK { k: 6 };
        assert_eq!(sparsity_at(&cfg, &arch, 7000).lambda_eff, 0.0);
    }

    #[test]
    fn panneal_exponent_interpolates_after_warmup() {
        let cfg = cfg_with_total(10_000);
        let arch = ArchSpec::PAnneal {
            lambda: 1.0,
            p_start: 1.0,
            p_end: 0.2,
        };
        assert_eq!(sparsity_at(&cfg, &arch, 0).p_eff, 1.0);
        assert_eq!(sparsity_at(&cfg, &arch, 5000).p_eff, 1.0);
        // Midpoint of [5000, 10000] → halfway between 1.0 and 0.2.
        assert_abs_diff_eq!(sparsity_at(&cfg, &arch, 7500).p_eff, 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(sparsity_at(&cfg, &arch, 10_000).p_eff, 0.2, epsilon = 1e-15);
    }

    #[test]
    fn non_panneal_archs_report_unit_exponent() {
        let cfg = cfg_with_total(10_000);
        assert_eq!(
            sparsity_at(&cfg, &ArchSpec::Relu { lambda: 1.0 }, 9000).p_eff,
            1.0
        );
    }
}
