//! Shared test oracle: an independent, naive-loop reimplementation of every
//! training objective, plus central-finite-difference machinery.
//!
//! Nothing here calls the library's forward pass; matrix products, selection
//! rules, and penalties are all re-derived with explicit loops so that a bug
//! in the library cannot hide in the oracle.

#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saeforge::sae::{
    loss_and_grads, ArchKind, ArchSpec, ExtraGrads, SaeParams, SparsitySchedule,
};

pub const GRADCHECK_DIMS: (usize, usize, usize) = (8, 16, 4); // (d, F, B)
pub const FD_STEP: f64 = 1e-5;
pub const FD_RTOL: f64 = 1e-4;
pub const FD_ATOL: f64 = 1e-7;

/// One scalar coordinate of the trainable parameter set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coord {
    WE(usize, usize),
    BE(usize),
    WD(usize, usize),
    BD(usize),
    Theta(usize),
    BGate(usize),
    RMag(usize),
    BMag(usize),
}

// ── Naive forward pass ──────────────────────────────────────────────────────

fn naive_preacts(p: &SaeParams, x: &Array2<f64>, add_bias: bool) -> Vec<Vec<f64>> {
    let (b, d) = x.dim();
    let f = p.width;
    let mut u = vec![vec![0.0; f]; b];
    for bi in 0..b {
        for j in 0..f {
            let mut acc = if add_bias { p.b_e[j] } else { 0.0 };
            for i in 0..d {
                acc += p.w_e[[j, i]] * x[[bi, i]];
            }
            u[bi][j] = acc;
        }
    }
    u
}

fn naive_recon_err(p: &SaeParams, x: &Array2<f64>, h: &[Vec<f64>], width: usize) -> f64 {
    let (b, d) = x.dim();
    let mut total = 0.0;
    for bi in 0..b {
        for i in 0..d {
            let mut xhat = p.b_d[i];
            for j in 0..width {
                xhat += p.w_d[[i, j]] * h[bi][j];
            }
            let diff = xhat - x[[bi, i]];
            total += diff * diff;
        }
    }
    total / b as f64
}

/// Sort values descending with index-ascending tie order; returns indices.
fn rank_desc(vals: &[(usize, f64)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| {
        vals[b]
            .1
            .partial_cmp(&vals[a].1)
            .unwrap()
            .then(vals[a].0.cmp(&vals[b].0))
    });
    idx
}

fn naive_topk_row(u: &[f64], k: usize) -> Vec<f64> {
    let cands: Vec<(usize, f64)> = u
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(j, &v)| (j, v))
        .collect();
    let order = rank_desc(&cands);
    let mut h = vec![0.0; u.len()];
    for &oi in order.iter().take(k) {
        let (j, v) = cands[oi];
        h[j] = v;
    }
    h
}

fn naive_batch_topk(u: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let b = u.len();
    let f = u[0].len();
    let mut cands: Vec<(usize, f64)> = Vec::new(); // (flat row-major index, value)
    for (bi, row) in u.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > 0.0 {
                cands.push((bi * f + j, v));
            }
        }
    }
    let order = rank_desc(&cands);
    let mut h = vec![vec![0.0; f]; b];
    for &oi in order.iter().take(b * k) {
        let (flat, v) = cands[oi];
        h[flat / f][flat % f] = v;
    }
    h
}

/// Total loss by naive loops. `gated_frozen` pins the decoder used by the
/// Gated aux term (stop-gradient semantics for finite differences);
/// `theta_surrogate` swaps JumpReLU's L0 count for its kernel-smoothed
/// surrogate (the function whose true gradient the straight-through estimator
/// computes).
pub fn naive_loss(
    p: &SaeParams,
    x: &Array2<f64>,
    lambda_eff: f64,
    p_eff: f64,
    gated_frozen: Option<(&Array2<f64>, &Array1<f64>)>,
    theta_surrogate: bool,
) -> f64 {
    let b = x.nrows();
    let bf = b as f64;
    let f = p.width;
    match &p.arch {
        ArchSpec::Relu { .. } | ArchSpec::PAnneal { .. } => {
            let u = naive_preacts(p, x, true);
            let h: Vec<Vec<f64>> = u
                .iter()
                .map(|row| row.iter().map(|&v| v.max(0.0)).collect())
                .collect();
            let recon = naive_recon_err(p, x, &h, f);
            let p_exp = if matches!(p.arch, ArchSpec::PAnneal { .. }) {
                p_eff
            } else {
                1.0
            };
            let mut s = 0.0;
            for row in &h {
                for &v in row {
                    if v > 0.0 {
                        s += v.powf(p_exp);
                    }
                }
            }
            recon + lambda_eff * s / bf
        }
        ArchSpec::TopK { k } => {
            let u = naive_preacts(p, x, true);
            let h: Vec<Vec<f64>> = u.iter().map(|row| naive_topk_row(row, *k)).collect();
            naive_recon_err(p, x, &h, f)
        }
        ArchSpec::BatchTopK { k, .. } => {
            let u = naive_preacts(p, x, true);
            let relu: Vec<Vec<f64>> = u
                .iter()
                .map(|row| row.iter().map(|&v| v.max(0.0)).collect())
                .collect();
            let h = naive_batch_topk(&relu, *k);
            naive_recon_err(p, x, &h, f)
        }
        ArchSpec::JumpRelu {
            theta, epsilon, ..
        } => {
            let z = naive_preacts(p, x, true);
            let mut h = vec![vec![0.0; f]; b];
            for bi in 0..b {
                for j in 0..f {
                    if z[bi][j] > theta[j] {
                        h[bi][j] = z[bi][j];
                    }
                }
            }
            let recon = naive_recon_err(p, x, &h, f);
            let mut s = 0.0;
            for bi in 0..b {
                for j in 0..f {
                    if theta_surrogate {
                        s += ((z[bi][j] - theta[j]) / epsilon + 0.5).clamp(0.0, 1.0);
                    } else if z[bi][j] > theta[j] {
                        s += 1.0;
                    }
                }
            }
            recon + lambda_eff * s / bf
        }
        ArchSpec::Gated {
            b_gate,
            r_mag,
            b_mag,
            ..
        } => {
            let z = naive_preacts(p, x, false);
            let mut h = vec![vec![0.0; f]; b];
            let mut g = vec![vec![0.0; f]; b];
            for bi in 0..b {
                for j in 0..f {
                    let gate_pre = z[bi][j] + b_gate[j];
                    if gate_pre > 0.0 {
                        g[bi][j] = gate_pre;
                        h[bi][j] = (z[bi][j] * r_mag[j].exp() + b_mag[j]).max(0.0);
                    }
                }
            }
            let recon = naive_recon_err(p, x, &h, f);
            let sparsity: f64 =
                lambda_eff * g.iter().flatten().copied().sum::<f64>() / bf;
            // Aux reconstruction from the gate path through a pinned decoder.
            let (wd, bd) = gated_frozen.unwrap_or((&p.w_d, &p.b_d));
            let d = x.ncols();
            let mut aux = 0.0;
            for bi in 0..b {
                for i in 0..d {
                    let mut xhat = bd[i];
                    for j in 0..f {
                        xhat += wd[[i, j]] * g[bi][j];
                    }
                    let diff = xhat - x[[bi, i]];
                    aux += diff * diff;
                }
            }
            recon + sparsity + aux / bf
        }
        ArchSpec::Matryoshka {
            k,
            group_boundaries,
            ..
        } => {
            let u = naive_preacts(p, x, true);
            let relu: Vec<Vec<f64>> = u
                .iter()
                .map(|row| row.iter().map(|&v| v.max(0.0)).collect())
                .collect();
            let h = naive_batch_topk(&relu, *k);
            group_boundaries
                .iter()
                .map(|&g| naive_recon_err(p, x, &h, g))
                .sum()
        }
        ArchSpec::Pca => panic!("PCA has no training loss"),
    }
}

// ── Finite differences ──────────────────────────────────────────────────────

fn apply_coord(p: &mut SaeParams, coord: Coord, delta: f64) {
    match coord {
        Coord::WE(j, i) => p.w_e[[j, i]] += delta,
        Coord::BE(j) => p.b_e[j] += delta,
        Coord::WD(i, j) => p.w_d[[i, j]] += delta,
        Coord::BD(i) => p.b_d[i] += delta,
        Coord::Theta(j) => {
            if let ArchSpec::JumpRelu { theta, .. } = &mut p.arch {
                theta[j] += delta;
            } else {
                panic!("theta coord on non-JumpReLU arch");
            }
        }
        Coord::BGate(j) | Coord::RMag(j) | Coord::BMag(j) => {
            if let ArchSpec::Gated {
                b_gate,
                r_mag,
                b_mag,
                ..
            } = &mut p.arch
            {
                match coord {
                    Coord::BGate(_) => b_gate[j] += delta,
                    Coord::RMag(_) => r_mag[j] += delta,
                    Coord::BMag(_) => b_mag[j] += delta,
                    _ => unreachable!(),
                }
            } else {
                panic!("gated coord on non-Gated arch");
            }
        }
    }
}

pub fn fd_gradient(
    p: &SaeParams,
    x: &Array2<f64>,
    sched: &SparsitySchedule,
    coord: Coord,
) -> f64 {
    // Pin the Gated aux decoder at the UNPERTURBED values in both FD
    // evaluations — the aux term is defined with a stop-gradient there.
    let frozen = if matches!(p.arch, ArchSpec::Gated { .. }) {
        Some((p.w_d.clone(), p.b_d.clone()))
    } else {
        None
    };
    let surrogate = matches!(coord, Coord::Theta(_));
    let eval = |delta: f64| {
        let mut q = p.clone();
        apply_coord(&mut q, coord, delta);
        naive_loss(
            &q,
            x,
            sched.lambda_eff,
            sched.p_eff,
            frozen.as_ref().map(|(w, b)| (w, b)),
            surrogate,
        )
    };
    (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP)
}

pub fn all_coords(p: &SaeParams) -> Vec<Coord> {
    let (f, d) = (p.width, p.d_model);
    let mut out = Vec::new();
    for j in 0..f {
        for i in 0..d {
            out.push(Coord::WE(j, i));
        }
    }
    for j in 0..f {
        out.push(Coord::BE(j));
    }
    for i in 0..d {
        for j in 0..f {
            out.push(Coord::WD(i, j));
        }
    }
    for i in 0..d {
        out.push(Coord::BD(i));
    }
    match &p.arch {
        ArchSpec::JumpRelu { .. } => {
            for j in 0..f {
                out.push(Coord::Theta(j));
            }
        }
        ArchSpec::Gated { .. } => {
            for j in 0..f {
                out.push(Coord::BGate(j));
                out.push(Coord::RMag(j));
                out.push(Coord::BMag(j));
            }
        }
        _ => {}
    }
    out
}

pub fn analytic_at(
    grads_we: &Array2<f64>,
    grads_be: &Array1<f64>,
    grads_wd: &Array2<f64>,
    grads_bd: &Array1<f64>,
    extra: &ExtraGrads,
    coord: Coord,
) -> f64 {
    match coord {
        Coord::WE(j, i) => grads_we[[j, i]],
        Coord::BE(j) => grads_be[j],
        Coord::WD(i, j) => grads_wd[[i, j]],
        Coord::BD(i) => grads_bd[i],
        Coord::Theta(j) => match extra {
            ExtraGrads::JumpRelu { theta } => theta[j],
            _ => panic!("missing JumpReLU extra grads"),
        },
        Coord::BGate(j) | Coord::RMag(j) | Coord::BMag(j) => match extra {
            ExtraGrads::Gated {
                b_gate,
                r_mag,
                b_mag,
            } => match coord {
                Coord::BGate(_) => b_gate[j],
                Coord::RMag(_) => r_mag[j],
                Coord::BMag(_) => b_mag[j],
                _ => unreachable!(),
            },
            _ => panic!("missing Gated extra grads"),
        },
    }
}

// ── Instance generation with kink-safety margins ────────────────────────────

/// Margin every pre-activation must keep from its nearest non-smooth point so
/// that a ±1e-5 finite-difference step cannot flip a gate or reorder a
/// selection. 1e-3 is two orders above the largest possible pre-activation
/// shift a step can cause here.
const KINK_MARGIN: f64 = 1e-3;
/// P-anneal's h^(p−1) has exploding curvature near h = 0; keep active units
/// clear of it so FD truncation error stays far below the tolerance.
const PANNEAL_ACTIVE_MARGIN: f64 = 1e-2;

pub fn gradcheck_arch_spec(kind: ArchKind, width: usize) -> ArchSpec {
    match kind {
        ArchKind::Relu => ArchSpec::Relu { lambda: 0.37 },
        ArchKind::TopK => ArchSpec::TopK { k: 3 },
        ArchKind::BatchTopK => ArchSpec::BatchTopK {
            k: 3,
            theta_infer: None,
        },
        // A wide kernel window makes the θ pseudo-gradient nontrivial on
        // random data (ε = 0.001 would leave nearly every θ grad at zero).
        ArchKind::JumpRelu => ArchSpec::JumpRelu {
            theta: Array1::zeros(width),
            epsilon: 1.0,
            lambda: 0.37,
        },
        ArchKind::Gated => ArchSpec::Gated {
            b_gate: Array1::zeros(width),
            r_mag: Array1::zeros(width),
            b_mag: Array1::zeros(width),
            lambda: 0.37,
        },
        ArchKind::PAnneal => ArchSpec::PAnneal {
            lambda: 0.37,
            p_start: 1.0,
            p_end: 0.2,
        },
        ArchKind::Matryoshka => ArchSpec::Matryoshka {
            k: 3,
            group_boundaries: ArchSpec::default_group_boundaries(width),
            theta_infer: None,
        },
        ArchKind::Pca => panic!("PCA is not part of the gradient suite"),
    }
}

fn random_instance(kind: ArchKind, seed: u64) -> (SaeParams, Array2<f64>) {
    let (d, f, b) = GRADCHECK_DIMS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = SaeParams::zeros(d, f, gradcheck_arch_spec(kind, f));
    p.w_e.mapv_inplace(|_| rng.gen_range(-0.7..0.7));
    p.b_e.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
    p.w_d.mapv_inplace(|_| rng.gen_range(-0.7..0.7));
    p.b_d.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
    match &mut p.arch {
        ArchSpec::JumpRelu { theta, .. } => {
            theta.mapv_inplace(|_| rng.gen_range(0.1..1.0));
        }
        ArchSpec::Gated {
            b_gate,
            r_mag,
            b_mag,
            ..
        } => {
            b_gate.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
            r_mag.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
            b_mag.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        _ => {}
    }
    let x = Array2::from_shape_fn((b, d), |_| rng.gen_range(-1.5..1.5));
    (p, x)
}

/// True when the instance keeps every gate, threshold, and selection boundary
/// far enough from a kink for central differences to be trustworthy.
fn instance_is_safe(p: &SaeParams, x: &Array2<f64>) -> bool {
    let gate_safe = |u: &Vec<Vec<f64>>| u.iter().flatten().all(|&v| v.abs() > KINK_MARGIN);
    let selection_gap_safe = |vals: &mut Vec<f64>, budget: usize| {
        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        vals.len() <= budget || vals[budget - 1] - vals[budget] > KINK_MARGIN
    };
    match &p.arch {
        ArchSpec::Relu { .. } => gate_safe(&naive_preacts(p, x, true)),
        ArchSpec::PAnneal { .. } => {
            let u = naive_preacts(p, x, true);
            gate_safe(&u)
                && u.iter()
                    .flatten()
                    .all(|&v| v <= 0.0 || v > PANNEAL_ACTIVE_MARGIN)
        }
        ArchSpec::TopK { k } => {
            let u = naive_preacts(p, x, true);
            gate_safe(&u)
                && u.iter().all(|row| {
                    let mut pos: Vec<f64> = row.iter().copied().filter(|&v| v > 0.0).collect();
                    selection_gap_safe(&mut pos, *k)
                })
        }
        ArchSpec::BatchTopK { k, .. } | ArchSpec::Matryoshka { k, .. } => {
            let u = naive_preacts(p, x, true);
            let mut pos: Vec<f64> = u.iter().flatten().copied().filter(|&v| v > 0.0).collect();
            gate_safe(&u) && selection_gap_safe(&mut pos, x.nrows() * k)
        }
        ArchSpec::JumpRelu {
            theta, epsilon, ..
        } => {
            let z = naive_preacts(p, x, true);
            z.iter().all(|row| {
                row.iter().enumerate().all(|(j, &v)| {
                    let gap = (v - theta[j]).abs();
                    // clear of the gate (z = θ) and of the surrogate's
                    // clamp corners (|z − θ| = ε/2)
                    gap > KINK_MARGIN && (gap - epsilon / 2.0).abs() > KINK_MARGIN
                })
            })
        }
        ArchSpec::Gated {
            b_gate,
            r_mag,
            b_mag,
            ..
        } => {
            let z = naive_preacts(p, x, false);
            z.iter().all(|row| {
                row.iter().enumerate().all(|(j, &v)| {
                    (v + b_gate[j]).abs() > KINK_MARGIN
                        && (v * r_mag[j].exp() + b_mag[j]).abs() > KINK_MARGIN
                })
            })
        }
        ArchSpec::Pca => false,
    }
}

/// Deterministically draw the idx-th safe instance for an architecture.
pub fn safe_instance(kind: ArchKind, idx: u64) -> (SaeParams, Array2<f64>) {
    for attempt in 0..200u64 {
        let seed = 0x5AE0_0000 + idx * 1000 + attempt + (kind as u64) * 1_000_000;
        let (p, x) = random_instance(kind, seed);
        if instance_is_safe(&p, &x) {
            return (p, x);
        }
    }
    panic!("no safe gradcheck instance found for {kind} #{idx}");
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub instances: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

/// Run the full gradient suite for one architecture: `n` safe random
/// instances, every trainable coordinate, analytic vs central differences.
pub fn gradcheck(kind: ArchKind, n: usize) -> GradCheckReport {
    let sched = SparsitySchedule {
        lambda_eff: 0.37,
        p_eff: 0.6,
    };
    let mut report = GradCheckReport {
        instances: n,
        coords_checked: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };
    for idx in 0..n as u64 {
        let (p, x) = safe_instance(kind, idx);
        let (loss, grads) = loss_and_grads(&p, &x.view(), &sched).expect("loss computes");

        // Oracle equivalence on the loss value itself (hard objective).
        let naive = naive_loss(&p, &x, sched.lambda_eff, sched.p_eff, None, false);
        let loss_err = (loss.total - naive).abs() / naive.abs().max(1.0);
        if loss_err > 1e-10 {
            report.failures.push(format!(
                "{kind} #{idx}: loss mismatch analytic={} naive={naive}",
                loss.total
            ));
        }

        for coord in all_coords(&p) {
            let a = analytic_at(&grads.w_e, &grads.b_e, &grads.w_d, &grads.b_d, &grads.extra, coord);
            let fd = fd_gradient(&p, &x, &sched, coord);
            let err = (a - fd).abs();
            let rel = err / a.abs().max(fd.abs()).max(1e-30);
            if err > FD_ATOL {
                report.max_rel_err = report.max_rel_err.max(rel);
            }
            if err > FD_RTOL * a.abs().max(fd.abs()) && err > FD_ATOL {
                report.failures.push(format!(
                    "{kind} #{idx} {coord:?}: analytic={a} fd={fd} rel={rel:.3e}"
                ));
            }
            report.coords_checked += 1;
        }
    }
    report
}

/// The seven trainable architectures, in spec order.
pub fn trainable_archs() -> [ArchKind; 7] {
    [
        ArchKind::Relu,
        ArchKind::TopK,
        ArchKind::BatchTopK,
        ArchKind::JumpRelu,
        ArchKind::Gated,
        ArchKind::PAnneal,
        ArchKind::Matryoshka,
    ]
}
