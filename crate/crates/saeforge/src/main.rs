//! saeforge — synthesize activations, train the SAE zoo, score it, report.
//!
//! Exit codes are a stable contract: 0 success, 1 runtime/I-O trouble,
//! 2 configuration rejected. Progress goes to stderr, machine-readable
//! summaries to stdout.

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use saeforge::autointerp::{
    run_autointerp, AlwaysFiresJudge, Judge, KeywordMockJudge, OracleMockJudge, RemoteJudge,
};
use saeforge::config::{JudgeMode, MockKind, RunConfig};
use saeforge::metrics::{
    absorption_eval, core_stats, kl_score, loss_recovered, recon_bias_gamma, scr_eval,
    sparse_probing_eval, tpp_eval, CoreMetricsReport,
};
use saeforge::report::{
    load_reports, reports_to_csv, reports_to_plot_data, write_report, MetricReport, PerKEntry,
    SaeIdentifier, REPORT_FORMAT_VERSION,
};
use saeforge::sae::{pca_fit, read_checkpoint, write_checkpoint, ArchSpec, Checkpoint};
use saeforge::store::{read_dataset, read_dataset_head, ActivationDataset, DatasetStream};
use saeforge::synth::{
    build_model, sample_dataset, write_oracle, GroundTruthModel, NEXT_TOKEN_COLUMN,
};
use saeforge::train::{fit_lambda_for_target_l0, train, TrainConfig};
use saeforge::SaeForgeError;
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "saeforge", version, about = "SAE training + metric workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum JudgeArg {
    Mock,
    Remote,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic activation dataset and its oracle sidecar.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the (architecture × target-L0) grid on the dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run grid entries on one thread each instead of sequentially.
        #[arg(long)]
        parallel: bool,
    },
    /// Score checkpoints with the metric suite; one JSON report per (sae, metric).
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// core | probing | scr | tpp | absorption | autointerp | all-local
        #[arg(long)]
        metric: Option<String>,
        /// Override the configured judge backend.
        #[arg(long, value_enum)]
        judge: Option<JudgeArg>,
    },
    /// Aggregate reports into a tidy CSV and plot-ready JSON.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth { config } => cmd_synth(&config),
        Command::Train { config, parallel } => cmd_train(&config, parallel),
        Command::Eval { config, metric, judge } => cmd_eval(&config, metric, judge),
        Command::Report { config } => cmd_report(&config),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

type Result<T> = std::result::Result<T, SaeForgeError>;

// ── synth ───────────────────────────────────────────────────────────────────

fn cmd_synth(config_path: &Path) -> Result<i32> {
    let config = RunConfig::load(config_path)?;
    let generator = config.generator_resolved();
    let model = build_model(&generator)?;
    eprintln!(
        "[synth] d_model {} f_true {} -> {} rows",
        model.d_model, model.f_true, config.synth.n_rows
    );
    let (ds, coeffs) = sample_dataset(&model, config.synth.n_rows as usize)?;

    let out = &config.output;
    std::fs::create_dir_all(&out.dir).map_err(|e| SaeForgeError::io(&out.dir, e))?;
    let dataset_path = out.dataset_path();
    let oracle_path = out.oracle_path();
    let dataset_bytes = saeforge::store::write_dataset(&dataset_path, &ds)?;
    let oracle_bytes = write_oracle(&oracle_path, &coeffs)?;

    let summary = json!({
        "rows": ds.n_rows(),
        "d_model": ds.d_model,
        "f_true": model.f_true,
        "sequences": ds.seq_lens.as_ref().map(|l| l.len()),
        "label_columns": ds.labels.iter().map(|l| l.name.clone()).collect::<Vec<_>>(),
        "dataset": dataset_path,
        "dataset_bytes": dataset_bytes,
        "oracle": oracle_path,
        "oracle_bytes": oracle_bytes,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(0)
}

// ── train ───────────────────────────────────────────────────────────────────

/// One cell of the sweep grid.
struct GridEntry {
    arch_name: String,
    target_l0: Option<u32>,
    dir: PathBuf,
}

fn grid_entries(config: &RunConfig, train_cfg: &TrainConfig) -> Vec<GridEntry> {
    let base = config.output.checkpoints_dir();
    let mut entries = Vec::new();
    for arch in &config.train.archs {
        if arch == "pca" {
            entries.push(GridEntry {
                arch_name: arch.clone(),
                target_l0: None,
                dir: base.join("pca"),
            });
            continue;
        }
        for &t in &train_cfg.target_l0 {
            entries.push(GridEntry {
                arch_name: arch.clone(),
                target_l0: Some(t),
                dir: base.join(format!("{arch}-l0{t}")),
            });
        }
    }
    entries
}

/// First `cap` usable rows as an f64 matrix (for PCA fits and λ probes).
fn head_rows_f64(ds: &ActivationDataset, cap: usize) -> Array2<f64> {
    let rows = ds.usable_rows();
    let take = cap.min(rows.len());
    let mut out = Array2::zeros((take, ds.d_model));
    for (r, &i) in rows[..take].iter().enumerate() {
        out.row_mut(r).assign(&ds.row_f64(i));
    }
    out
}

/// Architecture spec for one grid entry; λ-penalized archs get a placeholder
/// λ that the bisection fills in.
fn arch_spec_for(config: &RunConfig, name: &str, target: Option<u32>) -> Result<ArchSpec> {
    let width = config.train.width;
    let t = target.map(|t| t as usize);
    let spec = match name {
        "relu" => ArchSpec::Relu { lambda: 0.0 },
        "topk" => ArchSpec::TopK { k: t.expect("grid gives k-archs a target") },
        "batchtopk" => ArchSpec::BatchTopK {
            k: t.expect("grid gives k-archs a target"),
            theta_infer: None,
        },
        "jumprelu" => ArchSpec::JumpRelu {
            theta: ndarray::Array1::zeros(0),
            epsilon: config.train.jumprelu_epsilon,
            lambda: 0.0,
        },
        "gated" => ArchSpec::Gated {
            b_gate: ndarray::Array1::zeros(0),
            r_mag: ndarray::Array1::zeros(0),
            b_mag: ndarray::Array1::zeros(0),
            lambda: 0.0,
        },
        "panneal" => ArchSpec::PAnneal {
            lambda: 0.0,
            p_start: config.train.panneal_p_start,
            p_end: config.train.panneal_p_end,
        },
        "matryoshka" => ArchSpec::Matryoshka {
            k: t.expect("grid gives k-archs a target"),
            group_boundaries: ArchSpec::default_group_boundaries(width),
            theta_infer: None,
        },
        other => {
            return Err(SaeForgeError::Config {
                key_path: "train.archs".into(),
                message: format!("unknown architecture {other:?}"),
            })
        }
    };
    Ok(spec)
}

/// Train one grid entry end to end. Returns (steps, fitted λ if searched).
fn run_grid_entry(
    config: &RunConfig,
    train_cfg: &TrainConfig,
    entry: &GridEntry,
    dataset_path: &Path,
    eval_rows: &Array2<f64>,
    d_model: usize,
) -> Result<(u64, Option<f64>)> {
    let width = config.train.width;
    if entry.arch_name == "pca" {
        let pca_width = width.min(d_model);
        if pca_width < width {
            eprintln!("[train] pca width clamped to d_model = {d_model}");
        }
        let (params, _eigvals) = pca_fit(&eval_rows.view(), pca_width)?;
        std::fs::create_dir_all(&entry.dir).map_err(|e| SaeForgeError::io(&entry.dir, e))?;
        let path = entry.dir.join("final.saec");
        write_checkpoint(
            &path,
            &Checkpoint {
                params,
                step: 0,
                norm_scale: 1.0,
                folded: true,
                optimizer: None,
            },
        )?;
        eprintln!("[train] pca fitted on {} rows -> {}", eval_rows.nrows(), path.display());
        return Ok((0, None));
    }

    let mut spec = arch_spec_for(config, &entry.arch_name, entry.target_l0)?;
    let mut fitted_lambda = None;
    if spec.lambda().is_some() {
        let target = f64::from(entry.target_l0.expect("λ archs carry a target"));
        let scratch = entry.dir.join("lambda-search");
        let mut search_source = DatasetStream::open(dataset_path, true)?;
        let fit = fit_lambda_for_target_l0(
            train_cfg,
            &spec,
            d_model,
            width,
            &mut search_source,
            &eval_rows.view(),
            target,
            config.train.lambda_search_steps,
            &scratch,
        )?;
        eprintln!(
            "[train] {} l0 {target}: lambda {:.6} (probe L0 {:.2}, {} runs)",
            entry.arch_name, fit.lambda, fit.achieved_l0, fit.evaluations
        );
        spec.set_lambda(fit.lambda);
        fitted_lambda = Some(fit.lambda);
    }

    let source = DatasetStream::open(dataset_path, true)?;
    let outcome = train(train_cfg, spec, d_model, width, source, &entry.dir)?;
    eprintln!(
        "[train] {} target {:?} done -> {}",
        entry.arch_name,
        entry.target_l0,
        outcome.final_checkpoint.display()
    );
    Ok((train_cfg.total_steps(), fitted_lambda))
}

fn cmd_train(config_path: &Path, parallel: bool) -> Result<i32> {
    let config = RunConfig::load(config_path)?;
    let train_cfg = config.train_resolved();
    let dataset_path = config.output.dataset_path();

    // Fail fast (exit 1) when the dataset is missing.
    let head = read_dataset_head(&dataset_path, Some(train_cfg.norm_sample_rows.max(1)))?;
    let d_model = head.d_model;
    let eval_rows = head_rows_f64(&head, train_cfg.norm_sample_rows.max(1));
    drop(head);

    let entries = grid_entries(&config, &train_cfg);
    eprintln!(
        "[train] {} grid entr{} ({} mode)",
        entries.len(),
        if entries.len() == 1 { "y" } else { "ies" },
        if parallel { "parallel" } else { "sequential" }
    );

    let mut results: Vec<(u64, Option<f64>)> = Vec::with_capacity(entries.len());
    if parallel {
        let slots: Vec<Result<(u64, Option<f64>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = entries
                .iter()
                .map(|entry| {
                    let config = &config;
                    let train_cfg = &train_cfg;
                    let dataset_path = &dataset_path;
                    let eval_rows = &eval_rows;
                    scope.spawn(move || {
                        run_grid_entry(config, train_cfg, entry, dataset_path, eval_rows, d_model)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        });
        for slot in slots {
            results.push(slot?);
        }
    } else {
        for entry in &entries {
            results.push(run_grid_entry(
                &config,
                &train_cfg,
                entry,
                &dataset_path,
                &eval_rows,
                d_model,
            )?);
        }
    }

    let runs: Vec<serde_json::Value> = entries
        .iter()
        .zip(&results)
        .map(|(entry, (steps, lambda))| {
            json!({
                "arch": entry.arch_name,
                "target_l0": entry.target_l0,
                "dir": entry.dir,
                "final_checkpoint": entry.dir.join("final.saec"),
                "steps": steps,
                "lambda": lambda,
            })
        })
        .collect();
    let summary = json!({ "dataset": dataset_path, "width": config.train.width, "runs": runs });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(0)
}

// ── eval ────────────────────────────────────────────────────────────────────

/// Expand the metric selector list into concrete metric names.
fn expand_metrics(
    selected: &[String],
    judge_mode: JudgeMode,
    remote_credential_present: bool,
) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut push = |name: &str| {
        if !out.iter().any(|m| m == name) {
            out.push(name.to_string());
        }
    };
    for sel in selected {
        if sel == "all-local" {
            for m in ["core", "probing", "scr", "tpp", "absorption"] {
                push(m);
            }
            match judge_mode {
                JudgeMode::Mock => push("autointerp"),
                JudgeMode::Remote if remote_credential_present => push("autointerp"),
                JudgeMode::Remote => eprintln!(
                    "[eval] all-local: skipping autointerp (remote judge without a credential); \
                     select --metric autointerp to force it"
                ),
            }
        } else {
            push(sel);
        }
    }
    out
}

/// Checkpoints to score: explicit list, else every `*/final.saec` under the
/// checkpoint directory, sorted for determinism.
fn discover_checkpoints(config: &RunConfig) -> Result<Vec<PathBuf>> {
    if !config.eval.checkpoints.is_empty() {
        return Ok(config.eval.checkpoints.clone());
    }
    let dir = config.output.checkpoints_dir();
    let entries = std::fs::read_dir(&dir).map_err(|e| SaeForgeError::io(&dir, e))?;
    let mut found = Vec::new();
    for entry in entries.filter_map(|e| e.ok()) {
        let candidate = entry.path().join("final.saec");
        if candidate.is_file() {
            found.push(candidate);
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(SaeForgeError::Metric(format!(
            "no checkpoints found under {}; run `saeforge train` first",
            dir.display()
        )));
    }
    Ok(found)
}

/// Read target L0 back out of a run directory name (`<arch>-l0<t>`).
fn target_l0_from_path(path: &Path) -> Option<u32> {
    let dir = path.parent()?.file_name()?.to_str()?;
    dir.rsplit_once("-l0")?.1.parse().ok()
}

fn sae_identifier(path: &Path, ckpt: &Checkpoint) -> SaeIdentifier {
    let arch = ckpt.params.arch.kind().name().to_string();
    let target_l0 = ckpt
        .params
        .arch
        .k()
        .map(|k| k as u32)
        .or_else(|| target_l0_from_path(path));
    SaeIdentifier {
        arch,
        width: ckpt.params.width,
        target_l0,
        checkpoint_step: ckpt.step,
        checkpoint: path.display().to_string(),
    }
}

struct MetricOutcome {
    scalars: BTreeMap<String, f64>,
    per_k: Vec<PerKEntry>,
    detail: serde_json::Value,
}

fn to_detail<T: serde::Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).unwrap_or(serde_json::Value::Null)
}

fn run_metric(
    metric: &str,
    config: &RunConfig,
    params: &saeforge::sae::SaeParams,
    ds: &ActivationDataset,
    model: &GroundTruthModel,
    targets: &[u32],
    judge: Option<&dyn Judge>,
) -> Result<MetricOutcome> {
    let eval = &config.eval;
    let probe_cfg = config.probe_resolved();
    match metric {
        "core" => {
            let stats = core_stats(params, ds)?;
            let lr = loss_recovered(params, ds, model, targets)?;
            let kl = kl_score(params, ds, model)?;
            let gamma = recon_bias_gamma(params, ds)?;
            let full = CoreMetricsReport::assemble(&stats, lr, kl, gamma);
            let mut scalars = BTreeMap::new();
            scalars.insert("l0_mean".into(), full.l0_mean);
            scalars.insert("mse".into(), full.mse);
            scalars.insert("fvu".into(), full.fvu);
            scalars.insert("loss_recovered".into(), full.loss_recovered);
            scalars.insert("kl_score".into(), full.kl_score);
            scalars.insert("recon_bias_gamma".into(), full.recon_bias_gamma);
            scalars.insert("max_latent_cosine".into(), full.max_latent_cosine);
            scalars.insert("high_freq_fraction".into(), full.high_freq_fraction);
            scalars.insert("dead_fraction".into(), full.dead_fraction);
            Ok(MetricOutcome { scalars, per_k: Vec::new(), detail: to_detail(&full) })
        }
        "probing" => {
            let report = sparse_probing_eval(
                params,
                ds,
                &eval.concept_column,
                &eval.probing_ks,
                &probe_cfg,
            )?;
            let per_k = report
                .ks
                .iter()
                .zip(&report.accuracy_per_k)
                .map(|(&k, &score)| PerKEntry { name: "accuracy".into(), k, score })
                .collect();
            Ok(MetricOutcome { scalars: BTreeMap::new(), per_k, detail: to_detail(&report) })
        }
        "scr" => {
            let report = scr_eval(
                params,
                ds,
                &eval.concept_column,
                &eval.spurious_column,
                &eval.scr_ks,
                &probe_cfg,
            )?;
            let mut scalars = BTreeMap::new();
            scalars.insert("a_base".into(), report.a_base);
            scalars.insert("a_oracle".into(), report.a_oracle);
            let per_k = report
                .ks
                .iter()
                .zip(&report.s_shift_per_k)
                .map(|(&k, &score)| PerKEntry { name: "s_shift".into(), k, score })
                .collect();
            Ok(MetricOutcome { scalars, per_k, detail: to_detail(&report) })
        }
        "tpp" => {
            let report =
                tpp_eval(params, ds, &eval.concept_column, &eval.tpp_ks, &probe_cfg)?;
            let mut scalars = BTreeMap::new();
            let baseline_mean = report.baseline_accuracy.iter().sum::<f64>()
                / report.baseline_accuracy.len().max(1) as f64;
            scalars.insert("baseline_accuracy_mean".into(), baseline_mean);
            let mut per_k: Vec<PerKEntry> = report
                .ks
                .iter()
                .zip(&report.tpp_per_k)
                .map(|(&k, &score)| PerKEntry { name: "tpp".into(), k, score })
                .collect();
            per_k.extend(
                report
                    .ks
                    .iter()
                    .zip(&report.appendix_sign_per_k)
                    .map(|(&k, &score)| PerKEntry { name: "tpp_appendix_sign".into(), k, score }),
            );
            Ok(MetricOutcome { scalars, per_k, detail: to_detail(&report) })
        }
        "absorption" => {
            let cfg = config.absorption_resolved();
            let report = absorption_eval(params, ds, &eval.concept_column, &cfg)?;
            let mut scalars = BTreeMap::new();
            scalars.insert("mean_absorption".into(), report.mean_absorption);
            scalars.insert("complement".into(), report.complement);
            Ok(MetricOutcome { scalars, per_k: Vec::new(), detail: to_detail(&report) })
        }
        "autointerp" => {
            let judge = judge.ok_or_else(|| SaeForgeError::Judge {
                attempts: 0,
                message: "no judge available (remote judge failed to initialize?)".into(),
            })?;
            let report = run_autointerp(
                params,
                ds,
                judge,
                Some(eval.autointerp_sample),
                config.eval_seed(),
            )?;
            let mut scalars = BTreeMap::new();
            scalars.insert("mean_accuracy".into(), report.mean_accuracy);
            scalars.insert("evaluated".into(), report.evaluated as f64);
            scalars.insert("non_dead".into(), report.non_dead as f64);
            scalars.insert("failed".into(), report.failed.len() as f64);
            Ok(MetricOutcome { scalars, per_k: Vec::new(), detail: to_detail(&report) })
        }
        other => Err(SaeForgeError::Metric(format!("unknown metric selector {other:?}"))),
    }
}

fn cmd_eval(
    config_path: &Path,
    metric_flag: Option<String>,
    judge_flag: Option<JudgeArg>,
) -> Result<i32> {
    let mut config = RunConfig::load(config_path)?;
    // The override becomes part of the config echo (and so of report
    // identity): a mock run and a remote run must never share a cache slot.
    if let Some(judge) = judge_flag {
        config.judge.mode = match judge {
            JudgeArg::Mock => JudgeMode::Mock,
            JudgeArg::Remote => JudgeMode::Remote,
        };
    }
    let judge_mode = config.judge.mode;
    let selected: Vec<String> = match metric_flag {
        Some(m) => vec![m],
        None => config.eval.metrics.clone(),
    };
    for m in &selected {
        if !saeforge::config::METRIC_NAMES.contains(&m.as_str()) {
            return Err(SaeForgeError::Config {
                key_path: "--metric".into(),
                message: format!(
                    "unknown metric {m:?}; expected one of {:?}",
                    saeforge::config::METRIC_NAMES
                ),
            });
        }
    }
    let credential_present = std::env::var(&config.judge.remote.api_key_env).is_ok();
    let metrics = expand_metrics(&selected, judge_mode, credential_present);

    // One judge for the whole run; a failed remote setup is recorded per
    // report rather than killing the other metrics.
    let mut judge_error: Option<String> = None;
    let judge: Option<Box<dyn Judge>> = if metrics.iter().any(|m| m == "autointerp") {
        match judge_mode {
            JudgeMode::Mock => Some(match config.judge.mock {
                MockKind::Keyword => Box::new(KeywordMockJudge) as Box<dyn Judge>,
                MockKind::Oracle => Box::new(OracleMockJudge),
                MockKind::AlwaysFires => Box::new(AlwaysFiresJudge),
            }),
            JudgeMode::Remote => match RemoteJudge::new(config.judge.remote.clone()) {
                Ok(j) => Some(Box::new(j)),
                Err(SaeForgeError::Judge { message, .. }) => {
                    judge_error = Some(message);
                    None
                }
                Err(e) => {
                    judge_error = Some(e.to_string());
                    None
                }
            },
        }
    } else {
        None
    };

    let dataset_path = config.output.dataset_path();
    eprintln!("[eval] loading {}", dataset_path.display());
    let ds = read_dataset(&dataset_path)?;
    let model = build_model(&config.generator_resolved())?;
    let targets: Vec<u32> = ds.label(NEXT_TOKEN_COLUMN)?.values.clone();

    let checkpoints = discover_checkpoints(&config)?;
    let reports_dir = config.output.reports_dir();
    let config_echo = serde_json::to_value(&config)
        .map_err(|e| SaeForgeError::Metric(format!("echoing config: {e}")))?;

    let mut failures = 0usize;
    let mut written: Vec<PathBuf> = Vec::new();
    for path in &checkpoints {
        let ckpt = read_checkpoint(path)?;
        let sae = sae_identifier(path, &ckpt);
        let params = ckpt.into_eval_params()?;
        for metric in &metrics {
            let started = Instant::now();
            let outcome = if metric == "autointerp" && judge.is_none() {
                Err(SaeForgeError::Judge {
                    attempts: 0,
                    message: judge_error.clone().unwrap_or_else(|| "no judge".into()),
                })
            } else {
                run_metric(
                    metric,
                    &config,
                    &params,
                    &ds,
                    &model,
                    &targets,
                    judge.as_deref(),
                )
            };
            let wall = started.elapsed().as_secs_f64();
            let report = match outcome {
                Ok(MetricOutcome { scalars, per_k, detail }) => MetricReport {
                    format_version: REPORT_FORMAT_VERSION,
                    metric: metric.clone(),
                    sae: sae.clone(),
                    seed: config.seed,
                    scalars,
                    per_k,
                    detail,
                    error: None,
                    config_echo: config_echo.clone(),
                    wall_clock_seconds: wall,
                },
                Err(e) => {
                    eprintln!("[eval] {} {} FAILED: {e}", sae.arch, metric);
                    failures += 1;
                    MetricReport {
                        format_version: REPORT_FORMAT_VERSION,
                        metric: metric.clone(),
                        sae: sae.clone(),
                        seed: config.seed,
                        scalars: BTreeMap::new(),
                        per_k: Vec::new(),
                        detail: serde_json::Value::Null,
                        error: Some(e.to_string()),
                        config_echo: config_echo.clone(),
                        wall_clock_seconds: wall,
                    }
                }
            };
            let out = write_report(&reports_dir, &report)?;
            eprintln!(
                "[eval] {}-w{}{} {} -> {} ({wall:.1}s)",
                sae.arch,
                sae.width,
                sae.target_l0.map(|t| format!("-l0{t}")).unwrap_or_default(),
                metric,
                out.display()
            );
            written.push(out);
        }
    }

    let summary = json!({
        "checkpoints": checkpoints.len(),
        "metrics": metrics,
        "reports": written,
        "failures": failures,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(if failures > 0 { 1 } else { 0 })
}

// ── report ──────────────────────────────────────────────────────────────────

fn cmd_report(config_path: &Path) -> Result<i32> {
    let config = RunConfig::load(config_path)?;
    let reports_dir = config.output.reports_dir();
    let reports = load_reports(&reports_dir)?;
    if reports.is_empty() {
        return Err(SaeForgeError::Metric(format!(
            "no readable reports in {}",
            reports_dir.display()
        )));
    }

    let csv = reports_to_csv(&reports);
    let csv_path = config.output.dir.join("aggregate.csv");
    std::fs::write(&csv_path, &csv).map_err(|e| SaeForgeError::io(&csv_path, e))?;

    let plot = reports_to_plot_data(&reports);
    let plot_path = config.output.dir.join("plot_data.json");
    let mut plot_text =
        serde_json::to_string_pretty(&plot).expect("plot data serializes");
    plot_text.push('\n');
    std::fs::write(&plot_path, plot_text).map_err(|e| SaeForgeError::io(&plot_path, e))?;

    let summary = json!({
        "reports": reports.len(),
        "csv": csv_path,
        "csv_rows": csv.lines().count().saturating_sub(1),
        "plot_data": plot_path,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(0)
}
