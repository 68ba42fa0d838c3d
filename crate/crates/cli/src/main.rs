//! Experiment harness: trace generation, training and inference simulation
//! runs, profile building, and cross-run comparison reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use linasim::infersched::{
    self, build_profile, percentile, InferMode, InferRunConfig, PopularityProfile,
    DEFAULT_MAX_PACKED, DEFAULT_PATH_LENGTH,
};
use linasim::trainsched::{
    self, PackingState, PolicyKind, RandomizedAllReduce, SchedulerPolicy, TrainRunConfig,
    TrainStepOutcome, DEFAULT_LAUNCH_LATENCY,
};
use linasim::types::{validate_spec, ClusterSpec, CostModel, ModelSpec, SimReport};
use linasim::workload::{gen_trace, load_trace, save_ground_truth, save_trace, GeneratorParams, TraceMode};

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "linasim", version, about = "Flow-level simulator for distributed MoE communication scheduling and expert placement")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a token-to-expert selection trace (plus ground-truth sidecar).
    GenTrace {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for files named in the config.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run the training-step simulation for every requested policy.
    TrainSim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run the inference simulation for every requested mode.
    InferSim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Build a popularity profile from a training trace.
    BuildProfile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Summarize one or more run summaries into a comparison table.
    Report {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

/// Errors that are the caller's fault exit with 2, everything else with 1.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::GenTrace { config, seed, out } => cmd_gen_trace(&config, seed, &out),
        Cmd::TrainSim { config, seed, out } => cmd_train_sim(&config, seed, &out),
        Cmd::InferSim { config, seed, out } => cmd_infer_sim(&config, seed, &out),
        Cmd::BuildProfile { config, out } => cmd_build_profile(&config, &out),
        Cmd::Report { summaries, out } => cmd_report(&summaries, &out),
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the effective configuration (config re-serialized after the seed
/// override), the reproducibility key of a run.
fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let canonical = serde_json::to_vec(config).context("serialize config for hashing")?;
    Ok(sha256_hex(&canonical))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).ok();
    }
    let mut bytes = serde_json::to_vec_pretty(value).context("serialize output")?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------- gen-trace

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenTraceConfig {
    model: ModelSpec,
    generator: GeneratorParams,
    mode: TraceMode,
    out_trace: String,
    #[serde(default)]
    out_ground_truth: Option<String>,
}

fn cmd_gen_trace(config_path: &Path, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut config: GenTraceConfig = read_config(config_path)?;
    if let Some(s) = seed {
        config.generator.seed = s;
    }
    std::fs::create_dir_all(out).map_err(|e| usage(format!("cannot create out dir: {e}")))?;
    let (trace, truth) = gen_trace(&config.generator, &config.model, config.mode);
    let trace_path = out.join(&config.out_trace);
    save_trace(&trace, &trace_path)
        .map_err(|e| CliError::Runtime(anyhow!("write trace: {e}")))?;
    let truth_name = config
        .out_ground_truth
        .clone()
        .unwrap_or_else(|| format!("{}.truth.json", config.out_trace));
    save_ground_truth(&truth, &out.join(&truth_name))
        .map_err(|e| CliError::Runtime(anyhow!("write ground truth: {e}")))?;
    println!(
        "wrote {} ({} tokens x {} layers) and {}",
        trace_path.display(),
        trace.records.len(),
        trace.meta.layers,
        truth_name
    );
    Ok(())
}

// ---------------------------------------------------------------- train-sim

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PackingConfig {
    start_step: u32,
    cadence: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSimConfig {
    cluster: ClusterSpec,
    model: ModelSpec,
    cost: CostModel,
    policies: Vec<PolicyKind>,
    tokens_per_device: u32,
    #[serde(default)]
    partition_bytes: Option<u64>,
    #[serde(default)]
    bucket_bytes: Option<u64>,
    #[serde(default)]
    launch_latency: Option<f64>,
    #[serde(default)]
    num_steps: Option<u32>,
    #[serde(default)]
    packing: Option<PackingConfig>,
    #[serde(default)]
    fixed_experts_per_device: Option<u16>,
    #[serde(default)]
    randomized_allreduce: Option<RandomizedAllReduce>,
    #[serde(default)]
    backward_only: Option<bool>,
    #[serde(default)]
    combine_lookahead: Option<bool>,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicySummary {
    policy: PolicyKind,
    step_time: f64,
    steps: Vec<TrainStepOutcome>,
    a2a_durations: Vec<f64>,
    a2a_isolated: Vec<f64>,
    a2a_slowdowns: Vec<f64>,
    median_slowdown: f64,
    max_slowdown: f64,
    moe_layer_forward: Vec<f64>,
    moe_layer_backward: Vec<f64>,
    pipelining_efficiency: f64,
    packing_trajectory: Vec<(u32, u16)>,
    speedup_vs_baseline: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainSummary {
    schema_version: u32,
    kind: String,
    config_hash: String,
    seed: u64,
    policies: Vec<PolicySummary>,
}

fn slowdowns(report: &SimReport) -> Vec<f64> {
    report
        .all_to_all_times
        .iter()
        .zip(&report.all_to_all_isolated)
        .filter(|(_, &iso)| iso > 0.0)
        .map(|(&d, &iso)| d / iso)
        .collect()
}

fn cmd_train_sim(config_path: &Path, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut config: TrainSimConfig = read_config(config_path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if config.policies.is_empty() {
        return Err(usage("train-sim config needs at least one policy"));
    }
    let scenario = validate_spec(
        config.cluster.clone(),
        config.model.clone(),
        config.cost.clone(),
    )
    .map_err(|e| usage(e.to_string()))?;
    std::fs::create_dir_all(out).map_err(|e| usage(format!("cannot create out dir: {e}")))?;
    let hash = config_hash(&config)?;

    let mut summaries = Vec::new();
    let mut baseline_step_time = None;
    for &policy_kind in &config.policies {
        let mut policy = SchedulerPolicy::new(policy_kind);
        if let Some(p) = config.partition_bytes {
            policy.partition_bytes = p;
        }
        if let Some(b) = config.bucket_bytes {
            policy.allreduce_bucket_bytes = b;
        }
        if let Some(l) = config.combine_lookahead {
            policy.combine_lookahead = l;
        }
        let mut packing = None;
        if let Some(p) = &config.packing {
            let mut state = PackingState::new();
            state.start_step = p.start_step;
            state.cadence = p.cadence;
            packing = Some(state);
        }
        let run_config = TrainRunConfig {
            scenario: scenario.clone(),
            tokens_per_device: config.tokens_per_device,
            policy,
            launch_latency: config.launch_latency.unwrap_or(DEFAULT_LAUNCH_LATENCY),
            num_steps: config.num_steps.unwrap_or(1),
            packing,
            fixed_experts_per_device: config.fixed_experts_per_device,
            randomized_allreduce: config.randomized_allreduce,
            seed: config.seed,
            backward_only: config.backward_only.unwrap_or(false),
        };
        let outcome = trainsched::run_training(&run_config)
            .map_err(|e| CliError::Runtime(anyhow!("policy {policy_kind:?}: {e}")))?;
        let report = &outcome.final_report;
        let slow = slowdowns(report);
        let step_time = outcome.steps.last().map(|s| s.step_time).unwrap_or(0.0);
        if policy_kind == PolicyKind::Baseline {
            baseline_step_time = Some(step_time);
        }
        write_timeline_csv(&out.join(format!("timeline_{}.csv", policy_name(policy_kind))), report)?;
        summaries.push(PolicySummary {
            policy: policy_kind,
            step_time,
            steps: outcome.steps,
            median_slowdown: percentile(&slow, 50.0),
            max_slowdown: slow.iter().cloned().fold(0.0, f64::max),
            a2a_durations: report.all_to_all_times.clone(),
            a2a_isolated: report.all_to_all_isolated.clone(),
            a2a_slowdowns: slow,
            moe_layer_forward: report.moe_layer_times.forward.clone(),
            moe_layer_backward: report.moe_layer_times.backward.clone(),
            pipelining_efficiency: report.pipelining_efficiency,
            packing_trajectory: outcome.packing_trajectory,
            speedup_vs_baseline: None,
        });
    }
    if let Some(base) = baseline_step_time {
        for s in &mut summaries {
            if s.step_time > 0.0 {
                s.speedup_vs_baseline = Some(base / s.step_time);
            }
        }
    }
    let summary = TrainSummary {
        schema_version: SCHEMA_VERSION,
        kind: "train".into(),
        config_hash: hash,
        seed: config.seed,
        policies: summaries,
    };
    let path = out.join("train_summary.json");
    write_json(&path, &summary)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn policy_name(kind: PolicyKind) -> &'static str {
    match kind {
        PolicyKind::Baseline => "baseline",
        PolicyKind::NaivePriority => "naive_priority",
        PolicyKind::PriorityOnly => "priority_only",
        PolicyKind::PriorityPartition => "priority_partition",
        PolicyKind::PriorityPartitionPipeline => "priority_partition_pipeline",
        PolicyKind::FixedDeferral => "fixed_deferral",
    }
}

fn write_timeline_csv(path: &Path, report: &SimReport) -> Result<()> {
    let mut csv = String::from("op_id,kind,device,start_s,end_s,isolated_s\n");
    for r in &report.records {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.op_id, r.kind, r.device, r.start, r.end, r.isolated_duration
        ));
    }
    std::fs::write(path, csv).with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------- infer-sim

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InferSimConfig {
    cluster: ClusterSpec,
    model: ModelSpec,
    cost: CostModel,
    modes: Vec<InferMode>,
    #[serde(default)]
    trace: Option<String>,
    #[serde(default)]
    generator: Option<GeneratorParams>,
    #[serde(default)]
    profile: Option<String>,
    /// Build the profile from a balanced training trace drawn with the same
    /// generator structure.
    #[serde(default)]
    profile_from_training: Option<bool>,
    #[serde(default)]
    path_length: Option<u16>,
    #[serde(default)]
    max_packed: Option<u16>,
    #[serde(default)]
    launch_latency: Option<f64>,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModeSummary {
    mode: InferMode,
    p50: f64,
    p95: f64,
    p50_normalized: Option<f64>,
    p95_normalized: Option<f64>,
    estimation_accuracy: f64,
    finetune_rate: f64,
    batch_times: Vec<f64>,
    a2a_p50: f64,
    a2a_p95: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct InferSummary {
    schema_version: u32,
    kind: String,
    config_hash: String,
    seed: u64,
    path_length: u16,
    modes: Vec<ModeSummary>,
}

fn cmd_infer_sim(config_path: &Path, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut config: InferSimConfig = read_config(config_path)?;
    if let Some(s) = seed {
        config.seed = s;
        if let Some(g) = &mut config.generator {
            g.seed = s;
        }
    }
    if config.modes.is_empty() {
        return Err(usage("infer-sim config needs at least one mode"));
    }
    match (&config.trace, &config.generator) {
        (Some(_), Some(_)) | (None, None) => {
            return Err(usage(
                "exactly one of `trace` and `generator` must be given",
            ))
        }
        _ => {}
    }
    let scenario = validate_spec(
        config.cluster.clone(),
        config.model.clone(),
        config.cost.clone(),
    )
    .map_err(|e| usage(e.to_string()))?;
    std::fs::create_dir_all(out).map_err(|e| usage(format!("cannot create out dir: {e}")))?;
    let hash = config_hash(&config)?;
    let path_length = config.path_length.unwrap_or(DEFAULT_PATH_LENGTH);
    let max_packed = config.max_packed.unwrap_or(DEFAULT_MAX_PACKED);

    let trace = match (&config.trace, &config.generator) {
        (Some(path), None) => load_trace(Path::new(path))
            .map_err(|e| CliError::Runtime(anyhow!("load trace: {e}")))?,
        (None, Some(params)) => gen_trace(params, &config.model, TraceMode::InferenceSkewed).0,
        _ => unreachable!(),
    };

    let needs_profile = config
        .modes
        .iter()
        .any(|m| matches!(m, InferMode::Lina | InferMode::LinaNoFinetune));
    let profile: Option<PopularityProfile> = if !needs_profile {
        None
    } else if let Some(path) = &config.profile {
        Some(
            PopularityProfile::load(Path::new(path))
                .map_err(|e| CliError::Runtime(anyhow!("load profile: {e}")))?,
        )
    } else if config.profile_from_training.unwrap_or(false) {
        let params = config
            .generator
            .ok_or_else(|| usage("profile_from_training needs generator params"))?;
        let (training, _) = gen_trace(&params, &config.model, TraceMode::TrainingBalanced);
        Some(
            build_profile(&training, path_length)
                .map_err(|e| CliError::Runtime(anyhow!("build profile: {e}")))?,
        )
    } else {
        return Err(usage(
            "modes lina/lina_no_finetune need `profile` or `profile_from_training`",
        ));
    };

    let mut outcomes = BTreeMap::new();
    for &mode in &config.modes {
        let run_config = InferRunConfig {
            scenario: scenario.clone(),
            mode,
            path_length,
            max_packed,
            launch_latency: config.launch_latency.unwrap_or(0.0),
            seed: config.seed,
        };
        let outcome = infersched::run_inference(&run_config, &trace, profile.as_ref())
            .map_err(|e| CliError::Runtime(anyhow!("mode {mode}: {e}")))?;
        outcomes.insert(mode_order(mode), outcome);
    }
    let ideal = outcomes
        .values()
        .find(|o| o.mode == InferMode::Ideal)
        .map(|o| (o.median_time(), o.p95_time()));
    let modes = outcomes
        .values()
        .map(|o| {
            let (p50, p95) = (o.median_time(), o.p95_time());
            ModeSummary {
                mode: o.mode,
                p50,
                p95,
                p50_normalized: ideal.map(|(i, _)| p50 / i),
                p95_normalized: ideal.map(|(_, i)| p95 / i),
                estimation_accuracy: o.estimation_accuracy,
                finetune_rate: o.finetune_rate,
                batch_times: o.batch_times.clone(),
                a2a_p50: percentile(&o.a2a_times, 50.0),
                a2a_p95: percentile(&o.a2a_times, 95.0),
            }
        })
        .collect();
    let summary = InferSummary {
        schema_version: SCHEMA_VERSION,
        kind: "infer".into(),
        config_hash: hash,
        seed: config.seed,
        path_length,
        modes,
    };
    let path = out.join("infer_summary.json");
    write_json(&path, &summary)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn mode_order(mode: InferMode) -> u8 {
    match mode {
        InferMode::Ideal => 0,
        InferMode::Baseline => 1,
        InferMode::Lina => 2,
        InferMode::LinaNoEstimation => 3,
        InferMode::LinaNoFinetune => 4,
    }
}

// ------------------------------------------------------------ build-profile

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BuildProfileConfig {
    trace: String,
    #[serde(default)]
    path_length: Option<u16>,
    out_profile: String,
}

fn cmd_build_profile(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let config: BuildProfileConfig = read_config(config_path)?;
    std::fs::create_dir_all(out).map_err(|e| usage(format!("cannot create out dir: {e}")))?;
    let trace = load_trace(Path::new(&config.trace))
        .map_err(|e| CliError::Runtime(anyhow!("load trace: {e}")))?;
    let profile = build_profile(&trace, config.path_length.unwrap_or(DEFAULT_PATH_LENGTH))
        .map_err(|e| CliError::Runtime(anyhow!("build profile: {e}")))?;
    let path = out.join(&config.out_profile);
    profile
        .save(&path)
        .map_err(|e| CliError::Runtime(anyhow!("save profile: {e}")))?;
    println!("wrote {}", path.display());
    Ok(())
}

// ------------------------------------------------------------------- report

fn cmd_report(summaries: &[PathBuf], out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| usage(format!("cannot create out dir: {e}")))?;
    let mut train_rows: Vec<(String, String, PolicySummary)> = Vec::new();
    let mut infer_rows: Vec<(String, String, ModeSummary)> = Vec::new();
    for path in summaries {
        let bytes = std::fs::read(path)
            .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
        let file_hash = sha256_hex(&bytes);
        let value: serde_json::Value = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Runtime(anyhow!("{}: {e}", path.display())))?;
        let version = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .unwrap_or(0);
        if version != SCHEMA_VERSION as u64 {
            return Err(CliError::Runtime(anyhow!(
                "{}: schema version {version} does not match expected {SCHEMA_VERSION}",
                path.display()
            )));
        }
        let kind = value.get("kind").and_then(|v| v.as_str()).unwrap_or("");
        let name = path.display().to_string();
        match kind {
            "train" => {
                let summary: TrainSummary = serde_json::from_slice(&bytes)
                    .map_err(|e| CliError::Runtime(anyhow!("{name}: {e}")))?;
                println!(
                    "{name}: kind=train config_hash={} file_sha256={file_hash}",
                    summary.config_hash
                );
                for p in summary.policies {
                    train_rows.push((name.clone(), file_hash.clone(), p));
                }
            }
            "infer" => {
                let summary: InferSummary = serde_json::from_slice(&bytes)
                    .map_err(|e| CliError::Runtime(anyhow!("{name}: {e}")))?;
                println!(
                    "{name}: kind=infer config_hash={} file_sha256={file_hash}",
                    summary.config_hash
                );
                for m in summary.modes {
                    infer_rows.push((name.clone(), file_hash.clone(), m));
                }
            }
            other => {
                return Err(CliError::Runtime(anyhow!(
                    "{name}: unknown summary kind '{other}'"
                )))
            }
        }
    }

    let mut csv = String::new();
    if !train_rows.is_empty() {
        println!("\ntraining runs");
        println!(
            "{:<28} {:<28} {:>12} {:>10} {:>10} {:>10}",
            "file", "policy", "step_time_s", "med_slow", "max_slow", "pipe_eff"
        );
        csv.push_str("section,file,name,step_time_s,median_slowdown,max_slowdown,pipelining_efficiency,speedup_vs_baseline\n");
        for (file, _, p) in &train_rows {
            println!(
                "{:<28} {:<28} {:>12.6} {:>10.3} {:>10.3} {:>10.3}",
                trunc(file, 28),
                policy_name(p.policy),
                p.step_time,
                p.median_slowdown,
                p.max_slowdown,
                p.pipelining_efficiency
            );
            csv.push_str(&format!(
                "train,{},{},{},{},{},{},{}\n",
                file,
                policy_name(p.policy),
                p.step_time,
                p.median_slowdown,
                p.max_slowdown,
                p.pipelining_efficiency,
                p.speedup_vs_baseline.map_or(String::new(), |s| s.to_string())
            ));
        }
    }
    if !infer_rows.is_empty() {
        println!("\ninference runs");
        println!(
            "{:<28} {:<20} {:>12} {:>12} {:>10} {:>10} {:>10}",
            "file", "mode", "p50_s", "p95_s", "p50_norm", "accuracy", "finetune"
        );
        csv.push_str("section,file,name,p50_s,p95_s,p50_normalized,p95_normalized,estimation_accuracy,finetune_rate\n");
        for (file, _, m) in &infer_rows {
            println!(
                "{:<28} {:<20} {:>12.6} {:>12.6} {:>10} {:>10.3} {:>10.3}",
                trunc(file, 28),
                m.mode.to_string(),
                m.p50,
                m.p95,
                m.p50_normalized
                    .map_or("-".into(), |v| format!("{v:.3}")),
                m.estimation_accuracy,
                m.finetune_rate
            );
            csv.push_str(&format!(
                "infer,{},{},{},{},{},{},{},{}\n",
                file,
                m.mode,
                m.p50,
                m.p95,
                m.p50_normalized.map_or(String::new(), |v| v.to_string()),
                m.p95_normalized.map_or(String::new(), |v| v.to_string()),
                m.estimation_accuracy,
                m.finetune_rate
            ));
        }
    }
    let csv_path = out.join("report.csv");
    std::fs::write(&csv_path, csv)
        .with_context(|| format!("write {}", csv_path.display()))
        .map_err(CliError::Runtime)?;
    println!("\nwrote {}", csv_path.display());
    Ok(())
}

fn trunc(s: &str, n: usize) -> String {
    if s.len() <= n {
        s.to_string()
    } else {
        format!("…{}", &s[s.len() - (n - 1)..])
    }
}
