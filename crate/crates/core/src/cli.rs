//! Experiment configuration and the commands behind the `dpcheck` binary.
//!
//! Exit codes: 0 success (or a clean `detect` verdict), 1 runtime failure,
//! 2 bad configuration or input, 3/4/5 for `detect` verdicts (optimizer bug,
//! aggregation bug, both).

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{self, DataConfig};
use crate::diagnostics::{
    self, read_trace, summarize, write_trace, TraceRecord, TraceSummary, Verdict,
};
use crate::dp_sim::{run_training, CopyPolicy, DpConfig, RunResult};
use crate::error::Error;
use crate::flops::{self, breakdown, format_sci, Preset};
use crate::grpo::bandit::{self, BanditConfig};
use crate::loss_agg::AggregationMode;
use crate::model::TinyLM;
use crate::numerics::Vector;
use crate::oracle::{compare, reference_for, ORACLE_TOL};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_OPTIMIZER_BUG: i32 = 3;
pub const EXIT_AGGREGATION_BUG: i32 = 4;
pub const EXIT_BOTH_BUGS: i32 = 5;

/// Overrides the output directory when `--out` is not given.
pub const OUT_DIR_ENV: &str = "DPCHECK_OUT";

/// Scale of the uniform initialization of the toy model.
const INIT_SCALE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: DpConfig,
    pub data: DataConfig,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub label: String,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, Error> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Materializes defaults that depend on other fields, then validates.
    pub fn resolve(&mut self) -> Result<(), Error> {
        if self.run.schedule.total_steps == 0 {
            self.run.schedule.total_steps = self.run.total_steps;
        }
        self.run.validate()?;
        self.data.validate()?;
        let needed = self.run.total_steps * self.run.samples_per_step();
        if self.data.n_samples < needed {
            return Err(Error::InvalidConfig(format!(
                "data.n_samples = {} but {} steps x {} samples per step need {needed}",
                self.data.n_samples,
                self.run.total_steps,
                self.run.samples_per_step()
            )));
        }
        Ok(())
    }

    pub fn model(&self) -> TinyLM {
        TinyLM::random(self.data.vocab, self.data.hidden, INIT_SCALE, self.run.seed)
    }

    pub fn dataset(&self) -> Result<Vec<crate::model::MicroBatch>, Error> {
        data::generate(&self.data, self.run.seed)
    }
}

#[derive(Debug)]
enum CmdError {
    Config(String),
    Runtime(String),
}

impl CmdError {
    fn code(&self) -> i32 {
        match self {
            CmdError::Config(_) => EXIT_CONFIG,
            CmdError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            CmdError::Config(m) | CmdError::Runtime(m) => m,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CmdError {
    CmdError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CmdError {
    CmdError::Runtime(e.to_string())
}

fn finish(result: Result<i32, CmdError>, err: &mut dyn Write) -> i32 {
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.code()
        }
    }
}

/// Output directory: explicit flag, then the environment, then the config.
pub fn resolve_out_dir(flag: Option<&Path>, configured: &Path) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => configured.to_path_buf(),
    }
}

fn load_experiment(
    path: &Path,
    seed: Option<u64>,
    parallel: bool,
) -> Result<ExperimentConfig, CmdError> {
    let text =
        fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    if parallel {
        cfg.run.parallel = true;
    }
    cfg.resolve().map_err(config_err)?;
    Ok(cfg)
}

/// Raw little-endian f64 values behind an 8-byte little-endian length.
pub fn write_params_bin<W: Write>(mut out: W, params: &[f64]) -> std::io::Result<()> {
    out.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in params {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()
}

pub fn read_params_bin<R: Read>(mut input: R) -> std::io::Result<Vector> {
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let n = u64::from_le_bytes(len) as usize;
    let mut values = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        input.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    Ok(Vector::from_vec(values))
}

fn write_trace_file(path: &Path, trace: &[TraceRecord]) -> Result<(), CmdError> {
    let f = File::create(path).map_err(runtime_err)?;
    let mut w = write_trace(BufWriter::new(f), trace).map_err(runtime_err)?;
    w.flush().map_err(runtime_err)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CmdError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime_err)?;
    text.push('\n');
    fs::write(path, text).map_err(runtime_err)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    label: &'a str,
    steps: usize,
    final_loss: f64,
    trace: TraceSummary,
    config: &'a ExperimentConfig,
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub parallel: bool,
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    finish(train_inner(args, out), err)
}

fn train_inner(args: &TrainArgs, out: &mut dyn Write) -> Result<i32, CmdError> {
    let cfg = load_experiment(&args.config, args.seed, args.parallel)?;
    let dir = resolve_out_dir(args.out.as_deref(), &cfg.output_dir);
    let dataset = cfg.dataset().map_err(config_err)?;
    let result = run_training(&cfg.run, &cfg.model(), &dataset).map_err(runtime_err)?;

    fs::create_dir_all(&dir).map_err(runtime_err)?;
    write_trace_file(&dir.join("trace.jsonl"), &result.trace)?;
    let f = File::create(dir.join("final_params.bin")).map_err(runtime_err)?;
    write_params_bin(BufWriter::new(f), &result.final_params).map_err(runtime_err)?;
    let summary = TrainSummary {
        label: &cfg.label,
        steps: result.trace.len(),
        final_loss: result.losses.last().copied().unwrap_or(f64::NAN),
        trace: summarize(&result.trace).map_err(runtime_err)?,
        config: &cfg,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    let _ = writeln!(
        out,
        "trained {} steps; final loss {:.6}; wrote {}",
        summary.steps,
        summary.final_loss,
        dir.display()
    );
    Ok(EXIT_OK)
}

/// One cell of the copy-policy x aggregation ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub copy_policy: CopyPolicy,
    pub agg_mode: AggregationMode,
}

pub const VARIANTS: [Variant; 4] = [
    Variant {
        name: "buggy",
        copy_policy: CopyPolicy::FirstMicroBatchOnly,
        agg_mode: AggregationMode::MeanOfMeans,
    },
    Variant {
        name: "fix-agg",
        copy_policy: CopyPolicy::FirstMicroBatchOnly,
        agg_mode: AggregationMode::GlobalTokenMean,
    },
    Variant {
        name: "fix-opt",
        copy_policy: CopyPolicy::EveryMicroBatch,
        agg_mode: AggregationMode::MeanOfMeans,
    },
    Variant {
        name: "fixed",
        copy_policy: CopyPolicy::EveryMicroBatch,
        agg_mode: AggregationMode::GlobalTokenMean,
    },
];

pub fn variant(name: &str) -> Option<Variant> {
    VARIANTS.iter().copied().find(|v| v.name == name)
}

impl Variant {
    /// The variant's run config. Offload is forced on so the copy policy is live.
    pub fn apply(&self, base: &DpConfig) -> DpConfig {
        DpConfig {
            offload: true,
            copy_policy: self.copy_policy,
            agg_mode: self.agg_mode,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub copy_policy: CopyPolicy,
    pub agg_mode: AggregationMode,
    pub first_divergence_step: Option<usize>,
    pub max_param_rel_diff: f64,
    pub final_loss: f64,
    pub median_grad_norm: f64,
    pub verdict: Option<Verdict>,
    pub matches_oracle: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub label: String,
    pub tolerance: f64,
    pub steps: usize,
    pub reference_final_loss: f64,
    pub reference_median_grad_norm: f64,
    pub variants: Vec<VariantReport>,
}

pub struct DiffArgs {
    pub config: PathBuf,
    pub variants: Option<Vec<String>>,
    pub tolerance: f64,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub parallel: bool,
}

/// Runs every variant against the reference trainer on identical data.
pub fn run_diff(
    cfg: &ExperimentConfig,
    variants: &[Variant],
    tolerance: f64,
) -> crate::Result<(DiffReport, Vec<(String, RunResult)>)> {
    let model = cfg.model();
    let dataset = cfg.dataset()?;
    let reference = reference_for(&cfg.run, &model, &dataset)?;
    let ref_summary = summarize(&reference.trace)?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for v in variants {
        let run_cfg = v.apply(&cfg.run);
        let result = run_training(&run_cfg, &model, &dataset)?;
        let rep = compare(&(&result).into(), &(&reference).into(), tolerance)?;
        let verdict = if result.trace.len() >= diagnostics::MIN_TRACE_LEN {
            Some(diagnostics::detect(
                &result.trace,
                &reference.trace,
                run_cfg.accum_steps,
            )?)
        } else {
            None
        };
        rows.push(VariantReport {
            name: v.name.to_string(),
            copy_policy: v.copy_policy,
            agg_mode: v.agg_mode,
            first_divergence_step: rep.first_divergence_step,
            max_param_rel_diff: rep.max_param_rel_diff,
            final_loss: result.losses.last().copied().unwrap_or(f64::NAN),
            median_grad_norm: summarize(&result.trace)?.median_grad_norm,
            verdict,
            matches_oracle: rep.first_divergence_step.is_none(),
        });
        runs.push((v.name.to_string(), result));
    }
    runs.push(("reference".to_string(), reference.clone()));
    Ok((
        DiffReport {
            label: cfg.label.clone(),
            tolerance,
            steps: cfg.run.total_steps,
            reference_final_loss: reference.losses.last().copied().unwrap_or(f64::NAN),
            reference_median_grad_norm: ref_summary.median_grad_norm,
            variants: rows,
        },
        runs,
    ))
}

pub fn cmd_diff(args: &DiffArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    finish(diff_inner(args, out), err)
}

fn diff_inner(args: &DiffArgs, out: &mut dyn Write) -> Result<i32, CmdError> {
    let cfg = load_experiment(&args.config, args.seed, args.parallel)?;
    if args.tolerance.is_nan() || args.tolerance < 0.0 {
        return Err(config_err("tolerance must be >= 0"));
    }
    let mut selected = match &args.variants {
        None => VARIANTS.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| variant(n).ok_or_else(|| config_err(format!("unknown variant `{n}`"))))
            .collect::<Result<Vec<_>, _>>()?,
    };
    // The exit status is decided by the fully fixed variant, so it always runs.
    if !selected.iter().any(|v| v.name == "fixed") {
        selected.push(variant("fixed").unwrap());
    }
    let (report, runs) = run_diff(&cfg, &selected, args.tolerance).map_err(runtime_err)?;

    let dir = resolve_out_dir(args.out.as_deref(), &cfg.output_dir);
    fs::create_dir_all(&dir).map_err(runtime_err)?;
    write_json(&dir.join("diff_report.json"), &report)?;
    for (name, run) in &runs {
        write_trace_file(&dir.join(format!("trace_{name}.jsonl")), &run.trace)?;
    }

    let _ = writeln!(
        out,
        "{:<10} {:<20} {:<16} {:>12} {:>9} {:>10} {:>10}  status",
        "variant",
        "copy_policy",
        "aggregation",
        "max_rel_diff",
        "first_div",
        "final_loss",
        "grad_norm"
    );
    let _ = writeln!(
        out,
        "{:<10} {:<20} {:<16} {:>12} {:>9} {:>10.6} {:>10.4e}  oracle",
        "reference",
        "-",
        "GlobalTokenMean",
        "-",
        "-",
        report.reference_final_loss,
        report.reference_median_grad_norm
    );
    for row in &report.variants {
        let status = if row.matches_oracle {
            "MATCHES ORACLE".to_string()
        } else {
            match &row.verdict {
                Some(v) => format!("DIVERGES (detect: {})", v.label()),
                None => "DIVERGES".to_string(),
            }
        };
        let _ = writeln!(
            out,
            "{:<10} {:<20} {:<16} {:>12.3e} {:>9} {:>10.6} {:>10.4e}  {}",
            row.name,
            format!("{:?}", row.copy_policy),
            format!("{:?}", row.agg_mode),
            row.max_param_rel_diff,
            row.first_divergence_step
                .map(|s| s.to_string())
                .unwrap_or_else(|| "-".into()),
            row.final_loss,
            row.median_grad_norm,
            status
        );
    }
    let fixed_ok = report
        .variants
        .iter()
        .find(|r| r.name == "fixed")
        .map(|r| r.matches_oracle)
        .unwrap_or(false);
    Ok(if fixed_ok { EXIT_OK } else { EXIT_RUNTIME })
}

pub struct DetectArgs {
    pub candidate: PathBuf,
    pub reference: PathBuf,
    pub accum_steps: usize,
}

pub fn verdict_exit_code(v: &Verdict) -> i32 {
    match (v.optimizer_bug, v.aggregation_bug) {
        (false, false) => EXIT_OK,
        (true, false) => EXIT_OPTIMIZER_BUG,
        (false, true) => EXIT_AGGREGATION_BUG,
        (true, true) => EXIT_BOTH_BUGS,
    }
}

pub fn read_trace_file(path: &Path) -> crate::Result<Vec<TraceRecord>> {
    read_trace(BufReader::new(File::open(path)?))
}

pub fn cmd_detect(args: &DetectArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    finish(detect_inner(args, out), err)
}

fn detect_inner(args: &DetectArgs, out: &mut dyn Write) -> Result<i32, CmdError> {
    let read =
        |p: &Path| read_trace_file(p).map_err(|e| config_err(format!("{}: {e}", p.display())));
    let cand = read(&args.candidate)?;
    let reference = read(&args.reference)?;
    let v = diagnostics::detect(&cand, &reference, args.accum_steps).map_err(config_err)?;
    let _ = writeln!(out, "verdict:        {}", v.label());
    let _ = writeln!(out, "optimizer_bug:  {}", v.optimizer_bug);
    let _ = writeln!(out, "aggregation_bug: {}", v.aggregation_bug);
    let _ = writeln!(
        out,
        "norm_ratio:     {:.6} (dropped micro-batches give roughly 1/{} to 1/sqrt({}))",
        v.norm_ratio, args.accum_steps, args.accum_steps
    );
    let _ = writeln!(out, "variance_ratio: {:.6}", v.variance_ratio);
    let _ = writeln!(out, "mean_shift:     {:.6}", v.mean_shift);
    Ok(verdict_exit_code(&v))
}

pub struct FlopsArgs {
    pub method: String,
    pub breakdown: bool,
}

pub fn cmd_flops(args: &FlopsArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    finish(flops_inner(args, out), err)
}

fn flops_inner(args: &FlopsArgs, out: &mut dyn Write) -> Result<i32, CmdError> {
    let path = Path::new(&args.method);
    let preset: Preset = if path.is_file() {
        let text = fs::read_to_string(path).map_err(config_err)?;
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?
    } else {
        flops::preset(&args.method).map_err(config_err)?
    };
    let b = breakdown(&preset.spec, &preset.cost_model()).map_err(config_err)?;
    let _ = writeln!(out, "{}", format_sci(b.total));
    if args.breakdown {
        let rows = [
            ("on_policy_per_sample", b.on_policy_per_sample),
            ("off_policy_per_sample", b.off_policy_per_sample),
            ("per_sample", b.per_sample),
            ("rl_total", b.rl_total),
            ("extra_sft_total", b.extra_sft_total),
            ("sft_total", b.sft_pretrain_total),
            ("total", b.total),
        ];
        for (name, value) in rows {
            let _ = writeln!(out, "{name:<22} {}", format_sci(value));
        }
    }
    Ok(EXIT_OK)
}

pub struct GrpoDemoArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn cmd_grpo_demo(args: &GrpoDemoArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    finish(grpo_inner(args, out), err)
}

fn grpo_inner(args: &GrpoDemoArgs, out: &mut dyn Write) -> Result<i32, CmdError> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(config_err)?;
            serde_json::from_str::<BanditConfig>(&text)
                .map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => BanditConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.steps {
        cfg.steps = n;
    }
    cfg.validate().map_err(config_err)?;
    let run = bandit::run(&cfg).map_err(runtime_err)?;
    let dir = resolve_out_dir(args.out.as_deref(), Path::new("out"));
    fs::create_dir_all(&dir).map_err(runtime_err)?;
    write_trace_file(&dir.join("trace.jsonl"), &run.trace)?;
    let first = run.trace.first().map(|r| r.loss).unwrap_or(0.0);
    let last = run.trace.last().map(|r| r.loss).unwrap_or(0.0);
    let _ = writeln!(
        out,
        "mean reward: step 0 = {first:.4}, step {} = {last:.4}; wrote {}",
        cfg.steps,
        dir.join("trace.jsonl").display()
    );
    Ok(EXIT_OK)
}

#[derive(Debug, Parser)]
#[command(
    name = "dpcheck",
    version,
    about = "Data-parallel training bug simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one simulated training job and write its trace, parameters and summary.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run ranks concurrently (results are bit-identical).
        #[arg(long)]
        parallel: bool,
    },
    /// Run the copy-policy x aggregation ablation against the reference trainer.
    Diff {
        config: PathBuf,
        /// Comma-separated subset of buggy, fix-agg, fix-opt, fixed.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long, default_value_t = ORACLE_TOL)]
        tolerance: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        parallel: bool,
    },
    /// Classify a candidate trace against a reference trace.
    Detect {
        candidate: PathBuf,
        reference: PathBuf,
        #[arg(long, default_value_t = 1)]
        accum_steps: usize,
    },
    /// Estimate training FLOPs for a preset or a method file.
    Flops {
        method: String,
        #[arg(long)]
        breakdown: bool,
    },
    /// Train the GRPO bandit demo and write its reward trace.
    GrpoDemo {
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses arguments and dispatches. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return EXIT_CONFIG;
            }
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
    };
    match cli.command {
        Command::Train {
            config,
            seed,
            out: dir,
            parallel,
        } => cmd_train(
            &TrainArgs {
                config,
                seed,
                out: dir,
                parallel,
            },
            out,
            err,
        ),
        Command::Diff {
            config,
            variants,
            tolerance,
            seed,
            out: dir,
            parallel,
        } => cmd_diff(
            &DiffArgs {
                config,
                variants,
                tolerance,
                seed,
                out: dir,
                parallel,
            },
            out,
            err,
        ),
        Command::Detect {
            candidate,
            reference,
            accum_steps,
        } => cmd_detect(
            &DetectArgs {
                candidate,
                reference,
                accum_steps,
            },
            out,
            err,
        ),
        Command::Flops { method, breakdown } => {
            cmd_flops(&FlopsArgs { method, breakdown }, out, err)
        }
        Command::GrpoDemo {
            config,
            seed,
            steps,
            out: dir,
        } => cmd_grpo_demo(
            &GrpoDemoArgs {
                config,
                seed,
                steps,
                out: dir,
            },
            out,
            err,
        ),
    }
}
