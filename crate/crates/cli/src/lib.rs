//! Subcommands behind the `skrefine` binary. Each `cmd_*` function returns
//! the process exit code and writes human or JSON output to `out`.
//!
//! | code | meaning                                                    |
//! |------|------------------------------------------------------------|
//! | 0    | success: artifacts written, check passed, lock-step passed |
//! | 1    | a condition failed, the machines diverged, or fuzz found an unexpected result |
//! | 2    | invalid input: policy diagnostics, bad flags, bad trace    |
//! | 3    | an input could not be read or parsed                       |
//! | 4    | the naive checker disagrees with the fast one              |
//! | 5    | simulate refused because condition R fails                 |

use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use skrefine_core::abstract_machine::{exec, interrupt, tick};
use skrefine_core::checker::{check_all, naive_check, CheckInputs, Condition, ConditionReport};
use skrefine_core::content::ContentResolver;
use skrefine_core::faults::Fault;
use skrefine_core::harness::{check_artifacts, lockstep_run, trace_for, HarnessError, LockstepOptions, LockstepReport};
use skrefine_core::policy::parse_policy;
use skrefine_core::refinement::{OpInput, OperationCall, Verdict, INIT};
use skrefine_core::synth::{random_config, Preset};
use skrefine_core::toolchain::{
    generate, load_bpolicy, load_image, load_params, load_policy, load_pts, Artifacts, GenOptions, ToolchainError,
    BPOLICY_FILE, IMAGE_FILE, PARAMS_FILE, POLICY_FILE, PT_DIR,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_INCONSISTENT: i32 = 4;
pub const EXIT_REFUSED: i32 = 5;

pub const SEED_ENV: &str = "SKREFINE_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "skrefine",
    version,
    about = "Separation-kernel artifact generation, condition checking and lock-step refinement"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the B-policy, page tables, image and parameters from a policy.
    Gen(GenArgs),
    /// Check condition R over generated artifacts.
    Check(CheckArgs),
    /// Run the abstract and concrete machines in lock-step.
    Simulate(SimulateArgs),
    /// Generate, check and simulate many random policies.
    Fuzz(FuzzArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    pub policy: PathBuf,
    pub outdir: PathBuf,
    /// Apply one fault switch: overlap, drop-channel-flag, pt-redirect,
    /// spurious-present, image-byte or sched-deadline.
    #[arg(long)]
    pub fault: Option<Fault>,
    /// Seed for choosing where the fault lands.
    #[arg(long, default_value_t = 0)]
    pub fault_seed: u64,
}

#[derive(Debug, Default, Args)]
pub struct CheckArgs {
    /// Directory written by `gen`; supplies any path not given explicitly.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long)]
    pub bpolicy: Option<PathBuf>,
    #[arg(long)]
    pub ptdir: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Also run the exhaustive checker over virtual addresses below BOUND
    /// and compare verdicts.
    #[arg(long, value_name = "BOUND", value_parser = parse_u64)]
    pub naive: Option<u64>,
    /// Write the report as JSON to this file.
    #[arg(long, value_name = "OUT")]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 10_000, conflicts_with = "trace")]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replay operations from a JSON-lines trace file instead.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Run even if condition R fails.
    #[arg(long)]
    pub force: bool,
    /// Write the JSON-lines step log here; `-` for stdout.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// On divergence, write both machine snapshots into this directory.
    #[arg(long, value_name = "DIR")]
    pub dump_on_fail: Option<PathBuf>,
    /// Check all memory every this many steps.
    #[arg(long, default_value_t = 1000)]
    pub full_memory_every: usize,
}

#[derive(Debug, Args)]
pub struct FuzzArgs {
    #[arg(long, default_value_t = 20)]
    pub configs: usize,
    #[arg(long, default_value_t = 10_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Apply a random fault switch to each config and expect exactly its
    /// condition to fail.
    #[arg(long)]
    pub inject_random_fault: bool,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    pub jobs: Option<usize>,
}

fn parse_u64(s: &str) -> Result<u64, String> {
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    r.map_err(|e| format!("{s:?}: {e}"))
}

/// `SKREFINE_SEED` wins over the flag when set.
pub fn effective_seed(flag: u64) -> Result<u64, String> {
    match std::env::var(SEED_ENV) {
        Ok(v) => parse_u64(v.trim()).map_err(|e| format!("{SEED_ENV}: {e}")),
        Err(_) => Ok(flag),
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> i32 {
    let code = match cli.command {
        Command::Gen(a) => cmd_gen(&a, out),
        Command::Check(a) => cmd_check(&a, out),
        Command::Simulate(a) => cmd_simulate(&a, out),
        Command::Fuzz(a) => cmd_fuzz(&a, out),
    };
    code.unwrap_or_else(|e| {
        eprintln!("skrefine: output error: {e}");
        EXIT_IO
    })
}

// --- gen ---------------------------------------------------------------------

pub fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> io::Result<i32> {
    let text = match std::fs::read_to_string(&a.policy) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{}: {e}", a.policy.display());
            return Ok(EXIT_IO);
        }
    };
    let mut policy = match parse_policy(&text) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{}: {e}", a.policy.display());
            return Ok(EXIT_INVALID);
        }
    };
    let base = a.policy.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = std::fs::canonicalize(&base).unwrap_or(base);
    policy.absolutize_content(&base);
    let opts = GenOptions { fault: a.fault, fault_seed: a.fault_seed, ..GenOptions::default() };
    let artifacts = match generate(&policy, ContentResolver::new(&base), &opts) {
        Ok(x) => x,
        Err(e @ ToolchainError::Content(_)) => {
            eprintln!("{e}");
            return Ok(EXIT_IO);
        }
        Err(e) => {
            eprintln!("{e}");
            return Ok(EXIT_INVALID);
        }
    };
    if let Err(e) = artifacts.write(&a.outdir) {
        eprintln!("{e}");
        return Ok(EXIT_IO);
    }
    writeln!(
        out,
        "wrote {} subjects, {} page-table files, {} byte image to {}",
        artifacts.bpolicy.subjects.len(),
        artifacts.pts.len(),
        artifacts.image.len(),
        a.outdir.display()
    )?;
    if let Some(f) = &artifacts.fault {
        writeln!(out, "fault {}: {}", f.fault, f.description)?;
    }
    Ok(EXIT_OK)
}

// --- check -------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct CheckJson<'a> {
    passed: bool,
    subjects: usize,
    cpus: usize,
    pmem_bytes: u64,
    image_bytes: usize,
    millis: f64,
    report: &'a ConditionReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    naive: Option<&'a ConditionReport>,
}

fn pick(explicit: &Option<PathBuf>, config: &Option<PathBuf>, default: &str) -> Option<PathBuf> {
    explicit.clone().or_else(|| config.as_ref().map(|d| d.join(default)))
}

fn human_bytes(n: u64) -> String {
    const MIB: u64 = 1 << 20;
    if n >= MIB {
        format!("{:.1} MiB", n as f64 / MIB as f64)
    } else {
        format!("{:.1} KiB", n as f64 / 1024.0)
    }
}

pub fn cmd_check(a: &CheckArgs, out: &mut dyn Write) -> io::Result<i32> {
    let started = Instant::now();
    let paths = [
        pick(&a.policy, &a.config, POLICY_FILE),
        pick(&a.bpolicy, &a.config, BPOLICY_FILE),
        pick(&a.ptdir, &a.config, PT_DIR),
        pick(&a.image, &a.config, IMAGE_FILE),
        pick(&a.params, &a.config, PARAMS_FILE),
    ];
    let names = ["--policy", "--bpolicy", "--ptdir", "--image", "--params"];
    if let Some(i) = paths.iter().position(Option::is_none) {
        eprintln!("{} is required unless --config is given", names[i]);
        return Ok(EXIT_INVALID);
    }
    let [policy_path, bpolicy_path, ptdir, image_path, params_path] = paths.map(Option::unwrap);

    let loaded = (|| {
        let policy = load_policy(&policy_path)?;
        let b = load_bpolicy(&bpolicy_path)?;
        let pts = load_pts(&ptdir, &b)?;
        let image = load_image(&image_path)?;
        let params = load_params(&params_path)?;
        Ok::<_, skrefine_core::toolchain::ArtifactIoError>((policy, b, pts, image, params))
    })();
    let (policy, b, pts, image, params) = match loaded {
        Ok(x) => x,
        Err(e) => {
            eprintln!("{e}");
            return Ok(EXIT_IO);
        }
    };
    let resolver = ContentResolver::new(policy_path.parent().unwrap_or(Path::new(".")));
    let report = check_all(CheckInputs {
        policy: &policy,
        bpolicy: &b,
        pts: &pts,
        image: &image,
        params: &params.concrete,
        resolver: &resolver,
    });
    let naive = match a.naive {
        Some(bound) => match naive_check(&b, &pts, &image, &resolver, bound) {
            Ok(r) => Some(r),
            Err(e) => {
                eprintln!("naive check: {e}");
                return Ok(EXIT_INVALID);
            }
        },
        None => None,
    };
    let millis = started.elapsed().as_secs_f64() * 1e3;
    let pmem = b.physical.iter().map(|c| c.end()).max().unwrap_or(0);

    writeln!(
        out,
        "{:<5} {:>4} {:>4} {:>10} {:>10} {:>10}  Check Passed",
        "Cond", "Sub", "CPU", "PMem", "Image", "Time"
    )?;
    for (c, r) in &report.conditions {
        writeln!(
            out,
            "{:<5} {:>4} {:>4} {:>10} {:>10} {:>8.1}ms  {}",
            c.to_string(),
            b.subjects.len(),
            policy.ncpus,
            human_bytes(pmem),
            human_bytes(image.len() as u64),
            r.millis,
            if r.pass { "✓" } else { "✗" }
        )?;
    }
    writeln!(out, "total {millis:.1}ms")?;
    for f in report.findings().take(50) {
        writeln!(out, "  {f}")?;
    }
    let extra = report.findings().count().saturating_sub(50);
    if extra > 0 {
        writeln!(out, "  ... {extra} more findings")?;
    }

    if let Some(path) = &a.json {
        let doc = CheckJson {
            passed: report.passed(),
            subjects: b.subjects.len(),
            cpus: policy.ncpus,
            pmem_bytes: pmem,
            image_bytes: image.len(),
            millis,
            report: &report,
            naive: naive.as_ref(),
        };
        let text = serde_json::to_string_pretty(&doc).expect("report serializes");
        if let Err(e) = std::fs::write(path, text) {
            eprintln!("{}: {e}", path.display());
            return Ok(EXIT_IO);
        }
    }
    if let Some(n) = &naive {
        let diff = report.verdict_differences(n);
        if !diff.is_empty() {
            writeln!(out, "naive checker disagrees on {diff:?}")?;
            return Ok(EXIT_INCONSISTENT);
        }
        writeln!(out, "naive checker agrees on {:?}", n.conditions.keys().collect::<Vec<_>>())?;
    }
    Ok(if report.passed() { EXIT_OK } else { EXIT_FAIL })
}

// --- simulate ----------------------------------------------------------------

/// One line of a trace file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLine {
    pub op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<u8>,
}

impl TraceLine {
    pub fn to_call(&self) -> Result<OperationCall, String> {
        let cpu = || self.cpu.ok_or_else(|| format!("{:?} needs a cpu", self.op));
        match self.op.as_str() {
            INIT => Ok(OperationCall::init()),
            "exec" => Ok(exec(cpu()?)),
            "tick" => Ok(tick(cpu()?)),
            "interrupt" => Ok(interrupt(cpu()?, self.vector.ok_or("interrupt needs a vector")?)),
            other => Err(format!("unknown operation {other:?}")),
        }
    }

    pub fn from_call(call: &OperationCall) -> Self {
        let (cpu, vector) = match call.input {
            OpInput::Cpu(c) => (Some(c), None),
            OpInput::Interrupt { cpu, vector } => (Some(cpu), Some(vector)),
            OpInput::None | OpInput::Element(_) => (None, None),
        };
        Self { op: call.name.clone(), cpu, vector }
    }
}

pub fn read_trace(r: impl BufRead) -> Result<Vec<OperationCall>, String> {
    let mut calls = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?;
        calls.push(parsed.to_call().map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    Ok(calls)
}

pub fn write_trace(w: &mut dyn Write, trace: &[OperationCall]) -> io::Result<()> {
    for call in trace {
        writeln!(w, "{}", serde_json::to_string(&TraceLine::from_call(call)).expect("trace line serializes"))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SimulateSummary<'a> {
    #[serde(flatten)]
    verdict: &'a Verdict,
    seed: Option<u64>,
    trace_len: usize,
}

fn write_log(report: &LockstepReport, path: &Path, out: &mut dyn Write) -> io::Result<()> {
    let mut text = Vec::new();
    for r in &report.log {
        serde_json::to_writer(&mut text, r).expect("step record serializes");
        text.push(b'\n');
    }
    if path == Path::new("-") {
        out.write_all(&text)
    } else {
        std::fs::write(path, text)
    }
}

fn dump_snapshots(report: &LockstepReport, dir: &Path) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let abs = serde_json::to_string_pretty(&report.abs.snapshot()).expect("snapshot serializes");
    let conc = serde_json::to_string_pretty(&report.conc.snapshot()).expect("snapshot serializes");
    std::fs::write(dir.join("abstract.json"), abs)?;
    std::fs::write(dir.join("concrete.json"), conc)
}

pub fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write) -> io::Result<i32> {
    let artifacts = match Artifacts::load(&a.config) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("{e}");
            return Ok(EXIT_IO);
        }
    };
    let (trace, seed) = match &a.trace {
        Some(path) => {
            let file = match std::fs::File::open(path) {
                Ok(f) => f,
                Err(e) => {
                    eprintln!("{}: {e}", path.display());
                    return Ok(EXIT_IO);
                }
            };
            match read_trace(io::BufReader::new(file)) {
                Ok(t) => (t, None),
                Err(e) => {
                    eprintln!("{}: {e}", path.display());
                    return Ok(EXIT_INVALID);
                }
            }
        }
        None => {
            let seed = match effective_seed(a.seed) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("{e}");
                    return Ok(EXIT_INVALID);
                }
            };
            (trace_for(&artifacts, a.steps, seed), Some(seed))
        }
    };
    let opts = LockstepOptions {
        force: a.force,
        full_memory_every: a.full_memory_every.max(1),
        record_log: a.log.is_some(),
        ..LockstepOptions::default()
    };
    let report = match lockstep_run(&artifacts, &trace, &opts) {
        Ok(r) => r,
        Err(e @ HarnessError::ConditionR(_)) => {
            eprintln!("refusing to simulate: {e}; pass --force to run anyway");
            return Ok(EXIT_REFUSED);
        }
        Err(e @ HarnessError::Lockstep(_)) => {
            eprintln!("{e}");
            return Ok(EXIT_INVALID);
        }
        Err(e) => {
            eprintln!("{e}");
            return Ok(EXIT_IO);
        }
    };
    if let Some(path) = &a.log {
        write_log(&report, path, out)?;
    }
    let summary = SimulateSummary { verdict: &report.verdict, seed, trace_len: trace.len() };
    writeln!(out, "{}", serde_json::to_string(&summary).expect("summary serializes"))?;
    if report.verdict.passed() {
        return Ok(EXIT_OK);
    }
    if let Some(dir) = &a.dump_on_fail {
        dump_snapshots(&report, dir)?;
    }
    Ok(EXIT_FAIL)
}

// --- fuzz --------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct FuzzOutcome {
    pub index: usize,
    pub seed: u64,
    pub subjects: usize,
    pub cpus: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
    pub failed_conditions: Vec<Condition>,
    /// `pass`, `refused`, `skipped` or the divergence.
    pub lockstep: String,
    pub expected: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FuzzSummary {
    pub configs: usize,
    pub steps: usize,
    pub seed: u64,
    pub inject_random_fault: bool,
    pub expected: usize,
    pub unexpected: usize,
    pub failures: Vec<FuzzOutcome>,
}

/// gen, check and simulate one random policy. With a fault, the expected
/// result is exactly the fault's condition failing and simulate refusing.
pub fn fuzz_one(index: usize, seed: u64, steps: usize, inject: bool) -> FuzzOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let preset = if inject { Preset::FaultCapable } else { Preset::Lockstep };
    let config = random_config(preset, &mut rng);
    let fault = inject.then(|| Fault::ALL[rng.gen_range(0..Fault::ALL.len())]);
    let mut outcome = FuzzOutcome {
        index,
        seed,
        subjects: config.policy.subjects.len(),
        cpus: config.policy.ncpus,
        fault: fault.map(|f| f.to_string()),
        failed_conditions: Vec::new(),
        lockstep: "skipped".into(),
        expected: false,
        error: None,
    };
    let opts = GenOptions { fault, fault_seed: seed, ..GenOptions::default() };
    let artifacts = match generate(&config.policy, config.resolver, &opts) {
        Ok(a) => a,
        Err(e) => {
            outcome.error = Some(e.to_string());
            return outcome;
        }
    };
    let report = check_artifacts(&artifacts);
    outcome.failed_conditions = report.failed_conditions();
    let trace = trace_for(&artifacts, steps, seed);
    outcome.lockstep = match lockstep_run(&artifacts, &trace, &LockstepOptions::default()) {
        Ok(r) => match r.verdict {
            Verdict::Pass { .. } => "pass".into(),
            Verdict::Fail { step, divergence } => format!("fail at step {step}: {divergence:?}"),
        },
        Err(HarnessError::ConditionR(_)) => "refused".into(),
        Err(e) => {
            outcome.error = Some(e.to_string());
            return outcome;
        }
    };
    outcome.expected = match fault {
        None => outcome.failed_conditions.is_empty() && outcome.lockstep == "pass",
        Some(f) => outcome.failed_conditions == [f.condition()] && outcome.lockstep == "refused",
    };
    outcome
}

pub fn fuzz(configs: usize, steps: usize, seed: u64, inject: bool) -> FuzzSummary {
    let outcomes: Vec<FuzzOutcome> =
        (0..configs).into_par_iter().map(|i| fuzz_one(i, seed.wrapping_add(i as u64), steps, inject)).collect();
    let failures: Vec<FuzzOutcome> = outcomes.iter().filter(|o| !o.expected).cloned().collect();
    FuzzSummary {
        configs,
        steps,
        seed,
        inject_random_fault: inject,
        expected: configs - failures.len(),
        unexpected: failures.len(),
        failures,
    }
}

pub fn cmd_fuzz(a: &FuzzArgs, out: &mut dyn Write) -> io::Result<i32> {
    let seed = match effective_seed(a.seed) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return Ok(EXIT_INVALID);
        }
    };
    let run = || fuzz(a.configs, a.steps, seed, a.inject_random_fault);
    let summary = match a.jobs {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(run),
            Err(e) => {
                eprintln!("cannot start {n} workers: {e}");
                return Ok(EXIT_INVALID);
            }
        },
        None => run(),
    };
    writeln!(out, "{}", serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(if summary.unexpected == 0 { EXIT_OK } else { EXIT_FAIL })
}
