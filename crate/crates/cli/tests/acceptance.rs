//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Runs under `cargo test` (harness = false).

#[path = "../../core/tests/golden/mod.rs"]
mod golden;

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skrefine_cli::{cmd_check, CheckArgs};
use skrefine_core::checker::{check_all, check_validity, naive_check, CheckInputs, Condition};
use skrefine_core::concrete_machine::KernelMutation;
use skrefine_core::faults::Fault;
use skrefine_core::harness::{
    check_artifacts, lockstep_run, test_no_exfiltration, test_no_infiltration, test_temporal_separation, trace_for,
    LockstepOptions,
};
use skrefine_core::paging::PAGE_SIZE;
use skrefine_core::refinement::{
    add, check_lockstep, check_set_condition, elem, set_glue, AbstractSetMachine, Divergence, OperationCall,
    SetMachine, SetMachineParams, Verdict,
};
use skrefine_core::synth::{random_config, wide_config, Preset};
use skrefine_core::toolchain::{generate, Artifacts, GenOptions};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn artifacts(preset: Preset, seed: u64, fault: Option<Fault>) -> Result<Artifacts, String> {
    let c = random_config(preset, &mut ChaCha8Rng::seed_from_u64(seed));
    generate(&c.policy, c.resolver, &GenOptions { fault, fault_seed: seed, ..GenOptions::default() })
        .map_err(|e| format!("seed {seed}: {e}"))
}

// --- oracle equivalence -------------------------------------------------------

const NAIVE_BOUND: u64 = 1 << 22;

#[derive(Clone, Copy, Debug)]
enum Mutation {
    None,
    Fault(Fault),
    LeafBit,
    ImageByte,
}

/// Flip one of present, writable, no-execute or a low address bit in a
/// random leaf entry that maps a declared page.
fn flip_leaf_bit(a: &mut Artifacts, rng: &mut ChaCha8Rng) -> bool {
    let mut leaves = Vec::new();
    for s in 0..a.bpolicy.subjects.len() {
        for pg in a.bpolicy.pages(s) {
            if let Ok(w) = a.pts[s].walk(pg.va) {
                if w.len == 4 {
                    leaves.push((s, w.entries[3]));
                }
            }
        }
    }
    let Some(&(s, i)) = leaves.choose(rng) else { return false };
    let bit = *[0u32, 1, 63, 12, 13, 14].choose(rng).expect("non-empty");
    a.pts[s].entries[i] ^= 1 << bit;
    true
}

fn flip_image_byte(a: &mut Artifacts, rng: &mut ChaCha8Rng) -> bool {
    if a.image.is_empty() {
        return false;
    }
    let i = rng.gen_range(0..a.image.len());
    a.image[i] ^= 1 << rng.gen_range(0..8);
    true
}

fn oracle_equivalence() -> Outcome {
    const CONFIGS: u64 = 240;
    let mutations = [
        Mutation::None,
        Mutation::None,
        Mutation::LeafBit,
        Mutation::ImageByte,
        Mutation::Fault(Fault::DropChannelFlag),
        Mutation::Fault(Fault::PtLeafRedirect),
        Mutation::Fault(Fault::SpuriousPresent),
        Mutation::Fault(Fault::PhysOverlap),
    ];
    let (mut disagreements, mut mutated, mut failing, mut max_pages) = (Vec::new(), 0, 0, 0);
    for seed in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x04ac1e);
        let c = random_config(Preset::Micro, &mut rng);
        let mut m = mutations[seed as usize % mutations.len()];
        if matches!(m, Mutation::Fault(Fault::PhysOverlap)) && c.policy.channels.len() < 2 {
            m = Mutation::LeafBit;
        }
        if matches!(m, Mutation::Fault(Fault::DropChannelFlag)) && c.policy.channels.is_empty() {
            m = Mutation::ImageByte;
        }
        let fault = match m {
            Mutation::Fault(f) => Some(f),
            _ => None,
        };
        let opts = GenOptions { fault, fault_seed: seed, ..GenOptions::default() };
        let mut a = match generate(&c.policy, c.resolver, &opts) {
            Ok(a) => a,
            Err(e) => return outcome(false, format!("seed {seed}: generation failed: {e}")),
        };
        let changed = match m {
            Mutation::None => false,
            Mutation::Fault(_) => true,
            Mutation::LeafBit => flip_leaf_bit(&mut a, &mut rng),
            Mutation::ImageByte => flip_image_byte(&mut a, &mut rng),
        };
        mutated += usize::from(changed);
        max_pages = max_pages.max((0..a.bpolicy.subjects.len()).map(|s| a.bpolicy.pages(s).len()).max().unwrap_or(0));
        if a.bpolicy.subjects.len() > 3 {
            return outcome(false, format!("seed {seed}: more than 3 subjects"));
        }
        let fast = check_all(CheckInputs {
            policy: &a.policy,
            bpolicy: &a.bpolicy,
            pts: &a.pts,
            image: &a.image,
            params: &a.params.concrete,
            resolver: &a.resolver,
        });
        let naive = match naive_check(&a.bpolicy, &a.pts, &a.image, &a.resolver, NAIVE_BOUND) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("seed {seed}: naive checker error: {e}")),
        };
        failing += usize::from(!fast.passed());
        let compared: Vec<Condition> = naive.conditions.keys().copied().collect();
        if compared != [Condition::R1, Condition::R2, Condition::R3, Condition::R4] {
            return outcome(false, format!("seed {seed}: naive checker evaluated {compared:?}"));
        }
        let diff = fast.verdict_differences(&naive);
        if !diff.is_empty() {
            disagreements.push(format!("seed {seed} {m:?}: {diff:?}"));
        }
    }
    let detail = format!(
        "{CONFIGS} micro configs ({mutated} mutated, {failing} failing some condition, <= {max_pages} pages/subject, \
         bound 2^22): {} disagreements{}",
        disagreements.len(),
        disagreements.first().map(|d| format!("; first: {d}")).unwrap_or_default()
    );
    outcome(disagreements.is_empty() && max_pages <= 16 && failing > 0, detail)
}

// --- fault detection ------------------------------------------------------------

fn fault_detection() -> Outcome {
    let (mut hits, mut total, mut misses) = (0, 0, Vec::new());
    for f in Fault::ALL {
        for seed in 0..10 {
            total += 1;
            let a = match artifacts(Preset::FaultCapable, 1000 + seed, Some(f)) {
                Ok(a) => a,
                Err(e) => {
                    misses.push(format!("{f}: {e}"));
                    continue;
                }
            };
            let failed = check_artifacts(&a).failed_conditions();
            if a.fault.is_some() && failed == [f.condition()] {
                hits += 1;
            } else {
                misses.push(format!("{f} seed {seed}: failed {failed:?}"));
            }
        }
    }
    let detail = format!(
        "{hits}/{total} flagged under exactly the intended condition{}",
        misses.first().map(|m| format!("; first miss: {m}")).unwrap_or_default()
    );
    outcome(hits == 60 && total == 60, detail)
}

// --- validity scaling ----------------------------------------------------------------

/// Best of several batches, each long enough to swamp timer resolution.
fn time_validity(a: &Artifacts) -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..7 {
        let started = Instant::now();
        let mut runs = 0u32;
        while started.elapsed() < Duration::from_millis(60) || runs < 3 {
            let f = check_validity(&a.bpolicy, &a.pts);
            assert!(f.is_empty());
            runs += 1;
        }
        best = best.min(started.elapsed() / runs);
    }
    best
}

fn validity_scaling() -> Outcome {
    let sizes = [1024u64, 2048, 4096];
    let mut times = Vec::new();
    for &pages in &sizes {
        let c = wide_config(1, pages, &mut ChaCha8Rng::seed_from_u64(pages));
        let a = match generate(&c.policy, c.resolver, &GenOptions::default()) {
            Ok(a) => a,
            Err(e) => return outcome(false, format!("{pages} pages: {e}")),
        };
        let used = a.bpolicy.pages(0).len() as u64;
        if used < pages {
            return outcome(false, format!("subject uses {used} pages, wanted {pages}"));
        }
        times.push(time_validity(&a));
    }
    let ratios: Vec<f64> = times.windows(2).map(|w| w[1].as_secs_f64() / w[0].as_secs_f64()).collect();
    let pass = ratios.iter().all(|&r| r <= 3.0) && times.iter().all(|t| *t < Duration::from_secs(2));
    let detail = format!(
        "times {} for {:?} pages; ratios {}",
        times.iter().map(|t| format!("{:.1}us", t.as_secs_f64() * 1e6)).collect::<Vec<_>>().join("/"),
        sizes,
        ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join("/")
    );
    outcome(pass, detail)
}

// --- desk-scale check --------------------------------------------------------------

fn desk_scale() -> Outcome {
    let a = match artifacts(Preset::DeskScale, 16, None) {
        Ok(a) => a,
        Err(e) => return outcome(false, e),
    };
    let used = a.bpolicy.used_pages() as u64 * PAGE_SIZE;
    let (subs, cpus) = (a.bpolicy.subjects.len(), a.policy.ncpus);
    let tmp = match tempfile::tempdir() {
        Ok(t) => t,
        Err(e) => return outcome(false, e.to_string()),
    };
    if let Err(e) = a.write(tmp.path()) {
        return outcome(false, e.to_string());
    }
    let args = CheckArgs { config: Some(tmp.path().to_path_buf()), ..CheckArgs::default() };
    let started = Instant::now();
    let code = cmd_check(&args, &mut std::io::sink());
    let took = started.elapsed();
    let pass = code.as_ref().is_ok_and(|&c| c == 0)
        && subs == 16
        && cpus == 4
        && used >= 32 << 20
        && took < Duration::from_secs(10);
    let detail = format!(
        "{subs} subjects, {cpus} CPUs, {:.1} MiB used: check exit {code:?} in {:.2}s",
        used as f64 / (1 << 20) as f64,
        took.as_secs_f64()
    );
    outcome(pass, detail)
}

// --- lock-step refinement -----------------------------------------------------

fn lockstep_refinement() -> Outcome {
    const POLICIES: u64 = 100;
    const STEPS: usize = 10_000;
    let started = Instant::now();
    let (mut passed, mut failures, mut shape_ok) = (0, Vec::new(), true);
    for seed in 0..POLICIES {
        let a = match artifacts(Preset::Lockstep, 5000 + seed, None) {
            Ok(a) => a,
            Err(e) => {
                failures.push(e);
                continue;
            }
        };
        let p = &a.policy;
        shape_ok &= (2..=4).contains(&p.ncpus) && (4..=16).contains(&p.subjects.len()) && !p.channels.is_empty();
        match lockstep_run(&a, &trace_for(&a, STEPS, seed), &LockstepOptions::default()) {
            Ok(r) if r.verdict == Verdict::Pass { steps: STEPS + 1 } => passed += 1,
            Ok(r) => failures.push(format!("seed {seed}: {:?}", r.verdict)),
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    let took = started.elapsed();
    let detail = format!(
        "{passed}/{POLICIES} policies x {STEPS} steps without glue, invariant or output violations in {:.1}s{}",
        took.as_secs_f64(),
        failures.first().map(|f| format!("; first failure: {f}")).unwrap_or_default()
    );
    outcome(passed == POLICIES && shape_ok && took < Duration::from_secs(600), detail)
}

// --- golden trace ------------------------------------------------------------------

fn golden_trace() -> Outcome {
    match golden::run() {
        Ok(()) => outcome(
            true,
            "minor switch at tick 40 (timer 40), barrier at 80, release cmsc=80 frame=1 timers 80/60 on both machines",
        ),
        Err(e) => outcome(false, e),
    }
}

// --- set machine ---------------------------------------------------------------------

fn set_lockstep(t: &[usize], trace: &[OperationCall]) -> Verdict {
    let mut abs = AbstractSetMachine::new(t.len());
    let mut conc = SetMachine::new(SetMachineParams::new(t.to_vec()));
    check_lockstep(&mut abs, &mut conc, trace, set_glue).expect("same machine type")
}

/// Smallest number of post-init operations of the form add(x) then elem(y)
/// that exposes a divergence, if any does within three.
fn shortest_divergence(t: &[usize]) -> Option<usize> {
    let n = t.len() as u64;
    let mut best = None;
    for x in 0..n {
        for y in 0..n {
            for trace in [vec![add(x)], vec![add(x), elem(y)], vec![add(x), add(y), elem(x)]] {
                if let Verdict::Fail { step, .. } = set_lockstep(t, &trace) {
                    let post_init = step - 1;
                    best = Some(best.map_or(post_init, |b: usize| b.min(post_init)));
                }
            }
        }
    }
    best.filter(|&k| k <= 3)
}

fn set_machine() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e7);
    let mut failures = Vec::new();
    for i in 0..1000 {
        let n = rng.gen_range(1..=8);
        let mut t: Vec<usize> = (0..n).collect();
        t.shuffle(&mut rng);
        if !check_set_condition(&SetMachineParams::new(t.clone()), n) {
            failures.push(format!("trace {i}: condition rejects permutation {t:?}"));
            continue;
        }
        let len = rng.gen_range(1..=64);
        let trace: Vec<OperationCall> = (0..len)
            .map(|_| {
                let x = rng.gen_range(0..n as u64);
                if rng.gen_bool(0.5) {
                    add(x)
                } else {
                    elem(x)
                }
            })
            .collect();
        if !set_lockstep(&t, &trace).passed() {
            failures.push(format!("trace {i} with T={t:?} diverged"));
        }
    }
    let target = [0usize, 0, 1, 2];
    let witness = shortest_divergence(&target);
    let mut non_injective = 0;
    let mut undetected = Vec::new();
    for code in 0..256usize {
        let t: Vec<usize> = (0..4).map(|k| (code >> (2 * k)) & 3).collect();
        let mut seen = t.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() == 4 {
            continue;
        }
        non_injective += 1;
        if shortest_divergence(&t).is_none() {
            undetected.push(t);
        }
    }
    let fixed = set_lockstep(&[0, 0, 2, 3], &[add(0), elem(1)]);
    let detail = format!(
        "1000 injective traces: {} failures; T=[0,0,1,2] diverges after {} post-init ops; \
         {}/{} non-injective T caught within 3; T=[0,0,2,3] [add(0), elem(1)] -> {:?}",
        failures.len(),
        witness.map_or("none".into(), |k| k.to_string()),
        non_injective - undetected.len(),
        non_injective,
        fixed
    );
    let fixed_ok = matches!(fixed, Verdict::Fail { step, .. } if step <= 3);
    outcome(failures.is_empty() && witness.is_some() && undetected.is_empty() && fixed_ok, detail)
}

// --- security properties -------------------------------------------------------------

fn security() -> Outcome {
    const SEEDS: u64 = 50;
    let mut problems = Vec::new();
    let mut counts = [[0usize; 2]; 3];
    for seed in 0..SEEDS {
        let clean = match artifacts(Preset::FaultCapable, 9000 + seed, None) {
            Ok(a) => a,
            Err(e) => return outcome(false, e),
        };
        let aliased = match artifacts(Preset::FaultCapable, 9000 + seed, Some(Fault::PtLeafRedirect)) {
            Ok(a) => a,
            Err(e) => return outcome(false, e),
        };
        let results = [
            (test_no_exfiltration(&clean, seed), test_no_exfiltration(&aliased, seed)),
            (test_no_infiltration(&clean, seed), test_no_infiltration(&aliased, seed)),
            (
                test_temporal_separation(&clean, seed, KernelMutation::default()),
                test_temporal_separation(&clean, seed, KernelMutation { skip_register_save: true }),
            ),
        ];
        for (k, (good, bad)) in results.into_iter().enumerate() {
            match (good, bad) {
                (Ok(g), Ok(b)) => {
                    if g.passed && g.checks > 0 {
                        counts[k][0] += 1;
                    } else {
                        problems.push(format!("seed {seed}: {} failed on clean config: {:?}", g.property, g.detail));
                    }
                    if !b.passed {
                        counts[k][1] += 1;
                    } else {
                        problems.push(format!("seed {seed}: {} missed its counterpart", b.property));
                    }
                }
                (Err(e), _) | (_, Err(e)) => problems.push(format!("seed {seed}: {e}")),
            }
        }
    }
    let names = ["no-exfiltration", "no-infiltration", "temporal-separation"];
    let detail = format!(
        "{}{}",
        names
            .iter()
            .zip(counts)
            .map(|(n, [g, b])| format!("{n} {g}/{SEEDS} clean pass, {b}/{SEEDS} counterparts fail"))
            .collect::<Vec<_>>()
            .join("; "),
        problems.first().map(|p| format!("; first problem: {p}")).unwrap_or_default()
    );
    outcome(problems.is_empty(), detail)
}

// --- conditionality ---------------------------------------------------------------

fn conditionality() -> Outcome {
    let fig4a = golden::fig4a();
    if !check_artifacts(&fig4a).passed() {
        return outcome(false, "clean fig4a config fails condition R");
    }
    let redirect = |seed| GenOptions { fault: Some(Fault::PtLeafRedirect), fault_seed: seed, ..GenOptions::default() };
    let c = random_config(Preset::FaultCapable, &mut ChaCha8Rng::seed_from_u64(31));
    let configs = [
        ("fig4a", generate(&fig4a.policy, fig4a.resolver.clone(), &redirect(1))),
        ("random", generate(&c.policy, c.resolver, &redirect(31))),
    ];
    let forced = LockstepOptions { force: true, ..LockstepOptions::default() };
    let (mut pass, mut lines) = (true, Vec::new());
    for (name, art) in configs {
        let art = match art {
            Ok(x) => x,
            Err(e) => return outcome(false, format!("{name}: {e}")),
        };
        let trace = trace_for(&art, 10_000, 1);
        let failed = check_artifacts(&art).failed_conditions();
        let refused = lockstep_run(&art, &trace, &LockstepOptions::default()).is_err();
        let verdict = match lockstep_run(&art, &trace, &forced) {
            Ok(r) => r.verdict,
            Err(e) => return outcome(false, format!("{name}: {e}")),
        };
        let (g2, step) = match &verdict {
            Verdict::Fail { step, divergence: Divergence::GlueViolation { reason } } => {
                (reason.starts_with("g2"), *step)
            }
            _ => (false, 0),
        };
        pass &= failed == [Condition::R1] && refused && g2;
        lines.push(format!("{name}: R fails {failed:?}, refused={refused}, forced run fails g2={g2} at step {step}"));
    }
    outcome(pass, lines.join("; "))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("oracle-equivalence", oracle_equivalence),
        ("fault-detection", fault_detection),
        ("validity-scaling", validity_scaling),
        ("desk-scale-check", desk_scale),
        ("lockstep-refinement", lockstep_refinement),
        ("golden-schedule-trace", golden_trace),
        ("set-machine", set_machine),
        ("security-properties", security),
        ("conditionality", conditionality),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let started = Instant::now();
        let o = f();
        failed += usize::from(!o.pass);
        println!(
            "{} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            started.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
