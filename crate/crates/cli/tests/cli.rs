use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skrefine_cli::write_trace;
use skrefine_core::harness::trace_for;
use skrefine_core::synth::{random_config, Preset};
use skrefine_core::toolchain::{generate, Artifacts, GenOptions};

fn fig4a() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/fig4a.xml")
}

fn skrefine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skrefine")).args(args).env_remove("SKREFINE_SEED").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path, fault: Option<&str>) -> PathBuf {
    let out = dir.join(fault.unwrap_or("clean"));
    let policy = fig4a();
    let mut args = vec!["gen", policy.to_str().unwrap(), out.to_str().unwrap()];
    if let Some(f) = fault {
        args.extend(["--fault", f]);
    }
    let o = skrefine(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn clean_config_checks_and_simulates() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = gen(tmp.path(), None);
    for f in ["policy.xml", "bpolicy.xml", "image.bin", "params.json", "pts/sub1.pt", "pts/sub4.pt"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let json = tmp.path().join("report.json");
    let o = skrefine(&["check", "--config", dir.to_str().unwrap(), "--json", json.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("Check Passed"));
    assert_eq!(text.matches('✓').count(), 5, "{text}");
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(doc["passed"], true);
    assert_eq!(doc["report"]["conditions"]["R1"]["pass"], true);

    let o = skrefine(&["simulate", "--config", dir.to_str().unwrap(), "--steps", "10000", "--seed", "9"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}

#[test]
fn explicit_paths_match_config_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = gen(tmp.path(), None);
    let p = |f: &str| dir.join(f).to_str().unwrap().to_string();
    let (policy, bpolicy, pts, image, params) =
        (p("policy.xml"), p("bpolicy.xml"), p("pts"), p("image.bin"), p("params.json"));
    let o = skrefine(&[
        "check",
        "--policy",
        &policy,
        "--bpolicy",
        &bpolicy,
        "--ptdir",
        &pts,
        "--image",
        &image,
        "--params",
        &params,
    ]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}

#[test]
fn undeclared_sharing_flags_r1() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = gen(tmp.path(), Some("drop-channel-flag"));
    let o = skrefine(&["check", "--config", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let text = stdout(&o);
    let r1 = text.lines().find(|l| l.starts_with("R1")).unwrap();
    assert!(r1.ends_with('✗'), "{r1}");
    assert!(text.contains("Illegal sharing detected."));
}

#[test]
fn overlap_fault_fails_r1() {
    let tmp = tempfile::tempdir().unwrap();
    let c = random_config(Preset::FaultCapable, &mut ChaCha8Rng::seed_from_u64(2));
    std::fs::write(tmp.path().join("policy.xml"), skrefine_core::policy::serialize_policy(&c.policy)).unwrap();
    for (path, bytes) in c.resolver.overrides() {
        let p = tmp.path().join(path);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, bytes).unwrap();
    }
    let out = tmp.path().join("out");
    let o = skrefine(&[
        "gen",
        tmp.path().join("policy.xml").to_str().unwrap(),
        out.to_str().unwrap(),
        "--fault",
        "overlap",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = skrefine(&["check", "--config", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let text = stdout(&o);
    let failed: Vec<&str> = text.lines().filter(|l| l.ends_with('✗')).collect();
    assert_eq!(failed.len(), 1, "{text}");
    assert!(failed[0].starts_with("R1"));
}

#[test]
fn invalid_policy_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fig4a()).unwrap();
    // one CPU runs 10 ticks longer than the other in the first major frame
    let bad = text.replacen("ticks=\"40\"", "ticks=\"50\"", 1);
    assert_ne!(bad, text);
    let path = tmp.path().join("bad.xml");
    std::fs::write(&path, bad).unwrap();
    let o = skrefine(&["gen", path.to_str().unwrap(), tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn missing_input_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = skrefine(&["check", "--config", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn naive_comparison_on_small_config() {
    let tmp = tempfile::tempdir().unwrap();
    let c = random_config(Preset::Micro, &mut ChaCha8Rng::seed_from_u64(5));
    let a = generate(&c.policy, c.resolver, &GenOptions::default()).unwrap();
    a.write(tmp.path()).unwrap();
    let o = skrefine(&["check", "--config", tmp.path().to_str().unwrap(), "--naive", "0x400000"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("naive checker agrees"));
    let o = skrefine(&["check", "--config", tmp.path().to_str().unwrap(), "--naive", "0x4000000"]);
    assert_eq!(code(&o), 2, "bound above the naive limit");
}

#[test]
fn refuses_then_diverges_when_forced() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = gen(tmp.path(), Some("pt-redirect"));
    let d = dir.to_str().unwrap();
    assert_eq!(code(&skrefine(&["simulate", "--config", d, "--steps", "500"])), 5);
    let dump = tmp.path().join("dump");
    let o =
        skrefine(&["simulate", "--config", d, "--steps", "500", "--force", "--dump-on-fail", dump.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["verdict"], "fail");
    assert!(summary["divergence"]["reason"].as_str().unwrap().starts_with("g2"));
    assert!(dump.join("abstract.json").is_file() && dump.join("concrete.json").is_file());
}

#[test]
fn trace_replay_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = gen(tmp.path(), None);
    let a = Artifacts::load(&dir).unwrap();
    let trace_path = tmp.path().join("trace.jsonl");
    let mut f = std::fs::File::create(&trace_path).unwrap();
    write_trace(&mut f, &trace_for(&a, 2000, 77)).unwrap();
    drop(f);
    let mut logs = Vec::new();
    for i in 0..2 {
        let log = tmp.path().join(format!("log{i}.jsonl"));
        let o = skrefine(&[
            "simulate",
            "--config",
            dir.to_str().unwrap(),
            "--trace",
            trace_path.to_str().unwrap(),
            "--log",
            log.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0);
        logs.push(std::fs::read_to_string(log).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
    assert_eq!(logs[0].lines().count(), 2001);
    let first: serde_json::Value = serde_json::from_str(logs[0].lines().next().unwrap()).unwrap();
    assert_eq!(first["op"], "init");
}

#[test]
fn bad_trace_line_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = gen(tmp.path(), None);
    let trace = tmp.path().join("t.jsonl");
    std::fs::write(&trace, "{\"op\":\"tick\",\"cpu\":0}\n{\"op\":\"reboot\"}\n").unwrap();
    let o = skrefine(&["simulate", "--config", dir.to_str().unwrap(), "--trace", trace.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn seed_env_overrides_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = gen(tmp.path(), None);
    let o = Command::new(env!("CARGO_BIN_EXE_skrefine"))
        .args(["simulate", "--config", dir.to_str().unwrap(), "--steps", "100", "--seed", "1"])
        .env("SKREFINE_SEED", "12")
        .output()
        .unwrap();
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["seed"], 12);
}

#[test]
fn fuzz_counts() {
    let o = skrefine(&["fuzz", "--configs", "0"]);
    assert_eq!(code(&o), 0);
    let s: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(s["configs"], 0);

    let o = skrefine(&["fuzz", "--configs", "4", "--steps", "2000", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let o = skrefine(&["fuzz", "--configs", "6", "--steps", "500", "--seed", "3", "--inject-random-fault"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let s: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(s["expected"], 6);
}
