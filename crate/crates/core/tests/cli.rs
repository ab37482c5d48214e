use std::path::Path;
use std::process::{Command, Output};

use sdmsim::metrics::RunReport;

fn sdmsim(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sdmsim"));
    cmd.args(args).env_remove("SDMSIM_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &str = "hosts = 1\nsdm_bytes = 67108864\nlayout = \"wc\"\n[workload]\npattern = \"stream\"\npages = 256\nops = 500\n";

#[test]
fn run_writes_a_loadable_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("run.json");
    let o = sdmsim(&["run", &cfg, "-o", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = RunReport::load(&out).unwrap();
    assert_eq!(r.totals.faults, 0);
    let csv = dir.path().join("csv");
    let o = sdmsim(&["report", out.to_str().unwrap(), "--csv-dir", csv.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert!(csv.join("hosts.csv").exists());
}

#[test]
fn seed_override_changes_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &SMALL.replace("stream", "random"));
    let a = sdmsim(&["run", &cfg], &[("SDMSIM_SEED", "5")]);
    let b = sdmsim(&["run", &cfg], &[("SDMSIM_SEED", "5")]);
    let c = sdmsim(&["run", &cfg], &[("SDMSIM_SEED", "6")]);
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).contains("\"seed\": 5"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "hosts = 0\n");
    assert_eq!(sdmsim(&["run", &bad], &[]).status.code(), Some(2));
    let unknown = write(dir.path(), "unknown.toml", "colour = 3\n");
    assert_eq!(sdmsim(&["run", &unknown], &[]).status.code(), Some(2));
    assert_eq!(sdmsim(&["run", "/nonexistent/x.toml"], &[]).status.code(), Some(2));
    let good = write(dir.path(), "c.toml", SMALL);
    assert_eq!(sdmsim(&["run", &good], &[("SDMSIM_SEED", "nope")]).status.code(), Some(2));
}

#[test]
fn trace_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let traces = dir.path().join("traces");
    std::fs::create_dir(&traces).unwrap();
    write(&traces, "h0.trace", "LD 0 0 0x1000 8\nJUMP 0 0\n");
    let o = sdmsim(&["run", &cfg, "--trace-dir", traces.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("h0.trace"));
}

#[test]
fn generated_trace_replays_like_the_inline_workload() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let traces = dir.path().join("traces");
    std::fs::create_dir(&traces).unwrap();
    let file = traces.join("h0.trace");
    let o = sdmsim(
        &[
            "gen-trace",
            "stream",
            "--pages",
            "256",
            "--ops",
            "500",
            "--seed",
            "1",
            "-o",
            file.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let from_file = sdmsim(&["run", &cfg, "--trace-dir", traces.to_str().unwrap()], &[]);
    assert_eq!(from_file.status.code(), Some(0), "{}", String::from_utf8_lossy(&from_file.stderr));
    let inline = sdmsim(&["run", &cfg], &[]);
    assert_eq!(from_file.stdout, inline.stdout);
}

#[test]
fn strict_mode_exits_4_over_threshold() {
    let dir = tempfile::tempdir().unwrap();
    // No context is ever armed, so every remote access is rejected.
    let cfg = write(dir.path(), "c.toml", &format!("strict_fault_threshold = 2\n{SMALL}"));
    let traces = dir.path().join("traces");
    std::fs::create_dir(&traces).unwrap();
    let lds: String = (0..5).map(|i| format!("LD 0 0 {:#x} 8\n", (1u64 << 40) + i * 64)).collect();
    write(&traces, "h0.trace", &lds);
    let t = traces.to_str().unwrap();
    assert_eq!(sdmsim(&["run", &cfg, "--trace-dir", t], &[]).status.code(), Some(0));
    assert_eq!(sdmsim(&["run", &cfg, "--trace-dir", t, "--strict"], &[]).status.code(), Some(4));
}

#[test]
fn sweep_and_attack_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let o = sdmsim(&["sweep-cache", &cfg, "--sizes", "8,16,32", "--csv"], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 4);

    let o = sdmsim(&["attack", "untagged-access"], &[]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"passed\":true"));
    let o = sdmsim(&["attack", "untagged-access", "--ablate", "no-abit-check"], &[]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"passed\":false"));
    assert_eq!(sdmsim(&["attack", "rowhammer"], &[]).status.code(), Some(2));

    let o = sdmsim(&["verify"], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}
