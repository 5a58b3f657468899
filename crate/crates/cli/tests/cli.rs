use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn xpnn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xpnn")).args(args).current_dir(dir).output().expect("binary runs")
}

const SUM: &str = "\
.org 0x10000000
data: .word 5, 7
.org 0x1c000000
_start:
    la x5, data
    lw x6, 0(x5)
    lw x7, 4(x5)
    add x8, x6, x7
    sw x8, 8(x5)
    halt
";

#[test]
fn asm_disasm_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("sum.s"), SUM).unwrap();
    assert!(xpnn(&["asm", "sum.s", "-o", "a.hex"], dir.path()).status.success());
    assert!(xpnn(&["disasm", "a.hex", "-o", "b.s"], dir.path()).status.success());
    assert!(xpnn(&["asm", "b.s", "-o", "b.hex"], dir.path()).status.success());
    let a = fs::read_to_string(dir.path().join("a.hex")).unwrap();
    let b = fs::read_to_string(dir.path().join("b.hex")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn run_is_deterministic_and_dumps_memory() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("sum.s"), SUM).unwrap();
    let one = xpnn(&["run", "sum.s", "--cores", "2", "--dump", "mem.hex"], dir.path());
    let two = xpnn(&["run", "sum.s", "--cores", "2"], dir.path());
    assert!(one.status.success(), "{}", String::from_utf8_lossy(&one.stderr));
    assert_eq!(one.stdout, two.stdout);
    let report: serde_json::Value = serde_json::from_slice(&one.stdout).unwrap();
    assert_eq!(report["registers"][0][8], 12);
    let mem = fs::read_to_string(dir.path().join("mem.hex")).unwrap();
    assert!(mem.contains("0000000c"), "{mem}");
}

#[test]
fn trap_exits_with_two_and_names_the_pc() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("trap.s"), "_start:\n    nop\n    lw x5, 2(x0)\n    halt\n").unwrap();
    let out = xpnn(&["run", "trap.s"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("0x1c000004"), "{err}");
}

#[test]
fn config_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.s"), "_start:\n    frobnicate x1\n").unwrap();
    assert_eq!(xpnn(&["asm", "bad.s"], dir.path()).status.code(), Some(3));
    assert_eq!(xpnn(&["bench", "--precision", "3"], dir.path()).status.code(), Some(3));
    assert_eq!(xpnn(&["bench", "--layer", "4x4x32,6x3x3x32"], dir.path()).status.code(), Some(3));
    fs::write(dir.path().join("c.toml"), "cores = 8\nbanks = 12\n").unwrap();
    fs::write(dir.path().join("ok.s"), "_start:\n    halt\n").unwrap();
    assert_eq!(xpnn(&["run", "ok.s", "--config", "c.toml"], dir.path()).status.code(), Some(3));
}

#[test]
fn bench_writes_sorted_json_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "bench", "--layer", "4x4x32,8x3x3x32", "--precision", "8,2", "--variant", "simd-4x2,nn-4x4", "--cores", "2",
        "--seed", "9", "--out", "r.json",
    ];
    let out = xpnn(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("nn-4x4") && table.contains("config "), "{table}");
    let text = fs::read_to_string(dir.path().join("r.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["cells"].as_array().unwrap().len(), 4);
    assert_eq!(v["config"]["seed"], 9);
    assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
    let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
    assert_eq!(keys, ["cells", "config", "config_hash"]);

    assert!(xpnn(&args[..args.len() - 1].iter().copied().chain(["r2.json"]).collect::<Vec<_>>(), dir.path()).status.success());
    assert_eq!(text, fs::read_to_string(dir.path().join("r2.json")).unwrap());
}

#[test]
fn opef_table_lists_the_ladder() {
    let dir = tempfile::tempdir().unwrap();
    let out = xpnn(&["opef", "--out", "o.json"], dir.path());
    assert!(out.status.success());
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o.json")).unwrap()).unwrap();
    let by_name = |n: &str| rows.as_array().unwrap().iter().find(|r| r["kernel"] == n).unwrap()["dynamic_opef"].as_f64().unwrap();
    assert!((by_name("load-load-mac") - 1.0 / 3.0).abs() < 1e-12);
    assert!((by_name("nn-4x4") - 16.0 / 17.0).abs() < 1e-12);
}
