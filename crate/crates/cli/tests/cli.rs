use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use das_core::engine::SimReport;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_das-sim"))
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = r#"{
  "schema": "das-sim-scenario/1",
  "name": "small",
  "topology": "desk",
  "kernel": { "gemv": { "m": 16, "n": 64 } },
  "engine": { "port_interval": 2 }
}"#;

#[test]
fn run_bundled_gemv_prints_table_row() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let f = scenarios().join("desk/gemv_32x1024.json");
    let o = run(&["--out-dir", out.to_str().unwrap(), "run", f.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("| Mapping Scheme | Workload Dimension | #Parallel | Utilization (IPC) | Speedup |"), "{s}");
    assert!(s.contains("| das | gemv 32x1024 | 1 |"), "{s}");
    assert!(s.contains("speedup"), "{s}");
    for name in ["gemv_32x1024.das.json", "gemv_32x1024.interleaved.json", "gemv_32x1024.das.pe.csv", "gemv_32x1024.breakdown.csv", "gemv_32x1024.md"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    // Written reports parse back unchanged.
    let text = std::fs::read_to_string(out.join("gemv_32x1024.das.json")).unwrap();
    let r = SimReport::from_json(&text).unwrap();
    assert_eq!(r.to_json(), text);
    assert!(r.speedup.unwrap() > 1.0);
}

#[test]
fn interleaved_only_has_no_speedup() {
    let tmp = tempfile::tempdir().unwrap();
    let f = write(tmp.path(), "s.json", &SMALL.replace("\"engine\"", "\"schemes\": [\"interleaved\"],\n  \"engine\""));
    let out = tmp.path().join("out");
    let o = run(&["--out-dir", out.to_str().unwrap(), "--format", "json", "run", f.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files, vec![std::ffi::OsString::from("small.interleaved.json")]);
    let text = std::fs::read_to_string(out.join("small.interleaved.json")).unwrap();
    assert!(!text.contains("\"speedup\""));
    assert!(!stdout(&o).contains("Speedup"));
}

#[test]
fn malformed_scenario_exits_2_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let f = write(tmp.path(), "bad.json", &SMALL.replace("\"topology\"", "\"topolgy\""));
    let o = run(&["--out-dir", out.to_str().unwrap(), "run", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.json:4:"), "{}", stderr(&o));
    assert!(!out.exists());

    let f = write(tmp.path(), "shape.json", &SMALL.replace("\"m\": 16", "\"m\": 10"));
    let o = run(&["--out-dir", out.to_str().unwrap(), "run", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("shape.json:5:"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn simulation_fault_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let f = write(tmp.path(), "s.json", &SMALL.replace("\"port_interval\": 2", "\"max_cycles\": 50"));
    let o = run(&["--out-dir", out.to_str().unwrap(), "run", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("cycle limit"));
    assert!(!out.exists());
}

#[test]
fn sweep_head_dim_writes_combined_breakdown() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let f = scenarios().join("desk/attention_p8.json");
    let o = run(&["--out-dir", out.to_str().unwrap(), "sweep", f.to_str().unwrap(), "--axis", "head_dim", "--values", "8,16,32"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("attention_s256_p8.sweep-head_dim.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "axis,value,label,scheme,phase,cycles,issued,lsu,raw,ins,wfi");
    // Rows come in value order whatever order the runs finished in.
    let values: Vec<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    let mut sorted = values.clone();
    sorted.sort_by_key(|v| v.parse::<u32>().unwrap());
    assert_eq!(values, sorted);
    for v in ["8", "16", "32"] {
        assert!(values.contains(&v));
        for sch in ["das", "interleaved"] {
            assert!(out.join(format!("attention_s256_p8.head_dim-{v}.{sch}.json")).is_file());
        }
    }
}

#[test]
fn sweep_window_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let f = write(tmp.path(), "s.json", SMALL);
    let mut csvs = Vec::new();
    for i in 0..2 {
        let out = tmp.path().join(format!("o{i}"));
        let o = run(&["--out-dir", out.to_str().unwrap(), "--format", "csv", "sweep", f.to_str().unwrap(), "--axis", "window", "--values", "1,2,4,8"]);
        assert!(o.status.success(), "{}", stderr(&o));
        csvs.push(std::fs::read_to_string(out.join("small.sweep-window.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0].lines().filter(|l| l.contains(",total,")).count(), 8);
}

#[test]
fn sweep_edge_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let f = write(tmp.path(), "s.json", SMALL);
    let o = run(&["--out-dir", out.to_str().unwrap(), "sweep", f.to_str().unwrap(), "--axis", "n", "--values", ""]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("no values"));
    assert!(!out.exists());

    let o = run(&["--out-dir", out.to_str().unwrap(), "sweep", f.to_str().unwrap(), "--axis", "nonsense", "--values", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown axis"));

    // One bad value stops the sweep before anything runs.
    let o = run(&["--out-dir", out.to_str().unwrap(), "sweep", f.to_str().unwrap(), "--axis", "m", "--values", "16,6"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

fn run_small(dir: &Path, topology: &str, tag: &str) -> PathBuf {
    let f = write(dir, &format!("{tag}.json"), &SMALL.replace("\"desk\"", topology));
    let out = dir.join(tag);
    let o = run(&["--out-dir", out.to_str().unwrap(), "--format", "json", "run", f.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn report_pairs_and_singles() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_small(tmp.path(), "\"desk\"", "a");
    let das = a.join("small.das.json");
    let il = a.join("small.interleaved.json");

    let out = tmp.path().join("rep");
    let o = run(&["--out-dir", out.to_str().unwrap(), "report", das.to_str().unwrap(), il.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("| Speedup |"));
    let bars = std::fs::read_to_string(out.join("report.breakdown.csv")).unwrap();
    assert!(bars.starts_with("label,scheme,phase,cycles,issued,lsu,raw,ins,wfi\n"));
    assert!(bars.contains(",das,compute,") && bars.contains(",interleaved,compute,"));

    let o = run(&["report", das.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(!stdout(&o).contains("Speedup"), "{}", stdout(&o));
}

#[test]
fn report_rejects_mixed_topologies_and_foreign_files() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_small(tmp.path(), "\"desk\"", "a");
    let custom = r#"{ "pes_per_tile": 4, "banks_per_tile": 16, "tiles_per_subgroup": 4, "subgroups_per_group": 2, "groups": 2,
    "rows_per_bank": 256, "word_bytes": 4,
    "level_latency": { "tile_local": 1, "subgroup_local": 3, "group_local": 5, "remote": 9 } }"#;
    let b = run_small(tmp.path(), custom, "b");
    let fb = b.join("small.das.json");
    let o = run(&["report", a.join("small.das.json").to_str().unwrap(), fb.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(fb.to_str().unwrap()), "{}", stderr(&o));

    let foreign = write(tmp.path(), "x.json", r#"{"schema": "something-else/3"}"#);
    let o = run(&["report", a.join("small.das.json").to_str().unwrap(), foreign.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("x.json"));
}
