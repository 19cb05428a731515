mod common;

use std::io::{BufRead, BufReader};
use std::process::Stdio;

use common::*;
use retouch_core::io::{read_image, read_mask};

const FAST: &[&str] = &["--T", "20", "--m", "3", "--seed", "9", "--floor", "-1"];

fn run_args<'a>(image: &'a str, out: &'a str, query: &'a str) -> Vec<&'a str> {
    let mut v = vec!["run", "--image", image, "--query", query, "--text", "green grass", "--out-dir", out];
    v.extend_from_slice(FAST);
    v
}

#[test]
fn run_writes_every_artifact_and_keeps_the_background() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_two_tone(dir.path(), "in.ppm", 24, 18);
    let out = dir.path().join("out");
    let o = retouch(&run_args(s(&img), s(&out), "the thing"));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), s(&out.join("output.png")));

    let report = read_json(&out.join("report.json"));
    assert_eq!(report["artifacts"]["output"], "output.png");
    assert_eq!(report["artifacts"]["proposals"].as_array().unwrap().len(), 3);
    assert!(report.get("timings_ms").is_none());
    assert_eq!(report["config"]["retouch"]["T"], 20);
    let chosen = report["selection"]["chosen"].as_u64().unwrap();

    let input = read_image(&img).unwrap();
    let output = read_image(out.join("output.png")).unwrap();
    let chosen_file = read_image(out.join(format!("proposals/proposal_{chosen:02}.png"))).unwrap();
    assert_eq!(output, chosen_file);
    let mask = read_mask(out.join("mask.png")).unwrap();
    assert!(mask.count() > 0);
    for y in 0..18 {
        for x in 0..24 {
            if !mask.get(x, y) {
                assert_eq!(output.pixel(x, y), input.pixel(x, y), "pixel ({x},{y}) outside the region changed");
            }
        }
    }
}

#[test]
fn timings_are_opt_in_and_ppm_is_supported() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_two_tone(dir.path(), "in.png", 12, 12);
    let out = dir.path().join("out");
    let mut args = run_args(s(&img), s(&out), "the thing");
    args.extend(["--format", "ppm", "--timings"]);
    let o = retouch(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("output.ppm").exists());
    assert!(read_json(&out.join("report.json"))["timings_ms"]["mask"].is_number());
}

#[test]
fn no_matching_entity_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_two_tone(dir.path(), "in.ppm", 12, 12);
    let out = dir.path().join("out");
    let mut args = run_args(s(&img), s(&out), "the thing");
    args.extend(["--fixed-tau", "1"]);
    let o = retouch(&args);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let mask_out = dir.path().join("m.png");
    let o = retouch(&["mask", "--image", s(&img), "--query", "x", "--out", s(&mask_out), "--fixed-tau", "1"]);
    assert_eq!(code(&o), 3);
    assert!(!mask_out.exists());
    assert_eq!(read_json(&mask_out.with_extension("json"))["mask"]["selected"], serde_json::json!([]));
}

#[test]
fn invalid_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_two_tone(dir.path(), "in.ppm", 12, 12);
    let out = dir.path().join("out");
    let missing = dir.path().join("missing.png");
    for extra in [vec!["--m", "0"], vec!["--eta", "2"], vec!["--alpha", "-1"], vec!["--backend", "bogus"]] {
        let mut args = run_args(s(&img), s(&out), "the thing");
        args.extend(extra.iter());
        assert_eq!(code(&retouch(&args)), 2, "{extra:?}");
    }
    assert_eq!(code(&retouch(&run_args(s(&missing), s(&out), "x"))), 2);
    assert_eq!(code(&retouch(&["run", "--image", s(&img)])), 2);
    assert_eq!(code(&retouch(&["--jobs", "0", "mask", "--image", s(&img), "--query", "q", "--out", "m.png"])), 2);
}

#[test]
fn unreachable_backend_exits_4_from_flag_or_environment() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_two_tone(dir.path(), "in.ppm", 12, 12);
    let out = dir.path().join("out");
    let mut args = run_args(s(&img), s(&out), "the thing");
    args.extend(["--backend", "tcp://127.0.0.1:1"]);
    assert_eq!(code(&retouch(&args)), 4);

    let o = bin().args(run_args(s(&img), s(&out), "the thing")).env("RETOUCH_BACKEND", "tcp://127.0.0.1:1").output().unwrap();
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let o = bin().args(run_args(s(&img), s(&out), "the thing")).env("RETOUCH_BACKEND", "stdio:/nonexistent/server").output().unwrap();
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn mask_command_writes_mask_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_two_tone(dir.path(), "in.ppm", 15, 9);
    let out = dir.path().join("region.pgm");
    let o = retouch(&["mask", "--image", s(&img), "--query", "the left thing", "--out", s(&out), "--floor", "-1"]);
    let report = read_json(&out.with_extension("json"));
    assert_eq!(report["mask"]["constraint"]["kind"], "left");
    assert_eq!(report["mask"]["entity_count"], 2);
    if code(&o) == 0 {
        let m = read_mask(&out).unwrap();
        assert_eq!(m.count(), report["mask"]["region_pixels"].as_u64().unwrap() as usize);
        assert_eq!(m.dims(), (15, 9));
    } else {
        // only the right-hand segment passed the cut, and the location word removed it
        assert_eq!(code(&o), 3);
        assert_eq!(report["mask"]["selected"], serde_json::json!([]));
    }
}

#[test]
fn assess_ranks_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_two_tone(dir.path(), "in.ppm", 12, 12);
    let out = dir.path().join("out");
    assert_eq!(code(&retouch(&run_args(s(&img), s(&out), "the thing"))), 0);
    let report_path = dir.path().join("assess.json");
    let o = retouch(&[
        "assess", "--original", s(&img), "--proposals", s(&out.join("proposals")), "--text", "green grass",
        "--out", s(&report_path), "--no-cma",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_json(&report_path);
    let scores = r["selection"]["scores"].as_array().unwrap();
    assert_eq!(scores.len(), 3);
    let chosen = r["selection"]["chosen"].as_u64().unwrap() as usize;
    let iqa: Vec<f64> = scores.iter().map(|s| s["iqa"].as_f64().unwrap()).collect();
    assert!(iqa.iter().all(|&v| iqa[chosen] <= v));
    assert!(scores.iter().all(|s| s["cma"].as_f64().unwrap() == 0.0));

    let o = retouch(&["assess", "--original", s(&img), "--proposals", s(dir.path().join("nothing").as_path()), "--text", "x"]);
    assert_eq!(code(&o), 2);
}

fn write_manifest(dir: &std::path::Path, entries: usize) -> std::path::PathBuf {
    let list: Vec<_> = (0..entries)
        .map(|i| {
            let name = format!("img{i}.ppm");
            write_two_tone(dir, &name, 12 + 3 * i, 12);
            serde_json::json!({ "image_path": name, "query": "the thing", "conditional_text": "a red apple" })
        })
        .collect();
    let p = dir.join("manifest.json");
    std::fs::write(&p, serde_json::to_vec(&list).unwrap()).unwrap();
    p
}

#[test]
fn eval_writes_one_report_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), 3);
    let out = dir.path().join("eval");
    let mut args = vec!["eval", "--manifest", s(&manifest), "--out", s(&out), "--csv"];
    args.extend_from_slice(FAST);
    let o = retouch(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let index = read_json(&out.join("index.json"));
    assert_eq!(index["entries"], 3);
    for v in ["none", "cma", "iqa", "cma+iqa"] {
        let r = read_json(&out.join(format!("report_{v}.json")));
        assert_eq!(r["rows"].as_array().unwrap().len() + r["excluded_count"].as_u64().unwrap() as usize, 3);
        let csv = std::fs::read_to_string(out.join(format!("report_{v}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 1 + r["rows"].as_array().unwrap().len());
    }

    let out2 = dir.path().join("eval2");
    let mut args = vec!["eval", "--manifest", s(&manifest), "--out", s(&out2), "--variants", "iqa,cma"];
    args.extend_from_slice(FAST);
    assert_eq!(code(&retouch(&args)), 0);
    assert!(out2.join("report_iqa.json").exists() && !out2.join("report_none.json").exists());
}

#[test]
fn empty_or_unreadable_manifest_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "[]").unwrap();
    let out = dir.path().join("eval");
    assert_eq!(code(&retouch(&["eval", "--manifest", s(&empty), "--out", s(&out)])), 2);
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&retouch(&["eval", "--manifest", s(&missing), "--out", s(&out)])), 2);
    let manifest = write_manifest(dir.path(), 1);
    assert_eq!(code(&retouch(&["eval", "--manifest", s(&manifest), "--out", s(&out), "--variants", "bogus"])), 2);
}

fn run_outputs(backend: &str, dir: &std::path::Path, tag: &str) -> std::collections::BTreeMap<std::path::PathBuf, Vec<u8>> {
    let img = write_two_tone(dir, "in.ppm", 12, 12);
    let out = dir.join(tag);
    let mut args = run_args(s(&img), s(&out), "the thing");
    args.extend(["--backend", backend]);
    let o = retouch(&args);
    assert_eq!(code(&o), 0, "{tag}: {}", stderr(&o));
    let mut files = snapshot(&out);
    files.remove(std::path::Path::new("report.json"));
    files
}

#[test]
fn stdio_server_reproduces_in_process_results() {
    let dir = tempfile::tempdir().unwrap();
    let local = run_outputs("mock:seed=3,dim=32", dir.path(), "local");
    let server = format!("stdio:{} serve --stdio --T 20 --backend mock:seed=3,dim=32", env!("CARGO_BIN_EXE_retouch"));
    let remote = run_outputs(&server, dir.path(), "remote");
    assert_eq!(local, remote);
}

#[test]
fn tcp_server_reproduces_in_process_results() {
    let mut child = bin()
        .args(["serve", "--listen", "127.0.0.1:0", "--T", "20", "--backend", "mock:seed=3,dim=32"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let endpoint = line.trim().to_string();
    assert!(endpoint.starts_with("tcp://127.0.0.1:"), "{endpoint}");

    let dir = tempfile::tempdir().unwrap();
    let local = run_outputs("mock:seed=3,dim=32", dir.path(), "local");
    let first = run_outputs(&endpoint, dir.path(), "remote1");
    let second = run_outputs(&endpoint, dir.path(), "remote2");
    child.kill().unwrap();
    let _ = child.wait();
    assert_eq!(local, first);
    assert_eq!(local, second);
}
