#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use retouch_core::io::write_image;
use retouch_core::Image;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_retouch"));
    c.env_remove("RETOUCH_BACKEND").env("RUST_LOG", "error");
    c
}

pub fn retouch(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Yellow block on the left, blue elsewhere; 8-bit exact values.
pub fn two_tone(w: usize, h: usize) -> Image {
    let data = (0..w * h)
        .flat_map(|i| {
            let x = i % w;
            if x < w / 3 { [1.0, 204.0 / 255.0, 0.0] } else { [0.0, 51.0 / 255.0, 153.0 / 255.0] }
        })
        .collect();
    Image::new(w, h, data).unwrap()
}

pub fn write_two_tone(dir: &Path, name: &str, w: usize, h: usize) -> PathBuf {
    let p = dir.join(name);
    write_image(&two_tone(w, h), &p).unwrap();
    p
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

/// Every file under `dir`, relative path to bytes.
pub fn snapshot(dir: &Path) -> std::collections::BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut std::collections::BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = Default::default();
    walk(dir, dir, &mut out);
    out
}
