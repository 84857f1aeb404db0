#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_litextract");

/// CNKI-style export with the seven recognised headers.
pub fn cnki_csv(rows: usize) -> String {
    let mut s = String::from("篇名,作者,摘要,关键词,文献来源,发表时间,DOI\n");
    for i in 0..rows {
        s.push_str(&format!(
            "Study {i} of topic {},Author {i};Coauthor {},\"Abstract {i}: we examine topic {}, with results.\",kw{i};kw{},Journal {},2024-{:02}-01,10.1000/j.{i}\n",
            i % 17,
            i % 5,
            i % 17,
            i % 9,
            i % 4,
            i % 12 + 1
        ));
    }
    s
}

pub fn write_fixture(dir: &Path, rows: usize) -> PathBuf {
    let path = dir.join("cnki.csv");
    std::fs::write(&path, cnki_csv(rows)).unwrap();
    path
}

/// Runs the binary with an isolated data directory.
pub fn litextract(home: &Path, args: &[&str]) -> Output {
    command(home, args).output().expect("binary runs")
}

pub fn command(home: &Path, args: &[&str]) -> Command {
    let mut cmd = Command::new(BIN);
    cmd.env("LITEXTRACT_HOME", home).env_remove("LITEXTRACT_API_KEY").args(args);
    cmd
}
