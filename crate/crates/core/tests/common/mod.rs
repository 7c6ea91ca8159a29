#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use driverforge::analysis::ProgramAst;
use driverforge::ast::TranslationUnit;
use driverforge::constraints::{Constraint, ConstraintKind};
use driverforge::library::{ingest_ast, LibraryModel};
use serde::Deserialize;

pub fn toycodec_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toycodec")
}

/// Public API model from the checked-in header and implementation dumps.
pub fn toycodec_model() -> LibraryModel {
    let dir = toycodec_dir();
    let read = |f: &str| TranslationUnit::from_json(&std::fs::read_to_string(dir.join(f)).unwrap()).unwrap();
    let mut m = ingest_ast(&read("headers.ast.json"), &[]).unwrap();
    m.add_call_graph(&read("impl.ast.json"));
    m
}

pub fn toycodec_apis() -> BTreeSet<String> {
    toycodec_model().api_names().into_iter().collect()
}

/// Seed harnesses parsed from their dumps, in name order.
pub fn seed_programs() -> Vec<(String, ProgramAst)> {
    let dir = toycodec_dir().join("seeds");
    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            (p.extension()? == "c").then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    names.sort();
    let apis = toycodec_apis();
    names
        .into_iter()
        .map(|n| {
            let src = std::fs::read_to_string(dir.join(format!("{n}.c"))).unwrap();
            let dump = std::fs::read_to_string(dir.join(format!("{n}.ast.json"))).unwrap();
            let p = ProgramAst::from_dump(&dump, src, apis.iter().cloned()).unwrap();
            (n, p)
        })
        .collect()
}

#[derive(Debug, Deserialize)]
pub struct TruthEntry {
    pub api: String,
    pub arg: usize,
    pub kind: ConstraintKind,
    pub related_arg: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct TruthFile {
    constraint: Vec<TruthEntry>,
}

pub type ConstraintKey = (String, usize, ConstraintKind, Option<usize>);

pub fn ground_truth() -> BTreeSet<ConstraintKey> {
    let text = std::fs::read_to_string(toycodec_dir().join("ground_truth.toml")).unwrap();
    let f: TruthFile = toml::from_str(&text).unwrap();
    f.constraint.into_iter().map(|c| (c.api, c.arg, c.kind, c.related_arg)).collect()
}

pub fn keys<'a>(cs: impl IntoIterator<Item = &'a Constraint>) -> BTreeSet<ConstraintKey> {
    cs.into_iter().map(|c| (c.api.clone(), c.arg, c.kind, c.related_arg)).collect()
}
