//! Persistent seed bank: admitted programs, the global visited-branch set,
//! the shared corpus pool and deduplicated crashes.
//!
//! On-disk layout under the bank root:
//!
//! ```text
//! bank.json                   library build hash
//! manifest.jsonl              one line of metadata per seed
//! visited.jsonl               global visited branches
//! seeds/<id>/{src.c, meta.json, coverage.jsonl, ast.json}
//! corpus/<sha256>             content-addressed inputs
//! crashes/<key>/{report.txt, input, meta.json}
//! ```
//!
//! Everything is written in a fixed order from ordered collections, so a
//! persisted bank is byte-identical for identical contents.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coverage::{Branch, BranchSet};
use crate::scheduler::{quality, ApiCombination, PivotSeed};

#[derive(Debug, thiserror::Error)]
pub enum BankError {
    #[error("source already admitted as seed {0}")]
    DuplicateSource(String),
    #[error("bank was built against library {found}, current build is {expected}")]
    BuildMismatch { expected: String, found: String },
    #[error("bank I/O at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt bank file {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BankError + '_ {
    move |source| BankError::Io { path: path.to_path_buf(), source }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedProgram {
    pub id: String,
    #[serde(skip)]
    pub source: String,
    pub combination: ApiCombination,
    #[serde(skip)]
    pub coverage: BranchSet,
    pub density: u64,
    pub unique_branches: u64,
    pub quality: u64,
    pub is_unique: bool,
    pub created_iteration: u64,
    /// Critical calls, computed once at admission.
    pub critical: Vec<String>,
    /// Distinct library APIs the source calls.
    pub apis_called: Vec<String>,
    /// Pruned AST dump of the source.
    #[serde(skip)]
    pub ast_json: String,
}

/// Everything the pipeline knows about a program that passed sanitization.
#[derive(Debug, Clone)]
pub struct Admission {
    pub source: String,
    pub ast_json: String,
    pub combination: ApiCombination,
    pub coverage: BranchSet,
    pub density: u64,
    pub critical: Vec<String>,
    pub apis_called: Vec<String>,
    pub iteration: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashRecord {
    pub dedup_key: String,
    #[serde(skip)]
    pub trace: String,
    /// sha256 of the reproducing input, stored next to the report.
    pub input_sha: Option<String>,
    #[serde(skip)]
    pub input: Option<Vec<u8>>,
    pub program_id: String,
    pub fallback_key: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankHeader {
    library_hash: String,
}

#[derive(Debug, Clone, Default)]
pub struct SeedBank {
    pub library_hash: String,
    seeds: Vec<SeedProgram>,
    global: BranchSet,
    sources: BTreeMap<String, String>,
    corpus: BTreeMap<String, Vec<u8>>,
    crashes: BTreeMap<String, CrashRecord>,
}

impl SeedBank {
    pub fn new(library_hash: impl Into<String>) -> Self {
        SeedBank { library_hash: library_hash.into(), ..Default::default() }
    }

    pub fn seeds(&self) -> &[SeedProgram] {
        &self.seeds
    }

    pub fn seed(&self, id: &str) -> Option<&SeedProgram> {
        self.seeds.iter().find(|s| s.id == id)
    }

    pub fn global(&self) -> &BranchSet {
        &self.global
    }

    pub fn unique_seeds(&self) -> impl Iterator<Item = &SeedProgram> {
        self.seeds.iter().filter(|s| s.is_unique)
    }

    /// Grows the global set; returns the number of new branches.
    pub fn merge_and_report(&mut self, new: &BranchSet) -> usize {
        self.global.merge(new)
    }

    pub fn admit(&mut self, a: Admission) -> Result<SeedProgram, BankError> {
        let sha = sha256_hex(a.source.as_bytes());
        if let Some(id) = self.sources.get(&sha) {
            return Err(BankError::DuplicateSource(id.clone()));
        }
        let unique = a.coverage.difference(&self.global).len() as u64;
        self.merge_and_report(&a.coverage);
        let seed = SeedProgram {
            id: format!("seed-{:06}", self.seeds.len()),
            source: a.source,
            combination: a.combination,
            coverage: a.coverage,
            density: a.density,
            unique_branches: unique,
            quality: quality(a.density, unique),
            is_unique: unique > 0,
            created_iteration: a.iteration,
            critical: a.critical,
            apis_called: a.apis_called,
            ast_json: a.ast_json,
        };
        self.sources.insert(sha, seed.id.clone());
        self.seeds.push(seed.clone());
        Ok(seed)
    }

    /// Recomputes the quality of every unique seed.
    pub fn update_qualities(&mut self) {
        for s in self.seeds.iter_mut().filter(|s| s.is_unique) {
            s.quality = quality(s.density, s.unique_branches);
        }
    }

    pub fn pivots(&self) -> Vec<PivotSeed> {
        self.unique_seeds().map(|s| PivotSeed { id: s.id.clone(), quality: s.quality, critical: s.critical.clone() }).collect()
    }

    /// Number of seeds calling each API.
    pub fn seed_counts(&self) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        for s in &self.seeds {
            for a in &s.apis_called {
                *m.entry(a.clone()).or_default() += 1;
            }
        }
        m
    }

    pub fn add_corpus(&mut self, blob: &[u8]) -> String {
        let sha = sha256_hex(blob);
        self.corpus.entry(sha.clone()).or_insert_with(|| blob.to_vec());
        sha
    }

    /// Corpus inputs in hash order.
    pub fn corpus(&self) -> Vec<Vec<u8>> {
        self.corpus.values().cloned().collect()
    }

    pub fn corpus_len(&self) -> usize {
        self.corpus.len()
    }

    /// Records a crash; returns whether its key is new.
    pub fn record_crash(&mut self, program_id: &str, report: &str, input: Option<&[u8]>) -> (String, bool) {
        let (key, fallback) = dedup_key(report);
        let fresh = !self.crashes.contains_key(&key);
        if fresh {
            self.crashes.insert(
                key.clone(),
                CrashRecord {
                    dedup_key: key.clone(),
                    trace: report.to_owned(),
                    input_sha: input.map(sha256_hex),
                    input: input.map(<[u8]>::to_vec),
                    program_id: program_id.to_owned(),
                    fallback_key: fallback,
                },
            );
        }
        (key, fresh)
    }

    pub fn crashes(&self) -> impl Iterator<Item = &CrashRecord> {
        self.crashes.values()
    }

    pub fn persist(&self, root: &Path) -> Result<(), BankError> {
        let write = |p: PathBuf, bytes: &[u8]| -> Result<(), BankError> {
            if let Some(d) = p.parent() {
                fs::create_dir_all(d).map_err(io_err(d))?;
            }
            // Write-then-rename keeps a killed process from leaving torn files.
            let tmp = p.with_extension("tmp~");
            let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(bytes).map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
            fs::rename(&tmp, &p).map_err(io_err(&p))
        };
        write(root.join("bank.json"), to_line(&BankHeader { library_hash: self.library_hash.clone() }).as_bytes())?;
        for s in &self.seeds {
            let dir = root.join("seeds").join(&s.id);
            if !dir.join("meta.json").exists() {
                write(dir.join("src.c"), s.source.as_bytes())?;
                write(dir.join("ast.json"), s.ast_json.as_bytes())?;
                write(dir.join("coverage.jsonl"), jsonl(s.coverage.iter()).as_bytes())?;
                write(dir.join("meta.json"), to_line(s).as_bytes())?;
            }
        }
        write(root.join("manifest.jsonl"), jsonl(self.seeds.iter()).as_bytes())?;
        write(root.join("visited.jsonl"), jsonl(self.global.iter()).as_bytes())?;
        for (sha, blob) in &self.corpus {
            let p = root.join("corpus").join(sha);
            if !p.exists() {
                write(p, blob)?;
            }
        }
        for c in self.crashes.values() {
            let dir = root.join("crashes").join(&c.dedup_key);
            if !dir.join("meta.json").exists() {
                write(dir.join("report.txt"), c.trace.as_bytes())?;
                if let Some(i) = &c.input {
                    write(dir.join("input"), i)?;
                }
                write(dir.join("meta.json"), to_line(c).as_bytes())?;
            }
        }
        Ok(())
    }

    pub fn exists(root: &Path) -> bool {
        root.join("bank.json").exists()
    }

    /// Loads a persisted bank, refusing one built against another library.
    pub fn load(root: &Path, expected_hash: Option<&str>) -> Result<Self, BankError> {
        let read = |p: &Path| fs::read_to_string(p).map_err(io_err(p));
        let header: BankHeader = parse(&root.join("bank.json"), &read(&root.join("bank.json"))?)?;
        if let Some(exp) = expected_hash {
            if exp != header.library_hash {
                return Err(BankError::BuildMismatch { expected: exp.to_owned(), found: header.library_hash });
            }
        }
        let mut bank = SeedBank::new(header.library_hash);
        let manifest = root.join("manifest.jsonl");
        for line in read(&manifest)?.lines().filter(|l| !l.trim().is_empty()) {
            let mut s: SeedProgram = parse(&manifest, line)?;
            let dir = root.join("seeds").join(&s.id);
            s.source = read(&dir.join("src.c"))?;
            s.ast_json = read(&dir.join("ast.json"))?;
            let cov_path = dir.join("coverage.jsonl");
            s.coverage = read(&cov_path)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| parse::<Branch>(&cov_path, l))
                .collect::<Result<_, _>>()?;
            bank.sources.insert(sha256_hex(s.source.as_bytes()), s.id.clone());
            bank.seeds.push(s);
        }
        let visited = root.join("visited.jsonl");
        bank.global =
            read(&visited)?.lines().filter(|l| !l.trim().is_empty()).map(|l| parse::<Branch>(&visited, l)).collect::<Result<_, _>>()?;
        let corpus_dir = root.join("corpus");
        if corpus_dir.exists() {
            for e in fs::read_dir(&corpus_dir).map_err(io_err(&corpus_dir))? {
                let p = e.map_err(io_err(&corpus_dir))?.path();
                if p.extension().is_some() {
                    continue;
                }
                let blob = fs::read(&p).map_err(io_err(&p))?;
                bank.corpus.insert(sha256_hex(&blob), blob);
            }
        }
        let crash_dir = root.join("crashes");
        if crash_dir.exists() {
            for e in fs::read_dir(&crash_dir).map_err(io_err(&crash_dir))? {
                let dir = e.map_err(io_err(&crash_dir))?.path();
                let meta = dir.join("meta.json");
                if !meta.exists() {
                    continue;
                }
                let mut c: CrashRecord = parse(&meta, &read(&meta)?)?;
                c.trace = read(&dir.join("report.txt"))?;
                c.input = fs::read(dir.join("input")).ok();
                bank.crashes.insert(c.dedup_key.clone(), c);
            }
        }
        Ok(bank)
    }
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, BankError> {
    serde_json::from_str(text).map_err(|e| BankError::Corrupt { path: path.to_path_buf(), msg: e.to_string() })
}

fn jsonl<'a, T: Serialize + 'a>(items: impl Iterator<Item = &'a T>) -> String {
    let mut out = String::new();
    for i in items {
        out.push_str(&serde_json::to_string(i).expect("bank records serialize"));
        out.push('\n');
    }
    out
}

fn to_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("bank records serialize") + "\n"
}

const RUNTIME_FRAME_PREFIXES: &[&str] = &[
    "__asan",
    "__interceptor",
    "__sanitizer",
    "__ubsan",
    "__lsan",
    "__fsan",
    "__df_",
    "__libc",
    "_start",
    "abort",
    "raise",
    "malloc",
    "calloc",
    "realloc",
    "free",
    "memcpy",
    "memmove",
    "memset",
    "strlen",
];

/// Normalized stack frames (`symbol file`) from a sanitizer report, runtime
/// and libc frames removed.
pub fn normalized_frames(report: &str) -> Vec<String> {
    let mut frames = Vec::new();
    for line in report.lines() {
        let t = line.trim_start();
        let Some(rest) = t.strip_prefix('#') else { continue };
        let mut parts = rest.splitn(2, ' ');
        if parts.next().is_none_or(|n| n.parse::<u32>().is_err()) {
            continue;
        }
        let rest = parts.next().unwrap_or("").trim();
        // Drop the address.
        let rest = match rest.split_once(' ') {
            Some((addr, r)) if addr.starts_with("0x") => r.trim(),
            _ => rest,
        };
        let Some(rest) = rest.strip_prefix("in ") else { continue };
        let mut it = rest.split_whitespace();
        let Some(sym) = it.next() else { continue };
        let loc = it.next().unwrap_or("");
        if RUNTIME_FRAME_PREFIXES.iter().any(|p| sym.starts_with(p)) || loc.starts_with('(') {
            continue;
        }
        let file = loc.split(':').next().unwrap_or("");
        let file = Path::new(file).file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        if file.is_empty() {
            continue;
        }
        frames.push(format!("{sym} {file}"));
        if frames.len() == 5 {
            break;
        }
    }
    frames
}

/// Dedup key of a report and whether the whole-report fallback was used.
pub fn dedup_key(report: &str) -> (String, bool) {
    let frames = normalized_frames(report);
    if frames.is_empty() {
        return (sha256_hex(report.as_bytes())[..16].to_owned(), true);
    }
    (sha256_hex(frames.join("\n").as_bytes())[..16].to_owned(), false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[(&str, u32)]) -> BranchSet {
        items.iter().map(|(f, i)| Branch { func: f.to_string(), id: *i }).collect()
    }

    fn adm(src: &str, cov: BranchSet) -> Admission {
        Admission {
            source: src.into(),
            ast_json: "{}".into(),
            combination: ApiCombination::new(vec!["f".into()]).unwrap(),
            coverage: cov,
            density: 2,
            critical: vec!["f".into()],
            apis_called: vec!["f".into()],
            iteration: 0,
        }
    }

    #[test]
    fn admission_credits_only_new_branches() {
        let mut b = SeedBank::new("h");
        let s1 = b.admit(adm("a", set(&[("f", 0), ("f", 1), ("g", 0)]))).unwrap();
        assert_eq!((s1.unique_branches, s1.is_unique, s1.quality), (3, true, 8));
        let s2 = b.admit(adm("b", set(&[("f", 1), ("g", 0), ("g", 1)]))).unwrap();
        assert_eq!(s2.unique_branches, 1);
        let s3 = b.admit(adm("c", set(&[("f", 0)]))).unwrap();
        assert!(!s3.is_unique);
        assert!(matches!(b.admit(adm("a", BranchSet::new())), Err(BankError::DuplicateSource(_))));
        let credited: u64 = b.seeds().iter().map(|s| s.unique_branches).sum();
        assert_eq!(credited as usize, b.global().len());
    }

    #[test]
    fn merge_report() {
        let mut b = SeedBank::new("h");
        assert_eq!(b.merge_and_report(&BranchSet::new()), 0);
        let s = set(&[("a", 0), ("a", 1), ("a", 2), ("b", 0), ("b", 1)]);
        assert_eq!(b.merge_and_report(&s), 5);
        assert_eq!(b.merge_and_report(&s), 0);
    }

    #[test]
    fn persist_round_trip_is_byte_identical() {
        let mut b = SeedBank::new("lib-1");
        b.admit(adm("int main;", set(&[("f", 0)]))).unwrap();
        b.admit(adm("int other;", set(&[("f", 0), ("g", 3)]))).unwrap();
        b.add_corpus(b"abc");
        b.record_crash("seed-000001", "==1==ERROR\n    #0 0x1 in tc_feed /x/toycodec.c:3:1\n", Some(b"in"));
        let d1 = tempfile::tempdir().unwrap();
        b.persist(d1.path()).unwrap();
        let loaded = SeedBank::load(d1.path(), Some("lib-1")).unwrap();
        assert_eq!(loaded.seeds(), b.seeds());
        assert_eq!(loaded.global(), b.global());
        assert_eq!(loaded.corpus(), b.corpus());
        let d2 = tempfile::tempdir().unwrap();
        loaded.persist(d2.path()).unwrap();
        for f in ["bank.json", "manifest.jsonl", "visited.jsonl", "seeds/seed-000001/coverage.jsonl"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
        assert!(matches!(SeedBank::load(d1.path(), Some("lib-2")), Err(BankError::BuildMismatch { .. })));
    }

    const R1: &str = "==123==ERROR: AddressSanitizer: heap-buffer-overflow on address 0x602000000011\n\
        WRITE of size 3 at 0x602000000011 thread T0\n\
        \x20   #0 0x4c3b2e in __asan_memcpy (/w/bin+0x4c3b2e)\n\
        \x20   #1 0x4f5e2a in tc_feed /src/toycodec.c:88:5\n\
        \x20   #2 0x4f1000 in df_seed_0 /w/src.c:12:3\n\
        \x20   #3 0x4f1100 in LLVMFuzzerTestOneInput /w/src.c:30:1\n\
        \x20   #4 0x7f00 in __libc_start_main (/lib/libc.so.6+0x2409b)\n";

    #[test]
    fn same_bug_different_addresses() {
        let r2 = R1.replace("0x602000000011", "0x6020000000f1").replace("0x4f5e2a", "0x4f5f00").replace(":88:5", ":88:9");
        assert_eq!(dedup_key(R1), dedup_key(&r2));
        assert_eq!(normalized_frames(R1), ["tc_feed toycodec.c", "df_seed_0 src.c", "LLVMFuzzerTestOneInput src.c"]);
    }

    #[test]
    fn distinct_bugs_and_fallback() {
        let other = R1.replace("tc_feed", "tc_peek");
        assert_ne!(dedup_key(R1).0, dedup_key(&other).0);
        let (_, fb) = dedup_key("ERROR: FileSanitizer: 1 leaked descriptor\n");
        assert!(fb);
        let mut b = SeedBank::new("h");
        assert!(b.record_crash("p", R1, None).1);
        assert!(!b.record_crash("q", &R1.replace("0x4f5e2a", "0x1"), None).1);
    }
}
