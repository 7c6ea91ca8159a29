//! Argument constraint inference over seed programs.
//!
//! Static rules look at every API call site of every seed; allocation-size
//! sensitivity is measured by a probe that rebuilds a seed with one scalar
//! argument pinned to a small and a large value and compares peak heap use.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::analysis::{literal_of, LiteralValue};
use crate::analysis::{strip_casts, var_decls, var_init, written_vars, ProgramAst, ENTRY};
use crate::ast::{Node, Span};

/// Declaration order is the tie-break precedence used by [`resolve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConstraintKind {
    ArrayLength,
    FileDesc,
    AllocSize,
    ArrayIndex,
    FileName,
    FormatString,
}

impl ConstraintKind {
    pub const ALL: [ConstraintKind; 6] = [
        ConstraintKind::ArrayLength,
        ConstraintKind::FileDesc,
        ConstraintKind::AllocSize,
        ConstraintKind::ArrayIndex,
        ConstraintKind::FileName,
        ConstraintKind::FormatString,
    ];

    pub fn is_relational(self) -> bool {
        matches!(self, ConstraintKind::ArrayLength | ConstraintKind::ArrayIndex)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Constraint {
    pub kind: ConstraintKind,
    pub api: String,
    pub arg: usize,
    /// The array argument, for ArrayLength and ArrayIndex.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub related_arg: Option<usize>,
    /// Number of seed programs evidencing the constraint.
    pub support: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Calls whose result is a file descriptor.
    pub descriptor_sources: Vec<String>,
    /// String literals naming the harness's files.
    pub file_names: Vec<String>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            descriptor_sources: ["open", "openat", "creat", "dup", "dup2", "fileno", "mkstemp"].map(String::from).to_vec(),
            file_names: vec![crate::prompt::INPUT_FILE.into(), crate::prompt::OUTPUT_FILE.into()],
        }
    }
}

type Key = (ConstraintKind, String, usize, Option<usize>);

/// Applies the static rules to every program and sums support per
/// constraint. Output is sorted.
pub fn infer_static(programs: &[ProgramAst], cfg: &InferenceConfig) -> Vec<Constraint> {
    let mut support: BTreeMap<Key, u32> = BTreeMap::new();
    let mut vetoed: BTreeSet<(String, usize, usize)> = BTreeSet::new();
    for prog in programs {
        let mut found: BTreeSet<Key> = BTreeSet::new();
        for f in functions(prog) {
            let ctx = FnCtx::new(prog, f, cfg);
            ctx.scan(&mut found, &mut vetoed);
        }
        for k in found {
            *support.entry(k).or_default() += 1;
        }
    }
    support
        .into_iter()
        .filter(|((kind, api, arg, rel), _)| {
            *kind != ConstraintKind::ArrayIndex || !vetoed.contains(&(api.clone(), *arg, rel.unwrap_or(usize::MAX)))
        })
        .map(|((kind, api, arg, related_arg), support)| Constraint { kind, api, arg, related_arg, support })
        .collect()
}

fn functions(prog: &ProgramAst) -> Vec<&Node> {
    let mut v = vec![prog.entry_function()];
    v.extend(prog.helpers.iter().filter_map(|h| prog.helper_function(h)));
    v
}

struct Loop<'a> {
    var: String,
    bound: &'a Node,
    body: Span,
}

struct FnCtx<'a> {
    prog: &'a ProgramAst,
    func: &'a Node,
    cfg: &'a InferenceConfig,
    decls: HashMap<&'a str, &'a Node>,
    written: BTreeSet<String>,
    /// Variable id -> size expressions of allocations assigned to it.
    allocs: HashMap<String, Vec<&'a Node>>,
    loops: Vec<Loop<'a>>,
    fd_vars: BTreeSet<String>,
    /// (data, size) parameters when this is the fuzzing entry.
    entry_pair: Option<(String, String)>,
}

fn decl_ref_id(n: &Node) -> Option<&str> {
    let n = strip_casts(n);
    if n.kind != "DeclRefExpr" {
        return None;
    }
    let r = n.referenced_decl.as_ref()?;
    matches!(r.kind.as_str(), "VarDecl" | "ParmVarDecl").then_some(r.id.as_str())
}

fn desugared(n: &Node) -> &str {
    n.ty.as_ref().map(|t| t.desugared.as_deref().unwrap_or(&t.qual_type)).unwrap_or("")
}

fn is_pointer_type(t: &str) -> bool {
    t.contains('*') || t.contains('[')
}

/// Integer scalar (not pointer, floating, enum, or aggregate).
pub fn is_integer_type(t: &str) -> bool {
    if is_pointer_type(t) || t.contains('(') {
        return false;
    }
    let words: Vec<&str> = t.split_whitespace().collect();
    if words.iter().any(|w| matches!(*w, "enum" | "struct" | "union" | "float" | "double" | "_Bool")) {
        return false;
    }
    words.iter().any(|w| matches!(*w, "char" | "short" | "int" | "long" | "unsigned" | "signed"))
}

/// Element count of a constant-size array type such as `char[64]`.
fn array_len(t: &str) -> Option<i128> {
    let open = t.rfind('[')?;
    let close = t[open..].find(']')? + open;
    t[open + 1..close].trim().parse().ok()
}

fn alloc_size_arg(call: &Node) -> Option<&Node> {
    let args = call.call_args();
    match call.callee_name()? {
        "malloc" => args.first(),
        "calloc" => args.first(),
        "realloc" => args.get(1),
        _ => None,
    }
}

fn norm(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace()).collect()
}

impl<'a> FnCtx<'a> {
    fn new(prog: &'a ProgramAst, func: &'a Node, cfg: &'a InferenceConfig) -> Self {
        let mut allocs: HashMap<String, Vec<&Node>> = HashMap::new();
        let mut loops = Vec::new();
        let mut fd_links: Vec<(String, &Node)> = Vec::new();
        func.walk(&mut |n| match n.kind.as_str() {
            "VarDecl" => {
                if let Some(init) = var_init(n) {
                    fd_links.push((n.id.clone(), init));
                    if let Some(sz) = alloc_size_arg(strip_casts(init)) {
                        allocs.entry(n.id.clone()).or_default().push(sz);
                    }
                }
            }
            "BinaryOperator" if n.opcode.as_deref() == Some("=") && n.inner.len() == 2 => {
                if let Some(v) = decl_ref_id(&n.inner[0]) {
                    fd_links.push((v.to_owned(), &n.inner[1]));
                    if let Some(sz) = alloc_size_arg(strip_casts(&n.inner[1])) {
                        allocs.entry(v.to_owned()).or_default().push(sz);
                    }
                }
            }
            "ForStmt" if n.inner.len() == 5 => {
                let cond = n.inner[2].ignore_implicit();
                let body = n.inner[4].span();
                if let (Some(body), true) = (body, cond.kind == "BinaryOperator" && cond.inner.len() == 2) {
                    let (var, bound) = match cond.opcode.as_deref() {
                        Some("<") => (decl_ref_id(&cond.inner[0]), &cond.inner[1]),
                        Some(">") => (decl_ref_id(&cond.inner[1]), &cond.inner[0]),
                        _ => (None, &cond.inner[0]),
                    };
                    if let Some(var) = var {
                        loops.push(Loop { var: var.to_owned(), bound, body });
                    }
                }
            }
            _ => {}
        });

        let mut fd_vars = BTreeSet::new();
        loop {
            let before = fd_vars.len();
            for (v, e) in &fd_links {
                if is_fd_expr(e, &fd_vars, cfg) {
                    fd_vars.insert(v.clone());
                }
            }
            if fd_vars.len() == before {
                break;
            }
        }

        let entry_pair = (func.name() == ENTRY).then(|| {
            let ps: Vec<&Node> = func.params().collect();
            match ps.as_slice() {
                [d, s] if is_pointer_type(desugared(d)) && is_integer_type(desugared(s)) => Some((d.id.clone(), s.id.clone())),
                _ => None,
            }
        });

        FnCtx {
            prog,
            func,
            cfg,
            decls: var_decls(func),
            written: written_vars(func),
            allocs,
            loops,
            fd_vars,
            entry_pair: entry_pair.flatten(),
        }
    }

    fn text(&self, n: &Node) -> Option<String> {
        let s = n.span()?;
        (s.end <= self.prog.source.len()).then(|| norm(self.prog.text(s)))
    }

    fn same_expr(&self, a: &Node, b: &Node) -> bool {
        let (a, b) = (strip_casts(a), strip_casts(b));
        match (decl_ref_id(a), decl_ref_id(b)) {
            (Some(x), Some(y)) => return x == y,
            (Some(_), None) | (None, Some(_)) => return false,
            _ => {}
        }
        if let (Some((LiteralValue::Int(x), _)), Some((LiteralValue::Int(y), _))) = (literal_of(a), literal_of(b)) {
            return x == y;
        }
        matches!((self.text(a), self.text(b)), (Some(x), Some(y)) if x == y)
    }

    /// Whether `e` evaluates to the length of the array held by `array`.
    fn size_of(&self, e: &Node, array: &str, depth: u32) -> bool {
        let e = strip_casts(e);
        if let Some(v) = decl_ref_id(e) {
            if let Some((d, s)) = &self.entry_pair {
                if d == array && s == v {
                    return true;
                }
            }
        }
        if let Some(sizes) = self.allocs.get(array) {
            if sizes.iter().any(|s| self.same_expr(s, e)) {
                return true;
            }
        }
        match e.kind.as_str() {
            "UnaryExprOrTypeTraitExpr" if e.name() == "sizeof" => {
                let is_array = self.decls.get(array).is_some_and(|d| array_len(d.qual_type()).is_some());
                if is_array && e.inner.first().and_then(decl_ref_id) == Some(array) {
                    return true;
                }
            }
            "BinaryOperator" if e.opcode.as_deref() == Some("/") && e.inner.len() == 2 => {
                // sizeof(a) / sizeof(a[0])
                let lhs = strip_casts(&e.inner[0]);
                if lhs.kind == "UnaryExprOrTypeTraitExpr" && self.size_of(lhs, array, depth) {
                    return true;
                }
            }
            "CallExpr" if matches!(e.callee_name(), Some("strlen" | "strnlen" | "wcslen")) => {
                if e.call_args().first().and_then(decl_ref_id) == Some(array) {
                    return true;
                }
            }
            "IntegerLiteral" => {
                if let (Some(d), Some((LiteralValue::Int(v), _))) = (self.decls.get(array), literal_of(e)) {
                    if array_len(d.qual_type()) == Some(v) {
                        return true;
                    }
                }
            }
            _ => {}
        }
        // One level through a local that is never written after its init.
        if depth == 0 {
            if let Some(v) = decl_ref_id(e) {
                if !self.written.contains(v) {
                    if let Some(init) = self.decls.get(v).and_then(|d| var_init(d)) {
                        return self.size_of(init, array, depth + 1);
                    }
                }
            }
        }
        false
    }

    /// Whether `e` is structurally smaller than the length of `array` at `site`.
    fn index_into(&self, e: &Node, array: &str, site: Span) -> bool {
        let e = strip_casts(e);
        if e.kind == "BinaryOperator" && e.opcode.as_deref() == Some("%") && e.inner.len() == 2 {
            return self.size_of(&e.inner[1], array, 0);
        }
        if let Some(v) = decl_ref_id(e) {
            return self.loops.iter().any(|l| l.var == v && l.body.contains(&site) && self.size_of(l.bound, array, 0));
        }
        false
    }

    fn string_value(&self, e: &Node) -> Option<String> {
        let lit = literal_of(e).or_else(|| {
            let v = decl_ref_id(e)?;
            if self.written.contains(v) {
                return None;
            }
            literal_of(var_init(self.decls.get(v)?)?)
        });
        match lit {
            Some((LiteralValue::Str(s), _)) => Some(s),
            _ => None,
        }
    }

    fn scan(&self, found: &mut BTreeSet<Key>, vetoed: &mut BTreeSet<(String, usize, usize)>) {
        self.func.walk(&mut |n| {
            let Some(site) = self.prog.site_of(n) else { return };
            let cs = &self.prog.call_sites[site];
            if !cs.is_api {
                return;
            }
            let api = cs.callee.as_str();
            let args = n.call_args();
            let key = |k: ConstraintKind, i: usize, j: Option<usize>| (k, api.to_owned(), i, j);
            for (i, a) in args.iter().enumerate() {
                let ty = desugared(a);
                if is_integer_type(ty) {
                    if is_fd_expr(a, &self.fd_vars, self.cfg) {
                        found.insert(key(ConstraintKind::FileDesc, i, None));
                    }
                    for (j, b) in args.iter().enumerate() {
                        if i == j || !is_pointer_type(desugared(b)) {
                            continue;
                        }
                        let Some(array) = decl_ref_id(b) else { continue };
                        if self.size_of(a, array, 0) {
                            found.insert(key(ConstraintKind::ArrayLength, i, Some(j)));
                            vetoed.insert((api.to_owned(), i, j));
                        } else if self.index_into(a, array, cs.span) {
                            found.insert(key(ConstraintKind::ArrayIndex, i, Some(j)));
                        }
                    }
                } else if is_pointer_type(ty) && ty.contains("char") {
                    if let Some(s) = self.string_value(a) {
                        if self.cfg.file_names.iter().any(|f| f == &s) {
                            found.insert(key(ConstraintKind::FileName, i, None));
                        } else if s.contains('%') {
                            found.insert(key(ConstraintKind::FormatString, i, None));
                        }
                    }
                }
            }
        });
    }
}

fn is_fd_expr(e: &Node, fd_vars: &BTreeSet<String>, cfg: &InferenceConfig) -> bool {
    let e = strip_casts(e);
    if let Some(c) = e.callee_name() {
        return cfg.descriptor_sources.iter().any(|s| s == c);
    }
    decl_ref_id(e).is_some_and(|v| fd_vars.contains(v))
}

/// Keeps, for each (api, arg), the constraint with the most support; ties
/// go to the kind declared first in [`ConstraintKind`].
pub fn resolve(constraints: &[Constraint]) -> BTreeMap<(String, usize), Constraint> {
    let mut out: BTreeMap<(String, usize), Constraint> = BTreeMap::new();
    for c in constraints {
        let k = (c.api.clone(), c.arg);
        let better = match out.get(&k) {
            None => true,
            Some(cur) => (c.support, std::cmp::Reverse(c.kind)) > (cur.support, std::cmp::Reverse(cur.kind)),
        };
        if better {
            out.insert(k, c.clone());
        }
    }
    out
}

/// Significance test for the allocation probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AllocCriterion {
    pub low: u64,
    pub high: u64,
    pub min_ratio: f64,
    pub min_delta: u64,
}

impl Default for AllocCriterion {
    fn default() -> Self {
        AllocCriterion { low: 1, high: 1 << 20, min_ratio: 16.0, min_delta: 64 << 20 }
    }
}

impl AllocCriterion {
    pub fn significant(&self, low_peak: u64, high_peak: u64) -> bool {
        let ratio = high_peak as f64 / low_peak.max(1) as f64;
        ratio >= self.min_ratio || high_peak.saturating_sub(low_peak) >= self.min_delta
    }
}

/// A scalar argument to probe: one call site in one seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTarget {
    pub program: usize,
    pub site: usize,
    pub api: String,
    pub arg: usize,
    pub arg_span: Span,
}

impl ProbeTarget {
    /// The seed's source with the argument replaced by `value`.
    pub fn variant(&self, source: &str, value: u64) -> String {
        format!("{}({value}){}", &source[..self.arg_span.start], &source[self.arg_span.end..])
    }
}

/// First call site of each integer API argument that no static rule
/// explains, in program order.
pub fn probe_targets(programs: &[ProgramAst], explained: &[Constraint]) -> Vec<ProbeTarget> {
    let skip: BTreeSet<(&str, usize)> = explained.iter().map(|c| (c.api.as_str(), c.arg)).collect();
    let mut seen: BTreeSet<(String, usize)> = BTreeSet::new();
    let mut out = Vec::new();
    for (pi, prog) in programs.iter().enumerate() {
        for f in functions(prog) {
            f.walk(&mut |n| {
                let Some(site) = prog.site_of(n) else { return };
                let cs = &prog.call_sites[site];
                if !cs.is_api || cs.in_macro {
                    return;
                }
                for (i, a) in n.call_args().iter().enumerate() {
                    if !is_integer_type(desugared(a)) || skip.contains(&(cs.callee.as_str(), i)) {
                        continue;
                    }
                    let Some(arg_span) = a.span() else { continue };
                    if arg_span.end > prog.source.len() || !seen.insert((cs.callee.clone(), i)) {
                        continue;
                    }
                    out.push(ProbeTarget { program: pi, site, api: cs.callee.clone(), arg: i, arg_span });
                }
            });
        }
    }
    out
}

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("probe variant failed to build: {0}")]
    BuildFailed(String),
    #[error("probe run failed: {0}")]
    RunFailed(String),
    #[error("no recorded measurement for {0} arg {1} at {2}")]
    Unrecorded(String, usize, u64),
}

/// Measures peak tracked heap bytes of a seed with one argument pinned.
pub trait AllocProber {
    fn peak(&self, prog: &ProgramAst, target: &ProbeTarget, value: u64) -> Result<u64, ProbeError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeMeasurement {
    pub api: String,
    pub arg: usize,
    pub value: u64,
    pub peak: u64,
}

/// Replays measurements taken earlier, keyed by (api, arg, value).
#[derive(Debug, Clone, Default)]
pub struct RecordedProber {
    table: BTreeMap<(String, usize, u64), u64>,
}

#[derive(Deserialize)]
struct ProbeFile {
    #[serde(default)]
    probe: Vec<ProbeMeasurement>,
}

impl RecordedProber {
    pub fn new(ms: impl IntoIterator<Item = ProbeMeasurement>) -> Self {
        RecordedProber { table: ms.into_iter().map(|m| ((m.api, m.arg, m.value), m.peak)).collect() }
    }

    /// Parses `[[probe]]` tables with `api`, `arg`, `value` and `peak`.
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        Ok(Self::new(toml::from_str::<ProbeFile>(text)?.probe))
    }
}

impl AllocProber for RecordedProber {
    fn peak(&self, _: &ProgramAst, t: &ProbeTarget, value: u64) -> Result<u64, ProbeError> {
        self.table.get(&(t.api.clone(), t.arg, value)).copied().ok_or_else(|| ProbeError::Unrecorded(t.api.clone(), t.arg, value))
    }
}

/// Runs the probe on every target; returns AllocSize constraints and the
/// raw measurements. A failed probe yields no constraint.
pub fn infer_alloc_size(
    programs: &[ProgramAst],
    targets: &[ProbeTarget],
    prober: &dyn AllocProber,
    crit: &AllocCriterion,
) -> (Vec<Constraint>, Vec<ProbeMeasurement>) {
    let mut out = Vec::new();
    let mut ms = Vec::new();
    for t in targets {
        let prog = &programs[t.program];
        let peaks = prober.peak(prog, t, crit.low).and_then(|lo| Ok((lo, prober.peak(prog, t, crit.high)?)));
        match peaks {
            Ok((lo, hi)) => {
                ms.push(ProbeMeasurement { api: t.api.clone(), arg: t.arg, value: crit.low, peak: lo });
                ms.push(ProbeMeasurement { api: t.api.clone(), arg: t.arg, value: crit.high, peak: hi });
                if crit.significant(lo, hi) {
                    out.push(Constraint { kind: ConstraintKind::AllocSize, api: t.api.clone(), arg: t.arg, related_arg: None, support: 1 });
                }
            }
            Err(e) => log::warn!("allocation probe of {} arg {}: {e}", t.api, t.arg),
        }
    }
    (out, ms)
}

/// Structured output of constraint inference.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    /// One constraint per (api, arg).
    pub resolved: Vec<Constraint>,
    /// Everything inferred before resolution.
    pub inferred: Vec<Constraint>,
    pub probes: Vec<ProbeMeasurement>,
}

impl ConstraintReport {
    pub fn lookup(&self, api: &str, arg: usize) -> Option<&Constraint> {
        self.resolved.iter().find(|c| c.api == api && c.arg == arg)
    }
}

/// Static rules, then the probe on what they leave unexplained, then resolve.
pub fn infer_all(
    programs: &[ProgramAst],
    cfg: &InferenceConfig,
    prober: Option<&dyn AllocProber>,
    crit: &AllocCriterion,
) -> ConstraintReport {
    let mut inferred = infer_static(programs, cfg);
    let mut probes = Vec::new();
    if let Some(p) = prober {
        let targets = probe_targets(programs, &inferred);
        let (alloc, ms) = infer_alloc_size(programs, &targets, p, crit);
        inferred.extend(alloc);
        inferred.sort();
        probes = ms;
    }
    let resolved = resolve(&inferred).into_values().collect();
    ConstraintReport { resolved, inferred, probes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::testutil::program;
    use proptest::prelude::*;

    const PRELUDE: &str = "#include <stdlib.h>\n#include <string.h>\n#include <fcntl.h>\n#include <stdio.h>\n\
        int feed(void *c, const unsigned char *buf, unsigned long len);\n\
        int at(const unsigned char *buf, unsigned long idx);\n\
        int load(void *c, const char *path);\n\
        int logf_(void *c, const char *fmt, ...);\n\
        int use_fd(void *c, int fd);\n\
        void *mk(unsigned long n);\n\
        int flags(void *c, unsigned f);\n";
    const APIS: &[&str] = &["feed", "at", "load", "logf_", "use_fd", "mk", "flags"];

    fn infer(body: &str) -> Option<Vec<Constraint>> {
        let src = format!("{PRELUDE}int LLVMFuzzerTestOneInput(const unsigned char *data, unsigned long size) {{\n{body}\nreturn 0; }}\n");
        let p = program(&src, APIS)?;
        Some(infer_static(&[p], &InferenceConfig::default()))
    }

    fn kinds(cs: &[Constraint]) -> Vec<(ConstraintKind, &str, usize, Option<usize>)> {
        cs.iter().map(|c| (c.kind, c.api.as_str(), c.arg, c.related_arg)).collect()
    }

    #[test]
    fn array_length_rules() {
        let Some(cs) = infer(
            "void *c = mk(16);\n\
             unsigned char *b = malloc(size + 1); feed(c, b, size + 1);\n\
             feed(c, data, size);\n\
             char s[] = \"abc\"; feed(c, (const unsigned char *)s, strlen(s));\n\
             unsigned char arr[8]; feed(c, arr, sizeof(arr)); feed(c, arr, 8);\n\
             free(b);",
        ) else {
            return;
        };
        assert_eq!(kinds(&cs), [(ConstraintKind::ArrayLength, "feed", 2, Some(1))]);
        assert_eq!(cs[0].support, 1);
    }

    #[test]
    fn unrelated_length_is_not_a_constraint() {
        let Some(cs) = infer("void *c = mk(16); unsigned char arr[8]; feed(c, arr, 4); feed(c, data, 3);") else {
            return;
        };
        assert!(cs.is_empty(), "{cs:?}");
    }

    #[test]
    fn index_rules_and_veto() {
        let Some(cs) = infer("for (unsigned long i = 0; i < size; i++) at(data, i);\nif (size) at(data, data[0] % size);") else {
            return;
        };
        assert_eq!(kinds(&cs), [(ConstraintKind::ArrayIndex, "at", 1, Some(0))]);
        let Some(cs) = infer("for (unsigned long i = 0; i < size; i++) at(data, i);\nat(data, size);") else {
            return;
        };
        assert_eq!(kinds(&cs), [(ConstraintKind::ArrayLength, "at", 1, Some(0))]);
    }

    #[test]
    fn strings_and_descriptors() {
        let Some(cs) = infer(
            "void *c = mk(16);\n\
             load(c, \"input_file\"); const char *out = \"output_file\"; load(c, out);\n\
             logf_(c, \"%d items\", 3); logf_(c, \"plain\");\n\
             int fd = open(\"input_file\", O_RDONLY); int fd2 = fd; use_fd(c, fd2);\n\
             FILE *fp = fopen(\"input_file\", \"rb\"); if (fp) { use_fd(c, fileno(fp)); fclose(fp); }\n\
             use_fd(c, 0); flags(c, 3);",
        ) else {
            return;
        };
        assert_eq!(
            kinds(&cs),
            [
                (ConstraintKind::FileDesc, "use_fd", 1, None),
                (ConstraintKind::FileName, "load", 1, None),
                (ConstraintKind::FormatString, "logf_", 1, None),
            ]
        );
    }

    fn c(kind: ConstraintKind, support: u32) -> Constraint {
        let related_arg = kind.is_relational().then_some(0);
        Constraint { kind, api: "f".into(), arg: 1, related_arg, support }
    }

    #[test]
    fn resolve_by_support_then_precedence() {
        use ConstraintKind::*;
        let r = resolve(&[c(AllocSize, 2), c(ArrayLength, 5)]);
        assert_eq!(r.len(), 1);
        assert_eq!(r[&("f".into(), 1)].kind, ArrayLength);
        let r = resolve(&[c(AllocSize, 3), c(ArrayLength, 3)]);
        assert_eq!(r[&("f".into(), 1)].kind, ArrayLength);
        let r = resolve(&[c(FormatString, 3), c(FileName, 3), c(ArrayIndex, 1)]);
        assert_eq!(r[&("f".into(), 1)].kind, FileName);
    }

    proptest! {
        #[test]
        fn resolve_keeps_one_max_support_per_arg(
            raw in proptest::collection::vec((0usize..6, 0usize..3, 0usize..3, 1u32..6), 0..30)
        ) {
            let cs: Vec<Constraint> = raw
                .iter()
                .map(|&(k, api, arg, support)| {
                    let kind = ConstraintKind::ALL[k];
                    Constraint { kind, api: format!("a{api}"), arg, related_arg: kind.is_relational().then_some(9), support }
                })
                .collect();
            let r = resolve(&cs);
            let keys: BTreeSet<(String, usize)> = cs.iter().map(|c| (c.api.clone(), c.arg)).collect();
            prop_assert_eq!(r.len(), keys.len());
            for ((api, arg), chosen) in &r {
                let group: Vec<&Constraint> = cs.iter().filter(|c| &c.api == api && c.arg == *arg).collect();
                let best = group.iter().map(|c| c.support).max().unwrap();
                prop_assert_eq!(chosen.support, best);
                let first_kind = group.iter().filter(|c| c.support == best).map(|c| c.kind).min().unwrap();
                prop_assert_eq!(chosen.kind, first_kind);
            }
        }
    }

    #[test]
    fn alloc_criterion() {
        let crit = AllocCriterion::default();
        assert!(crit.significant(1_000, 1_049_576));
        assert!(!crit.significant(1_000, 5_096));
        assert!(!crit.significant(1_000, 1_000));
        assert!(crit.significant(200 << 20, 300 << 20));
    }

    #[test]
    fn probe_through_recorded_table() {
        let src = format!(
            "{PRELUDE}int LLVMFuzzerTestOneInput(const unsigned char *data, unsigned long size) {{\n\
            void *c = mk(64); flags(c, 2); feed(c, data, size); return 0; }}\n"
        );
        let Some(p) = program(&src, APIS) else { return };
        let progs = [p];
        let stat = infer_static(&progs, &InferenceConfig::default());
        let targets = probe_targets(&progs, &stat);
        let names: Vec<(&str, usize)> = targets.iter().map(|t| (t.api.as_str(), t.arg)).collect();
        assert_eq!(names, [("mk", 0), ("flags", 1)]);
        assert!(targets[0].variant(&progs[0].source, 7).contains("mk((7))"));
        let prober = RecordedProber::from_toml(
            "[[probe]]\napi = \"mk\"\narg = 0\nvalue = 1\npeak = 100\n\
             [[probe]]\napi = \"mk\"\narg = 0\nvalue = 1048576\npeak = 1048675\n\
             [[probe]]\napi = \"flags\"\narg = 1\nvalue = 1\npeak = 100\n\
             [[probe]]\napi = \"flags\"\narg = 1\nvalue = 1048576\npeak = 100\n",
        )
        .unwrap();
        let rep = infer_all(&progs, &InferenceConfig::default(), Some(&prober), &AllocCriterion::default());
        let resolved: Vec<_> = rep.resolved.iter().map(|c| (c.kind, c.api.as_str(), c.arg)).collect();
        assert_eq!(resolved, [(ConstraintKind::ArrayLength, "feed", 2), (ConstraintKind::AllocSize, "mk", 0)]);
        assert_eq!(rep.probes.len(), 4);
    }
}
