//! File sanitizer instrumentation: wraps resource acquisitions and releases
//! in calls to the bookkeeping runtime (`assets/fsan_rt.c`) and audits at
//! every exit of the harness entry. API call sites also get execution
//! markers for the critical-path coverage check.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::analysis::{base_var, strip_casts, ProgramAst};
use crate::ast::{line_of, Node, Span};
use crate::rewrite::{RewriteError, Rewriter};

pub const RUNTIME_SOURCE: &str = include_str!("../assets/fsan_rt.c");

/// Declarations placed before the instrumented program.
pub const PRELUDE: &str = "void __df_site(unsigned);\n\
int __fsan_track_fd(int, unsigned);\n\
int __fsan_release_fd(int, unsigned);\n\
void *__fsan_track_ptr(void *, unsigned, unsigned);\n\
void *__fsan_release_ptr(void *, unsigned);\n\
void __fsan_enter(void);\n\
void __fsan_audit(void);\n\
int __fsan_audit_int(int);\n";

const RESERVED_PREFIXES: [&str; 2] = ["__fsan_", "__df_"];

#[derive(Debug, thiserror::Error)]
pub enum FsanError {
    #[error("source already defines runtime hook symbols (`{0}`)")]
    InstrumentationConflict(String),
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourcePair {
    pub acquire: String,
    pub release: String,
    /// Argument of `release` that receives the handle.
    #[serde(default)]
    pub arg: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnershipTransfer {
    pub function: String,
    pub arg: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FsanConfig {
    pub fd_acquire: Vec<String>,
    pub stream_acquire: Vec<String>,
    pub fd_release: Vec<String>,
    pub stream_release: Vec<String>,
    /// Library handle constructors and destructors.
    pub pairs: Vec<ResourcePair>,
    /// Calls that take over a resource passed to them.
    pub ownership_transfer: Vec<OwnershipTransfer>,
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl Default for FsanConfig {
    fn default() -> Self {
        FsanConfig {
            fd_acquire: strings(&["open", "openat", "creat", "dup", "dup2", "mkstemp", "socket", "accept"]),
            stream_acquire: strings(&["fopen", "fdopen", "freopen", "tmpfile", "popen", "fmemopen", "open_memstream"]),
            fd_release: strings(&["close"]),
            stream_release: strings(&["fclose", "pclose"]),
            pairs: Vec::new(),
            ownership_transfer: vec![OwnershipTransfer { function: "fdopen".into(), arg: 0 }],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResourceKind {
    Descriptor,
    Stream,
    Handle,
}

impl ResourceKind {
    fn code(self) -> u8 {
        match self {
            ResourceKind::Descriptor => 0,
            ResourceKind::Stream => 1,
            ResourceKind::Handle => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceEvent {
    pub kind: ResourceKind,
    /// Runtime site number reported by the audit.
    pub site: u32,
    pub acquire: Span,
    pub line: usize,
    pub release: Option<Span>,
}

#[derive(Debug, Clone)]
pub struct Instrumented {
    /// Prelude, a `#line` reset, then the rewritten program.
    pub source: String,
    /// Call-site ids carrying an execution marker.
    pub marked_sites: BTreeSet<usize>,
    pub events: Vec<ResourceEvent>,
}

fn call_span(n: &Node) -> Option<Span> {
    if n.range.as_ref().is_some_and(|r| r.touches_macro()) {
        return None;
    }
    n.span()
}

/// Instruments every function defined in the program's own file.
/// `file_name` is used in the `#line` directive so diagnostics keep
/// pointing at the original source.
pub fn instrument(prog: &ProgramAst, cfg: &FsanConfig, file_name: &str) -> Result<Instrumented, FsanError> {
    for p in RESERVED_PREFIXES {
        if prog.source.contains(p) {
            return Err(FsanError::InstrumentationConflict(p.to_owned()));
        }
    }
    let entry = prog.entry_function();
    let file = entry.file().map(str::to_owned);
    let funcs: Vec<&Node> = prog.tu.function_defs(file.as_deref()).collect();
    let src_len = prog.source.len();
    let fits = |s: Span| s.end <= src_len;

    // Variable receiving each acquisition, for pairing with releases.
    let mut target_of: HashMap<&str, &str> = HashMap::new();
    for f in &funcs {
        f.walk(&mut |n| {
            let (var, val) = match n.kind.as_str() {
                "VarDecl" => (Some(n.id.as_str()), crate::analysis::var_init(n)),
                "BinaryOperator" if n.opcode.as_deref() == Some("=") && n.inner.len() == 2 => (base_var(&n.inner[0]), Some(&n.inner[1])),
                _ => (None, None),
            };
            if let (Some(v), Some(e)) = (var, val) {
                let call = strip_casts(e);
                if call.kind == "CallExpr" {
                    target_of.insert(call.id.as_str(), v);
                }
            }
        });
    }

    let mut rw = Rewriter::new();
    let mut marked = BTreeSet::new();
    let mut events: Vec<ResourceEvent> = Vec::new();
    let mut acquired_var: Vec<Option<String>> = Vec::new();
    let mut releases: Vec<(String, Span)> = Vec::new();
    let mut site_no: u32 = 0;

    for f in &funcs {
        f.walk(&mut |n| {
            let Some(callee) = n.callee_name() else { return };
            let Some(span) = call_span(n).filter(|s| fits(*s)) else { return };
            let args = n.call_args();

            if let Some(id) = prog.site_of(n).filter(|&id| prog.call_sites[id].is_api) {
                rw.wrap(span, format!("(__df_site({id}), "), ")");
                marked.insert(id);
            }

            let acquire_kind = if cfg.fd_acquire.iter().any(|c| c == callee) {
                Some(ResourceKind::Descriptor)
            } else if cfg.stream_acquire.iter().any(|c| c == callee) {
                Some(ResourceKind::Stream)
            } else if cfg.pairs.iter().any(|p| p.acquire == callee) {
                Some(ResourceKind::Handle)
            } else {
                None
            };
            if let Some(kind) = acquire_kind {
                let k = site_no;
                site_no += 1;
                match kind {
                    ResourceKind::Descriptor => rw.wrap(span, "__fsan_track_fd(", format!(", {k})")),
                    _ => rw.wrap(span, format!("(({})__fsan_track_ptr((void *)(", n.qual_type()), format!("), {}, {k}))", kind.code())),
                }
                events.push(ResourceEvent { kind, site: k, acquire: span, line: line_of(&prog.source, span.start), release: None });
                acquired_var.push(target_of.get(n.id.as_str()).map(|v| v.to_string()));
            }

            let mut released: Vec<usize> = Vec::new();
            if cfg.fd_release.iter().chain(&cfg.stream_release).any(|c| c == callee) {
                released.push(0);
            }
            released.extend(cfg.pairs.iter().filter(|p| p.release == callee).map(|p| p.arg));
            released.extend(cfg.ownership_transfer.iter().filter(|o| o.function == callee).map(|o| o.arg));
            released.sort_unstable();
            released.dedup();
            for i in released {
                let Some(arg) = args.get(i) else { continue };
                let Some(aspan) = call_span(arg).filter(|s| fits(*s)) else { continue };
                let k = site_no;
                site_no += 1;
                let ty = arg.qual_type();
                if crate::constraints::is_integer_type(ty) {
                    rw.wrap(aspan, "__fsan_release_fd(", format!(", {k})"));
                } else {
                    rw.wrap(aspan, format!("(({ty})__fsan_release_ptr((void *)("), format!("), {k}))"));
                }
                if let Some(v) = base_var(arg) {
                    releases.push((v.to_owned(), span));
                }
            }
        });
    }

    for (ev, var) in events.iter_mut().zip(&acquired_var) {
        if let Some(v) = var {
            ev.release = releases.iter().find(|(rv, s)| rv == v && s.start > ev.acquire.start).map(|(_, s)| *s);
        }
    }

    // Audit at every exit of the entry.
    if let Some(body) = entry.body().and_then(Node::span).filter(|s| fits(*s) && s.end > s.start) {
        if prog.source.as_bytes()[body.start] == b'{' && prog.source.as_bytes()[body.end - 1] == b'}' {
            rw.insert(body.start + 1, " __fsan_enter();");
            rw.insert(body.end - 1, "__fsan_audit(); ");
        }
        entry.walk(&mut |n| {
            if n.kind == "ReturnStmt" {
                if let Some(v) = n.inner.first().and_then(call_span).filter(|s| fits(*s)) {
                    rw.wrap(v, "__fsan_audit_int(", ")");
                }
            }
        });
    }

    let body = rw.apply(&prog.source)?;
    let source = format!("{PRELUDE}#line 1 \"{file_name}\"\n{body}");
    Ok(Instrumented { source, marked_sites: marked, events })
}
