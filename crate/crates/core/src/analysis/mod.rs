//! Static analysis of generated fuzz drivers: call sites, control flow,
//! the critical path, explicit data flow and constant-argument sites.

mod cfg;
mod consts;
mod dataflow;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::ast::{same_file, AstError, Node, Span, TranslationUnit};

pub use cfg::{critical_path, Block, Cfg};
pub use consts::{const_arg_sites, literal_of, ConstArgSite, ConstKind, LiteralValue};
pub use dataflow::{critical_calls, data_flow, density, DataFlow};

/// Name of the harness entry point.
pub const ENTRY: &str = "LLVMFuzzerTestOneInput";

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error(transparent)]
    MalformedAst(#[from] AstError),
    #[error("entry function `{0}` is not defined")]
    NoEntry(String),
    #[error("no path from the entry to an exit")]
    NoPath,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallSite {
    pub id: usize,
    pub callee: String,
    pub is_api: bool,
    /// Span of the whole call expression (expansion location for macros).
    pub span: Span,
    pub line: usize,
    pub in_macro: bool,
    /// Local helper containing this call, if not the entry itself.
    pub helper: Option<String>,
    #[serde(skip)]
    node_id: String,
}

/// A parsed driver: its AST plus the call sites of the entry function and of
/// the local helpers it calls directly.
#[derive(Debug, Clone)]
pub struct ProgramAst {
    pub source: String,
    pub tu: TranslationUnit,
    pub call_sites: Vec<CallSite>,
    pub helpers: Vec<String>,
    entry_name: String,
    apis: BTreeSet<String>,
    site_by_node: HashMap<String, usize>,
}

impl ProgramAst {
    pub fn new(tu: TranslationUnit, source: impl Into<String>, apis: impl IntoIterator<Item = String>) -> Result<Self, AnalysisError> {
        Self::with_entry(tu, source, apis, ENTRY)
    }

    pub fn from_dump(json: &str, source: impl Into<String>, apis: impl IntoIterator<Item = String>) -> Result<Self, AnalysisError> {
        Self::new(TranslationUnit::from_json(json)?, source, apis)
    }

    pub fn with_entry(
        tu: TranslationUnit,
        source: impl Into<String>,
        apis: impl IntoIterator<Item = String>,
        entry: &str,
    ) -> Result<Self, AnalysisError> {
        let source = source.into();
        let apis: BTreeSet<String> = apis.into_iter().collect();
        let entry_fn = tu.function_def(entry).ok_or_else(|| AnalysisError::NoEntry(entry.to_owned()))?;
        let main_file = entry_fn.file().map(str::to_owned);

        let local: BTreeSet<&str> = tu
            .function_defs(None)
            .filter(|f| {
                f.name() != entry
                    && match (&main_file, f.file()) {
                        (Some(m), Some(ff)) => same_file(m, ff),
                        _ => true,
                    }
            })
            .map(Node::name)
            .collect();
        let mut helpers = Vec::new();
        entry_fn.walk(&mut |n| {
            if let Some(c) = n.callee_name() {
                if local.contains(c) && !apis.contains(c) && !helpers.iter().any(|h| h == c) {
                    helpers.push(c.to_owned());
                }
            }
        });

        let mut call_sites = Vec::new();
        let mut collect = |f: &Node, helper: Option<&str>| {
            let mut calls = Vec::new();
            post_order_calls(f, &mut calls);
            for c in calls {
                let Some(name) = c.callee_name() else { continue };
                let Some(span) = c.span() else { continue };
                if span.end > source.len() {
                    continue;
                }
                call_sites.push(CallSite {
                    id: call_sites.len(),
                    callee: name.to_owned(),
                    is_api: apis.contains(name),
                    span,
                    line: crate::ast::line_of(&source, span.start),
                    in_macro: c.range.as_ref().is_some_and(|r| r.touches_macro()),
                    helper: helper.map(str::to_owned),
                    node_id: c.id.clone(),
                });
            }
        };
        collect(entry_fn, None);
        for h in &helpers {
            if let Some(f) = tu.function_def(h) {
                collect(f, Some(h));
            }
        }
        let site_by_node = call_sites.iter().filter(|s| !s.node_id.is_empty()).map(|s| (s.node_id.clone(), s.id)).collect();
        Ok(ProgramAst { source, tu, call_sites, helpers, entry_name: entry.to_owned(), apis, site_by_node })
    }

    pub fn entry_function(&self) -> &Node {
        self.tu.function_def(&self.entry_name).expect("entry presence checked at construction")
    }

    pub fn helper_function(&self, name: &str) -> Option<&Node> {
        self.helpers.iter().any(|h| h == name).then(|| self.tu.function_def(name)).flatten()
    }

    pub fn is_api(&self, name: &str) -> bool {
        self.apis.contains(name)
    }

    /// Call-site id of a `CallExpr` node.
    pub fn site_of(&self, call: &Node) -> Option<usize> {
        self.site_by_node.get(&call.id).copied()
    }

    pub fn api_sites(&self) -> impl Iterator<Item = &CallSite> {
        self.call_sites.iter().filter(|s| s.is_api)
    }

    /// Ids of the sites located in helper `name`, in evaluation order.
    fn helper_sites(&self, name: &str) -> Vec<usize> {
        self.call_sites.iter().filter(|s| s.helper.as_deref() == Some(name)).map(|s| s.id).collect()
    }

    pub fn text(&self, span: Span) -> &str {
        &self.source[span.start..span.end]
    }
}

/// Calls in evaluation order: arguments before the call consuming them.
fn post_order_calls<'a>(n: &'a Node, out: &mut Vec<&'a Node>) {
    if n.kind == "UnaryExprOrTypeTraitExpr" {
        return;
    }
    for c in &n.inner {
        post_order_calls(c, out);
    }
    if n.kind == "CallExpr" {
        out.push(n);
    }
}

/// Strips implicit conversions, parentheses and explicit casts.
pub fn strip_casts(n: &Node) -> &Node {
    let mut n = n.ignore_implicit();
    while n.kind == "CStyleCastExpr" && n.inner.len() == 1 {
        n = n.inner[0].ignore_implicit();
    }
    n
}

/// Declaration id of the variable an lvalue expression is rooted at
/// (`v`, `v.f`, `v[i]`, `*v`, `&v`).
pub fn base_var(n: &Node) -> Option<&str> {
    let n = strip_casts(n);
    match n.kind.as_str() {
        "DeclRefExpr" => {
            let r = n.referenced_decl.as_ref()?;
            matches!(r.kind.as_str(), "VarDecl" | "ParmVarDecl").then_some(r.id.as_str())
        }
        "MemberExpr" | "ArraySubscriptExpr" => base_var(n.inner.first()?),
        "UnaryOperator" if matches!(n.opcode.as_deref(), Some("*" | "&")) => base_var(n.inner.first()?),
        _ => None,
    }
}

/// Variable declarations (locals and parameters) inside a function, by id.
pub fn var_decls(f: &Node) -> HashMap<&str, &Node> {
    let mut m = HashMap::new();
    f.walk(&mut |n| {
        if matches!(n.kind.as_str(), "VarDecl" | "ParmVarDecl") && !n.id.is_empty() {
            m.insert(n.id.as_str(), n);
        }
    });
    m
}

/// Initializer expression of a `VarDecl`.
pub fn var_init(decl: &Node) -> Option<&Node> {
    if decl.kind != "VarDecl" || decl.init.is_none() {
        return None;
    }
    decl.inner.iter().rev().find(|c| !c.kind.ends_with("Attr"))
}

/// Variables written after declaration anywhere in `f`: assigned,
/// incremented, or with their address taken.
pub fn written_vars(f: &Node) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    f.walk(&mut |n| {
        let target = match (n.kind.as_str(), n.opcode.as_deref()) {
            ("BinaryOperator" | "CompoundAssignOperator", Some(op)) if is_assign_op(op) => n.inner.first(),
            ("UnaryOperator", Some("++" | "--" | "&")) => n.inner.first(),
            _ => None,
        };
        if let Some(v) = target.and_then(base_var) {
            out.insert(v.to_owned());
        }
    });
    out
}

pub(crate) fn is_assign_op(op: &str) -> bool {
    op.ends_with('=') && !matches!(op, "==" | "!=" | "<=" | ">=")
}

#[cfg(test)]
pub(crate) mod testutil {
    use std::path::Path;
    use std::process::Command;

    use super::ProgramAst;
    use crate::ast::prune_dump;

    /// Dumps `src` with the system clang. Returns `None` when clang is absent.
    pub fn program(src: &str, apis: &[&str]) -> Option<ProgramAst> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prog.c");
        std::fs::write(&path, src).unwrap();
        let out = Command::new("clang").args(["-fsyntax-only", "-Xclang", "-ast-dump=json"]).arg(&path).output().ok()?;
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let raw = String::from_utf8(out.stdout).unwrap();
        let main = path.to_string_lossy().into_owned();
        let pruned = prune_dump(&raw, |f| Path::new(f) == Path::new(&main)).unwrap();
        let tu = crate::ast::TranslationUnit::from_value(pruned).unwrap();
        Some(ProgramAst::new(tu, src, apis.iter().map(|s| s.to_string())).unwrap())
    }
}
