//! Explicit intra-procedural data flow between call sites: assignment
//! chains, address-of out-parameters and return values. No aliasing.

use std::collections::{BTreeMap, BTreeSet};

use super::{base_var, is_assign_op, strip_casts, AnalysisError, Cfg, ProgramAst};
use crate::ast::Node;

/// Variable declaration id -> call sites whose value may be held.
type State = BTreeMap<String, BTreeSet<usize>>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DataFlow {
    /// (producer site, consumer site).
    pub edges: BTreeSet<(usize, usize)>,
}

impl DataFlow {
    pub fn interacts(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a, b)) || self.edges.contains(&(b, a))
    }
}

/// Forward analysis over the entry CFG to a fixpoint.
pub fn data_flow(prog: &ProgramAst, cfg: &Cfg) -> DataFlow {
    let n = cfg.blocks.len();
    let mut ins: Vec<State> = vec![State::new(); n];
    let mut edges = BTreeSet::new();
    let mut work: BTreeSet<usize> = (0..n).filter(|&b| !cfg.blocks[b].dead).collect();
    while let Some(b) = work.pop_first() {
        let mut st = ins[b].clone();
        for e in &cfg.blocks[b].elems {
            eval(e, &mut st, &mut edges, prog);
        }
        for &s in &cfg.succs[b] {
            if join_into(&mut ins[s], &st) {
                work.insert(s);
            }
        }
    }
    DataFlow { edges }
}

fn join_into(dst: &mut State, src: &State) -> bool {
    let mut changed = false;
    for (k, v) in src {
        let d = dst.entry(k.clone()).or_default();
        let before = d.len();
        d.extend(v.iter().copied());
        changed |= d.len() != before;
    }
    changed
}

/// Variable written through an argument: `&v`, or an array `v` decaying to
/// a pointer.
fn out_param(arg: &Node) -> Option<&str> {
    let a = strip_casts(arg);
    match (a.kind.as_str(), a.opcode.as_deref()) {
        ("UnaryOperator", Some("&")) => base_var(a.inner.first()?),
        ("DeclRefExpr", _) if a.qual_type().contains('[') => base_var(a),
        _ => None,
    }
}

/// Evaluates `n` for its effect on `st`; returns the call sites whose
/// values flow into the value of `n`.
fn eval(n: &Node, st: &mut State, edges: &mut BTreeSet<(usize, usize)>, prog: &ProgramAst) -> BTreeSet<usize> {
    match n.kind.as_str() {
        "UnaryExprOrTypeTraitExpr" => BTreeSet::new(),
        "DeclRefExpr" => n.referenced_decl.as_ref().and_then(|r| st.get(&r.id)).cloned().unwrap_or_default(),
        "VarDecl" => {
            let t = match super::var_init(n) {
                Some(init) => eval(init, st, edges, prog),
                None => BTreeSet::new(),
            };
            st.insert(n.id.clone(), t);
            BTreeSet::new()
        }
        "CallExpr" => {
            let site = prog.site_of(n);
            let mut args_taint = BTreeSet::new();
            for a in n.call_args() {
                let t = eval(a, st, edges, prog);
                if let Some(s) = site {
                    edges.extend(t.iter().filter(|&&p| p != s).map(|&p| (p, s)));
                }
                args_taint.extend(t);
            }
            let Some(s) = site else { return args_taint };
            for a in n.call_args() {
                if let Some(v) = out_param(a) {
                    st.entry(v.to_owned()).or_default().insert(s);
                }
            }
            let mut result = BTreeSet::from([s]);
            if !prog.call_sites[s].is_api {
                // Values pass through libc and local helpers unchanged.
                result.extend(args_taint);
            }
            result
        }
        "BinaryOperator" | "CompoundAssignOperator" if n.inner.len() == 2 => {
            let op = n.opcode.as_deref().unwrap_or("");
            let (lhs, rhs) = (&n.inner[0], &n.inner[1]);
            if op == "=" {
                let t = eval(rhs, st, edges, prog);
                let l = strip_casts(lhs);
                let plain = l.kind == "DeclRefExpr";
                if !plain {
                    // Calls inside the lvalue (`a[f()] = ...`).
                    eval(lhs, st, edges, prog);
                }
                if let Some(v) = base_var(lhs) {
                    if plain {
                        st.insert(v.to_owned(), t.clone());
                    } else {
                        st.entry(v.to_owned()).or_default().extend(t.iter().copied());
                    }
                }
                t
            } else if is_assign_op(op) {
                let mut t = eval(rhs, st, edges, prog);
                t.extend(eval(lhs, st, edges, prog));
                if let Some(v) = base_var(lhs) {
                    st.entry(v.to_owned()).or_default().extend(t.iter().copied());
                }
                t
            } else if op == "," {
                eval(lhs, st, edges, prog);
                eval(rhs, st, edges, prog)
            } else {
                let mut t = eval(lhs, st, edges, prog);
                t.extend(eval(rhs, st, edges, prog));
                t
            }
        }
        _ => {
            let mut t = BTreeSet::new();
            for c in &n.inner {
                t.extend(eval(c, st, edges, prog));
            }
            t
        }
    }
}

/// Size of the largest connected group of API call sites.
pub fn density(prog: &ProgramAst, df: &DataFlow) -> usize {
    let n = prog.call_sites.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut x = x;
        while p[x] != r {
            let nx = p[x];
            p[x] = r;
            x = nx;
        }
        r
    }
    for &(a, b) in &df.edges {
        if prog.call_sites[a].is_api && prog.call_sites[b].is_api {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            parent[ra] = rb;
        }
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for s in prog.api_sites() {
        *sizes.entry(find(&mut parent, s.id)).or_default() += 1;
    }
    sizes.values().copied().max().unwrap_or(0)
}

/// APIs called along the critical path, first occurrence order, without
/// those that share no data flow with another API on the path. A lone API
/// is kept.
pub fn critical_calls(prog: &ProgramAst, cfg: &Cfg, df: &DataFlow) -> Result<Vec<String>, AnalysisError> {
    let path = super::critical_path(cfg)?;
    let sites = cfg.path_api_sites(&path);
    let mut order: Vec<&str> = Vec::new();
    for &s in &sites {
        let name = prog.call_sites[s].callee.as_str();
        if !order.contains(&name) {
            order.push(name);
        }
    }
    if order.len() <= 1 {
        return Ok(order.into_iter().map(str::to_owned).collect());
    }
    let keep = |name: &str| {
        sites
            .iter()
            .filter(|&&s| prog.call_sites[s].callee == name)
            .any(|&s| sites.iter().any(|&o| prog.call_sites[o].callee != name && df.interacts(s, o)))
    };
    Ok(order.into_iter().filter(|n| keep(n)).map(str::to_owned).collect())
}
