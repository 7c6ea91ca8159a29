//! Control-flow graph of the entry function and the critical path over it.

use std::collections::{BTreeSet, HashMap, VecDeque};

use super::{AnalysisError, ProgramAst};
use crate::ast::Node;

#[derive(Debug, Clone)]
pub struct Block<'a> {
    pub id: usize,
    /// Call sites executed by this block, in evaluation order. Calls made by
    /// a local helper follow the helper call.
    pub calls: Vec<usize>,
    /// Subset of `calls` that are library APIs.
    pub api_calls: Vec<usize>,
    /// Source offset used to order blocks.
    pub pos: usize,
    pub dead: bool,
    /// Statement-level nodes evaluated in this block.
    pub elems: Vec<&'a Node>,
}

#[derive(Debug, Clone)]
pub struct Cfg<'a> {
    pub blocks: Vec<Block<'a>>,
    pub succs: Vec<Vec<usize>>,
    pub entry: usize,
    /// The single synthetic exit every `return` and the end of the body
    /// flow into.
    pub exit: usize,
}

impl<'a> Cfg<'a> {
    /// Builds the CFG of the program's entry function.
    pub fn build(prog: &'a ProgramAst) -> Self {
        let f = prog.entry_function();
        let body = f.body().expect("entry is a definition");
        let start = body.span().map_or(0, |s| s.start);
        let mut b = Builder {
            prog,
            blocks: Vec::new(),
            succs: Vec::new(),
            breaks: Vec::new(),
            continues: Vec::new(),
            switches: Vec::new(),
            labels: HashMap::new(),
            exit: 0,
        };
        let entry = b.new_block(start);
        b.exit = b.new_block(body.span().map_or(usize::MAX, |s| s.end));
        let end = b.stmt(body, Some(entry));
        if let Some(e) = end {
            b.edge(e, b.exit);
        }
        let mut cfg = Cfg { blocks: b.blocks, succs: b.succs, entry, exit: b.exit };
        cfg.mark_dead();
        cfg
    }

    /// A CFG from raw parts: API call sites per block, edges, entry and exit.
    /// Block positions follow block ids.
    pub fn from_parts(api_calls: Vec<Vec<usize>>, edges: &[(usize, usize)], entry: usize, exit: usize) -> Cfg<'static> {
        let n = api_calls.len();
        let mut succs = vec![Vec::new(); n];
        for &(a, b) in edges {
            if !succs[a].contains(&b) {
                succs[a].push(b);
            }
        }
        let blocks = api_calls
            .into_iter()
            .enumerate()
            .map(|(id, calls)| Block { id, api_calls: calls.clone(), calls, pos: id, dead: false, elems: Vec::new() })
            .collect();
        let mut cfg = Cfg { blocks, succs, entry, exit };
        cfg.mark_dead();
        cfg
    }

    pub fn preds(&self, b: usize) -> Vec<usize> {
        (0..self.blocks.len()).filter(|&a| self.succs[a].contains(&b)).collect()
    }

    fn mark_dead(&mut self) {
        let seen = reachable(&self.succs, self.entry);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.dead = !seen[i];
        }
    }

    pub fn api_count(&self, path: &[usize]) -> usize {
        path.iter().map(|&b| self.blocks[b].api_calls.len()).sum()
    }

    /// API call sites along `path`, in path order.
    pub fn path_api_sites(&self, path: &[usize]) -> Vec<usize> {
        path.iter().flat_map(|&b| self.blocks[b].api_calls.iter().copied()).collect()
    }
}

fn reachable(succs: &[Vec<usize>], from: usize) -> Vec<bool> {
    let mut seen = vec![false; succs.len()];
    let mut q = VecDeque::from([from]);
    seen[from] = true;
    while let Some(x) = q.pop_front() {
        for &y in &succs[x] {
            if !seen[y] {
                seen[y] = true;
                q.push_back(y);
            }
        }
    }
    seen
}

struct SwitchCtx {
    header: usize,
    has_default: bool,
}

struct Builder<'a> {
    prog: &'a ProgramAst,
    blocks: Vec<Block<'a>>,
    succs: Vec<Vec<usize>>,
    breaks: Vec<usize>,
    continues: Vec<usize>,
    switches: Vec<SwitchCtx>,
    labels: HashMap<String, usize>,
    exit: usize,
}

fn start_of(n: &Node) -> usize {
    n.span().map_or(usize::MAX, |s| s.start)
}

fn end_of(n: &Node) -> usize {
    n.span().map_or(usize::MAX, |s| s.end)
}

impl<'a> Builder<'a> {
    fn new_block(&mut self, pos: usize) -> usize {
        let id = self.blocks.len();
        self.blocks.push(Block { id, calls: Vec::new(), api_calls: Vec::new(), pos, dead: false, elems: Vec::new() });
        self.succs.push(Vec::new());
        id
    }

    fn edge(&mut self, a: usize, b: usize) {
        if !self.succs[a].contains(&b) {
            self.succs[a].push(b);
        }
    }

    fn link(&mut self, from: Option<usize>, to: usize) {
        if let Some(a) = from {
            self.edge(a, to);
        }
    }

    fn ensure(&mut self, cur: Option<usize>, n: &Node) -> usize {
        match cur {
            Some(c) => c,
            None => self.new_block(start_of(n)),
        }
    }

    fn append(&mut self, b: usize, n: &'a Node) {
        let block = &mut self.blocks[b];
        if block.elems.is_empty() && block.calls.is_empty() {
            block.pos = start_of(n).min(block.pos);
        }
        block.elems.push(n);
        let mut calls = Vec::new();
        super::post_order_calls(n, &mut calls);
        for c in calls {
            let Some(site) = self.prog.site_of(c) else { continue };
            let mut ids = vec![site];
            if let Some(name) = c.callee_name() {
                if self.prog.helper_function(name).is_some() {
                    ids.extend(self.prog.helper_sites(name));
                }
            }
            for id in ids {
                let block = &mut self.blocks[b];
                block.calls.push(id);
                if self.prog.call_sites[id].is_api {
                    block.api_calls.push(id);
                }
            }
        }
    }

    /// Lowers `n` starting in block `cur`; returns the block control falls
    /// out of, or `None` after an unconditional jump.
    fn stmt(&mut self, n: &'a Node, cur: Option<usize>) -> Option<usize> {
        match n.kind.as_str() {
            "" | "NullStmt" => cur,
            "CompoundStmt" => {
                let mut c = cur;
                for ch in &n.inner {
                    c = self.stmt(ch, c);
                }
                c
            }
            "CaseStmt" | "DefaultStmt" => {
                let b = self.new_block(start_of(n));
                self.link(cur, b);
                if let Some(sw) = self.switches.last_mut() {
                    sw.has_default |= n.kind == "DefaultStmt";
                    let h = sw.header;
                    self.edge(h, b);
                }
                match n.inner.last() {
                    Some(sub) if n.kind == "DefaultStmt" || n.inner.len() > 1 => self.stmt(sub, Some(b)),
                    _ => Some(b),
                }
            }
            "LabelStmt" => {
                let key = n.decl_id.clone().unwrap_or_else(|| n.name().to_owned());
                let b = match self.labels.get(&key) {
                    Some(&b) => b,
                    None => {
                        let b = self.new_block(start_of(n));
                        self.labels.insert(key, b);
                        b
                    }
                };
                self.blocks[b].pos = start_of(n);
                self.link(cur, b);
                match n.inner.first() {
                    Some(sub) => self.stmt(sub, Some(b)),
                    None => Some(b),
                }
            }
            _ => {
                let cur = self.ensure(cur, n);
                self.stmt_in(n, cur)
            }
        }
    }

    fn stmt_in(&mut self, n: &'a Node, cur: usize) -> Option<usize> {
        match n.kind.as_str() {
            "IfStmt" => {
                let cond = &n.inner[0];
                self.append(cur, cond);
                let then_b = self.new_block(start_of(&n.inner[1]));
                self.edge(cur, then_b);
                let then_end = self.stmt(&n.inner[1], Some(then_b));
                let join = self.new_block(end_of(n));
                if n.has_else && n.inner.len() > 2 {
                    let else_b = self.new_block(start_of(&n.inner[2]));
                    self.edge(cur, else_b);
                    let else_end = self.stmt(&n.inner[2], Some(else_b));
                    self.link(else_end, join);
                } else {
                    self.edge(cur, join);
                }
                self.link(then_end, join);
                Some(join)
            }
            "WhileStmt" => {
                let (cond, body) = (&n.inner[0], &n.inner[1]);
                let header = self.new_block(start_of(cond));
                self.edge(cur, header);
                self.append(header, cond);
                let body_b = self.new_block(start_of(body));
                let exit = self.new_block(end_of(n));
                self.edge(header, body_b);
                self.edge(header, exit);
                self.breaks.push(exit);
                self.continues.push(header);
                let end = self.stmt(body, Some(body_b));
                self.breaks.pop();
                self.continues.pop();
                self.link(end, header);
                Some(exit)
            }
            "DoStmt" => {
                let (body, cond) = (&n.inner[0], &n.inner[1]);
                let body_b = self.new_block(start_of(body));
                self.edge(cur, body_b);
                let cond_b = self.new_block(start_of(cond));
                let exit = self.new_block(end_of(n));
                self.breaks.push(exit);
                self.continues.push(cond_b);
                let end = self.stmt(body, Some(body_b));
                self.breaks.pop();
                self.continues.pop();
                self.link(end, cond_b);
                self.append(cond_b, cond);
                self.edge(cond_b, body_b);
                self.edge(cond_b, exit);
                Some(exit)
            }
            "ForStmt" => {
                let part = |i: usize| n.inner.get(i).filter(|c| !c.kind.is_empty());
                let (init, cond, inc, body) = (part(0), part(2), part(3), n.inner.last());
                let mut c = Some(cur);
                if let Some(init) = init {
                    c = self.stmt(init, c);
                }
                let header = self.new_block(cond.map_or(start_of(n), start_of));
                self.link(c, header);
                if let Some(cond) = cond {
                    self.append(header, cond);
                }
                let body_b = self.new_block(body.map_or(start_of(n), start_of));
                let exit = self.new_block(end_of(n));
                self.edge(header, body_b);
                if cond.is_some() {
                    self.edge(header, exit);
                }
                let inc_b = self.new_block(inc.map_or(end_of(n), start_of));
                self.breaks.push(exit);
                self.continues.push(inc_b);
                let end = match body {
                    Some(body) => self.stmt(body, Some(body_b)),
                    None => Some(body_b),
                };
                self.breaks.pop();
                self.continues.pop();
                self.link(end, inc_b);
                if let Some(inc) = inc {
                    self.append(inc_b, inc);
                }
                self.edge(inc_b, header);
                Some(exit)
            }
            "SwitchStmt" => {
                let cond = &n.inner[0];
                self.append(cur, cond);
                let exit = self.new_block(end_of(n));
                self.switches.push(SwitchCtx { header: cur, has_default: false });
                self.breaks.push(exit);
                let end = match n.inner.last() {
                    Some(body) if n.inner.len() > 1 => self.stmt(body, None),
                    _ => None,
                };
                self.breaks.pop();
                let sw = self.switches.pop().expect("pushed above");
                self.link(end, exit);
                if !sw.has_default {
                    self.edge(cur, exit);
                }
                Some(exit)
            }
            "BreakStmt" => {
                if let Some(&t) = self.breaks.last() {
                    self.edge(cur, t);
                }
                None
            }
            "ContinueStmt" => {
                if let Some(&t) = self.continues.last() {
                    self.edge(cur, t);
                }
                None
            }
            "ReturnStmt" => {
                if !n.inner.is_empty() {
                    self.append(cur, n);
                }
                self.edge(cur, self.exit);
                None
            }
            "GotoStmt" => {
                let key = n.target_label_decl_id.clone().unwrap_or_default();
                let b = match self.labels.get(&key) {
                    Some(&b) => b,
                    None => {
                        let b = self.new_block(usize::MAX);
                        self.labels.insert(key, b);
                        b
                    }
                };
                self.edge(cur, b);
                None
            }
            _ => {
                self.append(cur, n);
                Some(cur)
            }
        }
    }
}

/// Tarjan's algorithm. Components come out in reverse topological order.
fn sccs(succs: &[Vec<usize>]) -> Vec<Vec<usize>> {
    struct St<'g> {
        succs: &'g [Vec<usize>],
        index: Vec<Option<usize>>,
        low: Vec<usize>,
        on_stack: Vec<bool>,
        stack: Vec<usize>,
        next: usize,
        out: Vec<Vec<usize>>,
    }
    fn visit(st: &mut St, v: usize) {
        st.index[v] = Some(st.next);
        st.low[v] = st.next;
        st.next += 1;
        st.stack.push(v);
        st.on_stack[v] = true;
        for i in 0..st.succs[v].len() {
            let w = st.succs[v][i];
            match st.index[w] {
                None => {
                    visit(st, w);
                    st.low[v] = st.low[v].min(st.low[w]);
                }
                Some(iw) if st.on_stack[w] => st.low[v] = st.low[v].min(iw),
                _ => {}
            }
        }
        if Some(st.low[v]) == st.index[v] {
            let mut comp = Vec::new();
            loop {
                let w = st.stack.pop().expect("v is on the stack");
                st.on_stack[w] = false;
                comp.push(w);
                if w == v {
                    break;
                }
            }
            st.out.push(comp);
        }
    }
    let n = succs.len();
    let mut st = St { succs, index: vec![None; n], low: vec![0; n], on_stack: vec![false; n], stack: Vec::new(), next: 0, out: Vec::new() };
    for v in 0..n {
        if st.index[v].is_none() {
            visit(&mut st, v);
        }
    }
    st.out
}

/// The entry-to-exit path with the most API call sites. Strongly connected
/// regions (loops) count as one super-block carrying all their members'
/// calls; ties go to the path whose block positions are lexicographically
/// earliest.
pub fn critical_path(cfg: &Cfg) -> Result<Vec<usize>, AnalysisError> {
    let comps = sccs(&cfg.succs);
    let mut comp_of = vec![0; cfg.blocks.len()];
    for (ci, c) in comps.iter().enumerate() {
        for &b in c {
            comp_of[b] = ci;
        }
    }
    let weight: Vec<usize> = comps.iter().map(|c| c.iter().map(|&b| cfg.blocks[b].api_calls.len()).sum()).collect();
    let pos: Vec<usize> = comps.iter().map(|c| c.iter().map(|&b| cfg.blocks[b].pos).min().unwrap_or(usize::MAX)).collect();
    let mut csuccs: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); comps.len()];
    for (a, ss) in cfg.succs.iter().enumerate() {
        for &b in ss {
            if comp_of[a] != comp_of[b] {
                csuccs[comp_of[a]].insert(comp_of[b]);
            }
        }
    }

    // Best path from each component to the exit component: (weight, position
    // sequence, components). Tarjan order means successors come first.
    let exit_c = comp_of[cfg.exit];
    let mut best: Vec<Option<(usize, Vec<usize>, Vec<usize>)>> = vec![None; comps.len()];
    for c in 0..comps.len() {
        let tail = if c == exit_c {
            Some((0, Vec::new(), Vec::new()))
        } else {
            let mut pick: Option<&(usize, Vec<usize>, Vec<usize>)> = None;
            for &s in &csuccs[c] {
                if let Some(cand) = &best[s] {
                    let better = match pick {
                        None => true,
                        Some(p) => cand.0 > p.0 || (cand.0 == p.0 && cand.1 < p.1),
                    };
                    if better {
                        pick = Some(cand);
                    }
                }
            }
            pick.cloned()
        };
        best[c] = tail.map(|(w, mut ps, mut cs)| {
            ps.insert(0, pos[c]);
            cs.insert(0, c);
            (w + weight[c], ps, cs)
        });
    }
    let (_, _, path) = best[comp_of[cfg.entry]].clone().ok_or(AnalysisError::NoPath)?;
    let mut out = Vec::new();
    for c in path {
        let mut members = comps[c].clone();
        members.sort_by_key(|&b| (cfg.blocks[b].pos, b));
        out.extend(members);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::testutil::program;
    use proptest::prelude::*;

    #[test]
    fn straight_line() {
        let cfg = Cfg::from_parts(vec![vec![0, 1, 2], vec![]], &[(0, 1)], 0, 1);
        let p = critical_path(&cfg).unwrap();
        assert_eq!(p, [0, 1]);
        assert_eq!(cfg.api_count(&p), 3);
    }

    #[test]
    fn diamond_prefers_heavier_arm() {
        // 0 -> {1 (2 calls), 2 (1 call)} -> 3
        let cfg = Cfg::from_parts(vec![vec![], vec![0, 1], vec![2], vec![]], &[(0, 2), (0, 1), (1, 3), (2, 3)], 0, 3);
        assert_eq!(critical_path(&cfg).unwrap(), [0, 1, 3]);
    }

    #[test]
    fn tie_goes_to_earliest_source_position() {
        let cfg = Cfg::from_parts(vec![vec![], vec![0], vec![1], vec![]], &[(0, 2), (0, 1), (1, 3), (2, 3)], 0, 3);
        assert_eq!(critical_path(&cfg).unwrap(), [0, 1, 3]);
    }

    #[test]
    fn unreachable_exit_is_no_path() {
        let cfg = Cfg::from_parts(vec![vec![], vec![]], &[(0, 0)], 0, 1);
        assert!(matches!(critical_path(&cfg), Err(AnalysisError::NoPath)));
        assert!(cfg.blocks[1].dead);
    }

    #[test]
    fn loop_body_counts_once_as_super_block() {
        // 0 -> 1 <-> 2, 1 -> 3
        let cfg = Cfg::from_parts(vec![vec![0], vec![1], vec![2], vec![]], &[(0, 1), (1, 2), (2, 1), (1, 3)], 0, 3);
        let p = critical_path(&cfg).unwrap();
        assert_eq!(p, [0, 1, 2, 3]);
        assert_eq!(cfg.api_count(&p), 3);
    }

    /// Independent oracle: SCCs from a transitive closure, then every
    /// entry-to-exit path of the condensation enumerated by DFS.
    fn brute_force_best(n: usize, edges: &[(usize, usize)], w: &[usize], exit: usize) -> Option<usize> {
        let mut r = vec![vec![false; n]; n];
        for i in 0..n {
            r[i][i] = true;
        }
        for &(a, b) in edges {
            r[a][b] = true;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if r[i][k] && r[k][j] {
                        r[i][j] = true;
                    }
                }
            }
        }
        let rep: Vec<usize> = (0..n).map(|i| (0..n).find(|&j| r[i][j] && r[j][i]).unwrap()).collect();
        let cw: Vec<usize> = (0..n).map(|c| (0..n).filter(|&b| rep[b] == c).map(|b| w[b]).sum()).collect();
        fn dfs(
            c: usize,
            target: usize,
            n: usize,
            edges: &[(usize, usize)],
            rep: &[usize],
            cw: &[usize],
            acc: usize,
            best: &mut Option<usize>,
        ) {
            let acc = acc + cw[c];
            if c == target {
                *best = Some(best.map_or(acc, |b| b.max(acc)));
                return;
            }
            let next: BTreeSet<usize> = edges.iter().filter(|(a, b)| rep[*a] == c && rep[*b] != c).map(|(_, b)| rep[*b]).collect();
            for d in next {
                dfs(d, target, n, edges, rep, cw, acc, best);
            }
        }
        let mut best = None;
        dfs(rep[0], rep[exit], n, edges, &rep, &cw, 0, &mut best);
        best
    }

    proptest! {
        #[test]
        fn critical_path_is_maximal(
            n in 2usize..=12,
            raw_edges in prop::collection::vec((0usize..12, 0usize..12), 0..30),
            weights in prop::collection::vec(0usize..4, 12),
        ) {
            let mut edges: Vec<(usize, usize)> = raw_edges.into_iter().map(|(a, b)| (a % n, b % n)).filter(|&(_, b)| b != 0).collect();
            // The exit has no successors; the entry no predecessors.
            let exit = n - 1;
            edges.retain(|&(a, _)| a != exit);
            let mut next_id = 0;
            let calls: Vec<Vec<usize>> = weights[..n].iter().map(|&k| { let v: Vec<usize> = (next_id..next_id + k).collect(); next_id += k; v }).collect();
            let cfg = Cfg::from_parts(calls, &edges, 0, exit);
            let oracle = brute_force_best(n, &edges, &weights[..n], exit);
            match critical_path(&cfg) {
                Ok(p) => {
                    prop_assert_eq!(Some(cfg.api_count(&p)), oracle);
                    prop_assert_eq!(p[0], 0);
                    prop_assert_eq!(*p.last().unwrap(), exit);
                    let comp = |b: usize| -> Vec<usize> {
                        (0..n).filter(|&o| reachable(&cfg.succs, b)[o] && reachable(&cfg.succs, o)[b]).collect()
                    };
                    for w in p.windows(2) {
                        // Consecutive blocks share a component or the
                        // components are linked by an edge.
                        let (ca, cb) = (comp(w[0]), comp(w[1]));
                        let linked = ca.iter().any(|&a| cb.iter().any(|b| cfg.succs[a].contains(b)));
                        prop_assert!(ca == cb || linked);
                    }
                }
                Err(_) => prop_assert_eq!(oracle, None),
            }
        }
    }

    const CONTROL: &str = r#"
int a(int); int b(int); int c(int); int d(int);
static int helper(int x) { return c(x) + d(x); }
int LLVMFuzzerTestOneInput(const unsigned char *data, unsigned long size) {
  int x = a(0);
  if (size < 4) {
    b(x);
    return 0;
  }
  for (int i = 0; i < 3; i++) {
    if (i == 1) continue;
    helper(i);
  }
  switch (x) {
    case 1: b(1);
    case 2: break;
    default: a(2);
  }
  return 0;
}
"#;

    #[test]
    fn built_cfg_shape() {
        let Some(p) = program(CONTROL, &["a", "b", "c", "d"]) else { return };
        let cfg = Cfg::build(&p);
        assert!(cfg.preds(cfg.entry).is_empty());
        for b in &cfg.blocks {
            assert!(b.dead || reachable(&cfg.succs, cfg.entry)[b.id]);
        }
        let path = critical_path(&cfg).unwrap();
        let names: Vec<&str> = cfg.path_api_sites(&path).iter().map(|&s| p.call_sites[s].callee.as_str()).collect();
        // a(0); loop with helper (c, d); switch: case 1 falls through
        // (b) and the default arm (a) are alternatives of one call each.
        assert_eq!(names, ["a", "c", "d", "b"]);
        let helper_sites: Vec<_> = p.call_sites.iter().filter(|s| s.helper.is_some()).collect();
        assert_eq!(helper_sites.len(), 2);
    }
}
