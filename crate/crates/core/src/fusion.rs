//! Argument conversion and seed fusion.
//!
//! Constant API arguments of unique seeds are turned into values read from
//! the fuzzer input, subject to the resolved constraints, and the seeds are
//! merged into one harness dispatching on a selector.
//!
//! Byte layout of a fused input: the selector (one byte, or two bytes
//! little-endian when there are more than 256 seeds, taken modulo the seed
//! count), then each converted site of the chosen seed in source order:
//!
//! - scalar: `width` bytes, little-endian, sign-extended for signed types;
//! - bytes: a two-byte little-endian length (capped), then that many bytes;
//! - choice: one byte indexing the pool of strings seen at that argument.
//!
//! Whatever is left is the seed body's own `data`/`size`. Missing bytes read
//! as zero.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::analysis::{const_arg_sites, ConstKind, LiteralValue, ProgramAst, ENTRY};
use crate::ast::{Node, Span};
use crate::bank::sha256_hex;
use crate::constraints::{Constraint, ConstraintKind};
use crate::library::LibraryModel;
use crate::rewrite::{RewriteError, Rewriter};
use crate::sanitizer::{Failure, Pipeline, PipelineError};

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("no seeds to fuse")]
    EmptySeedSet,
    #[error("seed {seed}: {source}")]
    Rewrite {
        seed: String,
        #[source]
        source: RewriteError,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Cap on length-bounded byte buffers.
    pub bytes_cap: usize,
    /// Upper bound for allocation-size arguments.
    pub alloc_cap: u64,
    /// Random values tried per site before a conversion is kept.
    pub trials: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { bytes_cap: 4096, alloc_cap: 1 << 16, trials: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalarType {
    pub width: u8,
    pub signed: bool,
    pub float: bool,
}

/// Width and signedness of a C scalar type name on LP64.
pub fn scalar_type(ty: &str) -> ScalarType {
    let t = ty.replace("const ", "").replace("volatile ", "");
    let t = t.trim();
    let has = |w: &str| t.split(|c: char| !c.is_alphanumeric() && c != '_').any(|x| x == w);
    if has("double") {
        return ScalarType { width: 8, signed: true, float: true };
    }
    if has("float") {
        return ScalarType { width: 4, signed: true, float: true };
    }
    let unsigned = has("unsigned") || has("size_t") || has("_Bool") || has("bool") || t.starts_with("uint");
    let width = if has("char") || has("_Bool") || has("bool") || t.contains("int8_t") {
        1
    } else if has("short") || t.contains("int16_t") {
        2
    } else if has("long")
        || t.contains("int64_t")
        || ["size_t", "ssize_t", "ptrdiff_t", "intptr_t", "uintptr_t", "off_t", "intmax_t", "uintmax_t"].iter().any(|w| has(w))
    {
        8
    } else {
        4
    };
    ScalarType { width, signed: !unsigned, float: false }
}

/// Where an index conversion takes its bound from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LenRef {
    /// A converted byte buffer, by plan site index.
    Site(usize),
    /// Source text of the length argument at the same call.
    Expr(String),
    Const(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SiteKind {
    Scalar(ScalarType),
    Bytes {
        cap: usize,
    },
    Choice {
        options: Vec<String>,
    },
    /// Allocation size, reduced into `[0, cap]`.
    Clamped {
        ty: ScalarType,
        cap: u64,
    },
    /// Array index, reduced modulo the array length.
    Index {
        ty: ScalarType,
        len: LenRef,
    },
    /// Length of a converted buffer; reads nothing.
    LengthOf {
        buffer: usize,
    },
    /// Descriptor of the materialized input file; reads nothing.
    InputFd,
}

impl SiteKind {
    pub fn consumes(&self) -> bool {
        !matches!(self, SiteKind::LengthOf { .. } | SiteKind::InputFd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionSite {
    pub call_site: usize,
    pub api: String,
    pub arg: usize,
    pub original: LiteralValue,
    pub arg_span: Span,
    pub kind: SiteKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BindingEffect {
    Pinned,
    Derived,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub call_site: usize,
    pub api: String,
    pub arg: usize,
    pub kind: ConstraintKind,
    pub effect: BindingEffect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionPlan {
    pub seed: String,
    pub sites: Vec<ConversionSite>,
    pub bindings: Vec<Binding>,
}

impl ConversionPlan {
    /// Plan restricted to `keep` (indices into `sites`); derived sites follow
    /// their buffer, and index bounds on dropped buffers fall back to the
    /// original literal length.
    pub fn restrict(&self, keep: &BTreeSet<usize>) -> ConversionPlan {
        let mut kept = BTreeSet::new();
        for (i, s) in self.sites.iter().enumerate() {
            let on = match &s.kind {
                SiteKind::LengthOf { buffer } => keep.contains(buffer),
                SiteKind::InputFd => true,
                _ => keep.contains(&i),
            };
            if on {
                kept.insert(i);
            }
        }
        let remap: BTreeMap<usize, usize> = kept.iter().enumerate().map(|(n, &o)| (o, n)).collect();
        let sites = kept
            .iter()
            .map(|&i| {
                let mut s = self.sites[i].clone();
                match &mut s.kind {
                    SiteKind::LengthOf { buffer } => *buffer = remap[buffer],
                    SiteKind::Index { len, .. } => {
                        if let LenRef::Site(b) = len {
                            *len = match remap.get(b) {
                                Some(&nb) => LenRef::Site(nb),
                                None => LenRef::Const(literal_len(&self.sites[*b].original)),
                            };
                        }
                    }
                    _ => {}
                }
                s
            })
            .collect();
        ConversionPlan { seed: self.seed.clone(), sites, bindings: self.bindings.clone() }
    }

    pub fn consuming(&self) -> impl Iterator<Item = (usize, &ConversionSite)> {
        self.sites.iter().enumerate().filter(|(_, s)| s.kind.consumes())
    }
}

fn literal_len(v: &LiteralValue) -> u64 {
    match v {
        LiteralValue::Str(s) => s.len() as u64,
        _ => 0,
    }
}

/// A seed prepared for fusion.
pub struct FusionSeed {
    pub id: String,
    pub prog: ProgramAst,
}

/// Inputs shared by every seed's plan.
#[derive(Debug, Clone, Default)]
pub struct FusionContext {
    pub constraints: BTreeMap<(String, usize), Constraint>,
    /// Fixed parameter count of each variadic API.
    pub variadic: BTreeMap<String, usize>,
    /// String literals seen at each (api, arg) across all seeds.
    pub strings: BTreeMap<(String, usize), BTreeSet<String>>,
    pub config: FusionConfig,
}

impl FusionContext {
    pub fn new(
        seeds: &[FusionSeed],
        constraints: BTreeMap<(String, usize), Constraint>,
        model: Option<&LibraryModel>,
        config: FusionConfig,
    ) -> Self {
        let variadic =
            model.map(|m| m.apis.iter().filter(|a| a.variadic).map(|a| (a.name.clone(), a.params.len())).collect()).unwrap_or_default();
        let mut strings: BTreeMap<(String, usize), BTreeSet<String>> = BTreeMap::new();
        for s in seeds {
            for c in const_arg_sites(&s.prog) {
                if let LiteralValue::Str(v) = c.value {
                    strings.entry((c.api, c.arg_index)).or_default().insert(v);
                }
            }
        }
        FusionContext { constraints, variadic, strings, config }
    }

    fn constraint(&self, api: &str, arg: usize) -> Option<&Constraint> {
        self.constraints.get(&(api.to_owned(), arg))
    }

    fn is_variadic_tail(&self, api: &str, arg: usize) -> bool {
        self.variadic.get(api).is_some_and(|&n| arg >= n)
    }
}

fn is_simple_expr(text: &str) -> bool {
    let t = text.trim();
    !t.is_empty() && t.chars().all(|c| c.is_alphanumeric() || c == '_')
}

/// Converts every constant API argument of `seed` not pinned by a constraint.
pub fn plan_conversions(seed: &FusionSeed, ctx: &FusionContext) -> ConversionPlan {
    let prog = &seed.prog;
    let consts = const_arg_sites(prog);
    let mut sites: Vec<ConversionSite> = Vec::new();
    let mut bindings = Vec::new();
    let mut bind = |cs: usize, api: &str, arg: usize, kind, effect| {
        bindings.push(Binding { call_site: cs, api: api.to_owned(), arg, kind, effect });
    };
    // Buffers converted per call site: (site, arg) -> plan index.
    let mut buffers: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let usable = |c: &crate::analysis::ConstArgSite| !prog.call_sites[c.site].in_macro && !ctx.is_variadic_tail(&c.api, c.arg_index);

    // Byte buffers and plain strings first, so lengths can refer to them.
    for c in consts.iter().filter(|c| c.kind == ConstKind::ImmutableArray && usable(c)) {
        let LiteralValue::Str(text) = &c.value else { continue };
        if let Some(k) = ctx.constraint(&c.api, c.arg_index) {
            if matches!(k.kind, ConstraintKind::FileName | ConstraintKind::FormatString) {
                bind(c.site, &c.api, c.arg_index, k.kind, BindingEffect::Pinned);
                continue;
            }
        }
        let pool = ctx.strings.get(&(c.api.clone(), c.arg_index));
        let kind = match pool {
            Some(p) if p.len() >= 2 && p.len() <= 256 => SiteKind::Choice { options: p.iter().cloned().collect() },
            _ if text.len() <= ctx.config.bytes_cap => SiteKind::Bytes { cap: ctx.config.bytes_cap },
            _ => continue,
        };
        if matches!(kind, SiteKind::Bytes { .. }) {
            buffers.insert((c.site, c.arg_index), sites.len());
        }
        sites.push(ConversionSite {
            call_site: c.site,
            api: c.api.clone(),
            arg: c.arg_index,
            original: c.value.clone(),
            arg_span: c.arg_span,
            kind,
        });
    }

    // Lengths of converted buffers, whether or not the length was constant.
    let mut derived: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (cs_id, cs) in prog.call_sites.iter().enumerate().filter(|(_, cs)| cs.is_api && !cs.in_macro) {
        for ((api, arg), k) in ctx.constraints.range((cs.callee.clone(), 0)..) {
            if api != &cs.callee {
                break;
            }
            if k.kind != ConstraintKind::ArrayLength {
                continue;
            }
            let Some(rel) = k.related_arg else { continue };
            let Some(&buf) = buffers.get(&(cs_id, rel)) else { continue };
            let Some(span) = call_arg_span(prog, cs_id, *arg) else { continue };
            derived.insert((cs_id, *arg));
            bind(cs_id, api, *arg, k.kind, BindingEffect::Derived);
            sites.push(ConversionSite {
                call_site: cs_id,
                api: api.clone(),
                arg: *arg,
                original: LiteralValue::Int(literal_len(&sites[buf].original) as i128),
                arg_span: span,
                kind: SiteKind::LengthOf { buffer: buf },
            });
        }
    }

    for c in consts.iter().filter(|c| c.kind == ConstKind::Scalar && usable(c)) {
        if derived.contains(&(c.site, c.arg_index)) {
            continue;
        }
        let ty = scalar_type(&c.arg_type);
        let kind = match ctx.constraint(&c.api, c.arg_index) {
            None => SiteKind::Scalar(ty),
            Some(k) => match k.kind {
                ConstraintKind::AllocSize => {
                    bind(c.site, &c.api, c.arg_index, k.kind, BindingEffect::Derived);
                    SiteKind::Clamped { ty, cap: ctx.config.alloc_cap }
                }
                ConstraintKind::FileDesc => {
                    bind(c.site, &c.api, c.arg_index, k.kind, BindingEffect::Derived);
                    SiteKind::InputFd
                }
                ConstraintKind::ArrayIndex => {
                    let rel = k.related_arg.unwrap_or(usize::MAX);
                    let len = if let Some(&b) = buffers.get(&(c.site, rel)) {
                        Some(LenRef::Site(b))
                    } else {
                        // Bound by the length argument paired with the same array.
                        ctx.constraints
                            .values()
                            .find(|o| o.api == c.api && o.kind == ConstraintKind::ArrayLength && o.related_arg == Some(rel))
                            .and_then(|o| call_arg_span(prog, c.site, o.arg))
                            .map(|sp| prog.text(sp).to_owned())
                            .filter(|t| is_simple_expr(t))
                            .map(LenRef::Expr)
                    };
                    match len {
                        Some(len) => {
                            bind(c.site, &c.api, c.arg_index, k.kind, BindingEffect::Derived);
                            SiteKind::Index { ty, len }
                        }
                        None => {
                            bind(c.site, &c.api, c.arg_index, k.kind, BindingEffect::Pinned);
                            continue;
                        }
                    }
                }
                // A length whose array stays fixed keeps its value.
                other => {
                    bind(c.site, &c.api, c.arg_index, other, BindingEffect::Pinned);
                    continue;
                }
            },
        };
        sites.push(ConversionSite {
            call_site: c.site,
            api: c.api.clone(),
            arg: c.arg_index,
            original: c.value.clone(),
            arg_span: c.arg_span,
            kind,
        });
    }

    // Plan order is source order; buffer references follow the permutation.
    let mut order: Vec<usize> = (0..sites.len()).collect();
    order.sort_by_key(|&i| (sites[i].call_site, sites[i].arg));
    let pos: BTreeMap<usize, usize> = order.iter().enumerate().map(|(n, &o)| (o, n)).collect();
    let mut sorted: Vec<ConversionSite> = order.iter().map(|&i| sites[i].clone()).collect();
    for s in &mut sorted {
        match &mut s.kind {
            SiteKind::LengthOf { buffer } => *buffer = pos[buffer],
            SiteKind::Index { len: LenRef::Site(b), .. } => *b = pos[b],
            _ => {}
        }
    }
    bindings.sort_by_key(|b| (b.call_site, b.arg));
    ConversionPlan { seed: seed.id.clone(), sites: sorted, bindings }
}

fn call_arg_span(prog: &ProgramAst, site: usize, arg: usize) -> Option<Span> {
    let id = &prog.call_sites[site];
    let mut found = None;
    let mut funcs: Vec<&Node> = vec![prog.entry_function()];
    funcs.extend(prog.helpers.iter().filter_map(|h| prog.helper_function(h)));
    for f in funcs {
        f.walk(&mut |n| {
            if found.is_none() && prog.site_of(n) == Some(id.id) {
                found = n.call_args().get(arg).and_then(Node::span);
            }
        });
    }
    found
}

/// Little-endian two's complement encoding of `v` in `width` bytes.
fn int_bytes(v: i128, width: u8) -> Vec<u8> {
    (v as u128).to_le_bytes()[..width as usize].to_vec()
}

/// The bytes that make a converted site reproduce its original literal.
pub fn harvest(site: &ConversionSite, cap: usize) -> Vec<u8> {
    let scalar = |ty: &ScalarType| match (&site.original, ty.float) {
        (LiteralValue::Int(i), false) => int_bytes(*i, ty.width),
        (LiteralValue::Float(f), false) => int_bytes(*f as i128, ty.width),
        (LiteralValue::Int(i), true) if ty.width == 4 => (*i as f32).to_le_bytes().to_vec(),
        (LiteralValue::Int(i), true) => (*i as f64).to_le_bytes().to_vec(),
        (LiteralValue::Float(f), true) if ty.width == 4 => (*f as f32).to_le_bytes().to_vec(),
        (LiteralValue::Float(f), true) => f.to_le_bytes().to_vec(),
        (LiteralValue::Str(_), _) => vec![0; ty.width as usize],
    };
    match &site.kind {
        SiteKind::Scalar(ty) | SiteKind::Clamped { ty, .. } | SiteKind::Index { ty, .. } => scalar(ty),
        SiteKind::Bytes { .. } => {
            let LiteralValue::Str(s) = &site.original else { return vec![0, 0] };
            let b = &s.as_bytes()[..s.len().min(cap)];
            let mut out = (b.len() as u16).to_le_bytes().to_vec();
            out.extend_from_slice(b);
            out
        }
        SiteKind::Choice { options } => {
            let i = match &site.original {
                LiteralValue::Str(s) => options.iter().position(|o| o == s).unwrap_or(0),
                _ => 0,
            };
            vec![i as u8]
        }
        SiteKind::LengthOf { .. } | SiteKind::InputFd => Vec::new(),
    }
}

/// Number of input bytes a site reads, given the bytes that follow it.
fn random_site_bytes<R: Rng + ?Sized>(kind: &SiteKind, rng: &mut R) -> Vec<u8> {
    let mut fill = |n: usize| {
        let mut v = vec![0u8; n];
        rng.fill_bytes(&mut v);
        v
    };
    match kind {
        SiteKind::Scalar(t) | SiteKind::Clamped { ty: t, .. } | SiteKind::Index { ty: t, .. } => fill(t.width as usize),
        SiteKind::Bytes { cap } => {
            let n = (u16::from_le_bytes([fill(1)[0], 0]) as usize).min(*cap);
            let mut out = (n as u16).to_le_bytes().to_vec();
            out.extend(fill(n));
            out
        }
        SiteKind::Choice { .. } => fill(1),
        SiteKind::LengthOf { .. } | SiteKind::InputFd => Vec::new(),
    }
}

const PROVIDER: &str = r#"#include <fcntl.h>
#include <stddef.h>
#include <stdint.h>
#include <string.h>
#include <unistd.h>

struct df_input {
  const uint8_t *data;
  size_t size;
};

static uint64_t df_take(struct df_input *in, unsigned width) {
  uint64_t v = 0;
  unsigned i;
  for (i = 0; i < width; i++) {
    uint64_t b = 0;
    if (in->size > 0) {
      b = in->data[0];
      in->data++;
      in->size--;
    }
    v |= b << (8 * i);
  }
  return v;
}

static int64_t df_take_signed(struct df_input *in, unsigned width) {
  uint64_t v = df_take(in, width);
  if (width < 8 && ((v >> (8 * width - 1)) & 1)) {
    v |= ~(uint64_t)0 << (8 * width);
  }
  return (int64_t)v;
}

static double df_take_float(struct df_input *in, unsigned width) {
  uint64_t v = df_take(in, width);
  if (width == 4) {
    uint32_t u = (uint32_t)v;
    float f;
    memcpy(&f, &u, sizeof(f));
    return f;
  }
  {
    double d;
    memcpy(&d, &v, sizeof(d));
    return d;
  }
}

static size_t df_take_bytes(struct df_input *in, unsigned char *out, size_t cap) {
  size_t n = (size_t)df_take(in, 2);
  size_t i;
  if (n > cap) {
    n = cap;
  }
  for (i = 0; i < n; i++) {
    out[i] = (unsigned char)df_take(in, 1);
  }
  out[n] = 0;
  return n;
}

static int df_fd = -1;

static void df_materialize(const uint8_t *data, size_t size) {
  int fd = open("input_file", O_WRONLY | O_CREAT | O_TRUNC, 0600);
  if (fd < 0) {
    return;
  }
  while (size > 0) {
    ssize_t w = write(fd, data, size);
    if (w <= 0) {
      break;
    }
    data += w;
    size -= (size_t)w;
  }
  close(fd);
}

static int df_input_fd(void) {
  if (df_fd < 0) {
    df_fd = open("input_file", O_RDONLY);
  }
  return df_fd;
}

static void df_release(void) {
  if (df_fd >= 0) {
    close(df_fd);
    df_fd = -1;
  }
}
"#;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedDriver {
    pub source: String,
    /// Selector value (mod seed count) to seed id.
    pub dispatch: Vec<String>,
    /// One blob per seed: selector followed by its harvested literals.
    pub corpus: Vec<Vec<u8>>,
}

impl FusedDriver {
    /// Writes `driver.c`, `dispatch.json` and `corpus/` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), std::io::Error> {
        std::fs::create_dir_all(dir.join("corpus"))?;
        std::fs::write(dir.join("driver.c"), &self.source)?;
        let table = serde_json::to_string_pretty(&self.dispatch).expect("dispatch serializes");
        std::fs::write(dir.join("dispatch.json"), table + "\n")?;
        for blob in &self.corpus {
            std::fs::write(dir.join("corpus").join(sha256_hex(blob)), blob)?;
        }
        Ok(())
    }
}

pub fn selector_width(n: usize) -> usize {
    if n > 256 {
        2
    } else {
        1
    }
}

fn selector_bytes(k: usize, n: usize) -> Vec<u8> {
    (k as u16).to_le_bytes()[..selector_width(n)].to_vec()
}

fn is_include(line: &str) -> bool {
    let t = line.trim_start();
    t.strip_prefix('#').is_some_and(|r| r.trim_start().starts_with("include"))
}

fn defined_macro(line: &str) -> Option<&str> {
    let r = line.trim_start().strip_prefix('#')?.trim_start().strip_prefix("define")?;
    if !r.starts_with([' ', '\t']) {
        return None;
    }
    let r = r.trim_start();
    let end = r.find(|c: char| !(c.is_alphanumeric() || c == '_')).unwrap_or(r.len());
    (end > 0).then(|| &r[..end])
}

/// Top-level definitions in the seed's own file, keyed by declaration id.
fn top_level_names(prog: &ProgramAst) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut defined = BTreeSet::new();
    for n in &prog.tu.root.inner {
        let defines = match n.kind.as_str() {
            "FunctionDecl" => n.body().is_some(),
            "VarDecl" => n.storage_class.as_deref() != Some("extern"),
            _ => false,
        };
        if defines && !n.name().is_empty() {
            defined.insert(n.name().to_owned());
        }
    }
    let ids = prog
        .tu
        .root
        .inner
        .iter()
        .filter(|n| matches!(n.kind.as_str(), "FunctionDecl" | "VarDecl") && defined.contains(n.name()))
        .map(|n| n.id.clone())
        .collect();
    (defined, ids)
}

fn seed_body(k: usize, seed: &FusionSeed, plan: &ConversionPlan) -> Result<(String, Vec<String>, Vec<String>), FusionError> {
    let prog = &seed.prog;
    let src = &prog.source;
    let mut rw = Rewriter::new();
    let mut includes = Vec::new();
    let mut macros = Vec::new();
    let mut off = 0;
    for line in src.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if is_include(body) {
            includes.push(body.trim().to_owned());
            rw.replace(Span { start: off, end: off + body.len() }, "");
        } else if let Some(m) = defined_macro(body) {
            macros.push(m.to_owned());
        }
        off += line.len();
    }

    let (defined, ids) = top_level_names(prog);
    let rename = |name: &str| if name == ENTRY { format!("df_seed_{k}") } else { format!("{name}_s{k}") };
    let mut edits: BTreeMap<usize, (Span, String)> = BTreeMap::new();
    for n in &prog.tu.root.inner {
        if !ids.contains(&n.id) {
            continue;
        }
        if let Some(l) = n.loc.as_ref().filter(|l| !l.is_macro()) {
            if let (Some(o), Some(len)) = (l.offset, l.tok_len) {
                if src.get(o..o + len) == Some(n.name()) {
                    edits.insert(o, (Span { start: o, end: o + len }, rename(n.name())));
                }
            }
        }
    }
    prog.tu.root.walk(&mut |n| {
        if n.kind != "DeclRefExpr" {
            return;
        }
        let Some(r) = &n.referenced_decl else { return };
        let Some(name) = r.name.as_deref() else { return };
        if !defined.contains(name) || !ids.contains(&r.id) {
            return;
        }
        if n.range.as_ref().is_some_and(|r| r.touches_macro()) {
            return;
        }
        if let Some(sp) = n.span() {
            if src.get(sp.start..sp.end) == Some(name) {
                edits.insert(sp.start, (sp, rename(name)));
            }
        }
    });

    // Converted arguments. A renamed reference inside a replaced argument is
    // superseded by the argument replacement.
    let arg_spans: Vec<Span> = plan.sites.iter().map(|s| s.arg_span).collect();
    for (_, (sp, text)) in edits {
        if !arg_spans.iter().any(|a| a.contains(&sp)) {
            rw.replace(sp, text);
        }
    }
    for (j, s) in plan.sites.iter().enumerate() {
        let expr = match &s.kind {
            SiteKind::Scalar(_) | SiteKind::Clamped { .. } => format!("df_s{k}_v{j}"),
            SiteKind::Bytes { .. } => format!("((void *)df_s{k}_b{j})"),
            SiteKind::Choice { .. } => format!("df_s{k}_c{j}"),
            SiteKind::LengthOf { buffer } => format!("((size_t)df_s{k}_n{buffer})"),
            SiteKind::InputFd => "df_input_fd()".to_owned(),
            SiteKind::Index { len, .. } => {
                let l = match len {
                    LenRef::Site(b) => format!("(uint64_t)df_s{k}_n{b}"),
                    LenRef::Expr(e) => format!("(uint64_t)({e})"),
                    LenRef::Const(c) => format!("(uint64_t){c}u"),
                };
                format!("({l} ? (uint64_t)df_s{k}_v{j} % {l} : 0)")
            }
        };
        rw.replace(s.arg_span, expr);
    }
    let text = rw.apply(src).map_err(|source| FusionError::Rewrite { seed: seed.id.clone(), source })?;
    Ok((text, includes, macros))
}

fn var_type(ty: &ScalarType) -> &'static str {
    match (ty.float, ty.signed) {
        (true, _) => "double",
        (false, true) => "int64_t",
        (false, false) => "uint64_t",
    }
}

fn take_expr(ty: &ScalarType) -> String {
    match (ty.float, ty.signed) {
        (true, _) => format!("df_take_float(in, {})", ty.width),
        (false, true) => format!("df_take_signed(in, {})", ty.width),
        (false, false) => format!("df_take(in, {})", ty.width),
    }
}

fn c_string(s: &str) -> String {
    let mut out = String::from("\"");
    for b in s.bytes() {
        match b {
            b'"' => out.push_str("\\\""),
            b'\\' => out.push_str("\\\\"),
            0x20..=0x7e => out.push(b as char),
            _ => out.push_str(&format!("\\{b:03o}")),
        }
    }
    out.push('"');
    out
}

fn fill_function(k: usize, plan: &ConversionPlan) -> (String, String) {
    let mut decls = String::new();
    let mut body = format!("static void df_fill_{k}(struct df_input *in) {{\n");
    for (j, s) in plan.sites.iter().enumerate() {
        match &s.kind {
            SiteKind::Scalar(ty) => {
                decls.push_str(&format!("static {} df_s{k}_v{j};\n", var_type(ty)));
                body.push_str(&format!("  df_s{k}_v{j} = {};\n", take_expr(ty)));
            }
            SiteKind::Clamped { ty, cap } => {
                decls.push_str(&format!("static uint64_t df_s{k}_v{j};\n"));
                body.push_str(&format!("  df_s{k}_v{j} = df_take(in, {}) % ((uint64_t){cap}u + 1);\n", ty.width));
            }
            SiteKind::Index { ty, .. } => {
                decls.push_str(&format!("static uint64_t df_s{k}_v{j};\n"));
                body.push_str(&format!("  df_s{k}_v{j} = df_take(in, {});\n", ty.width));
            }
            SiteKind::Bytes { cap } => {
                decls.push_str(&format!("static unsigned char df_s{k}_b{j}[{}];\nstatic size_t df_s{k}_n{j};\n", cap + 1));
                body.push_str(&format!("  df_s{k}_n{j} = df_take_bytes(in, df_s{k}_b{j}, {cap});\n"));
            }
            SiteKind::Choice { options } => {
                let list: Vec<String> = options.iter().map(|o| c_string(o)).collect();
                decls.push_str(&format!("static const char *df_s{k}_c{j};\n"));
                body.push_str(&format!(
                    "  {{\n    static const char *const opts[] = {{{}}};\n    df_s{k}_c{j} = opts[df_take(in, 1) % {}];\n  }}\n",
                    list.join(", "),
                    options.len()
                ));
            }
            SiteKind::LengthOf { .. } | SiteKind::InputFd => {}
        }
    }
    if plan.sites.is_empty() {
        body.push_str("  (void)in;\n");
    }
    body.push_str("}\n");
    (decls, body)
}

/// Fuses seeds (with their accepted plans) into one harness.
pub fn fuse(seeds: &[(&FusionSeed, &ConversionPlan)]) -> Result<FusedDriver, FusionError> {
    if seeds.is_empty() {
        return Err(FusionError::EmptySeedSet);
    }
    let n = seeds.len();
    let mut includes: Vec<String> = Vec::new();
    let mut parts = String::new();
    let mut corpus = Vec::new();
    let mut materialize = Vec::new();
    for (k, (seed, plan)) in seeds.iter().enumerate() {
        let (body, incs, macros) = seed_body(k, seed, plan)?;
        for i in incs {
            if !includes.contains(&i) {
                includes.push(i);
            }
        }
        let (decls, fill) = fill_function(k, plan);
        parts.push_str(&format!("/* seed {k}: {} */\n", seed.id));
        parts.push_str(&decls);
        parts.push_str(&body);
        if !body.ends_with('\n') {
            parts.push('\n');
        }
        for m in macros {
            parts.push_str(&format!("#undef {m}\n"));
        }
        parts.push_str(&fill);
        parts.push('\n');
        materialize.push(
            seed.prog.source.contains("input_file")
                || seed.prog.source.contains("output_file")
                || plan.sites.iter().any(|s| s.kind == SiteKind::InputFd),
        );

        let mut blob = selector_bytes(k, n);
        for (_, s) in plan.consuming() {
            blob.extend(harvest(s, site_cap(s)));
        }
        corpus.push(blob);
    }

    let mut src = String::from("/* Fused fuzz driver. */\n");
    for i in &includes {
        src.push_str(i);
        src.push('\n');
    }
    src.push('\n');
    src.push_str(PROVIDER);
    src.push('\n');
    src.push_str(&parts);
    src.push_str("int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size) {\n");
    src.push_str("  struct df_input in;\n  unsigned sel;\n  in.data = data;\n  in.size = size;\n");
    src.push_str(&format!("  sel = (unsigned)df_take(&in, {});\n", selector_width(n)));
    src.push_str(&format!("  switch (sel % {n}u) {{\n"));
    for (k, m) in materialize.iter().enumerate() {
        src.push_str(&format!("  case {k}:\n    df_fill_{k}(&in);\n"));
        if *m {
            src.push_str("    df_materialize(in.data, in.size);\n");
        }
        src.push_str(&format!("    df_seed_{k}(in.data, in.size);\n    break;\n"));
    }
    src.push_str("  default:\n    break;\n  }\n  df_release();\n  return 0;\n}\n");
    Ok(FusedDriver { source: src, dispatch: seeds.iter().map(|(s, _)| s.id.clone()).collect(), corpus })
}

fn site_cap(s: &ConversionSite) -> usize {
    match s.kind {
        SiteKind::Bytes { cap } => cap,
        _ => usize::MAX,
    }
}

/// Result of running one conversion variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrialOutcome {
    Clean,
    Report(Failure),
    BuildFailed(String),
}

/// Builds and runs a harness under the sanitizers.
pub trait TrialRunner: Sync {
    fn run(&self, id: &str, source: &str, inputs: &[Vec<u8>]) -> TrialOutcome;
}

/// Per-site verdicts of a trial pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialLog {
    pub site: usize,
    pub accepted: bool,
    pub detail: String,
}

/// Tries each consuming site alone with `trials` random values and keeps
/// the ones that never produce a report. Returns the accepted site indices.
pub fn trial_convert<R: Rng + ?Sized>(
    seed: &FusionSeed,
    plan: &ConversionPlan,
    runner: &dyn TrialRunner,
    trials: usize,
    rng: &mut R,
) -> (BTreeSet<usize>, Vec<TrialLog>) {
    let mut accepted = BTreeSet::new();
    let mut log = Vec::new();
    for (i, s) in plan.consuming() {
        let single = plan.restrict(&BTreeSet::from([i]));
        let pos = single.sites.iter().position(|x| x.call_site == s.call_site && x.arg == s.arg).expect("site kept");
        let inputs: Vec<Vec<u8>> = (0..trials.max(1))
            .map(|_| {
                let mut b = vec![0u8];
                b.extend(random_site_bytes(&single.sites[pos].kind, rng));
                b
            })
            .collect();
        let outcome = match fuse(&[(seed, &single)]) {
            Ok(d) => runner.run(&format!("trial-{}-{i}", seed.id), &d.source, &inputs),
            Err(e) => TrialOutcome::BuildFailed(e.to_string()),
        };
        let (ok, detail) = match outcome {
            TrialOutcome::Clean => (true, String::new()),
            TrialOutcome::Report(f) => {
                (false, f.report.lines().find(|l| l.contains("ERROR") || l.contains("runtime error")).unwrap_or("report").to_owned())
            }
            TrialOutcome::BuildFailed(d) => {
                log::warn!("conversion variant of {} site {i} failed to build", seed.id);
                (false, format!("build failed: {}", d.lines().next().unwrap_or("")))
            }
        };
        if ok {
            accepted.insert(i);
        }
        log.push(TrialLog { site: i, accepted: ok, detail });
    }
    (accepted, log)
}

/// Trial runner backed by the sanitizer pipeline's exec builds.
pub struct PipelineTrials<'a> {
    pub pipeline: &'a Pipeline,
    pub apis: BTreeSet<String>,
}

impl TrialRunner for PipelineTrials<'_> {
    fn run(&self, id: &str, source: &str, inputs: &[Vec<u8>]) -> TrialOutcome {
        match self.pipeline.check_variant(id, source, &self.apis, inputs) {
            Ok(o) => o,
            Err(e) => TrialOutcome::BuildFailed(e.to_string()),
        }
    }
}

impl Pipeline {
    /// Syntax check, file-sanitizer instrumentation, exec build and a run
    /// over `inputs`; no fuzzing and no coverage check.
    pub fn check_variant(
        &self,
        id: &str,
        source: &str,
        apis: &BTreeSet<String>,
        inputs: &[Vec<u8>],
    ) -> Result<TrialOutcome, PipelineError> {
        let dir = self.work_dir(id);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        let prog = match self.program_ast(id, source, apis)? {
            Ok(p) => p,
            Err(d) => return Ok(TrialOutcome::BuildFailed(d)),
        };
        let inst = match crate::fsan::instrument(&prog, &self.cfg.fsan, "src.c") {
            Ok(i) => i,
            Err(e) => return Ok(TrialOutcome::BuildFailed(e.to_string())),
        };
        let inst_path = dir.join("inst.c");
        std::fs::write(&inst_path, &inst.source)?;
        let exe = dir.join("bin");
        if let Err(d) = self.build_exec(&inst_path, &exe)? {
            return Ok(TrialOutcome::BuildFailed(d));
        }
        let out = self.execute(&exe, inputs, &dir)?;
        if !self.cfg.keep_binaries {
            let _ = std::fs::remove_file(&exe);
        }
        Ok(match out.failure {
            Some(f) => TrialOutcome::Report(f),
            None => TrialOutcome::Clean,
        })
    }
}

/// Plans, trials and fuses `seeds`. Returns the driver and per-seed logs.
pub fn fuse_with_trials<R: RngCore>(
    seeds: &[FusionSeed],
    ctx: &FusionContext,
    runner: Option<&dyn TrialRunner>,
    rng: &mut R,
) -> Result<(FusedDriver, Vec<(ConversionPlan, Vec<TrialLog>)>), FusionError> {
    let mut plans = Vec::new();
    for s in seeds {
        let plan = plan_conversions(s, ctx);
        let (plan, log) = match runner {
            Some(r) => {
                let (acc, log) = trial_convert(s, &plan, r, ctx.config.trials, rng);
                (plan.restrict(&acc), log)
            }
            None => (plan, Vec::new()),
        };
        plans.push((plan, log));
    }
    let pairs: Vec<(&FusionSeed, &ConversionPlan)> = seeds.iter().zip(plans.iter().map(|(p, _)| p)).collect();
    let driver = fuse(&pairs)?;
    Ok((driver, plans))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::testutil::program;
    use std::sync::Mutex;

    const LIB: &str = "typedef unsigned long size_t;\n\
        int put(const char *buf, size_t len);\nint cfg(int level, unsigned flags, double q);\n\
        int peek(const unsigned char *buf, size_t len, size_t idx);\nint mk(size_t n);\n\
        int logf(const char *fmt, ...);\nint load(const char *path);\nint rd(int fd);\n";

    fn seed(id: &str, body: &str) -> Option<FusionSeed> {
        let src = format!("{LIB}int LLVMFuzzerTestOneInput(const unsigned char *data, size_t size) {{\n{body}\nreturn 0; }}\n");
        let prog = program(&src, &["put", "cfg", "peek", "mk", "logf", "load", "rd"])?;
        Some(FusionSeed { id: id.into(), prog })
    }

    fn c(kind: ConstraintKind, api: &str, arg: usize, rel: Option<usize>) -> ((String, usize), Constraint) {
        ((api.into(), arg), Constraint { kind, api: api.into(), arg, related_arg: rel, support: 1 })
    }

    fn ctx(seeds: &[FusionSeed], cs: Vec<((String, usize), Constraint)>) -> FusionContext {
        let mut x = FusionContext::new(seeds, cs.into_iter().collect(), None, FusionConfig::default());
        x.variadic.insert("logf".into(), 1);
        x
    }

    #[test]
    fn scalar_widths() {
        assert_eq!(scalar_type("int"), ScalarType { width: 4, signed: true, float: false });
        assert_eq!(scalar_type("unsigned int"), ScalarType { width: 4, signed: false, float: false });
        assert_eq!(scalar_type("size_t"), ScalarType { width: 8, signed: false, float: false });
        assert_eq!(scalar_type("const unsigned char"), ScalarType { width: 1, signed: false, float: false });
        assert_eq!(scalar_type("long long"), ScalarType { width: 8, signed: true, float: false });
        assert_eq!(scalar_type("uint16_t"), ScalarType { width: 2, signed: false, float: false });
        assert_eq!(scalar_type("float"), ScalarType { width: 4, signed: true, float: true });
        assert_eq!(scalar_type("tc_status"), ScalarType { width: 4, signed: true, float: false });
    }

    #[test]
    fn plain_scalars_are_consumed() {
        let Some(s) = seed("a", "cfg(3, 0u, 0.5);") else { return };
        let plan = plan_conversions(&s, &ctx(std::slice::from_ref(&s), vec![]));
        let kinds: Vec<&SiteKind> = plan.sites.iter().map(|x| &x.kind).collect();
        assert_eq!(
            kinds,
            vec![
                &SiteKind::Scalar(ScalarType { width: 4, signed: true, float: false }),
                &SiteKind::Scalar(ScalarType { width: 4, signed: false, float: false }),
                &SiteKind::Scalar(ScalarType { width: 8, signed: true, float: true }),
            ]
        );
        assert!(plan.bindings.is_empty());
    }

    #[test]
    fn array_length_pair_is_joint() {
        let Some(s) = seed("a", "put(\"abc\", 3);") else { return };
        let x = ctx(std::slice::from_ref(&s), vec![c(ConstraintKind::ArrayLength, "put", 1, Some(0))]);
        let plan = plan_conversions(&s, &x);
        assert_eq!(plan.sites.len(), 2);
        assert_eq!(plan.sites[0].kind, SiteKind::Bytes { cap: 4096 });
        assert_eq!(plan.sites[1].kind, SiteKind::LengthOf { buffer: 0 });
        // The length reads no fuzzer bytes.
        assert_eq!(plan.consuming().count(), 1);
        let d = fuse(&[(&s, &plan)]).unwrap();
        assert_eq!(d.corpus[0], vec![0, 3, 0, b'a', b'b', b'c']);
        assert!(d.source.contains("put(((void *)df_s0_b0), ((size_t)df_s0_n0))"), "{}", d.source);
    }

    #[test]
    fn pinned_kinds_add_no_sites() {
        let Some(s) = seed("a", "logf(\"%d\", 4); load(\"input_file\"); put(\"xy\", 2);") else { return };
        let x = ctx(
            std::slice::from_ref(&s),
            vec![
                c(ConstraintKind::FormatString, "logf", 0, None),
                c(ConstraintKind::FileName, "load", 0, None),
                c(ConstraintKind::ArrayLength, "put", 1, Some(0)),
            ],
        );
        let plan = plan_conversions(&s, &x);
        // The variadic tail `4` stays, the format and path are pinned.
        assert!(plan.sites.iter().all(|s| s.api == "put"));
        let pinned: Vec<_> = plan.bindings.iter().filter(|b| b.effect == BindingEffect::Pinned).map(|b| b.kind).collect();
        assert_eq!(pinned, vec![ConstraintKind::FormatString, ConstraintKind::FileName]);
    }

    #[test]
    fn index_alloc_and_descriptor_derivations() {
        let Some(s) = seed("a", "peek(data, size, 2); mk(64); rd(0);") else { return };
        let x = ctx(
            std::slice::from_ref(&s),
            vec![
                c(ConstraintKind::ArrayLength, "peek", 1, Some(0)),
                c(ConstraintKind::ArrayIndex, "peek", 2, Some(0)),
                c(ConstraintKind::AllocSize, "mk", 0, None),
                c(ConstraintKind::FileDesc, "rd", 0, None),
            ],
        );
        let plan = plan_conversions(&s, &x);
        let kinds: Vec<&SiteKind> = plan.sites.iter().map(|x| &x.kind).collect();
        let u8w = ScalarType { width: 8, signed: false, float: false };
        assert_eq!(
            kinds,
            vec![
                &SiteKind::Index { ty: u8w, len: LenRef::Expr("size".into()) },
                &SiteKind::Clamped { ty: u8w, cap: 1 << 16 },
                &SiteKind::InputFd,
            ]
        );
        let d = fuse(&[(&s, &plan)]).unwrap();
        assert!(d.source.contains("peek(data, size, ((uint64_t)(size) ? (uint64_t)df_s0_v0 % (uint64_t)(size) : 0))"));
        assert!(d.source.contains("rd(df_input_fd())"));
        assert!(d.source.contains("df_materialize(in.data, in.size);"));
        assert_eq!(d.corpus[0].len(), 1 + 8 + 8);
    }

    #[test]
    fn corpus_layout_and_selector() {
        let Some(a) = seed("a", "cfg(7, 1u, 0.0);") else { return };
        let Some(b) = seed("b", "put(\"q\", 1);") else { return };
        let Some(cc) = seed("c", "mk(5);") else { return };
        let seeds = vec![a, b, cc];
        let x = ctx(&seeds, vec![]);
        let plans: Vec<ConversionPlan> = seeds.iter().map(|s| plan_conversions(s, &x)).collect();
        let pairs: Vec<_> = seeds.iter().zip(plans.iter()).collect();
        let d = fuse(&pairs).unwrap();
        assert_eq!(d.dispatch, vec!["a", "b", "c"]);
        assert_eq!(d.corpus[0][0], 0);
        assert_eq!(&d.corpus[0][1..5], &7i32.to_le_bytes());
        assert_eq!(&d.corpus[0][5..9], &1u32.to_le_bytes());
        assert_eq!(&d.corpus[0][9..], &0f64.to_le_bytes());
        // Without a constraint the length is a plain scalar.
        assert_eq!(d.corpus[1], [vec![1, 1, 0, b'q'], 1u64.to_le_bytes().to_vec()].concat());
        assert_eq!(d.corpus[2], [vec![2], 5u64.to_le_bytes().to_vec()].concat());
        assert!(d.source.contains("switch (sel % 3u)"));
        for k in 0..3 {
            assert!(d.source.contains(&format!("df_seed_{k}(in.data, in.size)")));
        }
        assert!(matches!(fuse(&[]), Err(FusionError::EmptySeedSet)));
    }

    #[test]
    fn two_byte_selector_beyond_256() {
        assert_eq!(selector_width(256), 1);
        assert_eq!(selector_width(257), 2);
        assert_eq!(selector_bytes(300, 400), vec![44, 1]);
    }

    #[test]
    fn helpers_and_globals_are_renamed() {
        let body = "return helper(size);";
        let src = format!(
            "{LIB}#define K 2\nstatic int counter = K;\nstatic int helper(size_t n) {{ counter++; return cfg((int)n, 1u, 0.0); }}\n\
             int LLVMFuzzerTestOneInput(const unsigned char *data, size_t size) {{\n{body}\n}}\n"
        );
        let Some(prog) = program(&src, &["cfg"]) else { return };
        let s = FusionSeed { id: "h".into(), prog };
        let plan = plan_conversions(&s, &ctx(std::slice::from_ref(&s), vec![]));
        let d = fuse(&[(&s, &plan), (&s, &plan)]).unwrap();
        for k in 0..2 {
            assert!(d.source.contains(&format!("static int counter_s{k} = K;")));
            assert!(d.source.contains(&format!("static int helper_s{k}(size_t n) {{ counter_s{k}++;")));
            assert!(d.source.contains(&format!("return helper_s{k}(size);")));
        }
        assert_eq!(d.source.matches("#undef K").count(), 2);
        // Library declarations are not renamed.
        assert!(d.source.contains("int cfg(int level"));
    }

    struct Scripted {
        fail_on: Vec<String>,
        seen: Mutex<Vec<String>>,
    }

    impl TrialRunner for Scripted {
        fn run(&self, _id: &str, source: &str, inputs: &[Vec<u8>]) -> TrialOutcome {
            self.seen.lock().unwrap().push(source.to_owned());
            assert!(inputs.iter().all(|i| i[0] == 0));
            if self.fail_on.iter().any(|f| source.contains(f.as_str())) {
                TrialOutcome::Report(Failure { report: "ERROR: AddressSanitizer: boom".into(), input: None })
            } else {
                TrialOutcome::Clean
            }
        }
    }

    #[test]
    fn trials_cancel_crashing_sites() {
        use rand::SeedableRng;
        let Some(s) = seed("a", "cfg(3, 0u, 0.5);") else { return };
        let plan = plan_conversions(&s, &ctx(std::slice::from_ref(&s), vec![]));
        let runner = Scripted { fail_on: vec!["cfg(3, df_s0_v0, 0.5)".into()], seen: Mutex::new(Vec::new()) };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (acc, log) = trial_convert(&s, &plan, &runner, 8, &mut rng);
        assert_eq!(acc, BTreeSet::from([0, 2]));
        assert_eq!(log.len(), 3);
        assert!(!log[1].accepted && log[1].detail.contains("AddressSanitizer"));
        // Each variant converts exactly one site.
        for src in runner.seen.lock().unwrap().iter() {
            assert_eq!(src.matches("df_s0_v0").count(), 3, "{src}");
        }
        let kept = plan.restrict(&acc);
        assert_eq!(kept.sites.len(), 2);
        assert_eq!(kept.sites[1].arg, 2);
    }

    #[test]
    fn restrict_falls_back_to_literal_length() {
        let Some(s) = seed("a", "const unsigned char b[] = \"abcd\"; peek(b, 4, 1);") else { return };
        let x = ctx(
            std::slice::from_ref(&s),
            vec![c(ConstraintKind::ArrayLength, "peek", 1, Some(0)), c(ConstraintKind::ArrayIndex, "peek", 2, Some(0))],
        );
        let plan = plan_conversions(&s, &x);
        assert_eq!(plan.sites.len(), 3);
        assert_eq!(plan.sites[2].kind, SiteKind::Index { ty: scalar_type("size_t"), len: LenRef::Site(0) });
        let only_index = plan.restrict(&BTreeSet::from([2]));
        assert_eq!(only_index.sites.len(), 1);
        assert_eq!(only_index.sites[0].kind, SiteKind::Index { ty: scalar_type("size_t"), len: LenRef::Const(4) });
    }
}
