//! Clang JSON AST dumps (`-Xclang -ast-dump=json`).
//!
//! Clang elides `file` and `line` on a location when they repeat the last
//! printed location, so a raw dump cannot be sliced without replaying the
//! whole document. [`materialize_locations`] makes every location
//! self-contained and [`prune_dump`] then drops top-level declarations from
//! files outside a keep-list. Pruned dumps stay valid clang JSON and are what
//! the rest of the crate consumes.

use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum AstError {
    #[error("malformed AST dump: {0}")]
    Malformed(String),
}

/// One source location. Macro locations carry both spelling and expansion.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "camelCase")]
pub struct Loc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub col: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tok_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spelling_loc: Option<Box<Loc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expansion_loc: Option<Box<Loc>>,
}

impl Loc {
    /// The location as the reader of the main file sees it.
    pub fn effective(&self) -> &Loc {
        match &self.expansion_loc {
            Some(e) => e.effective(),
            None => self,
        }
    }

    pub fn is_macro(&self) -> bool {
        self.expansion_loc.is_some()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct SrcRange {
    #[serde(default)]
    pub begin: Loc,
    #[serde(default)]
    pub end: Loc,
}

impl SrcRange {
    /// Byte span `[start, end)` in the expansion file, if both ends are known.
    pub fn span(&self) -> Option<Span> {
        let b = self.begin.effective();
        let e = self.end.effective();
        let start = b.offset?;
        let end = e.offset? + e.tok_len.unwrap_or(0);
        (end >= start).then_some(Span { start, end })
    }

    pub fn touches_macro(&self) -> bool {
        self.begin.is_macro() || self.end.is_macro()
    }
}

/// Half-open byte span in a source file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn contains(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

/// `type` is `{"qualType": ...}` in clang output; hand-written dumps may use a
/// bare string.
#[derive(Debug, Clone, Default, Serialize, PartialEq, Eq)]
pub struct QualType {
    #[serde(rename = "qualType")]
    pub qual_type: String,
    #[serde(rename = "desugaredQualType", skip_serializing_if = "Option::is_none")]
    pub desugared: Option<String>,
}

impl<'de> Deserialize<'de> for QualType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Bare(String),
            Full {
                #[serde(rename = "qualType")]
                qual_type: String,
                #[serde(rename = "desugaredQualType", default)]
                desugared: Option<String>,
            },
        }
        Ok(match Repr::deserialize(d)? {
            Repr::Bare(qual_type) => QualType { qual_type, desugared: None },
            Repr::Full { qual_type, desugared } => QualType { qual_type, desugared },
        })
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct DeclRef {
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub kind: String,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(rename = "type", default)]
    pub ty: Option<QualType>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Node {
    #[serde(default)]
    pub id: String,
    /// Empty for the `{}` placeholders clang emits for absent children
    /// (e.g. a `for` without an init clause).
    #[serde(default)]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loc: Option<Loc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<SrcRange>,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub ty: Option<QualType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opcode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cast_kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub referenced_decl: Option<DeclRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owned_tag_decl: Option<DeclRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decl: Option<DeclRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage_class: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub variadic: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_implicit: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag_used: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub complete_definition: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_postfix: Option<bool>,
    /// `sizeof`/`alignof` on `UnaryExprOrTypeTraitExpr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arg_type: Option<QualType>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub has_else: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decl_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_label_decl_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inner: Vec<Node>,
}

impl Node {
    pub fn name(&self) -> &str {
        self.name.as_deref().unwrap_or("")
    }

    pub fn qual_type(&self) -> &str {
        self.ty.as_ref().map(|t| t.qual_type.as_str()).unwrap_or("")
    }

    pub fn span(&self) -> Option<Span> {
        self.range.as_ref().and_then(SrcRange::span)
    }

    /// File of this node's effective location, once materialized.
    pub fn file(&self) -> Option<&str> {
        self.loc
            .as_ref()
            .map(Loc::effective)
            .and_then(|l| l.file.as_deref())
            .or_else(|| self.range.as_ref().and_then(|r| r.begin.effective().file.as_deref()))
    }

    /// Strips implicit casts and parentheses.
    pub fn ignore_implicit(&self) -> &Node {
        let mut n = self;
        while matches!(n.kind.as_str(), "ImplicitCastExpr" | "ParenExpr" | "ConstantExpr" | "FullExpr" | "ExprWithCleanups")
            && n.inner.len() == 1
        {
            n = &n.inner[0];
        }
        n
    }

    /// Name of the directly called function, for `CallExpr` nodes.
    pub fn callee_name(&self) -> Option<&str> {
        if self.kind != "CallExpr" {
            return None;
        }
        let callee = self.inner.first()?.ignore_implicit();
        if callee.kind == "DeclRefExpr" {
            let r = callee.referenced_decl.as_ref()?;
            if r.kind == "FunctionDecl" {
                return r.name.as_deref();
            }
        }
        None
    }

    /// Arguments of a `CallExpr` (everything after the callee).
    pub fn call_args(&self) -> &[Node] {
        if self.kind == "CallExpr" && !self.inner.is_empty() {
            &self.inner[1..]
        } else {
            &[]
        }
    }

    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Node)) {
        f(self);
        for c in &self.inner {
            c.walk(f);
        }
    }

    /// Body of a function definition.
    pub fn body(&self) -> Option<&Node> {
        if self.kind != "FunctionDecl" {
            return None;
        }
        self.inner.iter().find(|n| n.kind == "CompoundStmt")
    }

    pub fn params(&self) -> impl Iterator<Item = &Node> {
        self.inner.iter().filter(|n| n.kind == "ParmVarDecl")
    }

    /// Literal value as text, for the literal node kinds.
    pub fn literal_text(&self) -> Option<String> {
        match self.value.as_ref()? {
            Value::String(s) => Some(s.clone()),
            v => Some(v.to_string()),
        }
    }
}

/// A parsed translation unit.
#[derive(Debug, Clone)]
pub struct TranslationUnit {
    pub root: Node,
}

impl TranslationUnit {
    pub fn from_json(text: &str) -> Result<Self, AstError> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| AstError::Malformed(e.to_string()))?;
        materialize_locations(&mut value, None);
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self, AstError> {
        let root: Node = serde_json::from_value(value).map_err(|e| AstError::Malformed(e.to_string()))?;
        if root.kind != "TranslationUnitDecl" {
            return Err(AstError::Malformed(format!("root node is {}, expected TranslationUnitDecl", root.kind)));
        }
        Ok(TranslationUnit { root })
    }

    pub fn top_level(&self) -> &[Node] {
        &self.root.inner
    }

    /// Function definition (with a body) by name.
    pub fn function_def(&self, name: &str) -> Option<&Node> {
        self.root.inner.iter().find(|n| n.kind == "FunctionDecl" && n.name() == name && n.body().is_some())
    }

    /// All function definitions located in `file` (or in any file when `None`).
    pub fn function_defs<'a>(&'a self, file: Option<&'a str>) -> impl Iterator<Item = &'a Node> {
        self.root.inner.iter().filter(move |n| {
            n.kind == "FunctionDecl" && n.body().is_some() && file.is_none_or(|f| n.file().is_none_or(|nf| same_file(nf, f)))
        })
    }
}

pub(crate) fn same_file(a: &str, b: &str) -> bool {
    a == b || a.ends_with(&format!("/{b}")) || b.ends_with(&format!("/{a}"))
}

/// Replays clang's elision of repeated `file`/`line` fields so that every
/// location object carries them explicitly. Document order matters: clang
/// emits `loc` before `range`, `begin` before `end`, spelling before
/// expansion, and children after their parent.
pub fn materialize_locations(value: &mut Value, initial_file: Option<&str>) {
    let mut state = LocState { file: initial_file.map(str::to_owned), line: None };
    walk_value(value, &mut state);
}

struct LocState {
    file: Option<String>,
    line: Option<u64>,
}

fn fix_bare_loc(obj: &mut serde_json::Map<String, Value>, st: &mut LocState) {
    if let Some(sp) = obj.get_mut("spellingLoc") {
        if let Some(o) = sp.as_object_mut() {
            fix_bare_loc(o, st);
        }
    }
    if let Some(ex) = obj.get_mut("expansionLoc") {
        if let Some(o) = ex.as_object_mut() {
            fix_bare_loc(o, st);
        }
    }
    if !obj.contains_key("offset") {
        return;
    }
    match obj.get("file").and_then(Value::as_str) {
        Some(f) => {
            if st.file.as_deref() != Some(f) {
                st.file = Some(f.to_owned());
            }
        }
        None => {
            if let Some(f) = &st.file {
                obj.insert("file".into(), Value::String(f.clone()));
            }
        }
    }
    match obj.get("line").and_then(Value::as_u64) {
        Some(l) => st.line = Some(l),
        None => {
            if let Some(l) = st.line {
                obj.insert("line".into(), Value::from(l));
            }
        }
    }
}

fn walk_value(value: &mut Value, st: &mut LocState) {
    let Some(obj) = value.as_object_mut() else {
        return;
    };
    if let Some(loc) = obj.get_mut("loc").and_then(Value::as_object_mut) {
        fix_bare_loc(loc, st);
    }
    if let Some(range) = obj.get_mut("range").and_then(Value::as_object_mut) {
        for key in ["begin", "end"] {
            if let Some(l) = range.get_mut(key).and_then(Value::as_object_mut) {
                fix_bare_loc(l, st);
            }
        }
    }
    if let Some(Value::Array(children)) = obj.get_mut("inner") {
        for c in children {
            walk_value(c, st);
        }
    }
}

fn value_file(node: &Value) -> Option<String> {
    let pick = |l: &Value| -> Option<String> {
        let l = l.get("expansionLoc").unwrap_or(l);
        l.get("file").and_then(Value::as_str).map(str::to_owned)
    };
    node.get("loc").and_then(pick).or_else(|| node.get("range").and_then(|r| r.get("begin")).and_then(pick))
}

/// Drops implicit and out-of-scope top-level declarations from a raw clang
/// dump. `keep` decides by file path. Returns the pruned dump as JSON.
pub fn prune_dump(raw: &str, keep: impl Fn(&str) -> bool) -> Result<Value, AstError> {
    let mut value: Value = serde_json::from_str(raw).map_err(|e| AstError::Malformed(e.to_string()))?;
    materialize_locations(&mut value, None);
    let inner = value
        .get_mut("inner")
        .and_then(Value::as_array_mut)
        .ok_or_else(|| AstError::Malformed("translation unit has no inner array".into()))?;
    inner.retain(|n| {
        if n.get("isImplicit").and_then(Value::as_bool).unwrap_or(false) {
            return false;
        }
        value_file(n).is_some_and(|f| keep(&f))
    });
    renumber_ids(&mut value);
    Ok(value)
}

const ID_KEYS: &[&str] = &["id", "previousDecl", "referencedMemberDecl", "typeAliasDeclId", "parentDeclContextId"];

/// Replaces clang's pointer-valued node ids with sequential ones in
/// first-seen order, so dumps of the same source are byte-identical.
pub fn renumber_ids(value: &mut Value) {
    fn walk(v: &mut Value, map: &mut HashMap<String, String>) {
        match v {
            Value::Object(obj) => {
                for (k, v) in obj.iter_mut() {
                    match v {
                        Value::String(s) if ID_KEYS.contains(&k.as_str()) && s.starts_with("0x") => {
                            let next = format!("0x{:x}", map.len() + 1);
                            *s = map.entry(s.clone()).or_insert(next).clone();
                        }
                        _ => walk(v, map),
                    }
                }
            }
            Value::Array(items) => items.iter_mut().for_each(|v| walk(v, map)),
            _ => {}
        }
    }
    walk(value, &mut HashMap::new());
}

/// Rewrites every `file` field in a dump, e.g. to make paths relative
/// before checking a dump in.
pub fn rewrite_files(value: &mut Value, f: &impl Fn(&str) -> String) {
    match value {
        Value::Object(obj) => {
            for (k, v) in obj.iter_mut() {
                if k == "file" {
                    if let Value::String(s) = v {
                        *s = f(s);
                    }
                } else {
                    rewrite_files(v, f);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|v| rewrite_files(v, f)),
        _ => {}
    }
}

/// Declarations indexed by clang node id, for resolving `ownedTagDecl` and
/// similar back-references.
pub fn index_by_id(root: &Node) -> HashMap<&str, &Node> {
    let mut map = HashMap::new();
    root.walk(&mut |n| {
        if !n.id.is_empty() {
            map.insert(n.id.as_str(), n);
        }
    });
    map
}

/// Line number (1-based) of a byte offset in `source`.
pub fn line_of(source: &str, offset: usize) -> usize {
    source.as_bytes()[..offset.min(source.len())].iter().filter(|&&b| b == b'\n').count() + 1
}

/// Decodes a clang `StringLiteral` value (`"\"a\\n\""`) to its contents.
pub fn decode_string_literal(raw: &str) -> String {
    let s = raw.trim();
    let s = s.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(s);
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('0') => out.push('\0'),
            Some('\\') => out.push('\\'),
            Some('"') => out.push('"'),
            Some('\'') => out.push('\''),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}
