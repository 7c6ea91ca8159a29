//! The target library's public API surface, custom types, and the call graph
//! and branch totals used to compute per-API coverage.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ast::{index_by_id, same_file, AstError, Node, TranslationUnit};

#[derive(Debug, thiserror::Error)]
pub enum LibraryError {
    #[error(transparent)]
    MalformedAst(#[from] AstError),
    #[error("no public functions declared in the configured headers")]
    EmptyApiSurface,
    #[error("type `{0}` is referenced but has no definition")]
    UnresolvedType(String),
    #[error("unknown API `{0}`")]
    UnknownApi(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Param {
    pub name: Option<String>,
    #[serde(rename = "type")]
    pub ty: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiFunction {
    pub name: String,
    pub return_type: String,
    pub params: Vec<Param>,
    pub source_header: PathBuf,
    /// Variadic functions may appear in prompts but fusion never converts
    /// their variadic tail.
    #[serde(default)]
    pub variadic: bool,
}

impl ApiFunction {
    /// C declaration text, e.g. `int tc_feed(tc_codec *c, const uint8_t *buf, size_t len);`
    pub fn signature(&self) -> String {
        let mut params: Vec<String> = self
            .params
            .iter()
            .map(|p| match &p.name {
                Some(n) => declarator(&p.ty, n),
                None => p.ty.clone(),
            })
            .collect();
        if self.variadic {
            params.push("...".into());
        }
        if params.is_empty() {
            params.push("void".into());
        }
        let ret = &self.return_type;
        let sep = if ret.ends_with('*') { "" } else { " " };
        format!("{ret}{sep}{}({});", self.name, params.join(", "))
    }

    /// Type names mentioned anywhere in the signature.
    pub fn referenced_types(&self) -> Vec<TypeRef> {
        let mut out = type_refs(&self.return_type);
        for p in &self.params {
            out.extend(type_refs(&p.ty));
        }
        out
    }
}

/// A custom type definition rendered back to C.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeDef {
    pub name: String,
    pub text: String,
    /// Custom types this definition mentions, in order of first mention.
    pub deps: Vec<TypeRef>,
}

/// A type name as written: a typedef name or a `struct`/`union`/`enum` tag.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TypeRef {
    Typedef(String),
    Tag(String),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LibraryModel {
    /// Declaration order.
    pub apis: Vec<ApiFunction>,
    pub types: BTreeMap<String, TypeDef>,
    /// Tag name -> key in `types` (a typedef may own the tag's definition).
    pub tags: BTreeMap<String, String>,
    pub headers: Vec<PathBuf>,
    /// Caller -> callees, library-internal functions only.
    pub call_graph: BTreeMap<String, BTreeSet<String>>,
    pub branch_totals: BTreeMap<String, u64>,
    /// Type names treated as builtin in addition to the C/POSIX defaults.
    #[serde(default)]
    pub extra_builtins: BTreeSet<String>,
}

const BUILTIN_TYPES: &[&str] = &[
    "void",
    "char",
    "short",
    "int",
    "long",
    "float",
    "double",
    "signed",
    "unsigned",
    "_Bool",
    "bool",
    "size_t",
    "ssize_t",
    "ptrdiff_t",
    "intptr_t",
    "uintptr_t",
    "int8_t",
    "int16_t",
    "int32_t",
    "int64_t",
    "uint8_t",
    "uint16_t",
    "uint32_t",
    "uint64_t",
    "off_t",
    "FILE",
    "va_list",
    "__va_list_tag",
    "wchar_t",
    "time_t",
    "mode_t",
    "pid_t",
    "intmax_t",
    "uintmax_t",
    "__builtin_va_list",
];

const TYPE_KEYWORDS: &[&str] = &[
    "const",
    "volatile",
    "restrict",
    "__restrict",
    "struct",
    "union",
    "enum",
    "signed",
    "unsigned",
    "short",
    "long",
    "int",
    "char",
    "float",
    "double",
    "void",
    "_Bool",
];

impl LibraryModel {
    pub fn api(&self, name: &str) -> Option<&ApiFunction> {
        self.apis.iter().find(|a| a.name == name)
    }

    pub fn is_api(&self, name: &str) -> bool {
        self.api(name).is_some()
    }

    pub fn api_names(&self) -> Vec<String> {
        self.apis.iter().map(|a| a.name.clone()).collect()
    }

    fn is_builtin(&self, name: &str) -> bool {
        BUILTIN_TYPES.contains(&name) || self.extra_builtins.contains(name)
    }

    fn resolve(&self, r: &TypeRef) -> Result<Option<&str>, LibraryError> {
        let (key, name) = match r {
            TypeRef::Typedef(n) => (self.types.get_key_value(n).map(|(k, _)| k.as_str()), n),
            TypeRef::Tag(n) => (self.tags.get(n).map(String::as_str), n),
        };
        match key {
            Some(k) => Ok(Some(k)),
            None if self.is_builtin(name) => Ok(None),
            None => Err(LibraryError::UnresolvedType(name.clone())),
        }
    }

    /// Custom types used by `gadget` signatures, transitively closed, each
    /// once, definitions before uses.
    pub fn types_for(&self, gadget: &[ApiFunction]) -> Result<Vec<TypeDef>, LibraryError> {
        let mut order = Vec::new();
        let mut state: HashMap<String, bool> = HashMap::new();
        for api in gadget {
            for r in api.referenced_types() {
                if let Some(k) = self.resolve(&r)? {
                    self.visit_type(k, &mut state, &mut order)?;
                }
            }
        }
        Ok(order.into_iter().map(|k| self.types[&k].clone()).collect())
    }

    fn visit_type(&self, key: &str, state: &mut HashMap<String, bool>, order: &mut Vec<String>) -> Result<(), LibraryError> {
        if state.contains_key(key) {
            // Either done or on the stack; pointer cycles are broken here.
            return Ok(());
        }
        state.insert(key.to_owned(), false);
        let def = &self.types[key];
        for dep in &def.deps {
            if let Some(k) = self.resolve(dep)? {
                if k != key {
                    self.visit_type(k, state, order)?;
                }
            }
        }
        state.insert(key.to_owned(), true);
        order.push(key.to_owned());
        Ok(())
    }

    /// Adds caller -> callee edges from a library implementation dump.
    pub fn add_call_graph(&mut self, tu: &TranslationUnit) {
        for f in tu.function_defs(None) {
            let caller = f.name().to_owned();
            let mut callees = BTreeSet::new();
            f.walk(&mut |n| {
                if let Some(c) = n.callee_name() {
                    callees.insert(c.to_owned());
                }
            });
            self.call_graph.entry(caller).or_default().extend(callees);
        }
    }

    pub fn set_branch_totals(&mut self, totals: BTreeMap<String, u64>) {
        for f in totals.keys() {
            self.call_graph.entry(f.clone()).or_default();
        }
        self.branch_totals = totals;
    }

    /// `api` and every library function transitively reachable from it.
    pub fn reachable_functions(&self, api: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![api.to_owned()];
        while let Some(f) = stack.pop() {
            if !seen.insert(f.clone()) {
                continue;
            }
            if let Some(cs) = self.call_graph.get(&f) {
                stack.extend(cs.iter().filter(|c| !seen.contains(*c)).cloned());
            }
        }
        seen
    }
}

/// Builds a model from a (pruned) dump of the library headers.
pub fn ingest_ast(tu: &TranslationUnit, headers: &[PathBuf]) -> Result<LibraryModel, LibraryError> {
    let in_headers = |n: &Node| {
        let Some(f) = n.file() else {
            return headers.is_empty();
        };
        headers.is_empty() || headers.iter().any(|h| same_file(f, &h.to_string_lossy()))
    };
    let by_id = index_by_id(&tu.root);
    let mut model = LibraryModel { headers: headers.to_vec(), ..Default::default() };
    let mut owned_tags: HashMap<String, String> = HashMap::new();

    for n in tu.top_level().iter().filter(|n| in_headers(n)) {
        match n.kind.as_str() {
            "FunctionDecl" => {
                let name = n.name();
                if name.is_empty() || name.starts_with('_') || n.storage_class.as_deref() == Some("static") || model.is_api(name) {
                    continue;
                }
                model.apis.push(ApiFunction {
                    name: name.to_owned(),
                    return_type: return_type(n.qual_type()),
                    params: n
                        .params()
                        .map(|p| Param { name: p.name.clone().filter(|s| !s.is_empty()), ty: p.qual_type().to_owned() })
                        .collect(),
                    source_header: n.file().map(PathBuf::from).unwrap_or_default(),
                    variadic: n.variadic,
                });
            }
            "TypedefDecl" => {
                let name = n.name().to_owned();
                let owned = n.inner.iter().find_map(|c| c.owned_tag_decl.as_ref()).and_then(|r| by_id.get(r.id.as_str()).copied());
                let def = match owned {
                    Some(tag) if tag.complete_definition => {
                        if !tag.name().is_empty() {
                            owned_tags.insert(tag.name().to_owned(), name.clone());
                        }
                        let body = render_tag_body(tag);
                        let tag_kw = tag_keyword(tag);
                        let tag_name = if tag.name().is_empty() { String::new() } else { format!(" {}", tag.name()) };
                        TypeDef { name: name.clone(), text: format!("typedef {tag_kw}{tag_name} {body} {name};"), deps: tag_deps(tag) }
                    }
                    _ => TypeDef {
                        name: name.clone(),
                        text: format!("typedef {};", declarator(n.qual_type(), &name)),
                        deps: type_refs(n.qual_type()),
                    },
                };
                model.types.insert(name, def);
            }
            "RecordDecl" | "EnumDecl" if n.complete_definition || n.kind == "EnumDecl" => {
                if n.name().is_empty() {
                    continue;
                }
                let key = n.name().to_owned();
                let text = format!("{} {} {};", tag_keyword(n), key, render_tag_body(n));
                model.tags.insert(key.clone(), key.clone());
                model.types.insert(key.clone(), TypeDef { name: key, text, deps: tag_deps(n) });
            }
            _ => {}
        }
    }
    // A typedef that owns a tag's definition replaces the standalone entry.
    for (tag, td) in owned_tags {
        if tag != td {
            model.types.remove(&tag);
        }
        model.tags.insert(tag, td);
    }
    // Forward-declared tags resolve to the typedef naming them.
    let fwd: Vec<(String, String)> = model
        .types
        .values()
        .filter_map(|d| {
            let text = d.text.strip_prefix("typedef ")?;
            let mut words = text.split_whitespace();
            let kw = words.next()?;
            let tag = words.next()?;
            (matches!(kw, "struct" | "union" | "enum") && !text.contains('{')).then(|| (tag.to_owned(), d.name.clone()))
        })
        .collect();
    for (tag, td) in fwd {
        model.tags.entry(tag).or_insert(td);
    }
    if model.apis.is_empty() {
        return Err(LibraryError::EmptyApiSurface);
    }
    Ok(model)
}

fn tag_keyword(n: &Node) -> &'static str {
    match (n.kind.as_str(), n.tag_used.as_deref()) {
        ("EnumDecl", _) => "enum",
        (_, Some("union")) => "union",
        _ => "struct",
    }
}

fn render_tag_body(n: &Node) -> String {
    if n.kind == "EnumDecl" {
        let items: Vec<String> = n
            .inner
            .iter()
            .filter(|c| c.kind == "EnumConstantDecl")
            .map(|c| {
                let mut v = None;
                c.walk(&mut |x| {
                    if v.is_none() && x.kind == "ConstantExpr" {
                        v = x.literal_text();
                    }
                });
                match v {
                    Some(v) => format!("  {} = {}", c.name(), v),
                    None => format!("  {}", c.name()),
                }
            })
            .collect();
        return format!("{{\n{}\n}}", items.join(",\n"));
    }
    let fields: Vec<String> =
        n.inner.iter().filter(|c| c.kind == "FieldDecl").map(|c| format!("  {};\n", declarator(c.qual_type(), c.name()))).collect();
    format!("{{\n{}}}", fields.concat())
}

fn tag_deps(n: &Node) -> Vec<TypeRef> {
    let mut out = Vec::new();
    for c in n.inner.iter().filter(|c| c.kind == "FieldDecl") {
        for r in type_refs(c.qual_type()) {
            if !out.contains(&r) {
                out.push(r);
            }
        }
    }
    out
}

fn return_type(fn_type: &str) -> String {
    // "int (cfg_t *, const char *)" or "int (*(int))(void)"; the simple form
    // covers C library headers.
    match fn_type.find('(') {
        Some(i) => fn_type[..i].trim().to_owned(),
        None => fn_type.trim().to_owned(),
    }
}

/// Places `name` inside a C type spelling: `char[8]` -> `char name[8]`,
/// `int (*)(int)` -> `int (*name)(int)`.
pub fn declarator(ty: &str, name: &str) -> String {
    if let Some(i) = ty.find("(*)") {
        return format!("{}(*{}){}", &ty[..i], name, &ty[i + 3..]);
    }
    if let Some(i) = ty.find('[') {
        return format!("{} {}{}", ty[..i].trim_end(), name, &ty[i..]);
    }
    if ty.ends_with('*') {
        format!("{ty}{name}")
    } else {
        format!("{ty} {name}")
    }
}

/// Identifier-level scan of a C type spelling for custom type names.
pub fn type_refs(ty: &str) -> Vec<TypeRef> {
    let mut out = Vec::new();
    let mut tag_next = false;
    let bytes = ty.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            let word = &ty[start..i];
            if matches!(word, "struct" | "union" | "enum") {
                tag_next = true;
                continue;
            }
            if TYPE_KEYWORDS.contains(&word) {
                continue;
            }
            let r = if tag_next { TypeRef::Tag(word.to_owned()) } else { TypeRef::Typedef(word.to_owned()) };
            tag_next = false;
            if !out.contains(&r) {
                out.push(r);
            }
        } else {
            i += 1;
        }
    }
    out
}

/// Picks the APIs shown in one prompt's library context.
pub fn select_gadget<R: Rng + ?Sized>(model: &LibraryModel, limit: usize, rng: &mut R) -> Vec<ApiFunction> {
    assert!(limit >= 1, "gadget limit must be at least 1");
    if model.apis.len() <= limit {
        return model.apis.clone();
    }
    let mut idx = rand::seq::index::sample(rng, model.apis.len(), limit).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| model.apis[i].clone()).collect()
}
