//! C ABI over the driverforge core.
//!
//! Every fallible call returns a [`DfStatus`]; on failure the message is
//! kept per thread and can be fetched with [`df_last_error_message`].
//! Strings handed out by this library must be released with
//! [`df_string_free`], handles with their own `_free` function.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use driverforge::analysis::{critical_calls, critical_path, data_flow, density, AnalysisError, Cfg, ProgramAst};
use driverforge::ast::TranslationUnit;
use driverforge::constraints::{infer_static, resolve, InferenceConfig};
use driverforge::gateway::{default_models, estimate_tokens, route_model};
use driverforge::library::{ingest_ast, LibraryModel};
use driverforge::scheduler;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    AnalysisError = 4,
    NotFound = 5,
    Panic = 6,
}

/// A library model built from header and implementation AST dumps.
pub struct DfLibrary {
    model: LibraryModel,
}

/// One harness program parsed against a library.
pub struct DfProgram {
    prog: ProgramAst,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<String>> = const { RefCell::new(None) };
}

struct Fail(DfStatus, String);

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DfStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(msg);
            DfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(DfStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(DfStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail(DfStatus::NullArgument, format!("{what} is null")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(DfStatus::NullArgument, format!("{what} is null")))
}

fn to_c(s: String) -> *mut c_char {
    // Interior NULs cannot come out of serde_json or the AST names.
    CString::new(s).map(CString::into_raw).unwrap_or(std::ptr::null_mut())
}

fn parse_tu(text: &str, what: &str) -> Result<TranslationUnit, Fail> {
    TranslationUnit::from_json(text).map_err(|e| Fail(DfStatus::ParseError, format!("{what}: {e}")))
}

fn json<T: serde::Serialize + ?Sized>(v: &T) -> Result<String, Fail> {
    serde_json::to_string(v).map_err(|e| Fail(DfStatus::ParseError, e.to_string()))
}

/// Message of the last failed call on this thread, or null. Free with
/// [`df_string_free`].
#[no_mangle]
pub extern "C" fn df_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().clone()).map(to_c).unwrap_or(std::ptr::null_mut())
}

/// # Safety
/// `s` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn df_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Scheduling energy of an API from its coverage and usage counts.
#[no_mangle]
pub extern "C" fn df_energy(coverage: f64, seed_count: u64, prompt_count: u64, exponent: f64) -> f64 {
    scheduler::energy(coverage, seed_count, prompt_count, exponent)
}

#[no_mangle]
pub extern "C" fn df_quality(density: u64, unique_branches: u64) -> u64 {
    scheduler::quality(density, unique_branches)
}

/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn df_estimate_tokens(text: *const c_char, out: *mut usize) -> DfStatus {
    guard(|| {
        let t = str_arg(text, "text")?;
        *out_arg(out, "out")? = estimate_tokens(t);
        Ok(())
    })
}

/// Picks the cheapest default model whose window fits `tokens` and writes
/// the price of `prompt_tokens` + `completion_tokens` in picodollars.
/// `model_id` receives the model name; free it with [`df_string_free`].
///
/// # Safety
/// Out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn df_route_and_price(
    tokens: usize,
    prompt_tokens: u64,
    completion_tokens: u64,
    model_id: *mut *mut c_char,
    picodollars: *mut u64,
) -> DfStatus {
    guard(|| {
        let id = out_arg(model_id, "model_id")?;
        let price = out_arg(picodollars, "picodollars")?;
        let models = default_models();
        let m = route_model(&models, tokens).map_err(|e| Fail(DfStatus::NotFound, e.to_string()))?;
        let cost = m.cost(prompt_tokens, completion_tokens).0;
        *price = u64::try_from(cost).map_err(|_| Fail(DfStatus::AnalysisError, "price overflows u64".into()))?;
        *id = to_c(m.id.clone());
        Ok(())
    })
}

/// Builds a library model from a header AST dump and an optional
/// implementation dump (for the call graph).
///
/// # Safety
/// `headers_ast` must be a NUL-terminated string, `impl_ast` one or null;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn df_library_from_ast(headers_ast: *const c_char, impl_ast: *const c_char, out: *mut *mut DfLibrary) -> DfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let tu = parse_tu(str_arg(headers_ast, "headers_ast")?, "headers_ast")?;
        let mut model = ingest_ast(&tu, &[]).map_err(|e| Fail(DfStatus::AnalysisError, e.to_string()))?;
        if !impl_ast.is_null() {
            model.add_call_graph(&parse_tu(str_arg(impl_ast, "impl_ast")?, "impl_ast")?);
        }
        *out = Box::into_raw(Box::new(DfLibrary { model }));
        Ok(())
    })
}

/// # Safety
/// `lib` must come from [`df_library_from_ast`], or be null.
#[no_mangle]
pub unsafe extern "C" fn df_library_free(lib: *mut DfLibrary) {
    if !lib.is_null() {
        drop(Box::from_raw(lib));
    }
}

/// # Safety
/// `lib` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn df_library_api_count(lib: *const DfLibrary) -> usize {
    lib.as_ref().map_or(0, |l| l.model.apis.len())
}

/// JSON array of API names, sorted.
///
/// # Safety
/// `lib` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn df_library_api_names_json(lib: *const DfLibrary, out: *mut *mut c_char) -> DfStatus {
    guard(|| {
        let l = handle(lib, "lib")?;
        let out = out_arg(out, "out")?;
        *out = to_c(json(&l.model.api_names())?);
        Ok(())
    })
}

/// Sets per-function branch totals from a JSON object of name to count.
///
/// # Safety
/// `lib` must be a live handle and `totals_json` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn df_library_set_branch_totals(lib: *mut DfLibrary, totals_json: *const c_char) -> DfStatus {
    guard(|| {
        let l = lib.as_mut().ok_or_else(|| Fail(DfStatus::NullArgument, "lib is null".into()))?;
        let totals: BTreeMap<String, u64> =
            serde_json::from_str(str_arg(totals_json, "totals_json")?).map_err(|e| Fail(DfStatus::ParseError, e.to_string()))?;
        l.model.set_branch_totals(totals);
        Ok(())
    })
}

/// Parses a harness program from its AST dump; API calls are resolved
/// against `lib`.
///
/// # Safety
/// `lib` must be a live handle, the strings NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn df_program_from_ast(
    lib: *const DfLibrary,
    ast: *const c_char,
    source: *const c_char,
    out: *mut *mut DfProgram,
) -> DfStatus {
    guard(|| {
        let l = handle(lib, "lib")?;
        let out = out_arg(out, "out")?;
        let tu = parse_tu(str_arg(ast, "ast")?, "ast")?;
        let prog = ProgramAst::new(tu, str_arg(source, "source")?, l.model.api_names())
            .map_err(|e| Fail(DfStatus::AnalysisError, e.to_string()))?;
        *out = Box::into_raw(Box::new(DfProgram { prog }));
        Ok(())
    })
}

/// # Safety
/// `prog` must come from [`df_program_from_ast`], or be null.
#[no_mangle]
pub unsafe extern "C" fn df_program_free(prog: *mut DfProgram) {
    if !prog.is_null() {
        drop(Box::from_raw(prog));
    }
}

/// Size of the largest group of API calls linked by data flow.
///
/// # Safety
/// `prog` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn df_program_density(prog: *const DfProgram, out: *mut u64) -> DfStatus {
    guard(|| {
        let p = &handle(prog, "prog")?.prog;
        let out = out_arg(out, "out")?;
        let cfg = Cfg::build(p);
        *out = density(p, &data_flow(p, &cfg)) as u64;
        Ok(())
    })
}

/// JSON object `{"path": [block ids], "calls": [api names]}` for the
/// critical path.
///
/// # Safety
/// `prog` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn df_program_critical_json(prog: *const DfProgram, out: *mut *mut c_char) -> DfStatus {
    guard(|| {
        let p = &handle(prog, "prog")?.prog;
        let out = out_arg(out, "out")?;
        let cfg = Cfg::build(p);
        let err = |e: AnalysisError| Fail(DfStatus::AnalysisError, e.to_string());
        let path = critical_path(&cfg).map_err(err)?;
        let calls = critical_calls(p, &cfg, &data_flow(p, &cfg)).map_err(err)?;
        *out = to_c(json(&serde_json::json!({ "path": path, "calls": calls }))?);
        Ok(())
    })
}

/// Statically inferred argument constraints over `count` programs, as a
/// JSON array with one entry per (api, argument).
///
/// # Safety
/// `progs` must point to `count` live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn df_infer_constraints_json(progs: *const *const DfProgram, count: usize, out: *mut *mut c_char) -> DfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if progs.is_null() && count > 0 {
            return Err(Fail(DfStatus::NullArgument, "progs is null".into()));
        }
        let handles = if count == 0 { &[][..] } else { std::slice::from_raw_parts(progs, count) };
        let mut owned = Vec::with_capacity(count);
        for (i, &h) in handles.iter().enumerate() {
            owned.push(handle(h, &format!("progs[{i}]"))?.prog.clone());
        }
        let resolved = resolve(&infer_static(&owned, &InferenceConfig::default()));
        let list: Vec<_> = resolved.into_values().collect();
        *out = to_c(json(&list)?);
        Ok(())
    })
}
