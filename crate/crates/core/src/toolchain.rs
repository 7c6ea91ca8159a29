//! Locating and invoking the C toolchain.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crate::ast::{prune_dump, rewrite_files, AstError};

#[derive(Debug, thiserror::Error)]
pub enum ToolchainError {
    #[error("toolchain component `{0}` not found")]
    Missing(String),
    #[error("failed to run {cmd}: {source}")]
    Spawn {
        cmd: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ast(#[from] AstError),
}

#[derive(Debug, Clone)]
pub struct Toolchain {
    pub cc: PathBuf,
    pub nm: PathBuf,
    /// Used as the sanitizer symbolizer when no llvm-symbolizer exists.
    pub addr2line: Option<PathBuf>,
    pub llvm_symbolizer: Option<PathBuf>,
}

/// Result of a syntax-only compile that also dumps the AST.
#[derive(Debug, Clone)]
pub struct FrontendOutput {
    pub ok: bool,
    pub ast_json: String,
    pub diagnostics: String,
}

impl Toolchain {
    /// `DRIVERFORGE_CC` overrides the compiler; otherwise `clang` from PATH.
    pub fn detect() -> Result<Self, ToolchainError> {
        let cc = match std::env::var_os("DRIVERFORGE_CC") {
            Some(p) => PathBuf::from(p),
            None => which::which("clang").map_err(|_| ToolchainError::Missing("clang".into()))?,
        };
        if !cc.exists() && which::which(&cc).is_err() {
            return Err(ToolchainError::Missing(cc.display().to_string()));
        }
        let nm = which::which("llvm-nm").or_else(|_| which::which("nm")).map_err(|_| ToolchainError::Missing("nm".into()))?;
        Ok(Toolchain { cc, nm, addr2line: which::which("addr2line").ok(), llvm_symbolizer: which::which("llvm-symbolizer").ok() })
    }

    pub fn command(&self) -> Command {
        Command::new(&self.cc)
    }

    pub fn output(&self, mut cmd: Command) -> Result<Output, ToolchainError> {
        cmd.output().map_err(|source| ToolchainError::Spawn { cmd: format!("{cmd:?}"), source })
    }

    /// Compiles `src` without linking and dumps its AST as JSON.
    pub fn frontend(&self, src: &Path, cflags: &[String]) -> Result<FrontendOutput, ToolchainError> {
        let mut cmd = self.command();
        cmd.args(["-fsyntax-only", "-Xclang", "-ast-dump=json", "-fno-color-diagnostics"]).args(cflags).arg(src);
        let out = self.output(cmd)?;
        Ok(FrontendOutput {
            ok: out.status.success(),
            ast_json: String::from_utf8_lossy(&out.stdout).into_owned(),
            diagnostics: String::from_utf8_lossy(&out.stderr).into_owned(),
        })
    }

    /// Environment for running sanitizer-instrumented binaries.
    pub fn sanitizer_env(&self) -> Vec<(String, String)> {
        let sym = match (&self.llvm_symbolizer, &self.addr2line) {
            (Some(p), _) | (None, Some(p)) => format!(":external_symbolizer_path={}", p.display()),
            _ => String::new(),
        };
        vec![
            ("ASAN_OPTIONS".into(), format!("detect_leaks=1:abort_on_error=0:allocator_may_return_null=1:handle_abort=1{sym}")),
            ("UBSAN_OPTIONS".into(), format!("print_stacktrace=1:halt_on_error=1{sym}")),
        ]
    }
}

/// Dumps `src` and keeps only declarations from `keep` files (all of `src`'s
/// own when `keep` is empty). With `strip_prefix`, file paths are made
/// relative to it.
pub fn dump_pruned(
    tc: &Toolchain,
    src: &Path,
    cflags: &[String],
    keep: &[PathBuf],
    strip_prefix: Option<&Path>,
) -> Result<serde_json::Value, DumpError> {
    let out = tc.frontend(src, cflags)?;
    if !out.ok {
        return Err(DumpError::Compile(out.diagnostics));
    }
    let canon = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let keep: Vec<PathBuf> = if keep.is_empty() { vec![canon(src)] } else { keep.iter().map(|p| canon(p)).collect() };
    let mut v = prune_dump(&out.ast_json, |f| keep.contains(&canon(Path::new(f)))).map_err(ToolchainError::from)?;
    if let Some(prefix) = strip_prefix {
        let prefix = canon(prefix);
        rewrite_files(&mut v, &|f| {
            let p = canon(Path::new(f));
            p.strip_prefix(&prefix).map(|r| r.display().to_string()).unwrap_or_else(|_| f.to_owned())
        });
    }
    Ok(v)
}

#[derive(Debug, thiserror::Error)]
pub enum DumpError {
    #[error(transparent)]
    Toolchain(#[from] ToolchainError),
    #[error("compilation failed:\n{0}")]
    Compile(String),
}
