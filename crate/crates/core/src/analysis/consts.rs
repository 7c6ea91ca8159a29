//! API arguments fixed at compile time: literals, and locals initialized
//! from a literal that are never written again.

use serde::{Deserialize, Serialize};

use super::{strip_casts, var_decls, var_init, written_vars, ProgramAst};
use crate::ast::{decode_string_literal, Node, Span};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum LiteralValue {
    Int(i128),
    Float(f64),
    Str(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstKind {
    Scalar,
    ImmutableArray,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstArgSite {
    pub site: usize,
    pub api: String,
    pub arg_index: usize,
    pub value: LiteralValue,
    pub kind: ConstKind,
    /// Span of the argument expression at the call.
    pub arg_span: Span,
    /// Parameter type the argument converts to.
    pub arg_type: String,
    /// Name of the local the literal reaches the call through, if any.
    pub via_local: Option<String>,
}

/// Literal value of an expression, looking through casts and unary sign.
/// Casts to pointer types (e.g. `NULL`) are not literals.
pub fn literal_of(n: &Node) -> Option<(LiteralValue, ConstKind)> {
    let n = n.ignore_implicit();
    match n.kind.as_str() {
        "IntegerLiteral" => {
            let t = n.literal_text()?;
            Some((LiteralValue::Int(t.parse().ok()?), ConstKind::Scalar))
        }
        "CharacterLiteral" => {
            let v = n.value.as_ref()?.as_i64()?;
            Some((LiteralValue::Int(v as i128), ConstKind::Scalar))
        }
        "FloatingLiteral" => {
            let t = n.literal_text()?;
            Some((LiteralValue::Float(t.parse().ok()?), ConstKind::Scalar))
        }
        "StringLiteral" => Some((LiteralValue::Str(decode_string_literal(&n.literal_text()?)), ConstKind::ImmutableArray)),
        "UnaryOperator" => {
            let (v, k) = literal_of(n.inner.first()?)?;
            match (n.opcode.as_deref()?, v) {
                ("-", LiteralValue::Int(i)) => Some((LiteralValue::Int(-i), k)),
                ("-", LiteralValue::Float(f)) => Some((LiteralValue::Float(-f), k)),
                ("+", v @ (LiteralValue::Int(_) | LiteralValue::Float(_))) => Some((v, k)),
                _ => None,
            }
        }
        "CStyleCastExpr" if !n.qual_type().contains('*') => {
            let (v, k) = literal_of(n.inner.first()?)?;
            (k == ConstKind::Scalar).then_some((v, k))
        }
        _ => None,
    }
}

/// Every API argument that is a compile-time constant.
pub fn const_arg_sites(prog: &ProgramAst) -> Vec<ConstArgSite> {
    let mut out = Vec::new();
    let mut funcs: Vec<&Node> = vec![prog.entry_function()];
    funcs.extend(prog.helpers.iter().filter_map(|h| prog.helper_function(h)));
    for f in funcs {
        let decls = var_decls(f);
        let written = written_vars(f);
        f.walk(&mut |n| {
            let Some(site) = prog.site_of(n) else { return };
            let cs = &prog.call_sites[site];
            if !cs.is_api {
                return;
            }
            for (i, arg) in n.call_args().iter().enumerate() {
                let Some(arg_span) = arg.span() else { continue };
                let arg_type = arg.qual_type().to_owned();
                let pointer_arg = arg_type.contains('*') || arg_type.contains('[');
                let direct = literal_of(arg).map(|(v, k)| (v, k, None));
                let found = direct.or_else(|| {
                    let r = strip_casts(arg);
                    if r.kind != "DeclRefExpr" {
                        return None;
                    }
                    let id = r.referenced_decl.as_ref()?.id.as_str();
                    let decl = decls.get(id)?;
                    if written.contains(id) || decl.kind != "VarDecl" {
                        return None;
                    }
                    let (v, k) = literal_of(var_init(decl)?)?;
                    let array_var = decl.qual_type().contains('[');
                    // A writable array passed to a non-const parameter may
                    // be modified by the callee.
                    if array_var && !arg_type.contains("const") {
                        return None;
                    }
                    Some((v, k, Some(decl.name().to_owned())))
                });
                let Some((value, kind, via_local)) = found else { continue };
                if kind == ConstKind::Scalar && pointer_arg {
                    continue;
                }
                out.push(ConstArgSite { site, api: cs.callee.clone(), arg_index: i, value, kind, arg_span, arg_type, via_local });
            }
        });
    }
    out.sort_by_key(|s| (s.site, s.arg_index));
    out
}
