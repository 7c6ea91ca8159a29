//! Prompt rendering from a text template with `{{name}}` placeholders.

use crate::analysis::ENTRY;
use crate::gateway::estimate_tokens;
use crate::library::{ApiFunction, TypeDef};
use crate::scheduler::ApiCombination;

pub const DEFAULT_TEMPLATE: &str = include_str!("../assets/prompt_template.txt");
pub const DEFAULT_COT: &str = "Think step by step about how these APIs interact before writing code.";
pub const INPUT_FILE: &str = "input_file";
pub const OUTPUT_FILE: &str = "output_file";

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("prompt needs {tokens} tokens without padding, limit is {limit}")]
    OversizedContext { tokens: usize, limit: usize },
    #[error("invalid prompt spec: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct PromptSpec {
    pub combination: ApiCombination,
    /// Signatures of the combination's APIs, in combination order.
    pub signatures: Vec<ApiFunction>,
    /// Extra signatures shown for context; dropped from the end first when
    /// the prompt is too long.
    pub padding: Vec<ApiFunction>,
    pub context_types: Vec<TypeDef>,
    /// Header names as they appear in `#include <...>`.
    pub headers: Vec<String>,
    pub library_notes: Option<String>,
    pub entry_symbol: String,
    pub cot: String,
}

impl PromptSpec {
    pub fn new(combination: ApiCombination, signatures: Vec<ApiFunction>) -> Self {
        PromptSpec {
            combination,
            signatures,
            padding: Vec::new(),
            context_types: Vec::new(),
            headers: Vec::new(),
            library_notes: None,
            entry_symbol: ENTRY.to_owned(),
            cot: DEFAULT_COT.to_owned(),
        }
    }

    fn validate(&self) -> Result<(), PromptError> {
        for api in self.combination.apis() {
            if !self.signatures.iter().any(|s| &s.name == api) {
                return Err(PromptError::Invalid(format!("no signature for `{api}`")));
            }
        }
        Ok(())
    }
}

/// Token limits applied while rendering.
#[derive(Debug, Clone, Copy)]
pub struct PromptLimits {
    /// Padding is trimmed until the prompt fits this many tokens.
    pub padding_budget: usize,
    /// Largest prompt any backend accepts.
    pub hard_limit: usize,
}

impl Default for PromptLimits {
    fn default() -> Self {
        PromptLimits { padding_budget: 3072, hard_limit: 16384 }
    }
}

fn render(template: &str, spec: &PromptSpec, padding: usize) -> String {
    let mut sigs: Vec<String> = spec.signatures.iter().map(ApiFunction::signature).collect();
    for p in spec.padding.iter().filter(|p| !spec.combination.contains(&p.name)).take(padding) {
        sigs.push(p.signature());
    }
    let headers: Vec<String> = spec.headers.iter().map(|h| format!("#include <{h}>")).collect();
    let types: Vec<&str> = spec.context_types.iter().map(|t| t.text.as_str()).collect();
    let notes = spec.library_notes.as_deref().unwrap_or("");
    let or_none = |s: String| if s.is_empty() { "(none)".to_owned() } else { s };
    template
        .replace("{{entry_symbol}}", &spec.entry_symbol)
        .replace("{{combination}}", &spec.combination.apis().join(", "))
        .replace("{{cot}}", &spec.cot)
        .replace("{{headers}}", &or_none(headers.join("\n")))
        .replace("{{types}}", &or_none(types.join("\n\n")))
        .replace("{{signatures}}", &sigs.join("\n"))
        .replace("{{input_file}}", INPUT_FILE)
        .replace("{{output_file}}", OUTPUT_FILE)
        .replace("{{notes}}", notes)
}

/// Renders the prompt with as much padding as fits the padding budget.
pub fn build_prompt(template: &str, spec: &PromptSpec, limits: PromptLimits) -> Result<String, PromptError> {
    spec.validate()?;
    let max_pad = spec.padding.len();
    let bare = render(template, spec, 0);
    let bare_tokens = estimate_tokens(&bare);
    if bare_tokens > limits.hard_limit {
        return Err(PromptError::OversizedContext { tokens: bare_tokens, limit: limits.hard_limit });
    }
    // Token count grows with the padding, so binary search the largest fit.
    let (mut lo, mut hi) = (0usize, max_pad);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if estimate_tokens(&render(template, spec, mid)) <= limits.padding_budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(if lo == 0 { bare } else { render(template, spec, lo) })
}
