//! Program generator access: model routing by prompt length, a cost ledger
//! with an atomic budget reservation, retries, and response extraction.

mod http;
mod stub;

use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use http::{HttpBackend, HttpConfig};
pub use stub::{StubBackend, StubPool};

use crate::scheduler::ApiCombination;

/// Multiplier applied to the raw token estimate so it errs high.
pub const TOKEN_SAFETY_FACTOR_PERCENT: usize = 110;

/// Approximate token count: identifier-like runs cost one token per three
/// characters (rounded up), other visible characters one token each, and
/// the sum is scaled by the safety factor.
pub fn estimate_tokens(text: &str) -> usize {
    let mut raw = 0usize;
    let mut run = 0usize;
    for c in text.chars() {
        if c.is_alphanumeric() || c == '_' {
            run += 1;
            continue;
        }
        raw += run.div_ceil(3);
        run = 0;
        if !c.is_whitespace() {
            raw += 1;
        }
    }
    raw += run.div_ceil(3);
    (raw * TOKEN_SAFETY_FACTOR_PERCENT).div_ceil(100)
}

/// Currency in picodollars (1e-12 USD), so per-token prices stay exact.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Money(pub u128);

impl Money {
    pub fn from_dollars(d: f64) -> Money {
        assert!(d >= 0.0 && d.is_finite(), "money must be a non-negative amount");
        Money((d * 1e12).round() as u128)
    }

    pub fn dollars(self) -> f64 {
        self.0 as f64 / 1e12
    }

    /// Rounded to whole cents.
    pub fn cents(self) -> u128 {
        (self.0 + 5_000_000_000) / 10_000_000_000
    }
}

impl std::ops::Add for Money {
    type Output = Money;
    fn add(self, o: Money) -> Money {
        Money(self.0 + o.0)
    }
}

impl std::fmt::Display for Money {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "${:.6}", self.dollars())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    pub token_limit: usize,
    /// USD per 1000 prompt tokens.
    pub input_price: f64,
    /// USD per 1000 completion tokens.
    pub output_price: f64,
}

impl ModelSpec {
    pub fn cost(&self, prompt_tokens: u64, completion_tokens: u64) -> Money {
        let pin = Money::from_dollars(self.input_price).0;
        let pout = Money::from_dollars(self.output_price).0;
        Money((prompt_tokens as u128 * pin + completion_tokens as u128 * pout) / 1000)
    }
}

pub fn default_models() -> Vec<ModelSpec> {
    vec![
        ModelSpec { id: "gpt-3.5-turbo-0613".into(), token_limit: 4096, input_price: 0.0015, output_price: 0.002 },
        ModelSpec { id: "gpt-3.5-turbo-16k-0613".into(), token_limit: 16384, input_price: 0.003, output_price: 0.004 },
    ]
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("prompt of {tokens} tokens exceeds every model's limit")]
    PromptTooLong { tokens: usize },
    #[error("generator backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("query budget exhausted: spent {spent}, next call may cost {next}, budget {budget}")]
    BudgetExhausted { spent: Money, next: Money, budget: Money },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
}

/// Smallest-limit model that fits `token_count`.
pub fn route_model(models: &[ModelSpec], token_count: usize) -> Result<&ModelSpec, GatewayError> {
    let mut sorted: Vec<&ModelSpec> = models.iter().collect();
    sorted.sort_by_key(|m| m.token_limit);
    sorted.into_iter().find(|m| token_count <= m.token_limit).ok_or(GatewayError::PromptTooLong { tokens: token_count })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub n_samples: u32,
    pub temperature: f64,
    pub backend_hint: Option<String>,
    /// Combination the prompt was built from; the stub backend keys on it.
    pub combination: Option<ApiCombination>,
    /// Varies the stub's draw between otherwise identical requests.
    pub nonce: u64,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, n_samples: u32, temperature: f64) -> Self {
        GenerationRequest { prompt: prompt.into(), n_samples, temperature, backend_hint: None, combination: None, nonce: 0 }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.n_samples == 0 {
            return Err(GatewayError::InvalidRequest("n_samples must be at least 1".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest("temperature must lie in [0, 2]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendResponse {
    pub texts: Vec<String>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("transient backend error: {0}")]
    Transient(String),
    #[error("backend error: {0}")]
    Fatal(String),
}

pub trait Backend: Send + Sync {
    fn complete(&self, model: &ModelSpec, req: &GenerationRequest, max_tokens: u32) -> Result<BackendResponse, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub model: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost: Money,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub entries: Vec<LedgerEntry>,
    pub total: Money,
}

impl CostLedger {
    pub fn record(&mut self, model: &ModelSpec, prompt_tokens: u64, completion_tokens: u64) -> Money {
        let cost = model.cost(prompt_tokens, completion_tokens);
        self.entries.push(LedgerEntry { model: model.id.clone(), prompt_tokens, completion_tokens, cost });
        self.total = self.total + cost;
        cost
    }
}

#[derive(Debug, Default)]
struct LedgerState {
    ledger: CostLedger,
    reserved: Money,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub models: Vec<ModelSpec>,
    /// Query budget in USD; `None` is unlimited.
    pub budget: Option<f64>,
    /// Completion cap per sample, also used to size budget reservations.
    pub max_completion_tokens: u32,
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig { models: default_models(), budget: None, max_completion_tokens: 2048, retries: 3, backoff_ms: 500 }
    }
}

pub struct Gateway {
    config: GatewayConfig,
    backend: Box<dyn Backend>,
    state: Mutex<LedgerState>,
}

impl Gateway {
    pub fn new(config: GatewayConfig, backend: Box<dyn Backend>) -> Self {
        Self::with_ledger(config, backend, CostLedger::default())
    }

    /// Resumes with a previously persisted ledger.
    pub fn with_ledger(config: GatewayConfig, backend: Box<dyn Backend>, ledger: CostLedger) -> Self {
        Gateway { config, backend, state: Mutex::new(LedgerState { ledger, reserved: Money(0) }) }
    }

    pub fn ledger(&self) -> CostLedger {
        self.state.lock().expect("ledger lock").ledger.clone()
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    fn model(&self, req: &GenerationRequest, tokens: usize) -> Result<&ModelSpec, GatewayError> {
        match &req.backend_hint {
            Some(id) => self.config.models.iter().find(|m| &m.id == id).ok_or_else(|| GatewayError::UnknownModel(id.clone())),
            None => route_model(&self.config.models, tokens),
        }
    }

    /// Returns up to `n_samples` program texts, exact duplicates removed.
    pub fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, GatewayError> {
        req.validate()?;
        let tokens = estimate_tokens(&req.prompt);
        let model = self.model(req, tokens)?.clone();
        let worst = model.cost(tokens as u64, self.config.max_completion_tokens as u64 * req.n_samples as u64);
        {
            let mut st = self.state.lock().expect("ledger lock");
            if let Some(b) = self.config.budget {
                let budget = Money::from_dollars(b);
                if st.ledger.total + st.reserved + worst > budget {
                    return Err(GatewayError::BudgetExhausted { spent: st.ledger.total, next: worst, budget });
                }
            }
            st.reserved = st.reserved + worst;
        }
        let result = self.call_with_retries(&model, req);
        let mut st = self.state.lock().expect("ledger lock");
        st.reserved = Money(st.reserved.0 - worst.0);
        let resp = result?;
        let completion = resp.completion_tokens.min(self.config.max_completion_tokens as u64 * req.n_samples as u64);
        st.ledger.record(&model, resp.prompt_tokens, completion);
        drop(st);
        let mut out: Vec<String> = Vec::new();
        for t in resp.texts.iter().take(req.n_samples as usize) {
            let code = extract_code(t);
            if !out.contains(&code) {
                out.push(code);
            }
        }
        Ok(out)
    }

    fn call_with_retries(&self, model: &ModelSpec, req: &GenerationRequest) -> Result<BackendResponse, GatewayError> {
        let mut attempt = 0;
        loop {
            match self.backend.complete(model, req, self.config.max_completion_tokens) {
                Ok(r) => return Ok(r),
                Err(BackendError::Transient(msg)) if attempt < self.config.retries => {
                    log::warn!("generator attempt {} failed: {msg}", attempt + 1);
                    std::thread::sleep(Duration::from_millis(self.config.backoff_ms << attempt));
                    attempt += 1;
                }
                Err(e) => return Err(GatewayError::BackendUnavailable(e.to_string())),
            }
        }
    }
}

/// The longest fenced code block of a response, or the whole response.
pub fn extract_code(response: &str) -> String {
    let mut best: Option<String> = None;
    let mut current: Option<Vec<&str>> = None;
    for line in response.lines() {
        if line.trim_start().starts_with("```") {
            match current.take() {
                Some(block) => {
                    let text = block.join("\n");
                    if best.as_ref().is_none_or(|b| text.len() > b.len()) {
                        best = Some(text);
                    }
                }
                None => current = Some(Vec::new()),
            }
            continue;
        }
        if let Some(b) = current.as_mut() {
            b.push(line);
        }
    }
    match best {
        Some(b) => b + "\n",
        None => response.to_owned(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    #[test]
    fn token_estimates() {
        assert_eq!(estimate_tokens(""), 0);
        assert!(estimate_tokens("a a a a") >= 4);
        assert_eq!(estimate_tokens("abcdef"), 3); // 2 * 1.1 rounded up
    }

    proptest! {
        #[test]
        fn estimate_is_monotone_under_concatenation(a in "\\PC{0,80}", b in "\\PC{0,80}") {
            let ab = format!("{a}{b}");
            prop_assert!(estimate_tokens(&ab) >= estimate_tokens(&a).max(estimate_tokens(&b)));
        }
    }

    #[test]
    fn routing() {
        let m = default_models();
        assert_eq!(route_model(&m, 1000).unwrap().id, "gpt-3.5-turbo-0613");
        assert_eq!(route_model(&m, 4096).unwrap().id, "gpt-3.5-turbo-0613");
        assert_eq!(route_model(&m, 4097).unwrap().id, "gpt-3.5-turbo-16k-0613");
        assert!(matches!(route_model(&m, 20_000), Err(GatewayError::PromptTooLong { .. })));
    }

    #[test]
    fn ledger_arithmetic() {
        let m = &default_models()[0];
        let mut l = CostLedger::default();
        l.record(m, 1000, 500);
        l.record(m, 1000, 500);
        assert_eq!(l.total, Money::from_dollars(0.005));
        assert_eq!(l.total.cents(), 1);
        assert_eq!(l.entries.iter().map(|e| e.cost.0).sum::<u128>(), l.total.0);
    }

    #[test]
    fn extraction() {
        let r = "Here you go:\n```c\nint x;\n```\nand\n```\nint longer_one = 1;\n```\n";
        assert_eq!(extract_code(r), "int longer_one = 1;\n");
        assert_eq!(extract_code("int y;"), "int y;");
    }

    struct Flaky {
        fails: AtomicU32,
        calls: AtomicU32,
    }

    impl Backend for Flaky {
        fn complete(&self, _: &ModelSpec, req: &GenerationRequest, _: u32) -> Result<BackendResponse, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.fails.load(Ordering::SeqCst) > 0 {
                self.fails.fetch_sub(1, Ordering::SeqCst);
                return Err(BackendError::Transient("429".into()));
            }
            Ok(BackendResponse {
                texts: vec!["```c\nA\n```".into(), "```c\nA\n```".into(), "B".into()],
                prompt_tokens: estimate_tokens(&req.prompt) as u64,
                completion_tokens: 10,
            })
        }
    }

    fn gw(fails: u32, budget: Option<f64>) -> Gateway {
        let cfg = GatewayConfig { budget, backoff_ms: 0, max_completion_tokens: 100, ..Default::default() };
        Gateway::new(cfg, Box::new(Flaky { fails: AtomicU32::new(fails), calls: AtomicU32::new(0) }))
    }

    #[test]
    fn retries_then_dedup() {
        let g = gw(3, None);
        let out = g.generate(&GenerationRequest::new("p", 3, 0.9)).unwrap();
        assert_eq!(out, ["A\n", "B"]);
        assert_eq!(g.ledger().entries.len(), 1);
        assert!(matches!(gw(4, None).generate(&GenerationRequest::new("p", 1, 0.9)), Err(GatewayError::BackendUnavailable(_))));
    }

    #[test]
    fn budget_refuses_before_the_call() {
        // Worst case per call: 2 prompt tokens and 100 completion tokens.
        let worst = default_models()[0].cost(2, 100).dollars();
        let g = gw(0, Some(worst * 2.5));
        let req = GenerationRequest::new("p", 1, 0.9);
        let mut ok = 0;
        let err = loop {
            match g.generate(&req) {
                Ok(_) => ok += 1,
                Err(e) => break e,
            }
        };
        assert!(matches!(err, GatewayError::BudgetExhausted { .. }));
        assert!(ok >= 2);
        let spent = g.ledger().total;
        assert!(g.generate(&req).is_err());
        assert_eq!(g.ledger().total, spent);
        assert!(spent <= Money::from_dollars(worst * 2.5));
    }

    #[test]
    fn invalid_requests() {
        let g = gw(0, None);
        assert!(matches!(g.generate(&GenerationRequest::new("p", 0, 0.9)), Err(GatewayError::InvalidRequest(_))));
        assert!(matches!(g.generate(&GenerationRequest::new("p", 1, 2.5)), Err(GatewayError::InvalidRequest(_))));
    }
}
