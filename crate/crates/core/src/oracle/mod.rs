//! The adversary's only access path to the victim.
//!
//! An [`Oracle`] wraps a [`Backend`] (an in-process network or a remote
//! endpoint), enforces the feedback mode and counts every query. Attack code
//! never sees the backing parameters.

pub mod wire;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::error::OracleError;
use crate::network::PReluNetwork;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeedbackMode {
    Raw,
    Sigmoid,
    Softmax,
    TopM(usize),
}

impl FeedbackMode {
    /// Checks the mode against the output width.
    pub fn validate(self, d_out: usize) -> Result<(), OracleError> {
        match self {
            FeedbackMode::Sigmoid if d_out != 1 => Err(OracleError::InvalidMode(format!(
                "sigmoid feedback needs a single output, network has {d_out}"
            ))),
            FeedbackMode::Softmax if d_out < 2 => {
                Err(OracleError::InvalidMode("softmax feedback needs at least two outputs".into()))
            }
            FeedbackMode::TopM(m) if m < 2 || m > d_out => Err(OracleError::InvalidMode(format!(
                "top-m feedback needs 2 <= m <= {d_out}, got m = {m}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn is_score(self) -> bool {
        matches!(self, FeedbackMode::Softmax | FeedbackMode::TopM(_))
    }
}

impl fmt::Display for FeedbackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeedbackMode::Raw => write!(f, "raw"),
            FeedbackMode::Sigmoid => write!(f, "sigmoid"),
            FeedbackMode::Softmax => write!(f, "softmax"),
            FeedbackMode::TopM(m) => write!(f, "top{m}"),
        }
    }
}

impl FromStr for FeedbackMode {
    type Err = OracleError;

    /// Accepts `raw`, `sigmoid`, `softmax` and `topK` (e.g. `top3`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(FeedbackMode::Raw),
            "sigmoid" => Ok(FeedbackMode::Sigmoid),
            "softmax" => Ok(FeedbackMode::Softmax),
            _ => s
                .strip_prefix("top")
                .and_then(|m| m.parse().ok())
                .map(FeedbackMode::TopM)
                .ok_or_else(|| OracleError::InvalidMode(format!("unknown feedback mode `{s}`"))),
        }
    }
}

/// One oracle answer.
#[derive(Clone, Debug, PartialEq)]
pub enum Feedback {
    Raw(Vec<f64>),
    Sigmoid(f64),
    Softmax(Vec<f64>),
    /// `(label, score)` pairs in descending score order.
    TopM(Vec<(usize, f64)>),
}

impl Feedback {
    /// Score of `label`, if the feedback carries it.
    pub fn score(&self, label: usize) -> Option<f64> {
        match self {
            Feedback::Softmax(q) => q.get(label).copied(),
            Feedback::TopM(pairs) => pairs.iter().find(|(l, _)| *l == label).map(|&(_, q)| q),
            _ => None,
        }
    }

    /// Labels present in the feedback (all labels for softmax).
    pub fn labels(&self) -> Vec<usize> {
        match self {
            Feedback::Softmax(q) => (0..q.len()).collect(),
            Feedback::TopM(pairs) => pairs.iter().map(|&(l, _)| l).collect(),
            _ => Vec::new(),
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&y| (y - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn sigmoid(y: f64) -> f64 {
    1.0 / (1.0 + (-y).exp())
}

/// Turns raw logits into the feedback a service in `mode` would expose.
pub fn feedback_from_logits(logits: Vec<f64>, mode: FeedbackMode) -> Feedback {
    match mode {
        FeedbackMode::Raw => Feedback::Raw(logits),
        FeedbackMode::Sigmoid => Feedback::Sigmoid(sigmoid(logits[0])),
        FeedbackMode::Softmax => Feedback::Softmax(softmax(&logits)),
        FeedbackMode::TopM(m) => {
            let q = softmax(&logits);
            let mut pairs: Vec<(usize, f64)> = q.into_iter().enumerate().collect();
            // descending score, ties by ascending label
            pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            pairs.truncate(m);
            Feedback::TopM(pairs)
        }
    }
}

/// Something that answers queries in a fixed feedback mode.
pub trait Backend: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn mode(&self) -> FeedbackMode;
    /// Answers one query; `x` has already been validated.
    fn answer(&self, x: &[f64]) -> Result<Feedback, OracleError>;
}

/// In-process victim.
pub struct NetworkBackend {
    net: PReluNetwork,
    mode: FeedbackMode,
}

impl NetworkBackend {
    pub fn new(net: PReluNetwork, mode: FeedbackMode) -> Result<Self, OracleError> {
        mode.validate(net.output_dim())?;
        Ok(Self { net, mode })
    }
}

impl Backend for NetworkBackend {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn mode(&self) -> FeedbackMode {
        self.mode
    }

    fn answer(&self, x: &[f64]) -> Result<Feedback, OracleError> {
        Ok(feedback_from_logits(self.net.eval(x), self.mode))
    }
}

struct Accounting {
    phase: String,
    per_phase: BTreeMap<String, u64>,
    limit: Option<u64>,
    phase_limits: BTreeMap<String, u64>,
}

/// Query handle with exact accounting. Shareable across threads.
pub struct Oracle {
    backend: Box<dyn Backend>,
    count: AtomicU64,
    acct: Mutex<Accounting>,
}

impl fmt::Debug for Oracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Oracle")
            .field("mode", &self.mode())
            .field("input_dim", &self.input_dim())
            .field("queries", &self.query_count())
            .finish()
    }
}

impl Oracle {
    pub fn new(backend: Box<dyn Backend>) -> Self {
        Self {
            backend,
            count: AtomicU64::new(0),
            acct: Mutex::new(Accounting {
                phase: "default".into(),
                per_phase: BTreeMap::new(),
                limit: None,
                phase_limits: BTreeMap::new(),
            }),
        }
    }

    /// Convenience constructor for an in-process victim.
    pub fn from_network(net: PReluNetwork, mode: FeedbackMode) -> Result<Self, OracleError> {
        Ok(Self::new(Box::new(NetworkBackend::new(net, mode)?)))
    }

    pub fn mode(&self) -> FeedbackMode {
        self.backend.mode()
    }

    pub fn input_dim(&self) -> usize {
        self.backend.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.backend.output_dim()
    }

    pub fn query(&self, x: &[f64]) -> Result<Feedback, OracleError> {
        let d = self.input_dim();
        if x.len() != d {
            return Err(OracleError::InputLength { got: x.len(), expected: d });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(OracleError::NonFiniteInput);
        }
        {
            let mut acct = self.acct.lock().unwrap();
            let used = self.count.load(Ordering::SeqCst);
            if let Some(limit) = acct.limit {
                if used >= limit {
                    return Err(OracleError::BudgetExhausted { limit, phase: acct.phase.clone() });
                }
            }
            if let Some(&limit) = acct.phase_limits.get(&acct.phase) {
                if acct.per_phase.get(&acct.phase).copied().unwrap_or(0) >= limit {
                    return Err(OracleError::BudgetExhausted { limit, phase: acct.phase.clone() });
                }
            }
            self.count.fetch_add(1, Ordering::SeqCst);
            let phase = acct.phase.clone();
            *acct.per_phase.entry(phase).or_insert(0) += 1;
        }
        self.backend.answer(x)
    }

    pub fn query_count(&self) -> u64 {
        self.count.load(Ordering::SeqCst)
    }

    /// Installs a total query limit (`None` removes it).
    pub fn reset_budget(&self, limit: Option<u64>) {
        self.acct.lock().unwrap().limit = limit;
    }

    /// Caps the queries tagged with `phase`.
    pub fn set_phase_limit(&self, phase: &str, limit: u64) {
        self.acct.lock().unwrap().phase_limits.insert(phase.to_string(), limit);
    }

    /// Tags subsequent queries with `phase`.
    pub fn set_phase(&self, phase: &str) {
        self.acct.lock().unwrap().phase = phase.to_string();
    }

    pub fn phase(&self) -> String {
        self.acct.lock().unwrap().phase.clone()
    }

    /// Per-phase counts; they always sum to [`Oracle::query_count`].
    pub fn phase_counts(&self) -> BTreeMap<String, u64> {
        self.acct.lock().unwrap().per_phase.clone()
    }
}
