//! Turns score feedback into raw-output-equivalent scalars.
//!
//! A log-ratio `ln(q_a / q_b)` equals `y_a - y_b`, i.e. coordinate `a` of the
//! victim fused on pivot `b`, so the raw-output attack runs unchanged on it.

use std::cell::Cell;

use crate::error::{AttackError, Result};
use crate::oracle::{Feedback, FeedbackMode, Oracle};

/// Which scalar a view extracts from the feedback.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarKind {
    RawCoord(usize),
    SigmoidLogit,
    /// `ln(q_a / q_b)`.
    LogRatio(usize, usize),
}

/// Inverse sigmoid.
pub fn sigmoid_to_raw(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(AttackError::ScoreOutOfRange(q));
    }
    Ok((q / (1.0 - q)).ln())
}

/// `ln(q_a / q_b)`; a missing or underflowed score is label-unavailable.
pub fn log_ratio(fb: &Feedback, a: usize, b: usize) -> Result<f64> {
    let qa = fb.score(a).filter(|&q| q > 0.0).ok_or(AttackError::LabelUnavailable(a))?;
    let qb = fb.score(b).filter(|&q| q > 0.0).ok_or(AttackError::LabelUnavailable(b))?;
    Ok(qa.ln() - qb.ln())
}

pub fn scalar_from_feedback(fb: &Feedback, kind: ScalarKind) -> Result<f64> {
    match (fb, kind) {
        (Feedback::Raw(y), ScalarKind::RawCoord(k)) => {
            y.get(k).copied().ok_or_else(|| AttackError::IncompatibleMode(format!("no output {k}")))
        }
        (Feedback::Sigmoid(q), ScalarKind::SigmoidLogit) => sigmoid_to_raw(*q),
        (Feedback::Softmax(_) | Feedback::TopM(_), ScalarKind::LogRatio(a, b)) => log_ratio(fb, a, b),
        _ => Err(AttackError::IncompatibleMode(format!("{kind:?} on {fb:?}"))),
    }
}

/// Raw-equivalent output vector: raw logits, the inverted sigmoid, or the
/// fused coordinates `ln(q_j / q_pivot)` (softmax only).
pub fn raw_equivalent(fb: &Feedback, pivot: usize) -> Result<Vec<f64>> {
    match fb {
        Feedback::Raw(y) => Ok(y.clone()),
        Feedback::Sigmoid(q) => Ok(vec![sigmoid_to_raw(*q)?]),
        Feedback::Softmax(q) => (0..q.len()).map(|j| log_ratio(fb, j, pivot)).collect(),
        Feedback::TopM(_) => Err(AttackError::IncompatibleMode("top-m feedback has no full output vector".into())),
    }
}

/// A scalar function of the input, evaluated through the oracle or, in
/// tests, directly.
pub trait Scalar {
    fn value(&self, x: &[f64]) -> Result<f64>;

    /// Prepares the view for a short search around `x`. Fixed views need
    /// nothing.
    fn anchor(&self, _x: &[f64]) -> Result<()> {
        Ok(())
    }
}

impl<F: Fn(&[f64]) -> Result<f64>> Scalar for F {
    fn value(&self, x: &[f64]) -> Result<f64> {
        self(x)
    }
}

/// One query per evaluation; the value equals one coordinate of the (fused)
/// victim.
pub struct ScalarView<'a> {
    pub oracle: &'a Oracle,
    pub kind: ScalarKind,
}

impl<'a> ScalarView<'a> {
    pub fn new(oracle: &'a Oracle, kind: ScalarKind) -> Result<Self> {
        let ok = matches!(
            (oracle.mode(), kind),
            (FeedbackMode::Raw, ScalarKind::RawCoord(_))
                | (FeedbackMode::Sigmoid, ScalarKind::SigmoidLogit)
                | (FeedbackMode::Softmax | FeedbackMode::TopM(_), ScalarKind::LogRatio(_, _))
        );
        if !ok {
            return Err(AttackError::IncompatibleMode(format!("{kind:?} under {}", oracle.mode())));
        }
        Ok(Self { oracle, kind })
    }

    /// The natural view for single-scalar modes (first output coordinate for
    /// raw feedback); score modes need an explicit label pair.
    pub fn default_for(oracle: &'a Oracle, pivot: usize) -> Self {
        let kind = match oracle.mode() {
            FeedbackMode::Raw => ScalarKind::RawCoord(0),
            FeedbackMode::Sigmoid => ScalarKind::SigmoidLogit,
            _ => ScalarKind::LogRatio(if pivot == 0 { 1 } else { 0 }, pivot),
        };
        Self { oracle, kind }
    }
}

impl Scalar for ScalarView<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        let fb = self.oracle.query(x)?;
        scalar_from_feedback(&fb, self.kind)
    }
}

/// Log-ratio view whose label pair is re-chosen at every anchor: the two
/// most likely labels there. Under top-m feedback a fixed pair is hidden
/// over most of the input space; the local top two stay visible across a
/// short bracket.
pub struct AnchoredView<'a> {
    oracle: &'a Oracle,
    pair: Cell<(usize, usize)>,
}

impl<'a> AnchoredView<'a> {
    pub fn new(oracle: &'a Oracle) -> Result<Self> {
        if !oracle.mode().is_score() {
            return Err(AttackError::IncompatibleMode(format!("anchored log-ratio under {}", oracle.mode())));
        }
        Ok(Self { oracle, pair: Cell::new((0, 1)) })
    }

    pub fn pair(&self) -> (usize, usize) {
        self.pair.get()
    }
}

impl Scalar for AnchoredView<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        let (a, b) = self.pair.get();
        log_ratio(&self.oracle.query(x)?, a, b)
    }

    fn anchor(&self, x: &[f64]) -> Result<()> {
        let fb = self.oracle.query(x)?;
        let mut ranked: Vec<(usize, f64)> = fb.labels().into_iter().filter_map(|l| Some((l, fb.score(l)?))).collect();
        ranked.sort_by(|p, q| q.1.total_cmp(&p.1).then(p.0.cmp(&q.0)));
        match ranked.as_slice() {
            [(a, _), (b, _), ..] => {
                self.pair.set((*a, *b));
                Ok(())
            }
            _ => Err(AttackError::LabelUnavailable(ranked.first().map_or(0, |p| p.0))),
        }
    }
}
