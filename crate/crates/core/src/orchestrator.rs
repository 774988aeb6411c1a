//! End-to-end extraction: layer-by-layer recovery under either workflow.
//!
//! Workflow 1 recovers each hidden layer's rows, then decides every sign and
//! slope from the two affine pieces next to the neuron's hyperplane.
//! Workflow 2 keeps a layer pending (rows up to factor) until the next
//! layer's weights over the split pending layer are known; those decide the
//! pending signs and slopes, and their refinement tightens both layers.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::critical_search::{
    canonical_unit, filter_by_frequency, find_critical_on_segment, good_starting_points, random_pair,
    CriticalWitness, ProbeConfig,
};
use crate::error::{AttackError, Result};
use crate::linalg::{self, gaussian_vector};
use crate::network::PReluNetwork;
use crate::oracle::{FeedbackMode, Oracle};
use crate::prefix::{CompleteLayer, PendingLayer, RecoveredPrefix};
use crate::refinement::{refine_row, RefineConfig, RefinementReport, RowTarget};
use crate::scores_adapter::{AnchoredView, Scalar, ScalarKind, ScalarView};
use crate::sign_slope::{
    compress, decide_layer, decide_sign_slope_independent, fill_missing, merge_partials, partial_from_solution,
    recover_adjacent_affines, ExtendedWeightVector,
};
use crate::weight_recovery::{
    expansiveness_guard, normalized_neuron, probe_directions, recover_last_layer, recover_last_layer_topm,
    resolve_projection_signs, solve_neuron, LastLayer, RecoveredNeuron,
};

pub const PHASE_SEARCH: &str = "critical-search";
pub const PHASE_PROBE: &str = "weight-recovery";
pub const PHASE_SIGN: &str = "sign-slope";
pub const PHASE_REFINE: &str = "refinement";
pub const PHASE_LAST: &str = "last-layer";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Workflow {
    /// Independent sign and slope recovery per layer.
    Independent,
    /// Joint recovery through the split next layer, with refinement.
    Joint,
}

impl Workflow {
    pub fn id(self) -> u8 {
        match self {
            Workflow::Independent => 1,
            Workflow::Joint => 2,
        }
    }
}

impl fmt::Display for Workflow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

impl FromStr for Workflow {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Workflow::Independent),
            "2" => Ok(Workflow::Joint),
            _ => Err(AttackError::Config(format!("workflow must be 1 or 2, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub workflow: Workflow,
    /// Witnesses per layer: `budget_multiplier * d * log2(d)`.
    pub budget_multiplier: f64,
    pub probe: ProbeConfig,
    pub refine: RefineConfig,
    /// Spread of segment endpoints and regression samples.
    pub radius: f64,
    /// Evaluation box, recorded for reports.
    pub domain: (f64, f64),
    pub eval_samples: usize,
    pub seed: u64,
    pub eval_seed: u64,
    /// Reference label of the fused output in score modes.
    pub pivot: usize,
    pub query_limit: Option<u64>,
    pub phase_limits: BTreeMap<String, u64>,
    /// Halving rounds allowed when looking for top-m starting points.
    pub start_steps: usize,
    /// Angular tolerance (`1 - |cos|`) when grouping recovered vectors.
    pub cluster_tol: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            workflow: Workflow::Joint,
            budget_multiplier: 3.0,
            probe: ProbeConfig::default(),
            refine: RefineConfig::default(),
            radius: 1.0,
            domain: (-1.0, 1.0),
            eval_samples: 10_000,
            seed: 0,
            eval_seed: 1,
            pivot: 0,
            query_limit: None,
            phase_limits: BTreeMap::new(),
            start_steps: 20,
            cluster_tol: 1e-6,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        self.probe.validate()?;
        let positive = self.budget_multiplier > 0.0
            && self.radius > 0.0
            && self.eval_samples > 0
            && self.domain.0 < self.domain.1
            && self.refine.rounds > 0
            && self.refine.overdetermination > 0
            && self.refine.bracket > 0.0
            && self.cluster_tol > 0.0
            && self.query_limit != Some(0)
            && self.phase_limits.values().all(|&v| v > 0);
        if !positive {
            return Err(AttackError::Config("budgets, radii and tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: String,
    /// Hidden layer the phase worked on (`n + 1` for the output layer).
    pub layer: usize,
    pub queries: u64,
}

#[derive(Clone, Debug)]
pub struct Extraction {
    /// In score modes this is the victim fused on `fused_pivot`.
    pub network: PReluNetwork,
    pub neurons: Vec<Vec<RecoveredNeuron>>,
    pub refinement: Vec<RefinementReport>,
    pub phases: Vec<PhaseRecord>,
    pub queries: BTreeMap<String, u64>,
    pub total_queries: u64,
    pub fused_pivot: Option<usize>,
    pub workflow: Workflow,
}

#[derive(Debug)]
pub struct ExtractionFailure {
    pub phase: String,
    pub layer: usize,
    pub error: AttackError,
    /// Hidden layers completed before the failure.
    pub partial: Vec<CompleteLayer>,
    pub phases: Vec<PhaseRecord>,
    pub queries: BTreeMap<String, u64>,
    pub total_queries: u64,
}

impl fmt::Display for ExtractionFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "extraction failed in phase {} (layer {}) after {} queries: {}",
            self.phase, self.layer, self.total_queries, self.error
        )
    }
}

impl std::error::Error for ExtractionFailure {}

/// Runs the configured workflow against `oracle` for architecture `dims`.
/// Configuration and architecture problems are reported before any query.
pub fn extract(oracle: &Oracle, dims: &[usize], config: &AttackConfig) -> std::result::Result<Extraction, Box<ExtractionFailure>> {
    let mut attack = Attack::new(oracle, dims, config);
    if let Err(e) = attack.check() {
        return Err(attack.failure("setup", 0, e));
    }
    oracle.reset_budget(config.query_limit.map(|l| oracle.query_count() + l));
    for (phase, &limit) in &config.phase_limits {
        oracle.set_phase_limit(phase, limit);
    }
    let result = match config.workflow {
        Workflow::Independent => attack.workflow_one(),
        Workflow::Joint => attack.workflow_two(),
    };
    match result {
        Ok(network) => Ok(attack.finish(network)),
        Err(e) => {
            let (phase, layer) = attack.current.clone();
            Err(attack.failure(&phase, layer, e))
        }
    }
}

struct Attack<'a> {
    oracle: &'a Oracle,
    dims: Vec<usize>,
    cfg: &'a AttackConfig,
    rng: ChaCha20Rng,
    prefix: RecoveredPrefix,
    neurons: Vec<Vec<RecoveredNeuron>>,
    refinement: Vec<RefinementReport>,
    phases: Vec<PhaseRecord>,
    current: (String, usize),
    queue: VecDeque<CriticalWitness>,
    radius: f64,
}

/// A witness together with the neuron solved there.
struct Sighting {
    witness: CriticalWitness,
    neuron: RecoveredNeuron,
}

impl<'a> Attack<'a> {
    fn new(oracle: &'a Oracle, dims: &[usize], cfg: &'a AttackConfig) -> Self {
        Self {
            oracle,
            dims: dims.to_vec(),
            cfg,
            rng: ChaCha20Rng::seed_from_u64(cfg.seed),
            prefix: RecoveredPrefix::new(dims.first().copied().unwrap_or(0)),
            neurons: Vec::new(),
            refinement: Vec::new(),
            phases: Vec::new(),
            current: ("setup".into(), 0),
            queue: VecDeque::new(),
            radius: cfg.radius,
        }
    }

    fn n(&self) -> usize {
        self.dims.len() - 2
    }

    fn check(&self) -> Result<()> {
        self.cfg.validate()?;
        if self.dims.len() < 3 || self.dims.contains(&0) {
            return Err(AttackError::Config(format!("need at least one hidden layer, got {:?}", self.dims)));
        }
        if self.dims[0] != self.oracle.input_dim() || *self.dims.last().unwrap() != self.oracle.output_dim() {
            return Err(AttackError::Config(format!(
                "architecture {:?} does not match the oracle ({} inputs, {} outputs)",
                self.dims,
                self.oracle.input_dim(),
                self.oracle.output_dim()
            )));
        }
        let d_out = self.oracle.output_dim();
        self.oracle.mode().validate(d_out).map_err(|e| AttackError::IncompatibleMode(e.to_string()))?;
        if self.oracle.mode().is_score() && self.cfg.pivot >= d_out {
            return Err(AttackError::Config(format!("pivot {} out of range for {d_out} outputs", self.cfg.pivot)));
        }
        expansiveness_guard(&self.dims, self.cfg.workflow.id())
    }

    fn failure(&self, phase: &str, layer: usize, error: AttackError) -> Box<ExtractionFailure> {
        Box::new(ExtractionFailure {
            phase: phase.to_string(),
            layer,
            error,
            partial: self.prefix.layers.clone(),
            phases: self.phases.clone(),
            queries: self.oracle.phase_counts(),
            total_queries: self.oracle.query_count(),
        })
    }

    fn finish(self, network: PReluNetwork) -> Extraction {
        Extraction {
            network,
            neurons: self.neurons,
            refinement: self.refinement,
            phases: self.phases,
            queries: self.oracle.phase_counts(),
            total_queries: self.oracle.query_count(),
            fused_pivot: self.oracle.mode().is_score().then_some(self.cfg.pivot),
            workflow: self.cfg.workflow,
        }
    }

    /// Tags queries with `phase` and logs how many `body` spends.
    fn phase<T>(&mut self, phase: &str, layer: usize, body: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.oracle.set_phase(phase);
        self.current = (phase.to_string(), layer);
        let start = self.oracle.query_count();
        let out = body(self);
        let queries = self.oracle.query_count() - start;
        match self.phases.last_mut() {
            Some(r) if r.phase == phase && r.layer == layer => r.queries += queries,
            _ => self.phases.push(PhaseRecord { phase: phase.to_string(), layer, queries }),
        }
        out
    }

    fn witness_target(&self, d: usize) -> usize {
        let d = d.max(2) as f64;
        ((self.cfg.budget_multiplier * d * d.log2()).ceil() as usize).max(2 * d as usize)
    }

    fn entrapment_or(&self, msg: String) -> AttackError {
        if matches!(self.oracle.mode(), FeedbackMode::TopM(_)) {
            AttackError::Entrapment(msg)
        } else {
            AttackError::InsufficientWitnesses(msg)
        }
    }

    /// Scalar view for one segment; top-m feedback first moves the ends
    /// until they share two labels. `None` skips the segment.
    fn segment_view(&mut self, x1: Vec<f64>, x2: Vec<f64>) -> Result<Option<(Vec<f64>, Vec<f64>, ScalarKind)>> {
        let d_out = self.oracle.output_dim();
        match self.oracle.mode() {
            FeedbackMode::Raw => Ok(Some((x1, x2, ScalarKind::RawCoord(0)))),
            FeedbackMode::Sigmoid => Ok(Some((x1, x2, ScalarKind::SigmoidLogit))),
            FeedbackMode::Softmax => {
                let labels: Vec<usize> = (0..d_out).collect();
                let (a, b) = random_pair(&labels, &mut self.rng);
                Ok(Some((x1, x2, ScalarKind::LogRatio(a, b))))
            }
            FeedbackMode::TopM(_) => match good_starting_points(self.oracle, &x1, &x2, self.cfg.start_steps) {
                Ok((a, b, shared)) => {
                    let (p, q) = random_pair(&shared, &mut self.rng);
                    Ok(Some((a, b, ScalarKind::LogRatio(p, q))))
                }
                Err(AttackError::StartingPoints(_)) => Ok(None),
                Err(e) => Err(e),
            },
        }
    }

    /// Next witness not on any hyperplane of `filter`, searching new random
    /// segments as needed.
    fn next_witness(&mut self, filter: &RecoveredPrefix, max_segments: usize) -> Result<Option<CriticalWitness>> {
        let mut segments = 0;
        loop {
            while let Some(w) = self.queue.pop_front() {
                let scale = linalg::norm(&w.x).max(1.0);
                if filter.min_abs_preactivation(&w.x) >= 1e-6 * scale {
                    return Ok(Some(w));
                }
            }
            if segments >= max_segments {
                return Ok(None);
            }
            segments += 1;
            let d0 = self.dims[0];
            let x1: Vec<f64> = gaussian_vector(d0, &mut self.rng).iter().map(|v| v * self.radius).collect();
            let x2: Vec<f64> = gaussian_vector(d0, &mut self.rng).iter().map(|v| v * self.radius).collect();
            let old = self.oracle.phase();
            self.oracle.set_phase(PHASE_SEARCH);
            let found = match self.segment_view(x1, x2)? {
                Some((a, b, kind)) => {
                    let view = ScalarView::new(self.oracle, kind)?;
                    find_critical_on_segment(&view, &a, &b, &self.cfg.probe)?
                        .into_iter()
                        .map(|mut w| {
                            w.view = Some(kind);
                            w
                        })
                        .collect()
                }
                None => Vec::new(),
            };
            self.oracle.set_phase(&old);
            self.queue.extend(found);
        }
    }

    /// Probes `prefix`'s output space at a witness and solves the neuron
    /// there; `None` when the witness turns out unusable.
    fn sight(&mut self, prefix: &RecoveredPrefix, w: CriticalWitness, layer: usize) -> Result<Option<Sighting>> {
        let kind = w.view.unwrap_or(ScalarKind::RawCoord(0));
        let view = ScalarView::new(self.oracle, kind)?;
        let probe = match probe_directions(&view, prefix, &w.x, &self.cfg.probe, &mut self.rng) {
            Ok(p) => p,
            Err(e) if skippable(&e) => return Ok(None),
            Err(e) => return Err(e),
        };
        let signs = match resolve_projection_signs(&probe) {
            Ok(s) => s,
            Err(e) if skippable(&e) => return Ok(None),
            Err(e) => return Err(e),
        };
        let mut neuron = solve_neuron(&probe, &signs, layer)?;
        neuron.witnesses = 1;
        Ok(Some(Sighting { witness: w, neuron }))
    }

    /// Rows of hidden layer `layer` over the output of the complete prefix,
    /// each with the witnesses that produced it.
    fn recover_rows(&mut self, layer: usize) -> Result<Vec<(RecoveredNeuron, Vec<CriticalWitness>)>> {
        let d = self.dims[layer];
        let target = self.witness_target(d);
        let prefix = self.prefix.clone();
        let mut sightings: Vec<Sighting> = Vec::new();
        let mut tried = 0;
        let mut next_check = target;
        let mut widen_at = 2 * target;
        loop {
            if tried >= 8 * target {
                return Err(self.entrapment_or(format!(
                    "layer {layer}: fewer than {d} recurring neurons after {tried} witnesses"
                )));
            }
            let Some(w) = self.next_witness(&prefix, 4 * target)? else {
                return Err(self.entrapment_or(format!("layer {layer}: no new critical points found")));
            };
            tried += 1;
            if let Some(s) = self.sight(&prefix, w, layer)? {
                sightings.push(s);
            }
            if tried < next_check {
                continue;
            }
            next_check += d.max(4);
            let cands: Vec<Vec<f64>> = sightings
                .iter()
                .map(|s| {
                    let mut v = s.neuron.weights.clone();
                    v.push(s.neuron.bias);
                    canonical_unit(&v)
                })
                .collect();
            match filter_by_frequency(&cands, d, self.cfg.cluster_tol) {
                Ok(clusters) => {
                    return Ok(clusters
                        .into_iter()
                        .map(|c| {
                            let rep = &c.representative;
                            let mut n = normalized_neuron(layer, &rep[..rep.len() - 1], rep[rep.len() - 1]);
                            n.witnesses = c.members.len();
                            let ws = c.members.iter().map(|&m| sightings[m].witness.clone()).collect();
                            (n, ws)
                        })
                        .collect())
                }
                Err(AttackError::InsufficientWitnesses(_)) if tried >= widen_at => {
                    self.radius *= 2.0;
                    widen_at += target;
                }
                Err(AttackError::InsufficientWitnesses(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }

    fn workflow_one(&mut self) -> Result<PReluNetwork> {
        let n = self.n();
        for layer in 1..=n {
            let rows = self.phase(PHASE_PROBE, layer, |a| a.recover_rows(layer))?;
            let complete = self.phase(PHASE_SIGN, layer, |a| a.independent_signs(layer, rows))?;
            self.prefix.push_complete(complete);
        }
        let last = self.phase(PHASE_LAST, n + 1, |a| {
            let prefix = a.prefix.clone();
            let features = |x: &[f64]| prefix.complete_output(x);
            a.last_layer(&features, a.dims[n])
        })?;
        self.assemble(last.weights, last.bias)
    }

    fn independent_signs(
        &mut self,
        layer: usize,
        rows: Vec<(RecoveredNeuron, Vec<CriticalWitness>)>,
    ) -> Result<CompleteLayer> {
        let d = rows.len();
        let d_prev = rows[0].0.weights.len();
        let mut prefix = self.prefix.clone();
        prefix.pending = Some(PendingLayer {
            weights: DMatrix::from_fn(d, d_prev, |r, c| rows[r].0.weights[c]),
            biases: DVector::from_fn(d, |r, _| rows[r].0.bias),
        });
        let mut out = Vec::with_capacity(d);
        for (j, (neuron, witnesses)) in rows.into_iter().enumerate() {
            let mut decided = None;
            let mut last_err = None;
            for w in witnesses.iter().take(3) {
                let view = ScalarView::new(self.oracle, w.view.unwrap_or(ScalarKind::RawCoord(0)))?;
                let attempt = recover_adjacent_affines(&view, &prefix, &w.x, j, &self.cfg.probe, &mut self.rng)
                    .and_then(|pair| decide_sign_slope_independent(pair.w_plus[j], pair.w_minus[j]));
                match attempt {
                    Ok(v) => {
                        decided = Some(v);
                        break;
                    }
                    Err(e) if skippable(&e) || matches!(e, AttackError::Indeterminate(_) | AttackError::RegionEscape(_)) => {
                        last_err = Some(e)
                    }
                    Err(e) => return Err(e),
                }
            }
            let Some((sign, slope)) = decided else {
                return Err(AttackError::Indeterminate(format!(
                    "layer {layer} neuron {j}: no decision after 3 witnesses ({})",
                    last_err.map_or("no witness".into(), |e| e.to_string())
                )));
            };
            let mut n = neuron;
            n.sign = Some(sign);
            n.slope = Some(slope);
            out.push(n);
        }
        let complete = complete_layer(&out);
        self.neurons.push(out);
        Ok(complete)
    }

    fn workflow_two(&mut self) -> Result<PReluNetwork> {
        let n = self.n();
        let rows = self.phase(PHASE_PROBE, 1, |a| a.recover_rows(1))?;
        let mut neurons: Vec<RecoveredNeuron> = rows.into_iter().map(|(n, _)| n).collect();
        self.phase(PHASE_REFINE, 1, |a| {
            let complete = a.prefix.clone();
            let features = |x: &[f64]| complete.complete_output(x);
            for neuron in neurons.iter_mut() {
                let (w, b) = a.refine(&complete, &features, neuron.weights.clone(), neuron.bias)?;
                let mut refined = normalized_neuron(1, &w, b);
                refined.witnesses = neuron.witnesses;
                refined.residual = a.refinement.last().map_or(0.0, |r| r.post_residual);
                *neuron = refined;
            }
            Ok(())
        })?;
        self.prefix.pending = Some(pending_from(&neurons));
        let mut pending_neurons = neurons;
        for layer in 1..n {
            let vectors = self.phase(PHASE_PROBE, layer + 1, |a| a.extended_vectors(layer + 1))?;
            let vectors = self.phase(PHASE_REFINE, layer + 1, |a| a.refine_extended(vectors))?;
            let decisions = self.phase(PHASE_SIGN, layer, |_| decided(&vectors, layer))?;
            let next: Vec<RecoveredNeuron> = vectors
                .iter()
                .map(|v| {
                    let mut n = normalized_neuron(layer + 1, &compress(&v.dense(), &decisions), v.bias);
                    n.witnesses = v.members;
                    n
                })
                .collect();
            self.complete_pending(&mut pending_neurons, &decisions);
            self.prefix.pending = Some(pending_from(&next));
            pending_neurons = next;
        }
        let (last, decisions) = self.phase(PHASE_LAST, n + 1, |a| {
            let prefix = a.prefix.clone();
            let features = |x: &[f64]| prefix.split_features(x);
            let last = a.last_layer(&features, 2 * a.dims[n])?;
            let rows: Vec<ExtendedWeightVector> = (0..last.weights.nrows())
                .map(|r| ExtendedWeightVector {
                    values: last.weights.row(r).iter().map(|&v| Some(v)).collect(),
                    bias: last.bias[r],
                    members: 1,
                })
                .collect();
            let decisions = decided(&rows, n)?;
            Ok((last, decisions))
        })?;
        self.complete_pending(&mut pending_neurons, &decisions);
        let d_out = last.weights.nrows();
        let weights = DMatrix::from_fn(d_out, self.dims[n], |r, c| {
            let row: Vec<f64> = last.weights.row(r).iter().copied().collect();
            compress(&row, &decisions)[c]
        });
        self.assemble(weights, last.bias)
    }

    /// Turns the pending layer into a complete one with the given decisions.
    fn complete_pending(&mut self, pending: &mut [RecoveredNeuron], decisions: &[(f64, f64)]) {
        for (n, &(sign, slope)) in pending.iter_mut().zip(decisions) {
            n.sign = Some(sign);
            n.slope = Some(slope);
        }
        let complete = complete_layer(pending);
        self.neurons.push(pending.to_vec());
        self.prefix.push_complete(complete);
    }

    /// Next-layer weights over the split pending layer, merged across
    /// witnesses and completed from the decided slopes.
    fn extended_vectors(&mut self, next_layer: usize) -> Result<Vec<ExtendedWeightVector>> {
        let d_next = self.dims[next_layer];
        let target = self.witness_target(d_next);
        let prefix = self.prefix.clone();
        let mut partials: Vec<ExtendedWeightVector> = Vec::new();
        let mut tried = 0;
        let mut next_check = target;
        let mut widen_at = 2 * target;
        loop {
            if tried >= 8 * target {
                return Err(self.entrapment_or(format!(
                    "layer {next_layer}: extended vectors incomplete after {tried} witnesses"
                )));
            }
            let Some(w) = self.next_witness(&prefix, 4 * target)? else {
                return Err(self.entrapment_or(format!("layer {next_layer}: no new critical points found")));
            };
            tried += 1;
            if let Some(s) = self.sight(&prefix, w, next_layer)? {
                let y = prefix.output(&s.witness.x);
                partials.push(partial_from_solution(&s.neuron.weights, s.neuron.bias, &y));
            }
            if tried < next_check {
                continue;
            }
            next_check += d_next.max(4);
            // some neurons never flip near the origin; widen the search
            if tried >= widen_at {
                self.radius *= 2.0;
                widen_at += target;
            }
            let Ok(mut merged) = merge_partials(&partials, d_next, self.cfg.cluster_tol) else { continue };
            let decisions = decide_layer(&merged)?;
            if decisions.iter().any(Option::is_none) {
                continue;
            }
            for v in merged.iter_mut() {
                fill_missing(v, &decisions);
            }
            if merged.iter().all(ExtendedWeightVector::is_complete) {
                return Ok(merged);
            }
        }
    }

    fn refine_extended(&mut self, vectors: Vec<ExtendedWeightVector>) -> Result<Vec<ExtendedWeightVector>> {
        let prefix = self.prefix.clone();
        let features = |x: &[f64]| prefix.split_features(x);
        let mut out = Vec::with_capacity(vectors.len());
        for v in vectors {
            let (w, b) = self.refine(&prefix, &features, v.dense(), v.bias)?;
            out.push(ExtendedWeightVector { values: w.into_iter().map(Some).collect(), bias: b, members: v.members });
        }
        Ok(out)
    }

    fn refine(
        &mut self,
        prefix: &RecoveredPrefix,
        features: &dyn Fn(&[f64]) -> Vec<f64>,
        weights: Vec<f64>,
        bias: f64,
    ) -> Result<(Vec<f64>, f64)> {
        let cfg = RefineConfig { radius: self.cfg.refine.radius.max(self.radius), ..self.cfg.refine };
        // score views follow the locally visible labels
        let fixed;
        let anchored;
        let view: &dyn Scalar = if self.oracle.mode().is_score() {
            anchored = AnchoredView::new(self.oracle)?;
            &anchored
        } else {
            fixed = ScalarView::default_for(self.oracle, self.cfg.pivot);
            &fixed
        };
        let row = RowTarget { features, weights: weights.clone(), bias };
        let oracle = self.oracle;
        match refine_row(view, prefix, row, &cfg, &self.cfg.probe, &|| oracle.query_count(), &mut self.rng) {
            Ok((w, b, report)) => {
                self.refinement.push(report);
                Ok((w, b))
            }
            Err(e) if skippable(&e) => {
                let report = RefinementReport {
                    pre_residual: f64::NAN,
                    post_residual: f64::NAN,
                    witnesses: 0,
                    queries: 0,
                    accepted: false,
                    failed: true,
                };
                self.refinement.push(report);
                Ok((weights, bias))
            }
            Err(e) => Err(e),
        }
    }

    fn last_layer(&mut self, features: &dyn Fn(&[f64]) -> Vec<f64>, n_features: usize) -> Result<LastLayer> {
        let pivot = self.cfg.pivot;
        let radius = self.radius;
        match self.oracle.mode() {
            FeedbackMode::TopM(_) => {
                recover_last_layer_topm(self.oracle, features, n_features, pivot, radius, &mut self.rng)
            }
            _ => recover_last_layer(self.oracle, features, n_features, pivot, radius, &mut self.rng),
        }
    }

    fn assemble(&self, weights: DMatrix<f64>, bias: DVector<f64>) -> Result<PReluNetwork> {
        let mut ws: Vec<DMatrix<f64>> = self.prefix.layers.iter().map(|l| l.weights.clone()).collect();
        let mut bs: Vec<DVector<f64>> = self.prefix.layers.iter().map(|l| l.biases.clone()).collect();
        let ss: Vec<DVector<f64>> = self.prefix.layers.iter().map(|l| l.slopes.clone()).collect();
        ws.push(weights);
        bs.push(bias);
        Ok(PReluNetwork::new(ws, bs, ss)?)
    }
}

/// Errors that only make one witness or segment unusable.
fn skippable(e: &AttackError) -> bool {
    matches!(
        e,
        AttackError::WitnessRejected(_)
            | AttackError::NotCritical(_)
            | AttackError::SignAmbiguous(_)
            | AttackError::LabelUnavailable(_)
            | AttackError::ScoreOutOfRange(_)
            | AttackError::Singular(_)
            | AttackError::Refinement(_)
    )
}

fn decided(vectors: &[ExtendedWeightVector], layer: usize) -> Result<Vec<(f64, f64)>> {
    decide_layer(vectors)?
        .into_iter()
        .enumerate()
        .map(|(j, d)| d.ok_or_else(|| AttackError::Indeterminate(format!("layer {layer} neuron {j}: no split coefficients"))))
        .collect()
}

fn pending_from(neurons: &[RecoveredNeuron]) -> PendingLayer {
    let d = neurons.len();
    let k = neurons[0].weights.len();
    PendingLayer {
        weights: DMatrix::from_fn(d, k, |r, c| neurons[r].weights[c]),
        biases: DVector::from_fn(d, |r, _| neurons[r].bias),
    }
}

fn complete_layer(neurons: &[RecoveredNeuron]) -> CompleteLayer {
    let d = neurons.len();
    let k = neurons[0].weights.len();
    let s = |r: usize| neurons[r].sign.unwrap_or(1.0);
    CompleteLayer {
        weights: DMatrix::from_fn(d, k, |r, c| s(r) * neurons[r].weights[c]),
        biases: DVector::from_fn(d, |r, _| s(r) * neurons[r].bias),
        slopes: DVector::from_fn(d, |r, _| neurons[r].slope.unwrap_or(1.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{align, max_parameter_error, network_equivalence};
    use crate::network::random_network;

    fn run(dims: &[usize], workflow: Workflow, mode: FeedbackMode, seed: u64) -> (PReluNetwork, Extraction) {
        let net = random_network(dims, (0.1, 0.9), seed).unwrap();
        let oracle = Oracle::from_network(net.clone(), mode).unwrap();
        let cfg = AttackConfig { workflow, seed, ..Default::default() };
        let ex = extract(&oracle, dims, &cfg).unwrap_or_else(|e| panic!("{e}"));
        assert_eq!(ex.queries.values().sum::<u64>(), ex.total_queries);
        (net, ex)
    }

    #[test]
    fn workflow_two_one_deep() {
        let (net, ex) = run(&[6, 4, 1], Workflow::Joint, FeedbackMode::Raw, 1);
        let eps = network_equivalence(&net, &ex.network, (-1.0, 1.0), 2000, 0);
        assert!(eps < 1e-10, "{eps:e}");
        let aligned = align(&net, &ex.network).unwrap();
        assert!(max_parameter_error(&net, &aligned.net) < 1e-9);
    }

    #[test]
    fn workflow_one_two_deep() {
        let (net, ex) = run(&[8, 5, 4, 1], Workflow::Independent, FeedbackMode::Raw, 2);
        let eps = network_equivalence(&net, &ex.network, (-1.0, 1.0), 2000, 0);
        assert!(eps < 1e-6, "{eps:e}");
    }

    #[test]
    fn workflow_two_two_deep() {
        let (net, ex) = run(&[8, 5, 4, 1], Workflow::Joint, FeedbackMode::Raw, 3);
        let eps = network_equivalence(&net, &ex.network, (-1.0, 1.0), 2000, 0);
        assert!(eps < 1e-10, "{eps:e}");
    }

    #[test]
    fn guard_refuses_before_querying() {
        let net = random_network(&[10, 30, 30, 1], (0.1, 0.9), 0).unwrap();
        let oracle = Oracle::from_network(net, FeedbackMode::Raw).unwrap();
        let err = extract(&oracle, &[10, 30, 30, 1], &AttackConfig::default()).unwrap_err();
        assert!(matches!(err.error, AttackError::Expansive(_)));
        assert_eq!(oracle.query_count(), 0);
        assert_eq!(err.phase, "setup");
    }

    #[test]
    fn budget_exhaustion_keeps_partial_results() {
        let net = random_network(&[6, 4, 3, 1], (0.1, 0.9), 4).unwrap();
        let oracle = Oracle::from_network(net, FeedbackMode::Raw).unwrap();
        let mut cfg = AttackConfig::default();
        cfg.phase_limits.insert(PHASE_LAST.into(), 1);
        let err = extract(&oracle, &[6, 4, 3, 1], &cfg).unwrap_err();
        assert!(matches!(err.error, AttackError::Oracle(_)), "{err}");
        assert_eq!(err.phase, PHASE_LAST);
        assert_eq!(err.partial.len(), 1);
        assert_eq!(err.queries.values().sum::<u64>(), err.total_queries);
    }
}
