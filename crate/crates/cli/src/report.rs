//! Run reports: JSON for machines, a fixed-width table for people.

use std::collections::BTreeMap;

use prelu_extract::{EquivalenceReport, Extraction, ExtractionFailure};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub dims: Vec<usize>,
    pub feedback: String,
    pub workflow: u8,
    pub seed: u64,
    pub budget: f64,
    pub query_limit: Option<u64>,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseQueries {
    pub queries: u64,
    pub log2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub phase: String,
    pub layer: usize,
    pub error: String,
    pub layers_recovered: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ConfigEcho,
    pub queries: BTreeMap<String, PhaseQueries>,
    pub total_queries: u64,
    pub total_queries_log2: f64,
    /// Output pivot the recovered model was fused on (score feedback only).
    pub fused_pivot: Option<usize>,
    /// Present when the true model was available to compare against.
    pub evaluation: Option<EquivalenceReport>,
    pub wall_time_secs: f64,
    pub recovered_model: Option<String>,
    pub failure: Option<Failure>,
}

fn log2(q: u64) -> f64 {
    (q as f64).log2()
}

fn phase_table(counts: &BTreeMap<String, u64>) -> BTreeMap<String, PhaseQueries> {
    counts.iter().map(|(k, &q)| (k.clone(), PhaseQueries { queries: q, log2: log2(q) })).collect()
}

impl RunReport {
    pub fn success(config: ConfigEcho, ex: &Extraction, evaluation: Option<EquivalenceReport>, secs: f64) -> Self {
        Self {
            config,
            queries: phase_table(&ex.queries),
            total_queries: ex.total_queries,
            total_queries_log2: log2(ex.total_queries),
            fused_pivot: ex.fused_pivot,
            evaluation,
            wall_time_secs: secs,
            recovered_model: None,
            failure: None,
        }
    }

    pub fn failure(config: ConfigEcho, f: &ExtractionFailure, secs: f64) -> Self {
        Self {
            config,
            queries: phase_table(&f.queries),
            total_queries: f.total_queries,
            total_queries_log2: log2(f.total_queries),
            fused_pivot: None,
            evaluation: None,
            wall_time_secs: secs,
            recovered_model: None,
            failure: Some(Failure {
                phase: f.phase.clone(),
                layer: f.layer,
                error: f.error.to_string(),
                layers_recovered: f.partial.len(),
            }),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let c = &self.config;
        let dims: Vec<String> = c.dims.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!(
            "architecture {}  feedback {}  workflow {}  seed {}\n",
            dims.join("-"),
            c.feedback,
            c.workflow,
            c.seed
        ));
        for (phase, q) in &self.queries {
            out.push_str(&format!("  {phase:<16} {:>10}  2^{:.2}\n", q.queries, q.log2));
        }
        out.push_str(&format!("  {:<16} {:>10}  2^{:.2}\n", "total", self.total_queries, self.total_queries_log2));
        if let Some(e) = &self.evaluation {
            out.push_str(&format!("  epsilon          {}\n", fmt_log2(e.r_max)));
            if let Some(b) = e.bound {
                out.push_str(&format!("  bound            {}\n", fmt_log2(b)));
            }
            if let Some(p) = e.max_parameter_error {
                out.push_str(&format!("  max|theta err|   {}\n", fmt_log2(p)));
            }
        }
        if let Some(f) = &self.failure {
            out.push_str(&format!("  FAILED in {} (layer {}): {}\n", f.phase, f.layer, f.error));
        }
        out.push_str(&format!("  wall time        {:.2}s\n", self.wall_time_secs));
        out
    }
}

/// `2^x` notation, or `0` for exact zero.
pub fn fmt_log2(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.is_finite() {
        format!("2^{:.2}", v.log2())
    } else {
        format!("{v}")
    }
}
