//! Named experiment matrices for `prelu-extract bench`.

use std::time::Instant;

use prelu_extract::wiggle_baseline::compare_on_network;
use prelu_extract::{evaluate, extract, random_network, AttackConfig, FeedbackMode, Oracle, Workflow};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::report::fmt_log2;

pub const MATRICES: &[&str] = &["smoke", "table2-desk", "slopes", "scores", "wiggle"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub arch: String,
    pub feedback: String,
    pub workflow: Option<u8>,
    pub queries: Option<u64>,
    pub epsilon: Option<f64>,
    pub max_parameter_error: Option<f64>,
    /// Largest slope error per hidden layer.
    pub slope_errors: Vec<f64>,
    /// Sign comparisons: (wiggle errors, joint errors) out of the layer width.
    pub sign_errors: Option<(usize, usize, usize)>,
    pub secs: f64,
    pub status: String,
}

struct Case {
    dims: Vec<usize>,
    mode: FeedbackMode,
    workflow: Workflow,
}

fn cases(name: &str) -> Option<Vec<Case>> {
    let both = |dims: &[&[usize]]| -> Vec<Case> {
        dims.iter()
            .flat_map(|d| {
                [Workflow::Independent, Workflow::Joint].map(|workflow| Case { dims: d.to_vec(), mode: FeedbackMode::Raw, workflow })
            })
            .collect()
    };
    Some(match name {
        "smoke" => both(&[&[6, 4, 1], &[8, 5, 4, 1]]),
        "table2-desk" => both(&[&[32, 16, 1], &[64, 32, 1], &[20, 10, 10, 1], &[32, 16, 16, 1]]),
        "slopes" => both(&[&[20, 10, 10, 1], &[32, 16, 16, 1]]),
        "scores" => std::iter::once(FeedbackMode::Softmax)
            .chain((2..=10).map(FeedbackMode::TopM))
            .map(|mode| Case { dims: vec![20, 10, 10], mode, workflow: Workflow::Joint })
            .collect(),
        _ => return None,
    })
}

fn arch(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-")
}

fn run_case(c: &Case, seed: u64) -> BenchRow {
    let mut row = BenchRow {
        arch: arch(&c.dims),
        feedback: c.mode.to_string(),
        workflow: Some(c.workflow.id()),
        queries: None,
        epsilon: None,
        max_parameter_error: None,
        slope_errors: vec![],
        sign_errors: None,
        secs: 0.0,
        status: String::new(),
    };
    let net = random_network(&c.dims, (0.05, 0.95), seed).expect("valid bench architecture");
    let oracle = Oracle::from_network(net.clone(), c.mode).expect("valid bench mode");
    let cfg = AttackConfig { workflow: c.workflow, seed, ..Default::default() };
    let start = Instant::now();
    let result = extract(&oracle, &c.dims, &cfg);
    row.secs = start.elapsed().as_secs_f64();
    match result {
        Ok(ex) => {
            let truth = match ex.fused_pivot {
                Some(p) => net.fuse_outputs(p).expect("multi-output truth"),
                None => net,
            };
            row.queries = Some(ex.total_queries);
            match evaluate(&truth, &ex.network, cfg.domain, cfg.eval_samples, cfg.eval_seed) {
                Ok(r) => {
                    row.epsilon = Some(r.r_max);
                    row.max_parameter_error = r.max_parameter_error;
                    row.slope_errors = r.slope_errors;
                    row.status = "ok".into();
                }
                Err(e) => row.status = format!("evaluation failed: {e}"),
            }
        }
        Err(f) => {
            row.queries = Some(f.total_queries);
            row.status = format!("failed in {}: {}", f.phase, f.error);
        }
    }
    row
}

fn wiggle_rows(seed: u64) -> Vec<BenchRow> {
    [vec![20, 10, 10, 1], vec![196, 50, 50, 1]]
        .into_iter()
        .map(|dims| {
            let net = random_network(&dims, (0.9, 1.0), seed).expect("valid architecture");
            let start = Instant::now();
            let cmp = compare_on_network(&net, 200, 1.0, &mut ChaCha20Rng::seed_from_u64(seed));
            let mut row = BenchRow {
                arch: arch(&dims),
                feedback: "raw".into(),
                workflow: None,
                queries: None,
                epsilon: None,
                max_parameter_error: None,
                slope_errors: vec![],
                sign_errors: None,
                secs: start.elapsed().as_secs_f64(),
                status: "ok".into(),
            };
            match cmp {
                Ok(c) => {
                    row.queries = Some(c.queries);
                    row.sign_errors = Some((c.wiggle_errors, c.joint_errors[1], dims[2]));
                }
                Err(e) => row.status = format!("failed: {e}"),
            }
            row
        })
        .collect()
}

pub fn run(name: &str, seed: u64) -> Option<Vec<BenchRow>> {
    if name == "wiggle" {
        return Some(wiggle_rows(seed));
    }
    Some(cases(name)?.iter().map(|c| run_case(c, seed)).collect())
}

fn opt_log2(v: Option<f64>) -> String {
    v.map(fmt_log2).unwrap_or_else(|| "-".into())
}

pub fn render(rows: &[BenchRow]) -> String {
    let mut out = format!(
        "{:<14} {:<8} {:>2} {:>8} {:>10} {:>10} {:>10} {:>9} {:>8}  status\n",
        "arch", "feedback", "wf", "queries", "epsilon", "max|err|", "slope err", "signs", "time"
    );
    for r in rows {
        let slope = r.slope_errors.iter().copied().fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
        let signs = r.sign_errors.map(|(w, j, n)| format!("{w}/{j}/{n}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<14} {:<8} {:>2} {:>8} {:>10} {:>10} {:>10} {:>9} {:>7.1}s  {}\n",
            r.arch,
            r.feedback,
            r.workflow.map(|w| w.to_string()).unwrap_or_else(|| "-".into()),
            r.queries.map(|q| fmt_log2(q as f64)).unwrap_or_else(|| "-".into()),
            opt_log2(r.epsilon),
            opt_log2(r.max_parameter_error),
            opt_log2(slope),
            signs,
            r.secs,
            r.status
        ));
    }
    out
}
