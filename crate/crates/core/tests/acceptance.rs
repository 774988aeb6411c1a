//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use prelu_extract::wiggle_baseline::compare_on_network;
use prelu_extract::{
    evaluate, extract, random_network, AttackConfig, AttackError, Extraction, FeedbackMode, Oracle, PReluNetwork, Workflow,
};

const SLOPES: (f64, f64) = (0.05, 0.95);
const DOMAIN: (f64, f64) = (-1.0, 1.0);
const SAMPLES: usize = 10_000;

struct Outcome {
    pass: bool,
    detail: String,
    /// Bit pattern of everything the run produced, for the determinism check.
    fingerprint: Vec<u64>,
}

fn log2(v: f64) -> f64 {
    v.log2()
}

fn run(dims: &[usize], net: &PReluNetwork, mode: FeedbackMode, workflow: Workflow, seed: u64) -> Result<Extraction, String> {
    let oracle = Oracle::from_network(net.clone(), mode).map_err(|e| e.to_string())?;
    let cfg = AttackConfig { workflow, seed, ..Default::default() };
    extract(&oracle, dims, &cfg).map_err(|f| {
        if matches!(f.error, AttackError::Entrapment(_)) {
            format!("entrapment: {f}")
        } else {
            f.to_string()
        }
    })
}

fn extraction_bits(ex: &Extraction) -> Vec<u64> {
    let mut bits = parameter_bits(&ex.network);
    bits.push(ex.total_queries);
    bits.extend(ex.queries.values());
    bits
}

fn criterion_1() -> Outcome {
    let dims = [32, 16, 1];
    let net = random_network(&dims, SLOPES, 1).unwrap();
    let start = Instant::now();
    let ex = match run(&dims, &net, FeedbackMode::Raw, Workflow::Joint, 1) {
        Ok(ex) => ex,
        Err(e) => return Outcome { pass: false, detail: e, fingerprint: vec![] },
    };
    let secs = start.elapsed().as_secs_f64();
    let report = evaluate(&net, &ex.network, DOMAIN, SAMPLES, 1).unwrap();
    let theta = report.max_parameter_error.unwrap_or(f64::INFINITY);
    let q = ex.total_queries as f64;
    let pass = report.r_max <= 2f64.powi(-25) && theta <= 2f64.powi(-28) && q <= 2f64.powi(19) && secs <= 300.0;
    Outcome {
        pass,
        detail: format!(
            "eps 2^{:.1}, param err 2^{:.1}, queries 2^{:.1}, {secs:.1}s",
            log2(report.r_max),
            log2(theta),
            log2(q)
        ),
        fingerprint: extraction_bits(&ex),
    }
}

fn criterion_2() -> Outcome {
    let dims = [20, 10, 10, 1];
    let net = random_network(&dims, SLOPES, 1).unwrap();
    let start = Instant::now();
    let mut fingerprint = Vec::new();
    let mut eval = |workflow| -> Result<(f64, f64), String> {
        let ex = run(&dims, &net, FeedbackMode::Raw, workflow, 1)?;
        fingerprint.extend(extraction_bits(&ex));
        let report = evaluate(&net, &ex.network, DOMAIN, SAMPLES, 1).map_err(|e| e.to_string())?;
        Ok((report.r_max, report.slope_errors[1]))
    };
    let (w1, w2) = match (eval(Workflow::Independent), eval(Workflow::Joint)) {
        (Ok(a), Ok(b)) => (a, b),
        (a, b) => {
            return Outcome { pass: false, detail: format!("W1 {:?}, W2 {:?}", a.err(), b.err()), fingerprint };
        }
    };
    let secs = start.elapsed().as_secs_f64();
    let ratio = w1.1 / w2.1.max(f64::MIN_POSITIVE);
    let pass = w1.0 <= 2f64.powi(-10) && w2.0 <= 2f64.powi(-25) && ratio >= 32.0 && secs <= 600.0;
    Outcome {
        pass,
        detail: format!(
            "W1 eps 2^{:.1}, W2 eps 2^{:.1}, layer-2 slope err W1 2^{:.1} / W2 2^{:.1} (ratio 2^{:.1}), {secs:.1}s",
            log2(w1.0),
            log2(w2.0),
            log2(w1.1),
            log2(w2.1),
            log2(ratio)
        ),
        fingerprint,
    }
}

fn criterion_3() -> Outcome {
    let dims = [20, 10, 10];
    let net = random_network(&dims, SLOPES, 1).unwrap();
    let mut modes = vec![FeedbackMode::Softmax, FeedbackMode::TopM(2)];
    modes.extend((3..=10).map(FeedbackMode::TopM));
    let mut pass = true;
    let mut parts = Vec::new();
    let mut fingerprint = Vec::new();
    for mode in modes {
        match run(&dims, &net, mode, Workflow::Joint, 1) {
            Ok(ex) => {
                fingerprint.extend(extraction_bits(&ex));
                let truth = net.fuse_outputs(ex.fused_pivot.unwrap_or(0)).unwrap();
                let report = evaluate(&truth, &ex.network, DOMAIN, SAMPLES, 1).unwrap();
                let q = ex.total_queries as f64;
                let ok = report.r_max <= 2f64.powi(-22) && q <= 2f64.powi(25);
                pass &= ok;
                parts.push(format!("{mode:?}: eps 2^{:.1} q 2^{:.1}", log2(report.r_max), log2(q)));
            }
            Err(e) => {
                // Only the two-label view may fail, and then only by entrapment.
                let ok = mode == FeedbackMode::TopM(2) && e.starts_with("entrapment");
                pass &= ok;
                fingerprint.push(u64::MAX);
                parts.push(format!("{mode:?}: {e}"));
            }
        }
    }
    Outcome { pass, detail: parts.join("; "), fingerprint }
}

fn criterion_4() -> Outcome {
    let net = random_network(&[196, 50, 50, 1], (0.9, 1.0), 1).unwrap();
    let start = Instant::now();
    let cmp = match compare_on_network(&net, 200, 1.0, &mut rng(1)) {
        Ok(c) => c,
        Err(e) => return Outcome { pass: false, detail: e.to_string(), fingerprint: vec![] },
    };
    let secs = start.elapsed().as_secs_f64();
    let pass = cmp.wiggle_errors >= 1 && cmp.joint_errors == [0, 0] && cmp.joint_decided == [50, 50] && secs <= 900.0;
    let mut fingerprint = vec![cmp.wiggle_errors as u64, cmp.queries];
    fingerprint.extend(cmp.joint_errors.iter().chain(&cmp.joint_decided).map(|&v| v as u64));
    Outcome {
        pass,
        detail: format!(
            "wiggle errors {}, joint errors {:?}, decided {:?}, {secs:.1}s",
            cmp.wiggle_errors, cmp.joint_errors, cmp.joint_decided
        ),
        fingerprint,
    }
}

fn criterion_5() -> Outcome {
    let mut failures = Vec::new();
    for seed in 0..20u64 {
        let dims = [1 + (seed as usize * 7) % 64, 1 + (seed as usize * 5) % 32, 1 + (seed as usize * 3) % 32, 1];
        let net = random_network(&dims, SLOPES, seed).unwrap();
        let xs = inputs(dims[0], 1000, seed);
        let twin = disguise(&net, 10, seed);
        if max_output_gap(|x| net.eval(x), |x| twin.eval(x), &xs) > 1e-12 {
            failures.push(format!("isomorphism seed {seed}"));
        }
        for i in 1..=2 {
            let split = net.split_layer(i).unwrap();
            if max_output_gap(|x| net.eval(x), |x| split.eval(x), &xs) > 1e-12 {
                failures.push(format!("split seed {seed} layer {i}"));
            }
        }
        let g = if seed % 2 == 0 { 1.0 + seed as f64 / 10.0 } else { -0.5 - seed as f64 / 20.0 };
        let (measured, expected) = delta_instance(1 + seed as usize % 12, g, 0.05 + 0.045 * seed as f64, seed);
        if (measured - expected).abs() > 1e-6 * expected.abs() {
            failures.push(format!("delta seed {seed}: {measured:e} vs {expected:e}"));
        }
        let d = 1 + seed as usize % 16;
        if probe_query_count(d, seed) != 4 * d as u64 - 1 {
            failures.push(format!("probe count d {d}"));
        }
        if !sign_rules_scale_invariant(seed) {
            failures.push(format!("sign scale seed {seed}"));
        }
    }
    let multi = random_network(&[8, 6, 5], SLOPES, 3).unwrap();
    let fused = multi.fuse_outputs(2).unwrap();
    let expect = |x: &[f64]| {
        let y = multi.eval(x);
        y.iter().map(|v| v - y[2]).collect::<Vec<_>>()
    };
    if max_output_gap(|x| fused.eval(x), expect, &inputs(8, 1000, 4)) > 1e-15 {
        failures.push("fusion".into());
    }
    if guard_refusal() != (true, 0) {
        failures.push("guard".into());
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() { "all property checks hold".into() } else { failures.join(", ") },
        fingerprint: vec![],
    }
}

fn report(n: usize, o: &Outcome) -> bool {
    println!("{} criterion {n}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn main() -> ExitCode {
    let scenarios: [fn() -> Outcome; 4] = [criterion_1, criterion_2, criterion_3, criterion_4];
    let mut all = true;
    let mut prints = Vec::new();
    for (i, s) in scenarios.iter().enumerate() {
        let o = s();
        all &= report(i + 1, &o);
        prints.push(o.fingerprint);
    }
    all &= report(5, &criterion_5());

    let mismatched: Vec<usize> = scenarios
        .iter()
        .enumerate()
        .filter(|(i, s)| s().fingerprint != prints[*i])
        .map(|(i, _)| i + 1)
        .collect();
    let determinism = Outcome {
        pass: mismatched.is_empty(),
        detail: if mismatched.is_empty() {
            "reruns of criteria 1-4 are bit-identical".into()
        } else {
            format!("criteria {mismatched:?} differ on rerun")
        },
        fingerprint: vec![],
    };
    all &= report(6, &determinism);

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
