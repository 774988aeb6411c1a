//! Command-line front end: generate victims, serve them, extract, evaluate
//! and run experiment matrices.

mod bench;
mod report;

use std::error::Error;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prelu_extract::network::{read_model_file, write_model, write_model_file};
use prelu_extract::oracle::wire::{serve, RemoteBackend};
use prelu_extract::{evaluate, extract, random_network, AttackConfig, FeedbackMode, Oracle, Workflow};

use report::{ConfigEcho, RunReport};

type CliResult<T> = Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "prelu-extract", version, about = "Black-box parameter extraction for PReLU networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random model file.
    Gen {
        /// Layer widths, e.g. 32-16-1.
        #[arg(long, value_parser = parse_dims)]
        dims: Dims,
        /// Slope range lo:hi with 0 < lo < hi <= 1.
        #[arg(long, default_value = "0.05:0.95", value_parser = parse_range)]
        slopes: (f64, f64),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a model over TCP.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        feedback: FeedbackArgs,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        /// Stop after this many connections.
        #[arg(long)]
        max_connections: Option<usize>,
    },
    /// Run the extraction attack.
    Extract(ExtractArgs),
    /// Compare a recovered model with the true one.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        recovered: PathBuf,
        /// Fuse the true outputs on this pivot first (for score-mode results).
        #[arg(long)]
        fuse: Option<usize>,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "-1:1", value_parser = parse_range, allow_hyphen_values = true)]
        domain: (f64, f64),
    },
    /// Run a named experiment matrix.
    Bench {
        /// One of: smoke, table2-desk, slopes, scores, wiggle.
        name: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write the rows as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FeedbackKind {
    Raw,
    Sigmoid,
    Softmax,
    Topm,
}

#[derive(Args)]
struct FeedbackArgs {
    #[arg(long, value_enum, default_value = "raw")]
    feedback: FeedbackKind,
    /// Labels revealed by top-m feedback.
    #[arg(long)]
    m: Option<usize>,
}

impl FeedbackArgs {
    fn mode(&self) -> CliResult<FeedbackMode> {
        match (self.feedback, self.m) {
            (FeedbackKind::Topm, Some(m)) => Ok(FeedbackMode::TopM(m)),
            (FeedbackKind::Topm, None) => Err("--feedback topm needs --m".into()),
            (_, Some(_)) => Err("--m is only valid with --feedback topm".into()),
            (FeedbackKind::Raw, None) => Ok(FeedbackMode::Raw),
            (FeedbackKind::Sigmoid, None) => Ok(FeedbackMode::Sigmoid),
            (FeedbackKind::Softmax, None) => Ok(FeedbackMode::Softmax),
        }
    }
}

#[derive(Args)]
struct ExtractArgs {
    /// Model file to attack in-process.
    #[arg(long, conflicts_with = "remote", required_unless_present = "remote")]
    model: Option<PathBuf>,
    /// Address of a running `serve`.
    #[arg(long, requires = "dims")]
    remote: Option<String>,
    /// Architecture of the remote model.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<Dims>,
    /// True model for evaluating a remote run.
    #[arg(long, requires = "remote")]
    truth: Option<PathBuf>,
    #[command(flatten)]
    feedback: FeedbackArgs,
    #[arg(long, default_value = "2", value_parser = parse_workflow)]
    workflow: Workflow,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Witness budget multiplier over d log2 d.
    #[arg(long, default_value_t = 3.0)]
    budget: f64,
    /// Hard cap on total queries.
    #[arg(long)]
    query_limit: Option<u64>,
    /// Report path (JSON); the table always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to write the recovered model.
    #[arg(long)]
    recovered: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    eval_samples: usize,
    #[arg(long, default_value_t = 1)]
    eval_seed: u64,
}

/// Layer widths given as `d0-d1-..-dn`.
#[derive(Clone, Debug, PartialEq)]
struct Dims(Vec<usize>);

fn parse_dims(s: &str) -> Result<Dims, String> {
    let dims: Vec<usize> = s.split('-').map(|t| t.parse().map_err(|_| format!("bad width `{t}`"))).collect::<Result<_, _>>()?;
    if dims.len() < 2 || dims.contains(&0) {
        return Err(format!("need at least two positive widths, got `{s}`"));
    }
    Ok(Dims(dims))
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected lo:hi, got `{s}`"))?;
    let lo: f64 = a.parse().map_err(|_| format!("bad number `{a}`"))?;
    let hi: f64 = b.parse().map_err(|_| format!("bad number `{b}`"))?;
    if !(lo < hi) {
        return Err(format!("need lo < hi, got `{s}`"));
    }
    Ok((lo, hi))
}

fn parse_workflow(s: &str) -> Result<Workflow, String> {
    s.parse().map_err(|e: prelu_extract::AttackError| e.to_string())
}

fn write_or_print(text: &str, out: Option<&Path>) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run_extract(a: &ExtractArgs) -> CliResult<bool> {
    // Everything is validated before the oracle sees a query.
    let mode = a.feedback.mode()?;
    let config = AttackConfig {
        workflow: a.workflow,
        budget_multiplier: a.budget,
        seed: a.seed,
        eval_seed: a.eval_seed,
        eval_samples: a.eval_samples,
        query_limit: a.query_limit,
        ..Default::default()
    };
    config.validate()?;
    let (oracle, dims, truth, source) = match (&a.model, &a.remote) {
        (Some(path), _) => {
            let net = read_model_file(path)?;
            let dims = net.dims().to_vec();
            if let Some(Dims(given)) = a.dims.as_ref().filter(|d| d.0 != dims) {
                return Err(format!("--dims {given:?} disagrees with the model file {dims:?}").into());
            }
            (Oracle::from_network(net.clone(), mode)?, dims, Some(net), path.display().to_string())
        }
        (None, Some(addr)) => {
            let Dims(dims) = a.dims.clone().ok_or("--remote needs --dims")?;
            let truth = a.truth.as_ref().map(read_model_file).transpose()?;
            let backend = RemoteBackend::connect(addr.as_str(), dims[0], *dims.last().unwrap(), mode)?;
            (Oracle::new(Box::new(backend)), dims, truth, format!("tcp://{addr}"))
        }
        (None, None) => return Err("one of --model or --remote is required".into()),
    };
    let echo = ConfigEcho {
        dims: dims.clone(),
        feedback: mode.to_string(),
        workflow: a.workflow.id(),
        seed: a.seed,
        budget: a.budget,
        query_limit: a.query_limit,
        source,
    };
    let start = Instant::now();
    let result = extract(&oracle, &dims, &config);
    let secs = start.elapsed().as_secs_f64();
    let (report, ok) = match result {
        Ok(ex) => {
            let evaluation = match truth {
                Some(t) => {
                    let t = match ex.fused_pivot {
                        Some(p) => t.fuse_outputs(p)?,
                        None => t,
                    };
                    Some(evaluate(&t, &ex.network, config.domain, config.eval_samples, config.eval_seed)?)
                }
                None => None,
            };
            let mut r = RunReport::success(echo, &ex, evaluation, secs);
            if let Some(p) = &a.recovered {
                write_model_file(&ex.network, p)?;
                r.recovered_model = Some(p.display().to_string());
            }
            (r, true)
        }
        Err(f) => (RunReport::failure(echo, &f, secs), false),
    };
    print!("{}", report.render());
    if let Some(p) = &a.out {
        fs::write(p, report.to_json())?;
    }
    Ok(ok)
}

fn run(cli: Cli) -> CliResult<bool> {
    match cli.command {
        Command::Gen { dims, slopes, seed, out } => {
            let net = random_network(&dims.0, slopes, seed)?;
            match out {
                Some(p) => write_model_file(&net, p)?,
                None => print!("{}", write_model(&net)),
            }
            Ok(true)
        }
        Command::Serve { model, feedback, addr, max_connections } => {
            let mode = feedback.mode()?;
            let net = read_model_file(&model)?;
            mode.validate(net.output_dim())?;
            let listener = TcpListener::bind(&addr)?;
            eprintln!("serving {} ({mode}) on {}", model.display(), listener.local_addr()?);
            serve(listener, &net, mode, max_connections)?;
            Ok(true)
        }
        Command::Extract(a) => run_extract(&a),
        Command::Evaluate { truth, recovered, fuse, samples, seed, domain } => {
            let truth = read_model_file(&truth)?;
            let truth = match fuse {
                Some(p) => truth.fuse_outputs(p)?,
                None => truth,
            };
            let recovered = read_model_file(&recovered)?;
            let r = evaluate(&truth, &recovered, domain, samples, seed)?;
            println!("epsilon          {}", report::fmt_log2(r.r_max));
            if let Some(b) = r.bound {
                println!("bound            {}", report::fmt_log2(b));
            }
            if let Some(p) = r.max_parameter_error {
                println!("max|theta err|   {}", report::fmt_log2(p));
            }
            println!("{}", serde_json::to_string(&r)?);
            Ok(true)
        }
        Command::Bench { name, seed, out } => {
            let rows = bench::run(&name, seed)
                .ok_or_else(|| format!("unknown matrix `{name}`; known: {}", bench::MATRICES.join(", ")))?;
            print!("{}", bench::render(&rows));
            if let Some(p) = out {
                write_or_print(&serde_json::to_string_pretty(&rows)?, Some(&p))?;
            }
            Ok(rows.iter().all(|r| r.status == "ok"))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
