//! Line-based TCP transport for the oracle.
//!
//! Request `Q v1 .. vd`; responses `R y..`, `S q`, `P q..`, `T l1 q1 .. lm qm`
//! or `E message`. Numbers use 17 significant digits.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Mutex;

use super::{feedback_from_logits, Backend, Feedback, FeedbackMode};
use crate::error::OracleError;
use crate::hexfloat::{format_dec17, parse_number};
use crate::network::PReluNetwork;

pub fn encode_request(x: &[f64]) -> String {
    let mut s = String::from("Q");
    for v in x {
        s.push(' ');
        s.push_str(&format_dec17(*v));
    }
    s
}

pub fn encode_feedback(fb: &Feedback) -> String {
    let join = |vals: &[f64]| vals.iter().map(|v| format_dec17(*v)).collect::<Vec<_>>().join(" ");
    match fb {
        Feedback::Raw(y) => format!("R {}", join(y)),
        Feedback::Sigmoid(q) => format!("S {}", format_dec17(*q)),
        Feedback::Softmax(q) => format!("P {}", join(q)),
        Feedback::TopM(pairs) => {
            let body: Vec<String> = pairs.iter().map(|(l, q)| format!("{l} {}", format_dec17(*q))).collect();
            format!("T {}", body.join(" "))
        }
    }
}

fn numbers(toks: &[&str]) -> Result<Vec<f64>, String> {
    toks.iter().map(|t| parse_number(t).ok_or_else(|| format!("bad number `{t}`"))).collect()
}

pub fn decode_feedback(line: &str) -> Result<Feedback, OracleError> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    let bad = |m: String| OracleError::Transport(m);
    match toks.first().copied() {
        Some("R") => Ok(Feedback::Raw(numbers(&toks[1..]).map_err(bad)?)),
        Some("S") if toks.len() == 2 => Ok(Feedback::Sigmoid(numbers(&toks[1..]).map_err(bad)?[0])),
        Some("P") => Ok(Feedback::Softmax(numbers(&toks[1..]).map_err(bad)?)),
        Some("T") if toks.len() % 2 == 1 => {
            let mut pairs = Vec::new();
            for c in toks[1..].chunks(2) {
                let l: usize = c[0].parse().map_err(|_| bad(format!("bad label `{}`", c[0])))?;
                let q = parse_number(c[1]).ok_or_else(|| bad(format!("bad score `{}`", c[1])))?;
                pairs.push((l, q));
            }
            Ok(Feedback::TopM(pairs))
        }
        Some("E") => Err(OracleError::Transport(format!("server: {}", toks[1..].join(" ")))),
        _ => Err(bad(format!("malformed response `{line}`"))),
    }
}

/// Answers one request line.
pub fn handle_line(net: &PReluNetwork, mode: FeedbackMode, line: &str) -> String {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.first() != Some(&"Q") {
        return "E expected `Q v1 .. vd`".into();
    }
    let x = match numbers(&toks[1..]) {
        Ok(x) => x,
        Err(e) => return format!("E {e}"),
    };
    if x.len() != net.input_dim() {
        return format!("E input has length {}, expected {}", x.len(), net.input_dim());
    }
    encode_feedback(&feedback_from_logits(net.eval(&x), mode))
}

/// Serves connections one at a time until `max_connections` have been
/// handled (forever when `None`).
pub fn serve(
    listener: TcpListener,
    net: &PReluNetwork,
    mode: FeedbackMode,
    max_connections: Option<usize>,
) -> std::io::Result<()> {
    mode.validate(net.output_dim()).map_err(|e| std::io::Error::other(e.to_string()))?;
    let mut served = 0;
    for stream in listener.incoming() {
        let stream = stream?;
        stream.set_nodelay(true).ok();
        let mut writer = stream.try_clone()?;
        for line in BufReader::new(stream).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut reply = handle_line(net, mode, &line);
            reply.push('\n');
            writer.write_all(reply.as_bytes())?;
        }
        served += 1;
        if max_connections.is_some_and(|m| served >= m) {
            break;
        }
    }
    Ok(())
}

/// Client side of the transport.
pub struct RemoteBackend {
    conn: Mutex<(BufReader<TcpStream>, TcpStream)>,
    input_dim: usize,
    output_dim: usize,
    mode: FeedbackMode,
}

impl RemoteBackend {
    /// The attacker knows the architecture and the feedback type; responses
    /// that do not match `mode` are reported as transport errors.
    pub fn connect(
        addr: impl ToSocketAddrs,
        input_dim: usize,
        output_dim: usize,
        mode: FeedbackMode,
    ) -> Result<Self, OracleError> {
        mode.validate(output_dim)?;
        let stream = TcpStream::connect(addr).map_err(|e| OracleError::Transport(e.to_string()))?;
        stream.set_nodelay(true).ok();
        let reader = BufReader::new(stream.try_clone().map_err(|e| OracleError::Transport(e.to_string()))?);
        Ok(Self { conn: Mutex::new((reader, stream)), input_dim, output_dim, mode })
    }
}

impl Backend for RemoteBackend {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn mode(&self) -> FeedbackMode {
        self.mode
    }

    fn answer(&self, x: &[f64]) -> Result<Feedback, OracleError> {
        let io = |e: std::io::Error| OracleError::Transport(e.to_string());
        let mut guard = self.conn.lock().unwrap();
        let (reader, writer) = &mut *guard;
        let mut request = encode_request(x);
        request.push('\n');
        writer.write_all(request.as_bytes()).map_err(io)?;
        let mut line = String::new();
        if reader.read_line(&mut line).map_err(io)? == 0 {
            return Err(OracleError::Transport("connection closed".into()));
        }
        let fb = decode_feedback(line.trim())?;
        let ok = match (&fb, self.mode) {
            (Feedback::Raw(y), FeedbackMode::Raw) => y.len() == self.output_dim,
            (Feedback::Sigmoid(_), FeedbackMode::Sigmoid) => true,
            (Feedback::Softmax(q), FeedbackMode::Softmax) => q.len() == self.output_dim,
            (Feedback::TopM(p), FeedbackMode::TopM(m)) => p.len() == m,
            _ => false,
        };
        if !ok {
            return Err(OracleError::Transport(format!("response does not match mode {}", self.mode)));
        }
        Ok(fb)
    }
}
