//! Text model files.
//!
//! ```text
//! prelu-net v1
//! dims 2 3 1
//! layer 1
//! weights
//! <d_1 rows of d_0 numbers>
//! biases
//! <d_1 numbers>
//! slopes
//! <d_1 numbers>
//! layer 2
//! ...
//! ```
//!
//! Numbers are written as hexadecimal floats; the reader also accepts
//! decimal tokens. The last layer has no `slopes` section.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::PReluNetwork;
use crate::error::NetworkError;
use crate::hexfloat::{format_hex, parse_number};

pub const MODEL_HEADER: &str = "prelu-net v1";

pub fn write_model(net: &PReluNetwork) -> String {
    let mut s = String::new();
    writeln!(s, "{MODEL_HEADER}").unwrap();
    let dims: Vec<String> = net.dims().iter().map(|d| d.to_string()).collect();
    writeln!(s, "dims {}", dims.join(" ")).unwrap();
    let n = net.depth();
    for k in 1..=n + 1 {
        writeln!(s, "layer {k}").unwrap();
        writeln!(s, "weights").unwrap();
        let w = net.weight(k);
        for r in 0..w.nrows() {
            let row: Vec<String> = w.row(r).iter().map(|&v| format_hex(v)).collect();
            writeln!(s, "{}", row.join(" ")).unwrap();
        }
        writeln!(s, "biases").unwrap();
        let b: Vec<String> = net.bias(k).iter().map(|&v| format_hex(v)).collect();
        writeln!(s, "{}", b.join(" ")).unwrap();
        if k <= n {
            writeln!(s, "slopes").unwrap();
            let sl: Vec<String> = net.slopes(k).iter().map(|&v| format_hex(v)).collect();
            writeln!(s, "{}", sl.join(" ")).unwrap();
        }
    }
    s
}

struct Tokens<'a> {
    inner: std::str::SplitWhitespace<'a>,
}

impl<'a> Tokens<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str, NetworkError> {
        self.inner
            .next()
            .ok_or_else(|| NetworkError::Format(format!("unexpected end of file, expected {what}")))
    }

    fn keyword(&mut self, kw: &str) -> Result<(), NetworkError> {
        let t = self.next(kw)?;
        if t != kw {
            return Err(NetworkError::Format(format!("expected `{kw}`, found `{t}`")));
        }
        Ok(())
    }

    fn number(&mut self, what: &str) -> Result<f64, NetworkError> {
        let t = self.next(what)?;
        parse_number(t).ok_or_else(|| NetworkError::Format(format!("bad number `{t}` in {what}")))
    }

    fn usize(&mut self, what: &str) -> Result<usize, NetworkError> {
        let t = self.next(what)?;
        t.parse().map_err(|_| NetworkError::Format(format!("bad integer `{t}` in {what}")))
    }
}

pub fn read_model(text: &str) -> Result<PReluNetwork, NetworkError> {
    let mut lines = text.splitn(2, '\n');
    let header = lines.next().unwrap_or("").trim();
    if header != MODEL_HEADER {
        return Err(NetworkError::Format(format!("bad header `{header}`")));
    }
    let body = lines.next().unwrap_or("");
    let mut tok = Tokens { inner: body.split_whitespace() };
    tok.keyword("dims")?;
    // dims run until the first `layer` keyword
    let mut dims = Vec::new();
    loop {
        let t = tok.next("dims or `layer`")?;
        if t == "layer" {
            break;
        }
        dims.push(t.parse::<usize>().map_err(|_| NetworkError::Format(format!("bad dimension `{t}`")))?);
    }
    if dims.len() < 2 || dims.contains(&0) {
        return Err(NetworkError::Format(format!("degenerate dims {dims:?}")));
    }
    let layers = dims.len() - 1;
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    let mut slopes = Vec::with_capacity(layers - 1);
    for k in 1..=layers {
        if k > 1 {
            tok.keyword("layer")?;
        }
        let idx = tok.usize("layer index")?;
        if idx != k {
            return Err(NetworkError::Format(format!("expected layer {k}, found {idx}")));
        }
        let (rows, cols) = (dims[k], dims[k - 1]);
        tok.keyword("weights")?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(tok.number(&format!("layer {k} weights"))?);
        }
        weights.push(DMatrix::from_row_slice(rows, cols, &data));
        tok.keyword("biases")?;
        let mut b = Vec::with_capacity(rows);
        for _ in 0..rows {
            b.push(tok.number(&format!("layer {k} biases"))?);
        }
        biases.push(DVector::from_vec(b));
        if k < layers {
            tok.keyword("slopes")?;
            let mut s = Vec::with_capacity(rows);
            for _ in 0..rows {
                s.push(tok.number(&format!("layer {k} slopes"))?);
            }
            slopes.push(DVector::from_vec(s));
        }
    }
    if let Some(extra) = tok.inner.next() {
        return Err(NetworkError::Format(format!("trailing token `{extra}`")));
    }
    PReluNetwork::new(weights, biases, slopes)
}

pub fn write_model_file(net: &PReluNetwork, path: impl AsRef<Path>) -> std::io::Result<()> {
    std::fs::write(path, write_model(net))
}

pub fn read_model_file(path: impl AsRef<Path>) -> Result<PReluNetwork, NetworkError> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| NetworkError::Format(format!("{}: {e}", path.as_ref().display())))?;
    read_model(&text)
}
