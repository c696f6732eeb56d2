//! Plain-text parameter checkpoints.
//!
//! ```text
//! gama-checkpoint v1
//! widths 2 64 32 2
//! activation tanh
//! embedding_layer 2
//! seed 7
//! weight 0 64 2
//! <64 lines, 2 values each: row-major>
//! bias 0 64
//! <1 line, 64 values>
//! weight 1 32 64
//! ...
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a load after a
//! save reproduces every parameter bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use super::{Activation, NetParams, NetSpec};
use crate::error::{GamaError, Result};

const MAGIC: &str = "gama-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetSpec,
    pub params: NetParams,
    pub seed: u64,
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> String {
    let mut out = String::new();
    let spec = &ckpt.spec;
    let widths: Vec<String> = spec.layer_widths.iter().map(ToString::to_string).collect();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "widths {}", widths.join(" ")).unwrap();
    writeln!(out, "activation {}", spec.activation.name()).unwrap();
    writeln!(out, "embedding_layer {}", spec.embedding_layer).unwrap();
    writeln!(out, "seed {}", ckpt.seed).unwrap();
    for (i, layer) in ckpt.params.layers.iter().enumerate() {
        let (rows, cols) = layer.weight.shape();
        writeln!(out, "weight {i} {rows} {cols}").unwrap();
        for r in 0..rows {
            let line: Vec<String> = (0..cols).map(|c| layer.weight[(r, c)].to_string()).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
        writeln!(out, "bias {i} {}", layer.bias.len()).unwrap();
        let line: Vec<String> = layer.bias.iter().map(ToString::to_string).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    out
}

fn bad(line: usize, what: impl Into<String>) -> GamaError {
    GamaError::Parse {
        row: line,
        detail: what.into(),
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok(l.trim())
            }
            None => Err(bad(self.last + 1, "unexpected end of checkpoint")),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let line = self.next()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(bad(self.last, format!("expected `{key}`")));
        }
        Ok(parts.collect())
    }

    fn numbers(&mut self, expected: usize) -> Result<Vec<f64>> {
        let line = self.next()?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(self.last, e.to_string()))?;
        if vals.len() != expected {
            return Err(bad(self.last, format!("expected {expected} values, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(bad(self.last, "non-finite parameter"));
        }
        Ok(vals)
    }
}

fn parse_usize(s: &str, line: usize) -> Result<usize> {
    s.parse().map_err(|_| bad(line, format!("`{s}` is not a nonnegative integer")))
}

pub fn read_checkpoint(text: &str) -> Result<Checkpoint> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    if lines.next()? != MAGIC {
        return Err(bad(1, "missing checkpoint header"));
    }
    let widths = lines
        .keyed("widths")?
        .into_iter()
        .map(|w| parse_usize(w, 2))
        .collect::<Result<Vec<_>>>()?;
    let activation = match lines.keyed("activation")?.as_slice() {
        ["tanh"] => Activation::Tanh,
        ["relu"] => Activation::Relu,
        other => return Err(bad(3, format!("unknown activation {other:?}"))),
    };
    let embedding_layer = match lines.keyed("embedding_layer")?.as_slice() {
        [v] => parse_usize(v, 4)?,
        _ => return Err(bad(4, "malformed embedding_layer")),
    };
    let seed = match lines.keyed("seed")?.as_slice() {
        [v] => v.parse::<u64>().map_err(|e| bad(5, e.to_string()))?,
        _ => return Err(bad(5, "malformed seed")),
    };
    let spec = NetSpec::new(widths, activation, embedding_layer)?;
    let mut params = NetParams::zeros(&spec);
    for (i, layer) in params.layers.iter_mut().enumerate() {
        let (rows, cols) = layer.weight.shape();
        let head = lines.keyed("weight")?;
        let line = lines.last;
        let dims = head.iter().map(|v| parse_usize(v, line)).collect::<Result<Vec<_>>>()?;
        if dims != [i, rows, cols] {
            return Err(bad(line, format!("weight header {dims:?} does not match spec")));
        }
        for r in 0..rows {
            for (c, v) in lines.numbers(cols)?.into_iter().enumerate() {
                layer.weight[(r, c)] = v;
            }
        }
        let head = lines.keyed("bias")?;
        let line = lines.last;
        let dims = head.iter().map(|v| parse_usize(v, line)).collect::<Result<Vec<_>>>()?;
        if dims != [i, rows] {
            return Err(bad(line, format!("bias header {dims:?} does not match spec")));
        }
        for (r, v) in lines.numbers(rows)?.into_iter().enumerate() {
            layer.bias[r] = v;
        }
    }
    Ok(Checkpoint { spec, params, seed })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, write_checkpoint(ckpt)).map_err(|e| GamaError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| GamaError::io(path, e))?;
    read_checkpoint(&text)
}
