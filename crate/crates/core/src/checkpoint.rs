//! Text checkpoint of network parameters.
//!
//! ```text
//! CAVAT-CHECKPOINT 1
//! arch hidden=8,16 classes=2 kernel=3
//! tensors 6
//! conv0.weight 4 8 1 3 3
//! <72 space-separated values>
//! conv0.bias 1 8
//! <8 values>
//! ...
//! ```
//!
//! Each tensor is a header line `name rank dim…` followed by one line with
//! its values in row-major order, written in shortest round-trip form.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::net::{ArchConfig, NetError, NetworkParams, ParamTensor};

pub const MAGIC: &str = "CAVAT-CHECKPOINT 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Net(#[from] NetError),
}

pub fn to_string(params: &NetworkParams) -> String {
    let arch = params.arch();
    let hidden: Vec<String> = arch.hidden.iter().map(|h| h.to_string()).collect();
    let mut out = format!(
        "{MAGIC}\narch hidden={} classes={} kernel={}\ntensors {}\n",
        hidden.join(","),
        arch.classes,
        arch.kernel,
        params.tensors().len()
    );
    for t in params.tensors() {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("{} {} {}\n", t.name, t.shape.len(), dims.join(" ")));
        let values: Vec<String> = t.data.iter().map(|v| v.to_string()).collect();
        out.push_str(&values.join(" "));
        out.push('\n');
    }
    out
}

pub fn from_str(text: &str) -> Result<NetworkParams, CheckpointError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| {
        lines.next().ok_or_else(|| CheckpointError::Parse {
            line: 0,
            message: format!("unexpected end of file, expected {what}"),
        })
    };
    let perr = |line: usize, message: String| CheckpointError::Parse { line, message };

    let (ln, magic) = next("magic")?;
    if magic.trim() != MAGIC {
        return Err(perr(ln, format!("bad magic {magic:?}")));
    }
    let (ln, arch_line) = next("arch line")?;
    let mut arch = ArchConfig {
        hidden: Vec::new(),
        classes: 0,
        kernel: 0,
    };
    let mut fields = arch_line.split_whitespace();
    if fields.next() != Some("arch") {
        return Err(perr(ln, "expected `arch`".into()));
    }
    for field in fields {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| perr(ln, format!("bad field {field:?}")))?;
        let num = |v: &str| v.parse::<usize>().map_err(|_| perr(ln, format!("bad number {v:?}")));
        match key {
            "hidden" if value.is_empty() => {}
            "hidden" => arch.hidden = value.split(',').map(num).collect::<Result<_, _>>()?,
            "classes" => arch.classes = num(value)?,
            "kernel" => arch.kernel = num(value)?,
            _ => return Err(perr(ln, format!("unknown field {key:?}"))),
        }
    }
    let (ln, count_line) = next("tensor count")?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| perr(ln, format!("expected `tensors N`, got {count_line:?}")))?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, header) = next("tensor header")?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() < 2 {
            return Err(perr(ln, format!("bad tensor header {header:?}")));
        }
        let rank: usize = parts[1].parse().map_err(|_| perr(ln, "bad rank".into()))?;
        if parts.len() != 2 + rank {
            return Err(perr(ln, format!("rank {rank} but {} dims", parts.len() - 2)));
        }
        let shape: Vec<usize> = parts[2..]
            .iter()
            .map(|d| d.parse().map_err(|_| perr(ln, format!("bad dim {d:?}"))))
            .collect::<Result<_, _>>()?;
        let (ln, values) = next("tensor values")?;
        let data: Vec<f64> = values
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| perr(ln, format!("bad value {v:?}"))))
            .collect::<Result<_, _>>()?;
        if data.len() != shape.iter().product::<usize>() {
            return Err(perr(ln, format!("{} values for shape {shape:?}", data.len())));
        }
        tensors.push(ParamTensor {
            name: parts[0].to_string(),
            shape,
            data,
        });
    }
    Ok(NetworkParams::from_tensors(&arch, tensors)?)
}

pub fn save(params: &NetworkParams, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_string(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NetworkParams, CheckpointError> {
    from_str(&fs::read_to_string(path)?)
}
