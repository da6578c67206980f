//! `ECNN1` checkpoints: header line, network description line, parameter
//! count, then one parameter per line in shortest round-trip notation.

use std::fmt::Write as _;

use super::NetworkSpec;
use crate::error::{parse_err, Result};
use crate::textio::{parse_token, LineCursor};

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: Vec<f64>,
}

pub fn write_checkpoint(checkpoint: &Checkpoint) -> Vec<u8> {
    let mut out = String::with_capacity(checkpoint.params.len() * 24 + 256);
    out.push_str("ECNN1\n");
    writeln!(out, "{}", checkpoint.spec).unwrap();
    writeln!(out, "{}", checkpoint.params.len()).unwrap();
    for p in &checkpoint.params {
        writeln!(out, "{p:e}").unwrap();
    }
    out.into_bytes()
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| parse_err(e.valid_up_to(), "checkpoint is not valid UTF-8"))?;
    let mut cursor = LineCursor::new(text);
    let (off, magic) = cursor.expect_line("ECNN1 header")?;
    if magic.trim() != "ECNN1" {
        return Err(parse_err(off, "missing ECNN1 header"));
    }
    let (off, desc) = cursor.expect_line("network description")?;
    let spec: NetworkSpec = desc.parse().map_err(|e: crate::Error| parse_err(off, e.to_string()))?;
    let (off, count_line) = cursor.expect_line("parameter count")?;
    let count: usize = parse_token(off, count_line, count_line.trim(), "parameter count")?;
    let expected = spec.param_count()?;
    if count != expected {
        return Err(parse_err(
            off,
            format!("network needs {expected} parameters, header declares {count}"),
        ));
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let (off, line) = cursor.expect_line("parameter")?;
        let v: f64 = parse_token(off, line, line.trim(), "parameter")?;
        params.push(v);
    }
    if let Some((off, line)) = cursor.next_line() {
        if !line.trim().is_empty() {
            return Err(parse_err(off, "trailing data after parameters"));
        }
    }
    Ok(Checkpoint { spec, params })
}
