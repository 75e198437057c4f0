//! Tensor dump format: one JSON header line `{"shape":[...]}` terminated by
//! `\n`, followed by the little-endian float64 payload in row-major order.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{numel, Tensor};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
}

pub fn write_dump<W: Write>(tensor: &Tensor, mut out: W) -> Result<()> {
    let header = serde_json::to_string(&Header { shape: tensor.shape().to_vec() })?;
    out.write_all(header.as_bytes())?;
    out.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(tensor.numel() * 8);
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads exactly one dump from `input`, leaving the reader positioned after it.
pub fn read_dump<R: BufRead>(mut input: R) -> Result<Tensor> {
    let mut line = Vec::new();
    input.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format("tensor dump header is not newline-terminated".into()));
    }
    let header: Header = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| Error::Format(format!("tensor dump header: {e}")))?;
    let n = numel(&header.shape);
    let mut payload = vec![0u8; n * 8];
    input
        .read_exact(&mut payload)
        .map_err(|e| Error::Format(format!("tensor dump payload ({n} values): {e}")))?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(header.shape, data)
}

impl Tensor {
    pub fn to_dump_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_dump(self, &mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_dump_bytes(bytes: &[u8]) -> Result<Self> {
        read_dump(bytes)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_dump_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_dump_bytes(&std::fs::read(path)?)
    }
}
