//! Flat-text tensor files used for model checkpoints.
//!
//! ```text
//! nicf-tensors v1
//! meta <key> <value>
//! tensor <name> <rows> <cols>
//! <row of space-separated values>
//! ...
//! ```
//!
//! Values are written with the shortest round-trip `f64` formatting, so a
//! save/load cycle is bit-exact. Loading rejects shape mismatches.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAGIC: &str = "nicf-tensors v1";

/// An ordered collection of named tensors plus string metadata.
#[derive(Debug, Clone, Default)]
pub struct TensorFile {
    meta: BTreeMap<String, String>,
    tensors: Vec<(String, Matrix)>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key '{key}'")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("meta key '{key}' is not an integer")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("meta key '{key}' is not a number")))
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    /// Remove and return a tensor, enforcing the expected shape.
    pub fn take_tensor(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let idx = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        let (_, m) = self.tensors.remove(idx);
        if m.rows() != rows || m.cols() != cols {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {}x{}, expected {rows}x{cols}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(m)
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        for (key, value) in &self.meta {
            writeln!(w, "meta {key} {value}")?;
        }
        for (name, m) in &self.tensors {
            writeln!(w, "tensor {name} {} {}", m.rows(), m.cols())?;
            for i in 0..m.rows() {
                let row: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
                writeln!(w, "{}", row.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn read(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines();
        let first = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Checkpoint("empty tensor file".into()))?;
        if first.trim() != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad header '{}', expected '{MAGIC}'",
                first.trim()
            )));
        }
        let mut out = TensorFile::new();
        let mut pending: Option<(String, usize, usize, Vec<f64>)> = None;
        for line in lines {
            let line = line?;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (key, value) = rest
                    .split_once(' ')
                    .ok_or_else(|| Error::Checkpoint(format!("bad meta line '{line}'")))?;
                out.meta.insert(key.to_string(), value.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                finish_tensor(&mut out, pending.take())?;
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(Error::Checkpoint(format!("bad tensor line '{line}'")));
                }
                let rows: usize = parts[1]
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad row count in '{line}'")))?;
                let cols: usize = parts[2]
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad col count in '{line}'")))?;
                pending = Some((parts[0].to_string(), rows, cols, Vec::with_capacity(rows * cols)));
            } else {
                let p = pending.as_mut().ok_or_else(|| {
                    Error::Checkpoint(format!("value line outside any tensor: '{line}'"))
                })?;
                for tok in line.split_whitespace() {
                    let v: f64 = tok
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad value '{tok}'")))?;
                    p.3.push(v);
                }
            }
        }
        finish_tensor(&mut out, pending.take())?;
        Ok(out)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w)
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }
}

fn finish_tensor(out: &mut TensorFile, pending: Option<(String, usize, usize, Vec<f64>)>) -> Result<()> {
    if let Some((name, rows, cols, data)) = pending {
        if data.len() != rows * cols {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        out.tensors.push((name, Matrix::from_vec(rows, cols, data)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut tf = TensorFile::new();
        tf.set_meta("dim", 3usize);
        tf.set_meta("note", "alpha beta");
        let m = Matrix::from_rows(&[
            &[0.1, -2.5e-17, 1.0 / 3.0],
            &[f64::MIN_POSITIVE, 12345.6789, -0.0],
        ]);
        tf.push_tensor("weights", m.clone());

        let mut buf = Vec::new();
        tf.write(&mut buf).unwrap();
        let mut back = TensorFile::read(buf.as_slice()).unwrap();
        assert_eq!(back.meta("dim").unwrap(), "3");
        assert_eq!(back.meta("note").unwrap(), "alpha beta");
        let m2 = back.take_tensor("weights", 2, 3).unwrap();
        assert_eq!(m.as_slice(), m2.as_slice());
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut tf = TensorFile::new();
        tf.push_tensor("w", Matrix::zeros(2, 2));
        let mut buf = Vec::new();
        tf.write(&mut buf).unwrap();
        let mut back = TensorFile::read(buf.as_slice()).unwrap();
        assert!(back.take_tensor("w", 3, 2).is_err());
    }

    #[test]
    fn rejects_missing_tensor_and_bad_header() {
        let mut tf = TensorFile::new();
        assert!(tf.take_tensor("nope", 1, 1).is_err());
        assert!(TensorFile::read("garbage\n".as_bytes()).is_err());
    }

    #[test]
    fn rejects_truncated_values() {
        let text = "nicf-tensors v1\ntensor w 2 2\n1 2\n";
        assert!(TensorFile::read(text.as_bytes()).is_err());
    }
}
