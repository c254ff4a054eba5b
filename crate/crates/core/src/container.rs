//! Binary tensor container shared by volume, bag and attention files.
//!
//! Layout: one fixed-length header line of [`HEADER_LEN`] bytes
//! (`MAGIC key=value key=value ...`, space padded, terminated by `\n`),
//! followed by `shape` product little-endian `f32` values in row-major order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 512;
pub const DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub magic: String,
    pub shape: Vec<usize>,
    /// Extra header fields, written in key order after `shape` and `dtype`.
    pub fields: BTreeMap<String, String>,
    pub payload: Vec<f32>,
}

impl Container {
    pub fn new(magic: &str, shape: Vec<usize>, payload: Vec<f32>) -> Self {
        Self { magic: magic.to_string(), shape, fields: BTreeMap::new(), payload }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.fields.insert(key.to_string(), value.to_string());
        self
    }

    pub fn field(&self, key: &str) -> Result<&str> {
        self.fields.get(key).map(String::as_str).ok_or_else(|| Error::format(key, "missing header field"))
    }

    pub fn parse_field<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.field(key)?.parse().map_err(|e: T::Err| Error::format(key, e.to_string()))
    }

    fn header_line(&self) -> Result<Vec<u8>> {
        let shape = self.shape.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut line = format!("{} shape={} dtype={}", self.magic, shape, DTYPE);
        for (k, v) in &self.fields {
            if k.contains(['=', ' ']) || v.contains([' ', '\n']) || v.is_empty() {
                return Err(Error::format(k, "header keys/values must be non-empty and free of spaces"));
            }
            line.push_str(&format!(" {k}={v}"));
        }
        if line.len() > HEADER_LEN - 1 {
            return Err(Error::format("header", format!("{} bytes exceeds {}", line.len(), HEADER_LEN - 1)));
        }
        let mut bytes = line.into_bytes();
        bytes.resize(HEADER_LEN - 1, b' ');
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let expected: usize = self.shape.iter().product();
        if expected != self.payload.len() {
            return Err(Error::shape(&self.shape, self.payload.len()));
        }
        if let Some(i) = self.payload.iter().position(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!("non-finite value at element {i}")));
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.header_line()?)?;
        for v in &self.payload {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a container and checks its magic.
    pub fn read(path: &Path, magic: &str) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header = vec![0u8; HEADER_LEN];
        let mut got = 0;
        while got < HEADER_LEN {
            let n = r.read(&mut header[got..])?;
            if n == 0 {
                return Err(Error::format("header", format!("file ends after {got} of {HEADER_LEN} header bytes")));
            }
            got += n;
        }
        if header[HEADER_LEN - 1] != b'\n' {
            return Err(Error::format("header", "missing terminating newline"));
        }
        let text = std::str::from_utf8(&header[..HEADER_LEN - 1]).map_err(|_| Error::format("header", "not UTF-8"))?;
        let mut tokens = text.split_whitespace();
        let found = tokens.next().unwrap_or("");
        if found != magic {
            return Err(Error::format("magic", format!("expected {magic:?}, found {found:?}")));
        }
        let mut fields = BTreeMap::new();
        for tok in tokens {
            let (k, v) = tok.split_once('=').ok_or_else(|| Error::format("header", format!("malformed token {tok:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let shape_text = fields.remove("shape").ok_or_else(|| Error::format("shape", "missing header field"))?;
        let shape = shape_text
            .split(',')
            .map(|s| s.parse::<usize>().map_err(|e| Error::format("shape", format!("{s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        match fields.remove("dtype").as_deref() {
            Some(DTYPE) => {}
            Some(other) => return Err(Error::format("dtype", format!("unsupported {other:?}"))),
            None => return Err(Error::format("dtype", "missing header field")),
        }
        let expected: usize = shape.iter().product();
        let mut bytes = Vec::with_capacity(expected * 4);
        r.read_to_end(&mut bytes)?;
        if bytes.len() < expected * 4 {
            return Err(Error::Truncated { expected, found: bytes.len() / 4 });
        }
        if bytes.len() > expected * 4 {
            return Err(Error::format("payload", format!("{} trailing bytes", bytes.len() - expected * 4)));
        }
        let payload = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self { magic: magic.to_string(), shape, fields, payload })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let c = Container::new("DGATEST1", vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-8, 7.0]).with("age", 61.25);
        c.write(&p).unwrap();
        let back = Container::read(&p, "DGATEST1").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.parse_field::<f64>("age").unwrap(), 61.25);
        assert!(matches!(Container::read(&p, "OTHER"), Err(Error::Format { field, .. }) if field == "magic"));
        assert!(matches!(back.parse_field::<f64>("nope"), Err(Error::Format { field, .. }) if field == "nope"));
    }

    #[test]
    fn rejects_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let c = Container::new("M", vec![1], vec![f32::NAN]);
        assert!(c.write(&dir.path().join("n.bin")).is_err());
    }
}
