//! Flat, self-describing model files.
//!
//! ```text
//! ubalance-model
//! format_version 1
//! kind gatedmlp-v1
//! meta <key> <value>
//! tensor <name> <rows> <cols>
//! <row 0 values, space separated>
//! ...
//! end
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so
//! reading a file back reproduces every parameter bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::params::{ParamSet, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "ubalance-model";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub params: ParamSet,
}

impl ModelFile {
    pub fn new(kind: impl Into<String>, params: ParamSet) -> Self {
        ModelFile {
            kind: kind.into(),
            meta: Vec::new(),
            params,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_owned(), value.to_string()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::parse("model file", 0, format!("missing meta key {key:?}")))?;
        raw.parse()
            .map_err(|_| Error::parse("model file", 0, format!("bad value for {key}: {raw:?}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Contract(format!(
                "model file kind is {:?}, expected {kind:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(out, "format_version {FORMAT_VERSION}");
        let _ = writeln!(out, "kind {}", self.kind);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for t in &self.params.tensors {
            let _ = writeln!(out, "tensor {} {} {}", t.name, t.rows, t.cols);
            for r in 0..t.rows {
                let row: Vec<String> = t.row(r).iter().map(f64::to_string).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, m: String| Error::parse(source, line as u64 + 1, m);
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => return Err(err(0, "not a model file".into())),
        }
        let mut kind = None;
        let mut meta = Vec::new();
        let mut tensors = Vec::new();
        let mut version_seen = false;
        let mut ended = false;
        while let Some((ln, line)) = lines.next() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("format_version") => {
                    let v: u32 = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| err(ln, "bad format_version".into()))?;
                    if v != FORMAT_VERSION {
                        return Err(err(ln, format!("unsupported format_version {v}")));
                    }
                    version_seen = true;
                }
                Some("kind") => kind = parts.next().map(str::to_owned),
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| err(ln, "meta without key".into()))?;
                    let value = line
                        .splitn(3, ' ')
                        .nth(2)
                        .unwrap_or("")
                        .to_owned();
                    meta.push((key.to_owned(), value));
                }
                Some("tensor") => {
                    let name = parts.next().ok_or_else(|| err(ln, "tensor without name".into()))?;
                    let rows: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| err(ln, "bad tensor rows".into()))?;
                    let cols: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| err(ln, "bad tensor cols".into()))?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (rl, row) = lines
                            .next()
                            .ok_or_else(|| err(ln, format!("tensor {name} truncated")))?;
                        let before = data.len();
                        for tok in row.split_whitespace() {
                            data.push(
                                tok.parse::<f64>()
                                    .map_err(|_| err(rl, format!("bad value {tok:?}")))?,
                            );
                        }
                        if data.len() - before != cols {
                            return Err(err(rl, format!("tensor {name}: expected {cols} values")));
                        }
                    }
                    tensors.push(Tensor::from_data(name, rows, cols, data)?);
                }
                Some("end") => {
                    ended = true;
                    break;
                }
                Some(other) => return Err(err(ln, format!("unexpected token {other:?}"))),
                None => {}
            }
        }
        if !version_seen {
            return Err(err(0, "missing format_version".into()));
        }
        if !ended {
            return Err(err(0, "missing end marker".into()));
        }
        Ok(ModelFile {
            kind: kind.ok_or_else(|| err(0, "missing kind".into()))?,
            meta,
            params: ParamSet::new(tensors),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::telemetry::write_file(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_files() {
        assert!(ModelFile::parse("nope\n", "x").is_err());
        assert!(ModelFile::parse("ubalance-model\nformat_version 9\nkind k\nend\n", "x").is_err());
        let truncated = "ubalance-model\nformat_version 1\nkind k\ntensor w 2 2\n1 2\n";
        assert!(ModelFile::parse(truncated, "x").is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(
            vals in proptest::collection::vec(
                proptest::num::f64::POSITIVE
                    | proptest::num::f64::NEGATIVE
                    | proptest::num::f64::NORMAL
                    | proptest::num::f64::SUBNORMAL
                    | proptest::num::f64::ZERO
                    | proptest::num::f64::INFINITE,
                1..40,
            ),
            note in "[a-z0-9 ._-]{0,20}"
        ) {
            let n = vals.len();
            let params = ParamSet::new(vec![
                Tensor::from_data("w", 1, n, vals).unwrap(),
                Tensor::from_data("b", 2, 1, vec![-0.0, 1e-310]).unwrap(),
            ]);
            let file = ModelFile::new("test-v1", params).with_meta("note", &note);
            let back = ModelFile::parse(&file.to_text(), "mem").unwrap();
            prop_assert_eq!(&back.kind, &file.kind);
            prop_assert_eq!(back.meta("note"), Some(note.as_str()));
            for (a, b) in back.params.values().zip(file.params.values()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
