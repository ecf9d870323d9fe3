//! Checkpoint container: a short ASCII header followed by raw little-endian
//! `f64` sections.
//!
//! Layout, in file order:
//!
//! ```text
//! rocoma-checkpoint v1\n          magic and format version
//! kind=<policy|trainer|...>\n     what the payload represents
//! <key>=<value>\n                 free-form metadata, sorted by key
//! sections=<name>:<len>,...\n     payload directory, f64 counts
//! \n                              blank line ends the header
//! <payload>                       sections back to back, f64 LE
//! ```
//!
//! Every numeric payload round-trips bit-exactly; loaders validate the magic
//! line, the directory, and the byte length before accepting anything.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &str = "rocoma-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub sections: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Checkpoint { kind: kind.into(), meta: BTreeMap::new(), sections: Vec::new() }
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        debug_assert!(!key.contains('=') && !key.contains('\n'), "bad meta key {key}");
        self.meta.insert(key, value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    /// Metadata value parsed to a type, with a descriptive error.
    pub fn meta_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::BadCheckpoint(format!("missing metadata key {key}")))?;
        raw.parse()
            .map_err(|_| Error::BadCheckpoint(format!("metadata {key}={raw} failed to parse")))
    }

    pub fn push_section(&mut self, name: impl Into<String>, data: Vec<f64>) {
        self.sections.push((name.into(), data));
    }

    pub fn section(&self, name: &str) -> Result<&[f64]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
            .ok_or_else(|| Error::BadCheckpoint(format!("missing section {name}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "kind={}", self.kind)?;
        for (k, v) in &self.meta {
            writeln!(w, "{k}={v}")?;
        }
        let dir: Vec<String> =
            self.sections.iter().map(|(n, d)| format!("{n}:{}", d.len())).collect();
        writeln!(w, "sections={}", dir.join(","))?;
        writeln!(w)?;
        for (_, data) in &self.sections {
            for x in data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let header_end = find_blank_line(&bytes)
            .ok_or_else(|| Error::BadCheckpoint("no header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| Error::BadCheckpoint("header is not ASCII".into()))?;
        let mut lines = header.lines();
        let magic = lines.next().unwrap_or("");
        if magic != MAGIC {
            return Err(Error::BadCheckpoint(format!("bad magic line {magic:?}")));
        }
        let mut kind = None;
        let mut meta = BTreeMap::new();
        let mut dir: Vec<(String, usize)> = Vec::new();
        for line in lines {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::BadCheckpoint(format!("bad header line {line:?}")))?;
            match k {
                "kind" => kind = Some(v.to_string()),
                "sections" => {
                    for ent in v.split(',').filter(|e| !e.is_empty()) {
                        let (name, len) = ent.split_once(':').ok_or_else(|| {
                            Error::BadCheckpoint(format!("bad section entry {ent:?}"))
                        })?;
                        let len: usize = len.parse().map_err(|_| {
                            Error::BadCheckpoint(format!("bad section length {ent:?}"))
                        })?;
                        dir.push((name.to_string(), len));
                    }
                }
                _ => {
                    meta.insert(k.to_string(), v.to_string());
                }
            }
        }
        let kind = kind.ok_or_else(|| Error::BadCheckpoint("missing kind".into()))?;
        let payload = &bytes[header_end + 1..];
        let expected: usize = dir.iter().map(|(_, l)| l * 8).sum();
        if payload.len() != expected {
            return Err(Error::BadCheckpoint(format!(
                "payload is {} bytes, directory says {expected}",
                payload.len()
            )));
        }
        let mut sections = Vec::with_capacity(dir.len());
        let mut off = 0;
        for (name, len) in dir {
            let mut data = Vec::with_capacity(len);
            for i in 0..len {
                let start = off + i * 8;
                let mut buf = [0u8; 8];
                buf.copy_from_slice(&payload[start..start + 8]);
                data.push(f64::from_le_bytes(buf));
            }
            off += len * 8;
            sections.push((name, data));
        }
        Ok(Checkpoint { kind, meta, sections })
    }
}

/// Index just past the `\n` of the first empty line.
fn find_blank_line(bytes: &[u8]) -> Option<usize> {
    bytes.windows(2).position(|w| w == b"\n\n").map(|p| p + 1)
}
