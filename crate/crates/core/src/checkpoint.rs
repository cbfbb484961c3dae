//! Manifest-plus-records files used for parameter checkpoints and corpora.
//!
//! Layout: UTF-8 `key=value` lines, a terminator line `---`, then a
//! little-endian u64 record count followed by that many tensor records.

use std::fmt::Display;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

const TERMINATOR: &str = "---";

/// Ordered plain-text `key=value` block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        let value = value.to_string();
        assert!(
            !key.contains(['=', '\n']) && !value.contains('\n'),
            "manifest entries are single-line"
        );
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        self
    }

    pub fn with(mut self, key: &str, value: impl Display) -> Self {
        self.set(key, value);
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format("manifest", format!("missing key `{key}`")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::format("manifest", format!("bad value for `{key}`: {raw}")))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = Manifest::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("manifest", format!("line `{line}`")))?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }
}

pub fn write_records<W: Write>(w: &mut W, manifest: &Manifest, tensors: &[Tensor]) -> std::io::Result<()> {
    w.write_all(manifest.to_text().as_bytes())?;
    w.write_all(TERMINATOR.as_bytes())?;
    w.write_all(b"\n")?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for t in tensors {
        t.write_record(w)?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(r: &mut R) -> Result<(Manifest, Vec<Tensor>)> {
    let mut text = String::new();
    loop {
        let mut line = String::new();
        let n = r
            .read_line(&mut line)
            .map_err(|e| Error::format("manifest", e.to_string()))?;
        if n == 0 {
            return Err(Error::format("manifest", "missing terminator"));
        }
        if line.trim_end() == TERMINATOR {
            break;
        }
        text.push_str(&line);
    }
    let manifest = Manifest::from_text(&text)?;
    let mut word = [0u8; 8];
    r.read_exact(&mut word)
        .map_err(|e| Error::format("record count", e.to_string()))?;
    let count = u64::from_le_bytes(word) as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        tensors.push(Tensor::read_record(r)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::format("records", e.to_string()))? != 0 {
        return Err(Error::format("records", "trailing bytes"));
    }
    Ok((manifest, tensors))
}

pub fn save(path: &Path, manifest: &Manifest, tensors: &[Tensor]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_records(&mut w, manifest, tensors)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Manifest, Vec<Tensor>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(&mut BufReader::new(file))
}

/// Writes a parameter set; the manifest gains a `params` key listing names in order.
pub fn save_params(path: &Path, manifest: &Manifest, params: &ParamSet) -> Result<()> {
    params.validate()?;
    let manifest = manifest.clone().with("params", params.names().join(","));
    let values: Vec<Tensor> = params
        .tensors()
        .iter()
        .map(|t| Tensor::new(t.shape().to_vec(), t.data().to_vec()))
        .collect::<Result<_>>()?;
    save(path, &manifest, &values)
}
