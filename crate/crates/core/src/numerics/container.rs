//! Tensor container file: a text key-value header followed by raw
//! little-endian `f64` payloads.
//!
//! ```text
//! stateformer-tensors
//! format_version=1
//! meta.<key>=<value>
//! tensor=<name>|<d0,d1,...>|<byte offset into payload>
//! end_header
//! <payload bytes>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{io_err, Error};

pub const MAGIC: &str = "stateformer-tensors";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

fn malformed(reason: impl Into<String>) -> Error {
    Error::Format { what: "tensor file".into(), reason: reason.into() }
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.push((key.into(), value.to_string()));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        self.tensors.push(NamedTensor { name: name.into(), shape: shape.to_vec(), data });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), Error> {
        let mut header = format!("{MAGIC}\nformat_version={FORMAT_VERSION}\n");
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(malformed(format!("meta entry {k:?} cannot be encoded")));
            }
            header.push_str(&format!("meta.{k}={v}\n"));
        }
        let mut offset = 0usize;
        for t in &self.tensors {
            if t.name.contains(['|', '\n']) {
                return Err(malformed(format!("tensor name {:?} cannot be encoded", t.name)));
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(malformed(format!("tensor {} has shape {:?} but {} values", t.name, t.shape, t.data.len())));
            }
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor={}|{}|{}\n", t.name, dims.join(","), offset));
            offset += t.data.len() * 8;
        }
        header.push_str("end_header\n");
        let io = |e| io_err("<tensor file>", e);
        w.write_all(header.as_bytes()).map_err(io)?;
        for t in &self.tensors {
            let mut bytes = Vec::with_capacity(t.data.len() * 8);
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self, Error> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<_>| -> Result<String, Error> {
            line.clear();
            let n = r.read_line(&mut line).map_err(|e| io_err("<tensor file>", e))?;
            if n == 0 {
                return Err(malformed("unexpected end of header"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(malformed("missing magic line"));
        }
        let mut version = None;
        let mut file = TensorFile::new();
        let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
        loop {
            let l = next_line(&mut r)?;
            if l == "end_header" {
                break;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| malformed(format!("bad header line {l:?}")))?;
            if k == "format_version" {
                version = Some(v.parse::<u32>().map_err(|_| malformed(format!("bad version {v:?}")))?);
            } else if let Some(key) = k.strip_prefix("meta.") {
                file.meta.push((key.to_string(), v.to_string()));
            } else if k == "tensor" {
                let parts: Vec<&str> = v.split('|').collect();
                let [name, dims, off] = parts[..] else { return Err(malformed(format!("bad tensor line {l:?}"))) };
                let shape = if dims.is_empty() {
                    vec![]
                } else {
                    dims.split(',')
                        .map(|d| d.parse::<usize>().map_err(|_| malformed(format!("bad dims {dims:?}"))))
                        .collect::<Result<Vec<_>, _>>()?
                };
                let off = off.parse::<usize>().map_err(|_| malformed(format!("bad offset {off:?}")))?;
                entries.push((name.to_string(), shape, off));
            } else {
                return Err(malformed(format!("unknown header key {k:?}")));
            }
        }
        match version {
            Some(FORMAT_VERSION) => {}
            Some(found) => {
                return Err(Error::Version { what: "tensor file".into(), found: found as u64, expected: FORMAT_VERSION as u64 })
            }
            None => return Err(malformed("missing format_version")),
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| io_err("<tensor file>", e))?;
        for (name, shape, off) in entries {
            let n: usize = shape.iter().product();
            let bytes = payload
                .get(off..off + n * 8)
                .ok_or_else(|| malformed(format!("payload of {name} out of bounds")))?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            file.tensors.push(NamedTensor { name, shape, data });
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), Error> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| io_err(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        Self::read_from(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(values in proptest::collection::vec(-1e6f64..1e6, 0..40), rows in 1usize..4) {
            let n = values.len() / rows * rows;
            let mut f = TensorFile::new();
            f.push_meta("model.width", 32);
            f.push("a", &[rows, n / rows], values[..n].to_vec());
            f.push("scalar", &[], vec![std::f64::consts::PI]);
            let mut buf = Vec::new();
            f.write_to(&mut buf).unwrap();
            let g = TensorFile::read_from(&buf[..]).unwrap();
            prop_assert_eq!(f, g);
        }
    }

    #[test]
    fn rejects_future_version() {
        let text = format!("{MAGIC}\nformat_version=99\nend_header\n");
        assert!(matches!(TensorFile::read_from(text.as_bytes()), Err(Error::Version { found: 99, .. })));
    }

    #[test]
    fn rejects_missing_version_and_truncation() {
        let text = format!("{MAGIC}\nend_header\n");
        assert!(matches!(TensorFile::read_from(text.as_bytes()), Err(Error::Format { .. })));
        let text = format!("{MAGIC}\nformat_version=1\ntensor=x|4|0\nend_header\n");
        assert!(matches!(TensorFile::read_from(text.as_bytes()), Err(Error::Format { .. })));
    }
}
