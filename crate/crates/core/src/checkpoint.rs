//! Versioned plain-text container of metadata and named 2-D tensors.
//!
//! ```text
//! partsep-checkpoint v1
//! kind=neural
//! arch=lstm
//! tensors=2
//! tensor head.w 2 3
//! 0.1 0.2 0.3
//! 0.4 0.5 0.6
//! tensor head.b 1 3
//! 0 0 0
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "partsep-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Array2<f32>)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            ..Self::default()
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.push((key.into(), value.into()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.meta(key).ok_or_else(|| bad(format!("missing key {key:?}")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}")?;
        writeln!(out, "kind={}", self.kind)?;
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') || k == "kind" || k == "tensors" {
                return Err(bad(format!("unwritable metadata key {k:?}")));
            }
            writeln!(out, "{k}={v}")?;
        }
        writeln!(out, "tensors={}", self.tensors.len())?;
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(bad(format!("tensor name {name:?} contains whitespace")));
            }
            writeln!(out, "tensor {name} {} {}", t.nrows(), t.ncols())?;
            for row in t.rows() {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
        Ok(())
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            self.write(&mut w)?;
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(fs::File::open(path)?)
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut lines = BufReader::new(input).lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, line)) => Ok((i + 1, line?)),
                None => Err(bad(format!("unexpected end of file, expected {what}"))),
            }
        };
        let (_, header) = next("header")?;
        let version = header
            .strip_prefix(CHECKPOINT_MAGIC)
            .and_then(|v| v.trim().strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| bad("not a checkpoint file"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::default();
        let count = loop {
            let (n, line) = next("metadata")?;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {n}: expected key=value")))?;
            match k {
                "kind" => ck.kind = v.to_string(),
                "tensors" => break v.parse::<usize>().map_err(|_| bad(format!("line {n}: bad tensor count")))?,
                _ => ck.meta.push((k.to_string(), v.to_string())),
            }
        };
        for _ in 0..count {
            let (n, line) = next("tensor header")?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [tag, name, rows, cols] = fields[..] else {
                return Err(bad(format!("line {n}: expected `tensor NAME ROWS COLS`")));
            };
            let (rows, cols) = match (tag, rows.parse::<usize>(), cols.parse::<usize>()) {
                ("tensor", Ok(r), Ok(c)) => (r, c),
                _ => return Err(bad(format!("line {n}: expected `tensor NAME ROWS COLS`"))),
            };
            let mut values = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (n, line) = next("tensor row")?;
                let before = values.len();
                for v in line.split_whitespace() {
                    values.push(v.parse::<f32>().map_err(|_| bad(format!("line {n}: bad value {v:?}")))?);
                }
                if values.len() - before != cols {
                    return Err(bad(format!("line {n}: expected {cols} values")));
                }
            }
            let t = Array2::from_shape_vec((rows, cols), values).map_err(|e| bad(e.to_string()))?;
            ck.tensors.push((name.to_string(), t));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new("test").with_meta("arch", "lstm").with_meta("parts", "a|b");
        ck.tensors.push(("w".into(), ndarray::array![[0.1f32, -2.5e-8, 3.0], [f32::MAX, 0.0, -1.0]]));
        ck.tensors.push(("empty".into(), Array2::zeros((0, 4))));
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        assert_eq!(Checkpoint::read(&buf[..]).unwrap(), ck);
    }

    #[test]
    fn save_is_atomic_rename() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        sample().save(&path).unwrap();
        assert!(!path.with_extension("tmp").exists());
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(Checkpoint::read("hello\n".as_bytes()).is_err());
        assert!(Checkpoint::read("partsep-checkpoint v9\n".as_bytes()).is_err());
        let short = "partsep-checkpoint v1\nkind=x\ntensors=1\ntensor w 2 2\n1 2\n";
        assert!(Checkpoint::read(short.as_bytes()).is_err());
        let ragged = "partsep-checkpoint v1\nkind=x\ntensors=1\ntensor w 1 2\n1 2 3\n";
        assert!(Checkpoint::read(ragged.as_bytes()).is_err());
    }
}
