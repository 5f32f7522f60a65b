//! Binary container: magic, version, a JSON metadata header, then named
//! float sections stored as little-endian `f64`.
//!
//! ```text
//! b"LRCK" | u32 version | u64 header_len | header (JSON, UTF-8)
//! repeated per section: u64 count | count × f64 (LE)
//! ```
//!
//! The header lists the section names in payload order, so readers never
//! guess at the layout.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adamw::AdamState;
use super::params::{ParamLayout, ParamVector};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LRCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    /// What the payload holds, e.g. `"model"` or `"trajectory"`.
    pub kind: String,
    pub sections: Vec<String>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Writes `header` followed by `sections` (which must match `header.sections`).
pub fn write_container<W: Write>(
    mut w: W,
    header: &ContainerHeader,
    sections: &[&[f64]],
) -> Result<()> {
    if header.sections.len() != sections.len() {
        return Err(Error::Format(format!(
            "header names {} sections but {} were given",
            header.sections.len(),
            sections.len()
        )));
    }
    let json = serde_json::to_vec(header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for s in sections {
        w.write_all(&(s.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(s.len() * 8);
        for x in *s {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<(ContainerHeader, Vec<Vec<f64>>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let header_len = read_u64(&mut r)? as usize;
    let mut json = vec![0u8; header_len];
    r.read_exact(&mut json)?;
    let header: ContainerHeader = serde_json::from_slice(&json)?;
    let mut sections = Vec::with_capacity(header.sections.len());
    for _ in &header.sections {
        let n = read_u64(&mut r)? as usize;
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        sections.push(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        );
    }
    Ok((header, sections))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Metadata stored with every model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Layer widths per named sub-network.
    pub widths: BTreeMap<String, Vec<usize>>,
    pub layout: ParamLayout,
    pub step: u64,
    pub seed: u64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Parameters plus optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamVector,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let header = ContainerHeader {
            kind: "model".into(),
            sections: vec!["params".into(), "adam_m".into(), "adam_v".into()],
            meta: serde_json::to_value(&self.meta)?,
        };
        write_container(
            w,
            &header,
            &[&self.params.values, &self.adam.m, &self.adam.v],
        )
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let (header, mut sections) = read_container(r)?;
        if header.kind != "model" || sections.len() != 3 {
            return Err(Error::Format(format!(
                "expected a model checkpoint, found `{}` with {} sections",
                header.kind,
                sections.len()
            )));
        }
        let meta: CheckpointMeta = serde_json::from_value(header.meta)?;
        let v = sections.pop().expect("three sections");
        let m = sections.pop().expect("three sections");
        let values = sections.pop().expect("three sections");
        if m.len() != values.len() || v.len() != values.len() {
            return Err(Error::Format("moment vectors do not match parameters".into()));
        }
        let params = ParamVector::new(values, meta.layout.clone())?;
        Ok(Self {
            adam: AdamState {
                m,
                v,
                step: meta.step,
            },
            meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut layout = ParamLayout::new();
        layout.reserve("a", 3);
        layout.reserve("b", 1);
        let params = ParamVector::new(vec![0.1, -2.5e-300, 1.0 / 3.0, 7.0], layout.clone()).unwrap();
        let ck = Checkpoint {
            meta: CheckpointMeta {
                widths: BTreeMap::from([("a".to_string(), vec![1, 2])]),
                layout,
                step: 12,
                seed: 99,
                extra: serde_json::json!({"note": "x"}),
            },
            adam: AdamState {
                m: vec![1e-9, 2.0, -3.0, 0.0],
                v: vec![4.0, 5.0, 6.0, f64::MIN_POSITIVE],
                step: 12,
            },
            params,
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.params.values.iter().zip(&ck.params.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::read_from(&b"nope"[..]).is_err());
    }
}
