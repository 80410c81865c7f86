//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `CMBOCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a UTF-8 JSON header, then every
//! parameter array as little-endian `f32` in canonical order, then the
//! importance vector as little-endian `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::ClassId;
use crate::error::{LabError, Result};
use crate::importance::ImportanceVector;
use crate::model::{ModelConfig, ModelState, Param, QcrAdapter};

pub const MAGIC: &[u8; 8] = b"CMBOCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub importance: ImportanceVector,
    /// Caller-defined progress record (kept verbatim in the header).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct AdapterHeader {
    class_id: ClassId,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    step: usize,
    step_classes: Vec<Vec<ClassId>>,
    params: Vec<ArrayHeader>,
    adapters: Vec<AdapterHeader>,
    importance_len: usize,
    importance_step: usize,
    meta: serde_json::Value,
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let m = &ckpt.model;
    let all = m.all_params();
    let header = Header {
        config: m.config.clone(),
        step: m.step,
        step_classes: m.step_classes.clone(),
        params: all
            .iter()
            .map(|p| ArrayHeader {
                name: p.name.clone(),
                rows: p.rows,
                cols: p.cols,
                trainable: p.trainable,
            })
            .collect(),
        adapters: m
            .adapters
            .values()
            .map(|a| AdapterHeader {
                class_id: a.class_id,
                frozen: a.frozen,
            })
            .collect(),
        importance_len: ckpt.importance.values.len(),
        importance_step: ckpt.importance.step,
        meta: ckpt.meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 4 * m.parameter_count() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in all {
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in &ckpt.importance.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| LabError::malformed("checkpoint", "truncated"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(LabError::malformed("checkpoint", "bad magic"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(LabError::malformed("checkpoint", format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| LabError::malformed("checkpoint", "header length"))?;
    let header: Header = serde_json::from_slice(r.take(len)?)?;

    let mut arrays = Vec::with_capacity(header.params.len());
    for a in &header.params {
        let n = a
            .rows
            .checked_mul(a.cols)
            .ok_or_else(|| LabError::malformed("checkpoint", "array size"))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| LabError::malformed("checkpoint", "array size"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        arrays.push(Param {
            name: a.name.clone(),
            rows: a.rows,
            cols: a.cols,
            data,
            trainable: a.trainable,
        });
    }
    let raw = r.take(
        header
            .importance_len
            .checked_mul(8)
            .ok_or_else(|| LabError::malformed("checkpoint", "importance size"))?,
    )?;
    let importance = ImportanceVector {
        values: raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        step: header.importance_step,
    };
    if r.at != bytes.len() {
        return Err(LabError::malformed("checkpoint", "trailing bytes"));
    }

    let n_core = arrays
        .len()
        .checked_sub(2 * header.adapters.len())
        .ok_or_else(|| LabError::malformed("checkpoint", "adapter arrays missing"))?;
    let mut adapter_arrays = arrays.split_off(n_core).into_iter();
    let mut adapters = BTreeMap::new();
    for a in &header.adapters {
        let (w1, w2) = (
            adapter_arrays.next().expect("counted"),
            adapter_arrays.next().expect("counted"),
        );
        let prefix = format!("adapter.{}.", a.class_id);
        let d = header.config.query_dim;
        let r = header.config.adapter_rank;
        if !w1.name.starts_with(&prefix)
            || !w2.name.starts_with(&prefix)
            || (w1.rows, w1.cols, w2.rows, w2.cols) != (d, r, r, d)
        {
            return Err(LabError::malformed("checkpoint", format!("adapter for class {}", a.class_id)));
        }
        adapters.insert(
            a.class_id,
            QcrAdapter {
                class_id: a.class_id,
                w1,
                w2,
                frozen: a.frozen,
            },
        );
    }
    let model = ModelState::from_parts(header.config, arrays, adapters, header.step, header.step_classes)?;
    Ok(Checkpoint {
        model,
        importance,
        meta: header.meta,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| LabError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            n_queries: 4,
            query_dim: 8,
            decoder_layers: 2,
            max_classes: 4,
            adapter_rank: 2,
            backbone_channels: 2,
            height: 8,
            width: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one: BTreeSet<ClassId> = [ClassId(1), ClassId(2)].into();
        let two: BTreeSet<ClassId> = [ClassId(3)].into();
        let (m, _) = ModelState::new(cfg, 4).unwrap().begin_step(1, &one, &mut rng).unwrap();
        let (mut m, _) = m.begin_step(2, &two, &mut rng).unwrap();
        m.adapters.get_mut(&ClassId(3)).unwrap().w2.data[3] = 0.1 + f32::EPSILON;
        Checkpoint {
            model: m,
            importance: ImportanceVector {
                values: vec![0.1, 1.0 / 3.0, 0.0, 1.0],
                step: 2,
            },
            meta: serde_json::json!({"completed": 2}),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = to_bytes(&ck).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(to_bytes(&back).unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_bytes(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(from_bytes(&long).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(from_bytes(&version).is_err());
    }
}
