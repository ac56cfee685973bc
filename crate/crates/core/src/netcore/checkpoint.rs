//! Checkpoint container.
//!
//! Layout: the 8-byte magic `ARDMCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the UTF-8 JSON header, then every
//! tensor's values as little-endian `f64` in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamWConfig, AdamWState, ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ARDMCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub optimizer: Option<AdamWState>,
    pub step: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    config_hash: String,
    frozen: bool,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    hyper: AdamWConfig,
    step: u64,
}

fn corrupt(path: &Path, record: usize, detail: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        record,
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn new(params: ParamSet, step: u64, config_hash: impl Into<String>) -> Self {
        Self {
            params,
            optimizer: None,
            step,
            config_hash: config_hash.into(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut groups: Vec<(&str, &ParamSet)> = vec![("param", &self.params)];
        if let Some(opt) = &self.optimizer {
            groups.push(("adam_m", &opt.m));
            groups.push(("adam_v", &opt.v));
        }
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (group, set) in &groups {
            for (name, t) in set.iter() {
                tensors.push(Entry {
                    group: group.to_string(),
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                });
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            step: self.step,
            config_hash: self.config_hash.clone(),
            frozen: self.params.is_frozen(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                hyper: o.hyper,
                step: o.step,
            }),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt(origin, 0, "missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(origin, 0, format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(corrupt(origin, 0, "truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(origin, 0, format!("bad header: {e}")))?;
        let mut data = &body[hlen..];

        let mut params = ParamSet::new();
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (i, e) in header.tensors.iter().enumerate() {
            let n: usize = e.shape.iter().product();
            if data.len() < n * 8 {
                return Err(corrupt(origin, i + 1, format!("truncated tensor `{}`", e.name)));
            }
            let vals = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[n * 8..];
            let t = Tensor::new(e.shape.clone(), vals)?;
            let target = match e.group.as_str() {
                "param" => &mut params,
                "adam_m" => &mut m,
                "adam_v" => &mut v,
                g => return Err(corrupt(origin, i + 1, format!("unknown group `{g}`"))),
            };
            target.insert(e.name.clone(), t)?;
        }
        if !data.is_empty() {
            return Err(corrupt(origin, header.tensors.len() + 1, "trailing bytes"));
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                if !m.same_layout(&params) || !v.same_layout(&params) {
                    return Err(corrupt(origin, 0, "optimizer moments do not mirror parameters"));
                }
                Some(AdamWState {
                    hyper: o.hyper,
                    m,
                    v,
                    step: o.step,
                })
            }
            None => None,
        };
        if header.frozen {
            params.freeze();
        }
        Ok(Self {
            params,
            optimizer,
            step: header.step,
            config_hash: header.config_hash,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{adamw_step, gaussian, Rng};

    fn params() -> ParamSet {
        let mut rng = Rng::new(9, 9);
        let mut p = ParamSet::new();
        p.insert("w", gaussian(&mut rng, &[3, 4])).unwrap();
        p.insert("b", gaussian(&mut rng, &[4])).unwrap();
        p.insert("tiny", Tensor::vector(vec![f64::MIN_POSITIVE / 8.0, -0.0, 1e300]))
            .unwrap();
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = params();
        let mut st = AdamWState::new(AdamWConfig::desk(), &p).unwrap();
        let g = params();
        adamw_step(&mut p, &g, &mut st).unwrap();
        let ck = Checkpoint {
            params: p.clone(),
            optimizer: Some(st.clone()),
            step: 17,
            config_hash: "abc".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.config_hash, "abc");
        for ((_, a), (_, b)) in p.iter().zip(back.params.iter()) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        let o = back.optimizer.clone().unwrap();
        assert_eq!(o.step, 1);
        assert_eq!(o.m, st.m);
        assert_eq!(o.v, st.v);
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn truncation_is_detected() {
        let ck = Checkpoint::new(params(), 0, "h");
        let bytes = ck.to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Checkpoint::from_bytes(cut, Path::new("x")),
            Err(Error::Corrupt { .. })
        ));
        assert!(Checkpoint::from_bytes(b"nonsense", Path::new("x")).is_err());
    }
}
