//! On-disk forms of a [`DeformRep`].
//!
//! Binary (`.dr`, little-endian):
//!
//! ```text
//! magic    4 bytes  "CMDR"
//! version  u32      1
//! n_v      u64
//! data     9·n_v × f64   r₁ s₁ r₂ s₂ …
//! ```
//!
//! JSON (`.json`): `{"magic": "CMDR", "version": 1, "n_vertices": n_v, "data": [...]}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DeformRep;
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic};

pub const DR_MAGIC: &[u8; 4] = b"CMDR";
pub const DR_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct JsonRep {
    magic: String,
    version: u32,
    n_vertices: usize,
    data: Vec<f64>,
}

impl DeformRep {
    pub fn to_bytes(&self) -> Vec<u8> {
        let flat = self.to_flat();
        let mut out = Vec::with_capacity(16 + flat.len() * 8);
        out.extend_from_slice(DR_MAGIC);
        out.extend_from_slice(&DR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_vertices() as u64).to_le_bytes());
        for x in flat {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != DR_MAGIC {
            return Err(Error::Format("missing CMDR header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != DR_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: DR_VERSION,
            });
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if n.checked_mul(72) != Some(body.len()) {
            return Err(Error::Format(format!(
                "header declares {n} vertices but payload has {} bytes",
                body.len()
            )));
        }
        let flat: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_flat(&flat)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&JsonRep {
            magic: String::from_utf8_lossy(DR_MAGIC).into_owned(),
            version: DR_VERSION,
            n_vertices: self.n_vertices(),
            data: self.to_flat(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rep: JsonRep = serde_json::from_str(text)?;
        if rep.magic.as_bytes() != DR_MAGIC {
            return Err(Error::Format(format!("unexpected magic {:?}", rep.magic)));
        }
        if rep.version != DR_VERSION {
            return Err(Error::VersionMismatch {
                found: rep.version,
                expected: DR_VERSION,
            });
        }
        if rep.data.len() != 9 * rep.n_vertices {
            return Err(Error::Format(format!(
                "n_vertices = {} but data has {} values",
                rep.n_vertices,
                rep.data.len()
            )));
        }
        Self::from_flat(&rep.data)
    }

    /// Writes JSON when the extension is `.json`, binary otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if is_json(path) {
            write_atomic(path, self.to_json()?.as_bytes())
        } else {
            write_atomic(path, &self.to_bytes())
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_bytes(path)?;
        if is_json(path) {
            let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format(e.to_string()))?;
            Self::from_json(text)
        } else {
            Self::from_bytes(&bytes)
        }
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::Vec6;
    use crate::mesh::Vec3;
    use proptest::prelude::*;

    fn rep_strategy() -> impl Strategy<Value = DeformRep> {
        prop::collection::vec(prop::array::uniform9(-10.0f64..10.0), 0..20).prop_map(|rows| {
            let (r, s) = rows
                .iter()
                .map(|c| (Vec3::from_column_slice(&c[..3]), Vec6::from_column_slice(&c[3..])))
                .unzip();
            DeformRep::new(r, s).unwrap()
        })
    }

    proptest! {
        #[test]
        fn binary_and_json_round_trip(rep in rep_strategy()) {
            prop_assert_eq!(DeformRep::from_bytes(&rep.to_bytes()).unwrap(), rep.clone());
            prop_assert_eq!(DeformRep::from_json(&rep.to_json().unwrap()).unwrap(), rep);
        }
    }

    #[test]
    fn corrupt_headers_rejected() {
        let rep = DeformRep::identity(3);
        let mut bytes = rep.to_bytes();
        assert!(matches!(DeformRep::from_bytes(&bytes[..20]), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(DeformRep::from_bytes(&bytes), Err(Error::Format(_))));
        let mut bytes = rep.to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            DeformRep::from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }
}
