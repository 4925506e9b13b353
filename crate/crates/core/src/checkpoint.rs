//! Parameter checkpoints: a JSON manifest of named tensors whose payloads
//! are base64-encoded little-endian `f64`.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamSet};

pub const FORMAT: &str = "attnlab-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: String,
}

impl TensorRecord {
    pub fn encode(name: String, m: &Matrix) -> Self {
        let bytes: Vec<u8> = m.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { name, shape: [m.rows(), m.cols()], data: STANDARD.encode(bytes) }
    }

    pub fn decode(&self) -> Result<Matrix> {
        let bytes = STANDARD.decode(&self.data).map_err(|e| Error::Decode(format!("{}: {e}", self.name)))?;
        if bytes.len() != self.shape[0] * self.shape[1] * 8 {
            return Err(Error::Decode(format!("{}: {} bytes for shape {:?}", self.name, bytes.len(), self.shape)));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        Matrix::from_vec(self.shape[0], self.shape[1], data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn capture<P: ParamSet + ?Sized>(params: &P, meta: BTreeMap<String, serde_json::Value>) -> Self {
        let tensors = params.named_tensors().into_iter().map(|(n, m)| TensorRecord::encode(n, m)).collect();
        Self { format: FORMAT.into(), meta, tensors }
    }

    /// Overwrites `params` in place; names and shapes must match exactly.
    pub fn restore<P: ParamSet + ?Sized>(&self, params: &mut P) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Decode(format!("unsupported checkpoint format {:?}", self.format)));
        }
        let expected: Vec<(String, (usize, usize))> =
            params.named_tensors().into_iter().map(|(n, m)| (n, m.shape())).collect();
        if expected.len() != self.tensors.len() {
            return Err(Error::Decode(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        let mut decoded = Vec::with_capacity(expected.len());
        for ((name, shape), rec) in expected.iter().zip(&self.tensors) {
            if *name != rec.name || *shape != (rec.shape[0], rec.shape[1]) {
                return Err(Error::Decode(format!("expected {name} {shape:?}, found {} {:?}", rec.name, rec.shape)));
            }
            decoded.push(rec.decode()?);
        }
        for (dst, src) in params.tensors_mut().into_iter().zip(decoded) {
            *dst = src;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::GraphAttentionParams;
    use crate::numerics::SeededRng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = SeededRng::new(5);
        let p = GraphAttentionParams::init(4, 3, &mut rng);
        let mut meta = BTreeMap::new();
        meta.insert("seed".into(), 5.into());
        let json = Checkpoint::capture(&p, meta).to_json().unwrap();
        let mut q = GraphAttentionParams::init(4, 3, &mut SeededRng::new(6));
        Checkpoint::from_json(&json).unwrap().restore(&mut q).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = GraphAttentionParams::init(4, 3, &mut SeededRng::new(1));
        let ck = Checkpoint::capture(&p, BTreeMap::new());
        let mut q = GraphAttentionParams::init(5, 3, &mut SeededRng::new(1));
        assert!(matches!(ck.restore(&mut q), Err(Error::Decode(_))));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let rec = TensorRecord { name: "w".into(), shape: [1, 2], data: STANDARD.encode([0u8; 8]) };
        assert!(rec.decode().is_err());
    }
}
