//! Binary checkpoint format.
//!
//! ```text
//! magic    b"SACN"
//! version  u16 LE
//! digest   32 bytes, SHA-256 of ModelConfig::canonical()
//! records  until EOF:
//!            name_len u32 LE | name UTF-8 | 4 × u32 LE extents | numel × f32 LE
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::{hex, ModelGraph, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SACN";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_graph(graph: &ModelGraph) -> Self {
        Checkpoint {
            digest: graph.config().digest(),
            params: graph.params().clone(),
        }
    }

    pub fn digest_hex(&self) -> String {
        hex(&self.digest)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.shape().dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint: bad magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let mut params = ParamStore::new();
        while r.pos < bytes.len() {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Data("checkpoint record name is not UTF-8".into()))?
                .to_string();
            let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])?;
            let payload = r.take(shape.numel() * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            params
                .insert(name, Tensor::from_vec(shape, data)?)
                .map_err(|e| Error::Data(e.to_string()))?;
        }
        Ok(Checkpoint { digest, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Loads the parameters into `graph` after checking the config digest.
    pub fn restore_into(&self, graph: &mut ModelGraph) -> Result<()> {
        let expected = graph.config().digest();
        if expected != self.digest {
            return Err(Error::DigestMismatch {
                expected: hex(&expected),
                found: self.digest_hex(),
            });
        }
        graph
            .set_params(self.params.clone())
            .map_err(|e| Error::Data(format!("checkpoint does not fit model: {e}")))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig, Variant};
    use crate::tensor::Rng;

    #[test]
    fn round_trip_reproduces_forward() {
        let cfg = ModelConfig::tiny(Variant::ScaleAdaptive);
        let mut g = build_model(cfg, &mut Rng::seed(3)).unwrap();
        g.randomize_for_check(&mut Rng::seed(4)).unwrap();
        let x = Tensor::rand_uniform(
            Shape::new(1, 1, 32, 32).unwrap(),
            &mut Rng::seed(5),
            0.0,
            1.0,
        );
        let before = g.forward(&x).unwrap();

        let bytes = Checkpoint::from_graph(&g).to_bytes();
        assert_eq!(&bytes[..4], b"SACN");
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let mut h = build_model(cfg, &mut Rng::seed(99)).unwrap();
        ck.restore_into(&mut h).unwrap();
        let after = h.forward(&x).unwrap();
        let scale = before
            .density
            .grid()
            .data()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = before
            .density
            .grid()
            .max_abs_diff(after.density.grid())
            .unwrap();
        assert!(diff <= 1e-5 * scale, "diff {diff} scale {scale}");
        assert_eq!(Checkpoint::from_graph(&h).to_bytes(), bytes);
    }

    #[test]
    fn digest_mismatch_rejected() {
        let g = build_model(ModelConfig::tiny(Variant::TwoScale), &mut Rng::seed(0)).unwrap();
        let ck = Checkpoint::from_graph(&g);
        let mut other =
            build_model(ModelConfig::tiny(Variant::SingleScale), &mut Rng::seed(0)).unwrap();
        let err = ck.restore_into(&mut other).unwrap_err();
        assert!(matches!(err, Error::DigestMismatch { .. }));
        assert!(err.to_string().contains(&ck.digest_hex()));
    }

    #[test]
    fn truncated_and_bad_magic() {
        let g = build_model(ModelConfig::tiny(Variant::SingleScale), &mut Rng::seed(0)).unwrap();
        let bytes = Checkpoint::from_graph(&g).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
