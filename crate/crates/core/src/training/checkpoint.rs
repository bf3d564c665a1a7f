//! Versioned binary checkpoints: config text, model parameters and bank.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::config::ExperimentConfig;
use crate::embedding::SegModel;
use crate::error::{Error, Result};
use crate::prototype::PrototypeBank;

pub const MAGIC: &[u8] = b"COARSE3D-CKPT-v1\n";

#[derive(Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub params: Vec<f64>,
    pub bank: PrototypeBank,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        self.bank
            .write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| "not a checkpoint (magic mismatch)".to_string())?;
        let mut r = Cursor::new(rest);
        let mut u = [0u8; 8];
        let mut read_u64 = |r: &mut Cursor<&[u8]>| -> std::result::Result<u64, String> {
            r.read_exact(&mut u)
                .map_err(|e| format!("truncated checkpoint: {e}"))?;
            Ok(u64::from_le_bytes(u))
        };
        let len = read_u64(&mut r)? as usize;
        let start = r.position() as usize;
        let text = rest
            .get(start..start.saturating_add(len))
            .ok_or("truncated config section")?;
        let text = std::str::from_utf8(text).map_err(|e| format!("config section: {e}"))?;
        let config = ExperimentConfig::parse(text).map_err(|e| e.to_string())?;
        r.set_position((start + len) as u64);
        let n = read_u64(&mut r)? as usize;
        let start = r.position() as usize;
        let raw = rest
            .get(start..start.saturating_add(n.saturating_mul(8)))
            .ok_or("truncated parameter section")?;
        let params = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        r.set_position((start + n * 8) as u64);
        let bank = PrototypeBank::read_from(&mut r)?;
        Ok(Self {
            config,
            params,
            bank,
        })
    }

    /// Rebuild the model described by the stored config with the stored
    /// parameters.
    pub fn model(&self) -> Result<SegModel> {
        let mut model = SegModel::new(&self.config.model(), self.config.seed)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.params.len()
            )));
        }
        model.params.clone_from(&self.params);
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototype::InitMode;

    fn ckpt() -> Checkpoint {
        let config = ExperimentConfig {
            width0: 4,
            width1: 4,
            width2: 4,
            embed_dim: 8,
            ..Default::default()
        };
        let model = SegModel::new(&config.model(), 3).unwrap();
        Checkpoint {
            params: model.params,
            bank: PrototypeBank::new(5, 2, 8, 0.999, InitMode::FirstBatch, 0).unwrap(),
            config,
        }
    }

    #[test]
    fn round_trip() {
        let c = ckpt();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.config, c.config);
        assert_eq!(back.params, c.params);
        assert_eq!(back.bank.initialized, c.bank.initialized);
        assert_eq!(back.model().unwrap().params, c.params);
    }

    #[test]
    fn corrupt_input_is_refused() {
        let mut bytes = ckpt().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes)
            .unwrap_err()
            .contains("magic"));
        assert!(Checkpoint::from_bytes(&[]).is_err());
    }
}
