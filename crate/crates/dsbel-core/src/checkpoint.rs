//! Checkpoint container: magic "DSBL", version, tagged sections
//! (little-endian payloads), trailing FNV-1a 64 checksum.
//!
//! The model lives in a "MODL" section; a trained classifier ensemble can
//! be appended later as an "ENSM" section in the same file.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DSBL";
const VERSION: u32 = 1;
pub const SECTION_MODEL: [u8; 4] = *b"MODL";
pub const SECTION_ENSEMBLE: [u8; 4] = *b"ENSM";

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

#[derive(Clone, Debug, Default)]
pub struct Container {
    pub sections: Vec<([u8; 4], Vec<u8>)>,
}

impl Container {
    pub fn get(&self, tag: [u8; 4]) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, p)| p.as_slice())
    }

    /// Replaces the section if present, otherwise appends it.
    pub fn put(&mut self, tag: [u8; 4], payload: Vec<u8>) {
        if let Some(slot) = self.sections.iter_mut().find(|(t, _)| *t == tag) {
            slot.1 = payload;
        } else {
            self.sections.push((tag, payload));
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (tag, payload) in &self.sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 + 4 + 4 + 8 {
            return Err(Error::Format("truncated container".into()));
        }
        if &buf[..4] != MAGIC {
            return Err(Error::Format("bad magic (not a DSBL container)".into()));
        }
        let body = &buf[..buf.len() - 8];
        let stored = u64::from_le_bytes(buf[buf.len() - 8..].try_into().unwrap());
        if fnv1a64(body) != stored {
            return Err(Error::Format("checksum mismatch (corrupt file)".into()));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version} (expected {VERSION})"
            )));
        }
        let count = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let mut pos = 12;
        let mut sections = Vec::with_capacity(count);
        for _ in 0..count {
            if pos + 12 > body.len() {
                return Err(Error::Format("truncated section header".into()));
            }
            let tag: [u8; 4] = body[pos..pos + 4].try_into().unwrap();
            let len = u64::from_le_bytes(body[pos + 4..pos + 12].try_into().unwrap()) as usize;
            pos += 12;
            if pos + len > body.len() {
                return Err(Error::Format("truncated section payload".into()));
            }
            sections.push((tag, body[pos..pos + len].to_vec()));
            pos += len;
        }
        Ok(Container { sections })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn encode_model(model: &Model<f32>) -> Vec<u8> {
    let cfg = model.config.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.push(model.aux_frozen as u8);
    for (p, _) in model.params() {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_model(payload: &[u8]) -> Result<Model<f32>> {
    if payload.len() < 5 {
        return Err(Error::Format("truncated model section".into()));
    }
    let cfg_len = u32::from_le_bytes(payload[..4].try_into().unwrap()) as usize;
    if payload.len() < 4 + cfg_len + 1 {
        return Err(Error::Format("truncated model config".into()));
    }
    let cfg_text = std::str::from_utf8(&payload[4..4 + cfg_len])
        .map_err(|_| Error::Format("model config is not UTF-8".into()))?;
    let config = ModelConfig::from_text(cfg_text)?;
    let aux_frozen = payload[4 + cfg_len] != 0;
    let mut model = Model::build(config)?;
    model.aux_frozen = aux_frozen;
    let mut pos = 4 + cfg_len + 1;
    for (p, _) in model.params_mut() {
        for v in p.iter_mut() {
            if pos + 4 > payload.len() {
                return Err(Error::Format("truncated parameter blob".into()));
            }
            *v = f32::from_le_bytes(payload[pos..pos + 4].try_into().unwrap());
            pos += 4;
        }
    }
    if pos != payload.len() {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    Ok(model)
}

/// Saves the model, preserving any other sections already in `container`.
pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    let mut container = if path.exists() {
        Container::read(path).unwrap_or_default()
    } else {
        Container::default()
    };
    container.put(SECTION_MODEL, encode_model(model));
    container.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, Container)> {
    let container = Container::read(path)?;
    let payload = container
        .get(SECTION_MODEL)
        .ok_or_else(|| Error::Format("container has no model section".into()))?;
    let model = decode_model(payload)?;
    Ok((model, container))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model() -> Model<f32> {
        Model::build(ModelConfig {
            stm_widths: vec![1, 1, 1],
            side: 16,
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.dsbl");
        let p2 = dir.path().join("b.dsbl");
        let model = tiny_model();
        save_checkpoint(&model, &p1).unwrap();
        let (loaded, _) = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dsbl");
        save_checkpoint(&tiny_model(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn wrong_magic_rejected() {
        let err = Container::from_bytes(b"NOPExxxxxxxxxxxxxxxxxx").unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn version_mismatch_rejected() {
        let model = tiny_model();
        let mut c = Container::default();
        c.put(SECTION_MODEL, encode_model(&model));
        let mut bytes = c.to_bytes();
        bytes[4] = 99; // bump version, then re-seal the checksum
        let body_len = bytes.len() - 8;
        let sum = super::fnv1a64(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&sum.to_le_bytes());
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn truncated_file_rejected() {
        let model = tiny_model();
        let mut c = Container::default();
        c.put(SECTION_MODEL, encode_model(&model));
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    }

    #[test]
    fn ensemble_section_survives_model_resave() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dsbl");
        let model = tiny_model();
        save_checkpoint(&model, &path).unwrap();
        let mut c = Container::read(&path).unwrap();
        c.put(SECTION_ENSEMBLE, vec![1, 2, 3]);
        c.write(&path).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let c2 = Container::read(&path).unwrap();
        assert_eq!(c2.get(SECTION_ENSEMBLE), Some(&[1u8, 2, 3][..]));
    }
}
