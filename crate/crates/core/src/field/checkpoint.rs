//! Binary checkpoint: magic `SFCK`, format version (u32 LE), header length
//! (u64 LE), a JSON header with the field configuration and sequence table,
//! then the parameters as little-endian f32. Parameters are rounded to f32
//! on save, so a loaded field renders from exactly the stored values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FieldConfig, RadianceField};
use crate::dataset::AppearanceKey;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SFCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_id: String,
    pub block_id: Option<String>,
    pub seed: u64,
    pub iterations: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    config: FieldConfig,
    sequences: Vec<AppearanceKey>,
    param_count: usize,
}

pub fn write_checkpoint(mut w: impl Write, field: &RadianceField, meta: &CheckpointMeta) -> Result<()> {
    let header = Header {
        meta: meta.clone(),
        config: field.config().clone(),
        sequences: field.sequences().collect(),
        param_count: field.params().len(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(4 * field.params().len());
    for &p in field.params() {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(RadianceField, CheckpointMeta)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(head[8..16].try_into().unwrap());
    if n > 1 << 24 {
        return Err(bad("header too large"));
    }
    let mut json = vec![0u8; n as usize];
    r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != 4 * header.param_count {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            4 * header.param_count,
            raw.len()
        )));
    }
    let params = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    let field = RadianceField::from_parts(header.config, header.sequences, params)?;
    Ok((field, header.meta))
}

pub fn save(path: &Path, field: &RadianceField, meta: &CheckpointMeta) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, field, meta)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(RadianceField, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = FieldConfig {
            grid_resolutions: vec![2, 3],
            hidden_width: 4,
            ..Default::default()
        };
        let keys = [AppearanceKey::new(0, 1), AppearanceKey::new(3, 1)];
        let field = RadianceField::new(cfg, &keys).unwrap();
        let meta = CheckpointMeta {
            model_id: "m".into(),
            block_id: Some("b0".into()),
            seed: 7,
            iterations: 10,
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &field, &meta).unwrap();
        let (back, m) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(m, meta);
        for (a, b) in back.params().iter().zip(field.params()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert_eq!(back.config(), field.config());
        assert_eq!(back.sequences().collect::<Vec<_>>(), keys);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back, &m).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn rejects_corruption() {
        let field = RadianceField::new(
            FieldConfig {
                grid_resolutions: vec![2],
                ..Default::default()
            },
            &[],
        )
        .unwrap();
        let meta = CheckpointMeta {
            model_id: "m".into(),
            block_id: None,
            seed: 0,
            iterations: 0,
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &field, &meta).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
    }
}
