//! Versioned parameter container.
//!
//! ```text
//! magic "MANGO1" | u32 version
//! u32 len | model kind tag       e.g. "meta/mango"
//! 32 bytes                       SHA-256 of the config JSON
//! u32 len | config JSON          ModelConfig
//! u32 len | metadata JSON        CheckpointMeta
//! u32 count
//! count × (u32 len | name | u32 ndim | u32 × ndim | f32 × numel)
//! ```
//!
//! All integers and floats are little-endian; tensors are row-major.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{put_str, put_tensor, put_u32, Reader};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"MANGO1";
pub const VERSION: u32 = 1;

/// Provenance stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub val_mse: Option<f64>,
    pub seed: u64,
    pub dataset_digest: Option<String>,
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let config = serde_json::to_vec(&model.config)?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        put_str(&mut w, &model.config.kind_tag())?;
        w.write_all(&Sha256::digest(&config))?;
        put_u32(&mut w, config.len())?;
        w.write_all(&config)?;
        let meta = serde_json::to_vec(meta)?;
        put_u32(&mut w, meta.len())?;
        w.write_all(&meta)?;
        put_u32(&mut w, model.params.len())?;
        for (name, t) in model.params.iter() {
            put_tensor(&mut w, name, t)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes, path);
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let version = r.u32("version")? as u32;
    if version != VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let kind = r.string("model kind")?;
    let digest = r.take(32, "config digest")?.to_vec();
    let len = r.u32("config length")?;
    let config_bytes = r.take(len, "config")?;
    if Sha256::digest(config_bytes).as_slice() != digest.as_slice() {
        return Err(r.mismatch("config digest does not match the stored config".into()));
    }
    let config: ModelConfig = serde_json::from_slice(config_bytes)?;
    if config.kind_tag() != kind {
        return Err(r.mismatch(format!("kind tag {kind:?} but config describes {:?}", config.kind_tag())));
    }
    let len = r.u32("metadata length")?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len, "metadata")?)?;
    let count = r.u32("tensor count")?;
    let mut named = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let ndim = r.u32("ndim")?;
        let shape = (0..ndim).map(|_| r.u32("dim")).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
        let numel = numel.ok_or_else(|| r.mismatch(format!("{name}: shape {shape:?} overflows")))?;
        let data = r.f32s(numel, &name)?;
        named.push((name, Tensor::new(shape, data)?));
    }
    if !r.at_end() {
        return Err(r.mismatch(format!("{} trailing bytes", r.remaining())));
    }
    let mut model = Model::new(config, 0)?;
    model.load_params(named)?;
    Ok((model, meta))
}

/// SHA-256 of the checkpoint file, hex encoded.
pub fn checkpoint_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Conditioning, DecoderKind, RhoNormalizer};

    fn toy_model(cond: Conditioning, kind: DecoderKind) -> Model<f32> {
        let mut c = ModelConfig::full(cond, kind, 2, 3, RhoNormalizer::identity(1));
        c.set_width(8, 2);
        Model::new(c, 9).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let meta = CheckpointMeta {
            step: 12,
            val_mse: Some(0.5),
            seed: 3,
            dataset_digest: Some("abc".into()),
        };
        for cond in Conditioning::ALL {
            for kind in [DecoderKind::Mango, DecoderKind::Autoregressive] {
                let model = toy_model(cond, kind);
                let path = dir.path().join(format!("{cond}-{kind}.ckpt"));
                save_checkpoint(&path, &model, &meta).unwrap();
                let (back, m) = load_checkpoint(&path).unwrap();
                assert_eq!(back.params, model.params);
                assert_eq!(back.config, model.config);
                assert_eq!(m, meta);
            }
        }
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &toy_model(Conditioning::Meta, DecoderKind::Mango), &CheckpointMeta::default()).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BadMagic(_))));

        let mut bad = good.clone();
        bad[6] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Version { found: 9, .. })));

        fs::write(&path, &good[..good.len() - 1]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Truncated { .. })));

        // flip a byte inside the config JSON
        let kind_len = u32::from_le_bytes(good[10..14].try_into().unwrap()) as usize;
        let config_start = 14 + kind_len + 32 + 4;
        let mut bad = good.clone();
        bad[config_start + 5] ^= 0x20;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::ManifestMismatch { .. })));
    }
}
