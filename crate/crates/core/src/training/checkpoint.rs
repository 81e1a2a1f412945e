//! Versioned binary checkpoints with an integrity checksum.
//!
//! Layout (all integers little-endian):
//!   magic "CDMSCKPT" | version u32 | config_hash u64 | step u64
//!   | rng seed [u8;32] | rng word_pos u128 | rng stream u64
//!   | n_sections u32 | sections... | sha256 of everything before it
//!
//! Each section: name_len u32 | name bytes | ndim u32 | dims u64... |
//! data f64-LE. Section names are `trainable.*`, `momentum.*`, `v2l.*`,
//! `bank.rows`, `ref.*`; the full tensor list is whatever the stores
//! contained, in lexicographic order.

use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CDMSCKPT";
const VERSION: u32 = 1;

pub struct CheckpointData {
    pub config_hash: u64,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub sections: Vec<(String, ArrayD<f64>)>,
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, value: &ArrayD<f64>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
    for d in value.shape() {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for x in value.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save(path: &Path, data: &CheckpointData) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&data.config_hash.to_le_bytes());
    buf.extend_from_slice(&data.step.to_le_bytes());
    buf.extend_from_slice(&data.rng.get_seed());
    buf.extend_from_slice(&data.rng.get_word_pos().to_le_bytes());
    buf.extend_from_slice(&data.rng.get_stream().to_le_bytes());
    buf.extend_from_slice(&(data.sections.len() as u32).to_le_bytes());
    for (name, value) in &data.sections {
        push_tensor(&mut buf, name, value);
    }
    let digest: [u8; 32] = Sha256::digest(&buf).into();
    buf.extend_from_slice(&digest);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path, expected_config_hash: Option<u64>) -> Result<CheckpointData> {
    let buf = fs::read(path)?;
    if buf.len() < MAGIC.len() + 32 {
        return Err(Error::Checkpoint("file too short to be a checkpoint".into()));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    let expected: [u8; 32] = Sha256::digest(body).into();
    if digest != expected {
        return Err(Error::Checkpoint("checksum mismatch (corrupt or truncated file)".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let config_hash = r.u64()?;
    if let Some(expected) = expected_config_hash {
        if expected != config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {config_hash:#x}, current config {expected:#x}"
            )));
        }
    }
    let step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = r.u128()?;
    let stream = r.u64()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let n = r.u32()? as usize;
    let mut sections = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("bad section name".into()))?;
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64()? as usize);
        }
        let count: usize = dims.iter().product();
        let raw = r.take(count * 8)?;
        let mut data = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let arr = ArrayD::from_shape_vec(dims, data)
            .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))?;
        sections.push((name, arr));
    }
    Ok(CheckpointData {
        config_hash,
        step,
        rng,
        sections,
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn sample() -> CheckpointData {
        CheckpointData {
            config_hash: 0xfeed,
            step: 42,
            rng: ChaCha8Rng::seed_from_u64(9),
            sections: vec![
                ("trainable/w".into(), arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn()),
                ("bank/rows".into(), arr2(&[[0.5, -0.5]]).into_dyn()),
            ],
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = std::env::temp_dir().join(format!("cddmsl_ckpt_{}", std::process::id()));
        let path = dir.join("a.ckpt");
        let data = sample();
        save(&path, &data).unwrap();
        let back = load(&path, Some(0xfeed)).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.sections.len(), 2);
        assert_eq!(back.sections[0].1, data.sections[0].1);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn config_hash_mismatch_is_explicit() {
        let dir = std::env::temp_dir().join(format!("cddmsl_ckpt_h_{}", std::process::id()));
        let path = dir.join("a.ckpt");
        save(&path, &sample()).unwrap();
        let err = load(&path, Some(0xdead)).unwrap_err();
        assert!(err.to_string().contains("config hash mismatch"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncation_is_caught_by_checksum() {
        let dir = std::env::temp_dir().join(format!("cddmsl_ckpt_t_{}", std::process::id()));
        let path = dir.join("a.ckpt");
        save(&path, &sample()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 7);
        std::fs::write(&path, &bytes).unwrap();
        let err = load(&path, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("checksum") || msg.contains("truncated"), "{msg}");
        std::fs::remove_dir_all(&dir).ok();
    }
}
