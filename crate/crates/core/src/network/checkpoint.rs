//! Binary checkpoint container.
//!
//! ```text
//! magic        8 bytes   "ULWCKPT\0"
//! version      u32 LE
//! header_len   u64 LE
//! header       UTF-8 JSON (format_version, config_hash, step, unet, wiener,
//!              parameter_count, optimizer)
//! parameters   parameter_count x f64 LE, in parameter order
//! adam m, v    2 x parameter_count x f64 LE (only if optimizer is present)
//! checksum     SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_model, ModelParams, UNetConfig};
use crate::error::{Error, Result};
use crate::ops::Parameters;
use crate::optim::AdamState;
use crate::wiener::WienerInit;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ULWCKPT\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub step: u64,
    pub optimizer: Option<AdamState>,
    pub config_hash: String,
}

impl Checkpoint {
    /// Bitwise equality, including optimizer state.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let opt_eq = match (&self.optimizer, &other.optimizer) {
            (None, None) => true,
            (Some(a), Some(b)) => a.t == b.t && bits(&a.m) == bits(&b.m) && bits(&a.v) == bits(&b.v),
            _ => false,
        };
        self.step == other.step
            && self.config_hash == other.config_hash
            && opt_eq
            && self.params.bitwise_eq(&other.params)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WienerHeader {
    kernel_size: usize,
    channels: usize,
    epsilon: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config_hash: String,
    step: u64,
    unet: UNetConfig,
    wiener: Option<WienerHeader>,
    parameter_count: usize,
    optimizer_t: Option<u64>,
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let params = ckpt.params.flatten();
    let header = Header {
        format_version: FORMAT_VERSION,
        config_hash: ckpt.config_hash.clone(),
        step: ckpt.step,
        unet: ckpt.params.config,
        wiener: ckpt.params.wiener.as_ref().map(|w| WienerHeader {
            kernel_size: w.kernel_size(),
            channels: w.channels(),
            epsilon: w.epsilon,
        }),
        parameter_count: params.len(),
        optimizer_t: ckpt.optimizer.as_ref().map(|o| o.t),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("cannot encode header: {e}")))?;
    let mut buf = Vec::with_capacity(64 + header.len() + params.len() * 24);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    push_f64s(&mut buf, &params);
    if let Some(opt) = &ckpt.optimizer {
        if opt.m.len() != params.len() || opt.v.len() != params.len() {
            return Err(Error::Checkpoint(
                "optimizer state does not match parameter count".into(),
            ));
        }
        push_f64s(&mut buf, &opt.m);
        push_f64s(&mut buf, &opt.v);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file: needed {n} bytes at offset {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 32 {
        return Err(Error::Checkpoint(format!("truncated file: only {} bytes", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { bytes: body, pos: 12 };
    let header_len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let header: Header =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
    if Sha256::digest(body).as_slice() != checksum {
        return Err(Error::Checkpoint(
            "checksum mismatch: file is corrupt or truncated".into(),
        ));
    }
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "header declares version {}, expected {FORMAT_VERSION}",
            header.format_version
        )));
    }
    let wiener_init = header.wiener.as_ref().map(|w| WienerInit {
        kernel_size: w.kernel_size,
        ..WienerInit::default()
    });
    let mut params = build_model(&header.unet, wiener_init.as_ref(), 0)
        .map_err(|e| Error::Checkpoint(format!("invalid model config in header: {e}")))?;
    if let (Some(w), Some(h)) = (params.wiener.as_mut(), header.wiener.as_ref()) {
        if w.channels() != h.channels {
            return Err(Error::Checkpoint(format!(
                "unsupported Wiener channel count {}",
                h.channels
            )));
        }
        w.epsilon = h.epsilon;
    }
    if params.parameter_count() != header.parameter_count {
        return Err(Error::Checkpoint(format!(
            "parameter count {} does not match the declared architecture ({})",
            header.parameter_count,
            params.parameter_count()
        )));
    }
    let values = r.f64s(header.parameter_count)?;
    let mut offset = 0;
    for t in params.tensors_mut() {
        t.copy_from_slice(&values[offset..offset + t.len()]);
        offset += t.len();
    }
    let optimizer = match header.optimizer_t {
        Some(t) => Some(AdamState {
            t,
            m: r.f64s(header.parameter_count)?,
            v: r.f64s(header.parameter_count)?,
        }),
        None => None,
    };
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected trailing bytes",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        params,
        step: header.step,
        optimizer,
        config_hash: header.config_hash,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint to continue training under `expected_hash`,
/// refusing one written for a different configuration.
pub fn load_checkpoint_for_resume(path: impl AsRef<Path>, expected_hash: &str) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.config_hash != expected_hash {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: checkpoint was written for {}, current config is {expected_hash}",
            ckpt.config_hash
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = UNetConfig {
            depth: 2,
            base_channels: 4,
            ..Default::default()
        };
        let mut params = build_model(&cfg, Some(&WienerInit::default()), 4).unwrap();
        params.wiener.as_mut().unwrap().sigma2_raw = -0.0;
        let n = params.parameter_count();
        let mut opt = AdamState::new(n);
        opt.t = 17;
        opt.m
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64).sin() * 1e-300);
        opt.v[3] = f64::MIN_POSITIVE;
        Checkpoint {
            params,
            step: 17,
            optimizer: Some(opt),
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = sample();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.bitwise_eq(&ckpt));
        let plain = Checkpoint {
            params: ckpt.params.without_wiener(),
            optimizer: None,
            ..ckpt
        };
        save_checkpoint(&plain, &path).unwrap();
        assert!(load_checkpoint(&path).unwrap().bitwise_eq(&plain));
    }

    #[test]
    fn truncated_and_corrupt_files_fail() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        for cut in [0, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Checkpoint(_))),
                "cut {cut}"
            );
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 100;
        flipped[mid] ^= 1;
        let err = decode_checkpoint(&flipped).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(
            err.contains("version 7") && err.contains(&FORMAT_VERSION.to_string()),
            "{err}"
        );
    }

    #[test]
    fn resume_refuses_other_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample(), &path).unwrap();
        assert!(load_checkpoint_for_resume(&path, "abc").is_ok());
        let err = load_checkpoint_for_resume(&path, "def").unwrap_err();
        assert!(err.to_string().contains("config hash mismatch"));
    }
}
