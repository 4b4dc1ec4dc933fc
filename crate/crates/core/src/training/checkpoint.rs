//! Binary checkpoint format.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "WSIVITCK"
//! 8       4     format version, u32 little-endian
//! 12      4     header length H, u32 little-endian
//! 16      H     JSON header, starting with {"checksum":"<64 hex>",
//! 16+H    4*N   parameters as f32 little-endian, canonical slot order
//! ```
//!
//! The checksum is SHA-256 of the whole file with the 64 checksum
//! characters replaced by `0`. Slot order follows [`Params::iter`]:
//! patch projection, class token, position table, then each block, then
//! the final norm and the head.
//!
//! [`Params::iter`]: crate::vit::Params::iter

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::vit::{param_shapes, ModelParams, Params, ViTConfig};

pub const MAGIC: &[u8; 8] = b"WSIVITCK";
pub const FORMAT_VERSION: u32 = 1;

const CHECKSUM_PREFIX: &[u8] = br#"{"checksum":""#;
const CHECKSUM_LEN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ViTConfig,
    pub params: ModelParams<f32>,
    pub label_map: BTreeMap<u8, String>,
    pub version: u32,
    pub seed: u64,
}

pub fn default_label_map() -> BTreeMap<u8, String> {
    [crate::ALCL, crate::CHL]
        .into_iter()
        .map(|c| (c, crate::class_name(c).to_string()))
        .collect()
}

impl Checkpoint {
    pub fn new(config: ViTConfig, params: ModelParams<f32>, seed: u64) -> Self {
        Self {
            config,
            params,
            label_map: default_label_map(),
            version: FORMAT_VERSION,
            seed,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(self, FORMAT_VERSION)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        decode(bytes)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    // must stay first so the checksum sits at a fixed offset
    checksum: String,
    config: ViTConfig,
    label_map: BTreeMap<u8, String>,
    seed: u64,
    param_count: usize,
}

fn digest(bytes: &[u8], checksum_at: usize) -> String {
    let mut h = Sha256::new();
    h.update(&bytes[..checksum_at]);
    h.update([b'0'; CHECKSUM_LEN]);
    h.update(&bytes[checksum_at + CHECKSUM_LEN..]);
    hex::encode(h.finalize())
}

fn encode(ckpt: &Checkpoint, version: u32) -> Result<Vec<u8>> {
    ckpt.params.check_shapes(&ckpt.config)?;
    let header = Header {
        checksum: "0".repeat(CHECKSUM_LEN),
        config: ckpt.config.clone(),
        label_map: ckpt.label_map.clone(),
        seed: ckpt.seed,
        param_count: ckpt.params.numel(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + 4 * ckpt.params.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in ckpt.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let at = 16 + CHECKSUM_PREFIX.len();
    let sum = digest(&out, at);
    out[at..at + CHECKSUM_LEN].copy_from_slice(sum.as_bytes());
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CheckpointCorrupt(msg.into())
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let at = 16 + CHECKSUM_PREFIX.len();
    if header_len < CHECKSUM_PREFIX.len() + CHECKSUM_LEN || 16 + header_len > bytes.len() {
        return Err(corrupt(format!("header length {header_len} does not fit the file")));
    }
    if !bytes[16..].starts_with(CHECKSUM_PREFIX) {
        return Err(corrupt("header does not start with the checksum field"));
    }
    if digest(bytes, at).as_bytes() != &bytes[at..at + CHECKSUM_LEN] {
        return Err(Error::CheckpointChecksum);
    }

    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| corrupt(format!("bad header: {e}")))?;
    header.config.validate()?;
    let shapes = param_shapes(&header.config);
    let numel: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let payload = &bytes[16 + header_len..];
    if numel != header.param_count || payload.len() != 4 * numel {
        return Err(corrupt(format!(
            "payload holds {} bytes, config needs {} parameters",
            payload.len(),
            numel
        )));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let tensors: Vec<Tensor<f32>> = shapes
        .iter()
        .map(|shape| {
            let n = shape.iter().product();
            Tensor::new(shape, values.by_ref().take(n).collect())
        })
        .collect::<Result<_>>()?;
    let params = Params::from_slots(header.config.n_blocks, tensors)
        .ok_or_else(|| corrupt("parameter slot count does not match the config"))?;
    Ok(Checkpoint {
        config: header.config,
        params,
        label_map: header.label_map,
        version,
        seed: header.seed,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ViTConfig::tiny();
        Checkpoint::new(cfg.clone(), ModelParams::init(&cfg, 17).unwrap(), 17)
    }

    fn bits(c: &Checkpoint) -> Vec<u32> {
        c.params.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&c, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(bits(&back), bits(&c));
        assert_eq!(back, c);
        assert_eq!(fs::read(&p).unwrap(), back.to_bytes().unwrap());
    }

    #[test]
    fn any_flipped_byte_after_framing_fails_the_checksum() {
        let bytes = sample().to_bytes().unwrap();
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        for i in (16..bytes.len()).step_by(97).chain([16 + header_len, bytes.len() - 1]) {
            let mut bad = bytes.clone();
            bad[i] ^= 0x20;
            match decode(&bad) {
                Err(Error::CheckpointChecksum) => {}
                Err(Error::CheckpointCorrupt(_)) if i < 16 + CHECKSUM_PREFIX.len() => {}
                other => panic!("byte {i}: {other:?}"),
            }
        }
    }

    #[test]
    fn framing_errors() {
        let c = sample();
        let future = encode(&c, FORMAT_VERSION + 1).unwrap();
        assert!(matches!(
            decode(&future),
            Err(Error::CheckpointVersion { found: 2, expected: 1 })
        ));
        assert!(matches!(decode(b"not a checkpoint"), Err(Error::CheckpointCorrupt(_))));
        let bytes = c.to_bytes().unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 4]), Err(Error::CheckpointChecksum)));
        assert!(matches!(decode(&bytes[..20]), Err(Error::CheckpointCorrupt(_))));
        assert!(load_checkpoint(Path::new("/nonexistent/m.ckpt")).is_err());
    }

    #[test]
    fn header_is_inspectable_json() {
        let bytes = sample().to_bytes().unwrap();
        let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&bytes[16..16 + n]).unwrap();
        assert_eq!(v["label_map"]["0"], "ALCL");
        assert_eq!(v["label_map"]["1"], "cHL");
        assert_eq!(v["config"]["embed_dim"], 8);
        assert_eq!(v["checksum"].as_str().unwrap().len(), 64);
    }
}
