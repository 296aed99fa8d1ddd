//! Versioned binary checkpoints with a text sidecar manifest.
//!
//! Layout (little-endian): an 8-byte magic, a u32 format version, the
//! architecture descriptor, `sigma_data`, then the raw `f64` parameter
//! tensors in declaration order. The sidecar `<file>.txt` lists tensor
//! shapes and the CRC32 of the binary; loading refuses to proceed on a
//! checksum mismatch.

use crate::error::{BcmError, Result};
use crate::network::{Arch, ModelParams, TimeEmbedding};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"BCMLABCK";
const VERSION: u32 = 1;
const ACTIVATION: &str = "silu";

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize parameters to the binary format.
pub fn encode(params: &ModelParams) -> Vec<u8> {
    let arch = &params.arch;
    let mut buf = Vec::with_capacity(64 + 8 * params.param_count());
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    push_u32(&mut buf, arch.data_dim as u32);
    push_u32(&mut buf, arch.hidden_width as u32);
    push_u32(&mut buf, arch.hidden_layers as u32);
    push_u32(&mut buf, arch.emb_proj_width as u32);
    push_u32(&mut buf, arch.embedding.n_freqs as u32);
    push_f64(&mut buf, arch.embedding.scale);
    push_f64(&mut buf, params.sigma_data);
    for tensor in params.tensors() {
        for &v in tensor {
            push_f64(&mut buf, v);
        }
    }
    buf
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(BcmError::Parse("checkpoint truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decode parameters from the binary format.
pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut cur = Cursor { data: bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(BcmError::Parse("bad checkpoint magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(BcmError::Parse(format!("unsupported checkpoint version {version}")));
    }
    let data_dim = cur.u32()? as usize;
    let hidden_width = cur.u32()? as usize;
    let hidden_layers = cur.u32()? as usize;
    let emb_proj_width = cur.u32()? as usize;
    let n_freqs = cur.u32()? as usize;
    let emb_scale = cur.f64()?;
    let sigma_data = cur.f64()?;
    let arch = Arch {
        data_dim,
        hidden_width,
        hidden_layers,
        emb_proj_width,
        embedding: TimeEmbedding::new(n_freqs, emb_scale),
    };
    let mut params = ModelParams::init(arch, sigma_data, 0)?;
    for tensor in params.tensors_mut() {
        for v in tensor.iter_mut() {
            *v = cur.f64()?;
        }
    }
    if cur.pos != bytes.len() {
        return Err(BcmError::Parse("trailing bytes in checkpoint".into()));
    }
    Ok(params)
}

fn crc_hex(bytes: &[u8]) -> String {
    format!("{:08x}", crc32fast::hash(bytes))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".txt");
    os.into()
}

fn shape_lines(params: &ModelParams) -> String {
    let mut out = String::new();
    let mut names: Vec<(String, usize, usize)> = vec![
        ("emb_proj.w".into(), params.emb_proj.out_dim, params.emb_proj.in_dim),
        ("emb_proj.b".into(), params.emb_proj.out_dim, 1),
    ];
    for (i, l) in params.layers.iter().enumerate() {
        names.push((format!("layer{i}.w"), l.out_dim, l.in_dim));
        names.push((format!("layer{i}.b"), l.out_dim, 1));
    }
    for (name, rows, cols) in names {
        out.push_str(&format!("tensor {name} {rows}x{cols}\n"));
    }
    out
}

/// Write the checkpoint and its sidecar; returns the checksum.
pub fn save(path: &Path, params: &ModelParams) -> Result<String> {
    let bytes = encode(params);
    let checksum = crc_hex(&bytes);
    std::fs::write(path, &bytes)?;
    let mut manifest = String::new();
    manifest.push_str(&format!("format {} v{VERSION}\n", String::from_utf8_lossy(MAGIC)));
    manifest.push_str(&format!("crc32 {checksum}\n"));
    manifest.push_str(&format!(
        "arch data_dim={} hidden_width={} hidden_layers={} emb_proj_width={} n_freqs={} \
         emb_scale={} activation={ACTIVATION}\n",
        params.arch.data_dim,
        params.arch.hidden_width,
        params.arch.hidden_layers,
        params.arch.emb_proj_width,
        params.arch.embedding.n_freqs,
        params.arch.embedding.scale,
    ));
    manifest.push_str(&format!("sigma_data {}\n", params.sigma_data));
    manifest.push_str(&format!("params {}\n", params.param_count()));
    manifest.push_str(&shape_lines(params));
    let mut f = std::fs::File::create(sidecar_path(path))?;
    f.write_all(manifest.as_bytes())?;
    Ok(checksum)
}

/// Load a checkpoint, verifying the sidecar checksum first.
pub fn load(path: &Path) -> Result<(ModelParams, String)> {
    let manifest = std::fs::read_to_string(sidecar_path(path))?;
    let expected = manifest
        .lines()
        .find_map(|l| l.strip_prefix("crc32 "))
        .ok_or_else(|| BcmError::Parse("sidecar manifest lacks a crc32 line".into()))?
        .trim()
        .to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let got = crc_hex(&bytes);
    if got != expected {
        return Err(BcmError::ChecksumMismatch { expected, got });
    }
    Ok((decode(&bytes)?, got))
}

/// Checksum of an existing checkpoint file.
pub fn checksum_of(path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(crc_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        let mut arch = Arch::for_dim(2);
        arch.hidden_width = 16;
        arch.hidden_layers = 2;
        ModelParams::init(arch, 0.5, 31).unwrap()
    }

    #[test]
    fn encode_decode_round_trip_is_bitwise() {
        let p = params();
        let decoded = decode(&encode(&p)).unwrap();
        assert_eq!(p, decoded);
    }

    #[test]
    fn save_load_round_trip_with_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let p = params();
        let checksum = save(&path, &p).unwrap();
        let (loaded, loaded_sum) = load(&path).unwrap();
        assert_eq!(p, loaded);
        assert_eq!(checksum, loaded_sum);
        assert_eq!(checksum, checksum_of(&path).unwrap());
        let sidecar = std::fs::read_to_string(path.with_extension("ckpt.txt")).unwrap();
        assert!(sidecar.contains("tensor layer0.w"));
    }

    #[test]
    fn corrupted_checkpoint_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &params()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        match load(&path) {
            Err(BcmError::ChecksumMismatch { .. }) => {}
            other => panic!("expected checksum mismatch, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode(&params());
        bytes[0] = b'x';
        assert!(decode(&bytes).is_err());
    }
}
