//! Model checkpoint file format.
//!
//! Layout: the magic bytes `LESCKPT1`, a little-endian `u32` header length,
//! a UTF-8 JSON header describing shapes and metadata, then every parameter
//! as little-endian `f32` in declared order — per layer the row-major
//! weight matrix followed by the bias, encoder layers first. Values are
//! widened to `f64` in memory.

use crate::linalg::Matrix;
use crate::nn::{Layer, MlpParams};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"LESCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes; not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint file is truncated")]
    Truncated,
    #[error("header shapes disagree with payload length (expected {expected} bytes, got {got})")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(#[from] serde_json::Error),
    #[error("layer shapes do not chain in {which}")]
    BrokenChain { which: &'static str },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Everything a checkpoint stores: both networks plus model metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub latent_dim: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub beta: f64,
    pub vocab: Vec<String>,
    pub encoder: MlpParams,
    pub decoder: MlpParams,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    latent_dim: usize,
    seq_len: usize,
    vocab_size: usize,
    beta: f64,
    encoder_shapes: Vec<[usize; 2]>,
    decoder_shapes: Vec<[usize; 2]>,
    vocab: Vec<String>,
}

fn shapes_of(params: &MlpParams) -> Vec<[usize; 2]> {
    params
        .layers()
        .iter()
        .map(|l| [l.in_dim(), l.out_dim()])
        .collect()
}

fn payload_len(shapes: &[[usize; 2]]) -> usize {
    shapes
        .iter()
        .map(|[inp, out]| (inp * out + out) * 4)
        .sum()
}

fn write_params(buf: &mut Vec<u8>, params: &MlpParams) {
    for layer in params.layers() {
        for &v in layer.weight.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &v in &layer.bias {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

fn read_params(
    bytes: &[u8],
    offset: &mut usize,
    shapes: &[[usize; 2]],
    which: &'static str,
) -> Result<MlpParams, CheckpointError> {
    let mut layers = Vec::with_capacity(shapes.len());
    for [inp, out] in shapes {
        let mut weight = Matrix::zeros(*out, *inp);
        for v in weight.data_mut() {
            let raw: [u8; 4] = bytes[*offset..*offset + 4].try_into().unwrap();
            *v = f32::from_le_bytes(raw) as f64;
            *offset += 4;
        }
        let mut bias = vec![0.0; *out];
        for v in &mut bias {
            let raw: [u8; 4] = bytes[*offset..*offset + 4].try_into().unwrap();
            *v = f32::from_le_bytes(raw) as f64;
            *offset += 4;
        }
        layers.push(Layer::new(weight, bias));
    }
    for w in layers.windows(2) {
        if w[0].out_dim() != w[1].in_dim() {
            return Err(CheckpointError::BrokenChain { which });
        }
    }
    Ok(MlpParams::new(layers))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let header = Header {
        format_version: FORMAT_VERSION,
        latent_dim: ckpt.latent_dim,
        seq_len: ckpt.seq_len,
        vocab_size: ckpt.vocab_size,
        beta: ckpt.beta,
        encoder_shapes: shapes_of(&ckpt.encoder),
        decoder_shapes: shapes_of(&ckpt.decoder),
        vocab: ckpt.vocab.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    write_params(&mut out, &ckpt.encoder);
    write_params(&mut out, &ckpt.decoder);
    let mut file = std::fs::File::create(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(&out).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
    if bytes.len() < MAGIC.len() + 4 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(CheckpointError::Truncated);
    }
    let header: Header = serde_json::from_slice(&bytes[12..header_end])?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(header.format_version));
    }
    let expected = payload_len(&header.encoder_shapes) + payload_len(&header.decoder_shapes);
    let got = bytes.len() - header_end;
    if got != expected {
        return Err(CheckpointError::ShapeMismatch { expected, got });
    }
    let mut offset = header_end;
    let encoder = read_params(&bytes, &mut offset, &header.encoder_shapes, "encoder")?;
    let decoder = read_params(&bytes, &mut offset, &header.decoder_shapes, "decoder")?;
    Ok(Checkpoint {
        latent_dim: header.latent_dim,
        seq_len: header.seq_len,
        vocab_size: header.vocab_size,
        beta: header.beta,
        vocab: header.vocab,
        encoder,
        decoder,
    })
}
