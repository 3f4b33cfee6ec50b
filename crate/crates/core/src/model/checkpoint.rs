//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//! magic `VLPROBE\0`, version, the seven [`ToyConfig`] fields, the vocabulary
//! (count, then length-prefixed UTF-8 tokens), a shape table (count, then per
//! tensor a length-prefixed name, rank and dims), and finally every tensor as
//! little-endian `f32` in row-major order, in [`ToyModelParams::tensors`] order.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::{ToyConfig, ToyModelParams};
use crate::error::{Error, Result};
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 8] = b"VLPROBE\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ToyModelParams<f32>,
    pub vocab: Vocabulary,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(buf, s.len())?;
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_checkpoint(params: &ToyModelParams<f32>, vocab: &Vocabulary) -> Result<Vec<u8>> {
    if params.config.vocab_size != vocab.len() {
        return Err(Error::Checkpoint("vocabulary size does not match model".into()));
    }
    let c = &params.config;
    let mut buf = Vec::with_capacity(16 + params.num_parameters() * 4);
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION as usize)?;
    for v in [c.vocab_size, c.d_model, c.n_heads, c.n_layers, c.d_visual, c.max_len, c.ffn_dim] {
        put_u32(&mut buf, v)?;
    }
    put_u32(&mut buf, vocab.len())?;
    for t in vocab.tokens() {
        put_str(&mut buf, t)?;
    }
    let tensors = params.tensors();
    put_u32(&mut buf, tensors.len())?;
    for (name, t) in &tensors {
        put_str(&mut buf, name)?;
        put_u32(&mut buf, t.ndim())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
    }
    for (_, t) in &tensors {
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save_checkpoint(params: &ToyModelParams<f32>, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, vocab)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut out = vec![0; n];
        self.0
            .read_exact(&mut out)
            .map_err(|_| Error::Checkpoint("truncated file".into()))?;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        if n > 1 << 16 {
            return Err(Error::Checkpoint(format!("implausible string length {n}")));
        }
        String::from_utf8(self.bytes(n)?).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader(Cursor::new(bytes));
    if r.bytes(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut f = [0usize; 7];
    for v in &mut f {
        *v = r.u32()?;
    }
    let config = ToyConfig {
        vocab_size: f[0],
        d_model: f[1],
        n_heads: f[2],
        n_layers: f[3],
        d_visual: f[4],
        max_len: f[5],
        ffn_dim: f[6],
    };
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n_tokens = r.u32()?;
    if n_tokens != config.vocab_size {
        return Err(Error::Checkpoint("vocabulary size does not match model".into()));
    }
    let tokens = (0..n_tokens).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_tokens(tokens).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut params = ToyModelParams::<f32>::zeros(config);
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    let n_tensors = r.u32()?;
    if n_tensors != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {n_tensors}",
            expected.len()
        )));
    }
    for (name, shape) in &expected {
        let found = r.string()?;
        let ndim = r.u32()?;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {ndim}")));
        }
        let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if &found != name || &dims != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {found} {dims:?} does not match expected {name} {shape:?}"
            )));
        }
    }
    for (_, mut t) in params.tensors_mut() {
        for v in t.iter_mut() {
            let b = r.bytes(4)?;
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    if (r.0.position() as usize) != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    if !params.is_finite() {
        return Err(Error::Checkpoint("non-finite weights".into()));
    }
    Ok(Checkpoint { params, vocab })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
