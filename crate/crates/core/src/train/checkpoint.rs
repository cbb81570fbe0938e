//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` version, 32-byte SHA-256 digest of the
//! training configuration (as JSON), `u64` header length, the JSON header,
//! then every parameter tensor in header order as little-endian floats. All
//! integers are little-endian.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::LanguageModel;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar};

pub const MAGIC: &[u8; 8] = b"SPLSTMCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// ChaCha8 generator position: seed, stream and word position (hex).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn of(rng: &rand_chacha::ChaCha8Rng) -> Self {
        RngState {
            seed: hex(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: format!("{:x}", rng.get_word_pos()),
        }
    }

    pub fn restore(&self) -> Result<rand_chacha::ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = unhex(&self.seed)?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Format("rng seed must be 32 bytes".into()))?;
        let pos = u128::from_str_radix(&self.word_pos, 16).map_err(|e| Error::Format(format!("rng word position: {e}")))?;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    /// Index of the phase the next step runs in (equals the phase count
    /// once the schedule is finished) and steps already done within it.
    pub phase: usize,
    pub phase_step: u64,
    pub rng: RngState,
    pub precision: Precision,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub header: CheckpointHeader,
    pub model: LanguageModel<T>,
}

pub fn config_digest(config: &TrainConfig) -> Result<[u8; 32]> {
    let json = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&json).into())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 || !s.is_ascii() {
        return Err(Error::Format(format!("bad hex string {s:?}")));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| Error::Format(format!("bad hex string: {e}"))))
        .collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

/// Reads only the header, e.g. to pick the precision before a full load.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Format("header length overflows".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)?;
    if config_digest(&header.config)? != digest {
        return Err(Error::Format("config digest does not match header".into()));
    }
    Ok((header, r.pos))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&config_digest(&self.header.config)?);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, _, data) in self.model.tensors() {
            for &v in data {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, offset) = read_header(bytes)?;
        if header.precision.name() != T::NAME {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, expected {}",
                header.precision.name(),
                T::NAME
            )));
        }
        let mut model = LanguageModel::<T>::zeros(&header.config.model)?;
        let expected: Vec<TensorInfo> = model
            .tensors()
            .into_iter()
            .map(|(name, rows, cols, _)| TensorInfo { name, rows, cols })
            .collect();
        if expected != header.tensors {
            return Err(Error::Format("tensor table does not match the model configuration".into()));
        }
        let mut r = Reader { bytes, pos: offset };
        for buf in model.buffers_mut() {
            let raw = r.take(buf.len() * T::BYTES)?;
            for (v, chunk) in buf.iter_mut().zip(raw.chunks_exact(T::BYTES)) {
                *v = T::read_le(chunk);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after payload", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { header, model })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}
