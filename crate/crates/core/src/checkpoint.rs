//! Binary training snapshots: `MAFTCKPT`, a `u32` version, then
//! length-prefixed fields with every real stored as little-endian `f64`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 8] = b"MAFTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic bytes)")]
    Magic,
    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    Version { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Format(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
}

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    /// Completed epochs.
    pub epoch: u64,
    pub params: Vec<(String, Tensor)>,
    pub optim_step: u64,
    pub first_moments: Vec<Vec<f64>>,
    pub second_moments: Vec<Vec<f64>>,
    pub rng: RngState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn reals(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            CheckpointError::Format(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| CheckpointError::Format(format!("{what} length {n} exceeds file size")))
    }
    fn bytes(&mut self, what: &str) -> Result<&'a [u8], CheckpointError> {
        let n = self.len(what)?;
        self.take(n)
    }
    fn string(&mut self, what: &str) -> Result<String, CheckpointError> {
        String::from_utf8(self.bytes(what)?.to_vec()).map_err(|_| CheckpointError::Format(format!("{what} is not UTF-8")))
    }
    fn reals(&mut self, what: &str) -> Result<Vec<f64>, CheckpointError> {
        let n = self.len(what)?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Format(format!("{what} too long")))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.u32(VERSION);
        w.bytes(self.config.to_text().as_bytes());
        w.u64(self.epoch);
        w.u64(self.optim_step);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u64(self.params.len() as u64);
        for (k, (name, t)) in self.params.iter().enumerate() {
            w.bytes(name.as_bytes());
            w.u32(t.shape().len() as u32);
            for &dim in t.shape() {
                w.u64(dim as u64);
            }
            w.reals(t.data());
            w.reals(&self.first_moments[k]);
            w.reals(&self.second_moments[k]);
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
            return Err(CheckpointError::Magic);
        }
        let found = r.u32()?;
        if found != VERSION {
            return Err(CheckpointError::Version { found });
        }
        let config = Config::parse(&r.string("config")?)?;
        let epoch = r.u64()?;
        let optim_step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let count = r.len("parameter count")?;
        let mut params = Vec::with_capacity(count);
        let mut first_moments = Vec::with_capacity(count);
        let mut second_moments = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string("parameter name")?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let values = r.reals(&name)?;
            let tensor = Tensor::new(shape, values).map_err(|e| CheckpointError::Format(format!("{name}: {e}")))?;
            let m = r.reals(&name)?;
            let v = r.reals(&name)?;
            if m.len() != tensor.len() || v.len() != tensor.len() {
                return Err(CheckpointError::Format(format!("{name}: optimizer state does not match the tensor")));
            }
            params.push((name, tensor));
            first_moments.push(m);
            second_moments.push(v);
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::Format(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { config, epoch, params, optim_step, first_moments, second_moments, rng: RngState { seed, stream, word_pos } })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let buf = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u64();
        let t = Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0]).unwrap();
        Checkpoint {
            config: Config::default(),
            epoch: 3,
            params: vec![("a".into(), t), ("b".into(), Tensor::vector(vec![7.5]))],
            optim_step: 12,
            first_moments: vec![vec![0.1; 4], vec![0.2]],
            second_moments: vec![vec![0.3; 4], vec![0.4]],
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.params[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rng_resumes_where_it_stopped() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        rng.next_u32();
        let state = RngState::capture(&rng);
        let mut resumed = state.restore();
        assert_eq!(rng.next_u64(), resumed.next_u64());
    }

    #[test]
    fn rejects_bad_headers_and_truncation() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT"), Err(CheckpointError::Magic)));
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(CheckpointError::Version { found: 9 })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Format(_))));
    }
}
