//! Binary checkpoint format.
//!
//! Little-endian throughout: `FPCK`, version, model kind, parameter count,
//! parameter records, optimizer state, RNG state, step, epoch, config
//! snapshot, source list, then a CRC32 of every preceding byte.
//! A record is `u32 name length, name, u32 rank, u64 dims.., f64 data..`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig, Moments};
use crate::tensor::DiffArray;

pub const MAGIC: &[u8; 4] = b"FPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint holds a {found} model, expected {expected}")]
    WrongKind { expected: ModelKind, found: ModelKind },
    #[error("unknown model kind tag {0}")]
    UnknownKind(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Flow,
    Denoiser,
}

impl ModelKind {
    fn tag(self) -> u32 {
        match self {
            ModelKind::Flow => 1,
            ModelKind::Denoiser => 2,
        }
    }

    fn from_tag(tag: u32) -> std::result::Result<Self, CheckpointError> {
        match tag {
            1 => Ok(ModelKind::Flow),
            2 => Ok(ModelKind::Denoiser),
            t => Err(CheckpointError::UnknownKind(t)),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Flow => "flow",
            ModelKind::Denoiser => "denoiser",
        })
    }
}

/// Full ChaCha8 position: seed, stream and word position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn capture(adam: &Adam) -> Self {
        Self { config: adam.config, t: adam.t(), moments: adam.moments().clone() }
    }

    pub fn restore(&self) -> Result<Adam> {
        Adam::from_state(self.config, self.t, self.moments.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub params: Vec<(String, DiffArray)>,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    pub step: u64,
    /// Number of completed epochs.
    pub epoch: u64,
    pub config: String,
    /// Images the model was trained on.
    pub sources: Vec<PathBuf>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn record(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.str(name);
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
        for &v in data {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

type Parse<T> = std::result::Result<T, CheckpointError>;

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Parse<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Parse<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Parse<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Parse<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Parse<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("non-UTF-8 string".into()))
    }
    fn record(&mut self) -> Parse<(String, Vec<usize>, Vec<f64>)> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= (self.buf.len() - self.pos) / 8)
            .ok_or_else(|| CheckpointError::Malformed(format!("record {name} has an impossible size")))?;
        let data = (0..numel).map(|_| self.f64()).collect::<Parse<_>>()?;
        Ok((name, shape, data))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(self.kind.tag());
        w.u32(self.params.len() as u32);
        for (name, p) in &self.params {
            w.record(name, p.shape(), p.data());
        }

        let o = &self.optimizer;
        w.u64(o.t);
        w.f64(o.config.lr);
        w.f64(o.config.beta1);
        w.f64(o.config.beta2);
        w.f64(o.config.eps);
        // Zero encodes "no clipping".
        w.f64(o.config.max_grad_norm.unwrap_or(0.0));
        w.u32(o.moments.len() as u32);
        for (name, m) in &o.moments {
            w.record(name, &[m.m.len()], &m.m);
            w.record(name, &[m.v.len()], &m.v);
        }

        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());

        w.u64(self.step);
        w.u64(self.epoch);
        w.str(&self.config);
        w.u32(self.sources.len() as u32);
        for s in &self.sources {
            w.str(&s.to_string_lossy());
        }

        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 8 {
            return Err(CheckpointError::Checksum { stored: 0, computed: crc32fast::hash(bytes) });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }

        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let kind = ModelKind::from_tag(r.u32()?)?;
        let count = r.u32()?;
        let mut params = Vec::new();
        for _ in 0..count {
            let (name, shape, data) = r.record()?;
            let arr = DiffArray::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            params.push((name, arr));
        }

        let t = r.u64()?;
        let (lr, beta1, beta2, eps, clip) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let config = AdamConfig { lr, beta1, beta2, eps, max_grad_norm: (clip != 0.0).then_some(clip) };
        let mut moments = BTreeMap::new();
        for _ in 0..r.u32()? {
            let (name, _, m) = r.record()?;
            let (name_v, _, v) = r.record()?;
            if name != name_v || m.len() != v.len() {
                return Err(CheckpointError::Malformed(format!("mismatched moments for {name}")));
            }
            moments.insert(name, Moments { m, v });
        }

        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());

        let step = r.u64()?;
        let epoch = r.u64()?;
        let config_text = r.str()?;
        let mut sources = Vec::new();
        for _ in 0..r.u32()? {
            sources.push(PathBuf::from(r.str()?));
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            kind,
            params,
            optimizer: OptimizerState { config, t, moments },
            rng: RngState { seed, stream, word_pos },
            step,
            epoch,
            config: config_text,
            sources,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// Loads and checks the model kind.
    pub fn load_kind(path: impl AsRef<Path>, expected: ModelKind) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.kind != expected {
            return Err(CheckpointError::WrongKind { expected, found: ck.kind }.into());
        }
        Ok(ck)
    }
}
