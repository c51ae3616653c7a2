//! Single-file binary checkpoints.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! "BIVEXCKP"  u32 version  u64 body_len
//! body:
//!   u8 flag bits (dem, san, kernel swap)
//!   u32 input height, u32 input width
//!   u32 encoder input channels, u32 layer count,
//!     per layer: u32 out, kernel, stride, pad; u8 pooled; u32 pool h, pool w
//!   u32 hidden, u32 attention width, u32 max steps, u8 two heads
//!   str vocabulary
//!   u64 iteration, u64 seed, f64 validation accuracy
//!   tensors: u32 count, per tensor: str name, u32 rank, u64 dims, f64 data
//!   u8 has trainer state; if set:
//!     f64 decay, epsilon, learning rate; u32 stale checks;
//!     f64 best accuracy; u64 best iteration; u64 batches drawn;
//!     tensors (running mean squares); u8 has best; tensors (best params)
//! u64 CRC-64/XZ of every preceding byte
//! ```
//! `str` is a u32 byte length followed by UTF-8.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crc::{Crc, CRC_64_XZ};

use crate::autograd::{RmsPropState, Tensor};
use crate::decoder::{DecoderConfig, Vocabulary};
use crate::encoder::{ConvLayer, EncoderConfig};
use crate::model::{Model, ModelConfig, ModelFlags};

pub const MAGIC: &[u8; 8] = b"BIVEXCKP";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 8 + 4 + 8;
const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("checkpoint checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("checkpoint shape error: {0}")]
    Shape(String),
    #[error("checkpoint malformed: {0}")]
    Malformed(String),
    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),
    #[error("refusing to save non-finite tensor {0}")]
    NonFinite(String),
}

/// Optimizer and schedule state needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub optimizer: RmsPropState,
    /// Validation checks since the last improvement.
    pub stale_checks: u32,
    pub best_accuracy: f64,
    pub best_iteration: u64,
    /// Batches consumed so far; the batch order is a pure function of the
    /// seed and this counter, so it stands in for the sampler's rng state.
    pub batches_drawn: u64,
    /// Parameters at `best_iteration`, in canonical order.
    pub best_params: Option<Vec<Tensor>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub iteration: u64,
    pub seed: u64,
    pub val_accuracy: f64,
    pub trainer: Option<TrainerState>,
}

impl Checkpoint {
    /// Inference-only checkpoint.
    pub fn of_model(model: Model) -> Self {
        Checkpoint {
            model,
            iteration: 0,
            seed: 0,
            val_accuracy: 0.0,
            trainer: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        for (name, t) in self.model.params.named() {
            if !t.is_finite() {
                return Err(CheckpointError::NonFinite(name));
            }
        }
        if let Some(tr) = &self.trainer {
            let extra = tr.optimizer.mean_square().iter().chain(tr.best_params.iter().flatten());
            if extra.into_iter().any(|t| !t.is_finite()) {
                return Err(CheckpointError::NonFinite("trainer state".into()));
            }
        }

        let mut body = Writer::default();
        let config = &self.model.config;
        write_config(&mut body, config);
        body.u64(self.iteration);
        body.u64(self.seed);
        body.f64(self.val_accuracy);
        let named = self.model.params.named();
        body.u32(named.len() as u32);
        for (name, t) in named {
            body.tensor(&name, t);
        }
        match &self.trainer {
            None => body.u8(0),
            Some(tr) => {
                body.u8(1);
                body.f64(tr.optimizer.decay);
                body.f64(tr.optimizer.epsilon);
                body.f64(tr.optimizer.learning_rate);
                body.u32(tr.stale_checks);
                body.f64(tr.best_accuracy);
                body.u64(tr.best_iteration);
                body.u64(tr.batches_drawn);
                write_tensor_list(&mut body, "mean_square", tr.optimizer.mean_square());
                match &tr.best_params {
                    None => body.u8(0),
                    Some(best) => {
                        body.u8(1);
                        write_tensor_list(&mut body, "best", best);
                    }
                }
            }
        }

        let body = body.0;
        let mut out = Vec::with_capacity(HEADER_LEN + body.len() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        let crc = CHECKSUM.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let (header, body) = split_container(bytes)?;
        let mut r = Reader::new(body);
        let config = read_config(&mut r)?;
        let iteration = r.u64()?;
        let seed = r.u64()?;
        let val_accuracy = r.f64()?;

        let template = Model::zeros(config.clone())
            .map_err(|e| CheckpointError::Malformed(format!("stored config is invalid: {e}")))?;
        let expected = template.params.named();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(CheckpointError::Shape(format!(
                "{count} tensors stored, the configuration needs {}",
                expected.len()
            )));
        }
        let mut values = Vec::with_capacity(count);
        for (name, want) in &expected {
            let (stored_name, t) = r.tensor()?;
            if &stored_name != name || t.shape() != want.shape() {
                return Err(CheckpointError::Shape(format!(
                    "tensor {stored_name:?} {:?} where {name:?} {:?} is expected",
                    t.shape(),
                    want.shape()
                )));
            }
            values.push(t);
        }
        let model = Model::from_parts(config, values)
            .map_err(|e| CheckpointError::Shape(e.to_string()))?;

        let trainer = match r.u8()? {
            0 => None,
            1 => {
                let decay = r.f64()?;
                let epsilon = r.f64()?;
                let learning_rate = r.f64()?;
                let stale_checks = r.u32()?;
                let best_accuracy = r.f64()?;
                let best_iteration = r.u64()?;
                let batches_drawn = r.u64()?;
                let mean_square = read_tensor_list(&mut r, &expected)?;
                let best_params = match r.u8()? {
                    0 => None,
                    1 => Some(read_tensor_list(&mut r, &expected)?),
                    b => return Err(CheckpointError::Malformed(format!("bad best-params flag {b}"))),
                };
                Some(TrainerState {
                    optimizer: RmsPropState::from_parts(decay, epsilon, learning_rate, mean_square),
                    stale_checks,
                    best_accuracy,
                    best_iteration,
                    batches_drawn,
                    best_params,
                })
            }
            b => return Err(CheckpointError::Malformed(format!("bad trainer flag {b}"))),
        };
        if !r.is_done() {
            return Err(CheckpointError::Malformed(format!(
                "{} unread bytes after the last section",
                r.remaining()
            )));
        }
        debug_assert_eq!(header.version, FORMAT_VERSION);
        Ok(Checkpoint {
            model,
            iteration,
            seed,
            val_accuracy,
            trainer,
        })
    }

    /// Temp file plus rename, so readers never observe a partial write.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(format!(".tmp{}", std::process::id()));
        let tmp = path.with_file_name(tmp_name);
        let mut file = fs::File::create(&tmp).map_err(io)?;
        file.write_all(&bytes).map_err(io)?;
        file.sync_all().map_err(io)?;
        drop(file);
        fs::rename(&tmp, path).map_err(|e| {
            let _ = fs::remove_file(&tmp);
            io(e)
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Loads and insists the stored variant matches `flags`.
    pub fn load_expecting(path: &Path, flags: ModelFlags) -> Result<Self, CheckpointError> {
        let ckpt = Checkpoint::load(path)?;
        ckpt.ensure_flags(flags)?;
        Ok(ckpt)
    }

    pub fn ensure_flags(&self, flags: ModelFlags) -> Result<(), CheckpointError> {
        let stored = self.model.config.flags;
        if stored != flags {
            return Err(CheckpointError::Incompatible(format!(
                "checkpoint holds {} (dem={}, san={}, swap={}), requested {} (dem={}, san={}, swap={})",
                stored.variant_name(),
                stored.use_dem,
                stored.use_san,
                stored.dem_kernel_swap,
                flags.variant_name(),
                flags.use_dem,
                flags.use_san,
                flags.dem_kernel_swap
            )));
        }
        Ok(())
    }
}

struct Header {
    version: u32,
}

/// Validates magic, version, length and checksum; returns the body.
fn split_container(bytes: &[u8]) -> Result<(Header, &[u8]), CheckpointError> {
    if bytes.len() < MAGIC.len() {
        return Err(CheckpointError::Truncated {
            needed: HEADER_LEN + 8,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Truncated {
            needed: HEADER_LEN + 8,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let body_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let needed = usize::try_from(body_len)
        .ok()
        .and_then(|n| n.checked_add(HEADER_LEN + 8))
        .unwrap_or(usize::MAX);
    if bytes.len() < needed {
        return Err(CheckpointError::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    let stored = u64::from_le_bytes(bytes[needed - 8..needed].try_into().expect("8 bytes"));
    let computed = CHECKSUM.checksum(&bytes[..needed - 8]);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    if bytes.len() > needed {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after the checksum",
            bytes.len() - needed
        )));
    }
    Ok((Header { version }, &bytes[HEADER_LEN..needed - 8]))
}

/// Human-readable header and tensor table.
pub fn describe(path: &Path) -> Result<String, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    let c = &ckpt.model.config;
    let mut s = String::new();
    let _ = writeln!(s, "format: bivex checkpoint v{FORMAT_VERSION} ({} bytes)", bytes.len());
    let _ = writeln!(
        s,
        "variant: {} (use_dem={}, use_san={}, dem_kernel_swap={})",
        c.flags.variant_name(),
        c.flags.use_dem,
        c.flags.use_san,
        c.flags.dem_kernel_swap
    );
    let _ = writeln!(s, "input: {}x{}", c.input_size.0, c.input_size.1);
    let layers: Vec<String> = c
        .encoder
        .layers
        .iter()
        .map(|l| {
            let pool = l
                .pool
                .map(|(ph, pw)| format!("-pool{ph}x{pw}"))
                .unwrap_or_default();
            format!("{}c{}s{}p{}{pool}", l.out_channels, l.kernel, l.stride, l.pad)
        })
        .collect();
    let _ = writeln!(s, "encoder: in={} [{}]", c.encoder.input_channels, layers.join(", "));
    let _ = writeln!(
        s,
        "decoder: hidden={} attn={} max_len={} heads={}",
        c.decoder.hidden,
        c.decoder.attn_dim,
        c.decoder.max_len,
        if c.decoder.use_san { 2 } else { 1 }
    );
    let _ = writeln!(s, "vocabulary: {} ({} classes)", c.vocab.as_string(), c.vocab.len());
    let _ = writeln!(s, "iteration: {}", ckpt.iteration);
    let _ = writeln!(s, "seed: {}", ckpt.seed);
    let _ = writeln!(s, "val_accuracy: {}", ckpt.val_accuracy);
    match &ckpt.trainer {
        None => {
            let _ = writeln!(s, "trainer_state: none");
        }
        Some(t) => {
            let _ = writeln!(
                s,
                "trainer_state: lr={} decay={} epsilon={} stale_checks={} best_accuracy={} best_iteration={} batches_drawn={} best_params={}",
                t.optimizer.learning_rate,
                t.optimizer.decay,
                t.optimizer.epsilon,
                t.stale_checks,
                t.best_accuracy,
                t.best_iteration,
                t.batches_drawn,
                t.best_params.is_some()
            );
        }
    }
    let named = ckpt.model.params.named();
    let _ = writeln!(s, "tensors: {} ({} values)", named.len(), ckpt.model.params.count());
    for (name, t) in named {
        let _ = writeln!(s, "  {name} {:?}", t.shape());
    }
    Ok(s)
}

fn write_config(w: &mut Writer, c: &ModelConfig) {
    let f = c.flags;
    w.u8(f.use_dem as u8 | (f.use_san as u8) << 1 | (f.dem_kernel_swap as u8) << 2);
    w.u32(c.input_size.0 as u32);
    w.u32(c.input_size.1 as u32);
    w.u32(c.encoder.input_channels as u32);
    w.u32(c.encoder.layers.len() as u32);
    for l in &c.encoder.layers {
        w.u32(l.out_channels as u32);
        w.u32(l.kernel as u32);
        w.u32(l.stride as u32);
        w.u32(l.pad as u32);
        let (pooled, (ph, pw)) = match l.pool {
            Some(p) => (1, p),
            None => (0, (0, 0)),
        };
        w.u8(pooled);
        w.u32(ph as u32);
        w.u32(pw as u32);
    }
    w.u32(c.decoder.hidden as u32);
    w.u32(c.decoder.attn_dim as u32);
    w.u32(c.decoder.max_len as u32);
    w.u8(c.decoder.use_san as u8);
    w.str(&c.vocab.as_string());
}

fn read_config(r: &mut Reader) -> Result<ModelConfig, CheckpointError> {
    let bits = r.u8()?;
    if bits & !0b111 != 0 {
        return Err(CheckpointError::Malformed(format!("unknown flag bits {bits:#x}")));
    }
    let flags = ModelFlags {
        use_dem: bits & 1 != 0,
        use_san: bits & 2 != 0,
        dem_kernel_swap: bits & 4 != 0,
    };
    let input_size = (r.u32()? as usize, r.u32()? as usize);
    let input_channels = r.u32()? as usize;
    let n = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let out_channels = r.u32()? as usize;
        let kernel = r.u32()? as usize;
        let stride = r.u32()? as usize;
        let pad = r.u32()? as usize;
        let pooled = r.u8()?;
        let pool = (r.u32()? as usize, r.u32()? as usize);
        layers.push(ConvLayer {
            out_channels,
            kernel,
            stride,
            pad,
            pool: (pooled != 0).then_some(pool),
        });
    }
    let decoder = DecoderConfig {
        hidden: r.u32()? as usize,
        attn_dim: r.u32()? as usize,
        max_len: r.u32()? as usize,
        use_san: r.u8()? != 0,
    };
    let vocab = Vocabulary::new(&r.str()?)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok(ModelConfig {
        flags,
        input_size,
        encoder: EncoderConfig {
            input_channels,
            layers,
        },
        decoder,
        vocab,
    })
}

fn write_tensor_list(w: &mut Writer, prefix: &str, tensors: &[Tensor]) {
    w.u32(tensors.len() as u32);
    for (i, t) in tensors.iter().enumerate() {
        w.tensor(&format!("{prefix}.{i}"), t);
    }
}

/// Reads a list that must mirror the parameter shapes.
fn read_tensor_list(
    r: &mut Reader,
    expected: &[(String, &Tensor)],
) -> Result<Vec<Tensor>, CheckpointError> {
    let n = r.u32()? as usize;
    if n != expected.len() {
        return Err(CheckpointError::Shape(format!(
            "{n} state tensors for {} parameters",
            expected.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for (name, want) in expected {
        let (_, t) = r.tensor()?;
        if t.shape() != want.shape() {
            return Err(CheckpointError::Shape(format!(
                "state for {name} has shape {:?}, parameter has {:?}",
                t.shape(),
                want.shape()
            )));
        }
        out.push(t);
    }
    Ok(out)
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
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
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn is_done(&self) -> bool {
        self.remaining() == 0
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if n > self.remaining() {
            // The checksum already passed, so this is an inconsistent writer
            // rather than a short file.
            return Err(CheckpointError::Malformed(format!(
                "section needs {n} bytes at offset {}, {} remain",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("string is not UTF-8".into()))
    }
    fn tensor(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Shape(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(self.u64()?).map_err(|_| CheckpointError::Shape(format!("{name}: extent overflow")))?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.remaining()))
            .ok_or_else(|| CheckpointError::Shape(format!("{name}: shape {shape:?} exceeds stored data")))?;
        let raw = self.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Shape(e.to_string()))?;
        Ok((name, t))
    }
}
