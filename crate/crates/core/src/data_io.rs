//! The SNRG tensor container, the checkpoint file, and the synthetic
//! audio-visual dataset.
//!
//! SNRG layout (little-endian): `"SNRG"`, `u16` version (1), `u8` dtype
//! (0 = f32, 1 = binary stored one byte per element), `u8` rank, `rank × u32`
//! dims, then the row-major payload.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SNRG";
pub const VERSION: u16 = 1;
const CKPT_MAGIC: &[u8; 4] = b"SNCK";
const CKPT_VERSION: u16 = 1;
/// Refuse headers that claim more elements than this, before touching the payload.
const MAX_ELEMENTS: u64 = 1 << 34;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    Binary = 1,
}

impl Dtype {
    fn elem_size(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::Binary => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic,
    UnsupportedVersion(u16),
    UnknownDtype(u8),
    ZeroRank,
    ZeroDim { axis: usize },
    DimOverflow,
    Truncated { needed: u64, available: u64 },
    NonBinaryValue(u8),
    TrailingBytes(u64),
    Header(String),
}

impl fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadMagic => write!(f, "bad magic"),
            Self::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            Self::UnknownDtype(d) => write!(f, "unknown dtype {d}"),
            Self::ZeroRank => write!(f, "zero-rank tensor"),
            Self::ZeroDim { axis } => write!(f, "dimension {axis} is zero"),
            Self::DimOverflow => write!(f, "dimension product overflows"),
            Self::Truncated { needed, available } => write!(f, "truncated: need {needed} bytes, have {available}"),
            Self::NonBinaryValue(b) => write!(f, "binary payload holds byte {b}"),
            Self::TrailingBytes(n) => write!(f, "{n} trailing bytes"),
            Self::Header(m) => write!(f, "malformed header: {m}"),
        }
    }
}

/// A malformed file, with the byte offset at which parsing stopped.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("{kind} at byte offset {offset}")]
pub struct FormatError {
    pub offset: u64,
    pub kind: FormatErrorKind,
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
    base: u64,
}

impl<'b> Reader<'b> {
    fn err(&self, kind: FormatErrorKind) -> FormatError {
        FormatError {
            offset: self.base + self.pos as u64,
            kind,
        }
    }

    fn take(&mut self, n: u64) -> Result<&'b [u8], FormatError> {
        let available = (self.buf.len() - self.pos) as u64;
        if n > available {
            return Err(self.err(FormatErrorKind::Truncated { needed: n, available }));
        }
        let s = &self.buf[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Serialize `t`. `Dtype::Binary` requires every element to be 0 or 1.
pub fn encode_tensor(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize || t.shape().iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::validation(format!("shape {:?} not representable", t.shape())));
    }
    if dtype == Dtype::Binary && !t.is_binary() {
        return Err(Error::validation("binary dtype for a non-binary tensor"));
    }
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + t.numel() * dtype.elem_size() as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::Binary => out.extend(t.data().iter().map(|&v| v as u8)),
    }
    Ok(out)
}

fn decode_one(r: &mut Reader<'_>) -> Result<(Tensor, Dtype), FormatError> {
    let start = r.pos;
    if r.take(4).map_err(|_| FormatError {
        offset: r.base + start as u64,
        kind: FormatErrorKind::BadMagic,
    })? != MAGIC
    {
        r.pos = start;
        return Err(r.err(FormatErrorKind::BadMagic));
    }
    let version = r.u16()?;
    if version != VERSION {
        r.pos -= 2;
        return Err(r.err(FormatErrorKind::UnsupportedVersion(version)));
    }
    let dtype = match r.u8()? {
        0 => Dtype::F32,
        1 => Dtype::Binary,
        d => {
            r.pos -= 1;
            return Err(r.err(FormatErrorKind::UnknownDtype(d)));
        }
    };
    let rank = r.u8()? as usize;
    if rank == 0 {
        r.pos -= 1;
        return Err(r.err(FormatErrorKind::ZeroRank));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: u64 = 1;
    for axis in 0..rank {
        let d = r.u32()?;
        if d == 0 {
            r.pos -= 4;
            return Err(r.err(FormatErrorKind::ZeroDim { axis }));
        }
        count = match count.checked_mul(d as u64) {
            Some(c) if c <= MAX_ELEMENTS => c,
            _ => {
                r.pos -= 4;
                return Err(r.err(FormatErrorKind::DimOverflow));
            }
        };
        shape.push(d as usize);
    }
    let payload_at = r.pos;
    let bytes = r.take(count * dtype.elem_size())?;
    let data: Vec<f32> = match dtype {
        Dtype::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        Dtype::Binary => {
            if let Some(i) = bytes.iter().position(|&b| b > 1) {
                r.pos = payload_at + i;
                return Err(r.err(FormatErrorKind::NonBinaryValue(bytes[i])));
            }
            bytes.iter().map(|&b| b as f32).collect()
        }
    };
    let t = Tensor::from_vec(&shape, data).expect("validated shape");
    Ok((t, dtype))
}

/// Parse exactly one tensor occupying all of `bytes`.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor, Dtype), FormatError> {
    let mut r = Reader { buf: bytes, pos: 0, base: 0 };
    let out = decode_one(&mut r)?;
    if r.pos != bytes.len() {
        return Err(r.err(FormatErrorKind::TrailingBytes((bytes.len() - r.pos) as u64)));
    }
    Ok(out)
}

pub fn write_tensor_as(path: impl AsRef<Path>, t: &Tensor, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t, dtype)?).with_context(|| format!("writing {}", path.display()))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_tensor_as(path, t, Dtype::F32)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (t, _) = decode_tensor(&bytes)
        .map_err(Error::from)
        .with_context(|| path.display().to_string())?;
    Ok(t)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader<C> {
    tensors: Vec<String>,
    config: C,
}

/// `"SNCK"`, `u16` version, `u32` header length, a TOML header with the
/// configuration and tensor names, then one SNRG record per tensor.
pub fn encode_checkpoint<C: Serialize>(config: &C, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        tensors: tensors.iter().map(|(n, _)| n.clone()).collect(),
        config,
    };
    let text = toml::to_string(&header).map_err(|e| Error::validation(format!("checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (_, t) in tensors {
        out.extend(encode_tensor(t, Dtype::F32)?);
    }
    Ok(out)
}

pub fn decode_checkpoint<C: DeserializeOwned>(bytes: &[u8]) -> Result<(C, Vec<(String, Tensor)>), FormatError> {
    let mut r = Reader { buf: bytes, pos: 0, base: 0 };
    if r.take(4).ok() != Some(CKPT_MAGIC.as_slice()) {
        return Err(FormatError {
            offset: 0,
            kind: FormatErrorKind::BadMagic,
        });
    }
    let v = r.u16()?;
    if v != CKPT_VERSION {
        return Err(FormatError {
            offset: 4,
            kind: FormatErrorKind::UnsupportedVersion(v),
        });
    }
    let len = r.u32()? as u64;
    let header_at = r.pos as u64;
    let text = std::str::from_utf8(r.take(len)?).map_err(|e| FormatError {
        offset: header_at + e.valid_up_to() as u64,
        kind: FormatErrorKind::Header("not UTF-8".into()),
    })?;
    let header: CheckpointHeader<C> = toml::from_str(text).map_err(|e| FormatError {
        offset: header_at,
        kind: FormatErrorKind::Header(e.message().to_string()),
    })?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for name in header.tensors {
        let (t, _) = decode_one(&mut r)?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(r.err(FormatErrorKind::TrailingBytes((bytes.len() - r.pos) as u64)));
    }
    Ok((header.config, tensors))
}

/// Description of a synthetic correlated audio-visual classification set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    /// Per class, across all three splits.
    pub samples_per_class: usize,
    pub hw: (usize, usize),
    pub timesteps: usize,
    pub video_channels: usize,
    pub audio_channels: usize,
    /// Probability that the audio stream carries the video's class.
    pub cross_modal_correlation: f64,
    pub noise_sigma: f64,
    /// Give every class its own on/off amplitude schedule over time.
    pub temporal_signal: bool,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            samples_per_class: 50,
            hw: (32, 32),
            timesteps: 4,
            video_channels: 3,
            audio_channels: 1,
            cross_modal_correlation: 0.9,
            noise_sigma: 0.5,
            temporal_signal: true,
            val_fraction: 0.2,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cross_modal_correlation) {
            return Err(Error::validation(format!("correlation {} outside [0, 1]", self.cross_modal_correlation)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::validation(format!("noise sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        if self.num_classes < 2 || self.samples_per_class == 0 || self.timesteps == 0 {
            return Err(Error::validation("need >= 2 classes, >= 1 sample per class and >= 1 timestep"));
        }
        if self.hw.0 == 0 || self.hw.1 == 0 || self.video_channels == 0 || self.audio_channels == 0 {
            return Err(Error::validation("image size and channel counts must be positive"));
        }
        let (v, t) = self.split_counts();
        if v + t >= self.samples_per_class || !(self.val_fraction >= 0.0 && self.test_fraction >= 0.0) {
            return Err(Error::validation("validation and test fractions leave no training samples"));
        }
        Ok(())
    }

    /// Per-class (val, test) counts; the remainder trains.
    pub fn split_counts(&self) -> (usize, usize) {
        let n = self.samples_per_class as f64;
        ((n * self.val_fraction).round() as usize, (n * self.test_fraction).round() as usize)
    }
}

/// One split of a dataset: `video [n, T, Cv, H, W]`, `audio [n, T, Ca, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub video: Tensor,
    pub audio: Tensor,
    pub labels: Vec<usize>,
    /// Class whose pattern the audio stream carries.
    pub audio_labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn timesteps(&self) -> usize {
        self.video.shape()[1]
    }

    /// Gather samples into model layout `[T, B, C, H, W]` with `t` timesteps;
    /// model step `s` reads stored frame `⌊s · T_stored / t⌋`.
    pub fn batch(&self, indices: &[usize], t: usize) -> Result<(Tensor, Tensor, Vec<usize>)> {
        if indices.is_empty() || t == 0 {
            return Err(Error::validation("empty batch"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::validation(format!("sample index {bad} out of range {}", self.len())));
        }
        let gather = |src: &Tensor| -> Tensor {
            let s = src.shape();
            let (ts, frame) = (s[1], s[2] * s[3] * s[4]);
            let b = indices.len();
            let mut out = Vec::with_capacity(t * b * frame);
            for step in 0..t {
                let f = step * ts / t;
                for &i in indices {
                    let off = (i * ts + f) * frame;
                    out.extend_from_slice(&src.data()[off..off + frame]);
                }
            }
            Tensor::from_vec(&[t, b, s[2], s[3], s[4]], out).expect("gather shape")
        };
        Ok((gather(&self.video), gather(&self.audio), indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::config(format!("unknown split '{name}'"))),
        }
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct ClassPatterns {
    /// `[C, H, W]` per class.
    spatial: Vec<Vec<f32>>,
    /// `[T]` amplitude per class.
    schedule: Vec<Vec<f32>>,
}

fn class_patterns(spec: &DatasetSpec, channels: usize, tag: u64) -> ClassPatterns {
    let (h, w) = spec.hw;
    let grid = 4usize;
    let mut spatial = Vec::new();
    let mut schedule = Vec::new();
    for c in 0..spec.num_classes {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(spec.seed, tag), c as u64));
        let cells: Vec<f32> = (0..channels * grid * grid).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let mut p = Vec::with_capacity(channels * h * w);
        for ch in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    p.push(cells[(ch * grid + y * grid / h) * grid + x * grid / w]);
                }
            }
        }
        spatial.push(p);
        let sched = if spec.temporal_signal {
            loop {
                let s: Vec<f32> = (0..spec.timesteps).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.25 }).collect();
                if s.contains(&1.0) {
                    break s;
                }
            }
        } else {
            vec![1.0; spec.timesteps]
        };
        schedule.push(sched);
    }
    ClassPatterns { spatial, schedule }
}

fn render(out: &mut Vec<f32>, pat: &ClassPatterns, class: usize, sigma: f64, rng: &mut ChaCha8Rng) {
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    for &amp in &pat.schedule[class] {
        for &p in &pat.spatial[class] {
            let n = if sigma > 0.0 { noise.sample(rng) as f32 } else { 0.0 };
            out.push(amp * p + n);
        }
    }
}

/// Deterministically generate all three splits. Each sample draws from a
/// generator seeded by `(seed, global index)`, so generation order is irrelevant.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let video_pat = class_patterns(spec, spec.video_channels, 1);
    let audio_pat = class_patterns(spec, spec.audio_channels, 2);
    let (n_val, n_test) = spec.split_counts();
    let n_train = spec.samples_per_class - n_val - n_test;
    let (h, w) = spec.hw;
    let mut index = 0u64;
    let mut make = |per_class: usize| -> Result<Split> {
        if per_class == 0 {
            return Ok(empty_split(spec));
        }
        let n = per_class * spec.num_classes;
        let mut video = Vec::with_capacity(n * spec.timesteps * spec.video_channels * h * w);
        let mut audio = Vec::with_capacity(n * spec.timesteps * spec.audio_channels * h * w);
        let mut labels = Vec::with_capacity(n);
        let mut audio_labels = Vec::with_capacity(n);
        // interleave classes so any prefix of a split stays near balanced
        for _ in 0..per_class {
            for class in 0..spec.num_classes {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, index));
                index += 1;
                let ac = if rng.gen_bool(spec.cross_modal_correlation) {
                    class
                } else {
                    rng.gen_range(0..spec.num_classes)
                };
                render(&mut video, &video_pat, class, spec.noise_sigma, &mut rng);
                render(&mut audio, &audio_pat, ac, spec.noise_sigma, &mut rng);
                labels.push(class);
                audio_labels.push(ac);
            }
        }
        let t = spec.timesteps;
        Ok(Split {
            video: Tensor::from_vec(&[n, t, spec.video_channels, h, w], video)?,
            audio: Tensor::from_vec(&[n, t, spec.audio_channels, h, w], audio)?,
            labels,
            audio_labels,
        })
    };
    let train = make(n_train)?;
    let val = make(n_val)?;
    let test = make(n_test)?;
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

fn labels_tensor(labels: &[usize]) -> Result<Tensor> {
    Tensor::from_vec(&[labels.len().max(1)], if labels.is_empty() { vec![0.0] } else { labels.iter().map(|&l| l as f32).collect() })
}

/// Write `{train,val,test}/{video,audio,labels,audio_labels}.snrg` and `manifest.toml`.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let manifest = toml::to_string(&ds.spec).map_err(|e| Error::validation(e.to_string()))?;
    fs::write(dir.join("manifest.toml"), manifest)?;
    for (name, split) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        if split.is_empty() {
            continue;
        }
        let d = dir.join(name);
        fs::create_dir_all(&d)?;
        write_tensor(d.join("video.snrg"), &split.video)?;
        write_tensor(d.join("audio.snrg"), &split.audio)?;
        write_tensor(d.join("labels.snrg"), &labels_tensor(&split.labels)?)?;
        write_tensor(d.join("audio_labels.snrg"), &labels_tensor(&split.audio_labels)?)?;
    }
    Ok(())
}

fn read_labels(path: &Path, n: usize) -> Result<Vec<usize>> {
    let t = read_tensor(path)?;
    if t.numel() != n {
        return Err(Error::validation(format!("{}: {} labels for {n} samples", path.display(), t.numel())));
    }
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::validation(format!("{}: invalid label {v}", path.display())))
            }
        })
        .collect()
}

/// A split with no samples; the tensors hold one zero placeholder frame.
fn empty_split(spec: &DatasetSpec) -> Split {
    let (h, w) = spec.hw;
    let t = spec.timesteps;
    Split {
        video: Tensor::zeros(&[1, t, spec.video_channels, h, w]),
        audio: Tensor::zeros(&[1, t, spec.audio_channels, h, w]),
        labels: Vec::new(),
        audio_labels: Vec::new(),
    }
}

fn load_split(dir: &Path, spec: &DatasetSpec) -> Result<Split> {
    if !dir.exists() {
        return Ok(empty_split(spec));
    }
    let video = read_tensor(dir.join("video.snrg"))?;
    let audio = read_tensor(dir.join("audio.snrg"))?;
    if video.rank() != 5 || audio.rank() != 5 || video.shape()[0] != audio.shape()[0] || video.shape()[1] != audio.shape()[1] {
        return Err(Error::shape("dataset split", video.shape(), audio.shape()));
    }
    let n = video.shape()[0];
    let labels = read_labels(&dir.join("labels.snrg"), n)?;
    let audio_labels = read_labels(&dir.join("audio_labels.snrg"), n)?;
    Ok(Split {
        video,
        audio,
        labels,
        audio_labels,
    })
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.toml")).with_context(|| format!("reading manifest in {}", dir.display()))?;
    let spec: DatasetSpec = toml::from_str(&text).map_err(|e| Error::config(format!("manifest: {e}")))?;
    Ok(Dataset {
        train: load_split(&dir.join("train"), &spec)?,
        val: load_split(&dir.join("val"), &spec)?,
        test: load_split(&dir.join("test"), &spec)?,
        spec,
    })
}
