//! Radar frame ingestion, cleaning, packing and splitting, plus a synthetic
//! advection generator.
//!
//! # Sequence container
//!
//! All integers little-endian:
//!
//! ```text
//! "AXSQ"                       4 bytes magic
//! version                      u32 (currently 1)
//! n_train, n_val, n_test       3 × u32
//! seq_len, height, width       3 × u32
//! seed                         u64
//! per sequence (train, val, test order):
//!   source, start              2 × u32
//! frames                       (n_train + n_val + n_test) · seq_len · height · width × f32
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AXSQ";
pub const VERSION: u32 = 1;
/// Frames kept per folder; shorter folders are rejected.
pub const FOLDER_FRAMES: usize = 240;
pub const SEQ_LEN: usize = 20;
pub const BAD_LIMIT: usize = 10;
pub const STANDARD_SPLIT: SplitSizes = SplitSizes { train: 2000, val: 500, test: 400 };

/// Map a byte pixel to `[0, 1]`.
pub fn normalize(p: u8) -> f64 {
    p as f64 / 255.0
}

/// Ordered grayscale frames `[L,H,W]` in `[0,1]`, tagged with their origin.
///
/// Values are stored at single precision (widened to `f64`) so that the
/// on-disk `f32` container reproduces them exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Tensor,
    pub source: u32,
    pub start: u32,
}

impl FrameSequence {
    pub fn new(frames: Tensor, source: u32, start: u32) -> Result<Self> {
        if frames.rank() != 3 || frames.numel() == 0 {
            return Err(Error::shape("frame sequence", format!("expected [L,H,W], got {:?}", frames.shape())));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("frame value {v} outside [0, 1]")));
        }
        let frames = frames.map(|v| v as f32 as f64);
        Ok(FrameSequence { frames, source, start })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    /// Frame `t` as `[H,W]`.
    pub fn frame(&self, t: usize) -> Tensor {
        self.frames.index_first(t)
    }

    /// Frames `start..start + len` as `[len,H,W]`.
    pub fn window(&self, start: usize, len: usize) -> Tensor {
        let hw = self.height() * self.width();
        let data = self.frames.data()[start * hw..(start + len) * hw].to_vec();
        Tensor::new(&[len, self.height(), self.width()], data).expect("window of a valid sequence")
    }

    pub fn frame_sum(&self, t: usize) -> f64 {
        let hw = self.height() * self.width();
        self.frames.data()[t * hw..(t + 1) * hw].iter().sum()
    }
}

/// Frames read from one folder, resized to a square target.
#[derive(Clone, Debug)]
pub struct RawFolder {
    pub path: PathBuf,
    pub size: usize,
    /// Row-major `size × size` byte images, in filename order.
    pub frames: Vec<Vec<u8>>,
}

#[derive(Debug)]
pub enum Ingest {
    Accepted(RawFolder),
    /// Fewer decodable frames than required.
    Rejected {
        path: PathBuf,
        frames: usize,
    },
}

/// Reads every decodable image in `folder` (lexicographic order) as 8-bit
/// grayscale, resized to `size × size` with a linear filter. Folders with
/// fewer than `clip` frames are rejected; longer ones keep the first `clip`.
pub fn ingest(folder: &Path, size: usize, clip: usize) -> Result<Ingest> {
    if size == 0 {
        return Err(Error::Config("target size must be positive".into()));
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(folder)
        .map_err(|e| Error::io(folder, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut frames = Vec::new();
    for path in &entries {
        if frames.len() == clip {
            break;
        }
        match load_gray(path, size) {
            Ok(f) => frames.push(f),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if frames.is_empty() {
        return Err(Error::Data(format!("{}: no decodable images", folder.display())));
    }
    if frames.len() < clip {
        return Ok(Ingest::Rejected { path: folder.to_path_buf(), frames: frames.len() });
    }
    Ok(Ingest::Accepted(RawFolder { path: folder.to_path_buf(), size, frames }))
}

fn load_gray(path: &Path, size: usize) -> Result<Vec<u8>> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?
        .to_luma8();
    let img = if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    };
    Ok(img.into_raw())
}

/// Non-overlapping windows of `len` frames; a trailing remainder is dropped.
pub fn chunk(raw: &RawFolder, source: u32, len: usize) -> Result<Vec<FrameSequence>> {
    if len == 0 {
        return Err(Error::Config("sequence length must be positive".into()));
    }
    let hw = raw.size * raw.size;
    let mut out = Vec::with_capacity(raw.frames.len() / len);
    for (k, group) in raw.frames.chunks_exact(len).enumerate() {
        let mut data = Vec::with_capacity(len * hw);
        for f in group {
            data.extend(f.iter().map(|&p| normalize(p)));
        }
        let t = Tensor::new(&[len, raw.size, raw.size], data)?;
        out.push(FrameSequence::new(t, source, (k * len) as u32)?);
    }
    Ok(out)
}

/// Percentile `p ∈ [0,100]` with linear interpolation between closest ranks.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty list");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

#[derive(Clone, Debug)]
pub struct FilterReport {
    pub kept: Vec<FrameSequence>,
    /// 25th percentile of per-frame pixel sums.
    pub lower: f64,
    /// 75th percentile of per-frame pixel sums.
    pub upper: f64,
    pub bad_frames: usize,
    pub dropped: usize,
}

/// Drops sequences with more than `bad_limit` frames whose pixel sum falls
/// outside the interquartile range of all frames in the corpus. Sequences
/// are kept whole or dropped whole, in input order.
pub fn quality_filter(seqs: Vec<FrameSequence>, bad_limit: usize) -> Result<FilterReport> {
    if seqs.is_empty() {
        return Err(Error::Data("quality filter needs at least one sequence".into()));
    }
    let sums: Vec<Vec<f64>> = seqs.iter().map(|s| (0..s.len()).map(|t| s.frame_sum(t)).collect()).collect();
    let all: Vec<f64> = sums.iter().flatten().copied().collect();
    let lower = percentile(&all, 25.0);
    let upper = percentile(&all, 75.0);
    let mut kept = Vec::with_capacity(seqs.len());
    let (mut bad_frames, mut dropped) = (0, 0);
    for (seq, s) in seqs.into_iter().zip(&sums) {
        let bad = s.iter().filter(|&&v| v < lower || v > upper).count();
        bad_frames += bad;
        if bad > bad_limit {
            dropped += 1;
        } else {
            kept.push(seq);
        }
    }
    Ok(FilterReport { kept, lower, upper, bad_frames, dropped })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 2000/500/400 when that many are available, otherwise 17% validation
    /// and 14% test (rounded down) with the rest in training. Leftovers
    /// beyond 2900 also go to training.
    pub fn standard(n: usize) -> Self {
        let p = STANDARD_SPLIT;
        if n >= p.train + p.val + p.test {
            SplitSizes { train: n - p.val - p.test, val: p.val, test: p.test }
        } else {
            let val = n * 17 / 100;
            let test = n * 14 / 100;
            SplitSizes { train: n - val - test, val, test }
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Train/validation/test partitions sharing one frame size and length.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<FrameSequence>,
    pub val: Vec<FrameSequence>,
    pub test: Vec<FrameSequence>,
    pub seed: u64,
}

/// In-place Fisher–Yates shuffle driven by SplitMix64; index `j` for
/// position `i` is `next_u64() mod (i + 1)`, fixed across platforms.
pub fn shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = SplitMix64::seed_from_u64(seed);
    for i in (1..items.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}

/// Seeded shuffle followed by a contiguous partition. `sizes` must account
/// for every sequence.
pub fn split(mut seqs: Vec<FrameSequence>, seed: u64, sizes: SplitSizes) -> Result<Dataset> {
    if sizes.total() != seqs.len() {
        return Err(Error::Config(format!(
            "split sizes {}+{}+{} do not cover {} sequences",
            sizes.train,
            sizes.val,
            sizes.test,
            seqs.len()
        )));
    }
    shuffle(&mut seqs, seed);
    let test = seqs.split_off(sizes.train + sizes.val);
    let val = seqs.split_off(sizes.train);
    Ok(Dataset { train: seqs, val, test, seed })
}

impl Dataset {
    pub fn all(&self) -> impl Iterator<Item = &FrameSequence> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    /// `(seq_len, height, width)`, validated to be shared by all sequences.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let first = self.all().next().ok_or_else(|| Error::Data("dataset is empty".into()))?;
        let d = (first.len(), first.height(), first.width());
        if let Some(s) = self.all().find(|s| (s.len(), s.height(), s.width()) != d) {
            return Err(Error::Data(format!(
                "mixed sequence shapes: {:?} and {:?}",
                d,
                (s.len(), s.height(), s.width())
            )));
        }
        Ok(d)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (l, h, w) = self.dims()?;
        let n = self.train.len() + self.val.len() + self.test.len();
        let mut out = Vec::with_capacity(48 + 8 * n + 4 * n * l * h * w);
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.train.len() as u32,
            self.val.len() as u32,
            self.test.len() as u32,
            l as u32,
            h as u32,
            w as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        for s in self.all() {
            out.extend_from_slice(&s.source.to_le_bytes());
            out.extend_from_slice(&s.start.to_le_bytes());
        }
        for s in self.all() {
            for &v in s.frames().data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: String| Error::Format { kind: "sequence", detail: d };
        if bytes.len() < 40 || &bytes[..4] != MAGIC {
            return Err(bad("missing AXSQ header".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let version = u32_at(4) as u32;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let (nt, nv, ne) = (u32_at(8), u32_at(12), u32_at(16));
        let (l, h, w) = (u32_at(20), u32_at(24), u32_at(28));
        let seed = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
        let n = nt + nv + ne;
        let expected = l
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(n))
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(40 + 8 * n))
            .ok_or_else(|| bad(format!("header claims {n} sequences of {l}x{h}x{w}")))?;
        let frame_len = l * h * w;
        if bytes.len() != expected {
            return Err(bad(format!(
                "expected {expected} bytes for {n} sequences of {l}x{h}x{w}, found {}",
                bytes.len()
            )));
        }
        let mut seqs = Vec::with_capacity(n);
        let data_base = 40 + 8 * n;
        for k in 0..n {
            let meta = 40 + 8 * k;
            let start = data_base + 4 * k * frame_len;
            let data = bytes[start..start + 4 * frame_len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let t = Tensor::new(&[l, h, w], data).map_err(|e| bad(format!("sequence {k}: {e}")))?;
            seqs.push(
                FrameSequence::new(t, u32_at(meta) as u32, u32_at(meta + 4) as u32)
                    .map_err(|e| bad(format!("sequence {k}: {e}")))?,
            );
        }
        let test = seqs.split_off(nt + nv);
        let val = seqs.split_off(nt);
        Ok(Dataset { train: seqs, val, test, seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Parameters of the synthetic advection generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub sequences: usize,
    pub len: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Upper bound on `|v|` per axis, pixels per frame.
    pub max_speed: f64,
    /// Overrides the sampled per-sequence velocity `(vx, vy)`.
    pub velocity: Option<(f64, f64)>,
    /// Upper bound on the per-frame relative intensity change.
    pub max_growth: f64,
    /// Half-width of the additive uniform noise.
    pub noise: f64,
}

impl SynthConfig {
    pub fn new(sequences: usize, len: usize, size: usize, seed: u64) -> Self {
        SynthConfig {
            sequences,
            len,
            height: size,
            width: size,
            seed,
            max_speed: 1.5,
            velocity: None,
            max_growth: 0.03,
            noise: 0.02,
        }
    }
}

struct Cell {
    x: f64,
    y: f64,
    sigma: f64,
    amp: f64,
    growth: f64,
}

/// Signed offset of `d` wrapped into `[-n/2, n/2)`.
fn wrap(d: f64, n: f64) -> f64 {
    (d + n / 2.0).rem_euclid(n) - n / 2.0
}

/// Sequences of one to three Gaussian cells drifting with a shared constant
/// velocity on a torus, with linear intensity growth or decay and clamped
/// uniform noise. Fully determined by `cfg.seed`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<FrameSequence>> {
    if cfg.len == 0 || cfg.height == 0 || cfg.width == 0 {
        return Err(Error::Config("synthetic sequences need positive length and extent".into()));
    }
    let mut rng = SplitMix64::seed_from_u64(cfg.seed);
    let (hf, wf) = (cfg.height as f64, cfg.width as f64);
    let span = hf.min(wf);
    let mut out = Vec::with_capacity(cfg.sequences);
    for s in 0..cfg.sequences {
        let (vx, vy) = match cfg.velocity {
            Some(v) => v,
            None if cfg.max_speed > 0.0 => {
                (rng.random_range(-cfg.max_speed..=cfg.max_speed), rng.random_range(-cfg.max_speed..=cfg.max_speed))
            }
            None => (0.0, 0.0),
        };
        let n_cells = rng.random_range(1..=3);
        let cells: Vec<Cell> = (0..n_cells)
            .map(|_| Cell {
                x: rng.random_range(0.0..wf),
                y: rng.random_range(0.0..hf),
                sigma: rng.random_range(span / 16.0..=span / 8.0),
                amp: rng.random_range(0.5..=1.0),
                growth: if cfg.max_growth > 0.0 { rng.random_range(-cfg.max_growth..=cfg.max_growth) } else { 0.0 },
            })
            .collect();
        let mut data = Vec::with_capacity(cfg.len * cfg.height * cfg.width);
        for t in 0..cfg.len {
            let tf = t as f64;
            for i in 0..cfg.height {
                for j in 0..cfg.width {
                    let mut v = 0.0;
                    for c in &cells {
                        let dx = wrap(j as f64 - (c.x + vx * tf), wf);
                        let dy = wrap(i as f64 - (c.y + vy * tf), hf);
                        let amp = (c.amp * (1.0 + c.growth * tf)).max(0.0);
                        v += amp * (-(dx * dx + dy * dy) / (2.0 * c.sigma * c.sigma)).exp();
                    }
                    if cfg.noise > 0.0 {
                        v += rng.random_range(-cfg.noise..=cfg.noise);
                    }
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        let t = Tensor::new(&[cfg.len, cfg.height, cfg.width], data)?;
        out.push(FrameSequence::new(t, s as u32, 0)?);
    }
    Ok(out)
}
