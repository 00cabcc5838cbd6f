//! RAW/Bayer data model and the preprocessing that produces the diffusion
//! model's conditional input.
//!
//! A mosaiced frame ([`RawImage`]) is demultiplexed into four normalized
//! planes ([`PackedRaw`], channel order R,G1,B,G2). The conditional stack
//! is the packed image concatenated with a 2-channel positional encoding
//! and a 4-channel global histogram equalization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

pub const HIST_BINS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BayerPattern {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl BayerPattern {
    /// (dy, dx) offsets of the R, G1, B, G2 samples inside each 2x2 cell.
    fn offsets(self) -> [(usize, usize); 4] {
        match self {
            BayerPattern::Rggb => [(0, 0), (0, 1), (1, 1), (1, 0)],
            BayerPattern::Bggr => [(1, 1), (0, 1), (0, 0), (1, 0)],
            BayerPattern::Grbg => [(0, 1), (0, 0), (1, 0), (1, 1)],
            BayerPattern::Gbrg => [(1, 0), (0, 0), (0, 1), (1, 1)],
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "RGGB" => Some(BayerPattern::Rggb),
            "BGGR" => Some(BayerPattern::Bggr),
            "GRBG" => Some(BayerPattern::Grbg),
            "GBRG" => Some(BayerPattern::Gbrg),
            _ => None,
        }
    }
}

impl fmt::Display for BayerPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BayerPattern::Rggb => "RGGB",
            BayerPattern::Bggr => "BGGR",
            BayerPattern::Grbg => "GRBG",
            BayerPattern::Gbrg => "GBRG",
        };
        f.write_str(s)
    }
}

/// Sensor and capture metadata carried alongside pixel data.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMeta {
    pub pattern: BayerPattern,
    pub black_level: u16,
    pub white_level: u16,
    /// Amplification factor between this capture and its reference (>= 1).
    pub exposure_ratio: f32,
    pub camera_id: String,
}

impl RawMeta {
    pub fn dynamic_range(&self) -> f32 {
        (self.white_level - self.black_level) as f32
    }
}

/// A mosaiced sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub mosaic: Vec<u16>,
    pub meta: RawMeta,
}

impl RawImage {
    pub fn validate(&self) -> Result<()> {
        if self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(Error::Data(format!(
                "raw dimensions must be even, got {}x{}",
                self.width, self.height
            )));
        }
        if self.mosaic.len() != self.width * self.height {
            return Err(Error::Data(format!(
                "mosaic has {} samples, expected {}",
                self.mosaic.len(),
                self.width * self.height
            )));
        }
        if self.meta.black_level >= self.meta.white_level {
            return Err(Error::Data(format!(
                "black level {} must be below white level {}",
                self.meta.black_level, self.meta.white_level
            )));
        }
        if let Some(&s) = self.mosaic.iter().find(|&&s| s > self.meta.white_level) {
            return Err(Error::Data(format!(
                "sample {s} exceeds white level {}",
                self.meta.white_level
            )));
        }
        Ok(())
    }
}

/// Normalized 4-plane representation of a mosaic (R, G1, B, G2).
#[derive(Debug, Clone, PartialEq)]
pub struct PackedRaw {
    /// Shape [4, H/2, W/2].
    pub data: Tensor,
    pub meta: RawMeta,
}

impl PackedRaw {
    pub fn new(data: Tensor, meta: RawMeta) -> Result<Self> {
        if data.shape().len() != 3 || data.shape()[0] != 4 {
            return Err(Error::shape("PackedRaw::new", format!("{:?}", data.shape())));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite { context: "PackedRaw::new".into() });
        }
        Ok(PackedRaw { data, meta })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Exposure-ratio amplification followed by the saturation clip.
    pub fn amplified(&self) -> PackedRaw {
        PackedRaw {
            data: self.data.scale(self.meta.exposure_ratio).clip(0.0, 1.0),
            meta: self.meta.clone(),
        }
    }
}

/// Conditional input stack: [packed(4) | positional encoding(2) | hist-eq(4)].
#[derive(Debug, Clone)]
pub struct ConditionStack {
    /// Shape [10, h, w].
    pub data: Tensor,
}

/// Demultiplex and normalize: (sample - black).max(0) / (white - black).
pub fn pack(raw: &RawImage) -> Result<PackedRaw> {
    raw.validate()?;
    let (h, w) = (raw.height / 2, raw.width / 2);
    let d = raw.meta.dynamic_range();
    let offs = raw.meta.pattern.offsets();
    let mut out = vec![0.0f32; 4 * h * w];
    for (c, &(dy, dx)) in offs.iter().enumerate() {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let s = raw.mosaic[(2 * y + dy) * raw.width + (2 * x + dx)];
                let v = (s as f32 - raw.meta.black_level as f32).max(0.0) / d;
                plane[y * w + x] = v;
            }
        }
    }
    PackedRaw::new(Tensor::new(vec![4, h, w], out)?, raw.meta.clone())
}

/// Inverse of [`pack`] up to DN quantization; input values are clipped to [0,1].
pub fn unpack(p: &PackedRaw) -> RawImage {
    let (h, w) = (p.height(), p.width());
    let meta = p.meta.clone();
    let d = meta.dynamic_range();
    let offs = meta.pattern.offsets();
    let mut mosaic = vec![meta.black_level; 4 * h * w];
    let width = 2 * w;
    for (c, &(dy, dx)) in offs.iter().enumerate() {
        let plane = &p.data.data()[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x].clamp(0.0, 1.0);
                let dn = (v * d).round() as u32 + meta.black_level as u32;
                mosaic[(2 * y + dy) * width + (2 * x + dx)] = dn.min(meta.white_level as u32) as u16;
            }
        }
    }
    RawImage { width, height: 2 * h, mosaic, meta }
}

/// Global histogram equalization over all four channels jointly.
///
/// Values are binned on [0, max] with [`HIST_BINS`] bins and remapped through
/// the empirical CDF onto [0,1]. A constant image maps to all zeros.
pub fn hist_equalize(p: &PackedRaw) -> PackedRaw {
    let data = p.data.data();
    let vmin = data.iter().cloned().fold(f32::INFINITY, f32::min);
    let vmax = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if vmax <= vmin {
        return PackedRaw {
            data: Tensor::zeros(p.data.shape().to_vec()),
            meta: p.meta.clone(),
        };
    }
    let bin_of = |v: f32| -> usize { ((v / vmax * (HIST_BINS as f32 - 1.0)) as usize).min(HIST_BINS - 1) };
    let mut counts = vec![0u64; HIST_BINS];
    for &v in data {
        counts[bin_of(v)] += 1;
    }
    let mut cdf = vec![0.0f32; HIST_BINS];
    let total = data.len() as f64;
    let mut acc = 0u64;
    for (i, &c) in counts.iter().enumerate() {
        acc += c;
        cdf[i] = (acc as f64 / total) as f32;
    }
    let out = p.data.map(|v| cdf[bin_of(v)]);
    PackedRaw { data: out, meta: p.meta.clone() }
}

/// Two normalized-coordinate channels: row index / (h-1), col index / (w-1).
pub fn position_encoding(h: usize, w: usize) -> Tensor {
    let mut out = vec![0.0f32; 2 * h * w];
    let hn = (h.max(2) - 1) as f32;
    let wn = (w.max(2) - 1) as f32;
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = y as f32 / hn;
            out[h * w + y * w + x] = x as f32 / wn;
        }
    }
    Tensor::new(vec![2, h, w], out).unwrap()
}

/// Channel layout: [packed(4) | posenc(2) | histeq(4)]. This layout is part
/// of the checkpoint contract and must stay stable.
pub fn build_condition(p: &PackedRaw) -> ConditionStack {
    let (h, w) = (p.height(), p.width());
    let pos = position_encoding(h, w);
    let heq = hist_equalize(p);
    let mut data = Vec::with_capacity(10 * h * w);
    data.extend_from_slice(p.data.data());
    data.extend_from_slice(pos.data());
    data.extend_from_slice(heq.data.data());
    ConditionStack {
        data: Tensor::new(vec![10, h, w], data).unwrap(),
    }
}

/// Non-overlapping r x r mean over the trailing two dimensions; r in {1,2}.
pub fn downsample(x: &Tensor, r: usize) -> Result<Tensor> {
    if !(r == 1 || r == 2) {
        return Err(Error::invalid("downsample", format!("factor must be 1 or 2, got {r}")));
    }
    if r == 1 {
        return Ok(x.clone());
    }
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape("downsample", format!("{s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("downsample", format!("dims {h}x{w} not divisible by {r}")));
    }
    let c: usize = s[..s.len() - 2].iter().product();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; c * oh * ow];
    for ci in 0..c {
        let src = &x.data()[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for y in 0..oh {
            for x_ in 0..ow {
                let i = 2 * y * w + 2 * x_;
                let sum = src[i] as f64 + src[i + 1] as f64 + src[i + w] as f64 + src[i + w + 1] as f64;
                dst[y * ow + x_] = (sum * 0.25) as f32;
            }
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Tensor::new(shape, out)
}

/// Nearest-neighbor replication over the trailing two dimensions; r in {1,2}.
pub fn upsample(x: &Tensor, r: usize) -> Result<Tensor> {
    if !(r == 1 || r == 2) {
        return Err(Error::invalid("upsample", format!("factor must be 1 or 2, got {r}")));
    }
    if r == 1 {
        return Ok(x.clone());
    }
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape("upsample", format!("{s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let c: usize = s[..s.len() - 2].iter().product();
    let mut out = vec![0.0f32; c * 4 * h * w];
    for ci in 0..c {
        let src = &x.data()[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * 4 * h * w..(ci + 1) * 4 * h * w];
        for y in 0..h {
            for x_ in 0..w {
                let v = src[y * w + x_];
                let base = 2 * y * 2 * w + 2 * x_;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + 2 * w] = v;
                dst[base + 2 * w + 1] = v;
            }
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 2] = 2 * h;
    shape[n - 1] = 2 * w;
    Tensor::new(shape, out)
}

pub enum CropMode<'a, R: Rng> {
    Center,
    Random(&'a mut R),
}

/// Aligned square crop of the packed image.
pub fn crop<R: Rng>(p: &PackedRaw, size: usize, mode: CropMode<'_, R>) -> Result<PackedRaw> {
    let (h, w) = (p.height(), p.width());
    if size > h || size > w || size == 0 {
        return Err(Error::invalid(
            "crop",
            format!("size {size} out of range for {h}x{w}"),
        ));
    }
    let (oy, ox) = match mode {
        CropMode::Center => ((h - size) / 2, (w - size) / 2),
        CropMode::Random(rng) => {
            let oy = rng.random_range(0..=h - size);
            let ox = rng.random_range(0..=w - size);
            (oy, ox)
        }
    };
    let mut out = vec![0.0f32; 4 * size * size];
    for c in 0..4 {
        let src = &p.data.data()[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * size * size..(c + 1) * size * size];
        for y in 0..size {
            dst[y * size..(y + 1) * size]
                .copy_from_slice(&src[(oy + y) * w + ox..(oy + y) * w + ox + size]);
        }
    }
    PackedRaw::new(Tensor::new(vec![4, size, size], out)?, p.meta.clone())
}

// --- .r4 container -------------------------------------------------------
//
// 128-byte text header, then the mosaic as little-endian u16, row-major.
// Header: `R4\n` followed by space-separated key=value pairs
// (width, height, pattern, black, white, ratio, camera), padded with
// spaces to exactly 128 bytes.

pub const R4_HEADER_LEN: usize = 128;

pub fn write_r4(path: &Path, raw: &RawImage) -> Result<()> {
    raw.validate()?;
    let mut header = format!(
        "R4\nwidth={} height={} pattern={} black={} white={} ratio={} camera={}\n",
        raw.width,
        raw.height,
        raw.meta.pattern,
        raw.meta.black_level,
        raw.meta.white_level,
        raw.meta.exposure_ratio,
        raw.meta.camera_id
    );
    if header.len() > R4_HEADER_LEN {
        return Err(Error::Data(format!(
            "r4 header too long ({} bytes); shorten camera id",
            header.len()
        )));
    }
    header.push_str(&" ".repeat(R4_HEADER_LEN - header.len()));
    let mut buf = Vec::with_capacity(R4_HEADER_LEN + 2 * raw.mosaic.len());
    buf.extend_from_slice(header.as_bytes());
    for &s in &raw.mosaic {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_r4(path: &Path) -> Result<RawImage> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; R4_HEADER_LEN];
    f.read_exact(&mut header)
        .map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&header)
        .map_err(|_| parse_err(path, 1, "header is not UTF-8"))?;
    if !text.starts_with("R4\n") {
        return Err(parse_err(path, 1, "bad magic, expected R4"));
    }
    let fields_line = text[3..].lines().next().unwrap_or("");
    let mut width = None;
    let mut height = None;
    let mut pattern = None;
    let mut black = None;
    let mut white = None;
    let mut ratio = None;
    let mut camera = None;
    for kv in fields_line.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| parse_err(path, 2, format!("expected key=value, got {kv:?}")))?;
        match k {
            "width" => width = Some(parse_num::<usize>(path, v, "width")?),
            "height" => height = Some(parse_num::<usize>(path, v, "height")?),
            "pattern" => {
                pattern = Some(
                    BayerPattern::parse(v)
                        .ok_or_else(|| parse_err(path, 2, format!("unknown pattern {v:?}")))?,
                )
            }
            "black" => black = Some(parse_num::<u16>(path, v, "black")?),
            "white" => white = Some(parse_num::<u16>(path, v, "white")?),
            "ratio" => ratio = Some(parse_num::<f32>(path, v, "ratio")?),
            "camera" => camera = Some(v.to_string()),
            _ => return Err(parse_err(path, 2, format!("unknown header key {k:?}"))),
        }
    }
    let width = width.ok_or_else(|| parse_err(path, 2, "missing width"))?;
    let height = height.ok_or_else(|| parse_err(path, 2, "missing height"))?;
    let meta = RawMeta {
        pattern: pattern.ok_or_else(|| parse_err(path, 2, "missing pattern"))?,
        black_level: black.ok_or_else(|| parse_err(path, 2, "missing black"))?,
        white_level: white.ok_or_else(|| parse_err(path, 2, "missing white"))?,
        exposure_ratio: ratio.ok_or_else(|| parse_err(path, 2, "missing ratio"))?,
        camera_id: camera.ok_or_else(|| parse_err(path, 2, "missing camera"))?,
    };
    let mut payload = Vec::new();
    f.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != 2 * width * height {
        return Err(Error::Data(format!(
            "r4 payload is {} bytes, expected {} for {}x{}",
            payload.len(),
            2 * width * height,
            width,
            height
        )));
    }
    let mosaic = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let raw = RawImage { width, height, mosaic, meta };
    raw.validate()?;
    Ok(raw)
}

fn parse_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

fn parse_num<T: std::str::FromStr>(path: &Path, v: &str, name: &str) -> Result<T> {
    v.parse()
        .map_err(|_| parse_err(path, 2, format!("bad {name} value {v:?}")))
}
