//! Raw video I/O: YUV4MPEG2 and headerless planar YUV.
//!
//! Samples are held as `u16` regardless of bit depth. High bit depth Y4M
//! stores two bytes per sample, little-endian.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const Y4M_SIGNATURE: &str = "YUV4MPEG2";
const FRAME_MARKER: &str = "FRAME";
const MAX_HEADER_LEN: usize = 4096;
const MAX_DIMENSION: usize = 1 << 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ChromaSampling {
    #[serde(rename = "420")]
    Cs420,
    #[serde(rename = "422")]
    Cs422,
    #[serde(rename = "444")]
    Cs444,
}

impl ChromaSampling {
    /// Chroma plane dimensions for a `width x height` luma plane.
    pub fn chroma_dims(self, width: usize, height: usize) -> (usize, usize) {
        match self {
            ChromaSampling::Cs420 => (width.div_ceil(2), height.div_ceil(2)),
            ChromaSampling::Cs422 => (width.div_ceil(2), height),
            ChromaSampling::Cs444 => (width, height),
        }
    }

    fn default_tag(self, bit_depth: u8) -> String {
        let base = match self {
            ChromaSampling::Cs420 if bit_depth == 8 => return "420jpeg".into(),
            ChromaSampling::Cs420 => "420",
            ChromaSampling::Cs422 => "422",
            ChromaSampling::Cs444 => "444",
        };
        if bit_depth == 8 {
            base.into()
        } else {
            format!("{base}p{bit_depth}")
        }
    }
}

impl std::str::FromStr for ChromaSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "420" => Ok(ChromaSampling::Cs420),
            "422" => Ok(ChromaSampling::Cs422),
            "444" => Ok(ChromaSampling::Cs444),
            _ => Err(Error::InvalidInput(format!("unknown chroma sampling `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct FrameRate {
    pub num: u32,
    pub den: u32,
}

impl FrameRate {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidInput(format!("invalid frame rate {num}:{den}")));
        }
        Ok(Self { num, den })
    }

    pub fn fps(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for FrameRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.num, self.den)
    }
}

/// One picture: planar Y, U, V samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub y: Vec<u16>,
    pub u: Vec<u16>,
    pub v: Vec<u16>,
}

/// Order of header parameters in a Y4M stream, so that a parsed header can
/// be written back byte-for-byte.
#[derive(Clone, Debug, PartialEq, Eq)]
enum HeaderToken {
    Width,
    Height,
    Rate,
    Colorspace,
    Other(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Y4mLayout {
    tokens: Vec<HeaderToken>,
    colorspace_tag: Option<String>,
}

impl Y4mLayout {
    fn default_for(bit_depth: u8, chroma: ChromaSampling) -> Self {
        let mut tokens = vec![
            HeaderToken::Width,
            HeaderToken::Height,
            HeaderToken::Rate,
            HeaderToken::Other("Ip".into()),
            HeaderToken::Other("A1:1".into()),
            HeaderToken::Colorspace,
        ];
        if bit_depth > 8 {
            let cs = match chroma {
                ChromaSampling::Cs420 => "420",
                ChromaSampling::Cs422 => "422",
                ChromaSampling::Cs444 => "444",
            };
            tokens.push(HeaderToken::Other(format!("XYSCSS={cs}P{bit_depth}")));
        }
        Self {
            tokens,
            colorspace_tag: Some(chroma.default_tag(bit_depth)),
        }
    }
}

/// Decoded video with geometry metadata. Immutable once built.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clip {
    frames: Vec<Frame>,
    width: usize,
    height: usize,
    frame_rate: FrameRate,
    bit_depth: u8,
    chroma: ChromaSampling,
    layout: Y4mLayout,
}

/// Geometry of headerless planar YUV input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawGeometry {
    pub width: usize,
    pub height: usize,
    pub frame_rate: FrameRate,
    pub bit_depth: u8,
    pub chroma: ChromaSampling,
}

impl RawGeometry {
    fn bytes_per_sample(&self) -> usize {
        if self.bit_depth > 8 {
            2
        } else {
            1
        }
    }

    pub fn frame_bytes(&self) -> usize {
        let (cw, ch) = self.chroma.chroma_dims(self.width, self.height);
        (self.width * self.height + 2 * cw * ch) * self.bytes_per_sample()
    }

    /// Parses `WxH[:N/D][:bits][:420|422|444]`; unspecified parts default
    /// to 30/1, 8 bits and 4:2:0.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad raw geometry `{s}`"));
        let mut parts = s.split(':');
        let (w, h) = parts.next().and_then(|d| d.split_once('x')).ok_or_else(bad)?;
        let mut g = RawGeometry {
            width: w.parse().map_err(|_| bad())?,
            height: h.parse().map_err(|_| bad())?,
            frame_rate: FrameRate::new(30, 1)?,
            bit_depth: 8,
            chroma: ChromaSampling::Cs420,
        };
        for p in parts {
            match p {
                "420" => g.chroma = ChromaSampling::Cs420,
                "422" => g.chroma = ChromaSampling::Cs422,
                "444" => g.chroma = ChromaSampling::Cs444,
                _ if p.contains('/') => {
                    let (n, d) = p.split_once('/').ok_or_else(bad)?;
                    g.frame_rate = FrameRate::new(n.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)?;
                }
                _ => g.bit_depth = p.parse().map_err(|_| bad())?,
            }
        }
        check_geometry(g.width, g.height, g.bit_depth).map_err(|e| Error::Config(e.to_string()))?;
        Ok(g)
    }
}

fn check_geometry(width: usize, height: usize, bit_depth: u8) -> Result<()> {
    if width == 0 || height == 0 || width > MAX_DIMENSION || height > MAX_DIMENSION {
        return Err(Error::InvalidClip(format!("unsupported dimensions {width}x{height}")));
    }
    if bit_depth != 8 && bit_depth != 10 {
        return Err(Error::InvalidClip(format!("unsupported bit depth {bit_depth}")));
    }
    Ok(())
}

impl Clip {
    pub fn new(
        frames: Vec<Frame>,
        width: usize,
        height: usize,
        frame_rate: FrameRate,
        bit_depth: u8,
        chroma: ChromaSampling,
    ) -> Result<Self> {
        check_geometry(width, height, bit_depth)?;
        let clip = Self {
            frames,
            width,
            height,
            frame_rate,
            bit_depth,
            chroma,
            layout: Y4mLayout::default_for(bit_depth, chroma),
        };
        for (i, f) in clip.frames.iter().enumerate() {
            clip.check_frame(i, f)?;
        }
        Ok(clip)
    }

    fn check_frame(&self, index: usize, f: &Frame) -> Result<()> {
        let (cw, ch) = self.chroma.chroma_dims(self.width, self.height);
        if f.y.len() != self.width * self.height || f.u.len() != cw * ch || f.v.len() != cw * ch {
            return Err(Error::InvalidClip(format!(
                "frame {index}: plane sizes {}/{}/{} do not match {}x{} {:?}",
                f.y.len(),
                f.u.len(),
                f.v.len(),
                self.width,
                self.height,
                self.chroma
            )));
        }
        let max = self.max_sample();
        if f.y.iter().chain(&f.u).chain(&f.v).any(|&s| s > max) {
            return Err(Error::InvalidClip(format!(
                "frame {index}: sample exceeds {}-bit range",
                self.bit_depth
            )));
        }
        Ok(())
    }

    /// Same geometry and header layout with a different frame list.
    pub fn with_frames(&self, frames: Vec<Frame>) -> Result<Self> {
        let clip = Self {
            frames,
            ..self.clone_meta()
        };
        for (i, f) in clip.frames.iter().enumerate() {
            clip.check_frame(i, f)?;
        }
        Ok(clip)
    }

    fn clone_meta(&self) -> Self {
        Self {
            frames: Vec::new(),
            width: self.width,
            height: self.height,
            frame_rate: self.frame_rate,
            bit_depth: self.bit_depth,
            chroma: self.chroma,
            layout: self.layout.clone(),
        }
    }

    /// A clip of `width x height` frames with the given luma planes and
    /// mid-grey chroma.
    pub fn from_luma_planes(
        planes: Vec<Vec<u16>>,
        width: usize,
        height: usize,
        frame_rate: FrameRate,
        bit_depth: u8,
    ) -> Result<Self> {
        let chroma = ChromaSampling::Cs420;
        let (cw, ch) = chroma.chroma_dims(width, height);
        let mid = 1u16 << (bit_depth - 1);
        let frames = planes
            .into_iter()
            .map(|y| Frame {
                y,
                u: vec![mid; cw * ch],
                v: vec![mid; cw * ch],
            })
            .collect();
        Self::new(frames, width, height, frame_rate, bit_depth, chroma)
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn frame_rate(&self) -> FrameRate {
        self.frame_rate
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn chroma(&self) -> ChromaSampling {
        self.chroma
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn max_sample(&self) -> u16 {
        ((1u32 << self.bit_depth) - 1) as u16
    }

    pub fn geometry(&self) -> RawGeometry {
        RawGeometry {
            width: self.width,
            height: self.height,
            frame_rate: self.frame_rate,
            bit_depth: self.bit_depth,
            chroma: self.chroma,
        }
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.frame_rate.fps()
    }

    pub fn luma(&self, index: usize) -> Tensor<f64> {
        to_normalized_luma(&self.frames[index], self.width, self.height, self.bit_depth)
    }

    /// Hex SHA-256 over geometry and every sample.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!(
            "{}x{}@{}:{}b{}c{:?}n{}",
            self.width,
            self.height,
            self.frame_rate.num,
            self.frame_rate.den,
            self.bit_depth,
            self.chroma,
            self.frames.len()
        ));
        for f in &self.frames {
            for plane in [&f.y, &f.u, &f.v] {
                for s in plane.iter() {
                    h.update(s.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Luma plane as an `H x W` tensor with samples divided by `2^bit_depth - 1`.
pub fn to_normalized_luma(frame: &Frame, width: usize, height: usize, bit_depth: u8) -> Tensor<f64> {
    let max = ((1u32 << bit_depth) - 1) as f64;
    let data = frame.y.iter().map(|&s| s as f64 / max).collect();
    Tensor::new(vec![height, width], data).expect("luma plane matches geometry")
}

/// Inverse of [`to_normalized_luma`]: clamps to `[0, 1]` and rounds to the
/// nearest code value.
pub fn from_normalized_luma(values: &[f64], bit_depth: u8) -> Vec<u16> {
    let max = ((1u32 << bit_depth) - 1) as f64;
    values
        .iter()
        .map(|&v| {
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            (v * max).round() as u16
        })
        .collect()
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Y4mParse {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Reads bytes up to and including `\n`. Returns `None` at a clean EOF.
fn read_line<R: Read>(r: &mut R, offset: usize, what: &str) -> Result<Option<Vec<u8>>> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read(&mut byte) {
            Ok(0) if line.is_empty() => return Ok(None),
            Ok(0) => return Err(parse_err(offset + line.len(), format!("unterminated {what}"))),
            Ok(_) => {
                if byte[0] == b'\n' {
                    return Ok(Some(line));
                }
                line.push(byte[0]);
                if line.len() > MAX_HEADER_LEN {
                    return Err(parse_err(offset, format!("{what} longer than {MAX_HEADER_LEN} bytes")));
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(parse_err(offset + line.len(), format!("read error: {e}"))),
        }
    }
}

fn parse_colorspace(tag: &str, offset: usize) -> Result<(ChromaSampling, u8)> {
    let (base, depth) = match tag.split_once('p') {
        Some((b, d)) if !d.is_empty() && d.bytes().all(|c| c.is_ascii_digit()) => {
            let depth: u8 = d.parse().map_err(|_| parse_err(offset, format!("bad bit depth in C{tag}")))?;
            (b, depth)
        }
        _ => (tag, 8),
    };
    let chroma = match base {
        "420" | "420jpeg" | "420paldv" | "420mpeg2" => ChromaSampling::Cs420,
        "422" => ChromaSampling::Cs422,
        "444" => ChromaSampling::Cs444,
        _ => return Err(parse_err(offset, format!("unsupported colorspace C{tag}"))),
    };
    if depth != 8 && depth != 10 {
        return Err(parse_err(offset, format!("unsupported bit depth {depth}")));
    }
    Ok((chroma, depth))
}

fn parse_dim(value: &str, offset: usize, name: &str) -> Result<usize> {
    let v: usize = value
        .parse()
        .map_err(|_| parse_err(offset, format!("invalid {name} `{value}`")))?;
    if v == 0 || v > MAX_DIMENSION {
        return Err(parse_err(offset, format!("{name} {v} out of range")));
    }
    Ok(v)
}

/// Decodes a complete Y4M stream.
pub fn parse_y4m<R: Read>(mut r: R) -> Result<Clip> {
    let header = read_line(&mut r, 0, "stream header")?.ok_or_else(|| parse_err(0, "empty input"))?;
    let header_str = std::str::from_utf8(&header).map_err(|e| parse_err(e.valid_up_to(), "header is not UTF-8"))?;

    let mut width = None;
    let mut height = None;
    let mut rate = None;
    let mut colorspace = None;
    let mut tokens = Vec::new();
    let mut offset = 0usize;
    for (i, tok) in header_str.split(' ').enumerate() {
        let tok_offset = offset;
        offset += tok.len() + 1;
        if i == 0 {
            if tok != Y4M_SIGNATURE {
                return Err(parse_err(0, "missing YUV4MPEG2 signature"));
            }
            continue;
        }
        if tok.is_empty() {
            return Err(parse_err(tok_offset, "empty header parameter"));
        }
        let mut chars = tok.chars();
        let key = chars.next().expect("token is non-empty");
        let value = chars.as_str();
        match key {
            'W' => {
                width = Some(parse_dim(value, tok_offset, "width")?);
                tokens.push(HeaderToken::Width);
            }
            'H' => {
                height = Some(parse_dim(value, tok_offset, "height")?);
                tokens.push(HeaderToken::Height);
            }
            'F' => {
                let (n, d) = value
                    .split_once(':')
                    .ok_or_else(|| parse_err(tok_offset, format!("invalid frame rate `{value}`")))?;
                let num = n.parse().map_err(|_| parse_err(tok_offset, "invalid frame rate numerator"))?;
                let den = d.parse().map_err(|_| parse_err(tok_offset, "invalid frame rate denominator"))?;
                rate = Some(FrameRate::new(num, den).map_err(|_| parse_err(tok_offset, "zero in frame rate"))?);
                tokens.push(HeaderToken::Rate);
            }
            'C' => {
                colorspace = Some((value.to_string(), parse_colorspace(value, tok_offset)?));
                tokens.push(HeaderToken::Colorspace);
            }
            _ => tokens.push(HeaderToken::Other(tok.to_string())),
        }
    }
    let width = width.ok_or_else(|| parse_err(0, "missing W parameter"))?;
    let height = height.ok_or_else(|| parse_err(0, "missing H parameter"))?;
    let frame_rate = rate.ok_or_else(|| parse_err(0, "missing F parameter"))?;
    let (colorspace_tag, (chroma, bit_depth)) = match colorspace {
        Some((tag, parsed)) => (Some(tag), parsed),
        None => (None, (ChromaSampling::Cs420, 8)),
    };

    let geom = RawGeometry {
        width,
        height,
        frame_rate,
        bit_depth,
        chroma,
    };
    let frame_bytes = geom.frame_bytes();
    let max = ((1u32 << bit_depth) - 1) as u16;
    let mut pos = header.len() + 1;
    let mut frames = Vec::new();
    loop {
        let Some(line) = read_line(&mut r, pos, "frame header")? else {
            break;
        };
        if !(line.starts_with(FRAME_MARKER.as_bytes())
            && (line.len() == FRAME_MARKER.len() || line[FRAME_MARKER.len()] == b' '))
        {
            return Err(parse_err(pos, "expected FRAME marker"));
        }
        pos += line.len() + 1;
        let mut data = Vec::new();
        (&mut r)
            .take(frame_bytes as u64)
            .read_to_end(&mut data)
            .map_err(|e| parse_err(pos, format!("read error: {e}")))?;
        if data.len() != frame_bytes {
            return Err(Error::PartialFrame {
                frame: frames.len(),
                expected: frame_bytes,
                found: data.len(),
            });
        }
        let frame = decode_planes(&data, &geom).map_err(|(i, v)| {
            parse_err(pos + i * geom.bytes_per_sample(), format!("sample {v} exceeds {max}"))
        })?;
        pos += frame_bytes;
        frames.push(frame);
    }

    Ok(Clip {
        frames,
        width,
        height,
        frame_rate,
        bit_depth,
        chroma,
        layout: Y4mLayout {
            tokens,
            colorspace_tag,
        },
    })
}

/// Splits one frame's bytes into planes. On an out-of-range sample returns
/// its sample index and value.
fn decode_planes(data: &[u8], geom: &RawGeometry) -> std::result::Result<Frame, (usize, u16)> {
    let samples: Vec<u16> = if geom.bit_depth > 8 {
        data.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()
    } else {
        data.iter().map(|&b| b as u16).collect()
    };
    let max = ((1u32 << geom.bit_depth) - 1) as u16;
    if let Some((i, &v)) = samples.iter().enumerate().find(|(_, &v)| v > max) {
        return Err((i, v));
    }
    let luma = geom.width * geom.height;
    let (cw, ch) = geom.chroma.chroma_dims(geom.width, geom.height);
    let cs = cw * ch;
    Ok(Frame {
        y: samples[..luma].to_vec(),
        u: samples[luma..luma + cs].to_vec(),
        v: samples[luma + cs..luma + 2 * cs].to_vec(),
    })
}

fn encode_planes(frame: &Frame, bit_depth: u8, out: &mut Vec<u8>) {
    for plane in [&frame.y, &frame.u, &frame.v] {
        if bit_depth > 8 {
            for s in plane.iter() {
                out.extend_from_slice(&s.to_le_bytes());
            }
        } else {
            out.extend(plane.iter().map(|&s| s as u8));
        }
    }
}

pub fn read_y4m(path: &Path) -> Result<Clip> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_y4m(BufReader::new(file))
}

pub fn y4m_header(clip: &Clip) -> String {
    let mut header = String::from(Y4M_SIGNATURE);
    for tok in &clip.layout.tokens {
        header.push(' ');
        match tok {
            HeaderToken::Width => header.push_str(&format!("W{}", clip.width)),
            HeaderToken::Height => header.push_str(&format!("H{}", clip.height)),
            HeaderToken::Rate => header.push_str(&format!("F{}", clip.frame_rate)),
            HeaderToken::Colorspace => {
                let tag = clip
                    .layout
                    .colorspace_tag
                    .clone()
                    .unwrap_or_else(|| clip.chroma.default_tag(clip.bit_depth));
                header.push_str(&format!("C{tag}"));
            }
            HeaderToken::Other(s) => header.push_str(s),
        }
    }
    header.push('\n');
    header
}

pub fn encode_y4m<W: Write>(clip: &Clip, mut w: W) -> std::io::Result<()> {
    w.write_all(y4m_header(clip).as_bytes())?;
    let mut buf = Vec::new();
    for f in &clip.frames {
        buf.clear();
        buf.extend_from_slice(b"FRAME\n");
        encode_planes(f, clip.bit_depth, &mut buf);
        w.write_all(&buf)?;
    }
    w.flush()
}

pub fn write_y4m(clip: &Clip, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    encode_y4m(clip, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Decodes headerless planar YUV; the byte count must be a whole number of frames.
pub fn parse_raw_yuv(bytes: &[u8], geom: RawGeometry) -> Result<Clip> {
    check_geometry(geom.width, geom.height, geom.bit_depth)?;
    let frame_bytes = geom.frame_bytes();
    if bytes.len() % frame_bytes != 0 {
        return Err(Error::PartialFrame {
            frame: bytes.len() / frame_bytes,
            expected: frame_bytes,
            found: bytes.len() % frame_bytes,
        });
    }
    let mut frames = Vec::with_capacity(bytes.len() / frame_bytes);
    for (i, chunk) in bytes.chunks_exact(frame_bytes).enumerate() {
        let frame = decode_planes(chunk, &geom).map_err(|(s, v)| {
            Error::InvalidClip(format!("frame {i}: sample {s} value {v} exceeds bit depth"))
        })?;
        frames.push(frame);
    }
    Clip::new(frames, geom.width, geom.height, geom.frame_rate, geom.bit_depth, geom.chroma)
}

pub fn read_raw_yuv(path: &Path, geom: RawGeometry) -> Result<Clip> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_raw_yuv(&bytes, geom)
}

pub fn write_raw_yuv(clip: &Clip, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for f in clip.frames() {
        encode_planes(f, clip.bit_depth, &mut buf);
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads `path` as Y4M, or as raw YUV when a geometry is supplied.
pub fn read_clip(path: &Path, raw: Option<RawGeometry>) -> Result<Clip> {
    match raw {
        Some(geom) => read_raw_yuv(path, geom),
        None => read_y4m(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_bytes() -> Vec<u8> {
        let mut data = b"YUV4MPEG2 W16 H16 F30000:1001 Ip A1:1 C420jpeg XYSCSS=420JPEG\n".to_vec();
        for f in 0..2u8 {
            data.extend_from_slice(b"FRAME\n");
            data.extend((0..256).map(|i| (i as u8).wrapping_mul(3).wrapping_add(f)));
            data.extend(std::iter::repeat_n(128 + f, 64));
            data.extend(std::iter::repeat_n(120, 64));
        }
        data
    }

    #[test]
    fn raw_geometry_grammar() {
        let g = RawGeometry::parse("32x24").unwrap();
        assert_eq!((g.width, g.height, g.bit_depth, g.chroma), (32, 24, 8, ChromaSampling::Cs420));
        assert_eq!(g.frame_rate, FrameRate::new(30, 1).unwrap());
        let g = RawGeometry::parse("64x48:25/1:10:444").unwrap();
        assert_eq!((g.bit_depth, g.chroma), (10, ChromaSampling::Cs444));
        assert_eq!(g.frame_rate, FrameRate::new(25, 1).unwrap());
        for bad in ["", "32", "32by24", "0x24", "32x24:12", "32x24:1/0", "32x24:abc"] {
            assert!(RawGeometry::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn reads_two_frame_fixture() {
        let clip = parse_y4m(fixture_bytes().as_slice()).unwrap();
        assert_eq!(clip.len(), 2);
        assert_eq!(clip.width(), 16);
        assert_eq!(clip.height(), 16);
        assert_eq!(clip.frame_rate(), FrameRate { num: 30000, den: 1001 });
        assert_eq!(clip.chroma(), ChromaSampling::Cs420);
        assert_eq!(clip.frames()[1].u[0], 129);
    }

    #[test]
    fn write_after_read_is_byte_identical() {
        let bytes = fixture_bytes();
        let clip = parse_y4m(bytes.as_slice()).unwrap();
        let mut out = Vec::new();
        encode_y4m(&clip, &mut out).unwrap();
        assert_eq!(out, bytes);
    }

    #[test]
    fn empty_input_is_parse_error() {
        assert!(matches!(parse_y4m(&b""[..]), Err(Error::Y4mParse { offset: 0, .. })));
    }

    #[test]
    fn bad_parameter_reports_offset() {
        let err = parse_y4m(&b"YUV4MPEG2 W16 Hx F30:1\n"[..]).unwrap_err();
        match err {
            Error::Y4mParse { offset, .. } => assert_eq!(offset, 14),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_frame_is_partial_frame_error() {
        let mut bytes = fixture_bytes();
        bytes.truncate(bytes.len() - 10);
        assert!(matches!(
            parse_y4m(bytes.as_slice()),
            Err(Error::PartialFrame { frame: 1, .. })
        ));
    }

    #[test]
    fn zero_frame_clip_is_header_only() {
        let clip = Clip::new(vec![], 8, 8, FrameRate::new(25, 1).unwrap(), 8, ChromaSampling::Cs420).unwrap();
        let mut out = Vec::new();
        encode_y4m(&clip, &mut out).unwrap();
        assert_eq!(out, b"YUV4MPEG2 W8 H8 F25:1 Ip A1:1 C420jpeg\n");
        assert_eq!(parse_y4m(out.as_slice()).unwrap().len(), 0);
    }

    #[test]
    fn ten_bit_header_and_samples() {
        let planes = vec![vec![512u16; 16]];
        let clip = Clip::from_luma_planes(planes, 4, 4, FrameRate::new(30, 1).unwrap(), 10).unwrap();
        let mut out = Vec::new();
        encode_y4m(&clip, &mut out).unwrap();
        let header = y4m_header(&clip);
        assert!(header.contains(" C420p10"), "{header}");
        let back = parse_y4m(out.as_slice()).unwrap();
        assert_eq!(back.bit_depth(), 10);
        assert_eq!(back.frames()[0].y[3], 512);
        assert_eq!(back, clip);
    }

    #[test]
    fn ten_bit_out_of_range_sample_rejected() {
        let mut bytes = b"YUV4MPEG2 W2 H2 F30:1 C444p10\nFRAME\n".to_vec();
        bytes.extend(std::iter::repeat_n(0u8, 24));
        bytes[b"YUV4MPEG2 W2 H2 F30:1 C444p10\nFRAME\n".len() + 1] = 0xff;
        assert!(matches!(parse_y4m(bytes.as_slice()), Err(Error::Y4mParse { .. })));
    }

    #[test]
    fn normalization() {
        let f = Frame {
            y: vec![0, 255],
            u: vec![],
            v: vec![],
        };
        assert_eq!(to_normalized_luma(&f, 2, 1, 8).data(), &[0.0, 1.0]);
        let f10 = Frame {
            y: vec![512],
            u: vec![],
            v: vec![],
        };
        assert_eq!(to_normalized_luma(&f10, 1, 1, 10).data(), &[512.0 / 1023.0]);
    }

    #[test]
    fn raw_yuv_round_trip_and_partial() {
        let geom = RawGeometry {
            width: 4,
            height: 2,
            frame_rate: FrameRate::new(25, 1).unwrap(),
            bit_depth: 8,
            chroma: ChromaSampling::Cs420,
        };
        assert_eq!(geom.frame_bytes(), 12);
        let bytes: Vec<u8> = (0..24).collect();
        let clip = parse_raw_yuv(&bytes, geom).unwrap();
        assert_eq!(clip.len(), 2);
        assert_eq!(clip.frames()[1].v, vec![22, 23]);
        assert!(matches!(parse_raw_yuv(&bytes[..20], geom), Err(Error::PartialFrame { .. })));
    }

    #[test]
    fn rejects_unsupported_colorspace() {
        assert!(parse_y4m(&b"YUV4MPEG2 W2 H2 F30:1 Cmono\n"[..]).is_err());
        assert!(parse_y4m(&b"YUV4MPEG2 W2 H2 F30:1 C420p12\n"[..]).is_err());
    }
}
