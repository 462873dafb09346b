//! Scalar and RGB rasters, their on-disk formats, and the grayscale/blur
//! preprocessing used to bootstrap label-free training.
//!
//! Supported formats:
//! * portable graymap `P2`/`P5` and pixmap `P3`/`P6`, 8- or 16-bit samples;
//! * a float32 grid: 16-byte header (`b"F32G"`, width and height as
//!   little-endian `u32`, one reserved `u32` that must be zero) followed by
//!   `width * height` little-endian `f32` samples in row-major order.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const F32_GRID_MAGIC: &[u8; 4] = b"F32G";

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// A `width x height` grid of scalar densities, row-major, `y` growing
/// downwards. The value at pixel `(x, y)` is stored at `y * width + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityField {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl DensityField {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::param(format!("zero-area field {width}x{height}")));
        }
        if values.len() != width * height {
            return Err(Error::param(format!(
                "field {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::param(format!("non-finite value at index {i}")));
        }
        Ok(DensityField {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0, "zero-area field");
        DensityField {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(width > 0 && height > 0, "zero-area field");
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        DensityField {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.values[y * self.width + x] = value;
    }

    pub fn same_dims(&self, other: &DensityField) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Min-max rescale into `[0, 1]`. A constant field maps to all zeros.
    pub fn normalize(&mut self) {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if hi <= lo {
            self.values.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        if lo == 0.0 && hi == 1.0 {
            return;
        }
        let span = (hi - lo) as f64;
        for v in &mut self.values {
            *v = (((*v - lo) as f64) / span).clamp(0.0, 1.0) as f32;
        }
    }

    pub fn normalized(&self) -> DensityField {
        let mut out = self.clone();
        out.normalize();
        out
    }

    pub fn transpose(&self) -> DensityField {
        DensityField::from_fn(self.height, self.width, |x, y| self.get(y, x))
    }

    pub fn total_intensity(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    /// Mean per-pixel absolute difference.
    pub fn mean_abs_diff(&self, other: &DensityField) -> Result<f64> {
        if !self.same_dims(other) {
            return Err(Error::param(format!(
                "dimension mismatch: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let sum: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(sum / self.values.len() as f64)
    }
}

/// Three-channel raster with integer samples up to `maxval` (8 or 16 bit).
#[derive(Clone, Debug, PartialEq)]
pub struct RgbRaster {
    width: usize,
    height: usize,
    maxval: u16,
    planes: [Vec<u16>; 3],
}

impl RgbRaster {
    pub fn new(width: usize, height: usize, maxval: u16, planes: [Vec<u16>; 3]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::param(format!("zero-area raster {width}x{height}")));
        }
        if maxval == 0 {
            return Err(Error::param("maxval must be positive"));
        }
        for (c, plane) in planes.iter().enumerate() {
            if plane.len() != width * height {
                return Err(Error::param(format!(
                    "channel {c} has {} samples, expected {}",
                    plane.len(),
                    width * height
                )));
            }
            if plane.iter().any(|&s| s > maxval) {
                return Err(Error::param(format!("channel {c} exceeds maxval {maxval}")));
            }
        }
        Ok(RgbRaster {
            width,
            height,
            maxval,
            planes,
        })
    }

    /// Replicates a gray plane into all three channels.
    pub fn from_gray(width: usize, height: usize, maxval: u16, gray: Vec<u16>) -> Result<Self> {
        RgbRaster::new(width, height, maxval, [gray.clone(), gray.clone(), gray])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn maxval(&self) -> u16 {
        self.maxval
    }

    pub fn plane(&self, channel: usize) -> &[u16] {
        &self.planes[channel]
    }

    /// Luma in `[0, 1]`, not renormalized.
    pub fn grayscale(&self) -> DensityField {
        let m = self.maxval as f64;
        let values = (0..self.width * self.height)
            .map(|i| {
                let l = LUMA_WEIGHTS[0] * self.planes[0][i] as f64
                    + LUMA_WEIGHTS[1] * self.planes[1][i] as f64
                    + LUMA_WEIGHTS[2] * self.planes[2][i] as f64;
                (l / m).clamp(0.0, 1.0) as f32
            })
            .collect();
        DensityField {
            width: self.width,
            height: self.height,
            values,
        }
    }
}

/// Normalized 1D Gaussian kernel truncated at `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

/// Separable Gaussian blur with edge clamping. `sigma == 0` is the identity.
pub fn gaussian_blur(field: &DensityField, sigma: f64) -> Result<DensityField> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(field.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (field.width, field.height);

    let mut tmp = vec![0f32; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let src = &field.values[y * w..(y + 1) * w];
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (k, wk) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                acc += wk * src[xx] as f64;
            }
            *out = acc as f32;
        }
    });

    let mut out = vec![0f32; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (k, wk) in kernel.iter().enumerate() {
                let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                acc += wk * tmp[yy * w + x] as f64;
            }
            *o = acc as f32;
        }
    });
    DensityField::new(w, h, out)
}

/// Grayscale, blur, renormalize: the bootstrap density for a raw image.
pub fn preprocess(img: &RgbRaster, sigma: f64) -> Result<DensityField> {
    let mut f = gaussian_blur(&img.grayscale(), sigma)?;
    f.normalize();
    Ok(f)
}

// ---------------------------------------------------------------------------
// File formats

enum Decoded {
    Gray {
        width: usize,
        height: usize,
        maxval: u16,
        samples: Vec<u16>,
    },
    Rgb(RgbRaster),
    Float(DensityField),
}

struct PnmHeader {
    kind: u8,
    width: usize,
    height: usize,
    maxval: u16,
    data_start: usize,
}

fn parse_pnm_header(bytes: &[u8]) -> Result<PnmHeader> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::format("missing PNM magic"));
    }
    let kind = bytes[1];
    if !matches!(kind, b'2' | b'3' | b'5' | b'6') {
        return Err(Error::format(format!("unsupported PNM type P{}", kind as char)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format("truncated PNM header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("malformed PNM header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("malformed PNM header number"))?;
    }
    // exactly one whitespace byte separates the header from raster data
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format("missing whitespace after PNM header")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(format!("zero-area image {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(format!("invalid maxval {maxval}")));
    }
    Ok(PnmHeader {
        kind,
        width,
        height,
        maxval: maxval as u16,
        data_start: pos,
    })
}

fn decode_pnm(bytes: &[u8]) -> Result<Decoded> {
    let hdr = parse_pnm_header(bytes)?;
    let channels = if matches!(hdr.kind, b'3' | b'6') { 3 } else { 1 };
    let n = hdr
        .width
        .checked_mul(hdr.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::format("image dimensions overflow"))?;
    let data = &bytes[hdr.data_start..];
    let samples: Vec<u16> = match hdr.kind {
        b'2' | b'3' => {
            let text = std::str::from_utf8(data).map_err(|_| Error::format("non-ASCII sample data"))?;
            let mut out = Vec::with_capacity(n);
            for tok in text.split_ascii_whitespace() {
                if out.len() == n {
                    break;
                }
                let v: u32 = tok
                    .parse()
                    .map_err(|_| Error::format(format!("bad sample {tok:?}")))?;
                out.push(v.min(u16::MAX as u32) as u16);
            }
            out
        }
        _ => {
            if hdr.maxval < 256 {
                if data.len() < n {
                    return Err(Error::format("truncated raster data"));
                }
                data[..n].iter().map(|&b| b as u16).collect()
            } else {
                if data.len() < 2 * n {
                    return Err(Error::format("truncated raster data"));
                }
                data[..2 * n]
                    .chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]))
                    .collect()
            }
        }
    };
    if samples.len() != n {
        return Err(Error::format("truncated raster data"));
    }
    if samples.iter().any(|&s| s > hdr.maxval) {
        return Err(Error::format("sample exceeds maxval"));
    }
    if channels == 1 {
        Ok(Decoded::Gray {
            width: hdr.width,
            height: hdr.height,
            maxval: hdr.maxval,
            samples,
        })
    } else {
        let mut planes = [
            Vec::with_capacity(n / 3),
            Vec::with_capacity(n / 3),
            Vec::with_capacity(n / 3),
        ];
        for px in samples.chunks_exact(3) {
            planes[0].push(px[0]);
            planes[1].push(px[1]);
            planes[2].push(px[2]);
        }
        Ok(Decoded::Rgb(RgbRaster::new(
            hdr.width, hdr.height, hdr.maxval, planes,
        )?))
    }
}

fn decode_f32_grid(bytes: &[u8]) -> Result<DensityField> {
    if bytes.len() < 16 || &bytes[..4] != F32_GRID_MAGIC {
        return Err(Error::format("missing float32 grid header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (width, height, reserved) = (word(4), word(8), word(12));
    if reserved != 0 {
        return Err(Error::format("non-zero reserved word in float32 grid header"));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(format!("zero-area grid {width}x{height}")));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::format("grid dimensions overflow"))?;
    let data = &bytes[16..];
    if data.len() != 4 * n {
        return Err(Error::format(format!(
            "float32 grid {width}x{height} needs {} data bytes, found {}",
            4 * n,
            data.len()
        )));
    }
    let mut values = Vec::with_capacity(n);
    for (i, c) in data.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(format!("non-finite sample at index {i}")));
        }
        values.push(v.clamp(0.0, 1.0));
    }
    DensityField::new(width, height, values)
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.is_empty() {
        return Err(Error::format("empty file"));
    }
    if bytes.starts_with(F32_GRID_MAGIC) {
        decode_f32_grid(bytes).map(Decoded::Float)
    } else {
        decode_pnm(bytes)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads any supported raster as a density in `[0, 1]` (samples divided by
/// maxval; color images collapsed to luma).
pub fn load_density(path: impl AsRef<Path>) -> Result<DensityField> {
    let path = path.as_ref();
    decode_density(&read_file(path)?)
}

pub fn decode_density(bytes: &[u8]) -> Result<DensityField> {
    match decode(bytes)? {
        Decoded::Float(f) => Ok(f),
        Decoded::Rgb(rgb) => Ok(rgb.grayscale()),
        Decoded::Gray {
            width,
            height,
            maxval,
            samples,
        } => {
            let m = maxval as f32;
            DensityField::new(
                width,
                height,
                samples.into_iter().map(|s| s as f32 / m).collect(),
            )
        }
    }
}

/// Reads a raster as RGB; gray images are replicated into three channels.
/// Float grids are quantized to 16 bits.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbRaster> {
    let path = path.as_ref();
    match decode(&read_file(path)?)? {
        Decoded::Rgb(rgb) => Ok(rgb),
        Decoded::Gray {
            width,
            height,
            maxval,
            samples,
        } => RgbRaster::from_gray(width, height, maxval, samples),
        Decoded::Float(f) => {
            let gray = f
                .values()
                .iter()
                .map(|&v| (v as f64 * 65535.0).round() as u16)
                .collect();
            RgbRaster::from_gray(f.width(), f.height(), 65535, gray)
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Binary 8-bit graymap bytes.
pub fn encode_pgm8(width: usize, height: usize, samples: &[u8]) -> Vec<u8> {
    debug_assert_eq!(samples.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    out
}

pub fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_density_pgm(field: &DensityField) -> Vec<u8> {
    let samples: Vec<u8> = field.values().iter().map(|&v| quantize8(v)).collect();
    encode_pgm8(field.width(), field.height(), &samples)
}

/// Writes the field as an 8-bit binary graymap (maxval 255).
pub fn save_pgm(field: &DensityField, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_density_pgm(field))
}

pub fn encode_f32_grid(field: &DensityField) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * field.len());
    out.extend_from_slice(F32_GRID_MAGIC);
    out.extend_from_slice(&(field.width() as u32).to_le_bytes());
    out.extend_from_slice(&(field.height() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in field.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Writes the lossless float32 grid format.
pub fn save_f32_grid(field: &DensityField, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_f32_grid(field))
}

/// Picks the writer from the extension: `.f32grid` is lossless, anything
/// else is an 8-bit graymap.
pub fn save_density(field: &DensityField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "f32grid") {
        save_f32_grid(field, path)
    } else {
        save_pgm(field, path)
    }
}

/// Binary pixmap (`P6`), 8-bit when maxval < 256, big-endian 16-bit otherwise.
pub fn save_ppm(img: &RgbRaster, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("P6\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    let wide = img.maxval >= 256;
    for i in 0..img.width * img.height {
        for c in 0..3 {
            let s = img.planes[c][i];
            if wide {
                out.extend_from_slice(&s.to_be_bytes());
            } else {
                out.push(s as u8);
            }
        }
    }
    write_file(path.as_ref(), &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f32, b: f32) -> bool {
        (a - b).abs() < 1e-5
    }

    #[test]
    fn ascii_graymap_scaled_by_maxval() {
        let f = decode_density(b"P2\n# comment\n2 2\n255\n0 128\n255 255\n").unwrap();
        let expect = [0.0, 0.50196, 1.0, 1.0];
        assert_eq!((f.width(), f.height()), (2, 2));
        for (v, e) in f.values().iter().zip(expect) {
            assert!(approx(*v, e), "{v} vs {e}");
        }
    }

    #[test]
    fn empty_and_malformed_inputs_are_format_errors() {
        assert!(matches!(decode_density(b""), Err(Error::Format(_))));
        assert!(matches!(decode_density(b"P5\n0 3\n255\n"), Err(Error::Format(_))));
        assert!(matches!(decode_density(b"P5\n2 2\n255\n\x01"), Err(Error::Format(_))));
        assert!(matches!(decode_density(b"P9\n1 1\n1\n0"), Err(Error::Format(_))));
        assert!(matches!(decode_density(b"F32G\0\0\0\0"), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_density("/nonexistent/dir/field.pgm"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn sixteen_bit_binary_graymap() {
        let mut bytes = b"P5\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&0u16.to_be_bytes());
        bytes.extend_from_slice(&65535u16.to_be_bytes());
        let f = decode_density(&bytes).unwrap();
        assert_eq!(f.values(), &[0.0, 1.0]);
    }

    #[test]
    fn large_sixteen_bit_rgb_is_in_unit_range() {
        let n: usize = 1300 * 1300;
        let plane: Vec<u16> = (0..n).map(|i| (i * 7919 % 65536) as u16).collect();
        let img = RgbRaster::new(1300, 1300, 65535, [plane.clone(), plane.clone(), plane]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("big.ppm");
        save_ppm(&img, &p).unwrap();
        let f = load_density(&p).unwrap();
        assert_eq!(f.len(), 1_690_000);
        assert!(f.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(load_rgb(&p).unwrap(), img);
    }

    #[test]
    fn f32_grid_round_trip() {
        let f = DensityField::from_fn(5, 3, |x, y| (x * 3 + y) as f32 / 17.0);
        let g = decode_density(&encode_f32_grid(&f)).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn normalize_rules() {
        let mut c = DensityField::filled(3, 3, 0.4);
        c.normalize();
        assert!(c.values().iter().all(|&v| v == 0.0));

        let f = DensityField::new(3, 1, vec![2.0, 4.0, 3.0]).unwrap().normalized();
        assert_eq!(f.values(), &[0.0, 1.0, 0.5]);
        assert_eq!(f.normalized(), f);
    }

    #[test]
    fn sigma_zero_is_normalized_grayscale() {
        let img = RgbRaster::new(
            2,
            2,
            255,
            [vec![10, 200, 30, 0], vec![0, 100, 60, 255], vec![5, 5, 5, 5]],
        )
        .unwrap();
        assert_eq!(preprocess(&img, 0.0).unwrap(), img.grayscale().normalized());
    }

    #[test]
    fn constant_image_preprocesses_to_zero() {
        let img = RgbRaster::from_gray(7, 5, 255, vec![90; 35]).unwrap();
        let f = preprocess(&img, 2.0).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_truncates_at_three_sigma() {
        let k = gaussian_kernel(2.0);
        assert_eq!(k.len(), 13);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(gaussian_blur(&DensityField::filled(2, 2, 0.0), -1.0).is_err());
    }

    /// Direct 2D convolution with clamped borders, independent of the
    /// separable implementation.
    fn direct_blur(f: &DensityField, sigma: f64) -> DensityField {
        let r = (3.0 * sigma).ceil() as i64;
        let mut w2 = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                w2.push(((dx, dy), (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp()));
            }
        }
        // the separable kernel normalizes each axis, which equals normalizing
        // the product kernel
        let total: f64 = w2.iter().map(|(_, w)| w).sum();
        DensityField::from_fn(f.width(), f.height(), |x, y| {
            let mut acc = 0.0;
            for ((dx, dy), w) in &w2 {
                let xx = (x as i64 + dx).clamp(0, f.width() as i64 - 1) as usize;
                let yy = (y as i64 + dy).clamp(0, f.height() as i64 - 1) as usize;
                acc += w * f.get(xx, yy) as f64;
            }
            (acc / total) as f32
        })
    }

    #[test]
    fn single_bright_pixel_blur_matches_direct_convolution() {
        let mut f = DensityField::filled(9, 9, 0.0);
        f.set(4, 4, 1.0);
        let blurred = gaussian_blur(&f, 2.0).unwrap();
        let oracle = direct_blur(&f, 2.0);
        for (a, b) in blurred.values().iter().zip(oracle.values()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let out = blurred.normalized();
        let argmax = out
            .values()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, f.index(4, 4));
        // non-increasing along each ray from the center
        for (dx, dy) in [(1i64, 0i64), (0, 1), (-1, 0), (0, -1), (1, 1), (-1, -1)] {
            let mut prev = out.get(4, 4);
            for k in 1..=4 {
                let v = out.get((4 + dx * k) as usize, (4 + dy * k) as usize);
                assert!(v <= prev + 1e-7);
                prev = v;
            }
        }
    }

    #[test]
    fn pgm_round_trip_is_bit_exact_for_quantized_fields() {
        let f = DensityField::from_fn(6, 4, |x, y| ((x * 37 + y * 11) % 256) as f32 / 255.0);
        let bytes = encode_density_pgm(&f);
        let g = decode_density(&bytes).unwrap();
        assert_eq!(encode_density_pgm(&g), bytes);
        assert_eq!(g, f);
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn field_strategy() -> impl Strategy<Value = DensityField> {
        (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
            prop::collection::vec(-5.0f32..5.0, w * h)
                .prop_map(move |v| DensityField::new(w, h, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(f in field_strategy()) {
            let once = f.normalized();
            prop_assert_eq!(once.normalized(), once.clone());
            prop_assert!(once.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn blur_commutes_with_transpose_on_squares(n in 1usize..10, seed in any::<u64>(), sigma in 0.0f64..3.0) {
            let f = DensityField::from_fn(n, n, |x, y| {
                ((x as u64 * 31 + y as u64 * 17 + seed) % 97) as f32 / 97.0
            });
            let a = gaussian_blur(&f, sigma).unwrap().transpose();
            let b = gaussian_blur(&f.transpose(), sigma).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        #[test]
        fn blur_keeps_constant_fields_constant(w in 1usize..9, h in 1usize..9, c in 0.0f32..1.0, sigma in 0.0f64..4.0) {
            let f = DensityField::filled(w, h, c);
            let b = gaussian_blur(&f, sigma).unwrap();
            prop_assert!(b.values().iter().all(|v| (v - c).abs() < 1e-5));
        }

        #[test]
        fn pgm_save_load_round_trip(w in 1usize..16, h in 1usize..16, seed in any::<u64>()) {
            let f = DensityField::from_fn(w, h, |x, y| {
                ((x as u64 * 131 + y as u64 * 7 + seed) % 256) as f32 / 255.0
            });
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("f.pgm");
            save_pgm(&f, &p).unwrap();
            let g = load_density(&p).unwrap();
            prop_assert_eq!(&g, &f);
            let p2 = dir.path().join("g.pgm");
            save_pgm(&g, &p2).unwrap();
            prop_assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
        }
    }
}
