//! Raster buffers shared by every stage, plus PNG/PPM and DHCM file I/O.
//!
//! Pixel values are stored as `f32` in `[0, 1]`; 8-bit inputs are divided by 255.
//! Statistics computed from rasters are carried out in `f64` by the callers.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes of the float-map format.
pub const DHCM_MAGIC: &[u8; 4] = b"DHCM";
/// Only supported version of the float-map format.
pub const DHCM_VERSION: u16 = 1;
/// Size of the fixed float-map header in bytes.
pub const DHCM_HEADER_LEN: usize = 16;

/// An RGB image with row-major `(R, G, B)` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    data: Vec<[f32; 3]>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, data: Vec<[f32; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "image {width}x{height} needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(bad) = data
            .iter()
            .flatten()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Value(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image of a single colour.
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::new(width, height, vec![rgb; width * height])
    }

    /// Builds an image from a per-pixel function of `(x, y)`; values are clamped into `[0,1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let p = f(x, y);
                data.push(p.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    /// One colour plane as a single-channel map (0 = R, 1 = G, 2 = B).
    pub fn channel(&self, c: usize) -> FloatMap {
        assert!(c < 3, "channel index {c} out of range");
        let data = self.data.iter().map(|p| p[c]).collect();
        FloatMap {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Fails unless both dimensions are at least `min`.
    pub fn require_min_size(&self, min: usize, what: &str) -> Result<()> {
        if self.width < min || self.height < min {
            return Err(Error::Shape(format!(
                "{what} needs an image of at least {min}x{min}, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Per-pixel intensity `I = (R+G+B)/3`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl IntensityMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "intensity map {width}x{height} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Value("non-finite intensity".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn to_float_map(&self) -> FloatMap {
        FloatMap {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.clone(),
        }
    }
}

/// Channel mean of one pixel. The channels are summed in sorted order so the
/// result does not depend on their arrangement.
#[inline]
pub fn channel_mean(p: [f32; 3]) -> f32 {
    let mut v = [p[0] as f64, p[1] as f64, p[2] as f64];
    v.sort_by(f64::total_cmp);
    ((v[0] + v[1] + v[2]) / 3.0) as f32
}

pub fn intensity(img: &ImageRgb) -> IntensityMap {
    IntensityMap {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&p| channel_mean(p)).collect(),
    }
}

/// Generic multi-channel float raster, channel-major and row-major within a channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FloatMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        assert!(channels >= 1, "a float map needs at least one channel");
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape("float map with zero channels".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "float map {channels}x{width}x{height} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Value("non-finite value in float map".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Stacks single- or multi-channel maps of equal size into one map.
    pub fn stack(maps: &[&FloatMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Shape("nothing to stack".into()))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for m in maps {
            if m.width != first.width || m.height != first.height {
                return Err(Error::Shape(format!(
                    "cannot stack {}x{} with {}x{}",
                    m.width, m.height, first.width, first.height
                )));
            }
            data.extend_from_slice(&m.data);
            channels += m.channels;
        }
        Ok(Self {
            width: first.width,
            height: first.height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copies one channel out as a single-channel map.
    pub fn extract_channel(&self, c: usize) -> FloatMap {
        FloatMap {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.channel(c).to_vec(),
        }
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Loads a binary PPM (P6, maxval 255) or an 8-bit PNG.
pub fn load_image(path: &Path) -> Result<ImageRgb> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes)
    } else {
        Err(format_err(format!(
            "{}: not a P6 PPM or PNG file",
            path.display()
        )))
    }
}

/// Saves as PNG when the extension is `.png`, otherwise as binary PPM.
/// Values are quantized with `round(v * 255)`.
pub fn save_image(img: &ImageRgb, path: &Path) -> Result<()> {
    let bytes = if is_png_path(path) {
        encode_png(img)?
    } else {
        encode_ppm(img)
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn is_png_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_rgb8(img: &ImageRgb) -> Vec<u8> {
    img.data.iter().flat_map(|p| p.map(quantize)).collect()
}

fn from_rgb8(width: usize, height: usize, raw: &[u8]) -> Result<ImageRgb> {
    let data = raw
        .chunks_exact(3)
        .map(|c| [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0])
        .collect();
    ImageRgb::new(width, height, data)
}

pub fn encode_ppm(img: &ImageRgb) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(to_rgb8(img));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRgb> {
    // Header: magic, width, height, maxval, separated by whitespace and optional comments.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(format_err("truncated PPM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err("malformed PPM header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(format!("unsupported PPM maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err("malformed PPM header"));
    }
    pos += 1;
    let need = width * height * 3;
    let raw = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format_err("truncated PPM payload"))?;
    from_rgb8(width, height, raw)
}

pub fn encode_png(img: &ImageRgb) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(
            &to_rgb8(img),
            img.width as u32,
            img.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| format_err(format!("PNG encode: {e}")))?;
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageRgb> {
    use image::ImageDecoder;
    let dec = image::codecs::png::PngDecoder::new(io::Cursor::new(bytes))
        .map_err(|e| format_err(format!("PNG decode: {e}")))?;
    let (w, h) = dec.dimensions();
    let color = dec.color_type();
    let mut buf = vec![0u8; dec.total_bytes() as usize];
    dec.read_image(&mut buf)
        .map_err(|e| format_err(format!("PNG decode: {e}")))?;
    let rgb: Vec<u8> = match color {
        image::ColorType::Rgb8 => buf,
        image::ColorType::Rgba8 => buf
            .chunks_exact(4)
            .flat_map(|c| [c[0], c[1], c[2]])
            .collect(),
        image::ColorType::L8 => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        image::ColorType::La8 => buf
            .chunks_exact(2)
            .flat_map(|c| [c[0], c[0], c[0]])
            .collect(),
        other => {
            return Err(format_err(format!(
                "unsupported PNG colour type {other:?} (8-bit only)"
            )))
        }
    };
    from_rgb8(w as usize, h as usize, &rgb)
}

pub fn encode_float_map(map: &FloatMap) -> Result<Vec<u8>> {
    let channels = u16::try_from(map.channels)
        .map_err(|_| format_err(format!("{} channels do not fit the header", map.channels)))?;
    let width = u32::try_from(map.width).map_err(|_| format_err("width too large"))?;
    let height = u32::try_from(map.height).map_err(|_| format_err("height too large"))?;
    if map.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Value("refusing to write non-finite values".into()));
    }
    let mut out = Vec::with_capacity(DHCM_HEADER_LEN + 4 * map.data.len());
    out.extend_from_slice(DHCM_MAGIC);
    out.extend_from_slice(&DHCM_VERSION.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    for v in &map.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_float_map(bytes: &[u8]) -> Result<FloatMap> {
    if bytes.len() < DHCM_HEADER_LEN {
        return Err(format_err("float map shorter than its header"));
    }
    if &bytes[0..4] != DHCM_MAGIC {
        return Err(format_err("bad float map magic"));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = u16_at(4);
    if version != DHCM_VERSION {
        return Err(format_err(format!("unsupported float map version {version}")));
    }
    let channels = u16_at(6) as usize;
    let width = u32_at(8) as usize;
    let height = u32_at(12) as usize;
    if channels == 0 {
        return Err(format_err("float map with zero channels"));
    }
    let count = channels
        .checked_mul(width)
        .and_then(|n| n.checked_mul(height))
        .ok_or_else(|| format_err("float map dimensions overflow"))?;
    let payload = &bytes[DHCM_HEADER_LEN..];
    if payload.len() != count * 4 {
        return Err(format_err(format!(
            "float map payload has {} bytes, header implies {}",
            payload.len(),
            count * 4
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(format_err("non-finite value in float map payload"));
    }
    Ok(FloatMap {
        width,
        height,
        channels,
        data,
    })
}

pub fn save_float_map(map: &FloatMap, path: &Path) -> Result<()> {
    let bytes = encode_float_map(map)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_float_map(path: &Path) -> Result<FloatMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_float_map(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ppm(w: usize, h: usize, byte: u8) -> Vec<u8> {
        let mut v = format!("P6\n{w} {h}\n255\n").into_bytes();
        v.extend(std::iter::repeat_n(byte, w * h * 3));
        v
    }

    #[test]
    fn saturated_and_zero_ppm() {
        let white = decode_ppm(&ppm(2, 2, 255)).unwrap();
        assert!(white.pixels().iter().all(|p| *p == [1.0, 1.0, 1.0]));
        let black = decode_ppm(&ppm(2, 2, 0)).unwrap();
        assert!(black.pixels().iter().all(|p| *p == [0.0, 0.0, 0.0]));
        assert_eq!((black.width(), black.height()), (2, 2));
    }

    #[test]
    fn ppm_header_with_comment() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.2]);
    }

    #[test]
    fn ppm_rejects_16_bit_and_truncation() {
        let bytes = b"P6\n1 1\n65535\n\0\0\0\0\0\0".to_vec();
        assert!(matches!(decode_ppm(&bytes), Err(Error::Format(_))));
        let mut short = ppm(2, 2, 7);
        short.pop();
        assert!(matches!(decode_ppm(&short), Err(Error::Format(_))));
    }

    #[test]
    fn unsupported_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bmp");
        fs::write(&p, b"BM....").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Format(_))));
        assert!(matches!(
            load_image(&dir.path().join("missing.ppm")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn intensity_examples() {
        let img = ImageRgb::new(2, 1, vec![[0.3, 0.6, 0.0], [1.0, 1.0, 1.0]]).unwrap();
        let i = intensity(&img);
        assert!((i.get(0, 0) - 0.3).abs() <= f32::EPSILON);
        assert_eq!(i.get(1, 0), 1.0);
    }

    #[test]
    fn single_element_float_map_is_twenty_bytes() {
        let m = FloatMap::from_vec(1, 1, 1, vec![0.5]).unwrap();
        let bytes = encode_float_map(&m).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..4], b"DHCM");
        assert_eq!(decode_float_map(&bytes).unwrap().data(), &[0.5]);
    }

    #[test]
    fn float_map_header_corruption() {
        let m = FloatMap::from_vec(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let good = encode_float_map(&m).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_float_map(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[8] = 3; // width 3 no longer matches the payload
        assert!(matches!(decode_float_map(&bad), Err(Error::Format(_))));
        let mut bad = good;
        bad[4] = 2;
        assert!(matches!(decode_float_map(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn float_map_layout_is_channel_major() {
        let mut m = FloatMap::zeros(3, 2, 2);
        m.set(1, 2, 1, 7.0);
        assert_eq!(m.data()[6 + 5], 7.0);
        assert_eq!(m.extract_channel(1).get(0, 2, 1), 7.0);
    }

    #[test]
    fn non_finite_values_rejected() {
        assert!(FloatMap::from_vec(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(ImageRgb::new(1, 1, vec![[1.5, 0.0, 0.0]]).is_err());
    }
}
