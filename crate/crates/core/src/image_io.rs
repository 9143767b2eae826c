//! Image, mask and deformation-field file formats.
//!
//! * Grayscale PGM (`P5`, 8- or 16-bit) and grayscale PNG for images and masks.
//! * RGB PNG for flow visualizations.
//! * `DFLD`: little-endian `b"DFLD"`, `u32` width, `u32` height, then
//!   `width * height` interleaved `(x, y)` `f32` pairs of absolute normalized
//!   coordinates in row-major order.

use std::fs;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::path::Path;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;
use crate::warp::DeformationField;

/// Smallest accepted side length of a registration image.
pub const MIN_EXTENT: usize = 8;

/// Single-channel intensity raster with values in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image2D {
    /// Wraps pixels already in [0, 1].
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width < MIN_EXTENT || height < MIN_EXTENT {
            return Err(contract(
                "image",
                format!("extents {width}x{height} below the minimum {MIN_EXTENT}x{MIN_EXTENT}"),
            ));
        }
        if pixels.len() != width * height {
            return Err(contract("image", format!("{width}x{height} image needs {} pixels, got {}", width * height, pixels.len())));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(contract("image", format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, pixels })
    }

    /// Min-max rescales arbitrary intensities to [0, 1]. A constant raster
    /// maps to all zeros.
    pub fn normalized(width: usize, height: usize, raw: &[f32]) -> Result<Self> {
        let (lo, hi) = raw
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        let pixels = if raw.is_empty() || range <= 0.0 || !range.is_finite() {
            vec![0.0; raw.len()]
        } else {
            raw.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
        };
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// `[1, 1, H, W]` view for the tape.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.pixels.clone()).expect("extents match")
    }

    /// Builds an image from a `[1, 1, H, W]` tensor, clamping to [0, 1].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.chw("image")?;
        if c != 1 {
            return Err(contract("image", format!("expected 1 channel, got {c}")));
        }
        Self::new(w, h, t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }
}

/// 8-bit label raster; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask2D {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl Mask2D {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(contract("mask", format!("{width}x{height} mask with {} labels", labels.len())));
        }
        Ok(Self { width, height, labels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Distinct nonzero labels in ascending order.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..=255u8).filter(|&l| seen[l as usize]).collect()
    }
}

/// 8-bit RGB raster used for flow visualizations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Raw grayscale samples as stored in a file.
struct Raster {
    width: usize,
    height: usize,
    samples: Vec<u16>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Raster> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P5" {
        return Err(format_err(path, format!("unsupported format (magic {magic:?}, expected binary PGM P5)")));
    }
    let mut number = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse::<usize>()
            .map_err(|_| format_err(path, format!("bad PGM {what} {t:?}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format_err(path, "zero-dimension image"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(path, format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    let bps = if maxval < 256 { 1 } else { 2 };
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() < n * bps {
        return Err(format_err(path, format!("truncated raster: need {} bytes, found {}", n * bps, data.len())));
    }
    let samples = if bps == 1 {
        data[..n].iter().map(|&b| b as u16).collect()
    } else {
        data[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    Ok(Raster { width, height, samples })
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Raster> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| format_err(path, format!("PNG decode: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_err(path, "PNG too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| format_err(path, format!("PNG decode: {e}")))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(format_err(path, format!("unsupported PNG color type {:?} (grayscale required)", info.color_type)));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    if width == 0 || height == 0 {
        return Err(format_err(path, "zero-dimension image"));
    }
    let samples = match info.bit_depth {
        png::BitDepth::Sixteen => (0..height)
            .flat_map(|y| {
                let row = &buf[y * info.line_size..y * info.line_size + 2 * width];
                row.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]))
            })
            .collect(),
        _ => (0..height)
            .flat_map(|y| buf[y * info.line_size..y * info.line_size + width].iter().map(|&b| b as u16))
            .collect(),
    };
    Ok(Raster { width, height, samples })
}

fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes, path)
    } else if bytes.starts_with(b"P") {
        parse_pgm(&bytes, path)
    } else {
        Err(format_err(path, "unsupported format (expected PGM P5 or PNG)"))
    }
}

/// Loads a grayscale PGM or PNG and min-max normalizes it to [0, 1].
pub fn load_image(path: impl AsRef<Path>) -> Result<Image2D> {
    let path = path.as_ref();
    let r = read_raster(path)?;
    let raw: Vec<f32> = r.samples.iter().map(|&s| s as f32).collect();
    Image2D::normalized(r.width, r.height, &raw).map_err(|e| format_err(path, e.to_string()))
}

/// Loads a label mask; sample values are used verbatim as labels.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask2D> {
    let path = path.as_ref();
    let r = read_raster(path)?;
    let labels = r
        .samples
        .iter()
        .map(|&s| u8::try_from(s).map_err(|_| format_err(path, format!("label {s} exceeds 255"))))
        .collect::<Result<Vec<_>>>()?;
    Mask2D::new(r.width, r.height, labels)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn encode_png(width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8], path: &Path) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut writer = enc
            .write_header()
            .map_err(|e| format_err(path, format!("PNG encode: {e}")))?;
        writer
            .write_image_data(data)
            .map_err(|e| format_err(path, format!("PNG encode: {e}")))?;
    }
    Ok(out)
}

/// Writes an image as 16-bit PGM (`.pgm`) or 8-bit grayscale PNG (anything
/// else).
pub fn save_image(image: &Image2D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if has_extension(path, "pgm") {
        let mut bytes = format!("P5\n{} {}\n65535\n", image.width, image.height).into_bytes();
        for &v in &image.pixels {
            bytes.extend_from_slice(&((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes());
        }
        write_file(path, &bytes)
    } else {
        let data: Vec<u8> = image
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let bytes = encode_png(image.width, image.height, png::ColorType::Grayscale, png::BitDepth::Eight, &data, path)?;
        write_file(path, &bytes)
    }
}

/// Writes a label mask as 8-bit PGM (`.pgm`) or grayscale PNG.
pub fn save_mask(mask: &Mask2D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if has_extension(path, "pgm") {
        let mut bytes = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
        bytes.extend_from_slice(&mask.labels);
        write_file(path, &bytes)
    } else {
        let bytes = encode_png(mask.width, mask.height, png::ColorType::Grayscale, png::BitDepth::Eight, &mask.labels, path)?;
        write_file(path, &bytes)
    }
}

pub fn save_rgb_png(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(image.width, image.height, png::ColorType::Rgb, png::BitDepth::Eight, &image.data, path)?;
    write_file(path, &bytes)
}

const DFLD_MAGIC: &[u8; 4] = b"DFLD";

/// Serializes a deformation field in the `DFLD` format.
pub fn save_displacement(field: &DeformationField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let t = field.tensor();
    t.check_finite("save_displacement")?;
    let (w, h) = (field.width(), field.height());
    let n = w * h;
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(io_err(path));
    write(DFLD_MAGIC)?;
    write(&(w as u32).to_le_bytes())?;
    write(&(h as u32).to_le_bytes())?;
    let (xs, ys) = t.data().split_at(n);
    for (x, y) in xs.iter().zip(ys) {
        write(&x.to_le_bytes())?;
        write(&y.to_le_bytes())?;
    }
    out.flush().map_err(io_err(path))
}

/// Reads a `DFLD` file written by [`save_displacement`].
pub fn load_displacement(path: impl AsRef<Path>) -> Result<DeformationField> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut bytes = Vec::new();
    std::io::Read::read_to_end(&mut BufReader::new(file), &mut bytes).map_err(io_err(path))?;
    if bytes.len() < 12 || &bytes[..4] != DFLD_MAGIC {
        return Err(format_err(path, "not a DFLD displacement file (bad magic)"));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = w * h;
    if n == 0 {
        return Err(format_err(path, "zero-dimension field"));
    }
    let payload = &bytes[12..];
    if payload.len() != n * 8 {
        return Err(format_err(path, format!("payload is {} bytes, expected {}", payload.len(), n * 8)));
    }
    let mut data = vec![0.0f32; 2 * n];
    for (p, pair) in payload.chunks_exact(8).enumerate() {
        data[p] = f32::from_le_bytes(pair[..4].try_into().unwrap());
        data[n + p] = f32::from_le_bytes(pair[4..].try_into().unwrap());
    }
    let t = Tensor::new(&[1, 2, h, w], data)?;
    DeformationField::from_tensor(t).map_err(|e| format_err(path, e.to_string()))
}

fn hsv_to_rgb(hue_deg: f32, s: f32, v: f32) -> [u8; 3] {
    let h = hue_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|ch| ((ch + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Hue of a displacement vector in degrees, in `[0, 360)`.
pub fn flow_hue(ux: f32, uy: f32) -> f32 {
    uy.atan2(ux).to_degrees().rem_euclid(360.0)
}

/// Color-codes the displacement `φ(x) − x`: hue encodes direction,
/// saturation the magnitude relative to its 99th percentile. Zero
/// displacement is white.
pub fn flow_to_color(field: &DeformationField) -> RgbImage {
    let (w, h) = (field.width(), field.height());
    let disp = field.displacement_px();
    let n = w * h;
    let (ux, uy) = disp.split_at(n);
    let mags: Vec<f32> = ux.iter().zip(uy).map(|(x, y)| x.hypot(*y)).collect();
    let mut sorted = mags.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((0.99 * n as f64).ceil() as usize).clamp(1, n) - 1;
    let mut scale = sorted[rank];
    if scale <= 0.0 {
        scale = *sorted.last().unwrap();
    }
    let mut data = Vec::with_capacity(3 * n);
    for p in 0..n {
        let s = if scale > 0.0 { (mags[p] / scale).min(1.0) } else { 0.0 };
        data.extend_from_slice(&hsv_to_rgb(flow_hue(ux[p], uy[p]), s, 1.0));
    }
    RgbImage { width: w, height: h, data }
}
