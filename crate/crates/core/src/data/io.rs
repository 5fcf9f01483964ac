//! Disparity and image file formats.
//!
//! * PFM: single-channel `Pf` float maps; the sign of the scale field selects
//!   endianness (negative = little-endian). Rows are stored bottom-to-top.
//!   Non-finite values mark invalid pixels.
//! * KITTI 16-bit PNG: `round(d * 256)` as `u16`; a stored `0` is invalid.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisparityFormat {
    Pfm,
    KittiPng16,
}

impl FromStr for DisparityFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pfm" => Ok(Self::Pfm),
            "kitti-png16" | "png16" => Ok(Self::KittiPng16),
            other => Err(Error::InvalidArgument(format!("unknown disparity format `{other}`"))),
        }
    }
}

impl DisparityFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "pfm" => Some(Self::Pfm),
            "png" => Some(Self::KittiPng16),
            _ => None,
        }
    }
}

/// Disparity map with per-pixel validity. Invalid pixels hold `0.0`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedDisparity {
    pub values: Grid<f64>,
    pub valid: Grid<bool>,
}

pub fn read_disparity(path: &Path, format: DisparityFormat) -> Result<LoadedDisparity> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        DisparityFormat::Pfm => decode_pfm(&bytes, path),
        DisparityFormat::KittiPng16 => decode_kitti(&bytes, path),
    }
}

/// Writes `grid` treating every pixel as valid.
pub fn write_disparity(grid: &Grid<f64>, path: &Path, format: DisparityFormat) -> Result<()> {
    write_disparity_masked(grid, None, path, format)
}

pub fn write_disparity_masked(
    grid: &Grid<f64>,
    valid: Option<&Grid<bool>>,
    path: &Path,
    format: DisparityFormat,
) -> Result<()> {
    if let Some(valid) = valid {
        if !valid.same_dims(grid) {
            return Err(Error::shape(format!("{:?}", grid.dims()), format!("{:?}", valid.dims())));
        }
    }
    let is_valid = |i: usize| valid.map(|m| m.as_slice()[i]).unwrap_or(true);
    let bytes = match format {
        DisparityFormat::Pfm => {
            let (w, h) = grid.dims();
            let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
            out.reserve(4 * w * h);
            for v in (0..h).rev() {
                for u in 0..w {
                    let i = v * w + u;
                    let x = if is_valid(i) { *grid.get(u, v) as f32 } else { f32::INFINITY };
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            out
        }
        DisparityFormat::KittiPng16 => {
            let mut words = Vec::with_capacity(grid.len());
            for (i, &d) in grid.as_slice().iter().enumerate() {
                if !is_valid(i) {
                    words.push(0u16);
                    continue;
                }
                if !(0.0..256.0).contains(&d) {
                    return Err(Error::InvalidArgument(format!(
                        "kitti-png16 stores disparities in [0, 256), got {d}"
                    )));
                }
                words.push((d * 256.0).round().min(u16::MAX as f64) as u16);
            }
            encode_png16(grid.width(), grid.height(), &words, path)?
        }
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

/// Reads one whitespace-delimited header token starting at `*pos`.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<(&'a str, usize)> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err(path, start, "unexpected end of header"));
    }
    let token = std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| format_err(path, start, "non-ASCII header token"))?;
    Ok((token, start))
}

fn decode_pfm(bytes: &[u8], path: &Path) -> Result<LoadedDisparity> {
    let mut pos = 0;
    let (magic, at) = header_token(bytes, &mut pos, path)?;
    match magic {
        "Pf" => {}
        "PF" => return Err(format_err(path, at, "three-channel PFM is not a disparity map")),
        other => return Err(format_err(path, at, format!("bad PFM magic `{other}`"))),
    }
    let number = |pos: &mut usize, what: &str| -> Result<(f64, usize)> {
        let (tok, at) = header_token(bytes, pos, path)?;
        tok.parse::<f64>()
            .map(|x| (x, at))
            .map_err(|_| format_err(path, at, format!("invalid {what} `{tok}`")))
    };
    let (w, at_w) = number(&mut pos, "width")?;
    let (h, at_h) = number(&mut pos, "height")?;
    let (scale, at_s) = number(&mut pos, "scale")?;
    if w < 1.0 || w.fract() != 0.0 {
        return Err(format_err(path, at_w, "width must be a positive integer"));
    }
    if h < 1.0 || h.fract() != 0.0 {
        return Err(format_err(path, at_h, "height must be a positive integer"));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(format_err(path, at_s, "scale must be non-zero"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, pos, "missing header terminator"));
    }
    pos += 1;
    let (w, h) = (w as usize, h as usize);
    let expected = 4 * w * h;
    if bytes.len() - pos < expected {
        return Err(format_err(
            path,
            bytes.len(),
            format!("raster truncated: need {expected} bytes after offset {pos}"),
        ));
    }
    let little = scale < 0.0;
    let mut values = Grid::filled(w, h, 0.0);
    let mut valid = Grid::filled(w, h, false);
    for (k, chunk) in bytes[pos..pos + expected].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let x = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (u, row) = (k % w, k / w);
        let v = h - 1 - row;
        if x.is_finite() {
            values.set(u, v, x as f64);
            valid.set(u, v, true);
        }
    }
    Ok(LoadedDisparity { values, valid })
}

const PNG_BIT_DEPTH_OFFSET: usize = 24;

fn decode_kitti(bytes: &[u8], path: &Path) -> Result<LoadedDisparity> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| format_err(path, 0, format!("png header: {e}")))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Sixteen || info.color_type != png::ColorType::Grayscale {
        return Err(format_err(
            path,
            PNG_BIT_DEPTH_OFFSET,
            format!(
                "expected 16-bit grayscale, found {:?} {:?}",
                info.bit_depth, info.color_type
            ),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(2 * w * h)];
    reader
        .next_frame(&mut buf)
        .map_err(|e| format_err(path, 0, format!("png data: {e}")))?;
    let mut values = Grid::filled(w, h, 0.0);
    let mut valid = Grid::filled(w, h, false);
    for (k, pair) in buf[..2 * w * h].chunks_exact(2).enumerate() {
        let raw = u16::from_be_bytes([pair[0], pair[1]]);
        if raw != 0 {
            values.as_mut_slice()[k] = raw as f64 / 256.0;
            valid.as_mut_slice()[k] = true;
        }
    }
    Ok(LoadedDisparity { values, valid })
}

fn encode_png16(width: usize, height: usize, words: &[u16], path: &Path) -> Result<Vec<u8>> {
    let data: Vec<u8> = words.iter().flat_map(|w| w.to_be_bytes()).collect();
    encode_png(width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &data, path)
}

fn encode_png(
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
    path: &Path,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(color);
        encoder.set_depth(depth);
        let mut writer = encoder
            .write_header()
            .map_err(|e| format_err(path, 0, format!("png encode: {e}")))?;
        writer
            .write_image_data(data)
            .map_err(|e| format_err(path, 0, format!("png encode: {e}")))?;
    }
    Ok(out)
}

/// Writes an image as 8-bit RGB PNG (values clamped to `[0, 1]` and rounded).
pub fn write_image_png(image: &Image, path: &Path) -> Result<()> {
    let (w, h) = image.dims();
    let mut data = Vec::with_capacity(3 * w * h);
    for v in 0..h {
        for u in 0..w {
            for c in 0..3 {
                data.push((image.get(c, u, v).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let bytes = encode_png(w, h, png::ColorType::Rgb, png::BitDepth::Eight, &data, path)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit RGB or grayscale PNG; grayscale is replicated to three channels.
pub fn read_image_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| format_err(path, 0, format!("png header: {e}")))?;
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    let (color, depth) = (info.color_type, info.bit_depth);
    if depth != png::BitDepth::Eight {
        return Err(format_err(path, PNG_BIT_DEPTH_OFFSET, format!("expected 8-bit image, found {depth:?}")));
    }
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(3 * w * h)];
    reader
        .next_frame(&mut buf)
        .map_err(|e| format_err(path, 0, format!("png data: {e}")))?;
    let channels = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Grayscale => 1,
        other => return Err(format_err(path, PNG_BIT_DEPTH_OFFSET + 1, format!("unsupported color type {other:?}"))),
    };
    let mut image = Image::zeros(w, h);
    for v in 0..h {
        for u in 0..w {
            for c in 0..3 {
                let src = (v * w + u) * channels + if channels == 3 { c } else { 0 };
                image.set(c, u, v, buf[src] as f64 / 255.0);
            }
        }
    }
    Ok(image)
}

/// Boolean mask as 8-bit grayscale (255 = true).
pub fn write_mask_png(mask: &Grid<bool>, path: &Path) -> Result<()> {
    let data: Vec<u8> = mask.as_slice().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let bytes = encode_png(
        mask.width(),
        mask.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        &data,
        path,
    )?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_mask_png(path: &Path) -> Result<Grid<bool>> {
    let image = read_image_png(path)?;
    Ok(Grid::from_fn(image.width(), image.height(), |u, v| image.get(0, u, v) > 0.5))
}

/// Writes raw bytes through a buffered writer, creating parent directories.
pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| Error::io(path, e))?;
    Ok(s)
}
