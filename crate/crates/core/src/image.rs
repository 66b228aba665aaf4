//! 8-bit RGB/RGBA pixel buffers with PNG and binary PPM (P6) codecs.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// Upper bound on decoded pixel count; larger headers are rejected before allocation.
pub const MAX_PIXELS: u64 = 1 << 28;

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Row-major interleaved 8-bit image. `(0, 0)` is the top-left pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Format(format!("empty image {width}x{height}")));
        }
        if channels != 3 && channels != 4 {
            return Err(Error::Format(format!(
                "expected 3 or 4 channels, got {channels}"
            )));
        }
        let expected = checked_len(width, height, channels)?;
        if data.len() != expected {
            return Err(Error::Format(format!(
                "buffer holds {} bytes, {width}x{height}x{channels} needs {expected}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// An image where every pixel has the same samples.
    pub fn filled(width: u32, height: u32, pixel: &[u8]) -> Result<Self> {
        let channels =
            u8::try_from(pixel.len()).map_err(|_| Error::Format("pixel too wide".into()))?;
        let n = checked_len(width, height, 1)?;
        let data = pixel.repeat(n);
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn has_alpha(&self) -> bool {
        self.channels == 4
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels as usize;
        let i = self.offset(x, y);
        &self.data[i..i + c]
    }

    pub(crate) fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize
    }

    pub(crate) fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }
}

fn checked_len(width: u32, height: u32, channels: u8) -> Result<usize> {
    let pixels = u64::from(width) * u64::from(height);
    if pixels > MAX_PIXELS {
        return Err(Error::DimensionOverflow {
            width: width.into(),
            height: height.into(),
        });
    }
    usize::try_from(pixels * u64::from(channels)).map_err(|_| Error::DimensionOverflow {
        width: width.into(),
        height: height.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("png") => Ok(Self::Png),
            Some("ppm") => Ok(Self::Ppm),
            other => Err(Error::UnsupportedFormat(format!(
                "cannot infer image format from extension {other:?}"
            ))),
        }
    }
}

/// Decodes PNG or P6 by sniffing the leading bytes.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.is_empty() {
        return Err(Error::Truncated("empty image file".into()));
    }
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if PNG_SIGNATURE.starts_with(bytes) || bytes == b"P" {
        Err(Error::Truncated("image signature cut short".into()))
    } else {
        Err(Error::UnsupportedFormat(
            "not a PNG or binary PPM file".into(),
        ))
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match ImageFormat::from_path(path)? {
        ImageFormat::Png => encode_png(img)?,
        ImageFormat::Ppm => encode_ppm(img)?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Decodes a binary PPM. Only `maxval == 255` is accepted.
pub fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut cursor = PpmCursor { bytes, pos: 0 };
    if cursor.bytes.get(..2) != Some(b"P6") {
        return Err(Error::UnsupportedFormat("missing P6 magic".into()));
    }
    cursor.pos = 2;
    let width = cursor.header_int("width")?;
    let height = cursor.header_int("height")?;
    let maxval = cursor.header_int("maxval")?;
    // exactly one whitespace byte separates the header from the raster
    match cursor.bytes.get(cursor.pos) {
        Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
        Some(_) => return Err(Error::Format("missing whitespace after maxval".into())),
        None => return Err(Error::Truncated("PPM header ends before raster".into())),
    }
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("PPM maxval {maxval}")));
    }
    let (width, height) = match (u32::try_from(width), u32::try_from(height)) {
        (Ok(w), Ok(h)) if w > 0 && h > 0 => (w, h),
        _ => return Err(Error::DimensionOverflow { width, height }),
    };
    let len = checked_len(width, height, 3)?;
    let raster = &bytes[cursor.pos..];
    if raster.len() < len {
        return Err(Error::Truncated(format!(
            "PPM raster has {} of {len} bytes",
            raster.len()
        )));
    }
    ImageBuffer::new(width, height, 3, raster[..len].to_vec())
}

struct PpmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PpmCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn header_int(&mut self, field: &str) -> Result<u64> {
        let start = self.pos;
        self.skip_space_and_comments();
        if self.pos == start {
            return match self.bytes.get(self.pos) {
                None => Err(Error::Truncated(format!("PPM header ends before {field}"))),
                Some(_) => Err(Error::Format(format!("expected whitespace before {field}"))),
            };
        }
        let digits_start = self.pos;
        let mut value: u64 = 0;
        while let Some(&b) = self.bytes.get(self.pos) {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add(u64::from(b - b'0')))
                .ok_or_else(|| Error::Format(format!("PPM {field} too large")))?;
            self.pos += 1;
        }
        if self.pos == digits_start {
            return match self.bytes.get(self.pos) {
                None => Err(Error::Truncated(format!("PPM header ends before {field}"))),
                Some(_) => Err(Error::Format(format!("PPM {field} is not a number"))),
            };
        }
        Ok(value)
    }
}

pub fn encode_ppm(img: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    match img.channels {
        3 => out.extend_from_slice(&img.data),
        _ => {
            return Err(Error::UnsupportedFormat(
                "PPM cannot store an alpha channel".into(),
            ))
        }
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(png_error)?;
    let (width, height) = {
        let info = reader.info();
        (info.width, info.height)
    };
    checked_len(width, height, 4)?;
    let size = reader
        .output_buffer_size()
        .ok_or(Error::DimensionOverflow {
            width: width.into(),
            height: height.into(),
        })?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(png_error)?;
    buf.truncate(frame.buffer_size());
    let data = match frame.color_type {
        png::ColorType::Rgb => (buf, 3),
        png::ColorType::Rgba => (buf, 4),
        png::ColorType::Grayscale => (buf.iter().flat_map(|&g| [g, g, g]).collect(), 3),
        png::ColorType::GrayscaleAlpha => (
            buf.chunks_exact(2)
                .flat_map(|ga| [ga[0], ga[0], ga[0], ga[1]])
                .collect(),
            4,
        ),
        png::ColorType::Indexed => {
            return Err(Error::Format("palette was not expanded".into()));
        }
    };
    ImageBuffer::new(frame.width, frame.height, data.1, data.0)
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width, img.height);
        encoder.set_color(if img.has_alpha() {
            png::ColorType::Rgba
        } else {
            png::ColorType::Rgb
        });
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(png_encode_error)?;
        writer
            .write_image_data(&img.data)
            .map_err(png_encode_error)?;
        writer.finish().map_err(png_encode_error)?;
    }
    Ok(out)
}

fn png_error(e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Truncated(format!("PNG stream: {io}"))
        }
        png::DecodingError::LimitsExceeded => Error::Format("PNG exceeds decoder limits".into()),
        other => Error::Format(format!("PNG: {other}")),
    }
}

fn png_encode_error(e: png::EncodingError) -> Error {
    Error::Format(format!("PNG encode: {e}"))
}
