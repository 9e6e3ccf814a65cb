//! 8-bit RGB image buffers, binary PPM (P6) I/O and a PNG reading adapter.

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major interleaved RGB, one byte per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Decode(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Decode(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// `[3, H, W]` tensor with `v / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        Tensor::from_fn([3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            f64::from(self.pixels[p * 3 + c]) / 255.0
        })
    }

    /// Quantizes a `[3, H, W]` tensor, rounding half up and clamping to
    /// `[0, 255]`. Non-finite values are rejected.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [3, h, w] = t.shape()[..] else {
            return Err(Error::Contract(format!(
                "expected a [3,H,W] tensor, got {:?}",
                t.shape()
            )));
        };
        if !t.is_finite() {
            return Err(Error::Contract("cannot quantize a non-finite image".into()));
        }
        let plane = h * w;
        let data = t.data();
        let pixels = (0..plane * 3)
            .map(|i| {
                let (p, c) = (i / 3, i % 3);
                quantize(data[c * plane + p])
            })
            .collect();
        Self::new(w, h, pixels)
    }

    /// Parses PPM (P6) or PNG bytes, chosen by signature.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(b"P6") {
            decode_ppm(bytes)
        } else if bytes.starts_with(PNG_SIGNATURE) {
            decode_png(bytes)
        } else {
            Err(Error::Decode(
                "unrecognized image format (expected binary PPM or PNG)".into(),
            ))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Decode(d) => Error::Decode(format!("{}: {d}", path.display())),
            other => other,
        })
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode_ppm()).map_err(|e| Error::io(path, e))
    }
}

pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

const PNG_SIGNATURE: &[u8] = &[0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Decode(format!("PPM header: bad {what} at byte {start}")))
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if !(1..=255).contains(&maxval) {
        return Err(Error::Decode(format!("PPM maxval {maxval} unsupported (1..=255)")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Decode("PPM header not terminated by whitespace".into()));
    }
    let start = cur.pos + 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Decode(format!("PPM size {width}x{height} overflows")))?;
    let raster = bytes
        .get(start..start + need)
        .ok_or_else(|| Error::Decode(format!("PPM raster truncated: need {need} bytes after offset {start}")))?;
    let pixels = if maxval == 255 {
        raster.to_vec()
    } else {
        raster
            .iter()
            .map(|&v| ((u32::from(v) * 255 + maxval as u32 / 2) / maxval as u32).min(255) as u8)
            .collect()
    };
    ImageBuffer::new(width, height, pixels)
}

fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let err = |e: png::DecodingError| Error::Decode(format!("PNG: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Decode("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::Decode(format!("PNG color type {other:?} unsupported"))),
    };
    let mut pixels = Vec::with_capacity(w * h * 3);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * channels].chunks(channels) {
            match channels {
                1 | 2 => pixels.extend_from_slice(&[px[0]; 3]),
                _ => pixels.extend_from_slice(&px[..3]),
            }
        }
    }
    ImageBuffer::new(w, h, pixels)
}

/// Reflection index (edge not repeated) of `i` into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Pads a `[C,H,W]` tensor by reflection so both sides become multiples of
/// `multiple`. Padding is split between the two ends, extra pixel at the
/// bottom/right. Returns the padded tensor and the `(top, left)` offset of
/// the original content.
pub fn reflect_pad_to_multiple(t: &Tensor, multiple: usize) -> Result<(Tensor, (usize, usize))> {
    let [c, h, w] = t.shape()[..] else {
        return Err(Error::Contract(format!("expected [C,H,W], got {:?}", t.shape())));
    };
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    let (top, left) = ((ph - h) / 2, (pw - w) / 2);
    let src = t.data();
    let out = Tensor::from_fn([c, ph, pw], |i| {
        let (ch, r, col) = (i / (ph * pw), i / pw % ph, i % pw);
        let sr = reflect(r as isize - top as isize, h);
        let sc = reflect(col as isize - left as isize, w);
        src[(ch * h + sr) * w + sc]
    });
    Ok((out, (top, left)))
}

/// `[C, height, width]` window of a `[C,H,W]` tensor starting at `(top, left)`.
pub fn crop_tensor(t: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
    let [c, h, w] = t.shape()[..] else {
        return Err(Error::Contract(format!("expected [C,H,W], got {:?}", t.shape())));
    };
    if top + height > h || left + width > w || height == 0 || width == 0 {
        return Err(Error::Contract(format!(
            "crop {height}x{width} at ({top},{left}) exceeds {h}x{w}"
        )));
    }
    let src = t.data();
    Ok(Tensor::from_fn([c, height, width], |i| {
        let (ch, r, col) = (i / (height * width), i / width % height, i % width);
        src[(ch * h + top + r) * w + left + col]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ImageBuffer {
        ImageBuffer::new(3, 2, (0..18).map(|i| (i * 14) as u8).collect()).unwrap()
    }

    #[test]
    fn ppm_roundtrip_bytes() {
        let img = sample();
        let bytes = img.encode_ppm();
        let back = ImageBuffer::decode(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.encode_ppm(), bytes);
    }

    #[test]
    fn ppm_header_comments() {
        let mut bytes = b"P6\n# made by hand\n3 2 # trailing\n255\n".to_vec();
        bytes.extend(sample().pixels());
        assert_eq!(ImageBuffer::decode(&bytes).unwrap(), sample());
    }

    #[test]
    fn truncated_ppm_is_decode_error() {
        let bytes = sample().encode_ppm();
        assert!(matches!(
            ImageBuffer::decode(&bytes[..bytes.len() - 1]),
            Err(Error::Decode(_))
        ));
        assert!(matches!(ImageBuffer::decode(b"GIF89a"), Err(Error::Decode(_))));
    }

    #[test]
    fn tensor_roundtrip_on_grid() {
        let img = sample();
        assert_eq!(ImageBuffer::from_tensor(&img.to_tensor()).unwrap(), img);
    }

    #[test]
    fn quantize_rounds_half_up_and_clamps() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.7), 255);
    }

    #[test]
    fn png_rgb_decodes() {
        let img = sample();
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut bytes, 3, 2);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(img.pixels()).unwrap();
        }
        assert_eq!(ImageBuffer::decode(&bytes).unwrap(), img);
    }

    #[test]
    fn reflect_pad_then_crop_restores() {
        let t = Tensor::from_fn([3, 5, 7], |i| i as f64);
        let (p, (top, left)) = reflect_pad_to_multiple(&t, 8).unwrap();
        assert_eq!(p.shape(), &[3, 8, 8]);
        assert_eq!(crop_tensor(&p, top, left, 5, 7).unwrap(), t);
        // Reflection does not repeat the edge pixel.
        assert_eq!(p.get(&[0, top, left + 7]), t.get(&[0, 0, 5]));
    }
}
