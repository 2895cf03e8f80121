use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// RGB image with values in `[0, 1]`, stored as an `H × W × 3` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Tensor,
    pub source: Option<PathBuf>,
}

impl Image {
    pub fn new(pixels: Tensor) -> Result<Self> {
        pixels.expect_rank("image", 3)?;
        if pixels.dim(2) != 3 || pixels.dim(0) == 0 || pixels.dim(1) == 0 {
            return Err(Error::shape("image", format!("expected H×W×3 with H,W ≥ 1, got {:?}", pixels.shape())));
        }
        pixels.ensure_finite("image")?;
        Ok(Self { pixels, source: None })
    }

    /// Like [`Image::new`] but clamps values into `[0, 1]` first.
    pub fn clamped(mut pixels: Tensor) -> Result<Self> {
        pixels.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Self::new(pixels)
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::shape("image", format!("{} bytes for {height}×{width}×3", bytes.len())));
        }
        Self::new(Tensor::new(&[height, width, 3], bytes.iter().map(|&b| b as f64 / 255.0).collect())?)
    }

    pub fn height(&self) -> usize {
        self.pixels.dim(0)
    }

    pub fn width(&self) -> usize {
        self.pixels.dim(1)
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    /// 8-bit quantization with round-half-up and clamping.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8).collect()
    }

    /// Copy of the `h × w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height() || left + w > self.width() || h == 0 || w == 0 {
            return Err(Error::shape(
                "crop",
                format!("{h}×{w} at ({top},{left}) outside {}×{}", self.height(), self.width()),
            ));
        }
        let src = self.pixels.data();
        let row = self.width() * 3;
        let mut data = Vec::with_capacity(h * w * 3);
        for y in top..top + h {
            data.extend_from_slice(&src[y * row + left * 3..y * row + (left + w) * 3]);
        }
        Self::new(Tensor::new(&[h, w, 3], data)?)
    }
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse { offset, msg: msg.into() }
}

/// Decodes a binary (P6) PPM with `maxval ≤ 255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    if bytes.get(..2) != Some(b"P6") {
        return Err(parse_err(0, "missing P6 magic"));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(pos, "expected a decimal header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| parse_err(start, format!("header field {text} out of range")))?;
    }
    let [width, height, maxval] = fields;
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(parse_err(pos, "expected whitespace after maxval"));
    }
    pos += 1;
    if width == 0 || height == 0 {
        return Err(parse_err(pos, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(parse_err(pos, format!("unsupported maxval {maxval}")));
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| parse_err(pos, "image too large"))?;
    let body = &bytes[pos..];
    if body.len() < need {
        return Err(parse_err(bytes.len(), format!("pixel data truncated: {} of {need} bytes", body.len())));
    }
    let scale = maxval as f64;
    let data = body[..need]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if b as usize > maxval {
                Err(parse_err(pos + i, format!("sample {b} exceeds maxval {maxval}")))
            } else {
                Ok(b as f64 / scale)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Image::new(Tensor::new(&[height, width, 3], data)?)
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_u8());
    out
}

/// Decodes a PNG to 8-bit RGB; 16-bit, palette, grey and alpha variants are
/// converted (alpha is dropped).
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Png("palette was not expanded".into())),
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let line = &buf[y * info.line_size..y * info.line_size + w * channels];
        for px in line.chunks_exact(channels) {
            if channels < 3 {
                rgb.extend_from_slice(&[px[0]; 3]);
            } else {
                rgb.extend_from_slice(&px[..3]);
            }
        }
    }
    Image::from_u8(h, w, &rgb)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer.write_image_data(&img.to_u8()).map_err(|e| Error::Png(e.to_string()))?;
        writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Loads a `.png` or P6 `.ppm` file; the format is chosen by extension.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut img = if is_png(path) { decode_png(&bytes)? } else { decode_ppm(&bytes)? };
    img.source = Some(path.to_path_buf());
    Ok(img)
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let bytes = if is_png(path) { encode_png(img)? } else { encode_ppm(img) };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_ppm_decodes_to_known_values() {
        let mut bytes = b"P6\n# two by two\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 51, 102, 0, 0, 0, 0, 0, 255, 255, 255]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.height(), img.width()), (2, 2));
        assert_eq!(&img.pixels().data()[..4], &[0.0, 1.0, 0.2, 0.4]);
        let enc = encode_ppm(&img);
        assert_eq!(enc[enc.len() - 12..], bytes[bytes.len() - 12..]);
    }

    #[test]
    fn malformed_ppm_reports_offsets() {
        let err = |b: &[u8]| match decode_ppm(b) {
            Err(Error::Parse { offset, .. }) => offset,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(err(b"P3\n1 1\n255\n"), 0);
        assert_eq!(err(b"P6\n1 x\n255\n"), 5);
        assert_eq!(err(b"P6\n1 1\n255\n\x01\x02"), 13);
        assert!(err(b"P6 1 1 65535 ") > 0);
    }

    #[test]
    fn png_and_ppm_agree_on_a_checkerboard() {
        let bytes: Vec<u8> = (0..6 * 5).flat_map(|i| if (i / 5 + i % 5) % 2 == 0 { [255, 128, 0] } else { [0, 7, 255] }).collect();
        let img = Image::from_u8(6, 5, &bytes).unwrap();
        let via_png = decode_png(&encode_png(&img).unwrap()).unwrap();
        let via_ppm = decode_ppm(&encode_ppm(&img)).unwrap();
        assert_eq!(via_png, via_ppm);
        assert_eq!(via_png.to_u8(), bytes);
    }

    #[test]
    fn crop_bounds() {
        let img = Image::from_u8(4, 4, &[9; 48]).unwrap();
        assert_eq!(img.crop(1, 1, 3, 3).unwrap().width(), 3);
        assert!(img.crop(2, 0, 3, 1).is_err());
    }
}
