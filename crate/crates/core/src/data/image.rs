use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::DiffArray;

/// 8-bit image with interleaved channels in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || !matches!(channels, 1 | 3) {
            return Err(Error::InvalidShape {
                op: "ImageBuffer::new",
                shape: vec![height, width, channels],
                reason: "need nonzero size and 1 or 3 channels".into(),
            });
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidShape {
                op: "ImageBuffer::new",
                shape: vec![height, width, channels],
                reason: format!("{} bytes supplied", data.len()),
            });
        }
        Ok(Self { width, height, channels, data })
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Affine map from normalized values back to the 8-bit scale: `v * scale + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormRecord {
    pub offset: f64,
    pub scale: f64,
}

impl Default for NormRecord {
    fn default() -> Self {
        Self { offset: 0.0, scale: 255.0 }
    }
}

/// `[1, C, H, W]` array with values in `[0, 1]`.
pub fn normalize(img: &ImageBuffer) -> DiffArray {
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut out = vec![0.0; w * h * c];
    for (i, &v) in img.data.iter().enumerate() {
        let ch = i % c;
        let pix = i / c;
        out[ch * w * h + pix] = f64::from(v) / 255.0;
    }
    DiffArray::new([1, c, h, w], out).expect("buffer dimensions are validated")
}

/// Round to nearest and clamp to `[0, 255]`. Accepts `[C, H, W]` or `[1, C, H, W]`.
pub fn denormalize(x: &DiffArray, record: NormRecord) -> Result<ImageBuffer> {
    let s = x.shape();
    let (c, h, w) = match *s {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "denormalize",
                shape: s.to_vec(),
                reason: "expected a single C x H x W image".into(),
            })
        }
    };
    let mut data = vec![0u8; c * h * w];
    for (i, &v) in x.data().iter().enumerate() {
        let ch = i / (h * w);
        let pix = i % (h * w);
        let q = (v * record.scale + record.offset).round();
        // NaN maps to 0 via the saturating cast.
        data[pix * c + ch] = q.clamp(0.0, 255.0) as u8;
    }
    ImageBuffer::new(w, h, c, data)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path).and_then(|f| BufReader::new(f).read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        parse_pgm(&bytes).map_err(|reason| Error::Image { path: path.to_path_buf(), reason })
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes).map_err(|reason| Error::Image { path: path.to_path_buf(), reason })
    } else {
        Err(Error::Image { path: path.to_path_buf(), reason: "unsupported format (expected binary PGM or PNG)".into() })
    }
}

/// Format is chosen by extension: `.png`, otherwise PGM.
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png {
        encode_png(img).map_err(|reason| Error::Image { path: path.to_path_buf(), reason })?
    } else {
        if img.channels != 1 {
            return Err(Error::Image {
                path: path.to_path_buf(),
                reason: "PGM output requires a single channel".into(),
            });
        }
        let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
        out.extend_from_slice(&img.data);
        out
    };
    File::create(path)
        .and_then(|f| {
            let mut w = BufWriter::new(f);
            w.write_all(&bytes)?;
            w.flush()
        })
        .map_err(|e| Error::io(path, e))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<ImageBuffer, String> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and comments may precede every header field.
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
            return Err("truncated or malformed header".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("header value out of range")?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval} (only 8-bit data)"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing separator after header".into());
    }
    pos += 1;
    let n = width.checked_mul(height).ok_or("image dimensions overflow")?;
    let data = bytes
        .get(pos..pos + n)
        .ok_or_else(|| format!("truncated pixel data: expected {n} bytes, found {}", bytes.len() - pos))?;
    ImageBuffer::new(width, height, 1, data.to_vec()).map_err(|e| e.to_string())
}

fn decode_png(bytes: &[u8]) -> std::result::Result<ImageBuffer, String> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format!("unsupported bit depth {:?}", info.bit_depth));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(format!("unsupported color type {other:?}")),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let row = w * channels;
    let mut data = Vec::with_capacity(row * h);
    for line in buf.chunks(info.line_size).take(h) {
        data.extend_from_slice(&line[..row]);
    }
    ImageBuffer::new(w, h, channels, data).map_err(|e| e.to_string())
}

fn encode_png(img: &ImageBuffer) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(if img.channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| e.to_string())?;
        writer.write_image_data(&img.data).map_err(|e| e.to_string())?;
        writer.finish().map_err(|e| e.to_string())?;
    }
    Ok(out)
}
