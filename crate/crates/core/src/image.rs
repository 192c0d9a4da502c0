//! RGB float images, binary masks, and their file codecs (PFM, 8-bit PNG).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::ImageError;
use crate::math::Rgb;

/// Linear RGB image stored top row first, three `f32` channels per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != width * height * 3 {
            return Err(ImageError::DimensionMismatch);
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn texel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let t = self.texel(x, y);
        Rgb::new(t[0] as f64, t[1] as f64, t[2] as f64)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        for ch in 0..3 {
            self.data[i + ch] = c.0[ch] as f32;
        }
    }

    pub fn pixels(&self) -> impl Iterator<Item = Rgb> + '_ {
        self.data
            .chunks_exact(3)
            .map(|p| Rgb::new(p[0] as f64, p[1] as f64, p[2] as f64))
    }

    /// Clamp to `[0, 1]` and apply the 1/2.2 display gamma.
    pub fn tone_mapped(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| tone_map(v)).collect(),
        }
    }

    pub fn save_pfm(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_pfm(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Portable FloatMap, little-endian, rows bottom-to-top.
    pub fn write_pfm<W: Write>(&self, w: &mut W) -> Result<(), ImageError> {
        write!(w, "PF\n{} {}\n-1.0\n", self.width, self.height)?;
        let mut row = Vec::with_capacity(self.width * 12);
        for y in (0..self.height).rev() {
            row.clear();
            let start = y * self.width * 3;
            for v in &self.data[start..start + self.width * 3] {
                row.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&row)?;
        }
        Ok(())
    }

    pub fn load_pfm(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        Self::read_pfm(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_pfm<R: BufRead>(r: &mut R) -> Result<Self, ImageError> {
        let magic = read_token(r)?;
        match magic.as_str() {
            "PF" => {}
            "Pf" => return Err(ImageError::MalformedHeader("grayscale PFM is not supported".into())),
            other => return Err(ImageError::MalformedHeader(format!("bad magic {other:?}"))),
        }
        let width = parse_dim(&read_token(r)?)?;
        let height = parse_dim(&read_token(r)?)?;
        let scale: f64 = read_token(r)?
            .parse()
            .map_err(|_| ImageError::MalformedHeader("bad scale".into()))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(ImageError::MalformedHeader("scale must be non-zero".into()));
        }
        let little = scale < 0.0;
        let mut payload = vec![0u8; width * height * 12];
        r.read_exact(&mut payload).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => ImageError::UnexpectedEof,
            _ => ImageError::Io(e),
        })?;
        let mut data = vec![0f32; width * height * 3];
        for (row_idx, row) in payload.chunks_exact(width * 12).enumerate() {
            let y = height - 1 - row_idx;
            for (i, b) in row.chunks_exact(4).enumerate() {
                let bytes = [b[0], b[1], b[2], b[3]];
                data[y * width * 3 + i] = if little {
                    f32::from_le_bytes(bytes)
                } else {
                    f32::from_be_bytes(bytes)
                };
            }
        }
        Ok(Self { width, height, data })
    }

    /// 8-bit sRGB-ish preview: clamp, gamma 1/2.2, round.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(tone_map(v))).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }

    /// Loads an 8-bit PNG and undoes the display gamma.
    pub fn load_png_linear(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.as_raw().iter().map(|&b| (b as f32 / 255.0).powf(2.2)).collect();
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }

    /// Loads an 8-bit PNG and returns display-referred values in `[0, 1]`.
    pub fn load_png_display(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }
}

/// Display transform used for previews and metrics.
#[inline]
pub fn tone_map(v: f32) -> f32 {
    v.clamp(0.0, 1.0).powf(1.0 / 2.2)
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn parse_dim(tok: &str) -> Result<usize, ImageError> {
    let v: i64 = tok
        .parse()
        .map_err(|_| ImageError::MalformedHeader(format!("bad dimension {tok:?}")))?;
    if v <= 0 {
        return Err(ImageError::NonPositiveDimensions);
    }
    Ok(v as usize)
}

/// Reads one whitespace-delimited header token and consumes exactly one
/// trailing whitespace byte.
fn read_token<R: BufRead>(r: &mut R) -> Result<String, ImageError> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read(&mut byte)? {
            0 => {
                return if tok.is_empty() {
                    Err(ImageError::UnexpectedEof)
                } else {
                    Ok(String::from_utf8_lossy(&tok).into_owned())
                }
            }
            _ if byte[0].is_ascii_whitespace() => {
                if !tok.is_empty() {
                    return Ok(String::from_utf8_lossy(&tok).into_owned());
                }
            }
            _ => {
                tok.push(byte[0]);
                if tok.len() > 64 {
                    return Err(ImageError::MalformedHeader("header token too long".into()));
                }
            }
        }
    }
}

/// Binary object mask, top row first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.set(x, y, f(x, y));
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let bytes: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self {
            width: w,
            height: h,
            bits: img.as_raw().iter().map(|&b| b >= 128).collect(),
        })
    }
}
