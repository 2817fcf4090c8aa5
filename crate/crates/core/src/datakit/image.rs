//! Grayscale image buffers and 16-bit PNG storage.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("png decode error on {path}: {message}")]
    Decode { path: String, message: String },
    #[error("png encode error on {path}: {message}")]
    Encode { path: String, message: String },
    #[error("unsupported png layout in {path}: {detail}")]
    Unsupported { path: String, detail: String },
    #[error("buffer of {got} pixels does not match {width}x{height}")]
    Shape { width: usize, height: usize, got: usize },
}

/// Row-major single-channel image with intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::Shape {
                width,
                height,
                got: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
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

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f32 {
        let sum: f64 = self.data.iter().map(|&v| f64::from(v)).sum();
        (sum / self.data.len().max(1) as f64) as f32
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at integers),
    /// clamping to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f32 {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> GrayImage {
        let mut data = Vec::with_capacity(width * height);
        for row in y..y + height {
            let start = row * self.width + x;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        GrayImage { width, height, data }
    }

    /// Bilinear resize with half-pixel centers. Same-size resizes are exact copies.
    pub fn resize(&self, width: usize, height: usize) -> GrayImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                data.push(self.sample_bilinear(src_x, src_y));
            }
        }
        GrayImage { width, height, data }
    }

    /// Quantize to 16-bit samples (values clamped to `[0, 1]`).
    pub fn to_u16(&self) -> Vec<u16> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect()
    }

    pub fn from_u16(width: usize, height: usize, samples: &[u16]) -> Result<Self, ImageError> {
        let data = samples.iter().map(|&s| f32::from(s) / 65535.0).collect();
        Self::new(width, height, data)
    }
}

/// Writes a 16-bit grayscale PNG.
pub fn write_png16(path: &Path, width: usize, height: usize, samples: &[u16]) -> Result<(), ImageError> {
    let display = path.display().to_string();
    let file = File::create(path).map_err(|source| ImageError::Io {
        path: display.clone(),
        source,
    })?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let encode_err = |e: png::EncodingError| ImageError::Encode {
        path: display.clone(),
        message: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(encode_err)?;
    let bytes: Vec<u8> = samples.iter().flat_map(|s| s.to_be_bytes()).collect();
    writer.write_image_data(&bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

/// Reads a grayscale PNG (8 or 16 bit) as 16-bit samples.
pub fn read_png16(path: &Path) -> Result<(usize, usize, Vec<u16>), ImageError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| ImageError::Io {
        path: display.clone(),
        source,
    })?;
    let decode_err = |e: png::DecodingError| ImageError::Decode {
        path: display.clone(),
        message: e.to_string(),
    };
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(decode_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    if info.color_type != png::ColorType::Grayscale {
        return Err(ImageError::Unsupported {
            path: display,
            detail: format!("color type {:?}", info.color_type),
        });
    }
    let samples = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..w * h * 2]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect(),
        png::BitDepth::Eight => buf[..w * h].iter().map(|&b| u16::from(b) * 257).collect(),
        other => {
            return Err(ImageError::Unsupported {
                path: display,
                detail: format!("bit depth {other:?}"),
            })
        }
    };
    Ok((w, h, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let samples: Vec<u16> = (0..12).map(|i| i * 5000).collect();
        write_png16(&path, 4, 3, &samples).unwrap();
        assert_eq!(read_png16(&path).unwrap(), (4, 3, samples));
    }

    #[test]
    fn resize_same_size_is_identity_and_constant_is_preserved() {
        let img = GrayImage::new(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(img.resize(3, 2), img);
        let flat = GrayImage::filled(5, 7, 0.25).resize(11, 3);
        assert!(flat.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn shape_is_checked() {
        assert!(GrayImage::new(2, 2, vec![0.0; 3]).is_err());
    }
}
