use std::path::Path;

use crate::error::{invalid, io_err, Error, Result};

/// RGB image, `H x W x 3` interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(invalid(format!(
                "RGB image of {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Values after 8-bit quantisation, as stored on disk.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| quantize(v)).collect(),
        }
    }

    /// Channel-major copy `[3, H, W]`.
    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c];
            }
        }
        out
    }
}

/// Nearest 8-bit level `k / 255`.
pub fn quantize(v: f64) -> f64 {
    to_u8(v) as f64 / 255.0
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn png_err(path: &Path) -> impl Fn(png::DecodingError) -> Error + '_ {
    move |e| Error::Format {
        path: path.to_path_buf(),
        msg: format!("bad PNG: {e}"),
    }
}

/// Encodes 8-bit pixels as PNG bytes. `gray` selects one channel instead of RGB.
pub fn encode_png(height: usize, width: usize, pixels: &[u8], gray: bool) -> Result<Vec<u8>> {
    let channels = if gray { 1 } else { 3 };
    if pixels.len() != height * width * channels {
        return Err(invalid(format!(
            "{height}x{width}x{channels} image needs {} bytes, got {}",
            height * width * channels,
            pixels.len()
        )));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(if gray {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| invalid(format!("PNG encoder: {e}")))?;
        writer
            .write_image_data(pixels)
            .map_err(|e| invalid(format!("PNG encoder: {e}")))?;
    }
    Ok(out)
}

/// Decodes an 8-bit PNG. Returns `(height, width, channels, pixels)`.
pub fn decode_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(png_err(path))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        msg: "image too large".into(),
    })?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err(path))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected 8-bit samples, got {:?}", info.bit_depth),
        });
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("unsupported colour type {other:?}"),
            })
        }
    };
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, channels, buf))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Writes an 8-bit RGB PNG.
pub fn write_rgb_png(path: &Path, image: &Image) -> Result<()> {
    let px: Vec<u8> = image.data.iter().map(|&v| to_u8(v)).collect();
    write_file(path, &encode_png(image.height, image.width, &px, false)?)
}

pub fn read_rgb_png(path: &Path) -> Result<Image> {
    let (h, w, c, px) = decode_png(path)?;
    if c != 3 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected an RGB image, got {c} channel(s)"),
        });
    }
    Image::new(h, w, px.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Writes values in `[0, 1]` as an 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    let px: Vec<u8> = values.iter().map(|&v| to_u8(v)).collect();
    write_file(path, &encode_png(height, width, &px, true)?)
}

/// Reads an 8-bit grayscale PNG. Returns `(height, width, pixels)`.
pub fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w, c, px) = decode_png(path)?;
    if c != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected a grayscale image, got {c} channels"),
        });
    }
    Ok((h, w, px))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_is_idempotent() {
        for k in 0..=255u32 {
            let v = k as f64 / 255.0;
            assert_eq!(quantize(v), v);
            assert_eq!(to_u8(v), k as u8);
        }
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(Image::new(1, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn png_round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..4 * 5 * 3).map(|i| (i as f64 * 0.013) % 1.0).collect();
        let img = Image::new(4, 5, data).unwrap();
        let p = dir.path().join("a.png");
        write_rgb_png(&p, &img).unwrap();
        let back = read_rgb_png(&p).unwrap();
        assert_eq!(back, img.quantized());
        let err = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 0.5 / 255.0 + 1e-12);
        assert!(read_gray_png(&p).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let e = read_rgb_png(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/x.png"));
    }
}
