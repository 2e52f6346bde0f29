//! Small image utilities shared by corpus synthesis and view generation.
//!
//! Images are `H x W x 3` arrays of `f32` in `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{DclError, Result};

pub type Image = Array3<f32>;

/// Mirror index without repeating the edge sample (`numpy` "reflect" mode).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Round every value to the 8-bit grid used for PNG storage.
pub fn quantize(image: &mut Image) {
    image.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
}

pub fn flip_horizontal(image: &Image) -> Image {
    let mut out = image.clone();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().to_owned()
}

pub fn flip_map_horizontal(map: &Array2<f32>) -> Array2<f32> {
    let mut out = map.clone();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().to_owned()
}

fn gaussian_taps(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut taps: Vec<f32> = (-radius..=radius)
        .map(|d| (-((d * d) as f32) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Separable Gaussian blur with reflect padding. `sigma <= 0` is the identity.
pub fn gaussian_blur(image: &Image, sigma: f32) -> Image {
    if sigma <= 0.0 {
        return image.clone();
    }
    let taps = gaussian_taps(sigma);
    let radius = (taps.len() / 2) as isize;
    let (h, w, c) = image.dim();
    let mut tmp = Image::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &tap) in taps.iter().enumerate() {
                    let xx = reflect_index(x as isize + t as isize - radius, w);
                    acc += tap * image[[y, xx, ch]];
                }
                tmp[[y, x, ch]] = acc;
            }
        }
    }
    let mut out = Image::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &tap) in taps.iter().enumerate() {
                    let yy = reflect_index(y as isize + t as isize - radius, h);
                    acc += tap * tmp[[yy, x, ch]];
                }
                out[[y, x, ch]] = acc.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Bilinear sample of one channel with coordinates clamped to the image.
pub fn bilinear(image: &Image, y: f32, x: f32, ch: usize) -> f32 {
    let (h, w, _) = image.dim();
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f32;
    let fx = x - x0 as f32;
    let top = image[[y0, x0, ch]] * (1.0 - fx) + image[[y0, x1, ch]] * fx;
    let bottom = image[[y1, x0, ch]] * (1.0 - fx) + image[[y1, x1, ch]] * fx;
    top * (1.0 - fy) + bottom * fy
}

pub fn write_png(image: &Image, path: &Path) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(DclError::shape(format!("expected 3 channels, got {c}")));
    }
    let file = File::create(path).map_err(|e| DclError::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = image
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let encode_err = |e: png::EncodingError| DclError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(&bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)?;
    Ok(())
}

/// Write an 8-bit grayscale PNG from a boolean mask (true = 255).
pub fn write_mask_png(mask: &Array2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let file = File::create(path).map_err(|e| DclError::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let encode_err = |e: png::EncodingError| DclError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(&bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)?;
    Ok(())
}

/// Raw RGB bytes, used for plots.
pub fn write_rgb8_png(pixels: &[u8], width: usize, height: usize, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| DclError::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| DclError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(pixels).map_err(encode_err)?;
    writer.finish().map_err(encode_err)?;
    Ok(())
}

/// Read an 8-bit PNG into an RGB float image. Grayscale and alpha inputs are converted.
pub fn read_png(path: &Path) -> Result<Image> {
    let decode_err = |message: String| DclError::Image {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| DclError::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| decode_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| decode_err(e.to_string()))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(decode_err(format!("unsupported color type {other:?}"))),
    };
    let mut image = Image::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * stride;
            for ch in 0..3 {
                let v = if stride < 3 { buf[base] } else { buf[base + ch] };
                image[[y, x, ch]] = v as f32 / 255.0;
            }
        }
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_matches_numpy_reflect() {
        let n = 4;
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, n)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn blur_preserves_constant_image() {
        let image = Image::from_elem((8, 8, 3), 0.3);
        let out = gaussian_blur(&image, 1.0);
        for v in out.iter() {
            assert!((v - 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn png_round_trip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut image = Image::from_shape_fn((6, 9, 3), |(y, x, c)| ((y * 31 + x * 7 + c) % 256) as f32 / 255.0);
        quantize(&mut image);
        write_png(&image, &path).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(image, back);
    }
}
