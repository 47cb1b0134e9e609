//! PNG decoding/encoding for [`RgbImage`]. 8-bit samples map to `v/255`, 16-bit to `v/65535`.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Rgb};

use crate::colorspace::RgbImage;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

fn from_dynamic<T: Scalar>(img: DynamicImage) -> Result<RgbImage<T>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let wide = matches!(
        img,
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)
    );
    let pixels = if wide {
        img.into_rgb16().into_raw().into_iter().map(|v| T::from_f64_lossy(v as f64 / 65535.0)).collect()
    } else {
        img.into_rgb8().into_raw().into_iter().map(|v| T::from_f64_lossy(v as f64 / 255.0)).collect()
    };
    RgbImage::new(h, w, pixels)
}

pub fn decode_png<T: Scalar>(bytes: &[u8]) -> Result<RgbImage<T>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    from_dynamic(img)
}

/// Reads a PNG file, reporting the path on failure.
pub fn read_png<T: Scalar>(path: &Path) -> Result<RgbImage<T>> {
    let decode_err = |message: String| Error::Decode { path: path.to_path_buf(), message };
    let bytes = std::fs::read(path).map_err(|e| decode_err(e.to_string()))?;
    decode_png(&bytes).map_err(|e| decode_err(e.to_string()))
}

/// Dimensions of an encoded PNG without decoding its pixels.
pub fn png_dimensions(bytes: &[u8]) -> Result<(u32, u32)> {
    let reader = image::ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    Ok(reader.into_dimensions()?)
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

pub fn encode_png<T: Scalar>(img: &RgbImage<T>, depth: BitDepth) -> Result<Vec<u8>> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynamic = match depth {
        BitDepth::Eight => {
            let raw = img.pixels().iter().map(|v| quantize(v.to_f64_lossy(), 255.0) as u8).collect();
            DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, Vec<u8>>::from_raw(w, h, raw).expect("buffer size"))
        }
        BitDepth::Sixteen => {
            let raw = img.pixels().iter().map(|v| quantize(v.to_f64_lossy(), 65535.0) as u16).collect();
            DynamicImage::ImageRgb16(ImageBuffer::<Rgb<u16>, Vec<u16>>::from_raw(w, h, raw).expect("buffer size"))
        }
    };
    let mut out = Cursor::new(Vec::new());
    dynamic.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn write_png<T: Scalar>(img: &RgbImage<T>, path: &Path, depth: BitDepth) -> Result<()> {
    std::fs::write(path, encode_png(img, depth)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RgbImage<f64> {
        RgbImage::from_fn(5, 7, |y, x| [y as f64 / 4.0, x as f64 / 6.0, 0.5]).unwrap()
    }

    #[test]
    fn eight_bit_round_trip_is_within_half_a_step() {
        let img = sample();
        let back: RgbImage<f64> = decode_png(&encode_png(&img, BitDepth::Eight).unwrap()).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(png_dimensions(&encode_png(&img, BitDepth::Eight).unwrap()).unwrap(), (7, 5));
    }

    #[test]
    fn sixteen_bit_round_trip_and_exact_levels() {
        let img = sample();
        let back: RgbImage<f64> = decode_png(&encode_png(&img, BitDepth::Sixteen).unwrap()).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
        let white = RgbImage::<f32>::filled(2, 2, [1.0, 0.0, 1.0]).unwrap();
        let back: RgbImage<f32> = decode_png(&encode_png(&white, BitDepth::Eight).unwrap()).unwrap();
        assert_eq!(back.pixel(1, 1), [1.0, 0.0, 1.0]);
    }

    #[test]
    fn garbage_is_rejected_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not a png").unwrap();
        let err = read_png::<f32>(&p).unwrap_err();
        assert!(err.to_string().contains("bad.png"), "{err}");
    }
}
