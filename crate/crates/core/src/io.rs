//! PNG images and masks.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{CraError, Result};
use crate::resample::snap_to_lattice;
use crate::tensor::{Shape, Tensor};

/// Maps an 8-bit value to `[-1, 1]`.
pub fn pixel_to_value(p: u8) -> f32 {
    snap_to_lattice(p as f64 / 127.5 - 1.0)
}

/// Inverse of [`pixel_to_value`], rounding half away from zero and
/// saturating outside `[-1, 1]`.
pub fn value_to_pixel(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> CraError {
    CraError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| CraError::io(path, e))?;
    let reader = reader
        .with_guessed_format()
        .map_err(|e| CraError::io(path, e))?;
    reader.decode().map_err(|e| image_err(path, e))
}

/// An RGB tensor `(1, 3, H, W)` in `[-1, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    Ok(rgb_to_tensor(&open(path)?.to_rgb8()))
}

/// A binary mask `(1, 1, H, W)`; any nonzero colour channel marks a hole.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let img = open(path)?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Tensor::from_fn(
        Shape::new(1, 1, h as usize, w as usize),
        |_, _, y, x| {
            let p = rgb.get_pixel(x as u32, y as u32);
            (p.0.iter().any(|&v| v != 0)) as u8 as f32
        },
    ))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    Tensor::from_fn(Shape::new(1, 3, h as usize, w as usize), |_, c, y, x| {
        pixel_to_value(img.get_pixel(x as u32, y as u32).0[c])
    })
}

pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(CraError::Shape(format!(
            "expected a (1, 3, H, W) image, got {s}"
        )));
    }
    Ok(ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        let px = |c| value_to_pixel(t.at(0, c, y as usize, x as usize));
        Rgb([px(0), px(1), px(2)])
    }))
}

pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    tensor_to_rgb(t)?.save(path).map_err(|e| image_err(path, e))
}

/// Writes a mask as an 8-bit grey PNG with holes at 255.
pub fn save_mask(mask: &Tensor, path: &Path) -> Result<()> {
    let s = mask.shape();
    if s.n != 1 || s.c != 1 {
        return Err(CraError::Shape(format!(
            "expected a (1, 1, H, W) mask, got {s}"
        )));
    }
    let img: GrayImage = ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        Luma([if mask.at(0, 0, y as usize, x as usize) != 0.0 {
            255
        } else {
            0
        }])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_byte_round_trips() {
        for p in 0..=255u8 {
            assert_eq!(value_to_pixel(pixel_to_value(p)), p);
        }
        assert_eq!(pixel_to_value(0), -1.0);
        assert_eq!(pixel_to_value(255), 1.0);
    }

    #[test]
    fn inverse_rounds_half_away_and_saturates() {
        // 0 maps to 127.5, exactly between bytes 127 and 128
        assert_eq!(value_to_pixel(0.0), 128);
        assert_eq!(value_to_pixel(-3.0), 0);
        assert_eq!(value_to_pixel(7.0), 255);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn(Shape::new(1, 3, 5, 7), |_, c, y, x| {
            pixel_to_value((c * 80 + y * 7 + x) as u8)
        });
        let p = dir.path().join("a.png");
        save_image(&t, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), t);

        let m = Tensor::from_fn(Shape::new(1, 1, 5, 7), |_, _, y, x| {
            ((x + y) % 3 == 0) as u8 as f32
        });
        let q = dir.path().join("m.png");
        save_mask(&m, &q).unwrap();
        assert_eq!(load_mask(&q).unwrap(), m);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            load_image(Path::new("/no/such.png")),
            Err(CraError::Io { .. })
        ));
    }
}
