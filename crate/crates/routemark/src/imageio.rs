//! Lossless PNG round-trips for generated images. Verification-path
//! images must not pass through lossy storage, so PNG is the only format.

use std::path::Path;

use crate::tensor::{EngineError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ImageIoError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("expected an RGB image tensor (3,H,W), got shape {0:?}")]
    NotRgb(Vec<usize>),
}

/// Quantizes a [0,1] float image to 8-bit RGB rows.
pub fn to_rgb8(image: &Tensor) -> Result<(Vec<u8>, u32, u32), ImageIoError> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(ImageIoError::NotRgb(s.to_vec())),
    };
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[(c * h + y) * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok((out, w as u32, h as u32))
}

/// Expands 8-bit RGB back to the [0,1] tensor layout.
pub fn from_rgb8(data: &[u8], width: u32, height: u32) -> Result<Tensor, ImageIoError> {
    let (h, w) = (height as usize, width as usize);
    let mut out = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[(c * h + y) * w + x] = f32::from(data[(y * w + x) * 3 + c]) / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], out)?)
}

pub fn save_png(path: &Path, image: &Tensor) -> Result<(), ImageIoError> {
    let (rgb, w, h) = to_rgb8(image)?;
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(w, h, rgb).expect("buffer sized from dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor, ImageIoError> {
    let img = image::open(path)?.to_rgb8();
    from_rgb8(img.as_raw(), img.width(), img.height())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn png_roundtrip_is_lossless_at_8_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut img = Tensor::randn(&[3, 32, 32], 0.25, &mut rng);
        for v in img.data_mut() {
            *v = (*v + 0.5).clamp(0.0, 1.0);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();

        // The first save quantizes; the loaded image must round-trip
        // bit-exactly from there on.
        let path2 = dir.path().join("y.png");
        save_png(&path2, &back).unwrap();
        let back2 = load_png(&path2).unwrap();
        assert_eq!(back.data(), back2.data());

        // And quantization error is bounded by half a level.
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
