use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::diffusion::ImageTensor;
use crate::error::{Error, Result};

/// 8-bit level to model range: `v / 127.5 - 1`.
pub fn to_model_range(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Model range back to 8 bits, rounding half away from zero and clamping.
pub fn to_u8(x: f64) -> u8 {
    let v = (x + 1.0) * 127.5;
    if v.is_nan() {
        return 0;
    }
    v.round().clamp(0.0, 255.0) as u8
}

pub fn tensor_from_rgb(img: &RgbImage) -> ImageTensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = ImageTensor::zeros(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(c, y as usize, x as usize, to_model_range(px[c]));
        }
    }
    t
}

pub fn rgb_from_tensor(t: &ImageTensor) -> Result<RgbImage> {
    if t.channels() != 3 {
        return Err(Error::InvalidArgument(format!(
            "RGB export needs 3 channels, got {}",
            t.channels()
        )));
    }
    Ok(ImageBuffer::from_fn(
        t.width() as u32,
        t.height() as u32,
        |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([
                to_u8(t.get(0, y, x)),
                to_u8(t.get(1, y, x)),
                to_u8(t.get(2, y, x)),
            ])
        },
    ))
}

/// Reads an 8-bit RGB PNG into model range.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if img.color() != image::ColorType::Rgb8 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            reason: format!("expected 8-bit RGB, found {:?}", img.color()),
        });
    }
    Ok(tensor_from_rgb(&img.into_rgb8()))
}

/// Writes a 3-channel tensor as an 8-bit RGB PNG.
pub fn save_image(t: &ImageTensor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    rgb_from_tensor(t)?.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn extremes_map_to_unit_range() {
        assert_eq!(to_model_range(0), -1.0);
        assert_eq!(to_model_range(255), 1.0);
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(7.0), 255);
        // 0.0 sits exactly on 127.5 and rounds away from zero
        assert_eq!(to_u8(0.0), 128);
    }

    #[test]
    fn black_and_white_files() {
        let dir = tempfile::tempdir().unwrap();
        for (v, want) in [(0u8, -1.0), (255, 1.0)] {
            let p = dir.path().join(format!("{v}.png"));
            RgbImage::from_pixel(4, 3, Rgb([v, v, v])).save(&p).unwrap();
            let t = load_image(&p).unwrap();
            assert_eq!(t.shape(), (3, 3, 4));
            assert!(t.data().iter().all(|&x| x == want));
        }
    }

    #[test]
    fn grayscale_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::GrayImage::from_pixel(2, 2, image::Luma([9]))
            .save(&p)
            .unwrap();
        assert!(matches!(load_image(&p), Err(Error::Image { .. })));
        assert!(load_image(&dir.path().join("missing.png")).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn png_round_trip_is_exact(bytes in proptest::collection::vec(any::<u8>(), 3 * 6 * 5)) {
            let img = RgbImage::from_raw(6, 5, bytes).unwrap();
            let t = tensor_from_rgb(&img);
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("x.png");
            save_image(&t, &p).unwrap();
            let back = load_image(&p).unwrap();
            prop_assert!(back.bit_identical(&t));
            prop_assert_eq!(rgb_from_tensor(&back).unwrap(), img);
        }
    }
}
