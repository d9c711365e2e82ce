//! Binary grayscale (P5) image dumps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps `[-1, 1]` to `0..=255`, clamping outside values.
pub fn to_gray(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn pgm_bytes(plane: &[f32], height: usize, width: usize) -> Result<Vec<u8>> {
    if plane.len() != height * width || plane.is_empty() {
        return Err(Error::shape(format!(
            "{} pixels do not form a {height}×{width} image",
            plane.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| to_gray(v)));
    Ok(out)
}

/// One file per image of `images [N, C, H, W]`; channels are stacked
/// vertically. Returns the written paths.
pub fn write_pgms(dir: &Path, stem: &str, images: &Tensor<f32>) -> Result<Vec<std::path::PathBuf>> {
    let &[n, c, h, w] = images.shape() else {
        return Err(Error::shape(format!("expected [N, C, H, W] images, got {:?}", images.shape())));
    };
    std::fs::create_dir_all(dir)?;
    let per = c * h * w;
    (0..n)
        .map(|i| {
            let path = dir.join(format!("{stem}_{i:03}.pgm"));
            std::fs::write(&path, pgm_bytes(&images.data()[i * per..(i + 1) * per], c * h, w)?)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_levels() {
        let b = pgm_bytes(&[-1.0, 0.0, 1.0, 7.0], 2, 2).unwrap();
        assert!(b.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&b[b.len() - 4..], &[0, 128, 255, 255]);
        assert!(pgm_bytes(&[0.0; 3], 2, 2).is_err());
    }
}
