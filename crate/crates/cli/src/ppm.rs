//! Binary PPM (P6) output.

use std::path::Path;

use diffusion_core::Tensor;

use crate::error::{io_err, CliError, Result};

/// `round(v * 255)` with halves rounded up.
pub fn to_byte(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor() as u8
}

/// Encodes a `(3, H, W)` image with values in `[0, 1]`.
pub fn encode(pixels: &Tensor) -> Result<Vec<u8>> {
    let shape = pixels.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(CliError::Image(format!("expected (3, H, W) pixels, got {shape:?}")));
    }
    if let Some(bad) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(CliError::Image(format!("pixel value {bad} outside [0, 1]")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let d = pixels.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push(to_byte(d[c * h * w + i]));
        }
    }
    Ok(out)
}

pub fn write(pixels: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode(pixels)?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixel(v: [f64; 3]) -> Tensor {
        Tensor::new(vec![3, 1, 1], v.to_vec()).unwrap()
    }

    #[test]
    fn single_pixels() {
        assert_eq!(encode(&pixel([1.0; 3])).unwrap(), b"P6\n1 1\n255\n\xff\xff\xff");
        assert_eq!(&encode(&pixel([0.0; 3])).unwrap()[11..], &[0, 0, 0]);
        assert_eq!(&encode(&pixel([0.5, 0.2, 0.8])).unwrap()[11..], &[128, 51, 204]);
    }

    #[test]
    fn interleaves_channels_row_major() {
        let t = Tensor::new(vec![3, 1, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(encode(&t).unwrap(), b"P6\n2 1\n255\n\xff\x00\x00\x00\xff\x00");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(encode(&Tensor::zeros(&[1, 2, 2])).is_err());
        assert!(encode(&pixel([1.5, 0.0, 0.0])).is_err());
        assert!(encode(&pixel([f64::NAN, 0.0, 0.0])).is_err());
    }
}
