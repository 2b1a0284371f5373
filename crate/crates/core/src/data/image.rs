//! Netpbm export for eyeballing samples and attention maps.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Binary PPM (P6) of a `[3, H, W]` image in `[-1, 1]`.
pub fn ppm_bytes(pixels: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = pixels.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("ppm export", s, &[3]));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = pixels.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(to_byte(d[(c * h + y) * w + x]));
            }
        }
    }
    Ok(out)
}

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Binary PGM (P5) of a row-major `rows x cols` matrix, scaled so the
/// largest value maps to white.
pub fn pgm_bytes(values: &[f64], rows: usize, cols: usize) -> Result<Vec<u8>> {
    if values.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::dim("pgm export", &[values.len()], &[rows, cols]));
    }
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.max(0.0) * scale).round().min(255.0) as u8));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_extremes() {
        let img = Tensor::from_fn(&[3, 2, 2], |i| if i < 4 { 1.0 } else { -1.0 });
        let b = ppm_bytes(&img).unwrap();
        assert!(b.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(&b[11..14], &[255, 0, 0]);
    }

    #[test]
    fn pgm_dimensions() {
        let b = pgm_bytes(&[0.0, 0.5, 1.0, 0.25, 0.0, 0.0], 2, 3).unwrap();
        assert!(b.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(b.len(), 11 + 6);
        assert_eq!(b[13], 255);
    }
}
