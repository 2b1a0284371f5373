//! Object counting on generated images by color segmentation.

use crate::data::{Color, ShapeKind};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Components smaller than this many pixels are treated as noise.
pub const MIN_AREA: usize = 4;

/// A pixel joins a palette class only when it lies within this Euclidean
/// distance of the class color. Palette colors are at least 2 apart.
pub const COLOR_CUTOFF: f32 = 1.0;

const BLACK: [f32; 3] = [-1.0, -1.0, -1.0];

/// Index into `Color::ALL` of the nearest palette entry, or `None` for the
/// background or for pixels too far from every entry.
fn classify(rgb: [f32; 3]) -> Option<usize> {
    let dist = |c: [f32; 3]| {
        c.iter()
            .zip(rgb)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            .sqrt()
    };
    let mut best = (dist(BLACK), None);
    for (i, c) in Color::ALL.iter().enumerate() {
        let d = dist(c.rgb());
        if d < best.0 {
            best = (d, Some(i));
        }
    }
    if best.0 <= COLOR_CUTOFF {
        best.1
    } else {
        None
    }
}

/// Boolean mask of pixels classified as `color`, row-major `[S, S]`.
pub fn color_mask(image: &Tensor<f32>, color: Color) -> Result<Vec<bool>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Argument(format!(
            "expected a [3, S, S] image, got {:?}",
            image.shape()
        )));
    };
    if c != 3 {
        return Err(Error::Argument(format!("expected 3 channels, got {c}")));
    }
    let target = Color::ALL.iter().position(|&k| k == color);
    let d = image.data();
    let plane = h * w;
    Ok((0..plane)
        .map(|i| classify([d[i], d[plane + i], d[2 * plane + i]]) == target)
        .collect())
}

/// Sizes of the 4-connected components of `mask`.
pub fn component_areas(mask: &[bool], rows: usize, cols: usize) -> Vec<usize> {
    let mut seen = vec![false; mask.len()];
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut area = 0;
        while let Some(p) = stack.pop() {
            area += 1;
            let (r, c) = (p / cols, p % cols);
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - cols);
            }
            if r + 1 < rows {
                visit(p + cols);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < cols {
                visit(p + 1);
            }
        }
        areas.push(area);
    }
    areas
}

/// Number of objects of the target color in a `[3, S, S]` image: pixels
/// are snapped to the nearest palette color, then 4-connected components
/// of at least [`MIN_AREA`] pixels are counted. Scenes hold a single
/// object kind, so the shape in `target` is not inspected.
pub fn count_shapes(image: &Tensor<f32>, target: (ShapeKind, Color)) -> Result<usize> {
    let mask = color_mask(image, target.1)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    Ok(component_areas(&mask, h, w)
        .into_iter()
        .filter(|&a| a >= MIN_AREA)
        .count())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_are_four_connected() {
        // diagonal neighbours stay separate
        let mask = [
            true, false, false, //
            false, true, false, //
            false, true, true,
        ];
        let mut a = component_areas(&mask, 3, 3);
        a.sort();
        assert_eq!(a, vec![1, 3]);
    }

    #[test]
    fn off_palette_pixels_are_ignored() {
        assert_eq!(classify([1.0, -1.0, -1.0]), Some(0));
        assert_eq!(classify([0.8, -0.7, -0.9]), Some(0));
        assert_eq!(classify([0.0, 0.0, 0.0]), None);
        assert_eq!(classify([-1.0, -1.0, -1.0]), None);
    }

    #[test]
    fn small_specks_are_not_counted() {
        let mut img = Tensor::full(&[3, 6, 6], -1.0f32);
        let plane = 36;
        // one 2x2 green square and one green pixel
        for &p in &[0usize, 1, 6, 7, 35] {
            img.data_mut()[plane + p] = 1.0;
        }
        assert_eq!(count_shapes(&img, (ShapeKind::Square, Color::Green)).unwrap(), 1);
        assert_eq!(count_shapes(&img, (ShapeKind::Square, Color::Red)).unwrap(), 0);
    }
}
