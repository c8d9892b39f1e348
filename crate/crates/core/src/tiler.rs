//! Non-overlapping square tiling with reflect padding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Shape};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayout {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl TileLayout {
    pub fn new(shape: Shape, patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::param("patch size must be positive"));
        }
        if shape.is_empty() {
            return Err(Error::shape("cannot tile an empty image"));
        }
        let rows = shape.height.div_ceil(patch);
        let cols = shape.width.div_ceil(patch);
        Ok(Self {
            height: shape.height,
            width: shape.width,
            channels: shape.channels,
            patch,
            rows,
            cols,
            pad_bottom: rows * patch - shape.height,
            pad_right: cols * patch - shape.width,
        })
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch_shape(&self) -> Shape {
        Shape::new(self.patch, self.patch, self.channels)
    }
}

/// Pads by reflection to multiples of `patch` and cuts row-major tiles.
pub fn split_patches<T: Scalar>(
    image: &ImageTensor<T>,
    patch: usize,
) -> Result<(Vec<ImageTensor<T>>, TileLayout)> {
    let layout = TileLayout::new(image.shape(), patch)?;
    let mut out = Vec::with_capacity(layout.count());
    for r in 0..layout.rows {
        for c in 0..layout.cols {
            out.push(image.crop_reflect((r * patch) as isize, (c * patch) as isize, patch, patch));
        }
    }
    Ok((out, layout))
}

/// Reassembles tiles and crops the padding.
pub fn merge_patches<T: Scalar>(patches: &[ImageTensor<T>], layout: &TileLayout) -> Result<ImageTensor<T>> {
    if patches.len() != layout.count() {
        return Err(Error::shape(format!(
            "expected {} patches, got {}",
            layout.count(),
            patches.len()
        )));
    }
    if let Some(bad) = patches.iter().find(|p| p.shape() != layout.patch_shape()) {
        return Err(Error::shape(format!(
            "patch {} does not match layout {}",
            bad.shape(),
            layout.patch_shape()
        )));
    }
    let shape = Shape::new(layout.height, layout.width, layout.channels);
    let p = layout.patch;
    let mut out = ImageTensor::zeros(shape);
    for c in 0..layout.channels {
        let dst = out.channel_mut(c);
        for y in 0..layout.height {
            let (r, py) = (y / p, y % p);
            for col in 0..layout.cols {
                let x0 = col * p;
                let w = p.min(layout.width - x0);
                let src = &patches[r * layout.cols + col].channel(c)[py * p..py * p + w];
                dst[y * layout.width + x0..y * layout.width + x0 + w].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageTensor<f32> {
        ImageTensor::from_fn(Shape::new(h, w, 3), |c, y, x| (c * 100_000 + y * 1000 + x) as f32)
    }

    #[test]
    fn layout_examples() {
        let (p, l) = split_patches(&ramp(512, 512), 256).unwrap();
        assert_eq!((p.len(), l.pad_bottom, l.pad_right), (4, 0, 0));
        let (p, l) = split_patches(&ramp(300, 300), 256).unwrap();
        assert_eq!((p.len(), l.pad_bottom, l.pad_right), (4, 212, 212));
        let img = ramp(256, 256);
        let (p, _) = split_patches(&img, 256).unwrap();
        assert_eq!(p, vec![img]);
    }

    #[test]
    fn round_trip_with_padding() {
        let img = ramp(300, 300);
        let (p, l) = split_patches(&img, 256).unwrap();
        assert_eq!(merge_patches(&p, &l).unwrap(), img);
        // padding reflects the last row
        assert_eq!(p[2].get(0, 300 - 256, 5), img.get(0, 299, 5));
    }

    #[test]
    fn merge_validates() {
        let img = ramp(10, 10);
        let (mut p, l) = split_patches(&img, 4).unwrap();
        assert!(merge_patches(&p[1..], &l).is_err());
        p[0] = ImageTensor::zeros(Shape::new(3, 4, 3));
        assert!(merge_patches(&p, &l).is_err());
        assert!(split_patches(&img, 0).is_err());
    }
}
