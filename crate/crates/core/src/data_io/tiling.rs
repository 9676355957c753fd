//! Sliding-window tiling and mean-logit stitching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

fn default_window() -> usize {
    256
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileSpec {
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_window")]
    pub stride: usize,
    /// Fill for the part of a window that lies beyond an image smaller than
    /// the window.
    #[serde(default)]
    pub pad_value: f64,
}

impl Default for TileSpec {
    fn default() -> Self {
        TileSpec { window: default_window(), stride: default_window(), pad_value: 0.0 }
    }
}

impl TileSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 || self.stride > self.window {
            return Err(Error::Config(format!(
                "tiling needs 1 <= stride <= window, got stride {} window {}",
                self.stride, self.window
            )));
        }
        Ok(())
    }
}

/// Window origins along one axis of length `len`. Origins step by `stride`
/// and the last one is pulled back to `len - window` so no window leaves the
/// image. An axis shorter than the window gets the single origin 0.
pub fn tile_anchors(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let last = len - window;
    let mut out = Vec::new();
    let mut a = 0;
    loop {
        out.push(a.min(last));
        if a + window >= len {
            return out;
        }
        a += stride;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile<T: Float> {
    /// `[C, window, window]`
    pub data: Tensor<T>,
    pub row0: usize,
    pub col0: usize,
}

pub fn tile_image<T: Float>(img: &Tensor<T>, spec: &TileSpec) -> Result<Vec<Tile<T>>> {
    spec.validate()?;
    let [c, h, w] = img.dims3()?;
    let win = spec.window;
    let pad = T::from_f64(spec.pad_value);
    let mut tiles = Vec::new();
    for &r0 in &tile_anchors(h, win, spec.stride) {
        for &c0 in &tile_anchors(w, win, spec.stride) {
            let mut data = vec![pad; c * win * win];
            for ch in 0..c {
                for i in 0..win.min(h - r0) {
                    let src = &img.data()[(ch * h + r0 + i) * w + c0..][..win.min(w - c0)];
                    data[(ch * win + i) * win..][..src.len()].copy_from_slice(src);
                }
            }
            tiles.push(Tile { data: Tensor::from_vec(&[c, win, win], data)?, row0: r0, col0: c0 });
        }
    }
    Ok(tiles)
}

/// Average per-tile logits `[K, win, win]` onto an `[K, H, W]` canvas.
/// Tile pixels falling outside the canvas are dropped.
pub fn stitch_predictions<T: Float>(tiles: &[Tile<T>], h: usize, w: usize, k: usize) -> Result<Tensor<T>> {
    let mut sum = vec![T::zero(); k * h * w];
    let mut cover = vec![0u32; h * w];
    for t in tiles {
        let [tk, th, tw] = t.data.dims3()?;
        if tk != k {
            return Err(Error::shape(format!("tile has {tk} channels, canvas has {k}")));
        }
        for i in 0..th.min(h.saturating_sub(t.row0)) {
            for j in 0..tw.min(w.saturating_sub(t.col0)) {
                let p = (t.row0 + i) * w + t.col0 + j;
                cover[p] += 1;
                for ch in 0..k {
                    sum[ch * h * w + p] += t.data.data()[(ch * th + i) * tw + j];
                }
            }
        }
    }
    if let Some(p) = cover.iter().position(|&n| n == 0) {
        return Err(Error::Coverage { row: p / w, col: p % w });
    }
    for ch in 0..k {
        for (p, &n) in cover.iter().enumerate() {
            sum[ch * h * w + p] /= T::from_f64(n as f64);
        }
    }
    Tensor::from_vec(&[k, h, w], sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn spec(window: usize, stride: usize) -> TileSpec {
        TileSpec { window, stride, pad_value: 0.0 }
    }

    #[test]
    fn anchors() {
        assert_eq!(tile_anchors(256, 256, 256), vec![0]);
        assert_eq!(tile_anchors(512, 256, 256), vec![0, 256]);
        assert_eq!(tile_anchors(300, 256, 256), vec![0, 44]);
        assert_eq!(tile_anchors(300, 256, 128), vec![0, 44]);
        assert_eq!(tile_anchors(10, 4, 3), vec![0, 3, 6]);
        assert_eq!(tile_anchors(3, 8, 8), vec![0]);
    }

    #[test]
    fn clamped_tiles_on_300() {
        let img = Tensor::<f32>::create(&[1, 300, 300], Fill::Uniform { lo: 0.0, hi: 1.0, seed: 1 }).unwrap();
        let tiles = tile_image(&img, &spec(256, 256)).unwrap();
        let anchors: Vec<_> = tiles.iter().map(|t| (t.row0, t.col0)).collect();
        assert_eq!(anchors, vec![(0, 0), (0, 44), (44, 0), (44, 44)]);
        let last = &tiles[3];
        assert_eq!(last.data.data()[0], img.data()[44 * 300 + 44]);
        assert_eq!(*last.data.data().last().unwrap(), *img.data().last().unwrap());
    }

    #[test]
    fn tile_counts() {
        let img = Tensor::<f32>::zeros(&[3, 512, 512]);
        assert_eq!(tile_image(&img, &spec(256, 256)).unwrap().len(), 4);
        let img = Tensor::<f32>::zeros(&[3, 256, 256]);
        assert_eq!(tile_image(&img, &spec(256, 256)).unwrap().len(), 1);
        assert!(matches!(tile_image(&img, &spec(256, 300)), Err(Error::Config(_))));
    }

    #[test]
    fn undersized_images_are_padded() {
        let img = Tensor::<f64>::filled(&[1, 2, 3], 5.0);
        let tiles = tile_image(&img, &TileSpec { window: 4, stride: 4, pad_value: -1.0 }).unwrap();
        assert_eq!(tiles.len(), 1);
        let d = tiles[0].data.data();
        assert_eq!(&d[..4], &[5.0, 5.0, 5.0, -1.0]);
        assert!(d[8..].iter().all(|&v| v == -1.0));
        let back = stitch_predictions(&tiles, 2, 3, 1).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn stitch_identity_and_overlap_mean() {
        let logits = Tensor::<f32>::create(&[3, 8, 8], Fill::Normal { mean: 0.0, std: 1.0, seed: 2 }).unwrap();
        let one = vec![Tile { data: logits.clone(), row0: 0, col0: 0 }];
        assert_eq!(stitch_predictions(&one, 8, 8, 3).unwrap(), logits);

        let patch = Tensor::<f64>::filled(&[1, 4, 4], 2.0);
        let two = vec![
            Tile { data: patch.clone(), row0: 0, col0: 0 },
            Tile { data: patch, row0: 0, col0: 2 },
        ];
        let s = stitch_predictions(&two, 4, 6, 1).unwrap();
        assert!(s.data().iter().all(|&v| v == 2.0));

        let gap = vec![Tile { data: Tensor::<f64>::zeros(&[1, 2, 2]), row0: 0, col0: 0 }];
        assert!(matches!(stitch_predictions(&gap, 2, 3, 1), Err(Error::Coverage { row: 0, col: 2 })));
    }

    #[test]
    fn full_coverage_on_300_with_overlapping_stride() {
        for stride in [256, 100, 37] {
            let img = Tensor::<f32>::zeros(&[1, 300, 300]);
            let tiles: Vec<Tile<f32>> = tile_image(&img, &spec(256, stride))
                .unwrap()
                .into_iter()
                .map(|t| Tile { data: Tensor::filled(&[1, 256, 256], 1.0), ..t })
                .collect();
            assert!(stitch_predictions(&tiles, 300, 300, 1).is_ok());
        }
    }
}
