//! Color-coded label maps as binary PPM.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// ISPRS-style colors for the first six classes (impervious surface,
/// building, low vegetation, tree, car, clutter). Further classes get
/// distinct mid-range colors.
pub fn default_palette(k: usize) -> Vec<[u8; 3]> {
    const BASE: [[u8; 3]; 6] = [
        [255, 255, 255],
        [0, 0, 255],
        [0, 255, 255],
        [0, 255, 0],
        [255, 255, 0],
        [255, 0, 0],
    ];
    (0..k)
        .map(|i| match BASE.get(i) {
            Some(&c) => c,
            None => [
                (i & 7) as u8 * 32 + 16,
                ((i >> 3) & 7) as u8 * 32 + 16,
                ((i >> 6) & 3) as u8 * 64 + 32,
            ],
        })
        .collect()
}

pub fn encode_ppm(labels: &Tensor<u8>, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    let [h, w] = labels.dims2()?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for &l in labels.data() {
        let colour = palette
            .get(l as usize)
            .ok_or_else(|| Error::Label(format!("label {l} has no palette entry ({} colors)", palette.len())))?;
        out.extend_from_slice(colour);
    }
    Ok(out)
}

pub fn export_ppm(labels: &Tensor<u8>, palette: &[[u8; 3]], path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_ppm(labels, palette)?;
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
