//! Files, tiling, synthetic data and image export.

mod checkpoint;
mod dataset;
mod ppm;
mod synth;
mod tensor_file;
mod tiling;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CONFIG_ENTRY};
pub use dataset::{Dataset, Sample, Split, IMAGES_DIR, LABELS_DIR, MANIFEST};
pub use ppm::{default_palette, encode_ppm, export_ppm};
pub use synth::{synth_generate, ShapeKind, SyntheticSpec};
pub use tensor_file::{decode_any, decode_tensor, encode_tensor, read_tensor, write_tensor, AnyTensor, MAGIC, VERSION};
pub use tiling::{stitch_predictions, tile_anchors, tile_image, Tile, TileSpec};
