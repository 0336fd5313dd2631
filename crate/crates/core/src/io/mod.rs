//! File formats: binary PPM images and the named-tensor checkpoint container.

pub mod checkpoint;
pub mod ppm;

pub use checkpoint::{load_model, save_model, Checkpoint, TensorRecord};
pub use ppm::{decode_ppm, encode_ppm, read_image, write_image};
