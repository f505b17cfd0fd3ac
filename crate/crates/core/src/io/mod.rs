//! Weight files, PPM/PGM images and TOML configuration.

mod config;
mod palette;
mod pnm;
mod weights;

pub use config::ConfigFile;
pub use palette::{colorize, gray_to_rgb, PALETTE};
pub use pnm::{read_ppm, reflect_pad, write_pgm, write_ppm, Image};
pub use weights::{load_weights, save_weights, NamedTensor, WeightFile, MAGIC, VERSION};
