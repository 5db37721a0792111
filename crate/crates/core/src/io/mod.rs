//! On-disk formats: VTF tensors, PGM/PPM frame directories and run configs.

pub mod config;
pub mod pnm;
pub mod vtf;

pub use config::RunConfig;
pub use pnm::{read_frame_dir, write_frame_dir};
pub use vtf::{read_vtf, write_vtf};
