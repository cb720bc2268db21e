//! Serialization: checkpoint archives, pose arrays, images.

pub mod archive;
pub mod npy;
pub mod png;

pub use archive::{Archive, ArrayEntry, ARCHIVE_VERSION};
