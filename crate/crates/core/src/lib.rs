//! A hardware-independent USB mass-storage stack.
//!
//! Layers, bottom up:
//!
//! - [`blockdev`]: block-addressed media (memory, sparse memory, image files).
//! - [`transport`]: the bulk pipe contract and an in-memory loopback.
//! - [`scsi`]: bulk-only transport framing, the SCSI host driver and an
//!   emulated target.
//! - [`mbr`]: partition tables and per-partition views.
//! - [`fat32`]: the filesystem.

pub mod blockdev;
pub mod fat32;
pub mod image;
pub mod mbr;
pub mod scsi;
pub mod selftest;
pub mod transport;
