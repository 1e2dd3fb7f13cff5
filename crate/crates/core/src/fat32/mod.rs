//! Read/write FAT32.
//!
//! [`FatFs`] mounts a volume on any [`BlockDevice`](crate::blockdev::BlockDevice)
//! and exposes a path-addressed tree of [`FatNode`]s. The on-disk codecs
//! ([`boot`], [`dirent`]) and the allocation table ([`table`]) are usable on
//! their own; [`check`] validates a mounted volume.

pub mod boot;
pub mod check;
pub mod dirent;
pub mod format;
mod fs;
pub mod table;

use thiserror::Error;

use crate::blockdev::BlockError;

pub use boot::{Fat32BootSector, FsInfo};
pub use check::{check_volume, CheckReport};
pub use dirent::{
    decode_datetime, encode_datetime, generate_short_name, parse_directory,
    serialize_directory_entry, short_name_checksum, DirectoryEntry, ParsedEntry,
};
pub use format::{format_volume, format_volume_with, FormatOptions};
pub use fs::{Clock, FatFs, FatNode, FixedClock, NodeKind, SystemClock};
pub use table::{ClusterChain, Fat, FatEntry};

/// Largest file size a directory entry can describe.
pub const MAX_FILE_SIZE: u64 = u32::MAX as u64;

pub mod attr {
    pub const READ_ONLY: u8 = 0x01;
    pub const HIDDEN: u8 = 0x02;
    pub const SYSTEM: u8 = 0x04;
    pub const VOLUME_ID: u8 = 0x08;
    pub const DIRECTORY: u8 = 0x10;
    pub const ARCHIVE: u8 = 0x20;
    pub const LONG_NAME: u8 = READ_ONLY | HIDDEN | SYSTEM | VOLUME_ID;
}

#[derive(Debug, Error)]
pub enum FatError {
    #[error("not a FAT32 volume: {0}")]
    NotFat32(String),
    #[error("corrupt cluster chain: {0}")]
    CorruptChain(String),
    #[error("no space left on volume")]
    NoSpace,
    #[error("file size {0} exceeds the 4 GiB - 1 limit")]
    FileTooLarge(u64),
    #[error("{0}: no such file or directory")]
    NotFound(String),
    #[error("{0}: already exists")]
    AlreadyExists(String),
    #[error("{0}: not a directory")]
    NotADirectory(String),
    #[error("{0}: is a directory")]
    IsADirectory(String),
    #[error("{0}: directory not empty")]
    DirectoryNotEmpty(String),
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("name of {0} characters exceeds 255")]
    NameTooLong(usize),
    #[error("cannot move a directory into itself or a descendant")]
    Cycle,
    #[error("the root directory cannot be {0}")]
    Root(&'static str),
    #[error("range {offset}+{len} lies outside a {size}-byte file")]
    OutOfRange { offset: u64, len: u64, size: u64 },
    #[error("year {0} outside 1980..=2107")]
    DateRange(i32),
    #[error("no free numeric tail for short name {0}")]
    ShortNameExhausted(String),
    #[error("device of {0} bytes is too small")]
    TooSmall(u64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] BlockError),
}

pub type Result<T, E = FatError> = std::result::Result<T, E>;
