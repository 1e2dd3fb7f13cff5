//! Whole-disk helpers: building a formatted image and mounting the
//! filesystem of one partition.

use chrono::NaiveDateTime;
use log::warn;
use thiserror::Error;

use crate::blockdev::{BlockDevice, BlockError};
use crate::fat32::format::default_sectors_per_cluster;
use crate::fat32::{
    format_volume_with, Clock, Fat32BootSector, FatError, FatFs, FormatOptions, SystemClock,
};
use crate::mbr::{
    open_partition, partition_type, serialize_mbr, MbrError, PartitionTableEntry, PartitionView,
};

/// First sector of the partition created by [`build_image`].
pub const PARTITION_START: u32 = 2048;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("mbr: {0}")]
    Mbr(#[from] MbrError),
    #[error("fat32: {0}")]
    Fat(#[from] FatError),
}

impl From<BlockError> for VolumeError {
    fn from(e: BlockError) -> Self {
        VolumeError::Fat(FatError::Io(e))
    }
}

#[derive(Debug, Clone)]
pub struct ImageOptions {
    pub label: String,
    /// Picked from the volume size when absent.
    pub sectors_per_cluster: Option<u8>,
    /// Put the volume in a single FAT32 partition at LBA 2048.
    pub mbr: bool,
    pub volume_id: u32,
    pub timestamp: Option<NaiveDateTime>,
}

impl ImageOptions {
    pub fn new(label: &str) -> Self {
        ImageOptions {
            label: label.to_string(),
            sectors_per_cluster: None,
            mbr: false,
            volume_id: 0x1234_5678,
            timestamp: None,
        }
    }
}

/// Formats `dev`, optionally behind a partition table. Returns the
/// partition entry written, if any.
pub fn build_image<D: BlockDevice>(
    dev: &mut D,
    opts: &ImageOptions,
) -> Result<Option<PartitionTableEntry>, VolumeError> {
    let entry = if opts.mbr {
        let blocks = dev.block_count();
        if blocks <= PARTITION_START as u64 {
            return Err(FatError::TooSmall(dev.capacity()).into());
        }
        let count = (blocks - PARTITION_START as u64).min(u32::MAX as u64) as u32;
        let entry = PartitionTableEntry::new(partition_type::FAT32_LBA, PARTITION_START, count);
        let table = serialize_mbr(&[entry])?;
        dev.write_at(0, &table)?;
        Some(entry)
    } else {
        None
    };
    let mut view = match &entry {
        Some(e) => PartitionView::for_entry(&mut *dev, e)?,
        None => PartitionView::whole(&mut *dev),
    };
    let spc = opts
        .sectors_per_cluster
        .unwrap_or_else(|| default_sectors_per_cluster(view.capacity()));
    let format = FormatOptions {
        label: opts.label.clone(),
        sectors_per_cluster: spc,
        volume_id: opts.volume_id,
        hidden_sectors: entry.map_or(0, |e| e.first_lba),
        timestamp: opts.timestamp,
    };
    format_volume_with(&mut view, &format)?;
    Ok(entry)
}

/// Mounts the FAT32 filesystem of partition `index` (0 for a volume
/// without a partition table).
pub fn mount_partition<D: BlockDevice>(
    dev: D,
    index: usize,
) -> Result<(FatFs<PartitionView<D>>, Option<PartitionTableEntry>), VolumeError> {
    mount_partition_with(dev, index, Box::new(SystemClock))
}

pub fn mount_partition_with<D: BlockDevice>(
    dev: D,
    index: usize,
    clock: Box<dyn Clock>,
) -> Result<(FatFs<PartitionView<D>>, Option<PartitionTableEntry>), VolumeError> {
    let (mut view, entry) = open_partition(dev, index)?;
    if let Some(e) = &entry {
        let mut sector = vec![0u8; view.block_size() as usize];
        view.read_blocks(0, &mut sector)?;
        if let Ok(boot) = Fat32BootSector::parse(&sector) {
            let fs_blocks =
                boot.total_sectors as u64 * boot.bytes_per_sector() / view.block_size() as u64;
            if fs_blocks != e.sector_count as u64 {
                warn!(
                    "fat32: filesystem spans {} sectors, partition entry {}",
                    fs_blocks, e.sector_count
                );
                let parent_blocks = view.parent().block_count();
                if e.first_lba as u64 + fs_blocks <= parent_blocks {
                    view = PartitionView::new(view.into_parent(), e.first_lba as u64, fs_blocks)?;
                }
            }
        }
    }
    Ok((FatFs::with_clock(view, clock)?, entry))
}
