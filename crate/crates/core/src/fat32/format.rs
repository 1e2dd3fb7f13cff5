//! Creating an empty FAT32 volume.

use chrono::NaiveDateTime;
use log::info;

use super::boot::{self, Fat32BootSector, FsInfo};
use super::dirent::{encode_datetime, DirectoryEntry};
use super::table::END_OF_CHAIN;
use super::{attr, FatError, Result};
use crate::blockdev::BlockDevice;

pub const MIN_VOLUME_BYTES: u64 = 1 << 20;
const RESERVED_SECTORS: u16 = 32;
const NUM_FATS: u8 = 2;
const MEDIA_FIXED: u8 = 0xf8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatOptions {
    /// Up to 11 characters; empty means no label.
    pub label: String,
    pub sectors_per_cluster: u8,
    pub volume_id: u32,
    /// Sectors preceding the volume on its disk (the partition start).
    pub hidden_sectors: u32,
    /// Timestamp of the root label entry; none leaves it zero.
    pub timestamp: Option<NaiveDateTime>,
}

impl FormatOptions {
    pub fn new(label: &str, sectors_per_cluster: u8) -> Self {
        FormatOptions {
            label: label.to_string(),
            sectors_per_cluster,
            volume_id: 0x1234_5678,
            hidden_sectors: 0,
            timestamp: None,
        }
    }
}

/// Cluster size commonly picked for a volume of `bytes`.
pub fn default_sectors_per_cluster(bytes: u64) -> u8 {
    const MIB: u64 = 1 << 20;
    match bytes {
        b if b <= 260 * MIB => 1,
        b if b <= 8192 * MIB => 8,
        b if b <= 16384 * MIB => 16,
        b if b <= 32768 * MIB => 32,
        _ => 64,
    }
}

/// Validates and pads a volume label to its 11-byte stored form.
pub fn label_bytes(label: &str) -> Result<[u8; 11]> {
    if label.is_empty() {
        return Ok(boot::NO_LABEL);
    }
    let upper = label.to_ascii_uppercase();
    let ok = upper.len() <= 11
        && !upper.starts_with(' ')
        && upper.bytes().all(|c| {
            c == b' '
                || c.is_ascii_uppercase()
                || c.is_ascii_digit()
                || b"$%'-_@~`!(){}^#&".contains(&c)
        });
    if !ok {
        return Err(FatError::InvalidName(label.to_string()));
    }
    let mut out = [b' '; 11];
    out[..upper.len()].copy_from_slice(upper.as_bytes());
    Ok(out)
}

pub fn format_volume<D: BlockDevice + ?Sized>(
    dev: &mut D,
    label: &str,
    sectors_per_cluster: u8,
) -> Result<()> {
    format_volume_with(dev, &FormatOptions::new(label, sectors_per_cluster))
}

/// Writes boot sectors, FSInfo, both FATs and an empty root directory.
/// Only the metadata regions are overwritten.
pub fn format_volume_with<D: BlockDevice + ?Sized>(
    dev: &mut D,
    opts: &FormatOptions,
) -> Result<()> {
    let bps = dev.block_size();
    if !matches!(bps, 512 | 1024 | 2048 | 4096) {
        return Err(FatError::InvalidArgument(format!("{bps}-byte sectors")));
    }
    let spc = opts.sectors_per_cluster;
    if spc == 0 || !spc.is_power_of_two() {
        return Err(FatError::InvalidArgument(format!(
            "{spc} sectors per cluster"
        )));
    }
    let capacity = dev.capacity();
    if capacity < MIN_VOLUME_BYTES {
        return Err(FatError::TooSmall(capacity));
    }
    let label = label_bytes(&opts.label)?;
    let total = dev.block_count().min(u32::MAX as u64) as u32;

    let reserved = RESERVED_SECTORS as u64;
    let clusters_with = |fat_size: u64| {
        let data = (total as u64).saturating_sub(reserved + NUM_FATS as u64 * fat_size);
        (data / spc as u64).min(0x0fff_fff5)
    };
    let covers = |fat_size: u64| fat_size * bps as u64 / 4 >= clusters_with(fat_size) + 2;
    // Upper bound from the cluster count with no FAT at all, then shrink.
    let mut fat_size = ((clusters_with(0) + 2) * 4).div_ceil(bps as u64).max(1);
    while fat_size > 1 && covers(fat_size - 1) {
        fat_size -= 1;
    }
    let clusters = clusters_with(fat_size);
    if clusters < 2 {
        return Err(FatError::TooSmall(capacity));
    }

    let boot = Fat32BootSector {
        oem_name: *b"UMSTK1.0",
        bytes_per_sector: bps as u16,
        sectors_per_cluster: spc,
        reserved_sector_count: RESERVED_SECTORS,
        num_fats: NUM_FATS,
        media: MEDIA_FIXED,
        sectors_per_track: 63,
        num_heads: 255,
        hidden_sectors: opts.hidden_sectors,
        total_sectors: total,
        fat_size_sectors: fat_size as u32,
        ext_flags: 0,
        root_cluster: 2,
        fsinfo_sector: 1,
        backup_boot_sector: 6,
        volume_id: opts.volume_id,
        volume_label: label,
    };
    let bps = bps as u64;

    let zero = vec![0u8; 64 * 1024];
    let zero_range = |dev: &mut D, mut at: u64, mut len: u64| -> Result<()> {
        while len > 0 {
            let n = len.min(zero.len() as u64);
            dev.write_at(at, &zero[..n as usize])?;
            at += n;
            len -= n;
        }
        Ok(())
    };
    zero_range(dev, 0, (reserved + NUM_FATS as u64 * fat_size) * bps)?;
    zero_range(dev, boot.cluster_to_byte_offset(2)?, boot.cluster_size())?;

    let sector = boot.to_bytes();
    dev.write_at(0, &sector)?;
    dev.write_at(boot.backup_boot_sector as u64 * bps, &sector)?;

    let mut head = Vec::with_capacity(12);
    for v in [0x0fff_ff00 | MEDIA_FIXED as u32, END_OF_CHAIN, END_OF_CHAIN] {
        head.extend_from_slice(&v.to_le_bytes());
    }
    for copy in 0..NUM_FATS as u64 {
        dev.write_at((reserved + copy * fat_size) * bps, &head)?;
    }

    let info = FsInfo {
        free_count: clusters as u32 - 1,
        next_free: 2,
    };
    boot::write_fsinfo(dev, &boot, &info)?;

    if label != boot::NO_LABEL {
        let (date, time, _) = match &opts.timestamp {
            Some(t) => encode_datetime(t)?,
            None => (0, 0, 0),
        };
        let entry = DirectoryEntry {
            name: label,
            attributes: attr::VOLUME_ID,
            write_date: date,
            write_time: time,
            ..Default::default()
        };
        dev.write_at(boot.cluster_to_byte_offset(2)?, &entry.to_bytes())?;
    }
    dev.flush()?;
    info!(
        "fat32: formatted {} clusters of {} bytes, FAT of {} sectors",
        clusters,
        boot.cluster_size(),
        fat_size
    );
    Ok(())
}
