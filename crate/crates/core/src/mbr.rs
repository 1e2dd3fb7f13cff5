//! Master boot record partition tables.
//!
//! Sector 0 holds four 16-byte entries at byte 446 and the 55h AAh
//! signature at 510. Extended partitions (types 05h and 0Fh) start a chain of
//! extended boot records, each holding one logical partition and an optional
//! link to the next record. Logical entries are relative to their own EBR;
//! link entries are relative to the start of the outer extended partition.

use std::collections::HashSet;

use log::warn;
use thiserror::Error;

use crate::blockdev::{check_block_range, check_byte_range, BlockDevice, BlockError};

pub const SECTOR_LEN: usize = 512;
pub const TABLE_OFFSET: usize = 446;
pub const ENTRY_LEN: usize = 16;
pub const SIGNATURE: [u8; 2] = [0x55, 0xaa];
pub const BOOTABLE: u8 = 0x80;

pub mod partition_type {
    pub const EMPTY: u8 = 0x00;
    pub const FAT12: u8 = 0x01;
    pub const FAT16_SMALL: u8 = 0x04;
    pub const EXTENDED_CHS: u8 = 0x05;
    pub const FAT16: u8 = 0x06;
    pub const NTFS: u8 = 0x07;
    pub const FAT32_CHS: u8 = 0x0b;
    pub const FAT32_LBA: u8 = 0x0c;
    pub const FAT16_LBA: u8 = 0x0e;
    pub const EXTENDED_LBA: u8 = 0x0f;
    pub const LINUX_SWAP: u8 = 0x82;
    pub const LINUX: u8 = 0x83;
    pub const GPT_PROTECTIVE: u8 = 0xee;
    pub const EFI_SYSTEM: u8 = 0xef;
}

/// Types we accept as evidence that sector 0 really is a partition table.
const PLAUSIBLE_TYPES: &[u8] = &[
    partition_type::FAT12,
    partition_type::FAT16_SMALL,
    partition_type::EXTENDED_CHS,
    partition_type::FAT16,
    partition_type::NTFS,
    partition_type::FAT32_CHS,
    partition_type::FAT32_LBA,
    partition_type::FAT16_LBA,
    partition_type::EXTENDED_LBA,
    partition_type::LINUX_SWAP,
    partition_type::LINUX,
    partition_type::EFI_SYSTEM,
];

#[derive(Debug, Error)]
pub enum MbrError {
    #[error("a partition table holds at most 4 entries, got {0}")]
    TooManyEntries(usize),
    #[error("partition {0} has no sectors")]
    EmptyPartition(usize),
    #[error("partitions {0} and {1} overlap")]
    Overlap(usize, usize),
    #[error("malformed partition table: {0}")]
    Malformed(String),
    #[error("unsupported partitioning format: {0}")]
    UnsupportedFormat(&'static str),
    #[error("partition {index} does not exist")]
    NoSuchPartition { index: usize },
    #[error(transparent)]
    Io(#[from] BlockError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionTableEntry {
    pub bootable: bool,
    pub partition_type: u8,
    pub first_lba: u32,
    pub sector_count: u32,
}

impl PartitionTableEntry {
    pub fn new(partition_type: u8, first_lba: u32, sector_count: u32) -> Self {
        PartitionTableEntry {
            bootable: false,
            partition_type,
            first_lba,
            sector_count,
        }
    }

    pub fn is_extended(&self) -> bool {
        matches!(
            self.partition_type,
            partition_type::EXTENDED_CHS | partition_type::EXTENDED_LBA
        )
    }

    pub fn is_fat32(&self) -> bool {
        matches!(
            self.partition_type,
            partition_type::FAT32_CHS | partition_type::FAT32_LBA
        )
    }

    /// One past the last sector.
    pub fn end_lba(&self) -> u64 {
        self.first_lba as u64 + self.sector_count as u64
    }

    /// Decodes one slot; `None` for an unused (type 0) slot. CHS fields are
    /// ignored.
    pub fn parse(raw: &[u8]) -> Option<Self> {
        let raw = &raw[..ENTRY_LEN];
        if raw[4] == partition_type::EMPTY {
            return None;
        }
        Some(PartitionTableEntry {
            bootable: raw[0] == BOOTABLE,
            partition_type: raw[4],
            first_lba: u32::from_le_bytes(raw[8..12].try_into().unwrap()),
            sector_count: u32::from_le_bytes(raw[12..16].try_into().unwrap()),
        })
    }

    pub fn to_bytes(&self) -> [u8; ENTRY_LEN] {
        let mut b = [0u8; ENTRY_LEN];
        b[0] = if self.bootable { BOOTABLE } else { 0 };
        b[4] = self.partition_type;
        b[8..12].copy_from_slice(&self.first_lba.to_le_bytes());
        b[12..16].copy_from_slice(&self.sector_count.to_le_bytes());
        b
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MasterBootRecord {
    /// Used primary slots in table order.
    pub entries: Vec<PartitionTableEntry>,
    /// Logical partitions found by walking extended partitions, with
    /// absolute addresses.
    pub logical_entries: Vec<PartitionTableEntry>,
}

impl MasterBootRecord {
    /// Data partitions in the order volumes are numbered: primary entries
    /// (extended containers skipped), then logical ones.
    pub fn partitions(&self) -> Vec<PartitionTableEntry> {
        self.entries
            .iter()
            .filter(|e| !e.is_extended())
            .chain(self.logical_entries.iter())
            .copied()
            .collect()
    }
}

fn has_signature(sector: &[u8]) -> bool {
    sector.len() >= SECTOR_LEN && sector[510..512] == SIGNATURE
}

/// Decodes sector 0, or returns `None` when the boot signature is missing.
pub fn parse_mbr(sector: &[u8]) -> Option<MasterBootRecord> {
    if !has_signature(sector) {
        return None;
    }
    let entries = (0..4)
        .filter_map(|i| PartitionTableEntry::parse(&sector[TABLE_OFFSET + i * ENTRY_LEN..]))
        .collect();
    Some(MasterBootRecord {
        entries,
        logical_entries: Vec::new(),
    })
}

/// Packs up to four entries into a sector with a zeroed code area.
pub fn serialize_mbr(entries: &[PartitionTableEntry]) -> Result<[u8; SECTOR_LEN], MbrError> {
    if entries.len() > 4 {
        return Err(MbrError::TooManyEntries(entries.len()));
    }
    for (i, e) in entries.iter().enumerate() {
        if e.partition_type == partition_type::EMPTY || e.sector_count == 0 {
            return Err(MbrError::EmptyPartition(i));
        }
        for (j, other) in entries.iter().enumerate().take(i) {
            if (e.first_lba as u64) < other.end_lba() && (other.first_lba as u64) < e.end_lba() {
                return Err(MbrError::Overlap(j, i));
            }
        }
    }
    let mut sector = [0u8; SECTOR_LEN];
    for (i, e) in entries.iter().enumerate() {
        let at = TABLE_OFFSET + i * ENTRY_LEN;
        sector[at..at + ENTRY_LEN].copy_from_slice(&e.to_bytes());
    }
    sector[510..512].copy_from_slice(&SIGNATURE);
    Ok(sector)
}

fn read_sector<D: BlockDevice + ?Sized>(dev: &mut D, lba: u64) -> Result<Vec<u8>, MbrError> {
    let bs = dev.block_size() as u64;
    let mut sector = vec![0u8; SECTOR_LEN.max(bs as usize)];
    let len = sector.len();
    dev.read_at(lba * bs, &mut sector[..len])?;
    Ok(sector)
}

/// Walks the EBR chain of an extended partition.
pub fn follow_ebr_chain<D: BlockDevice + ?Sized>(
    dev: &mut D,
    extended: &PartitionTableEntry,
) -> Result<Vec<PartitionTableEntry>, MbrError> {
    if !extended.is_extended() {
        return Err(MbrError::Malformed(format!(
            "type {:#04x} is not an extended partition",
            extended.partition_type
        )));
    }
    let outer = extended.first_lba as u64;
    let mut visited = HashSet::new();
    let mut logical = Vec::new();
    let mut ebr = outer;
    loop {
        if !visited.insert(ebr) {
            return Err(MbrError::Malformed(format!(
                "EBR chain loops back to LBA {ebr}"
            )));
        }
        if ebr >= dev.block_count() {
            warn!("mbr: EBR link to LBA {ebr} lies beyond the device");
            break;
        }
        let sector = read_sector(dev, ebr)?;
        if !has_signature(&sector) {
            break;
        }
        if let Some(e) = PartitionTableEntry::parse(&sector[TABLE_OFFSET..]) {
            if !e.is_extended() {
                let abs = ebr + e.first_lba as u64;
                let first_lba = u32::try_from(abs).map_err(|_| {
                    MbrError::Malformed(format!("logical partition at LBA {abs} exceeds 32 bits"))
                })?;
                logical.push(PartitionTableEntry { first_lba, ..e });
            }
        }
        match PartitionTableEntry::parse(&sector[TABLE_OFFSET + ENTRY_LEN..]) {
            Some(link) if link.is_extended() => ebr = outer + link.first_lba as u64,
            _ => break,
        }
    }
    Ok(logical)
}

fn walk_extended<D: BlockDevice + ?Sized>(
    dev: &mut D,
    mut mbr: MasterBootRecord,
) -> Result<MasterBootRecord, MbrError> {
    if mbr
        .entries
        .iter()
        .any(|e| e.partition_type == partition_type::GPT_PROTECTIVE)
    {
        return Err(MbrError::UnsupportedFormat("GPT"));
    }
    let extended: Vec<_> = mbr
        .entries
        .iter()
        .filter(|e| e.is_extended())
        .copied()
        .collect();
    for ext in extended {
        let logical = follow_ebr_chain(dev, &ext)?;
        mbr.logical_entries.extend(logical);
    }
    Ok(mbr)
}

/// Reads and decodes the partition table of `dev`, following extended
/// partitions. A GPT protective MBR is rejected.
pub fn read_partition_table<D: BlockDevice + ?Sized>(
    dev: &mut D,
) -> Result<Option<MasterBootRecord>, MbrError> {
    let sector = read_sector(dev, 0)?;
    match parse_mbr(&sector) {
        None => Ok(None),
        Some(mbr) => walk_extended(dev, mbr).map(Some),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VolumeLayout {
    Partitioned(MasterBootRecord),
    /// No usable partition table; a filesystem may start at LBA 0.
    Unpartitioned,
}

fn entry_plausible(e: &PartitionTableEntry, block_count: u64) -> bool {
    PLAUSIBLE_TYPES.contains(&e.partition_type)
        && e.sector_count > 0
        && e.first_lba > 0
        && e.end_lba() <= block_count
}

/// Decides whether sector 0 is a partition table or the first sector of an
/// unpartitioned volume. Both carry the 55h AAh signature, so sector 0 only
/// counts as a table when every used slot has a valid boot flag and at least
/// one used slot has a known type and lies within the device.
pub fn probe_layout<D: BlockDevice + ?Sized>(dev: &mut D) -> Result<VolumeLayout, MbrError> {
    let sector = read_sector(dev, 0)?;
    let Some(mbr) = parse_mbr(&sector) else {
        return Ok(VolumeLayout::Unpartitioned);
    };
    let flags_ok = (0..4).all(|i| {
        let at = TABLE_OFFSET + i * ENTRY_LEN;
        sector[at + 4] == 0 || matches!(sector[at], 0 | BOOTABLE)
    });
    if mbr
        .entries
        .iter()
        .any(|e| e.partition_type == partition_type::GPT_PROTECTIVE)
        && flags_ok
    {
        return Err(MbrError::UnsupportedFormat("GPT"));
    }
    let count = dev.block_count();
    if flags_ok && mbr.entries.iter().any(|e| entry_plausible(e, count)) {
        Ok(VolumeLayout::Partitioned(walk_extended(dev, mbr)?))
    } else {
        Ok(VolumeLayout::Unpartitioned)
    }
}

/// A window onto a parent device, translated by `base_lba` and bounded by
/// `span` blocks.
#[derive(Debug)]
pub struct PartitionView<D> {
    parent: D,
    base_lba: u64,
    span: u64,
}

impl<D: BlockDevice> PartitionView<D> {
    pub fn new(parent: D, base_lba: u64, span: u64) -> Result<Self, MbrError> {
        match base_lba.checked_add(span) {
            Some(end) if end <= parent.block_count() => Ok(PartitionView {
                parent,
                base_lba,
                span,
            }),
            _ => Err(MbrError::Malformed(format!(
                "partition at LBA {base_lba} with {span} sectors exceeds the device ({} sectors)",
                parent.block_count()
            ))),
        }
    }

    pub fn for_entry(parent: D, entry: &PartitionTableEntry) -> Result<Self, MbrError> {
        Self::new(parent, entry.first_lba as u64, entry.sector_count as u64)
    }

    /// The whole parent device.
    pub fn whole(parent: D) -> Self {
        let span = parent.block_count();
        PartitionView {
            parent,
            base_lba: 0,
            span,
        }
    }

    pub fn base_lba(&self) -> u64 {
        self.base_lba
    }

    pub fn parent(&self) -> &D {
        &self.parent
    }

    pub fn parent_mut(&mut self) -> &mut D {
        &mut self.parent
    }

    pub fn into_parent(self) -> D {
        self.parent
    }

    fn translate(&self, offset: u64, len: usize) -> crate::blockdev::Result<u64> {
        check_byte_range(self.capacity(), offset, len)?;
        Ok(offset + self.base_lba * self.parent.block_size() as u64)
    }
}

impl<D: BlockDevice> BlockDevice for PartitionView<D> {
    fn block_size(&self) -> u32 {
        self.parent.block_size()
    }

    fn block_count(&self) -> u64 {
        self.span
    }

    fn read_blocks(&mut self, lba: u64, buf: &mut [u8]) -> crate::blockdev::Result<()> {
        check_block_range(self.block_size(), self.span, lba, buf.len())?;
        self.parent.read_blocks(self.base_lba + lba, buf)
    }

    fn write_blocks(&mut self, lba: u64, buf: &[u8]) -> crate::blockdev::Result<()> {
        check_block_range(self.block_size(), self.span, lba, buf.len())?;
        self.parent.write_blocks(self.base_lba + lba, buf)
    }

    fn flush(&mut self) -> crate::blockdev::Result<()> {
        self.parent.flush()
    }

    fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> crate::blockdev::Result<()> {
        let at = self.translate(offset, buf.len())?;
        self.parent.read_at(at, buf)
    }

    fn write_at(&mut self, offset: u64, data: &[u8]) -> crate::blockdev::Result<()> {
        let at = self.translate(offset, data.len())?;
        self.parent.write_at(at, data)
    }
}

/// Opens partition `index` of `dev` (numbered as in
/// [`MasterBootRecord::partitions`]), or the whole device when it carries no
/// partition table and `index` is 0.
pub fn open_partition<D: BlockDevice>(
    mut dev: D,
    index: usize,
) -> Result<(PartitionView<D>, Option<PartitionTableEntry>), MbrError> {
    match probe_layout(&mut dev)? {
        VolumeLayout::Partitioned(mbr) => {
            let parts = mbr.partitions();
            let entry = *parts
                .get(index)
                .ok_or(MbrError::NoSuchPartition { index })?;
            Ok((PartitionView::for_entry(dev, &entry)?, Some(entry)))
        }
        VolumeLayout::Unpartitioned if index == 0 => Ok((PartitionView::whole(dev), None)),
        VolumeLayout::Unpartitioned => Err(MbrError::NoSuchPartition { index }),
    }
}
