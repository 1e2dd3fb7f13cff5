//! Boot sector and FSInfo sector.

use log::warn;

use super::{FatError, Result};
use crate::blockdev::BlockDevice;

pub const FSINFO_LEAD_SIG: u32 = 0x4161_5252;
pub const FSINFO_STRUC_SIG: u32 = 0x6141_7272;
pub const FSINFO_TRAIL_SIG: u32 = 0xaa55_0000;
pub const UNKNOWN: u32 = 0xffff_ffff;
pub const NO_LABEL: [u8; 11] = *b"NO NAME    ";

fn le16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fat32BootSector {
    pub oem_name: [u8; 8],
    pub bytes_per_sector: u16,
    pub sectors_per_cluster: u8,
    pub reserved_sector_count: u16,
    pub num_fats: u8,
    pub media: u8,
    pub sectors_per_track: u16,
    pub num_heads: u16,
    pub hidden_sectors: u32,
    pub total_sectors: u32,
    pub fat_size_sectors: u32,
    pub ext_flags: u16,
    pub root_cluster: u32,
    pub fsinfo_sector: u16,
    pub backup_boot_sector: u16,
    pub volume_id: u32,
    pub volume_label: [u8; 11],
}

impl Fat32BootSector {
    pub fn parse(sector: &[u8]) -> Result<Self> {
        let bad = |why: String| Err(FatError::NotFat32(why));
        if sector.len() < 512 {
            return bad(format!("boot sector of {} bytes", sector.len()));
        }
        if sector[510] != 0x55 || sector[511] != 0xaa {
            return bad("missing 55AA signature".into());
        }
        let bps = le16(sector, 11);
        if !matches!(bps, 512 | 1024 | 2048 | 4096) {
            return bad(format!("{bps} bytes per sector"));
        }
        let spc = sector[13];
        if spc == 0 || !spc.is_power_of_two() {
            return bad(format!("{spc} sectors per cluster"));
        }
        let reserved = le16(sector, 14);
        let num_fats = sector[16];
        let root_entries = le16(sector, 17);
        let fat_size = le32(sector, 36);
        let total = le32(sector, 32);
        let root_cluster = le32(sector, 44);
        if reserved == 0 || num_fats == 0 {
            return bad("no reserved sectors or no FATs".into());
        }
        if fat_size == 0 || root_entries != 0 {
            return bad("FAT12/FAT16 layout".into());
        }
        if total == 0 {
            return bad("zero total sectors".into());
        }
        if root_cluster < 2 {
            return bad(format!("root cluster {root_cluster}"));
        }
        let data_start = reserved as u64 + num_fats as u64 * fat_size as u64;
        if data_start >= total as u64 {
            return bad("FATs extend past the end of the volume".into());
        }
        let bs = Fat32BootSector {
            oem_name: sector[3..11].try_into().unwrap(),
            bytes_per_sector: bps,
            sectors_per_cluster: spc,
            reserved_sector_count: reserved,
            num_fats,
            media: sector[21],
            sectors_per_track: le16(sector, 24),
            num_heads: le16(sector, 26),
            hidden_sectors: le32(sector, 28),
            total_sectors: total,
            fat_size_sectors: fat_size,
            ext_flags: le16(sector, 40),
            root_cluster,
            fsinfo_sector: le16(sector, 48),
            backup_boot_sector: le16(sector, 50),
            volume_id: le32(sector, 67),
            volume_label: sector[71..82].try_into().unwrap(),
        };
        if root_cluster >= bs.entry_count() {
            return bad(format!(
                "root cluster {root_cluster} beyond the data region"
            ));
        }
        if (bs.fat_size_sectors as u64 * bps as u64 / 4) < bs.entry_count() as u64 {
            return bad("FAT too small for the data region".into());
        }
        Ok(bs)
    }

    /// Full sector image with an x86 jump, no boot code and the signature.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = vec![0u8; self.bytes_per_sector as usize];
        b[0..3].copy_from_slice(&[0xeb, 0x58, 0x90]);
        b[3..11].copy_from_slice(&self.oem_name);
        b[11..13].copy_from_slice(&self.bytes_per_sector.to_le_bytes());
        b[13] = self.sectors_per_cluster;
        b[14..16].copy_from_slice(&self.reserved_sector_count.to_le_bytes());
        b[16] = self.num_fats;
        b[21] = self.media;
        b[24..26].copy_from_slice(&self.sectors_per_track.to_le_bytes());
        b[26..28].copy_from_slice(&self.num_heads.to_le_bytes());
        b[28..32].copy_from_slice(&self.hidden_sectors.to_le_bytes());
        b[32..36].copy_from_slice(&self.total_sectors.to_le_bytes());
        b[36..40].copy_from_slice(&self.fat_size_sectors.to_le_bytes());
        b[40..42].copy_from_slice(&self.ext_flags.to_le_bytes());
        b[44..48].copy_from_slice(&self.root_cluster.to_le_bytes());
        b[48..50].copy_from_slice(&self.fsinfo_sector.to_le_bytes());
        b[50..52].copy_from_slice(&self.backup_boot_sector.to_le_bytes());
        b[64] = 0x80;
        b[66] = 0x29;
        b[67..71].copy_from_slice(&self.volume_id.to_le_bytes());
        b[71..82].copy_from_slice(&self.volume_label);
        b[82..90].copy_from_slice(b"FAT32   ");
        b[510] = 0x55;
        b[511] = 0xaa;
        b
    }

    pub fn bytes_per_sector(&self) -> u64 {
        self.bytes_per_sector as u64
    }

    pub fn cluster_size(&self) -> u64 {
        self.bytes_per_sector as u64 * self.sectors_per_cluster as u64
    }

    pub fn fat_region_start(&self) -> u64 {
        self.reserved_sector_count as u64
    }

    pub fn data_region_start(&self) -> u64 {
        self.reserved_sector_count as u64 + self.num_fats as u64 * self.fat_size_sectors as u64
    }

    /// Clusters in the data region.
    pub fn cluster_count(&self) -> u32 {
        ((self.total_sectors as u64 - self.data_region_start()) / self.sectors_per_cluster as u64)
            as u32
    }

    /// One past the highest valid cluster number.
    pub fn entry_count(&self) -> u32 {
        self.cluster_count() + 2
    }

    pub fn mirrored(&self) -> bool {
        self.ext_flags & 0x80 == 0
    }

    pub fn active_fat(&self) -> u8 {
        (self.ext_flags & 0x0f) as u8
    }

    /// Byte offset of `cluster` within the volume.
    pub fn cluster_to_byte_offset(&self, cluster: u32) -> Result<u64> {
        if cluster < 2 {
            return Err(FatError::CorruptChain(format!(
                "cluster {cluster} has no data"
            )));
        }
        Ok(
            (self.data_region_start() + (cluster as u64 - 2) * self.sectors_per_cluster as u64)
                * self.bytes_per_sector as u64,
        )
    }

    pub fn label(&self) -> String {
        String::from_utf8_lossy(&self.volume_label)
            .trim_end()
            .to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FsInfo {
    pub free_count: u32,
    pub next_free: u32,
}

impl FsInfo {
    pub const UNKNOWN: FsInfo = FsInfo {
        free_count: UNKNOWN,
        next_free: UNKNOWN,
    };

    /// Decodes a sector; `None` when any signature is wrong.
    pub fn parse(sector: &[u8]) -> Option<Self> {
        if sector.len() < 512
            || le32(sector, 0) != FSINFO_LEAD_SIG
            || le32(sector, 484) != FSINFO_STRUC_SIG
            || le32(sector, 508) != FSINFO_TRAIL_SIG
        {
            return None;
        }
        Some(FsInfo {
            free_count: le32(sector, 488),
            next_free: le32(sector, 492),
        })
    }

    pub fn to_bytes(&self, sector_len: usize) -> Vec<u8> {
        let mut b = vec![0u8; sector_len.max(512)];
        b[0..4].copy_from_slice(&FSINFO_LEAD_SIG.to_le_bytes());
        b[484..488].copy_from_slice(&FSINFO_STRUC_SIG.to_le_bytes());
        b[488..492].copy_from_slice(&self.free_count.to_le_bytes());
        b[492..496].copy_from_slice(&self.next_free.to_le_bytes());
        b[508..512].copy_from_slice(&FSINFO_TRAIL_SIG.to_le_bytes());
        b
    }

    pub fn free_known(&self) -> Option<u32> {
        (self.free_count != UNKNOWN).then_some(self.free_count)
    }
}

/// Reads the FSInfo sector; a damaged sector yields unknown counts.
pub fn read_fsinfo<D: BlockDevice + ?Sized>(dev: &mut D, boot: &Fat32BootSector) -> Result<FsInfo> {
    if boot.fsinfo_sector == 0 || boot.fsinfo_sector >= boot.reserved_sector_count {
        return Ok(FsInfo::UNKNOWN);
    }
    let mut sector = vec![0u8; boot.bytes_per_sector as usize];
    dev.read_at(
        boot.fsinfo_sector as u64 * boot.bytes_per_sector(),
        &mut sector,
    )?;
    Ok(FsInfo::parse(&sector).unwrap_or_else(|| {
        warn!("fat32: FSInfo signatures invalid, counts unknown");
        FsInfo::UNKNOWN
    }))
}

/// Writes the FSInfo sector and, when a backup boot region exists, its copy.
pub fn write_fsinfo<D: BlockDevice + ?Sized>(
    dev: &mut D,
    boot: &Fat32BootSector,
    info: &FsInfo,
) -> Result<()> {
    if boot.fsinfo_sector == 0 || boot.fsinfo_sector >= boot.reserved_sector_count {
        return Ok(());
    }
    let bps = boot.bytes_per_sector();
    let bytes = info.to_bytes(bps as usize);
    dev.write_at(boot.fsinfo_sector as u64 * bps, &bytes)?;
    if boot.backup_boot_sector != 0 {
        let backup = boot.backup_boot_sector as u64 + boot.fsinfo_sector as u64;
        if backup < boot.reserved_sector_count as u64 {
            dev.write_at(backup * bps, &bytes)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockdev::MemDevice;

    pub(crate) fn typical() -> Fat32BootSector {
        Fat32BootSector {
            oem_name: *b"MSWIN4.1",
            bytes_per_sector: 512,
            sectors_per_cluster: 8,
            reserved_sector_count: 32,
            num_fats: 2,
            media: 0xf8,
            sectors_per_track: 63,
            num_heads: 255,
            hidden_sectors: 0,
            total_sectors: 2050 + 8 * 129_000,
            fat_size_sectors: 1009,
            ext_flags: 0,
            root_cluster: 2,
            fsinfo_sector: 1,
            backup_boot_sector: 6,
            volume_id: 0x1234_5678,
            volume_label: *b"USBSTICK   ",
        }
    }

    #[test]
    fn typical_geometry() {
        let raw = typical().to_bytes();
        let bs = Fat32BootSector::parse(&raw).unwrap();
        assert_eq!(bs, typical());
        assert_eq!(bs.data_region_start(), 2050);
        assert_eq!(bs.cluster_to_byte_offset(2).unwrap(), 2050 * 512);
        assert_eq!(bs.cluster_to_byte_offset(3).unwrap(), 1_053_696);
        assert!(bs.cluster_to_byte_offset(1).is_err());
        assert_eq!(bs.cluster_size(), 4096);
    }

    #[test]
    fn field_offsets() {
        let raw = typical().to_bytes();
        assert_eq!(&raw[11..13], &[0x00, 0x02]);
        assert_eq!(raw[13], 8);
        assert_eq!(&raw[14..16], &[32, 0]);
        assert_eq!(raw[16], 2);
        assert_eq!(&raw[36..40], &1009u32.to_le_bytes());
        assert_eq!(&raw[44..48], &[2, 0, 0, 0]);
        assert_eq!(&raw[48..50], &[1, 0]);
        assert_eq!(&raw[50..52], &[6, 0]);
        assert_eq!(&raw[71..82], b"USBSTICK   ");
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut raw = typical().to_bytes();
        raw[13] = 3;
        assert!(matches!(
            Fat32BootSector::parse(&raw),
            Err(FatError::NotFat32(_))
        ));
        let mut raw = typical().to_bytes();
        raw[11..13].copy_from_slice(&768u16.to_le_bytes());
        assert!(Fat32BootSector::parse(&raw).is_err());
        let mut raw = typical().to_bytes();
        raw[511] = 0;
        assert!(Fat32BootSector::parse(&raw).is_err());
    }

    #[test]
    fn fsinfo_round_trip_and_degraded() {
        let info = FsInfo {
            free_count: 1234,
            next_free: 77,
        };
        let raw = info.to_bytes(512);
        assert_eq!(&raw[0..4], &[0x52, 0x52, 0x61, 0x41]);
        assert_eq!(&raw[508..512], &[0x00, 0x00, 0x55, 0xaa]);
        assert_eq!(FsInfo::parse(&raw), Some(info));
        let mut broken = raw.clone();
        broken[0] = 0;
        assert_eq!(FsInfo::parse(&broken), None);

        let mut dev = MemDevice::new(512, 64).unwrap();
        let bs = typical();
        write_fsinfo(&mut dev, &bs, &info).unwrap();
        assert_eq!(read_fsinfo(&mut dev, &bs).unwrap(), info);
        assert_eq!(
            &dev.as_bytes()[7 * 512 + 488..7 * 512 + 492],
            &1234u32.to_le_bytes()
        );
        dev.write_at(512, &[0]).unwrap();
        assert_eq!(read_fsinfo(&mut dev, &bs).unwrap(), FsInfo::UNKNOWN);
    }
}
