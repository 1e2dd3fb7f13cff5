//! The file allocation table and cluster chains.

use std::collections::{BTreeMap, HashSet};

use log::{debug, warn};

use super::boot::{self, Fat32BootSector, FsInfo};
use super::{FatError, Result};
use crate::blockdev::BlockDevice;

pub const ENTRY_MASK: u32 = 0x0fff_ffff;
pub const BAD_CLUSTER: u32 = 0x0fff_fff7;
/// End-of-chain mark written by this implementation.
pub const END_OF_CHAIN: u32 = 0x0fff_ffff;
const EOC_MIN: u32 = 0x0fff_fff8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FatEntry {
    Free,
    Reserved,
    Next(u32),
    Bad,
    EndOfChain,
}

impl FatEntry {
    pub fn classify(raw: u32) -> FatEntry {
        match raw & ENTRY_MASK {
            0 => FatEntry::Free,
            1 => FatEntry::Reserved,
            BAD_CLUSTER => FatEntry::Bad,
            v if v >= EOC_MIN => FatEntry::EndOfChain,
            v => FatEntry::Next(v),
        }
    }
}

/// Access to the FAT copies of a mounted volume plus its FSInfo counters.
#[derive(Debug, Clone)]
pub struct Fat {
    boot: Fat32BootSector,
    info: FsInfo,
    cache: Option<(u64, Vec<u8>)>,
}

impl Fat {
    /// Wraps the FAT described by `boot`. An unknown free count is computed
    /// by scanning the table.
    pub fn load<D: BlockDevice + ?Sized>(dev: &mut D, boot: &Fat32BootSector) -> Result<Self> {
        let info = boot::read_fsinfo(dev, boot)?;
        let mut fat = Fat {
            boot: boot.clone(),
            info,
            cache: None,
        };
        if !boot.mirrored() && boot.active_fat() >= boot.num_fats {
            return Err(FatError::NotFat32(format!(
                "active FAT {} of {}",
                boot.active_fat(),
                boot.num_fats
            )));
        }
        let free = fat.count_free(dev)?;
        match fat.info.free_known() {
            Some(n) if n == free => {}
            Some(n) => {
                warn!("fat32: FSInfo reports {n} free clusters, table has {free}");
                fat.info.free_count = free;
            }
            None => fat.info.free_count = free,
        }
        if fat.info.next_free != boot::UNKNOWN
            && !(2..boot.entry_count()).contains(&fat.info.next_free)
        {
            fat.info.next_free = boot::UNKNOWN;
        }
        Ok(fat)
    }

    pub fn boot(&self) -> &Fat32BootSector {
        &self.boot
    }

    pub fn fsinfo(&self) -> FsInfo {
        self.info
    }

    pub fn free_count(&self) -> u32 {
        self.info.free_count
    }

    pub fn entry_count(&self) -> u32 {
        self.boot.entry_count()
    }

    fn bps(&self) -> u64 {
        self.boot.bytes_per_sector()
    }

    fn copy_start(&self, index: u8) -> u64 {
        (self.boot.fat_region_start() + index as u64 * self.boot.fat_size_sectors as u64)
            * self.bps()
    }

    fn read_copy(&self) -> u8 {
        if self.boot.mirrored() {
            0
        } else {
            self.boot.active_fat()
        }
    }

    fn write_copies(&self) -> Vec<u8> {
        if self.boot.mirrored() {
            (0..self.boot.num_fats).collect()
        } else {
            vec![self.boot.active_fat()]
        }
    }

    fn check_cluster(&self, cluster: u32) -> Result<()> {
        if cluster >= self.entry_count() {
            return Err(FatError::CorruptChain(format!(
                "cluster {cluster} beyond the last cluster {}",
                self.entry_count() - 1
            )));
        }
        Ok(())
    }

    /// Raw 32-bit entry including the reserved top bits.
    fn raw_entry<D: BlockDevice + ?Sized>(&mut self, dev: &mut D, cluster: u32) -> Result<u32> {
        let byte = cluster as u64 * 4;
        let sector = byte / self.bps();
        let within = (byte % self.bps()) as usize;
        let hit = matches!(&self.cache, Some((s, _)) if *s == sector);
        if !hit {
            let mut buf = vec![0u8; self.bps() as usize];
            dev.read_at(
                self.copy_start(self.read_copy()) + sector * self.bps(),
                &mut buf,
            )?;
            self.cache = Some((sector, buf));
        }
        let buf = &self.cache.as_ref().unwrap().1;
        Ok(u32::from_le_bytes(
            buf[within..within + 4].try_into().unwrap(),
        ))
    }

    /// The 28-bit value stored for `cluster`.
    pub fn get<D: BlockDevice + ?Sized>(&mut self, dev: &mut D, cluster: u32) -> Result<u32> {
        self.check_cluster(cluster)?;
        Ok(self.raw_entry(dev, cluster)? & ENTRY_MASK)
    }

    pub fn set<D: BlockDevice + ?Sized>(
        &mut self,
        dev: &mut D,
        cluster: u32,
        value: u32,
    ) -> Result<()> {
        self.set_many(dev, &[(cluster, value)])
    }

    /// Writes several entries, one read-modify-write per touched sector and
    /// FAT copy. The top four bits of each entry are preserved.
    pub fn set_many<D: BlockDevice + ?Sized>(
        &mut self,
        dev: &mut D,
        updates: &[(u32, u32)],
    ) -> Result<()> {
        let bps = self.bps();
        let mut by_sector: BTreeMap<u64, Vec<(usize, u32)>> = BTreeMap::new();
        for &(cluster, value) in updates {
            self.check_cluster(cluster)?;
            let byte = cluster as u64 * 4;
            by_sector
                .entry(byte / bps)
                .or_default()
                .push(((byte % bps) as usize, value & ENTRY_MASK));
        }
        let copies = self.write_copies();
        let mut buf = vec![0u8; bps as usize];
        for (sector, changes) in by_sector {
            let read_at = self.copy_start(self.read_copy()) + sector * bps;
            dev.read_at(read_at, &mut buf)?;
            for &(within, value) in &changes {
                let old = u32::from_le_bytes(buf[within..within + 4].try_into().unwrap());
                let new = (old & !ENTRY_MASK) | value;
                buf[within..within + 4].copy_from_slice(&new.to_le_bytes());
            }
            for &copy in &copies {
                dev.write_at(self.copy_start(copy) + sector * bps, &buf)?;
            }
            if matches!(&self.cache, Some((s, _)) if *s == sector) {
                self.cache = Some((sector, buf.clone()));
            }
        }
        Ok(())
    }

    /// Every entry of the table that is read from, in cluster order.
    pub fn read_all<D: BlockDevice + ?Sized>(&self, dev: &mut D) -> Result<Vec<u32>> {
        self.read_copy_entries(dev, self.read_copy())
    }

    pub fn read_copy_entries<D: BlockDevice + ?Sized>(
        &self,
        dev: &mut D,
        copy: u8,
    ) -> Result<Vec<u32>> {
        let n = self.entry_count() as usize;
        let mut raw = vec![0u8; n * 4];
        dev.read_at(self.copy_start(copy), &mut raw)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) & ENTRY_MASK)
            .collect())
    }

    /// Raw bytes of one FAT copy.
    pub fn copy_bytes<D: BlockDevice + ?Sized>(&self, dev: &mut D, copy: u8) -> Result<Vec<u8>> {
        let mut raw = vec![0u8; (self.boot.fat_size_sectors as u64 * self.bps()) as usize];
        dev.read_at(self.copy_start(copy), &mut raw)?;
        Ok(raw)
    }

    /// Brute-force count of free entries for clusters 2 and up.
    pub fn count_free<D: BlockDevice + ?Sized>(&self, dev: &mut D) -> Result<u32> {
        Ok(self.read_all(dev)?[2..].iter().filter(|&&v| v == 0).count() as u32)
    }

    pub fn flush_info<D: BlockDevice + ?Sized>(&self, dev: &mut D) -> Result<()> {
        boot::write_fsinfo(dev, &self.boot, &self.info)
    }

    /// Clusters of the chain starting at `start`.
    pub fn get_chain<D: BlockDevice + ?Sized>(
        &mut self,
        dev: &mut D,
        start: u32,
    ) -> Result<Vec<u32>> {
        if start < 2 {
            return Err(FatError::CorruptChain(format!(
                "chain starts at cluster {start}"
            )));
        }
        self.check_cluster(start)?;
        let mut chain = vec![start];
        let mut seen = HashSet::from([start]);
        let mut current = start;
        loop {
            match FatEntry::classify(self.get(dev, current)?) {
                FatEntry::EndOfChain => return Ok(chain),
                FatEntry::Next(next) => {
                    if next >= self.entry_count() {
                        return Err(FatError::CorruptChain(format!(
                            "cluster {current} links to {next}, beyond the volume"
                        )));
                    }
                    if !seen.insert(next) {
                        return Err(FatError::CorruptChain(format!(
                            "cycle through cluster {next}"
                        )));
                    }
                    chain.push(next);
                    current = next;
                }
                other => {
                    return Err(FatError::CorruptChain(format!(
                        "cluster {current} in chain from {start} is {other:?}"
                    )))
                }
            }
        }
    }

    /// Appends `count` free clusters to `chain`. Nothing is written unless
    /// all of them can be found.
    pub fn alloc<D: BlockDevice + ?Sized>(
        &mut self,
        dev: &mut D,
        chain: &mut Vec<u32>,
        count: u32,
    ) -> Result<()> {
        if count == 0 {
            return Ok(());
        }
        if count > self.info.free_count {
            return Err(FatError::NoSpace);
        }
        let fresh = self.find_free(dev, count)?;
        let mut updates = Vec::with_capacity(fresh.len() + 1);
        if let Some(&tail) = chain.last() {
            updates.push((tail, fresh[0]));
        }
        for pair in fresh.windows(2) {
            updates.push((pair[0], pair[1]));
        }
        updates.push((*fresh.last().unwrap(), END_OF_CHAIN));
        self.set_many(dev, &updates)?;
        self.info.free_count -= count;
        self.info.next_free = *fresh.last().unwrap();
        self.flush_info(dev)?;
        debug!("fat32: allocated {count} clusters from {}", fresh[0]);
        chain.extend_from_slice(&fresh);
        Ok(())
    }

    fn find_free<D: BlockDevice + ?Sized>(&mut self, dev: &mut D, count: u32) -> Result<Vec<u32>> {
        let entries = self.entry_count();
        let start = match self.info.next_free {
            n if (2..entries).contains(&n) => n,
            _ => 2,
        };
        let per_sector = (self.bps() / 4) as u32;
        let batch = 64 * per_sector;
        let mut found = Vec::with_capacity(count as usize);
        let ranges = [(start, entries), (2, start)];
        let mut buf = Vec::new();
        for (from, to) in ranges {
            let mut c = from;
            while c < to {
                // Read whole sectors from the one containing `c`.
                let first = c - c % per_sector;
                let last = (first + batch).min(entries);
                let bytes = (last - first) as usize * 4;
                buf.resize(bytes, 0);
                dev.read_at(
                    self.copy_start(self.read_copy()) + first as u64 * 4,
                    &mut buf[..bytes],
                )?;
                for k in c..last.min(to) {
                    let at = (k - first) as usize * 4;
                    let v = u32::from_le_bytes(buf[at..at + 4].try_into().unwrap());
                    if v & ENTRY_MASK == 0 {
                        found.push(k);
                        if found.len() == count as usize {
                            return Ok(found);
                        }
                    }
                }
                c = last.min(to);
            }
        }
        Err(FatError::NoSpace)
    }

    /// Truncates `chain` to its first `keep` clusters and frees the rest.
    pub fn free<D: BlockDevice + ?Sized>(
        &mut self,
        dev: &mut D,
        chain: &mut Vec<u32>,
        keep: usize,
    ) -> Result<()> {
        if keep >= chain.len() {
            return Ok(());
        }
        let mut updates: Vec<(u32, u32)> = chain[keep..].iter().map(|&c| (c, 0)).collect();
        if keep > 0 {
            updates.push((chain[keep - 1], END_OF_CHAIN));
        }
        self.set_many(dev, &updates)?;
        let freed = (chain.len() - keep) as u32;
        self.info.free_count = self.info.free_count.saturating_add(freed);
        self.flush_info(dev)?;
        chain.truncate(keep);
        Ok(())
    }
}

/// A cluster chain bound to a volume geometry, addressed by byte offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterChain {
    pub clusters: Vec<u32>,
    pub cluster_size: u64,
}

impl ClusterChain {
    pub fn new(clusters: Vec<u32>, cluster_size: u64) -> Self {
        ClusterChain {
            clusters,
            cluster_size,
        }
    }

    pub fn start(&self) -> u32 {
        self.clusters.first().copied().unwrap_or(0)
    }

    pub fn capacity(&self) -> u64 {
        self.clusters.len() as u64 * self.cluster_size
    }

    /// Clusters needed to hold `len` bytes.
    pub fn clusters_for(len: u64, cluster_size: u64) -> u64 {
        len.div_ceil(cluster_size)
    }

    /// Device byte ranges covering `[offset, offset + len)`, with runs of
    /// consecutive clusters merged.
    pub fn extents(
        &self,
        boot: &Fat32BootSector,
        offset: u64,
        len: u64,
    ) -> Result<Vec<(u64, u64)>> {
        if offset + len > self.capacity() {
            return Err(FatError::OutOfRange {
                offset,
                len,
                size: self.capacity(),
            });
        }
        let cs = self.cluster_size;
        let mut out: Vec<(u64, u64)> = Vec::new();
        let mut pos = offset;
        let end = offset + len;
        while pos < end {
            let idx = (pos / cs) as usize;
            let within = pos % cs;
            let n = (cs - within).min(end - pos);
            let at = boot.cluster_to_byte_offset(self.clusters[idx])? + within;
            match out.last_mut() {
                Some((start, l)) if *start + *l == at => *l += n,
                _ => out.push((at, n)),
            }
            pos += n;
        }
        Ok(out)
    }

    pub fn read<D: BlockDevice + ?Sized>(
        &self,
        dev: &mut D,
        boot: &Fat32BootSector,
        offset: u64,
        buf: &mut [u8],
    ) -> Result<()> {
        let mut done = 0usize;
        for (at, n) in self.extents(boot, offset, buf.len() as u64)? {
            dev.read_at(at, &mut buf[done..done + n as usize])?;
            done += n as usize;
        }
        Ok(())
    }

    pub fn write<D: BlockDevice + ?Sized>(
        &self,
        dev: &mut D,
        boot: &Fat32BootSector,
        offset: u64,
        data: &[u8],
    ) -> Result<()> {
        let mut done = 0usize;
        for (at, n) in self.extents(boot, offset, data.len() as u64)? {
            dev.write_at(at, &data[done..done + n as usize])?;
            done += n as usize;
        }
        Ok(())
    }

    /// Grows or shrinks the chain to hold `len` bytes, keeping at least
    /// `min_clusters`.
    pub fn set_length<D: BlockDevice + ?Sized>(
        &mut self,
        dev: &mut D,
        fat: &mut Fat,
        len: u64,
        min_clusters: u64,
    ) -> Result<()> {
        let want = Self::clusters_for(len, self.cluster_size).max(min_clusters);
        let have = self.clusters.len() as u64;
        if want > have {
            let extra = u32::try_from(want - have).map_err(|_| FatError::NoSpace)?;
            fat.alloc(dev, &mut self.clusters, extra)
        } else {
            fat.free(dev, &mut self.clusters, want as usize)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockdev::MemDevice;
    use crate::fat32::format::{format_volume_with, FormatOptions};

    fn volume(mb: u64, spc: u8) -> (MemDevice, Fat) {
        let mut dev = MemDevice::new(512, mb * 2048).unwrap();
        format_volume_with(&mut dev, &FormatOptions::new("TEST", spc)).unwrap();
        let mut sector = [0u8; 512];
        dev.read_at(0, &mut sector).unwrap();
        let boot = Fat32BootSector::parse(&sector).unwrap();
        let fat = Fat::load(&mut dev, &boot).unwrap();
        (dev, fat)
    }

    #[test]
    fn classify_entries() {
        assert_eq!(FatEntry::classify(0), FatEntry::Free);
        assert_eq!(FatEntry::classify(0xf000_0000), FatEntry::Free);
        assert_eq!(FatEntry::classify(1), FatEntry::Reserved);
        assert_eq!(FatEntry::classify(0x0fff_fff7), FatEntry::Bad);
        assert_eq!(FatEntry::classify(0x0fff_fff8), FatEntry::EndOfChain);
        assert_eq!(FatEntry::classify(0xffff_ffff), FatEntry::EndOfChain);
        assert_eq!(FatEntry::classify(0x1000_0005), FatEntry::Next(5));
    }

    #[test]
    fn follows_chains() {
        let (mut dev, mut fat) = volume(8, 1);
        fat.set_many(
            &mut dev,
            &[(3, 5), (5, 6), (6, END_OF_CHAIN), (7, 0x0fff_fff8)],
        )
        .unwrap();
        assert_eq!(fat.get_chain(&mut dev, 3).unwrap(), vec![3, 5, 6]);
        assert_eq!(fat.get_chain(&mut dev, 7).unwrap(), vec![7]);
        fat.set(&mut dev, 9, 9).unwrap();
        assert!(matches!(
            fat.get_chain(&mut dev, 9),
            Err(FatError::CorruptChain(_))
        ));
        fat.set(&mut dev, 10, 11).unwrap();
        assert!(fat.get_chain(&mut dev, 10).is_err());
    }

    #[test]
    fn set_preserves_top_bits() {
        let (mut dev, mut fat) = volume(8, 1);
        let off = 32 * 512 + 40;
        dev.write_at(off, &0xa000_0000u32.to_le_bytes()).unwrap();
        fat.cache = None;
        fat.set(&mut dev, 10, 0x1234).unwrap();
        let mut raw = [0u8; 4];
        dev.read_at(off, &mut raw).unwrap();
        assert_eq!(u32::from_le_bytes(raw), 0xa000_1234);
        assert_eq!(fat.get(&mut dev, 10).unwrap(), 0x1234);
    }

    #[test]
    fn alloc_after_root_on_fresh_volume() {
        let (mut dev, mut fat) = volume(8, 1);
        let before = fat.free_count();
        let mut chain = vec![2];
        fat.alloc(&mut dev, &mut chain, 1).unwrap();
        assert_eq!(chain, vec![2, 3]);
        assert_eq!(fat.get(&mut dev, 2).unwrap(), 3);
        assert!(fat.get(&mut dev, 3).unwrap() >= 0x0fff_fff8);
        let mut fresh = Vec::new();
        fat.alloc(&mut dev, &mut fresh, 3).unwrap();
        assert_eq!(fresh, vec![4, 5, 6]);
        assert_eq!(fat.free_count(), before - 4);
        assert_eq!(fat.fsinfo().next_free, 6);
        assert_eq!(fat.count_free(&mut dev).unwrap(), fat.free_count());
        let info = boot::read_fsinfo(&mut dev, fat.boot()).unwrap();
        assert_eq!(info.free_count, before - 4);
    }

    #[test]
    fn alloc_without_space_changes_nothing() {
        let (mut dev, mut fat) = volume(1, 1);
        let free = fat.free_count();
        let mut chain = Vec::new();
        fat.alloc(&mut dev, &mut chain, free).unwrap();
        assert_eq!(fat.free_count(), 0);
        let snapshot = dev.as_bytes().to_vec();
        let mut more = vec![chain[0]];
        assert!(matches!(
            fat.alloc(&mut dev, &mut more, 1),
            Err(FatError::NoSpace)
        ));
        assert_eq!(more, vec![chain[0]]);
        assert_eq!(dev.as_bytes(), &snapshot[..]);
    }

    #[test]
    fn alloc_wraps_past_hint() {
        let (mut dev, mut fat) = volume(1, 1);
        let mut a = Vec::new();
        fat.alloc(&mut dev, &mut a, 10).unwrap();
        let last = fat.entry_count() - 1;
        fat.info.next_free = last;
        let mut b = Vec::new();
        fat.alloc(&mut dev, &mut b, 2).unwrap();
        assert_eq!(b, vec![last, 13]);
    }

    #[test]
    fn free_truncates() {
        let (mut dev, mut fat) = volume(8, 1);
        fat.set_many(&mut dev, &[(2, 5), (5, 6), (6, END_OF_CHAIN)])
            .unwrap();
        let free = fat.count_free(&mut dev).unwrap();
        fat.info.free_count = free;
        let mut chain = vec![2, 5, 6];
        fat.free(&mut dev, &mut chain, 3).unwrap();
        assert_eq!(chain, vec![2, 5, 6]);
        fat.free(&mut dev, &mut chain, 1).unwrap();
        assert_eq!(chain, vec![2]);
        assert_eq!(fat.get(&mut dev, 5).unwrap(), 0);
        assert_eq!(fat.get(&mut dev, 6).unwrap(), 0);
        assert_eq!(fat.get(&mut dev, 2).unwrap(), END_OF_CHAIN);
        assert_eq!(fat.free_count(), free + 2);
        fat.free(&mut dev, &mut chain, 0).unwrap();
        assert!(chain.is_empty());
        assert_eq!(fat.get(&mut dev, 2).unwrap(), 0);
    }

    #[test]
    fn mirrors_stay_identical() {
        let (mut dev, mut fat) = volume(8, 1);
        let mut chain = Vec::new();
        fat.alloc(&mut dev, &mut chain, 300).unwrap();
        fat.free(&mut dev, &mut chain, 17).unwrap();
        assert_eq!(
            fat.copy_bytes(&mut dev, 0).unwrap(),
            fat.copy_bytes(&mut dev, 1).unwrap()
        );
    }

    #[test]
    fn unmirrored_writes_touch_only_the_active_copy() {
        let (mut dev, fat) = volume(8, 1);
        let mut boot = fat.boot().clone();
        boot.ext_flags = 0x81;
        dev.write_at(0, &boot.to_bytes()).unwrap();
        let mut fat = Fat::load(&mut dev, &boot).unwrap();
        let copy0 = fat.copy_bytes(&mut dev, 0).unwrap();
        let mut chain = Vec::new();
        fat.alloc(&mut dev, &mut chain, 5).unwrap();
        assert_eq!(fat.copy_bytes(&mut dev, 0).unwrap(), copy0);
        assert_ne!(fat.copy_bytes(&mut dev, 1).unwrap(), copy0);
        assert_eq!(fat.get_chain(&mut dev, chain[0]).unwrap(), chain);
    }

    #[test]
    fn chain_io_spans_clusters() {
        let (mut dev, mut fat) = volume(8, 1);
        let boot = fat.boot().clone();
        let mut chain = ClusterChain::new(Vec::new(), boot.cluster_size());
        chain.set_length(&mut dev, &mut fat, 1, 0).unwrap();
        assert_eq!(chain.clusters.len(), 1);
        let data: Vec<u8> = (0..3 * 512).map(|i| (i % 253) as u8).collect();
        chain
            .set_length(&mut dev, &mut fat, data.len() as u64, 0)
            .unwrap();
        assert_eq!(chain.clusters.len(), 3);
        chain.write(&mut dev, &boot, 0, &data).unwrap();
        let mut back = vec![0u8; 700];
        chain.read(&mut dev, &boot, 300, &mut back).unwrap();
        assert_eq!(back, data[300..1000]);
        chain.set_length(&mut dev, &mut fat, 513, 0).unwrap();
        assert_eq!(chain.clusters.len(), 2);
        chain.set_length(&mut dev, &mut fat, 0, 0).unwrap();
        assert!(chain.clusters.is_empty());
        assert_eq!(ClusterChain::clusters_for(4097, 4096), 2);
        assert_eq!(ClusterChain::clusters_for(1, 4096), 1);
    }

    #[test]
    fn extents_merge_contiguous_clusters() {
        let (_, fat) = volume(8, 1);
        let boot = fat.boot().clone();
        let chain = ClusterChain::new(vec![10, 11, 12, 20], 512);
        let ext = chain.extents(&boot, 100, 1800).unwrap();
        assert_eq!(ext.len(), 2);
        assert_eq!(ext[0].1, 3 * 512 - 100);
        assert_eq!(
            ext[1],
            (boot.cluster_to_byte_offset(20).unwrap(), 1800 - ext[0].1)
        );
    }
}
