use std::collections::HashSet;

use chrono::{Local, NaiveDate, NaiveDateTime};
use log::{debug, warn};

use super::boot::{self, Fat32BootSector};
use super::dirent::{
    self, encode_datetime, exact_short_name, generate_short_name, parse_directory,
    short_name_display, validate_long_name, DirectoryEntry, ParsedEntry, DELETED, DOT, DOTDOT,
    ENTRY_LEN,
};
use super::format::label_bytes;
use super::table::{ClusterChain, Fat};
use super::{attr, FatError, Result, MAX_FILE_SIZE};
use crate::blockdev::BlockDevice;

/// Largest number of 32-byte records a directory may hold.
pub const MAX_DIR_ENTRIES: usize = 65536;

/// Source of timestamps for new and modified entries.
pub trait Clock: Send {
    fn now(&self) -> NaiveDateTime;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> NaiveDateTime {
        Local::now().naive_local()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub NaiveDateTime);

impl Clock for FixedClock {
    fn now(&self) -> NaiveDateTime {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    File,
    Directory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Location {
    /// Start cluster of the containing directory.
    dir: u32,
    first_slot: usize,
    slot: usize,
}

/// A file or directory of a mounted volume. Handles are snapshots; the
/// filesystem re-reads the on-disk entry whenever it acts on one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FatNode {
    pub kind: NodeKind,
    pub name: String,
    pub long_name: Option<String>,
    pub short_name: [u8; 11],
    pub attributes: u8,
    pub start_cluster: u32,
    pub size: u32,
    pub created: Option<NaiveDateTime>,
    pub modified: Option<NaiveDateTime>,
    pub accessed: Option<NaiveDate>,
    location: Option<Location>,
}

impl FatNode {
    pub fn is_root(&self) -> bool {
        self.location.is_none()
    }

    pub fn is_dir(&self) -> bool {
        self.kind == NodeKind::Directory
    }

    /// Start cluster of the directory holding this node.
    pub fn parent_cluster(&self) -> Option<u32> {
        self.location.map(|l| l.dir)
    }

    fn from_parsed(p: &ParsedEntry, dir: u32) -> FatNode {
        let e = &p.entry;
        let name = match &p.long_name {
            Some(n) => n.clone(),
            None => display_with_case(&e.name, e.nt_reserved),
        };
        FatNode {
            kind: if e.is_directory() {
                NodeKind::Directory
            } else {
                NodeKind::File
            },
            name,
            long_name: p.long_name.clone(),
            short_name: e.name,
            attributes: e.attributes,
            start_cluster: e.first_cluster,
            size: if e.is_directory() { 0 } else { e.file_size },
            created: e.created(),
            modified: e.modified(),
            accessed: e.accessed(),
            location: Some(Location {
                dir,
                first_slot: p.first_slot,
                slot: p.slot,
            }),
        }
    }

    fn matches(&self, name: &str) -> bool {
        let want = name.to_lowercase();
        self.name.to_lowercase() == want
            || short_name_display(&self.short_name).to_lowercase() == want
    }
}

/// Short name display honouring the lower-case flags some systems set in
/// the reserved byte.
fn display_with_case(name: &[u8; 11], flags: u8) -> String {
    let mut n = *name;
    if flags & 0x08 != 0 {
        n[..8].make_ascii_lowercase();
    }
    if flags & 0x10 != 0 {
        n[8..].make_ascii_lowercase();
    }
    short_name_display(&n)
}

/// A mounted FAT32 volume.
pub struct FatFs<D> {
    dev: D,
    boot: Fat32BootSector,
    fat: Fat,
    clock: Box<dyn Clock>,
    update_access: bool,
}

impl<D: BlockDevice> FatFs<D> {
    pub fn mount(dev: D) -> Result<Self> {
        Self::with_clock(dev, Box::new(SystemClock))
    }

    pub fn with_clock(mut dev: D, clock: Box<dyn Clock>) -> Result<Self> {
        let mut sector = vec![0u8; 512];
        dev.read_at(0, &mut sector)?;
        let claimed = u16::from_le_bytes([sector[11], sector[12]]) as usize;
        if claimed > 512 && matches!(claimed, 1024 | 2048 | 4096) {
            sector.resize(claimed, 0);
            dev.read_at(0, &mut sector)?;
        }
        let boot = Fat32BootSector::parse(&sector)?;
        let needed = boot.total_sectors as u64 * boot.bytes_per_sector();
        if needed != dev.capacity() {
            warn!(
                "fat32: volume claims {needed} bytes, device holds {}",
                dev.capacity()
            );
        }
        if needed > dev.capacity() {
            let last = boot.cluster_to_byte_offset(boot.entry_count() - 1)? + boot.cluster_size();
            if last > dev.capacity() {
                return Err(FatError::NotFat32(format!(
                    "data region ends at byte {last}, beyond the {}-byte device",
                    dev.capacity()
                )));
            }
        }
        let fat = Fat::load(&mut dev, &boot)?;
        debug!(
            "fat32: mounted {} clusters of {} bytes, {} free",
            boot.cluster_count(),
            boot.cluster_size(),
            fat.free_count()
        );
        Ok(FatFs {
            dev,
            boot,
            fat,
            clock,
            update_access: true,
        })
    }

    pub fn set_clock(&mut self, clock: Box<dyn Clock>) {
        self.clock = clock;
    }

    /// Whether reads stamp the last-access date (on by default).
    pub fn set_update_access(&mut self, on: bool) {
        self.update_access = on;
    }

    pub fn boot(&self) -> &Fat32BootSector {
        &self.boot
    }

    pub fn fat(&self) -> &Fat {
        &self.fat
    }

    pub(crate) fn parts(&mut self) -> (&mut D, &mut Fat) {
        (&mut self.dev, &mut self.fat)
    }

    pub fn device(&self) -> &D {
        &self.dev
    }

    pub fn device_mut(&mut self) -> &mut D {
        &mut self.dev
    }

    pub fn into_device(self) -> D {
        self.dev
    }

    pub fn free_count(&self) -> u32 {
        self.fat.free_count()
    }

    pub fn free_bytes(&self) -> u64 {
        self.fat.free_count() as u64 * self.boot.cluster_size()
    }

    pub fn flush(&mut self) -> Result<()> {
        self.fat.flush_info(&mut self.dev)?;
        Ok(self.dev.flush()?)
    }

    pub fn root(&self) -> FatNode {
        FatNode {
            kind: NodeKind::Directory,
            name: "/".into(),
            long_name: None,
            short_name: [b' '; 11],
            attributes: attr::DIRECTORY,
            start_cluster: self.boot.root_cluster,
            size: 0,
            created: None,
            modified: None,
            accessed: None,
            location: None,
        }
    }

    fn dir_cluster(&self, stored: u32) -> u32 {
        if stored == 0 {
            self.boot.root_cluster
        } else {
            stored
        }
    }

    pub(crate) fn chain_of(&mut self, start: u32) -> Result<ClusterChain> {
        let clusters = if start == 0 {
            Vec::new()
        } else {
            self.fat.get_chain(&mut self.dev, start)?
        };
        Ok(ClusterChain::new(clusters, self.boot.cluster_size()))
    }

    pub(crate) fn read_dir_bytes(&mut self, start: u32) -> Result<(ClusterChain, Vec<u8>)> {
        let chain = self.chain_of(start)?;
        let mut bytes = vec![0u8; chain.capacity() as usize];
        chain.read(&mut self.dev, &self.boot, 0, &mut bytes)?;
        Ok((chain, bytes))
    }

    /// Every live record of the directory starting at `start`, including
    /// dot entries and the volume label.
    pub(crate) fn read_dir(&mut self, start: u32) -> Result<Vec<ParsedEntry>> {
        let (_, bytes) = self.read_dir_bytes(start)?;
        Ok(parse_directory(&bytes))
    }

    fn expect_dir(node: &FatNode) -> Result<()> {
        if node.is_dir() {
            Ok(())
        } else {
            Err(FatError::NotADirectory(node.name.clone()))
        }
    }

    pub fn list_children(&mut self, dir: &FatNode) -> Result<Vec<FatNode>> {
        Self::expect_dir(dir)?;
        let start = dir.start_cluster;
        Ok(self
            .read_dir(start)?
            .iter()
            .filter(|p| !p.entry.is_dot() && !p.entry.is_volume_label())
            .map(|p| FatNode::from_parsed(p, start))
            .collect())
    }

    pub fn find_child(&mut self, dir: &FatNode, name: &str) -> Result<Option<FatNode>> {
        Ok(self
            .list_children(dir)?
            .into_iter()
            .find(|c| c.matches(name)))
    }

    /// Resolves a '/'-separated path from the root. Names match without
    /// regard to case, against long and short names.
    pub fn lookup(&mut self, path: &str) -> Result<FatNode> {
        let mut node = self.root();
        for part in path.split('/').filter(|p| !p.is_empty() && *p != ".") {
            if !node.is_dir() {
                return Err(FatError::NotADirectory(node.name));
            }
            node = self
                .find_child(&node, part)?
                .ok_or_else(|| FatError::NotFound(path.to_string()))?;
        }
        Ok(node)
    }

    /// Re-reads the entry behind `node`.
    pub fn refresh(&mut self, node: &FatNode) -> Result<FatNode> {
        let Some(loc) = node.location else {
            return Ok(self.root());
        };
        self.read_dir(loc.dir)?
            .iter()
            .find(|p| p.slot == loc.slot && p.entry.name == node.short_name)
            .map(|p| FatNode::from_parsed(p, loc.dir))
            .ok_or_else(|| FatError::NotFound(node.name.clone()))
    }

    fn load_entry(&mut self, node: &FatNode) -> Result<(Location, DirectoryEntry)> {
        let loc = node.location.ok_or(FatError::Root("modified this way"))?;
        let chain = self.chain_of(loc.dir)?;
        let mut raw = [0u8; ENTRY_LEN];
        chain.read(
            &mut self.dev,
            &self.boot,
            (loc.slot * ENTRY_LEN) as u64,
            &mut raw,
        )?;
        let entry = DirectoryEntry::parse(&raw);
        if entry.name != node.short_name || raw[0] == DELETED || raw[0] == 0 {
            return Err(FatError::NotFound(node.name.clone()));
        }
        Ok((loc, entry))
    }

    fn store_entry(&mut self, dir: u32, slot: usize, entry: &DirectoryEntry) -> Result<()> {
        let chain = self.chain_of(dir)?;
        chain.write(
            &mut self.dev,
            &self.boot,
            (slot * ENTRY_LEN) as u64,
            &entry.to_bytes(),
        )
    }

    fn mark_deleted(&mut self, dir: u32, first: usize, last: usize) -> Result<()> {
        let chain = self.chain_of(dir)?;
        for slot in first..=last {
            chain.write(
                &mut self.dev,
                &self.boot,
                (slot * ENTRY_LEN) as u64,
                &[DELETED],
            )?;
        }
        Ok(())
    }

    fn stamp(&self) -> Result<(u16, u16, u8)> {
        encode_datetime(&self.clock.now())
    }

    fn existing_short_names(entries: &[ParsedEntry]) -> HashSet<[u8; 11]> {
        entries.iter().map(|p| p.entry.name).collect()
    }

    fn check_collision(
        entries: &[ParsedEntry],
        dir: u32,
        name: &str,
        ignore_slot: Option<usize>,
    ) -> Result<()> {
        let clash = entries
            .iter()
            .filter(|p| !p.entry.is_dot() && !p.entry.is_volume_label())
            .filter(|p| Some(p.slot) != ignore_slot)
            .any(|p| FatNode::from_parsed(p, dir).matches(name));
        if clash {
            Err(FatError::AlreadyExists(name.to_string()))
        } else {
            Ok(())
        }
    }

    /// Short name plus the long name to store for `name`, if one is needed.
    fn names_for(name: &str, entries: &[ParsedEntry]) -> Result<([u8; 11], Option<String>)> {
        validate_long_name(name)?;
        let taken = Self::existing_short_names(entries);
        if let Some(exact) = exact_short_name(name) {
            if !taken.contains(&exact) {
                return Ok((exact, None));
            }
        }
        let short = generate_short_name(name, &taken)?;
        Ok((short, Some(name.to_string())))
    }

    /// Writes `records` into the first run of free slots of directory
    /// `dir`, growing its chain when no run is long enough. Returns the
    /// first slot used.
    fn insert_records(&mut self, dir: u32, records: &[u8]) -> Result<usize> {
        let need = records.len() / ENTRY_LEN;
        let (mut chain, bytes) = self.read_dir_bytes(dir)?;
        let total = bytes.len() / ENTRY_LEN;
        let end = bytes
            .chunks_exact(ENTRY_LEN)
            .position(|r| r[0] == 0)
            .unwrap_or(total);
        let free = |s: usize| s >= end || bytes[s * ENTRY_LEN] == DELETED;

        let mut start = None;
        let mut run = 0;
        for s in 0..total {
            if free(s) {
                run += 1;
                if run == need {
                    start = Some(s + 1 - need);
                    break;
                }
            } else {
                run = 0;
            }
        }
        let first = match start {
            Some(s) => s,
            None => {
                // The trailing run continues into the new clusters.
                let s = total - run;
                let slots_needed = s + need;
                if slots_needed > MAX_DIR_ENTRIES {
                    return Err(FatError::NoSpace);
                }
                let per_cluster = (self.boot.cluster_size() as usize) / ENTRY_LEN;
                let want = slots_needed.div_ceil(per_cluster) as u64;
                let old_len = chain.clusters.len();
                chain.set_length(&mut self.dev, &mut self.fat, 0, want)?;
                let zero = vec![0u8; self.boot.cluster_size() as usize];
                for k in old_len..chain.clusters.len() {
                    chain.write(
                        &mut self.dev,
                        &self.boot,
                        k as u64 * zero.len() as u64,
                        &zero,
                    )?;
                }
                debug!(
                    "fat32: directory {dir} grew to {} clusters",
                    chain.clusters.len()
                );
                s
            }
        };
        chain.write(
            &mut self.dev,
            &self.boot,
            (first * ENTRY_LEN) as u64,
            records,
        )?;
        let after = first + need;
        let slots = chain.capacity() as usize / ENTRY_LEN;
        if after > end && after < slots {
            chain.write(
                &mut self.dev,
                &self.boot,
                (after * ENTRY_LEN) as u64,
                &[0u8; ENTRY_LEN],
            )?;
        }
        Ok(first)
    }

    fn node_at(&mut self, dir: u32, slot: usize) -> Result<FatNode> {
        self.read_dir(dir)?
            .iter()
            .find(|p| p.slot == slot)
            .map(|p| FatNode::from_parsed(p, dir))
            .ok_or_else(|| {
                FatError::CorruptChain(format!("entry {slot} of directory {dir} vanished"))
            })
    }

    pub fn create_child(&mut self, dir: &FatNode, name: &str, kind: NodeKind) -> Result<FatNode> {
        Self::expect_dir(dir)?;
        let parent = dir.start_cluster;
        let entries = self.read_dir(parent)?;
        validate_long_name(name)?;
        Self::check_collision(&entries, parent, name, None)?;
        let (short, long) = Self::names_for(name, &entries)?;
        let (date, time, tenths) = self.stamp()?;
        let mut entry = DirectoryEntry {
            name: short,
            attributes: attr::ARCHIVE,
            creation_tenths: tenths,
            creation_time: time,
            creation_date: date,
            last_access_date: date,
            write_time: time,
            write_date: date,
            ..Default::default()
        };
        if kind == NodeKind::File {
            let records = dirent::serialize_directory_entry(long.as_deref(), &entry)?;
            let slot = self.insert_records(parent, &records)?;
            return self.node_at(parent, slot + records.len() / ENTRY_LEN - 1);
        }

        let mut clusters = Vec::new();
        self.fat.alloc(&mut self.dev, &mut clusters, 1)?;
        let own = clusters[0];
        entry.attributes = attr::DIRECTORY;
        entry.first_cluster = own;
        let mut block = vec![0u8; self.boot.cluster_size() as usize];
        let dot = DirectoryEntry { name: DOT, ..entry };
        let dotdot = DirectoryEntry {
            name: DOTDOT,
            first_cluster: if parent == self.boot.root_cluster {
                0
            } else {
                parent
            },
            ..entry
        };
        block[..ENTRY_LEN].copy_from_slice(&dot.to_bytes());
        block[ENTRY_LEN..2 * ENTRY_LEN].copy_from_slice(&dotdot.to_bytes());
        let records = dirent::serialize_directory_entry(long.as_deref(), &entry)?;
        let written = self
            .boot
            .cluster_to_byte_offset(own)
            .and_then(|at| Ok(self.dev.write_at(at, &block)?))
            .and_then(|_| self.insert_records(parent, &records));
        match written {
            Ok(slot) => self.node_at(parent, slot + records.len() / ENTRY_LEN - 1),
            Err(e) => {
                self.fat.free(&mut self.dev, &mut clusters, 0)?;
                Err(e)
            }
        }
    }

    pub fn create_path(&mut self, path: &str, kind: NodeKind) -> Result<FatNode> {
        let (parent, name) = self.lookup_parent(path)?;
        self.create_child(&parent, &name, kind)
    }

    /// The directory holding the last component of `path`, and that
    /// component.
    pub fn lookup_parent(&mut self, path: &str) -> Result<(FatNode, String)> {
        let trimmed = path.trim_end_matches('/');
        let (dir, name) = match trimmed.rfind('/') {
            Some(i) => (&trimmed[..i], &trimmed[i + 1..]),
            None => ("", trimmed),
        };
        if name.is_empty() {
            return Err(FatError::Root("named as a new entry"));
        }
        let parent = self.lookup(dir)?;
        Self::expect_dir(&parent)?;
        Ok((parent, name.to_string()))
    }

    pub fn delete_node(&mut self, node: &FatNode) -> Result<()> {
        let (loc, entry) = self.load_entry(node).map_err(|e| match e {
            FatError::Root(_) => FatError::Root("deleted"),
            e => e,
        })?;
        if entry.is_directory() && !self.list_children(node)?.is_empty() {
            return Err(FatError::DirectoryNotEmpty(node.name.clone()));
        }
        self.mark_deleted(loc.dir, loc.first_slot, loc.slot)?;
        if entry.first_cluster != 0 {
            let mut chain = self.chain_of(entry.first_cluster)?;
            chain.set_length(&mut self.dev, &mut self.fat, 0, 0)?;
        }
        Ok(())
    }

    /// Moves and/or renames `node`. Returns the node at its new place.
    pub fn move_node(
        &mut self,
        node: &FatNode,
        new_parent: &FatNode,
        new_name: Option<&str>,
    ) -> Result<FatNode> {
        Self::expect_dir(new_parent)?;
        let (loc, mut entry) = self.load_entry(node).map_err(|e| match e {
            FatError::Root(_) => FatError::Root("moved"),
            e => e,
        })?;
        let target = new_parent.start_cluster;
        if entry.is_directory() && loc.dir != target {
            let mut cur = target;
            let mut seen = HashSet::new();
            while cur != self.boot.root_cluster {
                if cur == entry.first_cluster {
                    return Err(FatError::Cycle);
                }
                if !seen.insert(cur) {
                    return Err(FatError::CorruptChain(format!("directory loop at {cur}")));
                }
                let up = self
                    .read_dir(cur)?
                    .into_iter()
                    .find(|p| p.entry.name == DOTDOT)
                    .map(|p| p.entry.first_cluster)
                    .ok_or_else(|| FatError::CorruptChain(format!("directory {cur} lacks ..")))?;
                cur = self.dir_cluster(up);
            }
        }
        let name = new_name.unwrap_or(&node.name).to_string();
        let entries = self.read_dir(target)?;
        let same_dir = loc.dir == target;
        Self::check_collision(&entries, target, &name, same_dir.then_some(loc.slot))?;
        let (short, long) = Self::names_for(&name, &entries)?;
        let (date, time, _) = self.stamp()?;
        entry.name = short;
        entry.nt_reserved = 0;
        entry.write_date = date;
        entry.write_time = time;
        let records = dirent::serialize_directory_entry(long.as_deref(), &entry)?;
        let first = self.insert_records(target, &records)?;
        self.mark_deleted(loc.dir, loc.first_slot, loc.slot)?;
        if entry.is_directory() && !same_dir {
            let mut dotdot = self
                .read_dir(entry.first_cluster)?
                .into_iter()
                .find(|p| p.entry.name == DOTDOT)
                .ok_or_else(|| {
                    FatError::CorruptChain(format!("directory {} lacks ..", entry.first_cluster))
                })?;
            dotdot.entry.first_cluster = if target == self.boot.root_cluster {
                0
            } else {
                target
            };
            self.store_entry(entry.first_cluster, dotdot.slot, &dotdot.entry)?;
        }
        self.node_at(target, first + records.len() / ENTRY_LEN - 1)
    }

    fn expect_file(node: &FatNode) -> Result<()> {
        if node.is_dir() {
            Err(FatError::IsADirectory(node.name.clone()))
        } else {
            Ok(())
        }
    }

    pub fn file_read(&mut self, node: &FatNode, offset: u64, buf: &mut [u8]) -> Result<()> {
        Self::expect_file(node)?;
        let (loc, mut entry) = self.load_entry(node)?;
        let size = entry.file_size as u64;
        let len = buf.len() as u64;
        if offset.checked_add(len).is_none_or(|end| end > size) || (len > 0 && offset >= size) {
            return Err(FatError::OutOfRange { offset, len, size });
        }
        if len > 0 {
            let chain = self.chain_of(entry.first_cluster)?;
            chain.read(&mut self.dev, &self.boot, offset, buf)?;
        }
        if self.update_access {
            let (date, _, _) = self.stamp()?;
            if entry.last_access_date != date {
                entry.last_access_date = date;
                self.store_entry(loc.dir, loc.slot, &entry)?;
            }
        }
        Ok(())
    }

    pub fn read_all(&mut self, node: &FatNode) -> Result<Vec<u8>> {
        let size = self.refresh(node)?.size as usize;
        let mut buf = vec![0u8; size];
        self.file_read(node, 0, &mut buf)?;
        Ok(buf)
    }

    /// Writes `data` at `offset`, growing the file. A gap before `offset`
    /// reads back as zeros.
    pub fn file_write(&mut self, node: &mut FatNode, offset: u64, data: &[u8]) -> Result<()> {
        Self::expect_file(node)?;
        let end = offset + data.len() as u64;
        if end > MAX_FILE_SIZE {
            return Err(FatError::FileTooLarge(end));
        }
        let (loc, mut entry) = self.load_entry(node)?;
        let size = entry.file_size as u64;
        let mut chain = self.chain_of(entry.first_cluster)?;
        if end > chain.capacity() {
            chain.set_length(&mut self.dev, &mut self.fat, end, 0)?;
        }
        if offset > size {
            let zero = vec![0u8; (offset - size).min(1 << 20) as usize];
            let mut at = size;
            while at < offset {
                let n = (offset - at).min(zero.len() as u64) as usize;
                chain.write(&mut self.dev, &self.boot, at, &zero[..n])?;
                at += n as u64;
            }
        }
        chain.write(&mut self.dev, &self.boot, offset, data)?;
        let (date, time, _) = self.stamp()?;
        entry.first_cluster = chain.start();
        entry.file_size = size.max(end) as u32;
        entry.write_date = date;
        entry.write_time = time;
        entry.attributes |= attr::ARCHIVE;
        self.store_entry(loc.dir, loc.slot, &entry)?;
        self.apply(node, &entry);
        Ok(())
    }

    /// Replaces the whole content of `node`.
    pub fn write_all(&mut self, node: &mut FatNode, data: &[u8]) -> Result<()> {
        self.set_file_length(node, data.len() as u64)?;
        self.file_write(node, 0, data)
    }

    /// Sets the size of `node`, allocating or freeing clusters. Newly
    /// allocated clusters are not cleared.
    pub fn set_file_length(&mut self, node: &mut FatNode, len: u64) -> Result<()> {
        Self::expect_file(node)?;
        if len > MAX_FILE_SIZE {
            return Err(FatError::FileTooLarge(len));
        }
        let (loc, mut entry) = self.load_entry(node)?;
        let mut chain = self.chain_of(entry.first_cluster)?;
        chain.set_length(&mut self.dev, &mut self.fat, len, 0)?;
        let (date, time, _) = self.stamp()?;
        entry.first_cluster = chain.start();
        entry.file_size = len as u32;
        entry.write_date = date;
        entry.write_time = time;
        entry.attributes |= attr::ARCHIVE;
        self.store_entry(loc.dir, loc.slot, &entry)?;
        self.apply(node, &entry);
        Ok(())
    }

    fn apply(&self, node: &mut FatNode, entry: &DirectoryEntry) {
        node.start_cluster = entry.first_cluster;
        node.size = entry.file_size;
        node.attributes = entry.attributes;
        node.modified = entry.modified();
        node.accessed = entry.accessed();
    }

    /// The root label entry if present, else the boot-sector label.
    pub fn volume_label(&mut self) -> Result<String> {
        let root = self.boot.root_cluster;
        let label = self
            .read_dir(root)?
            .into_iter()
            .find(|p| p.entry.is_volume_label())
            .map(|p| {
                String::from_utf8_lossy(&p.entry.name)
                    .trim_end()
                    .to_string()
            });
        Ok(label.unwrap_or_else(|| self.boot.label()))
    }

    /// Stores `label` in the boot sector, its backup and the root label
    /// entry, which is created only if missing.
    pub fn set_volume_label(&mut self, label: &str) -> Result<()> {
        let bytes = label_bytes(label)?;
        let root = self.boot.root_cluster;
        let existing = self
            .read_dir(root)?
            .into_iter()
            .find(|p| p.entry.is_volume_label());
        let (date, time, _) = self.stamp()?;
        match existing {
            Some(mut p) => {
                p.entry.name = bytes;
                p.entry.write_date = date;
                p.entry.write_time = time;
                self.store_entry(root, p.slot, &p.entry)?;
            }
            None => {
                let entry = DirectoryEntry {
                    name: bytes,
                    attributes: attr::VOLUME_ID,
                    write_date: date,
                    write_time: time,
                    ..Default::default()
                };
                self.insert_records(root, &entry.to_bytes())?;
            }
        }
        self.boot.volume_label = bytes;
        let mut sector = vec![0u8; self.boot.bytes_per_sector as usize];
        self.dev.read_at(0, &mut sector)?;
        sector[71..82].copy_from_slice(&bytes);
        self.dev.write_at(0, &sector)?;
        if self.boot.backup_boot_sector != 0 {
            self.dev.write_at(
                self.boot.backup_boot_sector as u64 * self.boot.bytes_per_sector(),
                &sector,
            )?;
        }
        Ok(())
    }

    /// FSInfo as last written to disk.
    pub fn stored_fsinfo(&mut self) -> Result<boot::FsInfo> {
        boot::read_fsinfo(&mut self.dev, &self.boot)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockdev::MemDevice;
    use crate::fat32::format::format_volume;

    fn clock() -> Box<FixedClock> {
        Box::new(FixedClock(
            NaiveDate::from_ymd_opt(2024, 5, 17)
                .unwrap()
                .and_hms_opt(10, 20, 30)
                .unwrap(),
        ))
    }

    fn fresh(mb: u64, spc: u8) -> FatFs<MemDevice> {
        let mut dev = MemDevice::new(512, mb * 2048).unwrap();
        format_volume(&mut dev, "USBSTICK", spc).unwrap();
        FatFs::with_clock(dev, clock()).unwrap()
    }

    fn names(fs: &mut FatFs<MemDevice>, dir: &FatNode) -> Vec<String> {
        fs.list_children(dir)
            .unwrap()
            .into_iter()
            .map(|n| n.name)
            .collect()
    }

    #[test]
    fn fresh_root_is_empty() {
        let mut fs = fresh(8, 1);
        let root = fs.root();
        assert!(fs.list_children(&root).unwrap().is_empty());
        assert_eq!(fs.volume_label().unwrap(), "USBSTICK");
    }

    #[test]
    fn create_list_and_duplicate() {
        let mut fs = fresh(8, 1);
        let root = fs.root();
        let a = fs.create_child(&root, "a.txt", NodeKind::File).unwrap();
        assert_eq!((a.start_cluster, a.size), (0, 0));
        assert_eq!(&a.short_name, b"A       TXT");
        assert_eq!(names(&mut fs, &root), vec!["a.txt"]);
        assert!(matches!(
            fs.create_child(&root, "a.txt", NodeKind::File),
            Err(FatError::AlreadyExists(_))
        ));
        assert!(matches!(
            fs.create_child(&root, "A.TXT", NodeKind::File),
            Err(FatError::AlreadyExists(_))
        ));
        let b = fs.create_child(&root, "B.TXT", NodeKind::File).unwrap();
        assert_eq!(b.long_name, None);
    }

    #[test]
    fn subdirectory_dot_entries() {
        let mut fs = fresh(8, 1);
        let root = fs.root();
        let docs = fs.create_child(&root, "docs", NodeKind::Directory).unwrap();
        let raw = fs.read_dir(docs.start_cluster).unwrap();
        assert_eq!(raw[0].entry.name, DOT);
        assert_eq!(raw[0].entry.first_cluster, docs.start_cluster);
        assert_eq!(raw[1].entry.name, DOTDOT);
        assert_eq!(raw[1].entry.first_cluster, 0);
        assert_eq!((raw[0].first_slot, raw[1].first_slot), (0, 1));
        let sub = fs.create_child(&docs, "sub", NodeKind::Directory).unwrap();
        let raw = fs.read_dir(sub.start_cluster).unwrap();
        assert_eq!(raw[1].entry.first_cluster, docs.start_cluster);
        assert!(fs
            .list_children(&docs)
            .unwrap()
            .iter()
            .all(|n| n.name == "sub"));
        assert_eq!(
            fs.lookup("/DOCS/Sub").unwrap().start_cluster,
            sub.start_cluster
        );
    }

    #[test]
    fn directory_grows_past_one_cluster() {
        let mut fs = fresh(8, 8);
        let root = fs.root();
        let dir = fs.create_child(&root, "D", NodeKind::Directory).unwrap();
        // Two dot entries plus 126 short-only files fill the 4 KiB cluster.
        for i in 0..126 {
            fs.create_child(&dir, &format!("F{i}"), NodeKind::File)
                .unwrap();
        }
        assert_eq!(fs.chain_of(dir.start_cluster).unwrap().clusters.len(), 1);
        let free = fs.free_count();
        fs.create_child(&dir, "LAST", NodeKind::File).unwrap();
        let chain = fs.chain_of(dir.start_cluster).unwrap();
        assert_eq!(chain.clusters.len(), 2);
        assert_eq!(fs.free_count(), free - 1);
        let (_, bytes) = fs.read_dir_bytes(dir.start_cluster).unwrap();
        assert_eq!(bytes[129 * 32], 0);
        assert_eq!(fs.list_children(&dir).unwrap().len(), 127);
    }

    #[test]
    fn write_read_and_delete() {
        let mut fs = fresh(8, 1);
        let root = fs.root();
        let mut f = fs.create_child(&root, "data.bin", NodeKind::File).unwrap();
        fs.file_write(&mut f, 0, &[7]).unwrap();
        assert_eq!(f.size, 1);
        assert_eq!(fs.chain_of(f.start_cluster).unwrap().clusters.len(), 1);
        let data: Vec<u8> = (0..1536u32).map(|i| (i * 7 % 251) as u8).collect();
        fs.file_write(&mut f, 0, &data).unwrap();
        assert_eq!(fs.chain_of(f.start_cluster).unwrap().clusters.len(), 3);
        assert_eq!(fs.read_all(&f).unwrap(), data);
        let mut buf = [0u8; 1];
        assert!(matches!(
            fs.file_read(&f, 1536, &mut buf),
            Err(FatError::OutOfRange { .. })
        ));
        let free = fs.free_count();
        fs.delete_node(&f).unwrap();
        assert_eq!(fs.free_count(), free + 3);
        assert!(fs.list_children(&root).unwrap().is_empty());
        let again = fs.create_child(&root, "x", NodeKind::File).unwrap();
        assert_eq!(
            again.location.unwrap().first_slot,
            f.location.unwrap().first_slot
        );
    }

    #[test]
    fn sparse_write_zero_fills() {
        let mut fs = fresh(8, 1);
        let root = fs.root();
        let mut f = fs.create_child(&root, "gap", NodeKind::File).unwrap();
        fs.file_write(&mut f, 0, &[1; 10]).unwrap();
        fs.set_file_length(&mut f, 4).unwrap();
        fs.file_write(&mut f, 1000, &[2]).unwrap();
        let all = fs.read_all(&f).unwrap();
        assert_eq!(all.len(), 1001);
        assert!(all[4..1000].iter().all(|&b| b == 0));
        assert_eq!(&all[..4], &[1; 4]);
    }

    #[test]
    fn size_limit() {
        let mut fs = fresh(8, 1);
        let root = fs.root();
        let mut f = fs.create_child(&root, "big", NodeKind::File).unwrap();
        assert!(matches!(
            fs.file_write(&mut f, MAX_FILE_SIZE, &[0]),
            Err(FatError::FileTooLarge(n)) if n == 1 << 32
        ));
        assert!(matches!(
            fs.set_file_length(&mut f, 1 << 32),
            Err(FatError::FileTooLarge(_))
        ));
    }

    #[test]
    fn delete_rules() {
        let mut fs = fresh(8, 1);
        let root = fs.root();
        let d = fs.create_child(&root, "d", NodeKind::Directory).unwrap();
        fs.create_child(&d, "inner", NodeKind::File).unwrap();
        assert!(matches!(
            fs.delete_node(&d),
            Err(FatError::DirectoryNotEmpty(_))
        ));
        assert!(matches!(fs.delete_node(&root), Err(FatError::Root(_))));
    }

    #[test]
    fn rename_and_move() {
        let mut fs = fresh(8, 1);
        let root = fs.root();
        let mut a = fs.create_child(&root, "a.txt", NodeKind::File).unwrap();
        fs.file_write(&mut a, 0, b"hello").unwrap();
        let b = fs.move_node(&a, &root, Some("b.txt")).unwrap();
        assert_eq!(b.start_cluster, a.start_cluster);
        assert_eq!(fs.read_all(&b).unwrap(), b"hello");
        assert_eq!(names(&mut fs, &root), vec!["b.txt"]);

        let docs = fs.create_child(&root, "docs", NodeKind::Directory).unwrap();
        let x = fs.create_child(&root, "x", NodeKind::Directory).unwrap();
        let moved = fs.move_node(&x, &docs, None).unwrap();
        let raw = fs.read_dir(moved.start_cluster).unwrap();
        assert_eq!(raw[1].entry.first_cluster, docs.start_cluster);
        let sub = fs.create_child(&docs, "sub", NodeKind::Directory).unwrap();
        assert!(matches!(
            fs.move_node(&docs, &sub, None),
            Err(FatError::Cycle)
        ));
        assert!(matches!(
            fs.move_node(&docs, &docs, None),
            Err(FatError::Cycle)
        ));
        let back = fs.move_node(&moved, &root, None).unwrap();
        assert_eq!(
            fs.read_dir(back.start_cluster).unwrap()[1]
                .entry
                .first_cluster,
            0
        );
        let renamed = fs.move_node(&b, &root, Some("B.TXT")).unwrap();
        assert_eq!(renamed.name, "B.TXT");
    }

    #[test]
    fn label_is_written_once() {
        let mut fs = fresh(8, 1);
        fs.set_volume_label("backup").unwrap();
        assert_eq!(fs.volume_label().unwrap(), "BACKUP");
        let root = fs.boot().root_cluster;
        let labels = fs
            .read_dir(root)
            .unwrap()
            .iter()
            .filter(|p| p.entry.is_volume_label())
            .count();
        assert_eq!(labels, 1);
        let dev = fs.into_device();
        let fs = FatFs::mount(dev).unwrap();
        assert_eq!(fs.boot().label(), "BACKUP");
    }

    #[test]
    fn label_falls_back_to_boot_sector() {
        let mut dev = MemDevice::new(512, 4096).unwrap();
        format_volume(&mut dev, "", 1).unwrap();
        let mut fs = FatFs::mount(dev).unwrap();
        assert_eq!(fs.volume_label().unwrap(), "NO NAME");
    }

    #[test]
    fn long_names_survive_remount() {
        let mut fs = fresh(8, 1);
        let root = fs.root();
        let name = "A rather long file name, with punctuation [1].txt";
        let mut f = fs.create_child(&root, name, NodeKind::File).unwrap();
        fs.file_write(&mut f, 0, b"x").unwrap();
        let fs2 = &mut FatFs::mount(fs.into_device()).unwrap();
        let n = fs2.lookup(&format!("/{name}")).unwrap();
        assert_eq!(n.name, name);
        assert_eq!(&n.short_name, b"ARATHE~1TXT");
        assert_eq!(n.created.unwrap().to_string(), "2024-05-17 10:20:30");
    }
}
