//! Block-addressed storage.
//!
//! Every layer of the stack (SCSI target backing store, SCSI host driver,
//! partition views, the FAT32 driver) talks to storage through
//! [`BlockDevice`]. Implementations provide whole-block I/O; the trait's
//! provided `read_at`/`write_at` methods resolve arbitrary byte ranges onto
//! block-aligned backend I/O, doing read-modify-write for partial blocks.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Block size used when none is given.
pub const DEFAULT_BLOCK_SIZE: u32 = 512;

#[derive(Debug, Error)]
pub enum BlockError {
    #[error(
        "access of {len} bytes at offset {offset} exceeds device capacity of {capacity} bytes"
    )]
    OutOfRange {
        offset: u64,
        len: u64,
        capacity: u64,
    },
    #[error("buffer of {len} bytes is not a whole number of {block_size}-byte blocks")]
    Unaligned { len: usize, block_size: u32 },
    #[error("image size {size} is not a multiple of block size {block_size}")]
    SizeMisaligned { size: u64, block_size: u32 },
    #[error("invalid block size {0}")]
    InvalidBlockSize(u32),
    #[error("device is read-only")]
    ReadOnly,
    #[error("{path}: {source}")]
    Open { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
    /// Failure reported by a device implementation layered over another
    /// protocol (e.g. the SCSI host driver).
    #[error("{layer}: {source}")]
    Backend {
        layer: &'static str,
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

pub type Result<T, E = BlockError> = std::result::Result<T, E>;

/// A fixed-geometry, block-addressed storage medium.
///
/// A device is single-owner: it may be sent to another thread but is not
/// meant for concurrent use.
pub trait BlockDevice {
    fn block_size(&self) -> u32;

    fn block_count(&self) -> u64;

    /// Reads whole blocks starting at `lba`. `buf.len()` must be a multiple
    /// of the block size.
    fn read_blocks(&mut self, lba: u64, buf: &mut [u8]) -> Result<()>;

    /// Writes whole blocks starting at `lba`.
    fn write_blocks(&mut self, lba: u64, buf: &[u8]) -> Result<()>;

    fn flush(&mut self) -> Result<()> {
        Ok(())
    }

    fn capacity(&self) -> u64 {
        self.block_size() as u64 * self.block_count()
    }

    /// Reads `buf.len()` bytes at an arbitrary byte offset.
    fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> Result<()> {
        check_byte_range(self.capacity(), offset, buf.len())?;
        let bs = self.block_size() as u64;
        let mut done = 0usize;
        while done < buf.len() {
            let pos = offset + done as u64;
            let lba = pos / bs;
            let within = (pos % bs) as usize;
            let remaining = buf.len() - done;
            if within == 0 && remaining as u64 >= bs {
                let whole = (remaining as u64 / bs * bs) as usize;
                self.read_blocks(lba, &mut buf[done..done + whole])?;
                done += whole;
            } else {
                let mut block = vec![0u8; bs as usize];
                self.read_blocks(lba, &mut block)?;
                let n = remaining.min(bs as usize - within);
                buf[done..done + n].copy_from_slice(&block[within..within + n]);
                done += n;
            }
        }
        Ok(())
    }

    /// Writes `data` at an arbitrary byte offset; bytes outside the range are
    /// preserved.
    fn write_at(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        check_byte_range(self.capacity(), offset, data.len())?;
        let bs = self.block_size() as u64;
        let mut done = 0usize;
        while done < data.len() {
            let pos = offset + done as u64;
            let lba = pos / bs;
            let within = (pos % bs) as usize;
            let remaining = data.len() - done;
            if within == 0 && remaining as u64 >= bs {
                let whole = (remaining as u64 / bs * bs) as usize;
                self.write_blocks(lba, &data[done..done + whole])?;
                done += whole;
            } else {
                let mut block = vec![0u8; bs as usize];
                self.read_blocks(lba, &mut block)?;
                let n = remaining.min(bs as usize - within);
                block[within..within + n].copy_from_slice(&data[done..done + n]);
                self.write_blocks(lba, &block)?;
                done += n;
            }
        }
        Ok(())
    }
}

impl<D: BlockDevice + ?Sized> BlockDevice for &mut D {
    fn block_size(&self) -> u32 {
        (**self).block_size()
    }
    fn block_count(&self) -> u64 {
        (**self).block_count()
    }
    fn read_blocks(&mut self, lba: u64, buf: &mut [u8]) -> Result<()> {
        (**self).read_blocks(lba, buf)
    }
    fn write_blocks(&mut self, lba: u64, buf: &[u8]) -> Result<()> {
        (**self).write_blocks(lba, buf)
    }
    fn flush(&mut self) -> Result<()> {
        (**self).flush()
    }
    fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> Result<()> {
        (**self).read_at(offset, buf)
    }
    fn write_at(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        (**self).write_at(offset, data)
    }
}

impl<D: BlockDevice + ?Sized> BlockDevice for Box<D> {
    fn block_size(&self) -> u32 {
        (**self).block_size()
    }
    fn block_count(&self) -> u64 {
        (**self).block_count()
    }
    fn read_blocks(&mut self, lba: u64, buf: &mut [u8]) -> Result<()> {
        (**self).read_blocks(lba, buf)
    }
    fn write_blocks(&mut self, lba: u64, buf: &[u8]) -> Result<()> {
        (**self).write_blocks(lba, buf)
    }
    fn flush(&mut self) -> Result<()> {
        (**self).flush()
    }
    fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> Result<()> {
        (**self).read_at(offset, buf)
    }
    fn write_at(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        (**self).write_at(offset, data)
    }
}

/// Rejects byte ranges that do not lie within `capacity`.
pub fn check_byte_range(capacity: u64, offset: u64, len: usize) -> Result<()> {
    match offset.checked_add(len as u64) {
        Some(end) if end <= capacity => Ok(()),
        _ => Err(BlockError::OutOfRange {
            offset,
            len: len as u64,
            capacity,
        }),
    }
}

/// Validates a whole-block request and returns its byte offset.
pub fn check_block_range(block_size: u32, block_count: u64, lba: u64, len: usize) -> Result<u64> {
    if !len.is_multiple_of(block_size as usize) {
        return Err(BlockError::Unaligned { len, block_size });
    }
    let offset = lba
        .checked_mul(block_size as u64)
        .ok_or(BlockError::OutOfRange {
            offset: u64::MAX,
            len: len as u64,
            capacity: block_size as u64 * block_count,
        })?;
    check_byte_range(block_size as u64 * block_count, offset, len)?;
    Ok(offset)
}

fn validate_block_size(block_size: u32) -> Result<()> {
    if block_size == 0 {
        Err(BlockError::InvalidBlockSize(block_size))
    } else {
        Ok(())
    }
}

/// Contiguous in-memory medium.
#[derive(Debug, Clone)]
pub struct MemDevice {
    data: Vec<u8>,
    block_size: u32,
}

impl MemDevice {
    /// Zero-filled device of `block_count` blocks.
    pub fn new(block_size: u32, block_count: u64) -> Result<Self> {
        validate_block_size(block_size)?;
        Ok(MemDevice {
            data: vec![0; (block_size as u64 * block_count) as usize],
            block_size,
        })
    }

    /// Wraps an existing byte image.
    pub fn from_vec(data: Vec<u8>, block_size: u32) -> Result<Self> {
        validate_block_size(block_size)?;
        if !(data.len() as u64).is_multiple_of(block_size as u64) {
            return Err(BlockError::SizeMisaligned {
                size: data.len() as u64,
                block_size,
            });
        }
        Ok(MemDevice { data, block_size })
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.data
    }
}

impl BlockDevice for MemDevice {
    fn block_size(&self) -> u32 {
        self.block_size
    }

    fn block_count(&self) -> u64 {
        self.data.len() as u64 / self.block_size as u64
    }

    fn read_blocks(&mut self, lba: u64, buf: &mut [u8]) -> Result<()> {
        let off = check_block_range(self.block_size, self.block_count(), lba, buf.len())? as usize;
        buf.copy_from_slice(&self.data[off..off + buf.len()]);
        Ok(())
    }

    fn write_blocks(&mut self, lba: u64, buf: &[u8]) -> Result<()> {
        let off = check_block_range(self.block_size, self.block_count(), lba, buf.len())? as usize;
        self.data[off..off + buf.len()].copy_from_slice(buf);
        Ok(())
    }

    fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> Result<()> {
        check_byte_range(self.data.len() as u64, offset, buf.len())?;
        let off = offset as usize;
        buf.copy_from_slice(&self.data[off..off + buf.len()]);
        Ok(())
    }

    fn write_at(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        check_byte_range(self.data.len() as u64, offset, data.len())?;
        let off = offset as usize;
        self.data[off..off + data.len()].copy_from_slice(data);
        Ok(())
    }
}

/// In-memory medium that only stores blocks that have been written.
///
/// Lets tests address multi-gigabyte geometries without allocating them;
/// unwritten blocks read as zeros.
#[derive(Debug, Clone, Default)]
pub struct SparseMemDevice {
    blocks: HashMap<u64, Box<[u8]>>,
    block_size: u32,
    block_count: u64,
}

impl SparseMemDevice {
    pub fn new(block_size: u32, block_count: u64) -> Result<Self> {
        validate_block_size(block_size)?;
        Ok(SparseMemDevice {
            blocks: HashMap::new(),
            block_size,
            block_count,
        })
    }

    /// Number of blocks that hold materialized storage.
    pub fn resident_blocks(&self) -> usize {
        self.blocks.len()
    }
}

impl BlockDevice for SparseMemDevice {
    fn block_size(&self) -> u32 {
        self.block_size
    }

    fn block_count(&self) -> u64 {
        self.block_count
    }

    fn read_blocks(&mut self, lba: u64, buf: &mut [u8]) -> Result<()> {
        check_block_range(self.block_size, self.block_count, lba, buf.len())?;
        for (i, chunk) in buf.chunks_mut(self.block_size as usize).enumerate() {
            match self.blocks.get(&(lba + i as u64)) {
                Some(b) => chunk.copy_from_slice(b),
                None => chunk.fill(0),
            }
        }
        Ok(())
    }

    fn write_blocks(&mut self, lba: u64, buf: &[u8]) -> Result<()> {
        check_block_range(self.block_size, self.block_count, lba, buf.len())?;
        for (i, chunk) in buf.chunks(self.block_size as usize).enumerate() {
            let key = lba + i as u64;
            if chunk.iter().all(|&b| b == 0) {
                self.blocks.remove(&key);
            } else {
                self.blocks.insert(key, chunk.into());
            }
        }
        Ok(())
    }
}

/// Raw disk image on the host filesystem.
#[derive(Debug)]
pub struct FileDevice {
    file: File,
    path: PathBuf,
    block_size: u32,
    block_count: u64,
    read_only: bool,
}

impl FileDevice {
    /// Opens an existing image read-write. Its length must be a whole
    /// multiple of `block_size`.
    pub fn open(path: impl AsRef<Path>, block_size: u32) -> Result<Self> {
        Self::open_with(path, block_size, false)
    }

    pub fn open_read_only(path: impl AsRef<Path>, block_size: u32) -> Result<Self> {
        Self::open_with(path, block_size, true)
    }

    fn open_with(path: impl AsRef<Path>, block_size: u32, read_only: bool) -> Result<Self> {
        validate_block_size(block_size)?;
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .read(true)
            .write(!read_only)
            .open(&path)
            .map_err(|source| BlockError::Open {
                path: path.clone(),
                source,
            })?;
        let size = file.metadata()?.len();
        if size % block_size as u64 != 0 {
            return Err(BlockError::SizeMisaligned { size, block_size });
        }
        Ok(FileDevice {
            file,
            path,
            block_size,
            block_count: size / block_size as u64,
            read_only,
        })
    }

    /// Creates (or truncates) a zero-filled image of `size_bytes`.
    pub fn create(path: impl AsRef<Path>, size_bytes: u64, block_size: u32) -> Result<Self> {
        validate_block_size(block_size)?;
        if !size_bytes.is_multiple_of(block_size as u64) {
            return Err(BlockError::SizeMisaligned {
                size: size_bytes,
                block_size,
            });
        }
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(&path)
            .map_err(|source| BlockError::Open {
                path: path.clone(),
                source,
            })?;
        file.set_len(size_bytes)?;
        Ok(FileDevice {
            file,
            path,
            block_size,
            block_count: size_bytes / block_size as u64,
            read_only: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl BlockDevice for FileDevice {
    fn block_size(&self) -> u32 {
        self.block_size
    }

    fn block_count(&self) -> u64 {
        self.block_count
    }

    fn read_blocks(&mut self, lba: u64, buf: &mut [u8]) -> Result<()> {
        let off = check_block_range(self.block_size, self.block_count, lba, buf.len())?;
        self.file.seek(SeekFrom::Start(off))?;
        self.file.read_exact(buf)?;
        Ok(())
    }

    fn write_blocks(&mut self, lba: u64, buf: &[u8]) -> Result<()> {
        if self.read_only {
            return Err(BlockError::ReadOnly);
        }
        let off = check_block_range(self.block_size, self.block_count, lba, buf.len())?;
        self.file.seek(SeekFrom::Start(off))?;
        self.file.write_all(buf)?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }

    // The backing file is byte addressable, so skip the block resolution.
    fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> Result<()> {
        check_byte_range(self.capacity(), offset, buf.len())?;
        self.file.seek(SeekFrom::Start(offset))?;
        self.file.read_exact(buf)?;
        Ok(())
    }

    fn write_at(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        if self.read_only {
            return Err(BlockError::ReadOnly);
        }
        check_byte_range(self.capacity(), offset, data.len())?;
        self.file.seek(SeekFrom::Start(offset))?;
        self.file.write_all(data)?;
        Ok(())
    }
}

/// Opens an image file, optionally creating it zero-filled.
pub fn open_image(
    path: impl AsRef<Path>,
    block_size: u32,
    create_size: Option<u64>,
) -> Result<FileDevice> {
    match create_size {
        Some(size) => FileDevice::create(path, size, block_size),
        None => FileDevice::open(path, block_size),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exposes only the block-level methods so the provided byte-range
    /// resolution in the trait is what gets tested.
    struct BlocksOnly(MemDevice);

    impl BlockDevice for BlocksOnly {
        fn block_size(&self) -> u32 {
            self.0.block_size()
        }
        fn block_count(&self) -> u64 {
            self.0.block_count()
        }
        fn read_blocks(&mut self, lba: u64, buf: &mut [u8]) -> Result<()> {
            self.0.read_blocks(lba, buf)
        }
        fn write_blocks(&mut self, lba: u64, buf: &[u8]) -> Result<()> {
            self.0.write_blocks(lba, buf)
        }
    }

    #[test]
    fn fresh_device_reads_zero() {
        let mut dev = MemDevice::new(512, 2048).unwrap();
        let mut buf = [0xffu8; 512];
        dev.read_at(0, &mut buf).unwrap();
        assert!(buf.iter().all(|&b| b == 0));
    }

    #[test]
    fn read_back_and_signature_bytes() {
        let mut dev = BlocksOnly(MemDevice::new(512, 2048).unwrap());
        dev.write_at(0, &[0xaa; 512]).unwrap();
        dev.write_at(510, &[0x55, 0xaa]).unwrap();
        let mut buf = [0u8; 512];
        dev.read_at(0, &mut buf).unwrap();
        assert_eq!(&buf[..510], &[0xaa; 510][..]);
        assert_eq!(&buf[510..], &[0x55, 0xaa]);

        dev.write_at(1024, b"hello").unwrap();
        let mut back = [0u8; 5];
        dev.read_at(1024, &mut back).unwrap();
        assert_eq!(&back, b"hello");
    }

    #[test]
    fn one_past_end_is_range_error() {
        let mut dev = MemDevice::new(512, 2048).unwrap();
        let mut b = [0u8; 1];
        assert!(matches!(
            dev.read_at(2048 * 512, &mut b),
            Err(BlockError::OutOfRange { .. })
        ));
        let mut dev = BlocksOnly(dev);
        assert!(matches!(
            dev.write_at(2048 * 512 - 1, &[1, 2]),
            Err(BlockError::OutOfRange { .. })
        ));
    }

    #[test]
    fn disjoint_writes_do_not_interfere() {
        let mut dev = BlocksOnly(MemDevice::new(512, 8).unwrap());
        dev.write_at(0, &[1; 512]).unwrap();
        dev.write_at(512, &[2; 512]).unwrap();
        let mut a = [0u8; 512];
        let mut b = [0u8; 512];
        dev.read_at(0, &mut a).unwrap();
        dev.read_at(512, &mut b).unwrap();
        assert_eq!(a, [1; 512]);
        assert_eq!(b, [2; 512]);
    }

    #[test]
    fn image_open_and_create() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img");
        std::fs::write(&p, vec![0u8; 8 << 20]).unwrap();
        assert_eq!(open_image(&p, 512, None).unwrap().block_count(), 16384);

        let bad = dir.path().join("bad");
        std::fs::write(&bad, vec![0u8; 1000]).unwrap();
        assert!(matches!(
            open_image(&bad, 512, None),
            Err(BlockError::SizeMisaligned { size: 1000, .. })
        ));

        let created = dir.path().join("new");
        let mut dev = open_image(&created, 512, Some(4 << 20)).unwrap();
        assert_eq!(dev.block_count(), 8192);
        let mut buf = [1u8; 64];
        dev.read_at(4 * 1024 * 1024 - 64, &mut buf).unwrap();
        assert_eq!(buf, [0; 64]);

        assert!(matches!(
            open_image(dir.path().join("missing"), 512, None),
            Err(BlockError::Open { .. })
        ));
    }

    #[test]
    fn read_only_file_rejects_writes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ro");
        std::fs::write(&p, vec![0u8; 4096]).unwrap();
        let mut dev = FileDevice::open_read_only(&p, 512).unwrap();
        assert!(matches!(dev.write_at(0, &[1]), Err(BlockError::ReadOnly)));
    }

    #[test]
    fn sparse_device_materializes_only_written_blocks() {
        let mut dev = SparseMemDevice::new(512, 1 << 24).unwrap();
        dev.write_at((1u64 << 33) - 3, &[7, 8, 9]).unwrap();
        assert_eq!(dev.resident_blocks(), 1);
        let mut buf = [0u8; 4];
        dev.read_at((1u64 << 33) - 4, &mut buf).unwrap();
        assert_eq!(buf, [0, 7, 8, 9]);
    }

    proptest! {
        #[test]
        fn write_then_read_returns_data(
            offset in 0u64..(16 * 512),
            data in proptest::collection::vec(any::<u8>(), 1..2000),
        ) {
            let mut dev = BlocksOnly(MemDevice::new(512, 32).unwrap());
            prop_assume!(offset + data.len() as u64 <= dev.capacity());
            let mut before = vec![0u8; dev.capacity() as usize];
            dev.read_at(0, &mut before).unwrap();
            dev.write_at(offset, &data).unwrap();
            let mut after = vec![0u8; dev.capacity() as usize];
            dev.read_at(0, &mut after).unwrap();
            let o = offset as usize;
            prop_assert_eq!(&after[o..o + data.len()], &data[..]);
            prop_assert_eq!(&after[..o], &before[..o]);
            prop_assert_eq!(&after[o + data.len()..], &before[o + data.len()..]);
        }

        #[test]
        fn disjoint_writes_commute(
            a in proptest::collection::vec(any::<u8>(), 1..600),
            b in proptest::collection::vec(any::<u8>(), 1..600),
            gap in 0u64..700,
        ) {
            let oa = 3u64;
            let ob = oa + a.len() as u64 + gap;
            let mut one = BlocksOnly(MemDevice::new(512, 8).unwrap());
            let mut two = BlocksOnly(MemDevice::new(512, 8).unwrap());
            one.write_at(oa, &a).unwrap();
            one.write_at(ob, &b).unwrap();
            two.write_at(ob, &b).unwrap();
            two.write_at(oa, &a).unwrap();
            prop_assert_eq!(one.0.as_bytes(), two.0.as_bytes());
        }
    }
}
