//! Command-line front end over disk images. Every command can run
//! directly on the image file or through the emulated USB mass-storage
//! device (`--via-scsi`), which exercises the SCSI host, bulk-only
//! transport and target on every block access.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use clap::{Args, Parser, Subcommand};
use log::debug;
use serde_json::{json, Value};

use umstk::blockdev::{BlockDevice, BlockError, FileDevice};
use umstk::fat32::{attr, Clock, FatError, FatFs, FatNode, FixedClock, NodeKind, SystemClock};
use umstk::image::{build_image, mount_partition_with, ImageOptions, VolumeError};
use umstk::mbr::{probe_layout, MbrError, PartitionTableEntry, PartitionView, VolumeLayout};
use umstk::scsi::host::init_device;
use umstk::scsi::TargetEmulator;
use umstk::selftest::{run_selftest, SelftestOptions};
use umstk::transport::loopback_pair;

/// Version of the `--json` output layout.
pub const JSON_SCHEMA: u32 = 1;

const SECTOR: u32 = 512;

#[derive(Debug, Parser)]
#[command(
    name = "umstk",
    version,
    about = "Inspect and modify FAT32 disk images"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Partition to operate on (0 for an unpartitioned image)
    #[arg(long, global = true, default_value_t = 0)]
    partition: usize,
    /// Route all block I/O through the emulated USB device
    #[arg(long, global = true)]
    via_scsi: bool,
    /// Machine-readable output
    #[arg(long, global = true)]
    json: bool,
    /// Fixed time for new timestamps, as YYYY-MM-DDTHH:MM:SS
    #[arg(long, global = true, value_parser = parse_time)]
    clock: Option<NaiveDateTime>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Show the partition table, filesystem geometry, label and free space
    Info { image: PathBuf },
    /// List a directory
    Ls {
        image: PathBuf,
        #[arg(default_value = "/")]
        path: String,
    },
    /// Copy a file out of the image
    Get {
        image: PathBuf,
        path: String,
        dest: PathBuf,
    },
    /// Copy a file into the image
    Put {
        image: PathBuf,
        source: PathBuf,
        path: String,
        /// Replace an existing file
        #[arg(long, short = 'f')]
        force: bool,
    },
    /// Create a directory
    Mkdir {
        image: PathBuf,
        path: String,
        /// Create missing parents too
        #[arg(long, short = 'p')]
        parents: bool,
    },
    /// Remove a file or an empty directory
    Rm {
        image: PathBuf,
        path: String,
        /// Remove directories and their contents
        #[arg(long, short = 'r')]
        recursive: bool,
    },
    /// Move or rename a file or directory
    Mv {
        image: PathBuf,
        from: String,
        to: String,
    },
    /// Show or set the volume label
    Label {
        image: PathBuf,
        new_label: Option<String>,
    },
    /// Create a new image holding an empty FAT32 volume
    Mkimage {
        image: PathBuf,
        /// Image size in bytes; K, M and G suffixes allowed
        #[arg(long, value_parser = parse_size)]
        size: u64,
        #[arg(long, default_value = "")]
        label: String,
        /// Put the volume in a partition starting at LBA 2048
        #[arg(long)]
        mbr: bool,
        /// Sectors per cluster (default depends on the size)
        #[arg(long)]
        spc: Option<u8>,
        /// Overwrite an existing file
        #[arg(long, short = 'f')]
        force: bool,
    },
    /// Run the transport conformance scenarios against the emulated device
    Selftest {
        /// Bytes moved by the bulk round trip
        #[arg(long, value_parser = parse_size, default_value = "16M")]
        bytes: u64,
        #[arg(long, default_value_t = 0x5eed)]
        seed: u64,
    },
}

fn parse_time(s: &str) -> Result<NaiveDateTime, String> {
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .map_err(|e| e.to_string())
}

fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (digits, shift) = match s.chars().last().map(|c| c.to_ascii_uppercase()) {
        Some('K') => (&s[..s.len() - 1], 10),
        Some('M') => (&s[..s.len() - 1], 20),
        Some('G') => (&s[..s.len() - 1], 30),
        _ => (s, 0),
    };
    let n: u64 = digits.parse().map_err(|_| format!("bad size {s:?}"))?;
    n.checked_mul(1 << shift)
        .ok_or_else(|| format!("size {s:?} too large"))
}

/// Exit status and captured output of one invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

#[derive(Debug)]
enum CliError {
    /// Bad path, duplicate name, not FAT32 and the like.
    User(String),
    /// I/O or protocol failure.
    Io(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::User(m) | CliError::Io(m) => m,
        }
    }
}

fn block_error(e: BlockError) -> CliError {
    match e {
        // already prefixed with its layer
        BlockError::Backend { .. } => CliError::Io(e.to_string()),
        BlockError::Open { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            CliError::User(format!("image: {e}"))
        }
        BlockError::SizeMisaligned { .. } => CliError::User(format!("image: {e}")),
        e => CliError::Io(format!("image: {e}")),
    }
}

impl From<FatError> for CliError {
    fn from(e: FatError) -> Self {
        match e {
            FatError::Io(b) => block_error(b),
            FatError::CorruptChain(_) => CliError::Io(format!("fat32: {e}")),
            e => CliError::User(format!("fat32: {e}")),
        }
    }
}

impl From<MbrError> for CliError {
    fn from(e: MbrError) -> Self {
        match e {
            MbrError::Io(b) => block_error(b),
            e => CliError::User(format!("mbr: {e}")),
        }
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        match e {
            VolumeError::Mbr(e) => e.into(),
            VolumeError::Fat(e) => e.into(),
        }
    }
}

impl From<BlockError> for CliError {
    fn from(e: BlockError) -> Self {
        block_error(e)
    }
}

type Device = Box<dyn BlockDevice>;
type Fs = FatFs<PartitionView<Device>>;

struct Ctx {
    global: Global,
    out: String,
}

impl Ctx {
    fn clock(&self) -> Box<dyn Clock> {
        match self.global.clock {
            Some(t) => Box::new(FixedClock(t)),
            None => Box::new(SystemClock),
        }
    }

    fn wrap<D: BlockDevice + 'static>(&self, dev: D) -> Result<Device, CliError> {
        if !self.global.via_scsi {
            return Ok(Box::new(dev));
        }
        let scsi = init_device(loopback_pair(TargetEmulator::new(dev)))
            .map_err(|e| CliError::Io(format!("scsi: {e}")))?;
        debug!("scsi: device ready, {} blocks", scsi.block_count());
        Ok(Box::new(scsi))
    }

    fn open(&self, image: &Path, writable: bool) -> Result<Device, CliError> {
        let file = if writable {
            FileDevice::open(image, SECTOR)?
        } else {
            FileDevice::open_read_only(image, SECTOR)?
        };
        self.wrap(file)
    }

    fn mount(
        &self,
        image: &Path,
        writable: bool,
    ) -> Result<(Fs, Option<PartitionTableEntry>), CliError> {
        let dev = self.open(image, writable)?;
        let (mut fs, entry) = mount_partition_with(dev, self.global.partition, self.clock())?;
        // read-only commands leave the image untouched
        fs.set_update_access(writable);
        Ok((fs, entry))
    }

    fn emit(&mut self, value: Value) {
        let mut v = json!({ "schema": JSON_SCHEMA });
        if let (Some(base), Value::Object(extra)) = (v.as_object_mut(), value) {
            base.extend(extra);
        }
        self.out
            .push_str(&serde_json::to_string_pretty(&v).expect("json"));
        self.out.push('\n');
    }

    fn line(&mut self, s: impl AsRef<str>) {
        self.out.push_str(s.as_ref());
        self.out.push('\n');
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let (stdout, stderr) = if code == 0 {
                (text, String::new())
            } else {
                (String::new(), text)
            };
            return Outcome {
                code,
                stdout,
                stderr,
            };
        }
    };
    let mut ctx = Ctx {
        global: cli.global,
        out: String::new(),
    };
    let result = execute(&mut ctx, cli.command);
    match result {
        Ok(()) => Outcome {
            code: 0,
            stdout: ctx.out,
            stderr: String::new(),
        },
        Err(e) => {
            let stderr = if ctx.global.json {
                let v =
                    json!({ "schema": JSON_SCHEMA, "error": e.message(), "exit_code": e.code() });
                format!("{}\n", serde_json::to_string_pretty(&v).expect("json"))
            } else {
                format!("umstk: {}\n", e.message())
            };
            Outcome {
                code: e.code(),
                stdout: ctx.out,
                stderr,
            }
        }
    }
}

fn execute(ctx: &mut Ctx, cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Info { image } => info(ctx, &image),
        Command::Ls { image, path } => ls(ctx, &image, &path),
        Command::Get { image, path, dest } => get(ctx, &image, &path, &dest),
        Command::Put {
            image,
            source,
            path,
            force,
        } => put(ctx, &image, &source, &path, force),
        Command::Mkdir {
            image,
            path,
            parents,
        } => mkdir(ctx, &image, &path, parents),
        Command::Rm {
            image,
            path,
            recursive,
        } => rm(ctx, &image, &path, recursive),
        Command::Mv { image, from, to } => mv(ctx, &image, &from, &to),
        Command::Label { image, new_label } => label(ctx, &image, new_label.as_deref()),
        Command::Mkimage {
            image,
            size,
            label,
            mbr,
            spc,
            force,
        } => mkimage(ctx, &image, size, &label, mbr, spc, force),
        Command::Selftest { bytes, seed } => selftest(ctx, bytes, seed),
    }
}

fn finish(fs: &mut Fs) -> Result<(), CliError> {
    fs.flush()?;
    Ok(())
}

fn type_name(t: u8) -> &'static str {
    match t {
        0x01 => "FAT12",
        0x04 | 0x06 | 0x0e => "FAT16",
        0x05 | 0x0f => "extended",
        0x07 => "NTFS/exFAT",
        0x0b | 0x0c => "FAT32",
        0x82 => "Linux swap",
        0x83 => "Linux",
        0xee => "GPT protective",
        0xef => "EFI system",
        _ => "unknown",
    }
}

fn attr_string(a: u8) -> String {
    [
        (attr::DIRECTORY, 'd'),
        (attr::READ_ONLY, 'r'),
        (attr::HIDDEN, 'h'),
        (attr::SYSTEM, 's'),
        (attr::ARCHIVE, 'a'),
    ]
    .iter()
    .map(|&(bit, c)| if a & bit != 0 { c } else { '-' })
    .collect()
}

fn partition_json(index: usize, e: &PartitionTableEntry) -> Value {
    json!({
        "index": index,
        "bootable": e.bootable,
        "type": e.partition_type,
        "type_name": type_name(e.partition_type),
        "first_lba": e.first_lba,
        "sectors": e.sector_count,
    })
}

fn info(ctx: &mut Ctx, image: &Path) -> Result<(), CliError> {
    let mut dev = ctx.open(image, false)?;
    let blocks = dev.block_count();
    let layout = probe_layout(&mut dev)?;
    let partitions = match &layout {
        VolumeLayout::Partitioned(mbr) => mbr.partitions(),
        VolumeLayout::Unpartitioned => Vec::new(),
    };
    let (mut fs, _) = mount_partition_with(dev, ctx.global.partition, ctx.clock())?;
    fs.set_update_access(false);
    let boot = fs.boot().clone();
    let label = fs.volume_label()?;
    let free_clusters = fs.free_count();
    let free_bytes = fs.free_bytes();

    if ctx.global.json {
        ctx.emit(json!({
            "command": "info",
            "image_bytes": blocks * SECTOR as u64,
            "partition_table": if partitions.is_empty() { "none" } else { "mbr" },
            "partitions": partitions.iter().enumerate().map(|(i, e)| partition_json(i, e)).collect::<Vec<_>>(),
            "selected_partition": ctx.global.partition,
            "filesystem": {
                "type": "FAT32",
                "oem_name": String::from_utf8_lossy(&boot.oem_name).trim_end(),
                "bytes_per_sector": boot.bytes_per_sector,
                "sectors_per_cluster": boot.sectors_per_cluster,
                "cluster_size": boot.cluster_size(),
                "reserved_sectors": boot.reserved_sector_count,
                "fats": boot.num_fats,
                "fat_sectors": boot.fat_size_sectors,
                "total_sectors": boot.total_sectors,
                "hidden_sectors": boot.hidden_sectors,
                "root_cluster": boot.root_cluster,
                "clusters": boot.cluster_count(),
                "volume_id": format!("{:08X}", boot.volume_id),
                "label": label,
                "free_clusters": free_clusters,
                "free_bytes": free_bytes,
            }
        }));
        return Ok(());
    }
    ctx.line(format!(
        "image: {} bytes, {} sectors of {} bytes",
        blocks * SECTOR as u64,
        blocks,
        SECTOR
    ));
    if partitions.is_empty() {
        ctx.line("partition table: none");
    } else {
        ctx.line("partition table: MBR");
        ctx.line("   #  boot  type  name        first LBA     sectors");
        for (i, e) in partitions.iter().enumerate() {
            ctx.line(format!(
                "  {:>2}  {:<4}  {:02X}h   {:<10} {:>10}  {:>10}",
                i,
                if e.bootable { "yes" } else { "no" },
                e.partition_type,
                type_name(e.partition_type),
                e.first_lba,
                e.sector_count
            ));
        }
    }
    let mut s = String::new();
    let _ = writeln!(s, "filesystem: FAT32 (partition {})", ctx.global.partition);
    let _ = writeln!(
        s,
        "  OEM name:            {}",
        String::from_utf8_lossy(&boot.oem_name).trim_end()
    );
    let _ = writeln!(s, "  bytes per sector:    {}", boot.bytes_per_sector);
    let _ = writeln!(
        s,
        "  sectors per cluster: {} ({} bytes per cluster)",
        boot.sectors_per_cluster,
        boot.cluster_size()
    );
    let _ = writeln!(s, "  reserved sectors:    {}", boot.reserved_sector_count);
    let _ = writeln!(
        s,
        "  FATs:                {} of {} sectors",
        boot.num_fats, boot.fat_size_sectors
    );
    let _ = writeln!(s, "  total sectors:       {}", boot.total_sectors);
    let _ = writeln!(s, "  hidden sectors:      {}", boot.hidden_sectors);
    let _ = writeln!(s, "  root cluster:        {}", boot.root_cluster);
    let _ = writeln!(s, "  data clusters:       {}", boot.cluster_count());
    let _ = writeln!(s, "  volume id:           {:08X}", boot.volume_id);
    let _ = writeln!(s, "  label:               {label}");
    let _ = write!(
        s,
        "  free space:          {free_bytes} bytes ({free_clusters} clusters)"
    );
    ctx.line(s);
    Ok(())
}

fn node_json(n: &FatNode) -> Value {
    json!({
        "name": n.name,
        "short_name": String::from_utf8_lossy(&n.short_name),
        "kind": if n.is_dir() { "directory" } else { "file" },
        "size": n.size,
        "attributes": n.attributes,
        "start_cluster": n.start_cluster,
        "created": n.created.map(|t| t.format("%Y-%m-%dT%H:%M:%S%.f").to_string()),
        "modified": n.modified.map(|t| t.format("%Y-%m-%dT%H:%M:%S").to_string()),
        "accessed": n.accessed.map(|d| d.to_string()),
    })
}

fn ls(ctx: &mut Ctx, image: &Path, path: &str) -> Result<(), CliError> {
    let (mut fs, _) = ctx.mount(image, false)?;
    let node = fs.lookup(path)?;
    let entries = if node.is_dir() {
        fs.list_children(&node)?
    } else {
        vec![node]
    };
    if ctx.global.json {
        ctx.emit(json!({
            "command": "ls",
            "path": path,
            "entries": entries.iter().map(node_json).collect::<Vec<_>>(),
        }));
        return Ok(());
    }
    for n in &entries {
        let when = n
            .modified
            .map(|t| t.format("%Y-%m-%d %H:%M:%S").to_string())
            .unwrap_or_else(|| "-".repeat(19));
        ctx.line(format!(
            "{}  {}  {:>10}  {}",
            attr_string(n.attributes),
            when,
            n.size,
            n.name
        ));
    }
    Ok(())
}

fn get(ctx: &mut Ctx, image: &Path, path: &str, dest: &Path) -> Result<(), CliError> {
    let (mut fs, _) = ctx.mount(image, false)?;
    let node = fs.lookup(path)?;
    if node.is_dir() {
        return Err(FatError::IsADirectory(path.to_string()).into());
    }
    let data = fs.read_all(&node)?;
    let target = if dest.is_dir() {
        dest.join(&node.name)
    } else {
        dest.to_path_buf()
    };
    std::fs::write(&target, &data)
        .map_err(|e| CliError::Io(format!("host: {}: {e}", target.display())))?;
    if ctx.global.json {
        ctx.emit(json!({ "command": "get", "path": path, "dest": target, "bytes": data.len() }));
    } else {
        ctx.line(format!("{} bytes -> {}", data.len(), target.display()));
    }
    Ok(())
}

fn put(
    ctx: &mut Ctx,
    image: &Path,
    source: &Path,
    path: &str,
    force: bool,
) -> Result<(), CliError> {
    let data = std::fs::read(source).map_err(|e| {
        let msg = format!("host: {}: {e}", source.display());
        match e.kind() {
            std::io::ErrorKind::NotFound => CliError::User(msg),
            _ => CliError::Io(msg),
        }
    })?;
    if data.len() as u64 > umstk::fat32::MAX_FILE_SIZE {
        return Err(FatError::FileTooLarge(data.len() as u64).into());
    }
    let (mut fs, _) = ctx.mount(image, true)?;
    let (parent, name) = match fs.lookup(path) {
        Ok(n) if n.is_dir() => {
            let name = source
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| {
                    CliError::User(format!("host: {}: no file name", source.display()))
                })?;
            (n, name)
        }
        _ => fs.lookup_parent(path)?,
    };
    let mut node = match fs.find_child(&parent, &name)? {
        Some(n) if n.is_dir() => return Err(FatError::IsADirectory(name).into()),
        Some(_) if !force => return Err(FatError::AlreadyExists(name).into()),
        Some(n) => n,
        None => fs.create_child(&parent, &name, NodeKind::File)?,
    };
    fs.write_all(&mut node, &data)?;
    finish(&mut fs)?;
    if ctx.global.json {
        ctx.emit(json!({ "command": "put", "entry": node_json(&node) }));
    } else {
        ctx.line(format!("{} bytes -> {}", data.len(), node.name));
    }
    Ok(())
}

fn mkdir(ctx: &mut Ctx, image: &Path, path: &str, parents: bool) -> Result<(), CliError> {
    let (mut fs, _) = ctx.mount(image, true)?;
    let node = if parents {
        let mut dir = fs.root();
        for part in path.split('/').filter(|p| !p.is_empty()) {
            dir = match fs.find_child(&dir, part)? {
                Some(n) if n.is_dir() => n,
                Some(n) => return Err(FatError::NotADirectory(n.name).into()),
                None => fs.create_child(&dir, part, NodeKind::Directory)?,
            };
        }
        dir
    } else {
        fs.create_path(path, NodeKind::Directory)?
    };
    finish(&mut fs)?;
    if ctx.global.json {
        ctx.emit(json!({ "command": "mkdir", "entry": node_json(&node) }));
    }
    Ok(())
}

/// Depth first; returns the number of entries removed.
fn remove_tree(fs: &mut Fs, node: &FatNode) -> Result<usize, FatError> {
    let mut removed = 0;
    if node.is_dir() {
        for child in fs.list_children(node)? {
            removed += remove_tree(fs, &child)?;
        }
    }
    fs.delete_node(node)?;
    Ok(removed + 1)
}

fn rm(ctx: &mut Ctx, image: &Path, path: &str, recursive: bool) -> Result<(), CliError> {
    let (mut fs, _) = ctx.mount(image, true)?;
    let node = fs.lookup(path)?;
    if node.is_root() {
        return Err(FatError::Root("removed").into());
    }
    let removed = if recursive {
        remove_tree(&mut fs, &node)?
    } else {
        fs.delete_node(&node)?;
        1
    };
    finish(&mut fs)?;
    if ctx.global.json {
        ctx.emit(json!({ "command": "rm", "path": path, "removed": removed }));
    }
    Ok(())
}

fn same_entry(a: &FatNode, b: &FatNode) -> bool {
    a.parent_cluster() == b.parent_cluster() && a.short_name == b.short_name
}

fn mv(ctx: &mut Ctx, image: &Path, from: &str, to: &str) -> Result<(), CliError> {
    let (mut fs, _) = ctx.mount(image, true)?;
    let node = fs.lookup(from)?;
    let (parent, name) = match fs.lookup(to) {
        Ok(existing) if same_entry(&existing, &node) => fs.lookup_parent(to)?,
        Ok(dir) if dir.is_dir() => {
            let name = node.name.clone();
            (dir, name)
        }
        Ok(existing) => return Err(FatError::AlreadyExists(existing.name).into()),
        Err(FatError::NotFound(_)) => fs.lookup_parent(to)?,
        Err(e) => return Err(e.into()),
    };
    let moved = fs.move_node(&node, &parent, Some(&name))?;
    finish(&mut fs)?;
    if ctx.global.json {
        ctx.emit(json!({ "command": "mv", "from": from, "entry": node_json(&moved) }));
    }
    Ok(())
}

fn label(ctx: &mut Ctx, image: &Path, new_label: Option<&str>) -> Result<(), CliError> {
    let (mut fs, _) = ctx.mount(image, new_label.is_some())?;
    if let Some(l) = new_label {
        fs.set_volume_label(l)?;
        finish(&mut fs)?;
    }
    let current = fs.volume_label()?;
    if ctx.global.json {
        ctx.emit(json!({ "command": "label", "label": current }));
    } else {
        ctx.line(current);
    }
    Ok(())
}

fn mkimage(
    ctx: &mut Ctx,
    image: &Path,
    size: u64,
    label: &str,
    mbr: bool,
    spc: Option<u8>,
    force: bool,
) -> Result<(), CliError> {
    if size == 0 || !size.is_multiple_of(SECTOR as u64) {
        return Err(CliError::User(format!(
            "image: size {size} is not a positive multiple of {SECTOR}"
        )));
    }
    if image.exists() && !force {
        return Err(CliError::User(format!(
            "image: {}: already exists",
            image.display()
        )));
    }
    let file = FileDevice::create(image, size, SECTOR)?;
    let mut dev = ctx.wrap(file)?;
    let mut opts = ImageOptions::new(label);
    opts.mbr = mbr;
    opts.sectors_per_cluster = spc;
    opts.timestamp = Some(ctx.clock().now());
    let entry = build_image(&mut dev, &opts)?;
    dev.flush()?;
    if ctx.global.json {
        ctx.emit(json!({
            "command": "mkimage",
            "image": image,
            "bytes": size,
            "partition": entry.map(|e| partition_json(0, &e)),
        }));
    } else {
        ctx.line(format!(
            "{}: {} bytes, FAT32{}",
            image.display(),
            size,
            if mbr { " in partition 0" } else { "" }
        ));
    }
    Ok(())
}

fn selftest(ctx: &mut Ctx, bytes: u64, seed: u64) -> Result<(), CliError> {
    let opts = SelftestOptions {
        round_trip_bytes: bytes as usize,
        seed,
    };
    let report = run_selftest(&opts);
    if ctx.global.json {
        ctx.emit(json!({
            "command": "selftest",
            "passed": report.passed(),
            "scenarios": report.scenarios.iter().map(|s| json!({
                "name": s.name,
                "passed": s.passed,
                "detail": s.detail,
                "elapsed_ms": s.elapsed.as_secs_f64() * 1e3,
            })).collect::<Vec<_>>(),
        }));
    } else {
        ctx.line(report.to_string());
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Io("scsi: selftest failed".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("4096"), Ok(4096));
        assert_eq!(parse_size("64M"), Ok(64 << 20));
        assert_eq!(parse_size("2g"), Ok(2 << 30));
        assert_eq!(parse_size("1k"), Ok(1024));
        assert!(parse_size("M").is_err());
        assert!(parse_size("99999999999G").is_err());
    }

    #[test]
    fn times_and_attributes() {
        let t = parse_time("2024-02-29T23:59:58").unwrap();
        assert_eq!(parse_time("2024-02-29 23:59:58").unwrap(), t);
        assert!(parse_time("yesterday").is_err());
        assert_eq!(attr_string(attr::DIRECTORY | attr::HIDDEN), "d-h--");
        assert_eq!(attr_string(attr::ARCHIVE | attr::READ_ONLY), "-r--a");
    }
}
