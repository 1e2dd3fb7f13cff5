//! 32-byte directory records: short entries, long-name entries, timestamps
//! and 8.3 name generation.

use std::collections::HashSet;

use chrono::{Datelike, NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use log::warn;

use super::{attr, FatError, Result};

pub const ENTRY_LEN: usize = 32;
pub const DELETED: u8 = 0xe5;
pub const KANJI_E5: u8 = 0x05;
pub const LAST_LFN: u8 = 0x40;
pub const MAX_LFN_ENTRIES: usize = 20;
pub const MAX_NAME_UNITS: usize = 255;
pub const DOT: [u8; 11] = *b".          ";
pub const DOTDOT: [u8; 11] = *b"..         ";

const LFN_CHAR_OFFSETS: [usize; 13] = [1, 3, 5, 7, 9, 14, 16, 18, 20, 22, 24, 28, 30];

/// Checksum over an 11-byte short name, stored in every long-name entry.
pub fn short_name_checksum(name: &[u8; 11]) -> u8 {
    name.iter()
        .fold(0u8, |sum, &b| sum.rotate_right(1).wrapping_add(b))
}

/// Packs a timestamp into (date, time, hundredths). The last value holds
/// the odd second and the centiseconds, 0..=199.
pub fn encode_datetime(t: &NaiveDateTime) -> Result<(u16, u16, u8)> {
    let year = t.year();
    if !(1980..=2107).contains(&year) {
        return Err(FatError::DateRange(year));
    }
    let date = ((year - 1980) as u16) << 9 | (t.month() as u16) << 5 | t.day() as u16;
    let sec = t.second().min(59);
    let time = (t.hour() as u16) << 11 | (t.minute() as u16) << 5 | (sec / 2) as u16;
    let centis = (t.nanosecond() % 1_000_000_000) / 10_000_000;
    let tenths = (sec % 2 * 100 + centis) as u8;
    Ok((date, time, tenths))
}

pub fn decode_date(date: u16) -> Option<NaiveDate> {
    NaiveDate::from_ymd_opt(
        1980 + (date >> 9) as i32,
        ((date >> 5) & 0x0f) as u32,
        (date & 0x1f) as u32,
    )
}

/// Inverse of [`encode_datetime`]; `None` for field values that name no
/// real date or time.
pub fn decode_datetime(date: u16, time: u16, tenths: u8) -> Option<NaiveDateTime> {
    let d = decode_date(date)?;
    if tenths > 199 {
        return None;
    }
    let sec = (time & 0x1f) as u32 * 2 + tenths as u32 / 100;
    let t = NaiveTime::from_hms_milli_opt(
        (time >> 11) as u32,
        ((time >> 5) & 0x3f) as u32,
        sec,
        (tenths as u32 % 100) * 10,
    )?;
    Some(d.and_time(t))
}

fn short_char_ok(c: u8) -> bool {
    c.is_ascii_uppercase() || c.is_ascii_digit() || b"$%'-_@~`!(){}^#&".contains(&c) || c >= 0x80
}

/// Checks a long name against the characters a long entry may carry.
pub fn validate_long_name(name: &str) -> Result<()> {
    let units = name.encode_utf16().count();
    if units > MAX_NAME_UNITS {
        return Err(FatError::NameTooLong(units));
    }
    if name.is_empty()
        || name == "."
        || name == ".."
        || name.chars().all(|c| c == '.' || c == ' ')
        || name
            .chars()
            .any(|c| (c as u32) < 0x20 || c == '\u{7f}' || "\"*/:<>?\\|".contains(c))
    {
        return Err(FatError::InvalidName(name.to_string()));
    }
    Ok(())
}

/// Renders a stored short name as `BASE.EXT`.
pub fn short_name_display(name: &[u8; 11]) -> String {
    let base = String::from_utf8_lossy(&name[..8]).trim_end().to_string();
    let ext = String::from_utf8_lossy(&name[8..]).trim_end().to_string();
    if ext.is_empty() {
        base
    } else {
        format!("{base}.{ext}")
    }
}

/// The stored form of `name` if it already is a valid upper-case 8.3 name.
pub fn exact_short_name(name: &str) -> Option<[u8; 11]> {
    if name == "." || name == ".." || !name.is_ascii() {
        return None;
    }
    let (base, ext) = match name.rfind('.') {
        Some(i) => (&name[..i], &name[i + 1..]),
        None => (name, ""),
    };
    if base.is_empty() || base.len() > 8 || ext.len() > 3 || (name.ends_with('.')) {
        return None;
    }
    if !base.bytes().chain(ext.bytes()).all(short_char_ok) {
        return None;
    }
    let mut out = [b' '; 11];
    out[..base.len()].copy_from_slice(base.as_bytes());
    out[8..8 + ext.len()].copy_from_slice(ext.as_bytes());
    Some(out)
}

/// Derives a unique 8.3 name for `long_name`. A `~N` tail is added when the
/// name had to be altered or truncated or would collide with `existing`.
pub fn generate_short_name(long_name: &str, existing: &HashSet<[u8; 11]>) -> Result<[u8; 11]> {
    validate_long_name(long_name)?;
    let mut lossy = false;
    let trimmed = long_name.trim_start_matches('.');
    if trimmed.len() != long_name.len() {
        lossy = true;
    }
    let mut convert = |s: &str| -> Vec<u8> {
        let mut out = Vec::new();
        for c in s.chars() {
            match c {
                ' ' | '.' => lossy = true,
                c if c.is_ascii() => {
                    let u = c.to_ascii_uppercase() as u8;
                    if short_char_ok(u) {
                        out.push(u);
                    } else {
                        out.push(b'_');
                        lossy = true;
                    }
                }
                _ => {
                    out.push(b'_');
                    lossy = true;
                }
            }
        }
        out
    };
    let (base_src, ext_src) = match trimmed.rfind('.') {
        Some(i) => (&trimmed[..i], &trimmed[i + 1..]),
        None => (trimmed, ""),
    };
    let mut base = convert(base_src);
    let mut ext = convert(ext_src);
    let mut truncated = false;
    if base.len() > 8 {
        base.truncate(8);
        truncated = true;
    }
    if ext.len() > 3 {
        ext.truncate(3);
        truncated = true;
    }
    if base.is_empty() {
        base.push(b'_');
        lossy = true;
    }
    let pack = |base: &[u8]| {
        let mut out = [b' '; 11];
        out[..base.len()].copy_from_slice(base);
        out[8..8 + ext.len()].copy_from_slice(&ext);
        out
    };
    let plain = pack(&base);
    if !lossy && !truncated && !existing.contains(&plain) {
        return Ok(plain);
    }
    for n in 1u32..1_000_000 {
        let tail = format!("~{n}");
        let keep = base.len().min(8 - tail.len());
        let mut b = base[..keep].to_vec();
        b.extend_from_slice(tail.as_bytes());
        let candidate = pack(&b);
        if !existing.contains(&candidate) {
            return Ok(candidate);
        }
    }
    Err(FatError::ShortNameExhausted(short_name_display(&plain)))
}

/// A decoded short (8.3) directory record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DirectoryEntry {
    /// Stored name, with a leading 05h already turned back into E5h.
    pub name: [u8; 11],
    pub attributes: u8,
    pub nt_reserved: u8,
    pub creation_tenths: u8,
    pub creation_time: u16,
    pub creation_date: u16,
    pub last_access_date: u16,
    pub write_time: u16,
    pub write_date: u16,
    pub first_cluster: u32,
    pub file_size: u32,
}

impl DirectoryEntry {
    pub fn parse(raw: &[u8]) -> DirectoryEntry {
        let le16 = |at: usize| u16::from_le_bytes([raw[at], raw[at + 1]]);
        let mut name: [u8; 11] = raw[..11].try_into().unwrap();
        if name[0] == KANJI_E5 {
            name[0] = DELETED;
        }
        DirectoryEntry {
            name,
            attributes: raw[11],
            nt_reserved: raw[12],
            creation_tenths: raw[13],
            creation_time: le16(14),
            creation_date: le16(16),
            last_access_date: le16(18),
            write_time: le16(22),
            write_date: le16(24),
            first_cluster: (le16(20) as u32) << 16 | le16(26) as u32,
            file_size: u32::from_le_bytes(raw[28..32].try_into().unwrap()),
        }
    }

    pub fn to_bytes(&self) -> [u8; ENTRY_LEN] {
        let mut b = [0u8; ENTRY_LEN];
        b[..11].copy_from_slice(&self.name);
        if b[0] == DELETED {
            b[0] = KANJI_E5;
        }
        b[11] = self.attributes;
        b[12] = self.nt_reserved;
        b[13] = self.creation_tenths;
        b[14..16].copy_from_slice(&self.creation_time.to_le_bytes());
        b[16..18].copy_from_slice(&self.creation_date.to_le_bytes());
        b[18..20].copy_from_slice(&self.last_access_date.to_le_bytes());
        b[20..22].copy_from_slice(&((self.first_cluster >> 16) as u16).to_le_bytes());
        b[22..24].copy_from_slice(&self.write_time.to_le_bytes());
        b[24..26].copy_from_slice(&self.write_date.to_le_bytes());
        b[26..28].copy_from_slice(&(self.first_cluster as u16).to_le_bytes());
        b[28..32].copy_from_slice(&self.file_size.to_le_bytes());
        b
    }

    pub fn is_directory(&self) -> bool {
        self.attributes & attr::DIRECTORY != 0
    }

    pub fn is_volume_label(&self) -> bool {
        self.attributes & (attr::VOLUME_ID | attr::DIRECTORY) == attr::VOLUME_ID
    }

    pub fn is_dot(&self) -> bool {
        self.name == DOT || self.name == DOTDOT
    }

    pub fn checksum(&self) -> u8 {
        short_name_checksum(&self.name)
    }

    pub fn created(&self) -> Option<NaiveDateTime> {
        decode_datetime(self.creation_date, self.creation_time, self.creation_tenths)
    }

    pub fn modified(&self) -> Option<NaiveDateTime> {
        decode_datetime(self.write_date, self.write_time, 0)
    }

    pub fn accessed(&self) -> Option<NaiveDate> {
        decode_date(self.last_access_date)
    }
}

fn is_lfn(raw: &[u8]) -> bool {
    raw[11] & 0x3f == attr::LONG_NAME
}

/// Long-name records for `name`, in on-disk order (highest ordinal first).
pub fn lfn_entries(name: &str, checksum: u8) -> Result<Vec<[u8; ENTRY_LEN]>> {
    validate_long_name(name)?;
    let units: Vec<u16> = name.encode_utf16().collect();
    let count = units.len().div_ceil(13);
    let mut out = Vec::with_capacity(count);
    for ord in (1..=count).rev() {
        let mut e = [0u8; ENTRY_LEN];
        e[0] = ord as u8 | if ord == count { LAST_LFN } else { 0 };
        e[11] = attr::LONG_NAME;
        e[13] = checksum;
        for (i, &at) in LFN_CHAR_OFFSETS.iter().enumerate() {
            let idx = (ord - 1) * 13 + i;
            let unit = match idx.cmp(&units.len()) {
                std::cmp::Ordering::Less => units[idx],
                std::cmp::Ordering::Equal => 0x0000,
                std::cmp::Ordering::Greater => 0xffff,
            };
            e[at..at + 2].copy_from_slice(&unit.to_le_bytes());
        }
        out.push(e);
    }
    Ok(out)
}

/// Long-name records (when `long_name` is given) followed by the short
/// record.
pub fn serialize_directory_entry(
    long_name: Option<&str>,
    entry: &DirectoryEntry,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    if let Some(name) = long_name {
        for e in lfn_entries(name, entry.checksum())? {
            out.extend_from_slice(&e);
        }
    }
    out.extend_from_slice(&entry.to_bytes());
    Ok(out)
}

/// One live record found by [`parse_directory`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedEntry {
    pub entry: DirectoryEntry,
    pub long_name: Option<String>,
    /// Slot of the first long-name record, or of the short record.
    pub first_slot: usize,
    /// Slot of the short record.
    pub slot: usize,
}

impl ParsedEntry {
    pub fn name(&self) -> String {
        match &self.long_name {
            Some(n) => n.clone(),
            None => short_name_display(&self.entry.name),
        }
    }
}

struct LfnRun {
    start: usize,
    count: u8,
    next: u8,
    checksum: u8,
    parts: Vec<[u16; 13]>,
}

/// Walks 32-byte records up to the first terminator. Deleted records are
/// skipped; broken long-name runs are dropped and the short name kept.
pub fn parse_directory(bytes: &[u8]) -> Vec<ParsedEntry> {
    let mut out = Vec::new();
    let mut run: Option<LfnRun> = None;
    for (slot, raw) in bytes.chunks_exact(ENTRY_LEN).enumerate() {
        match raw[0] {
            0x00 => break,
            DELETED => {
                run = None;
                continue;
            }
            _ => {}
        }
        if is_lfn(raw) {
            let ord = raw[0];
            let n = ord & 0x1f;
            let mut chars = [0u16; 13];
            for (i, &at) in LFN_CHAR_OFFSETS.iter().enumerate() {
                chars[i] = u16::from_le_bytes([raw[at], raw[at + 1]]);
            }
            if ord & LAST_LFN != 0 {
                if run.is_some() {
                    warn!("fat32: discarding unfinished long-name run before slot {slot}");
                }
                run = if (1..=MAX_LFN_ENTRIES as u8).contains(&n) {
                    Some(LfnRun {
                        start: slot,
                        count: n,
                        next: n - 1,
                        checksum: raw[13],
                        parts: vec![chars],
                    })
                } else {
                    None
                };
            } else {
                match run.as_mut() {
                    Some(r) if r.next == n && n >= 1 && r.checksum == raw[13] => {
                        r.next -= 1;
                        r.parts.push(chars);
                    }
                    _ => {
                        warn!("fat32: out-of-sequence long-name record at slot {slot}");
                        run = None;
                    }
                }
            }
            continue;
        }
        let entry = DirectoryEntry::parse(raw);
        let mut long_name = None;
        let mut first_slot = slot;
        if let Some(r) = run.take() {
            if r.next == 0 && r.checksum == entry.checksum() && !entry.is_dot() {
                let units: Vec<u16> = r
                    .parts
                    .iter()
                    .rev()
                    .flat_map(|p| p.iter().copied())
                    .take_while(|&u| u != 0x0000)
                    .collect();
                match String::from_utf16(&units) {
                    Ok(s) if !s.is_empty() && units.len() <= r.count as usize * 13 => {
                        long_name = Some(s);
                        first_slot = r.start;
                    }
                    _ => warn!("fat32: undecodable long name at slot {}", r.start),
                }
            } else {
                warn!(
                    "fat32: long-name run at slot {} does not match its entry",
                    r.start
                );
            }
        }
        out.push(ParsedEntry {
            entry,
            long_name,
            first_slot,
            slot,
        });
    }
    out
}
