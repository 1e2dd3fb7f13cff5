//! Consistency checks over a mounted volume.

use std::collections::HashMap;
use std::fmt;

use super::dirent::{DOT, DOTDOT};
use super::table::{FatEntry, BAD_CLUSTER};
use super::{FatFs, Result};
use crate::blockdev::BlockDevice;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CheckReport {
    pub files: usize,
    pub directories: usize,
    pub used_clusters: u32,
    pub problems: Vec<String>,
}

impl CheckReport {
    pub fn is_clean(&self) -> bool {
        self.problems.is_empty()
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} files, {} directories, {} clusters in use",
            self.files, self.directories, self.used_clusters
        )?;
        for p in &self.problems {
            write!(f, "\n  {p}")?;
        }
        Ok(())
    }
}

/// Verifies FAT mirroring, the free count, every chain reachable from the
/// root, dot entries, size/chain agreement, cross-links and lost clusters.
/// Only device errors abort the check.
pub fn check_volume<D: BlockDevice>(fs: &mut FatFs<D>) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    let boot = fs.boot().clone();
    let root_cluster = boot.root_cluster;
    let (dev, fat) = fs.parts();

    if boot.mirrored() {
        let first = fat.copy_bytes(dev, 0)?;
        for copy in 1..boot.num_fats {
            if fat.copy_bytes(dev, copy)? != first {
                report
                    .problems
                    .push(format!("FAT copy {copy} differs from copy 0"));
            }
        }
    }
    let table = fat.read_all(dev)?;
    let free = table[2..].iter().filter(|&&v| v == 0).count() as u32;
    if fat.free_count() != free {
        report.problems.push(format!(
            "free count {} but {free} free entries",
            fat.free_count()
        ));
    }
    if let Some(stored) = fs.stored_fsinfo()?.free_known() {
        if stored != free {
            report.problems.push(format!(
                "FSInfo free count {stored} but {free} free entries"
            ));
        }
    }

    let cs = boot.cluster_size();
    let mut owner: HashMap<u32, String> = HashMap::new();
    fn claim(
        owner: &mut HashMap<u32, String>,
        chain: &[u32],
        who: &str,
        problems: &mut Vec<String>,
    ) {
        for &c in chain {
            if let Some(prev) = owner.insert(c, who.to_string()) {
                problems.push(format!("cluster {c} shared by {prev} and {who}"));
            }
        }
    }

    // (path, start cluster, parent start cluster stored in ..)
    let root = boot.root_cluster;
    let mut pending = vec![("/".to_string(), root, None::<u32>)];
    while let Some((path, start, parent)) = pending.pop() {
        report.directories += 1;
        let chain = match fs.chain_of(start) {
            Ok(c) => c,
            Err(e) => {
                report.problems.push(format!("{path}: {e}"));
                continue;
            }
        };
        if chain.clusters.is_empty() {
            report
                .problems
                .push(format!("{path}: directory without clusters"));
            continue;
        }
        claim(&mut owner, &chain.clusters, &path, &mut report.problems);
        let entries = fs.read_dir(start)?;
        match parent {
            None => {
                if entries.iter().any(|p| p.entry.is_dot()) {
                    report.problems.push("/: root holds dot entries".into());
                }
            }
            Some(up) => {
                let dot = entries.iter().find(|p| p.entry.name == DOT);
                let dotdot = entries.iter().find(|p| p.entry.name == DOTDOT);
                match dot {
                    Some(d) if d.entry.first_cluster == start => {}
                    _ => report
                        .problems
                        .push(format!("{path}: bad or missing . entry")),
                }
                match dotdot {
                    Some(d) if d.entry.first_cluster == up => {}
                    // Some formatters store the root cluster instead of 0.
                    Some(d) if up == 0 && d.entry.first_cluster == root_cluster => {}
                    Some(d) => report.problems.push(format!(
                        "{path}: .. points at {}, expected {up}",
                        d.entry.first_cluster
                    )),
                    None => report.problems.push(format!("{path}: missing .. entry")),
                }
            }
        }
        for p in entries
            .iter()
            .filter(|p| !p.entry.is_dot() && !p.entry.is_volume_label())
        {
            let child = format!("{}{}", if path == "/" { "" } else { &path }, "/") + &p.name();
            let e = &p.entry;
            if e.is_directory() {
                if e.file_size != 0 {
                    report
                        .problems
                        .push(format!("{child}: directory with size {}", e.file_size));
                }
                if owner.contains_key(&e.first_cluster) {
                    report.problems.push(format!(
                        "{child}: directory cluster {} already visited",
                        e.first_cluster
                    ));
                    continue;
                }
                let up = if start == root { 0 } else { start };
                pending.push((child, e.first_cluster, Some(up)));
                continue;
            }
            report.files += 1;
            if e.first_cluster == 0 {
                if e.file_size != 0 {
                    report
                        .problems
                        .push(format!("{child}: size {} without clusters", e.file_size));
                }
                continue;
            }
            match fs.chain_of(e.first_cluster) {
                Ok(chain) => {
                    let want = (e.file_size as u64).div_ceil(cs);
                    if chain.clusters.len() as u64 != want {
                        report.problems.push(format!(
                            "{child}: {} clusters for {} bytes",
                            chain.clusters.len(),
                            e.file_size
                        ));
                    }
                    claim(&mut owner, &chain.clusters, &child, &mut report.problems);
                }
                Err(err) => report.problems.push(format!("{child}: {err}")),
            }
        }
    }

    report.used_clusters = owner.len() as u32;
    let lost: Vec<u32> = table
        .iter()
        .enumerate()
        .skip(2)
        .filter(|&(c, &v)| {
            v != 0
                && v != BAD_CLUSTER
                && !owner.contains_key(&(c as u32))
                && FatEntry::classify(v) != FatEntry::Free
        })
        .map(|(c, _)| c as u32)
        .collect();
    if !lost.is_empty() {
        report.problems.push(format!(
            "{} lost clusters, first {:?}",
            lost.len(),
            &lost[..lost.len().min(8)]
        ));
    }
    Ok(report)
}
