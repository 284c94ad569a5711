//! File formats shared by the CLI and the census pipeline.
//!
//! Everything is line-oriented plain text: hitlists are one target
//! per line, reply logs and most derived artifacts are one JSON
//! object per line. Lines starting with `#` and blank lines are
//! ignored on input so files can carry their own commentary.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{Prefix, ProbeReply, TargetAddress, VantagePoint, WorkerId};

#[derive(Debug, Error)]
pub enum FilesError {
    #[error("failed to read {path}: {source}")]
    Read { path: String, source: io::Error },
    #[error("failed to write {path}: {source}")]
    Write { path: String, source: io::Error },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
}

fn read_to_string(path: &Path) -> Result<String, FilesError> {
    fs::read_to_string(path).map_err(|source| FilesError::Read {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), FilesError> {
    fs::write(path, contents).map_err(|source| FilesError::Write {
        path: path.display().to_string(),
        source,
    })
}

/// One probing target: the census prefix it counts toward and the
/// representative address that gets probed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitlistEntry {
    pub prefix: Prefix,
    pub address: TargetAddress,
}

/// Reads a hitlist: one entry per line, either a bare address (its
/// census-granularity prefix is implied) or `prefix,address` for an
/// explicit pairing. The address must fall inside the prefix.
pub fn read_hitlist(path: &Path) -> Result<Vec<HitlistEntry>, FilesError> {
    let text = read_to_string(path)?;
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse = |reason: String| FilesError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            reason,
        };
        let entry = match line.split_once(',') {
            None => {
                let addr: std::net::IpAddr =
                    line.parse().map_err(|e| parse(format!("bad address: {e}")))?;
                HitlistEntry {
                    prefix: Prefix::of_address(addr),
                    address: TargetAddress::of_address(addr),
                }
            }
            Some((p, a)) => {
                let prefix: Prefix =
                    p.trim().parse().map_err(|e| parse(format!("bad prefix: {e}")))?;
                let addr: std::net::IpAddr =
                    a.trim().parse().map_err(|e| parse(format!("bad address: {e}")))?;
                if !prefix.contains(addr) {
                    return Err(parse(format!("{addr} is outside {prefix}")));
                }
                HitlistEntry { prefix, address: TargetAddress::of_address(addr) }
            }
        };
        entries.push(entry);
    }
    Ok(entries)
}

pub fn hitlist_addresses(entries: &[HitlistEntry]) -> Vec<TargetAddress> {
    entries.iter().map(|e| e.address).collect()
}

/// Distinct prefixes of a hitlist, sorted.
pub fn hitlist_prefixes(entries: &[HitlistEntry]) -> Vec<Prefix> {
    let mut prefixes: Vec<Prefix> = entries.iter().map(|e| e.prefix).collect();
    prefixes.sort();
    prefixes.dedup();
    prefixes
}

/// Writes one JSON object per line.
pub fn write_json_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), FilesError> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row).expect("rows serialize");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|source| FilesError::Write {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a JSON-lines file, ignoring comments and blank lines.
pub fn read_json_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, FilesError> {
    let text = read_to_string(path)?;
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = serde_json::from_str(line).map_err(|e| FilesError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_replies(path: &Path, replies: &[ProbeReply]) -> Result<(), FilesError> {
    write_json_lines(path, replies)
}

pub fn read_replies(path: &Path) -> Result<Vec<ProbeReply>, FilesError> {
    read_json_lines(path)
}

/// Worker roster file: TOML with a `[[workers]]` table per vantage
/// point, used wherever replies must be joined back to VP locations.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RosterFile {
    workers: Vec<VantagePoint>,
}

pub fn read_roster(path: &Path) -> Result<BTreeMap<WorkerId, VantagePoint>, FilesError> {
    let text = read_to_string(path)?;
    let file: RosterFile = toml::from_str(&text).map_err(|e| FilesError::Parse {
        path: path.display().to_string(),
        line: 0,
        reason: e.to_string(),
    })?;
    let mut roster = BTreeMap::new();
    for vp in file.workers {
        if roster.insert(vp.worker_id, vp).is_some() {
            return Err(FilesError::Parse {
                path: path.display().to_string(),
                line: 0,
                reason: "duplicate worker_id in roster".into(),
            });
        }
    }
    Ok(roster)
}

/// Canonical digest of a worker roster, stamped into census headers
/// so a census is traceable to the VPs that produced it.
pub fn roster_sha256(roster: &BTreeMap<WorkerId, VantagePoint>) -> String {
    let mut hasher = Sha256::new();
    for vp in roster.values() {
        let line = format!(
            "{},{},{},{},{},{}\n",
            vp.worker_id.0, vp.name, vp.lat, vp.lon, vp.unicast_address, vp.anycast_address
        );
        hasher.update(line.as_bytes());
    }
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        use std::fmt::Write as _;
        write!(s, "{b:02x}").expect("string write");
    }
    s
}

/// Writes lines prefixed by an arbitrary comment header.
pub fn write_commented<T: Display>(
    path: &Path,
    header: &[(&str, String)],
    lines: impl IntoIterator<Item = T>,
) -> Result<(), FilesError> {
    let mut out = String::new();
    for (key, value) in header {
        use std::fmt::Write as _;
        writeln!(out, "# {key}: {value}").expect("string write");
    }
    for line in lines {
        use std::fmt::Write as _;
        writeln!(out, "{line}").expect("string write");
    }
    write_file(path, &out)
}

/// Appends one JSON object as a line, creating the file if needed.
pub fn append_json_line<T: Serialize>(path: &Path, row: &T) -> Result<(), FilesError> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| FilesError::Write { path: path.display().to_string(), source })?;
    let line = serde_json::to_string(row).expect("row serializes");
    writeln!(file, "{line}").map_err(|source| FilesError::Write {
        path: path.display().to_string(),
        source,
    })
}
