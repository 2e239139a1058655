use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::container::read_verified;
use super::scene::PatchSample;
use super::split::SplitRules;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub digest: u64,
    pub year: i32,
    pub split: String,
}

/// Ordered sample references, one `path\tdigest\tyear\tsplit` line each.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        fs::read_to_string(path)?.parse()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string())?;
        Ok(())
    }

    pub fn split<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| e.split == name)
    }

    /// Re-derives every entry's split from its year.
    pub fn assign(&mut self, rules: &SplitRules) -> Result<()> {
        for e in &mut self.entries {
            e.split = rules.split_for_year(e.year)?.to_string();
        }
        Ok(())
    }

    /// Relative paths are resolved against `base`.
    pub fn resolve(&self, entry: &ManifestEntry, base: &Path) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            base.join(&entry.path)
        }
    }

    /// Loads and digest-checks every sample of a split.
    pub fn load_split(&self, name: &str, base: &Path) -> Result<Vec<PatchSample>> {
        self.split(name).map(|e| read_verified(&self.resolve(e, base), e.digest)).collect()
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{}\t{:016x}\t{}\t{}", e.path.display(), e.digest, e.year, e.split)?;
        }
        Ok(())
    }
}

impl FromStr for Manifest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |line: &str| Error::Malformed { what: "manifest line", detail: line.to_string() };
        let mut entries = Vec::new();
        for line in s.lines().filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad(line));
            }
            entries.push(ManifestEntry {
                path: PathBuf::from(f[0]),
                digest: u64::from_str_radix(f[1], 16).map_err(|_| bad(line))?,
                year: f[2].parse().map_err(|_| bad(line))?,
                split: f[3].to_string(),
            });
        }
        Ok(Manifest { entries })
    }
}
