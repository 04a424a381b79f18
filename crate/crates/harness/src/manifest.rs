//! Dataset manifest: one header line, one column line, then one
//! tab-separated record per image.
//!
//! ```text
//! #cvgl-manifest	version=1	seed=7	image_size=64	locations=250
//! path	location	view	split
//! images/L0000_A0.raw	0	A	train
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const MAGIC: &str = "#cvgl-manifest";
pub const VERSION: u32 = 1;
pub const COLUMNS: &str = "path\tlocation\tview\tsplit";
pub const FILE_NAME: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViewKind {
    /// Oblique, jittered (drone-like).
    A,
    /// Canonical top-down (satellite-like).
    B,
}

impl ViewKind {
    pub fn opposite(self) -> Self {
        match self {
            Self::A => Self::B,
            Self::B => Self::A,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    /// Held-out view-A images.
    Query,
    /// Held-out view-B images.
    Gallery,
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::A => "A",
            Self::B => "B",
        })
    }
}

impl FromStr for ViewKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "A" => Ok(Self::A),
            "B" => Ok(Self::B),
            _ => Err(format!("unknown view {s:?}")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Query => "query",
            Self::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "query" => Ok(Self::Query),
            "gallery" => Ok(Self::Gallery),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    /// Relative to the manifest directory.
    pub path: PathBuf,
    pub location: usize,
    pub view: ViewKind,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub seed: u64,
    pub image_size: usize,
    pub locations: usize,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = format!(
            "{MAGIC}\tversion={VERSION}\tseed={}\timage_size={}\tlocations={}\n{COLUMNS}\n",
            self.seed, self.image_size, self.locations
        );
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.path.display(), r.location, r.view, r.split));
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let bad = |line: usize, why: String| HarnessError::format(origin, format!("line {line}: {why}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "empty manifest".into()))?;
        let mut fields = header.split('\t');
        if fields.next() != Some(MAGIC) {
            return Err(bad(1, "missing manifest magic".into()));
        }
        let (mut version, mut seed, mut image_size, mut locations) = (None, None, None, None);
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| bad(1, format!("bad header field {f:?}")))?;
            let num = v.parse::<u64>().map_err(|e| bad(1, format!("{k}: {e}")))?;
            match k {
                "version" => version = Some(num),
                "seed" => seed = Some(num),
                "image_size" => image_size = Some(num as usize),
                "locations" => locations = Some(num as usize),
                _ => return Err(bad(1, format!("unknown header field {k:?}"))),
            }
        }
        if version != Some(VERSION as u64) {
            return Err(bad(1, format!("unsupported version {version:?}")));
        }
        let missing = |what: &str| bad(1, format!("header lacks {what}"));
        let seed = seed.ok_or_else(|| missing("seed"))?;
        let image_size = image_size.ok_or_else(|| missing("image_size"))?;
        let locations = locations.ok_or_else(|| missing("locations"))?;
        if lines.next() != Some(COLUMNS) {
            return Err(bad(2, "unexpected column line".into()));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let n = i + 3;
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad(n, format!("expected 4 columns, got {}", cols.len())));
            }
            records.push(Record {
                path: PathBuf::from(cols[0]),
                location: cols[1].parse().map_err(|e| bad(n, format!("location: {e}")))?,
                view: cols[2].parse().map_err(|e| bad(n, e))?,
                split: cols[3].parse().map_err(|e| bad(n, e))?,
            });
        }
        let manifest = Self {
            seed,
            image_size,
            locations,
            records,
        };
        manifest.validate().map_err(|e| HarnessError::format(origin, e))?;
        Ok(manifest)
    }

    /// Location ids dense in `[0, locations)`, and every held-out location
    /// present in both the query and gallery roles.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let mut seen = vec![false; self.locations];
        let mut query = vec![false; self.locations];
        let mut gallery = vec![false; self.locations];
        for r in &self.records {
            if r.location >= self.locations {
                return Err(format!("location {} outside [0, {})", r.location, self.locations));
            }
            seen[r.location] = true;
            match (r.split, r.view) {
                (Split::Query, ViewKind::A) => query[r.location] = true,
                (Split::Gallery, ViewKind::B) => gallery[r.location] = true,
                (Split::Train, _) => {}
                (s, v) => return Err(format!("view {v} cannot be in split {s}")),
            }
        }
        if let Some(l) = seen.iter().position(|s| !s) {
            return Err(format!("location {l} has no records"));
        }
        if let Some(l) = (0..self.locations).find(|&l| query[l] != gallery[l]) {
            return Err(format!("held-out location {l} lacks a query or gallery view"));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(FILE_NAME);
        fs::write(&path, self.render()).map_err(|e| HarnessError::io(&path, e))?;
        Ok(path)
    }

    /// Accepts either the manifest file or its directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let file = if path.is_dir() { path.join(FILE_NAME) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| HarnessError::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::parse(&text, &file)?, root))
    }

    pub fn select(&self, split: Split, view: ViewKind) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split && r.view == view).collect()
    }

    pub fn train_locations(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.records.iter().filter(|r| r.split == Split::Train).map(|r| r.location).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}
