//! Paired-image directories: `<root>/<split>/source/*` and `<root>/<split>/target/*`, matched by file stem.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use bokeh_core::data::{PairedSample, RgbImage};

use crate::error::{AppError, Result};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?} (expected train, val or test)")),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub split: Split,
    /// Ids to exclude.
    pub cleaning_list: Option<BTreeSet<String>>,
    /// Training crop `(height, width)`; informational for loading.
    pub crop: (usize, usize),
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, split: Split) -> Self {
        DatasetSpec { root: root.into(), split, cleaning_list: None, crop: (192, 128) }
    }

    pub fn split_dir(&self) -> PathBuf {
        self.root.join(self.split.to_string())
    }
}

/// What happened to every file seen during loading.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// `(id, reason)` for pairs that could not be used.
    pub skipped: Vec<(String, String)>,
    pub cleaned: Vec<String>,
    /// Distinct ids found in either directory.
    pub files: usize,
}

/// One id per line; blank lines and `#` comments are ignored.
pub fn parse_cleaning_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

pub fn read_cleaning_list(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    Ok(parse_cleaning_list(&text))
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| AppError::Image { path: path.into(), source })?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage::new(w as usize, h as usize, img.into_raw())?)
}

/// Writes an 8-bit RGB image; the format follows the extension.
pub fn write_image(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| AppError::Dataset(format!("{}: image buffer has the wrong size", path.display())))?;
    buf.save(path).map_err(|source| AppError::Image { path: path.into(), source })
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| AppError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| AppError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Loads every usable pair in id order.
pub fn load_pairs(spec: &DatasetSpec) -> Result<(Vec<PairedSample>, LoadReport)> {
    let dir = spec.split_dir();
    let sources = list_images(&dir.join("source"))?;
    let targets = list_images(&dir.join("target"))?;
    let ids: BTreeSet<&String> = sources.keys().chain(targets.keys()).collect();
    let empty = BTreeSet::new();
    let clean = spec.cleaning_list.as_ref().unwrap_or(&empty);
    let mut report = LoadReport { files: ids.len(), ..Default::default() };
    let mut samples = Vec::new();
    for id in ids {
        if clean.contains(id) {
            report.cleaned.push(id.clone());
            continue;
        }
        let (Some(s), Some(t)) = (sources.get(id), targets.get(id)) else {
            let side = if sources.contains_key(id) { "target" } else { "source" };
            report.skipped.push((id.clone(), format!("missing {side} image")));
            continue;
        };
        let pair = read_image(s).and_then(|src| Ok(PairedSample::new(id.clone(), src, read_image(t)?)?));
        match pair {
            Ok(p) => {
                report.loaded.push(id.clone());
                samples.push(p);
            }
            Err(e) => report.skipped.push((id.clone(), e.to_string())),
        }
    }
    let unknown: Vec<&String> = clean.iter().filter(|id| !sources.contains_key(*id) && !targets.contains_key(*id)).collect();
    if !unknown.is_empty() {
        return Err(AppError::Dataset(format!("cleaning list names unknown ids: {unknown:?}")));
    }
    if samples.is_empty() {
        return Err(AppError::Dataset(format!("no usable pairs under {}", dir.display())));
    }
    Ok((samples, report))
}

/// Writes pairs in the layout [`load_pairs`] reads, as PNG.
pub fn write_pairs(root: &Path, split: Split, pairs: &[PairedSample]) -> Result<()> {
    let dir = root.join(split.to_string());
    for p in pairs {
        write_image(&dir.join("source").join(format!("{}.png", p.id)), &p.source)?;
        write_image(&dir.join("target").join(format!("{}.png", p.id)), &p.target)?;
    }
    Ok(())
}
