//! Image/mask pairs on disk.
//!
//! ```text
//! <root>/images/<id>.{png,jpg,jpeg}
//! <root>/GTmaps/<id>.png            (or <id>_GT.png)
//! <root>/subsets.txt                optional, lines of `<id> day|night`
//! ```
//!
//! Without an override, ids starting with `d` are daytime and ids starting
//! with `n` are nighttime.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ucloudnet_core::data::{Part, Sample, SampleSource};
use ucloudnet_core::tensor::{Shape, Tensor};
use ucloudnet_core::train::Subset;
use ucloudnet_core::Element;

use crate::error::{Error, Result};

pub const IMAGE_DIR: &str = "images";
pub const MASK_DIR: &str = "GTmaps";
pub const SUBSET_FILE: &str = "subsets.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Day,
    Night,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub origin: Origin,
}

fn extension(p: &Path) -> Option<String> {
    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase)
}

fn stem(p: &Path) -> Option<String> {
    p.file_stem().and_then(|s| s.to_str()).map(str::to_string)
}

fn list(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && extension(&path).is_some_and(|e| exts.contains(&e.as_str())) {
            out.push(path);
        }
    }
    Ok(out)
}

fn read_overrides(root: &Path) -> Result<HashMap<String, Origin>> {
    let path = root.join(SUBSET_FILE);
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut map = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(id), Some(which), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Dataset(format!("{}:{}: expected `<id> day|night`", path.display(), n + 1)));
        };
        let origin = match which {
            "day" => Origin::Day,
            "night" => Origin::Night,
            _ => return Err(Error::Dataset(format!("{}:{}: unknown subset {which:?}", path.display(), n + 1))),
        };
        map.insert(id.to_string(), origin);
    }
    Ok(map)
}

/// Pairs every image with its mask, sorted by id. Unpaired files are errors.
pub fn scan(root: &Path) -> Result<Vec<Entry>> {
    let images = list(&root.join(IMAGE_DIR), &["png", "jpg", "jpeg"])?;
    let masks = list(&root.join(MASK_DIR), &["png", "jpg", "jpeg"])?;
    let mut by_id: BTreeMap<String, PathBuf> = BTreeMap::new();
    for m in masks {
        let Some(s) = stem(&m) else { continue };
        let id = s.strip_suffix("_GT").map(str::to_string).unwrap_or(s);
        if let Some(prev) = by_id.insert(id.clone(), m.clone()) {
            return Err(Error::Dataset(format!("two masks for {id}: {} and {}", prev.display(), m.display())));
        }
    }
    let overrides = read_overrides(root)?;
    let mut entries = Vec::with_capacity(images.len());
    for img in images {
        let Some(id) = stem(&img) else { continue };
        let mask = by_id
            .remove(&id)
            .ok_or_else(|| Error::Dataset(format!("image {} has no mask in {MASK_DIR}/", img.display())))?;
        let origin = match overrides.get(&id) {
            Some(&o) => o,
            None if id.starts_with('d') => Origin::Day,
            None if id.starts_with('n') => Origin::Night,
            None => {
                return Err(Error::Dataset(format!(
                    "cannot tell whether {id} is a day or night image; list it in {SUBSET_FILE}"
                )))
            }
        };
        entries.push(Entry { id, image: img, mask, origin });
    }
    if let Some((id, m)) = by_id.into_iter().next() {
        return Err(Error::Dataset(format!("mask {} (id {id}) has no image in {IMAGE_DIR}/", m.display())));
    }
    if entries.is_empty() {
        return Err(Error::Dataset(format!("no images found under {}", root.join(IMAGE_DIR).display())));
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(entries)
}

pub fn select(entries: Vec<Entry>, subset: Subset) -> Vec<Entry> {
    entries
        .into_iter()
        .filter(|e| match subset {
            Subset::All => true,
            Subset::Day => e.origin == Origin::Day,
            Subset::Night => e.origin == Origin::Night,
        })
        .collect()
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// RGB image scaled to `[0, 1]` and resized (bilinear) to `(height, width)`.
pub fn load_image<T: Element>(path: &Path, size: (usize, usize)) -> Result<(Tensor<T>, (u32, u32))> {
    let img = open(path)?.to_rgb8();
    let original = img.dimensions();
    let (h, w) = size;
    let img = if original == (w as u32, h as u32) {
        img
    } else {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    };
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = T::from_f64(px[c] as f64 / 255.0);
        }
    }
    Ok((Tensor::new(Shape::new(1, 3, h, w), data)?, original))
}

/// Grayscale mask resized (nearest) to `(height, width)` and binarized at one half.
pub fn load_mask<T: Element>(path: &Path, size: (usize, usize)) -> Result<Tensor<T>> {
    let img = open(path)?.to_luma8();
    let (h, w) = size;
    let img = if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Nearest)
    };
    let data = img.pixels().map(|p| if p[0] as f64 / 255.0 >= 0.5 { T::one() } else { T::zero() }).collect();
    Ok(Tensor::new(Shape::new(1, 1, h, w), data)?)
}

pub fn load_sample<T: Element>(entry: &Entry, size: (usize, usize)) -> Result<Sample<T>> {
    let (image, _) = load_image(&entry.image, size)?;
    let mask = load_mask(&entry.mask, size)?;
    Ok(Sample::new(image, mask, entry.id.clone())?)
}

/// Samples decoded from disk on every access.
#[derive(Debug, Clone)]
pub struct DiskDataset {
    pub entries: Vec<Entry>,
    pub size: (usize, usize),
}

impl DiskDataset {
    pub fn open(root: &Path, subset: Subset, size: (usize, usize)) -> Result<Self> {
        let entries = select(scan(root)?, subset);
        if entries.is_empty() {
            return Err(Error::Dataset(format!("no {} images under {}", subset.name(), root.display())));
        }
        Ok(DiskDataset { entries, size })
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }
}

impl<T: Element> SampleSource<T> for DiskDataset {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn sample(&self, index: usize) -> ucloudnet_core::Result<Sample<T>> {
        let entry = self
            .entries
            .get(index)
            .ok_or_else(|| ucloudnet_core::Error::Invalid(format!("sample index {index} out of range")))?;
        load_sample(entry, self.size).map_err(|e| match e {
            Error::Core(inner) => inner,
            other => ucloudnet_core::Error::Invalid(other.to_string()),
        })
    }
}

/// `id<TAB>train|test` for every sample, in dataset order.
pub fn split_listing(ids: &[String], train: &[usize]) -> String {
    let mut part = vec![Part::Test; ids.len()];
    for &i in train {
        part[i] = Part::Train;
    }
    let mut s = String::new();
    for (id, p) in ids.iter().zip(part) {
        let _ = writeln!(s, "{id}\t{}", p.name());
    }
    s
}
