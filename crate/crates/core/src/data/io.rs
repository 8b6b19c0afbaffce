//! On-disk dataset layout: a tab-separated manifest plus lossless PNGs.
//!
//! ```text
//! <root>/manifest.txt      # version / split / seed header, one entry per line
//! <root>/images/<id>.png   # RGB8
//! <root>/masks/<id>.png    # grayscale with raw labels {0, 1, 2}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::data::Split;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// A sample ready to be written: raster data plus its attack tag.
#[derive(Debug, Clone)]
pub struct StoredSample {
    pub id: u64,
    /// (h, w, 3) RGB.
    pub image: Array3<u8>,
    /// (h, w) labels in {0, 1, 2}.
    pub mask: Array2<u8>,
    pub attack_tag: String,
}

/// A sample loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: u64,
    pub image: Array3<u8>,
    pub mask: Array2<u8>,
    pub attack_tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: u64,
    pub image_path: String,
    pub mask_path: String,
    pub attack_tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: Split,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    fn to_text(&self) -> String {
        let mut out = format!(
            "# version {}\n# split {}\n# seed {}\n",
            self.version, self.split, self.seed
        );
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.id, e.image_path, e.mask_path, e.attack_tag
            ));
        }
        out
    }

    fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let mut split = None;
        let mut seed = None;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut it = rest.split_whitespace();
                match (it.next(), it.next()) {
                    (Some("version"), Some(v)) => version = v.parse::<u32>().ok(),
                    (Some("split"), Some(v)) => split = v.parse::<Split>().ok(),
                    (Some("seed"), Some(v)) => seed = v.parse::<u64>().ok(),
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::dataset(
                    None,
                    format!("manifest line {} has {} fields, expected 4", lineno + 1, fields.len()),
                ));
            }
            let id = fields[0].parse::<u64>().map_err(|_| {
                Error::dataset(None, format!("manifest line {}: bad id '{}'", lineno + 1, fields[0]))
            })?;
            entries.push(ManifestEntry {
                id,
                image_path: fields[1].to_string(),
                mask_path: fields[2].to_string(),
                attack_tag: fields[3].to_string(),
            });
        }
        let version = version.ok_or_else(|| Error::dataset(None, "manifest missing version header"))?;
        if version != FORMAT_VERSION {
            return Err(Error::dataset(
                None,
                format!("manifest version {version} unsupported (expected {FORMAT_VERSION})"),
            ));
        }
        let split = split.ok_or_else(|| Error::dataset(None, "manifest missing split header"))?;
        let seed = seed.ok_or_else(|| Error::dataset(None, "manifest missing seed header"))?;
        for pair in entries.windows(2) {
            if pair[1].id <= pair[0].id {
                return Err(Error::dataset(
                    pair[1].id,
                    "manifest ids must be unique and strictly increasing",
                ));
            }
        }
        Ok(DatasetManifest {
            version,
            split,
            seed,
            entries,
        })
    }
}

fn image_to_array(img: &RgbImage) -> Array3<u8> {
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.as_raw().clone())
        .expect("raster buffer length matches dimensions")
}

fn array_to_image(arr: &Array2<u8>) -> GrayImage {
    let (h, w) = arr.dim();
    let data = arr.as_standard_layout().iter().copied().collect();
    GrayImage::from_raw(w as u32, h as u32, data).expect("buffer length matches dimensions")
}

fn write_png_rgb(path: &Path, arr: &Array3<u8>) -> Result<()> {
    let (h, w, c) = arr.dim();
    assert_eq!(c, 3);
    let data: Vec<u8> = arr.as_standard_layout().iter().copied().collect();
    let img = RgbImage::from_raw(w as u32, h as u32, data).expect("buffer length matches");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

/// Write samples under `root` and return the manifest that was recorded.
pub fn write_dataset(
    root: &Path,
    split: Split,
    seed: u64,
    samples: &[StoredSample],
) -> Result<DatasetManifest> {
    for dir in ["images", "masks"] {
        fs::create_dir_all(root.join(dir)).map_err(|e| Error::io(root.join(dir), e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        if s.attack_tag.is_empty() || s.attack_tag.chars().any(char::is_whitespace) {
            return Err(Error::dataset(
                s.id,
                format!("attack tag '{}' must be non-empty without whitespace", s.attack_tag),
            ));
        }
        if let Some(&bad) = s.mask.iter().find(|&&v| v > 2) {
            return Err(Error::dataset(s.id, format!("mask label {bad} out of range")));
        }
        let image_path = format!("images/{:06}.png", s.id);
        let mask_path = format!("masks/{:06}.png", s.id);
        write_png_rgb(&root.join(&image_path), &s.image)?;
        let mask_img = array_to_image(&s.mask);
        mask_img
            .save_with_format(root.join(&mask_path), image::ImageFormat::Png)
            .map_err(|e| Error::image(root.join(&mask_path), e))?;
        entries.push(ManifestEntry {
            id: s.id,
            image_path,
            mask_path,
            attack_tag: s.attack_tag.clone(),
        });
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        split,
        seed,
        entries,
    };
    let path = root.join("manifest.txt");
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

/// A dataset root with a parsed manifest; samples are decoded on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::dataset(None, format!("no manifest at {}", path.display()))
            } else {
                Error::io(&path, e)
            }
        })?;
        let manifest = DatasetManifest::parse(&text)?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.manifest.entries.iter().map(|e| e.id)
    }

    /// Decode every sample into memory, in manifest order.
    pub fn load_all(&self) -> Result<Vec<LoadedSample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }

    /// Decode the sample at manifest position `index`.
    pub fn load(&self, index: usize) -> Result<LoadedSample> {
        let entry = self.manifest.entries.get(index).ok_or_else(|| {
            Error::dataset(None, format!("index {index} out of range ({} samples)", self.len()))
        })?;
        let image_path = self.root.join(&entry.image_path);
        let img = image::open(&image_path).map_err(|e| Error::image(&image_path, e))?;
        let image = image_to_array(&img.into_rgb8());

        let mask_path = self.root.join(&entry.mask_path);
        let mask_img = image::open(&mask_path)
            .map_err(|e| Error::image(&mask_path, e))?
            .into_luma8();
        let (w, h) = mask_img.dimensions();
        let mask = Array2::from_shape_vec((h as usize, w as usize), mask_img.into_raw())
            .expect("raster buffer length matches dimensions");
        if let Some(&bad) = mask.iter().find(|&&v| v > 2) {
            return Err(Error::dataset(
                entry.id,
                format!("mask label {bad} out of range (expected 0, 1, or 2)"),
            ));
        }
        if image.dim().0 != mask.dim().0 || image.dim().1 != mask.dim().1 {
            return Err(Error::dataset(
                entry.id,
                format!("image {:?} and mask {:?} sizes differ", image.dim(), mask.dim()),
            ));
        }
        Ok(LoadedSample {
            id: entry.id,
            image,
            mask,
            attack_tag: entry.attack_tag.clone(),
        })
    }
}

/// Open the dataset rooted at `root`.
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    Dataset::open(root)
}
