//! In-memory pixel storage keyed by record id.

use std::collections::BTreeMap;
use std::path::Path;

use super::image::{read_png16, write_png16, GrayImage, ImageError};
use super::manifest::DatasetManifest;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredImage {
    pub width: usize,
    pub height: usize,
    pub samples: Vec<u16>,
}

impl StoredImage {
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_u16(self.width, self.height, &self.samples).expect("stored image shape invariant")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PixelStore {
    images: BTreeMap<String, StoredImage>,
}

impl PixelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, image: StoredImage) {
        self.images.insert(id.into(), image);
    }

    pub fn get(&self, id: &str) -> Option<&StoredImage> {
        self.images.get(id)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &StoredImage)> {
        self.images.iter()
    }

    /// Loads every record's PNG, resolving paths against the manifest directory.
    pub fn load(manifest: &DatasetManifest) -> Result<Self, ImageError> {
        let mut store = Self::new();
        for r in manifest.records() {
            let (width, height, samples) = read_png16(&manifest.pixel_path(r))?;
            store.insert(r.id.clone(), StoredImage { width, height, samples });
        }
        Ok(store)
    }

    /// Writes every image whose id appears in the manifest to its record path.
    pub fn save(&self, manifest: &DatasetManifest, base: &Path) -> Result<(), ImageError> {
        for r in manifest.records() {
            let Some(img) = self.images.get(&r.id) else {
                continue;
            };
            let path = base.join(&r.path);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|source| ImageError::Io {
                    path: parent.display().to_string(),
                    source,
                })?;
            }
            write_png16(&path, img.width, img.height, &img.samples)?;
        }
        Ok(())
    }
}
