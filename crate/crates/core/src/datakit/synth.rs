//! Synthetic radiograph-like images with a controllable site shortcut.
//!
//! Each image is a smooth chest-like background with two darker lung fields.
//! The class signal is the number of focal opacities (bright Gaussian blobs):
//! positives carry 2-4, negatives 0-1. Every site stamps its own artifact, an
//! intensity offset plus a bright corner watermark. Sites have a "home" class
//! (even sites for positives, odd for negatives), and a sample is drawn from a
//! home site of its class with probability `bias_correlation`; otherwise it is
//! bias-conflicting.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::findings::FindingsTable;
use super::image::{GrayImage, ImageError};
use super::manifest::{DatasetManifest, ImageRecord, Label, ManifestError, Modality};
use super::store::{PixelStore, StoredImage};

pub const FINDINGS: [&str; 3] = ["Lung Opacity", "Pleural Effusion", "Cardiomegaly"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_per_class: usize,
    pub n_sites: usize,
    pub image_size: usize,
    /// Probability that a sample comes from a site aligned with its class.
    pub bias_correlation: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_per_class: 200,
            n_sites: 2,
            image_size: 32,
            bias_correlation: 0.9,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.bias_correlation) {
            return Err(SynthError::Config(format!(
                "bias_correlation {} outside [0, 1]",
                self.bias_correlation
            )));
        }
        if self.n_sites < 2 {
            return Err(SynthError::Config(format!(
                "n_sites must be >= 2, got {}",
                self.n_sites
            )));
        }
        if self.image_size < 16 {
            return Err(SynthError::Config(format!(
                "image_size must be >= 16, got {}",
                self.image_size
            )));
        }
        if self.n_per_class == 0 {
            return Err(SynthError::Config("n_per_class must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub site: usize,
    pub positive: bool,
    pub bias_conflicting: bool,
    pub findings: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub manifest: DatasetManifest,
    pub pixels: PixelStore,
    pub samples: Vec<SampleMeta>,
}

pub fn site_name(index: usize) -> String {
    format!("S{index}")
}

/// Home class of a site: even sites are aligned with positives.
pub fn site_home_is_positive(site: usize) -> bool {
    site % 2 == 0
}

pub fn generate_synthetic_biased(config: &SyntheticConfig) -> Result<SyntheticDataset, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let size = config.image_size;
    let vocabulary: Vec<String> = (0..config.n_sites).map(site_name).collect();

    let mut records = vec![];
    let mut samples = vec![];
    let mut pixels = PixelStore::new();
    for i in 0..2 * config.n_per_class {
        let positive = i % 2 == 0;
        let aligned: Vec<usize> = (0..config.n_sites)
            .filter(|&s| site_home_is_positive(s) == positive)
            .collect();
        let others: Vec<usize> = (0..config.n_sites)
            .filter(|&s| site_home_is_positive(s) != positive)
            .collect();
        let conflicting = !rng.random_bool(config.bias_correlation);
        let pool = if conflicting { &others } else { &aligned };
        let site = pool[rng.random_range(0..pool.len())];

        let (image, findings) = render(&mut rng, size, positive, site, config.n_sites);
        let id = format!("syn{:05}", i);
        records.push(ImageRecord {
            id: id.clone(),
            site: site_name(site),
            modality: if site % 2 == 0 { Modality::CR } else { Modality::DR },
            label: if positive { Label::Positive } else { Label::Negative },
            path: PathBuf::from(format!("images/{id}.png")),
            width: size as u32,
            height: size as u32,
            bits_stored: 16,
            patient_id: None,
        });
        pixels.insert(
            id.clone(),
            StoredImage {
                width: size,
                height: size,
                samples: image.to_u16(),
            },
        );
        samples.push(SampleMeta {
            id,
            site,
            positive,
            bias_conflicting: conflicting,
            findings,
        });
    }
    Ok(SyntheticDataset {
        config: *config,
        manifest: DatasetManifest::new(records, vocabulary)?,
        pixels,
        samples,
    })
}

fn gaussian_bump(img: &mut GrayImage, cx: f64, cy: f64, sigma: f64, amplitude: f32) {
    let two_s2 = 2.0 * sigma * sigma;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let v = img.get(x, y) + amplitude * (-d2 / two_s2).exp() as f32;
            img.set(x, y, v);
        }
    }
}

fn render(rng: &mut ChaCha8Rng, size: usize, positive: bool, site: usize, n_sites: usize) -> (GrayImage, Vec<bool>) {
    let s = size as f64;
    let mut img = GrayImage::filled(size, size, 0.0);
    let lungs = [(0.3 * s, 0.5 * s), (0.7 * s, 0.5 * s)];
    let (lung_rx, lung_ry) = (0.16 * s, 0.3 * s);
    let in_lung = |x: f64, y: f64| {
        lungs
            .iter()
            .any(|&(cx, cy)| ((x - cx) / lung_rx).powi(2) + ((y - cy) / lung_ry).powi(2) <= 1.0)
    };

    let cardiomegaly = rng.random_bool(0.3);
    let effusion = rng.random_bool(0.3);
    let heart_r = if cardiomegaly { 0.2 * s } else { 0.12 * s };
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let mut v = 0.45 + 0.1 * fy / s;
            if in_lung(fx, fy) {
                v = 0.22 + 0.05 * fy / s;
                if effusion && fy > 0.68 * s {
                    v += 0.18;
                }
            }
            if ((fx - 0.5 * s).powi(2) + (fy - 0.62 * s).powi(2)).sqrt() <= heart_r {
                v = 0.5;
            }
            img.set(x, y, v as f32);
        }
    }

    let blobs = if positive {
        rng.random_range(2..=4)
    } else {
        rng.random_range(0..=1)
    };
    for _ in 0..blobs {
        let &(cx, cy) = &lungs[rng.random_range(0..2)];
        let bx = cx + rng.random_range(-0.5..0.5) * lung_rx;
        let by = cy + rng.random_range(-0.6..0.6) * lung_ry;
        gaussian_bump(&mut img, bx, by, 0.06 * s, 0.22);
    }

    // site artifact: global offset and a corner watermark
    let offset = 0.1 * site as f32 / (n_sites - 1) as f32;
    let mark = (size / 8).max(2);
    let (mx, my) = match site % 4 {
        0 => (1, 1),
        1 => (size - mark - 1, 1),
        2 => (1, size - mark - 1),
        _ => (size - mark - 1, size - mark - 1),
    };
    let noise = Normal::new(0.0f32, 0.02).expect("valid sigma");
    for y in 0..size {
        for x in 0..size {
            let mut v = img.get(x, y) + offset + noise.sample(rng);
            if (mx..mx + mark).contains(&x) && (my..my + mark).contains(&y) {
                v = 0.95;
            }
            img.set(x, y, v.clamp(0.0, 1.0));
        }
    }
    (img, vec![blobs >= 1, effusion, cardiomegaly])
}

impl SyntheticDataset {
    pub fn findings_table(&self) -> FindingsTable {
        FindingsTable {
            vocabulary: FINDINGS.iter().map(|s| s.to_string()).collect(),
            rows: self
                .samples
                .iter()
                .map(|m| (m.id.clone(), m.findings.iter().map(|&f| Some(f)).collect()))
                .collect(),
        }
    }

    pub fn meta_csv_string(&self) -> String {
        let mut out = String::from("id,site,label,bias_conflicting\n");
        for m in &self.samples {
            out.push_str(&format!(
                "{},{},{},{}\n",
                m.id,
                site_name(m.site),
                if m.positive { "pos" } else { "neg" },
                m.bias_conflicting
            ));
        }
        out
    }

    /// Writes `manifest.csv`, `findings.csv`, `meta.csv` and `images/*.png` under `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
        fs::create_dir_all(dir.join("images"))?;
        let manifest = dir.join("manifest.csv");
        let findings = dir.join("findings.csv");
        let meta = dir.join("meta.csv");
        self.manifest.save(&manifest)?;
        fs::write(&findings, self.findings_table().to_csv_string())?;
        fs::write(&meta, self.meta_csv_string())?;
        self.pixels.save(&self.manifest, dir)?;
        Ok(vec![manifest, findings, meta, dir.join("images")])
    }
}

/// Reads the `meta.csv` written next to a synthetic manifest: id to bias-conflicting flag.
pub fn load_bias_flags(path: &Path) -> Result<std::collections::BTreeMap<String, bool>, SynthError> {
    let text = fs::read_to_string(path)?;
    let mut out = std::collections::BTreeMap::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 {
            return Err(SynthError::Config(format!("bad meta line `{line}`")));
        }
        out.insert(cells[0].to_string(), cells[3].trim() == "true");
    }
    Ok(out)
}
