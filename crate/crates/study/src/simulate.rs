//! Scripted virtual readers driving a service on a manual clock.
//!
//! Each image has a latent severity: a class mean (higher for Covid-19
//! positives) plus a small per-image spread. A reader scores
//! `latent + reader bias + noise`, rounded and clamped to [0, 18], where the
//! noise is smaller in the assisted arm. Reading times come from a
//! per-image difficulty and a per-reader speed; assisted readings are scaled
//! by `assisted_time_factor`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use cxr_core::datakit::{generate_synthetic_biased, SyntheticConfig};
use cxr_core::evalkit::{Arm, MAX_SEVERITY};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clock::ManualClock;
use crate::config::{ReaderInfo, StudyConfig, StudyImage};
use crate::dicom::{write_dicom, DicomWriteSpec, Photometric, EXPLICIT_VR_LE};
use crate::report::{FindingProbability, ModelOutput, NO_FINDING};
use crate::service::{NextItem, StudyService, SubmitRequest};
use crate::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub study_id: String,
    pub n_readers: usize,
    /// Half positives, half negatives.
    pub n_images: usize,
    pub positive_mean: f64,
    pub negative_mean: f64,
    /// Standard deviation of the latent severity around the class mean.
    pub image_spread: f64,
    pub blind_noise: f64,
    pub assisted_noise: f64,
    pub mean_blind_time_s: f64,
    pub assisted_time_factor: f64,
    pub washout_days: u32,
    /// Side of the synthetic DICOM images; 0 skips writing pixel data.
    pub image_side: usize,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            study_id: "sim".into(),
            n_readers: 6,
            n_images: 20,
            positive_mean: 8.0,
            negative_mean: 6.0,
            image_spread: 0.75,
            blind_noise: 4.0,
            assisted_noise: 1.0,
            mean_blind_time_s: 90.0,
            assisted_time_factor: 0.75,
            washout_days: 14,
            image_side: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub study_id: String,
    pub data_dir: PathBuf,
    pub events_csv: Arc<String>,
    pub truth: BTreeMap<String, bool>,
}

/// Start of the virtual clock.
pub fn simulation_epoch() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339("2026-01-05T08:00:00Z")
        .expect("valid timestamp")
        .with_timezone(&Utc)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check(config: &SimulationConfig) -> Result<(), ServiceError> {
    let bad = |m: &str| Err(ServiceError::InvalidConfig(m.to_string()));
    if config.n_images < 2 || config.n_images % 2 != 0 {
        return bad("n_images must be even and >= 2");
    }
    if config.n_readers == 0 {
        return bad("n_readers must be positive");
    }
    if !(config.blind_noise >= 0.0 && config.assisted_noise >= 0.0 && config.image_spread >= 0.0) {
        return bad("noise levels and image_spread must be >= 0");
    }
    if !(config.mean_blind_time_s > 0.0 && config.assisted_time_factor > 0.0) {
        return bad("reading times must be positive");
    }
    if config.image_side != 0 && config.image_side < 16 {
        return bad("image_side must be 0 or >= 16");
    }
    Ok(())
}

fn score<R: Rng>(rng: &mut R, latent: f64, bias: f64, noise: f64) -> i64 {
    let n = Normal::new(0.0, noise).expect("noise checked").sample(rng);
    (latent + bias + n).round().clamp(0.0, MAX_SEVERITY as f64) as i64
}

/// Creates the study in `data_dir` (fresh directory expected) and plays every
/// reader through the blind arm, the wash-out and the assisted arm.
pub fn run_simulation(config: &SimulationConfig, data_dir: &Path) -> Result<SimulationOutput, ServiceError> {
    check(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let half = config.n_images / 2;

    let mut latent = BTreeMap::new();
    let mut images = vec![];
    let pixels = if config.image_side > 0 {
        let synth = generate_synthetic_biased(&SyntheticConfig {
            n_per_class: half,
            n_sites: 2,
            image_size: config.image_side,
            bias_correlation: 0.5,
            seed: config.seed,
        })
        .map_err(|e| ServiceError::InvalidConfig(e.to_string()))?;
        Some(synth)
    } else {
        None
    };
    let image_dir = data_dir.join("images");
    if pixels.is_some() {
        fs::create_dir_all(&image_dir).map_err(|e| ServiceError::Io(image_dir.display().to_string(), e))?;
    }
    let latent_dist = |positive: bool| {
        let mean = if positive {
            config.positive_mean
        } else {
            config.negative_mean
        };
        Normal::<f64>::new(mean, config.image_spread).expect("spread checked")
    };
    for i in 0..config.n_images {
        // synthetic generator alternates positive/negative the same way
        let positive = i % 2 == 0;
        let id = format!("img{i:03}");
        let l: f64 = latent_dist(positive).sample(&mut rng).clamp(0.0, MAX_SEVERITY as f64);
        latent.insert(id.clone(), l);
        let covid = sigmoid(
            l - (config.positive_mean + config.negative_mean) / 2.0
                + Normal::new(0.0, 0.5).expect("valid").sample(&mut rng),
        );
        let opacity = sigmoid(l - (config.positive_mean + config.negative_mean) / 2.0 + rng.random_range(-0.5..0.5));
        let effusion = rng.random_range(0.0..0.7);
        let findings = vec![
            FindingProbability {
                name: NO_FINDING.into(),
                probability: 1.0 - opacity.max(effusion),
            },
            FindingProbability {
                name: "Lung Opacity".into(),
                probability: opacity,
            },
            FindingProbability {
                name: "Pleural Effusion".into(),
                probability: effusion,
            },
        ];
        let dicom = match &pixels {
            Some(synth) => {
                let stored = &synth.pixels.get(&synth.samples[i].id).expect("generated").samples;
                let rel = PathBuf::from("images").join(format!("{id}.dcm"));
                let spec = DicomWriteSpec {
                    rows: config.image_side,
                    columns: config.image_side,
                    bits_stored: 12,
                    photometric: Photometric::Monochrome2,
                    rescale_slope: 1.0,
                    rescale_intercept: 0.0,
                    window: Some((2048.0, 4096.0)),
                    transfer_syntax: EXPLICIT_VR_LE.into(),
                };
                let twelve: Vec<u16> = stored.iter().map(|&v| v >> 4).collect();
                write_dicom(&data_dir.join(&rel), &spec, &twelve)?;
                Some(rel)
            }
            None => None,
        };
        images.push(StudyImage {
            id,
            label: positive,
            dicom,
            model_output: Some(ModelOutput {
                covid_probability: covid,
                findings,
            }),
        });
    }
    let truth: BTreeMap<String, bool> = images.iter().map(|i| (i.id.clone(), i.label)).collect();
    let difficulty: BTreeMap<String, f64> = images
        .iter()
        .map(|i| (i.id.clone(), rng.random_range(0.5..1.5)))
        .collect();

    let readers: Vec<ReaderInfo> = (0..config.n_readers)
        .map(|r| ReaderInfo {
            id: format!("reader{}", r + 1),
            affiliation: "virtual".into(),
            years_experience: 2 + (r as u32 * 5) % 20,
        })
        .collect();
    let bias: Vec<f64> = readers.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
    let speed: Vec<f64> = readers.iter().map(|_| rng.random_range(0.8..1.2)).collect();

    let study = StudyConfig {
        id: config.study_id.clone(),
        images,
        readers: readers.clone(),
        washout_days: config.washout_days,
        seed: config.seed,
        washout_override: false,
    };
    let clock = Arc::new(ManualClock::new(simulation_epoch()));
    let service = StudyService::open(data_dir, clock.clone())?;
    service.create_study(study)?;

    let jitter = Normal::<f64>::new(0.0, 0.15).expect("valid");
    for arm in Arm::ALL {
        if arm == Arm::Assisted {
            clock.advance(Duration::days(config.washout_days as i64) + Duration::hours(1));
        }
        let (noise, factor) = match arm {
            Arm::Blind => (config.blind_noise, 1.0),
            Arm::Assisted => (config.assisted_noise, config.assisted_time_factor),
        };
        for (r, reader) in readers.iter().enumerate() {
            while let NextItem::Item { image, .. } = service.next_item(&config.study_id, &reader.id, arm)? {
                let seconds =
                    config.mean_blind_time_s * factor * difficulty[&image] * speed[r] * jitter.sample(&mut rng).exp();
                clock.advance(Duration::milliseconds((seconds * 1000.0).round().max(1.0) as i64));
                let severity = score(&mut rng, latent[&image], bias[r], noise);
                service.submit_reading(
                    &config.study_id,
                    &SubmitRequest {
                        reader: reader.id.clone(),
                        image,
                        arm: Some(arm),
                        severity,
                        client_metadata: None,
                    },
                )?;
                clock.advance(Duration::seconds(5));
            }
        }
    }
    Ok(SimulationOutput {
        study_id: config.study_id.clone(),
        data_dir: data_dir.to_path_buf(),
        events_csv: service.export_events(&config.study_id)?,
        truth,
    })
}
