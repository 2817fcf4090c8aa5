//! Stage one: multi-label findings pretraining of the encoder.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{cosine_lr_schedule, TrainConfig};
use super::encoder::{EncoderCheckpoint, SmallCnn};
use super::TrainError;
use crate::datakit::{augment, DatasetManifest, FindingsTable, GrayImage, PixelStore, UncertainPolicy};

/// Images with per-image binary finding targets over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct FindingsDataset {
    pub vocabulary: Vec<String>,
    pub images: Vec<GrayImage>,
    pub targets: Vec<Vec<bool>>,
}

impl FindingsDataset {
    /// Joins manifest records, their pixels and the findings table by id.
    pub fn from_parts(
        manifest: &DatasetManifest,
        pixels: &PixelStore,
        findings: &FindingsTable,
        policy: UncertainPolicy,
    ) -> Result<Self, TrainError> {
        let mut images = Vec::with_capacity(manifest.len());
        let mut targets = Vec::with_capacity(manifest.len());
        for r in manifest.records() {
            let img = pixels
                .get(&r.id)
                .ok_or_else(|| TrainError::Data(format!("no pixels for `{}`", r.id)))?;
            let t = findings
                .targets(&r.id, policy)
                .ok_or_else(|| TrainError::Data(format!("no findings row for `{}`", r.id)))?;
            images.push(img.to_gray());
            targets.push(t);
        }
        Ok(Self {
            vocabulary: findings.vocabulary.clone(),
            images,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.vocabulary.is_empty() {
            return Err(TrainError::Data("empty findings vocabulary".into()));
        }
        if self.images.len() != self.targets.len() {
            return Err(TrainError::Data(format!(
                "{} images but {} target rows",
                self.images.len(),
                self.targets.len()
            )));
        }
        if let Some(row) = self.targets.iter().find(|t| t.len() != self.vocabulary.len()) {
            return Err(TrainError::VocabularyMismatch {
                expected: self.vocabulary.clone(),
                got: (0..row.len()).map(|i| format!("#{i}")).collect(),
            });
        }
        if self.images.len() < 2 {
            return Err(TrainError::Data("pretraining needs at least 2 images".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub n_train: usize,
    pub n_holdout: usize,
    pub initial_holdout_loss: f64,
    pub final_holdout_loss: f64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn pretrain_findings(
    data: &FindingsDataset,
    config: &TrainConfig,
) -> Result<(EncoderCheckpoint, PretrainReport), TrainError> {
    config.validate()?;
    data.validate()?;
    let side = config.image_side;
    let channels: [usize; 4] = config.channels.clone().try_into().expect("validated length");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = SmallCnn::new(side, channels, data.vocabulary.len(), &mut rng)?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_holdout = ((data.len() as f64 * config.holdout_fraction).round() as usize).min(data.len() - 1);
    let (holdout, train) = order.split_at(n_holdout);
    let fit = |img: &GrayImage| {
        if img.width() == side && img.height() == side {
            img.clone()
        } else {
            img.resize(side, side)
        }
    };
    let holdout_images: Vec<GrayImage> = holdout.iter().map(|&i| fit(&data.images[i])).collect();
    let holdout_targets: Vec<Vec<bool>> = holdout.iter().map(|&i| data.targets[i].clone()).collect();
    let holdout_loss = |m: &SmallCnn| -> Result<f64, TrainError> {
        if holdout_images.is_empty() {
            Ok(f64::NAN)
        } else {
            m.mean_loss(&holdout_images, &holdout_targets)
        }
    };
    let initial_holdout_loss = holdout_loss(&model)?;

    let aug = config.augment_config();
    let mut velocity = vec![0.0f32; model.params().len()];
    let mut train_order = train.to_vec();
    let mut epoch_losses = Vec::with_capacity(config.pretrain_epochs);
    let mut trace: Vec<f64> = vec![];
    for epoch in 0..config.pretrain_epochs {
        let lr = cosine_lr_schedule(epoch, config.pretrain_epochs, config.pretrain_lr)? as f32;
        train_order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in train_order.chunks(config.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let img = augment(&data.images[i], &aug, &mut rng).map_err(|e| TrainError::Config(e.to_string()))?;
                images.push(img);
            }
            let refs: Vec<&GrayImage> = images.iter().collect();
            let targets: Vec<&[bool]> = chunk.iter().map(|&i| data.targets[i].as_slice()).collect();
            let (loss, grad) = model.batch_loss_and_grad(&refs, &targets)?;
            trace.push(loss);
            if trace.len() > 10 {
                trace.remove(0);
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b, trace });
            }
            sgd_step(
                model.params_mut(),
                &mut velocity,
                &grad,
                lr,
                config.momentum as f32,
                config.weight_decay as f32,
            );
            sum += loss;
            batches += 1;
        }
        epoch_losses.push(sum / batches.max(1) as f64);
    }

    let final_holdout_loss = holdout_loss(&model)?;
    let fingerprint = config.fingerprint(
        "encoder",
        &data.vocabulary.iter().map(String::as_str).collect::<Vec<_>>(),
    );
    let checkpoint = EncoderCheckpoint::new(model, data.vocabulary.clone(), fingerprint)?;
    Ok((
        checkpoint,
        PretrainReport {
            n_train: train.len(),
            n_holdout,
            initial_holdout_loss,
            final_holdout_loss,
            epoch_losses,
        },
    ))
}

/// Momentum SGD with L2 weight decay: `v = m*v + g + wd*p; p -= lr*v`.
fn sgd_step(params: &mut [f32], velocity: &mut [f32], grad: &[f32], lr: f32, momentum: f32, wd: f32) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g + wd * *p;
        *p -= lr * *v;
    }
}
