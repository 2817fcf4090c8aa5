//! Stage two: two-layer binary head on frozen encoder features.
//!
//! `h = relu(W1 x + b1)`, `logit = w2 . h + b2`, where `x` is the feature
//! vector standardised with statistics of the training set. FairKL acts on
//! `h`, the only trainable representation under a frozen encoder.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::config::{cosine_lr_schedule, TrainConfig};
use super::encoder::EncoderCheckpoint;
use super::sampler::epoch_batches;
use super::TrainError;
use crate::biascore::{bce_with_grad, combined_objective, fairkl_with_grad, sigmoid, EmbeddingBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    pub feature_mean: Array1<f64>,
    pub feature_scale: Array1<f64>,
    /// `hidden x input`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

impl HeadModel {
    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.nrows()
    }

    fn check_dim(&self, features: ArrayView2<'_, f64>) -> Result<(), TrainError> {
        if features.ncols() != self.input_dim() {
            return Err(TrainError::FeatureDim {
                expected: self.input_dim(),
                got: features.ncols(),
            });
        }
        Ok(())
    }

    fn standardize(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        (&features - &self.feature_mean) / &self.feature_scale
    }

    fn pre_activation(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w1.t()) + &self.b1
    }

    /// Post-ReLU hidden activations, one row per sample.
    pub fn hidden(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>, TrainError> {
        self.check_dim(features)?;
        Ok(self.pre_activation(&self.standardize(features)).mapv(|v| v.max(0.0)))
    }

    pub fn logits(&self, features: ArrayView2<'_, f64>) -> Result<Vec<f64>, TrainError> {
        let h = self.hidden(features)?;
        Ok((h.dot(&self.w2) + self.b2).to_vec())
    }

    /// Positive-class probabilities.
    pub fn predict_proba(&self, features: ArrayView2<'_, f64>) -> Result<Vec<f64>, TrainError> {
        Ok(self.logits(features)?.into_iter().map(sigmoid).collect())
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = vec![];
        out.extend(self.feature_mean.iter());
        out.extend(self.feature_scale.iter());
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.push(self.b2);
        out
    }

    fn from_flat(d: usize, h: usize, v: &[f64]) -> Result<Self, TrainError> {
        if v.len() != 2 * d + h * d + 2 * h + 1 {
            return Err(TrainError::Checkpoint(format!(
                "{} head values for d={d}, h={h}",
                v.len()
            )));
        }
        let mut at = 0;
        let mut take = |n: usize| {
            at += n;
            v[at - n..at].to_vec()
        };
        Ok(Self {
            feature_mean: Array1::from(take(d)),
            feature_scale: Array1::from(take(d)),
            w1: Array2::from_shape_vec((h, d), take(h * d)).expect("sized"),
            b1: Array1::from(take(h)),
            w2: Array1::from(take(h)),
            b2: take(1)[0],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub lr: f64,
    pub bce: f64,
    pub fairkl: f64,
    pub total: f64,
}

/// Per-epoch means of the objective terms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingCurve {
    pub rows: Vec<CurveRow>,
}

impl TrainingCurve {
    /// `epoch,lr,bce,fairkl,total` with shortest round-trip float formatting.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("epoch,lr,bce,fairkl,total\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.lr, r.bce, r.fairkl, r.total);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("epoch,lr,bce,fairkl,total") {
            return Err(TrainError::Data(
                "curve file lacks the `epoch,lr,bce,fairkl,total` header".into(),
            ));
        }
        let mut rows = vec![];
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let bad = || TrainError::Data(format!("bad curve line `{line}`"));
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != 5 {
                return Err(bad());
            }
            let f = |i: usize| c[i].trim().parse::<f64>().map_err(|_| bad());
            rows.push(CurveRow {
                epoch: c[0].trim().parse().map_err(|_| bad())?,
                lr: f(1)?,
                bce: f(2)?,
                fairkl: f(3)?,
                total: f(4)?,
            });
        }
        Ok(Self { rows })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeadMeta {
    input_dim: usize,
    hidden_width: usize,
    lambda: f64,
    parent_fingerprint: String,
    fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadCheckpoint {
    pub model: HeadModel,
    pub lambda: f64,
    pub parent_fingerprint: String,
    pub fingerprint: String,
    pub curve: TrainingCurve,
}

impl HeadCheckpoint {
    /// Curve file written next to a checkpoint at `path`.
    pub fn curve_path(path: &Path) -> PathBuf {
        let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".curve.csv");
        path.with_file_name(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = HeadMeta {
            input_dim: self.model.input_dim(),
            hidden_width: self.model.hidden_width(),
            lambda: self.lambda,
            parent_fingerprint: self.parent_fingerprint.clone(),
            fingerprint: self.fingerprint.clone(),
        };
        checkpoint::encode("head", &meta, &checkpoint::f64s_to_bytes(&self.model.flat()))
    }

    /// Decodes weights and metadata; the curve is left empty.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let (meta, blob): (HeadMeta, _) = checkpoint::decode("head", bytes)?;
        let model = HeadModel::from_flat(meta.input_dim, meta.hidden_width, &checkpoint::bytes_to_f64s(&blob)?)?;
        Ok(Self {
            model,
            lambda: meta.lambda,
            parent_fingerprint: meta.parent_fingerprint,
            fingerprint: meta.fingerprint,
            curve: TrainingCurve::default(),
        })
    }

    /// Writes the checkpoint and its curve file.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        checkpoint::write_atomic(path, &self.to_bytes())?;
        checkpoint::write_atomic(&Self::curve_path(path), self.curve.to_csv_string().as_bytes())
    }

    /// Loads the checkpoint and, when present, its curve file.
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut ck = Self::from_bytes(&checkpoint::read(path)?)?;
        let curve = Self::curve_path(path);
        if curve.exists() {
            let text = fs::read_to_string(&curve).map_err(|e| TrainError::Io(curve.display().to_string(), e))?;
            ck.curve = TrainingCurve::parse(&text)?;
        }
        Ok(ck)
    }

    pub fn check_parent(&self, encoder: &EncoderCheckpoint) -> Result<(), TrainError> {
        if encoder.fingerprint != self.parent_fingerprint {
            return Err(TrainError::ParentMismatch {
                expected: self.parent_fingerprint.clone(),
                got: encoder.fingerprint.clone(),
            });
        }
        Ok(())
    }
}

/// Trains the head on frozen features (one row per sample).
///
/// `sites[i]` indexes a vocabulary of `n_sites` sites. The FairKL term is
/// measured on every batch and recorded in the curve even when `lambda` is 0.
pub fn train_covid_head(
    features: ArrayView2<'_, f64>,
    labels: &[bool],
    sites: &[usize],
    n_sites: usize,
    encoder: &EncoderCheckpoint,
    config: &TrainConfig,
) -> Result<HeadCheckpoint, TrainError> {
    config.validate()?;
    let n = features.nrows();
    let d = features.ncols();
    if d != encoder.embedding_dim() {
        return Err(TrainError::FeatureDim {
            expected: encoder.embedding_dim(),
            got: d,
        });
    }
    if labels.len() != n || sites.len() != n {
        return Err(TrainError::Data(format!(
            "{n} feature rows, {} labels, {} sites",
            labels.len(),
            sites.len()
        )));
    }
    if let Some(&s) = sites.iter().find(|&&s| s >= n_sites) {
        return Err(TrainError::Data(format!(
            "site index {s} outside vocabulary of {n_sites}"
        )));
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(TrainError::SingleClass(n));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x4845_4144);
    let mean = features.mean_axis(Axis(0)).expect("non-empty");
    let scale = features.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-8 { s } else { 1.0 });
    let h = config.hidden_width;
    let w1_init = Normal::new(0.0, (2.0 / d as f64).sqrt()).expect("positive std");
    let w2_init = Normal::new(0.0, (1.0 / h as f64).sqrt()).expect("positive std");
    let mut model = HeadModel {
        feature_mean: mean,
        feature_scale: scale,
        w1: Array2::from_shape_simple_fn((h, d), || w1_init.sample(&mut rng)),
        b1: Array1::zeros(h),
        w2: Array1::from_shape_simple_fn(h, || w2_init.sample(&mut rng)),
        b2: 0.0,
    };
    let x = model.standardize(features);

    let mut vel = HeadGrad::zeros(h, d);
    let mut curve = TrainingCurve::default();
    let mut trace: Vec<f64> = vec![];
    for epoch in 0..config.epochs {
        let lr = cosine_lr_schedule(epoch, config.epochs, config.base_lr)?;
        let batches = epoch_batches(labels, sites, config.batch_size, config.sampler, &mut rng);
        let (mut bce_sum, mut kl_sum) = (0.0, 0.0);
        for (b, idx) in batches.iter().enumerate() {
            let xb = x.select(Axis(0), idx);
            let tb: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            let sb: Vec<usize> = idx.iter().map(|&i| sites[i]).collect();
            let (bce, kl, mut grad) = batch_step(&model, &xb, &tb, &sb, n_sites, config.lambda)?;
            trace.push(bce + config.lambda * kl);
            if trace.len() > 10 {
                trace.remove(0);
            }
            if !bce.is_finite() || !kl.is_finite() || !grad.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b, trace });
            }
            if config.grad_clip > 0.0 {
                grad.clip_norm(config.grad_clip);
            }
            vel.momentum_update(&grad, &model, config.momentum, config.weight_decay);
            model.w1.scaled_add(-lr, &vel.w1);
            model.b1.scaled_add(-lr, &vel.b1);
            model.w2.scaled_add(-lr, &vel.w2);
            model.b2 -= lr * vel.b2;
            bce_sum += bce;
            kl_sum += kl;
        }
        let nb = batches.len() as f64;
        let objective = combined_objective(bce_sum / nb, kl_sum / nb, config.lambda)?;
        curve.rows.push(CurveRow {
            epoch,
            lr,
            bce: objective.bce,
            fairkl: objective.fairkl,
            total: objective.total,
        });
    }

    let fingerprint = config.fingerprint("head", &[&encoder.fingerprint]);
    Ok(HeadCheckpoint {
        model,
        lambda: config.lambda,
        parent_fingerprint: encoder.fingerprint.clone(),
        fingerprint,
        curve,
    })
}

struct HeadGrad {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array1<f64>,
    b2: f64,
}

impl HeadGrad {
    fn zeros(h: usize, d: usize) -> Self {
        Self {
            w1: Array2::zeros((h, d)),
            b1: Array1::zeros(h),
            w2: Array1::zeros(h),
            b2: 0.0,
        }
    }

    fn is_finite(&self) -> bool {
        self.b2.is_finite() && self.w1.iter().chain(&self.b1).chain(&self.w2).all(|v| v.is_finite())
    }

    fn clip_norm(&mut self, max: f64) {
        let norm = (self.b2 * self.b2
            + self
                .w1
                .iter()
                .chain(&self.b1)
                .chain(&self.w2)
                .map(|v| v * v)
                .sum::<f64>())
        .sqrt();
        if norm > max {
            let s = max / norm;
            self.w1 *= s;
            self.b1 *= s;
            self.w2 *= s;
            self.b2 *= s;
        }
    }

    fn momentum_update(&mut self, g: &HeadGrad, model: &HeadModel, momentum: f64, wd: f64) {
        self.w1 = &self.w1 * momentum + &g.w1 + &model.w1 * wd;
        self.b1 = &self.b1 * momentum + &g.b1;
        self.w2 = &self.w2 * momentum + &g.w2 + &model.w2 * wd;
        self.b2 = self.b2 * momentum + g.b2;
    }
}

/// Mean BCE, measured FairKL and the gradient of `bce + lambda * fairkl`.
fn batch_step(
    model: &HeadModel,
    xb: &Array2<f64>,
    targets: &[bool],
    sites: &[usize],
    n_sites: usize,
    lambda: f64,
) -> Result<(f64, f64, HeadGrad), TrainError> {
    let a = model.pre_activation(xb);
    let hid = a.mapv(|v| v.max(0.0));
    let logits = (hid.dot(&model.w2) + model.b2).to_vec();
    let (bce, dz) = bce_with_grad(&logits, targets)?;
    let dz = Array1::from(dz);

    let mut dh = dz
        .view()
        .insert_axis(Axis(1))
        .dot(&model.w2.view().insert_axis(Axis(0)));
    // all-zero hidden rows have no direction and are left out of the regularizer
    let live: Vec<usize> = (0..hid.nrows())
        .filter(|&i| hid.row(i).iter().any(|&v| v != 0.0))
        .collect();
    let mut kl = 0.0;
    if live.len() >= 2 {
        let batch = EmbeddingBatch::new(
            hid.select(Axis(0), &live),
            live.iter().map(|&i| targets[i]).collect(),
            live.iter().map(|&i| sites[i]).collect(),
            n_sites,
        )?;
        let (value, grad) = fairkl_with_grad(&batch)?;
        kl = value;
        if lambda > 0.0 {
            for (row, &i) in live.iter().enumerate() {
                dh.row_mut(i).scaled_add(lambda, &grad.row(row));
            }
        }
    }

    let da = dh * a.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let grad = HeadGrad {
        w1: da.t().dot(xb),
        b1: da.sum_axis(Axis(0)),
        w2: hid.t().dot(&dz),
        b2: dz.sum(),
    };
    Ok((bce, kl, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_csv_round_trip_is_exact() {
        let curve = TrainingCurve {
            rows: vec![
                CurveRow {
                    epoch: 0,
                    lr: 0.01,
                    bce: 0.6931471805599453,
                    fairkl: 0.1 + 0.2,
                    total: 0.9931471805599453,
                },
                CurveRow {
                    epoch: 1,
                    lr: 1e-17,
                    bce: 1.0 / 3.0,
                    fairkl: 0.0,
                    total: 1.0 / 3.0,
                },
            ],
        };
        assert_eq!(TrainingCurve::parse(&curve.to_csv_string()).unwrap(), curve);
    }

    #[test]
    fn curve_path_appends_suffix() {
        assert_eq!(
            HeadCheckpoint::curve_path(Path::new("out/head.ckpt")),
            Path::new("out/head.ckpt.curve.csv")
        );
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, d, h) = (16, 5, 6);
        let x = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
        let targets: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let sites: Vec<usize> = (0..n).map(|i| (i / 2) % 2).collect();
        let model = HeadModel {
            feature_mean: Array1::zeros(d),
            feature_scale: Array1::ones(d),
            w1: Array2::from_shape_simple_fn((h, d), || rng.random_range(-1.0..1.0)),
            b1: Array1::from_shape_simple_fn(h, || rng.random_range(0.5..1.0)),
            w2: Array1::from_shape_simple_fn(h, || rng.random_range(-1.0..1.0)),
            b2: 0.1,
        };
        let objective = |m: &HeadModel| {
            let (bce, kl, _) = batch_step(m, &x, &targets, &sites, 2, 1.0).unwrap();
            bce + kl
        };
        let (_, kl, g) = batch_step(&model, &x, &targets, &sites, 2, 1.0).unwrap();
        assert!(kl > 0.0);
        let eps = 1e-6;
        for (r, c) in [(0, 0), (2, 3), (5, 4)] {
            let mut p = model.clone();
            p.w1[[r, c]] += eps;
            let mut m = model.clone();
            m.w1[[r, c]] -= eps;
            let fd = (objective(&p) - objective(&m)) / (2.0 * eps);
            assert!(
                (fd - g.w1[[r, c]]).abs() < 1e-5 * (1.0 + fd.abs()),
                "w1[{r},{c}] {fd} vs {}",
                g.w1[[r, c]]
            );
        }
        let mut p = model.clone();
        p.w2[3] += eps;
        let mut m = model.clone();
        m.w2[3] -= eps;
        let fd = (objective(&p) - objective(&m)) / (2.0 * eps);
        assert!((fd - g.w2[3]).abs() < 1e-6 * (1.0 + fd.abs()));
    }
}
