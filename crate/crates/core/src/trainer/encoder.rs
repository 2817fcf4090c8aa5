//! Small convolutional encoder with hand-written backpropagation.
//!
//! Four blocks of `conv3x3 (same) -> ReLU -> avgpool 2x2`, then global average
//! pooling to a `channels[3]`-dimensional embedding. A linear findings head on
//! top is used only during pretraining. Activations and weights are `f32`.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::TrainError;
use crate::datakit::GrayImage;

const KERNEL: usize = 9;

#[derive(Debug, Clone, Copy)]
struct BlockLayout {
    cin: usize,
    cout: usize,
    side: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    blocks: [BlockLayout; 4],
    head_weight: usize,
    head_bias: usize,
    total: usize,
}

fn layout(side: usize, channels: [usize; 4], n_outputs: usize) -> Layout {
    let mut offset = 0;
    let mut cin = 1;
    let blocks = std::array::from_fn(|b| {
        let cout = channels[b];
        let block = BlockLayout {
            cin,
            cout,
            side: side >> b,
            weight: offset,
            bias: offset + cout * cin * KERNEL,
        };
        offset = block.bias + cout;
        cin = cout;
        block
    });
    let d = channels[3];
    Layout {
        blocks,
        head_weight: offset,
        head_bias: offset + n_outputs * d,
        total: offset + n_outputs * d + n_outputs,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallCnn {
    side: usize,
    channels: [usize; 4],
    n_outputs: usize,
    params: Vec<f32>,
}

/// Per-sample activations kept for the backward pass.
struct Trace {
    /// Input to each block.
    inputs: Vec<Vec<f32>>,
    /// Post-ReLU output of each block, before pooling.
    relu: Vec<Vec<f32>>,
    embedding: Vec<f32>,
}

impl SmallCnn {
    /// He-initialised network. `side` must be a multiple of 16.
    pub fn new<R: Rng + ?Sized>(
        side: usize,
        channels: [usize; 4],
        n_outputs: usize,
        rng: &mut R,
    ) -> Result<Self, TrainError> {
        if side == 0 || side % 16 != 0 {
            return Err(TrainError::Config(format!(
                "input side {side} is not a positive multiple of 16"
            )));
        }
        if channels.contains(&0) || n_outputs == 0 {
            return Err(TrainError::Config(
                "channel widths and output count must be positive".into(),
            ));
        }
        let lay = layout(side, channels, n_outputs);
        let mut params = vec![0.0f32; lay.total];
        for b in &lay.blocks {
            let std = (2.0 / (b.cin * KERNEL) as f32).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut params[b.weight..b.bias] {
                *w = normal.sample(rng);
            }
        }
        let normal = Normal::new(0.0, (1.0 / channels[3] as f32).sqrt()).expect("positive std");
        for w in &mut params[lay.head_weight..lay.head_bias] {
            *w = normal.sample(rng);
        }
        Ok(Self {
            side,
            channels,
            n_outputs,
            params,
        })
    }

    pub fn from_params(
        side: usize,
        channels: [usize; 4],
        n_outputs: usize,
        params: Vec<f32>,
    ) -> Result<Self, TrainError> {
        let expected = layout(side, channels, n_outputs).total;
        if params.len() != expected || side % 16 != 0 || side == 0 {
            return Err(TrainError::Checkpoint(format!(
                "{} parameters for a network needing {expected} (side {side})",
                params.len()
            )));
        }
        Ok(Self {
            side,
            channels,
            n_outputs,
            params,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> [usize; 4] {
        self.channels
    }

    pub fn embedding_dim(&self) -> usize {
        self.channels[3]
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    fn check_input(&self, index: usize, image: &GrayImage) -> Result<(), TrainError> {
        if image.width() != self.side || image.height() != self.side {
            return Err(TrainError::InputSize {
                index,
                width: image.width(),
                height: image.height(),
                side: self.side,
            });
        }
        Ok(())
    }

    fn forward(&self, pixels: &[f32]) -> Trace {
        let lay = layout(self.side, self.channels, self.n_outputs);
        let mut x: Vec<f32> = pixels.iter().map(|v| (v - 0.5) * 4.0).collect();
        let mut inputs = Vec::with_capacity(4);
        let mut relu = Vec::with_capacity(4);
        for b in &lay.blocks {
            let w = &self.params[b.weight..b.bias];
            let bias = &self.params[b.bias..b.bias + b.cout];
            let mut z = conv3x3(&x, w, bias, b.cin, b.cout, b.side);
            for v in &mut z {
                *v = v.max(0.0);
            }
            let pooled = avgpool2(&z, b.cout, b.side);
            inputs.push(std::mem::replace(&mut x, pooled));
            relu.push(z);
        }
        let d = self.channels[3];
        let area = (self.side >> 4) * (self.side >> 4);
        let embedding = (0..d)
            .map(|c| x[c * area..(c + 1) * area].iter().sum::<f32>() / area as f32)
            .collect();
        Trace {
            inputs,
            relu,
            embedding,
        }
    }

    fn head_logits(&self, embedding: &[f32]) -> Vec<f32> {
        let lay = layout(self.side, self.channels, self.n_outputs);
        let d = self.channels[3];
        (0..self.n_outputs)
            .map(|k| {
                let row = &self.params[lay.head_weight + k * d..lay.head_weight + (k + 1) * d];
                self.params[lay.head_bias + k] + row.iter().zip(embedding).map(|(w, e)| w * e).sum::<f32>()
            })
            .collect()
    }

    /// Embedding of one image already at the input side.
    pub fn embed(&self, image: &GrayImage) -> Result<Vec<f32>, TrainError> {
        self.check_input(0, image)?;
        Ok(self.forward(image.data()).embedding)
    }

    /// Findings logits of one image already at the input side.
    pub fn findings_logits(&self, image: &GrayImage) -> Result<Vec<f32>, TrainError> {
        self.check_input(0, image)?;
        Ok(self.head_logits(&self.forward(image.data()).embedding))
    }

    /// Summed per-finding BCE and its gradient for a single image.
    pub fn loss_and_grad(&self, image: &GrayImage, targets: &[bool]) -> Result<(f64, Vec<f32>), TrainError> {
        self.check_input(0, image)?;
        if targets.len() != self.n_outputs {
            return Err(TrainError::Data(format!(
                "{} targets for a {}-way findings head",
                targets.len(),
                self.n_outputs
            )));
        }
        Ok(self.backward(image.data(), targets))
    }

    fn backward(&self, pixels: &[f32], targets: &[bool]) -> (f64, Vec<f32>) {
        let lay = layout(self.side, self.channels, self.n_outputs);
        let trace = self.forward(pixels);
        let logits = self.head_logits(&trace.embedding);
        let d = self.channels[3];
        let mut grad = vec![0.0f32; lay.total];

        let mut loss = 0.0f64;
        let mut d_embedding = vec![0.0f32; d];
        for (k, (&z, &t)) in logits.iter().zip(targets).enumerate() {
            let z = z as f64;
            let t = if t { 1.0 } else { 0.0 };
            loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
            let dz = (1.0 / (1.0 + (-z).exp()) - t) as f32;
            grad[lay.head_bias + k] = dz;
            let wrow = lay.head_weight + k * d;
            for c in 0..d {
                grad[wrow + c] = dz * trace.embedding[c];
                d_embedding[c] += dz * self.params[wrow + c];
            }
        }

        let last_side = self.side >> 4;
        let area = last_side * last_side;
        let mut d_out: Vec<f32> = (0..d * area).map(|i| d_embedding[i / area] / area as f32).collect();
        for (bi, b) in lay.blocks.iter().enumerate().rev() {
            // pooling backward, then ReLU mask
            let mut dz = unpool2(&d_out, b.cout, b.side);
            for (g, &r) in dz.iter_mut().zip(&trace.relu[bi]) {
                if r <= 0.0 {
                    *g = 0.0;
                }
            }
            let (dw, db) = grad.split_at_mut(b.bias);
            conv3x3_weight_grad(
                &trace.inputs[bi],
                &dz,
                &mut dw[b.weight..],
                &mut db[..b.cout],
                b.cin,
                b.cout,
                b.side,
            );
            if bi > 0 {
                d_out = conv3x3_input_grad(&dz, &self.params[b.weight..b.bias], b.cin, b.cout, b.side);
            }
        }
        (loss, grad)
    }

    /// Mean loss and mean gradient over a batch. Samples run in parallel and
    /// are summed in index order, so the result does not depend on threading.
    pub fn batch_loss_and_grad(
        &self,
        images: &[&GrayImage],
        targets: &[&[bool]],
    ) -> Result<(f64, Vec<f32>), TrainError> {
        for (i, img) in images.iter().enumerate() {
            self.check_input(i, img)?;
        }
        let per_sample: Vec<(f64, Vec<f32>)> = images
            .par_iter()
            .zip(targets.par_iter())
            .map(|(img, t)| self.backward(img.data(), t))
            .collect();
        let n = per_sample.len().max(1) as f32;
        let mut grad = vec![0.0f32; self.params.len()];
        let mut loss = 0.0;
        for (l, g) in &per_sample {
            loss += l;
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
        for g in &mut grad {
            *g /= n;
        }
        Ok((loss / n as f64, grad))
    }

    /// Mean summed-BCE over a set of images, without gradients.
    pub fn mean_loss(&self, images: &[GrayImage], targets: &[Vec<bool>]) -> Result<f64, TrainError> {
        for (i, img) in images.iter().enumerate() {
            self.check_input(i, img)?;
        }
        let losses: Vec<f64> = images
            .par_iter()
            .zip(targets.par_iter())
            .map(|(img, t)| {
                let logits = self.head_logits(&self.forward(img.data()).embedding);
                logits
                    .iter()
                    .zip(t)
                    .map(|(&z, &t)| {
                        let z = z as f64;
                        z.max(0.0) - if t { z } else { 0.0 } + (-z.abs()).exp().ln_1p()
                    })
                    .sum::<f64>()
            })
            .collect();
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }
}

fn row_range(k: usize, side: usize) -> std::ops::Range<usize> {
    match k {
        0 => 1..side,
        1 => 0..side,
        _ => 0..side - 1,
    }
}

fn conv3x3(x: &[f32], w: &[f32], bias: &[f32], cin: usize, cout: usize, s: usize) -> Vec<f32> {
    let plane = s * s;
    let mut out = vec![0.0f32; cout * plane];
    for co in 0..cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.fill(bias[co]);
        for ci in 0..cin {
            let input = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = w[((co * cin + ci) * 3 + ky) * 3 + kx];
                    let xs = row_range(kx, s);
                    for y in row_range(ky, s) {
                        let src = (y + ky - 1) * s;
                        let dst = &mut o[y * s + xs.start..y * s + xs.end];
                        let src = &input[src + xs.start + kx - 1..src + xs.end + kx - 1];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_weight_grad(x: &[f32], dz: &[f32], dw: &mut [f32], db: &mut [f32], cin: usize, cout: usize, s: usize) {
    let plane = s * s;
    for co in 0..cout {
        let g = &dz[co * plane..(co + 1) * plane];
        db[co] = g.iter().sum();
        for ci in 0..cin {
            let input = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let xs = row_range(kx, s);
                    let mut acc = 0.0f32;
                    for y in row_range(ky, s) {
                        let src = (y + ky - 1) * s;
                        let gr = &g[y * s + xs.start..y * s + xs.end];
                        let ir = &input[src + xs.start + kx - 1..src + xs.end + kx - 1];
                        acc += gr.iter().zip(ir).map(|(a, b)| a * b).sum::<f32>();
                    }
                    dw[((co * cin + ci) * 3 + ky) * 3 + kx] = acc;
                }
            }
        }
    }
}

fn conv3x3_input_grad(dz: &[f32], w: &[f32], cin: usize, cout: usize, s: usize) -> Vec<f32> {
    let plane = s * s;
    let mut dx = vec![0.0f32; cin * plane];
    for ci in 0..cin {
        let d = &mut dx[ci * plane..(ci + 1) * plane];
        for co in 0..cout {
            let g = &dz[co * plane..(co + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = w[((co * cin + ci) * 3 + ky) * 3 + kx];
                    let xs = row_range(kx, s);
                    for y in row_range(ky, s) {
                        let dst = (y + ky - 1) * s;
                        let dr = &mut d[dst + xs.start + kx - 1..dst + xs.end + kx - 1];
                        let gr = &g[y * s + xs.start..y * s + xs.end];
                        for (a, b) in dr.iter_mut().zip(gr) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn avgpool2(x: &[f32], channels: usize, s: usize) -> Vec<f32> {
    let h = s / 2;
    let mut out = vec![0.0f32; channels * h * h];
    for c in 0..channels {
        let p = &x[c * s * s..(c + 1) * s * s];
        for y in 0..h {
            for xx in 0..h {
                let i = 2 * y * s + 2 * xx;
                out[c * h * h + y * h + xx] = 0.25 * (p[i] + p[i + 1] + p[i + s] + p[i + s + 1]);
            }
        }
    }
    out
}

fn unpool2(d: &[f32], channels: usize, s: usize) -> Vec<f32> {
    let h = s / 2;
    let mut out = vec![0.0f32; channels * s * s];
    for c in 0..channels {
        for y in 0..s {
            for x in 0..s {
                out[c * s * s + y * s + x] = 0.25 * d[c * h * h + (y / 2) * h + x / 2];
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EncoderMeta {
    input_side: usize,
    channels: [usize; 4],
    embedding_dim: usize,
    findings: Vec<String>,
    fingerprint: String,
}

/// Pretrained encoder plus the findings vocabulary its head was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCheckpoint {
    pub model: SmallCnn,
    pub findings: Vec<String>,
    pub fingerprint: String,
}

impl EncoderCheckpoint {
    pub fn new(model: SmallCnn, findings: Vec<String>, fingerprint: String) -> Result<Self, TrainError> {
        if findings.len() != model.n_outputs() {
            return Err(TrainError::VocabularyMismatch {
                expected: findings,
                got: vec![format!("<{} head outputs>", model.n_outputs())],
            });
        }
        Ok(Self {
            model,
            findings,
            fingerprint,
        })
    }

    pub fn input_side(&self) -> usize {
        self.model.side()
    }

    pub fn embedding_dim(&self) -> usize {
        self.model.embedding_dim()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = EncoderMeta {
            input_side: self.model.side,
            channels: self.model.channels,
            embedding_dim: self.model.embedding_dim(),
            findings: self.findings.clone(),
            fingerprint: self.fingerprint.clone(),
        };
        checkpoint::encode("encoder", &meta, &checkpoint::f32s_to_bytes(&self.model.params))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let (meta, blob): (EncoderMeta, _) = checkpoint::decode("encoder", bytes)?;
        if meta.embedding_dim != meta.channels[3] {
            return Err(TrainError::Checkpoint("embedding_dim disagrees with channels".into()));
        }
        let model = SmallCnn::from_params(
            meta.input_side,
            meta.channels,
            meta.findings.len(),
            checkpoint::bytes_to_f32s(&blob)?,
        )?;
        Self::new(model, meta.findings, meta.fingerprint)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        checkpoint::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_bytes(&checkpoint::read(path)?)
    }
}

/// Frozen-encoder embeddings, one row per image in input order.
pub fn extract_features(encoder: &EncoderCheckpoint, images: &[GrayImage]) -> Result<Array2<f64>, TrainError> {
    for (i, img) in images.iter().enumerate() {
        encoder.model.check_input(i, img)?;
    }
    let d = encoder.embedding_dim();
    let rows: Vec<Vec<f32>> = images
        .par_iter()
        .map(|img| encoder.model.forward(img.data()).embedding)
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().map(f64::from).collect();
    Ok(Array2::from_shape_vec((images.len(), d), flat).expect("rows have length d"))
}

/// Resizes images to the encoder's input side.
pub fn fit_to_encoder(encoder: &EncoderCheckpoint, images: &[GrayImage]) -> Vec<GrayImage> {
    let side = encoder.input_side();
    images
        .iter()
        .map(|img| {
            if img.width() == side && img.height() == side {
                img.clone()
            } else {
                img.resize(side, side)
            }
        })
        .collect()
}
