//! Site-debiasing objective.
//!
//! For every anchor in a batch, the positives (same target class) are split
//! into *bias-aligned* samples (same acquisition site as the anchor) and
//! *bias-conflicting* samples (different site). The cosine similarities from
//! the anchor to each group are summarised as Gaussians and the regularizer is
//! the KL divergence `KL(aligned || conflicting)`, averaged over anchors.
//! Driving it to zero makes same-class samples indistinguishable by site in
//! the latent space.
//!
//! Everything here is pure and works in `f64`. The `*_with_grad` variants
//! return analytic gradients with respect to their inputs so that training
//! code can back-propagate through the objective.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

/// Lower bound applied to every variance estimate.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Minimum group size for an anchor to contribute (unbiased variance needs two samples).
pub const MIN_GROUP_SIZE: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BiasError {
    #[error("anchor index {index} out of range for batch of {len}")]
    AnchorOutOfRange { index: usize, len: usize },
    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroNormRow { row: usize },
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("empty batch (rows={rows}, dims={dims})")]
    EmptyBatch { rows: usize, dims: usize },
    #[error("site id {site} is outside the declared vocabulary of {n_sites} sites")]
    UnknownSite { site: usize, n_sites: usize },
    #[error("lambda must be non-negative, got {0}")]
    NegativeLambda(f64),
}

/// Latent vectors annotated with class targets and acquisition sites.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    vectors: Array2<f64>,
    targets: Vec<bool>,
    sites: Vec<usize>,
    n_sites: usize,
}

impl EmbeddingBatch {
    /// `sites[i]` indexes a site vocabulary of size `n_sites`.
    pub fn new(vectors: Array2<f64>, targets: Vec<bool>, sites: Vec<usize>, n_sites: usize) -> Result<Self, BiasError> {
        let (rows, dims) = vectors.dim();
        if rows == 0 || dims == 0 {
            return Err(BiasError::EmptyBatch { rows, dims });
        }
        if targets.len() != rows {
            return Err(BiasError::LengthMismatch {
                what: "targets",
                got: targets.len(),
                expected: rows,
            });
        }
        if sites.len() != rows {
            return Err(BiasError::LengthMismatch {
                what: "sites",
                got: sites.len(),
                expected: rows,
            });
        }
        if let Some(&site) = sites.iter().find(|&&s| s >= n_sites) {
            return Err(BiasError::UnknownSite { site, n_sites });
        }
        Ok(Self {
            vectors,
            targets,
            sites,
            n_sites,
        })
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn targets(&self) -> &[bool] {
        &self.targets
    }

    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Splits the positives of `anchor` into bias-aligned and bias-conflicting index sets.
///
/// Positives share the anchor's target; aligned ones also share its site.
/// The anchor itself is never included.
pub fn partition_positives<T: PartialEq, S: PartialEq>(
    anchor: usize,
    targets: &[T],
    sites: &[S],
) -> Result<(Vec<usize>, Vec<usize>), BiasError> {
    if targets.len() != sites.len() {
        return Err(BiasError::LengthMismatch {
            what: "sites",
            got: sites.len(),
            expected: targets.len(),
        });
    }
    if anchor >= targets.len() {
        return Err(BiasError::AnchorOutOfRange {
            index: anchor,
            len: targets.len(),
        });
    }
    let mut aligned = Vec::new();
    let mut conflicting = Vec::new();
    for j in (0..targets.len()).filter(|&j| j != anchor) {
        if targets[j] != targets[anchor] {
            continue;
        }
        if sites[j] == sites[anchor] {
            aligned.push(j);
        } else {
            conflicting.push(j);
        }
    }
    Ok((aligned, conflicting))
}

fn row_norms(vectors: ArrayView2<'_, f64>) -> Result<Array1<f64>, BiasError> {
    let norms = vectors.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    if let Some(row) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(BiasError::ZeroNormRow { row });
    }
    Ok(norms)
}

fn normalize_rows(vectors: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>), BiasError> {
    let norms = row_norms(vectors)?;
    let mut unit = vectors.to_owned();
    for (mut row, &n) in unit.axis_iter_mut(Axis(0)).zip(norms.iter()) {
        row.mapv_inplace(|v| v / n);
    }
    Ok((unit, norms))
}

/// Cosine similarity matrix of the rows of `vectors`.
pub fn pairwise_similarity(vectors: ArrayView2<'_, f64>) -> Result<Array2<f64>, BiasError> {
    let (rows, dims) = vectors.dim();
    if rows == 0 || dims == 0 {
        return Err(BiasError::EmptyBatch { rows, dims });
    }
    let (unit, _) = normalize_rows(vectors)?;
    let mut sim = unit.dot(&unit.t());
    // Exact symmetry and unit diagonal, independent of summation order.
    for i in 0..rows {
        sim[[i, i]] = 1.0;
        for j in 0..i {
            let v = sim[[i, j]].clamp(-1.0, 1.0);
            sim[[i, j]] = v;
            sim[[j, i]] = v;
        }
    }
    Ok(sim)
}

/// Gaussian summary of one anchor-to-group similarity distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceStats {
    mean: f64,
    variance: f64,
}

impl DistanceStats {
    /// The variance is clamped to [`VARIANCE_FLOOR`].
    pub fn new(mean: f64, variance: f64) -> Self {
        Self {
            mean,
            variance: variance.max(VARIANCE_FLOOR),
        }
    }

    /// Empirical mean and unbiased variance. `None` for fewer than two samples.
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        let (mean, var) = mean_unbiased_var(samples)?;
        Some(Self::new(mean, var))
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }
}

fn mean_unbiased_var(samples: &[f64]) -> Option<(f64, f64)> {
    let m = samples.len();
    if m < MIN_GROUP_SIZE {
        return None;
    }
    let mean = samples.iter().sum::<f64>() / m as f64;
    let ss = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>();
    Some((mean, ss / (m - 1) as f64))
}

/// `KL(p || q)` between two univariate Gaussians.
pub fn gaussian_kl(p: DistanceStats, q: DistanceStats) -> f64 {
    let dm = p.mean - q.mean;
    let kl = 0.5 * (q.variance.ln() - p.variance.ln()) + (p.variance + dm * dm) / (2.0 * q.variance) - 0.5;
    // Rounding can leave a tiny negative residue when p == q.
    kl.max(0.0)
}

/// Partial derivatives of `gaussian_kl` w.r.t. (mu_p, var_p, mu_q, var_q).
fn gaussian_kl_partials(p: DistanceStats, q: DistanceStats) -> [f64; 4] {
    let dm = p.mean - q.mean;
    let d_mu_p = dm / q.variance;
    let d_var_p = -0.5 / p.variance + 0.5 / q.variance;
    let d_mu_q = -d_mu_p;
    let d_var_q = 0.5 / q.variance - (p.variance + dm * dm) / (2.0 * q.variance * q.variance);
    [d_mu_p, d_var_p, d_mu_q, d_var_q]
}

/// Per-anchor contribution: the two group summaries and the KL value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTerm {
    pub anchor: usize,
    pub aligned: DistanceStats,
    pub conflicting: DistanceStats,
    pub kl: f64,
}

/// A batch holding a single class has no class contrast and yields no terms.
fn has_both_classes(targets: &[bool]) -> bool {
    targets.iter().any(|&t| t) && targets.iter().any(|&t| !t)
}

/// Per-anchor terms of the regularizer. Anchors with fewer than
/// [`MIN_GROUP_SIZE`] aligned or conflicting positives are skipped.
pub fn fairkl_terms(batch: &EmbeddingBatch) -> Result<Vec<AnchorTerm>, BiasError> {
    let sim = pairwise_similarity(batch.vectors())?;
    let mut terms = Vec::new();
    if !has_both_classes(batch.targets()) {
        return Ok(terms);
    }
    for anchor in 0..batch.len() {
        let (aligned, conflicting) = partition_positives(anchor, batch.targets(), batch.sites())?;
        let row = sim.row(anchor);
        let (Some(p), Some(q)) = (
            DistanceStats::from_samples(&gather(row, &aligned)),
            DistanceStats::from_samples(&gather(row, &conflicting)),
        ) else {
            continue;
        };
        terms.push(AnchorTerm {
            anchor,
            aligned: p,
            conflicting: q,
            kl: gaussian_kl(p, q),
        });
    }
    Ok(terms)
}

fn gather(row: ArrayView1<'_, f64>, idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&j| row[j]).collect()
}

/// Mean KL over contributing anchors; zero when no anchor contributes.
pub fn fairkl_regularizer(batch: &EmbeddingBatch) -> Result<f64, BiasError> {
    let terms = fairkl_terms(batch)?;
    if terms.is_empty() {
        return Ok(0.0);
    }
    Ok(terms.iter().map(|t| t.kl).sum::<f64>() / terms.len() as f64)
}

/// Regularizer value and its gradient with respect to the (unnormalized) vectors.
pub fn fairkl_with_grad(batch: &EmbeddingBatch) -> Result<(f64, Array2<f64>), BiasError> {
    let vectors = batch.vectors();
    let (n, d) = vectors.dim();
    let (unit, norms) = normalize_rows(vectors)?;
    let sim = pairwise_similarity(vectors)?;
    if !has_both_classes(batch.targets()) {
        return Ok((0.0, Array2::zeros((n, d))));
    }

    // grad_sim[[a, j]] = dR / dS_aj for the ordered pair (anchor a, partner j)
    let mut grad_sim = Array2::<f64>::zeros((n, n));
    let mut total = 0.0;
    let mut contributing = 0usize;
    for anchor in 0..n {
        let (aligned, conflicting) = partition_positives(anchor, batch.targets(), batch.sites())?;
        let row = sim.row(anchor);
        let a_vals = gather(row, &aligned);
        let c_vals = gather(row, &conflicting);
        let (Some((mu_p, raw_p)), Some((mu_q, raw_q))) = (mean_unbiased_var(&a_vals), mean_unbiased_var(&c_vals))
        else {
            continue;
        };
        let p = DistanceStats::new(mu_p, raw_p);
        let q = DistanceStats::new(mu_q, raw_q);
        total += gaussian_kl(p, q);
        contributing += 1;

        let [d_mu_p, d_var_p, d_mu_q, d_var_q] = gaussian_kl_partials(p, q);
        // The floor is a clamp: no gradient flows through a floored variance.
        let d_var_p = if raw_p > VARIANCE_FLOOR { d_var_p } else { 0.0 };
        let d_var_q = if raw_q > VARIANCE_FLOOR { d_var_q } else { 0.0 };
        accumulate_group(&mut grad_sim, anchor, &aligned, &a_vals, mu_p, d_mu_p, d_var_p);
        accumulate_group(&mut grad_sim, anchor, &conflicting, &c_vals, mu_q, d_mu_q, d_var_q);
    }
    if contributing == 0 {
        return Ok((0.0, Array2::zeros((n, d))));
    }
    let scale = 1.0 / contributing as f64;
    grad_sim.mapv_inplace(|g| g * scale);

    // S_aj = u_a . u_j, so dR/du = (G + G^T) u
    let sym = &grad_sim + &grad_sim.t();
    let grad_unit = sym.dot(&unit);
    Ok((total * scale, backprop_normalization(&unit, &norms, &grad_unit)))
}

fn accumulate_group(
    grad_sim: &mut Array2<f64>,
    anchor: usize,
    members: &[usize],
    values: &[f64],
    mean: f64,
    d_mean: f64,
    d_var: f64,
) {
    let m = members.len() as f64;
    for (&j, &s) in members.iter().zip(values) {
        grad_sim[[anchor, j]] += d_mean / m + d_var * 2.0 * (s - mean) / (m - 1.0);
    }
}

/// Chain rule through `u = x / |x|`: `dx = (du - u (u . du)) / |x|`.
fn backprop_normalization(unit: &Array2<f64>, norms: &Array1<f64>, grad_unit: &Array2<f64>) -> Array2<f64> {
    let mut grad = grad_unit.clone();
    for ((mut g, u), &n) in grad
        .axis_iter_mut(Axis(0))
        .zip(unit.axis_iter(Axis(0)))
        .zip(norms.iter())
    {
        let proj = u.dot(&g);
        g.zip_mut_with(&u, |gv, &uv| *gv = (*gv - uv * proj) / n);
    }
    grad
}

fn check_lengths(logits: &[f64], targets: &[bool]) -> Result<(), BiasError> {
    if logits.len() != targets.len() {
        return Err(BiasError::LengthMismatch {
            what: "targets",
            got: targets.len(),
            expected: logits.len(),
        });
    }
    if logits.is_empty() {
        return Err(BiasError::EmptyBatch { rows: 0, dims: 1 });
    }
    Ok(())
}

/// `-[t ln s(z) + (1-t) ln(1-s(z))]` in the overflow-free form
/// `max(z,0) - z t + ln(1 + e^{-|z|})`.
fn bce_single(z: f64, t: bool) -> f64 {
    let t = if t { 1.0 } else { 0.0 };
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy over logits.
pub fn bce_loss(logits: &[f64], targets: &[bool]) -> Result<f64, BiasError> {
    check_lengths(logits, targets)?;
    let sum: f64 = logits.iter().zip(targets).map(|(&z, &t)| bce_single(z, t)).sum();
    Ok(sum / logits.len() as f64)
}

/// Mean BCE and its gradient `(sigmoid(z) - t) / n` with respect to the logits.
pub fn bce_with_grad(logits: &[f64], targets: &[bool]) -> Result<(f64, Vec<f64>), BiasError> {
    let loss = bce_loss(logits, targets)?;
    let n = logits.len() as f64;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| (sigmoid(z) - if t { 1.0 } else { 0.0 }) / n)
        .collect();
    Ok((loss, grad))
}

/// The training objective `bce + lambda * fairkl`, with its parts.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ObjectiveBreakdown {
    pub bce: f64,
    pub fairkl: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn combined_objective(bce: f64, fairkl: f64, lambda: f64) -> Result<ObjectiveBreakdown, BiasError> {
    if !(lambda >= 0.0) {
        return Err(BiasError::NegativeLambda(lambda));
    }
    Ok(ObjectiveBreakdown {
        bce,
        fairkl,
        lambda,
        total: bce + lambda * fairkl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn partition_small_example() {
        let targets = [1, 1, 1, 0];
        let sites = ["A", "A", "B", "B"];
        let (a, c) = partition_positives(0, &targets, &sites).unwrap();
        assert_eq!(a, vec![1]);
        assert_eq!(c, vec![2]);
    }

    #[test]
    fn partition_no_other_positive() {
        let (a, c) = partition_positives(0, &[1, 0], &["A", "A"]).unwrap();
        assert!(a.is_empty() && c.is_empty());
    }

    #[test]
    fn partition_rejects_bad_anchor() {
        let err = partition_positives(4, &[1, 0], &["A", "A"]).unwrap_err();
        assert_eq!(err, BiasError::AnchorOutOfRange { index: 4, len: 2 });
    }

    #[test]
    fn similarity_identical_and_orthogonal() {
        let s = pairwise_similarity(array![[1.0, 0.0], [1.0, 0.0]].view()).unwrap();
        assert_eq!(s[[0, 1]], 1.0);
        let s = pairwise_similarity(array![[1.0, 0.0], [0.0, 1.0]].view()).unwrap();
        assert_eq!(s[[0, 1]], 0.0);
        assert_eq!(s[[1, 1]], 1.0);
    }

    #[test]
    fn similarity_names_zero_row() {
        let err = pairwise_similarity(array![[1.0, 2.0], [0.0, 0.0], [3.0, 1.0]].view());
        assert_eq!(err.unwrap_err(), BiasError::ZeroNormRow { row: 1 });
    }

    #[test]
    fn kl_identical_is_zero() {
        let p = DistanceStats::new(0.3, 0.01);
        assert_eq!(gaussian_kl(p, p), 0.0);
    }

    #[test]
    fn kl_unit_shift() {
        let kl = gaussian_kl(DistanceStats::new(0.0, 1.0), DistanceStats::new(1.0, 1.0));
        assert!((kl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn variance_floor_applies() {
        assert_eq!(DistanceStats::new(0.0, 0.0).variance(), VARIANCE_FLOOR);
        assert!(DistanceStats::from_samples(&[0.5]).is_none());
    }

    #[test]
    fn bce_basics() {
        assert!((bce_loss(&[0.0], &[true]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let v = bce_loss(&[100.0], &[true]).unwrap();
        assert!(v.is_finite() && v < 1e-40);
        let v = bce_loss(&[-100.0], &[true]).unwrap();
        assert!((v - 100.0).abs() < 1e-9);
        assert!(bce_loss(&[0.0, 1.0], &[true]).is_err());
    }

    #[test]
    fn objective_examples() {
        assert_eq!(combined_objective(0.7, 0.2, 0.0).unwrap().total, 0.7);
        assert!((combined_objective(0.7, 0.2, 1.0).unwrap().total - 0.9).abs() < 1e-15);
        assert_eq!(combined_objective(0.5, 0.25, 2.0).unwrap().total, 1.0);
        assert!(matches!(
            combined_objective(0.5, 0.25, -1.0),
            Err(BiasError::NegativeLambda(_))
        ));
    }

    #[test]
    fn single_site_and_single_class_are_zero() {
        let v = array![[1.0, 0.2], [0.3, 1.0], [0.5, 0.5], [0.9, 0.1], [0.2, 0.7]];
        let one_site = EmbeddingBatch::new(v.clone(), vec![true, true, true, false, false], vec![0; 5], 2).unwrap();
        assert_eq!(fairkl_regularizer(&one_site).unwrap(), 0.0);
        let one_class = EmbeddingBatch::new(v, vec![false; 5], vec![0, 1, 0, 1, 0], 2).unwrap();
        assert_eq!(fairkl_regularizer(&one_class).unwrap(), 0.0);
    }

    #[test]
    fn batch_validation() {
        let v = array![[1.0], [2.0]];
        assert!(EmbeddingBatch::new(v.clone(), vec![true], vec![0, 0], 1).is_err());
        assert!(matches!(
            EmbeddingBatch::new(v, vec![true, false], vec![0, 3], 2),
            Err(BiasError::UnknownSite { site: 3, .. })
        ));
    }
}
