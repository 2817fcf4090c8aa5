//! Linear probes: L2-regularised logistic regression on standardised features.
//!
//! Used to ask whether some attribute (site, finding) is linearly decodable
//! from a representation.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::biascore::sigmoid;

#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.5,
            l2: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearProbe {
    mean: Array1<f64>,
    scale: Array1<f64>,
    weights: Array1<f64>,
    bias: f64,
}

impl LinearProbe {
    /// Full-batch gradient descent. Panics if `x` and `y` disagree in length.
    pub fn fit(x: ArrayView2<'_, f64>, y: &[bool], config: ProbeConfig) -> Self {
        assert_eq!(x.nrows(), y.len(), "probe: features and targets differ in length");
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("non-empty probe input");
        let scale = x
            .var_axis(Axis(0), 0.0)
            .mapv(|v| if v > 1e-12 { v.sqrt() } else { 1.0 });
        let z = standardize(x, &mean, &scale);
        let t: Array1<f64> = y.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let mut weights = Array1::<f64>::zeros(x.ncols());
        let mut bias = 0.0;
        for _ in 0..config.iterations {
            let logits = z.dot(&weights) + bias;
            let err = logits.mapv(sigmoid) - &t;
            let grad_w = z.t().dot(&err) / n + &weights * config.l2;
            let grad_b = err.sum() / n;
            weights.scaled_add(-config.learning_rate, &grad_w);
            bias -= config.learning_rate * grad_b;
        }
        Self {
            mean,
            scale,
            weights,
            bias,
        }
    }

    pub fn decision(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        standardize(x, &self.mean, &self.scale).dot(&self.weights) + self.bias
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<bool> {
        self.decision(x).iter().map(|&v| v > 0.0).collect()
    }

    pub fn accuracy(&self, x: ArrayView2<'_, f64>, y: &[bool]) -> f64 {
        let pred = self.predict(x);
        let hits = pred.iter().zip(y).filter(|(a, b)| a == b).count();
        hits as f64 / y.len() as f64
    }
}

fn standardize(x: ArrayView2<'_, f64>, mean: &Array1<f64>, scale: &Array1<f64>) -> Array2<f64> {
    (&x - mean) / scale
}

/// Two-fold probe accuracy: fit on each half, score on the other, average.
pub fn split_half_accuracy(x: ArrayView2<'_, f64>, y: &[bool], config: ProbeConfig) -> f64 {
    let n = x.nrows();
    let first: Vec<usize> = (0..n).filter(|i| i % 2 == 0).collect();
    let second: Vec<usize> = (0..n).filter(|i| i % 2 == 1).collect();
    let take = |idx: &[usize]| (x.select(Axis(0), idx), idx.iter().map(|&i| y[i]).collect::<Vec<_>>());
    let (xa, ya) = take(&first);
    let (xb, yb) = take(&second);
    let a = LinearProbe::fit(xa.view(), &ya, config).accuracy(xb.view(), &yb);
    let b = LinearProbe::fit(xb.view(), &yb, config).accuracy(xa.view(), &ya);
    (a + b) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn separable_data_is_learned() {
        let x = array![[0.0, 1.0], [0.2, 0.9], [1.0, 0.1], [0.9, 0.0], [0.1, 0.8], [0.8, 0.2]];
        let y = [false, false, true, true, false, true];
        let probe = LinearProbe::fit(x.view(), &y, ProbeConfig::default());
        assert_eq!(probe.accuracy(x.view(), &y), 1.0);
    }
}
