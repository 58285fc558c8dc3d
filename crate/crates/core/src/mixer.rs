//! Pseudo labels from a randomly weighted convex mix of three probability maps.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Result, WmuError};
use crate::tensor::TensorGrid;

/// Convex weights for the three networks, in network order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixWeights(pub [f64; 3]);

impl MixWeights {
    pub const EQUAL: MixWeights = MixWeights([1.0 / 3.0; 3]);

    /// Uniform draw from the 2-simplex (normalised unit exponentials).
    pub fn sample(rng: &mut impl Rng) -> Self {
        let e: [f64; 3] = std::array::from_fn(|_| Exp1.sample(rng));
        let total: f64 = e.iter().sum();
        MixWeights(e.map(|v| v / total))
    }

    pub fn is_simplex(&self) -> bool {
        self.0.iter().all(|&v| v >= 0.0 && v.is_finite()) && (self.0.iter().sum::<f64>() - 1.0).abs() <= 1e-9
    }
}

pub fn sample_mix_weights(rng: &mut impl Rng) -> MixWeights {
    MixWeights::sample(rng)
}

/// Hard per-pixel class assignment for an `(N, K, H, W)` batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabel {
    pub shape: [usize; 4],
    /// `(N, H, W)` class indices.
    pub classes: Vec<u8>,
}

impl PseudoLabel {
    /// One-hot `(N, K, H, W)` target.
    pub fn one_hot(&self) -> TensorGrid<f32> {
        let [n, k, h, w] = self.shape;
        let hw = h * w;
        let mut out = vec![0.0; n * k * hw];
        for (idx, &c) in self.classes.iter().enumerate() {
            let (i, p) = (idx / hw, idx % hw);
            out[(i * k + c as usize) * hw + p] = 1.0;
        }
        TensorGrid::from_vec(&self.shape, out)
    }
}

fn dims(t: &TensorGrid<f32>) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(t.shape())
        .map_err(|_| WmuError::Shape(format!("mix_pseudo expects (N, K, H, W) maps, got {:?}", t.shape())))
}

/// Per-pixel argmax of `sum_i w_i * p_i`, ties going to the lowest class.
///
/// Each pixel's three weighted terms are summed in ascending order, so the result does not
/// depend on which network comes first.
pub fn mix_pseudo(probs: [&TensorGrid<f32>; 3], w: MixWeights) -> Result<PseudoLabel> {
    let shape = dims(probs[0])?;
    for p in &probs[1..] {
        if p.shape() != shape {
            return Err(WmuError::Shape(format!(
                "mix_pseudo: maps disagree, {:?} vs {:?}",
                shape,
                p.shape()
            )));
        }
    }
    let [n, k, h, wd] = shape;
    let hw = h * wd;
    let mut classes = Vec::with_capacity(n * hw);
    for i in 0..n {
        for p in 0..hw {
            let mut best = (0u8, f64::NEG_INFINITY);
            for c in 0..k {
                let at = (i * k + c) * hw + p;
                let mut terms: [f64; 3] = std::array::from_fn(|j| w.0[j] * probs[j].data()[at] as f64);
                terms.sort_by(f64::total_cmp);
                let m = terms[0] + terms[1] + terms[2];
                if m > best.1 {
                    best = (c as u8, m);
                }
            }
            classes.push(best.0);
        }
    }
    Ok(PseudoLabel { shape, classes })
}

/// Argmax of a single `(N, K, H, W)` map with the same tie rule.
pub fn argmax_channels(probs: &TensorGrid<f32>) -> Result<PseudoLabel> {
    mix_pseudo([probs, probs, probs], MixWeights([1.0, 0.0, 0.0]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_mix_example() {
        // one pixel, K = 4: networks say 1, 1, 2
        let onehot = |c: usize| {
            let mut v = vec![0.0f32; 4];
            v[c] = 1.0;
            TensorGrid::from_vec(&[1, 4, 1, 1], v)
        };
        let (a, b, c) = (onehot(1), onehot(1), onehot(2));
        assert_eq!(mix_pseudo([&a, &b, &c], MixWeights::EQUAL).unwrap().classes, vec![1]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = TensorGrid::zeros(&[1, 4, 2, 2]);
        let b = TensorGrid::zeros(&[1, 4, 2, 3]);
        assert!(mix_pseudo([&a, &a, &b], MixWeights::EQUAL).is_err());
    }
}
