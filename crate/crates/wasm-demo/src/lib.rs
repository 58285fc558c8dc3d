//! Browser demo: synthetic case, scribble extraction, pseudo-label mixing and scoring.
//!
//! The three "network" predictions are simulated from the ground truth with
//! backbone-flavoured corruption, so the page runs instantly without weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;
use wmu_core::data::{derive_seed, scribblify, synth_sample, LabelMap, SYNTH_CLASSES};
use wmu_core::metrics::class_metrics;
use wmu_core::mixer::{mix_pseudo, MixWeights};
use wmu_core::TensorGrid;

/// Marker for unlabeled scribble pixels in the returned bytes.
pub const UNLABELED_BYTE: u8 = 255;

#[wasm_bindgen]
pub struct Case {
    size: usize,
    image: Vec<u8>,
    label: LabelMap,
    probs: [TensorGrid<f32>; 3],
}

#[wasm_bindgen]
impl Case {
    /// Draw a synthetic slice plus three corrupted predictions of it.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, size: usize, noise: f32) -> Result<Case, JsError> {
        if size == 0 || size % 16 != 0 || size > 256 {
            return Err(JsError::new("size must be a multiple of 16 up to 256"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (image, label) = synth_sample(size, &mut rng);
        let probs = [0, 1, 2].map(|k| fake_prediction(&label, k, noise, derive_seed(seed, k as u64)));
        Ok(Case { size, image, label, probs })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn image(&self) -> Vec<u8> {
        self.image.clone()
    }

    pub fn label(&self) -> Vec<u8> {
        self.label.data.clone()
    }

    /// Skeleton-run scribbles; unlabeled pixels are 255.
    pub fn scribble(&self, coverage: f64, seed: u64) -> Result<Vec<u8>, JsError> {
        let s = scribblify(&self.label, coverage, seed).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(s.data)
    }

    /// Argmax of one simulated network (0, 1 or 2).
    pub fn member(&self, k: usize) -> Result<Vec<u8>, JsError> {
        let mut w = [0.0; 3];
        *w.get_mut(k).ok_or_else(|| JsError::new("member index must be 0, 1 or 2"))? = 1.0;
        self.mix(w[0], w[1], w[2])
    }

    /// Pseudo label from a convex mix; weights are normalised here.
    pub fn mix(&self, a: f64, b: f64, c: f64) -> Result<Vec<u8>, JsError> {
        let s = a + b + c;
        if !(s > 0.0) || a < 0.0 || b < 0.0 || c < 0.0 {
            return Err(JsError::new("weights must be non-negative with a positive sum"));
        }
        let [p0, p1, p2] = &self.probs;
        let pl = mix_pseudo([p0, p1, p2], MixWeights([a / s, b / s, c / s])).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(pl.classes)
    }

    /// Per foreground class: dice then hd95, flattened.
    pub fn score(&self, pred: Vec<u8>) -> Result<Vec<f64>, JsError> {
        let pred = LabelMap::new(self.size, self.size, pred);
        let mut out = Vec::new();
        for c in 1..SYNTH_CLASSES as u8 {
            let m = class_metrics(&pred, &self.label, c).map_err(|e| JsError::new(&e.to_string()))?;
            out.extend([m.dice, m.hd95]);
        }
        Ok(out)
    }

    /// Fresh Dirichlet(1,1,1) weights, as drawn during training.
    pub fn draw_weights(seed: u64) -> Vec<f64> {
        MixWeights::sample(&mut ChaCha8Rng::seed_from_u64(seed)).0.to_vec()
    }
}

/// Softmax of a scaled one-hot with smooth noise whose texture depends on `kind`:
/// blobs for the convolutional net, patch blocks for attention, row streaks for the scan net.
fn fake_prediction(label: &LabelMap, kind: usize, noise: f32, seed: u64) -> TensorGrid<f32> {
    let (h, w) = (label.height, label.width);
    let k = SYNTH_CLASSES;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = 8usize;
    let (gh, gw) = (h.div_ceil(cell) + 1, w.div_ceil(cell) + 1);
    let coarse: Vec<f32> = (0..k * gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rows: Vec<f32> = (0..k * h).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0f32; k * h * w];
    for y in 0..h {
        for x in 0..w {
            let mut logits = [0.0f32; SYNTH_CLASSES];
            for (c, l) in logits.iter_mut().enumerate() {
                let n = match kind {
                    0 => bilinear(&coarse[c * gh * gw..(c + 1) * gh * gw], gw, y as f32 / cell as f32, x as f32 / cell as f32),
                    1 => coarse[c * gh * gw + (y / cell) * gw + x / cell],
                    _ => rows[c * h + y],
                };
                *l = if label.get(y, x) as usize == c { 3.0 } else { 0.0 } + 3.0 * noise * n;
            }
            let m = logits.iter().cloned().fold(f32::MIN, f32::max);
            let z: f32 = logits.iter().map(|l| (l - m).exp()).sum();
            for c in 0..k {
                out[(c * h + y) * w + x] = (logits[c] - m).exp() / z;
            }
        }
    }
    TensorGrid::from_vec(&[1, k, h, w], out)
}

fn bilinear(g: &[f32], gw: usize, y: f32, x: f32) -> f32 {
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let at = |r: usize, c: usize| g[r * gw + c];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
}
