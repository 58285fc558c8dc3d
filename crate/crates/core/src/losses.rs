//! Training objective: partial cross-entropy on scribbled pixels plus soft dice against the
//! shared pseudo label, summed over the three networks.

use std::sync::Arc;

use crate::error::{Result, WmuError};
use crate::mixer::PseudoLabel;
use crate::tape::{PceReduction, Tape, Var, UNLABELED};
use crate::tensor::TensorGrid;

/// Per-network loss values of one iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub pce: Vec<f64>,
    pub dice: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_parts(pce: Vec<f64>, dice: Vec<f64>) -> Self {
        let mut total = 0.0;
        for i in 0..pce.len() {
            total += pce[i] + dice.get(i).copied().unwrap_or(0.0);
        }
        Self { pce, dice, total }
    }
}

/// Scribble labels for a batch, `(N, H, W)` flattened, shared across networks.
pub fn check_scribbles(labels: &[u8], classes: usize) -> Result<()> {
    match labels.iter().find(|&&v| v != UNLABELED && v as usize >= classes) {
        Some(v) => Err(WmuError::Data {
            path: "<batch>".into(),
            msg: format!("scribble class {v} out of range for {classes} classes"),
        }),
        None => Ok(()),
    }
}

fn classes_of(tape: &Tape<f32>, probs: Var) -> Result<(usize, usize)> {
    match tape.shape(probs) {
        [n, k, h, w] => Ok((*k, n * h * w)),
        s => Err(WmuError::Shape(format!("loss expects (N, K, H, W) probabilities, got {s:?}"))),
    }
}

pub fn pce_loss(tape: &mut Tape<f32>, probs: Var, scribbles: &Arc<Vec<u8>>, reduction: PceReduction) -> Result<Var> {
    let (k, pixels) = classes_of(tape, probs)?;
    if scribbles.len() != pixels {
        return Err(WmuError::Shape(format!(
            "pce: {} scribble pixels for {pixels} predicted pixels",
            scribbles.len()
        )));
    }
    check_scribbles(scribbles, k)?;
    Ok(tape.pce(probs, scribbles.clone(), reduction))
}

pub fn dice_loss(tape: &mut Tape<f32>, probs: Var, target: &Arc<TensorGrid<f32>>) -> Result<Var> {
    if tape.shape(probs) != target.shape() {
        return Err(WmuError::Shape(format!(
            "dice: prediction {:?} vs pseudo label {:?}",
            tape.shape(probs),
            target.shape()
        )));
    }
    Ok(tape.dice(probs, target.clone()))
}

/// Builds `pce_i + dice_i` for each network on its own tape; returns the per-network loss
/// nodes and the breakdown. `pseudo == None` drops the dice terms.
pub fn total_loss(
    tapes: &mut [Tape<f32>],
    probs: &[Var],
    scribbles: &Arc<Vec<u8>>,
    pseudo: Option<&PseudoLabel>,
    reduction: PceReduction,
) -> Result<(Vec<Var>, LossBreakdown)> {
    let target = pseudo.map(|p| Arc::new(p.one_hot()));
    let (mut nodes, mut pce, mut dice) = (Vec::new(), Vec::new(), Vec::new());
    for (tape, &p) in tapes.iter_mut().zip(probs) {
        let a = pce_loss(tape, p, scribbles, reduction)?;
        pce.push(tape.value(a).data()[0] as f64);
        let node = match &target {
            Some(t) => {
                let b = dice_loss(tape, p, t)?;
                dice.push(tape.value(b).data()[0] as f64);
                tape.add(a, b)
            }
            None => a,
        };
        nodes.push(node);
    }
    Ok((nodes, LossBreakdown::from_parts(pce, dice)))
}
