//! Joint training of the networks: scribble cross-entropy for each, plus dice against a
//! pseudo label mixed from all three with fresh random weights every iteration.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::SegNetwork;
use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::{self, derive_seed, Augment, DatasetIndex, LabelMap, Sample, Split};
use crate::error::{Result, WmuError};
use crate::losses::{total_loss, LossBreakdown};
use crate::metrics::{evaluate_maps, MetricsReport};
use crate::mixer::{mix_pseudo, MixWeights, PseudoLabel};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamStore, TensorGrid};

pub const LOSS_HEADER: &str = "iter,pce1,pce2,pce3,dice1,dice2,dice3,total";
pub const CONFIG_ECHO: &str = "config.txt";
pub const LOSS_CSV: &str = "loss.csv";
pub const VAL_CSV: &str = "val.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const REPORT_CSV: &str = "report.csv";

/// Whether the pseudo-label dice term is used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    CrossSupervised,
    PceOnly,
}

/// `v <- momentum * v + (g + wd * p); p <- p - lr * v`. Fails before touching anything if a
/// gradient is not finite.
pub fn sgd_step(
    params: &mut ParamStore<f32>,
    velocity: &mut [TensorGrid<f32>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
        return Err(WmuError::Numeric(format!("non-finite gradient in parameter {}", p.name)));
    }
    let (lr, m, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    for (p, v) in params.iter_mut().zip(velocity.iter_mut()) {
        for ((pv, &g), vv) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut()) {
            *vv = m * *vv + (g + wd * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

pub fn poly_lr(lr0: f64, iter: usize, iterations: usize, power: f64) -> f64 {
    lr0 * (1.0 - iter as f64 / iterations as f64).max(0.0).powf(power)
}

/// A training batch: `(N, 1, H, W)` images and `(N, H, W)` scribbles.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: TensorGrid<f32>,
    pub scribbles: Arc<Vec<u8>>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample], augments: Option<&[Augment]>) -> Self {
        let s = samples[0].label.height;
        let (mut images, mut labels) = (Vec::new(), Vec::new());
        for (i, smp) in samples.iter().enumerate() {
            match augments {
                Some(a) => {
                    images.extend(a[i].apply(smp.image.data(), s));
                    labels.extend(a[i].apply(&smp.label.data, s));
                }
                None => {
                    images.extend_from_slice(smp.image.data());
                    labels.extend_from_slice(&smp.label.data);
                }
            }
        }
        Self {
            images: TensorGrid::from_vec(&[samples.len(), 1, s, s], images),
            scribbles: Arc::new(labels),
        }
    }
}

/// Runs `f` over `items`, on up to `threads` scoped threads. Results keep item order, and
/// each item's computation is the same regardless of `threads`.
pub fn par_map<I: Sync, O: Send>(items: &mut [I], threads: usize, f: impl Fn(&mut I) -> O + Sync) -> Vec<O>
where
    I: Send,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter_mut().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks_mut(chunk)
            .map(|c| {
                let f = &f;
                scope.spawn(move || c.iter_mut().map(f).collect::<Vec<O>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

struct Member {
    net: SegNetwork<f32>,
    velocity: Vec<TensorGrid<f32>>,
    tape: Tape<f32>,
}

/// Networks, optimiser state and the run's random stream.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub objective: Objective,
    members: Vec<Member>,
    rng: ChaCha8Rng,
    pub iteration: usize,
    pub threads: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, objective: Objective) -> Result<Self> {
        cfg.validate()?;
        let kinds = cfg.backbone_list()?;
        match (objective, kinds.len()) {
            (Objective::CrossSupervised, 3) | (Objective::PceOnly, 1) => {}
            (Objective::CrossSupervised, n) => {
                return Err(WmuError::Config(format!("cross supervision needs 3 backbones, got {n}")))
            }
            (Objective::PceOnly, n) => {
                return Err(WmuError::Config(format!("the pCE baseline takes 1 backbone, got {n}")))
            }
        }
        let mut members = Vec::new();
        for (i, &kind) in kinds.iter().enumerate() {
            let net = SegNetwork::build(kind, cfg.arch(), derive_seed(cfg.seed, 1000 + i as u64))?;
            let velocity = net.params.iter().map(|p| TensorGrid::zeros(p.value.shape())).collect();
            members.push(Member { net, velocity, tape: Tape::new() });
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0)),
            cfg,
            objective,
            members,
            iteration: 0,
            threads: 1,
        })
    }

    pub fn nets(&self) -> Vec<&SegNetwork<f32>> {
        self.members.iter().map(|m| &m.net).collect()
    }

    pub fn nets_mut(&mut self) -> Vec<&mut SegNetwork<f32>> {
        self.members.iter_mut().map(|m| &mut m.net).collect()
    }

    pub fn into_nets(self) -> Vec<SegNetwork<f32>> {
        self.members.into_iter().map(|m| m.net).collect()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn current_lr(&self) -> f64 {
        poly_lr(self.cfg.lr0, self.iteration, self.cfg.iterations, self.cfg.lr_decay_power)
    }

    /// One optimisation step on `batch`. Draws the mixing weights from the run's stream.
    pub fn train_iteration(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let weights = match self.objective {
            Objective::CrossSupervised => Some(MixWeights::sample(&mut self.rng)),
            Objective::PceOnly => None,
        };
        self.step_with_weights(batch, weights)
    }

    /// As [`Self::train_iteration`] with explicit mixing weights (`None` skips the dice term).
    pub fn step_with_weights(&mut self, batch: &Batch, weights: Option<MixWeights>) -> Result<LossBreakdown> {
        let k = self.cfg.num_classes;
        crate::losses::check_scribbles(&batch.scribbles, k)?;
        // forward every network on its own tape
        let probs: Vec<Result<(Var, TensorGrid<f32>)>> =
            par_map(&mut self.members, self.threads, |m| {
                m.tape = Tape::new();
                let x = m.tape.input(batch.images.clone());
                let logits = m.net.forward(&mut m.tape, x)?;
                let p = m.tape.softmax_channels(logits);
                Ok((p, m.tape.value(p).clone()))
            });
        let probs: Vec<_> = probs.into_iter().collect::<Result<_>>()?;
        let pseudo: Option<PseudoLabel> = match weights {
            Some(w) => Some(mix_pseudo([&probs[0].1, &probs[1].1, &probs[2].1], w)?),
            None => None,
        };
        let mut tapes: Vec<Tape<f32>> = self.members.iter_mut().map(|m| std::mem::take(&mut m.tape)).collect();
        let vars: Vec<_> = probs.iter().map(|(v, _)| *v).collect();
        let (losses, breakdown) =
            total_loss(&mut tapes, &vars, &batch.scribbles, pseudo.as_ref(), self.cfg.pce_reduction)?;
        if !breakdown.total.is_finite() {
            return Err(WmuError::Numeric(format!(
                "loss diverged at iteration {}: {breakdown:?}",
                self.iteration
            )));
        }
        for (m, t) in self.members.iter_mut().zip(tapes) {
            m.tape = t;
        }
        let lr = self.current_lr();
        let (mom, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        let iteration = self.iteration;
        let mut idx: Vec<(usize, &mut Member)> = self.members.iter_mut().enumerate().collect();
        let step = par_map(&mut idx, self.threads, |(i, m)| {
            let grads = m.tape.backward(losses[*i]);
            m.net.params.zero_grad();
            m.tape.accumulate_param_grads(&grads, &mut m.net.params);
            m.tape = Tape::new();
            sgd_step(&mut m.net.params, &mut m.velocity, lr, mom, wd)
                .map_err(|e| WmuError::Numeric(format!("iteration {iteration}, network {}: {e}", *i + 1)))
        });
        step.into_iter().collect::<Result<Vec<()>>>()?;
        self.iteration += 1;
        Ok(breakdown)
    }
}

/// Softmax probabilities of each network on `images`, in `chunk`-sized pieces.
pub fn predict_probs(net: &SegNetwork<f32>, images: &TensorGrid<f32>, chunk: usize) -> Result<TensorGrid<f32>> {
    let shape = images.shape().to_vec();
    let (n, per) = (shape[0], shape[1] * shape[2] * shape[3]);
    let mut out = Vec::new();
    let mut out_shape = Vec::new();
    for start in (0..n).step_by(chunk.max(1)) {
        let end = (start + chunk).min(n);
        let part = TensorGrid::from_vec(&[end - start, shape[1], shape[2], shape[3]], images.data()[start * per..end * per].to_vec());
        let mut t = Tape::new();
        let x = t.input(part);
        let y = net.forward(&mut t, x)?;
        let p = t.softmax_channels(y);
        let v = t.value(p);
        out_shape = v.shape().to_vec();
        out.extend_from_slice(v.data());
    }
    out_shape[0] = n;
    Ok(TensorGrid::from_vec(&out_shape, out))
}

/// Equal-weight mean of the members' probabilities.
pub fn ensemble_probs(members: &[TensorGrid<f32>]) -> TensorGrid<f32> {
    let mut acc = members[0].clone();
    let scale = 1.0 / members.len() as f32;
    for m in &members[1..] {
        for (a, &b) in acc.data_mut().iter_mut().zip(m.data()) {
            *a += b;
        }
    }
    acc.data_mut().iter_mut().for_each(|a| *a *= scale);
    acc
}

/// Per-sample label maps from an `(N, K, H, W)` probability batch.
pub fn argmax_maps(probs: &TensorGrid<f32>) -> Result<Vec<LabelMap>> {
    let p = crate::mixer::argmax_channels(probs)?;
    let [_, _, h, w] = p.shape;
    Ok(p.classes.chunks(h * w).map(|c| LabelMap::new(h, w, c.to_vec())).collect())
}

pub fn stack_images(samples: &[Sample]) -> TensorGrid<f32> {
    let s = samples[0].label.height;
    let data: Vec<f32> = samples.iter().flat_map(|x| x.image.data().iter().copied()).collect();
    TensorGrid::from_vec(&[samples.len(), 1, s, s], data)
}

/// Ensemble report (per-sample rows and means) followed by one `mean` row per member.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub ensemble: MetricsReport,
    pub members: Vec<MetricsReport>,
}

impl Evaluation {
    pub fn to_csv(&self, kinds: &[String]) -> String {
        let mut report = self.ensemble.clone();
        for (i, m) in self.members.iter().enumerate() {
            if self.members.len() > 1 {
                report.push_row(format!("net{}:{}", i + 1, kinds[i]), "all", m.mean);
            }
        }
        report.to_csv()
    }
}

pub fn evaluate(nets: &[&SegNetwork<f32>], samples: &[Sample], classes: usize, chunk: usize, threads: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(WmuError::Config("evaluation split is empty".into()));
    }
    let images = stack_images(samples);
    let mut refs: Vec<&SegNetwork<f32>> = nets.to_vec();
    let probs = par_map(&mut refs, threads, |n| predict_probs(n, &images, chunk));
    let probs: Vec<TensorGrid<f32>> = probs.into_iter().collect::<Result<_>>()?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let gts: Vec<LabelMap> = samples.iter().map(|s| s.label.clone()).collect();
    let ensemble = evaluate_maps(&ids, &argmax_maps(&ensemble_probs(&probs))?, &gts, classes)?;
    let members = probs
        .iter()
        .map(|p| evaluate_maps(&ids, &argmax_maps(p)?, &gts, classes))
        .collect::<Result<_>>()?;
    Ok(Evaluation { ensemble, members })
}

/// Outcome of [`fit`].
#[derive(Clone, Debug)]
pub struct FitSummary {
    pub run_dir: PathBuf,
    pub best_val_dice: f64,
    pub best_iteration: usize,
    pub test: Option<Evaluation>,
}

fn fmt_loss_row(iter: usize, b: &LossBreakdown) -> String {
    let mut cells = vec![iter.to_string()];
    for parts in [&b.pce, &b.dice] {
        for i in 0..3 {
            cells.push(parts.get(i).map(|v| format!("{v:.6}")).unwrap_or_default());
        }
    }
    cells.push(format!("{:.6}", b.total));
    cells.join(",")
}

fn create_run_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| WmuError::io(out, e))
}

/// Trains on `data` and writes the run directory: config echo, loss.csv, val.csv,
/// best.ckpt (kept when the validation ensemble dice improves) and report.csv for the test
/// split scored with the best checkpoint.
pub fn fit(cfg: &TrainConfig, data: &DatasetIndex, out: &Path, objective: Objective, threads: usize) -> Result<FitSummary> {
    cfg.validate()?;
    create_run_dir(out)?;
    data::write_text(&out.join(CONFIG_ECHO), &cfg.echo())?;
    let (size, k) = (cfg.image_size, cfg.num_classes);
    let train = data.load_split(Split::Train, size, k)?;
    if train.is_empty() {
        return Err(WmuError::data(&data.root, "train split is empty"));
    }
    let val = data.load_split(Split::Val, size, k)?;
    let test = data.load_split(Split::Test, size, k)?;

    let mut trainer = Trainer::new(cfg.clone(), objective)?;
    trainer.threads = threads;
    let kinds: Vec<String> = trainer.nets().iter().map(|n| n.kind.to_string()).collect();

    let loss_path = out.join(LOSS_CSV);
    let mut loss_file = File::create(&loss_path).map_err(|e| WmuError::io(&loss_path, e))?;
    data::append_line(&mut loss_file, &loss_path, LOSS_HEADER)?;
    let val_path = out.join(VAL_CSV);
    let mut val_file = File::create(&val_path).map_err(|e| WmuError::io(&val_path, e))?;
    let mut val_header = String::from("iter");
    for (i, kind) in kinds.iter().enumerate() {
        val_header.push_str(&format!(",net{}_{kind}", i + 1));
    }
    val_header.push_str(",ensemble");
    data::append_line(&mut val_file, &val_path, &val_header)?;

    let ckpt_path = out.join(BEST_CKPT);
    let mut best: Option<(f64, usize)> = None;
    for it in 1..=cfg.iterations {
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| trainer.rng().random_range(0..train.len())).collect();
        let augments: Option<Vec<Augment>> =
            cfg.augment.then(|| picks.iter().map(|_| Augment::random(trainer.rng())).collect());
        let chosen: Vec<&Sample> = picks.iter().map(|&i| &train[i]).collect();
        let batch = Batch::from_samples(&chosen, augments.as_deref());
        let b = trainer.train_iteration(&batch)?;
        data::append_line(&mut loss_file, &loss_path, &fmt_loss_row(it, &b))?;

        if it % cfg.val_every == 0 || it == cfg.iterations {
            let nets = trainer.nets();
            // without a validation split every checkpoint counts as an improvement
            let (score, row) = if val.is_empty() {
                (f64::INFINITY, String::new())
            } else {
                let e = evaluate(&nets, &val, k, cfg.eval_batch, threads)?;
                let mut row = String::new();
                for m in &e.members {
                    row.push_str(&format!(",{:.6}", m.mean_dice()));
                }
                (e.ensemble.mean_dice(), format!("{row},{:.6}", e.ensemble.mean_dice()))
            };
            if !row.is_empty() {
                data::append_line(&mut val_file, &val_path, &format!("{it}{row}"))?;
            }
            if best.is_none_or(|(b, _)| score > b) || val.is_empty() {
                best = Some((score, it));
                let record = if val.is_empty() { None } else { Some((score, it)) };
                let owned: Vec<SegNetwork<f32>> = nets.into_iter().cloned().collect();
                checkpoint::save_ensemble(&ckpt_path, &owned, record)?;
            }
        }
    }
    let (best_val_dice, best_iteration) = best.expect("at least one validation");

    let test_eval = if test.is_empty() {
        None
    } else {
        let ens = checkpoint::load_ensemble(&ckpt_path)?;
        let refs: Vec<&SegNetwork<f32>> = ens.nets.iter().collect();
        let e = evaluate(&refs, &test, k, cfg.eval_batch, threads)?;
        data::write_text(&out.join(REPORT_CSV), &e.to_csv(&kinds))?;
        Some(e)
    };
    Ok(FitSummary {
        run_dir: out.to_path_buf(),
        best_val_dice,
        best_iteration,
        test: test_eval,
    })
}

/// The single-network baseline trained with scribble cross-entropy only.
pub fn fit_baseline_pce(cfg: &TrainConfig, data: &DatasetIndex, out: &Path, threads: usize) -> Result<FitSummary> {
    fit(cfg, data, out, Objective::PceOnly, threads)
}

/// Scores a checkpoint on one split; the CSV matches the training run's report.csv.
pub fn evaluate_checkpoint(ckpt: &Path, data: &DatasetIndex, split: Split, chunk: usize, threads: usize) -> Result<String> {
    let ens = checkpoint::load_ensemble(ckpt)?;
    let arch = ens.nets[0].arch;
    let samples: Vec<Sample> = data
        .ids(split)
        .iter()
        .map(|id| {
            Ok(Sample {
                id: id.clone(),
                image: data.load_image(id, arch.image_size)?,
                label: data.load_dense(id, arch.image_size, arch.num_classes)?,
            })
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&SegNetwork<f32>> = ens.nets.iter().collect();
    let kinds: Vec<String> = ens.nets.iter().map(|n| n.kind.to_string()).collect();
    Ok(evaluate(&refs, &samples, arch.num_classes, chunk, threads)?.to_csv(&kinds))
}
