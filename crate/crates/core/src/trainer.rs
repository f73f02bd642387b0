//! Batch training. Each trajectory is encoded once and its hidden states
//! are shared by all `2S` gallery pairings of the batch; the encoder
//! receives the summed (already batch-normalised) hidden-state gradients of
//! those pairings.

use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::encoder::{backprop_into, encode, EncoderTape, StackGrads};
use crate::error::{Error, Result};
use crate::features::Dataset;
use crate::model::Model;
use crate::numerics::{Rng, Vector};
use crate::ssn::{
    grid_loss, ssn_backward, ssn_backward_grid, ssn_forward_cached, ssn_forward_grid, GridBatch, GridForward, SsnCache,
    DEFAULT_LAMBDA,
};
use crate::tree::{gate_update_batch, posteriors, tree_forward, PosteriorRecord, TreeForwardRecord};

/// How the two parameter groups take turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Per epoch: a pass training encoder and SSN with the gates frozen,
    /// then a pass training the gates with everything else frozen.
    Alternate,
    /// Per batch: SSN step, SSN re-forward, gate step, encoder step.
    Interleave,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alternate" => Ok(Schedule::Alternate),
            "interleave" => Ok(Schedule::Interleave),
            other => Err(Error::arg(format!("unknown schedule {other:?} (alternate | interleave)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Trajectories per batch.
    pub n: usize,
    /// Positives, and as many negatives, per trajectory.
    pub s: usize,
    /// Gate learning rate.
    pub alpha: f64,
    /// Encoder and SSN learning rate.
    pub eta: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Bound on the global norm of the encoder and SSN gradients.
    pub clip_norm: f64,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n: 4,
            s: 4,
            alpha: 0.05,
            eta: 0.25,
            lambda: DEFAULT_LAMBDA,
            epochs: 4,
            seed: 7,
            clip_norm: 5.0,
            schedule: Schedule::Alternate,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.s == 0 {
            return Err(Error::arg("n and S must be at least 1"));
        }
        for (name, v) in [("alpha", self.alpha), ("eta", self.eta), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::arg(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::arg(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pick {
    /// Gallery index.
    pub item: usize,
    pub label: bool,
}

/// `picks[i]` holds `S` positives then `S` negatives for
/// `trajectories[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchSample {
    pub trajectories: Vec<usize>,
    pub picks: Vec<Vec<Pick>>,
}

/// Gallery picks for one trajectory. Positives are drawn without
/// replacement while enough exist, otherwise with replacement. Negatives
/// come from non-positives of the trajectory's category, or from the whole
/// gallery when the category has fewer than `S`.
pub fn sample_picks(ds: &Dataset, traj: usize, s: usize, rng: &mut Rng) -> Result<Vec<Pick>> {
    let positives = ds.positive_indices(traj);
    let mut picks = Vec::with_capacity(2 * s);
    if positives.len() >= s {
        picks.extend(rng.sample_indices(positives.len(), s).into_iter().map(|k| positives[k]));
    } else {
        picks.extend((0..s).map(|_| positives[rng.below(positives.len())]));
    }
    let mut pool: Vec<usize> = ds.gallery_indices_in(&ds.trajectories()[traj].category);
    pool.retain(|j| !positives.contains(j));
    if pool.len() < s {
        pool = (0..ds.gallery().len()).filter(|j| !positives.contains(j)).collect();
    }
    if pool.len() < s {
        return Err(Error::arg(format!(
            "trajectory {} has only {} negatives available, S = {s}",
            ds.trajectories()[traj].id,
            pool.len()
        )));
    }
    let negatives = rng.sample_indices(pool.len(), s);
    let mut out: Vec<Pick> = picks.into_iter().map(|item| Pick { item, label: true }).collect();
    out.extend(negatives.into_iter().map(|k| Pick {
        item: pool[k],
        label: false,
    }));
    Ok(out)
}

pub fn batch_for(ds: &Dataset, trajectories: &[usize], s: usize, rng: &mut Rng) -> Result<BatchSample> {
    let picks = trajectories
        .iter()
        .map(|&u| sample_picks(ds, u, s, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchSample {
        trajectories: trajectories.to_vec(),
        picks,
    })
}

/// `min(n, |trajectories|)` distinct trajectories with their picks.
pub fn sample_batch(ds: &Dataset, cfg: &TrainConfig, rng: &mut Rng) -> Result<BatchSample> {
    let count = ds.trajectories().len();
    if count == 0 || ds.gallery().is_empty() {
        return Err(Error::arg("cannot sample from an empty dataset"));
    }
    let chosen = rng.sample_indices(count, cfg.n.min(count));
    batch_for(ds, &chosen, cfg.s, rng)
}

/// Which parameter groups a step updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Encoder and SSN; gates frozen.
    Representation,
    /// Gates only.
    Fusion,
    /// Both, in the order SSN, gates, encoder.
    Joint,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    /// SSN log loss of the batch before the update.
    pub loss: f64,
    /// Mean `ln P(label)` of the tree over the batch's pairs.
    pub tree_log_likelihood: f64,
    pub mean_y_pos: f64,
    pub mean_y_neg: f64,
    /// Global encoder+SSN gradient norm before clipping (0 when not
    /// computed).
    pub grad_norm: f64,
}

struct Forward<'a> {
    encoded: Vec<(Vec<Vector>, EncoderTape)>,
    items: Vec<Vec<&'a [f64]>>,
    labels: Vec<Vec<bool>>,
}

fn encode_batch<'a>(model: &Model, ds: &'a Dataset, batch: &BatchSample) -> Result<Forward<'a>> {
    let encoded = batch
        .trajectories
        .par_iter()
        .map(|&u| encode(&model.encoder, &ds.trajectories()[u].frames))
        .collect::<Result<Vec<_>>>()?;
    let items = batch
        .picks
        .iter()
        .map(|picks| picks.iter().map(|p| ds.gallery()[p.item].values.as_slice()).collect())
        .collect();
    let labels = batch.picks.iter().map(|picks| picks.iter().map(|p| p.label).collect()).collect();
    Ok(Forward { encoded, items, labels })
}

impl Forward<'_> {
    fn grids(&self, model: &Model) -> Result<Vec<GridForward>> {
        self.encoded
            .par_iter()
            .zip(&self.items)
            .map(|((hs, _), items)| ssn_forward_grid(&model.ssn, hs, items))
            .collect()
    }

    fn grid_batch<'g>(&'g self, grids: &'g [GridForward]) -> Vec<GridBatch<'g>> {
        grids
            .iter()
            .zip(&self.encoded)
            .zip(self.items.iter().zip(&self.labels))
            .map(|((forward, (hs, _)), (items, labels))| GridBatch {
                forward,
                hs,
                items,
                labels,
            })
            .collect()
    }

    fn tree_records(&self, model: &Model, grids: &[GridForward]) -> Result<Vec<(TreeForwardRecord, PosteriorRecord)>> {
        let pairs: Vec<(&GridForward, usize, bool)> = grids
            .iter()
            .zip(&self.labels)
            .flat_map(|(grid, labels)| labels.iter().enumerate().map(move |(i, &label)| (grid, i, label)))
            .collect();
        pairs
            .into_par_iter()
            .map(|(grid, i, label)| {
                let record = tree_forward(&model.tree, grid.item_outputs(i))?;
                let post = posteriors(&model.tree, &record, label)?;
                Ok((record, post))
            })
            .collect()
    }

    /// Encoder gradient from per-trajectory hidden-state gradients; the
    /// per-trajectory backward passes run in parallel and are summed in
    /// batch order.
    fn encoder_grads(&self, model: &Model, grad_h: &[Vec<Vector>]) -> Result<StackGrads> {
        let parts = self
            .encoded
            .par_iter()
            .zip(grad_h)
            .map(|((_, tape), g)| {
                let mut part = model.encoder.zero_grads();
                backprop_into(&model.encoder, tape, g, &mut part)?;
                Ok(part)
            })
            .collect::<Result<Vec<StackGrads>>>()?;
        let mut total = model.encoder.zero_grads();
        for part in &parts {
            total.add_scaled(1.0, part);
        }
        Ok(total)
    }
}

fn tree_metrics(records: &[(TreeForwardRecord, PosteriorRecord)], metrics: &mut StepMetrics) {
    let (mut pos, mut neg, mut np, mut nn, mut ll) = (0.0, 0.0, 0usize, 0usize, 0.0);
    for (record, post) in records {
        ll += post.log_likelihood();
        if post.label {
            pos += record.y;
            np += 1;
        } else {
            neg += record.y;
            nn += 1;
        }
    }
    metrics.tree_log_likelihood = ll / records.len().max(1) as f64;
    metrics.mean_y_pos = pos / np.max(1) as f64;
    metrics.mean_y_neg = neg / nn.max(1) as f64;
}

/// One batch update. `step` only labels a divergence error.
pub fn train_step(model: &mut Model, ds: &Dataset, batch: &BatchSample, cfg: &TrainConfig, phase: Phase, step: usize) -> Result<StepMetrics> {
    let fwd = encode_batch(model, ds, batch)?;
    let grids = fwd.grids(model)?;
    let mut metrics = StepMetrics {
        loss: grid_loss(&fwd.grid_batch(&grids), &model.ssn, cfg.lambda)?,
        ..StepMetrics::default()
    };
    if !metrics.loss.is_finite() {
        return Err(Error::Divergence {
            step,
            reason: format!("loss is {}", metrics.loss),
        });
    }
    let records = fwd.tree_records(model, &grids)?;
    tree_metrics(&records, &mut metrics);

    let mut encoder_grads = None;
    if phase != Phase::Fusion {
        let (mut ssn_grads, grad_h) = ssn_backward_grid(&fwd.grid_batch(&grids), &model.ssn, cfg.lambda)?;
        let mut enc = fwd.encoder_grads(model, &grad_h)?;
        let norm = (enc.norm_sq() + ssn_grads.norm_sq()).sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("gradient norm is {norm}"),
            });
        }
        metrics.grad_norm = norm;
        if norm > cfg.clip_norm {
            let f = cfg.clip_norm / norm;
            enc.scale(f);
            ssn_grads.scale(f);
        }
        if cfg.eta != 0.0 {
            model.ssn.apply(-cfg.eta, &ssn_grads);
        }
        encoder_grads = Some(enc);
    }

    if phase != Phase::Representation && cfg.alpha != 0.0 {
        let records = if phase == Phase::Joint && cfg.eta != 0.0 {
            fwd.tree_records(model, &fwd.grids(model)?)?
        } else {
            records
        };
        let pairs: Vec<(&TreeForwardRecord, &PosteriorRecord)> = records.iter().map(|(r, p)| (r, p)).collect();
        gate_update_batch(&mut model.tree, &pairs, cfg.alpha)?;
    }

    if let Some(enc) = encoder_grads {
        if cfg.eta != 0.0 {
            model.encoder.apply(-cfg.eta, &enc);
        }
    }
    Ok(metrics)
}

/// A full joint step: SSN update, SSN re-forward, gate update, encoder
/// update.
pub fn approx_train_step(model: &mut Model, ds: &Dataset, batch: &BatchSample, cfg: &TrainConfig) -> Result<StepMetrics> {
    train_step(model, ds, batch, cfg, Phase::Joint, 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientPath {
    /// Encode once, share hidden states across all pairings.
    Replicated,
    /// Re-encode the trajectory for every pairing.
    Naive,
}

/// Unclipped encoder gradient of the batch SSN loss, by either path.
pub fn encoder_gradients(model: &Model, ds: &Dataset, batch: &BatchSample, cfg: &TrainConfig, path: GradientPath) -> Result<StackGrads> {
    match path {
        GradientPath::Replicated => {
            let fwd = encode_batch(model, ds, batch)?;
            let grids = fwd.grids(model)?;
            let (_, grad_h) = ssn_backward_grid(&fwd.grid_batch(&grids), &model.ssn, cfg.lambda)?;
            fwd.encoder_grads(model, &grad_h)
        }
        GradientPath::Naive => {
            let pairs: usize = batch.picks.iter().map(Vec::len).sum();
            let mut enc = model.encoder.zero_grads();
            for (&u, picks) in batch.trajectories.iter().zip(&batch.picks) {
                let frames = &ds.trajectories()[u].frames;
                for pick in picks {
                    let (hs, tape) = encode(&model.encoder, frames)?;
                    let m = &ds.gallery()[pick.item].values;
                    let caches: Vec<SsnCache> = hs
                        .iter()
                        .map(|h| ssn_forward_cached(&model.ssn, h, m))
                        .collect::<Result<_>>()?;
                    let labels = vec![pick.label; caches.len()];
                    let mut back = ssn_backward(&caches, &labels, &model.ssn, 0.0)?;
                    // This pair's loss is a mean over frames; the batch loss
                    // is a mean over pairs.
                    back.grad_h.iter_mut().for_each(|g| g.scale(1.0 / pairs as f64));
                    backprop_into(&model.encoder, &tape, &back.grad_h, &mut enc)?;
                }
            }
            Ok(enc)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean pre-update SSN loss over the epoch's encoder/SSN steps.
    pub loss: f64,
    /// Mean tree log-likelihood over the epoch's gate steps.
    pub tree_log_likelihood: f64,
    pub mean_y_pos: f64,
    pub mean_y_neg: f64,
    pub steps: usize,
}

fn run_pass(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    phase: Phase,
    rng: &mut Rng,
    step: &mut usize,
) -> Result<Vec<StepMetrics>> {
    let mut order: Vec<usize> = (0..ds.trajectories().len()).collect();
    rng.shuffle(&mut order);
    let mut out = Vec::with_capacity(order.len().div_ceil(cfg.n));
    for chunk in order.chunks(cfg.n) {
        let batch = batch_for(ds, chunk, cfg.s, rng)?;
        out.push(train_step(model, ds, &batch, cfg, phase, *step)?);
        *step += 1;
    }
    Ok(out)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Trains for `cfg.epochs` passes over the trajectories, calling `on_epoch`
/// after each. Bit-for-bit reproducible from (dataset, model, config).
pub fn two_step_train(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    model.check_dataset(ds)?;
    if ds.trajectories().is_empty() {
        return Err(Error::arg("cannot train on an empty dataset"));
    }
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (representation, fusion) = match cfg.schedule {
            Schedule::Alternate => {
                let a = run_pass(model, ds, cfg, Phase::Representation, &mut rng, &mut step)?;
                let b = run_pass(model, ds, cfg, Phase::Fusion, &mut rng, &mut step)?;
                (a, b)
            }
            Schedule::Interleave => {
                let a = run_pass(model, ds, cfg, Phase::Joint, &mut rng, &mut step)?;
                (a.clone(), a)
            }
        };
        let metrics = EpochMetrics {
            epoch,
            loss: mean(representation.iter().map(|m| m.loss)),
            tree_log_likelihood: mean(fusion.iter().map(|m| m.tree_log_likelihood)),
            mean_y_pos: mean(fusion.iter().map(|m| m.mean_y_pos)),
            mean_y_neg: mean(fusion.iter().map(|m| m.mean_y_neg)),
            steps: representation.len() + if cfg.schedule == Schedule::Alternate { fusion.len() } else { 0 },
        };
        on_epoch(&metrics);
        history.push(metrics);
    }
    Ok(history)
}

/// SSN loss over one draw of picks for every trajectory, without updating
/// anything.
pub fn dataset_loss(model: &Model, ds: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..ds.trajectories().len()).collect();
    let batch = batch_for(ds, &all, cfg.s, &mut rng)?;
    let fwd = encode_batch(model, ds, &batch)?;
    let grids = fwd.grids(model)?;
    grid_loss(&fwd.grid_batch(&grids), &model.ssn, cfg.lambda)
}

/// Clones `general`, trains it on `category`'s trajectories only and stamps
/// the category on the result.
pub fn category_finetune(general: &Model, ds: &Dataset, category: &str, cfg: &TrainConfig) -> Result<Model> {
    if !ds.categories().contains(category) {
        return Err(Error::arg(format!("unknown category {category:?}")));
    }
    let restricted = ds
        .restrict_to_category(category)
        .map_err(|e| Error::arg(format!("category {category:?}: {e}")))?;
    let mut model = general.clone();
    two_step_train(&mut model, &restricted, cfg, |_| {})?;
    model.category = Some(category.to_string());
    Ok(model)
}
