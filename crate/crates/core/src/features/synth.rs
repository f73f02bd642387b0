use std::collections::{BTreeMap, BTreeSet};

use super::{Dataset, FeatureVector, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Vector};

/// Lag-one correlation of the smooth viewpoint drift.
const DRIFT_CORRELATION: f64 = 0.9;

/// Parameters of the synthetic cross-domain dataset.
///
/// Each trajectory has a latent style `s ~ N(0, I)`. Its frames are
/// `s + frame_noise · (d_t + e_t)` where `d_t` is a unit-variance AR(1)
/// drift (the slowly changing viewpoint) and `e_t` independent per-frame
/// noise. Its one positive gallery item is `s + style_noise · e`. The rest of
/// the gallery are distractors with independent styles. With
/// `corrupt_fraction > 0`, that share of each trajectory's frames is replaced
/// by unrelated `N(0, I)` vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_traj: usize,
    pub gallery_size: usize,
    pub dim: usize,
    pub traj_len: usize,
    pub n_categories: usize,
    pub style_noise: f64,
    pub frame_noise: f64,
    pub corrupt_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_traj: 500,
            gallery_size: 2000,
            dim: 64,
            traj_len: super::DEFAULT_TRAJECTORY_LEN,
            n_categories: 4,
            style_noise: 0.1,
            frame_noise: 0.1,
            corrupt_fraction: 0.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_traj == 0 || self.gallery_size == 0 || self.traj_len == 0 || self.n_categories == 0 {
            return Err(Error::arg("n_traj, gallery_size, traj_len and n_categories must be >= 1"));
        }
        if self.dim < 2 {
            return Err(Error::arg(format!("dim must be at least 2, got {}", self.dim)));
        }
        if self.gallery_size < self.n_traj {
            return Err(Error::arg(format!(
                "gallery_size {} cannot hold the {} positives",
                self.gallery_size, self.n_traj
            )));
        }
        if !(self.style_noise >= 0.0 && self.frame_noise >= 0.0) {
            return Err(Error::arg("noise levels must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.corrupt_fraction) {
            return Err(Error::arg("corrupt_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

fn normal_vector(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.normal()).collect()
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let category = |i: usize| format!("c{:02}", i % cfg.n_categories);
    let drift_innovation = (1.0 - DRIFT_CORRELATION * DRIFT_CORRELATION).sqrt();
    let corrupted = (cfg.corrupt_fraction * cfg.traj_len as f64).round() as usize;

    // (values, category, owning trajectory) before the gallery is shuffled.
    let mut items: Vec<(Vec<f64>, String, Option<usize>)> = Vec::with_capacity(cfg.gallery_size);
    let mut trajectories = Vec::with_capacity(cfg.n_traj);
    for i in 0..cfg.n_traj {
        let style = normal_vector(&mut rng, cfg.dim);
        let mut drift = normal_vector(&mut rng, cfg.dim);
        let mut frames = Vec::with_capacity(cfg.traj_len);
        for t in 0..cfg.traj_len {
            if t > 0 {
                for d in drift.iter_mut() {
                    *d = DRIFT_CORRELATION * *d + drift_innovation * rng.normal();
                }
            }
            let frame: Vec<f64> = style
                .iter()
                .zip(&drift)
                .map(|(s, d)| s + cfg.frame_noise * (d + rng.normal()))
                .collect();
            frames.push(Vector::from(frame));
        }
        for t in rng.sample_indices(cfg.traj_len, corrupted) {
            frames[t] = Vector::from(normal_vector(&mut rng, cfg.dim));
        }
        let positive: Vec<f64> = style.iter().map(|s| s + cfg.style_noise * rng.normal()).collect();
        items.push((positive, category(i), Some(i)));
        trajectories.push(Trajectory {
            id: format!("t{i:05}"),
            category: category(i),
            frames,
        });
    }
    for j in 0..cfg.gallery_size - cfg.n_traj {
        items.push((normal_vector(&mut rng, cfg.dim), category(j), None));
    }
    rng.shuffle(&mut items);

    let mut gallery = Vec::with_capacity(items.len());
    let mut gallery_categories = BTreeMap::new();
    let mut positives = BTreeMap::new();
    for (k, (values, cat, owner)) in items.into_iter().enumerate() {
        let id = format!("g{k:05}");
        if let Some(i) = owner {
            positives.insert(trajectories[i].id.clone(), BTreeSet::from([id.clone()]));
        }
        gallery_categories.insert(id.clone(), cat);
        gallery.push(FeatureVector::new(id, values));
    }

    Dataset::new(cfg.dim, cfg.traj_len, trajectories, gallery, gallery_categories, positives)
        .map_err(|e| Error::State(format!("generator produced an invalid dataset: {e}")))
}
