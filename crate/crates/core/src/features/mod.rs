//! Feature containers, spatial pyramid pooling, trajectory length
//! unification, the dataset file format and the synthetic generator.

mod io;
mod spp;
mod synth;
mod trajectory;

use std::collections::{BTreeMap, BTreeSet, HashMap};

pub use io::{format_dataset, load_dataset, parse_dataset, write_dataset};
pub use spp::{spp_pool, FeatureMap, Pooling, SppConfig};
pub use synth::{synth_generate, SynthConfig};
pub use trajectory::normalize_trajectory_length;

use crate::error::DatasetError;
use crate::numerics::Vector;

/// Trajectory length used throughout unless configured otherwise.
pub const DEFAULT_TRAJECTORY_LEN: usize = 32;

/// A single embedding with an opaque identifier (a shop image, typically).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub id: String,
    pub values: Vector,
}

impl FeatureVector {
    pub fn new(id: impl Into<String>, values: impl Into<Vector>) -> Self {
        FeatureVector {
            id: id.into(),
            values: values.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.dim()
    }
}

/// One tracked item on the video side: a fixed-length run of frame features.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub category: String,
    pub frames: Vec<Vector>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, Vector::dim)
    }
}

/// Query trajectories, the gallery they are ranked against, and the ground
/// truth pairs. Always validated on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    traj_len: usize,
    trajectories: Vec<Trajectory>,
    gallery: Vec<FeatureVector>,
    gallery_categories: BTreeMap<String, String>,
    positives: BTreeMap<String, BTreeSet<String>>,
    categories: BTreeSet<String>,
    // Derived indices.
    positive_index: Vec<Vec<usize>>,
    gallery_category_index: Vec<Option<usize>>,
}

impl Dataset {
    /// Builds and validates a dataset. `gallery_categories` may be empty, in
    /// which case gallery items are uncategorised and within-category
    /// ranking falls back to the whole gallery.
    pub fn new(
        dim: usize,
        traj_len: usize,
        trajectories: Vec<Trajectory>,
        gallery: Vec<FeatureVector>,
        gallery_categories: BTreeMap<String, String>,
        positives: BTreeMap<String, BTreeSet<String>>,
    ) -> Result<Self, DatasetError> {
        if dim == 0 {
            return Err(DatasetError::Inconsistent("feature dimension must be positive".into()));
        }
        if traj_len == 0 {
            return Err(DatasetError::Inconsistent("trajectory length must be positive".into()));
        }
        if gallery.is_empty() {
            return Err(DatasetError::EmptySection { section: "gallery" });
        }
        if trajectories.is_empty() {
            return Err(DatasetError::EmptySection { section: "trajectory" });
        }

        let mut gallery_lookup = HashMap::with_capacity(gallery.len());
        for (i, item) in gallery.iter().enumerate() {
            if item.dim() != dim {
                return Err(DatasetError::Inconsistent(format!(
                    "gallery item {} has dim {}, expected {dim}",
                    item.id,
                    item.dim()
                )));
            }
            if !item.values.is_finite() {
                return Err(DatasetError::Inconsistent(format!(
                    "gallery item {} has non-finite values",
                    item.id
                )));
            }
            if gallery_lookup.insert(item.id.as_str(), i).is_some() {
                return Err(DatasetError::Inconsistent(format!("duplicate gallery id {}", item.id)));
            }
        }

        let mut traj_ids = BTreeSet::new();
        for traj in &trajectories {
            if !traj_ids.insert(traj.id.as_str()) {
                return Err(DatasetError::Inconsistent(format!("duplicate trajectory id {}", traj.id)));
            }
            if traj.len() != traj_len {
                return Err(DatasetError::Inconsistent(format!(
                    "trajectory {} has {} frames, expected {traj_len}",
                    traj.id,
                    traj.len()
                )));
            }
            for frame in &traj.frames {
                if frame.dim() != dim {
                    return Err(DatasetError::Inconsistent(format!(
                        "trajectory {} has a frame of dim {}, expected {dim}",
                        traj.id,
                        frame.dim()
                    )));
                }
                if !frame.is_finite() {
                    return Err(DatasetError::Inconsistent(format!(
                        "trajectory {} has non-finite values",
                        traj.id
                    )));
                }
            }
        }

        for (traj_id, items) in &positives {
            if !traj_ids.contains(traj_id.as_str()) {
                return Err(DatasetError::DanglingReference(format!(
                    "positive pair references unknown trajectory {traj_id}"
                )));
            }
            for g in items {
                if !gallery_lookup.contains_key(g.as_str()) {
                    return Err(DatasetError::DanglingReference(format!(
                        "positive pair ({traj_id}, {g}) references unknown gallery item"
                    )));
                }
            }
        }
        for id in gallery_categories.keys() {
            if !gallery_lookup.contains_key(id.as_str()) {
                return Err(DatasetError::DanglingReference(format!(
                    "category row references unknown gallery item {id}"
                )));
            }
        }

        let positive_index: Vec<Vec<usize>> = trajectories
            .iter()
            .map(|t| {
                positives
                    .get(&t.id)
                    .map(|set| set.iter().map(|g| gallery_lookup[g.as_str()]).collect())
                    .unwrap_or_default()
            })
            .collect();
        if let Some(t) = trajectories.iter().zip(&positive_index).find(|(_, p)| p.is_empty()) {
            return Err(DatasetError::Inconsistent(format!(
                "trajectory {} has no positive gallery item",
                t.0.id
            )));
        }

        let categories: BTreeSet<String> = trajectories
            .iter()
            .map(|t| t.category.clone())
            .chain(gallery_categories.values().cloned())
            .collect();
        let category_pos: HashMap<&str, usize> =
            categories.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let gallery_category_index = gallery
            .iter()
            .map(|g| gallery_categories.get(&g.id).map(|c| category_pos[c.as_str()]))
            .collect();

        Ok(Dataset {
            dim,
            traj_len,
            trajectories,
            gallery,
            gallery_categories,
            positives,
            categories,
            positive_index,
            gallery_category_index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn traj_len(&self) -> usize {
        self.traj_len
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn gallery(&self) -> &[FeatureVector] {
        &self.gallery
    }

    pub fn gallery_categories(&self) -> &BTreeMap<String, String> {
        &self.gallery_categories
    }

    pub fn positives(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.positives
    }

    pub fn categories(&self) -> &BTreeSet<String> {
        &self.categories
    }

    /// Number of (trajectory, gallery item) ground-truth pairs.
    pub fn pair_count(&self) -> usize {
        self.positive_index.iter().map(Vec::len).sum()
    }

    /// Gallery indices of the positives of trajectory `traj`.
    pub fn positive_indices(&self, traj: usize) -> &[usize] {
        &self.positive_index[traj]
    }

    pub fn gallery_category(&self, item: usize) -> Option<&str> {
        self.gallery_category_index[item]
            .and_then(|c| self.categories.iter().nth(c))
            .map(String::as_str)
    }

    /// Gallery indices whose category is `category`. When the gallery carries
    /// no categories at all, every index is returned.
    pub fn gallery_indices_in(&self, category: &str) -> Vec<usize> {
        if self.gallery_categories.is_empty() {
            return (0..self.gallery.len()).collect();
        }
        self.gallery
            .iter()
            .enumerate()
            .filter(|(_, g)| self.gallery_categories.get(&g.id).map(String::as_str) == Some(category))
            .map(|(i, _)| i)
            .collect()
    }

    /// Subset holding only trajectories of `category` and, when gallery
    /// categories are known, only gallery items of that category plus any
    /// item referenced as a positive.
    pub fn restrict_to_category(&self, category: &str) -> Result<Dataset, DatasetError> {
        if !self.categories.contains(category) {
            return Err(DatasetError::Inconsistent(format!("unknown category {category}")));
        }
        let trajectories: Vec<Trajectory> = self
            .trajectories
            .iter()
            .filter(|t| t.category == category)
            .cloned()
            .collect();
        let positives: BTreeMap<String, BTreeSet<String>> = trajectories
            .iter()
            .filter_map(|t| self.positives.get(&t.id).map(|p| (t.id.clone(), p.clone())))
            .collect();
        let referenced: BTreeSet<&String> = positives.values().flatten().collect();
        let gallery: Vec<FeatureVector> = self
            .gallery
            .iter()
            .filter(|g| {
                self.gallery_categories.is_empty()
                    || referenced.contains(&g.id)
                    || self.gallery_categories.get(&g.id).map(String::as_str) == Some(category)
            })
            .cloned()
            .collect();
        let gallery_categories = self
            .gallery_categories
            .iter()
            .filter(|(id, _)| gallery.iter().any(|g| &g.id == *id))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Dataset::new(self.dim, self.traj_len, trajectories, gallery, gallery_categories, positives)
    }

    /// Splits trajectories into (train, held-out); the held-out part is the
    /// last `ceil(fraction · n)` trajectories in file order. Both halves keep
    /// the full gallery.
    pub fn split_holdout(&self, fraction: f64) -> Result<(Dataset, Dataset), DatasetError> {
        if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
            return Err(DatasetError::Inconsistent(format!(
                "holdout fraction must lie in (0, 1), got {fraction}"
            )));
        }
        let n = self.trajectories.len();
        let held = ((fraction * n as f64).ceil() as usize).clamp(1, n.saturating_sub(1).max(1));
        if held >= n {
            return Err(DatasetError::Inconsistent("holdout would leave no training trajectories".into()));
        }
        let part = |trajs: &[Trajectory]| {
            let positives = trajs
                .iter()
                .filter_map(|t| self.positives.get(&t.id).map(|p| (t.id.clone(), p.clone())))
                .collect();
            Dataset::new(
                self.dim,
                self.traj_len,
                trajs.to_vec(),
                self.gallery.clone(),
                self.gallery_categories.clone(),
                positives,
            )
        };
        Ok((part(&self.trajectories[..n - held])?, part(&self.trajectories[n - held..])?))
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Tiny hand-made dataset: `n` trajectories each paired with one gallery
    /// item, plus `extra` unpaired gallery items, in a single category.
    pub fn tiny_dataset(n: usize, extra: usize, dim: usize, len: usize) -> Dataset {
        let trajectories = (0..n)
            .map(|i| Trajectory {
                id: format!("t{i}"),
                category: "c0".into(),
                frames: (0..len)
                    .map(|t| Vector::from((0..dim).map(|d| (i * 31 + t * 7 + d) as f64 * 0.01).collect::<Vec<_>>()))
                    .collect(),
            })
            .collect();
        let gallery = (0..n + extra)
            .map(|i| FeatureVector::new(format!("g{i}"), (0..dim).map(|d| (i + d) as f64 * 0.1).collect::<Vec<_>>()))
            .collect();
        let positives = (0..n)
            .map(|i| (format!("t{i}"), BTreeSet::from([format!("g{i}")])))
            .collect();
        Dataset::new(dim, len, trajectories, gallery, BTreeMap::new(), positives).unwrap()
    }
}
