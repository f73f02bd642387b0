//! Scoring, ranking and top-k retrieval accuracy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::encode_hidden;
use crate::error::{Error, Result};
use crate::features::{Dataset, FeatureVector, Trajectory};
use crate::model::Model;
use crate::ssn::SsnParams;
use crate::tree::tree_forward_parts;

pub const DEFAULT_KS: [usize; 5] = [1, 5, 10, 15, 20];

/// Tree-free fusion of the per-frame scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Avg,
    Max,
    Last,
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(Baseline::Avg),
            "max" => Ok(Baseline::Max),
            "last" => Ok(Baseline::Last),
            other => Err(Error::arg(format!("unknown baseline {other:?} (avg | max | last)"))),
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::Avg => "avg",
            Baseline::Max => "max",
            Baseline::Last => "last",
        })
    }
}

impl Baseline {
    pub fn fuse(self, y_hat: &[f64]) -> f64 {
        match self {
            Baseline::Avg => y_hat.iter().sum::<f64>() / y_hat.len() as f64,
            Baseline::Max => y_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Baseline::Last => y_hat[y_hat.len() - 1],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Scoring {
    #[default]
    Tree,
    Baseline(Baseline),
}

impl fmt::Display for Scoring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scoring::Tree => f.write_str("tree"),
            Scoring::Baseline(b) => b.fmt(f),
        }
    }
}

/// A trajectory's encoded and projected hidden states, reusable across
/// gallery items.
struct Query<'m> {
    ssn: &'m SsnParams,
    model: &'m Model,
    hidden_proj: Vec<Vec<f64>>,
    item_proj: Vec<f64>,
    fc1: Vec<Vec<f64>>,
    y_hat: Vec<f64>,
}

impl<'m> Query<'m> {
    fn new(model: &'m Model, traj: &Trajectory) -> Result<Self> {
        if traj.len() != model.leaf_count() {
            return Err(Error::shape(format!(
                "trajectory {} has {} frames, model expects {}",
                traj.id,
                traj.len(),
                model.leaf_count()
            )));
        }
        let hs = encode_hidden(&model.encoder, &traj.frames)?;
        let f = model.ssn.fc1_dim();
        let hidden_proj = hs
            .iter()
            .map(|h| {
                let mut a = vec![0.0; f];
                model.ssn.project_hidden(h, &mut a);
                a
            })
            .collect();
        Ok(Query {
            ssn: &model.ssn,
            model,
            hidden_proj,
            item_proj: vec![0.0; f],
            fc1: vec![vec![0.0; f]; hs.len()],
            y_hat: vec![0.0; hs.len()],
        })
    }

    fn frame_scores(&mut self, item: &FeatureVector) -> Result<&[f64]> {
        if item.dim() != self.ssn.item_dim() {
            return Err(Error::shape(format!(
                "gallery item {} has dim {}, model expects {}",
                item.id,
                item.dim(),
                self.ssn.item_dim()
            )));
        }
        self.ssn.project_item(&item.values, &mut self.item_proj);
        for ((a, x), y) in self.hidden_proj.iter().zip(&mut self.fc1).zip(&mut self.y_hat) {
            *y = self.ssn.finish(a, &self.item_proj, x).1;
        }
        Ok(&self.y_hat)
    }

    fn score(&mut self, item: &FeatureVector, scoring: Scoring) -> Result<f64> {
        self.frame_scores(item)?;
        match scoring {
            Scoring::Baseline(b) => Ok(b.fuse(&self.y_hat)),
            Scoring::Tree => {
                let fc1: Vec<&[f64]> = self.fc1.iter().map(|v| v.as_slice()).collect();
                Ok(tree_forward_parts(&self.model.tree, &fc1, &self.y_hat)?.y)
            }
        }
    }
}

/// Per-frame ŷ of every hidden state against `item`.
pub fn frame_scores(model: &Model, traj: &Trajectory, item: &FeatureVector) -> Result<Vec<f64>> {
    Ok(Query::new(model, traj)?.frame_scores(item)?.to_vec())
}

/// Global match score `Y` in (0, 1).
pub fn score_pair(model: &Model, traj: &Trajectory, item: &FeatureVector) -> Result<f64> {
    Query::new(model, traj)?.score(item, Scoring::Tree)
}

pub fn baseline_score(model: &Model, traj: &Trajectory, item: &FeatureVector, mode: Baseline) -> Result<f64> {
    Query::new(model, traj)?.score(item, Scoring::Baseline(mode))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedResult {
    pub trajectory: String,
    /// Best first.
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
}

impl RankedResult {
    /// 1-based rank of `id`.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|g| g == id).map(|p| p + 1)
    }

    /// Orders `(id, score)` pairs by descending score, ties by ascending id.
    pub fn from_scores(trajectory: impl Into<String>, mut scored: Vec<(String, f64)>) -> Self {
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let (ids, scores) = scored.into_iter().unzip();
        RankedResult {
            trajectory: trajectory.into(),
            ids,
            scores,
        }
    }
}

pub fn rank_items<'a>(
    model: &Model,
    traj: &Trajectory,
    items: impl IntoIterator<Item = &'a FeatureVector>,
    scoring: Scoring,
) -> Result<RankedResult> {
    let mut query = Query::new(model, traj)?;
    let scored = items
        .into_iter()
        .map(|item| Ok((item.id.clone(), query.score(item, scoring)?)))
        .collect::<Result<Vec<_>>>()?;
    if scored.is_empty() {
        return Err(Error::arg("cannot rank an empty gallery"));
    }
    Ok(RankedResult::from_scores(traj.id.clone(), scored))
}

pub fn rank_gallery(model: &Model, traj: &Trajectory, gallery: &[FeatureVector]) -> Result<RankedResult> {
    rank_items(model, traj, gallery, Scoring::Tree)
}

/// Percentage of results with a ground-truth positive among the first `k`.
pub fn topk_accuracy(results: &[RankedResult], truth: &BTreeMap<String, BTreeSet<String>>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    if results.is_empty() {
        return Err(Error::arg("no results to score"));
    }
    let mut correct = 0usize;
    for r in results {
        if hit(r, truth, k)? {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / results.len() as f64)
}

fn hit(r: &RankedResult, truth: &BTreeMap<String, BTreeSet<String>>, k: usize) -> Result<bool> {
    let positives = truth
        .get(&r.trajectory)
        .ok_or_else(|| Error::arg(format!("no ground truth for trajectory {}", r.trajectory)))?;
    Ok(r.ids.iter().take(k).any(|id| positives.contains(id)))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub scoring: Scoring,
    /// Rank each query only against gallery items of its own category.
    pub within_category: bool,
    /// Worker threads; `None` uses the available parallelism.
    pub workers: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: DEFAULT_KS.to_vec(),
            scoring: Scoring::Tree,
            within_category: true,
            workers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub queries: usize,
    /// Aligned with [`EvalReport::ks`].
    pub accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `tree` or the baseline name.
    pub mode: String,
    pub ks: Vec<usize>,
    pub queries: usize,
    pub within_category: bool,
    /// Query-weighted over all categories.
    pub overall: Vec<f64>,
    pub categories: Vec<CategoryRow>,
}

impl EvalReport {
    pub fn accuracy_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.overall[i])
    }

    /// Accuracies never decrease with k.
    pub fn is_monotone(&self) -> bool {
        let mut order: Vec<usize> = (0..self.ks.len()).collect();
        order.sort_by_key(|&i| self.ks[i]);
        let rows = std::iter::once(&self.overall).chain(self.categories.iter().map(|c| &c.accuracy));
        rows.into_iter()
            .all(|acc| order.windows(2).all(|w| acc[w[0]] <= acc[w[1]]))
    }
}

/// Ranks every trajectory of `ds` and tabulates top-k accuracy.
pub fn evaluate(model: &Model, ds: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    model.check_dataset(ds)?;
    if opts.ks.is_empty() || opts.ks.contains(&0) {
        return Err(Error::arg(format!("k values must be >= 1, got {:?}", opts.ks)));
    }
    if ds.trajectories().is_empty() {
        return Err(Error::arg("dataset has no queries"));
    }
    let rank_one = |traj: &Trajectory| -> Result<RankedResult> {
        if opts.within_category {
            let idx = ds.gallery_indices_in(&traj.category);
            rank_items(model, traj, idx.iter().map(|&j| &ds.gallery()[j]), opts.scoring)
        } else {
            rank_items(model, traj, ds.gallery(), opts.scoring)
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = opts.workers {
        builder = builder.num_threads(w.max(1));
    }
    let pool = builder.build().map_err(|e| Error::State(format!("worker pool: {e}")))?;
    let results: Vec<RankedResult> = pool.install(|| {
        ds.trajectories()
            .par_iter()
            .map(rank_one)
            .collect::<Result<Vec<_>>>()
    })?;

    let mut per_category: BTreeMap<&str, (usize, Vec<usize>)> = BTreeMap::new();
    for (traj, r) in ds.trajectories().iter().zip(&results) {
        let entry = per_category
            .entry(traj.category.as_str())
            .or_insert_with(|| (0, vec![0; opts.ks.len()]));
        entry.0 += 1;
        for (i, &k) in opts.ks.iter().enumerate() {
            if hit(r, ds.positives(), k)? {
                entry.1[i] += 1;
            }
        }
    }
    let total = results.len();
    let mut overall_hits = vec![0usize; opts.ks.len()];
    let categories = per_category
        .into_iter()
        .map(|(cat, (n, hits))| {
            overall_hits.iter_mut().zip(&hits).for_each(|(o, h)| *o += h);
            CategoryRow {
                category: cat.to_string(),
                queries: n,
                accuracy: hits.iter().map(|&h| 100.0 * h as f64 / n as f64).collect(),
            }
        })
        .collect();
    Ok(EvalReport {
        mode: opts.scoring.to_string(),
        ks: opts.ks.clone(),
        queries: total,
        within_category: opts.within_category,
        overall: overall_hits.iter().map(|&h| 100.0 * h as f64 / total as f64).collect(),
        categories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{synth_generate, SynthConfig};
    use crate::model::ModelConfig;
    use crate::numerics::{Rng, Vector};
    use crate::tree::{FusionTree, TreeConfig};

    fn model(seed: u64, leaves: usize) -> Model {
        let cfg = ModelConfig {
            hidden_dim: 4,
            depth: 2,
            fc1_dim: 6,
            init_scale: 0.3,
            tree: TreeConfig::binary(leaves),
        };
        Model::init(&cfg, 3, seed).unwrap()
    }

    fn traj(rng: &mut Rng, len: usize) -> Trajectory {
        Trajectory {
            id: "q".into(),
            category: "c".into(),
            frames: (0..len).map(|_| (0..3).map(|_| rng.normal()).collect()).collect(),
        }
    }

    fn item(id: &str, rng: &mut Rng) -> FeatureVector {
        FeatureVector::new(id, (0..3).map(|_| rng.normal()).collect::<Vec<_>>())
    }

    #[test]
    fn zero_gates_score_is_mean_of_frames() {
        let mut rng = Rng::seed_from_u64(1);
        let m = model(1, 4);
        let t = traj(&mut rng, 4);
        let g = item("g", &mut rng);
        let ys = frame_scores(&m, &t, &g).unwrap();
        let y = score_pair(&m, &t, &g).unwrap();
        assert!((y - ys.iter().sum::<f64>() / 4.0).abs() < 1e-12);
        assert_eq!(y, score_pair(&m, &t, &g).unwrap());
        assert!((baseline_score(&m, &t, &g, Baseline::Avg).unwrap() - y).abs() < 1e-12);
    }

    #[test]
    fn two_leaf_model_matches_path_sum() {
        let mut rng = Rng::seed_from_u64(2);
        let mut m = model(2, 2);
        m.tree = FusionTree::init(TreeConfig::binary(2), 6, 0.8, &mut rng).unwrap();
        let t = traj(&mut rng, 2);
        let g = item("g", &mut rng);
        let ys = frame_scores(&m, &t, &g).unwrap();
        let hs = encode_hidden(&m.encoder, &t.frames).unwrap();
        let logits: Vec<f64> = (0..2)
            .map(|k| {
                let out = crate::ssn::ssn_forward(&m.ssn, &hs[k], &g.values).unwrap();
                let mut x = out.x_fc1.into_vec();
                x.push(1.0);
                m.tree.gate(0, k).dot(&x)
            })
            .collect();
        let g0 = 1.0 / (1.0 + (logits[1] - logits[0]).exp());
        let expected = g0 * ys[0] + (1.0 - g0) * ys[1];
        assert!((score_pair(&m, &t, &g).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn baseline_arithmetic() {
        let ys = [0.1, 0.9, 0.4];
        assert!((Baseline::Avg.fuse(&ys) - 0.466_666_666_666_666_7).abs() < 1e-12);
        assert_eq!(Baseline::Max.fuse(&ys), 0.9);
        assert_eq!(Baseline::Last.fuse(&ys), 0.4);
        for b in [Baseline::Avg, Baseline::Max, Baseline::Last] {
            assert!((b.fuse(&[0.3; 5]) - 0.3).abs() < 1e-15);
        }
        assert_eq!("max".parse::<Baseline>().unwrap(), Baseline::Max);
        assert!("min".parse::<Baseline>().is_err());
    }

    #[test]
    fn ranking_ties_by_id_and_rejects_empty() {
        let r = RankedResult::from_scores("q", vec![("b".into(), 0.5), ("a".into(), 0.5), ("c".into(), 0.9)]);
        assert_eq!(r.ids, vec!["c", "a", "b"]);
        let mut rng = Rng::seed_from_u64(3);
        let m = model(3, 4);
        let t = traj(&mut rng, 4);
        assert!(matches!(rank_gallery(&m, &t, &[]), Err(Error::Argument(_))));
        let one = rank_gallery(&m, &t, &[item("only", &mut rng)]).unwrap();
        assert_eq!(one.ids, vec!["only"]);
    }

    #[test]
    fn ranking_matches_resort_oracle_and_is_permutation_invariant() {
        let mut rng = Rng::seed_from_u64(4);
        let m = model(4, 4);
        let t = traj(&mut rng, 4);
        let mut gallery: Vec<FeatureVector> = (0..50).map(|j| item(&format!("g{j:02}"), &mut rng)).collect();
        let r = rank_gallery(&m, &t, &gallery).unwrap();
        let mut oracle: Vec<(f64, String)> = gallery.iter().map(|g| (score_pair(&m, &t, g).unwrap(), g.id.clone())).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        assert_eq!(r.ids, oracle.iter().map(|o| o.1.clone()).collect::<Vec<_>>());
        assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
        rng.shuffle(&mut gallery);
        assert_eq!(rank_gallery(&m, &t, &gallery).unwrap(), r);
    }

    fn truth(pairs: &[(&str, &str)]) -> BTreeMap<String, BTreeSet<String>> {
        let mut map = BTreeMap::new();
        for (t, g) in pairs {
            map.entry(t.to_string()).or_insert_with(BTreeSet::new).insert(g.to_string());
        }
        map
    }

    #[test]
    fn topk_threshold_semantics() {
        let ids: Vec<(String, f64)> = (0..10).map(|j| (format!("g{j}"), 1.0 - j as f64 / 10.0)).collect();
        let r = RankedResult::from_scores("q", ids);
        let t = truth(&[("q", "g5")]);
        assert_eq!(topk_accuracy(&[r.clone()], &t, 5).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&[r.clone()], &t, 10).unwrap(), 100.0);
        assert_eq!(topk_accuracy(&[r.clone()], &truth(&[("q", "g0")]), 1).unwrap(), 100.0);
        assert!(topk_accuracy(&[r.clone()], &t, 0).is_err());
        assert!(topk_accuracy(&[r], &truth(&[("x", "g0")]), 1).is_err());
    }

    #[test]
    fn random_ranking_hits_k_over_g() {
        let mut rng = Rng::seed_from_u64(5);
        let mut results = Vec::new();
        let mut pairs = Vec::new();
        for q in 0..1000 {
            let scored = (0..200).map(|j| (format!("g{j:03}"), rng.uniform())).collect();
            results.push(RankedResult::from_scores(format!("q{q}"), scored));
            pairs.push((format!("q{q}"), format!("g{:03}", rng.below(200))));
        }
        let refs: Vec<(&str, &str)> = pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let acc = topk_accuracy(&results, &truth(&refs), 20).unwrap();
        assert!((acc - 10.0).abs() <= 3.0, "{acc}");
    }

    #[test]
    fn report_is_weighted_and_monotone() {
        let ds = synth_generate(&SynthConfig {
            n_traj: 9,
            gallery_size: 30,
            dim: 3,
            traj_len: 4,
            n_categories: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let m = model(6, 4);
        let report = evaluate(&m, &ds, &EvalOptions::default()).unwrap();
        assert_eq!(report.queries, 9);
        assert!(report.is_monotone());
        assert_eq!(report.categories.iter().map(|c| c.queries).sum::<usize>(), 9);
        for i in 0..report.ks.len() {
            let weighted: f64 = report.categories.iter().map(|c| c.accuracy[i] * c.queries as f64).sum::<f64>() / 9.0;
            assert!((weighted - report.overall[i]).abs() < 1e-9);
        }
        // Every category has 15 items or fewer, so k = 15 and 20 see them all.
        assert_eq!(report.accuracy_at(20), Some(100.0));
        let single = evaluate(&m, &ds, &EvalOptions { workers: Some(1), ..EvalOptions::default() }).unwrap();
        assert_eq!(single, report);
        let avg = evaluate(
            &m,
            &ds,
            &EvalOptions {
                scoring: Scoring::Baseline(Baseline::Avg),
                ..EvalOptions::default()
            },
        )
        .unwrap();
        assert_eq!(avg.mode, "avg");
        assert_eq!(avg.overall, report.overall);
    }

    #[test]
    fn dimension_mismatch_names_both() {
        let ds = synth_generate(&SynthConfig {
            n_traj: 2,
            gallery_size: 4,
            dim: 5,
            traj_len: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let err = evaluate(&model(7, 4), &ds, &EvalOptions::default()).unwrap_err().to_string();
        assert!(err.contains('3') && err.contains('5'), "{err}");
    }

    #[test]
    fn scores_stay_inside_unit_interval() {
        let mut rng = Rng::seed_from_u64(8);
        let mut m = model(8, 4);
        m.ssn.w2.scale(50.0);
        let t = traj(&mut rng, 4);
        for j in 0..20 {
            let y = score_pair(&m, &t, &item(&format!("g{j}"), &mut rng)).unwrap();
            assert!(y > 0.0 && y < 1.0);
        }
        let wrong = FeatureVector::new("w", Vector::zeros(2));
        assert!(matches!(score_pair(&m, &t, &wrong), Err(Error::Shape(_))));
    }
}
