//! Finite-difference verification of every analytic gradient in the model:
//! encoder parameters, similarity-expert parameters and fusion-gate vectors.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::encoder::{backprop, encode, encode_hidden, StackedLstm};
use crate::error::{Error, Result};
use crate::numerics::{finite_diff_grad, max_relative_error, Rng, Vector};
use crate::ssn::{ssn_backward, ssn_forward, ssn_forward_cached, ssn_loss, SsnCache, SsnOutput, SsnParams};
use crate::tree::{gate_gradient, posteriors, tree_forward, tree_log_likelihood, FusionTree, TreeConfig};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Toy dimensions for the checks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckSizes {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub steps: usize,
    pub fc1_dim: usize,
    /// SSN batch size.
    pub samples: usize,
    /// Tree leaves; the tree is the binary one over them.
    pub leaves: usize,
}

impl Default for CheckSizes {
    fn default() -> Self {
        CheckSizes {
            input_dim: 4,
            hidden_dim: 5,
            depth: 2,
            steps: 6,
            fc1_dim: 6,
            samples: 6,
            leaves: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Lstm,
    Ssn,
    Gates,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Lstm, Component::Ssn, Component::Gates];
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Lstm => "lstm",
            Component::Ssn => "ssn",
            Component::Gates => "gates",
        })
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::arg(format!("unknown component {s:?} (lstm | ssn | gates)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub component: Component,
    pub parameters: usize,
    pub max_relative_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

/// Runs all three checks for one seed. `fault` negates the analytic
/// gradient of that component, which the check must catch.
pub fn run_checks(seed: u64, sizes: &CheckSizes, fault: Option<Component>) -> Result<Vec<CheckResult>> {
    if sizes.input_dim == 0 || sizes.hidden_dim == 0 || sizes.depth == 0 || sizes.steps == 0 {
        return Err(Error::arg("gradcheck encoder sizes must be >= 1"));
    }
    if sizes.fc1_dim == 0 || sizes.samples == 0 || !sizes.leaves.is_power_of_two() {
        return Err(Error::arg("gradcheck needs fc1_dim, samples >= 1 and a power-of-two leaf count"));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let sign = |c: Component| if fault == Some(c) { -1.0 } else { 1.0 };
    Ok(vec![
        check_lstm(&mut rng.fork(), sizes, sign(Component::Lstm))?,
        check_ssn(&mut rng.fork(), sizes, sign(Component::Ssn))?,
        check_gates(&mut rng.fork(), sizes, sign(Component::Gates))?,
    ])
}

fn normals(rng: &mut Rng, n: usize) -> Vector {
    (0..n).map(|_| rng.normal()).collect()
}

fn result(component: Component, analytic: &[f64], numeric: &[f64], sign: f64) -> CheckResult {
    let analytic: Vec<f64> = analytic.iter().map(|g| sign * g).collect();
    CheckResult {
        component,
        parameters: analytic.len(),
        max_relative_error: max_relative_error(&analytic, numeric),
    }
}

/// Loss `Σ_t ⟨h_t, u_t⟩` for fixed random upstream vectors `u_t`.
fn check_lstm(rng: &mut Rng, sizes: &CheckSizes, sign: f64) -> Result<CheckResult> {
    let stack = StackedLstm::init(sizes.input_dim, sizes.hidden_dim, sizes.depth, 0.5, rng)?;
    let frames: Vec<Vector> = (0..sizes.steps).map(|_| normals(rng, sizes.input_dim)).collect();
    let upstream: Vec<Vector> = (0..sizes.steps).map(|_| normals(rng, sizes.hidden_dim)).collect();
    let (_, tape) = encode(&stack, &frames)?;
    let analytic = backprop(&stack, &tape, &upstream)?.flatten();
    let mut probe = stack.clone();
    let numeric = finite_diff_grad(
        |flat| {
            probe.assign(flat);
            match encode_hidden(&probe, &frames) {
                Ok(hs) => hs.iter().zip(&upstream).map(|(h, u)| h.dot(u)).sum(),
                Err(_) => f64::NAN,
            }
        },
        &stack.flatten(),
        FD_STEP,
    )?;
    Ok(result(Component::Lstm, &analytic, &numeric, sign))
}

/// Regularised mean log loss over a random labelled batch.
fn check_ssn(rng: &mut Rng, sizes: &CheckSizes, sign: f64) -> Result<CheckResult> {
    let lambda = 1e-2;
    let p = SsnParams::init(sizes.hidden_dim, sizes.input_dim, sizes.fc1_dim, 0.6, rng);
    let hs: Vec<Vector> = (0..sizes.samples).map(|_| normals(rng, sizes.hidden_dim)).collect();
    let ms: Vec<Vector> = (0..sizes.samples).map(|_| normals(rng, sizes.input_dim)).collect();
    let labels: Vec<bool> = (0..sizes.samples).map(|i| i % 2 == 0).collect();
    let caches = hs
        .iter()
        .zip(&ms)
        .map(|(h, m)| ssn_forward_cached(&p, h, m))
        .collect::<Result<Vec<SsnCache>>>()?;
    let analytic = ssn_backward(&caches, &labels, &p, lambda)?.grads.flatten();
    let mut probe = p.clone();
    let numeric = finite_diff_grad(
        |flat| {
            probe.assign(flat);
            let outs: Result<Vec<SsnOutput>> = hs.iter().zip(&ms).map(|(h, m)| ssn_forward(&probe, h, m)).collect();
            outs.and_then(|o| ssn_loss(&o, &labels, &probe, lambda)).unwrap_or(f64::NAN)
        },
        &p.flatten(),
        FD_STEP,
    )?;
    Ok(result(Component::Ssn, &analytic, &numeric, sign))
}

/// `ln P(label)` of the tree as a function of every gate vector, with leaves
/// from a real similarity expert.
fn check_gates(rng: &mut Rng, sizes: &CheckSizes, sign: f64) -> Result<CheckResult> {
    let p = SsnParams::init(sizes.hidden_dim, sizes.input_dim, sizes.fc1_dim, 0.6, rng);
    let item = normals(rng, sizes.input_dim);
    let outputs = (0..sizes.leaves)
        .map(|_| ssn_forward(&p, &normals(rng, sizes.hidden_dim), &item))
        .collect::<Result<Vec<_>>>()?;
    let tree = FusionTree::init(TreeConfig::binary(sizes.leaves), sizes.fc1_dim, 0.5, rng)?;
    let label = rng.below(2) == 0;
    let record = tree_forward(&tree, &outputs)?;
    let post = posteriors(&tree, &record, label)?;
    let analytic: Vec<f64> = gate_gradient(&tree, &record, &post)?
        .iter()
        .flatten()
        .flat_map(|v| v.iter().copied())
        .collect();
    let mut probe = tree.clone();
    let numeric = finite_diff_grad(
        |flat| {
            probe.assign(flat);
            tree_log_likelihood(&probe, &outputs, label).unwrap_or(f64::NAN)
        },
        &tree.flatten(),
        FD_STEP,
    )?;
    Ok(result(Component::Gates, &analytic, &numeric, sign))
}

/// Per-component worst error over a range of seeds.
pub fn run_suite(seeds: std::ops::Range<u64>, sizes: &CheckSizes, fault: Option<Component>) -> Result<Vec<CheckResult>> {
    let mut worst: Vec<CheckResult> = Vec::new();
    for seed in seeds {
        for r in run_checks(seed, sizes, fault)? {
            match worst.iter_mut().find(|w| w.component == r.component) {
                Some(w) => w.max_relative_error = w.max_relative_error.max(r.max_relative_error),
                None => worst.push(r),
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sizes_pass() {
        let results = run_checks(3, &CheckSizes::default(), None).unwrap();
        assert_eq!(results.len(), 3);
        for r in &results {
            assert!(r.passed(), "{r:?}");
            assert!(r.parameters > 0);
        }
    }

    #[test]
    fn sign_flip_is_caught_per_component() {
        for c in Component::ALL {
            let results = run_checks(1, &CheckSizes::default(), Some(c)).unwrap();
            for r in results {
                assert_eq!(r.passed(), r.component != c, "{r:?}");
            }
        }
    }

    #[test]
    fn suite_is_deterministic() {
        let a = run_suite(0..3, &CheckSizes::default(), None).unwrap();
        let b = run_suite(0..3, &CheckSizes::default(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn component_names_round_trip() {
        for c in Component::ALL {
            assert_eq!(c.to_string().parse::<Component>().unwrap(), c);
        }
        assert!("tree".parse::<Component>().is_err());
    }

    #[test]
    fn rejects_unbalanced_leaf_count() {
        let sizes = CheckSizes {
            leaves: 6,
            ..CheckSizes::default()
        };
        assert!(run_checks(0, &sizes, None).is_err());
    }
}
