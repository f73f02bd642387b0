//! The trained artefact: encoder, similarity expert and fusion tree, plus a
//! self-describing little-endian binary format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoder::{LstmParams, StackedLstm};
use crate::error::{Error, Result};
use crate::features::Dataset;
use crate::numerics::{Matrix, Rng, Vector};
use crate::ssn::{SsnParams, DEFAULT_FC1_DIM};
use crate::tree::{FusionTree, TreeConfig};

pub const MAGIC: &[u8; 8] = b"ASYMNET\0";
pub const FORMAT_VERSION: u32 = 1;

/// Architecture and initialisation of a fresh model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub depth: usize,
    pub fc1_dim: usize,
    /// LSTM weights are drawn from `U(-s, s)`.
    pub init_scale: f64,
    pub tree: TreeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 256,
            depth: 2,
            fc1_dim: DEFAULT_FC1_DIM,
            init_scale: 0.08,
            tree: TreeConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.depth == 0 || self.fc1_dim == 0 {
            return Err(Error::arg("hidden_dim, depth and fc1_dim must be >= 1"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::arg(format!("init_scale must be finite and >= 0, got {}", self.init_scale)));
        }
        self.tree.validate()
    }
}

/// Where a model came from: the seed and a digest of the configuration
/// that produced it.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_digest: [u8; 32],
}

impl Provenance {
    pub fn digest_hex(&self) -> String {
        self.config_digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

pub fn config_digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: StackedLstm,
    pub ssn: SsnParams,
    pub tree: FusionTree,
    pub category: Option<String>,
    pub provenance: Provenance,
}

impl Model {
    /// LSTM uniform in `±init_scale`, SSN layers Glorot-uniform with zero
    /// biases, gates zero (uniform mixing).
    pub fn init(cfg: &ModelConfig, input_dim: usize, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let encoder = StackedLstm::init(input_dim, cfg.hidden_dim, cfg.depth, cfg.init_scale, &mut rng)?;
        let mut ssn = SsnParams::zeros(cfg.hidden_dim, input_dim, cfg.fc1_dim);
        let fan_in = cfg.hidden_dim + input_dim;
        let a1 = (6.0 / (fan_in + cfg.fc1_dim) as f64).sqrt();
        ssn.w1.as_mut_slice().iter_mut().for_each(|w| *w = rng.uniform_in(-a1, a1));
        let a2 = (6.0 / (cfg.fc1_dim + 1) as f64).sqrt();
        ssn.w2.as_mut_slice().iter_mut().for_each(|w| *w = rng.uniform_in(-a2, a2));
        let tree = FusionTree::new(cfg.tree.clone(), cfg.fc1_dim)?;
        Ok(Model {
            encoder,
            ssn,
            tree,
            category: None,
            provenance: Provenance {
                seed,
                config_digest: [0; 32],
            },
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.hidden_dim()
    }

    pub fn leaf_count(&self) -> usize {
        self.tree.config().leaf_count
    }

    /// Dimension checks against a dataset, naming both sides.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.dim() != self.input_dim() {
            return Err(Error::shape(format!(
                "model expects feature dim {}, dataset has {}",
                self.input_dim(),
                ds.dim()
            )));
        }
        if ds.traj_len() != self.leaf_count() {
            return Err(Error::shape(format!(
                "model tree has {} leaves, dataset trajectories have {} frames",
                self.leaf_count(),
                ds.traj_len()
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.flatten().iter().chain(&self.ssn.flatten()).chain(&self.tree.flatten()).all(|v| v.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u64(self.encoder.depth() as u64);
        for layer in &self.encoder.layers {
            w.u64(layer.input_dim() as u64);
            w.u64(layer.hidden_dim() as u64);
            w.f64s(layer.weights.as_slice());
            w.f64s(&layer.bias);
        }
        w.u64(self.ssn.hidden_dim() as u64);
        w.u64(self.ssn.item_dim() as u64);
        w.u64(self.ssn.fc1_dim() as u64);
        w.f64s(&self.ssn.flatten());
        let cfg = self.tree.config();
        w.u64(cfg.leaf_count as u64);
        w.u64(cfg.level_gate_counts.len() as u64);
        for &c in &cfg.level_gate_counts {
            w.u64(c as u64);
        }
        w.0.push(cfg.gate_bias as u8);
        w.f64s(&self.tree.flatten());
        match &self.category {
            Some(c) => {
                w.0.push(1);
                w.u64(c.len() as u64);
                w.0.extend_from_slice(c.as_bytes());
            }
            None => w.0.push(0),
        }
        w.u64(self.provenance.seed);
        w.0.extend_from_slice(&self.provenance.config_digest);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::ModelFormat("not a model file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!("unsupported format version {version}")));
        }
        let depth = r.count()?;
        let mut layers = Vec::with_capacity(depth);
        for _ in 0..depth {
            let input = r.count()?;
            let hidden = r.count()?;
            let weights = Matrix::from_vec(4 * hidden, hidden + input, r.f64s(4 * hidden * (hidden + input))?)?;
            let bias = Vector::from(r.f64s(4 * hidden)?);
            layers.push(LstmParams::from_parts(input, hidden, weights, bias)?);
        }
        let encoder = StackedLstm::new(layers)?;
        let (hidden, item, fc1) = (r.count()?, r.count()?, r.count()?);
        let mut ssn = SsnParams::zeros(hidden, item, fc1);
        ssn.assign(&r.f64s(fc1 * (hidden + item) + 2 * fc1 + 1)?);
        let leaf_count = r.count()?;
        let levels = r.count()?;
        let level_gate_counts = (0..levels).map(|_| r.count()).collect::<Result<Vec<_>>>()?;
        let gate_bias = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::ModelFormat(format!("bad gate-bias flag {b}"))),
        };
        let tree_cfg = TreeConfig {
            leaf_count,
            level_gate_counts,
            gate_bias,
        };
        let mut tree = FusionTree::new(tree_cfg, fc1)?;
        tree.assign(&r.f64s(tree.config().gate_count() * (fc1 + 1))?);
        let category = match r.take(1)?[0] {
            0 => None,
            1 => {
                let len = r.count()?;
                let raw = r.take(len)?;
                Some(String::from_utf8(raw.to_vec()).map_err(|_| Error::ModelFormat("category is not UTF-8".into()))?)
            }
            b => return Err(Error::ModelFormat(format!("bad category flag {b}"))),
        };
        let seed = r.u64()?;
        let mut config_digest = [0u8; 32];
        config_digest.copy_from_slice(r.take(32)?);
        if r.pos != bytes.len() {
            return Err(Error::ModelFormat(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let model = Model {
            encoder,
            ssn,
            tree,
            category,
            provenance: Provenance { seed, config_digest },
        };
        if model.encoder.hidden_dim() != hidden || model.encoder.input_dim() != item {
            return Err(Error::ModelFormat("encoder and SSN dimensions disagree".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        Model::from_bytes(&fs::read(path)?)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::ModelFormat(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A size field, bounded by what the rest of the file could hold.
    fn count(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::ModelFormat(format!("implausible size {v}")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::ModelFormat("size overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
