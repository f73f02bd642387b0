//! Line-oriented dataset files.
//!
//! ```text
//! #dim 4
//! #T 32
//! G <id> <v1> ... <vD>                          gallery item
//! C <gallery-id> <category>                     gallery item category (optional)
//! T <id> <category> <frame-index> <v1> ... <vD> one trajectory frame
//! P <trajectory-id> <gallery-id>                positive pair
//! ```
//!
//! Other lines starting with `#` are comments. Values are written with 17
//! significant digits, which round-trips every `f64` exactly. Trajectories
//! whose frame count differs from `#T` are unified to that length on load.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{normalize_trajectory_length, Dataset, FeatureVector, Trajectory};
use crate::error::{DatasetError, Error, Result};
use crate::numerics::Vector;

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let wrap = |source| Error::Dataset {
        path: path.to_path_buf(),
        source,
    };
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            wrap(DatasetError::Missing)
        } else {
            wrap(DatasetError::Io(e))
        }
    })?;
    parse_dataset(&text).map_err(wrap)
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_dataset(ds))?;
    Ok(())
}

fn push_values(out: &mut String, values: &[f64]) {
    for v in values {
        // `{:.16e}` is 17 significant digits.
        let _ = write!(out, " {v:.16e}");
    }
    out.push('\n');
}

pub fn format_dataset(ds: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "#dim {}", ds.dim());
    let _ = writeln!(out, "#T {}", ds.traj_len());
    for item in ds.gallery() {
        let _ = write!(out, "G {}", item.id);
        push_values(&mut out, &item.values);
    }
    for (id, category) in ds.gallery_categories() {
        let _ = writeln!(out, "C {id} {category}");
    }
    for traj in ds.trajectories() {
        for (t, frame) in traj.frames.iter().enumerate() {
            let _ = write!(out, "T {} {} {t}", traj.id, traj.category);
            push_values(&mut out, frame);
        }
    }
    for (traj, items) in ds.positives() {
        for g in items {
            let _ = writeln!(out, "P {traj} {g}");
        }
    }
    out
}

struct PendingTrajectory {
    category: String,
    first_line: usize,
    frames: BTreeMap<usize, Vector>,
}

fn syntax(line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Syntax {
        line,
        message: message.into(),
    }
}

fn parse_values(line: usize, fields: &[&str], dim: usize) -> Result<Vector, DatasetError> {
    if fields.len() != dim {
        return Err(DatasetError::Dimension {
            line,
            expected: dim,
            found: fields.len(),
        });
    }
    fields
        .iter()
        .map(|f| match f.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(syntax(line, format!("invalid value {f:?}"))),
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Vector::from)
}

pub fn parse_dataset(text: &str) -> Result<Dataset, DatasetError> {
    let mut dim: Option<usize> = None;
    let mut traj_len: Option<usize> = None;
    let mut gallery = Vec::new();
    let mut gallery_categories = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut pending: BTreeMap<String, PendingTrajectory> = BTreeMap::new();
    let mut positives: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        let Some(&head) = fields.first() else { continue };

        if let Some(header) = head.strip_prefix('#') {
            let target = match header {
                "dim" => &mut dim,
                "T" => &mut traj_len,
                _ => continue,
            };
            let value = fields
                .get(1)
                .and_then(|v| v.parse::<usize>().ok())
                .filter(|&v| v > 0)
                .ok_or_else(|| syntax(line, format!("header #{header} needs a positive integer")))?;
            if target.replace(value).is_some() {
                return Err(syntax(line, format!("duplicate header #{header}")));
            }
            continue;
        }

        let need_dim = || dim.ok_or_else(|| syntax(line, "data row before #dim header"));
        match head {
            "G" => {
                let d = need_dim()?;
                let id = fields.get(1).ok_or_else(|| syntax(line, "gallery row without id"))?;
                let values = parse_values(line, &fields[2..], d)?;
                gallery.push(FeatureVector::new(*id, values));
            }
            "C" => {
                if fields.len() != 3 {
                    return Err(syntax(line, "category row needs <gallery-id> <category>"));
                }
                if gallery_categories
                    .insert(fields[1].to_string(), fields[2].to_string())
                    .is_some()
                {
                    return Err(syntax(line, format!("duplicate category for {}", fields[1])));
                }
            }
            "T" => {
                let d = need_dim()?;
                if fields.len() < 4 {
                    return Err(syntax(line, "trajectory row needs <id> <category> <frame-index>"));
                }
                let (id, category) = (fields[1], fields[2]);
                let frame: usize = fields[3]
                    .parse()
                    .map_err(|_| syntax(line, format!("invalid frame index {:?}", fields[3])))?;
                let values = parse_values(line, &fields[4..], d)?;
                let entry = pending.entry(id.to_string()).or_insert_with(|| {
                    order.push(id.to_string());
                    PendingTrajectory {
                        category: category.to_string(),
                        first_line: line,
                        frames: BTreeMap::new(),
                    }
                });
                if entry.category != category {
                    return Err(syntax(
                        line,
                        format!("trajectory {id} changes category from {} to {category}", entry.category),
                    ));
                }
                if entry.frames.insert(frame, values).is_some() {
                    return Err(syntax(line, format!("duplicate frame {frame} for trajectory {id}")));
                }
            }
            "P" => {
                if fields.len() != 3 {
                    return Err(syntax(line, "pair row needs <trajectory-id> <gallery-id>"));
                }
                positives
                    .entry(fields[1].to_string())
                    .or_default()
                    .insert(fields[2].to_string());
            }
            other => return Err(syntax(line, format!("unknown row kind {other:?}"))),
        }
    }

    let dim = dim.ok_or_else(|| syntax(0, "missing #dim header"))?;
    let traj_len = traj_len.ok_or_else(|| syntax(0, "missing #T header"))?;

    let mut trajectories = Vec::with_capacity(order.len());
    for id in order {
        let p = pending.remove(&id).expect("pending entry for every ordered id");
        let count = p.frames.len();
        if p.frames.keys().copied().ne(0..count) {
            return Err(syntax(
                p.first_line,
                format!("trajectory {id} frame indices are not contiguous from 0"),
            ));
        }
        let frames: Vec<Vector> = p.frames.into_values().collect();
        let frames = normalize_trajectory_length(&frames, traj_len)
            .map_err(|e| syntax(p.first_line, e.to_string()))?;
        trajectories.push(Trajectory {
            id,
            category: p.category,
            frames,
        });
    }

    Dataset::new(dim, traj_len, trajectories, gallery, gallery_categories, positives)
}
