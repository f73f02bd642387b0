use crate::error::{Error, Result};
use crate::numerics::Vector;

/// Raw convolutional activations indexed `(channel, y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::arg(format!(
                "feature map needs non-zero dimensions, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Max,
    Average,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SppConfig {
    /// Grid side per pyramid level.
    pub levels: Vec<usize>,
    pub pooling: Pooling,
}

impl Default for SppConfig {
    fn default() -> Self {
        SppConfig {
            levels: vec![1, 2, 4],
            pooling: Pooling::Max,
        }
    }
}

impl SppConfig {
    pub fn output_dim(&self, channels: usize) -> usize {
        channels * self.levels.iter().map(|l| l * l).sum::<usize>()
    }
}

/// Half-open window `[floor(i·n/l), ceil((i+1)·n/l))` for cell `i` of `l`.
fn window(i: usize, n: usize, l: usize) -> (usize, usize) {
    let start = i * n / l;
    let end = ((i + 1) * n).div_ceil(l);
    (start, end)
}

/// Spatial pyramid pooling to a fixed-length vector.
///
/// Layout: levels in configured order, then channels, then grid cells in
/// row-major order. Levels finer than the map are allowed; their windows
/// shrink to single cells and overlap.
pub fn spp_pool(map: &FeatureMap, cfg: &SppConfig) -> Result<Vector> {
    if cfg.levels.is_empty() || cfg.levels.contains(&0) {
        return Err(Error::arg(format!("pyramid levels must be non-empty and >= 1, got {:?}", cfg.levels)));
    }
    let mut out = Vec::with_capacity(cfg.output_dim(map.channels));
    for &level in &cfg.levels {
        for c in 0..map.channels {
            for gy in 0..level {
                let (y0, y1) = window(gy, map.height, level);
                for gx in 0..level {
                    let (x0, x1) = window(gx, map.width, level);
                    let cells = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (y, x)));
                    let value = match cfg.pooling {
                        Pooling::Max => cells.map(|(y, x)| map.get(c, y, x)).fold(f64::NEG_INFINITY, f64::max),
                        Pooling::Average => {
                            let count = ((y1 - y0) * (x1 - x0)) as f64;
                            cells.map(|(y, x)| map.get(c, y, x)).sum::<f64>() / count
                        }
                    };
                    out.push(value);
                }
            }
        }
    }
    Ok(Vector::from(out))
}
