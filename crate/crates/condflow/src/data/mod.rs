//! Datasets: synthetic scene generation, directory ingestion, depth
//! discretization, smoothing, and augmentation.
//!
//! The two training corpora are heterogeneous: a sample carries either a
//! metric depth map or a class-label map, never both, and its origin says
//! which. `Full` generation mode (both ground truths on one sample) exists
//! for test oracles only; the training loaders enforce the pairing.

pub mod augment;
pub mod dataset;
pub mod formats;
pub mod l0;
pub mod scene;

use crate::error::DataError;
use crate::tensor::Tensor;

/// Label value that loss masks skip: produced by geometry augmentation for
/// pixels rotated in from outside the image.
pub const IGNORE_LABEL: u8 = 255;

/// Which corpus a sample belongs to, and therefore which head trains on it.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    Depth,
    Semantic,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Depth => "depth",
            Origin::Semantic => "semantic",
        }
    }

    /// `None` for anything but the two manifest spellings; the caller names
    /// the offending file in its own error.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "depth" => Some(Origin::Depth),
            "semantic" => Some(Origin::Semantic),
            _ => None,
        }
    }
}

/// Dense class-index map.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self, DataError> {
        if data.len() != h * w {
            return Err(DataError::Contract(format!(
                "label map holds {} values for {h}x{w} geometry",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }
}

/// One image with at most one kind of ground truth.
///
/// Depth is metric meters with 0 meaning "no measurement"; rgb is 3xHxW in
/// [0,1]; labels are class ids with [`IGNORE_LABEL`] excluded from losses.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub rgb: Tensor<f32>,
    pub depth_gt: Option<Tensor<f32>>,
    pub labels_gt: Option<LabelMap>,
    pub origin: Origin,
}

impl Sample {
    pub fn hw(&self) -> (usize, usize) {
        let s = self.rgb.shape();
        (s[1], s[2])
    }

    /// The heterogeneous-supervision pairing: a depth-origin sample carries
    /// exactly a depth map, a semantic-origin sample exactly a label map.
    /// Oracle-mode samples carrying both fail this and are rejected by the
    /// training loaders.
    pub fn contract_ok(&self) -> bool {
        match self.origin {
            Origin::Depth => self.depth_gt.is_some() && self.labels_gt.is_none(),
            Origin::Semantic => self.depth_gt.is_none() && self.labels_gt.is_some(),
        }
    }

    pub fn check_contract(&self) -> Result<(), DataError> {
        if self.contract_ok() {
            Ok(())
        } else {
            Err(DataError::Contract(format!(
                "sample {} has origin {} but depth {} and labels {}",
                self.id,
                self.origin.as_str(),
                if self.depth_gt.is_some() { "present" } else { "absent" },
                if self.labels_gt.is_some() { "present" } else { "absent" },
            )))
        }
    }
}

/// Linear discretization of metric depth into class bins over [d_min, d_max).
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct DepthBinning {
    pub n_bins: usize,
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for DepthBinning {
    fn default() -> Self {
        Self {
            n_bins: 24,
            d_min: 1.0,
            d_max: 80.0,
        }
    }
}

impl DepthBinning {
    pub fn width(&self) -> f64 {
        (self.d_max - self.d_min) / self.n_bins as f64
    }

    /// True for depths the binning can represent: finite, measured (> 0),
    /// and below the far limit. Depths in (0, d_min) clamp into bin 0.
    pub fn valid(&self, d: f64) -> bool {
        d.is_finite() && d > 0.0 && d < self.d_max
    }

    /// Bin index by the floor rule; edge values land in the higher bin.
    /// Returns `None` for depths [`Self::valid`] rejects.
    pub fn bin_of(&self, d: f64) -> Option<usize> {
        if !self.valid(d) {
            return None;
        }
        let raw = ((d - self.d_min) * self.n_bins as f64 / (self.d_max - self.d_min)).floor();
        Some((raw.max(0.0) as usize).min(self.n_bins - 1))
    }

    /// Metric center of bin `k`.
    pub fn center(&self, k: usize) -> f64 {
        self.d_min + (k as f64 + 0.5) * (self.d_max - self.d_min) / self.n_bins as f64
    }

    /// Discretize a 1xHxW (or HxW-shaped) depth map. Invalid pixels get
    /// class 0 with a false mask entry.
    pub fn depth_to_bins(&self, depth: &Tensor<f32>) -> (Vec<u32>, Vec<bool>) {
        let mut bins = Vec::with_capacity(depth.numel());
        let mut mask = Vec::with_capacity(depth.numel());
        for &d in depth.data() {
            match self.bin_of(d as f64) {
                Some(k) => {
                    bins.push(k as u32);
                    mask.push(true);
                }
                None => {
                    bins.push(0);
                    mask.push(false);
                }
            }
        }
        (bins, mask)
    }

    /// Decode class indices to bin-center depths.
    pub fn bins_to_depth_center(&self, bins: &[u32]) -> Result<Vec<f32>, DataError> {
        bins.iter()
            .map(|&k| {
                if (k as usize) < self.n_bins {
                    Ok(self.center(k as usize) as f32)
                } else {
                    Err(DataError::Posterior(format!(
                        "class index {k} out of range for {} bins",
                        self.n_bins
                    )))
                }
            })
            .collect()
    }

    /// Decode per-pixel class posteriors (CxHxW or NxCxHxW with C equal to
    /// the bin count) to expected depth. Each pixel's posterior must sum to
    /// 1 within 1e-5.
    pub fn bins_to_depth_expectation(&self, posterior: &Tensor<f32>) -> Result<Tensor<f32>, DataError> {
        let shape = posterior.shape();
        let (n, c, h, w) = match shape.len() {
            3 => (1, shape[0], shape[1], shape[2]),
            4 => (shape[0], shape[1], shape[2], shape[3]),
            _ => {
                return Err(DataError::Posterior(format!(
                    "expected CxHxW or NxCxHxW posteriors, got {shape:?}"
                )))
            }
        };
        if c != self.n_bins {
            return Err(DataError::Posterior(format!(
                "posterior has {c} classes, binning has {}",
                self.n_bins
            )));
        }
        let centers: Vec<f64> = (0..c).map(|k| self.center(k)).collect();
        let p = posterior.data();
        let plane = h * w;
        let mut out = vec![0f32; n * plane];
        for ni in 0..n {
            for px in 0..plane {
                let mut sum = 0f64;
                let mut acc = 0f64;
                for (k, center) in centers.iter().enumerate() {
                    let pv = p[(ni * c + k) * plane + px] as f64;
                    sum += pv;
                    acc += pv * center;
                }
                if (sum - 1.0).abs() > 1e-5 {
                    return Err(DataError::Posterior(format!(
                        "posterior at pixel {px} sums to {sum}, expected 1"
                    )));
                }
                out[ni * plane + px] = acc as f32;
            }
        }
        let out_shape = if shape.len() == 3 {
            vec![1, h, w]
        } else {
            vec![n, 1, h, w]
        };
        Ok(Tensor::from_vec(out_shape, out).expect("expectation shape"))
    }
}
