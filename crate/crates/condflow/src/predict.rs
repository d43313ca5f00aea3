//! Inference: deterministic forward pass decoded to metric depth. Phase-1
//! networks report the posterior-expected bin center; phase-2 networks
//! read the regression head directly.

use crate::data::DepthBinning;
use crate::error::{DataError, TensorError};
use crate::network::{Network, Phase};
use crate::tensor::Tensor;

/// Numerically stabilized per-pixel softmax over the channel axis of
/// NxCxHxW logits.
pub fn channel_softmax(logits: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
    let (n, c, h, w) = logits.dims4()?;
    let plane = h * w;
    let x = logits.data();
    let mut out = vec![0f32; x.len()];
    for ni in 0..n {
        for px in 0..plane {
            let at = |k: usize| x[(ni * c + k) * plane + px];
            let mut max = f32::NEG_INFINITY;
            for k in 0..c {
                max = max.max(at(k));
            }
            let mut sum = 0f64;
            for k in 0..c {
                sum += ((at(k) - max) as f64).exp();
            }
            for k in 0..c {
                out[(ni * c + k) * plane + px] = (((at(k) - max) as f64).exp() / sum) as f32;
            }
        }
    }
    Tensor::from_vec(logits.shape().to_vec(), out)
}

/// Predict metric depth [1,H,W] for one rgb image [3,H,W] matching the
/// network's input geometry.
pub fn predict_depth(net: &Network<f32>, rgb: &Tensor<f32>) -> Result<Tensor<f32>, DataError> {
    let (c, h, w) = rgb.dims3()?;
    let input = rgb.reshape(vec![1, c, h, w])?;
    let out = net.forward_eval(&input)?;
    match net.phase {
        Phase::Two => {
            let reg = out.depth_reg.expect("phase-2 eval exposes the regression head");
            Ok(reg.reshape(vec![1, h, w])?)
        }
        Phase::One => {
            let logits = out.depth_logits.expect("phase-1 eval exposes depth logits");
            let posterior = channel_softmax(&logits)?;
            let binning = DepthBinning {
                n_bins: net.config.depth_classes,
                ..DepthBinning::default()
            };
            let depth = binning.bins_to_depth_expectation(&posterior)?;
            Ok(depth.reshape(vec![1, h, w])?)
        }
    }
}
