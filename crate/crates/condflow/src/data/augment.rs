//! Training-time sample augmentation.
//!
//! Exactly eight families: small rotations, horizontal flips, Gaussian
//! blur, contrast scaling, and salt-and-pepper / Gaussian / Poisson /
//! speckle noise. Geometric steps transform the ground truths in lockstep
//! with the image (nearest-neighbor for depth and labels, bilinear for
//! rgb); photometric steps touch rgb only. Pixels rotated in from outside
//! the frame get depth 0 (no measurement) and label [`IGNORE_LABEL`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::DataError;
use crate::params::param_rng;
use crate::tensor::Tensor;

use super::{LabelMap, Sample, IGNORE_LABEL};

/// Largest rotation magnitude any pipeline may carry, in degrees.
pub const MAX_ROTATE_DEG: f64 = 5.0;

/// One augmentation step with its magnitude.
#[derive(Clone, Debug, PartialEq)]
pub enum Aug {
    /// Rotation about the image center by `degrees` in [-5, 5].
    Rotate { degrees: f64 },
    FlipH,
    /// Gaussian blur with the given standard deviation in pixels.
    Blur { sigma: f64 },
    /// Linear contrast around mid-gray: `(x - 0.5) * factor + 0.5`.
    Contrast { factor: f64 },
    /// Fraction `amount` of pixels forced to 0 or 1, half each.
    SaltPepper { amount: f64 },
    /// Additive zero-mean Gaussian noise.
    GaussianNoise { sigma: f64 },
    /// Shot noise: intensities resampled as `Poisson(x * peak) / peak`;
    /// smaller peaks mean noisier images.
    PoissonNoise { peak: f64 },
    /// Multiplicative noise `x * (1 + n)` with `n ~ N(0, sigma)`.
    Speckle { sigma: f64 },
}

/// An ordered list of steps applied left to right.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pipeline {
    pub steps: Vec<Aug>,
}

/// Magnitude ranges the pipeline sampler draws from. Defaults keep the
/// image recognizable: blur under 1.2 px, contrast within 30%, noise
/// amplitudes a few percent of full scale.
#[derive(Clone, Debug)]
pub struct AugmentRanges {
    pub rotate_deg: f64,
    pub blur_sigma: (f64, f64),
    pub contrast: (f64, f64),
    pub salt_amount: (f64, f64),
    pub gauss_sigma: (f64, f64),
    pub poisson_peak: (f64, f64),
    pub speckle_sigma: (f64, f64),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            rotate_deg: MAX_ROTATE_DEG,
            blur_sigma: (0.5, 1.2),
            contrast: (0.7, 1.3),
            salt_amount: (0.002, 0.01),
            gauss_sigma: (0.01, 0.05),
            poisson_peak: (60.0, 255.0),
            speckle_sigma: (0.05, 0.15),
        }
    }
}

/// Sample a pipeline: each geometric/photometric family joins with
/// probability 1/2 (blur and contrast 3/10), and at most one noise family
/// is appended. Deterministic in `seed`.
pub fn draw_pipeline(seed: u64, ranges: &AugmentRanges) -> Pipeline {
    let mut rng = param_rng(seed, "augment.pipeline");
    let mut steps = Vec::new();
    if rng.random::<f64>() < 0.5 {
        let r = ranges.rotate_deg.min(MAX_ROTATE_DEG);
        steps.push(Aug::Rotate {
            degrees: rng.random_range(-r..=r),
        });
    }
    if rng.random::<f64>() < 0.5 {
        steps.push(Aug::FlipH);
    }
    if rng.random::<f64>() < 0.3 {
        steps.push(Aug::Blur {
            sigma: rng.random_range(ranges.blur_sigma.0..=ranges.blur_sigma.1),
        });
    }
    if rng.random::<f64>() < 0.3 {
        steps.push(Aug::Contrast {
            factor: rng.random_range(ranges.contrast.0..=ranges.contrast.1),
        });
    }
    match rng.random_range(0..5u32) {
        1 => steps.push(Aug::SaltPepper {
            amount: rng.random_range(ranges.salt_amount.0..=ranges.salt_amount.1),
        }),
        2 => steps.push(Aug::GaussianNoise {
            sigma: rng.random_range(ranges.gauss_sigma.0..=ranges.gauss_sigma.1),
        }),
        3 => steps.push(Aug::PoissonNoise {
            peak: rng.random_range(ranges.poisson_peak.0..=ranges.poisson_peak.1),
        }),
        4 => steps.push(Aug::Speckle {
            sigma: rng.random_range(ranges.speckle_sigma.0..=ranges.speckle_sigma.1),
        }),
        _ => {}
    }
    Pipeline { steps }
}

/// Draw a pipeline from `seed` and apply it; the usual entry point for
/// training loops.
pub fn augment(sample: &Sample, seed: u64) -> Result<Sample, DataError> {
    apply_pipeline(sample, &draw_pipeline(seed, &AugmentRanges::default()), seed)
}

/// Apply `pipeline` to a sample. Noise draws come from `noise_seed`, so
/// the same (sample, pipeline, seed) triple always produces the same
/// output.
pub fn apply_pipeline(
    sample: &Sample,
    pipeline: &Pipeline,
    noise_seed: u64,
) -> Result<Sample, DataError> {
    let (h, w) = sample.hw();
    let mut rgb = sample.rgb.data().to_vec();
    let mut depth = sample.depth_gt.as_ref().map(|d| d.data().to_vec());
    let mut labels = sample.labels_gt.as_ref().map(|l| l.data.clone());
    let mut rng = param_rng(noise_seed, "augment.noise");

    for step in &pipeline.steps {
        match *step {
            Aug::Rotate { degrees } => {
                if !(-MAX_ROTATE_DEG..=MAX_ROTATE_DEG).contains(&degrees) {
                    return Err(DataError::Contract(format!(
                        "rotation of {degrees} degrees outside +-{MAX_ROTATE_DEG}"
                    )));
                }
                rotate(&mut rgb, depth.as_deref_mut(), labels.as_deref_mut(), h, w, degrees);
            }
            Aug::FlipH => {
                flip_h(&mut rgb, 3, h, w);
                if let Some(d) = depth.as_deref_mut() {
                    flip_h(d, 1, h, w);
                }
                if let Some(l) = labels.as_deref_mut() {
                    flip_h(l, 1, h, w);
                }
            }
            Aug::Blur { sigma } => blur(&mut rgb, h, w, sigma),
            Aug::Contrast { factor } => {
                for v in &mut rgb {
                    *v = ((*v - 0.5) * factor as f32 + 0.5).clamp(0.0, 1.0);
                }
            }
            Aug::SaltPepper { amount } => {
                for px in 0..h * w {
                    if rng.random::<f64>() < amount {
                        let v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                        for c in 0..3 {
                            rgb[c * h * w + px] = v;
                        }
                    }
                }
            }
            Aug::GaussianNoise { sigma } => {
                let dist = Normal::new(0.0, sigma).map_err(|e| {
                    DataError::Contract(format!("gaussian noise sigma {sigma}: {e}"))
                })?;
                for v in &mut rgb {
                    *v = (*v + dist.sample(&mut rng) as f32).clamp(0.0, 1.0);
                }
            }
            Aug::PoissonNoise { peak } => {
                if !(peak > 0.0) {
                    return Err(DataError::Contract(format!("poisson peak {peak} must be > 0")));
                }
                poisson_noise(&mut rgb, peak, &mut rng);
            }
            Aug::Speckle { sigma } => {
                let dist = Normal::new(0.0, sigma).map_err(|e| {
                    DataError::Contract(format!("speckle sigma {sigma}: {e}"))
                })?;
                for v in &mut rgb {
                    *v = (*v * (1.0 + dist.sample(&mut rng)) as f32).clamp(0.0, 1.0);
                }
            }
        }
    }

    Ok(Sample {
        id: sample.id.clone(),
        rgb: Tensor::from_vec(vec![3, h, w], rgb)?,
        depth_gt: match depth {
            Some(d) => Some(Tensor::from_vec(vec![1, h, w], d)?),
            None => None,
        },
        labels_gt: match labels {
            Some(l) => Some(LabelMap::new(h, w, l)?),
            None => None,
        },
        origin: sample.origin,
    })
}

fn flip_h<T: Copy>(data: &mut [T], channels: usize, h: usize, w: usize) {
    for c in 0..channels {
        for y in 0..h {
            data[(c * h + y) * w..(c * h + y + 1) * w].reverse();
        }
    }
}

/// Rotate all planes about the center. rgb samples bilinearly with
/// clamp-to-edge; ground truths sample nearest-neighbor and fall back to
/// their "unknown" value outside the source frame.
fn rotate(
    rgb: &mut [f32],
    depth: Option<&mut [f32]>,
    labels: Option<&mut [u8]>,
    h: usize,
    w: usize,
    degrees: f64,
) {
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let src = |y: usize, x: usize| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        (cos * dy - sin * dx + cy, sin * dy + cos * dx + cx)
    };

    let rgb_in = rgb.to_vec();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            for c in 0..3 {
                rgb[(c * h + y) * w + x] = bilinear(&rgb_in[c * h * w..(c + 1) * h * w], h, w, sy, sx);
            }
        }
    }
    if let Some(d) = depth {
        let d_in = d.to_vec();
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x);
                d[y * w + x] = match nearest(h, w, sy, sx) {
                    Some(i) => d_in[i],
                    None => 0.0,
                };
            }
        }
    }
    if let Some(l) = labels {
        let l_in = l.to_vec();
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x);
                l[y * w + x] = match nearest(h, w, sy, sx) {
                    Some(i) => l_in[i],
                    None => IGNORE_LABEL,
                };
            }
        }
    }
}

fn nearest(h: usize, w: usize, sy: f64, sx: f64) -> Option<usize> {
    let ry = sy.round();
    let rx = sx.round();
    if ry < 0.0 || rx < 0.0 || ry > (h - 1) as f64 || rx > (w - 1) as f64 {
        None
    } else {
        Some(ry as usize * w + rx as usize)
    }
}

fn bilinear(plane: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> f32 {
    let clamp_y = |v: i64| v.clamp(0, h as i64 - 1) as usize;
    let clamp_x = |v: i64| v.clamp(0, w as i64 - 1) as usize;
    let y0 = sy.floor();
    let x0 = sx.floor();
    let ty = (sy - y0) as f32;
    let tx = (sx - x0) as f32;
    let (y0, y1) = (clamp_y(y0 as i64), clamp_y(y0 as i64 + 1));
    let (x0, x1) = (clamp_x(x0 as i64), clamp_x(x0 as i64 + 1));
    let a = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
    let b = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
    a * (1.0 - ty) + b * ty
}

fn blur(rgb: &mut [f32], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|&k| (k / norm) as f32).collect();

    let mut tmp = vec![0f32; h * w];
    for c in 0..3 {
        let plane = &mut rgb[c * h * w..(c + 1) * h * w];
        // horizontal pass into tmp, clamp-to-edge
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sx = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    acc += plane[y * w + sx] * kv;
                }
                tmp[y * w + x] = acc;
            }
        }
        // vertical pass back into the plane
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sy = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    acc += tmp[sy * w + x] * kv;
                }
                plane[y * w + x] = acc;
            }
        }
    }
}

fn poisson_noise(rgb: &mut [f32], peak: f64, rng: &mut ChaCha8Rng) {
    for v in rgb {
        let lambda = (*v as f64) * peak;
        if lambda <= 0.0 {
            *v = 0.0;
            continue;
        }
        let count = Poisson::new(lambda)
            .expect("lambda > 0")
            .sample(rng);
        *v = ((count / peak) as f32).clamp(0.0, 1.0);
    }
}
