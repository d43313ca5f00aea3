//! Procedural scene renderer for the synthetic corpora.
//!
//! Every image is a textured ground plane receding from near (bottom) to
//! far (top) with a handful of upright rectangular objects standing on it.
//! Object size shrinks with distance, nearer objects occlude farther ones,
//! and albedo is attenuated with depth, so metric depth is locally
//! inferable from appearance. Every pixel has a valid depth inside the
//! binnable range; the semantic map covers every pixel with ground as
//! class 0.

use rand::Rng;

use crate::error::DataError;
use crate::params::param_rng;
use crate::tensor::Tensor;

use super::{LabelMap, Origin, Sample};

/// Which ground truths a generated sample keeps.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum GenMode {
    /// Depth map only; origin `depth`.
    DepthOnly,
    /// Label map only; origin `semantic`.
    SemanticOnly,
    /// Both ground truths on one sample, for oracles and paired metrics.
    /// Violates the supervision contract by design; training loaders
    /// reject such samples.
    Full,
}

/// Parameters of the scene distribution. One spec plus a sample index
/// fully determines a scene.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Inclusive range for the number of objects per scene.
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object distance range; must sit inside the ground span so objects
    /// can stand on a visible ground row.
    pub object_depth_min: f64,
    pub object_depth_max: f64,
    /// Ground plane depth at the bottom and top image rows, in (0, 80).
    pub ground_near: f64,
    pub ground_far: f64,
    /// Palette size including ground class 0; at most 19.
    pub class_count: usize,
}

impl SceneSpec {
    /// Scenes matched to the quarter-scale network preset.
    pub fn tiny(seed: u64) -> Self {
        Self {
            seed,
            height: 32,
            width: 64,
            min_objects: 2,
            max_objects: 5,
            object_depth_min: 2.5,
            object_depth_max: 70.0,
            ground_near: 2.0,
            ground_far: 75.0,
            class_count: 19,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut faults = Vec::new();
        if self.height < 4 || self.width < 4 {
            faults.push(format!("geometry {}x{} below 4x4", self.height, self.width));
        }
        if self.class_count == 0 {
            faults.push("class palette is empty".into());
        }
        if self.class_count > 19 {
            faults.push(format!("palette of {} classes exceeds 19", self.class_count));
        }
        if self.min_objects > self.max_objects {
            faults.push(format!(
                "object count range [{}, {}] is empty",
                self.min_objects, self.max_objects
            ));
        }
        if !(self.ground_near >= 1.0
            && self.ground_near < self.ground_far
            && self.ground_far < 80.0)
        {
            faults.push(format!(
                "ground span [{}, {}] must be ordered inside [1, 80)",
                self.ground_near, self.ground_far
            ));
        }
        if !(self.object_depth_min >= self.ground_near
            && self.object_depth_min <= self.object_depth_max
            && self.object_depth_max <= self.ground_far)
        {
            faults.push(format!(
                "object depth range [{}, {}] must sit inside ground span [{}, {}]",
                self.object_depth_min, self.object_depth_max, self.ground_near, self.ground_far
            ));
        }
        if faults.is_empty() {
            Ok(())
        } else {
            Err(DataError::SceneSpec(faults.join("; ")))
        }
    }
}

/// Depth of the unoccluded ground at image row `y`: inverse depth is
/// linear in the row, far at the top, near at the bottom.
fn ground_depth(spec: &SceneSpec, y: usize) -> f64 {
    let t = y as f64 / (spec.height - 1) as f64;
    1.0 / ((1.0 - t) / spec.ground_far + t / spec.ground_near)
}

/// Row whose ground depth equals `d`; inverse of [`ground_depth`].
fn ground_row(spec: &SceneSpec, d: f64) -> usize {
    let t = (1.0 / d - 1.0 / spec.ground_far) / (1.0 / spec.ground_near - 1.0 / spec.ground_far);
    let y = (t * (spec.height - 1) as f64).round();
    (y.max(0.0) as usize).min(spec.height - 1)
}

/// Albedo multiplier encoding distance: bright up close, dim far away.
fn shade(d: f64) -> f64 {
    0.35 + 0.6 * (1.0 - (d - 1.0) / 79.0)
}

/// Palette color for a class id, hue-stepped by the golden angle so
/// neighbouring ids are far apart in hue.
fn class_color(class: u8) -> [f64; 3] {
    let hue = (class as f64 * 0.618_033_988_749_895).fract();
    hsv_to_rgb(hue, 0.55, 0.9)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Low-amplitude deterministic texture in [-0.03, 0.03].
fn texture(seed: u64, y: usize, x: usize, c: usize) -> f64 {
    let mut z = seed
        ^ (y as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (x as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
        ^ (c as u64).wrapping_mul(0x1656_67b1_9e37_79f9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z as f64 / u64::MAX as f64 - 0.5) * 0.06
}

struct Object {
    depth: f64,
    class: u8,
    row0: usize,
    row1: usize,
    col0: usize,
    col1: usize,
}

/// Render `count` scenes drawn from `spec`. The output is a pure function
/// of (spec, count, mode); sample ids embed the seed, so corpora generated
/// from different seeds never collide.
pub fn generate_dataset(
    spec: &SceneSpec,
    count: usize,
    mode: GenMode,
) -> Result<Vec<Sample>, DataError> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = param_rng(spec.seed, &format!("scene-{i}"));
        let scene_seed: u64 = rng.random();

        // ground pass
        let mut depth = vec![0f64; h * w];
        let mut labels = vec![0u8; h * w];
        for y in 0..h {
            let d = ground_depth(spec, y);
            for x in 0..w {
                depth[y * w + x] = d;
            }
        }

        // objects, far first; the z-test keeps occlusion consistent even
        // where rectangles overlap
        let n = rng.random_range(spec.min_objects..=spec.max_objects);
        let mut objects = Vec::with_capacity(n);
        for _ in 0..n {
            let d = rng.random_range(spec.object_depth_min..=spec.object_depth_max);
            let class = if spec.class_count > 1 {
                rng.random_range(1..spec.class_count) as u8
            } else {
                0
            };
            let base = ground_row(spec, d);
            let apparent = (h as f64 * spec.object_depth_min / d).round().max(2.0) as usize;
            let oh = apparent.min(base + 1);
            let aspect = rng.random_range(0.5..=1.4);
            let ow = ((oh as f64 * aspect).round().max(2.0) as usize).min(w);
            let cx = rng.random_range(0..w);
            let col0 = cx.saturating_sub(ow / 2);
            let col1 = (col0 + ow).min(w);
            objects.push(Object {
                depth: d,
                class,
                row0: base + 1 - oh,
                row1: base + 1,
                col0,
                col1,
            });
        }
        objects.sort_by(|a, b| b.depth.total_cmp(&a.depth));
        for o in &objects {
            for y in o.row0..o.row1 {
                for x in o.col0..o.col1 {
                    let px = y * w + x;
                    if o.depth <= depth[px] {
                        depth[px] = o.depth;
                        labels[px] = o.class;
                    }
                }
            }
        }

        // appearance pass: palette color, texture, depth attenuation
        let mut rgb = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let px = y * w + x;
                let base = class_color(labels[px]);
                let s = shade(depth[px]);
                for c in 0..3 {
                    let v = (base[c] + texture(scene_seed, y, x, c)) * s;
                    rgb[c * h * w + px] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }

        let depth_t = Tensor::from_vec(
            vec![1, h, w],
            depth.iter().map(|&d| d as f32).collect(),
        )?;
        let rgb_t = Tensor::from_vec(vec![3, h, w], rgb)?;
        let (depth_gt, labels_gt, origin) = match mode {
            GenMode::DepthOnly => (Some(depth_t), None, Origin::Depth),
            GenMode::SemanticOnly => (None, Some(LabelMap::new(h, w, labels)?), Origin::Semantic),
            GenMode::Full => (
                Some(depth_t),
                Some(LabelMap::new(h, w, labels)?),
                Origin::Depth,
            ),
        };
        out.push(Sample {
            id: format!("s{:016x}-{i:05}", spec.seed),
            rgb: rgb_t,
            depth_gt,
            labels_gt,
            origin,
        });
    }
    Ok(out)
}
