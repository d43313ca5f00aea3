//! Two-phase training engine.
//!
//! Phase 1 alternates batches from two disjoint corpora; the batch's
//! origin decides which branch joins the shared trunk in the forward pass,
//! so gradients and optimizer state of the inactive branch cannot move.
//! Phase 2 fine-tunes the whole depth path (trunk, classifier, regression
//! stack) with a masked L1 loss in meters.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::checkpoint::{Checkpoint, OptEntry};
use crate::data::{DepthBinning, Origin, Sample, IGNORE_LABEL};
use crate::error::TrainError;
use crate::net::NetworkConfig;
use crate::network::{ForwardPath, Network, Phase};
use crate::params::{derive_stream, param_rng, Parameter};
use crate::tensor::{stack, Tensor};

use rand::Rng;

/// Optimizer and schedule hyperparameters. Defaults follow the training
/// recipe this implements; `iterations` and `seed` are run-specific.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub depth_batch: usize,
    pub semantic_batch: usize,
    pub iterations: u64,
    pub seed: u64,
    /// 1 or 2; checked against the entry point used.
    pub phase: u32,
    /// Save a checkpoint every this many steps (plus the final one).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0003,
            depth_batch: 10,
            semantic_batch: 5,
            iterations: 0,
            seed: 0,
            phase: 1,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let mut faults = Vec::new();
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            faults.push(format!("alpha {} must be finite and > 0", self.alpha));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                faults.push(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            faults.push(format!("weight_decay {} must be finite and >= 0", self.weight_decay));
        }
        if self.depth_batch == 0 || self.semantic_batch == 0 {
            faults.push("batch sizes must be >= 1".into());
        }
        if self.phase != 1 && self.phase != 2 {
            faults.push(format!("phase {} must be 1 or 2", self.phase));
        }
        if self.checkpoint_every == 0 {
            faults.push("checkpoint_every must be >= 1".into());
        }
        if faults.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(faults.join("; ")))
        }
    }
}

/// Per-parameter ADAM moments. `t` counts updates applied to this
/// parameter specifically, so branches stepping at different rates keep
/// honest bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub t: u64,
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
}

/// Bias-corrected ADAM with classic L2-style weight decay folded into the
/// gradient. State is allocated eagerly for every parameter so untouched
/// entries are visible (and provably unchanged) in checkpoints.
#[derive(Clone, Debug)]
pub struct Adam {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(tc: &TrainConfig, params: impl Iterator<Item = (String, Vec<usize>)>) -> Self {
        let states = params
            .map(|(name, shape)| {
                (
                    name,
                    AdamState {
                        t: 0,
                        m: Tensor::zeros(&shape),
                        v: Tensor::zeros(&shape),
                    },
                )
            })
            .collect();
        Self {
            alpha: tc.alpha,
            beta1: tc.beta1,
            beta2: tc.beta2,
            weight_decay: tc.weight_decay,
            eps: 1e-8,
            states,
        }
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }

    pub fn states(&self) -> impl Iterator<Item = (&str, &AdamState)> {
        self.states.iter().map(|(n, s)| (n.as_str(), s))
    }

    /// One ADAM update. The effective gradient is `grad + wd * param`; a
    /// non-finite entry aborts before any state is touched.
    pub fn update(&mut self, param: &mut Parameter<f32>, grad: &Tensor<f32>) -> Result<(), TrainError> {
        let state = self
            .states
            .get_mut(&param.name)
            .ok_or_else(|| TrainError::Config(format!("no optimizer state for parameter {}", param.name)))?;
        if grad.shape() != param.value.shape() {
            return Err(TrainError::Config(format!(
                "gradient shape {:?} does not match parameter {} shape {:?}",
                grad.shape(),
                param.name,
                param.value.shape()
            )));
        }
        let wd = self.weight_decay as f32;
        let g: Vec<f32> = grad
            .data()
            .iter()
            .zip(param.value.data())
            .map(|(&dg, &p)| dg + wd * p)
            .collect();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient(param.name.clone()));
        }

        state.t += 1;
        let bc1 = (1.0 - self.beta1.powi(state.t as i32)) as f32;
        let bc2 = (1.0 - self.beta2.powi(state.t as i32)) as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let alpha = self.alpha as f32;
        let eps = self.eps as f32;

        let n = g.len();
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        let mut p = Vec::with_capacity(n);
        for i in 0..n {
            let mi = b1 * state.m.data()[i] + (1.0 - b1) * g[i];
            let vi = b2 * state.v.data()[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            m.push(mi);
            v.push(vi);
            p.push(param.value.data()[i] - alpha * m_hat / (v_hat.sqrt() + eps));
        }
        let shape = param.value.shape().to_vec();
        state.m = Tensor::from_vec(shape.clone(), m)?;
        state.v = Tensor::from_vec(shape.clone(), v)?;
        param.value = Tensor::from_vec(shape, p)?;
        Ok(())
    }

    /// Optimizer table for checkpoints, name-sorted.
    pub fn to_entries(&self) -> Vec<OptEntry> {
        self.states
            .iter()
            .map(|(name, s)| OptEntry {
                name: name.clone(),
                t: s.t,
                m: s.m.clone(),
                v: s.v.clone(),
            })
            .collect()
    }

    /// Rebuild from a checkpoint table; every current parameter must have
    /// an entry of the right shape.
    pub fn from_entries(
        tc: &TrainConfig,
        params: impl Iterator<Item = (String, Vec<usize>)>,
        entries: &[OptEntry],
    ) -> Result<Self, TrainError> {
        let by_name: BTreeMap<&str, &OptEntry> =
            entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut states = BTreeMap::new();
        for (name, shape) in params {
            let e = by_name.get(name.as_str()).ok_or_else(|| {
                TrainError::Config(format!("checkpoint has no optimizer state for {name}"))
            })?;
            if e.m.shape() != shape.as_slice() || e.v.shape() != shape.as_slice() {
                return Err(TrainError::Config(format!(
                    "optimizer state for {name} has shape {:?}, parameter is {:?}",
                    e.m.shape(),
                    shape
                )));
            }
            states.insert(
                name,
                AdamState {
                    t: e.t,
                    m: e.m.clone(),
                    v: e.v.clone(),
                },
            );
        }
        Ok(Self {
            alpha: tc.alpha,
            beta1: tc.beta1,
            beta2: tc.beta2,
            weight_decay: tc.weight_decay,
            eps: 1e-8,
            states,
        })
    }
}

/// What a batch supervises.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BatchKind {
    /// Phase 1 depth batches: cross-entropy on binned depth.
    DepthBins,
    /// Phase 1 semantic batches: cross-entropy on class labels.
    SemanticLabels,
    /// Phase 2 batches: L1 in meters on the regression head.
    DepthMeters,
}

impl BatchKind {
    fn origin(self) -> Origin {
        match self {
            BatchKind::DepthBins | BatchKind::DepthMeters => Origin::Depth,
            BatchKind::SemanticLabels => Origin::Semantic,
        }
    }
}

/// A stacked, target-encoded, origin-homogeneous batch.
pub struct Batch {
    pub kind: BatchKind,
    pub rgb: Tensor<f32>,
    /// Class targets and valid mask for the two cross-entropy kinds.
    pub classes: Option<(Arc<Vec<u32>>, Arc<Vec<bool>>)>,
    /// Metric target and valid mask for the regression kind.
    pub meters: Option<(Tensor<f32>, Arc<Vec<bool>>)>,
}

/// Stack samples into a batch. Every sample must carry the ground truth
/// its origin promises and match the batch kind's origin.
pub fn build_batch(
    samples: &[&Sample],
    kind: BatchKind,
    binning: &DepthBinning,
) -> Result<Batch, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset(match kind.origin() {
            Origin::Depth => "depth",
            Origin::Semantic => "semantic",
        }));
    }
    let expected = kind.origin();
    for s in samples {
        if s.origin != expected {
            return Err(TrainError::OriginMismatch {
                expected: expected.as_str(),
                found: s.origin.as_str(),
                id: s.id.clone(),
            });
        }
        s.check_contract().map_err(|e| TrainError::BadSample {
            id: s.id.clone(),
            detail: e.to_string(),
        })?;
    }
    let mixed = samples
        .windows(2)
        .find(|w| w[0].origin != w[1].origin);
    if let Some(w) = mixed {
        return Err(TrainError::MixedOrigin(format!(
            "{} is {}, {} is {}",
            w[0].id,
            w[0].origin.as_str(),
            w[1].id,
            w[1].origin.as_str()
        )));
    }

    let rgb = stack(&samples.iter().map(|s| s.rgb.clone()).collect::<Vec<_>>())?;
    let mut batch = Batch {
        kind,
        rgb,
        classes: None,
        meters: None,
    };
    match kind {
        BatchKind::DepthBins => {
            let mut targets = Vec::new();
            let mut mask = Vec::new();
            for s in samples {
                let depth = s.depth_gt.as_ref().expect("contract checked");
                let (b, m) = binning.depth_to_bins(depth);
                targets.extend(b);
                mask.extend(m);
            }
            batch.classes = Some((Arc::new(targets), Arc::new(mask)));
        }
        BatchKind::SemanticLabels => {
            let mut targets = Vec::new();
            let mut mask = Vec::new();
            for s in samples {
                let labels = s.labels_gt.as_ref().expect("contract checked");
                for &l in &labels.data {
                    targets.push(l as u32);
                    mask.push(l != IGNORE_LABEL);
                }
            }
            batch.classes = Some((Arc::new(targets), Arc::new(mask)));
        }
        BatchKind::DepthMeters => {
            let tensors: Vec<Tensor<f32>> = samples
                .iter()
                .map(|s| s.depth_gt.as_ref().expect("contract checked").clone())
                .collect();
            let target = stack(&tensors)?;
            let mask: Vec<bool> = target.data().iter().map(|&d| d.is_finite() && d > 0.0).collect();
            batch.meters = Some((target, Arc::new(mask)));
        }
    }
    Ok(batch)
}

/// One optimization step: forward along the branch the batch origin
/// activates, backward, ADAM on exactly the bound parameters. Returns the
/// batch loss.
pub fn conditional_step(
    net: &mut Network<f32>,
    batch: &Batch,
    adam: &mut Adam,
    step_seed: u64,
) -> Result<f32, TrainError> {
    let path = match (net.phase, batch.kind) {
        (Phase::One, BatchKind::DepthBins) => ForwardPath::Depth,
        (Phase::One, BatchKind::SemanticLabels) => ForwardPath::Semantic,
        (Phase::Two, BatchKind::DepthMeters) => ForwardPath::Regression,
        (phase, kind) => {
            return Err(TrainError::Config(format!(
                "batch kind {kind:?} cannot train a {phase:?} network"
            )))
        }
    };
    let fwd = net.forward_train(&batch.rgb, path, step_seed)?;
    let mut tape = fwd.tape;
    let loss_id = match batch.kind {
        BatchKind::DepthBins => {
            let (targets, mask) = batch.classes.clone().expect("depth-bin batch");
            let logits = fwd.depth_logits.expect("depth path exposes logits");
            tape.softmax_cross_entropy(logits, targets, mask)?
        }
        BatchKind::SemanticLabels => {
            let (targets, mask) = batch.classes.clone().expect("semantic batch");
            let logits = fwd.semantic_logits.expect("semantic path exposes logits");
            tape.softmax_cross_entropy(logits, targets, mask)?
        }
        BatchKind::DepthMeters => {
            let (target, mask) = batch.meters.clone().expect("regression batch");
            let pred = fwd.depth_reg.expect("regression path exposes a head");
            tape.l1_loss(pred, target, mask)?
        }
    };
    let loss = tape.value(loss_id).item();
    let grads = tape.backward(loss_id)?;
    for (name, vid) in &fwd.bindings {
        // every bound leaf feeds the active head by construction
        let grad = grads.get(*vid).expect("bound parameter receives a gradient").clone();
        let param = net
            .params
            .get_mut(name)
            .expect("bindings name existing parameters");
        adam.update(param, &grad)?;
    }
    Ok(loss)
}

/// Phase-2 alias of [`conditional_step`]; the routing machinery is shared,
/// only the loss differs.
pub fn regression_step(
    net: &mut Network<f32>,
    batch: &Batch,
    adam: &mut Adam,
    step_seed: u64,
) -> Result<f32, TrainError> {
    conditional_step(net, batch, adam, step_seed)
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub phase: u32,
    pub origin: Origin,
    pub loss: f32,
}

/// Render the loss log as `step,phase,origin,loss` CSV.
pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut out = String::from("step,phase,origin,loss\n");
    for r in log {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.phase, r.origin.as_str(), r.loss));
    }
    out
}

/// Means of `window`-sized chunks of the loss sequence, for trend checks
/// on training logs.
pub fn windowed_means(log: &[LossRecord], window: usize) -> Vec<f64> {
    log.chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| c.iter().map(|r| r.loss as f64).sum::<f64>() / window as f64)
        .collect()
}

/// Deterministic epoch-reshuffled index stream over one dataset. Epoch e
/// is an independent permutation drawn from (seed, tag, e); when an epoch
/// is exhausted the stream rewraps into the next one, so a batch may
/// straddle an epoch boundary.
pub struct IndexStream {
    seed: u64,
    tag: &'static str,
    n: usize,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
}

impl IndexStream {
    pub fn new(seed: u64, tag: &'static str, n: usize) -> Self {
        let mut s = Self {
            seed,
            tag,
            n,
            epoch: 0,
            pos: 0,
            order: Vec::new(),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut rng = param_rng(self.seed, &format!("{}.epoch{}", self.tag, self.epoch));
        let mut order: Vec<usize> = (0..self.n).collect();
        for i in (1..self.n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        self.order = order;
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.n {
            self.epoch += 1;
            self.pos = 0;
            self.reshuffle();
        }
        let idx = self.order[self.pos];
        self.pos += 1;
        idx
    }

    pub fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k).map(|_| self.next_index()).collect()
    }
}

/// Where training artifacts go and whether to continue a previous run.
#[derive(Default)]
pub struct TrainOptions {
    /// Directory for periodic checkpoints; nothing is written when absent.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from this checkpoint: weights, optimizer moments, and the
    /// step counter pick up where it stopped.
    pub resume: Option<Checkpoint>,
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
    /// Checkpoint entries intentionally not consumed (phase 2 reports the
    /// semantic branch here; empty in phase 1).
    pub unused_checkpoint_entries: Vec<String>,
}

fn echo_config(cfg: &NetworkConfig, tc: &TrainConfig) -> String {
    format!(
        "input = {}x{}; scale = {}; depth_classes = {}; semantic_classes = {}; \
         alpha = {}; beta1 = {}; beta2 = {}; weight_decay = {}; \
         depth_batch = {}; semantic_batch = {}; seed = {}",
        cfg.input_h,
        cfg.input_w,
        cfg.scale,
        cfg.depth_classes,
        cfg.semantic_classes,
        tc.alpha,
        tc.beta1,
        tc.beta2,
        tc.weight_decay,
        tc.depth_batch,
        tc.semantic_batch,
        tc.seed
    )
}

fn make_checkpoint(net: &Network<f32>, adam: &Adam, iteration: u64, echo: String) -> Checkpoint {
    Checkpoint {
        phase: net.phase.as_u32(),
        iteration,
        tensors: net.state_tensors_f32(),
        optimizer: adam.to_entries(),
        config_echo: echo,
    }
}

fn save_periodic(
    dir: &Path,
    phase: u32,
    step: u64,
    ckpt: &Checkpoint,
) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(|e| TrainError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let path = dir.join(format!("phase{phase}-step{step:06}.ckpt"));
    Ok(ckpt.save(&path)?)
}

fn check_corpus(data: &[Sample], expected: Origin, branch: &'static str) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset(branch));
    }
    for s in data {
        if s.origin != expected {
            return Err(TrainError::OriginMismatch {
                expected: expected.as_str(),
                found: s.origin.as_str(),
                id: s.id.clone(),
            });
        }
        s.check_contract().map_err(|e| TrainError::BadSample {
            id: s.id.clone(),
            detail: e.to_string(),
        })?;
    }
    Ok(())
}

fn param_shapes(net: &Network<f32>) -> Vec<(String, Vec<usize>)> {
    net.params
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect()
}

/// Alternating-batch training of the shared trunk and both classifier
/// branches. Returns the final checkpoint and the full loss log.
pub fn train_phase1(
    cfg: &NetworkConfig,
    tc: &TrainConfig,
    depth_data: &[Sample],
    semantic_data: &[Sample],
    opts: &TrainOptions,
) -> Result<TrainOutput, TrainError> {
    tc.validate()?;
    if tc.phase != 1 {
        return Err(TrainError::Config(format!("phase {} config passed to phase-1 training", tc.phase)));
    }
    check_corpus(depth_data, Origin::Depth, "depth")?;
    check_corpus(semantic_data, Origin::Semantic, "semantic")?;

    let binning = DepthBinning {
        n_bins: cfg.depth_classes,
        ..DepthBinning::default()
    };
    let mut net = Network::<f32>::build_phase1(cfg, tc.seed)?;
    let mut adam = Adam::new(tc, param_shapes(&net).into_iter());
    let mut start = 0u64;
    if let Some(ckpt) = &opts.resume {
        if ckpt.phase != 1 {
            return Err(TrainError::Config(format!(
                "resume checkpoint is phase {}, expected 1",
                ckpt.phase
            )));
        }
        net.load_state_strict(ckpt)?;
        adam = Adam::from_entries(tc, param_shapes(&net).into_iter(), &ckpt.optimizer)?;
        start = ckpt.iteration;
    }

    let mut depth_stream = IndexStream::new(tc.seed, "depth", depth_data.len());
    let mut semantic_stream = IndexStream::new(tc.seed, "semantic", semantic_data.len());
    // replay the schedule up to the resume point so continued runs draw
    // the same batches a straight run would
    for step in 0..start {
        if step % 2 == 0 {
            depth_stream.take(tc.depth_batch);
        } else {
            semantic_stream.take(tc.semantic_batch);
        }
    }

    let mut log = Vec::new();
    for step in start..tc.iterations {
        let (kind, origin) = if step % 2 == 0 {
            (BatchKind::DepthBins, Origin::Depth)
        } else {
            (BatchKind::SemanticLabels, Origin::Semantic)
        };
        let samples: Vec<&Sample> = match kind {
            BatchKind::DepthBins => depth_stream
                .take(tc.depth_batch)
                .into_iter()
                .map(|i| &depth_data[i])
                .collect(),
            _ => semantic_stream
                .take(tc.semantic_batch)
                .into_iter()
                .map(|i| &semantic_data[i])
                .collect(),
        };
        let batch = build_batch(&samples, kind, &binning)?;
        let step_seed = derive_stream(tc.seed, &format!("step{step}"));
        let loss = conditional_step(&mut net, &batch, &mut adam, step_seed)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss(step));
        }
        log.push(LossRecord {
            step,
            phase: 1,
            origin,
            loss,
        });
        if let Some(dir) = &opts.checkpoint_dir {
            if (step + 1) % tc.checkpoint_every == 0 && step + 1 != tc.iterations {
                let ckpt = make_checkpoint(&net, &adam, step + 1, echo_config(cfg, tc));
                save_periodic(dir, 1, step + 1, &ckpt)?;
            }
        }
    }

    let checkpoint = make_checkpoint(&net, &adam, tc.iterations, echo_config(cfg, tc));
    if let Some(dir) = &opts.checkpoint_dir {
        save_periodic(dir, 1, tc.iterations, &checkpoint)?;
    }
    Ok(TrainOutput {
        checkpoint,
        log,
        unused_checkpoint_entries: Vec::new(),
    })
}

/// Regression fine-tuning on top of a phase-1 checkpoint. The whole depth
/// path trains; the semantic branch is dropped and reported.
pub fn train_phase2(
    cfg: &NetworkConfig,
    tc: &TrainConfig,
    depth_data: &[Sample],
    phase1: &Checkpoint,
    opts: &TrainOptions,
) -> Result<TrainOutput, TrainError> {
    tc.validate()?;
    if tc.phase != 2 {
        return Err(TrainError::Config(format!("phase {} config passed to phase-2 training", tc.phase)));
    }
    check_corpus(depth_data, Origin::Depth, "depth")?;

    let binning = DepthBinning {
        n_bins: cfg.depth_classes,
        ..DepthBinning::default()
    };
    let (mut net, unused) = Network::<f32>::build_phase2(cfg, phase1, tc.seed)?;
    let mut adam = Adam::new(tc, param_shapes(&net).into_iter());
    let mut start = 0u64;
    if let Some(ckpt) = &opts.resume {
        if ckpt.phase != 2 {
            return Err(TrainError::Config(format!(
                "resume checkpoint is phase {}, expected 2",
                ckpt.phase
            )));
        }
        net.load_state_strict(ckpt)?;
        adam = Adam::from_entries(tc, param_shapes(&net).into_iter(), &ckpt.optimizer)?;
        start = ckpt.iteration;
    }

    let mut stream = IndexStream::new(tc.seed, "regression", depth_data.len());
    for _ in 0..start {
        stream.take(tc.depth_batch);
    }

    let mut log = Vec::new();
    for step in start..tc.iterations {
        let samples: Vec<&Sample> = stream
            .take(tc.depth_batch)
            .into_iter()
            .map(|i| &depth_data[i])
            .collect();
        let batch = build_batch(&samples, BatchKind::DepthMeters, &binning)?;
        let step_seed = derive_stream(tc.seed, &format!("step{step}"));
        let loss = regression_step(&mut net, &batch, &mut adam, step_seed)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss(step));
        }
        log.push(LossRecord {
            step,
            phase: 2,
            origin: Origin::Depth,
            loss,
        });
        if let Some(dir) = &opts.checkpoint_dir {
            if (step + 1) % tc.checkpoint_every == 0 && step + 1 != tc.iterations {
                let ckpt = make_checkpoint(&net, &adam, step + 1, echo_config(cfg, tc));
                save_periodic(dir, 2, step + 1, &ckpt)?;
            }
        }
    }

    let checkpoint = make_checkpoint(&net, &adam, tc.iterations, echo_config(cfg, tc));
    if let Some(dir) = &opts.checkpoint_dir {
        save_periodic(dir, 2, tc.iterations, &checkpoint)?;
    }
    Ok(TrainOutput {
        checkpoint,
        log,
        unused_checkpoint_entries: unused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{generate_dataset, GenMode, SceneSpec};
    use crate::params::Branch;

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig::tiny()
    }

    fn scalar_param(v: f32) -> Parameter<f32> {
        Parameter {
            name: "dsc.test".into(),
            branch: Branch::Dsc,
            value: Tensor::scalar(v),
        }
    }

    fn adam_for(param: &Parameter<f32>, alpha: f64, wd: f64) -> Adam {
        let tc = TrainConfig {
            alpha,
            weight_decay: wd,
            ..TrainConfig::default()
        };
        Adam::new(&tc, std::iter::once((param.name.clone(), param.value.shape().to_vec())))
    }

    #[test]
    fn zero_gradient_zero_decay_only_advances_t() {
        let mut p = scalar_param(0.75);
        let mut adam = adam_for(&p, 0.001, 0.0);
        adam.update(&mut p, &Tensor::scalar(0.0)).unwrap();
        assert_eq!(p.value.item(), 0.75);
        assert_eq!(adam.state("dsc.test").unwrap().t, 1);
        assert_eq!(adam.state("dsc.test").unwrap().m.item(), 0.0);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // m_hat = v_hat = 1 after one unit-gradient step, so the update is
        // exactly alpha / (1 + eps)
        let mut p = scalar_param(0.0);
        let mut adam = adam_for(&p, 0.001, 0.0);
        adam.update(&mut p, &Tensor::scalar(1.0)).unwrap();
        let expected = -(0.001f64 / (1.0 + 1e-8)) as f32;
        // single-precision bias correction leaves a few ulps of slack
        assert!((p.value.item() - expected).abs() < 1e-7, "{}", p.value.item());
    }

    #[test]
    fn quadratic_converges_within_500_steps() {
        // gradient of x^2/2 is x; alpha must dominate the distance: 500
        // unit-size steps at 0.001 cannot cross from 1.0, so the bound is
        // asserted at alpha = 0.01 where an independent simulation lands
        // near 4e-9
        let mut p = scalar_param(1.0);
        let mut adam = adam_for(&p, 0.01, 0.0);
        for _ in 0..500 {
            let g = p.value.item();
            adam.update(&mut p, &Tensor::scalar(g)).unwrap();
        }
        assert!(p.value.item().abs() < 1e-2, "{}", p.value.item());
    }

    #[test]
    fn weight_decay_shrinks_parameters_without_gradient() {
        let mut p = scalar_param(1.0);
        let mut adam = adam_for(&p, 0.001, 0.0003);
        for _ in 0..10 {
            adam.update(&mut p, &Tensor::scalar(0.0)).unwrap();
        }
        let v = p.value.item();
        assert!(v < 1.0 && v > 0.9, "{v}");
    }

    #[test]
    fn non_finite_gradient_names_the_parameter_and_leaves_state() {
        let mut p = scalar_param(0.5);
        let mut adam = adam_for(&p, 0.001, 0.0);
        let err = adam.update(&mut p, &Tensor::scalar(f32::NAN)).unwrap_err();
        assert!(err.to_string().contains("dsc.test"), "{err}");
        assert_eq!(p.value.item(), 0.5);
        assert_eq!(adam.state("dsc.test").unwrap().t, 0);
    }

    #[test]
    fn t_is_tracked_per_parameter() {
        let tc = TrainConfig::default();
        let mut a = Parameter {
            name: "dsc.a".into(),
            branch: Branch::Dsc,
            value: Tensor::scalar(0.0),
        };
        let mut adam = Adam::new(
            &tc,
            [("dsc.a".to_string(), vec![1]), ("sc.b".to_string(), vec![1])].into_iter(),
        );
        adam.update(&mut a, &Tensor::scalar(1.0)).unwrap();
        adam.update(&mut a, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(adam.state("dsc.a").unwrap().t, 2);
        let untouched = adam.state("sc.b").unwrap();
        assert_eq!(untouched.t, 0);
        assert_eq!(untouched.m.item(), 0.0);
        assert_eq!(untouched.v.item(), 0.0);
    }

    fn depth_corpus(seed: u64, n: usize) -> Vec<Sample> {
        generate_dataset(&SceneSpec::tiny(seed), n, GenMode::DepthOnly).unwrap()
    }

    fn semantic_corpus(seed: u64, n: usize) -> Vec<Sample> {
        generate_dataset(&SceneSpec::tiny(seed), n, GenMode::SemanticOnly).unwrap()
    }

    fn smoke_tc(iterations: u64) -> TrainConfig {
        TrainConfig {
            depth_batch: 2,
            semantic_batch: 2,
            iterations,
            seed: 99,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mixed_and_mismatched_batches_are_rejected() {
        let d = depth_corpus(1, 2);
        let s = semantic_corpus(2, 2);
        let binning = DepthBinning::default();
        let mixed = vec![&d[0], &s[0]];
        assert!(matches!(
            build_batch(&mixed, BatchKind::DepthBins, &binning),
            Err(TrainError::OriginMismatch { .. })
        ));
        let wrong = vec![&s[0], &s[1]];
        assert!(matches!(
            build_batch(&wrong, BatchKind::DepthBins, &binning),
            Err(TrainError::OriginMismatch { .. })
        ));
        let full = generate_dataset(&SceneSpec::tiny(3), 1, GenMode::Full).unwrap();
        let contract = vec![&full[0]];
        assert!(matches!(
            build_batch(&contract, BatchKind::DepthBins, &binning),
            Err(TrainError::BadSample { .. })
        ));
    }

    #[test]
    fn depth_step_leaves_semantic_branch_bitwise_unchanged() {
        let cfg = tiny_cfg();
        let tc = smoke_tc(1);
        let mut net = Network::<f32>::build_phase1(&cfg, 7).unwrap();
        let mut adam = Adam::new(&tc, param_shapes(&net).into_iter());
        let before: Vec<(String, Tensor<f32>)> = net.named_state();
        let d = depth_corpus(5, 2);
        let batch = build_batch(
            &[&d[0], &d[1]],
            BatchKind::DepthBins,
            &DepthBinning {
                n_bins: cfg.depth_classes,
                ..DepthBinning::default()
            },
        )
        .unwrap();
        conditional_step(&mut net, &batch, &mut adam, 11).unwrap();

        let after: Vec<(String, Tensor<f32>)> = net.named_state();
        let mut dsc_changed = false;
        let mut dc_changed = false;
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            if name.starts_with("sc.") {
                assert!(a.bit_eq(b), "semantic tensor {name} moved on a depth batch");
            } else if name.starts_with("dsc.") && !a.bit_eq(b) {
                dsc_changed = true;
            } else if name.starts_with("dc.") && !a.bit_eq(b) {
                dc_changed = true;
            }
        }
        assert!(dsc_changed && dc_changed);
        for (name, st) in adam.states() {
            if name.starts_with("sc.") {
                assert_eq!(st.t, 0, "optimizer ticked for {name}");
                assert!(st.m.data().iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(st.t, 1, "active parameter {name} missed its update");
            }
        }
    }

    #[test]
    fn semantic_step_leaves_depth_branch_bitwise_unchanged() {
        let cfg = tiny_cfg();
        let tc = smoke_tc(1);
        let mut net = Network::<f32>::build_phase1(&cfg, 7).unwrap();
        let mut adam = Adam::new(&tc, param_shapes(&net).into_iter());
        let before = net.named_state();
        let s = semantic_corpus(6, 2);
        let batch = build_batch(&[&s[0], &s[1]], BatchKind::SemanticLabels, &DepthBinning::default()).unwrap();
        conditional_step(&mut net, &batch, &mut adam, 12).unwrap();
        let after = net.named_state();
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            if name.starts_with("dc.") {
                assert!(a.bit_eq(b), "depth tensor {name} moved on a semantic batch");
            }
        }
        for (name, st) in adam.states() {
            if name.starts_with("dc.") {
                assert_eq!(st.t, 0);
                assert!(st.v.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn alternation_starts_with_depth_and_balances() {
        let cfg = tiny_cfg();
        let tc = smoke_tc(6);
        let out = train_phase1(&cfg, &tc, &depth_corpus(1, 3), &semantic_corpus(2, 3), &TrainOptions::default())
            .unwrap();
        let origins: Vec<Origin> = out.log.iter().map(|r| r.origin).collect();
        assert_eq!(
            origins,
            vec![
                Origin::Depth,
                Origin::Semantic,
                Origin::Depth,
                Origin::Semantic,
                Origin::Depth,
                Origin::Semantic
            ]
        );
        for k in 1..=origins.len() {
            let d = origins[..k].iter().filter(|&&o| o == Origin::Depth).count() as i64;
            let s = k as i64 - d;
            assert!((d - s).abs() <= 1);
        }
        assert_eq!(out.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn identical_seed_and_data_reproduce_the_loss_log_bitwise() {
        let cfg = tiny_cfg();
        let tc = smoke_tc(4);
        let d = depth_corpus(3, 3);
        let s = semantic_corpus(4, 3);
        let a = train_phase1(&cfg, &tc, &d, &s, &TrainOptions::default()).unwrap();
        let b = train_phase1(&cfg, &tc, &d, &s, &TrainOptions::default()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        let tc2 = TrainConfig { seed: 100, ..tc };
        let c = train_phase1(&cfg, &tc2, &d, &s, &TrainOptions::default()).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn epochs_reshuffle_and_cover_every_sample() {
        let mut stream = IndexStream::new(5, "depth", 4);
        let epoch1 = stream.take(4);
        let epoch2 = stream.take(4);
        let mut s1 = epoch1.clone();
        let mut s2 = epoch2.clone();
        s1.sort();
        s2.sort();
        assert_eq!(s1, vec![0, 1, 2, 3]);
        assert_eq!(s2, vec![0, 1, 2, 3]);
        // across many epochs the permutations are not all identical
        let mut distinct = false;
        let mut prev = epoch2;
        for _ in 0..20 {
            let e = stream.take(4);
            if e != prev {
                distinct = true;
                break;
            }
            prev = e;
        }
        assert!(distinct);
    }

    #[test]
    fn resume_reproduces_the_straight_run_bitwise() {
        let cfg = tiny_cfg();
        let d = depth_corpus(7, 3);
        let s = semantic_corpus(8, 3);
        let straight = train_phase1(&cfg, &smoke_tc(4), &d, &s, &TrainOptions::default()).unwrap();

        let half = train_phase1(&cfg, &smoke_tc(2), &d, &s, &TrainOptions::default()).unwrap();
        let resumed = train_phase1(
            &cfg,
            &smoke_tc(4),
            &d,
            &s,
            &TrainOptions {
                checkpoint_dir: None,
                resume: Some(half.checkpoint),
            },
        )
        .unwrap();
        assert_eq!(straight.checkpoint.to_bytes(), resumed.checkpoint.to_bytes());
        assert_eq!(resumed.log.len(), 2);
        assert_eq!(resumed.log[0].step, 2);
        assert_eq!(&straight.log[2..], &resumed.log[..]);
    }

    #[test]
    fn checkpoint_cadence_writes_periodic_and_final_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let mut tc = smoke_tc(3);
        tc.checkpoint_every = 2;
        let d = depth_corpus(9, 2);
        let s = semantic_corpus(10, 2);
        train_phase1(
            &cfg,
            &tc,
            &d,
            &s,
            &TrainOptions {
                checkpoint_dir: Some(dir.path().to_path_buf()),
                resume: None,
            },
        )
        .unwrap();
        assert!(dir.path().join("phase1-step000002.ckpt").exists());
        assert!(dir.path().join("phase1-step000003.ckpt").exists());
        let loaded = Checkpoint::load(&dir.path().join("phase1-step000003.ckpt")).unwrap();
        assert_eq!(loaded.iteration, 3);
        assert_eq!(loaded.phase, 1);
    }

    #[test]
    fn phase2_starts_from_the_phase1_weights_and_reports_unused() {
        let cfg = tiny_cfg();
        let d = depth_corpus(11, 3);
        let s = semantic_corpus(12, 3);
        let p1 = train_phase1(&cfg, &smoke_tc(2), &d, &s, &TrainOptions::default()).unwrap();
        let tc2 = TrainConfig {
            phase: 2,
            ..smoke_tc(0)
        };
        let p2 = train_phase2(&cfg, &tc2, &d, &p1.checkpoint, &TrainOptions::default()).unwrap();
        assert!(!p2.unused_checkpoint_entries.is_empty());
        assert!(p2.unused_checkpoint_entries.iter().all(|n| n.starts_with("sc.")));
        // at iteration 0 the depth path equals the phase-1 checkpoint
        for nt in &p2.checkpoint.tensors {
            if nt.name.starts_with("dsc.") || nt.name.starts_with("dc.") {
                let from_p1 = p1.checkpoint.tensor(&nt.name).expect("phase-1 tensor");
                assert!(nt.tensor.bit_eq(from_p1), "{} drifted", nt.name);
            }
        }
        assert_eq!(p2.checkpoint.phase, 2);
    }

    #[test]
    fn phase2_step_moves_the_regression_branch() {
        let cfg = tiny_cfg();
        let d = depth_corpus(13, 3);
        let s = semantic_corpus(14, 3);
        let p1 = train_phase1(&cfg, &smoke_tc(2), &d, &s, &TrainOptions::default()).unwrap();
        let tc2 = TrainConfig {
            phase: 2,
            ..smoke_tc(3)
        };
        let p2 = train_phase2(&cfg, &tc2, &d, &p1.checkpoint, &TrainOptions::default()).unwrap();
        assert_eq!(p2.log.len(), 3);
        assert!(p2.log.iter().all(|r| r.phase == 2 && r.origin == Origin::Depth));
        let moved = p2
            .checkpoint
            .tensors
            .iter()
            .filter(|nt| nt.name.starts_with("reg."))
            .count();
        assert!(moved > 0);
        // losses are meters-scale L1 on [1,80) scenes
        assert!(p2.log.iter().all(|r| r.loss > 0.0 && r.loss < 80.0));
    }

    #[test]
    fn wrong_phase_configs_are_rejected() {
        let cfg = tiny_cfg();
        let d = depth_corpus(15, 1);
        let s = semantic_corpus(16, 1);
        let tc = TrainConfig {
            phase: 2,
            ..smoke_tc(1)
        };
        assert!(matches!(
            train_phase1(&cfg, &tc, &d, &s, &TrainOptions::default()),
            Err(TrainError::Config(_))
        ));
        let bad = TrainConfig {
            beta1: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            depth_batch: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn origin_mismatched_corpus_is_a_config_error() {
        let cfg = tiny_cfg();
        let d = depth_corpus(17, 2);
        let s = semantic_corpus(18, 2);
        let err = train_phase1(&cfg, &smoke_tc(1), &s, &d, &TrainOptions::default())
            .map(|_| ())
            .unwrap_err();
        assert!(matches!(err, TrainError::OriginMismatch { .. }));
    }

    #[test]
    fn loss_log_renders_csv() {
        let log = vec![
            LossRecord {
                step: 0,
                phase: 1,
                origin: Origin::Depth,
                loss: 3.25,
            },
            LossRecord {
                step: 1,
                phase: 1,
                origin: Origin::Semantic,
                loss: 2.5,
            },
        ];
        let csv = loss_log_csv(&log);
        assert_eq!(csv, "step,phase,origin,loss\n0,1,depth,3.25\n1,1,semantic,2.5\n");
        assert_eq!(windowed_means(&log, 1), vec![3.25, 2.5]);
        assert_eq!(windowed_means(&log, 2), vec![2.875]);
    }
}
