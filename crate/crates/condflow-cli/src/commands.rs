//! Command implementations behind the argument parser. Every command
//! validates its full configuration before touching the filesystem, and
//! every artifact is written through temp-then-rename.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use condflow::checkpoint::Checkpoint;
use condflow::config::RunConfig;
use condflow::data::augment::augment;
use condflow::data::dataset::{load_dataset_dir, write_dataset};
use condflow::data::formats::{read_ppm, write_atomic, write_pfm, write_ppm};
use condflow::data::l0::{l0_smooth, DEFAULT_KAPPA, DEFAULT_LAMBDA};
use condflow::data::scene::{generate_dataset, GenMode, SceneSpec};
use condflow::data::{Origin, Sample};
use condflow::error::{
    BuildError, CheckpointError, ConfigError, DataError, EvalError, TensorError, TrainError,
};
use condflow::eval::{aggregate, compute_metrics, metrics_csv, AggregateMode, MetricsReport};
use condflow::network::Network;
use condflow::params::derive_stream;
use condflow::predict::predict_depth;
use condflow::tensor::Tensor;
use condflow::train::{loss_log_csv, train_phase1, train_phase2, TrainOptions, TrainOutput};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0} already contains files; pass --force to overwrite")]
    Clobber(PathBuf),
}

impl CliError {
    /// Exit codes: 2 usage, 3 configuration, 4 data/artifacts, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) | CliError::Build(_) => EXIT_CONFIG,
            CliError::Train(e) => match e {
                TrainError::Config(_) | TrainError::Build(_) => EXIT_CONFIG,
                TrainError::NonFiniteGradient(_)
                | TrainError::NonFiniteLoss(_)
                | TrainError::Tensor(_) => EXIT_NUMERIC,
                _ => EXIT_DATA,
            },
            CliError::Data(DataError::NonFinite) => EXIT_NUMERIC,
            CliError::Tensor(_) => EXIT_NUMERIC,
            CliError::Data(_) | CliError::Eval(_) | CliError::Checkpoint(_) | CliError::Clobber(_) => {
                EXIT_DATA
            }
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Data(DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Create the output directory and drop the effective config into it, so
/// any run can be reproduced from its artifacts alone.
fn prepare_out_dir(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    write_atomic(&cfg.out_dir.join("effective-config.cfg"), cfg.render().as_bytes())?;
    Ok(())
}

pub fn cmd_gen_data(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let (target, dir_key) = match cfg.gen_origin {
        Origin::Depth => (cfg.depth_dir.as_ref(), "data.depth_dir"),
        Origin::Semantic => (cfg.semantic_dir.as_ref(), "data.semantic_dir"),
    };
    let target = target.ok_or_else(|| ConfigError::Missing(dir_key.into()))?;
    if !force && target.is_dir() {
        let occupied = fs::read_dir(target)
            .map_err(|e| io_err(target, e))?
            .next()
            .is_some();
        if occupied {
            return Err(CliError::Clobber(target.clone()));
        }
    }
    let net = cfg.network()?;
    let spec = SceneSpec {
        seed: cfg.gen_seed,
        height: net.input_h,
        width: net.input_w,
        class_count: net.semantic_classes,
        ..SceneSpec::tiny(cfg.gen_seed)
    };
    let mode = match cfg.gen_origin {
        Origin::Depth => GenMode::DepthOnly,
        Origin::Semantic => GenMode::SemanticOnly,
    };
    let samples = generate_dataset(&spec, cfg.gen_count, mode)?;
    write_dataset(target, &samples)?;
    prepare_out_dir(cfg)?;
    println!(
        "wrote {} {} samples ({}x{}) to {}",
        samples.len(),
        cfg.gen_origin.as_str(),
        net.input_h,
        net.input_w,
        target.display()
    );
    Ok(())
}

/// Smoothing first when enabled, then optional corpus doubling with one
/// augmented variant per sample; variant seeds derive from the run seed
/// and the sample id, so the expansion is reproducible.
fn preprocess(samples: Vec<Sample>, cfg: &RunConfig) -> Result<Vec<Sample>, CliError> {
    let mut out = Vec::with_capacity(if cfg.augment { samples.len() * 2 } else { samples.len() });
    for s in samples {
        let s = if cfg.l0_smooth {
            Sample {
                rgb: l0_smooth(&s.rgb, DEFAULT_LAMBDA, DEFAULT_KAPPA)?,
                ..s
            }
        } else {
            s
        };
        if cfg.augment {
            let seed = derive_stream(cfg.train.seed, &format!("augment.{}", s.id));
            let mut variant = augment(&s, seed)?;
            variant.id = format!("{}-aug", variant.id);
            out.push(s);
            out.push(variant);
        } else {
            out.push(s);
        }
    }
    Ok(out)
}

fn load_corpus(dir: Option<&PathBuf>, key: &str, cfg: &RunConfig) -> Result<Vec<Sample>, CliError> {
    let dir = dir.ok_or_else(|| ConfigError::Missing(key.into()))?;
    let samples = load_dataset_dir(dir)?;
    preprocess(samples, cfg)
}

pub fn cmd_train(
    cfg: &RunConfig,
    init_from: Option<&Path>,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let net_cfg = cfg.network()?;
    prepare_out_dir(cfg)?;
    let opts = TrainOptions {
        checkpoint_dir: Some(cfg.out_dir.join("checkpoints")),
        resume: resume.map(Checkpoint::load).transpose()?,
    };
    let output: TrainOutput = match cfg.train.phase {
        1 => {
            let depth = load_corpus(cfg.depth_dir.as_ref(), "data.depth_dir", cfg)?;
            let semantic = load_corpus(cfg.semantic_dir.as_ref(), "data.semantic_dir", cfg)?;
            train_phase1(&net_cfg, &cfg.train, &depth, &semantic, &opts)?
        }
        2 => {
            let init = init_from.ok_or_else(|| {
                CliError::Usage("--init-from <phase-1 checkpoint> is required for phase 2".into())
            })?;
            let depth = load_corpus(cfg.depth_dir.as_ref(), "data.depth_dir", cfg)?;
            let ckpt = Checkpoint::load(init)?;
            train_phase2(&net_cfg, &cfg.train, &depth, &ckpt, &opts)?
        }
        p => return Err(CliError::Usage(format!("--phase {p} is not 1 or 2"))),
    };

    let phase = cfg.train.phase;
    let log_path = cfg.out_dir.join(format!("loss-phase{phase}.csv"));
    write_atomic(&log_path, loss_log_csv(&output.log).as_bytes())?;
    let final_path = cfg.out_dir.join(format!("phase{phase}-final.ckpt"));
    output.checkpoint.save(&final_path)?;

    if let Some(last) = output.log.last() {
        println!("final loss {} at step {}", last.loss, last.step);
    }
    if !output.unused_checkpoint_entries.is_empty() {
        println!(
            "left behind in the init checkpoint: {} entries ({}, ...)",
            output.unused_checkpoint_entries.len(),
            output.unused_checkpoint_entries[0]
        );
    }
    println!("checkpoint: {}", final_path.display());
    println!("loss log: {}", log_path.display());
    Ok(())
}

fn eval_corpus(cfg: &RunConfig) -> Result<Vec<Sample>, CliError> {
    let dir = cfg
        .eval_dir
        .as_ref()
        .or(cfg.depth_dir.as_ref())
        .ok_or_else(|| ConfigError::Missing("data.eval_dir".into()))?;
    let samples = load_dataset_dir(dir)?;
    for s in &samples {
        if s.origin != Origin::Depth {
            return Err(CliError::Data(DataError::Ingestion {
                root: dir.display().to_string(),
                detail: format!(
                    "sample {} has origin {}, evaluation needs depth ground truth",
                    s.id,
                    s.origin.as_str()
                ),
            }));
        }
    }
    Ok(samples)
}

fn predict_one(net: &Network<f32>, cfg: &RunConfig, rgb: &Tensor<f32>) -> Result<Tensor<f32>, CliError> {
    let rgb = if cfg.l0_smooth {
        l0_smooth(rgb, DEFAULT_LAMBDA, DEFAULT_KAPPA)?
    } else {
        rgb.clone()
    };
    Ok(predict_depth(net, &rgb)?)
}

/// Per-image metric reports, fanned out over `threads` scoped workers.
fn per_image_reports(
    net: Option<&Network<f32>>,
    cfg: &RunConfig,
    samples: &[Sample],
    cap: f64,
    threads: usize,
) -> Result<Vec<MetricsReport>, CliError> {
    let one = |s: &Sample| -> Result<MetricsReport, CliError> {
        let gt = s.depth_gt.as_ref().expect("depth corpus checked");
        let pred = match net {
            Some(net) => predict_one(net, cfg, &s.rgb)?,
            None => gt.clone(),
        };
        Ok(compute_metrics(&pred, gt, cap)?)
    };
    if threads <= 1 || samples.len() <= 1 {
        return samples.iter().map(one).collect();
    }
    let chunk = samples.len().div_ceil(threads);
    let mut slots: Vec<Option<Result<MetricsReport, CliError>>> = Vec::new();
    slots.resize_with(samples.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (ci, block) in samples.chunks(chunk).enumerate() {
            handles.push((ci * chunk, scope.spawn(move || block.iter().map(one).collect::<Vec<_>>())));
        }
        for (off, h) in handles {
            for (j, r) in h.join().expect("eval worker").into_iter().enumerate() {
                slots[off + j] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every sample scored"))
        .collect()
}

pub fn cmd_eval(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    cap: f64,
    oracle: bool,
    threads: usize,
) -> Result<(), CliError> {
    if cap != 50.0 && cap != 80.0 {
        return Err(CliError::Usage(format!("--cap {cap} is not 50 or 80")));
    }
    let samples = eval_corpus(cfg)?;
    let net = match (oracle, ckpt) {
        (true, _) => None,
        (false, Some(path)) => {
            let net_cfg = cfg.network()?;
            Some(Network::<f32>::from_checkpoint(&net_cfg, &Checkpoint::load(path)?)?)
        }
        (false, None) => {
            return Err(CliError::Usage(
                "--ckpt <checkpoint> is required unless --oracle is given".into(),
            ))
        }
    };
    let reports = per_image_reports(net.as_ref(), cfg, &samples, cap, threads)?;
    let pooled = aggregate(&reports, AggregateMode::PixelPooled)?;

    prepare_out_dir(cfg)?;
    let csv = metrics_csv(std::slice::from_ref(&pooled));
    let path = cfg.out_dir.join(format!("metrics-cap{}.csv", cap as u32));
    write_atomic(&path, csv.as_bytes())?;
    print!("{csv}");
    println!("written: {}", path.display());
    Ok(())
}

/// Linear three-stop ramp over [1, 80] m: near red, mid green, far blue.
fn colormap(depth: &Tensor<f32>) -> Tensor<f32> {
    let (_, h, w) = depth.dims3().expect("depth map is 1xHxW");
    let plane = h * w;
    let mut rgb = vec![0f32; 3 * plane];
    for (px, &d) in depth.data().iter().enumerate() {
        let t = (((d as f64) - 1.0) / 79.0).clamp(0.0, 1.0) as f32;
        rgb[px] = (1.0 - t).min(1.0);
        rgb[plane + px] = 1.0 - (2.0 * t - 1.0).abs();
        rgb[2 * plane + px] = t;
    }
    Tensor::from_vec(vec![3, h, w], rgb).expect("colormap preserves geometry")
}

pub fn cmd_predict(cfg: &RunConfig, ckpt: &Path, image: &Path) -> Result<(), CliError> {
    let net_cfg = cfg.network()?;
    let net = Network::<f32>::from_checkpoint(&net_cfg, &Checkpoint::load(ckpt)?)?;
    let rgb = read_ppm(image)?;
    let (_, h, w) = rgb.dims3()?;
    if (h, w) != (net_cfg.input_h, net_cfg.input_w) {
        return Err(CliError::Data(DataError::Format {
            path: image.display().to_string(),
            detail: format!(
                "image is {h}x{w}, network expects {}x{}",
                net_cfg.input_h, net_cfg.input_w
            ),
        }));
    }
    let depth = predict_one(&net, cfg, &rgb)?;

    prepare_out_dir(cfg)?;
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "image".into());
    let pfm = cfg.out_dir.join(format!("{stem}-depth.pfm"));
    let ppm = cfg.out_dir.join(format!("{stem}-depth.ppm"));
    write_pfm(&pfm, &depth)?;
    write_ppm(&ppm, &colormap(&depth))?;
    println!("depth map: {}", pfm.display());
    println!("preview: {}", ppm.display());
    Ok(())
}

/// Distinct block prefixes per branch, split into conv (`blk`) and deconv
/// chains, recovered purely from tensor names.
fn block_census(ckpt: &Checkpoint) -> (BTreeMap<String, (usize, usize)>, usize, usize) {
    let mut conv: std::collections::BTreeSet<String> = Default::default();
    let mut deconv: std::collections::BTreeSet<String> = Default::default();
    for nt in &ckpt.tensors {
        let mut parts = nt.name.splitn(3, '.');
        let (Some(tag), Some(block)) = (parts.next(), parts.next()) else {
            continue;
        };
        let prefix = format!("{tag}.{block}");
        if block.starts_with("blk") {
            conv.insert(prefix);
        } else if block.starts_with("deconv") {
            deconv.insert(prefix);
        }
    }
    let mut per_tag: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for c in &conv {
        let tag = c.split('.').next().unwrap_or_default().to_string();
        per_tag.entry(tag).or_default().0 += 1;
    }
    for d in &deconv {
        let tag = d.split('.').next().unwrap_or_default().to_string();
        per_tag.entry(tag).or_default().1 += 1;
    }
    (per_tag, conv.len(), deconv.len())
}

pub fn cmd_inspect(ckpt_path: &Path) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    println!("phase: {}", ckpt.phase);
    println!("iteration: {}", ckpt.iteration);
    if !ckpt.config_echo.is_empty() {
        println!("config: {}", ckpt.config_echo);
    }

    let mut per_branch: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for nt in &ckpt.tensors {
        let tag = nt.name.split('.').next().unwrap_or("?");
        let e = per_branch.entry(tag).or_default();
        e.0 += 1;
        e.1 += nt.tensor.numel();
    }
    for (tag, (tensors, values)) in &per_branch {
        println!("{tag}: {tensors} tensors, {values} values");
    }

    let (per_tag, conv, deconv) = block_census(&ckpt);
    for (tag, (c, d)) in &per_tag {
        println!("{tag} blocks: {c} conv, {d} deconv");
    }
    println!("ConvBlk: {conv}, DeconvBlk: {deconv}");
    let contract = match ckpt.phase {
        1 if (conv, deconv) == (9, 11) => Some("phase-1 census contract (9 conv, 11 deconv): ok"),
        2 if (conv, deconv) == (9, 7) => Some("phase-2 census contract (9 conv, 7 deconv): ok"),
        _ => None,
    };
    if let Some(line) = contract {
        println!("{line}");
    }
    println!("optimizer entries: {}", ckpt.optimizer.len());
    Ok(())
}
