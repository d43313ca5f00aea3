//! Network compilation, construction, and execution.
//!
//! [`compile`] turns a [`NetworkConfig`] into a linear instruction program
//! per sub-net while symbolically executing shapes; every violated
//! constraint is collected and reported in one error. The same programs
//! drive the taped training forward and the pure eval forward, so what is
//! validated is exactly what runs.

use std::collections::{BTreeMap, HashMap};

use crate::autodiff::{Tape, ValueId};
use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::error::{BuildError, TensorError};
use crate::net::{NetworkConfig, SubNetSpec};
use crate::ops::{self, RunningStats};
use crate::params::{derive_stream, he_init, Branch, ParamStore, Parameter};
use crate::tensor::{el, Elem, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Training stage the network is built for.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
}

impl Phase {
    pub fn as_u32(self) -> u32 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }
}

/// Which sub-net chain a forward pass activates.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ForwardPath {
    /// Trunk + depth-classification branch (phase 1, depth batches).
    Depth,
    /// Trunk + semantic-segmentation branch (phase 1, semantic batches).
    Semantic,
    /// Trunk + depth classification + regression refinement (phase 2).
    Regression,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    DepthLogits,
    SemanticLogits,
    DepthReg,
}

#[derive(Clone, Debug)]
pub(crate) enum Instr {
    Conv {
        weight: String,
        bias: String,
        stride: usize,
        pad: usize,
    },
    Bn {
        name: String,
    },
    Dropout {
        rate: f64,
        tag: String,
    },
    Relu,
    Pool {
        window: usize,
    },
    Deconv {
        weight: String,
        bias: String,
        stride: usize,
        pad: usize,
    },
    ConcatFeature {
        feature: String,
    },
    Record {
        feature: String,
    },
    Select {
        feature: String,
    },
    CropToInput,
    Head {
        kind: HeadKind,
    },
}

#[derive(Clone, Debug)]
pub(crate) enum Init {
    He { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub branch: Branch,
    pub shape: Vec<usize>,
    pub init: Init,
}

pub(crate) struct Plan {
    pub programs: Vec<(Branch, Vec<Instr>)>,
    pub param_specs: Vec<ParamSpec>,
    /// (bn prefix, branch, channel count)
    pub bn_specs: Vec<(String, Branch, usize)>,
    pub padded: (usize, usize),
}

struct Walker<'c> {
    cfg: &'c NetworkConfig,
    problems: Vec<String>,
    features: HashMap<String, (usize, usize, usize)>,
    param_specs: Vec<ParamSpec>,
    bn_specs: Vec<(String, Branch, usize)>,
}

impl<'c> Walker<'c> {
    fn walk_subnet(
        &mut self,
        branch: Branch,
        spec: &SubNetSpec,
        mut cur: (usize, usize, usize),
    ) -> (Vec<Instr>, (usize, usize, usize)) {
        let tag = branch.tag();
        let mut prog = Vec::new();

        for (bi, blk) in spec.conv_blocks.iter().enumerate() {
            let i = bi + 1;
            if !(2..=4).contains(&blk.sets.len()) {
                self.problems.push(format!(
                    "{tag}.blk{i} has {} sets, contract is 2 to 4",
                    blk.sets.len()
                ));
            }
            for (sj, set) in blk.sets.iter().enumerate() {
                let name = format!("{tag}.blk{i}.set{}", sj + 1);
                if set.in_ch != cur.0 {
                    self.problems.push(format!(
                        "{name}.conv declares {} input channels but receives {}",
                        set.in_ch, cur.0
                    ));
                }
                if set.stride == 0 {
                    self.problems.push(format!("{name}.conv has stride 0"));
                } else if cur.1 + 2 * set.pad < set.kernel || cur.2 + 2 * set.pad < set.kernel {
                    self.problems.push(format!(
                        "{name}.conv kernel {} does not fit {}x{} input (pad {})",
                        set.kernel, cur.1, cur.2, set.pad
                    ));
                } else {
                    cur = (
                        set.out_ch,
                        ops::conv_extent(cur.1, set.kernel, set.stride, set.pad),
                        ops::conv_extent(cur.2, set.kernel, set.stride, set.pad),
                    );
                }
                self.param_specs.push(ParamSpec {
                    name: format!("{name}.conv.weight"),
                    branch,
                    shape: vec![set.out_ch, set.in_ch, set.kernel, set.kernel],
                    init: Init::He {
                        fan_in: set.in_ch * set.kernel * set.kernel,
                    },
                });
                self.param_specs.push(ParamSpec {
                    name: format!("{name}.conv.bias"),
                    branch,
                    shape: vec![set.out_ch],
                    init: Init::Zeros,
                });
                prog.push(Instr::Conv {
                    weight: format!("{name}.conv.weight"),
                    bias: format!("{name}.conv.bias"),
                    stride: set.stride,
                    pad: set.pad,
                });
                if set.bn {
                    let bn = format!("{name}.bn");
                    self.param_specs.push(ParamSpec {
                        name: format!("{bn}.scale"),
                        branch,
                        shape: vec![set.out_ch],
                        init: Init::Ones,
                    });
                    self.param_specs.push(ParamSpec {
                        name: format!("{bn}.shift"),
                        branch,
                        shape: vec![set.out_ch],
                        init: Init::Zeros,
                    });
                    self.bn_specs.push((bn.clone(), branch, set.out_ch));
                    prog.push(Instr::Bn { name: bn });
                }
                if set.dropout > 0.0 {
                    if set.dropout >= 1.0 || !set.dropout.is_finite() {
                        self.problems
                            .push(format!("{name} dropout rate {} not in [0,1)", set.dropout));
                    }
                    prog.push(Instr::Dropout {
                        rate: set.dropout,
                        tag: format!("{name}.dropout"),
                    });
                }
                if set.relu {
                    prog.push(Instr::Relu);
                }
            }
            if blk.pool {
                let feature = format!("{tag}.blk{i}.prepool");
                self.features.insert(feature.clone(), cur);
                prog.push(Instr::Record { feature });
                if cur.1 % 2 != 0 || cur.2 % 2 != 0 {
                    self.problems.push(format!(
                        "{tag}.blk{i} pools an odd spatial size {}x{}",
                        cur.1, cur.2
                    ));
                } else {
                    cur = (cur.0, cur.1 / 2, cur.2 / 2);
                }
                prog.push(Instr::Pool { window: 2 });
            }
        }

        for (dj, d) in spec.deconv_blocks.iter().enumerate() {
            let name = format!("{tag}.deconv{}", dj + 1);
            if d.in_ch != cur.0 {
                self.problems.push(format!(
                    "{name} declares {} input channels but receives {}",
                    d.in_ch, cur.0
                ));
            }
            if d.stride == 0 {
                self.problems.push(format!("{name} has stride 0"));
            } else if (cur.1 - 1) * d.stride + d.kernel <= 2 * d.pad
                || (cur.2 - 1) * d.stride + d.kernel <= 2 * d.pad
            {
                self.problems.push(format!(
                    "{name} padding {} swallows its {}x{} output",
                    d.pad, cur.1, cur.2
                ));
            } else {
                cur = (
                    d.out_ch,
                    ops::deconv_extent(cur.1, d.kernel, d.stride, d.pad),
                    ops::deconv_extent(cur.2, d.kernel, d.stride, d.pad),
                );
            }
            self.param_specs.push(ParamSpec {
                name: format!("{name}.weight"),
                branch,
                shape: vec![d.in_ch, d.out_ch, d.kernel, d.kernel],
                init: Init::He {
                    fan_in: d.in_ch * d.kernel * d.kernel,
                },
            });
            self.param_specs.push(ParamSpec {
                name: format!("{name}.bias"),
                branch,
                shape: vec![d.out_ch],
                init: Init::Zeros,
            });
            prog.push(Instr::Deconv {
                weight: format!("{name}.weight"),
                bias: format!("{name}.bias"),
                stride: d.stride,
                pad: d.pad,
            });
            if d.relu {
                prog.push(Instr::Relu);
            }
            if let Some(skip) = &d.skip {
                if !(skip.starts_with("dsc.") || skip.starts_with(&format!("{tag}."))) {
                    self.problems.push(format!(
                        "{name} skip source {skip:?} must come from the shared trunk \
                         or from {tag}'s own encoder"
                    ));
                }
                match self.features.get(skip) {
                    None => self.problems.push(format!(
                        "{name} skip source {skip:?} is not a recorded encoder feature"
                    )),
                    Some(&(fc, fh, fw)) => {
                        if (fh, fw) != (cur.1, cur.2) {
                            self.problems.push(format!(
                                "{name} skip {skip:?} is {fh}x{fw} but the deconv output \
                                 is {}x{}",
                                cur.1, cur.2
                            ));
                        }
                        cur.0 += fc;
                    }
                }
                prog.push(Instr::ConcatFeature {
                    feature: skip.clone(),
                });
            }
        }
        (prog, cur)
    }

    fn check_decoder_exit(
        &mut self,
        tag: &str,
        exit: (usize, usize, usize),
        classes: usize,
        padded: (usize, usize),
    ) {
        if exit.0 != classes {
            self.problems.push(format!(
                "{tag} head produces {} channels, expected {classes}",
                exit.0
            ));
        }
        if (exit.1, exit.2) != padded {
            self.problems.push(format!(
                "{tag} decoder ends at {}x{}, expected padded input resolution {}x{}",
                exit.1, exit.2, padded.0, padded.1
            ));
        }
        let spec = match tag {
            "dc" => &self.cfg.dc,
            "sc" => &self.cfg.sc,
            _ => &self.cfg.reg,
        };
        if let Some(head) = spec.deconv_blocks.last() {
            if head.relu {
                self.problems
                    .push(format!("{tag} head must not apply relu to its logits"));
            }
            if head.skip.is_some() {
                self.problems
                    .push(format!("{tag} head must not concatenate a skip feature"));
            }
        } else {
            self.problems
                .push(format!("{tag} has no deconv blocks, a head is required"));
        }
    }
}

pub(crate) fn compile(cfg: &NetworkConfig, phase: Phase) -> Result<Plan, BuildError> {
    let mut w = Walker {
        cfg,
        problems: Vec::new(),
        features: HashMap::new(),
        param_specs: Vec::new(),
        bn_specs: Vec::new(),
    };

    if let Some(census) = cfg.census {
        let (c1, d1) = cfg.block_counts(&[&cfg.dsc, &cfg.dc, &cfg.sc]);
        if (c1, d1) != (census.phase1_conv, census.phase1_deconv) {
            w.problems.push(format!(
                "phase-1 block census is {c1} conv + {d1} deconv, contract demands {} + {}",
                census.phase1_conv, census.phase1_deconv
            ));
        }
        let (c2, d2) = cfg.block_counts(&[&cfg.dsc, &cfg.dc, &cfg.reg]);
        if (c2, d2) != (census.phase2_conv, census.phase2_deconv) {
            w.problems.push(format!(
                "phase-2 block census is {c2} conv + {d2} deconv, contract demands {} + {}",
                census.phase2_conv, census.phase2_deconv
            ));
        }
    }

    let padded = cfg.padded_hw();
    let mut programs = Vec::new();

    let (mut dsc_prog, trunk) = w.walk_subnet(Branch::Dsc, &cfg.dsc, (3, padded.0, padded.1));
    dsc_prog.push(Instr::Record {
        feature: "dsc.out".into(),
    });
    w.features.insert("dsc.out".into(), trunk);
    programs.push((Branch::Dsc, dsc_prog));

    let (dc_body, dc_exit) = w.walk_subnet(Branch::Dc, &cfg.dc, trunk);
    w.check_decoder_exit("dc", dc_exit, cfg.depth_classes, padded);
    let mut dc_prog = vec![Instr::Select {
        feature: "dsc.out".into(),
    }];
    dc_prog.extend(dc_body);
    dc_prog.push(Instr::Record {
        feature: "dc.out_padded".into(),
    });
    w.features.insert("dc.out_padded".into(), dc_exit);
    if phase == Phase::One {
        dc_prog.push(Instr::CropToInput);
        dc_prog.push(Instr::Head {
            kind: HeadKind::DepthLogits,
        });
    }
    programs.push((Branch::Dc, dc_prog));

    match phase {
        Phase::One => {
            let (sc_body, sc_exit) = w.walk_subnet(Branch::Sc, &cfg.sc, trunk);
            w.check_decoder_exit("sc", sc_exit, cfg.semantic_classes, padded);
            let mut sc_prog = vec![Instr::Select {
                feature: "dsc.out".into(),
            }];
            sc_prog.extend(sc_body);
            sc_prog.push(Instr::CropToInput);
            sc_prog.push(Instr::Head {
                kind: HeadKind::SemanticLogits,
            });
            programs.push((Branch::Sc, sc_prog));
        }
        Phase::Two => {
            let (reg_body, reg_exit) = w.walk_subnet(Branch::Reg, &cfg.reg, dc_exit);
            w.check_decoder_exit("reg", reg_exit, 1, padded);
            let mut reg_prog = vec![Instr::Select {
                feature: "dc.out_padded".into(),
            }];
            reg_prog.extend(reg_body);
            reg_prog.push(Instr::CropToInput);
            reg_prog.push(Instr::Head {
                kind: HeadKind::DepthReg,
            });
            programs.push((Branch::Reg, reg_prog));
        }
    }

    if !w.problems.is_empty() {
        return Err(BuildError::Invalid(w.problems));
    }
    Ok(Plan {
        programs,
        param_specs: w.param_specs,
        bn_specs: w.bn_specs,
        padded,
    })
}

/// Taped forward pass ready for backward and an optimizer step.
pub struct TrainForward<T: Elem> {
    pub tape: Tape<T>,
    /// Parameter bindings in program order: (name, tape leaf).
    pub bindings: Vec<(String, ValueId)>,
    pub depth_logits: Option<ValueId>,
    pub semantic_logits: Option<ValueId>,
    pub depth_reg: Option<ValueId>,
}

/// Head outputs of a deterministic eval-mode pass.
pub struct EvalOutputs<T: Elem> {
    pub depth_logits: Option<Tensor<T>>,
    pub semantic_logits: Option<Tensor<T>>,
    pub depth_reg: Option<Tensor<T>>,
}

pub struct Network<T: Elem> {
    pub config: NetworkConfig,
    pub phase: Phase,
    pub params: ParamStore<T>,
    pub running: BTreeMap<String, RunningStats<T>>,
    plan: Plan,
}

impl<T: Elem> Network<T> {
    /// Validate a config for a phase without building parameters.
    pub fn validate(cfg: &NetworkConfig, phase: Phase) -> Result<(), BuildError> {
        compile(cfg, phase).map(|_| ())
    }

    /// Build the phase-1 network (trunk + both task branches), all
    /// parameters freshly initialized from `seed`.
    pub fn build_phase1(cfg: &NetworkConfig, seed: u64) -> Result<Self, BuildError> {
        let plan = compile(cfg, Phase::One)?;
        let mut params = ParamStore::new();
        for spec in &plan.param_specs {
            params.insert(Parameter {
                name: spec.name.clone(),
                branch: spec.branch,
                value: init_tensor(spec, seed),
            })?;
        }
        let running = plan
            .bn_specs
            .iter()
            .map(|(name, _, c)| (name.clone(), RunningStats::new(*c)))
            .collect();
        Ok(Network {
            config: cfg.clone(),
            phase: Phase::One,
            params,
            running,
            plan,
        })
    }

    /// Build the phase-2 network: trunk and depth-classification state come
    /// from a phase-1 checkpoint, the regression sub-net is freshly
    /// initialized from `seed`. Returns the network plus the checkpoint
    /// entries that were intentionally not consumed (the semantic branch).
    pub fn build_phase2(
        cfg: &NetworkConfig,
        ckpt: &Checkpoint,
        seed: u64,
    ) -> Result<(Self, Vec<String>), BuildError> {
        if ckpt.phase != 1 {
            return Err(BuildError::Invalid(vec![format!(
                "expected a phase-1 checkpoint, found phase {}",
                ckpt.phase
            )]));
        }
        let plan = compile(cfg, Phase::Two)?;
        let mut params = ParamStore::new();
        let mut consumed: Vec<&str> = Vec::new();
        for spec in &plan.param_specs {
            let value = if spec.branch == Branch::Reg {
                init_tensor(spec, seed)
            } else {
                let t = fetch(ckpt, &spec.name, &spec.shape)?;
                consumed.push(&spec.name);
                t
            };
            params.insert(Parameter {
                name: spec.name.clone(),
                branch: spec.branch,
                value,
            })?;
        }
        let mut running = BTreeMap::new();
        for (name, branch, c) in &plan.bn_specs {
            let stats = if *branch == Branch::Reg {
                RunningStats::new(*c)
            } else {
                let mean = fetch::<T>(ckpt, &format!("{name}.running_mean"), &[*c])?;
                let var = fetch::<T>(ckpt, &format!("{name}.running_var"), &[*c])?;
                consumed.push(name);
                RunningStats {
                    mean: mean.data().to_vec(),
                    var: var.data().to_vec(),
                }
            };
            running.insert(name.clone(), stats);
        }
        let consumed: std::collections::HashSet<String> = consumed
            .iter()
            .flat_map(|n| {
                if running.contains_key(*n) {
                    vec![format!("{n}.running_mean"), format!("{n}.running_var")]
                } else {
                    vec![n.to_string()]
                }
            })
            .collect();
        let mut unused: Vec<String> = ckpt
            .tensor_names()
            .filter(|n| !consumed.contains(*n))
            .map(str::to_string)
            .collect();
        unused.sort();
        Ok((
            Network {
                config: cfg.clone(),
                phase: Phase::Two,
                params,
                running,
                plan,
            },
            unused,
        ))
    }

    /// Rebuild a network from its own checkpoint, for inference or
    /// resumption: the checkpoint's phase picks the topology and every
    /// named tensor is restored verbatim.
    pub fn from_checkpoint(cfg: &NetworkConfig, ckpt: &Checkpoint) -> Result<Self, BuildError> {
        let phase = match ckpt.phase {
            1 => Phase::One,
            2 => Phase::Two,
            p => {
                return Err(BuildError::Invalid(vec![format!(
                    "checkpoint phase {p} is not 1 or 2"
                )]))
            }
        };
        let plan = compile(cfg, phase)?;
        let mut params = ParamStore::new();
        for spec in &plan.param_specs {
            params.insert(Parameter {
                name: spec.name.clone(),
                branch: spec.branch,
                value: Tensor::zeros(&spec.shape),
            })?;
        }
        let running = plan
            .bn_specs
            .iter()
            .map(|(name, _, c)| (name.clone(), RunningStats::new(*c)))
            .collect();
        let mut net = Network {
            config: cfg.clone(),
            phase,
            params,
            running,
            plan,
        };
        net.load_state_strict(ckpt)?;
        Ok(net)
    }

    /// All named state for checkpointing: trainable parameters in program
    /// order, then batch-norm running statistics in name order.
    pub fn named_state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for (name, stats) in &self.running {
            out.push((
                format!("{name}.running_mean"),
                Tensor::from_vec(vec![stats.mean.len()], stats.mean.clone()).unwrap(),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::from_vec(vec![stats.var.len()], stats.var.clone()).unwrap(),
            ));
        }
        out
    }

    /// Restore every named tensor from a checkpoint of the same topology.
    /// Unknown or missing names and shape mismatches are errors.
    pub fn load_state_strict(&mut self, ckpt: &Checkpoint) -> Result<(), BuildError> {
        let mut expected: HashMap<String, ()> = HashMap::new();
        for (name, _) in self.named_state() {
            expected.insert(name, ());
        }
        for nt in &ckpt.tensors {
            if !expected.contains_key(&nt.name) {
                return Err(BuildError::Invalid(vec![format!(
                    "checkpoint carries unknown tensor {}",
                    nt.name
                )]));
            }
        }
        for p in self.params.iter_mut() {
            let t = fetch_raw(ckpt, &p.name)?;
            check_shape(&p.name, p.value.shape(), t.shape())?;
            p.value = convert(t);
        }
        for (name, stats) in self.running.iter_mut() {
            let mean = fetch_raw(ckpt, &format!("{name}.running_mean"))?;
            let var = fetch_raw(ckpt, &format!("{name}.running_var"))?;
            check_shape(name, &[stats.mean.len()], mean.shape())?;
            check_shape(name, &[stats.var.len()], var.shape())?;
            stats.mean = convert::<T>(mean).data().to_vec();
            stats.var = convert::<T>(var).data().to_vec();
        }
        Ok(())
    }

    /// Snapshot all named state as 32-bit tensors for a checkpoint.
    pub fn state_tensors_f32(&self) -> Vec<NamedTensor> {
        self.named_state()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                tensor: Tensor::from_vec(
                    t.shape().to_vec(),
                    t.data().iter().map(|v| v.to_f64().unwrap() as f32).collect(),
                )
                .unwrap(),
            })
            .collect()
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(usize, usize), TensorError> {
        let (_, c, h, w) = input.dims4()?;
        if c != 3 || h != self.config.input_h || w != self.config.input_w {
            return Err(TensorError::Dimension {
                context: "forward",
                detail: format!(
                    "expected Nx3x{}x{} input, got {:?}",
                    self.config.input_h,
                    self.config.input_w,
                    input.shape()
                ),
            });
        }
        Ok((self.plan.padded.0 - h, self.plan.padded.1 - w))
    }

    /// Record a train-mode forward pass of the sub-net chain selected by
    /// `path`. Dropout draws from `step_seed`; batch-norm running stats
    /// update in place. The pass binds only the parameters the path
    /// touches, so backward cannot reach inactive branches.
    pub fn forward_train(
        &mut self,
        input: &Tensor<T>,
        path: ForwardPath,
        step_seed: u64,
    ) -> Result<TrainForward<T>, TensorError> {
        let (pad_b, pad_r) = self.check_input(input)?;
        let branches: &[Branch] = match (self.phase, path) {
            (Phase::One, ForwardPath::Depth) => &[Branch::Dsc, Branch::Dc],
            (Phase::One, ForwardPath::Semantic) => &[Branch::Dsc, Branch::Sc],
            (Phase::Two, ForwardPath::Regression) => &[Branch::Dsc, Branch::Dc, Branch::Reg],
            (phase, path) => {
                return Err(TensorError::Dimension {
                    context: "forward",
                    detail: format!("path {path:?} is not available in {phase:?}"),
                })
            }
        };

        let Network {
            config,
            params,
            running,
            plan,
            ..
        } = self;
        let mut tape = Tape::new();
        let padded = ops::pad_hw(input, pad_b, pad_r);
        let input_id = tape.leaf(padded, false);

        let mut bound: HashMap<String, ValueId> = HashMap::new();
        let mut bindings: Vec<(String, ValueId)> = Vec::new();
        let mut features: HashMap<String, ValueId> = HashMap::new();
        let mut heads: HashMap<HeadKind, ValueId> = HashMap::new();
        let mut cur = input_id;

        let bind = |name: &str, tape: &mut Tape<T>,
                        bound: &mut HashMap<String, ValueId>,
                        bindings: &mut Vec<(String, ValueId)>| {
            if let Some(&id) = bound.get(name) {
                id
            } else {
                let value = params
                    .get(name)
                    .unwrap_or_else(|| panic!("compiled parameter {name} missing"))
                    .value
                    .clone();
                let id = tape.leaf(value, true);
                bound.insert(name.to_string(), id);
                bindings.push((name.to_string(), id));
                id
            }
        };

        for (branch, prog) in &plan.programs {
            if !branches.contains(branch) {
                continue;
            }
            for instr in prog {
                match instr {
                    Instr::Conv {
                        weight,
                        bias,
                        stride,
                        pad,
                    } => {
                        let w = bind(weight, &mut tape, &mut bound, &mut bindings);
                        let b = bind(bias, &mut tape, &mut bound, &mut bindings);
                        cur = tape.conv2d(cur, w, b, *stride, *pad)?;
                    }
                    Instr::Deconv {
                        weight,
                        bias,
                        stride,
                        pad,
                    } => {
                        let w = bind(weight, &mut tape, &mut bound, &mut bindings);
                        let b = bind(bias, &mut tape, &mut bound, &mut bindings);
                        cur = tape.deconv2d(cur, w, b, *stride, *pad)?;
                    }
                    Instr::Bn { name } => {
                        let s = bind(&format!("{name}.scale"), &mut tape, &mut bound, &mut bindings);
                        let sh = bind(&format!("{name}.shift"), &mut tape, &mut bound, &mut bindings);
                        let stats = running.get_mut(name).expect("compiled bn stats missing");
                        cur = tape.batch_norm_train(
                            cur,
                            s,
                            sh,
                            stats,
                            el(BN_EPS),
                            el(BN_MOMENTUM),
                        )?;
                    }
                    Instr::Dropout { rate, tag } => {
                        cur = tape.dropout(cur, *rate, derive_stream(step_seed, tag))?;
                    }
                    Instr::Relu => cur = tape.relu(cur),
                    Instr::Pool { window } => cur = tape.avg_pool(cur, *window)?,
                    Instr::ConcatFeature { feature } => {
                        let f = features[feature.as_str()];
                        cur = tape.concat(cur, f)?;
                    }
                    Instr::Record { feature } => {
                        features.insert(feature.clone(), cur);
                    }
                    Instr::Select { feature } => cur = features[feature.as_str()],
                    Instr::CropToInput => {
                        cur = tape.crop(cur, config.input_h, config.input_w);
                    }
                    Instr::Head { kind } => {
                        heads.insert(*kind, cur);
                    }
                }
            }
        }

        Ok(TrainForward {
            tape,
            bindings,
            depth_logits: heads.get(&HeadKind::DepthLogits).copied(),
            semantic_logits: heads.get(&HeadKind::SemanticLogits).copied(),
            depth_reg: heads.get(&HeadKind::DepthReg).copied(),
        })
    }

    /// Deterministic eval-mode forward: batch norm uses running statistics,
    /// dropout is identity, nothing is recorded. Runs every head the phase
    /// exposes.
    pub fn forward_eval(&self, input: &Tensor<T>) -> Result<EvalOutputs<T>, TensorError> {
        let (pad_b, pad_r) = self.check_input(input)?;
        let mut features: HashMap<String, Tensor<T>> = HashMap::new();
        let mut heads: HashMap<HeadKind, Tensor<T>> = HashMap::new();
        let mut cur = ops::pad_hw(input, pad_b, pad_r);

        let value = |name: &str| -> &Tensor<T> {
            &self
                .params
                .get(name)
                .unwrap_or_else(|| panic!("compiled parameter {name} missing"))
                .value
        };

        for (_, prog) in &self.plan.programs {
            for instr in prog {
                match instr {
                    Instr::Conv {
                        weight,
                        bias,
                        stride,
                        pad,
                    } => cur = ops::conv2d(&cur, value(weight), value(bias), *stride, *pad)?,
                    Instr::Deconv {
                        weight,
                        bias,
                        stride,
                        pad,
                    } => cur = ops::deconv2d(&cur, value(weight), value(bias), *stride, *pad)?,
                    Instr::Bn { name } => {
                        let stats = &self.running[name];
                        cur = ops::batch_norm_eval(
                            &cur,
                            value(&format!("{name}.scale")),
                            value(&format!("{name}.shift")),
                            stats,
                            el(BN_EPS),
                        )?;
                    }
                    Instr::Dropout { .. } => {}
                    Instr::Relu => cur = ops::relu(&cur),
                    Instr::Pool { window } => cur = ops::avg_pool(&cur, *window)?,
                    Instr::ConcatFeature { feature } => {
                        cur = ops::concat_channels(&cur, &features[feature.as_str()])?;
                    }
                    Instr::Record { feature } => {
                        features.insert(feature.clone(), cur.clone());
                    }
                    Instr::Select { feature } => cur = features[feature.as_str()].clone(),
                    Instr::CropToInput => {
                        cur = ops::crop_hw(&cur, self.config.input_h, self.config.input_w);
                    }
                    Instr::Head { kind } => {
                        heads.insert(*kind, cur.clone());
                    }
                }
            }
        }
        Ok(EvalOutputs {
            depth_logits: heads.remove(&HeadKind::DepthLogits),
            semantic_logits: heads.remove(&HeadKind::SemanticLogits),
            depth_reg: heads.remove(&HeadKind::DepthReg),
        })
    }
}

fn init_tensor<T: Elem>(spec: &ParamSpec, seed: u64) -> Tensor<T> {
    match spec.init {
        Init::He { fan_in } => he_init(&spec.shape, fan_in, seed, &spec.name),
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Ones => Tensor::full(&spec.shape, el(1.0)),
    }
}

fn convert<T: Elem>(src: &Tensor<f32>) -> Tensor<T> {
    Tensor::from_vec(
        src.shape().to_vec(),
        src.data().iter().map(|&v| el::<T>(v as f64)).collect(),
    )
    .unwrap()
}

fn fetch_raw<'c>(ckpt: &'c Checkpoint, name: &str) -> Result<&'c Tensor<f32>, BuildError> {
    ckpt.tensor(name)
        .ok_or_else(|| BuildError::MissingParameter(name.to_string()))
}

fn check_shape(name: &str, expected: &[usize], got: &[usize]) -> Result<(), BuildError> {
    if expected != got {
        return Err(BuildError::ParameterShape {
            name: name.to_string(),
            expected: expected.to_vec(),
            found: got.to_vec(),
        });
    }
    Ok(())
}

fn fetch<T: Elem>(ckpt: &Checkpoint, name: &str, shape: &[usize]) -> Result<Tensor<T>, BuildError> {
    let t = fetch_raw(ckpt, name)?;
    check_shape(name, shape, t.shape())?;
    Ok(convert(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkConfig;
    use std::sync::Arc;

    fn tiny_input(seed: u64) -> Tensor<f32> {
        let cfg = NetworkConfig::tiny();
        let n = 3 * cfg.input_h * cfg.input_w;
        let data = (0..n)
            .map(|i| (((i as u64).wrapping_mul(seed * 2 + 1) % 251) as f32) / 251.0)
            .collect();
        Tensor::from_vec(vec![1, 3, cfg.input_h, cfg.input_w], data).unwrap()
    }

    #[test]
    fn builds_are_seed_deterministic() {
        let cfg = NetworkConfig::tiny();
        let a = Network::<f32>::build_phase1(&cfg, 7).unwrap();
        let b = Network::<f32>::build_phase1(&cfg, 7).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.name, pb.name);
            assert!(pa.value.bit_eq(&pb.value), "{} differs", pa.name);
        }
        let c = Network::<f32>::build_phase1(&cfg, 8).unwrap();
        let any_differs = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|(pa, pc)| !pa.value.bit_eq(&pc.value));
        assert!(any_differs);
    }

    #[test]
    fn phase1_parameters_partition_into_three_branches() {
        let net = Network::<f32>::build_phase1(&NetworkConfig::tiny(), 1).unwrap();
        for p in net.params.iter() {
            let prefix = p.name.split('.').next().unwrap();
            assert_eq!(prefix, p.branch.tag(), "{}", p.name);
            assert!(matches!(p.branch, Branch::Dsc | Branch::Dc | Branch::Sc));
        }
        let branches: std::collections::HashSet<Branch> =
            net.params.iter().map(|p| p.branch).collect();
        assert_eq!(branches.len(), 3);
    }

    #[test]
    fn tiny_eval_head_shapes_match_input_resolution() {
        let net = Network::<f32>::build_phase1(&NetworkConfig::tiny(), 3).unwrap();
        let out = net.forward_eval(&tiny_input(1)).unwrap();
        assert_eq!(out.depth_logits.unwrap().shape(), &[1, 24, 32, 64]);
        assert_eq!(out.semantic_logits.unwrap().shape(), &[1, 19, 32, 64]);
        assert!(out.depth_reg.is_none());
    }

    #[test]
    fn eval_is_idempotent() {
        let net = Network::<f32>::build_phase1(&NetworkConfig::tiny(), 3).unwrap();
        let x = tiny_input(2);
        let a = net.forward_eval(&x).unwrap();
        let b = net.forward_eval(&x).unwrap();
        assert!(a
            .depth_logits
            .unwrap()
            .bit_eq(&b.depth_logits.unwrap()));
        assert!(a
            .semantic_logits
            .unwrap()
            .bit_eq(&b.semantic_logits.unwrap()));
    }

    #[test]
    fn depth_path_binds_only_trunk_and_depth_branch() {
        let mut net = Network::<f32>::build_phase1(&NetworkConfig::tiny(), 5).unwrap();
        let fwd = net.forward_train(&tiny_input(3), ForwardPath::Depth, 11).unwrap();
        assert!(fwd.depth_logits.is_some());
        assert!(fwd.semantic_logits.is_none());
        for (name, _) in &fwd.bindings {
            assert!(
                name.starts_with("dsc.") || name.starts_with("dc."),
                "unexpected binding {name}"
            );
        }
        // and every bound parameter is reachable from the loss
        let logits = fwd.depth_logits.unwrap();
        let n = fwd.tape.value(logits).numel();
        let classes = 24;
        let px = n / classes;
        let mut tape = fwd.tape;
        let loss = tape
            .softmax_cross_entropy(
                logits,
                Arc::new(vec![0u32; px]),
                Arc::new(vec![true; px]),
            )
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        for (name, id) in &fwd.bindings {
            assert!(grads.get(*id).is_some(), "{name} received no gradient");
        }
    }

    #[test]
    fn semantic_path_binds_only_trunk_and_semantic_branch() {
        let mut net = Network::<f32>::build_phase1(&NetworkConfig::tiny(), 5).unwrap();
        let fwd = net
            .forward_train(&tiny_input(3), ForwardPath::Semantic, 11)
            .unwrap();
        assert!(fwd.semantic_logits.is_some());
        assert!(fwd.depth_logits.is_none());
        for (name, _) in &fwd.bindings {
            assert!(
                name.starts_with("dsc.") || name.starts_with("sc."),
                "unexpected binding {name}"
            );
        }
    }

    #[test]
    fn train_forward_is_repeatable_for_fixed_step_seed() {
        let cfg = NetworkConfig::tiny();
        let x = tiny_input(4);
        let run = |step_seed: u64| {
            let mut net = Network::<f32>::build_phase1(&cfg, 9).unwrap();
            let fwd = net.forward_train(&x, ForwardPath::Depth, step_seed).unwrap();
            let id = fwd.depth_logits.unwrap();
            fwd.tape.value(id).clone()
        };
        assert!(run(42).bit_eq(&run(42)));
        assert!(!run(42).bit_eq(&run(43)));
    }

    #[test]
    fn phase2_loads_trunk_and_reports_semantic_leftovers() {
        let cfg = NetworkConfig::tiny();
        let p1 = Network::<f32>::build_phase1(&cfg, 21).unwrap();
        let ckpt = Checkpoint {
            phase: 1,
            iteration: 0,
            tensors: p1.state_tensors_f32(),
            optimizer: vec![],
            config_echo: String::new(),
        };
        let (p2, unused) = Network::<f32>::build_phase2(&cfg, &ckpt, 22).unwrap();
        assert_eq!(p2.phase, Phase::Two);
        // loaded values are bitwise equal to the checkpoint
        for p in p2.params.iter().filter(|p| p.branch != Branch::Reg) {
            let src = ckpt.tensor(&p.name).unwrap();
            assert!(p.value.bits_eq_f32(src), "{} differs", p.name);
        }
        // exactly the semantic branch is reported unused
        assert!(!unused.is_empty());
        for name in &unused {
            assert!(name.starts_with("sc."), "unexpected leftover {name}");
        }
        let expected: usize = ckpt
            .tensor_names()
            .filter(|n| n.starts_with("sc."))
            .count();
        assert_eq!(unused.len(), expected);
    }

    #[test]
    fn phase2_missing_parameter_is_named() {
        let cfg = NetworkConfig::tiny();
        let p1 = Network::<f32>::build_phase1(&cfg, 21).unwrap();
        let mut tensors = p1.state_tensors_f32();
        let victim = tensors
            .iter()
            .position(|t| t.name.starts_with("dc."))
            .unwrap();
        let victim_name = tensors[victim].name.clone();
        tensors.remove(victim);
        let ckpt = Checkpoint {
            phase: 1,
            iteration: 0,
            tensors,
            optimizer: vec![],
            config_echo: String::new(),
        };
        let err = Network::<f32>::build_phase2(&cfg, &ckpt, 1).map(|_| ()).unwrap_err();
        assert!(err.to_string().contains(&victim_name), "{err}");
    }

    #[test]
    fn phase2_shape_mismatch_is_named() {
        let cfg = NetworkConfig::tiny();
        let p1 = Network::<f32>::build_phase1(&cfg, 21).unwrap();
        let mut tensors = p1.state_tensors_f32();
        let victim = tensors
            .iter()
            .position(|t| t.name.ends_with("conv.weight"))
            .unwrap();
        tensors[victim].tensor = Tensor::zeros(&[1, 1, 1, 1]);
        let name = tensors[victim].name.clone();
        let ckpt = Checkpoint {
            phase: 1,
            iteration: 0,
            tensors,
            optimizer: vec![],
            config_echo: String::new(),
        };
        let err = Network::<f32>::build_phase2(&cfg, &ckpt, 1).map(|_| ()).unwrap_err();
        assert!(err.to_string().contains(&name), "{err}");
    }

    #[test]
    fn phase2_exposes_exactly_one_head() {
        let cfg = NetworkConfig::tiny();
        let p1 = Network::<f32>::build_phase1(&cfg, 2).unwrap();
        let ckpt = Checkpoint {
            phase: 1,
            iteration: 0,
            tensors: p1.state_tensors_f32(),
            optimizer: vec![],
            config_echo: String::new(),
        };
        let (p2, _) = Network::<f32>::build_phase2(&cfg, &ckpt, 3).unwrap();
        let out = p2.forward_eval(&tiny_input(5)).unwrap();
        assert!(out.depth_reg.is_some());
        assert!(out.depth_logits.is_none());
        assert!(out.semantic_logits.is_none());
        assert_eq!(out.depth_reg.unwrap().shape(), &[1, 1, 32, 64]);
    }

    #[test]
    fn wrong_input_geometry_is_a_dimension_error() {
        let net = Network::<f32>::build_phase1(&NetworkConfig::tiny(), 2).unwrap();
        let bad = Tensor::<f32>::zeros(&[1, 3, 16, 16]);
        assert!(net.forward_eval(&bad).is_err());
    }

    #[test]
    fn validation_collects_multiple_violations() {
        let mut cfg = NetworkConfig::tiny();
        // break two independent things: head relu and a skip target
        cfg.dc.deconv_blocks.last_mut().unwrap().relu = true;
        cfg.dsc.deconv_blocks[0].skip = Some("dsc.blk9.prepool".into());
        let err = Network::<f32>::validate(&cfg, Phase::One).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dc head must not apply relu"), "{msg}");
        assert!(msg.contains("dsc.blk9.prepool"), "{msg}");
    }

    #[test]
    fn census_violation_reported_at_build() {
        let mut cfg = NetworkConfig::paper_scale();
        cfg.sc.deconv_blocks.pop();
        let err = Network::<f32>::validate(&cfg, Phase::One).unwrap_err();
        assert!(err.to_string().contains("census"), "{err}");
    }

    #[test]
    fn strict_state_load_round_trips() {
        let cfg = NetworkConfig::tiny();
        let src = Network::<f32>::build_phase1(&cfg, 31).unwrap();
        let ckpt = Checkpoint {
            phase: 1,
            iteration: 5,
            tensors: src.state_tensors_f32(),
            optimizer: vec![],
            config_echo: String::new(),
        };
        let mut dst = Network::<f32>::build_phase1(&cfg, 99).unwrap();
        dst.load_state_strict(&ckpt).unwrap();
        for (a, b) in src.params.iter().zip(dst.params.iter()) {
            assert!(a.value.bit_eq(&b.value), "{} differs", a.name);
        }
    }
}
