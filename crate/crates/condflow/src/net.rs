//! Declarative network configuration.
//!
//! A [`NetworkConfig`] lists the building blocks of four sub-nets:
//!
//! * `dsc`: the shared encoder trunk, pooled after every conv block, plus a
//!   short deconv chain whose output both task branches consume.
//! * `dc`: depth-classification decoder ending in a class-logit head.
//! * `sc`: semantic-segmentation decoder ending in a class-logit head.
//! * `reg`: regression refinement that re-encodes the depth logits and
//!   decodes a single-channel metric depth map (phase 2 only).
//!
//! Configs are usually produced by [`NetworkConfig::generate`] from a block
//! census per sub-net; `paper-scale` and `tiny` are canned presets. The
//! builder validates a config structurally before any parameter exists.

use crate::error::BuildError;

/// One Conv -> BatchNorm -> Dropout -> ReLU unit. The order is fixed;
/// the flags only switch individual stages off.
#[derive(Clone, Debug, PartialEq)]
pub struct BasicSet {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bn: bool,
    pub dropout: f64,
    pub relu: bool,
}

impl BasicSet {
    fn standard(in_ch: usize, out_ch: usize, dropout: f64) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            pad: 1,
            bn: true,
            dropout,
            relu: true,
        }
    }
}

/// Chain of 2..=4 basic sets, optionally followed by 2x2 average pooling.
/// The activation entering the pool is recorded as `<branch>.blk<i>.prepool`
/// and is available to later skip connections.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlk {
    pub sets: Vec<BasicSet>,
    pub pool: bool,
}

/// One deconvolution, optionally ReLU-activated, optionally concatenated
/// with a named recorded feature of matching spatial size.
#[derive(Clone, Debug, PartialEq)]
pub struct DeconvBlk {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
    pub skip: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SubNetSpec {
    pub conv_blocks: Vec<ConvBlk>,
    pub deconv_blocks: Vec<DeconvBlk>,
}

impl SubNetSpec {
    pub fn pool_count(&self) -> usize {
        self.conv_blocks.iter().filter(|b| b.pool).count()
    }
}

/// Block-count contract enforced at build time when present.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Census {
    pub phase1_conv: usize,
    pub phase1_deconv: usize,
    pub phase2_conv: usize,
    pub phase2_deconv: usize,
}

/// Block counts per sub-net fed to the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Topology {
    pub dsc_conv: usize,
    pub dsc_deconv: usize,
    pub dc_conv: usize,
    pub dc_deconv: usize,
    pub sc_conv: usize,
    pub sc_deconv: usize,
    pub reg_conv: usize,
    pub reg_deconv: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub depth_classes: usize,
    pub semantic_classes: usize,
    pub scale: f64,
    pub dropout: f64,
    pub dsc: SubNetSpec,
    pub dc: SubNetSpec,
    pub sc: SubNetSpec,
    pub reg: SubNetSpec,
    pub census: Option<Census>,
}

/// Narrowest channel width for a given scale; widths double per level.
pub fn base_channels(scale: f64) -> usize {
    ((32.0 * scale).round() as usize).max(1)
}

/// Channel width at encoder level `l`, capped at 16x the base.
pub fn channels_at(base: usize, level: usize) -> usize {
    let cap = base * 16;
    if level >= 5 {
        return cap;
    }
    (base << level).min(cap)
}

impl NetworkConfig {
    /// Full-size configuration: 188x620 input, block split
    /// DSC 5+1, DC 2+4, SC 2+6, REG 2+2, census 9/11 and 9/7 enforced.
    pub fn paper_scale() -> Self {
        Self::generate(
            188,
            620,
            24,
            19,
            1.0,
            0.25,
            Topology {
                dsc_conv: 5,
                dsc_deconv: 1,
                dc_conv: 2,
                dc_deconv: 4,
                sc_conv: 2,
                sc_deconv: 6,
                reg_conv: 2,
                reg_deconv: 2,
            },
            Some(Census {
                phase1_conv: 9,
                phase1_deconv: 11,
                phase2_conv: 9,
                phase2_deconv: 7,
            }),
        )
        .expect("paper-scale preset is well-formed")
    }

    /// Desk-scale configuration for tests: 32x64 input, quarter-width
    /// channels, one block per branch stage.
    pub fn tiny() -> Self {
        Self::generate(
            32,
            64,
            24,
            19,
            0.25,
            0.25,
            Topology {
                dsc_conv: 2,
                dsc_deconv: 1,
                dc_conv: 1,
                dc_deconv: 1,
                sc_conv: 1,
                sc_deconv: 1,
                reg_conv: 1,
                reg_deconv: 1,
            },
            None,
        )
        .expect("tiny preset is well-formed")
    }

    pub fn preset(name: &str) -> Result<Self, BuildError> {
        match name {
            "paper-scale" => Ok(Self::paper_scale()),
            "tiny" => Ok(Self::tiny()),
            other => Err(BuildError::Invalid(vec![format!(
                "unknown preset {other:?}; known presets: paper-scale, tiny"
            )])),
        }
    }

    /// Derive a full block-level config from per-sub-net block counts.
    ///
    /// Rules: every DSC and REG conv block pools; DSC blocks use 2 sets for
    /// the first two levels and 3 after that, other branches use 2; conv is
    /// 3x3 stride 1 pad 1; upsampling deconv is 4x4 stride 2 pad 1;
    /// resolution-preserving deconv is 3x3 stride 1 pad 1. Decoder chains
    /// alternate upsampling and preserving blocks starting with an
    /// upsample, switching to forced upsamples once the remaining slots are
    /// all needed to reach input resolution. Non-head upsamples concatenate
    /// the encoder feature recorded at their target resolution (DSC features
    /// for the task branches, REG's own for the regression decoder). Each
    /// chain ends in a head: no ReLU, no skip, class count (or 1) channels.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        input_h: usize,
        input_w: usize,
        depth_classes: usize,
        semantic_classes: usize,
        scale: f64,
        dropout: f64,
        topo: Topology,
        census: Option<Census>,
    ) -> Result<Self, BuildError> {
        let mut problems = Vec::new();
        if input_h == 0 || input_w == 0 {
            problems.push(format!("input geometry {input_h}x{input_w} is empty"));
        }
        if depth_classes < 2 {
            problems.push(format!("need at least 2 depth classes, got {depth_classes}"));
        }
        if semantic_classes < 2 {
            problems.push(format!(
                "need at least 2 semantic classes, got {semantic_classes}"
            ));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            problems.push(format!("channel scale must be positive, got {scale}"));
        }
        if !(0.0..1.0).contains(&dropout) {
            problems.push(format!("dropout rate must be in [0,1), got {dropout}"));
        }
        if topo.dsc_conv == 0 {
            problems.push("dsc needs at least one conv block".into());
        }
        if topo.dsc_deconv > topo.dsc_conv {
            problems.push(format!(
                "dsc has {} deconv blocks but only {} pooling levels to climb",
                topo.dsc_deconv, topo.dsc_conv
            ));
        }
        if topo.reg_conv == 0 {
            problems.push("reg needs at least one conv block".into());
        }
        if !problems.is_empty() {
            return Err(BuildError::Invalid(problems));
        }

        let base = base_channels(scale);
        let ch = |l: usize| channels_at(base, l);
        let levels = topo.dsc_conv;
        let trunk_level = levels - topo.dsc_deconv;

        for (branch, slots, needed) in [
            ("dc", topo.dc_deconv, trunk_level),
            ("sc", topo.sc_deconv, trunk_level),
            ("reg", topo.reg_deconv, topo.reg_conv),
        ] {
            if slots < needed.max(1) {
                problems.push(format!(
                    "{branch} has {slots} deconv blocks but needs at least {} \
                     to decode back to input resolution",
                    needed.max(1)
                ));
            }
        }
        if !problems.is_empty() {
            return Err(BuildError::Invalid(problems));
        }

        // shared encoder: ch doubles per pooled level
        let mut dsc = SubNetSpec::default();
        for i in 1..=levels {
            let n_sets = if i <= 2 { 2 } else { 3 };
            let block_in = if i == 1 { 3 } else { ch(i - 2) };
            let out = ch(i - 1);
            let sets = (0..n_sets)
                .map(|j| BasicSet::standard(if j == 0 { block_in } else { out }, out, dropout))
                .collect();
            dsc.conv_blocks.push(ConvBlk { sets, pool: true });
        }
        let mut cur_ch = ch(levels - 1);
        for j in 1..=topo.dsc_deconv {
            let new_level = levels - j;
            let out = ch(new_level);
            dsc.deconv_blocks.push(DeconvBlk {
                in_ch: cur_ch,
                out_ch: out,
                kernel: 4,
                stride: 2,
                pad: 1,
                relu: true,
                skip: Some(format!("dsc.blk{}.prepool", new_level + 1)),
            });
            cur_ch = 2 * out;
        }
        let trunk_ch = cur_ch;

        let task_branch = |conv_n: usize, slots: usize, classes: usize| -> SubNetSpec {
            let mut spec = SubNetSpec::default();
            let mid = ch(trunk_level);
            let mut cur = trunk_ch;
            for k in 0..conv_n {
                let sets = vec![
                    BasicSet::standard(if k == 0 { cur } else { mid }, mid, dropout),
                    BasicSet::standard(mid, mid, dropout),
                ];
                spec.conv_blocks.push(ConvBlk { sets, pool: false });
                cur = mid;
            }
            spec.deconv_blocks =
                decoder_chain(cur, trunk_level, slots, classes, "dsc", base);
            spec
        };
        let dc = task_branch(topo.dc_conv, topo.dc_deconv, depth_classes);
        let sc = task_branch(topo.sc_conv, topo.sc_deconv, semantic_classes);

        // regression refinement: re-encode the depth logits, decode to meters
        let mut reg = SubNetSpec::default();
        for k in 1..=topo.reg_conv {
            let block_in = if k == 1 { depth_classes } else { ch(k - 2) };
            let out = ch(k - 1);
            let sets = vec![
                BasicSet::standard(block_in, out, dropout),
                BasicSet::standard(out, out, dropout),
            ];
            reg.conv_blocks.push(ConvBlk { sets, pool: true });
        }
        reg.deconv_blocks = decoder_chain(
            ch(topo.reg_conv - 1),
            topo.reg_conv,
            topo.reg_deconv,
            1,
            "reg",
            base,
        );

        Ok(NetworkConfig {
            input_h,
            input_w,
            depth_classes,
            semantic_classes,
            scale,
            dropout,
            dsc,
            dc,
            sc,
            reg,
            census,
        })
    }

    /// Spatial divisibility the padded input must satisfy so every pool in
    /// every path sees even dimensions.
    pub fn pool_multiple(&self) -> usize {
        let task = self.dc.pool_count().max(self.sc.pool_count());
        let deepest = (self.dsc.pool_count() + task).max(self.reg.pool_count());
        1usize << deepest
    }

    /// Input size after padding up to the next pool multiple.
    pub fn padded_hw(&self) -> (usize, usize) {
        let m = self.pool_multiple();
        (self.input_h.div_ceil(m) * m, self.input_w.div_ceil(m) * m)
    }

    /// (conv, deconv) block totals over the given sub-nets.
    pub fn block_counts(&self, subnets: &[&SubNetSpec]) -> (usize, usize) {
        let conv = subnets.iter().map(|s| s.conv_blocks.len()).sum();
        let deconv = subnets.iter().map(|s| s.deconv_blocks.len()).sum();
        (conv, deconv)
    }
}

/// Deconv chain from `start_level` down to input resolution in exactly
/// `slots` blocks, ending in a head block with `classes` output channels.
fn decoder_chain(
    in_ch: usize,
    start_level: usize,
    slots: usize,
    classes: usize,
    skip_prefix: &str,
    base: usize,
) -> Vec<DeconvBlk> {
    let ch = |l: usize| channels_at(base, l);
    let mut blocks = Vec::with_capacity(slots);
    let mut cur_ch = in_ch;
    let mut cur_level = start_level;
    let mut ups_left = start_level;
    let mut next_up = true;
    for slot in 1..=slots {
        let remaining = slots - slot + 1;
        let head = slot == slots;
        let up = ups_left > 0 && (remaining == ups_left || next_up);
        if up {
            ups_left -= 1;
            next_up = false;
        } else {
            next_up = true;
        }
        let (kernel, stride, pad) = if up { (4, 2, 1) } else { (3, 1, 1) };
        if head {
            blocks.push(DeconvBlk {
                in_ch: cur_ch,
                out_ch: classes,
                kernel,
                stride,
                pad,
                relu: false,
                skip: None,
            });
        } else if up {
            let new_level = cur_level - 1;
            let out = ch(new_level);
            blocks.push(DeconvBlk {
                in_ch: cur_ch,
                out_ch: out,
                kernel,
                stride,
                pad,
                relu: true,
                skip: Some(format!("{skip_prefix}.blk{}.prepool", new_level + 1)),
            });
            cur_ch = 2 * out;
        } else {
            let out = ch(cur_level);
            blocks.push(DeconvBlk {
                in_ch: cur_ch,
                out_ch: out,
                kernel,
                stride,
                pad,
                relu: true,
                skip: None,
            });
            cur_ch = out;
        }
        if up {
            cur_level -= 1;
        }
    }
    blocks
}
