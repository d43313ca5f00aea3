//! Run configuration: a line-oriented `key = value` file with dotted
//! section prefixes. Everything validates up front; unknown keys are
//! rejected wholesale so typos cannot silently fall back to defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Origin;
use crate::error::ConfigError;
use crate::net::{Census, NetworkConfig, Topology};
use crate::train::TrainConfig;

/// Every key the schema knows, in render order.
const KNOWN_KEYS: &[&str] = &[
    "network.preset",
    "network.input_h",
    "network.input_w",
    "network.depth_classes",
    "network.semantic_classes",
    "network.scale",
    "network.dropout",
    "train.alpha",
    "train.beta1",
    "train.beta2",
    "train.weight_decay",
    "train.depth_batch",
    "train.semantic_batch",
    "train.iterations",
    "train.seed",
    "train.phase",
    "train.checkpoint_every",
    "data.depth_dir",
    "data.semantic_dir",
    "data.eval_dir",
    "data.gen_count",
    "data.gen_seed",
    "data.gen_origin",
    "pre.l0_smooth",
    "pre.augment",
    "out.dir",
];

/// Full run description: network preset plus scalar overrides, optimizer
/// schedule, dataset locations, preprocessing toggles, output directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network_preset: String,
    pub input_h: Option<usize>,
    pub input_w: Option<usize>,
    pub depth_classes: Option<usize>,
    pub semantic_classes: Option<usize>,
    pub scale: Option<f64>,
    pub dropout: Option<f64>,
    pub train: TrainConfig,
    pub depth_dir: Option<PathBuf>,
    pub semantic_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub gen_count: usize,
    pub gen_seed: u64,
    pub gen_origin: Origin,
    pub l0_smooth: bool,
    pub augment: bool,
    pub out_dir: PathBuf,
}

fn parse_lines(path: &str, text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |detail: String| ConfigError::Parse {
            path: path.to_string(),
            line: i + 1,
            detail,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, found {line:?}")))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(err("empty key".into()));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(err(format!("duplicate key {key}")));
        }
    }
    Ok(map)
}

struct Getter {
    map: BTreeMap<String, String>,
}

impl Getter {
    fn raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| ConfigError::Value {
                key: key.to_string(),
                detail: format!("{e} (value {v:?})"),
            }),
        }
    }

    fn or_default<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn bool_or(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.raw(key).as_deref() {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(ConfigError::Value {
                key: key.to_string(),
                detail: format!("expected true or false, found {v:?}"),
            }),
        }
    }
}

impl RunConfig {
    /// Parse and validate; `path` only labels error messages.
    pub fn parse(path: &str, text: &str) -> Result<Self, ConfigError> {
        let map = parse_lines(path, text)?;
        let unknown: Vec<String> = map
            .keys()
            .filter(|k| !KNOWN_KEYS.contains(&k.as_str()))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        let mut g = Getter { map };

        let defaults = TrainConfig::default();
        let train = TrainConfig {
            alpha: g.or_default("train.alpha", defaults.alpha)?,
            beta1: g.or_default("train.beta1", defaults.beta1)?,
            beta2: g.or_default("train.beta2", defaults.beta2)?,
            weight_decay: g.or_default("train.weight_decay", defaults.weight_decay)?,
            depth_batch: g.or_default("train.depth_batch", defaults.depth_batch)?,
            semantic_batch: g.or_default("train.semantic_batch", defaults.semantic_batch)?,
            iterations: g.or_default("train.iterations", defaults.iterations)?,
            seed: g.or_default("train.seed", defaults.seed)?,
            phase: g.or_default("train.phase", defaults.phase)?,
            checkpoint_every: g.or_default("train.checkpoint_every", defaults.checkpoint_every)?,
        };
        train
            .validate()
            .map_err(|e| ConfigError::Value {
                key: "train".into(),
                detail: e.to_string(),
            })?;

        let gen_origin = match g.raw("data.gen_origin").as_deref() {
            None => Origin::Depth,
            Some(v) => Origin::parse(v).ok_or_else(|| ConfigError::Value {
                key: "data.gen_origin".into(),
                detail: format!("expected depth or semantic, found {v:?}"),
            })?,
        };

        let cfg = Self {
            network_preset: g.raw("network.preset").unwrap_or_else(|| "tiny".into()),
            input_h: g.parse("network.input_h")?,
            input_w: g.parse("network.input_w")?,
            depth_classes: g.parse("network.depth_classes")?,
            semantic_classes: g.parse("network.semantic_classes")?,
            scale: g.parse("network.scale")?,
            dropout: g.parse("network.dropout")?,
            train,
            depth_dir: g.raw("data.depth_dir").map(PathBuf::from),
            semantic_dir: g.raw("data.semantic_dir").map(PathBuf::from),
            eval_dir: g.raw("data.eval_dir").map(PathBuf::from),
            gen_count: g.or_default("data.gen_count", 100)?,
            gen_seed: g.or_default("data.gen_seed", 1)?,
            gen_origin,
            l0_smooth: g.bool_or("pre.l0_smooth", true)?,
            augment: g.bool_or("pre.augment", true)?,
            out_dir: g
                .raw("out.dir")
                .map(PathBuf::from)
                .ok_or_else(|| ConfigError::Missing("out.dir".into()))?,
        };
        // validate the network section eagerly so bad overrides surface
        // before any work starts
        cfg.network()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse(&path.display().to_string(), &text)
    }

    /// Resolve the network section: start from the preset, re-generate
    /// with any overridden scalars. Block topology and the census
    /// contract always come from the preset.
    pub fn network(&self) -> Result<NetworkConfig, ConfigError> {
        let base = NetworkConfig::preset(&self.network_preset).map_err(|e| ConfigError::Value {
            key: "network.preset".into(),
            detail: e.to_string(),
        })?;
        let topo = Topology {
            dsc_conv: base.dsc.conv_blocks.len(),
            dsc_deconv: base.dsc.deconv_blocks.len(),
            dc_conv: base.dc.conv_blocks.len(),
            dc_deconv: base.dc.deconv_blocks.len(),
            sc_conv: base.sc.conv_blocks.len(),
            sc_deconv: base.sc.deconv_blocks.len(),
            reg_conv: base.reg.conv_blocks.len(),
            reg_deconv: base.reg.deconv_blocks.len(),
        };
        let census: Option<Census> = base.census;
        NetworkConfig::generate(
            self.input_h.unwrap_or(base.input_h),
            self.input_w.unwrap_or(base.input_w),
            self.depth_classes.unwrap_or(base.depth_classes),
            self.semantic_classes.unwrap_or(base.semantic_classes),
            self.scale.unwrap_or(base.scale),
            self.dropout.unwrap_or(base.dropout),
            topo,
            census,
        )
        .map_err(|e| ConfigError::Value {
            key: "network".into(),
            detail: e.to_string(),
        })
    }

    /// Render the effective configuration, every key with its resolved
    /// value. Parsing the result reproduces this config's behavior, which
    /// is what makes the echoed file a rerun recipe.
    pub fn render(&self) -> String {
        let net = self.network().expect("validated at parse time");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("network.preset", self.network_preset.clone());
        kv("network.input_h", net.input_h.to_string());
        kv("network.input_w", net.input_w.to_string());
        kv("network.depth_classes", net.depth_classes.to_string());
        kv("network.semantic_classes", net.semantic_classes.to_string());
        kv("network.scale", net.scale.to_string());
        kv("network.dropout", net.dropout.to_string());
        kv("train.alpha", self.train.alpha.to_string());
        kv("train.beta1", self.train.beta1.to_string());
        kv("train.beta2", self.train.beta2.to_string());
        kv("train.weight_decay", self.train.weight_decay.to_string());
        kv("train.depth_batch", self.train.depth_batch.to_string());
        kv("train.semantic_batch", self.train.semantic_batch.to_string());
        kv("train.iterations", self.train.iterations.to_string());
        kv("train.seed", self.train.seed.to_string());
        kv("train.phase", self.train.phase.to_string());
        kv("train.checkpoint_every", self.train.checkpoint_every.to_string());
        if let Some(p) = &self.depth_dir {
            kv("data.depth_dir", p.display().to_string());
        }
        if let Some(p) = &self.semantic_dir {
            kv("data.semantic_dir", p.display().to_string());
        }
        if let Some(p) = &self.eval_dir {
            kv("data.eval_dir", p.display().to_string());
        }
        kv("data.gen_count", self.gen_count.to_string());
        kv("data.gen_seed", self.gen_seed.to_string());
        kv("data.gen_origin", self.gen_origin.as_str().to_string());
        kv("pre.l0_smooth", self.l0_smooth.to_string());
        kv("pre.augment", self.augment.to_string());
        kv("out.dir", self.out_dir.display().to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "out.dir = /tmp/run\n";

    #[test]
    fn minimal_config_gets_all_defaults() {
        let cfg = RunConfig::parse("test", MINIMAL).unwrap();
        assert_eq!(cfg.network_preset, "tiny");
        assert_eq!(cfg.train.alpha, 0.001);
        assert_eq!(cfg.train.depth_batch, 10);
        assert_eq!(cfg.gen_origin, Origin::Depth);
        assert!(cfg.l0_smooth && cfg.augment);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/run"));
        let net = cfg.network().unwrap();
        assert_eq!((net.input_h, net.input_w), (32, 64));
    }

    #[test]
    fn comments_blanks_and_spacing_are_tolerated() {
        let text = "\n# run settings\n  out.dir   =   /x  \n\ntrain.seed=7\n";
        let cfg = RunConfig::parse("test", text).unwrap();
        assert_eq!(cfg.out_dir, PathBuf::from("/x"));
        assert_eq!(cfg.train.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected_together() {
        let text = "out.dir = /x\ntrian.seed = 1\nnetwork.depht = 2\n";
        match RunConfig::parse("test", text).unwrap_err() {
            ConfigError::UnknownKeys(keys) => {
                assert_eq!(keys, vec!["network.depht".to_string(), "trian.seed".to_string()]);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn missing_output_dir_is_an_error() {
        assert!(matches!(
            RunConfig::parse("test", "train.seed = 1\n"),
            Err(ConfigError::Missing(k)) if k == "out.dir"
        ));
    }

    #[test]
    fn malformed_lines_carry_line_numbers() {
        let err = RunConfig::parse("cfg", "out.dir = /x\nnot a pair\n").unwrap_err();
        match err {
            ConfigError::Parse { path, line, .. } => {
                assert_eq!(path, "cfg");
                assert_eq!(line, 2);
            }
            other => panic!("{other}"),
        }
        assert!(RunConfig::parse("cfg", "out.dir = /x\nout.dir = /y\n").is_err());
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = RunConfig::parse("t", "out.dir = /x\ntrain.alpha = fast\n").unwrap_err();
        assert!(matches!(err, ConfigError::Value { ref key, .. } if key == "train.alpha"));
        let err = RunConfig::parse("t", "out.dir = /x\npre.augment = yes\n").unwrap_err();
        assert!(matches!(err, ConfigError::Value { ref key, .. } if key == "pre.augment"));
        let err = RunConfig::parse("t", "out.dir = /x\ndata.gen_origin = lidar\n").unwrap_err();
        assert!(matches!(err, ConfigError::Value { ref key, .. } if key == "data.gen_origin"));
    }

    #[test]
    fn invalid_train_section_fails_at_parse() {
        let err = RunConfig::parse("t", "out.dir = /x\ntrain.beta1 = 1.5\n").unwrap_err();
        assert!(matches!(err, ConfigError::Value { ref key, .. } if key == "train"));
    }

    #[test]
    fn network_overrides_regenerate_the_preset() {
        let text = "out.dir = /x\nnetwork.input_h = 64\nnetwork.input_w = 96\nnetwork.scale = 0.5\n";
        let cfg = RunConfig::parse("t", text).unwrap();
        let net = cfg.network().unwrap();
        assert_eq!((net.input_h, net.input_w), (64, 96));
        assert_eq!(net.scale, 0.5);
        // topology still the preset's
        let base = NetworkConfig::tiny();
        assert_eq!(net.dsc.conv_blocks.len(), base.dsc.conv_blocks.len());
    }

    #[test]
    fn bad_network_overrides_fail_at_parse() {
        let err = RunConfig::parse("t", "out.dir = /x\nnetwork.scale = -1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Value { ref key, .. } if key == "network"));
        let err = RunConfig::parse("t", "out.dir = /x\nnetwork.preset = huge\n").unwrap_err();
        assert!(matches!(err, ConfigError::Value { ref key, .. } if key == "network.preset"));
    }

    #[test]
    fn render_round_trips_behavior() {
        let text = "out.dir = /run/a\ntrain.seed = 5\ntrain.iterations = 12\n\
                    data.depth_dir = /d\npre.augment = false\nnetwork.scale = 0.5\n";
        let cfg = RunConfig::parse("t", text).unwrap();
        let echoed = cfg.render();
        let again = RunConfig::parse("echo", &echoed).unwrap();
        assert_eq!(again.train, cfg.train);
        assert_eq!(again.out_dir, cfg.out_dir);
        assert_eq!(again.depth_dir, cfg.depth_dir);
        assert_eq!(again.augment, cfg.augment);
        assert_eq!(again.network().unwrap(), cfg.network().unwrap());
        // a second echo is a fixpoint
        assert_eq!(again.render(), echoed);
    }

    #[test]
    fn paper_scale_preset_resolves() {
        let cfg = RunConfig::parse("t", "out.dir = /x\nnetwork.preset = paper-scale\n").unwrap();
        let net = cfg.network().unwrap();
        assert_eq!((net.input_h, net.input_w), (188, 620));
        assert!(net.census.is_some());
    }
}
