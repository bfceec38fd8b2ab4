//! Model and training configuration, parsed from flat `key = value` text.
//!
//! A `preset` key (`desk` or `paper`) picks the starting point; every other
//! key overrides it regardless of line order. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::events::{DEFAULT_BINS, DEFAULT_WINDOWS};
use crate::mamba::{Discretization, MambaConfig};
use crate::mcib::{GateReduction, DEFAULT_HEADS};
use crate::moe::{
    ExpertLayout, MoeConfig, DEFAULT_DEPTH, DEFAULT_DROPOUT, DEFAULT_EXPERTS, DEFAULT_TOP_K,
};

pub const CLASSES: usize = 7;
pub const RGB_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ModalityMode {
    #[default]
    Both,
    RgbOnly,
    EventOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

/// Stages that can be switched off for ablation studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Ablations {
    /// Skip the SSM block; encoder features feed the fusion stage directly.
    pub no_mamba: bool,
    /// Keep the SSM block but drop cross-modal mixing of `B` and `C`.
    pub no_joint: bool,
    /// Replace attention and gating with a plain sum.
    pub no_interaction: bool,
    /// Replace the expert mixture with a pooled linear head.
    pub no_moe: bool,
}

/// Everything that determines the network's structure.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub inner_dim: usize,
    pub state_dim: usize,
    pub frames: usize,
    pub bins: usize,
    pub height: usize,
    pub width: usize,
    pub tokens_per_frame: usize,
    pub conv_channels: Vec<usize>,
    pub heads: usize,
    pub layout: ExpertLayout,
    pub top_k: usize,
    pub depth: usize,
    pub dropout: f64,
    pub classes: usize,
    pub gate: GateReduction,
    pub ablations: Ablations,
    pub modality: ModalityMode,
    pub discretization: Discretization,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            embed_dim: 64,
            inner_dim: 64,
            state_dim: 16,
            frames: DEFAULT_WINDOWS,
            bins: DEFAULT_BINS,
            height: 16,
            width: 16,
            tokens_per_frame: 1,
            conv_channels: vec![8, 16],
            heads: DEFAULT_HEADS,
            layout: ExpertLayout::heterogeneous(DEFAULT_EXPERTS).expect("8 experts"),
            top_k: DEFAULT_TOP_K,
            depth: DEFAULT_DEPTH,
            dropout: DEFAULT_DROPOUT,
            classes: CLASSES,
            gate: GateReduction::Mean,
            ablations: Ablations::default(),
            modality: ModalityMode::Both,
            discretization: Discretization::Exponential,
        }
    }

    /// Token count per modality.
    pub fn seq_len(&self) -> usize {
        self.frames * self.tokens_per_frame
    }

    pub fn mamba(&self) -> MambaConfig {
        let mut m = MambaConfig::new(self.embed_dim, self.inner_dim, self.state_dim);
        m.joint = !self.ablations.no_joint;
        m.discretization = self.discretization;
        m
    }

    pub fn moe(&self) -> MoeConfig {
        MoeConfig {
            embed_dim: self.embed_dim,
            classes: self.classes,
            layout: self.layout.clone(),
            top_k: self.top_k,
            depth: self.depth,
            heads: self.heads,
            dropout: self.dropout,
        }
    }

    fn encoder_count(&self, in_channels: usize) -> usize {
        let mut c_in = in_channels;
        let mut n = 0;
        for &c in &self.conv_channels {
            n += 9 * c_in * c;
            c_in = c;
        }
        n + c_in * self.embed_dim + self.embed_dim
    }

    /// Closed-form scalar parameter count.
    pub fn param_count(&self) -> usize {
        let e = self.embed_dim;
        let mut n = self.encoder_count(RGB_CHANNELS) + self.encoder_count(self.bins);
        if !self.ablations.no_mamba {
            n += self.mamba().param_count();
        }
        if !self.ablations.no_interaction {
            n += 2 * 4 * e * e;
        }
        n += if self.ablations.no_moe {
            e * self.classes + self.classes
        } else {
            self.moe().param_count()
        };
        n
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("inner_dim", self.inner_dim),
            ("state_dim", self.state_dim),
            ("frames", self.frames),
            ("bins", self.bins),
            ("tokens_per_frame", self.tokens_per_frame),
            ("heads", self.heads),
            ("classes", self.classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.height < crate::encoder::MIN_SPATIAL || self.width < crate::encoder::MIN_SPATIAL {
            return Err(Error::config(format!(
                "height and width must be at least {}",
                crate::encoder::MIN_SPATIAL
            )));
        }
        self.moe().validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Samples generated in synthetic mode.
    pub synthetic_samples: usize,
    /// Held-out fraction of the dataset.
    pub holdout: f64,
    /// Worker threads for per-sample gradients; 1 runs everything inline.
    pub threads: usize,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            model: ModelConfig::desk(),
            lr: 3e-3,
            weight_decay: 1e-3,
            batch_size: 16,
            epochs: 30,
            max_steps: 0,
            seed: 0,
            manifest: None,
            out_dir: None,
            synthetic_samples: 140,
            holdout: 0.2,
            threads: 1,
        }
    }

    /// Full-size hyperparameters; too slow for routine CPU runs.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.preset = Preset::Paper;
        c.model.embed_dim = 512;
        c.model.inner_dim = 1024;
        c.model.conv_channels = vec![32, 64, 128];
        c.model.height = 112;
        c.model.width = 112;
        c.lr = 3e-4;
        c.batch_size = 64;
        c.epochs = 200;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "weight_decay must be finite and non-negative",
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.threads == 0 {
            return Err(Error::config(
                "batch_size, epochs and threads must be at least 1",
            ));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::config(format!(
                "holdout must lie in [0, 1), got {}",
                self.holdout
            )));
        }
        if self.synthetic_samples < self.model.classes {
            return Err(Error::config(
                "synthetic_samples must be at least the class count",
            ));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        let mut preset = Preset::Desk;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key=value, got `{line}`", n + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" {
                preset = match v {
                    "desk" => Preset::Desk,
                    "paper" => Preset::Paper,
                    _ => return Err(Error::config(format!("unknown preset `{v}`"))),
                };
                continue;
            }
            if pairs.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::config(format!("key `{k}` given twice")));
            }
        }
        let mut cfg = match preset {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        };
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::config(format!("invalid value `{v}` for `{key}`")))
        }
        let m = &mut self.model;
        match key {
            "embed_dim" => m.embed_dim = num(key, value)?,
            "inner_dim" => m.inner_dim = num(key, value)?,
            "state_dim" => m.state_dim = num(key, value)?,
            "frames" => m.frames = num(key, value)?,
            "bins" => m.bins = num(key, value)?,
            "height" => m.height = num(key, value)?,
            "width" => m.width = num(key, value)?,
            "tokens_per_frame" => m.tokens_per_frame = num(key, value)?,
            "conv_channels" => {
                m.conv_channels = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "heads" => m.heads = num(key, value)?,
            "experts" => {
                let n: usize = num(key, value)?;
                m.layout = ExpertLayout::heterogeneous(n)?;
            }
            "expert_layout" => {
                let n = m.layout.len();
                m.layout = match value {
                    "heterogeneous" => ExpertLayout::heterogeneous(n)?,
                    "two_types" => ExpertLayout::two_types(n)?,
                    "single_type" => ExpertLayout::single_type(n)?,
                    explicit => explicit.parse()?,
                }
            }
            "top_k" => m.top_k = num(key, value)?,
            "depth" => m.depth = num(key, value)?,
            "dropout" => m.dropout = num(key, value)?,
            "classes" => m.classes = num(key, value)?,
            "gate" => {
                m.gate = match value {
                    "mean" => GateReduction::Mean,
                    "sum" => GateReduction::Sum,
                    _ => {
                        return Err(Error::config(format!(
                            "gate must be mean or sum, got `{value}`"
                        )))
                    }
                }
            }
            "ablate_mamba" => m.ablations.no_mamba = flag(key, value)?,
            "ablate_mjos" => m.ablations.no_joint = flag(key, value)?,
            "ablate_mcib" => m.ablations.no_interaction = flag(key, value)?,
            "ablate_moe" => m.ablations.no_moe = flag(key, value)?,
            "modality" => {
                m.modality = match value {
                    "both" => ModalityMode::Both,
                    "rgb" => ModalityMode::RgbOnly,
                    "event" => ModalityMode::EventOnly,
                    _ => {
                        return Err(Error::config(format!(
                            "modality must be both, rgb or event, got `{value}`"
                        )))
                    }
                }
            }
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "synthetic_samples" => self.synthetic_samples = num(key, value)?,
            "holdout" => self.holdout = num(key, value)?,
            "threads" => self.threads = num(key, value)?,
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// The model section as `key = value` text that [`TrainConfig::parse`]
    /// reads back to the same [`ModelConfig`].
    pub fn model_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let chans: Vec<String> = m.conv_channels.iter().map(usize::to_string).collect();
        let lines: [(&str, String); 20] = [
            ("embed_dim", m.embed_dim.to_string()),
            ("inner_dim", m.inner_dim.to_string()),
            ("state_dim", m.state_dim.to_string()),
            ("frames", m.frames.to_string()),
            ("bins", m.bins.to_string()),
            ("height", m.height.to_string()),
            ("width", m.width.to_string()),
            ("tokens_per_frame", m.tokens_per_frame.to_string()),
            ("conv_channels", chans.join(",")),
            ("heads", m.heads.to_string()),
            ("expert_layout", m.layout.to_string()),
            ("top_k", m.top_k.to_string()),
            ("depth", m.depth.to_string()),
            ("dropout", m.dropout.to_string()),
            ("classes", m.classes.to_string()),
            (
                "gate",
                if m.gate == GateReduction::Sum {
                    "sum"
                } else {
                    "mean"
                }
                .into(),
            ),
            ("ablate_mamba", m.ablations.no_mamba.to_string()),
            ("ablate_mjos", m.ablations.no_joint.to_string()),
            ("ablate_mcib", m.ablations.no_interaction.to_string()),
            ("ablate_moe", m.ablations.no_moe.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        let modality = match m.modality {
            ModalityMode::Both => "both",
            ModalityMode::RgbOnly => "rgb",
            ModalityMode::EventOnly => "event",
        };
        let _ = writeln!(s, "modality = {modality}");
        s
    }
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_hyperparameters() {
        let p = TrainConfig::paper();
        assert_eq!(p.lr, 3e-4);
        assert_eq!(p.weight_decay, 1e-3);
        assert_eq!(p.batch_size, 64);
        assert_eq!(p.epochs, 200);
        assert_eq!(p.model.layout.len(), 8);
        assert_eq!(p.model.top_k, 2);
        assert_eq!(p.model.bins, 3);
        assert_eq!(p.model.frames, 2);
        let d = TrainConfig::desk();
        assert_eq!(
            (d.model.embed_dim, d.model.inner_dim, d.model.state_dim),
            (64, 64, 16)
        );
        assert_eq!(d.batch_size, 16);
    }

    #[test]
    fn parse_overrides_and_comments() {
        let c = TrainConfig::parse(
            "# test\nseed = 7\nablate_mjos = true\n\npreset = desk\nexpert_layout = two_types\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert!(c.model.ablations.no_joint);
        assert_eq!(c.model.layout.to_string(), "DDDDAAAA");
        let p = TrainConfig::parse("lr = 0.01\npreset = paper").unwrap();
        assert_eq!(p.lr, 0.01);
        assert_eq!(p.batch_size, 64);
    }

    #[test]
    fn parse_errors() {
        for bad in [
            "ablate_mojs = true",
            "seed = x",
            "top_k = 9",
            "heads = 5",
            "lr = -1",
            "no equals sign",
            "seed = 1\nseed = 2",
            "ablate_moe = maybe",
        ] {
            assert!(
                matches!(TrainConfig::parse(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn model_text_round_trips() {
        let mut c = TrainConfig::desk();
        c.model.ablations.no_moe = true;
        c.model.layout = "DAF".parse().unwrap();
        c.model.modality = ModalityMode::EventOnly;
        c.model.conv_channels = vec![4];
        let back = TrainConfig::parse(&c.model_text()).unwrap();
        assert_eq!(back.model, c.model);
    }

    #[test]
    fn ablations_strictly_remove_parameters() {
        let full = ModelConfig::desk();
        for f in [
            |a: &mut Ablations| a.no_mamba = true,
            |a: &mut Ablations| a.no_joint = true,
            |a: &mut Ablations| a.no_interaction = true,
            |a: &mut Ablations| a.no_moe = true,
        ] {
            let mut c = full.clone();
            f(&mut c.ablations);
            assert!(c.param_count() < full.param_count());
        }
    }
}
