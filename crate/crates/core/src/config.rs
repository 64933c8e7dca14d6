//! Flat `key = value` run configuration shared by every command.
//!
//! A file starts from the defaults of its `profile` (desk unless given) and
//! overrides individual keys. Unknown and repeated keys are errors.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::loss::{LossConfig, ViewLossMode};
use crate::model::{Ablation, InputSpec, LossPreset, ModelConfig};
use crate::patchconv::{KnnMetric, PatchConvConfig};
use crate::retrieval::Metric;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Profile {
    /// Small synthetic runs that finish in minutes on one core.
    #[default]
    Desk,
    /// 12 views of 224x224 reduced to a 7x7x512 patch grid.
    Paper,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }

    /// `(views, resolution)` of generated data.
    pub fn data_geometry(self) -> (usize, usize) {
        match self {
            Profile::Desk => (6, 32),
            Profile::Paper => (12, 224),
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub train: PathBuf,
    pub test: PathBuf,
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub paths: Paths,
    /// 0 infers the class count from the data or checkpoint.
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub patchconv_enabled: bool,
    pub patchconv: PatchConvConfig,
    pub awv: bool,
    pub loss: LossConfig,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub train: TrainConfig,
    pub metric: Metric,
    pub rerank: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_profile(Profile::Desk)
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (model, train) = match profile {
            Profile::Desk => (ModelConfig::desk(2), TrainConfig::desk()),
            Profile::Paper => (ModelConfig::paper(2), TrainConfig::paper()),
        };
        let run = PathBuf::from("runs").join(profile.name());
        RunConfig {
            profile,
            paths: Paths {
                train: PathBuf::from("data/train.mvi"),
                test: PathBuf::from("data/test.mvi"),
                checkpoint: run.join("final.pck"),
                output_dir: run,
            },
            num_classes: 0,
            backbone: model.backbone,
            patchconv_enabled: model.patchconv.is_some(),
            patchconv: model.patchconv.unwrap_or_default(),
            awv: model.awv,
            loss: model.loss,
            bn_eps: model.bn_eps,
            bn_momentum: model.bn_momentum,
            train,
            metric: Metric::default(),
            rerank: false,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, &str, &str)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if entries.iter().any(|(_, k, _)| *k == key) {
                return Err(Error::Config(format!("line {}: key {key:?} given twice", n + 1)));
            }
            entries.push((n + 1, key, value));
        }
        let profile = match entries.iter().find(|(_, k, _)| *k == "profile") {
            Some((_, _, v)) => v.parse()?,
            None => Profile::Desk,
        };
        let mut cfg = RunConfig::for_profile(profile);
        for (n, key, value) in entries {
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {n}: {}", e.to_string().trim_start_matches("configuration error: "))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "profile" => self.profile = value.parse()?,
            "paths.train" => self.paths.train = value.into(),
            "paths.test" => self.paths.test = value.into(),
            "paths.checkpoint" => self.paths.checkpoint = value.into(),
            "paths.output_dir" => self.paths.output_dir = value.into(),
            "model.num_classes" => self.num_classes = num(key, value)?,
            "backbone.layers" => self.backbone.layers = num(key, value)?,
            "backbone.dim" => self.backbone.dim = num(key, value)?,
            "backbone.leaky_slope" => self.backbone.leaky_slope = num(key, value)?,
            "patchconv.enabled" => self.patchconv_enabled = num(key, value)?,
            "patchconv.k" => self.patchconv.k = num(key, value)?,
            "patchconv.use_coords" => self.patchconv.use_coords = num(key, value)?,
            "patchconv.leaky_slope" => self.patchconv.leaky_slope = num(key, value)?,
            "patchconv.metric" => self.patchconv.metric = value.parse::<KnnMetric>()?,
            "awv.enabled" => self.awv = num(key, value)?,
            "loss.beta" => self.loss.beta = num(key, value)?,
            "loss.gamma" => self.loss.gamma = num(key, value)?,
            "loss.view_mode" => self.loss.view_mode = value.parse::<ViewLossMode>()?,
            "bn.eps" => self.bn_eps = num(key, value)?,
            "bn.momentum" => self.bn_momentum = num(key, value)?,
            "train.lr" => self.train.adam.lr = num(key, value)?,
            "train.adam_beta1" => self.train.adam.beta1 = num(key, value)?,
            "train.adam_beta2" => self.train.adam.beta2 = num(key, value)?,
            "train.adam_eps" => self.train.adam.eps = num(key, value)?,
            "train.clip" => self.train.clip = num(key, value)?,
            "train.epochs" => self.train.epochs = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.seed" => self.train.seed = num(key, value)?,
            "train.max_steps" => {
                let n: usize = num(key, value)?;
                self.train.max_steps = (n > 0).then_some(n);
            }
            "retrieval.metric" => self.metric = value.parse()?,
            "retrieval.rerank" => self.rerank = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its effective value, one per line.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &PathBuf| p.display().to_string();
        vec![
            ("profile", self.profile.name().into()),
            ("paths.train", path(&self.paths.train)),
            ("paths.test", path(&self.paths.test)),
            ("paths.checkpoint", path(&self.paths.checkpoint)),
            ("paths.output_dir", path(&self.paths.output_dir)),
            ("model.num_classes", self.num_classes.to_string()),
            ("backbone.layers", self.backbone.layers.to_string()),
            ("backbone.dim", self.backbone.dim.to_string()),
            ("backbone.leaky_slope", self.backbone.leaky_slope.to_string()),
            ("patchconv.enabled", self.patchconv_enabled.to_string()),
            ("patchconv.k", self.patchconv.k.to_string()),
            ("patchconv.use_coords", self.patchconv.use_coords.to_string()),
            ("patchconv.leaky_slope", self.patchconv.leaky_slope.to_string()),
            ("patchconv.metric", self.patchconv.metric.name().into()),
            ("awv.enabled", self.awv.to_string()),
            ("loss.beta", self.loss.beta.to_string()),
            ("loss.gamma", self.loss.gamma.to_string()),
            ("loss.view_mode", self.loss.view_mode.name().into()),
            ("bn.eps", self.bn_eps.to_string()),
            ("bn.momentum", self.bn_momentum.to_string()),
            ("train.lr", self.train.adam.lr.to_string()),
            ("train.adam_beta1", self.train.adam.beta1.to_string()),
            ("train.adam_beta2", self.train.adam.beta2.to_string()),
            ("train.adam_eps", self.train.adam.eps.to_string()),
            ("train.clip", self.train.clip.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.seed", self.train.seed.to_string()),
            ("train.max_steps", self.train.max_steps.unwrap_or(0).to_string()),
            ("retrieval.metric", self.metric.name().into()),
            ("retrieval.rerank", self.rerank.to_string()),
        ]
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) {
        let m = self.model_config(InputSpec::Images { res: 32 }, 1, 2).with_ablation(ablation);
        self.patchconv_enabled = m.patchconv.is_some();
        self.patchconv.use_coords = m.patchconv.is_some_and(|p| p.use_coords);
        self.awv = m.awv;
    }

    pub fn apply_loss(&mut self, preset: LossPreset) {
        self.loss = self.model_config(InputSpec::Images { res: 32 }, 1, 2).with_loss(preset).loss;
    }

    /// The network described by this config for data of the given shape.
    pub fn model_config(&self, input: InputSpec, num_views: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input,
            num_views,
            num_classes,
            backbone: self.backbone,
            patchconv: self.patchconv_enabled.then_some(self.patchconv),
            awv: self.awv,
            loss: self.loss,
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
        }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        f.write_str(&out)
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_desk_defaults() {
        let cfg = RunConfig::parse("# nothing here\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.adam.lr, 1e-3);
        assert_eq!(cfg.backbone.dim, 32);
    }

    #[test]
    fn profile_applies_regardless_of_position() {
        let cfg = RunConfig::parse("train.epochs = 3\nprofile = paper\n").unwrap();
        assert_eq!(cfg.profile, Profile::Paper);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.adam.lr, 4e-5);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.backbone.dim, 512);
        assert_eq!(cfg.patchconv.k, 12);
        assert_eq!((cfg.loss.beta, cfg.loss.gamma), (0.5, 0.5));
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.max_steps = Some(10);
        cfg.loss.view_mode = ViewLossMode::Avl;
        cfg.patchconv.metric = KnnMetric::Cosine;
        cfg.train.adam.lr = 3.3e-4;
        cfg.rerank = true;
        assert_eq!(RunConfig::parse(&cfg.to_string()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "nonsense.key = 1",
            "train.epochs = many",
            "train.lr",
            "loss.view_mode = some",
            "train.seed = 1\ntrain.seed = 2",
            "profile = huge",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
        let err = RunConfig::parse("a = 1\n\nfoo = 2").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn comments_and_whitespace() {
        let cfg = RunConfig::parse("  loss.gamma=0.25   # weaker view term\nawv.enabled = false").unwrap();
        assert_eq!(cfg.loss.gamma, 0.25);
        assert!(!cfg.awv);
    }

    #[test]
    fn ablation_and_loss_flags() {
        let mut cfg = RunConfig::default();
        cfg.apply_ablation(Ablation::MvcnnBaseline);
        assert!(!cfg.patchconv_enabled && !cfg.awv);
        cfg.apply_ablation(Ablation::EdgeconvAwv);
        assert!(cfg.patchconv_enabled && cfg.awv && !cfg.patchconv.use_coords);
        cfg.apply_loss(LossPreset::Ml);
        assert_eq!(cfg.loss.gamma, 0.0);
        assert_eq!(cfg.loss.view_mode, ViewLossMode::None);
        let m = cfg.model_config(InputSpec::Images { res: 32 }, 6, 4);
        assert_eq!(m.embedding_dim(), 32);
        m.validate().unwrap();
    }
}
