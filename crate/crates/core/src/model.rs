//! The assembled network: patch features, optional PatchConv, view fusion and
//! the two classifiers of the discrimination loss.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::awv::{self, AdjacentMix};
use crate::backbone::{Backbone, BackboneConfig, PatchLayout};
use crate::data::{MultiViewSample, PatchEntry};
use crate::error::{Error, Result};
use crate::layers::{BnUpdate, Linear, Mode};
use crate::loss::{self, LossConfig, LossVars, ViewLossMode};
use crate::param::ParamStore;
use crate::patchconv::{PatchConvConfig, PatchConvLayer};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Where patch features come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputSpec {
    /// Rendered `res x res` views through the trainable backbone.
    Images { res: usize },
    /// Precomputed `grid x grid x dim` features per view.
    Patches { grid: usize, dim: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub input: InputSpec,
    pub num_views: usize,
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    /// `None` feeds the patch grid straight into view pooling.
    pub patchconv: Option<PatchConvConfig>,
    /// `false` replaces adaptive weighting with a plain max over views.
    pub awv: bool,
    pub loss: LossConfig,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    /// Small defaults: 6 views of 32x32, three blocks to 32 channels.
    pub fn desk(num_classes: usize) -> Self {
        ModelConfig {
            input: InputSpec::Images { res: 32 },
            num_views: 6,
            num_classes,
            backbone: BackboneConfig {
                layers: 3,
                dim: 32,
                leaky_slope: 0.2,
            },
            patchconv: Some(PatchConvConfig::default()),
            awv: true,
            loss: LossConfig::default(),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Full-size geometry: 12 views of 224x224 reduced to a 7x7x512 grid.
    pub fn paper(num_classes: usize) -> Self {
        ModelConfig {
            input: InputSpec::Images { res: 224 },
            num_views: 12,
            backbone: BackboneConfig {
                layers: 5,
                dim: 512,
                leaky_slope: 0.2,
            },
            ..ModelConfig::desk(num_classes)
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        let pc = self.patchconv.unwrap_or_default();
        let (patchconv, awv) = match ablation {
            Ablation::MvcnnBaseline => (None, false),
            Ablation::PatchconvOnly => (Some(PatchConvConfig { use_coords: true, ..pc }), false),
            Ablation::AwvOnly => (None, true),
            Ablation::EdgeconvAwv => (Some(PatchConvConfig { use_coords: false, ..pc }), true),
            Ablation::Full => (Some(PatchConvConfig { use_coords: true, ..pc }), true),
        };
        self.patchconv = patchconv;
        self.awv = awv;
        self
    }

    pub fn with_loss(mut self, preset: LossPreset) -> Self {
        match preset {
            LossPreset::Ml => {
                self.loss.gamma = 0.0;
                self.loss.view_mode = ViewLossMode::None;
            }
            LossPreset::MlAvl => self.loss.view_mode = ViewLossMode::Avl,
            LossPreset::Discrimination => self.loss.view_mode = ViewLossMode::Wvl,
        }
        self
    }

    pub fn patch_dim(&self) -> usize {
        match self.input {
            InputSpec::Images { .. } => self.backbone.dim,
            InputSpec::Patches { dim, .. } => dim,
        }
    }

    pub fn grid(&self) -> Result<usize> {
        match self.input {
            InputSpec::Images { res } => self.backbone.grid(res),
            InputSpec::Patches { grid, .. } => Ok(grid),
        }
    }

    /// Dimension of the fused feature and retrieval embedding.
    pub fn embedding_dim(&self) -> usize {
        let d = self.patch_dim();
        match self.patchconv {
            Some(pc) if pc.use_coords => d + 3,
            _ => d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.awv && self.num_views < 3 {
            return Err(Error::Config(format!(
                "adaptive view weighting needs at least 3 views, got {}",
                self.num_views
            )));
        }
        if self.num_views == 0 {
            return Err(Error::Config("num_views must be positive".into()));
        }
        let grid = self.grid()?;
        if let Some(pc) = self.patchconv {
            let m = grid * grid * self.num_views;
            if pc.k == 0 || pc.k >= m {
                return Err(Error::Config(format!("k = {} must lie in [1, {}]", pc.k, m - 1)));
            }
            if !(pc.leaky_slope > 0.0 && pc.leaky_slope < 1.0) {
                return Err(Error::Config(format!("leaky slope {} outside (0, 1)", pc.leaky_slope)));
            }
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("batch norm eps must be positive and momentum in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Network variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    MvcnnBaseline,
    PatchconvOnly,
    AwvOnly,
    EdgeconvAwv,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::MvcnnBaseline,
        Ablation::PatchconvOnly,
        Ablation::AwvOnly,
        Ablation::EdgeconvAwv,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::MvcnnBaseline => "mvcnn-baseline",
            Ablation::PatchconvOnly => "patchconv-only",
            Ablation::AwvOnly => "awv-only",
            Ablation::EdgeconvAwv => "edgeconv-awv",
            Ablation::Full => "full",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

/// Loss variants: model loss only, plus average view loss, or the weighted
/// discrimination loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossPreset {
    Ml,
    MlAvl,
    Discrimination,
}

impl LossPreset {
    pub fn name(self) -> &'static str {
        match self {
            LossPreset::Ml => "ml",
            LossPreset::MlAvl => "ml-avl",
            LossPreset::Discrimination => "discrimination",
        }
    }
}

impl FromStr for LossPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ml" => Ok(LossPreset::Ml),
            "ml-avl" => Ok(LossPreset::MlAvl),
            "discrimination" => Ok(LossPreset::Discrimination),
            other => Err(Error::Config(format!("unknown loss preset {other:?}"))),
        }
    }
}

/// A labelled model the network can consume.
pub trait ModelSample {
    fn label(&self) -> usize;
    fn model_id(&self) -> u32;
    /// Stacked patch features `[B * M, D]` of a batch.
    fn patches(
        model: &Pcnn,
        tape: &mut Tape,
        batch: &[&Self],
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Var, PatchLayout)>
    where
        Self: Sized;
}

impl ModelSample for MultiViewSample {
    fn label(&self) -> usize {
        self.label
    }

    fn model_id(&self) -> u32 {
        self.model_id
    }

    fn patches(
        model: &Pcnn,
        tape: &mut Tape,
        batch: &[&Self],
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Var, PatchLayout)> {
        let (InputSpec::Images { res }, Some(bb)) = (model.cfg.input, &model.backbone) else {
            return Err(Error::Config("model expects precomputed patch features, not images".into()));
        };
        bb.forward(&model.store, tape, batch, model.cfg.num_views, res, mode, updates)
    }
}

impl ModelSample for PatchEntry {
    fn label(&self) -> usize {
        self.label
    }

    fn model_id(&self) -> u32 {
        self.model_id
    }

    fn patches(
        model: &Pcnn,
        tape: &mut Tape,
        batch: &[&Self],
        _mode: Mode,
        _updates: &mut Vec<BnUpdate>,
    ) -> Result<(Var, PatchLayout)> {
        let InputSpec::Patches { grid, dim } = model.cfg.input else {
            return Err(Error::Config("model expects images, not patch features".into()));
        };
        let layout = PatchLayout {
            grid,
            dim,
            num_views: model.cfg.num_views,
        };
        let per = layout.num_patches() * dim;
        let mut data = Vec::with_capacity(batch.len() * per);
        for e in batch {
            if e.features.len() != per {
                return Err(Error::shape("patch entry", &[e.features.len()], &[per]));
            }
            data.extend(e.features.iter().map(|&v| v as f64));
        }
        let x = tape.constant(Tensor::new(vec![batch.len() * layout.num_patches(), dim], data)?);
        Ok((x, layout))
    }
}

/// Tape handles of one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Per-view features before weighting, `[B, N, D']`.
    pub views: Var,
    /// Weighted view features `[B, N, D']`.
    pub weighted: Var,
    /// View weights `[B, N]`; uniform constants without adaptive weighting.
    pub alpha: Var,
    /// Fusion feature, the retrieval embedding, `[B, D']`.
    pub fused: Var,
    /// Fusion classifier logits `[B, C]`.
    pub logits: Var,
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Clone, Debug)]
pub struct Pcnn {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    backbone: Option<Backbone>,
    patchconv: Option<PatchConvLayer>,
    mix: Option<AdjacentMix>,
    fusion: Linear,
    specific: Linear,
}

impl Pcnn {
    /// Builds a freshly initialized network; all randomness comes from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = match cfg.input {
            InputSpec::Images { .. } => Some(Backbone::new(
                &mut store,
                cfg.backbone,
                cfg.bn_eps,
                cfg.bn_momentum,
                &mut rng,
            )?),
            InputSpec::Patches { .. } => None,
        };
        let patchconv = cfg
            .patchconv
            .map(|pc| PatchConvLayer::new(&mut store, pc, cfg.patch_dim(), cfg.bn_eps, cfg.bn_momentum, &mut rng))
            .transpose()?;
        let dv = cfg.embedding_dim();
        let mix = if cfg.awv {
            Some(AdjacentMix::new(&mut store, dv, &mut rng)?)
        } else {
            None
        };
        let fusion = Linear::new(&mut store, "classifier/fusion", dv, cfg.num_classes, &mut rng)?;
        let specific = Linear::new(&mut store, "classifier/specific", dv, cfg.num_classes, &mut rng)?;
        Ok(Pcnn {
            cfg,
            store,
            backbone,
            patchconv,
            mix,
            fusion,
            specific,
        })
    }

    pub fn forward<S: ModelSample>(&self, tape: &mut Tape, batch: &[&S], mode: Mode) -> Result<ForwardVars> {
        if batch.is_empty() {
            return Err(Error::invalid("forward", "empty batch"));
        }
        let mut bn_updates = Vec::new();
        let (mut x, mut layout) = S::patches(self, tape, batch, mode, &mut bn_updates)?;
        if let Some(pc) = &self.patchconv {
            (x, layout) = pc.forward(&self.store, tape, x, &layout, mode, &mut bn_updates)?;
        }
        let pooled = awv::pool_views(tape, x, &layout)?;
        let (views, weighted, alpha, fused) = match &self.mix {
            Some(mix) => {
                let f = mix.forward(&self.store, tape, pooled)?;
                let fv = awv::attention_weights(tape, f)?;
                (f, fv.weighted, fv.alpha, fv.fused)
            }
            None => {
                let (g, _) = tape.max_over_axis(pooled, 1)?;
                let n = self.cfg.num_views;
                let alpha = tape.constant(Tensor::full(&[batch.len(), n], 1.0 / n as f64));
                (pooled, pooled, alpha, g)
            }
        };
        let logits = self.fusion.forward(&self.store, tape, fused)?;
        Ok(ForwardVars {
            views,
            weighted,
            alpha,
            fused,
            logits,
            bn_updates,
        })
    }

    /// Discrimination loss of a forward pass against the batch labels.
    pub fn loss(&self, tape: &mut Tape, vars: &ForwardVars, labels: &[usize]) -> Result<LossVars> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.cfg.num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: self.cfg.num_classes,
            });
        }
        let l_model = tape.softmax_cross_entropy(vars.logits, labels)?;
        let per_view = if self.cfg.loss.uses_views() {
            Some(loss::view_losses(&self.store, tape, vars.weighted, labels, &self.specific)?)
        } else {
            None
        };
        loss::combine(tape, l_model, per_view, Some(vars.alpha), &self.cfg.loss)
    }

    /// Eval-mode embeddings and predicted classes of a batch.
    pub fn embed<S: ModelSample>(&self, batch: &[&S]) -> Result<Vec<(Vec<f64>, usize)>> {
        let mut tape = Tape::new();
        let vars = self.forward(&mut tape, batch, Mode::Eval)?;
        let fused = tape.value(vars.fused);
        let logits = tape.value(vars.logits);
        let c = self.cfg.num_classes;
        let d = fused.shape()[1];
        Ok((0..batch.len())
            .map(|b| {
                let row = &logits.data()[b * c..(b + 1) * c];
                // first maximum wins on ties
                let pred = (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best });
                (fused.data()[b * d..(b + 1) * d].to_vec(), pred)
            })
            .collect())
    }
}
