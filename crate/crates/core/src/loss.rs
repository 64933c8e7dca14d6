//! Discrimination loss: a fusion classifier on the fused model feature plus a
//! shared specific classifier on every weighted view feature.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::param::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ViewLossMode {
    /// Model loss only.
    None,
    /// Uniform mean of the per-view losses.
    Avl,
    /// Per-view weights `2/N - alpha_j`.
    #[default]
    Wvl,
}

impl FromStr for ViewLossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ViewLossMode::None),
            "avl" => Ok(ViewLossMode::Avl),
            "wvl" => Ok(ViewLossMode::Wvl),
            other => Err(Error::Config(format!("unknown view loss mode {other:?}"))),
        }
    }
}

impl ViewLossMode {
    pub fn name(self) -> &'static str {
        match self {
            ViewLossMode::None => "none",
            ViewLossMode::Avl => "avl",
            ViewLossMode::Wvl => "wvl",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub beta: f64,
    pub gamma: f64,
    pub view_mode: ViewLossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.5,
            gamma: 0.5,
            view_mode: ViewLossMode::Wvl,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.gamma < 0.0 || self.beta + self.gamma <= 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with positive sum, got beta={} gamma={}",
                self.beta, self.gamma
            )));
        }
        Ok(())
    }

    /// Whether the view term contributes at all.
    pub fn uses_views(&self) -> bool {
        self.view_mode != ViewLossMode::None && self.gamma > 0.0
    }
}

/// Softmax cross-entropy of the fusion classifier on `fused: [B, D]`.
/// Returns the mean loss and the logits.
pub fn fusion_loss(
    store: &ParamStore,
    tape: &mut Tape,
    fused: Var,
    labels: &[usize],
    classifier: &Linear,
) -> Result<(Var, Var)> {
    let logits = classifier.forward(store, tape, fused)?;
    Ok((tape.softmax_cross_entropy(logits, labels)?, logits))
}

/// Per-view losses `[B, N]` of one shared classifier applied to every
/// weighted view feature; each view carries its model's label.
pub fn view_losses(
    store: &ParamStore,
    tape: &mut Tape,
    weighted: Var,
    labels: &[usize],
    classifier: &Linear,
) -> Result<Var> {
    let shape = tape.shape(weighted).to_vec();
    if shape.len() != 3 || shape[0] != labels.len() {
        return Err(Error::shape("view_losses", &shape, &[labels.len()]));
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(weighted, &[b * n, d])?;
    let logits = classifier.forward(store, tape, flat)?;
    let view_labels: Vec<usize> = labels.iter().flat_map(|&l| std::iter::repeat_n(l, n)).collect();
    let losses = tape.cross_entropy_rows(logits, &view_labels)?;
    tape.reshape(losses, &[b, n])
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_model: Var,
    /// `None` when the view term is disabled.
    pub l_views: Option<Var>,
    /// `[B, N]` per-view losses, when computed.
    pub per_view: Option<Var>,
    /// `[B, N]` loss weights, when computed.
    pub weights: Option<Var>,
    pub l_dis: Var,
}

/// Combines model and view losses into `beta * L_model + gamma * L_views`.
///
/// In WVL mode the weights `2/N - alpha_j` stay on the tape, so gradients
/// also flow through `alpha`. Batched losses are averaged over models.
pub fn combine(
    tape: &mut Tape,
    l_model: Var,
    per_view: Option<Var>,
    alpha: Option<Var>,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let model_term = tape.scale(l_model, cfg.beta);
    let (per_view, alpha) = match (cfg.view_mode, per_view) {
        (ViewLossMode::None, _) | (_, None) => {
            return Ok(LossVars {
                l_model,
                l_views: None,
                per_view: None,
                weights: None,
                l_dis: model_term,
            })
        }
        (_, Some(pv)) => (pv, alpha),
    };
    let shape = tape.shape(per_view).to_vec();
    let (b, n) = (shape[0], shape[1]);
    let weights = match (cfg.view_mode, alpha) {
        (ViewLossMode::Wvl, Some(a)) => tape.affine(a, -1.0, 2.0 / n as f64),
        (ViewLossMode::Wvl, None) | (ViewLossMode::Avl, _) => {
            // uniform alpha gives 2/N - 1/N = 1/N, the AVL weight
            let uniform = tape.constant(crate::tensor::Tensor::full(&[b, n], 1.0 / n as f64));
            if cfg.view_mode == ViewLossMode::Wvl {
                tape.affine(uniform, -1.0, 2.0 / n as f64)
            } else {
                uniform
            }
        }
        (ViewLossMode::None, _) => unreachable!(),
    };
    let weighted = tape.mul(per_view, weights)?;
    let per_model = tape.sum_over_axis(weighted, 1)?;
    let l_views = tape.mean_all(per_model)?;
    let view_term = tape.scale(l_views, cfg.gamma);
    let l_dis = tape.add(model_term, view_term)?;
    Ok(LossVars {
        l_model,
        l_views: Some(l_views),
        per_view: Some(per_view),
        weights: Some(weights),
        l_dis,
    })
}

/// Scalar summary of a batch loss. Per-view entries are averaged over the
/// models of the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_model: f64,
    pub l_views_per_view: Vec<f64>,
    pub loss_weights: Vec<f64>,
    pub l_views: f64,
    pub l_dis: f64,
    /// Number of (model, view) pairs whose WVL weight is negative.
    pub negative_weights: usize,
}

impl LossBreakdown {
    pub fn read(tape: &Tape, vars: &LossVars) -> Self {
        let column_mean = |v: Option<Var>| -> Vec<f64> {
            let Some(v) = v else { return Vec::new() };
            let t = tape.value(v);
            let (b, n) = (t.shape()[0], t.shape()[1]);
            (0..n)
                .map(|j| (0..b).map(|i| t.data()[i * n + j]).sum::<f64>() / b as f64)
                .collect()
        };
        LossBreakdown {
            l_model: tape.value(vars.l_model).item(),
            l_views_per_view: column_mean(vars.per_view),
            loss_weights: column_mean(vars.weights),
            l_views: vars.l_views.map_or(0.0, |v| tape.value(v).item()),
            l_dis: tape.value(vars.l_dis).item(),
            negative_weights: vars
                .weights
                .map_or(0, |w| tape.value(w).data().iter().filter(|&&x| x < 0.0).count()),
        }
    }
}
