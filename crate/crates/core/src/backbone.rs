//! Patch-feature extraction: a small strided CNN that maps every view to a
//! `P x P` grid of `D`-dimensional patch features.

use rand::Rng;

use crate::data::{MultiViewSample, PatchEntry};
use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, BnUpdate, Mode};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Geometry of one model's patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchLayout {
    pub grid: usize,
    pub dim: usize,
    pub num_views: usize,
}

impl PatchLayout {
    /// `M = P * P * N`.
    pub fn num_patches(&self) -> usize {
        self.grid * self.grid * self.num_views
    }

    /// Canonical patch index `j = z * P^2 + x * P + y`.
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        z * self.grid * self.grid + x * self.grid + y
    }

    /// Inverse of [`PatchLayout::index`]: `(row x, column y, view z)`.
    pub fn coord(&self, j: usize) -> [usize; 3] {
        let per_view = self.grid * self.grid;
        [(j % per_view) / self.grid, j % self.grid, j / per_view]
    }

    pub fn coords(&self) -> Vec<[usize; 3]> {
        (0..self.num_patches()).map(|j| self.coord(j)).collect()
    }
}

/// All patch features of one model in canonical order, `M x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub features: Tensor,
    pub layout: PatchLayout,
}

impl PatchSet {
    pub fn new(features: Tensor, layout: PatchLayout) -> Result<Self> {
        if features.shape() != [layout.num_patches(), layout.dim] {
            return Err(Error::shape(
                "patch_set",
                features.shape(),
                &[layout.num_patches(), layout.dim],
            ));
        }
        Ok(PatchSet { features, layout })
    }

    pub fn coords(&self) -> Vec<[usize; 3]> {
        self.layout.coords()
    }
}

/// Rearranges a loaded `N x P x P x D` entry into a [`PatchSet`].
pub fn patches_from_pvf(entry: &PatchEntry, num_views: usize, grid: usize, dim: usize) -> Result<PatchSet> {
    let layout = PatchLayout { grid, dim, num_views };
    let expected = layout.num_patches() * dim;
    if entry.features.len() != expected {
        return Err(Error::shape("patches_from_pvf", &[entry.features.len()], &[expected]));
    }
    // the file order (view, row, column, channel) is already canonical
    let data = entry.features.iter().map(|&v| v as f64).collect();
    PatchSet::new(Tensor::new(vec![layout.num_patches(), dim], data)?, layout)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Number of stride-2 blocks `L`.
    pub layers: usize,
    /// Output patch dimension `D`.
    pub dim: usize,
    pub leaky_slope: f64,
}

impl BackboneConfig {
    /// Channel width after each block, doubling up to `dim`.
    pub fn channels(&self) -> Vec<usize> {
        (0..self.layers)
            .map(|l| (self.dim >> (self.layers - 1 - l)).max(2).min(self.dim))
            .collect()
    }

    /// Patch grid size for `res x res` views.
    pub fn grid(&self, res: usize) -> Result<usize> {
        let factor = 1usize << self.layers;
        if self.layers == 0 || res % factor != 0 {
            return Err(Error::Config(format!(
                "view resolution {res} is not divisible by 2^{} = {factor}",
                self.layers
            )));
        }
        Ok(res / factor)
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    weight: ParamId,
    norm: BatchNormLayer,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    blocks: Vec<ConvBlock>,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        cfg: BackboneConfig,
        bn_eps: f64,
        bn_momentum: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.layers);
        let mut cin = 1;
        for (l, &cout) in cfg.channels().iter().enumerate() {
            let prefix = format!("backbone/block{l}");
            let fan_in = cin * 9;
            blocks.push(ConvBlock {
                weight: store.add_uniform(&format!("{prefix}/conv/weight"), &[cout, cin, 3, 3], fan_in, rng)?,
                norm: BatchNormLayer::new(store, &format!("{prefix}/bn"), cout, bn_eps, bn_momentum)?,
            });
            cin = cout;
        }
        Ok(Backbone { cfg, blocks })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Runs the shared blocks over every view of every sample. Returns the
    /// patch features of all samples stacked in canonical order,
    /// `[B * M, D]`, and the per-model layout.
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        samples: &[&MultiViewSample],
        num_views: usize,
        res: usize,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Var, PatchLayout)> {
        let grid = self.cfg.grid(res)?;
        let per = num_views * res * res;
        let mut pixels = Vec::with_capacity(samples.len() * per);
        for s in samples {
            if s.pixels.len() != per {
                return Err(Error::shape("backbone", &[s.pixels.len()], &[per]));
            }
            pixels.extend(s.pixels.iter().map(|&p| p as f64));
        }
        let images = samples.len() * num_views;
        let mut x = tape.constant(Tensor::new(vec![images, res, res, 1], pixels)?);
        let mut side = res;
        for block in &self.blocks {
            let w = store.var(tape, block.weight);
            // batch norm removes any per-channel offset, so the conv has no bias
            let b = tape.constant(Tensor::zeros(&[store.value(block.weight).shape()[0]]));
            let y = tape.conv2d(x, w, b, 2)?;
            side /= 2;
            let channels = tape.shape(y)[3];
            let flat = tape.reshape(y, &[images * side * side, channels])?;
            let normed = block.norm.forward(store, tape, flat, mode, updates)?;
            let act = tape.leaky_relu(normed, self.cfg.leaky_slope)?;
            x = tape.reshape(act, &[images, side, side, channels])?;
        }
        debug_assert_eq!(side, grid);
        let layout = PatchLayout {
            grid,
            dim: self.cfg.dim,
            num_views,
        };
        let patches = tape.reshape(x, &[samples.len() * layout.num_patches(), self.cfg.dim])?;
        Ok((patches, layout))
    }

    /// Patch features of a single model.
    pub fn extract_patches(
        &self,
        store: &ParamStore,
        sample: &MultiViewSample,
        num_views: usize,
        res: usize,
        mode: Mode,
    ) -> Result<PatchSet> {
        let mut tape = Tape::new();
        let mut updates = Vec::new();
        let (x, layout) = self.forward(store, &mut tape, &[sample], num_views, res, mode, &mut updates)?;
        PatchSet::new(tape.value(x).clone(), layout)
    }
}
