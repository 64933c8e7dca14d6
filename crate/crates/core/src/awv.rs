//! Adaptive weighted view fusion.
//!
//! Patch grids are average-pooled into one feature per view, mixed with the
//! neighbouring views by a circular kernel-3 convolution, and then weighted by
//! a softmax over each view's cosine similarity to the channelwise max over
//! views.

use rand::Rng;

use crate::backbone::PatchLayout;
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const COSINE_EPS: f64 = 1e-8;

/// Averages each view's `P x P` patches: `[B * M, D] -> [B, N, D]`.
pub fn pool_views(tape: &mut Tape, x: Var, layout: &PatchLayout) -> Result<Var> {
    let m = layout.num_patches();
    let rows = tape.shape(x)[0];
    if rows % m != 0 || tape.shape(x)[1] != layout.dim {
        return Err(Error::shape("pool_views", tape.shape(x), &[m, layout.dim]));
    }
    let batch = rows / m;
    let views = batch * layout.num_views;
    let grid = tape.reshape(x, &[views, layout.grid, layout.grid, layout.dim])?;
    let pooled = tape.avg_pool_2d(grid, layout.grid)?;
    tape.reshape(pooled, &[batch, layout.num_views, layout.dim])
}

/// Circular kernel-3 convolution relating adjacent views.
#[derive(Clone, Copy, Debug)]
pub struct AdjacentMix {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl AdjacentMix {
    /// Starts from the identity map on the centre tap plus a small random
    /// perturbation on every tap.
    pub fn new(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut w = Tensor::zeros(&[channels, channels, 3]);
        let spread = (1.0 / (3 * channels) as f64).sqrt();
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            let (co, ci, t) = (i / (3 * channels), (i / 3) % channels, i % 3);
            *v = rng.random_range(-spread..spread) + if co == ci && t == 1 { 1.0 } else { 0.0 };
        }
        Ok(AdjacentMix {
            weight: store.add("awv/conv1d/weight", w)?,
            bias: store.add("awv/conv1d/bias", Tensor::zeros(&[channels]))?,
        })
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, f: Var) -> Result<Var> {
        let w = store.var(tape, self.weight);
        let b = store.var(tape, self.bias);
        tape.conv1d_circular(f, w, b)
    }
}

/// Tape handles of the attention stage, all batched over models.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    /// View-pooling feature `[B, D]`.
    pub pooled: Var,
    /// Cosine similarities `[B, N]`.
    pub similarity: Var,
    /// View weights `[B, N]`.
    pub alpha: Var,
    /// Weighted view features `[B, N, D]`.
    pub weighted: Var,
    /// Fusion feature `[B, D]`.
    pub fused: Var,
}

/// Attention weights from view features `f: [B, N, D]`.
pub fn attention_weights(tape: &mut Tape, f: Var) -> Result<FusionVars> {
    let (pooled, _) = tape.max_over_axis(f, 1)?;
    let similarity = tape.cosine_similarity(f, pooled, COSINE_EPS)?;
    let alpha = tape.softmax(similarity);
    let (weighted, fused) = fuse_with_weights(tape, f, alpha)?;
    Ok(FusionVars {
        pooled,
        similarity,
        alpha,
        weighted,
        fused,
    })
}

/// Weighted view features `alpha_j f_j` and their sum, for given weights.
pub fn fuse_with_weights(tape: &mut Tape, f: Var, alpha: Var) -> Result<(Var, Var)> {
    let weighted = tape.scale_rows(f, alpha)?;
    let fused = tape.weighted_sum(f, alpha)?;
    Ok((weighted, fused))
}

/// Plain fusion values of one model, read back from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionState {
    pub pooled: Vec<f64>,
    pub similarity: Vec<f64>,
    pub alpha: Vec<f64>,
    pub weighted: Tensor,
    pub fused: Vec<f64>,
}

impl FusionState {
    /// Runs [`attention_weights`] on the view features of a single model.
    pub fn compute(views: &Tensor) -> Result<Self> {
        if views.rank() != 2 {
            return Err(Error::invalid("attention_weights", format!("expected [N, D], got {:?}", views.shape())));
        }
        let (n, d) = (views.shape()[0], views.shape()[1]);
        let mut tape = Tape::new();
        let f = tape.constant(views.clone().reshape(&[1, n, d])?);
        let vars = attention_weights(&mut tape, f)?;
        Ok(FusionState {
            pooled: tape.value(vars.pooled).data().to_vec(),
            similarity: tape.value(vars.similarity).data().to_vec(),
            alpha: tape.value(vars.alpha).data().to_vec(),
            weighted: tape.value(vars.weighted).clone().reshape(&[n, d])?,
            fused: tape.value(vars.fused).data().to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn views(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identical_views_get_uniform_weights() {
        let f = views(&vec![vec![0.5, -1.0, 2.0]; 4]);
        let st = FusionState::compute(&f).unwrap();
        for a in &st.alpha {
            assert!((a - 0.25).abs() < 1e-15);
        }
        for (g, v) in st.fused.iter().zip([0.5, -1.0, 2.0]) {
            assert!((g - v).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_softmax() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(vec![1, 2], vec![2f64.ln(), 0.0]).unwrap());
        let a = tape.softmax(s);
        let alpha = tape.value(a).data();
        assert!((alpha[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((alpha[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn forced_one_hot_weights_select_first_view() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let alpha = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let (weighted, fused) = fuse_with_weights(&mut tape, f, alpha).unwrap();
        assert_eq!(tape.value(fused).data(), &[1.0, 2.0]);
        assert_eq!(tape.value(weighted).data(), &[1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn pooled_is_channel_max() {
        let f = views(&[vec![1.0, -3.0], vec![0.5, 2.0], vec![-1.0, 0.0]]);
        let st = FusionState::compute(&f).unwrap();
        assert_eq!(st.pooled, vec![1.0, 2.0]);
        let total: f64 = st.alpha.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pool_views_means() {
        let layout = PatchLayout {
            grid: 2,
            dim: 1,
            num_views: 1,
        };
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let f = pool_views(&mut tape, x, &layout).unwrap();
        assert_eq!(tape.shape(f), &[1, 1, 1]);
        assert_eq!(tape.value(f).data(), &[2.5]);
    }

    #[test]
    fn pool_views_constant_view() {
        let layout = PatchLayout {
            grid: 7,
            dim: 2,
            num_views: 2,
        };
        let mut data = Vec::new();
        for z in 0..2 {
            for _ in 0..49 {
                data.extend_from_slice(&[z as f64, 1.5]);
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![98, 2], data).unwrap());
        let f = pool_views(&mut tape, x, &layout).unwrap();
        for (v, w) in tape.value(f).data().iter().zip([0.0, 1.5, 1.0, 1.5]) {
            assert!((v - w).abs() < 1e-12);
        }
    }
}
