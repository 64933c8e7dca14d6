//! PatchConv: k-nearest-neighbour aggregation over all patches of a model.
//!
//! For each patch `i` the layer builds edges to its `k` nearest patches in
//! feature space (across every view), describes each edge by
//! `(p_i, p_j - p_i, c_i, c_j - c_i)` where `c` are integer grid coordinates
//! `(row, column, view)`, maps the edge through a shared linear transform,
//! batch norm and LeakyReLU, and max-pools over the `k` edges.

use std::str::FromStr;

use rand::Rng;

use crate::backbone::{PatchLayout, PatchSet};
use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, BnUpdate, Mode};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KnnMetric {
    /// Squared Euclidean distance.
    #[default]
    Euclidean,
    /// One minus cosine similarity.
    Cosine,
}

impl FromStr for KnnMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(KnnMetric::Euclidean),
            "cosine" => Ok(KnnMetric::Cosine),
            other => Err(Error::Config(format!("unknown knn metric {other:?}"))),
        }
    }
}

impl KnnMetric {
    pub fn name(self) -> &'static str {
        match self {
            KnnMetric::Euclidean => "euclidean",
            KnnMetric::Cosine => "cosine",
        }
    }
}

/// Row `i` lists the `k` nearest patches of patch `i`, nearest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborGraph {
    pub k: usize,
    pub neighbors: Vec<usize>,
}

impl NeighborGraph {
    pub fn num_nodes(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }
}

/// Builds the kNN graph of the rows of `features` (`[M, D]`), excluding self
/// and breaking distance ties by the lower index.
pub fn knn_graph(features: &Tensor, k: usize, metric: KnnMetric) -> Result<NeighborGraph> {
    if features.rank() != 2 {
        return Err(Error::invalid("knn_graph", format!("expected [M, D], got {:?}", features.shape())));
    }
    let m = features.shape()[0];
    if k == 0 || k >= m {
        return Err(Error::invalid("knn_graph", format!("k = {k} must be in [1, {}]", m.saturating_sub(1))));
    }
    let rows: Vec<&[f64]> = (0..m).map(|i| features.row(i)).collect();
    let norms: Vec<f64> = match metric {
        KnnMetric::Cosine => rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect(),
        KnnMetric::Euclidean => Vec::new(),
    };
    let mut neighbors = Vec::with_capacity(m * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(m);
    for i in 0..m {
        cand.clear();
        for j in (0..m).filter(|&j| j != i) {
            let d = match metric {
                KnnMetric::Euclidean => rows[i]
                    .iter()
                    .zip(rows[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>(),
                KnnMetric::Cosine => {
                    let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
                    1.0 - dot / (norms[i].max(1e-8) * norms[j].max(1e-8))
                }
            };
            cand.push((d, j));
        }
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, order);
            cand.truncate(k);
        }
        cand.sort_unstable_by(order);
        neighbors.extend(cand.iter().map(|&(_, j)| j));
    }
    Ok(NeighborGraph { k, neighbors })
}

fn coord_values(layout: &PatchLayout) -> Vec<[f64; 3]> {
    layout
        .coords()
        .into_iter()
        .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
        .collect()
}

/// Edge features of every (patch, neighbour) pair, `[M, k, W]` with
/// `W = 2 (D + 3)`, or `W = 2 D` without coordinates.
pub fn edge_features(patches: &PatchSet, graph: &NeighborGraph, use_coords: bool) -> Result<Tensor> {
    let m = patches.layout.num_patches();
    if graph.num_nodes() != m {
        return Err(Error::shape("edge_features", &[graph.num_nodes()], &[m]));
    }
    let d = patches.layout.dim;
    let coords = coord_values(&patches.layout);
    let width = if use_coords { 2 * (d + 3) } else { 2 * d };
    let mut out = Vec::with_capacity(m * graph.k * width);
    for i in 0..m {
        let pi = patches.features.row(i);
        for &j in graph.row(i) {
            let pj = patches.features.row(j);
            out.extend_from_slice(pi);
            out.extend(pj.iter().zip(pi).map(|(b, a)| b - a));
            if use_coords {
                out.extend_from_slice(&coords[i]);
                out.extend((0..3).map(|a| coords[j][a] - coords[i][a]));
            }
        }
    }
    Tensor::new(vec![m, graph.k, width], out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchConvConfig {
    pub k: usize,
    /// `false` drops the coordinate terms (plain EdgeConv).
    pub use_coords: bool,
    pub leaky_slope: f64,
    pub metric: KnnMetric,
}

impl Default for PatchConvConfig {
    fn default() -> Self {
        PatchConvConfig {
            k: 12,
            use_coords: true,
            leaky_slope: 0.2,
            metric: KnnMetric::Euclidean,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PatchConvLayer {
    pub cfg: PatchConvConfig,
    pub in_dim: usize,
    /// Shared edge transform, `[edge width, out_dim]`.
    pub weight: ParamId,
    pub norm: BatchNormLayer,
}

impl PatchConvLayer {
    pub fn new(
        store: &mut ParamStore,
        cfg: PatchConvConfig,
        in_dim: usize,
        bn_eps: f64,
        bn_momentum: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (edge, out) = Self::dims(&cfg, in_dim);
        Ok(PatchConvLayer {
            cfg,
            in_dim,
            weight: store.add_uniform("patchconv/weight", &[edge, out], edge, rng)?,
            norm: BatchNormLayer::new(store, "patchconv/bn", out, bn_eps, bn_momentum)?,
        })
    }

    fn dims(cfg: &PatchConvConfig, d: usize) -> (usize, usize) {
        if cfg.use_coords {
            (2 * (d + 3), d + 3)
        } else {
            (2 * d, d)
        }
    }

    pub fn edge_width(&self) -> usize {
        Self::dims(&self.cfg, self.in_dim).0
    }

    pub fn out_dim(&self) -> usize {
        Self::dims(&self.cfg, self.in_dim).1
    }

    /// Builds the stacked edge-feature matrix `[B * M * k, W]` for `batch`
    /// models whose patches are stacked in `x: [B * M, D]`.
    fn edges_on_tape(&self, tape: &mut Tape, x: Var, layout: &PatchLayout, batch: usize) -> Result<Var> {
        let m = layout.num_patches();
        let d = layout.dim;
        let k = self.cfg.k;
        let mut centers = Vec::with_capacity(batch * m * k);
        let mut others = Vec::with_capacity(batch * m * k);
        for b in 0..batch {
            let values = tape.value(x).data();
            let block = Tensor::new(vec![m, d], values[b * m * d..(b + 1) * m * d].to_vec())?;
            let graph = knn_graph(&block, k, self.cfg.metric)?;
            let neighbors = tape.pin("knn_graph", graph.neighbors)?;
            for (e, &j) in neighbors.iter().enumerate() {
                centers.push(b * m + e / k);
                others.push(b * m + j);
            }
        }
        let pi = tape.gather_rows(x, &centers)?;
        let pj = tape.gather_rows(x, &others)?;
        let diff = tape.sub(pj, pi)?;
        if !self.cfg.use_coords {
            return tape.concat(&[pi, diff], 1);
        }
        let coords = coord_values(layout);
        let mut ci = Vec::with_capacity(centers.len() * 3);
        let mut dc = Vec::with_capacity(centers.len() * 3);
        for (&c, &o) in centers.iter().zip(&others) {
            let (a, b) = (coords[c % m], coords[o % m]);
            ci.extend_from_slice(&a);
            dc.extend((0..3).map(|t| b[t] - a[t]));
        }
        let ci = tape.constant(Tensor::new(vec![centers.len(), 3], ci)?);
        let dc = tape.constant(Tensor::new(vec![centers.len(), 3], dc)?);
        tape.concat(&[pi, diff, ci, dc], 1)
    }

    fn aggregate(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: Var,
        layout: &PatchLayout,
        mode: Option<(Mode, &mut Vec<BnUpdate>)>,
    ) -> Result<(Var, PatchLayout)> {
        let m = layout.num_patches();
        let rows = tape.shape(x)[0];
        if rows % m != 0 || tape.shape(x)[1] != layout.dim || layout.dim != self.in_dim {
            return Err(Error::shape("patchconv", tape.shape(x), &[m, self.in_dim]));
        }
        let batch = rows / m;
        let edges = self.edges_on_tape(tape, x, layout, batch)?;
        let w = store.var(tape, self.weight);
        let mut h = tape.matmul(edges, w)?;
        if let Some((mode, updates)) = mode {
            h = self.norm.forward(store, tape, h, mode, updates)?;
            h = tape.leaky_relu(h, self.cfg.leaky_slope)?;
        }
        let out = self.out_dim();
        let grouped = tape.reshape(h, &[batch * m, self.cfg.k, out])?;
        let (pooled, _) = tape.max_over_axis(grouped, 1)?;
        let layout = PatchLayout { dim: out, ..*layout };
        Ok((pooled, layout))
    }

    /// Full layer on stacked patches `x: [B * M, D]`; returns `[B * M, D']`.
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: Var,
        layout: &PatchLayout,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Var, PatchLayout)> {
        self.aggregate(store, tape, x, layout, Some((mode, updates)))
    }

    /// Edge transform followed directly by the neighbour max, skipping batch
    /// norm and activation.
    pub fn forward_linear(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: Var,
        layout: &PatchLayout,
    ) -> Result<(Var, PatchLayout)> {
        self.aggregate(store, tape, x, layout, None)
    }

    /// Applies the layer to one model's patches.
    pub fn apply(&self, store: &ParamStore, patches: &PatchSet, mode: Mode) -> Result<PatchSet> {
        let mut tape = Tape::new();
        let mut updates = Vec::new();
        let x = tape.constant(patches.features.clone());
        let (y, layout) = self.forward(store, &mut tape, x, &patches.layout, mode, &mut updates)?;
        PatchSet::new(tape.value(y).clone(), layout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn col(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn knn_hand_example() {
        let g = knn_graph(&col(&[0.0, 1.0, 10.0]), 1, KnnMetric::Euclidean).unwrap();
        assert_eq!(g.neighbors, vec![1, 0, 1]);
    }

    #[test]
    fn knn_full_rows() {
        let g = knn_graph(&col(&[0.0, 5.0, 1.0, 3.0]), 3, KnnMetric::Euclidean).unwrap();
        for i in 0..4 {
            let mut row = g.row(i).to_vec();
            row.sort();
            let want: Vec<usize> = (0..4).filter(|&j| j != i).collect();
            assert_eq!(row, want);
        }
        assert_eq!(g.row(0), &[2, 3, 1]);
    }

    #[test]
    fn knn_duplicates_list_each_other_first() {
        let g = knn_graph(&col(&[2.0, 7.0, 2.0, 2.5]), 2, KnnMetric::Euclidean).unwrap();
        assert_eq!(g.row(0)[0], 2);
        assert_eq!(g.row(2)[0], 0);
    }

    #[test]
    fn knn_rejects_large_k() {
        assert!(knn_graph(&col(&[0.0, 1.0]), 2, KnnMetric::Euclidean).is_err());
        assert!(knn_graph(&col(&[0.0, 1.0]), 0, KnnMetric::Euclidean).is_err());
    }

    fn two_patch_set(p: [f64; 2], layout_views: usize) -> PatchSet {
        // P=1, N=2: patch 0 is view 0, patch 1 is view 1
        let layout = PatchLayout {
            grid: 1,
            dim: 1,
            num_views: layout_views,
        };
        PatchSet::new(col(&p), layout).unwrap()
    }

    #[test]
    fn edge_feature_rows() {
        let ps = two_patch_set([1.0, 3.0], 2);
        let g = NeighborGraph {
            k: 1,
            neighbors: vec![1, 0],
        };
        let e = edge_features(&ps, &g, true).unwrap();
        assert_eq!(e.shape(), &[2, 1, 8]);
        // coords are (row, col, view): patch 1 sits in view 1
        assert_eq!(&e.data()[..8], &[1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let plain = edge_features(&ps, &g, false).unwrap();
        assert_eq!(plain.shape(), &[2, 1, 2]);
        assert_eq!(&plain.data()[..2], &[1.0, 2.0]);
    }

    #[test]
    fn edge_feature_self_pair_is_zero_diff() {
        let ps = two_patch_set([4.0, 4.0], 2);
        let g = NeighborGraph {
            k: 1,
            neighbors: vec![0, 1],
        };
        let e = edge_features(&ps, &g, true).unwrap();
        assert_eq!(&e.data()[8..], &[4.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn paper_profile_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let layer = PatchConvLayer::new(&mut store, PatchConvConfig::default(), 512, 1e-5, 0.1, &mut rng).unwrap();
        assert_eq!(layer.edge_width(), 1030);
        assert_eq!(layer.out_dim(), 515);
        let edge = PatchConvLayer::new(
            &mut ParamStore::new(),
            PatchConvConfig {
                use_coords: false,
                ..PatchConvConfig::default()
            },
            512,
            1e-5,
            0.1,
            &mut rng,
        )
        .unwrap();
        assert_eq!(edge.edge_width(), 1024);
    }

    fn pinned_layer(coord_weight: f64) -> (ParamStore, PatchConvLayer) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = PatchConvConfig {
            k: 1,
            ..PatchConvConfig::default()
        };
        let layer = PatchConvLayer::new(&mut store, cfg, 1, 1e-5, 0.1, &mut rng).unwrap();
        // output channel 0 sums the edge groups; the other channels stay zero
        let mut w = Tensor::zeros(&[8, 4]);
        for r in 0..8 {
            w.data_mut()[r * 4] = if r < 2 { 1.0 } else { coord_weight };
        }
        store.get_mut(layer.weight).value = w;
        (store, layer)
    }

    #[test]
    fn pinned_sum_transform() {
        let layout = PatchLayout {
            grid: 1,
            dim: 1,
            num_views: 2,
        };
        // coordinate groups weighted by zero: same as all-zero coordinates
        let (store, layer) = pinned_layer(0.0);
        let mut tape = Tape::new();
        let x = tape.constant(col(&[1.0, 3.0]));
        let (y, out_layout) = layer.forward_linear(&store, &mut tape, x, &layout).unwrap();
        assert_eq!(out_layout.dim, 4);
        assert_eq!(tape.value(y).data()[0], 3.0);

        // with coordinates: patch 1 sits in view 1, so c_1 - c_0 = (0, 0, 1)
        let (store, layer) = pinned_layer(1.0);
        let mut tape = Tape::new();
        let x = tape.constant(col(&[1.0, 3.0]));
        let (y, _) = layer.forward_linear(&store, &mut tape, x, &layout).unwrap();
        assert_eq!(tape.value(y).data()[0], 4.0);
    }

    #[test]
    fn identical_patches_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cfg = PatchConvConfig {
            k: 3,
            use_coords: false,
            ..PatchConvConfig::default()
        };
        let layer = PatchConvLayer::new(&mut store, cfg, 2, 1e-5, 0.1, &mut rng).unwrap();
        let layout = PatchLayout {
            grid: 2,
            dim: 2,
            num_views: 3,
        };
        let feats = Tensor::new(vec![12, 2], [0.3, -0.7].repeat(12)).unwrap();
        let out = layer
            .apply(&store, &PatchSet::new(feats, layout).unwrap(), Mode::Eval)
            .unwrap();
        let first = out.features.row(0).to_vec();
        for i in 1..12 {
            assert_eq!(out.features.row(i), &first[..]);
        }
    }
}
