//! Gallery embedding, ranking with optional classification rerank, and
//! mAP / precision-recall evaluation.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::{EmbeddingRecord, EmbeddingSet};
use crate::error::{Error, Result};
use crate::model::{ModelSample, Pcnn};

/// Number of recall levels sampled on the PR curve: 0.00, 0.01, ..., 1.00.
pub const PR_POINTS: usize = 101;

const EMBED_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::Config(format!("unknown retrieval metric {other:?}"))),
        }
    }
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        }
    }

    /// Cosine distance is `1 - cos`, with zero vectors treated as having
    /// norm `1e-8`.
    pub fn distance(self, a: &[f32], b: &[f32]) -> f64 {
        match self {
            Metric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum::<f64>()
                .sqrt(),
            Metric::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for (&x, &y) in a.iter().zip(b) {
                    let (x, y) = (x as f64, y as f64);
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                1.0 - dot / (na.sqrt().max(1e-8) * nb.sqrt().max(1e-8))
            }
        }
    }
}

/// Runs every sample through the network in eval mode.
pub fn embed<S: ModelSample>(model: &Pcnn, samples: &[S]) -> Result<EmbeddingSet> {
    let mut records = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EMBED_BATCH) {
        let batch: Vec<&S> = chunk.iter().collect();
        for (s, (emb, pred)) in chunk.iter().zip(model.embed(&batch)?) {
            records.push(EmbeddingRecord {
                model_id: s.model_id(),
                label: s.label(),
                predicted_class: pred,
                embedding: emb.into_iter().map(|v| v as f32).collect(),
            });
        }
    }
    Ok(EmbeddingSet {
        dim: model.cfg.embedding_dim(),
        records,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedItem {
    /// Position of the item in the gallery slice.
    pub index: usize,
    pub model_id: u32,
    pub distance: f64,
    pub relevant: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub query_id: u32,
    pub items: Vec<RankedItem>,
}

impl RankedList {
    pub fn relevance(&self) -> Vec<bool> {
        self.items.iter().map(|i| i.relevant).collect()
    }
}

/// Orders `gallery` by ascending distance to `query`, ties by gallery
/// position. With `rerank`, items predicted in the query's class move ahead
/// of the rest, keeping distance order inside both groups.
pub fn rank(query: &EmbeddingRecord, gallery: &[&EmbeddingRecord], metric: Metric, rerank: bool) -> Result<RankedList> {
    if gallery.is_empty() {
        return Err(Error::invalid("rank", "empty gallery"));
    }
    let mut items: Vec<RankedItem> = gallery
        .iter()
        .enumerate()
        .map(|(index, g)| RankedItem {
            index,
            model_id: g.model_id,
            distance: metric.distance(&query.embedding, &g.embedding),
            relevant: g.label == query.label,
        })
        .collect();
    items.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    if rerank {
        // stable sort on a boolean key is a stable partition
        items.sort_by_key(|it| gallery[it.index].predicted_class != query.predicted_class);
    }
    Ok(RankedList {
        query_id: query.model_id,
        items,
    })
}

/// Mean of precision at each relevant rank; `None` without relevant items.
///
/// The precisions are summed in double-double arithmetic (each division
/// keeps its exact remainder), so the result is the correctly rounded mean:
/// `[1, 0, 1]` gives exactly `5.0 / 6.0`.
pub fn average_precision(rel: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for (i, &r) in rel.iter().enumerate() {
        if r {
            hits += 1;
            let (h, n) = (hits as f64, (i + 1) as f64);
            let q = h / n;
            let rem = (-q).mul_add(n, h) / n;
            let (s, err) = two_sum(hi, q);
            hi = s;
            lo += err + rem;
        }
    }
    (hits > 0).then(|| {
        let r = hits as f64;
        let q = hi / r;
        q + ((-q).mul_add(r, hi) + lo) / r
    })
}

/// `a + b` and its exact rounding error.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Interpolated precision at recall levels `0, 0.01, ..., 1`; `None`
/// without relevant items.
pub fn interpolated_pr(rel: &[bool]) -> Option<Vec<f64>> {
    let total = rel.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    // (hits, precision) after each rank
    let mut points = Vec::with_capacity(rel.len());
    let mut hits = 0usize;
    for (i, &r) in rel.iter().enumerate() {
        hits += r as usize;
        points.push((hits, hits as f64 / (i + 1) as f64));
    }
    // best precision from each rank onwards
    let mut tail_max = vec![0.0; points.len()];
    let mut best = 0.0f64;
    for i in (0..points.len()).rev() {
        best = best.max(points[i].1);
        tail_max[i] = best;
    }
    let mut out = Vec::with_capacity(PR_POINTS);
    let mut first = 0;
    for level in 0..PR_POINTS {
        // first rank whose recall hits/total reaches level/100, compared exactly
        while first < points.len() && points[first].0 * (PR_POINTS - 1) < level * total {
            first += 1;
        }
        out.push(tail_max[first]);
    }
    Some(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub map: f64,
    pub queries: usize,
    pub excluded: usize,
    /// `(recall, precision)` pairs, one per recall level.
    pub pr: Vec<(f64, f64)>,
    pub rankings: Vec<RankedList>,
}

impl Evaluation {
    pub fn metrics_json(&self) -> String {
        serde_json::json!({
            "map": self.map,
            "queries": self.queries,
            "excluded": self.excluded,
        })
        .to_string()
    }

    pub fn pr_csv(&self) -> String {
        let mut out = String::from("recall,precision\n");
        for (r, p) in &self.pr {
            let _ = writeln!(out, "{r:.2},{p}");
        }
        out
    }

    pub fn ranking_csv(&self) -> String {
        ranking_csv(&self.rankings)
    }
}

pub fn ranking_csv(lists: &[RankedList]) -> String {
    let mut out = String::from("query_id,rank,gallery_id,distance,relevant\n");
    for list in lists {
        for (r, it) in list.items.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                list.query_id,
                r + 1,
                it.model_id,
                it.distance,
                it.relevant as u8
            );
        }
    }
    out
}

/// Leave-one-out ranking of every model against all others.
pub fn rank_all(set: &EmbeddingSet, metric: Metric, rerank: bool) -> Result<Vec<RankedList>> {
    if set.records.len() < 2 {
        return Err(Error::invalid("retrieval", "need at least 2 models"));
    }
    (0..set.records.len())
        .map(|q| {
            let gallery: Vec<&EmbeddingRecord> = set
                .records
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != q)
                .map(|(_, r)| r)
                .collect();
            let mut list = rank(&set.records[q], &gallery, metric, rerank)?;
            // report positions in the full set rather than the gallery slice
            for it in &mut list.items {
                it.index += (it.index >= q) as usize;
            }
            Ok(list)
        })
        .collect()
}

/// mAP over queries with at least one relevant item, and the averaged
/// interpolated PR curve over the same queries.
pub fn map_and_pr(set: &EmbeddingSet, metric: Metric, rerank: bool) -> Result<Evaluation> {
    let rankings = rank_all(set, metric, rerank)?;
    let mut ap_sum = 0.0;
    let mut pr_sum = vec![0.0; PR_POINTS];
    let mut queries = 0;
    for list in &rankings {
        let rel = list.relevance();
        if let (Some(ap), Some(pr)) = (average_precision(&rel), interpolated_pr(&rel)) {
            ap_sum += ap;
            pr_sum.iter_mut().zip(pr).for_each(|(s, p)| *s += p);
            queries += 1;
        }
    }
    if queries == 0 {
        return Err(Error::NoValidQueries);
    }
    let pr = pr_sum
        .iter()
        .enumerate()
        .map(|(i, s)| (i as f64 / (PR_POINTS - 1) as f64, s / queries as f64))
        .collect();
    Ok(Evaluation {
        map: ap_sum / queries as f64,
        queries,
        excluded: rankings.len() - queries,
        pr,
        rankings,
    })
}
