//! Slow, obviously-correct reference implementations used by the
//! integration tests.
#![allow(dead_code)]

use pcnn::backbone::PatchLayout;
use pcnn::data::MultiViewSample;
use pcnn::param::ParamStore;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Batch norm parameters of the reference layer. `None` statistics mean
/// train mode (batch statistics over all edge rows).
pub struct RefNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running: Option<(Vec<f64>, Vec<f64>)>,
    pub eps: f64,
}

impl RefNorm {
    pub fn from_store(store: &ParamStore, prefix: &str, eval: bool, eps: f64) -> Self {
        let get = |n: &str| {
            let id = store.id(&format!("{prefix}/{n}")).unwrap_or_else(|| panic!("no {prefix}/{n}"));
            store.value(id).data().to_vec()
        };
        RefNorm {
            gamma: get("gamma"),
            beta: get("beta"),
            running: eval.then(|| (get("running_mean"), get("running_var"))),
            eps,
        }
    }
}

/// PatchConv by direct enumeration: for every patch, rank all other patches
/// by squared Euclidean feature distance (ties to the lower index), build
/// each edge vector by hand, transform, normalize, activate and take the
/// channelwise max over the k neighbours.
pub fn patchconv_reference(
    features: &[Vec<f64>],
    layout: &PatchLayout,
    k: usize,
    use_coords: bool,
    weight: &[Vec<f64>],
    norm: &RefNorm,
    slope: f64,
) -> Vec<Vec<f64>> {
    let m = features.len();
    let coord = |j: usize| -> [f64; 3] {
        let z = j / (layout.grid * layout.grid);
        let x = (j % (layout.grid * layout.grid)) / layout.grid;
        let y = j % layout.grid;
        [x as f64, y as f64, z as f64]
    };
    let mut edges: Vec<Vec<f64>> = Vec::new();
    for i in 0..m {
        let mut others: Vec<(f64, usize)> = Vec::new();
        for j in 0..m {
            if j == i {
                continue;
            }
            let mut d = 0.0;
            for c in 0..features[i].len() {
                d += (features[i][c] - features[j][c]) * (features[i][c] - features[j][c]);
            }
            others.push((d, j));
        }
        others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, j) in &others[..k] {
            let mut e = features[i].clone();
            for c in 0..features[i].len() {
                e.push(features[j][c] - features[i][c]);
            }
            if use_coords {
                let (ci, cj) = (coord(i), coord(j));
                e.extend_from_slice(&ci);
                for a in 0..3 {
                    e.push(cj[a] - ci[a]);
                }
            }
            edges.push(e);
        }
    }
    let out = weight[0].len();
    let mut h: Vec<Vec<f64>> = edges
        .iter()
        .map(|e| {
            (0..out)
                .map(|o| e.iter().zip(weight).map(|(v, w)| v * w[o]).sum())
                .collect()
        })
        .collect();
    for o in 0..out {
        let (mean, var) = match &norm.running {
            Some((rm, rv)) => (rm[o], rv[o]),
            None => {
                let n = h.len() as f64;
                let mean = h.iter().map(|r| r[o]).sum::<f64>() / n;
                (mean, h.iter().map(|r| (r[o] - mean).powi(2)).sum::<f64>() / n)
            }
        };
        for r in h.iter_mut() {
            let y = norm.gamma[o] * (r[o] - mean) / (var + norm.eps).sqrt() + norm.beta[o];
            r[o] = if y > 0.0 { y } else { slope * y };
        }
    }
    (0..m)
        .map(|i| {
            (0..out)
                .map(|o| (0..k).map(|t| h[i * k + t][o]).fold(f64::NEG_INFINITY, f64::max))
                .collect()
        })
        .collect()
}

/// Average precision straight from its definition, in exact rational
/// arithmetic: precision at every relevant rank, averaged over the relevant
/// items, rounded to `f64` once at the end. Valid for lists up to a few
/// dozen items.
pub fn ap_reference(rel: &[bool]) -> Option<f64> {
    fn gcd(a: u128, b: u128) -> u128 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let relevant = rel.iter().filter(|&&r| r).count() as u128;
    if relevant == 0 {
        return None;
    }
    // running sum num / den of hits / rank
    let (mut num, mut den) = (0u128, 1u128);
    for r in 0..rel.len() {
        if rel[r] {
            let hits = rel[..=r].iter().filter(|&&x| x).count() as u128;
            let rank = (r + 1) as u128;
            num = num * rank + hits * den;
            den *= rank;
            let g = gcd(num, den);
            num /= g;
            den /= g;
        }
    }
    den *= relevant;
    let g = gcd(num, den);
    let (num, den) = (num / g, den / g);
    assert!(num < 1 << 53 && den < 1 << 53, "reference needs a shorter list");
    // both operands are exact, so one IEEE division rounds correctly
    Some(num as f64 / den as f64)
}

pub fn random_relevance(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<bool> {
    let len = rng.random_range(1..=max_len);
    let p = rng.random_range(0.1..0.9);
    (0..len).map(|_| rng.random_bool(p)).collect()
}

/// Test accuracy of the nearest class mean in raw pixel space.
pub fn nearest_centroid_accuracy(train: &[MultiViewSample], test: &[MultiViewSample]) -> f64 {
    let classes = train.iter().map(|s| s.label).max().unwrap() + 1;
    let dim = train[0].pixels.len();
    let mut centroids = vec![vec![0.0f64; dim]; classes];
    let mut counts = vec![0usize; classes];
    for s in train {
        counts[s.label] += 1;
        for (c, &p) in centroids[s.label].iter_mut().zip(&s.pixels) {
            *c += p as f64;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= *n as f64);
    }
    let correct = test
        .iter()
        .filter(|s| {
            let dist = |c: &Vec<f64>| c.iter().zip(&s.pixels).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
            let best = (0..classes).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            best == s.label
        })
        .count();
    correct as f64 / test.len() as f64
}

pub fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}
