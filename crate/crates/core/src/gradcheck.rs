//! Central-difference gradient verification for every tape operation and
//! for the complete training loss.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::PatchLayout;
use crate::data::MultiViewSample;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{InputSpec, ModelConfig, Pcnn};
use crate::param::ParamStore;
use crate::patchconv::{PatchConvConfig, PatchConvLayer};
use crate::tape::{NormMode, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    /// Input position or parameter name.
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    /// Number of coordinates compared.
    pub checked: usize,
}

impl CheckReport {
    fn record(&mut self, input: impl FnOnce() -> String, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = relative_error(analytic, numeric);
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = err;
            self.worst = Some(Mismatch {
                input: input(),
                index,
                analytic,
                numeric,
            });
        }
    }
}

fn scalar_value(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::invalid("grad_check", format!("function output has shape {:?}", t.shape())));
    }
    let x = t.item();
    if !x.is_finite() {
        return Err(Error::NonFinite("grad_check function value".into()));
    }
    Ok(x)
}

/// Compares tape gradients of a scalar function with central differences
/// over every coordinate of every input.
///
/// The perturbed evaluations replay the discrete choices (max winners,
/// activation branches, neighbour lists) of the unperturbed pass, so the
/// differences measure the smooth piece the analytic gradient belongs to
/// even when a kink lies within `h`.
pub fn grad_check(
    inputs: &[Tensor],
    h: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<CheckReport> {
    grad_check_with(inputs, h, false, f)
}

fn grad_check_with(
    inputs: &[Tensor],
    h: f64,
    corrupt: bool,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<CheckReport> {
    if !(h > 0.0) {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let mut tape = Tape::new();
    tape.record_pattern();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_value(&tape, out)?;
    let grads = tape.backward(out)?;
    let pattern = tape.take_pattern().unwrap_or_default();
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        tape.replay_pattern(pattern.clone());
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_value(&tape, out)
    };
    let mut report = CheckReport::default();
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        for c in 0..inputs[i].len() {
            let base = inputs[i].data()[c];
            work[i].data_mut()[c] = base + h;
            let plus = eval(&work)?;
            work[i].data_mut()[c] = base - h;
            let minus = eval(&work)?;
            work[i].data_mut()[c] = base;
            let mut analytic = grads.get(*var).map_or(0.0, |g| g.data()[c]);
            if corrupt {
                analytic = analytic * 1.001 + 1e-3;
            }
            report.record(|| format!("input {i}"), c, analytic, (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Like [`grad_check`], but over every trainable parameter in the store
/// reached through `store_of`.
pub fn grad_check_params<M>(
    model: &mut M,
    store_of: fn(&mut M) -> &mut ParamStore,
    h: f64,
    f: impl Fn(&M, &mut Tape) -> Result<Var>,
) -> Result<CheckReport> {
    grad_check_params_with(model, store_of, h, false, f)
}

fn grad_check_params_with<M>(
    model: &mut M,
    store_of: fn(&mut M) -> &mut ParamStore,
    h: f64,
    corrupt: bool,
    f: impl Fn(&M, &mut Tape) -> Result<Var>,
) -> Result<CheckReport> {
    if !(h > 0.0) {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let mut tape = Tape::new();
    tape.record_pattern();
    let out = f(model, &mut tape)?;
    scalar_value(&tape, out)?;
    let grads = tape.backward(out)?;
    let pattern = tape.take_pattern().unwrap_or_default();
    let store = store_of(model);
    store.zero_grad();
    store.accumulate_grads(&tape, &grads);
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    let mut report = CheckReport::default();
    for id in ids {
        let len = store_of(model).get(id).value.len();
        for c in 0..len {
            let base = store_of(model).get(id).value.data()[c];
            let at = |x: f64, model: &mut M| -> Result<f64> {
                store_of(model).get_mut(id).value.data_mut()[c] = x;
                let mut tape = Tape::new();
                tape.replay_pattern(pattern.clone());
                let out = f(model, &mut tape)?;
                scalar_value(&tape, out)
            };
            let plus = at(base + h, model)?;
            let minus = at(base - h, model)?;
            store_of(model).get_mut(id).value.data_mut()[c] = base;
            let p = store_of(model).get(id);
            let mut analytic = p.grad.data()[c];
            if corrupt {
                analytic = analytic * 1.001 + 1e-3;
            }
            let name = p.name.clone();
            report.record(|| name, c, analytic, (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("positive dims")
}

/// Values bounded away from zero, so no coordinate sits on a kink.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, rng);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (0.05 + 0.95 * v.abs()));
    t
}

/// Pairwise distinct values at least 0.05 apart, so maxima are unique.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    let data = ranks
        .into_iter()
        .map(|r| (r as f64 - n as f64 / 2.0) * 0.1 + rng.random_range(0.0..0.05))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (norm(a) * norm(b))
}

fn dim(rng: &mut ChaCha8Rng, lo: usize) -> usize {
    rng.random_range(lo..=8)
}

/// Contracts `y` against fixed random weights into a scalar.
fn project(tape: &mut Tape, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let r = tape.constant(uniform(&tape.shape(y).to_vec(), &mut rng));
    let p = tape.mul(y, r)?;
    tape.sum_all(p)
}

/// Settings shared by one suite run.
#[derive(Clone, Copy, Debug)]
pub struct CheckContext {
    pub h: f64,
    /// Perturbs the analytic gradient (fault injection for the checker).
    pub corrupt: bool,
}

type CheckFn = fn(u64, &CheckContext) -> Result<CheckReport>;

/// Named checks; each draws a random instance (dims <= 8) from its seed.
pub const OPS: &[(&str, CheckFn)] = &[
    ("matmul", check_matmul),
    ("add", check_add),
    ("sub", check_sub),
    ("mul", check_mul),
    ("add_bias", check_add_bias),
    ("affine", check_affine),
    ("leaky_relu", check_leaky_relu),
    ("batch_norm", check_batch_norm),
    ("batch_norm_eval", check_batch_norm_eval),
    ("max_over_axis", check_max),
    ("sum_over_axis", check_sum_axis),
    ("mean_over_axis", check_mean_axis),
    ("mean_all", check_mean_all),
    ("softmax", check_softmax),
    ("softmax_cross_entropy", check_cross_entropy),
    ("cross_entropy_rows", check_cross_entropy_rows),
    ("cosine_similarity", check_cosine),
    ("conv1d_circular", check_conv1d),
    ("conv2d", check_conv2d),
    ("avg_pool_2d", check_avg_pool),
    ("concat", check_concat),
    ("gather_rows", check_gather),
    ("reshape", check_reshape),
    ("scale_rows", check_scale_rows),
    ("weighted_sum", check_weighted_sum),
    ("patchconv", check_patchconv),
    ("l_dis", check_l_dis),
];

fn inputs_check(
    seed: u64,
    ctx: &CheckContext,
    build: impl FnOnce(&mut ChaCha8Rng) -> Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = build(&mut rng);
    grad_check_with(&inputs, ctx.h, ctx.corrupt, f)
}

fn check_matmul(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    inputs_check(
        seed,
        ctx,
        |r| {
            let (m, k, n) = (dim(r, 1), dim(r, 1), dim(r, 1));
            vec![uniform(&[m, k], r), uniform(&[k, n], r)]
        },
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, seed)
        },
    )
}

fn binary(seed: u64, ctx: &CheckContext, op: fn(&mut Tape, Var, Var) -> Result<Var>) -> Result<CheckReport> {
    inputs_check(
        seed,
        ctx,
        |r| {
            let s = [dim(r, 1), dim(r, 1)];
            vec![uniform(&s, r), uniform(&s, r)]
        },
        |t, v| {
            let y = op(t, v[0], v[1])?;
            project(t, y, seed)
        },
    )
}

fn check_add(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    binary(seed, ctx, Tape::add)
}

fn check_sub(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    binary(seed, ctx, Tape::sub)
}

fn check_mul(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    binary(seed, ctx, Tape::mul)
}

fn check_add_bias(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    inputs_check(
        seed,
        ctx,
        |r| {
            let (rows, c) = (dim(r, 1), dim(r, 1));
            vec![uniform(&[rows, c], r), uniform(&[c], r)]
        },
        |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            project(t, y, seed)
        },
    )
}

fn check_affine(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    inputs_check(
        seed,
        ctx,
        |r| vec![uniform(&[dim(r, 1), dim(r, 1)], r)],
        |t, v| {
            let y = t.affine(v[0], -1.7, 0.3);
            let y = t.scale(y, 0.6);
            project(t, y, seed)
        },
    )
}

fn check_leaky_relu(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    inputs_check(
        seed,
        ctx,
        |r| vec![off_kink(&[dim(r, 1), dim(r, 1)], r)],
        |t, v| {
            let y = t.leaky_relu(v[0], 0.2)?;
            project(t, y, seed)
        },
    )
}

fn check_batch_norm(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    inputs_check(
        seed,
        ctx,
        |r| {
            // with two rows the normalized output is +-1 whatever the input
            let (rows, c) = (dim(r, 3), dim(r, 1));
            vec![uniform(&[rows, c], r), uniform(&[c], r), uniform(&[c], r)]
        },
        |t, v| {
            let y = t.batch_norm(v[0], v[1], v[2], 1e-5, NormMode::Train)?;
            project(t, y, seed)
        },
    )
}

fn check_batch_norm_eval(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb17);
    let c_dim = dim(&mut rng, 1);
    let mean: Vec<f64> = (0..c_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..c_dim).map(|_| rng.random_range(0.2..2.0)).collect();
    inputs_check(
        seed,
        ctx,
        |r| vec![uniform(&[dim(r, 1), c_dim], r), uniform(&[c_dim], r), uniform(&[c_dim], r)],
        |t, v| {
            let y = t.batch_norm(v[0], v[1], v[2], 1e-5, NormMode::Eval { mean: &mean, var: &var })?;
            project(t, y, seed)
        },
    )
}

fn check_max(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    let axis = seed as usize % 3;
    inputs_check(
        seed,
        ctx,
        |r| vec![distinct(&[dim(r, 1), dim(r, 1), dim(r, 1)], r)],
        |t, v| {
            let (y, _) = t.max_over_axis(v[0], axis)?;
            project(t, y, seed)
        },
    )
}

fn check_sum_axis(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    let axis = seed as usize % 3;
    inputs_check(
        seed,
        ctx,
        |r| vec![uniform(&[dim(r, 1), dim(r, 1), dim(r, 1)], r)],
        |t, v| {
            let y = t.sum_over_axis(v[0], axis)?;
            project(t, y, seed)
        },
    )
}

fn check_mean_axis(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    let axis = seed as usize % 3;
    inputs_check(
        seed,
        ctx,
        |r| vec![uniform(&[dim(r, 1), dim(r, 1), dim(r, 1)], r)],
        |t, v| {
            let y = t.mean_over_axis(v[0], axis)?;
            project(t, y, seed)
        },
    )
}

fn check_mean_all(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    inputs_check(
        seed,
        ctx,
        |r| vec![uniform(&[dim(r, 1), dim(r, 1)], r)],
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.mean_all(sq)
        },
    )
}

fn check_softmax(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    inputs_check(
        seed,
        ctx,
        |r| vec![uniform(&[dim(r, 1), dim(r, 2)], r)],
        |t, v| {
            let y = t.softmax(v[0]);
            project(t, y, seed)
        },
    )
}

fn random_labels(seed: u64, rows: usize, classes: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1abe1);
    (0..rows).map(|_| rng.random_range(0..classes)).collect()
}

fn check_cross_entropy(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xce);
    let (rows, classes) = (dim(&mut rng, 1), dim(&mut rng, 2));
    let labels = random_labels(seed, rows, classes);
    inputs_check(
        seed,
        ctx,
        |r| {
            let mut t = uniform(&[rows, classes], r);
            t.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            vec![t]
        },
        |t, v| t.softmax_cross_entropy(v[0], &labels),
    )
}

fn check_cross_entropy_rows(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xcf);
    let (rows, classes) = (dim(&mut rng, 1), dim(&mut rng, 2));
    let labels = random_labels(seed, rows, classes);
    inputs_check(
        seed,
        ctx,
        |r| vec![uniform(&[rows, classes], r)],
        |t, v| {
            let y = t.cross_entropy_rows(v[0], &labels)?;
            project(t, y, seed)
        },
    )
}

fn check_cosine(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    inputs_check(
        seed,
        ctx,
        |r| {
            let (g, n, d) = (dim(r, 1), dim(r, 1), dim(r, 2));
            let b = off_kink(&[g, d], r);
            let mut a = off_kink(&[g, n, d], r);
            // nearly parallel pairs have gradients below what differences resolve
            for row in 0..g * n {
                let bref = &b.data()[(row / n) * d..(row / n + 1) * d];
                while cosine(&a.data()[row * d..(row + 1) * d], bref).abs() > 0.95 {
                    let fresh = off_kink(&[d], r);
                    a.data_mut()[row * d..(row + 1) * d].copy_from_slice(fresh.data());
                }
            }
            vec![a, b]
        },
        |t, v| {
            let y = t.cosine_similarity(v[0], v[1], 1e-8)?;
            project(t, y, seed)
        },
    )
}

fn check_conv1d(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    inputs_check(
        seed,
        ctx,
        |r| {
            let (g, n, c) = (dim(r, 1), dim(r, 3), dim(r, 1));
            vec![uniform(&[g, n, c], r), uniform(&[c, c, 3], r), uniform(&[c], r)]
        },
        |t, v| {
            let y = t.conv1d_circular(v[0], v[1], v[2])?;
            project(t, y, seed)
        },
    )
}

fn check_conv2d(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    let stride = 1 + seed as usize % 2;
    inputs_check(
        seed,
        ctx,
        |r| {
            let (v, h, w) = (r.random_range(1..=3), dim(r, 2), dim(r, 2));
            let (ci, co) = (r.random_range(1..=3), r.random_range(1..=3));
            vec![uniform(&[v, h, w, ci], r), uniform(&[co, ci, 3, 3], r), uniform(&[co], r)]
        },
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride)?;
            project(t, y, seed)
        },
    )
}

fn check_avg_pool(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    let k = 1 + seed as usize % 3;
    inputs_check(
        seed,
        ctx,
        |r| {
            let (v, c) = (r.random_range(1..=3), r.random_range(1..=4));
            let (gh, gw) = (r.random_range(1..=8 / k), r.random_range(1..=8 / k));
            vec![uniform(&[v, gh * k, gw * k, c], r)]
        },
        |t, v| {
            let y = t.avg_pool_2d(v[0], k)?;
            project(t, y, seed)
        },
    )
}

fn check_concat(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    let axis = seed as usize % 2;
    inputs_check(
        seed,
        ctx,
        |r| {
            let fixed = dim(r, 1);
            (0..3)
                .map(|_| {
                    let free = dim(r, 1);
                    let shape = if axis == 0 { [free, fixed] } else { [fixed, free] };
                    uniform(&shape, r)
                })
                .collect()
        },
        |t, v| {
            let y = t.concat(v, axis)?;
            project(t, y, seed)
        },
    )
}

fn check_gather(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a);
    let rows = dim(&mut rng, 1);
    let idx: Vec<usize> = (0..dim(&mut rng, 1)).map(|_| rng.random_range(0..rows)).collect();
    inputs_check(
        seed,
        ctx,
        |r| vec![uniform(&[rows, dim(r, 1)], r)],
        |t, v| {
            let y = t.gather_rows(v[0], &idx)?;
            project(t, y, seed)
        },
    )
}

fn check_reshape(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    inputs_check(
        seed,
        ctx,
        |r| vec![uniform(&[dim(r, 1), 2, dim(r, 1)], r)],
        |t, v| {
            let s = t.shape(v[0]).to_vec();
            let y = t.reshape(v[0], &[s[0] * 2, s[2]])?;
            let y = t.mul(y, y)?;
            project(t, y, seed)
        },
    )
}

fn check_scale_rows(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    inputs_check(
        seed,
        ctx,
        |r| {
            let (g, n, c) = (dim(r, 1), dim(r, 1), dim(r, 1));
            vec![uniform(&[g, n, c], r), uniform(&[g, n], r)]
        },
        |t, v| {
            let y = t.scale_rows(v[0], v[1])?;
            project(t, y, seed)
        },
    )
}

fn check_weighted_sum(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    inputs_check(
        seed,
        ctx,
        |r| {
            let (g, n, c) = (dim(r, 1), dim(r, 1), dim(r, 1));
            vec![uniform(&[g, n, c], r), uniform(&[g, n], r)]
        },
        |t, v| {
            let y = t.weighted_sum(v[0], v[1])?;
            project(t, y, seed)
        },
    )
}

/// Moves batch-norm scales and shifts off their identity initialization.
/// Shifts stay small against the scales, so every channel keeps elements on
/// both sides of the following activation's kink.
fn randomize_norm(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        if p.name.ends_with("/gamma") {
            p.value.data_mut().iter_mut().for_each(|v| {
                *v = rng.random_range(0.5..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            });
        } else if p.name.ends_with("/beta") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
}

struct PatchConvCase {
    store: ParamStore,
    layer: PatchConvLayer,
    layout: PatchLayout,
    x: Tensor,
}

fn store_of_case(c: &mut PatchConvCase) -> &mut ParamStore {
    &mut c.store
}

fn check_patchconv(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = PatchLayout {
        grid: rng.random_range(1..=2),
        dim: rng.random_range(2..=4),
        num_views: rng.random_range(3..=4),
    };
    let batch = rng.random_range(1..=2);
    let m = layout.num_patches();
    let cfg = PatchConvConfig {
        k: rng.random_range(1..=3.min(m - 1)),
        use_coords: seed % 2 == 0,
        ..PatchConvConfig::default()
    };
    let mut store = ParamStore::new();
    let layer = PatchConvLayer::new(&mut store, cfg, layout.dim, 1e-5, 0.1, &mut rng)?;
    randomize_norm(&mut store, &mut rng);
    let x = uniform(&[batch * m, layout.dim], &mut rng);
    let mut case = PatchConvCase { store, layer, layout, x };
    let forward = |c: &PatchConvCase, t: &mut Tape, x: Var| -> Result<Var> {
        let mut updates = Vec::new();
        let (y, _) = c.layer.forward(&c.store, t, x, &c.layout, Mode::Train, &mut updates)?;
        project(t, y, seed)
    };
    let mut report = grad_check_params_with(&mut case, store_of_case, ctx.h, ctx.corrupt, |c, t| {
        let x = t.constant(c.x.clone());
        forward(c, t, x)
    })?;
    let wrt_input = grad_check_with(&[case.x.clone()], ctx.h, ctx.corrupt, |t, v| forward(&case, t, v[0]))?;
    if wrt_input.max_rel_err > report.max_rel_err {
        report.max_rel_err = wrt_input.max_rel_err;
        report.worst = wrt_input.worst;
    }
    report.checked += wrt_input.checked;
    Ok(report)
}

/// The tiny end-to-end instance: 4 views of 8x8 reduced to a 2x2 grid of
/// 4-dim patches, k = 2, three classes.
pub fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::desk(3);
    cfg.input = InputSpec::Images { res: 8 };
    cfg.num_views = 4;
    cfg.backbone.layers = 2;
    cfg.backbone.dim = 4;
    cfg.patchconv = Some(PatchConvConfig {
        k: 2,
        ..PatchConvConfig::default()
    });
    cfg
}

struct LossCase {
    model: Pcnn,
    samples: Vec<MultiViewSample>,
}

fn store_of_loss(c: &mut LossCase) -> &mut ParamStore {
    &mut c.model.store
}

fn check_l_dis(seed: u64, ctx: &CheckContext) -> Result<CheckReport> {
    let cfg = tiny_model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Pcnn::new(cfg, seed)?;
    randomize_norm(&mut model.store, &mut rng);
    let samples: Vec<MultiViewSample> = (0..3)
        .map(|label| MultiViewSample {
            label,
            model_id: label as u32,
            pixels: (0..4 * 8 * 8).map(|_| rng.random::<f32>()).collect(),
        })
        .collect();
    let mut case = LossCase { model, samples };
    grad_check_params_with(&mut case, store_of_loss, ctx.h, ctx.corrupt, |c, t| {
        let batch: Vec<&MultiViewSample> = c.samples.iter().collect();
        let labels: Vec<usize> = c.samples.iter().map(|s| s.label).collect();
        let vars = c.model.forward(t, &batch, Mode::Train)?;
        Ok(c.model.loss(t, &vars, &labels)?.l_dis)
    })
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// Restrict to these op names (all when empty).
    pub ops: Vec<String>,
    pub seeds: u64,
    pub h: f64,
    /// Op whose analytic gradient is deliberately corrupted.
    pub corrupt: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            ops: Vec::new(),
            seeds: 100,
            h: DEFAULT_STEP,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OpSummary {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    pub worst: Option<Mismatch>,
    pub checked: usize,
}

impl OpSummary {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub ops: Vec<OpSummary>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpSummary::passed)
    }

    pub fn worst(&self) -> Option<&OpSummary> {
        self.ops.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<24} {:>12} {:>6} {:>9}  status\n", "op", "max_rel_err", "seed", "coords");
        for op in &self.ops {
            let _ = writeln!(
                out,
                "{:<24} {:>12.3e} {:>6} {:>9}  {}",
                op.name,
                op.max_rel_err,
                op.worst_seed,
                op.checked,
                if op.passed() { "ok" } else { "FAIL" }
            );
        }
        out
    }
}

pub fn op_names() -> impl Iterator<Item = &'static str> {
    OPS.iter().map(|(n, _)| *n)
}

/// Runs the selected checks over seeds `0..opts.seeds`.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    for name in opts.ops.iter().chain(&opts.corrupt) {
        if !op_names().any(|n| n == name) {
            return Err(Error::Config(format!("unknown gradient check {name:?}")));
        }
    }
    let mut ops = Vec::new();
    for &(name, check) in OPS {
        if !opts.ops.is_empty() && !opts.ops.iter().any(|o| o == name) {
            continue;
        }
        let ctx = CheckContext {
            h: opts.h,
            corrupt: opts.corrupt.as_deref() == Some(name),
        };
        let mut summary = OpSummary {
            name,
            max_rel_err: 0.0,
            worst_seed: 0,
            worst: None,
            checked: 0,
        };
        for seed in 0..opts.seeds {
            let r = check(seed, &ctx)?;
            summary.checked += r.checked;
            if r.max_rel_err > summary.max_rel_err || summary.worst.is_none() {
                summary.max_rel_err = r.max_rel_err;
                summary.worst_seed = seed;
                summary.worst = r.worst;
            }
        }
        ops.push(summary);
    }
    Ok(SuiteReport { ops })
}
