//! Deterministic synthetic multi-view silhouettes of analytic solids.
//!
//! View `z` of a model is the orthographic silhouette of the solid after
//! rotating it by `z * 360 / N` degrees about the vertical axis. Each pixel
//! is the covered fraction of a 4x4 grid of subsamples.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::formats::{MultiViewSample, MviDataset};
use crate::error::{Error, Result};

const SUBSAMPLES: usize = 4;
/// Half-width of the square image window in world units.
const WINDOW: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Sphere,
    Box,
    Cylinder,
    Pyramid,
    Torus,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Sphere,
        ShapeClass::Box,
        ShapeClass::Cylinder,
        ShapeClass::Pyramid,
        ShapeClass::Torus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Box => "box",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Pyramid => "pyramid",
            ShapeClass::Torus => "torus",
        }
    }

    /// Parses a comma separated class list such as `sphere,box`.
    pub fn parse_list(s: &str) -> Result<Vec<ShapeClass>> {
        s.split(',').map(|p| p.trim().parse()).collect()
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown class {s:?} (expected one of sphere, box, cylinder, pyramid, torus)"
                ))
            })
    }
}

/// One jittered solid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Solid {
    pub class: ShapeClass,
    /// Overall size, in `[0.6, 1.0]` for generated models.
    pub scale: f64,
    /// Height-to-width ratio, in `[0.7, 1.3]` for generated models.
    pub aspect: f64,
    /// Tilt of the vertical axis in radians, at most 20 degrees.
    pub tilt: f64,
    /// Horizontal direction the axis tilts toward, in radians.
    pub tilt_dir: f64,
}

impl Solid {
    pub fn upright(class: ShapeClass, scale: f64, aspect: f64) -> Self {
        Solid {
            class,
            scale,
            aspect,
            tilt: 0.0,
            tilt_dir: 0.0,
        }
    }

    fn random(class: ShapeClass, rng: &mut impl Rng) -> Self {
        Solid {
            class,
            scale: rng.random_range(0.6..=1.0),
            aspect: rng.random_range(0.7..=1.3),
            tilt: rng.random_range(0.0..=20.0f64).to_radians(),
            tilt_dir: rng.random_range(0.0..2.0 * PI),
        }
    }

    /// Whether the line `origin + t * dir` (any real `t`) meets the solid,
    /// in the solid's own frame.
    fn line_hits(&self, o: [f64; 3], d: [f64; 3]) -> bool {
        let s = self.scale;
        match self.class {
            ShapeClass::Sphere => {
                let r = 0.75 * s;
                let t = dot(o, d);
                let closest = [o[0] - t * d[0], o[1] - t * d[1], o[2] - t * d[2]];
                dot(closest, closest) <= r * r
            }
            ShapeClass::Box => {
                let half = [0.65 * s, 0.65 * s * self.aspect, 0.4 * s];
                let mut span = (f64::NEG_INFINITY, f64::INFINITY);
                for axis in 0..3 {
                    for sign in [1.0, -1.0] {
                        let mut n = [0.0; 3];
                        n[axis] = sign;
                        if !clip(&mut span, n, half[axis], o, d) {
                            return false;
                        }
                    }
                }
                true
            }
            ShapeClass::Cylinder => {
                let (r, hh) = (0.5 * s, 0.7 * s * self.aspect);
                let mut span = (f64::NEG_INFINITY, f64::INFINITY);
                if !clip(&mut span, [0.0, 1.0, 0.0], hh, o, d)
                    || !clip(&mut span, [0.0, -1.0, 0.0], hh, o, d)
                {
                    return false;
                }
                let a = d[0] * d[0] + d[2] * d[2];
                let b = 2.0 * (o[0] * d[0] + o[2] * d[2]);
                let c = o[0] * o[0] + o[2] * o[2] - r * r;
                if a < 1e-12 {
                    return c <= 0.0;
                }
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return false;
                }
                let root = disc.sqrt();
                let lo = (-b - root) / (2.0 * a);
                let hi = (-b + root) / (2.0 * a);
                lo.max(span.0) <= hi.min(span.1)
            }
            ShapeClass::Pyramid => {
                let (a, hh) = (0.7 * s, 0.7 * s * self.aspect);
                let mut span = (f64::NEG_INFINITY, f64::INFINITY);
                if !clip(&mut span, [0.0, -1.0, 0.0], hh, o, d) {
                    return false;
                }
                let faces = [[2.0 * hh, a, 0.0], [-2.0 * hh, a, 0.0], [0.0, a, 2.0 * hh], [0.0, a, -2.0 * hh]];
                faces.into_iter().all(|n| clip(&mut span, n, a * hh, o, d))
            }
            ShapeClass::Torus => {
                let (major, minor) = (0.6 * s, 0.25 * s * self.aspect);
                let sdf = |p: [f64; 3]| {
                    let q = (p[0] * p[0] + p[2] * p[2]).sqrt() - major;
                    (q * q + p[1] * p[1]).sqrt() - minor
                };
                let bound = major + minor + 1e-3;
                let tc = -dot(o, d);
                let c = [o[0] + tc * d[0], o[1] + tc * d[1], o[2] + tc * d[2]];
                let miss = bound * bound - dot(c, c);
                if miss < 0.0 {
                    return false;
                }
                let half = miss.sqrt();
                let mut t = tc - half;
                while t <= tc + half {
                    let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
                    let dist = sdf(p);
                    if dist <= 1e-9 {
                        return true;
                    }
                    t += dist.max(1e-4);
                }
                false
            }
        }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Restricts `span` to the part of the line where `n . p <= c`.
fn clip(span: &mut (f64, f64), n: [f64; 3], c: f64, o: [f64; 3], d: [f64; 3]) -> bool {
    let nd = dot(n, d);
    let rhs = c - dot(n, o);
    if nd.abs() < 1e-12 {
        return rhs >= 0.0;
    }
    let t = rhs / nd;
    if nd > 0.0 {
        span.1 = span.1.min(t);
    } else {
        span.0 = span.0.max(t);
    }
    span.0 <= span.1
}

/// Row-major 3x3 rotation, world-from-local.
type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn rot_y(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

/// Rotation by `angle` about the horizontal axis perpendicular to `dir`.
fn tilt_matrix(angle: f64, dir: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let tilt_x = [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]];
    mat_mul(&mat_mul(&rot_y(dir), &tilt_x), &rot_y(-dir))
}

/// Applies the transpose of `m` (local-from-world for a rotation).
fn to_local(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// Renders all `num_views` silhouettes of `solid` at `res x res`, view-major.
pub fn render_views(solid: &Solid, num_views: usize, res: usize) -> Vec<f32> {
    let tilt = tilt_matrix(solid.tilt, solid.tilt_dir);
    let mut pixels = Vec::with_capacity(num_views * res * res);
    let cell = 2.0 * WINDOW / res as f64;
    let sub = cell / SUBSAMPLES as f64;
    let total = (SUBSAMPLES * SUBSAMPLES) as f32;
    for z in 0..num_views {
        let azimuth = 2.0 * PI * z as f64 / num_views as f64;
        let m = mat_mul(&rot_y(azimuth), &tilt);
        let dir = to_local(&m, [0.0, 0.0, 1.0]);
        for row in 0..res {
            for col in 0..res {
                let mut hits = 0u32;
                for sy in 0..SUBSAMPLES {
                    let v = WINDOW - row as f64 * cell - (sy as f64 + 0.5) * sub;
                    for sx in 0..SUBSAMPLES {
                        let u = -WINDOW + col as f64 * cell + (sx as f64 + 0.5) * sub;
                        let origin = to_local(&m, [u, v, 0.0]);
                        if solid.line_hits(origin, dir) {
                            hits += 1;
                        }
                    }
                }
                pixels.push(hits as f32 / total);
            }
        }
    }
    pixels
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateConfig {
    pub classes: Vec<ShapeClass>,
    pub per_class: usize,
    pub num_views: usize,
    pub res: usize,
    pub seed: u64,
}

impl GenerateConfig {
    fn validate(&self) -> Result<()> {
        if self.num_views < 3 {
            return Err(Error::Config(format!("need at least 3 views, got {}", self.num_views)));
        }
        if self.res < 16 {
            return Err(Error::Config(format!("resolution must be >= 16, got {}", self.res)));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("no classes given".into()));
        }
        Ok(())
    }
}

/// Generates `per_class` models of each class. Model ids are assigned in
/// class-major order and each model draws its jitter from its own stream of
/// the seeded generator, so output is a pure function of the config.
pub fn generate(cfg: &GenerateConfig) -> Result<MviDataset> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.classes.len() * cfg.per_class);
    for (label, &class) in cfg.classes.iter().enumerate() {
        for i in 0..cfg.per_class {
            let model_id = (label * cfg.per_class + i) as u32;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(model_id as u64);
            let solid = Solid::random(class, &mut rng);
            samples.push(MultiViewSample {
                label,
                model_id,
                pixels: render_views(&solid, cfg.num_views, cfg.res),
            });
        }
    }
    Ok(MviDataset {
        num_views: cfg.num_views,
        height: cfg.res,
        width: cfg.res,
        samples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    /// Generator seed of this split; the two splits never share a seed.
    pub fn derive_seed(self, seed: u64) -> u64 {
        seed.wrapping_mul(2) + (self == Split::Test) as u64
    }
}

/// Summary written next to generated files.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub num_models: usize,
    pub num_classes: usize,
    pub num_views: usize,
    pub height: usize,
    pub width: usize,
    pub split: String,
    pub seed: u64,
    pub classes: Vec<ShapeClass>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "num_models": self.num_models,
            "num_classes": self.num_classes,
            "N": self.num_views,
            "H": self.height,
            "W": self.width,
            "split": self.split,
            "seed": self.seed,
            "classes": self.classes.iter().map(|c| c.name()).collect::<Vec<_>>(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn views(solid: &Solid, n: usize, res: usize) -> Vec<Vec<f32>> {
        render_views(solid, n, res)
            .chunks(res * res)
            .map(<[f32]>::to_vec)
            .collect()
    }

    #[test]
    fn sphere_views_are_identical_disks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let solid = Solid::random(ShapeClass::Sphere, &mut rng);
        let v = views(&solid, 6, 24);
        for other in &v[1..] {
            assert_eq!(other, &v[0]);
        }
        let center = v[0][12 * 24 + 12];
        assert_eq!(center, 1.0);
        assert_eq!(v[0][0], 0.0);
    }

    #[test]
    fn upright_box_has_half_turn_symmetry() {
        let solid = Solid::upright(ShapeClass::Box, 0.8, 1.3);
        let v = views(&solid, 8, 32);
        for z in 0..4 {
            assert_eq!(v[z], v[z + 4], "views {z} and {}", z + 4);
        }
        assert_ne!(v[0], v[1]);
    }

    #[test]
    fn pixels_in_unit_range_and_nonempty() {
        for class in ShapeClass::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let solid = Solid::random(class, &mut rng);
            let px = render_views(&solid, 4, 16);
            assert!(px.iter().all(|&p| (0.0..=1.0).contains(&p)));
            assert!(px.iter().any(|&p| p > 0.5), "{class} rendered empty");
            assert!(px.iter().any(|&p| p > 0.0 && p < 1.0), "{class} has no antialiased edge");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenerateConfig {
            classes: vec![ShapeClass::Box, ShapeClass::Torus],
            per_class: 2,
            num_views: 4,
            res: 16,
            seed: 7,
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write(&mut ba).unwrap();
        b.write(&mut bb).unwrap();
        assert_eq!(ba, bb);
        let other = generate(&GenerateConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(other, a);
    }

    #[test]
    fn unknown_class_is_rejected() {
        assert!("cone".parse::<ShapeClass>().is_err());
        assert!(ShapeClass::parse_list("sphere,cone").is_err());
        assert_eq!(
            ShapeClass::parse_list("sphere,box").unwrap(),
            vec![ShapeClass::Sphere, ShapeClass::Box]
        );
    }

    #[test]
    fn rejects_bad_geometry() {
        let cfg = GenerateConfig {
            classes: vec![ShapeClass::Sphere],
            per_class: 1,
            num_views: 2,
            res: 16,
            seed: 0,
        };
        assert!(generate(&cfg).is_err());
        assert!(generate(&GenerateConfig { num_views: 3, res: 8, ..cfg }).is_err());
    }
}
