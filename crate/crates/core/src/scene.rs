//! Procedural ground-plane scenes with boxes and spheres, ray cast from a
//! pitched pinhole camera.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Float;
use crate::tensor::Tensor;

/// Camera height above the ground plane in meters.
pub const CAMERA_HEIGHT: f64 = 1.5;
/// Downward pitch of the optical axis in radians.
pub const CAMERA_PITCH: f64 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub objects: usize,
    pub near: f64,
    pub far: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            height: 64,
            width: 96,
            objects: 4,
            near: 1.0,
            far: 80.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) || self.height == 0 || self.width == 0 {
            return Err(Error::Config {
                path: "scene".into(),
                message: format!("need 0 < near < far and positive extents, got {self:?}"),
            });
        }
        Ok(())
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        self.width as f64
    }
}

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn normalize(a: V3) -> V3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Sphere { center: V3, radius: f64 },
    Box { lo: V3, hi: V3 },
}

#[derive(Debug, Clone, Copy)]
struct Object {
    shape: Shape,
    albedo: V3,
}

impl Object {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let x = rng.random_range(-3.0..3.0);
        let z = rng.random_range(3.0..10.0);
        let albedo = [
            rng.random_range(0.2..1.0),
            rng.random_range(0.2..1.0),
            rng.random_range(0.2..1.0),
        ];
        let shape = if rng.random_bool(0.5) {
            let r = rng.random_range(0.3..0.8);
            Shape::Sphere {
                center: [x, r, z],
                radius: r,
            }
        } else {
            let (sx, sy, sz) = (
                rng.random_range(0.4..1.2),
                rng.random_range(0.4..1.6),
                rng.random_range(0.4..1.2),
            );
            Shape::Box {
                lo: [x - sx / 2.0, 0.0, z - sz / 2.0],
                hi: [x + sx / 2.0, sy, z + sz / 2.0],
            }
        };
        Object { shape, albedo }
    }

    /// Nearest positive hit parameter and surface normal.
    fn hit(&self, o: V3, d: V3) -> Option<(f64, V3)> {
        match self.shape {
            Shape::Sphere { center, radius } => {
                let oc = sub(o, center);
                let (a, b, c) = (dot(d, d), dot(oc, d), dot(oc, oc) - radius * radius);
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / a;
                (t > 1e-9).then(|| {
                    let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
                    (t, normalize(sub(p, center)))
                })
            }
            Shape::Box { lo, hi } => {
                let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                let mut sign = 1.0;
                for k in 0..3 {
                    if d[k] == 0.0 {
                        if o[k] < lo[k] || o[k] > hi[k] {
                            return None;
                        }
                        continue;
                    }
                    let (t1, t2) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
                    let (near, far) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    if near > tmin {
                        tmin = near;
                        axis = k;
                        sign = if d[k] > 0.0 { -1.0 } else { 1.0 };
                    }
                    tmax = tmax.min(far);
                }
                (tmin <= tmax && tmin > 1e-9).then(|| {
                    let mut n = [0.0; 3];
                    n[axis] = sign;
                    (tmin, n)
                })
            }
        }
    }
}

/// World-space direction of pixel `(row, col)` with unit forward
/// component, so the hit parameter equals the z-depth.
pub fn ray(spec: &SceneSpec, row: usize, col: usize) -> [f64; 3] {
    let f = spec.focal();
    let xc = (col as f64 + 0.5 - spec.width as f64 / 2.0) / f;
    let yc = (row as f64 + 0.5 - spec.height as f64 / 2.0) / f;
    let (s, c) = CAMERA_PITCH.sin_cos();
    // right = (1, 0, 0), down = (0, -c, -s), forward = (0, -s, c)
    [xc, -yc * c - s, -yc * s + c]
}

const LIGHT: V3 = [0.37139067635410367, 0.9284766908852594, -0.0];

fn ground_albedo(p: V3) -> V3 {
    let checker = (p[0].floor() + p[2].floor()).rem_euclid(2.0) == 0.0;
    if checker {
        [0.62, 0.6, 0.55]
    } else {
        [0.38, 0.4, 0.42]
    }
}

/// Renders `(image [3, H, W], depth [1, H, W])`.
pub fn synth_scene<T: Float>(spec: &SceneSpec) -> Result<(Tensor<T>, Tensor<T>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let objects: Vec<Object> = (0..spec.objects).map(|_| Object::random(&mut rng)).collect();
    let (h, w) = (spec.height, spec.width);
    let origin = [0.0, CAMERA_HEIGHT, 0.0];
    let mut image = vec![T::zero(); 3 * h * w];
    let mut depth = vec![T::zero(); h * w];
    for row in 0..h {
        for col in 0..w {
            let d = ray(spec, row, col);
            let mut best: Option<(f64, V3, V3)> = None;
            if d[1] < 0.0 {
                let t = -CAMERA_HEIGHT / d[1];
                let p = [t * d[0], 0.0, t * d[2]];
                best = Some((t, [0.0, 1.0, 0.0], ground_albedo(p)));
            }
            for o in &objects {
                if let Some((t, n)) = o.hit(origin, d) {
                    if best.is_none_or(|b| t < b.0) {
                        best = Some((t, n, o.albedo));
                    }
                }
            }
            let i = row * w + col;
            let (t, rgb) = match best {
                Some((t, n, albedo)) => {
                    let shade = 0.25 + 0.75 * dot(n, LIGHT).max(0.0);
                    (t, albedo.map(|a| a * shade))
                }
                None => {
                    let up = (-(row as f64) / h as f64).exp();
                    (spec.far, [0.45 * up, 0.6 * up, 0.9])
                }
            };
            depth[i] = T::of(t.clamp(spec.near, spec.far));
            for (c, v) in rgb.iter().enumerate() {
                image[c * h * w + i] = T::of(*v);
            }
        }
    }
    Ok((Tensor::new(&[3, h, w], image)?, Tensor::new(&[1, h, w], depth)?))
}

/// `n` frames stacked along a batch axis; frame `i` uses seed
/// `spec.seed + i`.
pub fn synth_batch<T: Float>(spec: &SceneSpec, n: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w) = (spec.height, spec.width);
    let mut img = Vec::with_capacity(n * 3 * h * w);
    let mut dep = Vec::with_capacity(n * h * w);
    for i in 0..n {
        let s = SceneSpec {
            seed: spec.seed.wrapping_add(i as u64),
            ..*spec
        };
        let (a, b) = synth_scene::<T>(&s)?;
        img.extend(a.into_data());
        dep.extend(b.into_data());
    }
    Ok((Tensor::new(&[n, 3, h, w], img)?, Tensor::new(&[n, 1, h, w], dep)?))
}
