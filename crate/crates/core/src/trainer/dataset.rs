//! Synthetic three-class shape dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Sphere,
    Cube,
    Plane,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Sphere, ShapeClass::Cube, ShapeClass::Plane];

    pub fn label(self) -> usize {
        self as usize
    }
}

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub samples: Vec<Sample>,
    pub n_points: usize,
    pub seed: u64,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn unit_vector(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|c| c / n);
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Raw samples before normalization: unit sphere, surface of `[-1, 1]³`, or a
/// unit disc through the origin with a uniformly random normal.
pub fn raw_shape(class: ShapeClass, n_points: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    match class {
        ShapeClass::Sphere => (0..n_points).map(|_| unit_vector(rng)).collect(),
        ShapeClass::Cube => (0..n_points)
            .map(|_| {
                // faces have equal area, so pick one uniformly
                let face = rng.gen_range(0..6);
                let (axis, side) = (face / 2, if face % 2 == 0 { -1.0 } else { 1.0 });
                let mut p = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
                p[axis] = side;
                p
            })
            .collect(),
        ShapeClass::Plane => {
            let normal = unit_vector(rng);
            let helper = if normal[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let u = cross(normal, helper);
            let un = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
            let u = u.map(|c| c / un);
            let v = cross(normal, u);
            (0..n_points)
                .map(|_| {
                    let r = rng.gen::<f64>().sqrt();
                    let t = rng.gen_range(0.0..std::f64::consts::TAU);
                    let (a, b) = (r * t.cos(), r * t.sin());
                    [0, 1, 2].map(|d| a * u[d] + b * v[d])
                })
                .collect()
        }
    }
}

/// Center on the centroid and scale so the farthest point lies on the unit sphere.
pub fn normalize_unit_ball(points: &mut [[f64; 3]]) {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points.iter() {
        for d in 0..3 {
            c[d] += p[d] / n;
        }
    }
    let mut r: f64 = 0.0;
    for p in points.iter_mut() {
        for d in 0..3 {
            p[d] -= c[d];
        }
        r = r.max((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
    }
    if r > 0.0 {
        for p in points.iter_mut() {
            *p = p.map(|x| x / r);
        }
    }
}

/// `n_per_class` samples of each class, interleaved by class, reproducible per seed.
pub fn synth_dataset(n_per_class: usize, n_points: usize, seed: u64) -> Result<SynthDataset> {
    if n_points < 16 {
        return Err(Error::input(format!("n_points must be at least 16, got {n_points}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_per_class * NUM_CLASSES);
    for _ in 0..n_per_class {
        for class in ShapeClass::ALL {
            let mut pts = raw_shape(class, n_points, &mut rng);
            normalize_unit_ball(&mut pts);
            samples.push(Sample {
                cloud: PointCloud::new(pts)?,
                label: class.label(),
            });
        }
    }
    Ok(SynthDataset {
        samples,
        n_points,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(synth_dataset(10, 64, 7).unwrap(), synth_dataset(10, 64, 7).unwrap());
        assert_ne!(synth_dataset(2, 64, 7).unwrap(), synth_dataset(2, 64, 8).unwrap());
    }

    #[test]
    fn raw_spheres_have_unit_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in raw_shape(ShapeClass::Sphere, 500, &mut rng) {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn raw_cubes_lie_on_the_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for p in raw_shape(ShapeClass::Cube, 500, &mut rng) {
            let m = p.iter().fold(0.0f64, |a, c| a.max(c.abs()));
            assert_eq!(m, 1.0);
        }
    }

    #[test]
    fn raw_planes_are_flat_discs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = raw_shape(ShapeClass::Plane, 200, &mut rng);
        // any three points span the same plane through the origin
        let n = cross(pts[0], pts[1]);
        for p in &pts {
            let d = n[0] * p[0] + n[1] * p[1] + n[2] * p[2];
            assert!(d.abs() < 1e-12);
            assert!((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn balanced_and_normalized() {
        let ds = synth_dataset(5, 32, 1).unwrap();
        for class in 0..NUM_CLASSES {
            assert_eq!(ds.samples.iter().filter(|s| s.label == class).count(), 5);
        }
        for s in &ds.samples {
            let max = s
                .cloud
                .coords()
                .iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
                .fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_points_rejected() {
        assert!(synth_dataset(1, 15, 0).is_err());
    }
}
