//! Test-time perturbations of a point cloud.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::PointCloud;

pub const JITTER_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Permute { seed: u64 },
    /// Quarter turns about the vertical axis: 90, 180 or 270 degrees.
    RotateZ { degrees: u16 },
    /// Same offset added to all three axes.
    Translate { offset: f64 },
    Scale { factor: f64 },
    Jitter { sigma: f64, seed: u64 },
}

impl Transform {
    /// The fixed robustness suite.
    pub fn suite(seed: u64) -> Vec<Transform> {
        vec![
            Transform::Permute { seed },
            Transform::RotateZ { degrees: 90 },
            Transform::RotateZ { degrees: 180 },
            Transform::RotateZ { degrees: 270 },
            Transform::Translate { offset: 0.2 },
            Transform::Translate { offset: -0.2 },
            Transform::Scale { factor: 0.8 },
            Transform::Scale { factor: 1.2 },
            Transform::Jitter {
                sigma: JITTER_SIGMA,
                seed,
            },
        ]
    }

    /// A copy of `self` whose random stream is specific to sample `index`.
    pub fn for_sample(self, index: usize) -> Transform {
        let mix = |s: u64| s ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        match self {
            Transform::Permute { seed } => Transform::Permute { seed: mix(seed) },
            Transform::Jitter { sigma, seed } => Transform::Jitter { sigma, seed: mix(seed) },
            t => t,
        }
    }

    /// Apply to coordinates. Any attached features are carried along by
    /// `Permute` and left untouched otherwise.
    pub fn apply(&self, cloud: &PointCloud<f64>) -> PointCloud<f64> {
        match *self {
            Transform::Permute { seed } => {
                let mut order: Vec<usize> = (0..cloud.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                cloud.permuted(&order)
            }
            Transform::RotateZ { degrees } => cloud.map_coords(|[x, y, z]| match degrees % 360 {
                90 => [-y, x, z],
                180 => [-x, -y, z],
                270 => [y, -x, z],
                _ => [x, y, z],
            }),
            Transform::Translate { offset } => cloud.map_coords(|p| p.map(|c| c + offset)),
            Transform::Scale { factor } => cloud.map_coords(|p| p.map(|c| c * factor)),
            Transform::Jitter { sigma, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
                let coords = cloud
                    .coords()
                    .iter()
                    .map(|p| p.map(|c| c + normal.sample(&mut rng)))
                    .collect();
                let mut out = PointCloud::new(coords).expect("jitter keeps coordinates finite");
                if let Some(f) = cloud.features() {
                    out.set_features(f.clone()).expect("same point count");
                }
                out
            }
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Permute { .. } => write!(f, "permute"),
            Transform::RotateZ { degrees } => write!(f, "rotate_z:{degrees}"),
            Transform::Translate { offset } => write!(f, "translate:{offset:+}"),
            Transform::Scale { factor } => write!(f, "scale:{factor}"),
            Transform::Jitter { sigma, .. } => write!(f, "jitter:{sigma}"),
        }
    }
}

/// Parses `permute`, `rotate_z:90`, `translate:+0.2`, `scale:0.8`, `jitter` or
/// `jitter:<sigma>`. Stochastic transforms get seed 0; use [`Transform::with_seed`].
impl FromStr for Transform {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> Result<f64, String> {
            let a = a.ok_or_else(|| format!("transform `{name}` needs a value, e.g. `{name}:<value>`"))?;
            a.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("bad value `{a}` for transform `{name}`"))
        };
        match name {
            "permute" => Ok(Transform::Permute { seed: 0 }),
            "rotate_z" => match num(arg)? {
                d if d == 90.0 || d == 180.0 || d == 270.0 => Ok(Transform::RotateZ { degrees: d as u16 }),
                d => Err(format!("rotate_z supports 90, 180 or 270 degrees, got {d}")),
            },
            "translate" => Ok(Transform::Translate { offset: num(arg)? }),
            "scale" => Ok(Transform::Scale { factor: num(arg)? }),
            "jitter" => {
                let sigma = if arg.is_some() { num(arg)? } else { JITTER_SIGMA };
                if sigma < 0.0 {
                    return Err("jitter sigma must be non-negative".into());
                }
                Ok(Transform::Jitter { sigma, seed: 0 })
            }
            _ => Err(format!(
                "unknown transform `{s}` (expected permute|rotate_z:<deg>|translate:<d>|scale:<f>|jitter[:<sigma>])"
            )),
        }
    }
}

impl Transform {
    pub fn with_seed(self, seed: u64) -> Transform {
        match self {
            Transform::Permute { .. } => Transform::Permute { seed },
            Transform::Jitter { sigma, .. } => Transform::Jitter { sigma, seed },
            t => t,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> PointCloud<f64> {
        PointCloud::new(vec![[1.0, 2.0, 3.0], [-0.5, 0.25, 0.0], [0.0, 0.0, 1.0], [2.0, -1.0, 0.5]]).unwrap()
    }

    fn sorted(c: &PointCloud<f64>) -> Vec<[f64; 3]> {
        let mut v = c.coords().to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    #[test]
    fn permute_keeps_the_multiset() {
        let c = cloud();
        let p = Transform::Permute { seed: 9 }.apply(&c);
        assert_eq!(sorted(&p), sorted(&c));
    }

    #[test]
    fn rotations_are_exact() {
        let c = cloud();
        let r90 = Transform::RotateZ { degrees: 90 };
        let four = r90.apply(&r90.apply(&r90.apply(&r90.apply(&c))));
        assert_eq!(four, c);
        let r180 = Transform::RotateZ { degrees: 180 }.apply(&c);
        assert_eq!(r90.apply(&r90.apply(&c)), r180);
        assert_eq!(r180.point(0), [-1.0, -2.0, 3.0]);
    }

    #[test]
    fn parse_roundtrip() {
        for s in ["permute", "rotate_z:270", "translate:+0.2", "translate:-0.2", "scale:0.8", "jitter:0.01"] {
            let t: Transform = s.parse().unwrap();
            assert_eq!(t.to_string(), s);
        }
        assert!("rotate_z:45".parse::<Transform>().is_err());
        assert!("shear".parse::<Transform>().is_err());
    }

    #[test]
    fn jitter_is_small_and_seeded() {
        let c = cloud();
        let t = Transform::Jitter { sigma: 0.01, seed: 3 };
        assert_eq!(t.apply(&c), t.apply(&c));
        let j = t.apply(&c);
        for (a, b) in j.coords().iter().zip(c.coords()) {
            assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 0.1));
        }
    }
}
