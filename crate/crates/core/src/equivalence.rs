//! Randomized agreement check between the naive and fused forward paths, and
//! between their backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::paconv_backward;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{knn_build, NeighborIndex, PointCloud, RelationMode};
use crate::paconv::{AggMode, LayerConfig, NormMode, PAConvLayer};
use crate::scalar::Real;

/// A random layer together with the cloud and neighborhoods it runs on.
#[derive(Debug, Clone)]
pub struct Instance<T> {
    pub seed: u64,
    pub layer: PAConvLayer<T>,
    pub cloud: PointCloud<T>,
    pub nbrs: NeighborIndex,
}

/// Shape of a random instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceShape {
    pub n: usize,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub m: usize,
}

/// Build a random instance with the given shape and modes.
///
/// Coordinates and features are uniform on `[-1, 1]`; ScoreNet biases are
/// randomized too so that no rectifier starts exactly at its kink.
pub fn random_instance(
    seed: u64,
    shape: InstanceShape,
    agg: AggMode,
    norm: NormMode,
    relation: RelationMode,
    hidden: &[usize],
) -> Result<Instance<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = LayerConfig::new(shape.c_in, shape.c_out);
    cfg.m = shape.m;
    cfg.hidden = hidden.to_vec();
    cfg.agg = agg;
    cfg.norm = norm;
    cfg.relation = relation;
    let mut layer = PAConvLayer::init(&cfg, rng.gen())?;
    for l in layer.scorenet.layers_mut() {
        for b in &mut l.bias {
            *b = rng.gen_range(-0.2..0.2);
        }
    }
    let coords = (0..shape.n)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();
    let feats = (0..shape.n * shape.c_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cloud = PointCloud::with_features(coords, FeatureMap::from_vec(shape.n, shape.c_in, feats)?)?;
    let nbrs = knn_build(&cloud, shape.k, true)?;
    Ok(Instance {
        seed,
        layer,
        cloud,
        nbrs,
    })
}

impl<T: Real> Instance<T> {
    pub fn cast<U: Real>(&self) -> Instance<U> {
        Instance {
            seed: self.seed,
            layer: self.layer.cast(),
            cloud: PointCloud::with_features(
                self.cloud.coords().iter().map(|p| p.map(|c| U::lit(c.as_f64()))).collect(),
                self.cloud.features().expect("instances carry features").cast(),
            )
            .expect("cast preserves validity"),
            nbrs: self.nbrs.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivalenceConfig {
    pub instances: usize,
    pub seed: u64,
    pub tol_single: f64,
    pub tol_double: f64,
    pub tol_backward: f64,
    /// Corrupt one fused intermediate to prove the check catches it.
    pub inject_fault: bool,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        Self {
            instances: 50,
            seed: 0,
            tol_single: 1e-6,
            tol_double: 1e-10,
            tol_backward: 1e-10,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub seed: u64,
    pub shape: InstanceShape,
    pub agg: AggMode,
    pub norm: NormMode,
    pub relation: RelationMode,
    pub forward_diff_single: f64,
    pub forward_diff_double: f64,
    pub backward_diff_double: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub config: EquivalenceConfig,
    pub max_forward_diff_single: f64,
    pub max_forward_diff_double: f64,
    pub max_backward_diff_double: f64,
    /// Seeds of instances over tolerance.
    pub failing_seeds: Vec<u64>,
    pub passed: bool,
    pub instances: Vec<InstanceResult>,
}

/// Instance `r` cycles through every aggregation × normalization pairing.
fn instance_plan(config: &EquivalenceConfig, r: usize) -> (u64, InstanceShape, AggMode, NormMode, RelationMode) {
    let seed = config.seed.wrapping_add(r as u64);
    let agg = AggMode::ALL[r % 3];
    let norm = NormMode::ALL[(r / 3) % 4];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = rng.gen_range(4..=24);
    let shape = InstanceShape {
        n,
        k: rng.gen_range(1..=n.min(6)),
        c_in: rng.gen_range(1..=6),
        c_out: rng.gen_range(1..=7),
        m: rng.gen_range(1..=8),
    };
    let relation = RelationMode::ALL[rng.gen_range(0..RelationMode::ALL.len())];
    (seed, shape, agg, norm, relation)
}

fn run_one(config: &EquivalenceConfig, r: usize) -> Result<InstanceResult> {
    let (seed, shape, agg, norm, relation) = instance_plan(config, r);
    let inst = random_instance(seed, shape, agg, norm, relation, &[16, 16, 16])?;
    let fused = |layer: &PAConvLayer<f64>, cloud: &PointCloud<f64>, nbrs: &NeighborIndex| {
        if config.inject_fault {
            layer.forward_fused_faulty(cloud, nbrs)
        } else {
            layer.forward_fused(cloud, nbrs)
        }
    };

    let (out_n, cache_n) = inst.layer.forward_naive(&inst.cloud, &inst.nbrs)?;
    let (out_f, cache_f) = fused(&inst.layer, &inst.cloud, &inst.nbrs)?;
    let forward_diff_double = out_n.max_abs_diff(&out_f);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0u64);
    let d_out = FeatureMap::from_vec(
        shape.n,
        shape.c_out,
        (0..shape.n * shape.c_out).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let g_n = paconv_backward(&inst.layer, &cache_n, &d_out)?;
    let g_f = paconv_backward(&inst.layer, &cache_f, &d_out)?;
    let backward_diff_double = g_n.max_abs_diff(&g_f);

    let single: Instance<f32> = inst.cast();
    let (sn, _) = single.layer.forward_naive(&single.cloud, &single.nbrs)?;
    let (sf, _) = if config.inject_fault {
        single.layer.forward_fused_faulty(&single.cloud, &single.nbrs)?
    } else {
        single.layer.forward_fused(&single.cloud, &single.nbrs)?
    };
    let forward_diff_single = sn.max_abs_diff(&sf);

    let passed = forward_diff_single < config.tol_single
        && forward_diff_double < config.tol_double
        && backward_diff_double < config.tol_backward;
    Ok(InstanceResult {
        seed,
        shape,
        agg,
        norm,
        relation,
        forward_diff_single,
        forward_diff_double,
        backward_diff_double,
        passed,
    })
}

/// Run `config.instances` random comparisons across all aggregation and
/// normalization modes. Instances run in parallel; results are in instance order.
pub fn run_equivalence(config: &EquivalenceConfig) -> Result<EquivalenceReport> {
    if config.instances == 0 {
        return Err(Error::input("equivalence needs at least one instance"));
    }
    let instances = (0..config.instances)
        .into_par_iter()
        .map(|r| run_one(config, r))
        .collect::<Result<Vec<_>>>()?;
    let max = |f: fn(&InstanceResult) -> f64| instances.iter().map(f).fold(0.0, f64::max);
    let failing_seeds: Vec<u64> = instances.iter().filter(|r| !r.passed).map(|r| r.seed).collect();
    Ok(EquivalenceReport {
        config: config.clone(),
        max_forward_diff_single: max(|r| r.forward_diff_single),
        max_forward_diff_double: max(|r| r.forward_diff_double),
        max_backward_diff_double: max(|r| r.backward_diff_double),
        passed: failing_seeds.is_empty(),
        failing_seeds,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_instances_is_an_error() {
        let cfg = EquivalenceConfig {
            instances: 0,
            ..Default::default()
        };
        assert!(run_equivalence(&cfg).is_err());
    }

    #[test]
    fn plan_covers_every_mode_pairing() {
        let cfg = EquivalenceConfig::default();
        let mut seen = std::collections::HashSet::new();
        for r in 0..12 {
            let (_, _, agg, norm, _) = instance_plan(&cfg, r);
            seen.insert((agg, norm));
        }
        assert_eq!(seen.len(), 12);
    }

    #[test]
    fn injected_fault_is_caught() {
        let cfg = EquivalenceConfig {
            instances: 6,
            inject_fault: true,
            ..Default::default()
        };
        let report = run_equivalence(&cfg).unwrap();
        assert!(!report.passed);
        assert!(!report.failing_seeds.is_empty());
    }
}
