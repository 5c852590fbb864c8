use rayon::prelude::*;
use serde::Serialize;

use crate::autograd::paconv_backward;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{NeighborIndex, PointCloud};
use crate::paconv::{ExecPath, PAConvLayer};
use crate::scalar::{Precision, Real};

type Wide = twofloat::TwoFloat;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Scalar reduction of the layer output used as the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `Σ g`
    #[default]
    Sum,
    /// `Σ g²`
    SumOfSquares,
}

impl LossKind {
    fn value<T: Real>(self, out: &FeatureMap<T>) -> T {
        let v = out.as_slice().iter();
        match self {
            LossKind::Sum => v.fold(T::zero(), |a, &x| a + x),
            LossKind::SumOfSquares => v.fold(T::zero(), |a, &x| a + x * x),
        }
    }

    fn grad<T: Real>(self, out: &FeatureMap<T>) -> FeatureMap<T> {
        match self {
            LossKind::Sum => out.map(|_| T::one()),
            LossKind::SumOfSquares => out.map(|v| v + v),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sum" => Ok(LossKind::Sum),
            "sum_of_squares" | "sumsq" => Ok(LossKind::SumOfSquares),
            _ => Err(format!("unknown loss `{s}` (expected sum|sum_of_squares)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Coordinates whose ±eps probes crossed a branch (MAX tie, rectifier or clamp kink).
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub precision: Precision,
    pub loss: LossKind,
    pub path: ExecPath,
    pub max_rel_err: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn skipped(&self) -> usize {
        self.blocks.iter().map(|b| b.skipped).sum()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

#[derive(Clone, Copy)]
enum Target {
    Features,
    Bank,
    Weight(usize),
    Bias(usize),
}

fn slot<'a>(layer: &'a mut PAConvLayer<Wide>, feats: &'a mut FeatureMap<Wide>, target: Target) -> &'a mut [Wide] {
    match target {
        Target::Features => feats.as_mut_slice(),
        Target::Bank => layer.bank.as_mut_slice(),
        Target::Weight(l) => &mut layer.scorenet.layers_mut()[l].weight,
        Target::Bias(l) => &mut layer.scorenet.layers_mut()[l].bias,
    }
}

/// Compare [`paconv_backward`] against central finite differences for every
/// input feature and parameter.
///
/// Coordinates where the `+eps` or `-eps` probe lands on a different branch than
/// the base point (a MAX tie, a rectifier or `max(0, tanh)` kink) are not
/// differentiable there; they are counted as skipped and left out of the error
/// statistic. Only double precision is accepted.
///
/// The probes themselves run in double-double arithmetic. A double-precision
/// loss carries roundoff near `1e-16 |L|`, which after division by `2 eps`
/// swamps small gradient entries; the wider probes leave truncation as the
/// only error source.
pub fn finite_diff_check<T: Real>(
    layer: &PAConvLayer<T>,
    cloud: &PointCloud<T>,
    nbrs: &NeighborIndex,
    loss: LossKind,
    eps: f64,
    path: ExecPath,
) -> Result<GradCheckReport> {
    if T::PRECISION != Precision::Double {
        return Err(Error::Precision {
            required: Precision::Double,
            actual: T::PRECISION,
        });
    }
    let norm = layer.scorenet.norm();
    let (out, cache) = layer.forward(cloud, nbrs, path)?;
    let base_sig = cache.branch_signature(norm);
    let analytic = paconv_backward(layer, &cache, &loss.grad(&out))?;

    let base_layer: PAConvLayer<Wide> = layer.cast();
    let base_feats: FeatureMap<Wide> = cloud
        .features()
        .ok_or_else(|| Error::input("gradient check needs per-point features"))?
        .cast();
    let base_cloud = PointCloud::new(cloud.coords().iter().map(|p| p.map(|c| Wide::from(c.as_f64()))).collect())?;

    let mut targets = vec![(Target::Features, "features".to_string()), (Target::Bank, "bank".to_string())];
    for l in 0..layer.scorenet.layers().len() {
        targets.push((Target::Weight(l), format!("scorenet.{l}.weight")));
        targets.push((Target::Bias(l), format!("scorenet.{l}.bias")));
    }
    let analytic_blocks = analytic.blocks();

    let mut blocks = Vec::with_capacity(targets.len());
    for ((target, name), (_, grad)) in targets.into_iter().zip(analytic_blocks) {
        // per coordinate: None when a probe crossed a branch, else (abs, rel) error
        let errors = (0..grad.len())
            .into_par_iter()
            .map_init(
                || (base_layer.clone(), base_feats.clone(), base_cloud.clone()),
                |(work_layer, feats, work_cloud), idx| -> Result<Option<(f64, f64)>> {
                    let orig = slot(work_layer, feats, target)[idx];
                    let mut probe = |delta: f64| -> Result<(Wide, u64)> {
                        slot(work_layer, feats, target)[idx] = orig + Wide::from(delta);
                        work_cloud.set_features(feats.clone())?;
                        let (o, c) = work_layer.forward(work_cloud, nbrs, path)?;
                        let value = loss.value(&o);
                        if !value.hi().is_finite() {
                            return Err(Error::Numerical {
                                coordinate: format!("{name}[{idx}]"),
                                message: format!("loss is {} at offset {delta:e}", value.hi()),
                            });
                        }
                        Ok((value, c.branch_signature(norm)))
                    };
                    let plus = probe(eps);
                    let minus = probe(-eps);
                    slot(work_layer, feats, target)[idx] = orig;
                    let ((lp, sp), (lm, sm)) = (plus?, minus?);
                    if sp != base_sig || sm != base_sig {
                        return Ok(None);
                    }
                    let numeric = ((lp - lm) / (2.0 * eps)).as_f64();
                    let a = grad[idx].as_f64();
                    let abs = (a - numeric).abs();
                    Ok(Some((abs, abs / a.abs().max(numeric.abs()).max(1e-8))))
                },
            )
            .collect::<Result<Vec<_>>>()?;
        let mut report = BlockReport {
            name,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            checked: 0,
            skipped: 0,
        };
        for e in errors {
            match e {
                Some((abs, rel)) => {
                    report.max_abs_err = report.max_abs_err.max(abs);
                    report.max_rel_err = report.max_rel_err.max(rel);
                    report.checked += 1;
                }
                None => report.skipped += 1,
            }
        }
        blocks.push(report);
    }

    Ok(GradCheckReport {
        eps,
        precision: T::PRECISION,
        loss,
        path,
        max_rel_err: blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max),
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equivalence::{random_instance, InstanceShape};
    use crate::geometry::{knn_build, RelationMode};
    use crate::paconv::{AggMode, NormMode, ScoreNet, WeightBank};

    fn shape() -> InstanceShape {
        InstanceShape {
            n: 6,
            k: 3,
            c_in: 2,
            c_out: 3,
            m: 3,
        }
    }

    #[test]
    fn single_precision_refused() {
        let inst = random_instance(1, shape(), AggMode::Sum, NormMode::Softmax, RelationMode::Full7, &[4])
            .unwrap()
            .cast::<f32>();
        let r = finite_diff_check(&inst.layer, &inst.cloud, &inst.nbrs, LossKind::Sum, DEFAULT_EPS, ExecPath::Fused);
        assert!(matches!(
            r,
            Err(Error::Precision {
                actual: Precision::Single,
                ..
            })
        ));
    }

    #[test]
    fn small_instance_matches() {
        for agg in AggMode::ALL {
            let inst = random_instance(4, shape(), agg, NormMode::Sigmoid, RelationMode::Full7, &[4, 4]).unwrap();
            let r = finite_diff_check(&inst.layer, &inst.cloud, &inst.nbrs, LossKind::SumOfSquares, DEFAULT_EPS, ExecPath::Naive)
                .unwrap();
            assert!(r.passes(1e-6), "{agg:?}: {}", r.max_rel_err);
            assert_eq!(r.blocks.len(), 2 + 2 * 3);
            assert!(r.blocks.iter().all(|b| b.checked + b.skipped > 0));
        }
    }

    #[test]
    fn max_ties_are_skipped() {
        // two identical neighbors tie in every output channel
        let bank = WeightBank::from_matrices(1, 1, &[vec![1.0f64]]).unwrap();
        let net = ScoreNet::zeros(7, &[2], 1, NormMode::Softmax).unwrap();
        let layer = PAConvLayer::new(bank, net, AggMode::Max, RelationMode::Full7).unwrap();
        let cloud = PointCloud::with_features(
            vec![[0.0; 3], [1.0, 0.0, 0.0]],
            FeatureMap::from_vec(2, 1, vec![0.5, 0.5]).unwrap(),
        )
        .unwrap();
        let nb = knn_build(&cloud, 2, true).unwrap();
        let r = finite_diff_check(&layer, &cloud, &nb, LossKind::Sum, DEFAULT_EPS, ExecPath::Naive).unwrap();
        assert!(r.blocks[0].skipped > 0);
    }
}
