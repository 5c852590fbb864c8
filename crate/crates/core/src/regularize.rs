//! Weight Bank correlation penalty and the Pearson diversity diagnostic.

use serde::{Deserialize, Serialize};

use crate::paconv::WeightBank;
use crate::scalar::{dot, Real};

pub const DEFAULT_LAMBDA: f64 = 0.01;

/// Penalty value plus a flag set when every matrix has zero norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrLoss {
    pub value: f64,
    pub degenerate: bool,
}

fn norms<T: Real>(bank: &WeightBank<T>) -> Vec<T> {
    (0..bank.m())
        .map(|i| {
            let b = bank.matrix(i);
            dot(b, b).sqrt()
        })
        .collect()
}

/// `Σ_{i<j} |⟨B_i, B_j⟩| / (‖B_i‖ ‖B_j‖)` with Frobenius products; pairs
/// involving a zero matrix contribute 0.
pub fn corr_loss<T: Real>(bank: &WeightBank<T>) -> CorrLoss {
    let norms = norms(bank);
    let mut value = T::zero();
    for i in 0..bank.m() {
        for j in i + 1..bank.m() {
            if norms[i] == T::zero() || norms[j] == T::zero() {
                continue;
            }
            value += dot(bank.matrix(i), bank.matrix(j)).abs() / (norms[i] * norms[j]);
        }
    }
    CorrLoss {
        value: value.as_f64(),
        degenerate: norms.iter().all(|&n| n == T::zero()),
    }
}

/// Gradient of [`corr_loss`], shaped like the bank.
///
/// For a pair with `c = ⟨A, B⟩`: `∂/∂A = sign(c) (B / (‖A‖‖B‖) − c A / (‖A‖³‖B‖))`.
/// `sign(0) = 0`, so exactly orthogonal pairs contribute nothing.
pub fn corr_loss_grad<T: Real>(bank: &WeightBank<T>) -> WeightBank<T> {
    let (m, len) = (bank.m(), bank.matrix_len());
    let norms = norms(bank);
    let mut grad = vec![T::zero(); m * len];
    for i in 0..m {
        for j in i + 1..m {
            let (ni, nj) = (norms[i], norms[j]);
            if ni == T::zero() || nj == T::zero() {
                continue;
            }
            let (a, b) = (bank.matrix(i), bank.matrix(j));
            let c = dot(a, b);
            if c == T::zero() {
                continue;
            }
            let sign = c.signum();
            let inv = T::one() / (ni * nj);
            let ca = c * inv / (ni * ni);
            let cb = c * inv / (nj * nj);
            for t in 0..len {
                grad[i * len + t] += sign * (b[t] * inv - ca * a[t]);
                grad[j * len + t] += sign * (a[t] * inv - cb * b[t]);
            }
        }
    }
    WeightBank::from_vec(m, bank.c_in(), bank.c_out(), grad).expect("gradient has the bank's shape")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrReport {
    pub loss: f64,
    /// `M × M`, row-major, symmetric with unit diagonal.
    pub pearson: Vec<f64>,
    pub m: usize,
    /// Mean of the upper off-diagonal entries.
    pub mean_r: f64,
    pub mean_abs_r: f64,
    /// Matrices with zero variance; their correlations are reported as 0.
    pub constant_matrices: Vec<usize>,
    pub degenerate: bool,
}

impl CorrReport {
    pub fn r(&self, i: usize, j: usize) -> f64 {
        self.pearson[i * self.m + j]
    }
}

/// Pairwise Pearson correlation of the flattened bank matrices, computed in
/// double precision with two passes.
pub fn pearson_r_pairs<T: Real>(bank: &WeightBank<T>) -> CorrReport {
    let m = bank.m();
    let centered: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let v: Vec<f64> = bank.matrix(i).iter().map(|x| x.as_f64()).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.into_iter().map(|x| x - mean).collect()
        })
        .collect();
    let sd: Vec<f64> = centered.iter().map(|v| dot(v, v).sqrt()).collect();
    let constant_matrices: Vec<usize> = (0..m).filter(|&i| sd[i] == 0.0).collect();

    let mut pearson = vec![0.0; m * m];
    let (mut sum, mut sum_abs, mut pairs) = (0.0, 0.0, 0usize);
    for i in 0..m {
        pearson[i * m + i] = 1.0;
        for j in i + 1..m {
            let r = if sd[i] == 0.0 || sd[j] == 0.0 {
                0.0
            } else {
                (dot(&centered[i], &centered[j]) / (sd[i] * sd[j])).clamp(-1.0, 1.0)
            };
            pearson[i * m + j] = r;
            pearson[j * m + i] = r;
            sum += r;
            sum_abs += r.abs();
            pairs += 1;
        }
    }
    let denom = pairs.max(1) as f64;
    let loss = corr_loss(bank);
    CorrReport {
        loss: loss.value,
        pearson,
        m,
        mean_r: sum / denom,
        mean_abs_r: sum_abs / denom,
        constant_matrices,
        degenerate: loss.degenerate,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrStudyConfig {
    pub m: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop once mean |R| drops below this; `None` runs every step.
    pub target_mean_abs_r: Option<f64>,
}

impl Default for CorrStudyConfig {
    fn default() -> Self {
        Self {
            m: 8,
            c_in: 8,
            c_out: 8,
            steps: 2000,
            lr: 0.05,
            seed: 0,
            target_mean_abs_r: None,
        }
    }
}

/// One row of the study trace: `(step, L_corr, mean |R|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrStep {
    pub step: usize,
    pub l_corr: f64,
    pub mean_abs_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrStudy {
    pub config: CorrStudyConfig,
    pub initial: CorrReport,
    pub last: CorrReport,
    /// Row 0 is the initial bank.
    pub trace: Vec<CorrStep>,
}

/// Plain gradient descent on the correlation penalty alone, from a random bank.
pub fn corr_study(config: &CorrStudyConfig) -> crate::Result<CorrStudy> {
    let mut bank = WeightBank::<f64>::init(config.m, config.c_in, config.c_out, config.seed)?;
    let initial = pearson_r_pairs(&bank);
    let mut trace = vec![CorrStep {
        step: 0,
        l_corr: initial.loss,
        mean_abs_r: initial.mean_abs_r,
    }];
    for step in 1..=config.steps {
        let g = corr_loss_grad(&bank);
        for (w, &d) in bank.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *w -= config.lr * d;
        }
        let r = pearson_r_pairs(&bank);
        trace.push(CorrStep {
            step,
            l_corr: r.loss,
            mean_abs_r: r.mean_abs_r,
        });
        if config.target_mean_abs_r.is_some_and(|t| r.mean_abs_r < t) {
            break;
        }
    }
    Ok(CorrStudy {
        config: config.clone(),
        initial,
        last: pearson_r_pairs(&bank),
        trace,
    })
}
