//! Reverse-mode gradients of a PAConv layer, derived by hand.
//!
//! Point coordinates are treated as constants: gradients flow into the input
//! features, the Weight Bank, and every ScoreNet parameter.

mod gradcheck;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::paconv::{normalize_row_backward, Affine, AggMode, ExecPath, ForwardCache, PAConvLayer, WeightBank};
use crate::scalar::{dot, Real};

pub use gradcheck::{finite_diff_check, BlockReport, GradCheckReport, LossKind, DEFAULT_EPS};

/// Gradients of a scalar loss with respect to a layer's inputs and parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientBundle<T> {
    pub d_features: FeatureMap<T>,
    pub d_bank: WeightBank<T>,
    pub d_scorenet: Vec<Affine<T>>,
}

impl<T: Real> GradientBundle<T> {
    pub fn zeros_like(layer: &PAConvLayer<T>, n: usize) -> Self {
        Self {
            d_features: FeatureMap::zeros(n, layer.c_in()),
            d_bank: WeightBank::zeros(layer.m(), layer.c_in(), layer.c_out()).expect("layer dims are positive"),
            d_scorenet: layer.scorenet.zero_grad(),
        }
    }

    /// All parameter and input gradients, flattened in a fixed block order.
    pub fn blocks(&self) -> Vec<(String, &[T])> {
        let mut out = vec![
            ("features".to_string(), self.d_features.as_slice()),
            ("bank".to_string(), self.d_bank.as_slice()),
        ];
        for (l, a) in self.d_scorenet.iter().enumerate() {
            out.push((format!("scorenet.{l}.weight"), &a.weight[..]));
            out.push((format!("scorenet.{l}.bias"), &a.bias[..]));
        }
        out
    }

    /// Largest absolute difference over all blocks.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .flat_map(|((_, a), (_, b))| a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()))
            .fold(0.0, f64::max)
    }

    /// Parameter-gradient accumulation (`self += other`); feature gradients included.
    pub fn add_assign(&mut self, other: &Self) {
        add_into(self.d_features.as_mut_slice(), other.d_features.as_slice());
        add_into(self.d_bank.as_mut_slice(), other.d_bank.as_slice());
        for (a, b) in self.d_scorenet.iter_mut().zip(&other.d_scorenet) {
            add_into(&mut a.weight, &b.weight);
            add_into(&mut a.bias, &b.bias);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }
}

fn add_into<T: Real>(a: &mut [T], b: &[T]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Backpropagate `d_out` (`N × C_out`) through the forward recorded in `cache`.
pub fn paconv_backward<T: Real>(
    layer: &PAConvLayer<T>,
    cache: &ForwardCache<T>,
    d_out: &FeatureMap<T>,
) -> Result<GradientBundle<T>> {
    if cache.fingerprint != layer.fingerprint() {
        return Err(Error::Contract("forward cache was produced by a different layer".into()));
    }
    let nbrs = &cache.nbrs;
    let (n, k) = (nbrs.n(), nbrs.k());
    let (ci, co, m) = (layer.c_in(), layer.c_out(), layer.m());
    if d_out.rows() != n || d_out.cols() != co {
        return Err(Error::Contract(format!(
            "output gradient is {}×{}, expected {n}×{co}",
            d_out.rows(),
            d_out.cols()
        )));
    }

    let features = &cache.features;
    let bank = &layer.bank;
    let mut grads = GradientBundle::zeros_like(layer, n);
    let mut d_scores = vec![T::zero(); n * k * m];
    let mut dv = vec![T::zero(); co];
    let inv_k = T::one() / T::lit(k as f64);
    // fused path: gradient w.r.t. each transformed row f_pᵀ B_m
    let mut d_transformed = match cache.path {
        ExecPath::Fused => vec![T::zero(); n * m * co],
        ExecPath::Naive => Vec::new(),
    };
    let mut w = vec![T::zero(); ci];

    for i in 0..n {
        let g = d_out.row(i);
        for (slot, &j) in nbrs.row(i).iter().enumerate() {
            match layer.agg {
                AggMode::Max => {
                    let arg = &cache.argmax.as_ref().expect("max forward records argmax")[i * co..(i + 1) * co];
                    for c in 0..co {
                        dv[c] = if arg[c] == slot { g[c] } else { T::zero() };
                    }
                }
                AggMode::Sum => dv.copy_from_slice(g),
                AggMode::Avg => {
                    for (d, &gc) in dv.iter_mut().zip(g) {
                        *d = gc * inv_k;
                    }
                }
            }
            if dv.iter().all(|&d| d == T::zero()) {
                continue;
            }
            let p = i * k + slot;
            let s = cache.scores.pair(i, slot);
            let ds = &mut d_scores[p * m..(p + 1) * m];
            let f = features.row(j);

            match cache.path {
                ExecPath::Naive => {
                    let klen = ci * co;
                    let kern = &cache.kernels.as_ref().expect("naive forward records kernels")[p * klen..(p + 1) * klen];
                    // d f_j += K dv
                    let df = grads.d_features.row_mut(j);
                    for (dfa, krow) in df.iter_mut().zip(kern.chunks_exact(co)) {
                        *dfa += dot(krow, &dv);
                    }
                    for mm in 0..m {
                        let b = bank.matrix(mm);
                        // w = B_m dv, so dS_m = f · w
                        for (wa, brow) in w.iter_mut().zip(b.chunks_exact(co)) {
                            *wa = dot(brow, &dv);
                        }
                        ds[mm] = dot(f, &w);
                        let db = grads.d_bank.matrix_mut(mm);
                        for (&fa, dbrow) in f.iter().zip(db.chunks_exact_mut(co)) {
                            let sf = s[mm] * fa;
                            for (dbb, &d) in dbrow.iter_mut().zip(&dv) {
                                *dbb += sf * d;
                            }
                        }
                    }
                }
                ExecPath::Fused => {
                    let tbuf = cache.transformed.as_ref().expect("fused forward records transforms");
                    for mm in 0..m {
                        let at = (j * m + mm) * co;
                        ds[mm] = dot(&tbuf[at..at + co], &dv);
                        for (dt, &d) in d_transformed[at..at + co].iter_mut().zip(&dv) {
                            *dt += s[mm] * d;
                        }
                    }
                }
            }
        }
    }

    if cache.path == ExecPath::Fused {
        for p in 0..n {
            let f = features.row(p);
            for mm in 0..m {
                let dt = &d_transformed[(p * m + mm) * co..(p * m + mm + 1) * co];
                let b = bank.matrix(mm);
                let df = grads.d_features.row_mut(p);
                for (dfa, brow) in df.iter_mut().zip(b.chunks_exact(co)) {
                    *dfa += dot(brow, dt);
                }
                let db = grads.d_bank.matrix_mut(mm);
                for (&fa, dbrow) in f.iter().zip(db.chunks_exact_mut(co)) {
                    for (dbb, &d) in dbrow.iter_mut().zip(dt) {
                        *dbb += fa * d;
                    }
                }
            }
        }
    }

    let norm = layer.scorenet.norm();
    let mut d_logits = vec![T::zero(); n * k * m];
    for p in 0..n * k {
        let r = p * m..(p + 1) * m;
        normalize_row_backward(
            &cache.logits.values[r.clone()],
            &cache.scores.values[r.clone()],
            &d_scores[r.clone()],
            &mut d_logits[r],
            norm,
        );
    }
    layer
        .scorenet
        .backward_into(&cache.relation, &cache.hidden, &d_logits, &mut grads.d_scorenet);
    Ok(grads)
}
