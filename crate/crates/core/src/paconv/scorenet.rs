//! ScoreNet: a small rectifier MLP followed by a score normalization, mapping a
//! relation vector to one assembly coefficient per Weight Bank matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::OpCounter;
use crate::error::{Error, Result};
use crate::geometry::RelationTensor;
use crate::scalar::{dot, Real};

/// Normalization applied to ScoreNet logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    Softmax,
    Sigmoid,
    /// `max(0, tanh(x))`
    TanhClamped,
    None,
}

impl NormMode {
    pub const ALL: [NormMode; 4] = [
        NormMode::Softmax,
        NormMode::Sigmoid,
        NormMode::TanhClamped,
        NormMode::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormMode::Softmax => "softmax",
            NormMode::Sigmoid => "sigmoid",
            NormMode::TanhClamped => "tanh_clamped",
            NormMode::None => "none",
        }
    }
}

impl std::str::FromStr for NormMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        NormMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown norm mode `{s}` (expected softmax|sigmoid|tanh_clamped|none)"))
    }
}

/// Largest value strictly below one.
fn below_one<T: Real>() -> T {
    T::one() - T::epsilon() / T::lit(2.0)
}

/// Normalize one row of logits into `out`.
pub fn normalize_row<T: Real>(logits: &[T], out: &mut [T], mode: NormMode) {
    match mode {
        NormMode::Softmax => {
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (o, &z) in out.iter_mut().zip(logits) {
                *o = (z - max).real_exp();
                total += *o;
            }
            for o in out.iter_mut() {
                *o = o.real_div(total);
            }
        }
        // saturated values are pinned inside the open ranges the modes promise
        NormMode::Sigmoid => {
            for (o, &z) in out.iter_mut().zip(logits) {
                *o = T::one()
                    .real_div(T::one() + (-z).real_exp())
                    .max(T::min_positive_value())
                    .min(below_one());
            }
        }
        NormMode::TanhClamped => {
            for (o, &z) in out.iter_mut().zip(logits) {
                *o = z.real_tanh().max(T::zero()).min(below_one());
            }
        }
        NormMode::None => out.copy_from_slice(logits),
    }
}

/// Backpropagate `d_scores` through [`normalize_row`] into `d_logits` (overwritten).
pub fn normalize_row_backward<T: Real>(
    logits: &[T],
    scores: &[T],
    d_scores: &[T],
    d_logits: &mut [T],
    mode: NormMode,
) {
    match mode {
        NormMode::Softmax => {
            // (diag(s) - s sᵀ) ds
            let dot = dot(scores, d_scores);
            for ((dz, &s), &g) in d_logits.iter_mut().zip(scores).zip(d_scores) {
                *dz = s * (g - dot);
            }
        }
        NormMode::Sigmoid => {
            for ((dz, &s), &g) in d_logits.iter_mut().zip(scores).zip(d_scores) {
                *dz = g * s * (T::one() - s);
            }
        }
        NormMode::TanhClamped => {
            for ((dz, &z), &g) in d_logits.iter_mut().zip(logits).zip(d_scores) {
                *dz = if z > T::zero() {
                    let t = z.real_tanh();
                    g * (T::one() - t * t)
                } else {
                    T::zero()
                };
            }
        }
        NormMode::None => d_logits.copy_from_slice(d_scores),
    }
}

/// Normalize a flat buffer of rows of width `m`.
pub fn normalize_scores<T: Real>(logits: &[T], m: usize, mode: NormMode) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (z, s) in logits.chunks_exact(m).zip(out.chunks_exact_mut(m)) {
        normalize_row(z, s, mode);
    }
    out
}

/// `N × k × M` per-pair values: ScoreNet logits or normalized scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor<T> {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub values: Vec<T>,
}

impl<T: Real> ScoreTensor<T> {
    #[inline]
    pub fn pair(&self, i: usize, j: usize) -> &[T] {
        let at = (i * self.k + j) * self.m;
        &self.values[at..at + self.m]
    }
}

/// Fully connected layer `y = x W + b`, `W` stored row-major as `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Affine<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim)
                .map(|_| T::lit(rng.gen_range(-bound..=bound)))
                .collect(),
            bias: vec![T::zero(); out_dim],
        }
    }

    #[inline]
    pub fn apply(&self, x: &[T], y: &mut [T]) {
        y.copy_from_slice(&self.bias);
        for (&xi, w_row) in x.iter().zip(self.weight.chunks_exact(self.out_dim)) {
            for (yo, &w) in y.iter_mut().zip(w_row) {
                *yo += xi * w;
            }
        }
    }

    /// Accumulate parameter gradients into `grad` and return `dx = W dy` in `dx`.
    #[inline]
    pub(crate) fn backward(&self, x: &[T], dy: &[T], grad: &mut Affine<T>, dx: Option<&mut [T]>) {
        for (gb, &g) in grad.bias.iter_mut().zip(dy) {
            *gb += g;
        }
        for (&xi, gw_row) in x.iter().zip(grad.weight.chunks_exact_mut(self.out_dim)) {
            for (gw, &g) in gw_row.iter_mut().zip(dy) {
                *gw += xi * g;
            }
        }
        if let Some(dx) = dx {
            for (d, w_row) in dx.iter_mut().zip(self.weight.chunks_exact(self.out_dim)) {
                *d = dot(w_row, dy);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Real>(&self) -> Affine<U> {
        Affine {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: self.weight.iter().map(|v| U::lit(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreNet<T> {
    d_in: usize,
    layers: Vec<Affine<T>>,
    norm: NormMode,
}

/// ScoreNet outputs for every pair, with the hidden activations backward needs.
#[derive(Debug, Clone)]
pub struct ScoreOutput<T> {
    pub logits: ScoreTensor<T>,
    pub scores: ScoreTensor<T>,
    /// Post-rectifier hidden activations, `hidden_width` values per pair.
    pub hidden: Vec<T>,
    pub hidden_width: usize,
}

impl<T: Real> ScoreNet<T> {
    /// Random ScoreNet with the given hidden widths and `m` outputs.
    pub fn init(d_in: usize, hidden: &[usize], m: usize, norm: NormMode, seed: u64) -> Result<Self> {
        let widths = Self::widths(d_in, hidden, m)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths.windows(2).map(|w| Affine::init(w[0], w[1], &mut rng)).collect();
        Ok(Self { d_in, layers, norm })
    }

    /// All weights and biases zero.
    pub fn zeros(d_in: usize, hidden: &[usize], m: usize, norm: NormMode) -> Result<Self> {
        let widths = Self::widths(d_in, hidden, m)?;
        let layers = widths.windows(2).map(|w| Affine::zeros(w[0], w[1])).collect();
        Ok(Self { d_in, layers, norm })
    }

    pub fn from_layers(layers: Vec<Affine<T>>, norm: NormMode) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::input("ScoreNet needs at least one layer"))?;
        let d_in = first.in_dim;
        for (i, l) in layers.iter().enumerate() {
            if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::input(format!("ScoreNet layer {i} has inconsistent buffers")));
            }
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::size(format!("ScoreNet layer {i} has a zero width")));
            }
            if l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::input(format!("ScoreNet layer {i} has non-finite parameters")));
            }
        }
        if let Some(i) = layers.windows(2).position(|w| w[0].out_dim != w[1].in_dim) {
            return Err(Error::input(format!("ScoreNet layers {i} and {} do not chain", i + 1)));
        }
        Ok(Self { d_in, layers, norm })
    }

    fn widths(d_in: usize, hidden: &[usize], m: usize) -> Result<Vec<usize>> {
        let mut widths = vec![d_in];
        widths.extend_from_slice(hidden);
        widths.push(m);
        if widths.contains(&0) {
            return Err(Error::size(format!("ScoreNet widths must be positive, got {widths:?}")));
        }
        Ok(widths)
    }

    #[inline]
    pub fn d_in(&self) -> usize {
        self.d_in
    }

    /// Output width `M`.
    #[inline]
    pub fn m(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    #[inline]
    pub fn norm(&self) -> NormMode {
        self.norm
    }

    pub fn set_norm(&mut self, norm: NormMode) {
        self.norm = norm;
    }

    pub fn layers(&self) -> &[Affine<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Affine<T>] {
        &mut self.layers
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.out_dim).collect()
    }

    fn hidden_width(&self) -> usize {
        self.hidden_dims().iter().sum()
    }

    /// Logits for a single relation vector, writing hidden activations into `hidden`.
    pub(crate) fn logits_into(&self, x: &[T], hidden: &mut [T], logits: &mut [T]) {
        let mut offset = 0;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            if l == last {
                let input = if l == 0 { x } else { &hidden[offset - layer.in_dim..offset] };
                layer.apply(input, logits);
            } else {
                let (done, rest) = hidden.split_at_mut(offset);
                let input = if l == 0 { x } else { &done[offset - layer.in_dim..] };
                let out = &mut rest[..layer.out_dim];
                layer.apply(input, out);
                for v in out.iter_mut() {
                    *v = v.max(T::zero());
                }
                offset += layer.out_dim;
            }
        }
    }

    /// Scores for a single relation vector.
    pub fn score_pair(&self, x: &[T]) -> Vec<T> {
        let mut hidden = vec![T::zero(); self.hidden_width()];
        let mut logits = vec![T::zero(); self.m()];
        self.logits_into(x, &mut hidden, &mut logits);
        let mut scores = vec![T::zero(); self.m()];
        normalize_row(&logits, &mut scores, self.norm);
        scores
    }

    pub fn forward(&self, rel: &RelationTensor<T>) -> Result<ScoreOutput<T>> {
        self.forward_counted(rel, None)
    }

    pub(crate) fn forward_counted(
        &self,
        rel: &RelationTensor<T>,
        counter: Option<&mut OpCounter>,
    ) -> Result<ScoreOutput<T>> {
        if rel.d_in() != self.d_in {
            return Err(Error::input(format!(
                "relation vectors have width {} but ScoreNet expects {}",
                rel.d_in(),
                self.d_in
            )));
        }
        let (n, k, m) = (rel.n(), rel.k(), self.m());
        let hw = self.hidden_width();
        let mut hidden = vec![T::zero(); n * k * hw];
        let mut logits = vec![T::zero(); n * k * m];
        let mut scores = vec![T::zero(); n * k * m];
        for p in 0..n * k {
            let (i, j) = (p / k, p % k);
            let z = &mut logits[p * m..(p + 1) * m];
            self.logits_into(rel.pair(i, j), &mut hidden[p * hw..(p + 1) * hw], z);
            normalize_row(z, &mut scores[p * m..(p + 1) * m], self.norm);
        }
        if let Some(c) = counter {
            let per_pair: usize = self.layers.iter().map(|l| l.in_dim * l.out_dim).sum();
            let macs = (n * k * per_pair) as u64;
            c.macs += macs;
            c.scorenet_macs += macs;
        }
        Ok(ScoreOutput {
            logits: ScoreTensor { n, k, m, values: logits },
            scores: ScoreTensor { n, k, m, values: scores },
            hidden,
            hidden_width: hw,
        })
    }

    /// Backpropagate per-pair logit gradients into parameter gradients `grad`.
    pub(crate) fn backward_into(
        &self,
        rel: &RelationTensor<T>,
        hidden: &[T],
        d_logits: &[T],
        grad: &mut [Affine<T>],
    ) {
        let (n, k, m) = (rel.n(), rel.k(), self.m());
        let hw = self.hidden_width();
        let widest = self.layers.iter().map(|l| l.in_dim.max(l.out_dim)).max().unwrap_or(0);
        let mut dy = vec![T::zero(); widest];
        let mut dx = vec![T::zero(); widest];
        // offsets of each hidden layer's activations inside a pair's hidden block
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers[..self.layers.len() - 1] {
            offsets.push(acc);
            acc += l.out_dim;
        }
        for p in 0..n * k {
            let h = &hidden[p * hw..(p + 1) * hw];
            let x0 = rel.pair(p / k, p % k);
            dy[..m].copy_from_slice(&d_logits[p * m..(p + 1) * m]);
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let input = if l == 0 { x0 } else { &h[offsets[l - 1]..offsets[l - 1] + layer.in_dim] };
                let need_dx = l > 0;
                layer.backward(
                    input,
                    &dy[..layer.out_dim],
                    &mut grad[l],
                    need_dx.then_some(&mut dx[..layer.in_dim]),
                );
                if need_dx {
                    for ((d, g), &a) in dy.iter_mut().zip(&dx[..layer.in_dim]).zip(input) {
                        *d = if a > T::zero() { *g } else { T::zero() };
                    }
                }
            }
        }
    }

    /// Zero-valued gradient buffers shaped like the layers.
    pub fn zero_grad(&self) -> Vec<Affine<T>> {
        self.layers.iter().map(|l| Affine::zeros(l.in_dim, l.out_dim)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Affine::param_count).sum()
    }

    pub fn cast<U: Real>(&self) -> ScoreNet<U> {
        ScoreNet {
            d_in: self.d_in,
            layers: self.layers.iter().map(Affine::cast).collect(),
            norm: self.norm,
        }
    }
}
