use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::cost::OpCounter;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{relation_features, NeighborIndex, PointCloud, RelationMode, RelationTensor};
use crate::paconv::bank::WeightBank;
use crate::paconv::scorenet::{NormMode, ScoreNet, ScoreOutput, ScoreTensor};
use crate::scalar::Real;

/// Symmetric reduction over a neighborhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AggMode {
    #[default]
    Max,
    Sum,
    Avg,
}

impl AggMode {
    pub const ALL: [AggMode; 3] = [AggMode::Max, AggMode::Sum, AggMode::Avg];

    pub fn name(self) -> &'static str {
        match self {
            AggMode::Max => "max",
            AggMode::Sum => "sum",
            AggMode::Avg => "avg",
        }
    }
}

impl std::str::FromStr for AggMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(AggMode::Max),
            "sum" => Ok(AggMode::Sum),
            "avg" | "mean" => Ok(AggMode::Avg),
            _ => Err(format!("unknown aggregation `{s}` (expected max|sum|avg)")),
        }
    }
}

/// Which of the two equivalent forward implementations to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecPath {
    /// Materialize every per-pair kernel `K_ij`, then transform.
    Naive,
    /// Transform every point by every bank matrix once, then gather and mix by score.
    Fused,
}

impl ExecPath {
    pub const ALL: [ExecPath; 2] = [ExecPath::Naive, ExecPath::Fused];

    pub fn name(self) -> &'static str {
        match self {
            ExecPath::Naive => "naive",
            ExecPath::Fused => "fused",
        }
    }
}

impl std::str::FromStr for ExecPath {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ExecPath::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown execution path `{s}` (expected naive|fused)"))
    }
}

/// Reduce `k` rows of width `c_out` (row-major in `values`).
///
/// For `Max` the second element holds, per channel, the lowest slot attaining the maximum.
pub fn aggregate<T: Real>(values: &[T], c_out: usize, mode: AggMode) -> Result<(Vec<T>, Option<Vec<usize>>)> {
    if c_out == 0 || values.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    if values.len() % c_out != 0 {
        return Err(Error::input(format!("{} values do not form rows of width {c_out}", values.len())));
    }
    let k = values.len() / c_out;
    let mut out = values[..c_out].to_vec();
    match mode {
        AggMode::Max => {
            let mut arg = vec![0usize; c_out];
            for (j, row) in values.chunks_exact(c_out).enumerate().skip(1) {
                for c in 0..c_out {
                    if row[c] > out[c] {
                        out[c] = row[c];
                        arg[c] = j;
                    }
                }
            }
            Ok((out, Some(arg)))
        }
        AggMode::Sum | AggMode::Avg => {
            for row in values.chunks_exact(c_out).skip(1) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            if mode == AggMode::Avg {
                let kk = T::lit(k as f64);
                for o in &mut out {
                    *o = o.real_div(kk);
                }
            }
            Ok((out, None))
        }
    }
}

/// A position-adaptive convolution layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PAConvLayer<T> {
    pub bank: WeightBank<T>,
    pub scorenet: ScoreNet<T>,
    pub agg: AggMode,
    pub relation: RelationMode,
}

/// Layer hyperparameters used to build a randomly initialized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub m: usize,
    pub hidden: Vec<usize>,
    pub norm: NormMode,
    pub agg: AggMode,
    pub relation: RelationMode,
}

impl LayerConfig {
    pub fn new(c_in: usize, c_out: usize) -> Self {
        Self {
            c_in,
            c_out,
            m: 16,
            hidden: vec![16, 16, 16],
            norm: NormMode::Softmax,
            agg: AggMode::Max,
            relation: RelationMode::Full7,
        }
    }
}

/// Everything backward needs from a forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub path: ExecPath,
    pub(crate) fingerprint: u64,
    pub nbrs: NeighborIndex,
    pub features: FeatureMap<T>,
    pub relation: RelationTensor<T>,
    pub hidden: Vec<T>,
    pub logits: ScoreTensor<T>,
    pub scores: ScoreTensor<T>,
    /// `N × C_out` winning slots for `Max` aggregation.
    pub argmax: Option<Vec<usize>>,
    /// Naive path: `N × k × C_in × C_out` assembled kernels.
    pub kernels: Option<Vec<T>>,
    /// Fused path: `N × M × C_out` transformed features `f_pᵀ B_m`.
    pub transformed: Option<Vec<T>>,
}

impl<T: Real> ForwardCache<T> {
    /// Hash of every discrete branch taken: argmax slots, rectifier masks and
    /// clamp masks. Two forwards with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self, norm: NormMode) -> u64 {
        let mut h = DefaultHasher::new();
        self.argmax.hash(&mut h);
        for chunk in self.hidden.chunks(64) {
            let mut bits = 0u64;
            for (b, v) in chunk.iter().enumerate() {
                if *v > T::zero() {
                    bits |= 1 << b;
                }
            }
            bits.hash(&mut h);
        }
        if norm == NormMode::TanhClamped {
            for z in &self.logits.values {
                (*z > T::zero()).hash(&mut h);
            }
        }
        h.finish()
    }
}

impl<T: Real> PAConvLayer<T> {
    pub fn new(bank: WeightBank<T>, scorenet: ScoreNet<T>, agg: AggMode, relation: RelationMode) -> Result<Self> {
        if scorenet.m() != bank.m() {
            return Err(Error::input(format!(
                "ScoreNet produces {} scores but the bank holds {} matrices",
                scorenet.m(),
                bank.m()
            )));
        }
        if scorenet.d_in() != relation.d_in() {
            return Err(Error::input(format!(
                "ScoreNet consumes {} inputs but relation mode {} has width {}",
                scorenet.d_in(),
                relation.name(),
                relation.d_in()
            )));
        }
        Ok(Self {
            bank,
            scorenet,
            agg,
            relation,
        })
    }

    pub fn init(config: &LayerConfig, seed: u64) -> Result<Self> {
        let bank = WeightBank::init(config.m, config.c_in, config.c_out, seed)?;
        let scorenet = ScoreNet::init(
            config.relation.d_in(),
            &config.hidden,
            config.m,
            config.norm,
            seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1),
        )?;
        Self::new(bank, scorenet, config.agg, config.relation)
    }

    #[inline]
    pub fn c_in(&self) -> usize {
        self.bank.c_in()
    }

    #[inline]
    pub fn c_out(&self) -> usize {
        self.bank.c_out()
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.bank.m()
    }

    pub fn param_count(&self) -> usize {
        self.bank.as_slice().len() + self.scorenet.param_count()
    }

    /// Hash of all parameters and modes; ties a cache to the layer that produced it.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        (self.agg, self.relation, self.scorenet.norm()).hash(&mut h);
        (self.m(), self.c_in(), self.c_out()).hash(&mut h);
        for v in self.bank.as_slice() {
            v.as_f64().to_bits().hash(&mut h);
        }
        for l in self.scorenet.layers() {
            (l.in_dim, l.out_dim).hash(&mut h);
            for v in l.weight.iter().chain(&l.bias) {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn forward(
        &self,
        cloud: &PointCloud<T>,
        nbrs: &NeighborIndex,
        path: ExecPath,
    ) -> Result<(FeatureMap<T>, ForwardCache<T>)> {
        self.forward_impl(cloud, nbrs, path, None, false)
    }

    /// Forward that materializes one kernel per (center, neighbor) pair.
    pub fn forward_naive(&self, cloud: &PointCloud<T>, nbrs: &NeighborIndex) -> Result<(FeatureMap<T>, ForwardCache<T>)> {
        self.forward_impl(cloud, nbrs, ExecPath::Naive, None, false)
    }

    /// Forward that transforms features by each bank matrix first and never
    /// builds a per-pair kernel.
    pub fn forward_fused(&self, cloud: &PointCloud<T>, nbrs: &NeighborIndex) -> Result<(FeatureMap<T>, ForwardCache<T>)> {
        self.forward_impl(cloud, nbrs, ExecPath::Fused, None, false)
    }

    /// Forward that also records multiply-adds and intermediate allocations.
    pub fn forward_counted(
        &self,
        cloud: &PointCloud<T>,
        nbrs: &NeighborIndex,
        path: ExecPath,
        counter: &mut OpCounter,
    ) -> Result<(FeatureMap<T>, ForwardCache<T>)> {
        self.forward_impl(cloud, nbrs, path, Some(counter), false)
    }

    /// Fused forward with one transformed intermediate deliberately corrupted.
    /// Exists so equivalence checks can prove they catch a broken fused path.
    #[doc(hidden)]
    pub fn forward_fused_faulty(
        &self,
        cloud: &PointCloud<T>,
        nbrs: &NeighborIndex,
    ) -> Result<(FeatureMap<T>, ForwardCache<T>)> {
        self.forward_impl(cloud, nbrs, ExecPath::Fused, None, true)
    }

    fn forward_impl(
        &self,
        cloud: &PointCloud<T>,
        nbrs: &NeighborIndex,
        path: ExecPath,
        mut counter: Option<&mut OpCounter>,
        inject_fault: bool,
    ) -> Result<(FeatureMap<T>, ForwardCache<T>)> {
        let features = cloud
            .features()
            .ok_or_else(|| Error::input("PAConv forward needs per-point features"))?;
        if features.cols() != self.c_in() {
            return Err(Error::input(format!(
                "features have {} channels but the layer expects {}",
                features.cols(),
                self.c_in()
            )));
        }
        if nbrs.k() == 0 {
            return Err(Error::EmptyNeighborhood);
        }
        let relation = relation_features(cloud, nbrs, self.relation)?;
        let ScoreOutput {
            logits,
            scores,
            hidden,
            ..
        } = self.scorenet.forward_counted(&relation, counter.as_deref_mut())?;

        let (n, k) = (nbrs.n(), nbrs.k());
        let (ci, co, m) = (self.c_in(), self.c_out(), self.m());
        let mut out = FeatureMap::zeros(n, co);
        let mut argmax = (self.agg == AggMode::Max).then(|| vec![0usize; n * co]);
        let mut kernels = None;
        let mut transformed = None;

        match path {
            ExecPath::Naive => {
                let klen = ci * co;
                let mut kbuf = vec![T::zero(); n * k * klen];
                let mut values = vec![T::zero(); n * k * co];
                if let Some(c) = counter.as_deref_mut() {
                    c.alloc(kbuf.len());
                    c.alloc(values.len());
                }
                for i in 0..n {
                    for (slot, &j) in nbrs.row(i).iter().enumerate() {
                        let p = i * k + slot;
                        let kern = &mut kbuf[p * klen..(p + 1) * klen];
                        self.bank.assemble_into(scores.pair(i, slot), kern, counter.as_deref_mut());
                        let v = &mut values[p * co..(p + 1) * co];
                        for (&fa, krow) in features.row(j).iter().zip(kern.chunks_exact(co)) {
                            for (vb, &kab) in v.iter_mut().zip(krow) {
                                *vb += fa * kab;
                            }
                        }
                        if let Some(c) = counter.as_deref_mut() {
                            c.macs += klen as u64;
                        }
                    }
                    let (g, arg) = aggregate(&values[i * k * co..(i + 1) * k * co], co, self.agg)?;
                    out.row_mut(i).copy_from_slice(&g);
                    if let (Some(all), Some(arg)) = (argmax.as_mut(), arg) {
                        all[i * co..(i + 1) * co].copy_from_slice(&arg);
                    }
                }
                kernels = Some(kbuf);
            }
            ExecPath::Fused => {
                let mut tbuf = vec![T::zero(); n * m * co];
                let mut v = vec![T::zero(); co];
                if let Some(c) = counter.as_deref_mut() {
                    c.alloc(tbuf.len());
                    c.alloc(v.len());
                }
                for p in 0..n {
                    let f = features.row(p);
                    for mm in 0..m {
                        let t = &mut tbuf[(p * m + mm) * co..(p * m + mm + 1) * co];
                        for (&fa, brow) in f.iter().zip(self.bank.matrix(mm).chunks_exact(co)) {
                            for (tb, &bab) in t.iter_mut().zip(brow) {
                                *tb += fa * bab;
                            }
                        }
                    }
                }
                if let Some(c) = counter.as_deref_mut() {
                    c.macs += (n * m * ci * co) as u64;
                }
                if inject_fault && !tbuf.is_empty() {
                    tbuf[0] += T::lit(1e-3);
                }
                for i in 0..n {
                    let g = out.row_mut(i);
                    for (slot, &j) in nbrs.row(i).iter().enumerate() {
                        v.fill(T::zero());
                        for (mm, &s) in scores.pair(i, slot).iter().enumerate() {
                            let t = &tbuf[(j * m + mm) * co..(j * m + mm + 1) * co];
                            for (vb, &tb) in v.iter_mut().zip(t) {
                                *vb += s * tb;
                            }
                        }
                        match self.agg {
                            AggMode::Max => {
                                let arg = &mut argmax.as_mut().unwrap()[i * co..(i + 1) * co];
                                for c in 0..co {
                                    if slot == 0 || v[c] > g[c] {
                                        g[c] = v[c];
                                        arg[c] = slot;
                                    }
                                }
                            }
                            AggMode::Sum | AggMode::Avg => {
                                for (gc, &vc) in g.iter_mut().zip(&v) {
                                    *gc += vc;
                                }
                            }
                        }
                    }
                    if self.agg == AggMode::Avg {
                        let kk = T::lit(k as f64);
                        for gc in g.iter_mut() {
                            *gc = gc.real_div(kk);
                        }
                    }
                }
                if let Some(c) = counter.as_deref_mut() {
                    c.macs += (n * k * m * co) as u64;
                }
                transformed = Some(tbuf);
            }
        }

        let cache = ForwardCache {
            path,
            fingerprint: self.fingerprint(),
            nbrs: nbrs.clone(),
            features: features.clone(),
            relation,
            hidden,
            logits,
            scores,
            argmax,
            kernels,
            transformed,
        };
        Ok((out, cache))
    }

    pub fn cast<U: Real>(&self) -> PAConvLayer<U> {
        PAConvLayer {
            bank: self.bank.cast(),
            scorenet: self.scorenet.cast(),
            agg: self.agg,
            relation: self.relation,
        }
    }
}
