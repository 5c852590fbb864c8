//! A two-layer PAConv classifier: PAConv → ReLU → PAConv → ReLU → global max
//! pool → affine head.

use serde::{Deserialize, Serialize};

use crate::autograd::{paconv_backward, GradientBundle};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{knn_build, NeighborIndex, PointCloud, RelationMode};
use crate::paconv::serial::LayerDoc;
use crate::paconv::{Affine, AggMode, ExecPath, ForwardCache, LayerConfig, NormMode, PAConvLayer};
use crate::scalar::Real;
use crate::trainer::dataset::NUM_CLASSES;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// What the first layer sees as per-point features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFeatures {
    /// The coordinates as given.
    #[default]
    Raw,
    /// Coordinates minus the cloud centroid; unchanged by translation.
    Centered,
}

impl std::str::FromStr for InputFeatures {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "raw" => Ok(InputFeatures::Raw),
            "centered" => Ok(InputFeatures::Centered),
            _ => Err(format!("unknown input features `{s}` (expected raw|centered)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Output widths of the PAConv stack; the input width is always 3.
    pub channels: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub hidden: Vec<usize>,
    pub norm: NormMode,
    pub relation: RelationMode,
    pub agg: AggMode,
    pub input: InputFeatures,
    pub path: ExecPath,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64],
            m: 16,
            k: 8,
            hidden: vec![16, 16, 16],
            norm: NormMode::Softmax,
            relation: RelationMode::Full7,
            agg: AggMode::Max,
            input: InputFeatures::Raw,
            path: ExecPath::Fused,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetwork<T> {
    pub layers: Vec<PAConvLayer<T>>,
    pub head: Affine<T>,
    pub k: usize,
    pub input: InputFeatures,
    pub path: ExecPath,
}

/// Everything the backward pass needs from one sample's forward.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    caches: Vec<ForwardCache<T>>,
    /// Post-ReLU output of each layer.
    acts: Vec<FeatureMap<T>>,
    pooled: Vec<T>,
    /// Row that won the max pool, per channel.
    pool_arg: Vec<usize>,
    pub logits: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads<T> {
    pub layers: Vec<GradientBundle<T>>,
    pub head: Affine<T>,
}

impl<T: Real> NetworkGrads<T> {
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
        for (x, &y) in self.head.weight.iter_mut().zip(&other.head.weight) {
            *x += y;
        }
        for (x, &y) in self.head.bias.iter_mut().zip(&other.head.bias) {
            *x += y;
        }
    }
}

fn relu_in_place<T: Real>(f: &mut FeatureMap<T>) {
    for v in f.as_mut_slice() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Numerically stable `(loss, softmax)` of cross-entropy against `label`.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |a, &e| a + e);
    let loss = total.ln() - (logits[label] - max);
    (loss, exps.into_iter().map(|e| e / total).collect())
}

/// Index of the largest logit; ties go to the lowest class.
pub fn predict<T: Real>(logits: &[T]) -> usize {
    let mut best = 0;
    for (c, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = c;
        }
    }
    best
}

impl<T: Real> ToyNetwork<T> {
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        if config.channels.is_empty() {
            return Err(Error::input("network needs at least one PAConv layer"));
        }
        if config.k == 0 {
            return Err(Error::size("k must be at least 1"));
        }
        let mut widths = vec![3];
        widths.extend(&config.channels);
        let mut layers = Vec::with_capacity(config.channels.len());
        for (l, w) in widths.windows(2).enumerate() {
            let cfg = LayerConfig {
                c_in: w[0],
                c_out: w[1],
                m: config.m,
                hidden: config.hidden.clone(),
                norm: config.norm,
                agg: config.agg,
                relation: config.relation,
            };
            layers.push(PAConvLayer::init(&cfg, seed.wrapping_add(l as u64 * 0x1000_0001))?);
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 0x4ead);
        let head = Affine::init(*widths.last().unwrap(), NUM_CLASSES, &mut rng);
        Ok(Self {
            layers,
            head,
            k: config.k,
            input: config.input,
            path: config.path,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum::<usize>() + self.head.param_count()
    }

    fn input_features(&self, coords: &[[T; 3]]) -> FeatureMap<T> {
        let n = coords.len();
        let mut data: Vec<T> = coords.iter().flatten().copied().collect();
        if self.input == InputFeatures::Centered {
            let nn = T::lit(n as f64);
            let mut c = [T::zero(); 3];
            for p in coords {
                for d in 0..3 {
                    c[d] += p[d];
                }
            }
            let c = c.map(|s| s / nn);
            for row in data.chunks_exact_mut(3) {
                for d in 0..3 {
                    row[d] -= c[d];
                }
            }
        }
        FeatureMap::from_vec(n, 3, data).expect("three columns per point")
    }

    /// Neighborhoods are built in coordinate space. Every layer works on the
    /// same points, so one index serves the whole stack.
    pub fn neighbors(&self, cloud: &PointCloud<f64>) -> Result<NeighborIndex> {
        knn_build(cloud, self.k, true)
    }

    pub fn forward_trace(&self, cloud: &PointCloud<f64>) -> Result<Trace<T>> {
        let nbrs = self.neighbors(cloud)?;
        let coords: Vec<[T; 3]> = cloud.coords().iter().map(|p| p.map(T::lit)).collect();
        let mut feats = self.input_features(&coords);
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let c = PointCloud::with_features(coords.clone(), feats)?;
            let (mut out, cache) = layer.forward(&c, &nbrs, self.path)?;
            relu_in_place(&mut out);
            caches.push(cache);
            acts.push(out.clone());
            feats = out;
        }
        let last = acts.last().expect("at least one layer");
        let width = last.cols();
        let mut pooled = last.row(0).to_vec();
        let mut pool_arg = vec![0; width];
        for r in 1..last.rows() {
            for (c, &v) in last.row(r).iter().enumerate() {
                if v > pooled[c] {
                    pooled[c] = v;
                    pool_arg[c] = r;
                }
            }
        }
        let mut logits = vec![T::zero(); NUM_CLASSES];
        self.head.apply(&pooled, &mut logits);
        Ok(Trace {
            caches,
            acts,
            pooled,
            pool_arg,
            logits,
        })
    }

    pub fn logits(&self, cloud: &PointCloud<f64>) -> Result<Vec<T>> {
        Ok(self.forward_trace(cloud)?.logits)
    }

    /// Cross-entropy loss of one sample and the gradients of every parameter.
    pub fn loss_and_grad(&self, cloud: &PointCloud<f64>, label: usize) -> Result<(T, NetworkGrads<T>)> {
        let trace = self.forward_trace(cloud)?;
        let (loss, probs) = cross_entropy(&trace.logits, label);
        let mut d_logits = probs;
        d_logits[label] -= T::one();

        let mut head = Affine::zeros(self.head.in_dim, self.head.out_dim);
        let mut d_pooled = vec![T::zero(); trace.pooled.len()];
        self.head.backward(&trace.pooled, &d_logits, &mut head, Some(&mut d_pooled));

        let last = trace.acts.last().unwrap();
        let mut d_act = FeatureMap::zeros(last.rows(), last.cols());
        for (c, (&r, &g)) in trace.pool_arg.iter().zip(&d_pooled).enumerate() {
            d_act.row_mut(r)[c] = g;
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            for (d, &a) in d_act.as_mut_slice().iter_mut().zip(trace.acts[l].as_slice()) {
                if a <= T::zero() {
                    *d = T::zero();
                }
            }
            let g = paconv_backward(&self.layers[l], &trace.caches[l], &d_act)?;
            d_act = g.d_features.clone();
            layers.push(g);
        }
        layers.reverse();
        Ok((loss, NetworkGrads { layers, head }))
    }

    pub fn cast<U: Real>(&self) -> ToyNetwork<U> {
        ToyNetwork {
            layers: self.layers.iter().map(PAConvLayer::cast).collect(),
            head: self.head.cast(),
            k: self.k,
            input: self.input,
            path: self.path,
        }
    }
}

/// Serialized model: `format_version`, neighborhood size, input features,
/// execution path, the PAConv layers in layer-file form, and the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDoc {
    pub format_version: u32,
    pub k: usize,
    pub input: InputFeatures,
    pub path: ExecPath,
    pub layers: Vec<LayerDoc>,
    pub head: Affine<f64>,
}

impl ModelDoc {
    pub fn from_network<T: Real>(net: &ToyNetwork<T>) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            k: net.k,
            input: net.input,
            path: net.path,
            layers: net.layers.iter().map(LayerDoc::from_layer).collect(),
            head: net.head.cast(),
        }
    }

    pub fn to_network<T: Real>(&self) -> Result<ToyNetwork<T>> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::input(format!(
                "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let layers = self.layers.iter().map(LayerDoc::to_layer).collect::<Result<Vec<_>>>()?;
        if layers.is_empty() || layers[0].c_in() != 3 {
            return Err(Error::input("first layer must take 3 input channels"));
        }
        if let Some(w) = layers.windows(2).find(|w| w[0].c_out() != w[1].c_in()) {
            return Err(Error::input(format!(
                "layer widths do not chain: {} then {}",
                w[0].c_out(),
                w[1].c_in()
            )));
        }
        let head: Affine<T> = self.head.cast();
        if head.in_dim != layers.last().unwrap().c_out() || head.out_dim != NUM_CLASSES {
            return Err(Error::input("classifier head does not match the last layer"));
        }
        if head.weight.len() != head.in_dim * head.out_dim || head.bias.len() != head.out_dim {
            return Err(Error::input("classifier head arrays have the wrong length"));
        }
        if self.k == 0 {
            return Err(Error::size("k must be at least 1"));
        }
        Ok(ToyNetwork {
            layers,
            head,
            k: self.k,
            input: self.input,
            path: self.path,
        })
    }
}

pub fn model_to_json<T: Real>(net: &ToyNetwork<T>) -> String {
    serde_json::to_string_pretty(&ModelDoc::from_network(net)).expect("model documents always serialize")
}

pub fn model_from_json<T: Real>(text: &str) -> Result<ToyNetwork<T>> {
    let doc: ModelDoc = serde_json::from_str(text).map_err(|e| Error::from_json(e, text))?;
    doc.to_network()
}
