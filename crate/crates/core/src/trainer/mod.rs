//! Synthetic-data training harness for a small PAConv classifier.

pub mod dataset;
pub mod network;
pub mod transform;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regularize::{corr_loss, corr_loss_grad, pearson_r_pairs, DEFAULT_LAMBDA};
use crate::scalar::Real;

pub use dataset::{synth_dataset, Sample, ShapeClass, SynthDataset, NUM_CLASSES};
pub use network::{
    cross_entropy, model_from_json, model_to_json, predict, InputFeatures, ModelDoc, NetworkConfig, NetworkGrads,
    ToyNetwork,
};
pub use transform::{Transform, JITTER_SIGMA};

/// Optimizer settings for [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub lambda_corr: f64,
    pub batch_size: usize,
    /// Seeds the per-epoch sample order.
    pub seed: u64,
    /// Stop after the first epoch whose train accuracy reaches this.
    pub target_acc: Option<f64>,
    /// Run the samples of a batch on the rayon pool. Gradients are still
    /// summed in sample order, so results do not depend on the thread count.
    pub parallel: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.05,
            lambda_corr: DEFAULT_LAMBDA,
            batch_size: 1,
            seed: 0,
            target_acc: None,
            parallel: false,
        }
    }
}

/// One history row. Epoch 0 describes the untrained network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the dataset plus `λ · l_corr`.
    pub loss: f64,
    pub acc: f64,
    /// Correlation penalty summed over every layer's bank.
    pub l_corr: f64,
    /// Mean over layers of the mean |off-diagonal Pearson R| of the bank.
    pub mean_pearson: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub rows: Vec<EpochStats>,
}

impl History {
    pub const CSV_HEADER: [&'static str; 5] = ["epoch", "loss", "acc", "l_corr", "mean_pearson"];

    pub fn last(&self) -> &EpochStats {
        self.rows.last().expect("history always holds the initial row")
    }

    pub fn first(&self) -> &EpochStats {
        &self.rows[0]
    }

    /// Columns `epoch, loss, acc, l_corr, mean_pearson`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.serialize((r.epoch, r.loss, r.acc, r.l_corr, r.mean_pearson))
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }

    /// Fraction of epochs (after the first) whose loss did not increase.
    pub fn non_increasing_fraction(&self) -> f64 {
        let steps = self.rows.windows(2).skip(1).collect::<Vec<_>>();
        if steps.is_empty() {
            return 1.0;
        }
        steps.iter().filter(|w| w[1].loss <= w[0].loss).count() as f64 / steps.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub predictions: Vec<usize>,
}

fn bank_stats<T: Real>(net: &ToyNetwork<T>) -> (f64, f64) {
    let l_corr = net.layers.iter().map(|l| corr_loss(&l.bank).value).sum();
    let mean_pearson = net.layers.iter().map(|l| pearson_r_pairs(&l.bank).mean_abs_r).sum::<f64>()
        / net.layers.len() as f64;
    (l_corr, mean_pearson)
}

/// Accuracy and mean cross-entropy, optionally after perturbing every sample.
/// Neighborhoods are rebuilt on the perturbed coordinates.
pub fn evaluate_detail<T: Real>(
    net: &ToyNetwork<T>,
    data: &SynthDataset,
    transform: Option<Transform>,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::input("cannot evaluate on an empty dataset"));
    }
    let mut predictions = Vec::with_capacity(data.len());
    let (mut correct, mut loss) = (0usize, 0.0);
    for (i, s) in data.samples.iter().enumerate() {
        let cloud = match transform {
            Some(t) => t.for_sample(i).apply(&s.cloud),
            None => s.cloud.clone(),
        };
        let logits = net.logits(&cloud)?;
        let p = predict(&logits);
        correct += usize::from(p == s.label);
        loss += cross_entropy(&logits, s.label).0.as_f64();
        predictions.push(p);
    }
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        mean_loss: loss / data.len() as f64,
        predictions,
    })
}

pub fn evaluate<T: Real>(net: &ToyNetwork<T>, data: &SynthDataset, transform: Option<Transform>) -> Result<f64> {
    Ok(evaluate_detail(net, data, transform)?.accuracy)
}

fn epoch_stats<T: Real>(net: &ToyNetwork<T>, data: &SynthDataset, epoch: usize, lambda: f64) -> Result<EpochStats> {
    let eval = evaluate_detail(net, data, None)?;
    let (l_corr, mean_pearson) = bank_stats(net);
    let loss = eval.mean_loss + lambda * l_corr;
    if !loss.is_finite() {
        return Err(Error::Divergence { epoch, loss });
    }
    Ok(EpochStats {
        epoch,
        loss,
        acc: eval.accuracy,
        l_corr,
        mean_pearson,
    })
}

fn sgd_step<T: Real>(net: &mut ToyNetwork<T>, grads: &NetworkGrads<T>, lr: T, lambda: T) {
    let update = |p: &mut [T], g: &[T]| {
        for (w, &d) in p.iter_mut().zip(g) {
            *w -= lr * d;
        }
    };
    for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
        if lambda != T::zero() {
            let reg = corr_loss_grad(&layer.bank);
            let bank = layer.bank.as_mut_slice();
            for (w, (&d, &r)) in bank.iter_mut().zip(g.d_bank.as_slice().iter().zip(reg.as_slice())) {
                *w -= lr * (d + lambda * r);
            }
        } else {
            update(layer.bank.as_mut_slice(), g.d_bank.as_slice());
        }
        for (a, ga) in layer.scorenet.layers_mut().iter_mut().zip(&g.d_scorenet) {
            update(&mut a.weight, &ga.weight);
            update(&mut a.bias, &ga.bias);
        }
    }
    update(&mut net.head.weight, &grads.head.weight);
    update(&mut net.head.bias, &grads.head.bias);
}

/// Plain SGD on mean cross-entropy plus `λ · Σ_layers L_corr(bank)`.
///
/// History row 0 is measured before the first update; each later row is a
/// full pass over `data` measured after that epoch's updates.
pub fn train<T: Real>(net: &mut ToyNetwork<T>, data: &SynthDataset, opts: &TrainOptions) -> Result<History> {
    if opts.epochs == 0 {
        return Err(Error::input("epochs must be at least 1"));
    }
    if opts.batch_size == 0 {
        return Err(Error::input("batch size must be at least 1"));
    }
    if data.is_empty() {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    let mut rows = vec![epoch_stats(net, data, 0, opts.lambda_corr)?];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let (lr, lambda) = (T::lit(opts.lr), T::lit(opts.lambda_corr));
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch_size) {
            let one = |&i: &usize| {
                let s = &data.samples[i];
                net.loss_and_grad(&s.cloud, s.label)
            };
            let results: Vec<_> = if opts.parallel {
                batch.par_iter().map(one).collect()
            } else {
                batch.iter().map(one).collect()
            };
            let mut total: Option<NetworkGrads<T>> = None;
            for r in results {
                let (loss, g) = r?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        loss: loss.as_f64(),
                    });
                }
                match &mut total {
                    Some(t) => t.add_assign(&g),
                    None => total = Some(g),
                }
            }
            let mut g = total.expect("batches are non-empty");
            if batch.len() > 1 {
                let inv = T::one() / T::lit(batch.len() as f64);
                scale_grads(&mut g, inv);
            }
            sgd_step(net, &g, lr, lambda);
        }
        let stats = epoch_stats(net, data, epoch, opts.lambda_corr)?;
        rows.push(stats);
        if opts.target_acc.is_some_and(|t| stats.acc >= t) {
            break;
        }
    }
    Ok(History { rows })
}

fn scale_grads<T: Real>(g: &mut NetworkGrads<T>, s: T) {
    let scale = |v: &mut [T]| v.iter_mut().for_each(|x| *x *= s);
    for l in &mut g.layers {
        scale(l.d_bank.as_mut_slice());
        for a in &mut l.d_scorenet {
            scale(&mut a.weight);
            scale(&mut a.bias);
        }
    }
    scale(&mut g.head.weight);
    scale(&mut g.head.bias);
}

/// Everything needed to reproduce a training run, as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_per_class: usize,
    pub n_points: usize,
    pub data_seed: u64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub lambda_corr: f64,
    pub batch_size: usize,
    pub target_acc: Option<f64>,
    pub parallel: bool,
    /// Final train accuracy the command-line runner insists on, if any.
    pub require_acc: Option<f64>,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let o = TrainOptions::default();
        Self {
            n_per_class: 10,
            n_points: 64,
            data_seed: 0,
            init_seed: 0,
            shuffle_seed: 0,
            epochs: o.epochs,
            lr: o.lr,
            lambda_corr: o.lambda_corr,
            batch_size: o.batch_size,
            target_acc: o.target_acc,
            parallel: o.parallel,
            require_acc: None,
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Point every seed at `seed`, offset so the streams differ.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data_seed = seed;
        self.init_seed = seed.wrapping_add(1);
        self.shuffle_seed = seed.wrapping_add(2);
        self
    }

    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            lr: self.lr,
            lambda_corr: self.lambda_corr,
            batch_size: self.batch_size,
            seed: self.shuffle_seed,
            target_acc: self.target_acc,
            parallel: self.parallel,
        }
    }

    pub fn dataset(&self) -> Result<SynthDataset> {
        synth_dataset(self.n_per_class, self.n_points, self.data_seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun<T> {
    pub network: ToyNetwork<T>,
    pub dataset: SynthDataset,
    pub history: History,
}

/// Build the dataset and network described by `config` and train.
pub fn run_training<T: Real>(config: &TrainConfig) -> Result<TrainRun<T>> {
    let dataset = config.dataset()?;
    let mut network = ToyNetwork::<T>::init(&config.network, config.init_seed)?;
    let history = train(&mut network, &dataset, &config.options())?;
    Ok(TrainRun {
        network,
        dataset,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub transform: String,
    pub accuracy: f64,
    /// `accuracy − clean accuracy`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub clean_accuracy: f64,
    pub rows: Vec<RobustnessRow>,
}

pub fn robustness<T: Real>(net: &ToyNetwork<T>, data: &SynthDataset, transforms: &[Transform]) -> Result<RobustnessReport> {
    let clean_accuracy = evaluate(net, data, None)?;
    let rows = transforms
        .iter()
        .map(|&t| {
            let accuracy = evaluate(net, data, Some(t))?;
            Ok(RobustnessRow {
                transform: t.to_string(),
                accuracy,
                delta: accuracy - clean_accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RobustnessReport { clean_accuracy, rows })
}
