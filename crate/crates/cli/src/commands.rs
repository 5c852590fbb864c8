use std::path::{Path, PathBuf};

use paconv::autograd::finite_diff_check;
use paconv::cost::{CostDims, CostModel, OpCounter};
use paconv::equivalence::{random_instance, run_equivalence, InstanceShape};
use paconv::geometry::RelationMode;
use paconv::paconv::serial::{layer_from_binary, layer_from_json};
use paconv::paconv::{AggMode, ExecPath, NormMode, PAConvLayer};
use paconv::regularize::corr_study;
use paconv::scorefield::{score_field, FieldSpec, ScoreFieldGrid};
use paconv::trainer::{
    evaluate_detail, model_from_json, model_to_json, robustness, run_training, InputFeatures, ToyNetwork, Transform,
};
use paconv::{Precision, Real};
use serde::Serialize;
use serde_json::json;

use crate::config::{self, FileConfig};
use crate::{Cli, CliError, Command};

type CliResult<T> = Result<T, CliError>;

/// Settings shared by every subcommand after merging file and flags.
struct Env {
    seed: Option<u64>,
    precision: Precision,
    out: PathBuf,
}

impl Env {
    fn write(&self, name: &str, contents: &str) -> CliResult<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        let path = self.out.join(name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    fn write_json<S: Serialize>(&self, name: &str, value: &S) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
        text.push('\n');
        self.write(name, &text)
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn positive(name: &str, v: usize) -> CliResult<usize> {
    if v == 0 {
        return Err(CliError::Usage(format!("{name} must be at least 1")));
    }
    Ok(v)
}

pub fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(p) => config::load(p)?,
        None => FileConfig::default(),
    };
    let threads = cli.threads.or(file.threads).unwrap_or(1);
    positive("--threads", threads)?;
    // a second call in the same process (tests) keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    let env = Env {
        seed: cli.seed.or(file.seed),
        precision: cli.precision.or(file.precision).unwrap_or(Precision::Double),
        out: cli.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from("out")),
    };
    match cli.command {
        Command::Equivalence(a) => equivalence(&env, file, a),
        Command::Flops(a) => flops(&env, file, a),
        Command::Scorefield(a) => scorefield(&env, file, a),
        Command::Gradcheck(a) => gradcheck(&env, file, a),
        Command::Train(a) => train(&env, file, a),
        Command::Evaluate(a) => evaluate(&env, file, a),
        Command::Robustness(a) => robust(&env, file, a),
        Command::CorrStudy(a) => corr(&env, file, a),
    }
}

fn equivalence(env: &Env, file: FileConfig, a: crate::EquivalenceArgs) -> CliResult<()> {
    let mut cfg = file.equivalence;
    cfg.instances = a.instances.unwrap_or(cfg.instances);
    cfg.seed = env.seed.unwrap_or(cfg.seed);
    cfg.tol_single = a.tol_single.unwrap_or(cfg.tol_single);
    cfg.tol_double = a.tol_double.unwrap_or(cfg.tol_double);
    cfg.tol_backward = a.tol_backward.unwrap_or(cfg.tol_backward);
    cfg.inject_fault |= a.inject_fault;
    if cfg.instances == 0 {
        return Err(CliError::Usage("--instances must be at least 1".into()));
    }
    let report = run_equivalence(&cfg)?;
    let path = env.write_json("equivalence.json", &report)?;
    println!(
        "{} instances: max forward diff {:.3e} (single) {:.3e} (double), max backward diff {:.3e} -> {}",
        cfg.instances,
        report.max_forward_diff_single,
        report.max_forward_diff_double,
        report.max_backward_diff_double,
        path.display()
    );
    if !report.passed {
        return Err(CliError::Check(format!(
            "instances over tolerance, seeds {:?}",
            report.failing_seeds
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct FlopsRow {
    m: usize,
    naive_flops: u64,
    fused_flops: u64,
    naive_peak_elements: u64,
    fused_peak_elements: u64,
}

#[derive(Serialize)]
struct Verified {
    path: ExecPath,
    counted_flops: u64,
    counted_scorenet_flops: u64,
    counted_elements: u64,
    matches: bool,
}

fn flops(env: &Env, file: FileConfig, a: crate::FlopsArgs) -> CliResult<()> {
    let s = file.flops;
    let relation = a.relation.unwrap_or(s.relation);
    let dims = CostDims {
        n: positive("--n", a.n.unwrap_or(s.n))?,
        k: positive("--k", a.k.unwrap_or(s.k))?,
        m: positive("--m", a.m.unwrap_or(s.m))?,
        c_in: positive("--c-in", a.c_in.unwrap_or(s.c_in))?,
        c_out: positive("--c-out", a.c_out.unwrap_or(s.c_out))?,
        d_in: relation.d_in(),
        scorenet_hidden: a.hidden.unwrap_or(s.hidden),
    };
    if dims.k > dims.n {
        return Err(CliError::Usage(format!("k = {} exceeds n = {}", dims.k, dims.n)));
    }
    let (naive, fused) = dims.cost_pair();
    let mut sweep = Vec::new();
    let mut csv = String::from("m,naive_flops,fused_flops,naive_peak_elements,fused_peak_elements\n");
    for &m in &a.m_sweep.unwrap_or(s.m_sweep) {
        let d = CostDims {
            m: positive("m sweep entry", m)?,
            ..dims.clone()
        };
        let (n, f) = d.cost_pair();
        csv.push_str(&format!("{m},{},{},{},{}\n", n.flops, f.flops, n.peak_elements, f.peak_elements));
        sweep.push(FlopsRow {
            m,
            naive_flops: n.flops,
            fused_flops: f.flops,
            naive_peak_elements: n.peak_elements,
            fused_peak_elements: f.peak_elements,
        });
    }

    let verified = if a.verify || s.verify {
        Some(verify_counts(&dims, relation, env.seed.unwrap_or(0), [&naive, &fused])?)
    } else {
        None
    };
    env.write("flops.csv", &csv)?;
    let path = env.write_json(
        "flops.json",
        &json!({ "dims": dims, "naive": naive, "fused": fused, "m_sweep": sweep, "verified": verified }),
    )?;
    println!(
        "naive: {} MACs, {} peak elements; fused: {} MACs, {} peak elements -> {}",
        naive.flops,
        naive.peak_elements,
        fused.flops,
        fused.peak_elements,
        path.display()
    );
    if let Some(v) = verified {
        if let Some(bad) = v.iter().find(|v| !v.matches) {
            return Err(CliError::Check(format!(
                "{} path counted {} MACs / {} elements, closed form disagrees",
                bad.path.name(),
                bad.counted_flops,
                bad.counted_elements
            )));
        }
        println!("instrumented forwards match the closed forms");
    }
    Ok(())
}

fn verify_counts(dims: &CostDims, relation: RelationMode, seed: u64, models: [&CostModel; 2]) -> CliResult<Vec<Verified>> {
    let shape = InstanceShape {
        n: dims.n,
        k: dims.k,
        c_in: dims.c_in,
        c_out: dims.c_out,
        m: dims.m,
    };
    let inst = random_instance(seed, shape, AggMode::Max, NormMode::Softmax, relation, &dims.scorenet_hidden)?;
    models
        .into_iter()
        .map(|model| {
            let mut counter = OpCounter::default();
            inst.layer.forward_counted(&inst.cloud, &inst.nbrs, model.path, &mut counter)?;
            Ok(Verified {
                path: model.path,
                counted_flops: counter.macs,
                counted_scorenet_flops: counter.scorenet_macs,
                counted_elements: counter.elements,
                matches: counter.macs == model.flops
                    && counter.scorenet_macs == model.scorenet_flops
                    && counter.elements == model.peak_elements,
            })
        })
        .collect()
}

/// A layer file (JSON or binary) or a model JSON, from which layer `index` is taken.
fn load_layer<T: Real>(path: &Path, index: usize) -> CliResult<PAConvLayer<T>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    if bytes.starts_with(b"PACV") {
        return Ok(layer_from_binary(&bytes)?);
    }
    let text = String::from_utf8(bytes).map_err(|e| {
        CliError::Core(paconv::Error::Parse {
            offset: e.utf8_error().valid_up_to(),
            message: "file is neither UTF-8 JSON nor a binary layer".into(),
        })
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| paconv::Error::from_json(e, &text))?;
    if value.get("head").is_some() {
        let net: ToyNetwork<T> = model_from_json(&text)?;
        let count = net.layers.len();
        return net
            .layers
            .into_iter()
            .nth(index)
            .ok_or_else(|| CliError::Usage(format!("model has {count} layers, --layer {index} is out of range")));
    }
    Ok(layer_from_json(&text)?)
}

#[derive(Serialize)]
struct FieldSummary {
    plane: String,
    csv: PathBuf,
    m: usize,
    norm: NormMode,
    min_row_sum: f64,
    max_row_sum: f64,
    max_gap: f64,
    max_gap_pair: (usize, usize),
}

fn summarize(grid: &ScoreFieldGrid, csv: PathBuf) -> FieldSummary {
    let sums: Vec<f64> = (0..grid.cells()).map(|c| grid.cell(c).iter().sum()).collect();
    let (i, j, gap) = grid.max_surface_gap();
    FieldSummary {
        plane: grid.spec.plane.name().to_string(),
        csv,
        m: grid.m,
        norm: grid.norm,
        min_row_sum: sums.iter().copied().fold(f64::INFINITY, f64::min),
        max_row_sum: sums.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        max_gap: gap,
        max_gap_pair: (i, j),
    }
}

fn scorefield(env: &Env, file: FileConfig, a: crate::ScorefieldArgs) -> CliResult<()> {
    let s = file.scorefield;
    let params = a
        .params
        .or(s.params)
        .ok_or_else(|| CliError::Usage("scorefield needs --params".into()))?;
    let index = a.layer.unwrap_or(s.layer);
    let center = match a.center {
        Some(c) => <[f64; 3]>::try_from(c).map_err(|_| CliError::Usage("--center takes x,y,z".into()))?,
        None => s.center,
    };
    let planes = a.plane.unwrap_or(s.planes);
    let resolution = a.resolution.unwrap_or(s.resolution);
    if resolution < 2 {
        return Err(CliError::Usage(format!("--resolution must be at least 2, got {resolution}")));
    }
    let extent = a.extent.unwrap_or(s.extent);

    let grids = match env.precision {
        Precision::Single => fields::<f32>(&params, index, &planes, resolution, extent, center)?,
        Precision::Double => fields::<f64>(&params, index, &planes, resolution, extent, center)?,
    };
    let mut summaries = Vec::new();
    for g in &grids {
        let csv = env.write(&format!("scorefield_{}.csv", g.spec.plane.name()), &g.to_csv())?;
        summaries.push(summarize(g, csv));
    }
    let path = env.write_json("scorefield.json", &summaries)?;
    for f in &summaries {
        println!(
            "{}: M = {}, row sums in [{:.9}, {:.9}], largest surface gap {:.4} (matrices {} and {})",
            f.plane, f.m, f.min_row_sum, f.max_row_sum, f.max_gap, f.max_gap_pair.0, f.max_gap_pair.1
        );
    }
    println!("summary -> {}", path.display());

    if let Some(bad) = summaries
        .iter()
        .find(|f| f.norm == NormMode::Softmax && (f.min_row_sum < 1.0 - 1e-6 || f.max_row_sum > 1.0 + 1e-6))
    {
        return Err(CliError::Check(format!("{} plane: softmax rows do not sum to 1", bad.plane)));
    }
    if let Some(req) = a.require_gap {
        let best = summaries.iter().map(|f| f.max_gap).fold(0.0, f64::max);
        if best <= req {
            return Err(CliError::Check(format!("largest surface gap {best:.4} is not above {req}")));
        }
    }
    Ok(())
}

fn fields<T: Real>(
    params: &Path,
    index: usize,
    planes: &[paconv::scorefield::Plane],
    resolution: usize,
    extent: f64,
    center: [f64; 3],
) -> CliResult<Vec<ScoreFieldGrid>> {
    let layer: PAConvLayer<T> = load_layer(params, index)?;
    planes
        .iter()
        .map(|&plane| {
            let spec = FieldSpec {
                plane,
                resolution,
                extent,
                center,
            };
            Ok(score_field(&layer.scorenet, layer.relation, &spec)?)
        })
        .collect()
}

#[derive(Serialize)]
struct GradCase {
    agg: AggMode,
    norm: NormMode,
    seed: u64,
    report: paconv::autograd::GradCheckReport,
}

fn gradcheck(env: &Env, file: FileConfig, a: crate::GradcheckArgs) -> CliResult<()> {
    let s = file.gradcheck;
    let n = positive("--n", a.n.unwrap_or(s.n))?;
    let shape = InstanceShape {
        n,
        k: positive("--k", a.k.unwrap_or(s.k))?,
        c_in: positive("--c-in", a.c_in.unwrap_or(s.c_in))?,
        c_out: positive("--c-out", a.c_out.unwrap_or(s.c_out))?,
        m: positive("--m", a.m.unwrap_or(s.m))?,
    };
    let (aggs, norms, paths) = (a.agg.unwrap_or(s.aggs), a.norm.unwrap_or(s.norms), a.path.unwrap_or(s.paths));
    let (loss, eps, tol) = (a.loss.unwrap_or(s.loss), a.eps.unwrap_or(s.eps), a.tol.unwrap_or(s.tol));
    let seed = env.seed.unwrap_or(s.seed);

    let mut cases = Vec::new();
    for (ai, &agg) in aggs.iter().enumerate() {
        for (ni, &norm) in norms.iter().enumerate() {
            let case_seed = seed.wrapping_add((ai * norms.len() + ni) as u64);
            let inst = random_instance(case_seed, shape, agg, norm, s.relation, &s.hidden)?;
            for &path in &paths {
                let report = match env.precision {
                    Precision::Double => finite_diff_check(&inst.layer, &inst.cloud, &inst.nbrs, loss, eps, path)?,
                    Precision::Single => {
                        let single = inst.cast::<f32>();
                        finite_diff_check(&single.layer, &single.cloud, &single.nbrs, loss, eps, path)?
                    }
                };
                println!(
                    "{:>3} {:<12} {:<5} max rel err {:.3e} ({} skipped)",
                    agg.name(),
                    norm.name(),
                    path.name(),
                    report.max_rel_err,
                    report.skipped()
                );
                cases.push(GradCase {
                    agg,
                    norm,
                    seed: case_seed,
                    report,
                });
            }
        }
    }
    let max_rel_err = cases.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
    let passed = max_rel_err < tol;
    let path = env.write_json(
        "gradcheck.json",
        &json!({
            "precision": env.precision, "shape": shape, "loss": loss, "eps": eps, "tol": tol,
            "max_rel_err": max_rel_err, "passed": passed, "cases": cases,
        }),
    )?;
    println!("max rel err {max_rel_err:.3e} (tolerance {tol:e}) -> {}", path.display());
    if !passed {
        return Err(CliError::Check(format!("max relative error {max_rel_err:.3e} >= {tol:e}")));
    }
    Ok(())
}

fn train_config(env: &Env, file: &FileConfig) -> paconv::trainer::TrainConfig {
    let cfg = file.train.clone();
    match env.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    }
}

fn train(env: &Env, file: FileConfig, a: crate::TrainArgs) -> CliResult<()> {
    let mut cfg = train_config(env, &file);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.lambda_corr = a.lambda.unwrap_or(cfg.lambda_corr);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.n_per_class = a.n_per_class.unwrap_or(cfg.n_per_class);
    cfg.n_points = a.n_points.unwrap_or(cfg.n_points);
    cfg.target_acc = a.target_acc.or(cfg.target_acc);
    cfg.require_acc = a.require_acc.or(cfg.require_acc);
    cfg.parallel |= a.parallel;
    match env.precision {
        Precision::Single => train_as::<f32>(env, &cfg),
        Precision::Double => train_as::<f64>(env, &cfg),
    }
}

fn train_as<T: Real>(env: &Env, cfg: &paconv::trainer::TrainConfig) -> CliResult<()> {
    let run = run_training::<T>(cfg)?;
    let h = &run.history;
    env.write("history.csv", &h.to_csv())?;
    let model = env.write("model.json", &(model_to_json(&run.network) + "\n"))?;
    let last = *h.last();
    let path = env.write_json(
        "train.json",
        &json!({
            "config": cfg, "precision": env.precision, "epochs_run": last.epoch,
            "final": last, "non_increasing_fraction": h.non_increasing_fraction(),
            "model": model,
        }),
    )?;
    println!(
        "epoch {}: loss {:.4}, train accuracy {:.3}, mean |R| {:.4}; loss non-increasing in {:.0}% of epochs -> {}",
        last.epoch,
        last.loss,
        last.acc,
        last.mean_pearson,
        100.0 * h.non_increasing_fraction(),
        path.display()
    );
    if let Some(req) = cfg.require_acc {
        if last.acc < req {
            return Err(CliError::Check(format!("final train accuracy {:.3} < {req}", last.acc)));
        }
    }
    Ok(())
}

fn evaluate(env: &Env, file: FileConfig, a: crate::EvaluateArgs) -> CliResult<()> {
    let transform = a
        .transform
        .map(|t| t.parse::<Transform>().map_err(CliError::Usage))
        .transpose()?;
    let net: ToyNetwork<f64> = model_from_json(&read_text(&a.model)?)?;
    let data = train_config(env, &file).dataset()?;
    let report = match env.precision {
        Precision::Single => evaluate_detail(&net.cast::<f32>(), &data, transform)?,
        Precision::Double => evaluate_detail(&net, &data, transform)?,
    };
    let path = env.write_json(
        "evaluate.json",
        &json!({ "transform": transform.map(|t| t.to_string()), "report": report }),
    )?;
    println!(
        "accuracy {:.3}, mean loss {:.4} -> {}",
        report.accuracy,
        report.mean_loss,
        path.display()
    );
    Ok(())
}

fn robust(env: &Env, file: FileConfig, a: crate::RobustnessArgs) -> CliResult<()> {
    let s = &file.robustness;
    let seed = env.seed.unwrap_or(s.seed);
    let specs = a.transform.unwrap_or_else(|| s.transforms.clone());
    let transforms = if specs.is_empty() {
        Transform::suite(seed)
    } else {
        specs
            .iter()
            .map(|t| t.parse::<Transform>().map(|t| t.with_seed(seed)).map_err(CliError::Usage))
            .collect::<CliResult<Vec<_>>>()?
    };
    let tolerance = a.jitter_tolerance.unwrap_or(s.jitter_tolerance);
    let cfg = train_config(env, &file);
    let (net, data) = match a.model.or_else(|| s.model.clone()) {
        Some(p) => (model_from_json::<f64>(&read_text(&p)?)?, cfg.dataset()?),
        None => {
            let run = run_training::<f64>(&cfg)?;
            env.write("model.json", &(model_to_json(&run.network) + "\n"))?;
            (run.network, run.dataset)
        }
    };
    let report = match env.precision {
        Precision::Single => robustness(&net.cast::<f32>(), &data, &transforms)?,
        Precision::Double => robustness(&net, &data, &transforms)?,
    };
    let mut csv = String::from("transform,accuracy,delta\n");
    for r in &report.rows {
        csv.push_str(&format!("{},{},{}\n", r.transform, r.accuracy, r.delta));
    }
    env.write("robustness.csv", &csv)?;
    let path = env.write_json("robustness.json", &report)?;
    println!("clean accuracy {:.3}", report.clean_accuracy);
    for r in &report.rows {
        println!("{:<16} {:.3} ({:+.3})", r.transform, r.accuracy, r.delta);
    }
    println!("-> {}", path.display());

    let translation_invariant = net.input == InputFeatures::Centered
        && net.layers.iter().all(|l| l.relation == RelationMode::Relative7);
    let mut failures = Vec::new();
    for (t, r) in transforms.iter().zip(&report.rows) {
        let ok = match t {
            Transform::Permute { .. } => r.delta == 0.0,
            Transform::Translate { .. } if translation_invariant => r.delta.abs() <= 1e-12,
            Transform::Jitter { .. } => r.delta >= -tolerance,
            _ => true,
        };
        if !ok {
            failures.push(format!("{} changed accuracy by {:+.3}", r.transform, r.delta));
        }
    }
    if !failures.is_empty() {
        return Err(CliError::Check(failures.join("; ")));
    }
    Ok(())
}

fn corr(env: &Env, file: FileConfig, a: crate::CorrStudyArgs) -> CliResult<()> {
    let s = file.corr_study;
    let mut cfg = s.study;
    cfg.m = positive("--m", a.m.unwrap_or(cfg.m))?;
    cfg.c_in = positive("--c-in", a.c_in.unwrap_or(cfg.c_in))?;
    cfg.c_out = positive("--c-out", a.c_out.unwrap_or(cfg.c_out))?;
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.seed = env.seed.unwrap_or(cfg.seed);
    let require = a.require_mean_abs_r.unwrap_or(s.require_mean_abs_r);
    let study = corr_study(&cfg)?;
    let mut csv = String::from("step,l_corr,mean_abs_r\n");
    for r in &study.trace {
        csv.push_str(&format!("{},{},{}\n", r.step, r.l_corr, r.mean_abs_r));
    }
    env.write("corr_study.csv", &csv)?;
    let path = env.write_json("corr_study.json", &study)?;
    let hit = study.trace.iter().find(|r| r.mean_abs_r < require).map(|r| r.step);
    println!(
        "mean |R| {:.4} -> {:.4} after {} steps (below {require} from step {}) -> {}",
        study.initial.mean_abs_r,
        study.last.mean_abs_r,
        study.trace.len() - 1,
        hit.map_or("never".to_string(), |s| s.to_string()),
        path.display()
    );
    if study.last.mean_abs_r >= require {
        return Err(CliError::Check(format!(
            "final mean |R| {:.4} is not below {require}",
            study.last.mean_abs_r
        )));
    }
    Ok(())
}
