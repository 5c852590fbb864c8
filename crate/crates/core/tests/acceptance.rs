//! Acceptance suite: one PASS/FAIL line per criterion, then a nonzero exit if
//! any criterion failed. Criteria 4, 6 and 10 share one trained network.

use std::time::{Duration, Instant};

use paconv::autograd::{finite_diff_check, LossKind, DEFAULT_EPS};
use paconv::cost::{CostDims, OpCounter};
use paconv::equivalence::{random_instance, run_equivalence, EquivalenceConfig, InstanceShape};
use paconv::geometry::{fps, knn_build, PointCloud, RelationMode};
use paconv::paconv::{normalize_scores, AggMode, ExecPath, NormMode};
use paconv::regularize::{corr_study, CorrStudyConfig};
use paconv::scorefield::{score_field, FieldSpec, Plane};
use paconv::trainer::{run_training, TrainConfig, TrainRun};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn path_equivalence() -> Outcome {
    let t = Instant::now();
    let r = run_equivalence(&EquivalenceConfig::default()).expect("equivalence runs");
    let modes: std::collections::HashSet<_> = r.instances.iter().map(|i| (i.agg, i.norm)).collect();
    let el = t.elapsed();
    outcome(
        r.passed && r.instances.len() >= 50 && modes.len() == 12 && el < Duration::from_secs(30),
        format!(
            "{} instances, {} agg/norm pairings; forward {:.2e} single, {:.2e} double; backward {:.2e}; {:.1} s",
            r.instances.len(),
            modes.len(),
            r.max_forward_diff_single,
            r.max_forward_diff_double,
            r.max_backward_diff_double,
            secs(el)
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let shape = InstanceShape {
        n: 12,
        k: 4,
        c_in: 5,
        c_out: 6,
        m: 8,
    };
    let (mut worst, mut checks, mut skipped) = (0.0f64, 0, 0);
    for (i, agg) in AggMode::ALL.into_iter().enumerate() {
        for (j, norm) in NormMode::ALL.into_iter().enumerate() {
            let inst = random_instance((i * 4 + j) as u64, shape, agg, norm, RelationMode::Full7, &[16, 16, 16])
                .expect("instance");
            for path in ExecPath::ALL {
                let r = finite_diff_check(&inst.layer, &inst.cloud, &inst.nbrs, LossKind::SumOfSquares, DEFAULT_EPS, path)
                    .expect("gradient check runs");
                worst = worst.max(r.max_rel_err);
                skipped += r.skipped();
                checks += 1;
            }
        }
    }
    let el = t.elapsed();
    outcome(
        worst < 1e-6 && el < Duration::from_secs(120),
        format!(
            "{checks} agg x norm x path checks, max rel err {worst:.2e}, {skipped} tie coordinates skipped, {:.1} s",
            secs(el)
        ),
    )
}

fn score_normalization() -> Outcome {
    const ROWS: usize = 10_000;
    const M: usize = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits: Vec<f64> = (0..ROWS * M).map(|_| rng.gen_range(-8.0..8.0)).collect();
    let single: Vec<f32> = logits.iter().map(|&v| v as f32).collect();

    let mut worst_sum = 0.0f64;
    let mut ok = true;
    for mode in [NormMode::Softmax, NormMode::Sigmoid, NormMode::TanhClamped] {
        let check = |v: f64| match mode {
            NormMode::TanhClamped => (0.0..1.0).contains(&v),
            _ => v > 0.0 && v < 1.0,
        };
        let s64 = normalize_scores(&logits, M, mode);
        let s32: Vec<f64> = normalize_scores(&single, M, mode).iter().map(|&v| v as f64).collect();
        for s in [&s64, &s32] {
            ok &= s.iter().all(|&v| check(v));
            if mode == NormMode::Softmax {
                for row in s.chunks_exact(M) {
                    worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    outcome(
        ok && worst_sum < 1e-6,
        format!("{ROWS} rows x {M} in f32 and f64, worst softmax |sum - 1| {worst_sum:.2e}, ranges hold: {ok}"),
    )
}

fn permutation_invariance(run: &TrainRun<f64>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for p in 0..100 {
        let sample = &run.dataset.samples[p % run.dataset.len()];
        let mut order: Vec<usize> = (0..sample.cloud.len()).collect();
        order.shuffle(&mut rng);
        let a = run.network.logits(&sample.cloud).expect("forward");
        let b = run.network.logits(&sample.cloud.permuted(&order)).expect("forward");
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs() / x.abs().max(1.0));
        }
    }
    outcome(
        worst <= 4.0 * f64::EPSILON,
        format!("100 permutations of trained-network inputs, max scaled logit change {worst:.2e}"),
    )
}

fn correlation_regularizer(run: &TrainRun<f64>, plain: &TrainRun<f64>) -> Outcome {
    let cfg = CorrStudyConfig::default();
    let study = corr_study(&cfg).expect("study runs");
    let hit = study.trace.iter().find(|s| s.mean_abs_r < 0.05).map(|s| s.step);
    let (with, without) = (run.history.last().mean_pearson, plain.history.last().mean_pearson);
    outcome(
        hit.is_some_and(|s| s <= 2000) && with < without,
        format!(
            "M={} {}x{} bank: mean |R| {:.4} -> {:.4}, below 0.05 at step {}; toy runs mean |R| {:.4} (lambda {}) vs {:.4} (lambda 0)",
            cfg.m,
            cfg.c_in,
            cfg.c_out,
            study.initial.mean_abs_r,
            study.last.mean_abs_r,
            hit.map_or("never".into(), |s| s.to_string()),
            with,
            TrainConfig::default().lambda_corr,
            without
        ),
    )
}

fn toy_overfit(run: &TrainRun<f64>, took: Duration) -> Outcome {
    let h = &run.history;
    let first = h.rows.iter().find(|r| r.acc >= 0.95).map(|r| r.epoch);
    outcome(
        first.is_some_and(|e| e <= 200) && took < Duration::from_secs(300),
        format!(
            "final train accuracy {:.3} after {} epochs, first >= 0.95 at epoch {}, {:.1} s single-threaded",
            h.last().acc,
            h.last().epoch,
            first.map_or("never".into(), |e| e.to_string()),
            secs(took)
        ),
    )
}

fn flops_trend() -> Outcome {
    let dims = |n, k, m, c_in, c_out| CostDims {
        n,
        k,
        m,
        c_in,
        c_out,
        d_in: 7,
        scorenet_hidden: vec![16, 16, 16],
    };
    let mut monotone = true;
    for (n, k, ci, co) in [(1024, 16, 32, 64), (4096, 32, 64, 64), (100, 8, 1, 1)] {
        for path in ExecPath::ALL {
            let f: Vec<u64> = (1..=64).map(|m| dims(n, k, m, ci, co).cost(path).flops).collect();
            monotone &= f.windows(2).all(|w| w[1] > w[0]);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut exact = 0;
    const CASES: usize = 20;
    for case in 0..CASES {
        let n = rng.gen_range(2..=20);
        let shape = InstanceShape {
            n,
            k: rng.gen_range(1..=n),
            c_in: rng.gen_range(1..=5),
            c_out: rng.gen_range(1..=5),
            m: rng.gen_range(1..=6),
        };
        let hidden = vec![rng.gen_range(1..=8), rng.gen_range(1..=8)];
        let relation = RelationMode::ALL[case % RelationMode::ALL.len()];
        let inst = random_instance(case as u64, shape, AggMode::ALL[case % 3], NormMode::Softmax, relation, &hidden)
            .expect("instance");
        let d = CostDims {
            n,
            k: shape.k,
            m: shape.m,
            c_in: shape.c_in,
            c_out: shape.c_out,
            d_in: relation.d_in(),
            scorenet_hidden: hidden,
        };
        let all = ExecPath::ALL.into_iter().all(|path| {
            let mut c = OpCounter::default();
            inst.layer
                .forward_counted(&inst.cloud, &inst.nbrs, path, &mut c)
                .expect("forward");
            let model = d.cost(path);
            c.macs == model.flops && c.scorenet_macs == model.scorenet_flops && c.elements == model.peak_elements
        });
        exact += usize::from(all);
    }
    outcome(
        monotone && exact == CASES,
        format!("flops strictly increasing in M = 1..64 for both paths: {monotone}; counter equals closed form on {exact}/{CASES} random layers"),
    )
}

fn memory_accounting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut cases, mut ordered) = (0, 0);
    while cases < 500 {
        let d = CostDims {
            n: rng.gen_range(1..=5000),
            k: rng.gen_range(1..=64),
            m: rng.gen_range(1..=64),
            c_in: rng.gen_range(1..=128),
            c_out: rng.gen_range(1..=128),
            d_in: 7,
            scorenet_hidden: vec![16, 16, 16],
        };
        if d.k * d.c_in <= d.m {
            continue;
        }
        cases += 1;
        let (naive, fused) = d.cost_pair();
        ordered += usize::from(fused.peak_elements < naive.peak_elements);
    }
    // buffer inventory: naive keeps every kernel (N·k·C_in·C_out) and every
    // transformed neighbor row (N·k·C_out); fused keeps N·M·C_out rows and one scratch row
    let (n, k, m, ci, co) = (4096u64, 32u64, 16u64, 64u64, 64u64);
    let expected = (n * k * ci * co + n * k * co) as f64 / (n * m * co + co) as f64;
    let (naive, fused) = CostDims {
        n: 4096,
        k: 32,
        m: 16,
        c_in: 64,
        c_out: 64,
        d_in: 7,
        scorenet_hidden: vec![16, 16, 16],
    }
    .cost_pair();
    let ratio = naive.peak_elements as f64 / fused.peak_elements as f64;
    outcome(
        ordered == cases && ratio == expected && ratio > 50.0,
        format!("fused < naive on {ordered}/{cases} configs with k*C_in > M; N=4096 k=32 C=64/64 M=16 ratio {ratio:.1}x (inventory {expected:.1}x)"),
    )
}

fn brute_knn(coords: &[[f64; 3]], k: usize, include_self: bool) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, c) in coords.iter().enumerate() {
        let mut all: Vec<(f64, usize)> = coords
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, p)| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2), j))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if include_self {
            out.push(i);
            out.extend(all.iter().take(k - 1).map(|p| p.1));
        } else {
            out.extend(all.iter().take(k).map(|p| p.1));
        }
    }
    out
}

fn brute_fps(coords: &[[f64; 3]], s: usize, start: usize) -> Vec<usize> {
    let d2 = |a: [f64; 3], b: [f64; 3]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
    let mut picked = vec![start];
    while picked.len() < s {
        let mut best: Option<(f64, usize)> = None;
        for j in (0..coords.len()).filter(|j| !picked.contains(j)) {
            let near = picked.iter().map(|&p| d2(coords[p], coords[j])).fold(f64::INFINITY, f64::min);
            if best.map_or(true, |(b, _)| near > b) {
                best = Some((near, j));
            }
        }
        picked.push(best.unwrap().1);
    }
    picked
}

fn geometry_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut knn_ok, mut fps_ok) = (0, 0);
    const INSTANCES: usize = 200;
    for case in 0..INSTANCES {
        let n = rng.gen_range(2..=128);
        // every fourth cloud sits on a coarse integer lattice so exact ties occur
        let coords: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                if case % 4 == 0 {
                    [0, 0, 0].map(|_: i32| rng.gen_range(0..4) as f64)
                } else {
                    [0, 0, 0].map(|_: i32| rng.gen_range(-1.0..1.0))
                }
            })
            .collect();
        let cloud = PointCloud::new(coords.clone()).unwrap();
        let include_self = case % 2 == 0;
        let k = rng.gen_range(1..=if include_self { n } else { n - 1 });
        let nb = knn_build(&cloud, k, include_self).unwrap();
        knn_ok += usize::from(nb.as_slice() == brute_knn(&coords, k, include_self).as_slice());
        let s = rng.gen_range(1..=n);
        let start = rng.gen_range(0..n);
        fps_ok += usize::from(fps(&cloud, s, start).unwrap().indices == brute_fps(&coords, s, start));
    }
    outcome(
        knn_ok == INSTANCES && fps_ok == INSTANCES,
        format!("knn exact on {knn_ok}/{INSTANCES}, fps exact on {fps_ok}/{INSTANCES} (N <= 128, a quarter with lattice ties)"),
    )
}

fn score_field_diversity(run: &TrainRun<f64>) -> Outcome {
    let layer = &run.network.layers[0];
    let gaps: Vec<(Plane, f64)> = Plane::ALL
        .into_iter()
        .map(|plane| {
            let spec = FieldSpec {
                plane,
                resolution: 64,
                ..FieldSpec::default()
            };
            (plane, score_field(&layer.scorenet, layer.relation, &spec).unwrap().max_surface_gap().2)
        })
        .collect();
    outcome(
        gaps.iter().all(|&(_, g)| g > 0.1),
        format!(
            "first-layer largest surface gap on 64x64 grids: {}",
            gaps.iter()
                .map(|(p, g)| format!("{} {g:.3}", p.name()))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn main() {
    let cfg = TrainConfig::default();
    let t = Instant::now();
    let run = run_training::<f64>(&cfg).expect("default training runs");
    let took = t.elapsed();
    let plain = run_training::<f64>(&TrainConfig {
        lambda_corr: 0.0,
        ..cfg.clone()
    })
    .expect("unregularized training runs");

    let results = [
        ("path equivalence", path_equivalence()),
        ("gradient correctness", gradient_correctness()),
        ("score normalization", score_normalization()),
        ("permutation invariance", permutation_invariance(&run)),
        ("correlation regularizer", correlation_regularizer(&run, &plain)),
        ("toy overfit", toy_overfit(&run, took)),
        ("flops trend", flops_trend()),
        ("memory accounting", memory_accounting()),
        ("geometry oracles", geometry_oracles()),
        ("score-field diversity", score_field_diversity(&run)),
    ];
    for (i, (name, o)) in results.iter().enumerate() {
        println!(
            "criterion {:>2} {name}: {} ({})",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    // sanity expectation, reported but not one of the numbered criteria
    println!(
        "note: default-config loss non-increasing in {:.1}% of epochs (expected at least 90%); lambda 0 run reached accuracy {:.3}",
        100.0 * run.history.non_increasing_fraction(),
        plain.history.last().acc
    );
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
