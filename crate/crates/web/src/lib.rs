//! wasm-bindgen surface for the static demo page in `www/`.
//!
//! Each export returns a JSON string. The `*_json` functions hold the logic and
//! stay callable from native code; the exported wrappers only convert errors.

use paconv::cost::CostDims;
use paconv::geometry::{fps, knn_build, PointCloud, RelationMode};
use paconv::paconv::{NormMode, ScoreNet};
use paconv::scorefield::{score_field, FieldSpec, Plane};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const HIDDEN: [usize; 2] = [16, 16];

#[derive(Serialize)]
struct FieldView {
    resolution: usize,
    m: usize,
    ticks: Vec<f64>,
    /// cell-major, `m` scores per cell
    scores: Vec<f64>,
    /// per cell, the matrix with the largest score
    argmax: Vec<usize>,
    max_gap: f64,
}

/// Scores of a randomly initialized ScoreNet over a plane of offsets.
pub fn score_field_json(seed: u64, m: usize, norm: &str, plane: &str, resolution: usize, extent: f64) -> Result<String, String> {
    let norm: NormMode = norm.parse()?;
    let plane: Plane = plane.parse()?;
    let relation = RelationMode::Full7;
    let net = ScoreNet::<f64>::init(relation.d_in(), &HIDDEN, m, norm, seed).map_err(|e| e.to_string())?;
    let spec = FieldSpec {
        plane,
        resolution,
        extent,
        center: [0.0; 3],
    };
    let grid = score_field(&net, relation, &spec).map_err(|e| e.to_string())?;
    let argmax = (0..grid.cells())
        .map(|c| {
            let s = grid.cell(c);
            (0..m).fold(0, |best, i| if s[i] > s[best] { i } else { best })
        })
        .collect();
    let view = FieldView {
        resolution,
        m,
        max_gap: grid.max_surface_gap().2,
        argmax,
        ticks: grid.ticks,
        scores: grid.scores,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct CloudView {
    coords: Vec<[f64; 3]>,
    samples: Vec<usize>,
    center: usize,
    neighbors: Vec<usize>,
}

/// Uniform cloud in `[-1, 1]^3`, its farthest point samples from point 0, and
/// the k nearest neighbors of `center`.
pub fn neighborhoods_json(n: usize, k: usize, n_samples: usize, center: usize, seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<[f64; 3]> = (0..n)
        .map(|_| [0; 3].map(|_| rng.gen_range(-1.0..1.0)))
        .collect();
    let cloud = PointCloud::new(coords).map_err(|e| e.to_string())?;
    if center >= n {
        return Err(format!("center {center} is outside the {n} points"));
    }
    let samples = fps(&cloud, n_samples, 0).map_err(|e| e.to_string())?.indices;
    let nbrs = knn_build(&cloud, k, false).map_err(|e| e.to_string())?;
    let view = CloudView {
        neighbors: nbrs.row(center).to_vec(),
        coords: cloud.coords().to_vec(),
        samples,
        center,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct CostRow {
    m: usize,
    naive_flops: u64,
    fused_flops: u64,
    naive_peak_elements: u64,
    fused_peak_elements: u64,
}

/// Closed-form cost of both paths for `m = 1 ..= max_m`.
pub fn cost_json(n: usize, k: usize, c_in: usize, c_out: usize, max_m: usize) -> Result<String, String> {
    if n == 0 || k == 0 || c_in == 0 || c_out == 0 || max_m == 0 {
        return Err("all dimensions must be at least 1".into());
    }
    let rows: Vec<CostRow> = (1..=max_m)
        .map(|m| {
            let dims = CostDims {
                n,
                k,
                m,
                c_in,
                c_out,
                d_in: RelationMode::Full7.d_in(),
                scorenet_hidden: HIDDEN.to_vec(),
            };
            let (naive, fused) = dims.cost_pair();
            CostRow {
                m,
                naive_flops: naive.flops,
                fused_flops: fused.flops,
                naive_peak_elements: naive.peak_elements,
                fused_peak_elements: fused.peak_elements,
            }
        })
        .collect();
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn score_field_view(seed: u32, m: usize, norm: &str, plane: &str, resolution: usize, extent: f64) -> Result<String, JsValue> {
    score_field_json(seed as u64, m, norm, plane, resolution, extent).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn neighborhoods(n: usize, k: usize, n_samples: usize, center: usize, seed: u32) -> Result<String, JsValue> {
    neighborhoods_json(n, k, n_samples, center, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn cost_table(n: usize, k: usize, c_in: usize, c_out: usize, max_m: usize) -> Result<String, JsValue> {
    cost_json(n, k, c_in, c_out, max_m).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn argmax_points_at_the_largest_score() {
        let v: Value = serde_json::from_str(&score_field_json(3, 4, "softmax", "xz", 6, 1.0).unwrap()).unwrap();
        let scores = v["scores"].as_array().unwrap();
        for (c, a) in v["argmax"].as_array().unwrap().iter().enumerate() {
            let cell: Vec<f64> = scores[c * 4..c * 4 + 4].iter().map(|s| s.as_f64().unwrap()).collect();
            let a = a.as_u64().unwrap() as usize;
            assert!(cell.iter().all(|&s| s <= cell[a]));
        }
    }

    #[test]
    fn bad_mode_names_are_reported() {
        assert!(score_field_json(0, 4, "relu", "xy", 4, 1.0).unwrap_err().contains("relu"));
        assert!(score_field_json(0, 4, "softmax", "xw", 4, 1.0).is_err());
    }

    #[test]
    fn center_is_not_its_own_neighbor() {
        let v: Value = serde_json::from_str(&neighborhoods_json(50, 6, 10, 7, 1).unwrap()).unwrap();
        let nbrs = v["neighbors"].as_array().unwrap();
        assert_eq!(nbrs.len(), 6);
        assert!(nbrs.iter().all(|j| j.as_u64() != Some(7)));
        assert!(neighborhoods_json(5, 2, 2, 5, 1).is_err());
    }
}
