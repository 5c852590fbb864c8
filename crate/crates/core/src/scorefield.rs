//! ScoreNet outputs sampled over a planar grid of neighbor offsets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RelationMode;
use crate::paconv::{NormMode, ScoreNet};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Xy,
    Xz,
    Yz,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Xy, Plane::Xz, Plane::Yz];

    /// The two coordinate axes spanning the plane.
    pub fn axes(self) -> (usize, usize) {
        match self {
            Plane::Xy => (0, 1),
            Plane::Xz => (0, 2),
            Plane::Yz => (1, 2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Xy => "xy",
            Plane::Xz => "xz",
            Plane::Yz => "yz",
        }
    }
}

impl std::str::FromStr for Plane {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Plane::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown plane `{s}` (expected xy|xz|yz)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub plane: Plane,
    pub resolution: usize,
    /// Offsets span `[-extent, extent]` along both in-plane axes.
    pub extent: f64,
    pub center: [f64; 3],
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            plane: Plane::Xy,
            resolution: 64,
            extent: 1.0,
            center: [0.0; 3],
        }
    }
}

/// Scores of every cell, cell-major: cell `r * G + c` has in-plane offset
/// `(u[c], u[r])` and its `M` scores are contiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFieldGrid {
    pub spec: FieldSpec,
    pub m: usize,
    pub norm: NormMode,
    pub ticks: Vec<f64>,
    pub scores: Vec<f64>,
}

impl ScoreFieldGrid {
    pub fn cells(&self) -> usize {
        self.spec.resolution * self.spec.resolution
    }

    pub fn cell(&self, idx: usize) -> &[f64] {
        &self.scores[idx * self.m..(idx + 1) * self.m]
    }

    /// In-plane offset of a cell.
    pub fn offset(&self, idx: usize) -> (f64, f64) {
        let g = self.spec.resolution;
        (self.ticks[idx % g], self.ticks[idx / g])
    }

    /// Surface of matrix `m` as a `G × G` row-major array.
    pub fn surface(&self, m: usize) -> Vec<f64> {
        (0..self.cells()).map(|c| self.cell(c)[m]).collect()
    }

    /// Largest pointwise gap between any two surfaces, with the matrices involved.
    pub fn max_surface_gap(&self) -> (usize, usize, f64) {
        let mut best = (0, 0, 0.0);
        for c in 0..self.cells() {
            let s = self.cell(c);
            for i in 0..self.m {
                for j in i + 1..self.m {
                    let d = (s[i] - s[j]).abs();
                    if d > best.2 {
                        best = (i, j, d);
                    }
                }
            }
        }
        best
    }

    /// Columns `x, y, s_1 .. s_M`; `x, y` are the two in-plane offsets.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["x".to_string(), "y".to_string()];
        header.extend((1..=self.m).map(|i| format!("s_{i}")));
        w.write_record(&header).expect("in-memory write");
        for c in 0..self.cells() {
            let (x, y) = self.offset(c);
            let mut rec = vec![x.to_string(), y.to_string()];
            rec.extend(self.cell(c).iter().map(|v| v.to_string()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }
}

/// Evaluate `net` on relation vectors from `spec.center` to every grid point.
pub fn score_field<T: Real>(net: &ScoreNet<T>, relation: RelationMode, spec: &FieldSpec) -> Result<ScoreFieldGrid> {
    let g = spec.resolution;
    if g < 2 {
        return Err(Error::input(format!("resolution must be at least 2, got {g}")));
    }
    if !(spec.extent.is_finite() && spec.extent > 0.0) || spec.center.iter().any(|c| !c.is_finite()) {
        return Err(Error::input("grid extent must be positive and the center finite"));
    }
    if net.d_in() != relation.d_in() {
        return Err(Error::input(format!(
            "ScoreNet takes {} inputs but relation mode {} has {}",
            net.d_in(),
            relation.name(),
            relation.d_in()
        )));
    }
    let ticks: Vec<f64> = (0..g)
        .map(|i| -spec.extent + 2.0 * spec.extent * i as f64 / (g - 1) as f64)
        .collect();
    let (a, b) = spec.plane.axes();
    let center = spec.center.map(T::lit);
    let mut rel = vec![T::zero(); relation.d_in()];
    let mut scores = Vec::with_capacity(g * g * net.m());
    for r in 0..g {
        for c in 0..g {
            let mut p = spec.center;
            p[a] += ticks[c];
            p[b] += ticks[r];
            relation.encode(center, p.map(T::lit), &mut rel);
            scores.extend(net.score_pair(&rel).into_iter().map(|v| v.as_f64()));
        }
    }
    Ok(ScoreFieldGrid {
        spec: spec.clone(),
        m: net.m(),
        norm: net.norm(),
        ticks,
        scores,
    })
}
