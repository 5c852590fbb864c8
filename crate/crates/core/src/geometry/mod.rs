//! Point clouds, k-nearest-neighbor grouping, farthest point sampling and the
//! relation vectors fed to ScoreNet.
//!
//! Neighborhoods are built by a full distance scan with partial selection.
//! There is no spatial index; at desk scale (N up to ~1e5) the quadratic scan is
//! acceptable and `knn_build` is the single place to swap one in.

mod io;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::scalar::Real;

pub use io::{read_binary, read_csv, write_binary, write_csv};

/// `N` points in 3D with an optional `N × C_in` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    coords: Vec<[T; 3]>,
    features: Option<FeatureMap<T>>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(coords: Vec<[T; 3]>) -> Result<Self> {
        if let Some(i) = coords
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::input(format!("non-finite coordinate at point {i}")));
        }
        Ok(Self {
            coords,
            features: None,
        })
    }

    pub fn with_features(coords: Vec<[T; 3]>, features: FeatureMap<T>) -> Result<Self> {
        let mut cloud = Self::new(coords)?;
        cloud.set_features(features)?;
        Ok(cloud)
    }

    pub fn set_features(&mut self, features: FeatureMap<T>) -> Result<()> {
        if features.rows() != self.coords.len() {
            return Err(Error::input(format!(
                "feature map has {} rows for {} points",
                features.rows(),
                self.coords.len()
            )));
        }
        if features.cols() == 0 {
            return Err(Error::input("feature map needs at least one column"));
        }
        self.features = Some(features);
        Ok(())
    }

    /// Replace the features with the coordinates themselves (`C_in = 3`).
    pub fn with_coord_features(mut self) -> Self {
        let data = self.coords.iter().flatten().copied().collect();
        self.features = Some(FeatureMap::from_vec(self.coords.len(), 3, data).unwrap());
        self
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn coords(&self) -> &[[T; 3]] {
        &self.coords
    }

    #[inline]
    pub fn point(&self, i: usize) -> [T; 3] {
        self.coords[i]
    }

    pub fn features(&self) -> Option<&FeatureMap<T>> {
        self.features.as_ref()
    }

    pub fn take_features(&mut self) -> Option<FeatureMap<T>> {
        self.features.take()
    }

    /// Feature column count, or 0 when no features are attached.
    pub fn c_in(&self) -> usize {
        self.features.as_ref().map_or(0, FeatureMap::cols)
    }

    /// Reorder points (and features) so that new point `i` is old point `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            coords: order.iter().map(|&i| self.coords[i]).collect(),
            features: self.features.as_ref().map(|f| f.gather_rows(order)),
        }
    }

    /// Apply `f` to every coordinate. Features are left untouched.
    pub fn map_coords(&self, f: impl Fn([T; 3]) -> [T; 3]) -> Self {
        Self {
            coords: self.coords.iter().map(|&p| f(p)).collect(),
            features: self.features.clone(),
        }
    }
}

#[inline]
pub(crate) fn squared_distance<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// For each point, the indices of its `k` neighbors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborIndex {
    n: usize,
    k: usize,
    include_self: bool,
    indices: Vec<usize>,
}

impl NeighborIndex {
    /// Build from explicit rows. Every row must have `k` entries in `[0, n)`.
    pub fn from_rows(n: usize, rows: &[Vec<usize>], include_self: bool) -> Result<Self> {
        if rows.len() != n {
            return Err(Error::input(format!("{} neighbor rows for {n} points", rows.len())));
        }
        let k = rows.first().map_or(0, Vec::len);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::input(format!("neighbor row {i} has {} entries, expected {k}", row.len())));
            }
            if let Some(&bad) = row.iter().find(|&&j| j >= n) {
                return Err(Error::input(format!("neighbor index {bad} out of range in row {i}")));
            }
            if include_self && row.first() != Some(&i) {
                return Err(Error::input(format!("row {i} does not start with its center")));
            }
        }
        Ok(Self {
            n,
            k,
            include_self,
            indices: rows.iter().flatten().copied().collect(),
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn include_self(&self) -> bool {
        self.include_self
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.indices.chunks(self.k.max(1)).take(self.n)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }
}

/// k-nearest neighbors of every point by Euclidean distance in coordinate space.
///
/// Rows are sorted by ascending distance with ties broken by ascending index.
/// With `include_self` the center occupies slot 0 and the other `k - 1` slots
/// hold the nearest other points; otherwise the center is excluded entirely.
pub fn knn_build<T: Real>(cloud: &PointCloud<T>, k: usize, include_self: bool) -> Result<NeighborIndex> {
    let n = cloud.len();
    if k == 0 {
        return Err(Error::size("k must be at least 1"));
    }
    if k > n {
        return Err(Error::size(format!("k = {k} exceeds the number of points {n}")));
    }
    if !include_self && k == n {
        return Err(Error::size(format!(
            "k = {k} neighbors excluding the center needs at least {} points",
            k + 1
        )));
    }
    let coords = cloud.coords();
    let others = if include_self { k - 1 } else { k };
    let mut indices = Vec::with_capacity(n * k);
    let mut candidates: Vec<(T, usize)> = Vec::with_capacity(n);

    for (i, &center) in coords.iter().enumerate() {
        candidates.clear();
        candidates.extend(
            coords
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &p)| (squared_distance(center, p), j)),
        );
        if others > 0 && others < candidates.len() {
            candidates.select_nth_unstable_by(others - 1, by_distance_then_index);
        }
        candidates.truncate(others);
        candidates.sort_unstable_by(by_distance_then_index);

        if include_self {
            indices.push(i);
        }
        indices.extend(candidates.iter().map(|&(_, j)| j));
    }

    Ok(NeighborIndex {
        n,
        k,
        include_self,
        indices,
    })
}

fn by_distance_then_index<T: Real>(a: &(T, usize), b: &(T, usize)) -> Ordering {
    a.0.partial_cmp(&b.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Indices chosen by farthest point sampling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleIndex {
    pub start: usize,
    pub indices: Vec<usize>,
}

/// Greedy farthest point sampling.
///
/// Each subsequent pick maximizes the minimum distance to the already selected
/// set; ties go to the lowest index. Already selected points are never picked
/// again, so duplicate coordinates still yield unique indices.
pub fn fps<T: Real>(cloud: &PointCloud<T>, n_samples: usize, start: usize) -> Result<SampleIndex> {
    let n = cloud.len();
    if n_samples == 0 {
        return Err(Error::size("n_samples must be at least 1"));
    }
    if n_samples > n {
        return Err(Error::size(format!("n_samples = {n_samples} exceeds the number of points {n}")));
    }
    if start >= n {
        return Err(Error::input(format!("start index {start} out of range for {n} points")));
    }
    let coords = cloud.coords();
    let mut min_dist = vec![T::infinity(); n];
    let mut selected = vec![false; n];
    let mut indices = Vec::with_capacity(n_samples);
    let mut current = start;

    loop {
        indices.push(current);
        selected[current] = true;
        if indices.len() == n_samples {
            break;
        }
        let anchor = coords[current];
        let mut best: Option<(T, usize)> = None;
        for j in 0..n {
            let d = squared_distance(anchor, coords[j]);
            if d < min_dist[j] {
                min_dist[j] = d;
            }
            if selected[j] {
                continue;
            }
            // strict comparison keeps the lowest index on ties
            if best.map_or(true, |(bd, _)| min_dist[j] > bd) {
                best = Some((min_dist[j], j));
            }
        }
        current = best.expect("unselected point remains").1;
    }

    Ok(SampleIndex { start, indices })
}

/// Layout of the per-pair vector fed to ScoreNet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum RelationMode {
    /// `(x_j-x_i, y_j-y_i, z_j-z_i, x_i, y_i, z_i, e_ij)`
    #[default]
    #[serde(rename = "full7")]
    Full7,
    /// `(x_j-x_i, x_j, x_i, e_ij)`
    #[serde(rename = "x4")]
    X4,
    #[serde(rename = "y4")]
    Y4,
    #[serde(rename = "z4")]
    Z4,
    /// `Full7` with the absolute center slots fixed to zero.
    #[serde(rename = "rel7")]
    Relative7,
}

impl RelationMode {
    pub const ALL: [RelationMode; 5] = [
        RelationMode::Full7,
        RelationMode::X4,
        RelationMode::Y4,
        RelationMode::Z4,
        RelationMode::Relative7,
    ];

    pub fn d_in(self) -> usize {
        match self {
            RelationMode::Full7 | RelationMode::Relative7 => 7,
            RelationMode::X4 | RelationMode::Y4 | RelationMode::Z4 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationMode::Full7 => "full7",
            RelationMode::X4 => "x4",
            RelationMode::Y4 => "y4",
            RelationMode::Z4 => "z4",
            RelationMode::Relative7 => "rel7",
        }
    }

    /// Write the relation vector of center `pi` and neighbor `pj` into `out`.
    pub fn encode<T: Real>(self, pi: [T; 3], pj: [T; 3], out: &mut [T]) {
        debug_assert_eq!(out.len(), self.d_in());
        let e = squared_distance(pi, pj).sqrt();
        match self {
            RelationMode::Full7 | RelationMode::Relative7 => {
                out[0] = pj[0] - pi[0];
                out[1] = pj[1] - pi[1];
                out[2] = pj[2] - pi[2];
                if self == RelationMode::Full7 {
                    out[3..6].copy_from_slice(&pi);
                } else {
                    out[3..6].fill(T::zero());
                }
                out[6] = e;
            }
            RelationMode::X4 | RelationMode::Y4 | RelationMode::Z4 => {
                let axis = match self {
                    RelationMode::X4 => 0,
                    RelationMode::Y4 => 1,
                    _ => 2,
                };
                out[0] = pj[axis] - pi[axis];
                out[1] = pj[axis];
                out[2] = pi[axis];
                out[3] = e;
            }
        }
    }
}

impl std::str::FromStr for RelationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        RelationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown relation mode `{s}` (expected full7|x4|y4|z4|rel7)"))
    }
}

/// `N × k × D_in` relation vectors, one per (center, neighbor slot).
#[derive(Debug, Clone, PartialEq)]
pub struct RelationTensor<T> {
    n: usize,
    k: usize,
    mode: RelationMode,
    values: Vec<T>,
}

impl<T: Real> RelationTensor<T> {
    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn mode(&self) -> RelationMode {
        self.mode
    }

    #[inline]
    pub fn d_in(&self) -> usize {
        self.mode.d_in()
    }

    /// Relation vector for center `i`, neighbor slot `j`.
    #[inline]
    pub fn pair(&self, i: usize, j: usize) -> &[T] {
        let d = self.d_in();
        let at = (i * self.k + j) * d;
        &self.values[at..at + d]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    /// Build directly from a flat buffer of `n * k` relation vectors.
    pub fn from_vec(n: usize, k: usize, mode: RelationMode, values: Vec<T>) -> Result<Self> {
        if values.len() != n * k * mode.d_in() {
            return Err(Error::input(format!(
                "relation buffer has {} values, expected {n}×{k}×{}",
                values.len(),
                mode.d_in()
            )));
        }
        Ok(Self { n, k, mode, values })
    }
}

/// Build the ScoreNet input for every (center, neighbor) pair.
pub fn relation_features<T: Real>(
    cloud: &PointCloud<T>,
    nbrs: &NeighborIndex,
    mode: RelationMode,
) -> Result<RelationTensor<T>> {
    if nbrs.n() != cloud.len() {
        return Err(Error::input(format!(
            "neighbor index covers {} points but the cloud has {}",
            nbrs.n(),
            cloud.len()
        )));
    }
    let d = mode.d_in();
    let (n, k) = (nbrs.n(), nbrs.k());
    let mut values = vec![T::zero(); n * k * d];
    let coords = cloud.coords();
    for i in 0..n {
        for (slot, &j) in nbrs.row(i).iter().enumerate() {
            let at = (i * k + slot) * d;
            mode.encode(coords[i], coords[j], &mut values[at..at + d]);
        }
    }
    Ok(RelationTensor { n, k, mode, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: &[[f64; 3]]) -> PointCloud<f64> {
        PointCloud::new(points.to_vec()).unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()).unwrap()
    }

    #[test]
    fn knn_line_with_self() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let nb = knn_build(&c, 2, true).unwrap();
        assert_eq!(nb.row(0), &[0, 1]);
        assert_eq!(nb.row(2), &[2, 1]);
    }

    #[test]
    fn knn_tie_goes_to_lower_index() {
        let c = cloud(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 5.0]]);
        let nb = knn_build(&c, 2, false).unwrap();
        assert_eq!(nb.row(0), &[1, 2]);
    }

    #[test]
    fn knn_size_errors() {
        let c = cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(matches!(knn_build(&c, 3, true), Err(Error::Size(_))));
        assert!(matches!(knn_build(&c, 2, false), Err(Error::Size(_))));
        assert!(matches!(knn_build(&c, 0, true), Err(Error::Size(_))));
    }

    #[test]
    fn non_finite_coordinate_rejected() {
        let err = PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn knn_self_slot_with_duplicates() {
        let c = cloud(&[[0.0; 3], [0.0; 3], [0.0; 3]]);
        let nb = knn_build(&c, 3, true).unwrap();
        assert_eq!(nb.row(2), &[2, 0, 1]);
    }

    #[test]
    fn fps_picks_farthest() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.4, 0.0, 0.0]]);
        assert_eq!(fps(&c, 2, 0).unwrap().indices, vec![0, 1]);
    }

    #[test]
    fn fps_exhaustion_is_permutation() {
        let c = random_cloud(20, 3);
        let mut s = fps(&c, 20, 7).unwrap().indices;
        assert_eq!(s[0], 7);
        s.sort_unstable();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn fps_duplicates_stay_unique() {
        let c = cloud(&[[0.0; 3], [0.0; 3], [0.0; 3]]);
        assert_eq!(fps(&c, 3, 1).unwrap().indices, vec![1, 0, 2]);
    }

    #[test]
    fn fps_errors() {
        let c = random_cloud(4, 1);
        assert!(matches!(fps(&c, 5, 0), Err(Error::Size(_))));
        assert!(matches!(fps(&c, 2, 4), Err(Error::Input(_))));
    }

    #[test]
    fn relation_full7_layout() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 2.0, 2.0]]);
        let nb = NeighborIndex::from_rows(2, &[vec![0, 1], vec![1, 0]], true).unwrap();
        let rel = relation_features(&c, &nb, RelationMode::Full7).unwrap();
        assert_eq!(rel.pair(0, 1), &[1.0, 2.0, 2.0, 0.0, 0.0, 0.0, 3.0]);
        assert_eq!(rel.pair(1, 0), &[0.0, 0.0, 0.0, 1.0, 2.0, 2.0, 0.0]);
    }

    #[test]
    fn relation_axis_layout() {
        let c = cloud(&[[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let nb = NeighborIndex::from_rows(2, &[vec![0, 1], vec![1, 0]], true).unwrap();
        let rel = relation_features(&c, &nb, RelationMode::X4).unwrap();
        assert_eq!(rel.pair(0, 1), &[2.0, 3.0, 1.0, 2.0]);
        let rel = relation_features(&c, &nb, RelationMode::Relative7).unwrap();
        assert_eq!(rel.pair(0, 1), &[2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn relation_size_mismatch() {
        let c = random_cloud(5, 2);
        let other = random_cloud(6, 2);
        let nb = knn_build(&other, 2, true).unwrap();
        assert!(matches!(
            relation_features(&c, &nb, RelationMode::Full7),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn relation_translation_keeps_relative_slots() {
        let c = random_cloud(30, 9);
        let shift = [0.25, -1.5, 3.0];
        let moved = c.map_coords(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]);
        let nb = knn_build(&c, 5, true).unwrap();
        let a = relation_features(&c, &nb, RelationMode::Full7).unwrap();
        let b = relation_features(&moved, &nb, RelationMode::Full7).unwrap();
        for i in 0..30 {
            for j in 0..5 {
                let (pa, pb) = (a.pair(i, j), b.pair(i, j));
                for s in [0, 1, 2, 6] {
                    assert!((pa[s] - pb[s]).abs() < 1e-12);
                }
                for s in 0..3 {
                    assert!((pb[3 + s] - pa[3 + s] - shift[s]).abs() < 1e-12);
                }
            }
        }
    }
}
