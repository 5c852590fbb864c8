//! Exact multiply-add and buffer accounting for the two forward paths.
//!
//! Convention: one FLOP is one multiply-add inside a matrix or vector product.
//! Bias additions, normalization, and aggregation comparisons are not counted.
//! Peak elements count the path-specific intermediate buffers that are live at
//! once; the relation tensor and score tensor are shared by both paths and are
//! reported separately.

use serde::{Deserialize, Serialize};

use crate::paconv::ExecPath;

/// Counter threaded through an instrumented forward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    pub macs: u64,
    /// Multiply-adds spent inside ScoreNet (also included in `macs`).
    pub scorenet_macs: u64,
    /// Path-specific intermediate elements allocated.
    pub elements: u64,
}

impl OpCounter {
    pub(crate) fn alloc(&mut self, n: usize) {
        self.elements += n as u64;
    }
}

/// Problem dimensions a cost model is evaluated at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostDims {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub d_in: usize,
    /// Hidden widths of ScoreNet; the output width is `m`.
    pub scorenet_hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub path: ExecPath,
    /// Total multiply-adds (ScoreNet + path-specific).
    pub flops: u64,
    pub scorenet_flops: u64,
    pub path_flops: u64,
    /// Path-specific intermediate elements live at peak.
    pub peak_elements: u64,
    /// Relation + score tensor elements, identical for both paths.
    pub shared_elements: u64,
}

impl CostDims {
    pub fn scorenet_flops(&self) -> u64 {
        let mut widths = Vec::with_capacity(self.scorenet_hidden.len() + 2);
        widths.push(self.d_in);
        widths.extend_from_slice(&self.scorenet_hidden);
        widths.push(self.m);
        let per_pair: u64 = widths.windows(2).map(|w| (w[0] * w[1]) as u64).sum();
        (self.n * self.k) as u64 * per_pair
    }

    pub fn cost(&self, path: ExecPath) -> CostModel {
        let (n, k, m, ci, co) = (
            self.n as u64,
            self.k as u64,
            self.m as u64,
            self.c_in as u64,
            self.c_out as u64,
        );
        let (path_flops, peak_elements) = match path {
            // assemble every K_ij, then f_j^T K_ij
            ExecPath::Naive => (n * k * m * ci * co + n * k * ci * co, n * k * ci * co + n * k * co),
            // f_p^T B_m once per point, then score-weighted gather streamed into
            // the aggregate through one reusable C_out scratch row
            ExecPath::Fused => (n * m * ci * co + n * k * m * co, n * m * co + co),
        };
        let scorenet_flops = self.scorenet_flops();
        let hidden: u64 = self.scorenet_hidden.iter().map(|&h| h as u64).sum();
        CostModel {
            path,
            flops: scorenet_flops + path_flops,
            scorenet_flops,
            path_flops,
            peak_elements,
            shared_elements: n * k * (self.d_in as u64 + hidden + 2 * m),
        }
    }

    /// `(naive, fused)` cost models.
    pub fn cost_pair(&self) -> (CostModel, CostModel) {
        (self.cost(ExecPath::Naive), self.cost(ExecPath::Fused))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(m: usize) -> CostDims {
        CostDims {
            n: 100,
            k: 16,
            m,
            c_in: 32,
            c_out: 64,
            d_in: 7,
            scorenet_hidden: vec![16, 16, 16],
        }
    }

    #[test]
    fn naive_assembly_term_doubles_with_m() {
        let a = dims(8).cost(ExecPath::Naive);
        let b = dims(16).cost(ExecPath::Naive);
        let assembly = |m: u64| 100 * 16 * m * 32 * 64;
        assert_eq!(a.path_flops - assembly(8), b.path_flops - assembly(16));
        assert_eq!(assembly(16), 2 * assembly(8));
    }

    #[test]
    fn fused_grows_sub_doubly() {
        let a = dims(8).cost(ExecPath::Fused).flops;
        let b = dims(16).cost(ExecPath::Fused).flops;
        assert!(b > a && b < 2 * a);
    }

    #[test]
    fn large_layer_memory_ratio() {
        let d = CostDims {
            n: 4096,
            k: 32,
            m: 16,
            c_in: 64,
            c_out: 64,
            d_in: 7,
            scorenet_hidden: vec![16, 16, 16],
        };
        let (naive, fused) = d.cost_pair();
        // N·k·64·65 against N·16·64 + 64
        assert_eq!(naive.peak_elements, 4096 * 32 * 64 * 65);
        assert_eq!(fused.peak_elements, 4096 * 16 * 64 + 64);
    }
}
