use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::OpCounter;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// `M` weight matrices of shape `C_in × C_out`, stored row-major one after another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightBank<T> {
    m: usize,
    c_in: usize,
    c_out: usize,
    values: Vec<T>,
}

impl<T: Real> WeightBank<T> {
    /// Uniform init on `[-s, s]`, `s = sqrt(6 / (c_in + c_out))`, reproducible per seed.
    pub fn init(m: usize, c_in: usize, c_out: usize, seed: u64) -> Result<Self> {
        check_dims(m, c_in, c_out)?;
        let bound = (6.0 / (c_in + c_out) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..m * c_in * c_out)
            .map(|_| T::lit(rng.gen_range(-bound..=bound)))
            .collect();
        Ok(Self { m, c_in, c_out, values })
    }

    pub fn zeros(m: usize, c_in: usize, c_out: usize) -> Result<Self> {
        check_dims(m, c_in, c_out)?;
        Ok(Self {
            m,
            c_in,
            c_out,
            values: vec![T::zero(); m * c_in * c_out],
        })
    }

    /// Build from explicit matrices, each given row-major.
    pub fn from_matrices(c_in: usize, c_out: usize, matrices: &[Vec<T>]) -> Result<Self> {
        check_dims(matrices.len(), c_in, c_out)?;
        if let Some(bad) = matrices.iter().position(|b| b.len() != c_in * c_out) {
            return Err(Error::input(format!("matrix {bad} is not {c_in}×{c_out}")));
        }
        Self::from_vec(matrices.len(), c_in, c_out, matrices.concat())
    }

    pub fn from_vec(m: usize, c_in: usize, c_out: usize, values: Vec<T>) -> Result<Self> {
        check_dims(m, c_in, c_out)?;
        if values.len() != m * c_in * c_out {
            return Err(Error::input(format!(
                "bank buffer has {} values, expected {m}×{c_in}×{c_out}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("weight bank contains non-finite entries"));
        }
        Ok(Self { m, c_in, c_out, values })
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn c_in(&self) -> usize {
        self.c_in
    }

    #[inline]
    pub fn c_out(&self) -> usize {
        self.c_out
    }

    #[inline]
    pub fn matrix_len(&self) -> usize {
        self.c_in * self.c_out
    }

    #[inline]
    pub fn matrix(&self, m: usize) -> &[T] {
        let len = self.matrix_len();
        &self.values[m * len..(m + 1) * len]
    }

    #[inline]
    pub fn matrix_mut(&mut self, m: usize) -> &mut [T] {
        let len = self.matrix_len();
        &mut self.values[m * len..(m + 1) * len]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// `K = Σ_m scores[m] · B_m`.
    pub fn assemble_kernel(&self, scores: &[T]) -> Result<Vec<T>> {
        if scores.len() != self.m {
            return Err(Error::input(format!(
                "{} scores for a bank of {} matrices",
                scores.len(),
                self.m
            )));
        }
        let mut kernel = vec![T::zero(); self.matrix_len()];
        self.assemble_into(scores, &mut kernel, None);
        Ok(kernel)
    }

    /// Unchecked variant of [`assemble_kernel`](Self::assemble_kernel) writing into `out`.
    pub(crate) fn assemble_into(&self, scores: &[T], out: &mut [T], counter: Option<&mut OpCounter>) {
        out.fill(T::zero());
        for (m, &s) in scores.iter().enumerate() {
            for (k, &b) in out.iter_mut().zip(self.matrix(m)) {
                *k += s * b;
            }
        }
        if let Some(c) = counter {
            c.macs += (self.m * self.matrix_len()) as u64;
        }
    }

    pub fn cast<U: Real>(&self) -> WeightBank<U> {
        WeightBank {
            m: self.m,
            c_in: self.c_in,
            c_out: self.c_out,
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

fn check_dims(m: usize, c_in: usize, c_out: usize) -> Result<()> {
    if m == 0 || c_in == 0 || c_out == 0 {
        return Err(Error::size(format!(
            "weight bank dimensions must be positive, got M={m}, C_in={c_in}, C_out={c_out}"
        )));
    }
    Ok(())
}
