//! Shared domain types and parameter-vector arithmetic.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Flat vector of model coordinates.
///
/// Every model exchanged in a federation (global or local) has this shape;
/// the per-task layout lives in [`crate::trainer::Task`]. Elements are always
/// finite and the vector is never empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("parameter vector must be non-empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "parameter vector must be non-empty");
        Self(vec![0.0; dim])
    }

    /// Skips the finiteness scan; callers guarantee the invariant.
    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Checks the finiteness invariant after unchecked arithmetic.
    pub fn validate(self) -> Result<Self> {
        Self::new(self.0)
    }

    /// Little-endian bytes of every coordinate, in order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Euclidean norm, accumulated left to right.
    pub fn l2_norm(&self) -> f64 {
        l2_norm(self)
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self(self.0.iter().map(|v| a * v).collect())
    }

    /// `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        vec_axpy(-1.0, other, self)
    }
}

fn check_dims(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// `a * x + y`, element-wise.
pub fn vec_axpy(a: f64, x: &ParameterVector, y: &ParameterVector) -> Result<ParameterVector> {
    check_dims(y.dim(), x.dim())?;
    Ok(ParameterVector(
        x.0.iter().zip(&y.0).map(|(xi, yi)| a * xi + yi).collect(),
    ))
}

pub fn l2_norm(x: &ParameterVector) -> f64 {
    let mut acc = 0.0;
    for v in &x.0 {
        acc += v * v;
    }
    acc.sqrt()
}

/// Fixed-point residues modulo 2^64. All arithmetic wraps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidueVector(pub Vec<u64>);

impl ResidueVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn wrapping_add_assign(&mut self, other: &ResidueVector) -> Result<()> {
        check_dims(self.dim(), other.dim())?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a = a.wrapping_add(*b);
        }
        Ok(())
    }

    pub fn wrapping_sub_assign(&mut self, other: &ResidueVector) -> Result<()> {
        check_dims(self.dim(), other.dim())?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a = a.wrapping_sub(*b);
        }
        Ok(())
    }
}

/// The single payload representation of a [`LocalUpdate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Local model coordinates.
    Plain(ParameterVector),
    /// Masked fixed-point encoding of `n_k * w_k` followed by the masked
    /// sample count as the final residue.
    Masked(ResidueVector),
}

impl Payload {
    pub fn is_masked(&self) -> bool {
        matches!(self, Payload::Masked(_))
    }
}

/// One client's product for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub client_id: u32,
    pub round: u32,
    pub sample_count: u64,
    pub payload: Payload,
    pub train_loss: f64,
    pub wall_time_sec: f64,
    pub metrics: BTreeMap<String, f64>,
}

impl LocalUpdate {
    /// Model dimension carried by the payload.
    pub fn model_dim(&self) -> usize {
        match &self.payload {
            Payload::Plain(p) => p.dim(),
            Payload::Masked(r) => r.dim().saturating_sub(1),
        }
    }

    pub fn plain(&self) -> Option<&ParameterVector> {
        match &self.payload {
            Payload::Plain(p) => Some(p),
            Payload::Masked(_) => None,
        }
    }
}

/// Server-side bookkeeping of the synchronous round in progress.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub round: u32,
    pub selected: Vec<u32>,
    pub received: Vec<LocalUpdate>,
    pub global: ParameterVector,
    pub round_start: f64,
    pub round_eta: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn axpy_examples() {
        assert_eq!(vec_axpy(1.0, &pv(&[1.0, 2.0]), &pv(&[3.0, 4.0])).unwrap(), pv(&[4.0, 6.0]));
        assert_eq!(vec_axpy(0.0, &pv(&[9.0, -7.0]), &pv(&[3.0, 4.0])).unwrap(), pv(&[3.0, 4.0]));
        assert_eq!(vec_axpy(-1.0, &pv(&[1.0, 1.0]), &pv(&[1.0, 1.0])).unwrap(), pv(&[0.0, 0.0]));
    }

    #[test]
    fn axpy_rejects_dim_mismatch() {
        let err = vec_axpy(1.0, &pv(&[1.0]), &pv(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 2, actual: 1 }));
    }

    #[test]
    fn norm_examples() {
        assert_eq!(l2_norm(&pv(&[3.0, 4.0])), 5.0);
        assert_eq!(l2_norm(&ParameterVector::zeros(7)), 0.0);
        assert_eq!(l2_norm(&pv(&[1.0, 1.0, 1.0, 1.0])), 2.0);
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(matches!(ParameterVector::new(vec![1.0, f64::NAN]), Err(Error::NonFinite(1))));
        assert!(ParameterVector::new(vec![f64::INFINITY]).is_err());
        assert!(ParameterVector::new(vec![]).is_err());
    }

    #[test]
    fn residues_wrap() {
        let mut a = ResidueVector(vec![u64::MAX, 0]);
        a.wrapping_add_assign(&ResidueVector(vec![2, 1])).unwrap();
        assert_eq!(a.0, vec![1, 1]);
        a.wrapping_sub_assign(&ResidueVector(vec![2, 2])).unwrap();
        assert_eq!(a.0, vec![u64::MAX, u64::MAX]);
    }
}
