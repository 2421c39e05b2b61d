use serde::{Deserialize, Serialize};

use super::{ArchSpec, NetError};

/// Per-layer parameter vectors `u^(1), ..., u^(m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVec {
    layers: Vec<Vec<f64>>,
}

impl ParamVec {
    pub fn new(layers: Vec<Vec<f64>>) -> Self {
        Self { layers }
    }

    pub fn zeros(arch: &ArchSpec) -> Self {
        Self::new(arch.param_counts().into_iter().map(|p| vec![0.0; p]).collect())
    }

    pub fn from_flat(arch: &ArchSpec, flat: &[f64]) -> Result<Self, NetError> {
        if flat.len() != arch.total_params() {
            return Err(NetError::ShapeMismatch(format!(
                "flat vector has {} entries, architecture has {}",
                flat.len(),
                arch.total_params()
            )));
        }
        let mut layers = Vec::with_capacity(arch.depth());
        let mut offset = 0;
        for p in arch.param_counts() {
            layers.push(flat[offset..offset + p].to_vec());
            offset += p;
        }
        Ok(Self { layers })
    }

    pub fn check_shape(&self, arch: &ArchSpec) -> Result<(), NetError> {
        let counts = arch.param_counts();
        let got: Vec<usize> = self.layers.iter().map(Vec::len).collect();
        if got != counts {
            return Err(NetError::ShapeMismatch(format!(
                "parameter layer sizes {got:?}, architecture expects {counts:?}"
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut Vec<f64> {
        &mut self.layers[l]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flatten().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flatten()
    }

    pub fn layer_norm_sq(&self, l: usize) -> f64 {
        self.layers[l].iter().map(|v| v * v).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        (0..self.layers.len()).map(|l| self.layer_norm_sq(l)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.layers.iter().map(|u| u.iter().map(|&v| f(v)).collect()).collect())
    }

    /// `self + factor * other`; shapes must agree.
    pub fn add_scaled(&self, factor: f64, other: &ParamVec) -> Self {
        Self::new(
            self.layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + factor * y).collect())
                .collect(),
        )
    }

    pub fn dot(&self, other: &ParamVec) -> f64 {
        self.iter().zip(other.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn distance(&self, other: &ParamVec) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Largest absolute coordinate difference.
    pub fn max_abs_diff(&self, other: &ParamVec) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// Unit vector in the same direction, or `None` for the zero vector.
    pub fn normalized(&self) -> Option<Self> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self.scaled(1.0 / n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Activation;

    #[test]
    fn flat_roundtrip_and_norms() {
        let arch = ArchSpec::fully_connected(&[2, 2, 1], Activation::Relu).unwrap();
        let p = ParamVec::from_flat(&arch, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(p.layer(1), &[5.0, 6.0]);
        assert_eq!(p.flat(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(p.norm_sq(), p.layer_norm_sq(0) + p.layer_norm_sq(1));
        assert!(ParamVec::from_flat(&arch, &[1.0]).is_err());
        assert!(ParamVec::new(vec![vec![0.0; 4]]).check_shape(&arch).is_err());
    }

    #[test]
    fn normalized_zero_is_none() {
        let arch = ArchSpec::diagonal(2, 2, Activation::Linear).unwrap();
        assert!(ParamVec::zeros(&arch).normalized().is_none());
    }
}
