use nalgebra::{SMatrix, SVector};

use super::OptimError;

/// Gaussian noise model: covariance plus its whitening factor `W` with
/// `Wᵀ W = Σ⁻¹`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel<const D: usize> {
    covariance: SMatrix<f64, D, D>,
    whitening: SMatrix<f64, D, D>,
}

impl<const D: usize> NoiseModel<D> {
    pub fn new(covariance: SMatrix<f64, D, D>) -> Result<Self, OptimError> {
        if !covariance.iter().all(|x| x.is_finite()) {
            return Err(OptimError::InvalidNoise("non-finite covariance".into()));
        }
        if (covariance - covariance.transpose()).abs().max() > 1e-12 {
            return Err(OptimError::InvalidNoise("covariance is not symmetric".into()));
        }
        let chol = covariance
            .cholesky()
            .ok_or_else(|| OptimError::InvalidNoise("covariance is not positive definite".into()))?;
        let whitening = chol
            .l()
            .try_inverse()
            .ok_or_else(|| OptimError::InvalidNoise("singular Cholesky factor".into()))?;
        Ok(Self {
            covariance,
            whitening,
        })
    }

    pub fn diagonal(variances: [f64; D]) -> Result<Self, OptimError> {
        Self::new(SMatrix::from_diagonal(&SVector::from(variances)))
    }

    pub fn isotropic(variance: f64) -> Result<Self, OptimError> {
        Self::diagonal([variance; D])
    }

    pub fn covariance(&self) -> &SMatrix<f64, D, D> {
        &self.covariance
    }

    pub fn whitening(&self) -> &SMatrix<f64, D, D> {
        &self.whitening
    }

    pub fn whiten(&self, r: &SVector<f64, D>) -> SVector<f64, D> {
        self.whitening * r
    }

    /// `rᵀ Σ⁻¹ r`.
    pub fn squared_norm(&self, r: &SVector<f64, D>) -> f64 {
        self.whiten(r).norm_squared()
    }

    pub fn covariance_row_major(&self) -> Vec<f64> {
        self.covariance.transpose().iter().copied().collect()
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self, OptimError> {
        if values.len() != D * D {
            return Err(OptimError::InvalidNoise(format!("expected {} covariance entries", D * D)));
        }
        Self::new(SMatrix::from_row_slice(values))
    }
}

/// Cost reshaping applied to a factor's squared whitened norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustKernel {
    None,
    Huber(f64),
}

impl RobustKernel {
    pub fn huber(threshold: f64) -> Result<Self, OptimError> {
        if !(threshold > 0.0) {
            return Err(OptimError::InvalidKernel(threshold));
        }
        Ok(RobustKernel::Huber(threshold))
    }
}

/// `(ρ(s), ρ'(s))` for squared whitened norm `s`; the derivative is the IRLS
/// weight applied to the whitened residual and Jacobian.
pub fn robust_cost(kernel: RobustKernel, s: f64) -> (f64, f64) {
    match kernel {
        RobustKernel::None => (s, 1.0),
        RobustKernel::Huber(k) => {
            if s <= k * k {
                (s, 1.0)
            } else {
                let r = s.sqrt();
                (2.0 * k * r - k * k, k / r)
            }
        }
    }
}
