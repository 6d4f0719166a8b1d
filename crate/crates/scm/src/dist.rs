//! Distribution over one discrete variable.

use crate::ScmError;

pub const DIST_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Dist {
    pub support: String,
    pub probs: Vec<f64>,
}

impl Dist {
    /// Normalizes a non-negative mass vector; zero total mass is the
    /// undefined-conditional case.
    pub fn from_mass(support: &str, mass: Vec<f64>) -> Result<Self, ScmError> {
        if mass.iter().any(|&v| v < 0.0) {
            return Err(ScmError::NegativeMass(support.to_string()));
        }
        let total: f64 = mass.iter().sum();
        if total <= 0.0 {
            return Err(ScmError::ZeroProbabilityEvent(support.to_string()));
        }
        Ok(Dist {
            support: support.to_string(),
            probs: mass.into_iter().map(|v| v / total).collect(),
        })
    }

    pub fn is_normalized(&self) -> bool {
        (self.probs.iter().sum::<f64>() - 1.0).abs() <= DIST_NORM_TOL
            && self.probs.iter().all(|&p| p >= 0.0)
    }

    /// Largest absolute per-value difference.
    pub fn max_abs_diff(&self, other: &Dist) -> f64 {
        debug_assert_eq!(self.probs.len(), other.probs.len());
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_mass_normalizes() {
        let d = Dist::from_mass("Y", vec![1.0, 3.0]).unwrap();
        assert_eq!(d.probs, vec![0.25, 0.75]);
        assert!(d.is_normalized());
    }

    #[test]
    fn zero_mass_is_an_error() {
        assert!(Dist::from_mass("Y", vec![0.0, 0.0]).is_err());
    }
}
