use nalgebra::{DVector, DVectorView, DVectorViewMut};
use serde::{Deserialize, Serialize};

use super::DynError;

macro_rules! stage_sequence {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            data: DVector<f64>,
            stage_dim: usize,
        }

        impl $name {
            pub fn new(data: DVector<f64>, stage_dim: usize) -> Result<Self, DynError> {
                if stage_dim == 0 || data.len() % stage_dim != 0 {
                    return Err(DynError::Shape(format!(
                        "{}: length {} is not a multiple of stage dimension {}",
                        stringify!($name),
                        data.len(),
                        stage_dim
                    )));
                }
                Ok(Self { data, stage_dim })
            }

            pub fn zeros(stages: usize, stage_dim: usize) -> Self {
                Self { data: DVector::zeros(stages * stage_dim), stage_dim }
            }

            pub fn from_stages(stages: &[DVector<f64>]) -> Result<Self, DynError> {
                let stage_dim = stages.first().map(|s| s.len()).unwrap_or(0);
                if stages.iter().any(|s| s.len() != stage_dim) {
                    return Err(DynError::Shape("stages of unequal length".into()));
                }
                Self::new(crate::linalg::stack(stages), stage_dim.max(1))
            }

            pub fn stage_dim(&self) -> usize {
                self.stage_dim
            }

            pub fn stages(&self) -> usize {
                self.data.len() / self.stage_dim
            }

            pub fn stage(&self, t: usize) -> DVectorView<'_, f64> {
                self.data.rows(t * self.stage_dim, self.stage_dim)
            }

            pub fn stage_mut(&mut self, t: usize) -> DVectorViewMut<'_, f64> {
                self.data.rows_mut(t * self.stage_dim, self.stage_dim)
            }

            pub fn stage_owned(&self, t: usize) -> DVector<f64> {
                self.stage(t).clone_owned()
            }

            pub fn as_vector(&self) -> &DVector<f64> {
                &self.data
            }

            pub fn into_vector(self) -> DVector<f64> {
                self.data
            }

            pub fn iter_stages(&self) -> impl Iterator<Item = DVectorView<'_, f64>> + '_ {
                (0..self.stages()).map(move |t| self.stage(t))
            }
        }
    };
}

stage_sequence!(
    /// Command `(u_0; ...; u_{tau-1})`, the optimization variable.
    ControlSequence
);
stage_sequence!(
    /// States `(x_1; ...; x_tau)`. The initial state lives on the system.
    StateTrajectory
);
stage_sequence!(
    /// Noise realisation `(w_0; ...; w_{tau-1})`.
    NoiseSequence
);

impl ControlSequence {
    /// `self + step * direction`.
    pub fn offset(&self, direction: &DVector<f64>, step: f64) -> ControlSequence {
        assert_eq!(direction.len(), self.data.len());
        ControlSequence { data: &self.data + direction * step, stage_dim: self.stage_dim }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_ragged_length() {
        assert!(ControlSequence::new(DVector::zeros(5), 2).is_err());
        assert!(ControlSequence::new(DVector::zeros(6), 2).is_ok());
        assert!(StateTrajectory::new(DVector::zeros(3), 0).is_err());
    }

    #[test]
    fn stage_views() {
        let u = ControlSequence::new(DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]), 2).unwrap();
        assert_eq!(u.stages(), 2);
        assert_eq!(u.stage(1)[0], 3.0);
        let v = u.offset(&DVector::from_element(4, 1.0), 0.5);
        assert_eq!(v.stage(0)[1], 2.5);
    }
}
