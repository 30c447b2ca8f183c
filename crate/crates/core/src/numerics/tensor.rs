use super::NumericsError;

/// A named, shaped, dense block of 32-bit floats stored row-major.
///
/// Used for parameters, gradients and optimizer buffers alike.
#[derive(Clone, Debug, PartialEq)]
pub struct GradTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl GradTensor {
    /// Builds a tensor, checking that `values` fills `shape` and is finite.
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        values: Vec<f32>,
    ) -> Result<Self, NumericsError> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if shape.contains(&0) && !values.is_empty() {
            return Err(NumericsError::Shape(format!(
                "{name}: zero-sized dimension in {shape:?} with {} values",
                values.len()
            )));
        }
        if expected != values.len() {
            return Err(NumericsError::Shape(format!(
                "{name}: shape {shape:?} holds {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { name, index: k });
        }
        Ok(Self {
            name,
            shape,
            values,
        })
    }

    /// One-dimensional tensor over `values`.
    pub fn flat(name: impl Into<String>, values: Vec<f32>) -> Result<Self, NumericsError> {
        let n = values.len();
        Self::new(name, vec![n], values)
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            values: vec![0.0; n],
        }
    }

    /// A zero tensor with the same name and shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.name.clone(), self.shape.clone())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Mutable access to the raw values. Callers are responsible for keeping
    /// them finite.
    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Reinterprets the values under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        Self::new(self.name, shape, self.values)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm accumulated in f64.
    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Largest absolute elementwise difference against `other`.
    pub fn max_abs_diff(&self, other: &GradTensor) -> f32 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Name and shape of one tensor, without values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<&GradTensor> for TensorSpec {
    fn from(t: &GradTensor) -> Self {
        Self {
            name: t.name.clone(),
            shape: t.shape.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        let err = GradTensor::new("w", vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, NumericsError::Shape(_)));
    }

    #[test]
    fn rejects_non_finite() {
        let err = GradTensor::flat("w", vec![0.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { index: 1, .. }));
        assert!(GradTensor::flat("w", vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn reshape_keeps_values() {
        let t = GradTensor::flat("w", vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.clone().reshape(vec![2, 2]).unwrap();
        assert_eq!(r.values(), t.values());
        assert_eq!(r.shape(), &[2, 2]);
        assert!(t.reshape(vec![3]).is_err());
    }
}
