use crate::error::{domain, Result};

/// Dense row-major `f64` array with explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(domain(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Slice of the `index`-th sub-tensor along the leading axis.
    pub fn outer(&self, index: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0];
        &self.data[index * stride..(index + 1) * stride]
    }
}

/// A `b x c x h x w` batch of feature maps; each `(sample, channel)` map is one
/// draw for the mutual-information estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    tensor: Tensor,
}

impl FeatureBatch {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 4 {
            return Err(domain(format!(
                "feature batch must be 4-D, got shape {:?}",
                tensor.shape()
            )));
        }
        if !tensor.all_finite() {
            return Err(domain("feature batch contains non-finite values"));
        }
        Ok(Self { tensor })
    }

    /// Skips the finiteness check so a diverging network surfaces as a
    /// non-finite loss rather than a shape error.
    pub(crate) fn from_raw(tensor: Tensor) -> Self {
        debug_assert_eq!(tensor.shape().len(), 4);
        Self { tensor }
    }

    pub fn from_vec(b: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(vec![b, c, h, w], data)?)
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }

    /// Number of `(sample, channel)` maps.
    pub fn rows(&self) -> usize {
        self.batch() * self.channels()
    }

    /// The `row`-th map, rows ordered sample-major.
    pub fn map(&self, row: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.tensor.data()[row * n..(row + 1) * n]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn feature_batch_rows() {
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(f64::from).collect();
        let fb = FeatureBatch::from_vec(2, 3, 2, 2, data).unwrap();
        assert_eq!(fb.rows(), 6);
        assert_eq!(fb.map(4), &[16.0, 17.0, 18.0, 19.0]);
        assert!(FeatureBatch::new(Tensor::zeros(vec![2, 2])).is_err());
        assert!(FeatureBatch::from_vec(1, 1, 1, 1, vec![f64::NAN]).is_err());
    }
}
