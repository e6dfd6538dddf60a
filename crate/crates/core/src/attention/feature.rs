use crate::error::{shape_err, Error, Result};
use crate::numerics::Matrix;

/// `[tokens x channels]` features with the spatial grid they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Matrix,
    height: usize,
    width: usize,
}

impl FeatureMap {
    pub fn new(values: Matrix, height: usize, width: usize) -> Result<Self> {
        if height * width != values.rows() {
            return Err(shape_err!(
                "{}x{} grid for {} tokens",
                height,
                width,
                values.rows()
            ));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("feature map values".into()));
        }
        Ok(Self {
            values,
            height,
            width,
        })
    }

    /// Features with no meaningful layout, treated as a `1 x N` strip.
    pub fn flat(values: Matrix) -> Result<Self> {
        let n = values.rows();
        Self::new(values, 1, n)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    pub fn tokens(&self) -> usize {
        self.values.rows()
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Matrix) -> Result<Self> {
        Self::new(values, self.height, self.width)
    }
}
